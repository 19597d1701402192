"""Checkpoint files: a text header followed by little-endian float32 tensors.

Header lines (UTF-8, ``key: value``)::

    graspcritic-checkpoint 1
    config_hash: <hex>
    actor_sizes: 54,256,256,6
    critic_sizes: 54,256,256,2
    obs_norm_count: <float>
    obs_norm_mean: <comma-separated floats>
    obs_norm_var: <comma-separated floats>
    meta: <single-line JSON>
    tensor: <name> <d0>x<d1>...
    ...
    end_header

Tensor payloads follow in header order with no padding.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .agent import ActorCritic

MAGIC = "graspcritic-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _floats(a) -> str:
    return ",".join(repr(float(x)) for x in np.ravel(a))


def save_checkpoint(path, agent: ActorCritic, meta: dict, cfg_hash: str) -> None:
    lines = [f"{MAGIC} {VERSION}",
             f"config_hash: {cfg_hash}",
             "actor_sizes: " + ",".join(map(str, agent.actor.sizes)),
             "critic_sizes: " + ",".join(map(str, agent.critic.sizes)),
             f"obs_norm_count: {float(agent.norm.count)!r}",
             "obs_norm_mean: " + _floats(agent.norm.mean),
             "obs_norm_var: " + _floats(agent.norm.var),
             "meta: " + json.dumps(meta, sort_keys=True)]
    names = sorted(agent.params)
    for k in names:
        lines.append(f"tensor: {k} " + "x".join(map(str, agent.params[k].shape)))
    lines.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode())
        for k in names:
            fh.write(np.ascontiguousarray(agent.params[k], dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[ActorCritic, dict, str]:
    """Returns ``(agent, meta, config_hash)``; raises ``CheckpointError`` on any format problem."""
    data = Path(path).read_bytes()
    end = data.find(b"\nend_header\n")
    if end < 0:
        raise CheckpointError(f"{path}: missing end_header")
    try:
        header = data[:end].decode().split("\n")
    except UnicodeDecodeError:
        raise CheckpointError(f"{path}: header is not text") from None
    first = header[0].split()
    if len(first) != 2 or first[0] != MAGIC:
        raise CheckpointError(f"{path}: not a graspcritic checkpoint")
    if first[1] != str(VERSION):
        raise CheckpointError(f"{path}: checkpoint format version mismatch (file {first[1]}, expected {VERSION})")
    fields, tensors = {}, []
    for line in header[1:]:
        key, _, value = line.partition(": ")
        if key == "tensor":
            name, shape = value.split(" ")
            tensors.append((name, tuple(int(d) for d in shape.split("x") if d)))
        else:
            fields[key] = value
    try:
        actor = [int(x) for x in fields["actor_sizes"].split(",")]
        critic = [int(x) for x in fields["critic_sizes"].split(",")]
        meta = json.loads(fields["meta"])
        agent = ActorCritic(actor[0], actor[-1], actor[1:-1], critic[1:-1])
        agent.norm.count = float(fields["obs_norm_count"])
        agent.norm.mean = np.array([float(x) for x in fields["obs_norm_mean"].split(",")])
        agent.norm.var = np.array([float(x) for x in fields["obs_norm_var"].split(",")])
        cfg_hash = fields["config_hash"]
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed header ({exc})") from None
    offset = end + len(b"\nend_header\n")
    for name, shape in tensors:
        nbytes = 4 * int(np.prod(shape))
        if offset + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated tensor {name}")
        arr = np.frombuffer(data, dtype="<f4", count=int(np.prod(shape)), offset=offset).reshape(shape)
        agent.params[name] = arr.astype(np.float32)
        offset += nbytes
    if offset != len(data):
        raise CheckpointError(f"{path}: trailing bytes after tensors")
    missing = {agent.actor.key(i, k) for i in range(agent.actor.n_layers) for k in ("weight", "bias")}
    missing |= {agent.critic.key(i, k) for i in range(agent.critic.n_layers) for k in ("weight", "bias")}
    missing |= {"log_std"}
    missing -= set(agent.params)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)}")
    return agent, meta, cfg_hash
