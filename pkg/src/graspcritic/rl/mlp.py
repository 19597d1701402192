"""Tanh multilayer perceptrons with hand-written reverse-mode gradients, and Adam."""
from __future__ import annotations

import numpy as np

NARROW = 16
MIN_ROWS = 16


def matmul_rows(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``x @ w`` whose rows do not depend on how many rows are in the batch.

    BLAS picks different kernels for very few rows, which round differently,
    so short batches are zero-padded to ``MIN_ROWS``. Narrow outputs take
    size-dependent BLAS paths at any row count, so they go through einsum,
    whose per-element summation order is fixed.
    """
    if w.shape[1] < NARROW:
        return np.einsum("ij,jk->ik", x, w)
    m = x.shape[0]
    if m < MIN_ROWS:
        pad = np.zeros((MIN_ROWS - m, x.shape[1]), dtype=x.dtype)
        return (np.concatenate([x, pad]) @ w)[:m]
    return x @ w


class Mlp:
    """Fully connected net, tanh hidden layers, linear output.

    Parameters live in ``params`` under ``{name}.{i}.weight`` (in, out) and
    ``{name}.{i}.bias``.
    """

    def __init__(self, name: str, sizes, params: dict | None = None):
        self.name = name
        self.sizes = tuple(int(s) for s in sizes)
        if len(self.sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.params = params if params is not None else {}

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def key(self, i: int, kind: str) -> str:
        return f"{self.name}.{i}.{kind}"

    def init(self, rng: np.random.Generator, out_gain: float = 1.0, dtype=np.float32,
             out_bias=None) -> "Mlp":
        """Orthogonal init; hidden gain sqrt(2), output gain ``out_gain``, zero biases."""
        for i in range(self.n_layers):
            fan_in, fan_out = self.sizes[i], self.sizes[i + 1]
            gain = out_gain if i == self.n_layers - 1 else np.sqrt(2.0)
            a = rng.standard_normal((max(fan_in, fan_out), min(fan_in, fan_out)))
            q, r = np.linalg.qr(a)
            q = q * np.sign(np.diag(r))
            w = q if fan_in >= fan_out else q.T
            self.params[self.key(i, "weight")] = (gain * w[:fan_in, :fan_out]).astype(dtype)
            self.params[self.key(i, "bias")] = np.zeros(fan_out, dtype=dtype)
        if out_bias is not None:
            self.params[self.key(self.n_layers - 1, "bias")][:] = out_bias
        return self

    def forward(self, x: np.ndarray, cache: bool = False):
        acts = [x]
        h = x
        for i in range(self.n_layers):
            z = matmul_rows(h, self.params[self.key(i, "weight")]) + self.params[self.key(i, "bias")]
            h = np.tanh(z) if i < self.n_layers - 1 else z
            if cache:
                acts.append(h)
        return (h, acts) if cache else h

    def backward(self, acts, grad_out: np.ndarray) -> dict:
        """Parameter gradients given ``dL/d(output)`` and the cached activations."""
        grads = {}
        g = grad_out
        for i in reversed(range(self.n_layers)):
            if i < self.n_layers - 1:
                g = g * (1.0 - acts[i + 1] ** 2)
            grads[self.key(i, "weight")] = acts[i].T @ g
            grads[self.key(i, "bias")] = g.sum(axis=0)
            if i > 0:
                g = g @ self.params[self.key(i, "weight")].T
        return grads


class Adam:
    def __init__(self, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        if self.lr == 0:
            return
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, g in grads.items():
            p = params[k]
            m = self.m.setdefault(k, np.zeros_like(p))
            v = self.v.setdefault(k, np.zeros_like(p))
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def state_dict(self) -> dict:
        return {"lr": self.lr, "t": self.t, "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}

    def load_state_dict(self, d: dict) -> None:
        self.lr, self.t = d["lr"], d["t"]
        self.m = {k: v.copy() for k, v in d["m"].items()}
        self.v = {k: v.copy() for k, v in d["v"].items()}


def clip_by_global_norm(grads: dict, max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for g in grads.values():
            g *= scale
    return norm
