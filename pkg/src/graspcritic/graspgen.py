"""Candidate grasp sampling, stability filtering and hand-base rotation grids."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .env import EnvConfig
from .geometry import ObjectShape, grasp_epsilon, ray_hit, wrap_angle

log = logging.getLogger(__name__)

DISTINCT_FRAC = 0.02
MAX_RETRIES = 100


class EmptyCandidateSetError(ValueError):
    pass


@dataclass(frozen=True)
class Grasp:
    shape: str
    contact_s: tuple
    initial_object_angle: float
    base_angle: float = 0.0
    epsilon: float = 0.0
    id: int = 0


class CandidateSet(list):
    """A list of grasps carrying sampler metadata."""

    def __init__(self, grasps=(), requested=0, warnings=0, notes=None):
        super().__init__(grasps)
        self.requested = requested
        self.warnings = warnings
        self.notes = list(notes or [])


def workspace_arclengths(shape: ObjectShape, object_angle: float, config: EnvConfig):
    """Arclength interval (start, width) of the boundary inside each finger sector."""
    lo = config.centers - config.half_width - object_angle
    hi = config.centers + config.half_width - object_angle
    _, _, s_lo = ray_hit(shape, lo)
    _, _, s_hi = ray_hit(shape, hi)
    width = np.mod(s_hi - s_lo, shape.perimeter)
    return s_lo, width


def _cyclic_gap(a, b, perimeter):
    d = np.mod(a - b, perimeter)
    return np.minimum(d, perimeter - d)


def sample_candidates(shape: ObjectShape, object_angle: float, k: int, seed: int,
                      config: EnvConfig, mu: float | None = None, id_offset: int = 0) -> CandidateSet:
    """Draw ``k`` grasps with contacts uniform in arclength over each finger's workspace.

    Contacts closer than 2% of the perimeter are rejected and redrawn, at
    most ``MAX_RETRIES`` times per grasp; exhausted grasps are dropped and
    counted in ``warnings``. Every grasp has ``base_angle = 0``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    mu = config.mu_nominal if mu is None else mu
    rng = np.random.default_rng(seed)
    s_lo, width = workspace_arclengths(shape, object_angle, config)
    margin = DISTINCT_FRAC * shape.perimeter
    n = config.n_fingers
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    chosen, warnings = [], 0
    for _ in range(k):
        for _ in range(MAX_RETRIES):
            s = np.mod(s_lo + rng.random(n) * width, shape.perimeter)
            if all(_cyclic_gap(s[i], s[j], shape.perimeter) > margin for i, j in pairs):
                chosen.append(s)
                break
        else:
            warnings += 1
    if warnings:
        log.warning("%s: %d of %d grasps exhausted rejection sampling", shape.name, warnings, k)
    if not chosen:
        return CandidateSet([], requested=k, warnings=warnings)
    s_all = np.array(chosen)
    eps = grasp_epsilon(shape, s_all, mu)
    grasps = [Grasp(shape.name, tuple(float(x) for x in s), float(wrap_angle(object_angle)), 0.0, float(e),
                    id_offset + i)
              for i, (s, e) in enumerate(zip(s_all, eps))]
    return CandidateSet(grasps, requested=k, warnings=warnings)


def filter_stable(grasps: Sequence[Grasp], epsilon_min: float | None = None, rel: float = 0.05) -> list[Grasp]:
    """Keep grasps with ``epsilon >= epsilon_min`` (default ``rel`` times the batch maximum)."""
    if not grasps:
        raise EmptyCandidateSetError("no candidate grasps")
    if epsilon_min is None:
        best = max(g.epsilon for g in grasps)
        if best <= 0:
            raise EmptyCandidateSetError("no candidate grasp is in force closure")
        epsilon_min = rel * best
    kept = [g for g in grasps if g.epsilon >= epsilon_min]
    if not kept:
        raise EmptyCandidateSetError("no stable grasps survive the epsilon filter")
    return kept


def enumerate_base_rotations(limit: float = np.pi / 2, step: float = np.pi / 16) -> list[float]:
    """Symmetric grid ``{-limit, ..., -step, 0, step, ..., limit}``."""
    if not 0 < step <= limit:
        raise ValueError("need 0 < step <= limit")
    m = int(np.floor(limit / step + 1e-9))
    return [float(i * step) for i in range(-m, m + 1)]


def base_grid(count: int, limit: float = np.pi / 2) -> list[float]:
    """``count`` evenly spaced base angles spanning ``[-limit, limit]`` (``{0}`` for one)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if count == 1:
        return [0.0]
    return [float(x) for x in np.linspace(-limit, limit, count)]


def with_base(grasp: Grasp, base_angle: float) -> Grasp:
    return replace(grasp, base_angle=float(base_angle))


CSV_COLUMNS = ("id", "shape", "contact_s", "initial_object_angle", "base_angle", "epsilon")


def write_grasps_csv(path: str | Path, grasps: Sequence[Grasp]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for g in grasps:
            w.writerow([g.id, g.shape, ";".join(repr(x) for x in g.contact_s), repr(g.initial_object_angle),
                        repr(g.base_angle), repr(g.epsilon)])


def read_grasps_csv(path: str | Path) -> list[Grasp]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(Grasp(row["shape"], tuple(float(x) for x in row["contact_s"].split(";")),
                             float(row["initial_object_angle"]), float(row["base_angle"]),
                             float(row["epsilon"]), int(row["id"])))
    return out
