"""Quasi-static planar finger-gaiting environment.

A convex object sits in a hand with ``n_fingers`` fingertips. Each finger
lives on a fixed sector of the hand frame (its workspace) and is described by
its hand-frame polar angle; a contact's arclength follows from its hand angle
and the object angle. Per step every finger gets a tangential slide command
(arclength) and an attach/detach command. Fingers track their commands,
clamped to their sectors, and the object turns by the friction-weighted mean
of the attached fingers' angular displacements; attached fingers whose
displacement differs from the object's slip along the boundary.

All state is batched: arrays carry a leading batch axis so many independent
episodes step together. ``PlanarHandEnv.reset`` with a single grasp gives a
batch of one.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .geometry import ObjectShape, ShapeTable, cone_edge_wrenches, epsilon_quality_batch, probe_radius_for, wrap_angle

if TYPE_CHECKING:
    from .graspgen import Grasp


class InvalidGraspError(ValueError):
    pass


class TerminalStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    n_fingers: int = 3
    dt: float = 4.0 / 60.0
    horizon_tau: float = 10.0
    success_threshold_theta: float = 0.4
    success_dwell: float = 0.5
    workspace_arc: float = 0.45
    max_step_frac: float = 0.04
    slip_noise_std: float = 0.01
    obs_window: float = 0.1
    obs_rate: float = 60.0
    drop_epsilon_min: float = 1e-3
    drop_patience: int = 3
    randomize: bool = True
    mu_range: tuple = (0.3, 0.8)
    mu_nominal: float = 0.5
    slip_scale_range: tuple = (0.5, 2.0)
    action_delay_prob: float = 0.25
    goal_resample: bool = True
    max_goals: int = 3
    w_rot: float = 1.0
    w_pos: float = 0.1
    w_drop: float = 5.0
    n_probes: int = 16
    probe_radius: float | None = None

    def __post_init__(self):
        for name in ("mu_range", "slip_scale_range"):
            object.__setattr__(self, name, tuple(float(x) for x in getattr(self, name)))
        if self.n_fingers < 2:
            raise ValueError("n_fingers must be >= 2")
        if not 0 < self.success_threshold_theta < np.pi:
            raise ValueError("success_threshold_theta must lie in (0, pi)")
        if not _is_integral(self.horizon_tau / self.dt):
            raise ValueError("horizon_tau / dt must be integral")
        if not _is_integral(self.obs_window * self.obs_rate):
            raise ValueError("obs_window * obs_rate must be integral")
        if not _is_integral(self.dt * self.obs_rate):
            raise ValueError("dt * obs_rate must be integral")
        if not 0 < self.workspace_arc < 1:
            raise ValueError("workspace_arc must lie in (0, 1)")
        if self.max_goals < 1:
            raise ValueError("max_goals must be >= 1")

    @property
    def horizon_steps(self) -> int:
        return int(round(self.horizon_tau / self.dt))

    @property
    def dwell_steps(self) -> int:
        return max(1, int(np.ceil(self.success_dwell / self.dt - 1e-9)))

    @property
    def window_len(self) -> int:
        return int(round(self.obs_window * self.obs_rate))

    @property
    def ticks_per_step(self) -> int:
        return int(round(self.dt * self.obs_rate))

    @property
    def max_steps(self) -> int:
        return self.horizon_steps * (self.max_goals if self.goal_resample else 1)

    @property
    def half_width(self) -> float:
        """Half the angular width of a finger sector."""
        return self.workspace_arc * np.pi

    @property
    def centers(self) -> np.ndarray:
        return 2 * np.pi * np.arange(self.n_fingers) / self.n_fingers

    @property
    def action_dim(self) -> int:
        return 2 * self.n_fingers

    @property
    def obs_dim(self) -> int:
        return self.window_len * 2 * self.n_fingers + 2 + self.n_probes

    def with_shapes(self, shapes: Sequence[ObjectShape]) -> "EnvConfig":
        """Fix the probe radius from a shape set if it is not set yet."""
        if self.probe_radius is not None:
            return self
        return dataclasses.replace(self, probe_radius=probe_radius_for(shapes))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mu_range"] = list(self.mu_range)
        d["slip_scale_range"] = list(self.slip_scale_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown env config fields: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _is_integral(x: float) -> bool:
    return abs(x - round(x)) < 1e-9


@dataclass
class EnvState:
    """Batched episode state. Hand-frame finger angles are unwrapped around each sector centre."""

    shape_idx: np.ndarray
    object_angle: np.ndarray
    goal_angle: np.ndarray
    attached: np.ndarray
    finger_h: np.ndarray
    finger_cmd: np.ndarray
    default_h: np.ndarray
    step: np.ndarray
    goal_step: np.ndarray
    dwell: np.ndarray
    low_eps: np.ndarray
    goals_reached: np.ndarray
    done: np.ndarray
    dropped: np.ndarray
    mu: np.ndarray
    slip_scale: np.ndarray
    delay: np.ndarray
    prev_action: np.ndarray
    noise: np.ndarray = field(repr=False)
    goal_draws: np.ndarray = field(repr=False)
    window: np.ndarray = field(repr=False)
    grasp_id: np.ndarray = field(repr=False)

    @property
    def batch_size(self) -> int:
        return len(self.object_angle)

    def copy(self) -> "EnvState":
        return EnvState(**{f.name: getattr(self, f.name).copy() for f in dataclasses.fields(self)})

    def take(self, idx) -> "EnvState":
        return EnvState(**{f.name: getattr(self, f.name)[idx].copy() for f in dataclasses.fields(self)})

    @staticmethod
    def concat(states: Sequence["EnvState"]) -> "EnvState":
        return EnvState(**{f.name: np.concatenate([getattr(s, f.name) for s in states])
                           for f in dataclasses.fields(EnvState)})

    def replace_rows(self, idx, other: "EnvState") -> None:
        for f in dataclasses.fields(self):
            getattr(self, f.name)[idx] = getattr(other, f.name)


@dataclass
class Observation:
    window: np.ndarray      # (B, window_len * 2 * n_fingers)
    goal_delta: np.ndarray  # (B, 2): cos, sin of the rotation still required
    shape_enc: np.ndarray   # (B, n_probes)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.window, self.goal_delta, self.shape_enc], axis=1)


@dataclass
class StepResult:
    next_state: EnvState
    obs: Observation
    r_dense: np.ndarray
    r_sparse: np.ndarray
    dropped: np.ndarray
    success: np.ndarray
    time_to_goal: np.ndarray  # seconds, NaN where no goal was reached this step
    done: np.ndarray
    timeout: np.ndarray


def angle_to_goal(state: EnvState) -> np.ndarray:
    """Unsigned rotation still required, in [0, pi]."""
    return np.abs(wrap_angle(state.goal_angle - state.object_angle))


class PlanarHandEnv:
    def __init__(self, config: EnvConfig, shapes: Sequence[ObjectShape]):
        self.config = config.with_shapes(shapes)
        self.table = ShapeTable(shapes)
        self.shapes = self.table.shapes

    # -- geometry helpers -------------------------------------------------
    def contact_s(self, shape_idx, finger_h, object_angle) -> np.ndarray:
        """Object-frame arclength under each finger."""
        si = np.asarray(shape_idx)[:, None]
        _, _, s = self.table.ray_hit(si, finger_h - np.asarray(object_angle)[:, None])
        return s

    def hand_angles(self, shape_idx, contact_s, object_angle) -> np.ndarray:
        """Hand-frame finger angles for contacts at ``contact_s``, unwrapped around sector centres."""
        si = np.asarray(shape_idx)[:, None]
        p, _ = self.table.point(si, np.asarray(contact_s, dtype=np.float64))
        ang = np.arctan2(p[..., 1], p[..., 0]) + np.asarray(object_angle)[:, None]
        c = self.config.centers
        return c + wrap_angle(ang - c)

    def in_workspace(self, finger_h) -> np.ndarray:
        return np.abs(finger_h - self.config.centers) <= self.config.half_width + 1e-9

    def grasp_epsilon(self, shape_idx, finger_h, object_angle, attached, mu) -> np.ndarray:
        """Epsilon quality of the attached contacts; detached fingers duplicate an attached one."""
        si = np.asarray(shape_idx)
        s = self.contact_s(si, finger_h, object_angle)
        first = np.argmax(attached, axis=1)
        fill = np.take_along_axis(s, first[:, None], axis=1)
        s = np.where(attached, s, fill)
        fill_mu = np.take_along_axis(mu, first[:, None], axis=1)
        mu = np.where(attached, mu, fill_mu)
        p, n = self.table.point(si[:, None], s)
        w = cone_edge_wrenches(p, n, mu, self.table.rho[si])
        eps = epsilon_quality_batch(w)
        return np.where(attached.any(axis=1), eps, 0.0)

    def observe(self, state: EnvState) -> Observation:
        cfg = self.config
        delta = wrap_angle(state.goal_angle - state.object_angle)
        enc = self.table.encoding(state.shape_idx, state.object_angle, cfg.n_probes, cfg.probe_radius)
        return Observation(
            window=state.window.reshape(state.batch_size, -1).copy(),
            goal_delta=np.stack([np.cos(delta), np.sin(delta)], axis=1),
            shape_enc=enc,
        )

    def _sample(self, h, attached) -> np.ndarray:
        """One window sample: measured then commanded, normalized hand positions."""
        c = self.config.centers
        meas = np.where(attached, (h - c) / (2 * np.pi), -1.0)
        return meas

    # -- episode API ------------------------------------------------------
    def reset(self, grasp: "Grasp", goal_angle: float, seed: int):
        """Single-episode reset; returns a batch of one."""
        state = self.reset_batch([grasp], np.array([goal_angle]), [seed])
        return state, self.observe(state)

    def initial_state(self, grasps: Sequence["Grasp"], goal_angles, randomization=None) -> EnvState:
        """Deterministic part of reset: geometry and the back-filled window.

        ``randomization`` supplies per-episode mu, slip scale, delay flags,
        noise and goal draws; when omitted nominal physics and zero noise are used.
        """
        cfg = self.config
        b, n = len(grasps), cfg.n_fingers
        goal_angles = np.broadcast_to(np.asarray(goal_angles, dtype=np.float64), (b,))
        try:
            si = np.array([self.table.index[g.shape] for g in grasps], dtype=np.intp)
        except KeyError as exc:
            raise InvalidGraspError(f"grasp on unknown shape {exc.args[0]!r}") from None
        contact = np.array([g.contact_s for g in grasps], dtype=np.float64).reshape(b, -1)
        if contact.shape[1] != n:
            raise InvalidGraspError(f"grasp needs {n} contacts, got {contact.shape[1]}")
        phi = np.array([g.initial_object_angle for g in grasps], dtype=np.float64)
        base = np.array([g.base_angle for g in grasps], dtype=np.float64)
        h = self.hand_angles(si, contact, phi)
        bad = ~self.in_workspace(h)
        if bad.any():
            i, f = np.argwhere(bad)[0]
            raise InvalidGraspError(f"grasp {grasps[i].id}: finger {f} contact outside its workspace")
        if randomization is None:
            randomization = self.nominal_randomization(b)
        mu, slip_scale, delay, noise, goal_draws = randomization
        attached = np.ones((b, n), dtype=bool)
        sample = np.concatenate([self._sample(h, attached), (h - cfg.centers) / (2 * np.pi)], axis=1)
        window = np.repeat(sample[:, None, :], cfg.window_len, axis=1)
        zeros = np.zeros(b, dtype=np.int64)
        return EnvState(
            shape_idx=si,
            object_angle=phi.copy(),
            goal_angle=wrap_angle(goal_angles - base),
            attached=attached,
            finger_h=h,
            finger_cmd=h.copy(),
            default_h=np.broadcast_to(cfg.centers, h.shape).copy(),
            step=zeros.copy(),
            goal_step=zeros.copy(),
            dwell=zeros.copy(),
            low_eps=zeros.copy(),
            goals_reached=zeros.copy(),
            done=np.zeros(b, dtype=bool),
            dropped=np.zeros(b, dtype=bool),
            mu=mu,
            slip_scale=slip_scale,
            delay=delay,
            prev_action=np.zeros((b, cfg.action_dim)),
            noise=noise,
            goal_draws=goal_draws,
            window=window,
            grasp_id=np.array([g.id for g in grasps], dtype=np.int64),
        )

    def nominal_randomization(self, b: int):
        cfg = self.config
        return (np.full((b, cfg.n_fingers), cfg.mu_nominal), np.ones(b), np.zeros(b, dtype=bool),
                np.zeros((b, cfg.max_steps)), np.zeros((b, cfg.max_goals)))

    def draw_randomization(self, seeds: Sequence[int]):
        """Per-episode physics and noise, each episode from its own generator."""
        cfg = self.config
        b, n = len(seeds), cfg.n_fingers
        mu = np.empty((b, n))
        slip = np.empty(b)
        delay = np.empty(b, dtype=bool)
        noise = np.empty((b, cfg.max_steps))
        goals = np.empty((b, cfg.max_goals))
        for i, sd in enumerate(seeds):
            rng = np.random.default_rng(sd)
            mu[i] = rng.uniform(*cfg.mu_range, size=n)
            slip[i] = rng.uniform(*cfg.slip_scale_range)
            delay[i] = rng.random() < cfg.action_delay_prob
            noise[i] = rng.standard_normal(cfg.max_steps)
            goals[i] = rng.uniform(-np.pi, np.pi, size=cfg.max_goals)
        if not cfg.randomize:
            mu[:] = cfg.mu_nominal
            slip[:] = 1.0
            delay[:] = False
        return mu, slip, delay, noise, goals

    def reset_batch(self, grasps: Sequence["Grasp"], goal_angles, seeds: Sequence[int]) -> EnvState:
        return self.initial_state(grasps, goal_angles, self.draw_randomization(seeds))

    def step(self, state: EnvState, action) -> StepResult:
        cfg = self.config
        if np.any(state.done):
            raise TerminalStateError("step() called on a terminal state")
        action = np.asarray(action, dtype=np.float64).reshape(state.batch_size, cfg.action_dim)
        if not np.all(np.isfinite(action)):
            raise ValueError("non-finite action")
        s = state.copy()
        n = cfg.n_fingers
        b = np.arange(s.batch_size)
        a = np.clip(action, -1.0, 1.0)
        eff = np.where(s.delay[:, None], s.prev_action, a)
        s.prev_action = a

        perim = self.table.perimeter[s.shape_idx]
        slide = eff[:, :n] * cfg.max_step_frac * perim[:, None]
        want = eff[:, n:] >= 0.0
        was_attached = state.attached
        attached = was_attached & want

        phi, h = s.object_angle, s.finger_h
        lo = cfg.centers - cfg.half_width
        hi = cfg.centers + cfg.half_width
        _, edge, _ = self.table.ray_hit(s.shape_idx[:, None], h - phi[:, None])
        radius = self.table.apothems[s.shape_idx[:, None], edge]
        cmd = np.clip(h + slide / radius, lo, hi)

        wts = np.where(attached, s.mu, 0.0)
        wsum = wts.sum(axis=1)
        raw = np.sum(wts * (cmd - h), axis=1) / np.where(wsum > 0, wsum, 1.0)
        dphi = np.where(wsum > 0, raw, 0.0)
        h_new = cmd
        noise = s.noise[b, np.minimum(s.step, cfg.max_steps - 1)] * cfg.slip_noise_std * s.slip_scale
        phi_new = phi + dphi + noise
        attached = attached | (want & ~was_attached)

        n_att = attached.sum(axis=1)
        eps = self.grasp_epsilon(s.shape_idx, h_new, phi_new, attached, s.mu)
        low_eps = np.where(eps < cfg.drop_epsilon_min, s.low_eps + 1, 0)
        dropped = (n_att < 2) | (low_eps >= cfg.drop_patience)

        prev_gap = np.abs(wrap_angle(s.goal_angle - phi))
        gap = np.abs(wrap_angle(s.goal_angle - phi_new))
        inside = (gap < cfg.success_threshold_theta) & ~dropped
        dwell = np.where(inside, s.dwell + 1, 0)
        success = dwell >= cfg.dwell_steps
        goal_step = s.goal_step + 1
        ttg = np.where(success, goal_step * cfg.dt, np.nan)
        goals_reached = s.goals_reached + success
        resample = success & cfg.goal_resample & (goals_reached < cfg.max_goals)
        next_goal = s.goal_draws[b, np.minimum(goals_reached, cfg.max_goals) - 1]
        timeout = ~success & ~dropped & (goal_step >= cfg.horizon_steps)
        done = dropped | (success & ~resample) | timeout

        dev = np.mean(np.abs(h_new - s.default_h), axis=1) / (2 * np.pi)
        r_dense = cfg.w_rot * (prev_gap - gap) - cfg.w_pos * dev - cfg.w_drop * dropped
        r_sparse = success.astype(np.float64)

        ticks = cfg.ticks_per_step
        c = cfg.centers
        samples = []
        for k in range(1, ticks + 1):
            hk = h + (h_new - h) * (k / ticks)
            samples.append(np.concatenate([self._sample(hk, attached), (cmd - c) / (2 * np.pi)], axis=1))
        window = np.concatenate([s.window, np.stack(samples, axis=1)], axis=1)[:, -cfg.window_len:]

        s.object_angle = phi_new
        s.finger_h = h_new
        s.finger_cmd = cmd
        s.attached = attached
        s.low_eps = low_eps
        s.dropped = dropped
        s.dwell = np.where(resample, 0, dwell)
        s.goal_step = np.where(resample, 0, goal_step)
        s.goal_angle = np.where(resample, next_goal, s.goal_angle)
        s.goals_reached = goals_reached
        s.step = s.step + 1
        s.done = done
        s.window = window
        return StepResult(s, self.observe(s), r_dense, r_sparse, dropped, success, ttg, done, timeout)

    def is_success(self, state: EnvState) -> np.ndarray:
        """Instantaneous success candidate: within the angular threshold and not dropped."""
        return (angle_to_goal(state) < self.config.success_threshold_theta) & ~state.dropped

    def finger_s(self, state: EnvState) -> np.ndarray:
        """Contact arclengths; NaN marks a detached finger."""
        s = self.contact_s(state.shape_idx, state.finger_h, state.object_angle)
        return np.where(state.attached, s, np.nan)


TRACE_COLUMNS = ("step", "object_angle", "goal_angle", "attached", "finger_h", "r_dense", "r_sparse",
                 "dropped", "success", "done")


def write_trace(path, rows: Sequence[dict]) -> None:
    """Episode trace CSV; per-finger fields are ';'-joined."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in TRACE_COLUMNS])


def _fmt(v) -> str:
    if isinstance(v, (list, tuple, np.ndarray)):
        return ";".join(_fmt(x) for x in np.asarray(v).ravel())
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def trace_row(state: EnvState, result: StepResult | None = None, i: int = 0) -> dict:
    st = result.next_state if result is not None else state
    return {
        "step": int(st.step[i]),
        "object_angle": float(st.object_angle[i]),
        "goal_angle": float(st.goal_angle[i]),
        "attached": st.attached[i].astype(int),
        "finger_h": st.finger_h[i],
        "r_dense": float(result.r_dense[i]) if result is not None else 0.0,
        "r_sparse": float(result.r_sparse[i]) if result is not None else 0.0,
        "dropped": bool(st.dropped[i]),
        "success": bool(result.success[i]) if result is not None else False,
        "done": bool(st.done[i]),
    }
