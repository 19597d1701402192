"""Planar polygon geometry, contact wrenches and the epsilon grasp quality.

Objects are convex, counter-clockwise polygons whose area centroid sits at the
object-frame origin. Boundary positions are arclengths measured
counter-clockwise from vertex 0.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml


class InvalidShapeError(ValueError):
    pass


class InvalidContactError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ObjectShape:
    """Convex CCW polygon in the object frame (meters)."""

    name: str
    vertices: np.ndarray
    perimeter: float = field(init=False)

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64))
        if v.ndim != 2 or v.shape[1] != 2 or len(v) < 3:
            raise InvalidShapeError(f"{self.name}: need at least 3 2D vertices")
        edges = np.roll(v, -1, axis=0) - v
        lengths = np.hypot(edges[:, 0], edges[:, 1])
        perimeter = float(lengths.sum())
        if perimeter <= 0 or np.any(lengths <= 0):
            raise InvalidShapeError(f"{self.name}: degenerate polygon")
        nxt = np.roll(edges, -1, axis=0)
        cross = edges[:, 0] * nxt[:, 1] - edges[:, 1] * nxt[:, 0]
        if np.any(cross < -1e-12 * perimeter**2):
            raise InvalidShapeError(f"{self.name}: polygon must be convex and counter-clockwise")
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "perimeter", perimeter)
        tangents = edges / lengths[:, None]
        # inward normal of a CCW edge is its direction rotated by +90 degrees
        normals = np.stack([-tangents[:, 1], tangents[:, 0]], axis=1)
        apothems = -np.einsum("ij,ij->i", normals, v)
        if np.any(apothems <= 0):
            raise InvalidShapeError(f"{self.name}: origin must lie strictly inside the polygon")
        cum = np.concatenate([[0.0], np.cumsum(lengths)])
        for name, arr in (("_edges", edges), ("_lengths", lengths), ("_tangents", tangents),
                          ("_normals", normals), ("_apothems", apothems), ("_cum", cum)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_vertices(cls, name: str, vertices, recenter: bool = True) -> "ObjectShape":
        v = np.asarray(vertices, dtype=np.float64)
        if len(v) >= 3 and _signed_area(v) < 0:
            v = v[::-1]
        if recenter:
            v = v - polygon_centroid(v)
        return cls(name, v)

    @classmethod
    def regular(cls, name: str, n: int, radius: float, phase: float = 0.0) -> "ObjectShape":
        a = phase + 2 * np.pi * np.arange(n) / n
        return cls.from_vertices(name, radius * np.stack([np.cos(a), np.sin(a)], axis=1))

    @classmethod
    def rectangle(cls, name: str, width: float, height: float) -> "ObjectShape":
        w, h = width / 2, height / 2
        return cls.from_vertices(name, [(w, -h), (w, h), (-w, h), (-w, -h)])

    @property
    def n_edges(self) -> int:
        return len(self.vertices)

    @property
    def max_radius(self) -> float:
        return float(np.hypot(self.vertices[:, 0], self.vertices[:, 1]).max())

    @property
    def mean_radius(self) -> float:
        """Mean vertex distance from the origin; the torque normalization length."""
        return float(np.hypot(self.vertices[:, 0], self.vertices[:, 1]).mean())

    def edge_at(self, s) -> np.ndarray:
        s = np.mod(np.asarray(s, dtype=np.float64), self.perimeter)
        idx = np.searchsorted(self._cum, s, side="right") - 1
        return np.clip(idx, 0, self.n_edges - 1)

    def to_dict(self) -> dict:
        return {"name": self.name, "vertices": self.vertices.tolist()}


def _signed_area(v: np.ndarray) -> float:
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def polygon_centroid(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    x, y = v[:, 0], v[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    c = x * yn - xn * y
    a = c.sum() / 2
    if abs(a) < 1e-300:
        raise InvalidShapeError("zero-area polygon")
    return np.array([np.sum((x + xn) * c), np.sum((y + yn) * c)]) / (6 * a)


def boundary_point(shape: ObjectShape, s):
    """Boundary point and inward unit normal at arclength ``s`` (wrapped).

    Vectorized over ``s``. At a vertex the edge starting there is used.
    """
    s = np.mod(np.asarray(s, dtype=np.float64), shape.perimeter)
    e = shape.edge_at(s)
    local = s - shape._cum[e]
    point = shape.vertices[e] + local[..., None] * shape._tangents[e]
    return point, shape._normals[e].copy()


def local_radius(shape: ObjectShape, s):
    """Lever arm of a tangential force applied at arclength ``s``."""
    return shape._apothems[shape.edge_at(s)]


def ray_hit(shape: ObjectShape, angle):
    """Boundary hit of the ray from the origin in direction ``angle`` (object frame).

    Returns ``(distance, edge_index, arclength)``; every ray hits because the
    origin is interior.
    """
    angle = np.asarray(angle, dtype=np.float64)
    u = np.stack([np.cos(angle), np.sin(angle)], axis=-1)
    nu = u @ shape._normals.T  # (..., E)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(nu < -1e-15, shape._apothems / -nu, np.inf)
    e = np.argmin(t, axis=-1)
    dist = np.take_along_axis(t, e[..., None], axis=-1)[..., 0]
    hit = dist[..., None] * u
    along = np.einsum("...j,...j->...", hit - shape.vertices[e], shape._tangents[e])
    along = np.clip(along, 0.0, shape._lengths[e])
    s = np.mod(shape._cum[e] + along, shape.perimeter)
    return dist, e, s


def polar_angle(shape: ObjectShape, s):
    p, _ = boundary_point(shape, s)
    return np.arctan2(p[..., 1], p[..., 0])


@dataclass(frozen=True)
class Contact:
    s: float
    point: np.ndarray
    inward_normal: np.ndarray
    mu: float

    @classmethod
    def at(cls, shape: ObjectShape, s: float, mu: float) -> "Contact":
        s = float(np.mod(s, shape.perimeter))
        p, n = boundary_point(shape, s)
        return cls(s, p, n, float(mu))


@dataclass(frozen=True)
class WrenchSet:
    wrenches: np.ndarray  # (2 * n_contacts, 3): f_x, f_y, torque / rho
    rho: float


def cone_edge_wrenches(points, normals, mu, rho):
    """Friction-cone edge wrenches under unit normal force, vectorized.

    ``points`` and ``normals`` have shape (..., C, 2), ``mu`` broadcasts to
    (..., C). Output has shape (..., 2C, 3); the two edges of contact ``i``
    sit at rows ``2i`` and ``2i + 1``.
    """
    points = np.asarray(points, dtype=np.float64)
    normals = np.asarray(normals, dtype=np.float64)
    mu = np.broadcast_to(np.asarray(mu, dtype=np.float64), points.shape[:-1])
    rho = np.asarray(rho, dtype=np.float64)[..., None, None]
    tangent = np.stack([-normals[..., 1], normals[..., 0]], axis=-1)
    out = []
    for sign in (1.0, -1.0):
        f = normals + sign * mu[..., None] * tangent
        tau = points[..., 0] * f[..., 1] - points[..., 1] * f[..., 0]
        out.append(np.concatenate([f, tau[..., None] / rho], axis=-1))
    w = np.stack(out, axis=-2)  # (..., C, 2, 3)
    return w.reshape(*w.shape[:-3], -1, 3)


def contact_wrenches(shape: ObjectShape, contacts: Sequence[Contact], rho: float | None = None) -> WrenchSet:
    if rho is None:
        rho = shape.mean_radius
    if rho <= 0:
        raise ValueError("rho must be positive")
    pts, nrm, mus = [], [], []
    for c in contacts:
        p, n = boundary_point(shape, c.s)
        if np.linalg.norm(p - np.asarray(c.point)) > 1e-9:
            raise InvalidContactError(f"contact at s={c.s} is off the boundary of {shape.name}")
        pts.append(c.point)
        nrm.append(c.inward_normal)
        mus.append(c.mu)
    if not pts:
        return WrenchSet(np.zeros((0, 3)), float(rho))
    w = cone_edge_wrenches(np.array(pts), np.array(nrm), np.array(mus), rho)
    return WrenchSet(w, float(rho))


@lru_cache(maxsize=None)
def _triples(m: int) -> np.ndarray:
    return np.array(list(itertools.combinations(range(m), 3)), dtype=np.intp).reshape(-1, 3)


def epsilon_quality_batch(wrenches, tol: float = 1e-10) -> np.ndarray:
    """Largest origin-centred ball inside the hull of each wrench set.

    ``wrenches`` has shape (B, M, 3). The hull facets are found by enumerating
    point triples whose plane leaves every point on one side, which is exact
    and cheap for the handful of points a grasp produces. Sets whose hull does
    not strictly contain the origin (including flat hulls) score 0.
    """
    w = np.asarray(wrenches, dtype=np.float64)
    if w.ndim != 3 or w.shape[-1] != 3:
        raise ValueError("expected wrenches of shape (B, M, 3)")
    b, m, _ = w.shape
    if m < 4:
        return np.zeros(b)
    tri = _triples(m)
    p0, p1, p2 = w[:, tri[:, 0]], w[:, tri[:, 1]], w[:, tri[:, 2]]
    nrm = np.cross(p1 - p0, p2 - p0)  # (B, T, 3)
    norm = np.linalg.norm(nrm, axis=-1)
    scale = max(1.0, float(np.abs(w).max()))
    ok = norm > tol * scale * scale
    nrm = nrm / np.where(ok, norm, 1.0)[..., None]
    off = np.einsum("btj,btj->bt", nrm, p0)
    side = np.einsum("btj,bmj->btm", nrm, w) - off[..., None]
    tol_s = tol * scale
    below = np.all(side <= tol_s, axis=-1)
    above = np.all(side >= -tol_s, axis=-1)
    flat = below & above
    # orient every supporting plane outward: all points on its non-positive side
    dist = np.where(below, off, -off)
    facet = ok & (below | above) & ~flat
    has_facet = facet.any(axis=-1)
    # a flat hull has every triple coplanar and no proper facet
    dmin = np.where(facet, dist, np.inf).min(axis=-1)
    eps = np.where(has_facet & np.isfinite(dmin), dmin, 0.0)
    return np.maximum(eps, 0.0)


def epsilon_quality(wset: WrenchSet | np.ndarray) -> float:
    w = wset.wrenches if isinstance(wset, WrenchSet) else np.asarray(wset, dtype=np.float64)
    if len(w) == 0:
        raise ValueError("empty wrench set")
    return float(epsilon_quality_batch(w[None])[0])


def grasp_epsilon(shape: ObjectShape, s, mu, rho: float | None = None) -> np.ndarray:
    """Epsilon quality of contacts at arclengths ``s`` (shape (..., C))."""
    s = np.asarray(s, dtype=np.float64)
    p, n = boundary_point(shape, s)
    w = cone_edge_wrenches(p, n, mu, shape.mean_radius if rho is None else rho)
    flat = w.reshape(-1, *w.shape[-2:])
    return epsilon_quality_batch(flat).reshape(s.shape[:-1])


def shape_encoding(shape: ObjectShape, object_angle, n_probes: int = 16, probe_radius: float | None = None):
    """Ray-cast distances from hand-fixed probes to the rotated object.

    Probes sit on a circle of radius ``probe_radius`` at angles ``2 pi k / n``
    and look at the hand origin. A probe that would start inside the object
    reports 0; distances are capped at ``2 * probe_radius``.
    Vectorized over ``object_angle``; output shape (..., n_probes).
    """
    if probe_radius is None:
        probe_radius = 1.2 * shape.max_radius
    phi = np.asarray(object_angle, dtype=np.float64)
    probe = 2 * np.pi * np.arange(n_probes) / n_probes
    dist, _, _ = ray_hit(shape, probe - phi[..., None])
    return np.clip(probe_radius - dist, 0.0, 2 * probe_radius)


def probe_radius_for(shapes: Iterable[ObjectShape], factor: float = 1.2) -> float:
    return factor * max(s.max_radius for s in shapes)


def wrap_angle(a):
    """Wrap to [-pi, pi)."""
    return np.mod(np.asarray(a, dtype=np.float64) + np.pi, 2 * np.pi) - np.pi


def _shape_from_entry(entry: dict) -> ObjectShape:
    name = entry["name"]
    if "vertices" in entry:
        return ObjectShape.from_vertices(name, entry["vertices"])
    if "regular" in entry:
        r = entry["regular"]
        return ObjectShape.regular(name, int(r["n"]), float(r["radius"]), float(r.get("phase", 0.0)))
    if "rectangle" in entry:
        r = entry["rectangle"]
        return ObjectShape.rectangle(name, float(r["width"]), float(r["height"]))
    raise InvalidShapeError(f"shape entry {name!r} needs vertices, regular or rectangle")


def load_shapes(path: str | Path) -> list[ObjectShape]:
    """Read a shape library: ``shapes: [{name, vertices | regular | rectangle}]``."""
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    entries = doc["shapes"] if isinstance(doc, dict) else doc
    shapes = [_shape_from_entry(e) for e in entries]
    if not shapes:
        raise InvalidShapeError(f"{path}: no shapes")
    return shapes


def default_shapes_path() -> Path:
    return Path(__file__).with_name("data") / "shapes.yaml"


class ShapeTable:
    """Several shapes stacked into padded arrays for batched queries.

    Every query takes a shape-index array that broadcasts against its other
    arguments. Padding edges never win a ray cast or an arclength lookup.
    """

    def __init__(self, shapes: Sequence[ObjectShape]):
        self.shapes = list(shapes)
        if not self.shapes:
            raise InvalidShapeError("empty shape set")
        self.index = {s.name: i for i, s in enumerate(self.shapes)}
        n_s, n_e = len(self.shapes), max(s.n_edges for s in self.shapes)
        self.vertices = np.zeros((n_s, n_e, 2))
        self.tangents = np.zeros((n_s, n_e, 2))
        self.normals = np.zeros((n_s, n_e, 2))
        self.apothems = np.full((n_s, n_e), np.inf)
        self.lengths = np.zeros((n_s, n_e))
        self.starts = np.full((n_s, n_e), np.inf)
        self.perimeter = np.array([s.perimeter for s in self.shapes])
        self.rho = np.array([s.mean_radius for s in self.shapes])
        for i, s in enumerate(self.shapes):
            k = s.n_edges
            self.vertices[i, :k] = s.vertices
            self.tangents[i, :k] = s._tangents
            self.normals[i, :k] = s._normals
            self.apothems[i, :k] = s._apothems
            self.lengths[i, :k] = s._lengths
            self.starts[i, :k] = s._cum[:-1]

    def __len__(self):
        return len(self.shapes)

    def edge_at(self, si, s):
        si = np.asarray(si)
        s = np.mod(s, self.perimeter[si])
        starts = self.starts[si]  # (..., E)
        return np.sum(starts[..., 1:] <= s[..., None], axis=-1), s

    def point(self, si, s):
        si = np.asarray(si)
        e, s = self.edge_at(si, s)
        si, e = np.broadcast_arrays(si, e)
        local = s - self.starts[si, e]
        return self.vertices[si, e] + local[..., None] * self.tangents[si, e], self.normals[si, e]

    def ray_hit(self, si, angle):
        si = np.asarray(si)
        angle = np.asarray(angle, dtype=np.float64)
        si, angle = np.broadcast_arrays(si, angle)
        normals = self.normals[si]  # (..., E, 2)
        nu = np.cos(angle)[..., None] * normals[..., 0] + np.sin(angle)[..., None] * normals[..., 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(nu < -1e-15, self.apothems[si] / -nu, np.inf)
        e = np.argmin(t, axis=-1)
        dist = np.take_along_axis(t, e[..., None], axis=-1)[..., 0]
        hx, hy = dist * np.cos(angle), dist * np.sin(angle)
        v, tg = self.vertices[si, e], self.tangents[si, e]
        along = (hx - v[..., 0]) * tg[..., 0] + (hy - v[..., 1]) * tg[..., 1]
        along = np.clip(along, 0.0, self.lengths[si, e])
        s = np.mod(self.starts[si, e] + along, self.perimeter[si])
        return dist, e, s

    def encoding(self, si, object_angle, n_probes: int, probe_radius: float):
        phi = np.asarray(object_angle, dtype=np.float64)
        probe = 2 * np.pi * np.arange(n_probes) / n_probes
        dist, _, _ = self.ray_hit(np.asarray(si)[..., None], probe - phi[..., None])
        return np.clip(probe_radius - dist, 0.0, 2 * probe_radius)
