"""Domains on [-1, 1]^2 built by subtracting convex primitives from the square."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

__all__ = [
    "Disk",
    "Rectangle",
    "Polygon",
    "Domain",
    "BoundarySamples",
    "GeometryConfig",
    "ResampleBudgetExceeded",
    "OUTER_ROLES",
    "sample_domain",
    "contains",
    "boundary_samples",
    "signed_distance",
]

OUTER_ROLES = ("left", "right", "bottom", "top")


class ResampleBudgetExceeded(RuntimeError):
    pass


def _segment_distance(px, py, ax, ay, bx, by):
    ex, ey = bx - ax, by - ay
    t = ((px - ax) * ex + (py - ay) * ey) / (ex * ex + ey * ey)
    t = np.clip(t, 0.0, 1.0)
    dx = px - (ax + t * ex)
    dy = py - (ay + t * ey)
    return np.hypot(dx, dy)


def _edge_midpoints(ax, ay, bx, by, spacing):
    length = math.hypot(bx - ax, by - ay)
    n = max(1, math.ceil(length / spacing - 1e-12))
    t = (np.arange(n) + 0.5) / n
    return ax + t * (bx - ax), ay + t * (by - ay)


@dataclass(frozen=True)
class Disk:
    cx: float
    cy: float
    r: float
    kind: str = field(default="disk", init=False)

    def signed_distance(self, x, y):
        """Negative inside the disk."""
        return np.hypot(np.asarray(x) - self.cx, np.asarray(y) - self.cy) - self.r

    def bounding_radius(self) -> float:
        return self.r

    def center(self) -> tuple[float, float]:
        return self.cx, self.cy

    def boundary(self, spacing: float):
        n = max(3, math.ceil(2 * math.pi * self.r / spacing - 1e-12))
        ang = 2 * math.pi * (np.arange(n) + 0.5) / n
        c, s = np.cos(ang), np.sin(ang)
        pts = np.stack([self.cx + self.r * c, self.cy + self.r * s], axis=1)
        # out of the region means into the disk
        normals = np.stack([-c, -s], axis=1)
        return pts, normals

    def to_dict(self) -> dict:
        return {"kind": "disk", "cx": self.cx, "cy": self.cy, "r": self.r}


@dataclass(frozen=True)
class Polygon:
    """Convex polygon with counter-clockwise vertices."""

    vertices: tuple[tuple[float, float], ...]
    kind: str = "polygon"

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or len(v) < 3:
            raise ValueError("polygon needs at least three 2D vertices")
        area2 = np.sum(v[:, 0] * np.roll(v[:, 1], -1) - np.roll(v[:, 0], -1) * v[:, 1])
        if area2 <= 0:
            raise ValueError("polygon vertices must be counter-clockwise")
        for i in range(len(v)):
            a, b, c = v[i], v[(i + 1) % len(v)], v[(i + 2) % len(v)]
            cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0])
            if cross <= 0:
                raise ValueError("polygon must be strictly convex")

    def _edges(self):
        v = self.vertices
        return [(v[i], v[(i + 1) % len(v)]) for i in range(len(v))]

    def signed_distance(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        dist = None
        inside = None
        for (ax, ay), (bx, by) in self._edges():
            d = _segment_distance(x, y, ax, ay, bx, by)
            side = (bx - ax) * (y - ay) - (by - ay) * (x - ax) >= 0
            dist = d if dist is None else np.minimum(dist, d)
            inside = side if inside is None else inside & side
        return np.where(inside, -dist, dist)

    def center(self) -> tuple[float, float]:
        v = np.asarray(self.vertices)
        return float(v[:, 0].mean()), float(v[:, 1].mean())

    def bounding_radius(self) -> float:
        cx, cy = self.center()
        return max(math.hypot(px - cx, py - cy) for px, py in self.vertices)

    def boundary(self, spacing: float):
        pts, normals = [], []
        for (ax, ay), (bx, by) in self._edges():
            px, py = _edge_midpoints(ax, ay, bx, by, spacing)
            length = math.hypot(bx - ax, by - ay)
            # inward normal of the polygon, i.e. out of the region
            nx, ny = -(by - ay) / length, (bx - ax) / length
            pts.append(np.stack([px, py], axis=1))
            normals.append(np.tile([nx, ny], (len(px), 1)))
        return np.concatenate(pts), np.concatenate(normals)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "vertices": [list(p) for p in self.vertices]}


@dataclass(frozen=True)
class Rectangle(Polygon):
    """Axis-aligned rectangle, stored as a four-vertex polygon."""

    kind: str = "rectangle"

    @classmethod
    def from_bounds(cls, x0: float, y0: float, x1: float, y1: float) -> "Rectangle":
        return cls(((x0, y0), (x1, y0), (x1, y1), (x0, y1)))

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        (x0, y0), _, (x1, y1), _ = self.vertices
        return x0, y0, x1, y1

    def to_dict(self) -> dict:
        return {"kind": "rectangle", "bounds": list(self.bounds)}


Primitive = Union[Disk, Polygon, Rectangle]


def primitive_from_dict(d: dict) -> Primitive:
    kind = d["kind"]
    if kind == "disk":
        return Disk(float(d["cx"]), float(d["cy"]), float(d["r"]))
    if kind == "rectangle":
        return Rectangle.from_bounds(*(float(v) for v in d["bounds"]))
    if kind in ("triangle", "polygon"):
        return Polygon(tuple((float(a), float(b)) for a, b in d["vertices"]), kind=kind)
    raise ValueError(f"unknown primitive kind {kind!r}")


@dataclass(frozen=True)
class Domain:
    """The square [-1, 1]^2 minus the union of ``primitives``."""

    primitives: tuple[Primitive, ...] = ()

    @property
    def n_components(self) -> int:
        return 4 + len(self.primitives)

    def role(self, component: int) -> str:
        if component < 4:
            return OUTER_ROLES[component]
        return f"inner{component - 4}"

    def to_dict(self) -> dict:
        return {"primitives": [p.to_dict() for p in self.primitives]}

    @classmethod
    def from_dict(cls, d: dict) -> "Domain":
        return cls(tuple(primitive_from_dict(p) for p in d["primitives"]))


def contains(domain: Domain, x, y=None):
    """True strictly inside the region (boundary excluded). Vectorized."""
    if y is None:
        p = np.asarray(x, dtype=float)
        x, y = p[..., 0], p[..., 1]
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    inside = (np.abs(x) < 1.0) & (np.abs(y) < 1.0)
    for prim in domain.primitives:
        inside &= prim.signed_distance(x, y) > 0
    if inside.ndim == 0:
        return bool(inside)
    return inside


def signed_distance(domain: Domain, x, y):
    """Distance to the region boundary, positive inside (exact for disjoint primitives)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    d = np.minimum(1.0 - np.abs(x), 1.0 - np.abs(y))
    for prim in domain.primitives:
        d = np.minimum(d, prim.signed_distance(x, y))
    return d


@dataclass(frozen=True)
class BoundarySamples:
    """Points on the region boundary with outward unit normals.

    ``component`` indexes 0..3 for the square sides (left, right, bottom, top)
    and 4+i for inner primitive i.
    """

    points: np.ndarray
    normals: np.ndarray
    component: np.ndarray

    def __len__(self) -> int:
        return len(self.points)

    def select(self, mask) -> "BoundarySamples":
        return BoundarySamples(self.points[mask], self.normals[mask], self.component[mask])


def _outer_side(side: int, spacing: float):
    t_x, t_y = _edge_midpoints(-1.0, 0.0, 1.0, 0.0, spacing)
    t = t_x
    one = np.ones_like(t)
    if side == 0:
        return np.stack([-one, t], 1), np.tile([-1.0, 0.0], (len(t), 1))
    if side == 1:
        return np.stack([one, t], 1), np.tile([1.0, 0.0], (len(t), 1))
    if side == 2:
        return np.stack([t, -one], 1), np.tile([0.0, -1.0], (len(t), 1))
    return np.stack([t, one], 1), np.tile([0.0, 1.0], (len(t), 1))


def boundary_samples(domain: Domain, spacing: float) -> BoundarySamples:
    """Sample every boundary component at arc-length spacing <= ``spacing``.

    Straight edges are sampled at the midpoints of equal sub-segments, so
    corners are never emitted. Parts of a component that are not on the region
    boundary (covered by another primitive, or outside the square) are dropped.
    """
    if not spacing > 0:
        raise ValueError("spacing must be positive")
    pts, nrm, comp = [], [], []
    prims = domain.primitives
    for side in range(4):
        p, n = _outer_side(side, spacing)
        keep = np.ones(len(p), dtype=bool)
        for prim in prims:
            keep &= prim.signed_distance(p[:, 0], p[:, 1]) > 0
        pts.append(p[keep])
        nrm.append(n[keep])
        comp.append(np.full(int(keep.sum()), side))
    for i, prim in enumerate(prims):
        p, n = prim.boundary(spacing)
        keep = (np.abs(p[:, 0]) < 1.0) & (np.abs(p[:, 1]) < 1.0)
        for j, other in enumerate(prims):
            if j != i:
                keep &= other.signed_distance(p[:, 0], p[:, 1]) > 0
        pts.append(p[keep])
        nrm.append(n[keep])
        comp.append(np.full(int(keep.sum()), 4 + i))
    return BoundarySamples(
        np.concatenate(pts).reshape(-1, 2),
        np.concatenate(nrm).reshape(-1, 2),
        np.concatenate(comp).astype(np.int64),
    )


@dataclass(frozen=True)
class GeometryConfig:
    count: tuple[int, int] = (0, 3)
    kinds: tuple[str, ...] = ("disk", "rectangle", "triangle", "polygon")
    size: tuple[float, float] = (0.05, 0.4)
    polygon_vertices: tuple[int, int] = (4, 6)
    margin: float = 0.02
    min_area_fraction: float = 0.05
    max_attempts: int = 100


def _sample_primitive(rng: np.random.Generator, kind: str, cfg: GeometryConfig) -> Primitive:
    lo, hi = cfg.size
    if kind == "disk":
        r = float(rng.uniform(lo, hi))
        lim = 1.0 - r - cfg.margin
        cx, cy = (float(v) for v in rng.uniform(-lim, lim, 2))
        return Disk(cx, cy, r)
    if kind == "rectangle":
        hw, hh = (float(v) for v in rng.uniform(lo, hi, 2))
        cx = float(rng.uniform(-1 + hw + cfg.margin, 1 - hw - cfg.margin))
        cy = float(rng.uniform(-1 + hh + cfg.margin, 1 - hh - cfg.margin))
        return Rectangle.from_bounds(cx - hw, cy - hh, cx + hw, cy + hh)
    r = float(rng.uniform(lo, hi))
    if kind == "triangle":
        n = 3
    else:
        n = int(rng.integers(cfg.polygon_vertices[0], cfg.polygon_vertices[1] + 1))
    # vertices on a circle are convex; keep angular gaps away from degenerate
    while True:
        ang = np.sort(rng.uniform(0, 2 * math.pi, n))
        gaps = np.diff(np.append(ang, ang[0] + 2 * math.pi))
        if gaps.min() >= math.pi / n and gaps.max() < math.pi:
            break
    lim = 1.0 - r - cfg.margin
    cx, cy = (float(v) for v in rng.uniform(-lim, lim, 2))
    verts = tuple((cx + r * math.cos(a), cy + r * math.sin(a)) for a in ang)
    return Polygon(verts, kind=kind)


def _inside_square(prim: Primitive, margin: float) -> bool:
    if isinstance(prim, Disk):
        return abs(prim.cx) + prim.r <= 1 - margin and abs(prim.cy) + prim.r <= 1 - margin
    v = np.asarray(prim.vertices)
    return bool(np.all(np.abs(v) <= 1 - margin))


def _separated(a: Primitive, b: Primitive, margin: float) -> bool:
    (ax, ay), (bx, by) = a.center(), b.center()
    return math.hypot(ax - bx, ay - by) > a.bounding_radius() + b.bounding_radius() + margin


def area_fraction(domain: Domain, n: int = 4096, seed: int = 0) -> float:
    pts = np.random.default_rng(seed).uniform(-1, 1, size=(n, 2))
    return float(np.mean(contains(domain, pts[:, 0], pts[:, 1])))


def sample_domain(rng: np.random.Generator, cfg: GeometryConfig = GeometryConfig()) -> Domain:
    """Random square-minus-primitives domain with disjoint, contained primitives."""
    count = int(rng.integers(cfg.count[0], cfg.count[1] + 1))
    for _ in range(cfg.max_attempts):
        prims = []
        for _ in range(count):
            kind = cfg.kinds[int(rng.integers(len(cfg.kinds)))]
            prims.append(_sample_primitive(rng, kind, cfg))
        ok = all(_inside_square(p, cfg.margin) for p in prims) and all(
            _separated(prims[i], prims[j], cfg.margin)
            for i in range(len(prims))
            for j in range(i + 1, len(prims))
        )
        if not ok:
            continue
        dom = Domain(tuple(prims))
        if area_fraction(dom, 1024) >= cfg.min_area_fraction:
            return dom
    raise ResampleBudgetExceeded(f"no valid domain after {cfg.max_attempts} attempts")
