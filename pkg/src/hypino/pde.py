"""Operator coefficients, problem instances and their grid encoding."""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import symbolic as sym
from .geometry import Disk, Domain, Polygon, Rectangle, boundary_samples, contains

__all__ = [
    "OperatorCoeffs",
    "PdeClass",
    "BoundaryCondition",
    "PdeInstance",
    "PdeGrids",
    "BoundaryData",
    "classify",
    "rasterize",
    "rasterize_values",
    "cell_centers",
    "stencil_indices",
    "remap_affine",
    "to_canonical",
    "check_supervised_consistency",
    "GRID_MAGIC",
]

TERM_NAMES = ("u", "u_x", "u_y", "u_xx", "u_yy")
TRAINING_RANGE = 2.0


@dataclass(frozen=True)
class OperatorCoeffs:
    """Coefficients of ``c1 u + c2 u_x + c3 u_y + c4 u_xx + c5 u_yy``."""

    c: tuple[float, float, float, float, float]

    def __post_init__(self):
        c = tuple(float(v) for v in self.c)
        if len(c) != 5:
            raise ValueError("expected five coefficients")
        if not all(math.isfinite(v) for v in c):
            raise ValueError("coefficients must be finite")
        if all(v == 0.0 for v in c):
            raise ValueError("operator coefficients are all zero")
        object.__setattr__(self, "c", c)

    def __iter__(self):
        return iter(self.c)

    def __getitem__(self, i):
        return self.c[i]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.c, dtype=np.float64)

    @property
    def out_of_training_range(self) -> bool:
        return any(abs(v) > TRAINING_RANGE for v in self.c)

    def describe(self) -> str:
        parts = [f"{v:+g} {n}" for v, n in zip(self.c, TERM_NAMES) if v != 0.0]
        return " ".join(parts)


class PdeClass(enum.Enum):
    ELLIPTIC = "elliptic"
    PARABOLIC = "parabolic"
    HYPERBOLIC = "hyperbolic"
    DEGENERATE = "degenerate"


def classify(coeffs) -> PdeClass:
    """Sign structure of the second-order part (no mixed term)."""
    _, c2, c3, c4, c5 = tuple(coeffs)
    if c4 * c5 > 0:
        return PdeClass.ELLIPTIC
    if c4 * c5 < 0:
        return PdeClass.HYPERBOLIC
    if c4 != 0.0 and c5 == 0.0 and c3 != 0.0:
        return PdeClass.PARABOLIC
    if c5 != 0.0 and c4 == 0.0 and c2 != 0.0:
        return PdeClass.PARABOLIC
    return PdeClass.DEGENERATE


@dataclass(frozen=True)
class BoundaryCondition:
    """Condition on one boundary component.

    ``g`` is the Dirichlet value. ``h`` is the Neumann value when
    ``h_mode == "value"``; with ``"normal_derivative"`` the Neumann value at a
    point with normal n is grad(h) . n (used when h is the exact solution).
    """

    component: int
    kind: str
    g: Optional[sym.Expr] = None
    h: Optional[sym.Expr] = None
    h_mode: str = "value"

    def __post_init__(self):
        if self.kind not in ("dirichlet", "neumann", "both"):
            raise ValueError(f"bad condition kind {self.kind!r}")
        if self.has_dirichlet and self.g is None:
            raise ValueError("Dirichlet condition needs g")
        if self.has_neumann and self.h is None:
            raise ValueError("Neumann condition needs h")
        if self.h_mode not in ("value", "normal_derivative"):
            raise ValueError(f"bad h_mode {self.h_mode!r}")

    @property
    def has_dirichlet(self) -> bool:
        return self.kind in ("dirichlet", "both")

    @property
    def has_neumann(self) -> bool:
        return self.kind in ("neumann", "both")

    def neumann_values(self, points: np.ndarray, normals: np.ndarray) -> np.ndarray:
        x, y = points[:, 0], points[:, 1]
        if self.h_mode == "value":
            return np.broadcast_to(sym.evaluate(self.h, x, y), x.shape).astype(float)
        hx = sym.evaluate(sym.differentiate(self.h, "x"), x, y)
        hy = sym.evaluate(sym.differentiate(self.h, "y"), x, y)
        return np.broadcast_to(hx * normals[:, 0] + hy * normals[:, 1], x.shape).astype(float)

    def dirichlet_values(self, points: np.ndarray) -> np.ndarray:
        x, y = points[:, 0], points[:, 1]
        return np.broadcast_to(sym.evaluate(self.g, x, y), x.shape).astype(float)

    def to_dict(self) -> dict:
        return {
            "component": self.component,
            "kind": self.kind,
            "g": None if self.g is None else sym.to_prefix(self.g),
            "h": None if self.h is None else sym.to_prefix(self.h),
            "h_mode": self.h_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BoundaryCondition":
        return cls(
            component=int(d["component"]),
            kind=d["kind"],
            g=None if d["g"] is None else sym.from_prefix(d["g"]),
            h=None if d["h"] is None else sym.from_prefix(d["h"]),
            h_mode=d["h_mode"],
        )


@dataclass(frozen=True)
class BoundaryData:
    """Boundary samples split by condition kind, with prescribed values."""

    d_points: np.ndarray
    d_values: np.ndarray
    d_component: np.ndarray
    n_points: np.ndarray
    n_normals: np.ndarray
    n_values: np.ndarray
    n_component: np.ndarray


@dataclass(frozen=True)
class PdeInstance:
    coeffs: OperatorCoeffs
    domain: Domain
    source: sym.Expr
    bcs: tuple[BoundaryCondition, ...]
    solution: Optional[sym.Expr] = None
    supervised: bool = False
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.supervised and self.solution is None:
            raise ValueError("supervised instance needs an analytic solution")
        seen = set()
        for bc in self.bcs:
            if not 0 <= bc.component < self.domain.n_components:
                raise ValueError(f"condition on unknown component {bc.component}")
            if bc.component in seen:
                raise ValueError(f"component {bc.component} has two conditions")
            seen.add(bc.component)

    def bc_for(self, component: int) -> Optional[BoundaryCondition]:
        for bc in self.bcs:
            if bc.component == component:
                return bc
        return None

    def boundary_data(self, spacing: float) -> BoundaryData:
        bs = boundary_samples(self.domain, spacing)
        dp, dv, dc, npt, nn, nv, nc = [], [], [], [], [], [], []
        for bc in self.bcs:
            sel = bs.component == bc.component
            if not np.any(sel):
                continue
            pts, nrm = bs.points[sel], bs.normals[sel]
            if bc.has_dirichlet:
                dp.append(pts)
                dv.append(bc.dirichlet_values(pts))
                dc.append(np.full(len(pts), bc.component))
            if bc.has_neumann:
                npt.append(pts)
                nn.append(nrm)
                nv.append(bc.neumann_values(pts, nrm))
                nc.append(np.full(len(pts), bc.component))

        def cat(xs, shape):
            return np.concatenate(xs).reshape(shape) if xs else np.zeros((0,) + shape[1:])

        return BoundaryData(
            cat(dp, (-1, 2)),
            cat(dv, (-1,)),
            cat(dc, (-1,)).astype(np.int64),
            cat(npt, (-1, 2)),
            cat(nn, (-1, 2)),
            cat(nv, (-1,)),
            cat(nc, (-1,)).astype(np.int64),
        )

    def to_dict(self) -> dict:
        return {
            "coeffs": list(self.coeffs.c),
            "domain": self.domain.to_dict(),
            "source": sym.to_prefix(self.source) if not self.supervised else None,
            "bcs": [bc.to_dict() for bc in self.bcs],
            "solution": None if self.solution is None else sym.to_prefix(self.solution),
            "supervised": self.supervised,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PdeInstance":
        coeffs = OperatorCoeffs(tuple(d["coeffs"]))
        solution = None if d["solution"] is None else sym.from_prefix(d["solution"])
        if d["source"] is None:
            # supervised sources are derived, not stored
            source = sym.apply_operator(coeffs.c, solution)
        else:
            source = sym.from_prefix(d["source"])
        return cls(
            coeffs=coeffs,
            domain=Domain.from_dict(d["domain"]),
            source=source,
            bcs=tuple(BoundaryCondition.from_dict(b) for b in d["bcs"]),
            solution=solution,
            supervised=bool(d["supervised"]),
            meta=dict(d.get("meta", {})),
        )


def check_supervised_consistency(
    instance: PdeInstance, n_probe: int = 100, seed: int = 0, residual_fn=None
) -> float:
    """max |L[u] - f| / (1 + |f|) over random interior probes.

    ``residual_fn(u, coeffs, x, y)`` computes L[u] by an independent route;
    it defaults to differentiating the solution symbolically.
    """
    rng = np.random.default_rng(seed)
    pts = []
    while sum(len(p) for p in pts) < n_probe:
        cand = rng.uniform(-1, 1, size=(4 * n_probe, 2))
        pts.append(cand[contains(instance.domain, cand[:, 0], cand[:, 1])])
    p = np.concatenate(pts)[:n_probe]
    f = np.broadcast_to(sym.evaluate(instance.source, p[:, 0], p[:, 1]), (len(p),))
    if residual_fn is None:
        lu = sym.evaluate(sym.apply_operator(instance.coeffs.c, instance.solution), p[:, 0], p[:, 1])
    else:
        lu = residual_fn(instance.solution, instance.coeffs.c, p[:, 0], p[:, 1])
    return float(np.max(np.abs(lu - f) / (1.0 + np.abs(f))))


# --- grid encoding ------------------------------------------------------------

GRID_MAGIC = b"HYPGRID1"


@dataclass(frozen=True)
class PdeGrids:
    """Source and boundary encodings on an R x R cell-centred lattice.

    Arrays are indexed ``[row, col]`` with rows along y and columns along x.
    """

    F: np.ndarray
    Mg: np.ndarray
    Vg: np.ndarray
    Mh: np.ndarray
    Vh: np.ndarray

    @property
    def resolution(self) -> int:
        return self.F.shape[0]

    def stack(self) -> np.ndarray:
        return np.stack([self.F, self.Mg, self.Vg, self.Mh, self.Vh])

    @classmethod
    def from_stack(cls, a: np.ndarray) -> "PdeGrids":
        a = np.asarray(a, dtype=np.float32)
        return cls(*(np.ascontiguousarray(a[i]) for i in range(5)))

    def to_bytes(self) -> bytes:
        return grid_to_bytes(self.stack())

    @classmethod
    def from_bytes(cls, data: bytes) -> "PdeGrids":
        arr = grid_from_bytes(data)
        if arr.shape[0] != 5:
            raise ValueError(f"expected 5 channels, found {arr.shape[0]}")
        return cls.from_stack(arr)


def grid_to_bytes(channels: np.ndarray) -> bytes:
    """Magic, uint32 resolution, uint32 channel count, then float32 LE row-major data."""
    channels = np.asarray(channels, dtype="<f4")
    if channels.ndim == 2:
        channels = channels[None]
    n, r, r2 = channels.shape
    if r != r2:
        raise ValueError("grids must be square")
    return GRID_MAGIC + struct.pack("<II", r, n) + np.ascontiguousarray(channels).tobytes()


def grid_from_bytes(data: bytes) -> np.ndarray:
    if data[:8] != GRID_MAGIC:
        raise ValueError("not a grid file (bad magic)")
    r, n = struct.unpack("<II", data[8:16])
    body = data[16:]
    if len(body) != 4 * n * r * r:
        raise ValueError("grid payload has wrong length")
    return np.frombuffer(body, dtype="<f4").reshape(n, r, r).astype(np.float32)


def cell_centers(R: int) -> np.ndarray:
    return -1.0 + (np.arange(R) + 0.5) * (2.0 / R)


def stencil_indices(coord: np.ndarray, R: int) -> np.ndarray:
    """Lower index of the two cell centres bracketing ``coord``.

    At the outer edge the pair is shifted inward so both cells lie inside the
    grid; the result is the two nearest in-grid centres along that axis.
    """
    h = 2.0 / R
    i0 = np.floor((np.asarray(coord) + 1.0) / h - 0.5).astype(np.int64)
    return np.clip(i0, 0, R - 2)


def rasterize_values(points: np.ndarray, values: np.ndarray, R: int):
    """Mark the 2x2 nearest cells of every point; average values per cell."""
    mask = np.zeros((R, R), dtype=np.float64)
    acc = np.zeros((R, R), dtype=np.float64)
    if len(points) == 0:
        return mask.astype(np.float32), acc.astype(np.float32)
    ix = stencil_indices(points[:, 0], R)
    iy = stencil_indices(points[:, 1], R)
    for dy in (0, 1):
        for dx in (0, 1):
            np.add.at(mask, (iy + dy, ix + dx), 1.0)
            np.add.at(acc, (iy + dy, ix + dx), values)
    hit = mask > 0
    val = np.zeros_like(acc)
    val[hit] = acc[hit] / mask[hit]
    return hit.astype(np.float32), val.astype(np.float32)


def rasterize(instance: PdeInstance, R: int = 64) -> PdeGrids:
    if R < 8:
        raise ValueError("resolution must be at least 8")
    c = cell_centers(R)
    X, Y = np.meshgrid(c, c, indexing="xy")
    F = np.broadcast_to(sym.evaluate(instance.source, X, Y), X.shape).astype(np.float32)
    bd = instance.boundary_data(spacing=1.0 / R)
    Mg, Vg = rasterize_values(bd.d_points, bd.d_values, R)
    Mh, Vh = rasterize_values(bd.n_points, bd.n_values, R)
    return PdeGrids(F, Mg, Vg, Mh, Vh)


# --- affine remapping ---------------------------------------------------------


def to_canonical(x, y, box):
    ax, bx, ay, by = box
    # (2x - (a + b)) / (b - a) is exact for the identity box
    return (2.0 * np.asarray(x) - (ax + bx)) / (bx - ax), (2.0 * np.asarray(y) - (ay + by)) / (by - ay)


def _from_canonical_exprs(box):
    ax, bx, ay, by = box
    x, y = sym.var_x(), sym.var_y()
    return (
        sym.add(ax + 0.5 * (bx - ax), sym.mul(0.5 * (bx - ax), x)),
        sym.add(ay + 0.5 * (by - ay), sym.mul(0.5 * (by - ay), y)),
    )


def _remap_primitive(p, box):
    ax, bx, ay, by = box

    def m(px, py):
        qx, qy = to_canonical(px, py, box)
        return float(qx), float(qy)

    if isinstance(p, Disk):
        sx, sy = 2.0 / (bx - ax), 2.0 / (by - ay)
        if not math.isclose(sx, sy):
            raise ValueError("disks need an isotropic map")
        cx, cy = m(p.cx, p.cy)
        return Disk(cx, cy, p.r * sx)
    if isinstance(p, Rectangle):
        x0, y0, x1, y1 = p.bounds
        a, b = m(x0, y0)
        c, d = m(x1, y1)
        return Rectangle.from_bounds(a, b, c, d)
    return Polygon(tuple(m(px, py) for px, py in p.vertices), kind=p.kind)


def remap_affine(
    coeffs: Sequence[float],
    box: tuple[float, float, float, float],
    source: sym.Expr,
    bcs: Sequence[BoundaryCondition],
    primitives: Sequence = (),
    solution: Optional[sym.Expr] = None,
    supervised: Optional[bool] = None,
    meta: Optional[dict] = None,
) -> PdeInstance:
    """Map a problem posed on ``[ax, bx] x [ay, by]`` onto the canonical square.

    ``box`` is ``(ax, bx, ay, by)``; expressions are given in the original
    coordinates and substituted symbolically.
    """
    ax, bx, ay, by = box
    if not (bx > ax and by > ay):
        raise ValueError("degenerate interval")
    sx, sy = 2.0 / (bx - ax), 2.0 / (by - ay)
    c1, c2, c3, c4, c5 = (float(v) for v in coeffs)
    new_c = OperatorCoeffs((c1, c2 * sx, c3 * sy, c4 * sx * sx, c5 * sy * sy))
    xo, yo = _from_canonical_exprs(box)

    def sub(e):
        return None if e is None else sym.substitute(e, xo, yo)

    new_bcs = []
    for bc in bcs:
        h = sub(bc.h)
        if h is not None and bc.h_mode == "value":
            # d/dn in canonical units is (original d/dn) / scale
            if not math.isclose(sx, sy):
                raise ValueError("value-mode Neumann data needs an isotropic map")
            h = sym.mul(1.0 / sx, h)
        new_bcs.append(replace(bc, g=sub(bc.g), h=h))
    return PdeInstance(
        coeffs=new_c,
        domain=Domain(tuple(_remap_primitive(p, box) for p in primitives)),
        source=sub(source),
        bcs=tuple(new_bcs),
        solution=sub(solution),
        supervised=solution is not None if supervised is None else supervised,
        meta=dict(meta or {}),
    )
