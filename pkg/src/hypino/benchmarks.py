"""The seven benchmark problems, mapped onto the canonical square."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import symbolic as sym
from .fdsolve import NodeSolution, cached_solve, node_coords
from .geometry import Disk, Rectangle, contains
from .pde import BoundaryCondition, PdeInstance, remap_affine

__all__ = ["BENCHMARK_IDS", "NUMERICAL_IDS", "BenchmarkSpec", "build_benchmark", "reference_solution", "PSG_GAUSSIANS"]

BENCHMARK_IDS = ("HT", "HZ", "HZ-G", "PS-C", "PS-L", "PS-G", "WV")
NUMERICAL_IDS = ("HZ-G", "PS-C", "PS-L", "PS-G")
REFERENCE_NODES = 513

# (mu_x, mu_y, sigma) on (0, 1)^2, drawn once with N ~ Geom(0.4)
PSG_GAUSSIANS = (
    (0.2143, 0.3095, 0.0850),
    (0.9958, 0.1422, 0.0309),
    (0.1808, 0.3596, 0.0377),
)


@dataclass
class BenchmarkSpec:
    id: str
    instance: PdeInstance
    solution: Optional[sym.Expr]
    meta: dict = field(default_factory=dict)

    @property
    def has_closed_form(self) -> bool:
        return self.solution is not None


X, Y = sym.var_x(), sym.var_y()
PI = math.pi


def _sin(k: float, v: sym.Expr) -> sym.Expr:
    return sym.apply("sin", sym.mul(k, v))


def _dirichlet(comp: int, g) -> BoundaryCondition:
    return BoundaryCondition(comp, "dirichlet", g=sym.const(g) if isinstance(g, (int, float)) else g)


def _heat(n: int = 1, alpha: float = 0.1) -> BenchmarkSpec:
    # u_t = alpha u_xx on [0,1]^2 with y as time
    u = sym.mul(sym.apply("exp", sym.mul(-(n**2) * PI**2 * alpha, Y)), _sin(n * PI, X))
    bcs = [_dirichlet(0, 0.0), _dirichlet(1, 0.0), _dirichlet(2, _sin(n * PI, X))]
    inst = remap_affine((0, 0, 1, -alpha, 0), (0, 1, 0, 1), sym.const(0.0), bcs, solution=u, supervised=False)
    return BenchmarkSpec("HT", inst, inst.solution, {"alpha": alpha, "n": n, "box": (0, 1, 0, 1)})


def _helmholtz(k: float = 1.0) -> BenchmarkSpec:
    u = sym.mul(_sin(PI, X), _sin(4 * PI, Y))
    f = sym.mul(-(PI**2) - (4 * PI) ** 2 + k * k, u)
    bcs = [_dirichlet(i, 0.0) for i in range(4)]
    inst = remap_affine((k * k, 0, 0, 1, 1), (-1, 1, -1, 1), f, bcs, solution=u, supervised=False)
    return BenchmarkSpec("HZ", inst, inst.solution, {"k": k, "k_flag": "wave number not given; default 1", "box": (-1, 1, -1, 1)})


def _helmholtz_geometry() -> BenchmarkSpec:
    mu1, mu2, k, A = 1.0, 4.0, 8.0, 10.0
    f = sym.mul(A * mu2, Y, _sin(mu1 * PI, X), _sin(mu2 * PI, Y))
    disks = [Disk(0.5, 0.5, 0.2), Disk(0.4, -0.4, 0.4), Disk(-0.2, -0.7, 0.1), Disk(-0.6, 0.5, 0.3)]
    bcs = [_dirichlet(i, 0.2) for i in range(4)] + [_dirichlet(4 + i, 1.0) for i in range(4)]
    inst = remap_affine((k * k, 0, 0, -1, -1), (-1, 1, -1, 1), f, bcs, disks, supervised=False)
    return BenchmarkSpec("HZ-G", inst, None, {"mu1": mu1, "mu2": mu2, "k": k, "A": A, "box": (-1, 1, -1, 1)})


def _poisson_circles() -> BenchmarkSpec:
    disks = [Disk(sx * 0.3, sy * 0.3, 0.1) for sx, sy in ((1, 1), (-1, 1), (1, -1), (-1, -1))]
    bcs = [_dirichlet(i, 1.0) for i in range(4)] + [_dirichlet(4 + i, 0.0) for i in range(4)]
    box = (-0.5, 0.5, -0.5, 0.5)
    inst = remap_affine((0, 0, 0, -1, -1), box, sym.const(0.0), bcs, disks, supervised=False)
    return BenchmarkSpec("PS-C", inst, None, {"box": box, "radius_original": 0.1})


def _poisson_l() -> BenchmarkSpec:
    bcs = [_dirichlet(i, 0.0) for i in range(5)]
    inst = remap_affine((0, 0, 0, -1, -1), (-1, 1, -1, 1), sym.const(1.0), bcs, [Rectangle.from_bounds(0, 0, 1, 1)], supervised=False)
    return BenchmarkSpec("PS-L", inst, None, {"box": (-1, 1, -1, 1)})


def _poisson_gauss() -> BenchmarkSpec:
    terms = []
    for mx, my, s in PSG_GAUSSIANS:
        r2 = sym.add(sym.mul(sym.add(X, -mx), sym.add(X, -mx)), sym.mul(sym.add(Y, -my), sym.add(Y, -my)))
        terms.append(sym.apply("exp", sym.mul(-1.0 / (2 * s * s), r2)))
    bcs = [_dirichlet(i, 0.0) for i in range(4)]
    inst = remap_affine((0, 0, 0, -1, -1), (0, 1, 0, 1), sym.add(*terms), bcs, supervised=False)
    return BenchmarkSpec("PS-G", inst, None, {"box": (0, 1, 0, 1), "gaussians": [list(g) for g in PSG_GAUSSIANS]})


def _wave() -> BenchmarkSpec:
    # u_tt - 4 u_xx = 0 on [0,1]^2 with y as time
    u = sym.add(
        sym.mul(_sin(PI, X), sym.apply("cos", sym.mul(2 * PI, Y))),
        sym.mul(0.5, _sin(4 * PI, X), sym.apply("cos", sym.mul(8 * PI, Y))),
    )
    u0 = sym.add(_sin(PI, X), sym.mul(0.5, _sin(4 * PI, X)))
    bcs = [
        _dirichlet(0, 0.0),
        _dirichlet(1, 0.0),
        BoundaryCondition(2, "both", g=u0, h=sym.const(0.0)),
    ]
    inst = remap_affine((0, 0, 0, -4, 1), (0, 1, 0, 1), sym.const(0.0), bcs, solution=u, supervised=False)
    return BenchmarkSpec("WV", inst, inst.solution, {"box": (0, 1, 0, 1)})


_BUILDERS = {
    "HT": _heat,
    "HZ": _helmholtz,
    "HZ-G": _helmholtz_geometry,
    "PS-C": _poisson_circles,
    "PS-L": _poisson_l,
    "PS-G": _poisson_gauss,
    "WV": _wave,
}


def build_benchmark(bid: str, **params) -> BenchmarkSpec:
    """Benchmark ``bid``; HT accepts ``n``/``alpha`` and HZ accepts ``k``."""
    try:
        builder = _BUILDERS[bid]
    except KeyError:
        raise ValueError(f"unknown benchmark {bid!r}; expected one of {', '.join(BENCHMARK_IDS)}") from None
    spec = builder(**params)
    spec.instance.meta.update({"benchmark": bid, **spec.meta})
    return spec


def reference_solution(spec: BenchmarkSpec, n: int = 129, fd_nodes: int = REFERENCE_NODES) -> NodeSolution:
    """Reference values at the in-domain nodes of an n x n grid."""
    if spec.solution is not None:
        c = node_coords(n)
        Xg, Yg = np.meshgrid(c, c, indexing="xy")
        mask = contains(spec.instance.domain, Xg, Yg)
        vals = np.full((n, n), np.nan)
        vals[mask] = sym.evaluate(spec.solution, Xg[mask], Yg[mask])
        return NodeSolution(vals, mask)
    return cached_solve(spec.instance, fd_nodes, name=spec.id).subsample(n)
