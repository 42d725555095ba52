"""Five-point finite differences with Shortley-Weller boundary treatment.

Used to build numerical references for benchmarks without a closed form.
Only Dirichlet conditions are supported.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import symbolic as sym
from .geometry import Domain, contains, signed_distance
from .pde import PdeInstance, grid_from_bytes, grid_to_bytes

__all__ = ["NodeSolution", "node_coords", "solve_fd", "component_at", "cache_dir", "cached_solve", "grid_convergence"]


@dataclass
class NodeSolution:
    """Values at the nodes of an n x n grid over [-1, 1]^2, indexed [row=y, col=x]."""

    values: np.ndarray
    mask: np.ndarray

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def to_bytes(self) -> bytes:
        return grid_to_bytes(np.stack([np.where(self.mask, self.values, 0.0), self.mask.astype(float)]))

    @classmethod
    def from_bytes(cls, data: bytes) -> "NodeSolution":
        ch = grid_from_bytes(data).astype(np.float64)
        mask = ch[1] > 0.5
        return cls(np.where(mask, ch[0], np.nan), mask)

    def subsample(self, n: int) -> "NodeSolution":
        step = (self.n - 1) // (n - 1)
        if step * (n - 1) != self.n - 1:
            raise ValueError(f"{n} nodes do not nest in {self.n}")
        return NodeSolution(self.values[::step, ::step], self.mask[::step, ::step])


def node_coords(n: int) -> np.ndarray:
    return np.linspace(-1.0, 1.0, n)


def component_at(domain: Domain, x, y) -> np.ndarray:
    """Index of the boundary component nearest to each point."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    d = [np.abs(x + 1), np.abs(x - 1), np.abs(y + 1), np.abs(y - 1)]
    d += [np.abs(p.signed_distance(x, y)) for p in domain.primitives]
    return np.argmin(np.stack(d), axis=0)


def _crossing(domain: Domain, px, py, dx, dy, h, iters: int = 60):
    """Fraction t in (0, 1] where p + t*h*d leaves the region (bisection)."""
    lo = np.zeros_like(px)
    hi = np.ones_like(px)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        inside = signed_distance(domain, px + mid * h * dx, py + mid * h * dy) > 0
        lo = np.where(inside, mid, lo)
        hi = np.where(inside, hi, mid)
    return hi


def solve_fd(instance: PdeInstance, n: int) -> NodeSolution:
    c1, c2, c3, c4, c5 = instance.coeffs.c
    for bc in instance.bcs:
        if bc.has_neumann:
            raise ValueError("the finite-difference reference supports Dirichlet conditions only")
    dom = instance.domain
    c = node_coords(n)
    h = c[1] - c[0]
    X, Y = np.meshgrid(c, c, indexing="xy")
    inside = contains(dom, X, Y)
    idx = -np.ones((n, n), dtype=np.int64)
    iy, ix = np.nonzero(inside)
    m = len(iy)
    idx[iy, ix] = np.arange(m)
    px, py = X[iy, ix], Y[iy, ix]
    rhs = np.broadcast_to(sym.evaluate(instance.source, px, py), (m,)).astype(float).copy()

    # per direction: neighbour index (or -1), spacing fraction, boundary value
    dirs = {"l": (-1, 0), "r": (1, 0), "d": (0, -1), "u": (0, 1)}
    nb, frac, gval = {}, {}, {}
    for key, (dx, dy) in dirs.items():
        jx, jy = ix + dx, iy + dy
        ok = (jx >= 0) & (jx < n) & (jy >= 0) & (jy < n)
        k = np.full(m, -1, dtype=np.int64)
        k[ok] = idx[jy[ok], jx[ok]]
        t = np.ones(m)
        g = np.zeros(m)
        cut = k < 0
        if cut.any():
            t[cut] = _crossing(dom, px[cut], py[cut], dx, dy, h)
            qx, qy = px[cut] + t[cut] * h * dx, py[cut] + t[cut] * h * dy
            comp = component_at(dom, qx, qy)
            vals = np.zeros(len(qx))
            for ci in np.unique(comp):
                bc = instance.bc_for(int(ci))
                if bc is None or not bc.has_dirichlet:
                    raise ValueError(f"component {ci} needs a Dirichlet condition")
                sel = comp == ci
                vals[sel] = bc.dirichlet_values(np.stack([qx[sel], qy[sel]], 1))
            g[cut] = vals
        nb[key], frac[key], gval[key] = k, t, g

    rows, cols, data = [], [], []
    diag = np.full(m, c1, dtype=float)
    for (a, b), c2nd, c1st in ((("l", "r"), c4, c2), (("d", "u"), c5, c3)):
        hl, hr = frac[a] * h, frac[b] * h
        wl = c2nd * 2.0 / (hl * (hl + hr)) - c1st * hr / (hl * (hl + hr))
        wr = c2nd * 2.0 / (hr * (hl + hr)) + c1st * hl / (hr * (hl + hr))
        diag += -c2nd * 2.0 / (hl * hr) + c1st * (hr - hl) / (hl * hr)
        for key, w in ((a, wl), (b, wr)):
            k = nb[key]
            known = k < 0
            rhs[known] -= w[known] * gval[key][known]
            rows.append(np.nonzero(~known)[0])
            cols.append(k[~known])
            data.append(w[~known])
    rows.append(np.arange(m))
    cols.append(np.arange(m))
    data.append(diag)
    A = sp.csr_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(m, m))
    u = spla.spsolve(A.tocsc(), rhs)
    values = np.full((n, n), np.nan)
    values[iy, ix] = u
    return NodeSolution(values, inside)


def cache_dir() -> Path:
    root = os.environ.get("HYPINO_CACHE")
    return Path(root) if root else Path.home() / ".cache" / "hypino"


def _key(instance: PdeInstance, n: int) -> str:
    blob = json.dumps({"instance": instance.to_dict(), "n": n, "v": 1}, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def cached_solve(instance: PdeInstance, n: int, name: str = "ref", directory: Optional[Path] = None) -> NodeSolution:
    """Solve once and keep the result on disk (float32 node values)."""
    d = Path(directory) if directory else cache_dir()
    path = d / f"{name}_{n}_{_key(instance, n)}.hgrid"
    if path.exists():
        return NodeSolution.from_bytes(path.read_bytes())
    sol = solve_fd(instance, n)
    d.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_bytes(sol.to_bytes())
    tmp.replace(path)
    # hand back exactly what a later cache hit returns
    return NodeSolution.from_bytes(path.read_bytes())


def grid_convergence(fine: NodeSolution, coarse: NodeSolution) -> float:
    """Relative L2 difference on nodes shared by both grids and inside both regions."""
    f = fine.subsample(coarse.n)
    both = f.mask & coarse.mask
    diff = f.values[both] - coarse.values[both]
    return float(np.linalg.norm(diff) / np.linalg.norm(f.values[both]))
