"""Residual-driven refinement with ensembles of correction networks, and evaluation."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence, Union

import numpy as np
import torch

from . import symbolic as sym
from .benchmarks import BENCHMARK_IDS, BenchmarkSpec, build_benchmark, reference_solution
from .fdsolve import NodeSolution, node_coords
from .geometry import contains
from .metrics import mse, smape
from .pde import PdeGrids, PdeInstance, cell_centers, rasterize, rasterize_values
from .pinn import PinnParams, pinn_forward_jet

__all__ = [
    "Member",
    "PinnMember",
    "ExprMember",
    "FunctionMember",
    "EnsembleSolution",
    "ResidualFields",
    "compute_residual_fields",
    "delta_grids",
    "hypernet_solver",
    "oracle_solver",
    "refine",
    "RefineResult",
    "evaluate",
    "METRIC_COLUMNS",
]

METRIC_COLUMNS = ("benchmark", "rounds", "mse", "smape", "wall_ms")


class Member(Protocol):
    def jet(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """``[n, 6]`` array of (u, u_x, u_y, u_xx, u_xy, u_yy)."""


@dataclass
class PinnMember:
    """A generated PINN, optionally scaled (``u = scale * u_theta``)."""

    params: PinnParams
    scale: float = 1.0

    def jet(self, x, y) -> np.ndarray:
        dt = self.params.flat.dtype
        with torch.no_grad():
            j = pinn_forward_jet(self.params, self.params.arch, torch.as_tensor(np.asarray(x), dtype=dt), torch.as_tensor(np.asarray(y), dtype=dt))
        return self.scale * j.data.double().numpy()


@dataclass
class ExprMember:
    expr: sym.Expr

    def jet(self, x, y) -> np.ndarray:
        return sym.jet(self.expr, x, y).T


@dataclass
class FunctionMember:
    fn: Callable[[np.ndarray, np.ndarray], np.ndarray]

    def jet(self, x, y) -> np.ndarray:
        return np.asarray(self.fn(np.asarray(x, float), np.asarray(y, float)))


@dataclass
class EnsembleSolution:
    """u = base + sum of deltas, all with unit weight."""

    base: Member
    deltas: list = field(default_factory=list)

    @property
    def members(self) -> list:
        return [self.base] + list(self.deltas)

    def jet(self, x, y) -> np.ndarray:
        out = self.base.jet(x, y)
        for d in self.deltas:
            out = out + d.jet(x, y)
        return out

    def value(self, x, y) -> np.ndarray:
        return self.jet(x, y)[:, 0]

    def truncated(self, rounds: int) -> "EnsembleSolution":
        return EnsembleSolution(self.base, list(self.deltas[:rounds]))


def as_member(sol) -> Member:
    if isinstance(sol, PinnParams):
        return PinnMember(sol)
    if isinstance(sol, sym.Expr):
        return ExprMember(sol)
    return sol


@dataclass
class ResidualFields:
    """r_f on the cell-centre grid (zero outside the region) and boundary mismatches.

    ``d_points``/``n_points`` are the instance's boundary samples at spacing 1/R,
    in the order produced by :meth:`PdeInstance.boundary_data`.
    """

    r_f: np.ndarray
    inside: np.ndarray
    r_D: np.ndarray
    r_N: np.ndarray
    d_points: np.ndarray
    n_points: np.ndarray
    n_normals: np.ndarray

    def max_abs(self) -> float:
        parts = [np.abs(self.r_f[self.inside]), np.abs(self.r_D), np.abs(self.r_N)]
        return float(max((p.max() for p in parts if p.size), default=0.0))


def compute_residual_fields(instance: PdeInstance, solution, resolution: int = 64) -> ResidualFields:
    u = as_member(solution)
    c = cell_centers(resolution)
    X, Y = np.meshgrid(c, c, indexing="xy")
    inside = contains(instance.domain, X, Y)
    r_f = np.zeros((resolution, resolution))
    if inside.any():
        px, py = X[inside], Y[inside]
        j = u.jet(px, py)
        c1, c2, c3, c4, c5 = instance.coeffs.c
        lu = c1 * j[:, 0] + c2 * j[:, 1] + c3 * j[:, 2] + c4 * j[:, 3] + c5 * j[:, 5]
        r_f[inside] = lu - np.broadcast_to(sym.evaluate(instance.source, px, py), px.shape)
    bd = instance.boundary_data(1.0 / resolution)
    r_D = np.zeros(0)
    if len(bd.d_points):
        r_D = u.jet(bd.d_points[:, 0], bd.d_points[:, 1])[:, 0] - bd.d_values
    r_N = np.zeros(0)
    if len(bd.n_points):
        jn = u.jet(bd.n_points[:, 0], bd.n_points[:, 1])
        r_N = jn[:, 1] * bd.n_normals[:, 0] + jn[:, 2] * bd.n_normals[:, 1] - bd.n_values
    return ResidualFields(r_f, inside, r_D, r_N, bd.d_points, bd.n_points, bd.n_normals)


def delta_grids(fields: ResidualFields) -> PdeGrids:
    """Grids of the correction problem L[d] = -r_f, d = -r_D, dd/dn = -r_N.

    Boundary values go through the same rasterizer as the original data, so
    the masks are unchanged.
    """
    R = fields.r_f.shape[0]
    Mg, Vg = rasterize_values(fields.d_points, -fields.r_D, R)
    Mh, Vh = rasterize_values(fields.n_points, -fields.r_N, R)
    return PdeGrids((-fields.r_f).astype(np.float32), Mg, Vg, Mh, Vh)


# --- solvers --------------------------------------------------------------------

Solver = Callable[[PdeInstance, PdeGrids, Optional[EnsembleSolution]], Member]


def hypernet_solver(model, normalize: bool = False) -> Solver:
    """Wrap a hypernetwork as a solver; inference only.

    With ``normalize`` the grids are divided by their largest absolute value
    and the generated network is scaled back, which is exact for linear
    operators and keeps small corrections in the input range seen in training.
    """

    def solve(instance: PdeInstance, grids: PdeGrids, current) -> Member:
        scale = 1.0
        if normalize:
            s = max(float(np.abs(grids.F).max()), float(np.abs(grids.Vg).max()), float(np.abs(grids.Vh).max()))
            if s > 0:
                scale = s
                grids = PdeGrids(grids.F / s, grids.Mg, grids.Vg / s, grids.Mh, grids.Vh / s)
        with torch.no_grad():
            params = model.generate(grids, instance.coeffs)
        return PinnMember(params, scale)

    return solve


def oracle_solver(solution: sym.Expr) -> Solver:
    """Returns the exact correction ``u_true - current`` (a linear-problem oracle)."""
    truth = ExprMember(solution)

    def solve(instance, grids, current) -> Member:
        if current is None:
            return truth
        return FunctionMember(lambda x, y: truth.jet(x, y) - current.jet(x, y))

    return solve


@dataclass
class RefineResult:
    ensemble: EnsembleSolution
    metrics: list[dict]
    residuals: list[float]


def _node_eval(instance: PdeInstance, n: int):
    c = node_coords(n)
    X, Y = np.meshgrid(c, c, indexing="xy")
    mask = contains(instance.domain, X, Y)
    return X, Y, mask


def refine(
    instance: PdeInstance,
    solver: Union[Solver, torch.nn.Module],
    rounds: int,
    resolution: int = 64,
    reference: Optional[NodeSolution] = None,
    base: Optional[Member] = None,
    normalize: bool = False,
) -> RefineResult:
    """Base prediction plus ``rounds`` residual corrections.

    ``metrics`` holds MSE/SMAPE after every round against ``reference``;
    ``residuals`` the largest absolute residual of each running sum.
    """
    if rounds < 0:
        raise ValueError("rounds must be nonnegative")
    if isinstance(solver, torch.nn.Module):
        solver = hypernet_solver(solver, normalize)
    if base is None:
        base = solver(instance, rasterize(instance, resolution), None)
    ens = EnsembleSolution(as_member(base))
    metrics, residuals = [], []
    if reference is not None:
        X, Y, _ = _node_eval(instance, reference.n)
        m = reference.mask
    for t in range(rounds + 1):
        if t > 0:
            ens.deltas.append(solver(instance, delta_grids(fields), ens.truncated(len(ens.deltas))))
        fields = compute_residual_fields(instance, ens, resolution)
        residuals.append(fields.max_abs())
        if reference is not None:
            pred = np.full(reference.values.shape, np.nan)
            pred[m] = ens.value(X[m], Y[m])
            metrics.append({"round": t, "mse": mse(pred, reference.values, m), "smape": smape(pred, reference.values, m)})
    return RefineResult(ens, metrics, residuals)


def evaluate(
    model,
    benchmarks: Sequence[str] = BENCHMARK_IDS,
    rounds: Sequence[int] = (0,),
    resolution: int = 64,
    eval_nodes: int = 129,
    out_dir: Optional[Union[str, Path]] = None,
    run_config: Optional[dict] = None,
    normalize: bool = False,
) -> dict:
    """MSE/SMAPE per benchmark and refinement count, plus MSE_i / MSE_0 series.

    Writes ``metrics.csv``, ``metrics.json`` and per-round predictions
    (``<id>_r<k>.hgrid``, node values and mask) when ``out_dir`` is given.
    """
    rows, series = [], {}
    want = sorted(set(int(r) for r in rounds))
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    for bid in benchmarks:
        spec = build_benchmark(bid)
        ref = reference_solution(spec, eval_nodes)
        t0 = time.perf_counter()
        res = refine(spec.instance, model, max(want), resolution, ref, normalize=normalize)
        wall = (time.perf_counter() - t0) * 1000.0
        by_round = {m["round"]: m for m in res.metrics}
        mse0 = by_round[0]["mse"]
        series[bid] = [m["mse"] / mse0 if mse0 > 0 else (0.0 if m["mse"] == 0 else float("inf")) for m in res.metrics]
        X, Y, mask = _node_eval(spec.instance, eval_nodes)
        for r in want:
            rows.append({"benchmark": bid, "rounds": r, "mse": by_round[r]["mse"], "smape": by_round[r]["smape"], "wall_ms": wall})
            if out:
                vals = np.zeros((eval_nodes, eval_nodes))
                vals[mask] = res.ensemble.truncated(r).value(X[mask], Y[mask])
                (out / f"{bid}_r{r}.hgrid").write_bytes(NodeSolution(np.where(mask, vals, np.nan), mask).to_bytes())
    result = {"rows": rows, "relative_error": series, "config": run_config or {}}
    if out:
        with open(out / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRIC_COLUMNS)
            for r in rows:
                w.writerow([r["benchmark"], r["rounds"], repr(r["mse"]), repr(r["smape"]), f"{r['wall_ms']:.1f}"])
        (out / "metrics.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    return result
