import math

import numpy as np
import pytest

from hypino import symbolic as sym
from hypino.benchmarks import BENCHMARK_IDS, NUMERICAL_IDS, build_benchmark, reference_solution
from hypino.fdsolve import NodeSolution, cached_solve, grid_convergence, node_coords, solve_fd
from hypino.geometry import Disk
from hypino.pde import BoundaryCondition, OperatorCoeffs, PdeClass, PdeInstance, classify, to_canonical
from hypino.geometry import Domain

X, Y = sym.var_x(), sym.var_y()


def test_unknown_benchmark():
    with pytest.raises(ValueError, match="unknown benchmark"):
        build_benchmark("XX")


@pytest.mark.parametrize("bid", BENCHMARK_IDS)
def test_benchmarks_build(bid):
    spec = build_benchmark(bid)
    assert spec.instance.meta["benchmark"] == bid
    assert not spec.instance.supervised
    assert spec.has_closed_form == (bid not in NUMERICAL_IDS)


def test_wave_initial_condition():
    spec = build_benchmark("WV")
    qx, qy = to_canonical(0.5, 0.0, spec.meta["box"])
    assert (qx, qy) == (0.0, -1.0)
    assert sym.evaluate(spec.solution, qx, qy) == pytest.approx(1.0, abs=1e-12)
    assert classify(spec.instance.coeffs) == PdeClass.HYPERBOLIC


@pytest.mark.parametrize("bid", ["HT", "HZ", "WV"])
def test_closed_form_residuals_vanish(bid):
    spec = build_benchmark(bid)
    p = np.random.default_rng(0).uniform(-1, 1, (2, 500))
    lu = sym.evaluate(sym.apply_operator(spec.instance.coeffs.c, spec.solution), *p)
    f = sym.evaluate(spec.instance.source, *p)
    assert np.abs(lu - f).max() < 1e-8


def test_poisson_circles_geometry():
    spec = build_benchmark("PS-C")
    disks = spec.instance.domain.primitives
    assert len(disks) == 4 and all(isinstance(d, Disk) for d in disks)
    # radius 0.1 on a unit box becomes 0.2 on the canonical square
    assert spec.meta["radius_original"] == 0.1
    assert all(d.r == pytest.approx(0.2) for d in disks)
    assert {spec.instance.bc_for(i).g.value for i in range(4)} == {1.0}
    assert {spec.instance.bc_for(i).g.value for i in range(4, 8)} == {0.0}


def test_heat_boundary_data():
    spec = build_benchmark("HT")
    bottom = spec.instance.bc_for(2)
    xs = np.linspace(-0.9, 0.9, 7)
    np.testing.assert_allclose(bottom.dirichlet_values(np.stack([xs, -np.ones(7)], 1)), np.sin(math.pi * (xs + 1) / 2), atol=1e-12)


def _fd_problem(u, prims=()):
    coeffs = (0.5, 0.3, -0.2, 1.0, 1.0)
    dom = Domain(tuple(prims))
    bcs = tuple(BoundaryCondition(i, "dirichlet", g=u) for i in range(dom.n_components))
    return PdeInstance(OperatorCoeffs(coeffs), dom, sym.apply_operator(coeffs, u), bcs, u, True)


@pytest.mark.parametrize("prims", [(), (Disk(0.2, -0.1, 0.35),)])
def test_fd_solver_converges_at_second_order(prims):
    u = sym.mul(sym.apply("sin", sym.mul(1.3, X)), sym.apply("cos", sym.add(Y, 0.4)))
    inst = _fd_problem(u, prims)
    errs = []
    for n in (17, 33, 65):
        s = solve_fd(inst, n)
        c = node_coords(n)
        Xg, Yg = np.meshgrid(c, c, indexing="xy")
        errs.append(np.abs(s.values[s.mask] - sym.evaluate(u, Xg[s.mask], Yg[s.mask])).max())
    rates = [math.log2(errs[i] / errs[i + 1]) for i in range(2)]
    assert min(rates) > 1.7, (errs, rates)


def test_fd_solver_rejects_neumann():
    inst = _fd_problem(sym.const(1.0))
    bad = PdeInstance(inst.coeffs, inst.domain, inst.source, (BoundaryCondition(0, "neumann", h=sym.const(0.0)),) + inst.bcs[1:])
    with pytest.raises(ValueError):
        solve_fd(bad, 9)


def test_node_solution_round_trip_and_subsample():
    vals = np.arange(25.0).reshape(5, 5)
    mask = vals % 3 != 0
    s = NodeSolution(np.where(mask, vals, np.nan), mask)
    back = NodeSolution.from_bytes(s.to_bytes())
    assert back.to_bytes() == s.to_bytes()
    np.testing.assert_array_equal(back.mask, mask)
    sub = s.subsample(3)
    np.testing.assert_array_equal(sub.mask, mask[::2, ::2])
    with pytest.raises(ValueError):
        s.subsample(4)


def test_cache_hit_is_identical(tmp_path):
    inst = build_benchmark("PS-L").instance
    a = cached_solve(inst, 33, "t", tmp_path)
    files = list(tmp_path.iterdir())
    assert len(files) == 1
    b = cached_solve(inst, 33, "t", tmp_path)
    assert a.to_bytes() == b.to_bytes()


def test_grid_convergence_of_identical_grids():
    inst = build_benchmark("PS-L").instance
    s = solve_fd(inst, 17)
    assert grid_convergence(s, s) == 0.0


def test_reference_for_closed_form_matches_expression():
    spec = build_benchmark("HZ")
    ref = reference_solution(spec, 33)
    c = node_coords(33)
    assert ref.values[16, 8] == pytest.approx(sym.evaluate(spec.solution, c[8], c[16]))
