import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hypino import symbolic as sym
from hypino.oracles import mp_fd_jet, rel_err

X, Y = sym.var_x(), sym.var_y()

coords = st.floats(-1.0, 1.0, allow_nan=False)
seeds = st.integers(0, 2**32 - 1)


def random_solution(seed, **kw):
    return sym.sample_manufactured_solution(np.random.default_rng(seed), sym.SolutionConfig(**kw))


def test_constant_folding():
    assert sym.add(1.0, 2.0).value == 3.0
    assert sym.mul(0.0, X).value == 0.0
    assert sym.mul(1.0, X) is X
    assert sym.add(0.0, Y) is Y
    assert sym.apply("identity", X) is X
    assert sym.apply("sin", sym.const(0.0)).value == 0.0


def test_unknown_function_rejected():
    with pytest.raises(ValueError):
        sym.apply("log", X)


def test_expr_is_immutable():
    e = sym.apply("sin", X)
    with pytest.raises(AttributeError):
        e.op = "cos"


@pytest.mark.parametrize(
    "expr, var, x, y, want",
    [
        (sym.mul(X, X), "x", 0.3, 0.0, 0.6),
        (sym.mul(X, Y), "y", 0.3, -0.7, 0.3),
        (sym.apply("sin", sym.mul(2.0, X)), "x", 0.1, 0.0, 2 * math.cos(0.2)),
        (sym.apply("tanh", Y), "y", 0.0, 0.5, 1 - math.tanh(0.5) ** 2),
        (sym.apply("sigmoid", X), "x", 0.4, 0.0, (1 / (1 + math.exp(-0.4))) * (1 - 1 / (1 + math.exp(-0.4)))),
        (sym.apply("invquad", X), "x", 0.5, 0.0, -2 * 0.5 / (1 + 0.25) ** 2),
        (sym.apply("exp", sym.mul(-3.0, Y)), "y", 0.0, 0.2, -3 * math.exp(-0.6)),
        (sym.apply("cos", X), "y", 0.3, 0.3, 0.0),
    ],
)
def test_known_derivatives(expr, var, x, y, want):
    assert sym.evaluate(sym.differentiate(expr, var), x, y) == pytest.approx(want, rel=1e-13, abs=1e-15)


def test_bad_variable():
    with pytest.raises(ValueError):
        sym.differentiate(X, "z")


def test_evaluate_broadcasts():
    e = sym.add(X, sym.mul(2.0, Y))
    v = sym.evaluate(e, np.array([0.0, 1.0]), 1.0)
    np.testing.assert_array_equal(v, [2.0, 3.0])
    assert isinstance(sym.evaluate(e, 0.5, 0.25), float)
    c = sym.evaluate(sym.const(4.0), np.zeros(3), np.zeros(3))
    assert c.shape == (3,)


def test_overflow_is_reported():
    big = sym.apply("exp", sym.mul(800.0, X))
    with pytest.raises(sym.NonFiniteError):
        sym.evaluate(big, 1.0, 0.0)
    assert sym.evaluate(big, -1.0, 0.0) == 0.0


@settings(max_examples=40, deadline=None)
@given(seed=seeds, x=coords, y=coords)
def test_derivatives_match_high_precision_fd(seed, x, y):
    u = random_solution(seed)
    err = rel_err(sym.jet(u, x, y), mp_fd_jet(u, x, y))
    assert err[1:3].max() < 1e-6
    assert err[3:].max() < 1e-4


@settings(max_examples=30, deadline=None)
@given(a=seeds, b=seeds, x=coords, y=coords)
def test_linearity_and_product_rule(a, b, x, y):
    u, v = random_solution(a, n_terms=(1, 3)), random_solution(b, n_terms=(1, 3))
    for var in "xy":
        du, dv = sym.differentiate(u, var), sym.differentiate(v, var)
        lin = sym.differentiate(sym.add(sym.mul(2.5, u), v), var)
        assert sym.evaluate(lin, x, y) == pytest.approx(2.5 * sym.evaluate(du, x, y) + sym.evaluate(dv, x, y), rel=1e-10, abs=1e-10)
        prod = sym.differentiate(sym.mul(u, v), var)
        want = sym.evaluate(du, x, y) * sym.evaluate(v, x, y) + sym.evaluate(u, x, y) * sym.evaluate(dv, x, y)
        assert sym.evaluate(prod, x, y) == pytest.approx(want, rel=1e-9, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(seed=seeds, x=coords, y=coords)
def test_mixed_partials_commute(seed, x, y):
    u = random_solution(seed)
    uxy = sym.differentiate(sym.differentiate(u, "x"), "y")
    uyx = sym.differentiate(sym.differentiate(u, "y"), "x")
    a, b = sym.evaluate(uxy, x, y), sym.evaluate(uyx, x, y)
    assert abs(a - b) <= 1e-9 * (1 + abs(a))


@settings(max_examples=50, deadline=None)
@given(seed=seeds)
def test_prefix_round_trip(seed):
    u = random_solution(seed)
    text = sym.to_prefix(u)
    back = sym.from_prefix(text)
    assert sym.to_prefix(back) == text
    pts = np.random.default_rng(seed).uniform(-1, 1, (2, 16))
    np.testing.assert_array_equal(sym.evaluate(back, *pts), sym.evaluate(u, *pts))


@pytest.mark.parametrize("text", ["(add x", "(foo x)", "x y", ")", "(sin x y)", "inf", ""])
def test_prefix_rejects_garbage(text):
    with pytest.raises(ValueError):
        sym.from_prefix(text)


def test_apply_operator_matches_jet():
    u = sym.mul(sym.apply("sin", sym.mul(2.0, X)), sym.apply("cos", Y))
    c = (0.5, -1.0, 2.0, 1.5, -0.25)
    x, y = np.array([0.1, -0.4]), np.array([0.7, 0.2])
    j = sym.jet(u, x, y)
    want = c[0] * j[0] + c[1] * j[1] + c[2] * j[2] + c[3] * j[3] + c[4] * j[5]
    np.testing.assert_allclose(sym.evaluate(sym.apply_operator(c, u), x, y), want, rtol=1e-13)
    with pytest.raises(ValueError):
        sym.apply_operator((1, 2), u)


def test_substitute_composes():
    u = sym.add(sym.mul(X, X), Y)
    w = sym.substitute(u, sym.mul(2.0, Y), sym.add(X, 1.0))
    assert sym.evaluate(w, 0.3, 0.5) == pytest.approx((2 * 0.5) ** 2 + 1.3)


def test_depth_and_node_count_share_subtrees():
    s = sym.apply("sin", X)
    e = sym.mul(s, s)
    assert sym.depth(e) == 3
    assert sym.node_count(e) == 3


def test_term_spec_ranges():
    sym.TermSpec(0.0, 3.0, 1.0, -1.0, 6.0, "sin", "add").check()
    with pytest.raises(ValueError):
        sym.TermSpec(11.0, 0.0, 0.0, 0.0, 0.0, "sin", "add").check()
    with pytest.raises(ValueError):
        sym.TermSpec(0.0, 0.0, 7.0, 0.0, 0.0, "sin", "add").check()
    with pytest.raises(ValueError):
        sym.TermSpec(0.0, 0.0, 0.0, 0.0, 0.0, "exp", "add").check()


@settings(max_examples=30, deadline=None)
@given(seed=seeds)
def test_sampled_terms_respect_config(seed):
    cfg = sym.SolutionConfig()
    u, terms = sym.sample_manufactured_solution(np.random.default_rng(seed), cfg, return_terms=True)
    assert cfg.n_terms[0] <= len(terms) <= cfg.n_terms[1]
    for t in terms:
        t.check(cfg.ab_max, cfg.cde_max)
    assert sym.acceptable_solution(u, cfg)
    g = np.linspace(-1, 1, 9)
    assert np.all(np.abs(sym.evaluate(u, *np.meshgrid(g, g))) <= cfg.bound)


def test_sampling_is_deterministic():
    a = sym.to_prefix(random_solution(7))
    b = sym.to_prefix(random_solution(7))
    assert a == b
    assert a != sym.to_prefix(random_solution(8))


def test_build_solution_rules():
    add = sym.TermSpec(1.0, 0.0, 0.0, 2.0, 1.0, "identity", "add")
    mul = sym.TermSpec(0.0, 1.0, 0.0, 1.0, 0.0, "identity", "multiply")
    comp = sym.TermSpec(1.0, 0.0, 0.0, 1.0, 0.0, "sin", "compose")
    u = sym.build_solution([add, mul, comp])
    x, y = 0.3, -0.6
    assert sym.evaluate(u, x, y) == pytest.approx(math.sin((2 * x + 1) * y))
