"""Expression trees for manufactured solutions.

Expressions are immutable DAG nodes over two variables ``x`` and ``y``. Only
constant folding and zero/identity elimination are performed when nodes are
built, so the structure produced by :func:`differentiate` stays predictable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Expr",
    "NonFiniteError",
    "TermSpec",
    "SolutionConfig",
    "const",
    "var_x",
    "var_y",
    "add",
    "mul",
    "apply",
    "differentiate",
    "evaluate",
    "jet",
    "apply_operator",
    "substitute",
    "depth",
    "node_count",
    "to_prefix",
    "from_prefix",
    "sample_terms",
    "build_solution",
    "sample_manufactured_solution",
    "BASIS",
    "FUNCTIONS",
]

# Unary functions an Apply node may carry. "exp" is not part of the sampling
# basis; it is needed for benchmark solutions and sources.
FUNCTIONS = ("sin", "cos", "tanh", "sigmoid", "invquad", "exp")
BASIS = ("identity", "sin", "cos", "tanh", "sigmoid", "invquad")
RULES = ("add", "multiply", "compose")


class NonFiniteError(ArithmeticError):
    """Raised when evaluation of a subtree produces inf or nan."""

    def __init__(self, node: "Expr"):
        text = to_prefix(node)
        if len(text) > 200:
            text = text[:197] + "..."
        super().__init__(f"non-finite value produced by subtree {text}")
        self.node = node


class Expr:
    """A node of an expression DAG.

    ``op`` is one of ``"const"``, ``"x"``, ``"y"``, ``"add"``, ``"mul"`` or a
    name from :data:`FUNCTIONS` (unary application). Use the builder functions
    rather than the constructor.
    """

    __slots__ = ("op", "args", "value", "_dcache", "_depth", "__weakref__")

    def __init__(self, op: str, args: tuple["Expr", ...] = (), value: float = 0.0):
        self.op = op
        self.args = args
        self.value = float(value)
        self._dcache: dict[tuple[str, int], Expr] = {}
        self._depth = -1

    def __repr__(self) -> str:
        text = to_prefix(self)
        return f"Expr({text if len(text) < 120 else text[:117] + '...'})"

    def __setattr__(self, name, val):
        if name in ("op", "args", "value") and hasattr(self, "value"):
            raise AttributeError("Expr is immutable")
        object.__setattr__(self, name, val)

    # operator sugar for building benchmark expressions
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(-1.0, _lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), mul(-1.0, self))

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(-1.0, self)

    @property
    def is_const(self) -> bool:
        return self.op == "const"


def _lift(v) -> Expr:
    return v if isinstance(v, Expr) else const(v)


_ZERO = Expr("const", (), 0.0)
_ONE = Expr("const", (), 1.0)
_X = Expr("x")
_Y = Expr("y")


def const(v: float) -> Expr:
    v = float(v)
    if v == 0.0:
        return _ZERO
    if v == 1.0:
        return _ONE
    return Expr("const", (), v)


def var_x() -> Expr:
    return _X


def var_y() -> Expr:
    return _Y


def add(*terms) -> Expr:
    flat: list[Expr] = []
    total = 0.0
    for t in terms:
        t = _lift(t)
        parts = t.args if t.op == "add" else (t,)
        for p in parts:
            if p.op == "const":
                total += p.value
            else:
                flat.append(p)
    if total != 0.0:
        flat.append(const(total))
    if not flat:
        return _ZERO
    if len(flat) == 1:
        return flat[0]
    return Expr("add", tuple(flat))


def mul(*factors) -> Expr:
    flat: list[Expr] = []
    coef = 1.0
    for f in factors:
        f = _lift(f)
        parts = f.args if f.op == "mul" else (f,)
        for p in parts:
            if p.op == "const":
                coef *= p.value
            else:
                flat.append(p)
    if coef == 0.0:
        return _ZERO
    if coef != 1.0:
        flat.insert(0, const(coef))
    if not flat:
        return const(coef)
    if len(flat) == 1:
        return flat[0]
    return Expr("mul", tuple(flat))


def _fn_value(name: str, z: float) -> float:
    return float(_NP_FUNCS[name](np.float64(z)))


def apply(name: str, arg) -> Expr:
    """Apply a unary function; ``"identity"`` returns the argument itself."""
    arg = _lift(arg)
    if name == "identity":
        return arg
    if name not in FUNCTIONS:
        raise ValueError(f"unknown function {name!r}")
    if arg.op == "const":
        return const(_fn_value(name, arg.value))
    return Expr(name, (arg,))


def _sigmoid(z):
    return expit(z)


def _invquad(z):
    return 1.0 / (1.0 + z * z)


_NP_FUNCS = {
    "sin": np.sin,
    "cos": np.cos,
    "tanh": np.tanh,
    "sigmoid": _sigmoid,
    "invquad": _invquad,
    "exp": np.exp,
}


def _outer_derivative(name: str, z: Expr) -> Expr:
    """d/dz of ``name(z)`` as an expression in z."""
    if name == "sin":
        return apply("cos", z)
    if name == "cos":
        return mul(-1.0, apply("sin", z))
    # products of sigmoids instead of 1 - t^2 and s(1 - s): no cancellation when saturated
    if name == "tanh":
        return mul(4.0, apply("sigmoid", mul(2.0, z)), apply("sigmoid", mul(-2.0, z)))
    if name == "sigmoid":
        return mul(apply("sigmoid", z), apply("sigmoid", mul(-1.0, z)))
    if name == "invquad":
        q = apply("invquad", z)
        return mul(-2.0, z, q, q)
    if name == "exp":
        return apply("exp", z)
    raise ValueError(name)


# Indirection point so a self-check can perturb a rule and confirm the oracle
# suite notices. Bump "gen" whenever "fn" changes; cached derivatives are keyed on it.
_OUTER_DERIVATIVE = {"fn": _outer_derivative, "gen": 0}


def differentiate(expr: Expr, var: str) -> Expr:
    """Exact partial derivative of ``expr`` with respect to ``"x"`` or ``"y"``."""
    if var not in ("x", "y"):
        raise ValueError(f"var must be 'x' or 'y', got {var!r}")
    key = (var, _OUTER_DERIVATIVE["gen"])
    cached = expr._dcache.get(key)
    if cached is not None:
        return cached
    op = expr.op
    if op == "const":
        out = _ZERO
    elif op in ("x", "y"):
        out = _ONE if op == var else _ZERO
    elif op == "add":
        out = add(*(differentiate(a, var) for a in expr.args))
    elif op == "mul":
        terms = []
        for i, a in enumerate(expr.args):
            da = differentiate(a, var)
            if da.op == "const" and da.value == 0.0:
                continue
            terms.append(mul(*expr.args[:i], da, *expr.args[i + 1 :]))
        out = add(*terms)
    else:
        (z,) = expr.args
        dz = differentiate(z, var)
        if dz.op == "const" and dz.value == 0.0:
            out = _ZERO
        else:
            out = mul(_OUTER_DERIVATIVE["fn"](op, z), dz)
    expr._dcache[key] = out
    return out


def evaluate(expr: Expr, x, y):
    """Evaluate at scalar or array coordinates (broadcast together).

    Raises :class:`NonFiniteError` naming the first subtree whose value is
    not finite although its children are.
    """
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    xa, ya = np.broadcast_arrays(xa, ya)
    memo: dict[int, np.ndarray] = {}
    with np.errstate(all="ignore"):
        out = _eval(expr, xa, ya, memo)
    out = np.broadcast_to(out, xa.shape)
    if out.ndim == 0:
        return float(out)
    return np.array(out)


def _eval(e: Expr, x, y, memo):
    key = id(e)
    hit = memo.get(key)
    if hit is not None:
        return hit
    op = e.op
    if op == "const":
        v = np.float64(e.value)
    elif op == "x":
        v = x
    elif op == "y":
        v = y
    elif op == "add":
        v = _eval(e.args[0], x, y, memo)
        for a in e.args[1:]:
            v = v + _eval(a, x, y, memo)
    elif op == "mul":
        v = _eval(e.args[0], x, y, memo)
        for a in e.args[1:]:
            v = v * _eval(a, x, y, memo)
    else:
        v = _NP_FUNCS[op](_eval(e.args[0], x, y, memo))
    if op not in ("const", "x", "y") and not np.all(np.isfinite(v)):
        raise NonFiniteError(e)
    memo[key] = v
    return v


def jet(expr: Expr, x, y) -> np.ndarray:
    """Stack ``[u, u_x, u_y, u_xx, u_xy, u_yy]`` along a leading axis."""
    ux = differentiate(expr, "x")
    uy = differentiate(expr, "y")
    parts = [expr, ux, uy, differentiate(ux, "x"), differentiate(ux, "y"), differentiate(uy, "y")]
    xa, ya = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
    return np.stack([np.broadcast_to(evaluate(p, xa, ya), xa.shape) for p in parts])


def apply_operator(coeffs: Sequence[float], u: Expr) -> Expr:
    """``c1 u + c2 u_x + c3 u_y + c4 u_xx + c5 u_yy`` as an expression."""
    c = [float(v) for v in coeffs]
    if len(c) != 5:
        raise ValueError("expected five operator coefficients")
    ux = differentiate(u, "x")
    uy = differentiate(u, "y")
    parts = [u, ux, uy, differentiate(ux, "x"), differentiate(uy, "y")]
    return add(*(mul(ci, p) for ci, p in zip(c, parts) if ci != 0.0))


def substitute(expr: Expr, x_new: Expr, y_new: Expr) -> Expr:
    """Replace the variables ``x`` and ``y`` by the given expressions."""
    memo: dict[int, Expr] = {}

    def go(e: Expr) -> Expr:
        hit = memo.get(id(e))
        if hit is not None:
            return hit
        if e.op == "const":
            out = e
        elif e.op == "x":
            out = x_new
        elif e.op == "y":
            out = y_new
        elif e.op == "add":
            out = add(*(go(a) for a in e.args))
        elif e.op == "mul":
            out = mul(*(go(a) for a in e.args))
        else:
            out = apply(e.op, go(e.args[0]))
        memo[id(e)] = out
        return out

    return go(expr)


def depth(expr: Expr) -> int:
    """Longest root-to-leaf path, counted in nodes."""
    if expr._depth >= 0:
        return expr._depth
    stack = [(expr, False)]
    while stack:
        e, ready = stack.pop()
        if e._depth >= 0:
            continue
        if ready:
            e._depth = 1 + max((a._depth for a in e.args), default=0)
        else:
            stack.append((e, True))
            stack.extend((a, False) for a in e.args if a._depth < 0)
    return expr._depth


def node_count(expr: Expr) -> int:
    """Number of distinct nodes in the DAG."""
    seen: set[int] = set()
    stack = [expr]
    while stack:
        e = stack.pop()
        if id(e) in seen:
            continue
        seen.add(id(e))
        stack.extend(e.args)
    return len(seen)


# --- prefix serialization ---------------------------------------------------


def to_prefix(expr: Expr) -> str:
    """Compact prefix text, e.g. ``(add (mul 2.0 x) (sin y))``."""
    out: list[str] = []

    def go(e: Expr):
        if e.op == "const":
            out.append(repr(e.value))
        elif e.op in ("x", "y"):
            out.append(e.op)
        else:
            out.append("(" + e.op)
            for a in e.args:
                out.append(" ")
                go(a)
            out.append(")")

    go(expr)
    return "".join(out)


def from_prefix(text: str) -> Expr:
    tokens = text.replace("(", " ( ").replace(")", " ) ").split()
    pos = 0

    def parse() -> Expr:
        nonlocal pos
        if pos >= len(tokens):
            raise ValueError("unexpected end of expression")
        tok = tokens[pos]
        pos += 1
        if tok == "(":
            op = tokens[pos]
            pos += 1
            args = []
            while pos < len(tokens) and tokens[pos] != ")":
                args.append(parse())
            if pos >= len(tokens):
                raise ValueError("unbalanced parentheses")
            pos += 1
            if op == "add":
                return Expr("add", tuple(args)) if len(args) > 1 else add(*args)
            if op == "mul":
                return Expr("mul", tuple(args)) if len(args) > 1 else mul(*args)
            if op in FUNCTIONS and len(args) == 1:
                return Expr(op, (args[0],))
            raise ValueError(f"bad node {op!r} with {len(args)} children")
        if tok == ")":
            raise ValueError("unexpected ')'")
        if tok == "x":
            return _X
        if tok == "y":
            return _Y
        v = float(tok)
        if not math.isfinite(v):
            raise ValueError(f"non-finite constant {tok}")
        return const(v)

    expr = parse()
    if pos != len(tokens):
        raise ValueError("trailing tokens after expression")
    return expr


# --- manufactured solutions ---------------------------------------------------


@dataclass(frozen=True)
class TermSpec:
    """One update of the manufactured-solution sampler."""

    a: float
    b: float
    c: float
    d: float
    e: float
    psi: str
    rule: str

    def check(self, ab_max: float = 10.0, cde_max: float = 2 * math.pi) -> None:
        for name in ("a", "b"):
            v = getattr(self, name)
            if not (v == 0.0 or -ab_max <= v <= ab_max):
                raise ValueError(f"{name}={v} outside {{0}} u [-{ab_max}, {ab_max}]")
        for name in ("c", "d", "e"):
            v = getattr(self, name)
            if not -cde_max <= v <= cde_max:
                raise ValueError(f"{name}={v} outside [-{cde_max}, {cde_max}]")
        if self.psi not in BASIS:
            raise ValueError(f"unknown basis {self.psi!r}")
        if self.rule not in RULES:
            raise ValueError(f"unknown rule {self.rule!r}")


@dataclass(frozen=True)
class SolutionConfig:
    n_terms: tuple[int, int] = (6, 10)
    ab_max: float = 10.0
    cde_max: float = 2 * math.pi
    p_zero_ab: float = 0.5
    basis: tuple[str, ...] = BASIS
    rules: tuple[str, ...] = RULES
    bound: float = 1e6
    probe: int = 32
    max_depth: int = 64
    max_attempts: int = 1000
    probe_box: tuple[float, float, float, float] = field(default=(-1.0, 1.0, -1.0, 1.0))


def sample_terms(rng: np.random.Generator, cfg: SolutionConfig = SolutionConfig()) -> list[TermSpec]:
    lo, hi = cfg.n_terms
    n = int(rng.integers(lo, hi + 1))
    terms = []
    for _ in range(n):
        a = 0.0 if rng.random() < cfg.p_zero_ab else float(rng.uniform(-cfg.ab_max, cfg.ab_max))
        b = 0.0 if rng.random() < cfg.p_zero_ab else float(rng.uniform(-cfg.ab_max, cfg.ab_max))
        c, d, e = (float(v) for v in rng.uniform(-cfg.cde_max, cfg.cde_max, size=3))
        psi = cfg.basis[int(rng.integers(len(cfg.basis)))]
        rule = cfg.rules[int(rng.integers(len(cfg.rules)))]
        terms.append(TermSpec(a, b, c, d, e, psi, rule))
    return terms


def build_solution(terms: Iterable[TermSpec]) -> Expr:
    u = _ZERO
    x, y = _X, _Y
    for t in terms:
        if t.rule == "compose":
            u = add(mul(t.d, apply(t.psi, add(mul(t.a, u), t.c))), t.e)
            continue
        term = add(mul(t.d, apply(t.psi, add(mul(t.a, x), mul(t.b, y), t.c))), t.e)
        if t.rule == "add":
            u = add(u, term)
        elif t.rule == "multiply":
            u = mul(u, term)
        else:
            raise ValueError(f"unknown rule {t.rule!r}")
    return u


def _second_derivatives(u: Expr) -> list[Expr]:
    ux = differentiate(u, "x")
    uy = differentiate(u, "y")
    return [differentiate(ux, "x"), differentiate(ux, "y"), differentiate(uy, "y")]


def acceptable_solution(u: Expr, cfg: SolutionConfig) -> bool:
    """Depth cap on second-derivative trees plus the bounded-value probe."""
    if any(depth(d) > cfg.max_depth for d in _second_derivatives(u)):
        return False
    x0, x1, y0, y1 = cfg.probe_box
    gx = np.linspace(x0, x1, cfg.probe)
    gy = np.linspace(y0, y1, cfg.probe)
    X, Y = np.meshgrid(gx, gy, indexing="xy")
    try:
        vals = evaluate(u, X, Y)
    except NonFiniteError:
        return False
    return bool(np.all(np.abs(vals) <= cfg.bound))


def sample_manufactured_solution(
    rng: np.random.Generator, cfg: SolutionConfig = SolutionConfig(), *, return_terms: bool = False
):
    """Draw a random differentiable solution, resampling until it is acceptable."""
    for _ in range(cfg.max_attempts):
        terms = sample_terms(rng, cfg)
        u = build_solution(terms)
        if acceptable_solution(u, cfg):
            return (u, terms) if return_terms else u
    raise RuntimeError(f"no acceptable solution after {cfg.max_attempts} attempts")
