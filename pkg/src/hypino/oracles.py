"""Independent finite-difference routes used to cross-check exact derivatives.

Nothing here calls :func:`symbolic.differentiate` or the PINN jet code, so a
broken derivative rule shows up as a mismatch against these values.
"""

from __future__ import annotations

from typing import Sequence

import mpmath
import numpy as np
import torch

from . import symbolic as sym
from .pinn import PinnArchitecture, PinnParams, pinn_forward

__all__ = [
    "mp_compile",
    "mp_evaluate",
    "mp_fd_jet",
    "mp_operator",
    "rel_err",
    "pinn_fd_jet",
]

MP_DIGITS = 50
MP_STEP = mpmath.mpf("1e-15")

_MP_FUNCS = {
    "sin": mpmath.sin,
    "cos": mpmath.cos,
    "tanh": mpmath.tanh,
    "sigmoid": lambda z: 1 / (1 + mpmath.exp(-z)),
    "invquad": lambda z: 1 / (1 + z * z),
    "exp": mpmath.exp,
}


def mp_compile(expr: sym.Expr):
    """Flatten a tree into a straight-line program; returns ``run(x, y)``.

    Shared subtrees are evaluated once. Constants are converted when ``run`` is
    first called at a given precision, so call it inside the intended ``workdps``.
    """
    order: list[sym.Expr] = []
    slot: dict[int, int] = {}

    def visit(e):
        if id(e) in slot:
            return
        for a in e.args:
            visit(a)
        slot[id(e)] = len(order)
        order.append(e)

    visit(expr)
    prog = [(e.op, e.value, tuple(slot[id(a)] for a in e.args)) for e in order]
    consts: dict = {}

    def run(x, y):
        prec = mpmath.mp.prec
        table = consts.get(prec)
        if table is None:
            table = consts[prec] = {i: mpmath.mpf(v) for i, (op, v, _) in enumerate(prog) if op == "const"}
        vals = [None] * len(prog)
        for i, (op, _, args) in enumerate(prog):
            if op == "const":
                v = table[i]
            elif op == "x":
                v = x
            elif op == "y":
                v = y
            elif op == "add":
                v = mpmath.fsum(vals[a] for a in args)
            elif op == "mul":
                v = vals[args[0]]
                for a in args[1:]:
                    v = v * vals[a]
            else:
                v = _MP_FUNCS[op](vals[args[0]])
            vals[i] = v
        return vals[-1]

    return run


def mp_evaluate(expr: sym.Expr, x, y):
    """Evaluate an expression tree in mpmath arithmetic (current precision)."""
    return mp_compile(expr)(x, y)


def _fd_jet(run, x: float, y: float, mixed: bool) -> np.ndarray:
    with mpmath.workdps(MP_DIGITS):
        X, Y, h = mpmath.mpf(x), mpmath.mpf(y), MP_STEP
        f = lambda dx, dy: run(X + dx * h, Y + dy * h)
        u = f(0, 0)
        xp, xm, yp, ym = f(1, 0), f(-1, 0), f(0, 1), f(0, -1)
        out = [
            u,
            (xp - xm) / (2 * h),
            (yp - ym) / (2 * h),
            (xp - 2 * u + xm) / (h * h),
            (f(1, 1) - f(1, -1) - f(-1, 1) + f(-1, -1)) / (4 * h * h) if mixed else mpmath.nan,
            (yp - 2 * u + ym) / (h * h),
        ]
        return np.array([float(v) for v in out])


def mp_fd_jet(expr: sym.Expr, x: float, y: float, mixed: bool = True) -> np.ndarray:
    """(u, u_x, u_y, u_xx, u_xy, u_yy) by central differences at high precision.

    With ``mixed=False`` the four diagonal stencil points are skipped and u_xy is NaN.
    """
    return _fd_jet(mp_compile(expr), x, y, mixed)


def mp_operator(expr: sym.Expr, coeffs: Sequence[float], x, y) -> np.ndarray:
    """L[u] at each point from the finite-difference jet (no symbolic derivatives)."""
    c1, c2, c3, c4, c5 = (float(c) for c in coeffs)
    run = mp_compile(expr)
    out = []
    for xi, yi in zip(np.atleast_1d(x), np.atleast_1d(y)):
        j = _fd_jet(run, float(xi), float(yi), mixed=False)
        out.append(c1 * j[0] + c2 * j[1] + c3 * j[2] + c4 * j[3] + c5 * j[5])
    return np.array(out)


def rel_err(a, b) -> np.ndarray:
    """|a - b| / (1 + |b|)."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    return np.abs(a - b) / (1.0 + np.abs(b))


def pinn_fd_jet(params: PinnParams, arch: PinnArchitecture, x, y, h1: float = 1e-5, h2: float = 1e-3) -> torch.Tensor:
    """Jet of a single network by finite differences of :func:`pinn_forward`.

    First derivatives use the two-point stencil at ``h1``; second derivatives
    (including the mixed one) use fourth-order central stencils at ``h2``.
    Returns ``[n, 6]`` in float64.
    """
    p = PinnParams(arch, params.flat.double())
    x = torch.as_tensor(np.asarray(x, float), dtype=torch.float64)
    y = torch.as_tensor(np.asarray(y, float), dtype=torch.float64)
    f = lambda dx, dy: pinn_forward(p, arch, x + dx, y + dy)
    u = f(0.0, 0.0)
    ux = (f(h1, 0.0) - f(-h1, 0.0)) / (2 * h1)
    uy = (f(0.0, h1) - f(0.0, -h1)) / (2 * h1)
    w = (-1.0, 16.0, -30.0, 16.0, -1.0)
    s = (-2, -1, 0, 1, 2)
    uxx = sum(wi * f(si * h2, 0.0) for wi, si in zip(w, s)) / (12 * h2 * h2)
    uyy = sum(wi * f(0.0, si * h2) for wi, si in zip(w, s)) / (12 * h2 * h2)
    d1 = (1.0, -8.0, 0.0, 8.0, -1.0)
    uxy = 0.0
    for a, sa in zip(d1, s):
        for b, sb in zip(d1, s):
            if a and b:
                uxy = uxy + a * b * f(sa * h2, sb * h2)
    uxy = uxy / (144 * h2 * h2)
    return torch.stack([u, ux, uy, uxx, uxy, uyy], dim=-1)
