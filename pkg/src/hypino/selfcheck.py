"""Oracle suites run by ``hypino selfcheck``.

Each suite compares an exact computation with an independent route and
reports how many cases passed.
"""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
import torch

from . import symbolic as sym
from .data import SamplerConfig, sample_supervised
from .geometry import GeometryConfig, boundary_samples, contains, sample_domain, signed_distance
from .metrics import mse, smape
from .oracles import mp_fd_jet, mp_operator, pinn_fd_jet, rel_err
from .pde import check_supervised_consistency
from .pinn import PinnArchitecture, init_params, pinn_forward_jet

__all__ = ["SuiteResult", "SUITES", "run_suites", "inject_fault"]


@dataclass
class SuiteResult:
    name: str
    passed: int
    total: int
    seconds: float
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.total > 0 and self.passed == self.total

    def line(self) -> str:
        tag = "PASS" if self.ok else "FAIL"
        extra = f"  {self.detail}" if self.detail else ""
        return f"{tag} {self.name:<9} {self.passed}/{self.total}  {self.seconds:.1f}s{extra}"


def suite_symbolic(n: int, seed: int) -> tuple[int, int, str]:
    """Exact first/second derivatives against high-precision central differences."""
    rng = np.random.default_rng([seed, 10])
    ok, worst1, worst2 = 0, 0.0, 0.0
    for _ in range(n):
        u = sym.sample_manufactured_solution(rng)
        x, y = rng.uniform(-1, 1, 2)
        e = rel_err(sym.jet(u, x, y), mp_fd_jet(u, x, y))
        e1, e2 = float(e[1:3].max()), float(e[3:].max())
        worst1, worst2 = max(worst1, e1), max(worst2, e2)
        ok += e1 < 1e-6 and e2 < 1e-4
    return ok, n, f"worst first {worst1:.1e}, second {worst2:.1e}"


def suite_mms(n: int, seed: int, probes: int = 20) -> tuple[int, int, str]:
    """Stored sources against L[u] rebuilt from finite differences of u."""
    rng = np.random.default_rng([seed, 11])
    cfg = SamplerConfig(seed=seed)
    route = lambda u, c, x, y: mp_operator(u, c, x, y)
    ok, worst = 0, 0.0
    for i in range(n):
        inst = sample_supervised(rng, cfg)
        err = check_supervised_consistency(inst, probes, seed=i, residual_fn=route)
        worst = max(worst, err)
        ok += err < 1e-5
    return ok, n, f"worst {worst:.1e}"


def suite_autodiff(n: int, seed: int) -> tuple[int, int, str]:
    """Forward jets of random networks against finite differences of the plain forward pass."""
    arch = PinnArchitecture()
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng([seed, 12])
    ok, worst = 0, 0.0
    for _ in range(n):
        p = init_params(arch, gen, torch.float64)
        x, y = rng.uniform(-1, 1, (2, 16))
        with torch.no_grad():
            j = pinn_forward_jet(p, arch, torch.as_tensor(x), torch.as_tensor(y)).data
            fd = pinn_fd_jet(p, arch, x, y)
        e = rel_err(j.numpy(), fd.numpy())
        e1, e2 = float(e[:, 1:3].max()), float(e[:, 3:].max())
        worst = max(worst, e2)
        ok += e1 < 1e-6 and e2 < 1e-4 and float(e[:, 0].max()) < 1e-12
    return ok, n, f"worst second-order {worst:.1e}"


def suite_geometry(n: int, seed: int, eps: float = 1e-4) -> tuple[int, int, str]:
    """Sampled regions: primitives inside the square, normals point outward."""
    rng = np.random.default_rng([seed, 13])
    ok = 0
    for _ in range(n):
        dom = sample_domain(rng, GeometryConfig())
        bs = boundary_samples(dom, 1.0 / 32)
        out = bs.points + eps * bs.normals
        inn = bs.points - eps * bs.normals
        exits = ~contains(dom, out[:, 0], out[:, 1])
        stays = contains(dom, inn[:, 0], inn[:, 1])
        unit = np.allclose(np.linalg.norm(bs.normals, axis=1), 1.0)
        edge = np.abs(signed_distance(dom, bs.points[:, 0], bs.points[:, 1])) < 1e-9
        ok += bool(exits.all() and stays.all() and unit and edge.all())
    return ok, n, ""


def suite_metrics(n: int, seed: int) -> tuple[int, int, str]:
    """Worked examples plus the SMAPE range on random pairs."""
    y = np.array([1.0, -2.0, 3.5])
    cases = [
        abs(smape(2 * y, y) - 200.0 / 3.0) < 1e-6,
        abs(smape(-y, y) - 200.0) < 1e-6,
        abs(mse(y + 0.1, y) - 0.01) < 1e-12,
        smape(y, y) == 0.0 and mse(y, y) == 0.0,
    ]
    rng = np.random.default_rng([seed, 14])
    a = rng.standard_normal((n, 8)) * 10.0 ** rng.uniform(-12, 6, (n, 1))
    b = rng.standard_normal((n, 8)) * 10.0 ** rng.uniform(-12, 6, (n, 1))
    a[rng.random(a.shape) < 0.05] = 0.0
    vals = np.array([smape(p, q) for p, q in zip(a, b)])
    cases.append(bool(np.all((vals >= 0) & (vals <= 200))))
    return sum(cases), len(cases), ""


SUITES: dict[str, Callable[[int, int], tuple[int, int, str]]] = {
    "symbolic": suite_symbolic,
    "mms": suite_mms,
    "autodiff": suite_autodiff,
    "geometry": suite_geometry,
    "metrics": suite_metrics,
}

DEFAULT_SIZES = {"symbolic": 200, "mms": 50, "autodiff": 10, "geometry": 50, "metrics": 1000}


@contextlib.contextmanager
def inject_fault(scale: float = 1.001) -> Iterator[None]:
    """Temporarily scale every chain-rule outer derivative by ``scale``."""
    hook = sym._OUTER_DERIVATIVE
    original = hook["fn"]
    hook["fn"] = lambda name, z: sym.mul(scale, original(name, z))
    hook["gen"] += 1
    try:
        yield
    finally:
        hook["fn"] = original
        hook["gen"] += 1


def run_suites(
    names: Optional[Sequence[str]] = None,
    seed: int = 0,
    fault: bool = False,
    sizes: Optional[dict] = None,
    report: Optional[Callable[[str], None]] = None,
) -> list[SuiteResult]:
    names = list(names or SUITES)
    for nm in names:
        if nm not in SUITES:
            raise KeyError(nm)
    sizes = {**DEFAULT_SIZES, **(sizes or {})}
    results = []
    ctx = inject_fault() if fault else contextlib.nullcontext()
    with ctx:
        for nm in dict.fromkeys(names):
            t0 = time.perf_counter()
            try:
                passed, total, detail = SUITES[nm](sizes[nm], seed)
            except Exception as exc:  # a crashing suite is a failing suite
                passed, total, detail = 0, 1, f"error: {exc!r}"
            res = SuiteResult(nm, passed, total, time.perf_counter() - t0, detail)
            results.append(res)
            if report:
                report(res.line())
    return results
