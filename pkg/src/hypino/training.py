"""Losses, collocation sampling, hypernetwork training and PINN fine-tuning."""

from __future__ import annotations

import csv
import dataclasses
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch

from . import symbolic as sym
from .data import SamplerConfig, batch_composition, batch_records
from .geometry import contains
from .hypernet import Hypernet, HypernetConfig, coeffs_tensor, grids_tensor, save_checkpoint
from .pde import PdeInstance
from .pinn import Jet2, PinnArchitecture, PinnParams, pinn_forward, pinn_forward_jet

__all__ = [
    "HuberConfig",
    "LossWeights",
    "PHASE1_WEIGHTS",
    "PHASE2_WEIGHTS",
    "FINETUNE_WEIGHTS",
    "CollocationSet",
    "CollocationBatch",
    "huber",
    "residual_loss",
    "dirichlet_loss",
    "neumann_loss",
    "sobolev_loss",
    "total_loss",
    "batch_loss",
    "sample_collocation",
    "collate",
    "cosine_lr",
    "TrainConfig",
    "train_hypernet",
    "FinetuneConfig",
    "finetune_pinn",
    "TrainingDiverged",
    "LOG_COLUMNS",
]

LOG_COLUMNS = ("batch", "phase", "lr", "J", "J_R", "J_D", "J_N", "J_S")


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, message: str = "non-finite loss"):
        super().__init__(f"{message} at step {step}")
        self.step = step


@dataclass(frozen=True)
class HuberConfig:
    delta: float = 1.0

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")


def huber(r: torch.Tensor, cfg: HuberConfig = HuberConfig()) -> torch.Tensor:
    """Elementwise r^2/2 inside [-delta, delta], delta(|r| - delta/2) outside."""
    a = r.abs()
    d = cfg.delta
    return torch.where(a <= d, 0.5 * r * r, d * (a - 0.5 * d))


@dataclass(frozen=True)
class LossWeights:
    lambda_R: float = 1.0
    lambda_D: float = 1.0
    lambda_N: float = 1.0
    lambda_S: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if min(self.lambda_R, self.lambda_D, self.lambda_N, *self.lambda_S) < 0:
            raise ValueError("loss weights must be nonnegative")


PHASE1_WEIGHTS = LossWeights(lambda_R=0.01, lambda_D=10.0, lambda_N=1.0, lambda_S=(1.0, 0.1, 0.01))
PHASE2_WEIGHTS = LossWeights(lambda_R=0.1, lambda_D=10.0, lambda_N=1.0, lambda_S=(1.0, 1.0, 0.1))
FINETUNE_WEIGHTS = LossWeights(lambda_R=1.0, lambda_D=1.0, lambda_N=1.0, lambda_S=(0.0, 0.0, 0.0))


def _masked_mean(v: torch.Tensor, mask: Optional[torch.Tensor]) -> torch.Tensor:
    if mask is None:
        if v.shape[-1] == 0:
            raise ValueError("empty collocation set")
        return v.mean(-1)
    n = mask.sum(-1)
    return (v * mask).sum(-1) / n.clamp(min=1)


def residual_loss(jet: Jet2, coeffs, f: torch.Tensor, cfg: HuberConfig = HuberConfig(), mask=None) -> torch.Tensor:
    """Mean Huber of L[u] - f. ``coeffs`` is a 5-sequence or a ``[batch, 5]`` tensor."""
    if isinstance(coeffs, torch.Tensor) and coeffs.dim() == 2:
        c = coeffs.to(jet.data.dtype)[:, None, :]
        lu = c[..., 0] * jet.u + c[..., 1] * jet.u_x + c[..., 2] * jet.u_y + c[..., 3] * jet.u_xx + c[..., 4] * jet.u_yy
    else:
        lu = jet.operator(coeffs)
    return _masked_mean(huber(lu - f, cfg), mask)


def dirichlet_loss(u: torch.Tensor, g: torch.Tensor, cfg: HuberConfig = HuberConfig(), mask=None) -> torch.Tensor:
    return _masked_mean(huber(u - g, cfg), mask)


def neumann_loss(jet: Jet2, normals: torch.Tensor, h: torch.Tensor, cfg: HuberConfig = HuberConfig(), mask=None) -> torch.Tensor:
    return _masked_mean(huber(jet.normal_derivative(normals) - h, cfg), mask)


def sobolev_loss(jet: Jet2, exact: torch.Tensor, weights: Sequence[float], cfg: HuberConfig = HuberConfig(), mask=None) -> torch.Tensor:
    """Componentwise Huber on value, gradient and (u_xx, u_yy), weighted per order.

    ``exact`` has the jet layout ``[..., 6]``; u_xy is not penalized.
    """
    d = jet.data - exact
    w0, w1, w2 = (float(w) for w in weights)
    per_point = (
        w0 * huber(d[..., 0], cfg)
        + w1 * (huber(d[..., 1], cfg) + huber(d[..., 2], cfg))
        + w2 * (huber(d[..., 3], cfg) + huber(d[..., 5], cfg))
    )
    return _masked_mean(per_point, mask)


# --- collocation --------------------------------------------------------------


@dataclass
class CollocationSet:
    """Points for one instance. ``exact`` holds analytic jets at interior points."""

    interior: np.ndarray
    f: np.ndarray
    d_points: np.ndarray
    d_values: np.ndarray
    n_points: np.ndarray
    n_normals: np.ndarray
    n_values: np.ndarray
    exact: Optional[np.ndarray] = None


def sample_interior(instance: PdeInstance, rng: np.random.Generator, n: int) -> np.ndarray:
    out, have = [], 0
    while have < n:
        cand = rng.uniform(-1.0, 1.0, size=(2 * n, 2))
        cand = cand[contains(instance.domain, cand[:, 0], cand[:, 1])]
        out.append(cand)
        have += len(cand)
    return np.concatenate(out)[:n]


def _subset(rng, n_avail: int, n_max: int) -> np.ndarray:
    if n_avail <= n_max:
        return np.arange(n_avail)
    return np.sort(rng.choice(n_avail, size=n_max, replace=False))


def sample_collocation(
    instance: PdeInstance,
    rng: np.random.Generator,
    n_interior: int = 1024,
    n_dirichlet: int = 256,
    n_neumann: int = 256,
    boundary_spacing: float = 1.0 / 64,
) -> CollocationSet:
    pts = sample_interior(instance, rng, n_interior)
    f = np.broadcast_to(sym.evaluate(instance.source, pts[:, 0], pts[:, 1]), (len(pts),)).astype(float)
    bd = instance.boundary_data(boundary_spacing)
    di = _subset(rng, len(bd.d_points), n_dirichlet)
    ni = _subset(rng, len(bd.n_points), n_neumann)
    exact = None
    if instance.supervised:
        exact = sym.jet(instance.solution, pts[:, 0], pts[:, 1]).T.copy()
    return CollocationSet(
        pts, f, bd.d_points[di], bd.d_values[di], bd.n_points[ni], bd.n_normals[ni], bd.n_values[ni], exact
    )


@dataclass
class CollocationBatch:
    """Padded tensors for a batch of instances; masks mark real entries."""

    coeffs: torch.Tensor
    interior: torch.Tensor
    f: torch.Tensor
    d_points: torch.Tensor
    d_values: torch.Tensor
    d_mask: torch.Tensor
    n_points: torch.Tensor
    n_normals: torch.Tensor
    n_values: torch.Tensor
    n_mask: torch.Tensor
    exact: torch.Tensor
    supervised: torch.Tensor


def _pad(arrays: list[np.ndarray], tail: tuple[int, ...], dtype) -> tuple[torch.Tensor, torch.Tensor]:
    n = max([len(a) for a in arrays] + [1])
    out = np.zeros((len(arrays), n) + tail)
    mask = np.zeros((len(arrays), n))
    for i, a in enumerate(arrays):
        out[i, : len(a)] = a
        mask[i, : len(a)] = 1.0
    return torch.as_tensor(out, dtype=dtype), torch.as_tensor(mask, dtype=dtype)


def collate(instances: Sequence[PdeInstance], sets: Sequence[CollocationSet], dtype=torch.float32) -> CollocationBatch:
    if len({len(s.interior) for s in sets}) != 1:
        raise ValueError("interior sets must have equal size")
    t = lambda a: torch.as_tensor(np.stack(a), dtype=dtype)
    dp, dm = _pad([s.d_points for s in sets], (2,), dtype)
    dv, _ = _pad([s.d_values for s in sets], (), dtype)
    npt, nm = _pad([s.n_points for s in sets], (2,), dtype)
    nn_, _ = _pad([s.n_normals for s in sets], (2,), dtype)
    nv, _ = _pad([s.n_values for s in sets], (), dtype)
    n_int = len(sets[0].interior)
    exact = [s.exact if s.exact is not None else np.zeros((n_int, 6)) for s in sets]
    return CollocationBatch(
        coeffs=coeffs_tensor([i.coeffs for i in instances], dtype),
        interior=t([s.interior for s in sets]),
        f=t([s.f for s in sets]),
        d_points=dp,
        d_values=dv,
        d_mask=dm,
        n_points=npt,
        n_normals=nn_,
        n_values=nv,
        n_mask=nm,
        exact=t(exact),
        supervised=torch.as_tensor([float(i.supervised) for i in instances], dtype=dtype),
    )


def batch_loss(
    params: PinnParams,
    batch: CollocationBatch,
    weights: LossWeights,
    cfg: HuberConfig = HuberConfig(),
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Mean over instances of the gated weighted sum; per-term batch means for logging.

    Terms without points (or the Sobolev term on unsupervised instances) are
    multiplied by an exact zero gate, so they add nothing and pass no gradient.
    """
    arch = params.arch
    ji = pinn_forward_jet(params, arch, batch.interior[..., 0], batch.interior[..., 1])
    J_R = residual_loss(ji, batch.coeffs, batch.f, cfg)
    jd = pinn_forward(params, arch, batch.d_points[..., 0], batch.d_points[..., 1])
    J_D = dirichlet_loss(jd, batch.d_values, cfg, batch.d_mask)
    jn = pinn_forward_jet(params, arch, batch.n_points[..., 0], batch.n_points[..., 1])
    J_N = neumann_loss(jn, batch.n_normals, batch.n_values, cfg, batch.n_mask)
    J_S = sobolev_loss(ji, batch.exact, weights.lambda_S, cfg)

    gate_D = (batch.d_mask.sum(-1) > 0).to(J_D.dtype)
    gate_N = (batch.n_mask.sum(-1) > 0).to(J_N.dtype)
    gate_S = batch.supervised.to(J_S.dtype)
    per = weights.lambda_R * J_R + weights.lambda_D * gate_D * J_D + weights.lambda_N * gate_N * J_N + gate_S * J_S
    total = per.mean()

    def active_mean(v, gate):
        k = gate.sum()
        return (v * gate).sum() / k if k > 0 else torch.zeros((), dtype=v.dtype)

    ones = torch.ones_like(J_R)
    breakdown = {
        "J": total.detach(),
        "J_R": active_mean(J_R, ones).detach(),
        "J_D": active_mean(J_D, gate_D).detach(),
        "J_N": active_mean(J_N, gate_N).detach(),
        "J_S": active_mean(J_S, gate_S).detach(),
    }
    return total, breakdown


def total_loss(
    instance: PdeInstance,
    params: PinnParams,
    weights: LossWeights,
    collocation: CollocationSet,
    cfg: HuberConfig = HuberConfig(),
) -> tuple[torch.Tensor, dict[str, float]]:
    """Loss of one instance; the breakdown holds the unweighted terms (absent ones omitted)."""
    batch = collate([instance], [collocation], params.flat.dtype)
    flat = params.flat if params.flat.dim() == 2 else params.flat.unsqueeze(0)
    total, br = batch_loss(PinnParams(params.arch, flat), batch, weights, cfg)
    out = {"J": float(br["J"]), "J_R": float(br["J_R"])}
    if len(collocation.d_points):
        out["J_D"] = float(br["J_D"])
    if len(collocation.n_points):
        out["J_N"] = float(br["J_N"])
    if instance.supervised:
        out["J_S"] = float(br["J_S"])
    return total, out


def cosine_lr(step: int, total: int, lr_max: float, lr_min: float) -> float:
    if total <= 0:
        return lr_max
    s = min(max(step, 0), total)
    return lr_min + (lr_max - lr_min) * (1 + math.cos(math.pi * s / total)) / 2


def _fmt(v: float) -> str:
    return repr(float(v))


# --- hypernetwork training ----------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    batches: int = 3000
    batch_size: int = 8
    phase1_batches: int = 1000
    lr: float = 1e-4
    lr_min: float = 1e-6
    weight_decay: float = 0.01
    clip_norm: Optional[float] = 1.0
    seed: int = 0
    sampler: SamplerConfig = SamplerConfig()
    hypernet: HypernetConfig = HypernetConfig(resolution=32)
    n_interior: int = 1024
    n_dirichlet: int = 256
    n_neumann: int = 256
    boundary_spacing: float = 1.0 / 64
    supervised_only: bool = False
    checkpoint_every: int = 0
    huber_delta: float = 1.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrainResult:
    model: Hypernet
    log: list[dict]
    diverged: bool = False


def phase_of(batch: int, cfg: TrainConfig) -> int:
    return 1 if batch < cfg.phase1_batches else 2


def make_batch(cfg: TrainConfig, b: int):
    """Records and collocation tensors for training batch ``b`` (pure in ``b``)."""
    phase = phase_of(b, cfg)
    n_sup, n_uns = batch_composition(phase, cfg.batch_size)
    if cfg.supervised_only:
        n_sup, n_uns = cfg.batch_size, 0
    recs = batch_records(cfg.sampler, b, n_sup, n_uns, cfg.hypernet.resolution)
    rng = np.random.default_rng([cfg.seed, 3, b])
    insts = [r.instance for r in recs]
    sets = [
        sample_collocation(i, rng, cfg.n_interior, cfg.n_dirichlet, cfg.n_neumann, cfg.boundary_spacing) for i in insts
    ]
    return phase, recs, collate(insts, sets)


def train_hypernet(
    cfg: TrainConfig,
    log_path: Optional[Union[str, Path]] = None,
    checkpoint_path: Optional[Union[str, Path]] = None,
    meta: Optional[dict] = None,
    model: Optional[Hypernet] = None,
    progress=None,
) -> TrainResult:
    """Two-phase curriculum with AdamW and a cosine schedule.

    On a non-finite loss the current (still finite) weights are written to
    ``checkpoint_path`` and :class:`TrainingDiverged` is raised.
    """
    if cfg.sampler.seed != cfg.seed:
        cfg = dataclasses.replace(cfg, sampler=dataclasses.replace(cfg.sampler, seed=cfg.seed))
    torch.manual_seed(cfg.seed)
    if model is None:
        model = Hypernet(cfg.hypernet)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    hub = HuberConfig(cfg.huber_delta)
    meta = dict(meta or {}, train_config=cfg.to_dict())
    log: list[dict] = []
    fh = open(log_path, "w", newline="") if log_path else None
    writer = csv.writer(fh, lineterminator="\n") if fh else None
    if writer:
        writer.writerow(LOG_COLUMNS)
    try:
        for b in range(cfg.batches):
            lr = cosine_lr(b, max(cfg.batches - 1, 1), cfg.lr, cfg.lr_min)
            for group in opt.param_groups:
                group["lr"] = lr
            phase, recs, batch = make_batch(cfg, b)
            weights = PHASE1_WEIGHTS if phase == 1 else PHASE2_WEIGHTS
            params = model.generate(grids_tensor([r.grids for r in recs]), batch.coeffs, check=False)
            loss, br = batch_loss(params, batch, weights, hub)
            if not torch.isfinite(loss):
                if checkpoint_path:
                    save_checkpoint(checkpoint_path, model, dict(meta, batches_done=b, diverged=True))
                raise TrainingDiverged(b)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.clip_norm:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
            opt.step()
            row = {"batch": b, "phase": phase, "lr": lr, **{k: float(v) for k, v in br.items()}}
            log.append(row)
            if writer:
                writer.writerow([b, phase] + [_fmt(row[k]) for k in LOG_COLUMNS[2:]])
            if progress:
                progress(row)
            if checkpoint_path and cfg.checkpoint_every and (b + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(checkpoint_path, model, dict(meta, batches_done=b + 1))
    finally:
        if fh:
            fh.close()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, model, dict(meta, batches_done=cfg.batches))
    return TrainResult(model, log)


# --- fine-tuning --------------------------------------------------------------


@dataclass(frozen=True)
class FinetuneConfig:
    steps: int = 10_000
    lr: float = 1e-4
    lr_min: float = 1e-7
    weights: LossWeights = FINETUNE_WEIGHTS
    n_interior: int = 1024
    n_dirichlet: int = 256
    n_neumann: int = 256
    boundary_spacing: float = 1.0 / 64
    resample_every: int = 1
    eval_every: int = 1
    eval_resolution: int = 64
    seed: int = 0
    huber_delta: float = 1.0


@dataclass
class FinetuneResult:
    params: PinnParams
    log: list[dict]


def eval_points(instance: PdeInstance, resolution: int) -> np.ndarray:
    """In-domain cell centres of a ``resolution`` grid."""
    c = -1.0 + (np.arange(resolution) + 0.5) * (2.0 / resolution)
    X, Y = np.meshgrid(c, c, indexing="xy")
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    return pts[contains(instance.domain, pts[:, 0], pts[:, 1])]


def finetune_pinn(
    theta0: PinnParams,
    instance: PdeInstance,
    cfg: FinetuneConfig = FinetuneConfig(),
    reference: Optional[np.ndarray] = None,
    log_path: Optional[Union[str, Path]] = None,
    eval_xy: Optional[np.ndarray] = None,
) -> FinetuneResult:
    """Adam on the physics loss of one instance with a cosine schedule.

    MSE is logged against ``reference`` values at ``eval_xy`` (default: the
    in-domain cell centres of :func:`eval_points`), falling back to the
    analytic solution; it is NaN when neither exists.
    """
    dtype = theta0.flat.dtype
    flat = theta0.flat.detach().clone().reshape(-1).requires_grad_(True)
    arch = theta0.arch
    opt = torch.optim.Adam([flat], lr=cfg.lr)
    hub = HuberConfig(cfg.huber_delta)
    rng = np.random.default_rng([cfg.seed, 4])
    pts = eval_points(instance, cfg.eval_resolution) if eval_xy is None else np.asarray(eval_xy, float)
    if reference is None and instance.solution is not None:
        reference = np.broadcast_to(sym.evaluate(instance.solution, pts[:, 0], pts[:, 1]), (len(pts),))
    ref_t = None if reference is None else torch.as_tensor(np.array(reference, dtype=float), dtype=dtype)
    ex, ey = torch.as_tensor(pts[:, 0], dtype=dtype), torch.as_tensor(pts[:, 1], dtype=dtype)
    # the physics loss never reads analytic jets
    plain = dataclasses.replace(instance, supervised=False)
    log: list[dict] = []
    batch = None
    for step in range(cfg.steps + 1):
        lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.lr_min)
        for group in opt.param_groups:
            group["lr"] = lr
        if batch is None or (cfg.resample_every and step % cfg.resample_every == 0):
            cs = sample_collocation(plain, rng, cfg.n_interior, cfg.n_dirichlet, cfg.n_neumann, cfg.boundary_spacing)
            batch = collate([plain], [cs], dtype)
        loss, _ = batch_loss(PinnParams(arch, flat.unsqueeze(0)), batch, cfg.weights, hub)
        if not torch.isfinite(loss):
            raise TrainingDiverged(step)
        mse = float("nan")
        if ref_t is not None and (step % max(cfg.eval_every, 1) == 0 or step == cfg.steps):
            with torch.no_grad():
                mse = float(((pinn_forward(PinnParams(arch, flat), arch, ex, ey) - ref_t) ** 2).mean())
        log.append({"step": step, "loss": float(loss.detach()), "mse": mse, "lr": lr})
        if step == cfg.steps:
            break
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    if log_path:
        with open(log_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("step", "loss", "mse", "lr"))
            for r in log:
                w.writerow([r["step"], _fmt(r["loss"]), _fmt(r["mse"]), _fmt(r["lr"])])
    return FinetuneResult(PinnParams(arch, flat.detach()), log)
