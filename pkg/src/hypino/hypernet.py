"""Hypernetwork mapping (operator coefficients, grids) to PINN parameters."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .pde import OperatorCoeffs, PdeGrids
from .pinn import FourierFeatureConfig, PinnArchitecture, PinnParams

__all__ = [
    "HypernetConfig",
    "LatentBundle",
    "Hypernet",
    "grids_tensor",
    "coeffs_tensor",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"HYPCKPT1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class HypernetConfig:
    resolution: int = 64
    grid_freqs: tuple[float, ...] = (0.1, 0.2, 0.4, 0.8, 1.6)
    embed_channels: int = 16
    base_channels: int = 32
    blocks: int = 4
    window: int = 4
    block_heads: int = 4
    coeff_freqs: tuple[float, ...] = (0.25, 0.5, 1.0, 2.0, 4.0, 8.0)
    coeff_dim: int = 32
    pool_heads: int = 4
    head_hidden: int = 128
    head_init_scale: float = 1e-3
    head_bias_init: str = "zero"  # or "glorot"
    embed_norm: bool = True
    pinn_width: int = 32
    pinn_hidden_layers: int = 3
    pinn_fourier_n: int = 8
    pinn_fourier_f0: float = 0.25

    def __post_init__(self):
        if self.blocks < 2:
            raise ValueError("need at least two encoder blocks")
        if self.resolution % 4:
            raise ValueError("resolution must be divisible by 4")
        if self.head_bias_init not in ("zero", "glorot"):
            raise ValueError(f"head_bias_init must be zero or glorot, got {self.head_bias_init!r}")
        side = self.resolution // 4
        for i in range(self.blocks - 1):
            if side % 2:
                raise ValueError(f"latent side {side} cannot be merged for block {i + 1}")
            side //= 2
        for c in self.block_channels:
            if c % self.block_heads or c % self.pool_heads:
                raise ValueError("head counts must divide every block width")

    @property
    def pinn_arch(self) -> PinnArchitecture:
        return PinnArchitecture(
            self.pinn_width, self.pinn_hidden_layers, FourierFeatureConfig(self.pinn_fourier_n, self.pinn_fourier_f0)
        )

    @property
    def block_channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * 2**i for i in range(self.blocks))

    @property
    def block_sides(self) -> tuple[int, ...]:
        return tuple(self.resolution // 4 // 2**i for i in range(self.blocks))

    @property
    def tensor_count(self) -> int:
        return self.pinn_arch.tensor_count

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HypernetConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class LatentBundle:
    z_C: torch.Tensor
    z_G: torch.Tensor
    latents: list[torch.Tensor]
    pooled: list[torch.Tensor]
    p: torch.Tensor


def grids_tensor(grids: Union[PdeGrids, Sequence[PdeGrids]], dtype=torch.float32) -> torch.Tensor:
    """``[batch, 5, R, R]`` in channel order F, Mg, Vg, Mh, Vh."""
    if isinstance(grids, PdeGrids):
        grids = [grids]
    return torch.as_tensor(np.stack([g.stack() for g in grids]), dtype=dtype)


def coeffs_tensor(coeffs, dtype=torch.float32) -> torch.Tensor:
    if isinstance(coeffs, OperatorCoeffs):
        coeffs = [coeffs]
    rows = [c.as_array() if isinstance(c, OperatorCoeffs) else np.asarray(c, dtype=float) for c in coeffs]
    return torch.as_tensor(np.stack(rows), dtype=dtype)


def value_features(v: torch.Tensor, freqs: Sequence[float]) -> torch.Tensor:
    """``[v, sin(2 pi f v), cos(2 pi f v)]`` stacked along a new channel axis 1."""
    f = torch.as_tensor(freqs, dtype=v.dtype).view(1, -1, *([1] * (v.dim() - 1)))
    a = 2 * math.pi * f * v.unsqueeze(1)
    return torch.cat([v.unsqueeze(1), torch.sin(a), torch.cos(a)], dim=1)


class GridEmbedding(nn.Module):
    """Value Fourier features then two stride-2 3x3 convolutions."""

    def __init__(self, freqs: Sequence[float], channels: int):
        super().__init__()
        self.freqs = tuple(freqs)
        cin = 1 + 2 * len(self.freqs)
        self.conv1 = nn.Conv2d(cin, channels, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        h = F.gelu(self.conv1(value_features(grid, self.freqs)))
        return self.conv2(h)


class WindowAttentionBlock(nn.Module):
    """Pre-norm transformer block with attention restricted to square windows."""

    def __init__(self, channels: int, heads: int, window: int, mlp_ratio: int = 2):
        super().__init__()
        self.window = window
        self.norm1 = nn.LayerNorm(channels)
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(channels)
        self.mlp = nn.Sequential(
            nn.Linear(channels, mlp_ratio * channels), nn.GELU(), nn.Linear(mlp_ratio * channels, channels)
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        # z: [B, H, W, C]
        b, h, w, c = z.shape
        s = min(self.window, h, w)
        win = z.reshape(b, h // s, s, w // s, s, c).permute(0, 1, 3, 2, 4, 5).reshape(-1, s * s, c)
        q = self.norm1(win)
        win = win + self.attn(q, q, q, need_weights=False)[0]
        z = win.reshape(b, h // s, w // s, s, s, c).permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, c)
        return z + self.mlp(self.norm2(z))


class PatchMerge(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * channels)
        self.proj = nn.Linear(4 * channels, 2 * channels)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        b, h, w, c = z.shape
        z = z.reshape(b, h // 2, 2, w // 2, 2, c).permute(0, 1, 3, 2, 4, 5).reshape(b, h // 2, w // 2, 4 * c)
        return self.proj(self.norm(z))


class Hypernet(nn.Module):
    def __init__(self, cfg: HypernetConfig = HypernetConfig()):
        super().__init__()
        self.cfg = cfg
        arch = cfg.pinn_arch
        self.arch = arch
        ce = cfg.embed_channels
        self.embeds = nn.ModuleDict(
            {k: GridEmbedding(cfg.grid_freqs, ce) for k in ("D1", "D2", "N1", "N2", "g", "h", "f")}
        )
        side = cfg.block_sides[0]
        c0 = cfg.block_channels[0]
        self.in_proj = nn.Linear(3 * ce, c0)
        self.in_norm = nn.LayerNorm(c0) if cfg.embed_norm else nn.Identity()
        self.pos = nn.Parameter(torch.randn(side, side, c0) * 0.02)

        n_cf = 5 * (1 + 2 * len(cfg.coeff_freqs))
        self.coeff_proj = nn.Linear(n_cf, cfg.coeff_dim)

        chans = cfg.block_channels
        self.blocks = nn.ModuleList(WindowAttentionBlock(c, cfg.block_heads, cfg.window) for c in chans)
        self.film_gamma = nn.ModuleList(nn.Linear(cfg.coeff_dim, c) for c in chans)
        self.film_beta = nn.ModuleList(nn.Linear(cfg.coeff_dim, c) for c in chans)
        self.merges = nn.ModuleList(PatchMerge(c) for c in chans[:-1])

        T = arch.tensor_count
        self.queries = nn.ParameterList(nn.Parameter(torch.randn(T, c) * c**-0.5) for c in chans)
        self.pools = nn.ModuleList(nn.MultiheadAttention(c, cfg.pool_heads, batch_first=True) for c in chans)

        total = sum(chans)
        self.heads = nn.ModuleList()
        for shape in arch.shapes:
            last = nn.Linear(cfg.head_hidden, math.prod(shape))
            nn.init.normal_(last.weight, std=cfg.head_init_scale)
            nn.init.zeros_(last.bias)
            if cfg.head_bias_init == "glorot" and len(shape) == 2:
                # an untrained model then emits an ordinary randomly initialized PINN
                with torch.no_grad():
                    last.bias.normal_(std=math.sqrt(2.0 / (shape[0] + shape[1])))
            self.heads.append(nn.Sequential(nn.Linear(total, cfg.head_hidden), nn.GELU(), last))

    # --- pieces -------------------------------------------------------------

    def coeff_features(self, c: torch.Tensor) -> torch.Tensor:
        """``[c, sin(2 pi f c), cos(2 pi f c)]`` per coefficient, flattened."""
        f = torch.as_tensor(self.cfg.coeff_freqs, dtype=c.dtype)
        a = 2 * math.pi * c.unsqueeze(-1) * f
        return torch.cat([c.unsqueeze(-1), torch.sin(a), torch.cos(a)], dim=-1).flatten(-2)

    def embed_coeffs(self, c: torch.Tensor) -> torch.Tensor:
        return self.coeff_proj(self.coeff_features(c))

    def embed_grids(self, grids: torch.Tensor) -> torch.Tensor:
        """``[B, 5, R, R]`` -> ``[B, R/4, R/4, C0]``."""
        if grids.shape[-1] % 4 or grids.shape[-2] % 4:
            raise ValueError("grid resolution must be divisible by 4")
        Fg, Mg, Vg, Mh, Vh = grids.unbind(1)
        e = self.embeds
        zd = e["D1"](Mg) * e["g"](Vg) + e["D2"](Mg)
        zn = e["N1"](Mh) * e["h"](Vh) + e["N2"](Mh)
        zG = torch.cat([zd, zn, e["f"](Fg)], dim=1).permute(0, 2, 3, 1)
        return self.in_norm(self.in_proj(zG)) + self.pos

    def encode(
        self,
        z: torch.Tensor,
        z_C: torch.Tensor,
        film: Optional[Union[str, Callable]] = None,
    ) -> list[torch.Tensor]:
        """Windowed-attention blocks, each followed by FiLM; returns every latent.

        ``film`` overrides the modulation: ``"identity"`` (gamma 1, beta 0),
        ``"zero_gamma"`` (gamma 0), or a callable ``(i, z_C) -> (gamma, beta)``.
        """
        out = []
        for i, block in enumerate(self.blocks):
            h = block(z)
            if film == "identity":
                gamma, beta = torch.ones(h.shape[-1], dtype=h.dtype), torch.zeros(h.shape[-1], dtype=h.dtype)
            else:
                gamma = 1 + self.film_gamma[i](z_C)
                beta = self.film_beta[i](z_C)
                if film == "zero_gamma":
                    gamma = torch.zeros_like(gamma)
                elif callable(film):
                    gamma, beta = film(i, z_C)
            if gamma.dim() == 2:
                gamma, beta = gamma[:, None, None, :], beta[:, None, None, :]
            z = gamma * h + beta
            out.append(z)
            if i < len(self.merges):
                z = self.merges[i](z)
        return out

    def attention_pool(self, latents: Sequence[torch.Tensor]) -> tuple[list[torch.Tensor], torch.Tensor]:
        pooled = []
        for z, q, mha in zip(latents, self.queries, self.pools):
            b = z.shape[0]
            kv = z.reshape(b, -1, z.shape[-1])
            pooled.append(mha(q.unsqueeze(0).expand(b, -1, -1), kv, kv, need_weights=False)[0])
        return pooled, torch.cat(pooled, dim=-1)

    def project(self, p: torch.Tensor) -> torch.Tensor:
        """Per-tensor heads; ``p[:, j]`` feeds the head of PINN tensor j."""
        return torch.cat([head(p[:, j]) for j, head in enumerate(self.heads)], dim=-1)

    # --- full pass ----------------------------------------------------------

    def latents(self, grids: torch.Tensor, coeffs: torch.Tensor, film=None) -> LatentBundle:
        z_C = self.embed_coeffs(coeffs)
        z_G = self.embed_grids(grids)
        lat = self.encode(z_G, z_C, film)
        pooled, p = self.attention_pool(lat)
        return LatentBundle(z_C, z_G, lat, pooled, p)

    def forward(self, grids: torch.Tensor, coeffs: torch.Tensor) -> torch.Tensor:
        return self.project(self.latents(grids, coeffs).p)

    def generate(self, grids, coeffs, check: bool = True) -> PinnParams:
        """PINN parameters for a batch (or a single PdeGrids / OperatorCoeffs)."""
        single = isinstance(grids, PdeGrids)
        g = grids if isinstance(grids, torch.Tensor) else grids_tensor(grids)
        c = coeffs if isinstance(coeffs, torch.Tensor) else coeffs_tensor(coeffs)
        flat = self(g, c)
        if check and not torch.isfinite(flat).all():
            raise FloatingPointError("hypernetwork produced non-finite parameters")
        return PinnParams(self.arch, flat[0] if single else flat)


# --- checkpoints --------------------------------------------------------------


def save_checkpoint(path: Union[str, Path], model: Hypernet, meta: Optional[dict] = None) -> None:
    """Versioned header, JSON config echo, then a named float32 tensor table."""
    head = json.dumps({"config": model.cfg.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    state = model.state_dict()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(head)), head, struct.pack("<I", len(state))]
    for name, t in state.items():
        nb = name.encode()
        arr = t.detach().cpu().numpy().astype("<f4")
        parts.append(struct.pack("<I", len(nb)) + nb + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path: Union[str, Path]) -> tuple[Hypernet, dict]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    off = 16
    head = json.loads(data[off : off + hlen].decode())
    off += hlen
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    state = {}
    for _ in range(n):
        (nl,) = struct.unpack_from("<I", data, off)
        name = data[off + 4 : off + 4 + nl].decode()
        off += 4 + nl
        (nd,) = struct.unpack_from("<I", data, off)
        shape = struct.unpack_from(f"<{nd}I", data, off + 4)
        off += 4 + 4 * nd
        count = math.prod(shape)
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        state[name] = torch.from_numpy(arr.copy())
    model = Hypernet(HypernetConfig.from_dict(head["config"]))
    model.load_state_dict(state)
    return model, head["meta"]
