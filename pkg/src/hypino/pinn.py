"""Target PINN: Fourier features, gated tanh layers, second-order jets.

Input derivatives are propagated by hand-written forward jets: every tensor in
the network carries a trailing axis of six components
``[v, d/dx, d/dy, d2/dx2, d2/dxdy, d2/dy2]``. Parameter gradients of losses built
from those jets come from torch's reverse mode, which differentiates straight
through the jet arithmetic.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch

__all__ = [
    "FourierFeatureConfig",
    "PinnArchitecture",
    "PinnParams",
    "Jet2",
    "fourier_encode",
    "fourier_encode_jet",
    "pinn_forward",
    "pinn_forward_jet",
    "init_params",
    "loss_param_gradient",
]

JET_COMPONENTS = ("u", "u_x", "u_y", "u_xx", "u_xy", "u_yy")
PARAMS_MAGIC = b"HYPPINN1"


@dataclass(frozen=True)
class FourierFeatureConfig:
    """Fixed frequency matrix, axis-aligned and exponentially spaced.

    Rows alternate between the x and y axis; row k has magnitude
    ``f0 * 2**(k // 2)`` so both axes see the same bands.
    """

    n: int = 8
    f0: float = 0.25

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("need at least one frequency row")

    @property
    def B(self) -> np.ndarray:
        b = np.zeros((self.n, 2))
        for k in range(self.n):
            b[k, k % 2] = self.f0 * 2.0 ** (k // 2)
        return b

    @property
    def dim(self) -> int:
        return 2 * self.n + 2


@dataclass(frozen=True)
class PinnArchitecture:
    width: int = 32
    hidden_layers: int = 3
    fourier: FourierFeatureConfig = FourierFeatureConfig()

    @property
    def tensor_count(self) -> int:
        # W0, b0, U, bu, V, bv, then (Wi, bi) per hidden layer, then W_out, b_out
        return 6 + 2 * self.hidden_layers + 2

    @property
    def names(self) -> tuple[str, ...]:
        out = ["W0", "b0", "U", "bu", "V", "bv"]
        for i in range(1, self.hidden_layers + 1):
            out += [f"W{i}", f"b{i}"]
        return tuple(out + ["W_out", "b_out"])

    @property
    def shapes(self) -> tuple[tuple[int, ...], ...]:
        d, e = self.width, self.fourier.dim
        out = [(d, e), (d,)] * 3
        out += [(d, d), (d,)] * self.hidden_layers
        return tuple(out + [(1, d), (1,)])

    @property
    def param_count(self) -> int:
        return sum(math.prod(s) for s in self.shapes)

    def to_dict(self) -> dict:
        return {"width": self.width, "hidden_layers": self.hidden_layers, "fourier_n": self.fourier.n, "fourier_f0": self.fourier.f0}

    @classmethod
    def from_dict(cls, d: dict) -> "PinnArchitecture":
        return cls(int(d["width"]), int(d["hidden_layers"]), FourierFeatureConfig(int(d["fourier_n"]), float(d["fourier_f0"])))


@dataclass
class PinnParams:
    """Flat parameter storage with a shape table.

    ``flat`` has shape ``[P]`` or ``[batch, P]``; :meth:`tensors` returns views
    in architecture order with the batch axis leading.
    """

    arch: PinnArchitecture
    flat: torch.Tensor

    def __post_init__(self):
        if self.flat.shape[-1] != self.arch.param_count:
            raise ValueError(f"expected {self.arch.param_count} parameters, got {self.flat.shape[-1]}")

    def tensors(self) -> list[torch.Tensor]:
        lead = self.flat.shape[:-1]
        out, i = [], 0
        for s in self.arch.shapes:
            n = math.prod(s)
            out.append(self.flat[..., i : i + n].reshape(*lead, *s))
            i += n
        return out

    @classmethod
    def from_tensors(cls, arch: PinnArchitecture, tensors: Sequence[torch.Tensor]) -> "PinnParams":
        if len(tensors) != arch.tensor_count:
            raise ValueError(f"expected {arch.tensor_count} tensors, got {len(tensors)}")
        parts = []
        for t, s in zip(tensors, arch.shapes):
            if tuple(t.shape[t.dim() - len(s) :]) != s:
                raise ValueError(f"tensor shape {tuple(t.shape)} does not end with {s}")
            parts.append(t.reshape(*t.shape[: t.dim() - len(s)], -1))
        return cls(arch, torch.cat(parts, dim=-1))

    def is_finite(self) -> bool:
        return bool(torch.isfinite(self.flat).all())

    def to_bytes(self) -> bytes:
        if self.flat.dim() != 1:
            raise ValueError("serialize one parameter set at a time")
        head = [PARAMS_MAGIC, struct.pack("<I", self.arch.tensor_count)]
        for s in self.arch.shapes:
            head.append(struct.pack(f"<I{len(s)}I", len(s), *s))
        data = self.flat.detach().cpu().numpy().astype("<f4").tobytes()
        return b"".join(head) + data

    @classmethod
    def from_bytes(cls, arch: PinnArchitecture, data: bytes) -> "PinnParams":
        if data[:8] != PARAMS_MAGIC:
            raise ValueError("not a parameter blob")
        (count,) = struct.unpack_from("<I", data, 8)
        off = 12
        shapes = []
        for _ in range(count):
            (nd,) = struct.unpack_from("<I", data, off)
            shapes.append(tuple(struct.unpack_from(f"<{nd}I", data, off + 4)))
            off += 4 + 4 * nd
        if tuple(shapes) != arch.shapes:
            raise ValueError("shape table does not match the architecture")
        flat = np.frombuffer(data[off:], dtype="<f4")
        if flat.size != arch.param_count:
            raise ValueError("parameter payload has wrong length")
        return cls(arch, torch.from_numpy(flat.astype(np.float32)))


@dataclass(frozen=True)
class Jet2:
    """Value and derivatives; ``data[..., k]`` follows JET_COMPONENTS."""

    data: torch.Tensor

    u = property(lambda self: self.data[..., 0])
    u_x = property(lambda self: self.data[..., 1])
    u_y = property(lambda self: self.data[..., 2])
    u_xx = property(lambda self: self.data[..., 3])
    u_xy = property(lambda self: self.data[..., 4])
    u_yy = property(lambda self: self.data[..., 5])

    def operator(self, coeffs) -> torch.Tensor:
        """c1 u + c2 u_x + c3 u_y + c4 u_xx + c5 u_yy."""
        c1, c2, c3, c4, c5 = (float(c) for c in coeffs)
        return c1 * self.u + c2 * self.u_x + c3 * self.u_y + c4 * self.u_xx + c5 * self.u_yy

    def normal_derivative(self, normals: torch.Tensor) -> torch.Tensor:
        return self.u_x * normals[..., 0] + self.u_y * normals[..., 1]

    def __add__(self, other: "Jet2") -> "Jet2":
        return Jet2(self.data + other.data)


# --- encoding -----------------------------------------------------------------


def _as_tensor(v, like: Optional[torch.Tensor] = None) -> torch.Tensor:
    if isinstance(v, torch.Tensor):
        return v
    dtype = like.dtype if like is not None else torch.get_default_dtype()
    return torch.as_tensor(np.asarray(v), dtype=dtype)


def fourier_encode(cfg: FourierFeatureConfig, x, y) -> torch.Tensor:
    """``[sin(2 pi B p), cos(2 pi B p), x, y]`` along a new trailing axis."""
    x = _as_tensor(x)
    y = _as_tensor(y, x)
    B = torch.as_tensor(cfg.B, dtype=x.dtype)
    a = 2 * math.pi * (x[..., None] * B[:, 0] + y[..., None] * B[:, 1])
    return torch.cat([torch.sin(a), torch.cos(a), x[..., None], y[..., None]], dim=-1)


def fourier_encode_jet(cfg: FourierFeatureConfig, x, y) -> torch.Tensor:
    """Jet of the encoding with the component axis first: ``[6, ..., 2N+2]``."""
    x = _as_tensor(x)
    y = _as_tensor(y, x)
    B = torch.as_tensor(cfg.B, dtype=x.dtype)
    ax, ay = 2 * math.pi * B[:, 0], 2 * math.pi * B[:, 1]
    a = x[..., None] * ax + y[..., None] * ay
    s, c = torch.sin(a), torch.cos(a)
    sin_jet = torch.stack([s, c * ax, c * ay, -s * ax * ax, -s * ax * ay, -s * ay * ay])
    cos_jet = torch.stack([c, -s * ax, -s * ay, -c * ax * ax, -c * ax * ay, -c * ay * ay])
    one, zero = torch.ones_like(x), torch.zeros_like(x)
    xj = torch.stack([x, one, zero, zero, zero, zero])[..., None]
    yj = torch.stack([y, zero, one, zero, zero, zero])[..., None]
    return torch.cat([sin_jet, cos_jet, xj, yj], dim=-1)


# --- network ------------------------------------------------------------------


def _affine(z: torch.Tensor, W: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # z: [..., n, k], W: [..., m, k], b: [..., m]
    return z @ W.transpose(-1, -2) + b.unsqueeze(-2)


def _check(params: PinnParams, arch: PinnArchitecture) -> list[torch.Tensor]:
    if params.arch != arch:
        raise ValueError("parameters belong to a different architecture")
    return params.tensors()


def pinn_forward(params: PinnParams, arch: PinnArchitecture, x, y) -> torch.Tensor:
    """Network value at points ``x, y`` of shape ``[n]`` (or ``[batch, n]``)."""
    t = _check(params, arch)
    xi = fourier_encode(arch.fourier, x, y).to(params.flat.dtype)
    z = torch.tanh(_affine(xi, t[0], t[1]))
    zu = torch.tanh(_affine(xi, t[2], t[3]))
    zv = torch.tanh(_affine(xi, t[4], t[5]))
    for i in range(arch.hidden_layers):
        g = torch.tanh(_affine(z, t[6 + 2 * i], t[7 + 2 * i]))
        z = zu * g + zv * (1 - g)
    return _affine(z, t[-2], t[-1])[..., 0]


def _jet_affine(J: torch.Tensor, W: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # J: [6, ..., n, k]; the bias only enters the value component
    out = J @ W.transpose(-1, -2)
    return torch.cat([(out[0] + b.unsqueeze(-2)).unsqueeze(0), out[1:]])


def _jet_tanh(J: torch.Tensor) -> torch.Tensor:
    v, gx, gy, gxx, gxy, gyy = J.unbind(0)
    t = torch.tanh(v)
    d1 = 1 - t * t
    d2 = -2 * t * d1
    return torch.stack(
        [t, d1 * gx, d1 * gy, d2 * gx * gx + d1 * gxx, d2 * gx * gy + d1 * gxy, d2 * gy * gy + d1 * gyy]
    )


def _jet_mul(A: torch.Tensor, B: torch.Tensor) -> torch.Tensor:
    a, ax, ay, axx, axy, ayy = A.unbind(0)
    b, bx, by, bxx, bxy, byy = B.unbind(0)
    return torch.stack(
        [
            a * b,
            ax * b + a * bx,
            ay * b + a * by,
            axx * b + 2 * ax * bx + a * bxx,
            axy * b + ax * by + ay * bx + a * bxy,
            ayy * b + 2 * ay * by + a * byy,
        ]
    )


def pinn_forward_jet(params: PinnParams, arch: PinnArchitecture, x, y) -> Jet2:
    """Exact value, gradient and Hessian entries of the network at each point."""
    t = _check(params, arch)
    x = _as_tensor(x)
    y = _as_tensor(y, x)
    if params.flat.dim() > 1 and x.dim() < 2:
        x = x.expand(*params.flat.shape[:-1], -1)
        y = y.expand(*params.flat.shape[:-1], -1)
    xi = fourier_encode_jet(arch.fourier, x, y).to(params.flat.dtype)
    z = _jet_tanh(_jet_affine(xi, t[0], t[1]))
    zu = _jet_tanh(_jet_affine(xi, t[2], t[3]))
    zv = _jet_tanh(_jet_affine(xi, t[4], t[5]))
    diff = zu - zv
    for i in range(arch.hidden_layers):
        g = _jet_tanh(_jet_affine(z, t[6 + 2 * i], t[7 + 2 * i]))
        # zu * g + zv * (1 - g) = zv + (zu - zv) * g
        z = zv + _jet_mul(diff, g)
    out = _jet_affine(z, t[-2], t[-1])[..., 0]
    return Jet2(out.movedim(0, -1))


def init_params(
    arch: PinnArchitecture,
    generator: Optional[torch.Generator] = None,
    dtype: torch.dtype = torch.float32,
    batch: Optional[int] = None,
) -> PinnParams:
    """Glorot-normal weights and zero biases."""
    lead = () if batch is None else (batch,)
    tensors = []
    for name, s in zip(arch.names, arch.shapes):
        if len(s) == 2:
            std = math.sqrt(2.0 / (s[0] + s[1]))
            tensors.append(torch.randn(*lead, *s, generator=generator, dtype=dtype) * std)
        else:
            tensors.append(torch.zeros(*lead, *s, dtype=dtype))
    return PinnParams.from_tensors(arch, tensors)


def loss_param_gradient(loss_fn: Callable[[PinnParams], torch.Tensor], params: PinnParams) -> torch.Tensor:
    """Gradient of a scalar loss with respect to the flat parameter vector."""
    flat = params.flat.detach().clone().requires_grad_(True)
    loss = loss_fn(PinnParams(params.arch, flat))
    if not torch.isfinite(loss):
        raise FloatingPointError("loss is not finite")
    (g,) = torch.autograd.grad(loss, flat, allow_unused=True)
    return torch.zeros_like(flat) if g is None else g
