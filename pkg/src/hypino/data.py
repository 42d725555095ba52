"""Synthetic problem sampling, dataset files and curriculum batches."""

from __future__ import annotations

import dataclasses
import io
import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence, Union

import numpy as np

from . import symbolic as sym
from .geometry import GeometryConfig, sample_domain
from .pde import (
    BoundaryCondition,
    OperatorCoeffs,
    PdeClass,
    PdeGrids,
    PdeInstance,
    classify,
    rasterize,
)

__all__ = [
    "SamplerConfig",
    "DatasetRecord",
    "DatasetError",
    "sample_operator",
    "sample_supervised",
    "sample_unsupervised",
    "outer_condition_kinds",
    "audit_unsupervised",
    "make_record",
    "write_dataset",
    "read_dataset",
    "curriculum_batches",
    "batch_records",
    "batch_composition",
]

FORMAT_VERSION = 1
DATASET_MAGIC = b"HYPDSET1"


@dataclass(frozen=True)
class SamplerConfig:
    op_terms: tuple[int, int] = (1, 3)
    coef_range: float = 2.0
    operator_family: str = "random"  # or "laplacian": c4 = c5 = s
    solution: sym.SolutionConfig = sym.SolutionConfig()
    source_sigma: float = 10.0
    geometry: GeometryConfig = GeometryConfig()
    inner_kind_probs: tuple[float, float, float] = (0.45, 0.45, 0.10)
    linear_profile_range: float = 1.0
    seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        d = dict(d)
        sol = d.pop("solution", None)
        geo = d.pop("geometry", None)
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        if sol is not None:
            kw["solution"] = sym.SolutionConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in sol.items()})
        if geo is not None:
            kw["geometry"] = GeometryConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in geo.items()})
        return cls(**kw)


def sample_operator(rng: np.random.Generator, cfg: SamplerConfig = SamplerConfig()) -> OperatorCoeffs:
    """Pick 1-3 distinct terms of {u, u_x, u_y, u_xx, u_yy} with uniform coefficients."""
    if cfg.operator_family == "laplacian":
        s = float(rng.uniform(0.5, cfg.coef_range)) * (1.0 if rng.random() < 0.5 else -1.0)
        return OperatorCoeffs((0.0, 0.0, 0.0, s, s))
    lo, hi = cfg.op_terms
    while True:
        n = int(rng.integers(lo, hi + 1))
        idx = rng.choice(5, size=n, replace=False)
        c = np.zeros(5)
        c[idx] = rng.uniform(-cfg.coef_range, cfg.coef_range, size=n)
        if np.any(c != 0.0):
            return OperatorCoeffs(tuple(c))


def outer_condition_kinds(pde_class: PdeClass) -> dict[int, str]:
    """Conditions on the square sides: 0 left, 1 right, 2 bottom (y=-1), 3 top."""
    if pde_class in (PdeClass.ELLIPTIC, PdeClass.DEGENERATE):
        return {0: "dirichlet", 1: "dirichlet", 2: "dirichlet", 3: "dirichlet"}
    if pde_class is PdeClass.PARABOLIC:
        return {0: "dirichlet", 1: "dirichlet", 2: "dirichlet"}
    return {0: "dirichlet", 1: "dirichlet", 2: "both"}


def _condition_kinds(rng, domain, coeffs, cfg) -> dict[int, str]:
    kinds = outer_condition_kinds(classify(coeffs))
    choices = ("dirichlet", "neumann", "both")
    for i in range(len(domain.primitives)):
        kinds[4 + i] = choices[int(rng.choice(3, p=cfg.inner_kind_probs))]
    return kinds


def sample_supervised(rng: np.random.Generator, cfg: SamplerConfig = SamplerConfig()) -> PdeInstance:
    """Manufactured-solution instance: f = L[u], g = u, h = du/dn."""
    coeffs = sample_operator(rng, cfg)
    domain = sample_domain(rng, cfg.geometry)
    u = sym.sample_manufactured_solution(rng, cfg.solution)
    kinds = _condition_kinds(rng, domain, coeffs, cfg)
    bcs = tuple(
        BoundaryCondition(
            comp,
            kind,
            g=u if kind != "neumann" else None,
            h=u if kind != "dirichlet" else None,
            h_mode="normal_derivative",
        )
        for comp, kind in sorted(kinds.items())
    )
    return PdeInstance(coeffs, domain, sym.apply_operator(coeffs.c, u), bcs, solution=u, supervised=True)


def _value_regime(coeffs: OperatorCoeffs) -> str:
    c1, c2, c3, c4, c5 = coeffs.c
    if c1 != 0.0:
        return "zero"
    if c4 == 0.0 and c5 == 0.0:
        return "constant"
    return "linear"


def _boundary_value(rng, regime: str, cfg: SamplerConfig) -> sym.Expr:
    r = cfg.linear_profile_range
    if regime == "zero":
        return sym.const(0.0)
    if regime == "constant" or rng.random() < 0.5:
        return sym.const(float(rng.uniform(-r, r)))
    a, b, c = (float(v) for v in rng.uniform(-r, r, 3))
    return sym.add(a, sym.mul(b, sym.var_x()), sym.mul(c, sym.var_y()))


def sample_unsupervised(rng: np.random.Generator, cfg: SamplerConfig = SamplerConfig()) -> PdeInstance:
    """Physics-only instance with a constant Gaussian source and compatible boundary data."""
    coeffs = sample_operator(rng, cfg)
    domain = sample_domain(rng, cfg.geometry)
    f = sym.const(float(rng.normal(0.0, cfg.source_sigma)))
    kinds = _condition_kinds(rng, domain, coeffs, cfg)
    regime = _value_regime(coeffs)
    bcs = []
    for comp, kind in sorted(kinds.items()):
        g = _boundary_value(rng, regime, cfg) if kind != "neumann" else None
        h = None
        if kind != "dirichlet":
            h = sym.const(0.0) if regime == "zero" else sym.const(float(rng.uniform(-1, 1)))
        bcs.append(BoundaryCondition(comp, kind, g=g, h=h))
    return PdeInstance(coeffs, domain, f, tuple(bcs), supervised=False)


def _is_linear(e: sym.Expr) -> bool:
    terms = e.args if e.op == "add" else (e,)
    for t in terms:
        if t.op in ("const", "x", "y"):
            continue
        if t.op == "mul" and len(t.args) == 2 and t.args[0].op == "const" and t.args[1].op in ("x", "y"):
            continue
        return False
    return True


def audit_unsupervised(instance: PdeInstance) -> list[str]:
    """Violations of the boundary-compatibility rules; empty when conforming."""
    problems = []
    if instance.source.op != "const":
        problems.append("source is not spatially constant")
    expected = outer_condition_kinds(classify(instance.coeffs))
    for side in range(4):
        bc = instance.bc_for(side)
        got = None if bc is None else bc.kind
        if got != expected.get(side):
            problems.append(f"side {side}: expected {expected.get(side)}, got {got}")
    for i in range(len(instance.domain.primitives)):
        if instance.bc_for(4 + i) is None:
            problems.append(f"inner component {i} has no condition")
    regime = _value_regime(instance.coeffs)
    for bc in instance.bcs:
        if bc.h is not None and bc.h.op != "const":
            problems.append(f"component {bc.component}: Neumann value not constant")
        if regime == "zero":
            if bc.g is not None and not (bc.g.op == "const" and bc.g.value == 0.0):
                problems.append(f"component {bc.component}: u term present but g != 0")
            if bc.h is not None and not (bc.h.op == "const" and bc.h.value == 0.0):
                problems.append(f"component {bc.component}: u term present but h != 0")
        elif regime == "constant":
            if bc.g is not None and bc.g.op != "const":
                problems.append(f"component {bc.component}: first-order operator needs constant g")
        elif bc.g is not None and not _is_linear(bc.g):
            problems.append(f"component {bc.component}: g is not linear")
    return problems


# --- records and files --------------------------------------------------------


class DatasetError(Exception):
    pass


class DatasetVersionError(DatasetError):
    pass


class DatasetTruncatedError(DatasetError):
    pass


class DatasetChecksumError(DatasetError):
    def __init__(self, index: int):
        super().__init__(f"checksum mismatch in record {index}")
        self.index = index


@dataclass(frozen=True)
class DatasetRecord:
    instance: PdeInstance
    grids: PdeGrids
    seed: tuple[int, ...] = ()

    @property
    def supervised(self) -> bool:
        return self.instance.supervised

    def to_bytes(self) -> bytes:
        head = json.dumps(
            {"instance": self.instance.to_dict(), "seed": list(self.seed)},
            sort_keys=True,
            separators=(",", ":"),
        ).encode()
        return struct.pack("<I", len(head)) + head + self.grids.to_bytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "DatasetRecord":
        (n,) = struct.unpack("<I", data[:4])
        head = json.loads(data[4 : 4 + n].decode())
        grids = PdeGrids.from_bytes(data[4 + n :])
        return cls(PdeInstance.from_dict(head["instance"]), grids, tuple(head["seed"]))


def make_record(cfg: SamplerConfig, index: int, supervised: bool, resolution: int, stream: int = 0) -> DatasetRecord:
    """Sample one record from a generator seeded by (seed, stream, index)."""
    seed = (cfg.seed, stream, index)
    rng = np.random.default_rng(list(seed))
    inst = sample_supervised(rng, cfg) if supervised else sample_unsupervised(rng, cfg)
    return DatasetRecord(inst, rasterize(inst, resolution), seed)


def _format_metadata(meta: dict) -> bytes:
    lines = []
    for k in sorted(meta):
        v = meta[k]
        lines.append(f"{k}={json.dumps(v, sort_keys=True, separators=(',', ':'))}")
    return ("\n".join(lines) + "\n").encode()


def _parse_metadata(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        k, _, v = line.partition("=")
        out[k] = json.loads(v)
    return out


def write_dataset(path: Union[str, Path], records: Iterable[DatasetRecord], metadata: Optional[dict] = None) -> int:
    """Stream records to ``path``; returns the record count."""
    meta = dict(metadata or {})
    meta["format_version"] = FORMAT_VERSION
    mbytes = _format_metadata(meta)
    count = 0
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(mbytes)))
        fh.write(mbytes)
        for rec in records:
            payload = rec.to_bytes()
            fh.write(struct.pack("<I", len(payload)))
            fh.write(payload)
            fh.write(struct.pack("<I", zlib.crc32(payload)))
            count += 1
        fh.write(struct.pack("<IQ", 0, count))
    return count


def _read_exact(fh: io.BufferedReader, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise DatasetTruncatedError(f"file ends inside {what}")
    return data


def read_dataset(path: Union[str, Path]) -> tuple[dict, list[DatasetRecord]]:
    """Return ``(metadata, records)``; raises DatasetError subclasses on damage."""
    records = []
    with open(path, "rb") as fh:
        if fh.read(8) != DATASET_MAGIC:
            raise DatasetError("not a dataset file")
        version, mlen = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != FORMAT_VERSION:
            raise DatasetVersionError(f"format version {version}, expected {FORMAT_VERSION}")
        meta = _parse_metadata(_read_exact(fh, mlen, "metadata").decode())
        while True:
            (n,) = struct.unpack("<I", _read_exact(fh, 4, f"record {len(records)} length"))
            if n == 0:
                (count,) = struct.unpack("<Q", _read_exact(fh, 8, "trailer"))
                if count != len(records):
                    raise DatasetError(f"trailer says {count} records, read {len(records)}")
                break
            payload = _read_exact(fh, n, f"record {len(records)}")
            (crc,) = struct.unpack("<I", _read_exact(fh, 4, f"record {len(records)} checksum"))
            if zlib.crc32(payload) != crc:
                raise DatasetChecksumError(len(records))
            records.append(DatasetRecord.from_bytes(payload))
    return meta, records


# --- curriculum ---------------------------------------------------------------


def batch_composition(phase: int, batch_size: int) -> tuple[int, int]:
    """(supervised, unsupervised) counts for a batch of the given phase."""
    if phase == 1:
        return batch_size, 0
    if phase == 2:
        return math.ceil(batch_size / 2), batch_size // 2
    raise ValueError(f"phase must be 1 or 2, got {phase}")


def batch_records(cfg: SamplerConfig, batch_index: int, n_sup: int, n_uns: int, resolution: int) -> list[DatasetRecord]:
    """Records of one on-the-fly batch; slot i of batch b uses index b * (n_sup + n_uns) + i."""
    base = batch_index * (n_sup + n_uns)
    out = [make_record(cfg, base + i, True, resolution, stream=1) for i in range(n_sup)]
    return out + [make_record(cfg, base + i, False, resolution, stream=2) for i in range(n_uns)]


def curriculum_batches(
    source: Union[SamplerConfig, Sequence[DatasetRecord]],
    phase: int,
    batch_size: int = 8,
    resolution: int = 64,
    start: int = 0,
    supervised_only: bool = False,
) -> Iterator[list[DatasetRecord]]:
    """Infinite stream of batches, deterministic in the batch index.

    With a :class:`SamplerConfig`, records are generated on the fly from
    generators keyed by (seed, batch index, slot). With a record sequence,
    supervised and unsupervised records are cycled separately.
    """
    n_sup, n_uns = batch_composition(phase, batch_size)
    if supervised_only:
        n_sup, n_uns = batch_size, 0
    if isinstance(source, SamplerConfig):
        b = start
        while True:
            yield batch_records(source, b, n_sup, n_uns, resolution)
            b += 1
    else:
        sup = [r for r in source if r.supervised]
        uns = [r for r in source if not r.supervised]
        if n_sup and not sup or n_uns and not uns:
            raise ValueError("dataset lacks records of a required kind")
        b = start
        while True:
            batch = [sup[(b * n_sup + i) % len(sup)] for i in range(n_sup)]
            batch += [uns[(b * n_uns + i) % len(uns)] for i in range(n_uns)]
            yield batch
            b += 1
