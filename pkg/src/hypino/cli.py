"""Command-line entry point: ``hypino {gen-data,train,eval,finetune,selfcheck}``.

Option values resolve as flags > ``--config`` file > ``HYPINO_*`` environment
variables > defaults. Every command writes the resolved configuration next to
(or inside) its outputs.
"""

from __future__ import annotations

import argparse
import collections
import dataclasses
import json
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np
import torch

from . import symbolic as sym
from .benchmarks import BENCHMARK_IDS, build_benchmark, reference_solution
from .data import DatasetError, SamplerConfig, make_record, write_dataset
from .fdsolve import node_coords
from .geometry import GeometryConfig, contains
from .hypernet import HypernetConfig, load_checkpoint
from .pde import classify, rasterize
from .pinn import PinnArchitecture, init_params
from .refinement import evaluate
from .selfcheck import SUITES, run_suites
from .training import FinetuneConfig, TrainConfig, TrainingDiverged, finetune_pinn, train_hypernet

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4
ENV_PREFIX = "HYPINO_"


class ConfigError(ValueError):
    pass


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


@dataclass(frozen=True)
class Option:
    name: str
    type: Callable[[Any], Any]
    default: Any
    help: str = ""

    @property
    def flag(self) -> str:
        return "--" + self.name.replace("_", "-")


COMMON = [
    Option("seed", int, 0, "global seed"),
    Option("out", str, "", "output path"),
    Option("workers", int, 1, "worker processes (only 1 is supported; it is bitwise deterministic)"),
]

OPTIONS: dict[str, list[Option]] = {
    "gen-data": [
        Option("count", int, 100, "number of records"),
        Option("supervised_frac", float, 0.5, "fraction of supervised records"),
        Option("resolution", int, 64, "grid resolution"),
        Option("operator_family", str, "random", "random or laplacian"),
        Option("max_inner", int, 3, "largest number of subtracted shapes"),
    ],
    "train": [
        Option("batches", int, 3000),
        Option("batch_size", int, 8),
        Option("phase1_batches", int, 1000),
        Option("lr", float, 1e-4),
        Option("lr_min", float, 1e-6),
        Option("weight_decay", float, 0.01),
        Option("clip_norm", float, 1.0, "0 disables clipping"),
        Option("resolution", int, 32),
        Option("blocks", int, 4, "encoder blocks (resolution/4 must halve blocks-1 times)"),
        Option("checkpoint_every", int, 0),
        Option("operator_family", str, "random", "random or laplacian"),
        Option("max_inner", int, 3, "largest number of subtracted shapes"),
        Option("supervised_only", _bool, False, "use supervised records in every slot"),
        Option("solution_terms_min", int, 6, "fewest terms in a manufactured solution"),
        Option("solution_terms_max", int, 10, "most terms in a manufactured solution"),
        Option("solution_ab_max", float, 10.0, "bound on inner scale/shift of solution terms"),
        Option("solution_cde_max", float, 2 * math.pi, "bound on outer coefficients of solution terms"),
        Option("n_interior", int, 1024),
    ],
    "eval": [
        Option("checkpoint", str, "", "trained model"),
        Option("benchmarks", str, "all", "comma-separated ids or 'all'"),
        Option("rounds", str, "0", "comma-separated refinement counts"),
        Option("eval_nodes", int, 129, "nodes per side of the evaluation grid"),
        Option("normalize_deltas", _bool, False, "rescale correction problems to unit size"),
    ],
    "finetune": [
        Option("benchmark", str, "HT"),
        Option("init", str, "random", "random or checkpoint:PATH"),
        Option("steps", int, 10_000),
        Option("lr", float, 1e-4),
        Option("lr_min", float, 1e-7),
        Option("eval_every", int, 1),
        Option("n_interior", int, 1024),
    ],
    "selfcheck": [
        Option("suites", str, "all", "comma-separated suite names or 'all'"),
        Option("inject_fault", _bool, False, "perturb a derivative rule; the suites must then fail"),
        Option("scale", float, 1.0, "multiplier on the number of cases per suite"),
    ],
}


@dataclass
class RunConfig:
    command: str
    seed: int
    out: str
    workers: int
    options: dict = field(default_factory=dict)
    sources: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def embedded(self) -> dict:
        """The part stored inside artifacts; the output path and option sources stay in the sidecar."""
        d = self.to_dict()
        del d["out"], d["sources"]
        return d

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def read_config_file(path: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def resolve(command: str, flags: dict, config_file: Optional[str], env: Optional[dict] = None) -> RunConfig:
    env = os.environ if env is None else env
    file_vals = read_config_file(config_file) if config_file else {}
    opts = COMMON + OPTIONS[command]
    known = {o.name for o in opts}
    unknown = set(file_vals) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    values, sources = {}, {}
    for o in opts:
        env_key = ENV_PREFIX + o.name.upper()
        if flags.get(o.name) is not None:
            raw, src = flags[o.name], "flag"
        elif o.name in file_vals:
            raw, src = file_vals[o.name], "file"
        elif env_key in env:
            raw, src = env[env_key], "env"
        else:
            raw, src = o.default, "default"
        try:
            values[o.name] = o.type(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {o.name} ({src}): {raw!r}") from exc
        sources[o.name] = src
    if values["workers"] != 1:
        raise ConfigError("only --workers 1 is supported")
    rc = RunConfig(command, values.pop("seed"), values.pop("out"), values.pop("workers"), values, sources)
    if not rc.out and command != "selfcheck":
        raise ConfigError("--out is required")
    return rc


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hypino", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for cmd, opts in OPTIONS.items():
        sp = sub.add_parser(cmd)
        sp.add_argument("--config", default=None, help="key=value file")
        for o in COMMON + opts:
            kw = {"default": None, "help": o.help or None}
            if o.type is _bool:
                kw["nargs"] = "?"
                kw["const"] = "true"
            sp.add_argument(o.flag, dest=o.name, **kw)
    return ap


def _csv_list(text: str, allowed: Sequence[str], what: str) -> list[str]:
    items = [t.strip() for t in text.split(",") if t.strip()]
    if items == ["all"]:
        return list(allowed)
    bad = [t for t in items if t not in allowed]
    if bad or not items:
        raise ConfigError(f"unknown {what}: {', '.join(bad) or '(none)'}; expected {', '.join(allowed)} or all")
    return items


def _geometry(max_inner: int) -> GeometryConfig:
    if max_inner < 0:
        raise ConfigError("max_inner must be nonnegative")
    return GeometryConfig(count=(0, max_inner))


def _family(name: str) -> str:
    if name not in ("random", "laplacian"):
        raise ConfigError(f"operator_family must be random or laplacian, got {name!r}")
    return name


# --- commands -------------------------------------------------------------------


def cmd_gen_data(rc: RunConfig) -> int:
    o = rc.options
    if not 0.0 <= o["supervised_frac"] <= 1.0:
        raise ConfigError("supervised_frac must lie in [0, 1]")
    if o["count"] < 0:
        raise ConfigError("count must be nonnegative")
    cfg = SamplerConfig(operator_family=_family(o["operator_family"]), geometry=_geometry(o["max_inner"]), seed=rc.seed)
    n_sup = int(round(o["count"] * o["supervised_frac"]))
    classes, kinds = collections.Counter(), collections.Counter()

    def records():
        for i in range(o["count"]):
            sup = i < n_sup
            rec = make_record(cfg, i, sup, o["resolution"], stream=1 if sup else 2)
            classes[classify(rec.instance.coeffs.c).value] += 1
            kinds.update(bc.kind for bc in rec.instance.bcs)
            yield rec

    meta = {"run_config": rc.embedded(), "sampler": cfg.to_dict(), "resolution": o["resolution"]}
    n = write_dataset(rc.out, records(), meta)
    print(f"wrote {n} records to {rc.out} ({n_sup} supervised, {n - n_sup} unsupervised)")
    print("class mix: " + ", ".join(f"{k}={v}" for k, v in sorted(classes.items())))
    print("boundary kinds: " + ", ".join(f"{k}={v}" for k, v in sorted(kinds.items())))
    return EXIT_OK


def train_config(rc: RunConfig) -> TrainConfig:
    o = rc.options
    if o["batches"] < 1 or o["batch_size"] < 1 or o["phase1_batches"] < 0:
        raise ConfigError("batches and batch_size must be positive, phase1_batches nonnegative")
    if not (o["lr"] > 0 and 0 <= o["lr_min"] <= o["lr"]):
        raise ConfigError("need lr > 0 and 0 <= lr_min <= lr")
    if not 1 <= o["solution_terms_min"] <= o["solution_terms_max"]:
        raise ConfigError("need 1 <= solution_terms_min <= solution_terms_max")
    solution = sym.SolutionConfig(
        n_terms=(o["solution_terms_min"], o["solution_terms_max"]), ab_max=o["solution_ab_max"], cde_max=o["solution_cde_max"]
    )
    sampler = SamplerConfig(
        operator_family=_family(o["operator_family"]), geometry=_geometry(o["max_inner"]), solution=solution, seed=rc.seed
    )
    try:
        hcfg = HypernetConfig(resolution=o["resolution"], blocks=o["blocks"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return TrainConfig(
        batches=o["batches"],
        batch_size=o["batch_size"],
        phase1_batches=o["phase1_batches"],
        lr=o["lr"],
        lr_min=o["lr_min"],
        weight_decay=o["weight_decay"],
        clip_norm=o["clip_norm"] or None,
        seed=rc.seed,
        sampler=sampler,
        hypernet=hcfg,
        n_interior=o["n_interior"],
        supervised_only=o["supervised_only"],
        checkpoint_every=o["checkpoint_every"],
    )


def cmd_train(rc: RunConfig) -> int:
    cfg = train_config(rc)
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    rc.write(out / "run_config.json")
    torch.set_num_threads(1)

    def progress(row):
        if row["batch"] % 100 == 0 or row["batch"] == cfg.batches - 1:
            print(f"batch {row['batch']:>6} phase {row['phase']} lr {row['lr']:.3g} J {row['J']:.4g}", flush=True)

    try:
        train_hypernet(cfg, out / "train_log.csv", out / "model.ckpt", {"run_config": rc.embedded()}, progress=progress)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}; partial log and checkpoint kept in {out}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"wrote {out / 'model.ckpt'} and {out / 'train_log.csv'}")
    return EXIT_OK


def _rounds(text: str) -> list[int]:
    try:
        r = [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad rounds list {text!r}") from exc
    if not r or min(r) < 0:
        raise ConfigError("rounds must be nonnegative integers")
    return r


def cmd_eval(rc: RunConfig) -> int:
    o = rc.options
    if not o["checkpoint"]:
        raise ConfigError("--checkpoint is required")
    bids = _csv_list(o["benchmarks"], BENCHMARK_IDS, "benchmarks")
    rounds = _rounds(o["rounds"])
    model, _ = load_checkpoint(o["checkpoint"])
    model.eval()
    torch.set_num_threads(1)
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    rc.write(out / "run_config.json")
    res = evaluate(
        model, bids, rounds, model.cfg.resolution, o["eval_nodes"], out, rc.embedded(), normalize=o["normalize_deltas"]
    )
    for r in res["rows"]:
        print(f"{r['benchmark']:<5} rounds {r['rounds']:>3}  mse {r['mse']:.4e}  smape {r['smape']:.2f}")
    return EXIT_OK


def _finetune_reference(spec):
    if spec.solution is not None:
        return None, None
    ref = reference_solution(spec, 129)
    c = node_coords(ref.n)
    X, Y = np.meshgrid(c, c, indexing="xy")
    m = ref.mask
    return np.stack([X[m], Y[m]], 1), ref.values[m]


def cmd_finetune(rc: RunConfig) -> int:
    o = rc.options
    if o["benchmark"] not in BENCHMARK_IDS:
        raise ConfigError(f"unknown benchmark {o['benchmark']!r}")
    if o["steps"] < 0:
        raise ConfigError("steps must be nonnegative")
    spec = build_benchmark(o["benchmark"])
    torch.set_num_threads(1)
    init = o["init"]
    if init == "random":
        arch = PinnArchitecture()
        theta0 = init_params(arch, torch.Generator().manual_seed(rc.seed))
    elif init.startswith("checkpoint:"):
        model, _ = load_checkpoint(init.split(":", 1)[1])
        model.eval()
        with torch.no_grad():
            theta0 = model.generate(rasterize(spec.instance, model.cfg.resolution), spec.instance.coeffs)
    else:
        raise ConfigError("init must be 'random' or 'checkpoint:PATH'")
    cfg = FinetuneConfig(
        steps=o["steps"], lr=o["lr"], lr_min=o["lr_min"], eval_every=o["eval_every"], n_interior=o["n_interior"], seed=rc.seed
    )
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    rc.write(out / "run_config.json")
    pts, ref = _finetune_reference(spec)
    try:
        res = finetune_pinn(theta0, spec.instance, cfg, reference=ref, log_path=out / "convergence.csv", eval_xy=pts)
    except TrainingDiverged as exc:
        print(f"fine-tuning diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    (out / "theta.bin").write_bytes(res.params.to_bytes())
    first, last = res.log[0], res.log[-1]
    print(f"{spec.id}: loss {first['loss']:.4e} -> {last['loss']:.4e}, mse {first['mse']:.4e} -> {last['mse']:.4e}")
    return EXIT_OK


def cmd_selfcheck(rc: RunConfig) -> int:
    o = rc.options
    names = _csv_list(o["suites"], list(SUITES), "suites")
    if not o["scale"] > 0:
        raise ConfigError("scale must be positive")
    from .selfcheck import DEFAULT_SIZES

    sizes = {k: max(1, int(round(v * o["scale"]))) for k, v in DEFAULT_SIZES.items()}
    if o["inject_fault"]:
        print("fault injected: chain-rule outer derivatives scaled by 1.001")
    results = run_suites(names, rc.seed, o["inject_fault"], sizes, report=print)
    n_ok = sum(r.ok for r in results)
    print(f"{n_ok}/{len(results)} suites passed")
    if rc.out:
        Path(rc.out).write_text(
            json.dumps(
                {"run_config": rc.to_dict(), "suites": [dataclasses.asdict(r) | {"ok": r.ok} for r in results]},
                indent=2,
                sort_keys=True,
            )
        )
    return EXIT_OK if n_ok == len(results) else 1


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "finetune": cmd_finetune,
    "selfcheck": cmd_selfcheck,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        rc = resolve(args.command, flags, args.config)
        return COMMANDS[args.command](rc)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, DatasetError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
