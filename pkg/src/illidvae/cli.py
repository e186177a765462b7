"""Command-line entry point: train, eval, verify and the toy experiment grid."""
from __future__ import annotations

import argparse
import concurrent.futures
import copy
import dataclasses
import json
import logging
import subprocess
import sys
import time
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from . import verifier
from .data import generate_toy, load_idx, load_idx_pair
from .diagnostics import evaluate, write_metrics_csv
from .models import ModelConfig, build_model, load_checkpoint, save_checkpoint
from .svg import scatter_svg, write_svg
from .train import EvalConfig, TrainConfig, TrainingAborted, seed_streams, train

log = logging.getLogger("illidvae")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    """Malformed run configuration; ``pointer`` is a JSON pointer to the culprit."""

    def __init__(self, pointer: str, message: str):
        super().__init__(f"config error at {pointer or '/'}: {message}")
        self.pointer = pointer


@dataclass
class ToyConfig:
    sigma: float = 7.5
    n: int = 2000
    seed: Optional[int] = None
    test_fraction: float = 0.1


@dataclass
class IdxConfig:
    images: str = ""
    labels: Optional[str] = None
    test_fraction: float = 0.1


@dataclass
class DataConfig:
    toy: Optional[ToyConfig] = None
    idx: Optional[IdxConfig] = None


@dataclass
class ExperimentConfig:
    sigma_grid: List[float] = field(default_factory=lambda: [7.5])
    L_grid: List[float] = field(default_factory=lambda: [0.0, 0.5, 1.5, 5.0])
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    out_dir: Optional[str] = None
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# strict parsing ----------------------------------------------------------

def _escape(key: str) -> str:
    return key.replace("~", "~0").replace("/", "~1")


def _coerce(tp, value, ptr: str):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(args[0], value, ptr)
    if origin in (list, List):
        if not isinstance(value, list):
            raise ConfigError(ptr, f"expected a list, got {type(value).__name__}")
        (inner,) = typing.get_args(tp)
        return [_coerce(inner, v, f"{ptr}/{i}") for i, v in enumerate(value)]
    if dataclasses.is_dataclass(tp):
        return _parse(tp, value, ptr)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(ptr, "expected a boolean")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(ptr, f"expected an integer, got {json.dumps(value)}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(ptr, f"expected a number, got {json.dumps(value)}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(ptr, f"expected a string, got {json.dumps(value)}")
        return value
    raise ConfigError(ptr, f"unsupported field type {tp}")


def _parse(cls, obj, ptr: str = ""):
    if not isinstance(obj, dict):
        raise ConfigError(ptr, f"expected an object, got {type(obj).__name__}")
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls)]
    for key in obj:
        if key not in names:
            raise ConfigError(f"{ptr}/{_escape(key)}", f"unknown key {key!r}")
    kwargs = {k: _coerce(hints[k], v, f"{ptr}/{_escape(k)}") for k, v in obj.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(ptr, str(exc)) from None


def parse_config(doc: Any) -> RunConfig:
    """Build a :class:`RunConfig` from a decoded JSON document, rejecting unknown keys."""
    cfg = _parse(RunConfig, doc)
    if cfg.data.toy is not None and cfg.data.idx is not None:
        raise ConfigError("/data", "give either 'toy' or 'idx', not both")
    exp = cfg.experiment
    for name in ("sigma_grid", "L_grid", "seeds"):
        if not getattr(exp, name):
            raise ConfigError(f"/experiment/{name}", "grid must be non-empty")
    return cfg


def load_config(path: Optional[str], base: Optional[dict] = None) -> Tuple[RunConfig, dict]:
    """Read and parse a config file, deep-merged over ``base`` defaults.

    Returns the parsed config and the raw merged document.
    """
    doc: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError("", f"cannot read {path}: {exc.strerror}") from None
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("", f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    merged = _merge(copy.deepcopy(base or {}), doc) if isinstance(doc, dict) else doc
    return parse_config(merged), merged


def _merge(base: dict, over: dict) -> dict:
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = v
    return base


# run plumbing ------------------------------------------------------------

def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             capture_output=True, text=True, timeout=10,
                             cwd=Path(__file__).resolve().parent)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


# metrics are computed on the held-out split with a K=100 importance-weighted NLL
EVAL_META = {"eval_split": "test", "nll_estimator": "iw-k100"}


def write_meta(out: Path, seed: int, started: float, **extra) -> Path:
    meta = {"seed": seed, "git_describe": git_describe(),
            "duration_s": round(time.time() - started, 3), **extra}
    return write_json(out / "meta.json", meta)


def load_data(cfg: RunConfig, seed: int):
    """Return ``(train_x, test_x, test_labels)`` for the configured source."""
    if cfg.data.idx is not None:
        spec = cfg.data.idx
        if spec.labels:
            xs, labels = load_idx_pair(spec.images, spec.labels)
        else:
            xs, labels = load_idx(spec.images, "images"), None
        perm = np.random.default_rng([seed, 7]).permutation(len(xs))
        n_test = max(1, int(round(spec.test_fraction * len(xs))))
        test, tr = np.sort(perm[:n_test]), np.sort(perm[n_test:])
        return xs[tr], xs[test], (labels[test] if labels is not None else None)
    toy = cfg.data.toy or ToyConfig()
    ds = generate_toy(toy.sigma, toy.n, seed if toy.seed is None else toy.seed, toy.test_fraction)
    (xtr, _), (xte, yte) = ds.train, ds.test
    return xtr, xte, yte


def _model_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1])


def _rows(history, run_id: str, model, seed: int) -> List[dict]:
    # the seed column carries the run seed; the derived evaluation seed is internal
    return [dict(rec.row(run_id, step, model.L1, model.L2), seed=seed) for step, rec in history]


def _run_id(cfg: RunConfig, seed: int) -> str:
    return f"{cfg.model.kind}-L{cfg.model.L1:g}-seed{seed}"


def run_training(cfg: RunConfig, out: Optional[Path]) -> Tuple[object, List[dict]]:
    """Build, train and evaluate one model; writes the run directory when ``out`` is set."""
    seed = cfg.train.seed
    xtr, xte, yte = load_data(cfg, seed)
    if xtr.shape[1] != cfg.model.data_dim:
        raise ConfigError("/model/data_dim", f"data has {xtr.shape[1]} columns")
    model = build_model(cfg.model, _model_rng(seed))
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "resolved_config.json", cfg.to_dict())
    result = train(model, xtr, cfg.train, xte, yte, cfg.eval, out_dir=out)
    rows = _rows(result.history, _run_id(cfg, seed), model, seed)
    if out is not None:
        save_checkpoint(model, out / "model.ckpt")
        write_metrics_csv(out / "metrics.csv", rows)
    return result, rows


# subcommands -------------------------------------------------------------

def cmd_train(cfg: RunConfig, out: Path) -> int:
    started = time.time()
    try:
        result, _ = run_training(cfg, out)
    except TrainingAborted as exc:
        log.error("%s", exc)
        write_meta(out, cfg.train.seed, started, status="aborted")
        return EXIT_FAILURE
    anneal = None
    if result.anneal is not None:
        anneal = [list(e) for e in result.anneal.events]
    write_meta(out, cfg.train.seed, started, status="ok", anneal_events=anneal, **EVAL_META)
    return EXIT_OK


def cmd_eval(cfg: RunConfig, out: Path, checkpoint: Optional[str] = None) -> int:
    """Re-evaluate a saved model with the same data and evaluation seed as training."""
    started = time.time()
    ckpt = Path(checkpoint) if checkpoint else out / "model.ckpt"
    model = load_checkpoint(ckpt)
    seed = cfg.train.seed
    _, xte, yte = load_data(cfg, seed)
    _, _, eval_seed = seed_streams(seed)
    rec = evaluate(model, xte, yte, cfg.eval.n_mc, cfg.eval.n_eval_points, seed=eval_seed)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "eval_metrics.csv",
                      _rows([(cfg.train.epochs, rec)], _run_id(cfg, seed), model, seed))
    write_meta(out, seed, started, status="ok", checkpoint=str(ckpt), **EVAL_META)
    return EXIT_OK


def cmd_verify(cfg: RunConfig, out: Path, seed: int) -> int:
    started = time.time()
    reports = verifier.run_all(seed, n_z=max(100, cfg.eval.n_mc))
    out.mkdir(parents=True, exist_ok=True)
    verifier.write_report_csv(reports, out / "verify_report.csv")
    table = verifier.format_table(reports)
    (out / "verify_report.txt").write_text(table + "\n")
    print(table)
    counts = verifier.summarize(reports)
    write_json(out / "resolved_config.json", cfg.to_dict())
    write_meta(out, seed, started, status="ok", **counts)
    return EXIT_FAILURE if counts[verifier.FAIL] else EXIT_OK


TOY_DEFAULTS = {"model": {"kind": "il-lidmvae", "latent_dim": 2, "data_dim": 2, "c": 2,
                          "icnn": {"layers": 2, "width": 10},
                          "encoder": {"layers": 2, "width": 10}}}


def cell_config(cfg: RunConfig, raw: dict, sigma: float, L: float, seed: int) -> RunConfig:
    """Config for one grid cell: toy data at ``sigma``, both constants set to ``L``.

    Unless the user pinned ``model.sigma_dec``, the decoder noise follows the
    data noise of the cell.
    """
    cell = copy.deepcopy(cfg)
    cell.model.L1 = cell.model.L2 = float(L)
    if "sigma_dec" not in raw.get("model", {}):
        cell.model.sigma_dec = float(sigma)
    toy = cell.data.toy or ToyConfig()
    cell.data = DataConfig(toy=ToyConfig(sigma=float(sigma), n=toy.n, seed=seed,
                                         test_fraction=toy.test_fraction))
    cell.train.seed = seed
    return cell


def cell_id(sigma: float, L: float, seed: int) -> str:
    return f"sigma{sigma:g}_L{L:g}_seed{seed}"


def run_cell(cell: RunConfig, out_root: Optional[Path], run_id: str) -> dict:
    """Train and evaluate one grid cell; returns a dict with the final row or an error."""
    started = time.time()
    out = out_root / "cells" / run_id if out_root is not None else None
    try:
        result, rows = run_training(cell, out)
    except TrainingAborted as exc:
        log.error("cell %s aborted: %s", run_id, exc)
        if out is not None:
            write_meta(out, cell.train.seed, started, status="aborted")
        return {"run_id": run_id, "error": str(exc)}
    model = result.model
    final = dict(rows[-1], run_id=run_id)
    if out is not None:
        _, xte, _ = load_data(cell, cell.train.seed)
        write_svg(out_root / f"{run_id}.svg", toy_scatter(model, xte, cell.data.toy.sigma, run_id))
        write_meta(out, cell.train.seed, started, status="ok", **EVAL_META)
    return {"run_id": run_id, "row": final}


def toy_scatter(model, xs: np.ndarray, sigma: float, title: str) -> str:
    """Test points coloured by the most responsible component, true means with 2-sigma circles."""
    from .data import TOY_MEANS
    if hasattr(model, "responsibilities"):
        colors = model.responsibilities(xs).argmax(axis=1)
    else:
        colors = np.zeros(len(xs), dtype=int)
    return scatter_svg(xs, colors, TOY_MEANS, 2.0 * sigma, title)


def cmd_toy_experiment(cfg: RunConfig, raw: dict, out: Optional[Path], jobs: int = 1) -> Tuple[int, List[dict]]:
    """Run every (sigma, L, seed) cell; returns the exit code and the per-cell results."""
    started = time.time()
    exp = cfg.experiment
    cells = [(s, L, seed) for s in exp.sigma_grid for L in exp.L_grid for seed in exp.seeds]
    configs = [(cell_config(cfg, raw, s, L, seed), cell_id(s, L, seed)) for s, L, seed in cells]
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "resolved_config.json", cfg.to_dict())
    if jobs <= 1 or len(configs) == 1:
        results = [run_cell(c, out, rid) for c, rid in configs]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(run_cell, c, out, rid) for c, rid in configs]
            results = [f.result() for f in futures]
    rows = [r["row"] for r in results if "row" in r]
    failed = [r["run_id"] for r in results if "error" in r]
    if out is not None:
        write_metrics_csv(out / "toy_experiment.csv", rows)
        write_meta(out, exp.seeds[0], started, status="ok" if not failed else "partial",
                   failed_cells=failed)
    return (EXIT_FAILURE if failed else EXIT_OK), results


# entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="illidvae", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "eval", "verify", "toy-experiment"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        p.add_argument("--seed", type=int, help="run seed (overrides train.seed)")
        p.add_argument("--jobs", type=int, default=1, help="parallel grid cells")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "eval":
            p.add_argument("--checkpoint", help="checkpoint path (default <out>/model.ckpt)")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    base = TOY_DEFAULTS if args.command == "toy-experiment" else None
    try:
        cfg, raw = load_config(args.config, base)
        if args.seed is not None:
            if args.seed < 0 or args.seed >= 2 ** 64:
                raise ConfigError("/train/seed", "seed must fit in an unsigned 64-bit integer")
            cfg.train.seed = args.seed
            if args.command == "toy-experiment":
                cfg.experiment.seeds = [args.seed]
        out_dir = args.out or cfg.out_dir
        if out_dir is None:
            raise ConfigError("/out_dir", "no output directory (set out_dir or pass --out)")
        out = Path(out_dir)
        cfg.out_dir = str(out)
        if args.command == "train":
            return cmd_train(cfg, out)
        if args.command == "eval":
            return cmd_eval(cfg, out, args.checkpoint)
        if args.command == "verify":
            return cmd_verify(cfg, out, cfg.train.seed)
        code, _ = cmd_toy_experiment(cfg, raw, out, max(1, args.jobs))
        return code
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
