"""Command-line entry point: generate, train, eval, sweep, verify-ib, grad-check.

Runs are configured by a flat ``key = value`` file plus flag overrides.
Every output lands under ``out_dir`` next to a ``config.txt`` snapshot of
the resolved configuration.  Failures print one line,
``error: CODE: message``, and exit with status 2.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import DataError, SynthSpec, generate, load_jsonl, save_jsonl
from .metrics import MetricsReport, ToyJoint, ib_verify
from .model import RationaleModel
from .objectives import DEFAULT_PI_GRID, ObjectiveConfig, ObjectiveError
from .rng import Rng
from .tensor import TensorError
from .training import TrainConfig, build_model, evaluate, train

log = logging.getLogger("sparse_ib")

SPLITS = ("train", "val", "test")
SWEEP_COLUMNS = ("pi", "seed", "task_metric", "iou_f1", "token_f1", "sparsity_mean", "sparsity_var")
METRIC_NAMES = tuple(f.name for f in fields(MetricsReport))


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


# -- configuration ------------------------------------------------------------

@dataclass
class RunConfig:
    # model
    embed_dim: int = 64
    hidden_dim: int = 64
    granularity: str = "sentence"
    # objective
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    # synthetic data; data_seed is SynthSpec.seed
    synth: SynthSpec = field(default_factory=SynthSpec)
    # optimisation
    trainer: TrainConfig = field(default_factory=TrainConfig)
    # run
    seeds: list[int] = field(default_factory=lambda: [0])
    pi_list: list[float] = field(default_factory=lambda: list(DEFAULT_PI_GRID))
    out_dir: str = "runs"
    data_dir: str = ""
    sparsity_runs: int = 100
    toy_symbols: int = 4

    def model_cfg(self) -> dict:
        return {"embed_dim": self.embed_dim, "hidden_dim": self.hidden_dim,
                "granularity": self.granularity}

    def flat(self) -> dict:
        out = {"embed_dim": self.embed_dim, "hidden_dim": self.hidden_dim,
               "granularity": self.granularity}
        for k, v in asdict(self.objective).items():
            out["objective" if k == "kind" else k] = v
        for k, v in asdict(self.synth).items():
            out["data_seed" if k == "seed" else k] = v
        out.update(asdict(self.trainer))
        out.update(seeds=self.seeds, pi_list=self.pi_list, out_dir=self.out_dir,
                   data_dir=self.data_dir, sparsity_runs=self.sparsity_runs,
                   toy_symbols=self.toy_symbols)
        return out

    def validate(self) -> "RunConfig":
        try:
            self.objective.validate()
            self.synth.validate()
        except (ObjectiveError, DataError, ValueError) as exc:
            raise CliError("CONFIG", str(exc)) from None
        if self.granularity not in ("sentence", "token"):
            raise CliError("CONFIG", f"unknown granularity {self.granularity!r}")
        if not self.seeds:
            raise CliError("CONFIG", "seeds must list at least one seed")
        if any(not 0.0 < p < 1.0 for p in self.pi_list):
            raise CliError("CONFIG", "every pi in pi_list must be in (0, 1)")
        if min(self.embed_dim, self.hidden_dim, self.trainer.batch_size, self.trainer.epochs,
               self.trainer.patience, self.sparsity_runs) < 1:
            raise CliError("CONFIG", "sizes, epochs, patience and sparsity_runs must be positive")
        if not self.trainer.lr > 0:
            raise CliError("CONFIG", "lr must be positive")
        if not 1 <= self.toy_symbols <= 16:
            raise CliError("CONFIG", "toy_symbols must be in [1, 16]")
        return self


def _field_types() -> dict[str, tuple[object, str, str]]:
    """Flat key -> (owner attribute or None, attribute name, type name)."""
    types = {"embed_dim": (None, "embed_dim", "int"), "hidden_dim": (None, "hidden_dim", "int"),
             "granularity": (None, "granularity", "str")}
    for f in fields(ObjectiveConfig):
        types["objective" if f.name == "kind" else f.name] = ("objective", f.name, str(f.type))
    for f in fields(SynthSpec):
        types["data_seed" if f.name == "seed" else f.name] = ("synth", f.name, str(f.type))
    for f in fields(TrainConfig):
        types[f.name] = ("trainer", f.name, str(f.type))
    types.update(seeds=(None, "seeds", "int_list"), pi_list=(None, "pi_list", "float_list"),
                 out_dir=(None, "out_dir", "str"), data_dir=(None, "data_dir", "str"),
                 sparsity_runs=(None, "sparsity_runs", "int"),
                 toy_symbols=(None, "toy_symbols", "int"))
    return types


def _parse_value(key: str, raw: str, kind: str):
    raw = raw.strip()
    if kind.endswith(" | None"):
        if raw.lower() in ("", "none"):
            return None
        kind = kind[:-len(" | None")]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind == "int_list":
            return [int(v) for v in raw.replace(",", " ").split()]
        if kind == "float_list":
            return [float(v) for v in raw.replace(",", " ").split()]
    except ValueError:
        raise CliError("CONFIG", f"bad value for {key}: {raw!r} (expected {kind})") from None
    return raw


def apply_settings(cfg: RunConfig, settings: dict[str, str]) -> RunConfig:
    types = _field_types()
    for key, raw in settings.items():
        if key not in types:
            raise CliError("CONFIG", f"unknown config key {key!r}")
        owner, name, kind = types[key]
        target = cfg if owner is None else getattr(cfg, owner)
        setattr(target, name, _parse_value(key, raw, kind))
    return cfg


def read_config_file(path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise CliError("CONFIG", f"config file not found: {path}")
    out = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError("CONFIG", f"{path}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def write_config_snapshot(cfg: RunConfig, out_dir: Path) -> None:
    lines = []
    for key, val in cfg.flat().items():
        if isinstance(val, list):
            val = ",".join(repr(v) if isinstance(v, float) else str(v) for v in val)
        lines.append(f"{key} = {val}")
    (out_dir / "config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def resolve_config(args) -> RunConfig:
    settings = read_config_file(args.config) if args.config else {}
    # flags win over the file
    if args.seed is not None:
        settings["seeds"] = str(args.seed)
    if args.out is not None:
        settings["out_dir"] = args.out
    if args.pi is not None:
        settings["pi"] = str(args.pi)
    if args.objective is not None:
        settings["objective"] = args.objective
    if args.data is not None:
        settings["data_dir"] = args.data
    return apply_settings(RunConfig(), settings).validate()


# -- helpers ------------------------------------------------------------------

def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_config_snapshot(cfg, out)
    return out


def _load_splits(cfg: RunConfig) -> dict:
    if not cfg.data_dir:
        return generate(cfg.synth)
    root = Path(cfg.data_dir)
    if not root.is_dir():
        raise CliError("DATA", f"dataset directory not found: {root}")
    splits = {}
    for name in SPLITS:
        path = root / f"{name}.jsonl"
        if not path.exists():
            raise CliError("DATA", f"dataset file not found: {path}")
        splits[name] = load_jsonl(path)
    return splits


def _is_regression(docs) -> bool:
    return all(isinstance(d.label, (int, float)) and not isinstance(d.label, bool) for d in docs)


def _train_one(cfg: RunConfig, splits: dict, obj: ObjectiveConfig, seed: int):
    regression = _is_regression(splits["train"])
    model = build_model(splits["train"], cfg.model_cfg(), obj, seed, regression)
    result = train(splits["train"], splits["val"], model, obj, seed, cfg.trainer)
    return result


def _metrics_dict(report: MetricsReport) -> dict:
    return {k: _num(v) for k, v in asdict(report).items()}


def _num(v: float):
    return None if math.isnan(v) else float(v)


def _summary(runs: list[dict]) -> dict:
    mean, std = {}, {}
    for name in METRIC_NAMES:
        vals = [r["metrics"][name] for r in runs if r["metrics"][name] is not None]
        mean[name] = float(np.mean(vals)) if vals else None
        std[name] = float(np.std(vals)) if vals else None
    return {"mean": mean, "std": std}


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


# -- commands -----------------------------------------------------------------

def cmd_generate(cfg: RunConfig) -> dict:
    out = _out_dir(cfg)
    splits = generate(cfg.synth)
    for name in SPLITS:
        save_jsonl(out / f"{name}.jsonl", splits[name])
    return {name: len(docs) for name, docs in splits.items()}


def cmd_train(cfg: RunConfig) -> dict:
    out = _out_dir(cfg)
    splits = _load_splits(cfg)
    obj = cfg.objective
    summary = {}
    for seed in cfg.seeds:
        result = _train_one(cfg, splits, obj, seed)
        stem = f"seed{seed}"
        ckpt = out / f"model-{stem}.json"
        result.model.save(ckpt, extra={"objective": obj.to_dict(), "seed": seed,
                                       "best_epoch": result.best_epoch})
        with (out / f"epochs-{stem}.tsv").open("w", encoding="utf-8") as fh:
            fh.write("\t".join(result.log[0].HEADER) + "\n" if result.log else "")
            for row in result.log:
                fh.write(row.row() + "\n")
        summary[stem] = {"checkpoint": str(ckpt), "best_epoch": result.best_epoch,
                         "epochs_run": len(result.log), "learned_pi": result.learned_pi}
    return summary


def _eval_docs(cfg: RunConfig) -> list:
    return _load_splits(cfg)["test"]


def cmd_eval(cfg: RunConfig, checkpoints: list[str] | None = None) -> dict:
    """Per-seed metrics plus mean and std.

    With checkpoints, each one is scored on the test split.  Without, one
    model per seed is trained first and then scored.
    """
    out = _out_dir(cfg)
    runs = []
    if checkpoints:
        docs = _eval_docs(cfg)
        for path in checkpoints:
            try:
                model, extra = RationaleModel.load(path)
            except FileNotFoundError as exc:
                raise CliError("CHECKPOINT", str(exc)) from None
            except (ValueError, KeyError, json.JSONDecodeError) as exc:
                raise CliError("CHECKPOINT", f"{path}: unreadable checkpoint ({exc})") from None
            obj = ObjectiveConfig.from_dict(extra.get("objective", {})).validate()
            seed = int(extra.get("seed", cfg.seeds[0]))
            report = evaluate(model, docs, obj, seed, cfg.sparsity_runs)
            runs.append({"seed": seed, "checkpoint": str(path), "metrics": _metrics_dict(report)})
    else:
        splits = _load_splits(cfg)
        for seed in cfg.seeds:
            result = _train_one(cfg, splits, cfg.objective, seed)
            report = evaluate(result.model, splits["test"], cfg.objective, seed, cfg.sparsity_runs)
            runs.append({"seed": seed, "metrics": _metrics_dict(report)})
    payload = {"runs": runs, **_summary(runs)}
    (out / "metrics.json").write_text(_dump(payload), encoding="utf-8")
    return payload


def cmd_sweep(cfg: RunConfig) -> list[dict]:
    out = _out_dir(cfg)
    splits = _load_splits(cfg)
    rows = []
    for pi in cfg.pi_list:
        obj = ObjectiveConfig.from_dict({**cfg.objective.to_dict(), "pi": pi}).validate()
        for seed in cfg.seeds:
            result = _train_one(cfg, splits, obj, seed)
            report = evaluate(result.model, splits["test"], obj, seed, cfg.sparsity_runs)
            row = {"pi": pi, "seed": seed, **asdict(report)}
            rows.append({k: row[k] for k in SWEEP_COLUMNS})
            log.info("pi=%s seed=%s iou_f1=%.4f", pi, seed, report.iou_f1)
    with (out / "sweep.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return rows


DEFAULT_TOY = ToyJoint(p_x=[0.4, 0.3, 0.2, 0.1], theta=[0.9, 0.6, 0.3, 0.1], prior_pi=0.2)


def cmd_verify_ib(cfg: RunConfig) -> dict:
    """The fixed default toy joint (with prior pi from the config) plus one random joint per seed."""
    out = _out_dir(cfg)
    toy = ToyJoint(DEFAULT_TOY.p_x, DEFAULT_TOY.theta, cfg.objective.pi)
    reports = {"default": ib_verify(toy).to_dict()}
    for seed in cfg.seeds:
        joint = ToyJoint.random(Rng(seed, "verify-ib"), cfg.toy_symbols)
        reports[f"random-seed{seed}"] = ib_verify(joint).to_dict()
    ok = all(r["bound"] >= r["mi"] - 1e-12 for r in reports.values())
    payload = {"reports": reports, "bound_holds": ok}
    (out / "ib_report.json").write_text(_dump(payload), encoding="utf-8")
    return payload


def cmd_gradcheck(cfg: RunConfig) -> tuple[list, bool]:
    from .gradcheck import run_all

    out = _out_dir(cfg)
    results = run_all(cfg.seeds[0])
    table = "\n".join(r.row() for r in results) + "\n"
    (out / "gradcheck.txt").write_text(table, encoding="utf-8")
    return results, all(r.passed for r in results)


# -- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparse-ib", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("generate", "write synthetic train/val/test JSONL"),
                            ("train", "train one model per seed; write checkpoints and epoch logs"),
                            ("eval", "score checkpoints (or fresh per-seed models) on the test split"),
                            ("sweep", "train over pi_list x seeds and write sweep.csv"),
                            ("verify-ib", "check the IB bound on enumerated toy joints"),
                            ("grad-check", "finite-difference check of every op and loss")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, help="single seed (overrides seeds)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--pi", type=float, help="prior / budget pi")
        p.add_argument("--objective", help="objective kind")
        p.add_argument("--data", help="directory with train/val/test.jsonl")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "eval":
            p.add_argument("--checkpoint", action="append",
                           help="checkpoint to score; repeat for several seeds")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    cfg = resolve_config(args)
    if args.command == "generate":
        print(json.dumps(cmd_generate(cfg), sort_keys=True))
    elif args.command == "train":
        print(json.dumps(cmd_train(cfg), sort_keys=True))
    elif args.command == "eval":
        print(_dump(cmd_eval(cfg, args.checkpoint)), end="")
    elif args.command == "sweep":
        rows = cmd_sweep(cfg)
        print(f"wrote {len(rows)} rows to {Path(cfg.out_dir) / 'sweep.csv'}")
    elif args.command == "verify-ib":
        payload = cmd_verify_ib(cfg)
        for name, r in payload["reports"].items():
            print(f"{name}: mi={r['mi']:.12g} bound={r['bound']:.12g} "
                  f"residual={r['decomposition_residual']:.3g}")
        if not payload["bound_holds"]:
            raise CliError("IB_BOUND", "bound < mi on at least one joint")
    else:
        results, ok = cmd_gradcheck(cfg)
        for r in results:
            print(r.row())
        if not ok:
            raise CliError("GRADCHECK", "at least one gradient check failed")
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except CliError as exc:
        code, msg = exc.code, str(exc)
    except ObjectiveError as exc:
        code, msg = "OBJECTIVE", str(exc)
    except DataError as exc:
        code, msg = "DATA", str(exc)
    except FileNotFoundError as exc:
        code, msg = "NOT_FOUND", str(exc)
    except TensorError as exc:
        code, msg = "NUMERIC", str(exc)
    print(f"error: {code}: {' '.join(msg.split())}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
