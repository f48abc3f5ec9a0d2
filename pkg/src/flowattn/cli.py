"""Command-line entry point: ``flowattn <command> [--config FILE] [flags]``.

Every command resolves defaults, then the config file (YAML or JSON), then
explicit flags, validates the result, and writes it to ``<out>/config.json``
so the run can be repeated with ``--config <out>/config.json``. While a
command runs, ``<out>/INCOMPLETE`` marks the directory as partial.

Failures print one line ``FAILED reason=<kind> detail=<json string>`` on
stderr. Config problems exit with status 2 after listing every problem on its
own ``config-error:`` line; runtime failures exit with status 1.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import autodiff as ad
from .attention import mp_layer
from .dag_models import init_encoder
from .data import GENERATORS, Dataset, load, save, split
from .diagnostics import flow_residuals, gradcheck_model, gradcheck_targets
from .expressivity import (
    ModelSpec, discrimination_report, flow_scaling_suite, gen_fig1_pair, gen_pair_family,
    standard_invariance_suite,
)
from .flow import default_injections, extract_flow, kirchhoff_residual
from .graph import topo_sort
from .models import ModelConfig, build_model
from .training import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

log = logging.getLogger("flowattn")

MODEL_DEFAULTS = {f.name: f.default for f in fields(ModelConfig)}
MODEL_DEFAULTS.update(input_dim=None, num_classes="auto")
TRAIN_DEFAULTS = {f.name: f.default for f in fields(TrainConfig)}

DEFAULTS: dict[str, dict[str, Any]] = {
    "gen-data": {"kind": "flow-classification", "n": 500, "seed": 0, "max_nodes": 10},
    "train": {"data": None, "seed": 0, "split_ratios": [0.8, 0.1, 0.1], "stratify": True,
              "model": MODEL_DEFAULTS, "train": TRAIN_DEFAULTS},
    "eval": {"checkpoint": None, "data": None, "split": "all", "seed": 0,
             "split_ratios": [0.8, 0.1, 0.1], "stratify": True},
    "verify-flow": {"checkpoint": None, "data": None, "seed": 0, "hidden_dim": 8,
                    "num_layers": 2, "tolerance": 1e-9},
    "expressivity": {"suite": "fig1", "model": "flowdagnn", "seeds": 20, "pairs": 50,
                     "max_nodes": 8, "hidden_dim": 8, "num_layers": 2, "seed": 0, "draws": 100},
    "gradcheck": {"model": "all", "eps": 1e-6, "seed": 0, "tolerance": 1e-5},
}

# flag name -> dotted config key, per command
FLAGS: dict[str, dict[str, tuple[str, type]]] = {
    "gen-data": {"kind": ("kind", str), "n": ("n", int), "seed": ("seed", int),
                 "max-nodes": ("max_nodes", int)},
    "train": {"data": ("data", str), "seed": ("seed", int), "arch": ("model.arch", str),
              "variant": ("model.variant", str), "mode": ("model.mode", str),
              "hidden-dim": ("model.hidden_dim", int), "layers": ("model.num_layers", int),
              "dropout": ("model.dropout", float), "lr": ("train.lr", float),
              "optimizer": ("train.optimizer", str), "weight-decay": ("train.weight_decay", float),
              "batch-size": ("train.batch_size", int), "epochs": ("train.max_epochs", int),
              "patience": ("train.early_stop_patience", int), "scheduler": ("train.scheduler", str),
              "train-seed": ("train.seed", int)},
    "eval": {"checkpoint": ("checkpoint", str), "data": ("data", str), "split": ("split", str),
             "seed": ("seed", int)},
    "verify-flow": {"checkpoint": ("checkpoint", str), "data": ("data", str), "seed": ("seed", int),
                    "hidden-dim": ("hidden_dim", int), "layers": ("num_layers", int),
                    "tolerance": ("tolerance", float)},
    "expressivity": {"suite": ("suite", str), "model": ("model", str), "seeds": ("seeds", int),
                     "pairs": ("pairs", int), "max-nodes": ("max_nodes", int),
                     "hidden-dim": ("hidden_dim", int), "layers": ("num_layers", int),
                     "seed": ("seed", int), "draws": ("draws", int)},
    "gradcheck": {"model": ("model", str), "eps": ("eps", float), "seed": ("seed", int),
                  "tolerance": ("tolerance", float)},
}

HELP = {
    "gen-data": "generate a synthetic dataset directory",
    "train": "train a model and write checkpoint, history and report",
    "eval": "evaluate a checkpoint on a dataset",
    "verify-flow": "check Kirchhoff conservation of flow-attention weights",
    "expressivity": "run discrimination and multiset experiments",
    "gradcheck": "compare backprop gradients with central differences",
}


class ConfigError(Exception):
    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


class CommandFailed(Exception):
    """Runtime check failed (for example residual above tolerance)."""

    def __init__(self, reason: str, detail: str):
        super().__init__(detail)
        self.reason = reason


# config resolution

def _set(tree: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    for k in keys[:-1]:
        tree = tree.setdefault(k, {})
    tree[keys[-1]] = value


def _merge(base: dict, override: dict, path: str, errors: list[str]) -> None:
    for k, v in override.items():
        where = f"{path}{k}"
        if k not in base:
            errors.append(f"unknown config key '{where}'")
        elif isinstance(base[k], dict):
            if not isinstance(v, dict):
                errors.append(f"config key '{where}' must be a mapping")
            else:
                _merge(base[k], v, where + ".", errors)
        else:
            base[k] = v


def load_config_file(path: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError([f"cannot read config file {path}: {exc.strerror}"]) from None
    try:
        data = yaml.safe_load(text)  # JSON is a subset of YAML
    except yaml.YAMLError as exc:
        raise ConfigError([f"config file {path} is not valid YAML/JSON: {exc}"]) from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError([f"config file {path} must contain a mapping"])
    return data


def resolve(command: str, args: argparse.Namespace) -> dict:
    config = copy.deepcopy(DEFAULTS[command])
    errors: list[str] = []
    if args.config:
        file_cfg = load_config_file(args.config)
        file_cmd = file_cfg.pop("command", command)
        if file_cmd != command:
            errors.append(f"config file is for command '{file_cmd}', not '{command}'")
        _merge(config, file_cfg, "", errors)
    for flag, (dotted, _) in FLAGS[command].items():
        value = getattr(args, flag.replace("-", "_"), None)
        if value is not None:
            _set(config, dotted, value)
    errors.extend(validate(command, config))
    if errors:
        raise ConfigError(errors)
    return config


def _positive(config: dict, keys, errors: list[str], minimum=1) -> None:
    for k in keys:
        v = config.get(k)
        if not isinstance(v, (int, float)) or isinstance(v, bool) or v < minimum:
            errors.append(f"'{k}' must be a number >= {minimum}, got {v!r}")


def validate(command: str, c: dict) -> list[str]:
    errors: list[str] = []
    if command == "gen-data":
        if c["kind"] not in GENERATORS:
            errors.append(f"'kind' must be one of {sorted(GENERATORS)}, got {c['kind']!r}")
        _positive(c, ["n"], errors, 2 if c["kind"] == "pair-discrimination" else 1)
        _positive(c, ["max_nodes"], errors, 4)
    elif command == "train":
        if not c["data"]:
            errors.append("'data' (dataset directory) is required")
        errors.extend(_ratio_errors(c["split_ratios"]))
        m = dict(c["model"])
        try:
            errors.extend(TrainConfig(**c["train"]).validate())
        except TypeError as exc:
            errors.append(f"invalid train section: {exc}")
        probe = {**m, "input_dim": m["input_dim"] or 1,
                 "num_classes": 2 if m["num_classes"] == "auto" else m["num_classes"]}
        try:
            errors.extend(ModelConfig(**probe).validate())
        except TypeError as exc:
            errors.append(f"invalid model section: {exc}")
    elif command == "eval":
        if not c["checkpoint"]:
            errors.append("'checkpoint' is required")
        if not c["data"]:
            errors.append("'data' is required")
        if c["split"] not in ("all", "train", "val", "test"):
            errors.append(f"'split' must be all, train, val or test, got {c['split']!r}")
        errors.extend(_ratio_errors(c["split_ratios"]))
    elif command == "verify-flow":
        if not c["data"]:
            errors.append("'data' is required")
        _positive(c, ["hidden_dim", "num_layers"], errors)
        if not isinstance(c["tolerance"], (int, float)) or c["tolerance"] <= 0:
            errors.append("'tolerance' must be positive")
    elif command == "expressivity":
        if c["suite"] not in ("fig1", "family", "multiset"):
            errors.append(f"'suite' must be fig1, family or multiset, got {c['suite']!r}")
        if c["model"] not in ("dagnn", "dvae", "flowdagnn"):
            errors.append(f"'model' must be dagnn, dvae or flowdagnn, got {c['model']!r}")
        _positive(c, ["seeds", "pairs", "hidden_dim", "num_layers", "draws"], errors)
        _positive(c, ["max_nodes"], errors, 4)
    elif command == "gradcheck":
        valid = gradcheck_targets() + ["all"]
        if c["model"] not in valid:
            errors.append(f"'model' must be one of {valid}, got {c['model']!r}")
        if not isinstance(c["eps"], (int, float)) or c["eps"] <= 0:
            errors.append("'eps' must be positive")
    return errors


def _ratio_errors(r) -> list[str]:
    if (not isinstance(r, (list, tuple)) or len(r) != 3
            or any(not isinstance(x, (int, float)) or x < 0 for x in r)
            or abs(sum(r) - 1) > 1e-9):
        return [f"'split_ratios' must be three non-negative numbers summing to 1, got {r!r}"]
    return []


# output helpers

class Output:
    def __init__(self, out: str | None, fmt: str):
        self.dir = Path(out) if out else None
        self.fmt = fmt

    def start(self, command: str, config: dict) -> None:
        if self.dir is None:
            return
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / "INCOMPLETE").write_text("run did not finish\n")
        (self.dir / "config.json").write_text(
            json.dumps({"command": command, **config}, indent=2) + "\n")

    def finish(self) -> None:
        if self.dir is not None:
            (self.dir / "INCOMPLETE").unlink(missing_ok=True)

    def emit(self, text: str, records: list[dict], name: str) -> None:
        print(text if self.fmt == "text" else "\n".join(json.dumps(r) for r in records))
        if self.dir is not None:
            (self.dir / f"{name}.jsonl").write_text("".join(json.dumps(r) + "\n" for r in records))
            (self.dir / f"{name}.txt").write_text(text + "\n")


# commands

def cmd_gen_data(c: dict, out: Output) -> None:
    if out.dir is None:
        raise ConfigError(["--out is required for gen-data"])
    gen = GENERATORS[c["kind"]]
    if c["kind"] == "pair-discrimination":
        ds = gen(c["n"], c["seed"], max_nodes=c["max_nodes"])
    else:
        ds = gen(c["n"], c["max_nodes"], c["seed"])
    save(ds, out.dir)
    labels = ds.labels()
    rec = {"records": len(ds), "positive_fraction": float(np.mean(labels)),
           "feature_dim": ds.manifest.feature_dim, "kind": c["kind"]}
    out.emit(f"wrote {len(ds)} records to {out.dir} "
             f"(positive fraction {rec['positive_fraction']:.3f})", [rec], "summary")


def _dataset(path: str) -> Dataset:
    try:
        return load(path)
    except FileNotFoundError:
        raise ConfigError([f"dataset not found: {path}"]) from None


def cmd_train(c: dict, out: Output) -> None:
    if out.dir is None:
        raise ConfigError(["--out is required for train"])
    ds = _dataset(c["data"])
    m = dict(c["model"])
    if m["input_dim"] is None:
        m["input_dim"] = ds.manifest.feature_dim
    if m["num_classes"] == "auto":
        m["num_classes"] = ds.manifest.num_classes if ds.manifest.task == "classification" else None
    config = ModelConfig(**m)
    tcfg = TrainConfig(**c["train"])
    if config.num_classes is None and tcfg.loss == "nll":
        tcfg = TrainConfig(**{**c["train"], "loss": "mse"})
    tr, va, te = split(ds, c["split_ratios"], c["seed"], c["stratify"])
    need = config.needs_dag
    samples = [[r.to_sample(need) for r in part] for part in (tr, va, te)]
    model = build_model(config, tcfg.seed)
    history_path = out.dir / "history.jsonl"
    with history_path.open("w") as fh:
        result = train(model, samples[0], samples[1], tcfg, samples[2] or None,
                       on_epoch=lambda r: fh.write(json.dumps(r) + "\n"))
    save_checkpoint(result.model, out.dir / "model")
    report = {"initial_train_loss": result.initial_train_loss, "best_epoch": result.best_epoch,
              "epochs_run": len(result.history), **result.report.to_dict()}
    text = "\n".join(f"{k}: {v}" for k, v in report.items())
    out.emit(text, [report], "report")


def cmd_eval(c: dict, out: Output) -> None:
    ds = _dataset(c["data"])
    try:
        model = load_checkpoint(c["checkpoint"])
    except FileNotFoundError:
        raise ConfigError([f"checkpoint not found: {c['checkpoint']}"]) from None
    records = ds.records
    if c["split"] != "all":
        parts = split(ds, c["split_ratios"], c["seed"], c["stratify"])
        records = parts[("train", "val", "test").index(c["split"])]
    report = evaluate(model, [r.to_sample(model.config.needs_dag) for r in records]).to_dict()
    out.emit("\n".join(f"{k}: {v}" for k, v in report.items()), [report], "report")


def _flow_betas(model_or_none, d, c, rng):
    """Per-layer flow weights for one DAG."""
    if model_or_none is None or model_or_none.config.arch == "flowdagnn":
        if model_or_none is None:
            enc = init_encoder(rng, "flowdagnn", d.graph.feature_dim, c["hidden_dim"],
                               c["num_layers"])
        else:
            enc = model_or_none.params.encoder
        X = ad.Tensor(d.features)
        H0 = X if enc.input_proj is None else enc.input_proj(X)
        return enc.layers, H0
    return None, None


def cmd_verify_flow(c: dict, out: Output) -> None:
    ds = _dataset(c["data"])
    model = None
    if c["checkpoint"]:
        model = load_checkpoint(c["checkpoint"])
        if model.config.arch not in ("flowdagnn", "attn") or (
                model.config.arch == "attn" and model.config.mode != "flow"):
            raise ConfigError(["verify-flow needs a flowdagnn or flow-mode attention checkpoint"])
    rng = np.random.default_rng(c["seed"])
    records, worst = [], 0.0
    with ad.no_grad():
        for rec in ds.records:
            d = topo_sort(rec.to_graph())
            if model is not None and model.config.arch == "attn":
                residuals = []
                p, H = model.params, ad.Tensor(d.features)
                for k in range(model.config.num_layers):
                    H, w = mp_layer(d.graph, H, p.scoring[k], "flow", p.f[k], p.phi[k],
                                    return_weights=True)
                    flow = extract_flow(d, w, default_injections(d, w))
                    residuals.append(kirchhoff_residual(d, flow)[1])
            else:
                layers, H0 = _flow_betas(model, d, c, rng)
                residuals = flow_residuals(d, layers, H0)
            for layer, r in enumerate(residuals):
                records.append({"graph": rec.id, "layer": layer, "max_residual": r})
                worst = max(worst, r)
    ok = worst < c["tolerance"]
    summary = {"graphs": len(ds), "max_residual": worst, "tolerance": c["tolerance"], "pass": ok}
    lines = [f"{r['graph']:>20} layer {r['layer']} max_residual {r['max_residual']:.3e}"
             for r in records]
    lines.append(f"max_residual={worst:.3e} tolerance={c['tolerance']:.1e} "
                 f"{'PASS' if ok else 'FAIL'}")
    out.emit("\n".join(lines), records + [{"summary": summary}], "residuals")
    if not ok:
        raise CommandFailed("kirchhoff-violation", f"max residual {worst:.3e} exceeds "
                                                   f"{c['tolerance']:.1e}")


def cmd_expressivity(c: dict, out: Output) -> None:
    seeds = range(c["seed"], c["seed"] + c["seeds"])
    if c["suite"] == "multiset":
        rows = []
        for name, res in (("standard", standard_invariance_suite(c["draws"], seed=c["seed"])),
                          ("flow", flow_scaling_suite(c["draws"], seed=c["seed"]))):
            for variant in sorted({r.variant for r in res}):
                sel = [r for r in res if r.variant == variant]
                row = {"mode": name, "variant": variant,
                       "max_output_diff": max(r.output_diff for r in sel),
                       "min_output_diff": min(r.output_diff for r in sel)}
                if name == "flow":
                    row["max_message_ratio_error"] = max(r.message_ratio_error for r in sel)
                rows.append(row)
        text = "\n".join(" ".join(f"{k}={v:.3e}" if isinstance(v, float) else f"{k}={v}"
                                  for k, v in row.items()) for row in rows)
        out.emit(text, rows, "report")
        return
    pairs = ([gen_fig1_pair()] if c["suite"] == "fig1"
             else gen_pair_family(c["pairs"], c["max_nodes"], c["seed"]))
    spec = ModelSpec(c["model"], c["hidden_dim"], c["num_layers"])
    report = discrimination_report(spec, pairs, seeds)
    out.emit(report.to_text(), report.records() + [{"summary": report.summary()}], "report")


def cmd_gradcheck(c: dict, out: Output) -> None:
    targets = gradcheck_targets() if c["model"] == "all" else [c["model"]]
    rows = []
    for name in targets:
        r = gradcheck_model(name, c["seed"], c["eps"])
        rows.append({"model": r.model, "num_params": r.num_params,
                     "max_rel_error": float(r.max_rel_error),
                     "pass": bool(r.max_rel_error < c["tolerance"])})
    lines = [f"{'model':<16} {'params':>7} {'max_rel_error':>14}  status"]
    lines += [f"{r['model']:<16} {r['num_params']:>7} {r['max_rel_error']:>14.3e}  "
              f"{'PASS' if r['pass'] else 'FAIL'}" for r in rows]
    out.emit("\n".join(lines), rows, "gradcheck")
    failing = [r["model"] for r in rows if not r["pass"]]
    if failing:
        raise CommandFailed("gradcheck-failed", f"models above tolerance: {failing}")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "verify-flow": cmd_verify_flow, "expressivity": cmd_expressivity,
            "gradcheck": cmd_gradcheck}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowattn", description="Flow attention toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, flags in FLAGS.items():
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", help="YAML or JSON config file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--format", choices=("text", "jsonl"), default="text",
                       help="stdout report format")
        p.add_argument("-v", "--verbose", action="store_true")
        for flag, (_, typ) in flags.items():
            p.add_argument(f"--{flag}", type=typ, default=None)
    return parser


def _fail(reason: str, detail: str) -> None:
    print(f"FAILED reason={reason} detail={json.dumps(detail)}", file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Output(args.out, args.format)
    try:
        config = resolve(args.command, args)
        out.start(args.command, config)
        COMMANDS[args.command](config, out)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config-error: {e}", file=sys.stderr)
        _fail("config-invalid", f"{len(exc.errors)} config error(s)")
        return 2
    except CommandFailed as exc:
        _fail(exc.reason, str(exc))
        return 1
    except Exception as exc:  # noqa: BLE001 - reported as a one-line failure
        log.debug("command failed", exc_info=True)
        _fail(type(exc).__name__, str(exc))
        return 1
    out.finish()
    return 0


if __name__ == "__main__":
    sys.exit(main())
