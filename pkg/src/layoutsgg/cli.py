"""Command-line entry point: generate, train, eval, bench, gradcheck, report, gates.

Exit codes: 0 success, 1 usage error or a failed run (gradient check
failure, diverged training), 2 data/model format error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .bench import DEFAULT_KS, bench_run, evaluate, gate_stats, improvement_table, read_report_csv
from .corruptions import KINDS
from .gradcheck import run_gradcheck
from .lee import FUSION_MODES
from .nrm import MODES as ATTENTION_MODES
from .pipeline import ModelConfig, ModelFormatError, TrainConfig, TrainingDiverged, init_params, load_model, save_model, train
from .scenes import GeneratorConfig, SceneFormatError, generate_dataset, load_jsonl, save_jsonl
from .validation import check_ks, check_scenes

log = logging.getLogger("layoutsgg")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read_json(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise SceneFormatError(f"{path}: expected a JSON object")
    return data


def _check_data(scenes, config: ModelConfig) -> None:
    try:
        check_scenes(scenes, config.n_categories, config.n_predicates, config.image_size)
    except ValueError as exc:
        raise SceneFormatError(str(exc)) from exc


def _write(text: str, out) -> None:
    if out:
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _model_flags(p):
    p.add_argument("--enable-nrm", action="store_true", default=None, help="layout-oriented restitution of the feature map")
    p.add_argument("--enable-lee", action="store_true", default=None, help="gated layout-embedded encoders")
    p.add_argument("--fusion", choices=FUSION_MODES, default=None)
    p.add_argument("--attention", choices=ATTENTION_MODES, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="layoutsgg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write a synthetic dataset (JSON lines)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="generator config JSON")
    p.add_argument("--n-scenes", type=int, default=100)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a model on clean scenes")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="training config JSON (train and model keys)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--task", choices=("predcls", "sgcls"))
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    _model_flags(p)

    p = sub.add_parser("eval", help="evaluate one model on one split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--task", choices=("predcls", "sgcls"))
    p.add_argument("--corruption", choices=KINDS)
    p.add_argument("--severity", type=int, default=0)
    p.add_argument("--perturb-bbox", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, nargs="+", default=list(DEFAULT_KS))

    p = sub.add_parser("bench", help="corruption x severity grid to CSV and JSON")
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="bench config JSON (kinds, severities, k, task, perturb_bbox, seed)")
    p.add_argument("--out", required=True, help="output stem; writes <stem>.csv and <stem>.json")
    p.add_argument("--task", choices=("predcls", "sgcls"))
    p.add_argument("--kinds", nargs="+", choices=KINDS)
    p.add_argument("--severities", type=int, nargs="+")
    p.add_argument("--k", type=int, nargs="+")
    p.add_argument("--perturb-bbox", type=float)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--n-seeds", type=int, default=5)
    p.add_argument("--out")

    p = sub.add_parser("report", help="join two bench CSVs into an improvement table")
    p.add_argument("base")
    p.add_argument("ours")
    p.add_argument("--out")

    p = sub.add_parser("gates", help="mean gate value per corruption severity")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--kinds", nargs="+", choices=KINDS, default=["gaussian_noise"])
    p.add_argument("--severities", type=int, nargs="+", default=[0, 1, 2, 3, 4, 5])
    p.add_argument("--task", choices=("predcls", "sgcls"), default="predcls")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    return parser


def cmd_generate(args) -> int:
    config = GeneratorConfig.from_json(args.config) if args.config else GeneratorConfig()
    save_jsonl(generate_dataset(args.seed, args.n_scenes, config), args.out)
    log.info("wrote %d scenes to %s", args.n_scenes, args.out)
    return EXIT_OK


def _split_train_config(raw: dict) -> tuple[dict, dict]:
    model_keys = {f.name for f in fields(ModelConfig)}
    train_keys = {f.name for f in fields(TrainConfig)}
    unknown = set(raw) - model_keys - train_keys
    if unknown:
        raise SceneFormatError(f"unknown training config keys {sorted(unknown)}")
    return {k: v for k, v in raw.items() if k in model_keys}, {k: v for k, v in raw.items() if k in train_keys}


def cmd_train(args) -> int:
    model_kw, train_kw = _split_train_config(_read_json(args.config) if args.config else {})
    for flag, key in (("enable_nrm", "enable_nrm"), ("enable_lee", "enable_lee"), ("fusion", "fusion"), ("attention", "attention")):
        if getattr(args, flag) is not None:
            model_kw[key] = getattr(args, flag)
    for key in ("seed", "task", "lr", "epochs"):
        if getattr(args, key) is not None:
            train_kw[key] = getattr(args, key)
    scenes = load_jsonl(args.data)
    model_kw.setdefault("image_size", (scenes[0].height, scenes[0].width))
    mcfg = ModelConfig(**model_kw)
    tcfg = TrainConfig(**train_kw)
    _check_data(scenes, mcfg)
    params = init_params(mcfg, tcfg.seed)
    params, curve = train(scenes, params, tcfg, log=lambda e, l: log.info("epoch %d loss %.6f", e, l))
    save_model(params, args.out, meta={"train": {f.name: getattr(tcfg, f.name) for f in fields(TrainConfig)}, "loss_curve": curve})
    print(json.dumps({"method": mcfg.method, "n_parameters": params.n_parameters, "loss_curve": curve}))
    return EXIT_OK


def cmd_eval(args) -> int:
    model, meta = load_model(args.model, with_meta=True)
    scenes = load_jsonl(args.data)
    task = args.task or meta.get("train", {}).get("task", "predcls")
    _check_data(scenes, model.config)
    if args.severity and not args.corruption:
        raise UsageError("--severity needs --corruption")
    metrics = evaluate(model, scenes, check_ks(args.k), task, args.corruption, args.severity, args.perturb_bbox, args.seed)
    _write(json.dumps(metrics, indent=2, sort_keys=True) + "\n", args.out)
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _read_json(args.config) if args.config else {}
    unknown = set(cfg) - {"kinds", "severities", "k", "task", "perturb_bbox", "seed"}
    if unknown:
        raise SceneFormatError(f"unknown bench config keys {sorted(unknown)}")
    pick = lambda flag, key, default: flag if flag is not None else cfg.get(key, default)
    kinds = pick(args.kinds, "kinds", list(KINDS))
    severities = pick(args.severities, "severities", [0, 1, 2, 3, 4, 5])
    ks = check_ks(pick(args.k, "k", list(DEFAULT_KS)))
    task = pick(args.task, "task", "predcls")
    perturb = pick(args.perturb_bbox, "perturb_bbox", 0.0)
    seed = pick(args.seed, "seed", 0)
    models = {}
    for path in args.models:
        m = load_model(path)
        label = m.config.method if m.config.method not in models else f"{m.config.method}@{Path(path).stem}"
        models[label] = m
    scenes = load_jsonl(args.data)
    for m in models.values():
        _check_data(scenes, m.config)
    report = bench_run(models, scenes, kinds, severities, ks, task, perturb, seed)
    csv_path, json_path = report.write(args.out)
    log.info("wrote %s and %s", csv_path, json_path)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    lines = []

    def show(r):
        line = f"{'PASS' if r.passed else 'FAIL'} {r.name} seed={r.seed} err={r.error:.3e} tol={r.tol:g}"
        lines.append(line)
        print(line, flush=True)

    results = run_gradcheck(range(args.seed, args.seed + args.n_seeds), log=show)
    if args.out:
        _write("\n".join(lines) + "\n", args.out)
    return EXIT_OK if all(r.passed for r in results) else EXIT_USAGE


def cmd_report(args) -> int:
    try:
        base, ours = read_report_csv(args.base), read_report_csv(args.ours)
    except (KeyError, ValueError) as exc:
        raise SceneFormatError(str(exc)) from exc
    _write(improvement_table(base, ours), args.out)
    return EXIT_OK


def cmd_gates(args) -> int:
    model = load_model(args.model)
    scenes = load_jsonl(args.data)
    _check_data(scenes, model.config)
    rows = gate_stats(model, scenes, args.kinds, args.severities, args.task, args.seed)
    _write(json.dumps(rows, indent=2) + "\n", args.out)
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
    "gates": cmd_gates,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (ModelFormatError, SceneFormatError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"layoutsgg: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (UsageError, TrainingDiverged, ValueError, TypeError) as exc:
        print(f"layoutsgg: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
