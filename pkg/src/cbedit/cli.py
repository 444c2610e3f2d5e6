"""Command-line interface.

Subcommands: synth, train, edit, retrain, compare, bench, periodic,
rank-concepts.  Exit codes: 0 on success, 2 for invalid configuration or
inputs, 3 for numerical failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .editing import concept_importance, edit, request_from_json
from .errors import CbeditError, ConfigError, NumericalError
from .experiments import append_record, run_edit_vs_retrain, run_periodic
from .experiments import run_importance as run_importance_pipeline
from .oracle import compare, retrain_after_edit
from .scenario import ScenarioConfig, synth_dataset
from .serialize import load_checkpoint, load_dataset, save_checkpoint, save_dataset
from .training import train_two_stage

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _load_scenario(args: argparse.Namespace) -> ScenarioConfig:
    payload: dict = {}
    if args.config:
        try:
            payload = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    config = ScenarioConfig.from_dict(payload)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    overrides = {}
    if args.backend is not None:
        overrides["backend"] = args.backend
    if args.h_tilde is not None:
        overrides["h_tilde_mode"] = args.h_tilde
    if overrides:
        from dataclasses import replace

        config = replace(config, **overrides)
    return config


def _read_request(spec: str):
    path = Path(spec)
    text = path.read_text(encoding="utf-8") if path.exists() else spec
    return request_from_json(text)


def _out_path(args: argparse.Namespace, default: str) -> Path:
    return Path(args.out) if args.out else Path(default)


def cmd_synth(args: argparse.Namespace) -> int:
    config = _load_scenario(args)
    train, test = synth_dataset(config)
    out = _out_path(args, "data")
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(out / "train.csv", train)
    save_dataset(out / "test.csv", test)
    (out / "scenario.json").write_text(config.to_json(), encoding="utf-8")
    print(f"wrote {out}/train.csv ({train.n} rows) and {out}/test.csv "
          f"({test.n} rows)")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = _load_scenario(args)
    D = load_dataset(args.data, num_classes=config.num_classes)
    trained = train_two_stage(D, config.model_spec(), config.train)
    out = _out_path(args, "model.json")
    save_checkpoint(out, trained.g, trained.f)
    info = {"concept": {"converged": trained.concept_info.converged,
                        "iters": trained.concept_info.n_iters,
                        "grad_norm": trained.concept_info.grad_norm},
            "label": {"converged": trained.label_info.converged,
                      "iters": trained.label_info.n_iters,
                      "grad_norm": trained.label_info.grad_norm}}
    print(json.dumps({"checkpoint": str(out), "training": info}, sort_keys=True))
    return EXIT_OK


def cmd_edit(args: argparse.Namespace) -> int:
    config = _load_scenario(args)
    D = load_dataset(args.data, num_classes=config.num_classes)
    g, f = load_checkpoint(args.ckpt)
    req = _read_request(args.request)
    g_e, f_e, report = edit(g, f, D, req, config.edit_backend(),
                            label_loss=config.label_loss)
    out = _out_path(args, "edited.json")
    save_checkpoint(out, g_e, f_e)
    print(report.to_json())
    return EXIT_OK


def cmd_retrain(args: argparse.Namespace) -> int:
    config = _load_scenario(args)
    D = load_dataset(args.data, num_classes=config.num_classes)
    req = _read_request(args.request)
    trained = retrain_after_edit(D, req, config.model_spec(), config.train)
    out = _out_path(args, "retrained.json")
    save_checkpoint(out, trained.g, trained.f)
    print(json.dumps({"checkpoint": str(out)}, sort_keys=True))
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    config = _load_scenario(args)
    test = load_dataset(args.data, num_classes=config.num_classes)
    g_a, f_a = load_checkpoint(args.ckpt_a)
    g_b, f_b = load_checkpoint(args.ckpt_b)
    report = compare(g_a, f_a, g_b, f_b, test)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    config = _load_scenario(args)
    record = run_edit_vs_retrain(config)
    out = _out_path(args, "reports.jsonl")
    append_record(out, record, with_timings=args.timings)
    print(json.dumps(record.summary, sort_keys=True))
    return EXIT_OK


def cmd_periodic(args: argparse.Namespace) -> int:
    config = _load_scenario(args)
    record = run_periodic(config, args.rounds, args.increment)
    out = _out_path(args, "reports.jsonl")
    append_record(out, record, with_timings=args.timings)
    print(json.dumps(record.summary, sort_keys=True))
    return EXIT_OK


def cmd_rank_concepts(args: argparse.Namespace) -> int:
    config = _load_scenario(args)
    if args.data and args.ckpt:
        D = load_dataset(args.data, num_classes=config.num_classes)
        g, f = load_checkpoint(args.ckpt)
        eval_D = (load_dataset(args.eval_data, num_classes=config.num_classes)
                  if args.eval_data else D)
        ranking = concept_importance(g, f, D, config.edit_backend(),
                                     metric=args.metric, eval_data=eval_D,
                                     label_loss=config.label_loss)
        payload = {"ranking": [[j, s] for j, s in ranking]}
        text = json.dumps(payload, sort_keys=True)
        if args.out:
            Path(args.out).write_text(text + "\n", encoding="utf-8")
        print(text)
        return EXIT_OK
    record = run_importance_pipeline(config, args.top, args.bottom,
                                     metric=args.metric)
    out = _out_path(args, "reports.jsonl")
    append_record(out, record)
    print(json.dumps(record.summary, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cbedit",
        description="Closed-form editing of concept bottleneck models")
    parser.add_argument("--config", help="scenario config JSON file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--backend", choices=["exact", "ekfac"], default=None)
    parser.add_argument("--h-tilde", dest="h_tilde",
                        choices=["recompute", "householder", "ridge"],
                        default=None)
    parser.add_argument("--out", default=None, help="output path")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", help="write a synthetic train/test dataset")

    p = sub.add_parser("train", help="train both stages on a CSV dataset")
    p.add_argument("--data", required=True)

    p = sub.add_parser("edit", help="apply a closed-form edit to a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--request", required=True,
                   help="edit request JSON (inline or a file path)")

    p = sub.add_parser("retrain", help="retrain from scratch after an edit")
    p.add_argument("--data", required=True)
    p.add_argument("--request", required=True)

    p = sub.add_parser("compare", help="compare two checkpoints on a test set")
    p.add_argument("--ckpt-a", required=True)
    p.add_argument("--ckpt-b", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("bench", help="edit-vs-retrain pipeline over seeds")
    p.add_argument("--timings", action="store_true",
                   help="include wall times in the report "
                        "(breaks byte-identity across runs)")

    p = sub.add_parser("periodic", help="sequential editing rounds")
    p.add_argument("--rounds", type=int, default=10)
    p.add_argument("--increment", type=float, default=0.01)
    p.add_argument("--timings", action="store_true")

    p = sub.add_parser("rank-concepts", help="importance ranking / perturbation")
    p.add_argument("--data", default=None)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--eval-data", default=None)
    p.add_argument("--metric", choices=["param-norm", "f1-delta"],
                   default="param-norm")
    p.add_argument("--top", type=int, default=2)
    p.add_argument("--bottom", type=int, default=2)

    return parser


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "edit": cmd_edit,
    "retrain": cmd_retrain,
    "compare": cmd_compare,
    "bench": cmd_bench,
    "periodic": cmd_periodic,
    "rank-concepts": cmd_rank_concepts,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except CbeditError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
