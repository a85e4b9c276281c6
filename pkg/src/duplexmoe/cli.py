"""Command-line entry point wiring data generation, training, evaluation,
invariant checking, model comparison, and trace inspection.

Exit codes: 0 success, 1 invariant failure, 2 usage/config error,
3 threshold failure under --assert-thresholds.
"""

from __future__ import annotations

import argparse
import os
import sys

from .blockcodec.vocab import default_layout
from .duplex_sim.scripts import TaskKind

SUITES = {
    "duplex": ["qa", "manip", "barge_in", "silence_control", "defective"],
    "concurrency": ["manip", "qa", "speak_while_act"],
    "compare": ["qa", "manip", "speak_while_act", "context_vqa"],
    "all": [t.value for t in TaskKind],
}

# acceptance thresholds for --assert-thresholds (toy-scale targets)
THRESHOLDS = {
    ("qa", "dialogue_turn"): 0.95,
    ("manip", "action_turn"): 0.95,
    ("barge_in", "barge_in"): 0.90,
    ("silence_control", "success"): 0.95,
    ("defective", "rejected"): 0.90,
    ("defective", "success"): 0.80,
}


def _parse_seeds(spec: str) -> list[int]:
    if ".." in spec:
        lo, hi = spec.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in spec.split(",") if s.strip()]


def _parse_mix(spec: str) -> dict[str, float]:
    mix: dict[str, float] = {}
    for part in spec.split(","):
        if not part.strip():
            continue
        if "=" not in part:
            raise ValueError(f"task mix entry {part!r} is not name=weight")
        name, weight = part.split("=", 1)
        mix[name.strip()] = float(weight)
    return mix


def _suite_tasks(name: str) -> list[str]:
    if name in SUITES:
        return SUITES[name]
    TaskKind(name)  # raises ValueError on unknown task
    return [name]


def cmd_gen_data(args) -> int:
    from .duplex_sim.dataset import gen_dataset, write_dataset

    layout = default_layout()
    try:
        mix = _parse_mix(args.task_mix)
        examples, manifest = gen_dataset(mix, args.n, args.seed, layout)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    paths = write_dataset(examples, manifest, args.out)
    for task in sorted(manifest["counts"]):
        print(f"{task}: {manifest['counts'][task]}")
    print(f"wrote {paths['dataset']} and {paths['manifest']}")
    return 0


def cmd_train(args) -> int:
    from .trainer.config import ConfigError, parse_config
    from .trainer.loop import train

    try:
        config = parse_config(args.config)
        result = train(config, args.out, resume=args.resume or None)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"finished {config.steps} steps; final loss {result.final_loss:.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _load_model(path: str):
    from .trainer.builders import load_model

    model, _ = load_model(path)
    return model


def _write_report(report, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.csv"), "w") as fh:
        fh.write(report.to_csv())
    with open(os.path.join(out_dir, "report.txt"), "w") as fh:
        fh.write(report.to_text())


def _threshold_failures(report) -> list[str]:
    failures = []
    by_task = {row["task"]: row for row in report.rows}
    for (task, column), floor in sorted(THRESHOLDS.items()):
        row = by_task.get(task)
        if row is None:
            continue
        value = row.get(column)
        if value is None or value < floor:
            shown = "absent" if value is None else f"{value:.3f}"
            failures.append(f"{task}.{column}: {shown} < required {floor:.2f}")
    return failures


def cmd_eval(args) -> int:
    from .evalharness.metrics import evaluate_suite

    try:
        model = _load_model(args.model)
        tasks = _suite_tasks(args.suite)
        seeds = _parse_seeds(args.seeds)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    report = evaluate_suite(model, tasks, seeds, model_name=args.model,
                            cap=args.cap, temperature=args.temperature)
    print(report.to_text(), end="")
    if args.report:
        _write_report(report, args.report)
    if args.assert_thresholds:
        failures = _threshold_failures(report)
        if failures:
            print("threshold failures:")
            for line in failures:
                print(f"  - {line}")
            return 3
        print("all thresholds met")
    return 0


def cmd_compare(args) -> int:
    from .evalharness.metrics import compare_models

    try:
        models = {path: _load_model(path)
                  for path in args.models.split(",") if path}
        tasks = _suite_tasks(args.suite)
        seeds = _parse_seeds(args.seeds)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    report = compare_models(models, tasks, seeds, cap=args.cap,
                            temperature=args.temperature)
    print(report.to_text(), end="")
    if args.report:
        _write_report(report, args.report)
    return 0


def cmd_check(args) -> int:
    from .checks import run_checks

    results = run_checks(args.level)
    failed = 0
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        failed += 0 if ok else 1
    if failed:
        print(f"{failed} invariant(s) failed")
        return 1
    print(f"all {len(results)} invariants hold")
    return 0


def cmd_inspect(args) -> int:
    from .duplex_sim.trace import EpisodeTrace
    from .samoe.routing import ExpertId, ModalityTag, route

    layout = default_layout()
    try:
        trace = EpisodeTrace.load(args.trace)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if not 0 <= args.tick < len(trace.records):
        print(f"error: tick {args.tick} out of range; trace has "
              f"{len(trace.records)} ticks", file=sys.stderr)
        return 2
    rec = trace.records[args.tick]
    print(f"task={trace.header['task']} seed={trace.header['seed']} "
          f"tick={rec.tick} state={rec.state_hash}")

    def seg(label: str, tag: ModalityTag, ids):
        expert = ExpertId(route(tag)).name
        names = " ".join(layout.name(t) for t in ids)
        print(f"  {label:7s} -> {expert:14s} [{names}]")

    seg("speech", ModalityTag.SPEECH_IN, rec.speech)
    seg("image", ModalityTag.IMAGE_IN, rec.image)
    seg("text", ModalityTag.TEXT_OUT, rec.text)
    seg("action", ModalityTag.ACTION_OUT, rec.action)
    for event in rec.events:
        print(f"  event: {event.kind.value}")
    for note in rec.notes:
        print(f"  note: {note}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="duplexmoe",
        description="Streaming full-duplex multimodal sequence engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a teacher-forced dataset")
    p.add_argument("--task-mix", required=True,
                   help="comma list like echo=1,qa=1,manip=2")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", default="")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a suite")
    p.add_argument("--model", required=True)
    p.add_argument("--suite", default="duplex",
                   help=f"one of {sorted(SUITES)} or a single task name")
    p.add_argument("--seeds", default="0..99")
    p.add_argument("--report", default="")
    p.add_argument("--cap", type=int, default=60)
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--jobs", type=int, default=1,
                   help="reserved for parallel rollouts; 1 keeps strict "
                        "determinism")
    p.add_argument("--assert-thresholds", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("compare", help="same seeds across several models")
    p.add_argument("--models", required=True, help="comma list of checkpoints")
    p.add_argument("--suite", default="compare")
    p.add_argument("--seeds", default="0..49")
    p.add_argument("--report", default="")
    p.add_argument("--cap", type=int, default=60)
    p.add_argument("--temperature", type=float, default=0.0)
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("check", help="run the invariant suites")
    p.add_argument("--level", choices=["fast", "full"], default="fast")
    p.set_defaults(fn=cmd_check)

    p = sub.add_parser("inspect", help="pretty-print one tick of a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--tick", type=int, required=True)
    p.set_defaults(fn=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
