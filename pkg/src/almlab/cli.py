"""Command-line entry point: ``almlab <command> [flags]``.

Every command that writes artifacts owns its ``--out`` directory for the
duration of the run and leaves a resolved config snapshot there. Failures
print one ``error: <Kind>: <message>`` line on stderr and exit with the
code carried by the exception class.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .ablation import ABLATION_BASE, format_delta_table, parse_grid, run_ablation
from .checkpoint import inspect
from .config import RunConfig, apply_overrides, from_dict, load_config, write_resolved
from .data import SynthSpec, load_manifest, synth_dataset, write_manifest
from .errors import AlmError, ConfigError, DataError
from .evaluation import format_accuracy_table
from .judge import (
    HttpJudgeClient,
    JudgeConfig,
    StubJudgeClient,
    length_policy,
    load_chat_items,
    load_responses,
    run_chat_eval,
)
from .runner import (
    CONFIG_NAME,
    REPORT_NAME,
    eval_samples,
    evaluate_mc,
    load_run,
    respond_all,
    run_dir,
    run_training,
    template_for,
    with_seed,
)

log = logging.getLogger("almlab")

MANIFEST_NAME = "manifest.jsonl"


class _Parser(argparse.ArgumentParser):
    """Usage errors raise instead of exiting so ``main`` owns the exit code."""

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser, config: bool = True, out: bool = True) -> None:
    if config:
        p.add_argument("--config", metavar="PATH", help="JSON run config (strict schema)")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="dotted config override, e.g. train.lr_max=1e-3; repeatable; wins over --config",
        )
    p.add_argument("--seed", type=int, default=None, help="seed for all randomness (default: config value, else 0)")
    if out:
        p.add_argument("--out", metavar="DIR", required=True, help="output directory for artifacts")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="almlab", description="Desk-scale audio-language model laboratory.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="write a seeded synthetic audio-QA manifest")
    p.add_argument("--spec", metavar="PATH", help="JSON synth spec (n_clips, proportions, formats, clip_seconds, voice_instruction)")
    _common(p, config=False)

    p = sub.add_parser("train", help="train one configuration; writes checkpoint.bin, losses.csv, loss_curve.png")
    _common(p)

    p = sub.add_parser("generate", help="generate responses for a manifest with a trained run")
    p.add_argument("--run", metavar="PATH", required=True, help="run directory or checkpoint file")
    p.add_argument("--manifest", metavar="PATH", required=True, help="JSONL manifest of prompts")
    _common(p, config=False)
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override the run's config, e.g. generation.temperature=0.1",
    )

    p = sub.add_parser("eval-mc", help="score multiple-choice accuracy per domain")
    p.add_argument("--run", metavar="PATH", required=True, help="run directory or checkpoint file")
    p.add_argument("--manifest", metavar="PATH", help="MC manifest (default: the run's eval set)")
    _common(p, config=False)
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override the run's config, e.g. generation.max_new_tokens=16",
    )

    p = sub.add_parser("eval-chat", help="judge open-ended responses against references")
    p.add_argument("--items", metavar="PATH", required=True, help="JSONL of {id, question, reference, category, meta}")
    p.add_argument("--responses", metavar="PATH", required=True, help="JSONL of {id, response}")
    p.add_argument("--judge", choices=("stub", "http"), default="stub", help="judge backend (default: stub, offline)")
    p.add_argument("--endpoint", default=JudgeConfig.endpoint, help="chat-completions URL for --judge http")
    p.add_argument("--model", default=JudgeConfig.model, help="judge model name for --judge http")
    p.add_argument("--cache-dir", metavar="DIR", help="on-disk judge response cache for --judge http")
    p.add_argument("--trials", type=int, default=3, help="independent judge trials; the median is reported (default: 3)")
    p.add_argument("--workers", type=int, default=4, help="concurrent judge requests (default: 4)")
    _common(p, config=False)

    p = sub.add_parser("ablate", help="run the one-factor ablation grid and emit a relative-delta table")
    p.add_argument(
        "--grid",
        action="append",
        default=[],
        metavar="KNOB=V1,V2",
        help="knobs: stack, layer_agg, layer_agg_position, freeze, stages; repeatable (default: full grid)",
    )
    _common(p)

    p = sub.add_parser("inspect-checkpoint", help="print a checkpoint's config and tensor table as JSON")
    p.add_argument("path", metavar="PATH", help="checkpoint file or run directory")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return parser


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config, args.overrides)
    return with_seed(cfg, args.seed if args.seed is not None else cfg.seed)


def _run_overrides(cfg: RunConfig, args) -> RunConfig:
    cfg = from_dict(apply_overrides(cfg.to_dict(), args.overrides)) if args.overrides else cfg
    return with_seed(cfg, args.seed) if args.seed is not None else cfg


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_synth(args) -> int:
    raw = {}
    if args.spec:
        try:
            raw = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise ConfigError(f"{args.spec}: no such spec file") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{args.spec}: invalid JSON: {e}") from e
    snapshot_seed = None
    if "spec" in raw:  # a synth config.json snapshot
        snapshot_seed = raw.get("_run", {}).get("seed")
        raw = raw["spec"]
    spec = SynthSpec.from_dict(raw)
    seed = args.seed if args.seed is not None else (snapshot_seed or 0)
    samples = synth_dataset(spec, seed=seed)
    with run_dir(args.out) as out:
        write_manifest(out / MANIFEST_NAME, samples)
        counts: dict[str, int] = {}
        for s in samples:
            counts[s.domain] = counts.get(s.domain, 0) + 1
        _write_json(out / CONFIG_NAME, {"spec": vars(spec), "_run": {"command": "synth", "seed": seed}})
        _write_json(out / REPORT_NAME, {"n_samples": len(samples), "per_domain": dict(sorted(counts.items()))})
    print(f"wrote {len(samples)} samples to {Path(args.out) / MANIFEST_NAME}")
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    report = run_training(cfg, args.out)
    print(f"steps={report['steps']} final_loss={report['final_loss']:.6f} trainable={report['trainable_params']} out={args.out}")
    return 0


def cmd_generate(args) -> int:
    cfg, bundle = load_run(args.run)
    cfg = _run_overrides(cfg, args)
    manifest = Path(args.manifest)
    samples = load_manifest(manifest)
    responses = respond_all(bundle, samples, cfg.generation, template_for(cfg), cfg.train.audio_max_seconds, manifest.parent)
    with run_dir(args.out) as out:
        write_resolved(cfg, out / CONFIG_NAME, {"command": "generate", "run": str(args.run), "manifest": str(manifest)})
        with open(out / "responses.jsonl", "w", encoding="utf-8") as f:
            for s, r in zip(samples, responses):
                f.write(json.dumps({"id": s.id, "response": r}, ensure_ascii=False) + "\n")
        _write_json(out / REPORT_NAME, {"n_responses": len(responses), "generation": vars(cfg.generation)})
    for s, r in zip(samples, responses):
        print(f"{s.id}\t{r!r}")
    return 0


def cmd_eval_mc(args) -> int:
    from .plotting import plot_accuracy

    cfg, bundle = load_run(args.run)
    cfg = _run_overrides(cfg, args)
    if args.manifest:
        manifest = Path(args.manifest)
        samples, base_dir = load_manifest(manifest), manifest.parent
    else:
        samples, base_dir = eval_samples(cfg), None
    records, acc = evaluate_mc(bundle, samples, cfg.generation, template_for(cfg), cfg.train.audio_max_seconds, base_dir)
    with run_dir(args.out) as out:
        write_resolved(cfg, out / CONFIG_NAME, {"command": "eval-mc", "run": str(args.run), "manifest": args.manifest})
        _write_json(out / REPORT_NAME, {"accuracy": acc, "records": [r.to_json() for r in records]})
        with open(out / "accuracy.csv", "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["domain", "n", "accuracy"])
            for d, v in acc["per_domain"].items():
                w.writerow([d, acc["counts"][d], f"{v:.4f}"])
            w.writerow(["micro", acc["n"], f"{acc['micro']:.4f}"])
            w.writerow(["macro", "", f"{acc['macro']:.4f}"])
        plot_accuracy(acc, out / "accuracy.png")
    print(format_accuracy_table(acc))
    return 0


def cmd_eval_chat(args) -> int:
    items = load_chat_items(args.items)
    responses = load_responses(args.responses)
    seed = args.seed if args.seed is not None else 0
    if args.judge == "http":
        client = HttpJudgeClient(JudgeConfig(endpoint=args.endpoint, model=args.model, cache_dir=args.cache_dir, seed=seed))
    else:
        client = StubJudgeClient(policy=length_policy)
    report = run_chat_eval(items, responses, client, trials=args.trials, max_workers=args.workers)
    with run_dir(args.out) as out:
        _write_json(
            out / CONFIG_NAME,
            {
                "items": str(args.items),
                "responses": str(args.responses),
                "judge": args.judge,
                "endpoint": args.endpoint if args.judge == "http" else None,
                "model": args.model if args.judge == "http" else None,
                "trials": args.trials,
                "_run": {"command": "eval-chat", "seed": seed},
            },
        )
        _write_json(out / REPORT_NAME, report.to_dict())
        with open(out / "scores.csv", "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["trial", "id", "score"])
            for t, scores in enumerate(report.scores):
                for item_id, score in scores.items():
                    w.writerow([t, item_id, f"{score:.4f}"])
    print(report.table())
    return 0


def cmd_ablate(args) -> int:
    base = dict(ABLATION_BASE)
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise ConfigError(f"{args.config}: no such config file") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{args.config}: invalid JSON: {e}") from e
    snapshot = base.pop("_run", {})
    base = apply_overrides(base, args.overrides)
    seed = args.seed if args.seed is not None else int(base.get("seed", 0))
    grid = parse_grid(args.grid) if args.grid else snapshot.get("grid") or parse_grid(None)
    rows = run_ablation(base, grid, args.out, seed=seed)
    print(format_delta_table(rows))
    return 0


def cmd_inspect(args) -> int:
    path = Path(args.path)
    if path.is_dir():
        path = path / "checkpoint.bin"
    if not path.exists():
        raise DataError(f"{path}: no such checkpoint")
    print(json.dumps(inspect(path), indent=2, sort_keys=True))
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "generate": cmd_generate,
    "eval-mc": cmd_eval_mc,
    "eval-chat": cmd_eval_chat,
    "ablate": cmd_ablate,
    "inspect-checkpoint": cmd_inspect,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise ConfigError("almlab: a command is required (see --help)")
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(asctime)s %(name)s %(levelname)s %(message)s",
        )
        return COMMANDS[args.command](args)
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    except AlmError as e:
        print(f"error: {type(e).__name__}: {_one_line(e)}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: DataError: {_one_line(e)}", file=sys.stderr)
        return DataError.exit_code


def _one_line(e: Exception) -> str:
    return " ".join(str(e).split())


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
