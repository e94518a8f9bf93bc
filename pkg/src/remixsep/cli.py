"""``remixsep`` command line entry point.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import config as config_io
from .datagen import read_corpus, write_corpus
from .separator import SeparatorConfig, build_model, load_checkpoint
from .training import PreparedSplit, evaluate_split, run_training

log = logging.getLogger("remixsep")

CONFIG_SNAPSHOT = "config.txt"


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; we reserve 2 for runtime failures
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _load_config(path: Optional[str]) -> config_io.ExperimentConfig:
    return config_io.load(path) if path else config_io.ExperimentConfig()


def _split_dir(data: Path, split: str) -> Path:
    if (data / "manifest.jsonl").exists():
        return data
    return data / split


def cmd_synth_data(args) -> int:
    cfg = _load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split in config_io.SPLITS:
        spec = cfg.data.split_spec(split)
        if spec.num_examples:
            write_corpus(spec, out / split)
            log.info("wrote %d %s examples to %s", spec.num_examples, split, out / split)
    config_io.save(cfg, out / CONFIG_SNAPSHOT)
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.log_plans:
        overrides["log_plans"] = True
    out = Path(args.out)
    cfg = cfg.with_overrides(train=overrides, output_dir=str(out))
    cfg.validate()
    data = Path(args.data)
    train = read_corpus(data / "train")
    val = read_corpus(data / "val")
    out.mkdir(parents=True, exist_ok=True)
    config_io.save(cfg, out / CONFIG_SNAPSHOT)
    report = run_training(
        cfg.train,
        cfg.model,
        train,
        val,
        out_dir=out,
        on_epoch=lambda r: log.info("epoch %d val %.2f dB", r["epoch"], r["val_score"]),
    )
    summary = {
        "method": report.method,
        "final_val_score": report.final_score,
        "best_scores": report.best_scores,
        "skipped_items": report.skipped_items,
        "checkpoint": str(out / "ckpt" / "best_avg.bin"),
    }
    (out / "train_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_evaluate(args) -> int:
    params, meta = load_checkpoint(args.ckpt)
    if "separator" not in meta:
        raise ValueError(f"{args.ckpt}: checkpoint carries no separator config")
    model_cfg = SeparatorConfig(**meta["separator"])
    model = params.load_into(build_model(model_cfg, params.data.dtype))
    split = PreparedSplit.from_corpus(read_corpus(_split_dir(Path(args.data), args.split)), params.data.dtype)
    records, agg = evaluate_split(model, split, args.batch_size)
    report = {
        "checkpoint": str(args.ckpt),
        "method": meta.get("method"),
        "label": args.label or meta.get("method") or Path(args.ckpt).stem,
        "split": args.split,
        "aggregate": agg.to_dict(),
        "records": [
            {
                "example_id": r.example_id,
                "k_active": r.k_active,
                "per_source_sisdr": r.per_source_sisdr,
                "mixture_sisdr": r.mixture_sisdr,
                "sisdri": r.sisdri,
                "matched": r.matched,
            }
            for r in records
        ],
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps({"label": report["label"], **agg.to_dict()}, sort_keys=True))
    return 0


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return "-"
    return f"{v:.1f}"


def render_report(reports: Sequence[dict]) -> str:
    """Markdown tables: two-source SISDRi, and the 1S/kSi/MSi/TRF breakdown."""
    lines = ["| Method | SISDRi [dB] |", "|---|---|"]
    for r in reports:
        lines.append(f"| {r['label']} | {_fmt(r['aggregate']['m_si'])} |")
    ks = sorted({int(k) for r in reports for k in r["aggregate"]["k_si"]} | {2, 3, 4})
    head = ["Method", "1S"] + [f"{k}Si" for k in ks] + ["MSi", "TRF"]
    lines += ["", "| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for r in reports:
        a = r["aggregate"]
        row = [r["label"], _fmt(a["one_s"])] + [_fmt(a["k_si"].get(str(k))) for k in ks] + [_fmt(a["m_si"]), _fmt(a["trf"])]
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    reports = [json.loads(Path(p).read_text()) for p in args.reports]
    text = render_report(reports)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_all

    return 0 if run_all() else 2


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="remixsep", description="Remixing-based unsupervised source separation experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-data", help="synthesize train/val/test corpora")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("train", help="train a separator")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--log-plans", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="score a checkpoint on a corpus split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="test", choices=config_io.SPLITS)
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--label")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", help="render evaluation reports as Markdown tables")
    s.add_argument("reports", nargs="+")
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("selftest", help="run quick invariant checks")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return 0 if not e.code else 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"remixsep: error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        log.exception("runtime failure")
        print(f"remixsep: runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
