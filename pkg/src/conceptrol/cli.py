"""Batch front end: ``generate``, ``scan`` and ``transfer`` subcommands.

Exit status: 0 on success, 1 when a command's gate fails, 2 on a bad
configuration or an I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .analysis import OracleMask, scan_blocks, transfer_experiment
from .config import ConfigError, RunConfig, load_config
from .formats import dump_trace, export_attention, write_csv, write_pgm, write_ppm
from .toy import build_instance, generate, render_rgb

log = logging.getLogger("conceptrol")

EXIT_OK = 0
EXIT_GATE = 1
EXIT_ERROR = 2
OUT_ENV = "CONCEPTROL_OUT"
DEFAULT_OUT = "conceptrol-out"


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out: Path, name: str, command: str, cfg: RunConfig, files) -> Path:
    outputs = {p.relative_to(out).as_posix(): sha256_file(p) for p in files}
    doc = {"command": command, "config": cfg.echo(), "outputs": dict(sorted(outputs.items()))}
    path = out / name
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _runs(cfg: RunConfig):
    schedule = cfg.make_schedule()
    for seed in cfg.seeds:
        d, cond = build_instance(cfg.engine, cfg.mode, seed)
        yield seed, d, cond, schedule


def cmd_generate(cfg: RunConfig, out: Path) -> int:
    written: list[Path] = []
    for seed, d, cond, schedule in _runs(cfg):
        for variant in cfg.variants:
            run_id = f"seed{seed}_{variant}"
            x, trace = generate(cond, cfg.conceptrol, d, schedule, seed, variant=variant)
            if cfg.emit["images"]:
                written.append(write_ppm(out / f"{run_id}.ppm", render_rgb(x)))
                written.append(write_pgm(out / f"{run_id}_mask.pgm", trace.masks[-1].values, d.height, d.width))
            if cfg.emit["traces"]:
                run_dir = out / "trace" / run_id
                written.extend(dump_trace(trace, run_dir))
                if cfg.emit.get("head_maps"):
                    for t, per_block in zip(trace.timesteps, trace.text_maps):
                        for l, maps in enumerate(per_block):
                            written.extend(export_attention(run_dir, t, l, maps))
            log.info("generated %s", run_id)
    write_manifest(out, "manifest.json", "generate", cfg, written)
    return EXIT_OK


def cmd_scan(cfg: RunConfig, out: Path) -> int:
    oracle = OracleMask(cfg.engine.region_mask())
    written: list[Path] = []
    means = []
    for seed, d, cond, schedule in _runs(cfg):
        _, trace = generate(cond, cfg.conceptrol, d, schedule, seed, variant="text_only")
        report = scan_blocks(trace, cond.concept_span, oracle)
        means.append(report.mean_auc)
        log.info("seed %s: best block %s", seed, report.best_block)
        if cfg.emit["csv"]:
            written.append(write_csv(out / f"scan_seed{seed}.csv", ["block", "timestep", "auc"], report.rows()))
    mean_auc = np.mean(means, axis=0)
    ranking = sorted(range(mean_auc.size), key=lambda l: (-mean_auc[l], l))
    rows = [(l, float(mean_auc[l]), ranking.index(l) + 1) for l in range(mean_auc.size)]
    if cfg.emit["csv"]:
        written.append(write_csv(out / "scan_summary.csv", ["block", "mean_auc", "rank"], rows))
        write_manifest(out, "scan_manifest.json", "scan", cfg, written)
    planted = cfg.engine.planted_block
    first = ranking[0] == planted
    print(f"planted block {planted}: rank {ranking.index(planted) + 1}, mean auc {mean_auc[planted]:.6f}")
    return EXIT_OK if first else EXIT_GATE


def cmd_transfer(cfg: RunConfig, out: Path) -> int:
    rows, scores = [], []
    for seed, d, cond, schedule in _runs(cfg):
        result = transfer_experiment(cond, cfg.conceptrol, d, schedule, seed)
        if result.degenerate:
            log.warning("seed %s excluded from the mean: %s", seed, result.reason)
            rows.append((seed, "", "degenerate"))
        else:
            scores.append(result.auc)
            rows.append((seed, float(result.auc), "ok"))
    mean = float(np.mean(scores)) if scores else float("nan")
    passed = bool(scores) and mean >= cfg.transfer_threshold
    if cfg.emit["csv"]:
        written = [
            write_csv(out / "transfer.csv", ["seed", "auc_transfer", "status"], rows),
            write_csv(
                out / "transfer_summary.csv",
                ["mean_auc_transfer", "seeds_used", "threshold", "passed"],
                [(mean, len(scores), cfg.transfer_threshold, int(passed))],
            ),
        ]
        write_manifest(out, "transfer_manifest.json", "transfer", cfg, written)
    print(f"mean auc_transfer {mean:.6f} over {len(scores)} seed(s), threshold {cfg.transfer_threshold}")
    return EXIT_OK if passed else EXIT_GATE


COMMANDS = {"generate": cmd_generate, "scan": cmd_scan, "transfer": cmd_transfer}


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError("--seeds", f"expected comma-separated integers, got {text!r}") from None
    if not seeds:
        raise ConfigError("--seeds", "no seeds given")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conceptrol", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted override, value parsed as JSON (repeatable)")
        p.add_argument("--out", help=f"output directory (fallbacks: config output_dir, then ${OUT_ENV})")
        p.add_argument("--seeds", help="comma-separated seeds, replaces the configured list")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_out(args, cfg: RunConfig) -> Path:
    return Path(args.out or cfg.output_dir or os.environ.get(OUT_ENV) or DEFAULT_OUT)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        overrides = list(args.set)
        if args.seeds is not None:
            overrides.append("seeds=" + json.dumps(_parse_seeds(args.seeds)))
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    out = resolve_out(args, cfg)
    try:
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, out)
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
