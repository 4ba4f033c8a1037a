"""Command-line entry point: ``conftr train|evaluate|sweep|report``.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure
during training.  ``CONFTR_WORKERS`` sets the number of worker processes
used for independent training trials (default 1).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import html
import itertools
import json
import logging
import math
import multiprocessing
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import evaluation, models, training
from .config import ConfigError, RunConfig
from .errors import ConfTrError, ContractError, FormatError, NumericalError, StepError

log = logging.getLogger("conftr")

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 2, 3

# Dataset shared with forked training workers; set before the pool starts.
_SHARED: dict = {}


def _workers() -> int:
    raw = os.environ.get("CONFTR_WORKERS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"CONFTR_WORKERS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("CONFTR_WORKERS must be at least 1")
    return n


def _trial_seed(base: int, trial: int) -> int:
    return int(np.random.SeedSequence([base, 5, trial]).generate_state(1)[0])


def _train_trial(trial: int):
    cfg: RunConfig = _SHARED["cfg"]
    x, y = _SHARED["train"]
    spec = _SHARED["spec"]
    out = Path(cfg.output_dir)
    n_trials = cfg.eval.n_train_trials
    if n_trials > 1:
        x, y = evaluation.resample_training_set(x, y, trial, cfg.train.seed)
    train_cfg = cfg.train_config(seed=_trial_seed(cfg.train.seed, trial) if n_trials > 1 else cfg.train.seed)
    log_path = out / "logs" / f"trial_{trial:02d}.jsonl"
    log_path.unlink(missing_ok=True)
    params, history = training.train(x, y, spec, train_cfg, log_path=log_path)
    ckpt = out / "checkpoints" / f"trial_{trial:02d}.json"
    models.save_checkpoint(params, ckpt)
    return str(ckpt), history[-1] if history else {}


def run_train(cfg: RunConfig, dataset) -> list[Path]:
    out = Path(cfg.output_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "logs").mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.model_dump_json(indent=2))
    _SHARED.update(cfg=cfg, train=dataset.train(), spec=cfg.model_spec(dataset))
    trials = range(cfg.eval.n_train_trials)
    workers = min(_workers(), len(trials))
    try:
        if workers > 1 and "fork" in multiprocessing.get_all_start_methods():
            ctx = multiprocessing.get_context("fork")
            with ProcessPoolExecutor(workers, mp_context=ctx) as pool:
                results = list(pool.map(_train_trial, trials))
        else:
            results = [_train_trial(t) for t in trials]
    finally:
        _SHARED.clear()
    for path, last in results:
        log.info("wrote %s %s", path, json.dumps(last))
    return [Path(p) for p, _ in results]


def _find_checkpoints(cfg: RunConfig, explicit) -> list[Path]:
    if explicit:
        paths = [Path(p) for p in explicit]
    else:
        paths = sorted((Path(cfg.output_dir) / "checkpoints").glob("trial_*.json"))
        if not paths:
            raise ConfigError(f"no checkpoints under {Path(cfg.output_dir) / 'checkpoints'}")
    missing = [str(p) for p in paths if not p.is_file()]
    if missing:
        raise ConfigError(f"missing checkpoint files: {', '.join(missing)}")
    return paths


def run_evaluate(cfg: RunConfig, dataset, checkpoint_paths, label: str = "") -> evaluation.TrialReport:
    expected = cfg.model_spec(dataset)
    checkpoints = []
    for path in checkpoint_paths:
        params = models.load_checkpoint(path)
        if params.spec != expected:
            raise ConfigError(f"{path}: checkpoint model {params.spec} does not match config model {expected}")
        checkpoints.append(params)
    protocol = cfg.eval_protocol()
    if len(checkpoints) not in (1, protocol.n_train_trials):
        raise ConfigError(f"found {len(checkpoints)} checkpoints for {protocol.n_train_trials} training trials")
    if len(checkpoints) == 1 and protocol.n_train_trials != 1:
        protocol = dataclasses.replace(protocol, n_train_trials=1)
    pool_x, pool_y = dataset.pool()
    report = evaluation.run_trials(checkpoints, pool_x, pool_y, dataset.n_cal, protocol, label=label)
    report.write(cfg.output_dir, "report")
    return report


# ---------------------------------------------------------------------------
# Sweep
# ---------------------------------------------------------------------------


def parse_grid(items: list[str]) -> dict[str, list]:
    """``key=v1,v2`` axes; each value is parsed as JSON when possible."""
    grid: dict[str, list] = {}
    for item in items:
        key, sep, values = item.partition("=")
        if not sep or not key or not values:
            raise ConfigError(f"grid axis {item!r} must look like section.key=v1,v2")
        if key.split(".")[0] not in RunConfig.model_fields:
            raise ConfigError(f"grid axis {key!r} does not name a config key")
        parsed = []
        for raw in values.split(","):
            try:
                parsed.append(json.loads(raw))
            except json.JSONDecodeError:
                parsed.append(raw)
        grid[key] = parsed
    if not grid:
        raise ConfigError("sweep needs at least one --grid axis")
    return grid


SWEEP_DEFAULTS = {"eval.n_train_trials": 1, "eval.n_test_trials": 3}


def run_sweep(base_doc: dict, grid: dict[str, list], out_dir: Path, summary_kind: str | None = None) -> list[dict]:
    keys = list(grid)
    points = list(itertools.product(*(grid[k] for k in keys)))
    # validate every point before any compute
    configs = []
    for i, values in enumerate(points):
        doc = base_doc
        for key, value in SWEEP_DEFAULTS.items():
            if key not in grid:
                doc = config_mod.set_dotted(doc, key, value)
        for key, value in zip(keys, values):
            doc = config_mod.set_dotted(doc, key, value)
        doc = config_mod.set_dotted(doc, "output_dir", str(out_dir / f"point_{i:03d}"))
        configs.append(config_mod.build(doc))

    rows = []
    datasets: dict[str, object] = {}
    for i, (values, cfg) in enumerate(zip(points, configs)):
        key = cfg.dataset.model_dump_json()
        if key not in datasets:
            datasets[key] = config_mod.load_dataset(cfg.dataset)
        dataset = datasets[key]
        ckpts = run_train(cfg, dataset)
        report = run_evaluate(cfg, dataset, ckpts, label=f"point_{i:03d}")
        kind = summary_kind or str(cfg.eval.kinds[0])
        ineff = report.kinds[kind].summary("inefficiency")
        cov = report.kinds[kind].summary("coverage")
        rows.append({
            "point": f"point_{i:03d}",
            **{k: json.dumps(v) for k, v in zip(keys, values)},
            "kind": kind,
            "inefficiency_mean": ineff["mean"],
            "inefficiency_std": ineff["std"],
            "coverage_mean": cov["mean"],
        })
    rows.sort(key=lambda r: (r["inefficiency_mean"], r["point"]))
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return rows


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


def _fmt(summary: dict) -> str:
    mean, std = summary.get("mean"), summary.get("std")
    if mean is None:
        return "n/a"
    return f"{mean:.4f} ± {std:.4f}"


def format_table(docs: list[tuple[str, dict]], kinds) -> str:
    """One row per (report, kind) with mean ± std of each base metric."""
    headers = ["report", "kind", "coverage", "inefficiency", "accuracy"]
    rows = []
    for name, doc in docs:
        for kind in kinds:
            if kind not in doc["kinds"]:
                raise FormatError(f"{name}: no results for {kind}")
            metrics = doc["kinds"][kind]["metrics"]
            rows.append([name, kind] + [_fmt(metrics.get(m, {})) for m in headers[2:]])
    widths = [max(len(str(r[i])) for r in [headers] + rows) for i in range(len(headers))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(str(c).ljust(w) for c, w in zip(r, widths)) for r in rows]
    return "\n".join(lines)


def bar_chart_svg(values: list, title: str, width: int = 640, height: int = 320) -> str:
    """Per-class bars; ``None``/NaN entries are left as gaps with an 'n/a' mark."""
    k = len(values)
    finite = [v for v in values if v is not None and math.isfinite(v)]
    top = max(finite) if finite else 1.0
    top = top if top > 0 else 1.0
    margin, base = 40, height - 30
    slot = (width - 2 * margin) / max(k, 1)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<text x="{width / 2}" y="18" text-anchor="middle" font-size="14">{html.escape(title)}</text>',
        f'<line x1="{margin}" y1="{base}" x2="{width - margin}" y2="{base}" stroke="black"/>',
    ]
    for i, v in enumerate(values):
        x = margin + i * slot
        cx = x + slot / 2
        parts.append(f'<text x="{cx:.1f}" y="{base + 16}" text-anchor="middle" font-size="11">{i}</text>')
        if v is None or not math.isfinite(v):
            parts.append(f'<text class="gap" x="{cx:.1f}" y="{base - 4}" text-anchor="middle" font-size="9">n/a</text>')
            continue
        h = (base - 30) * v / top
        parts.append(
            f'<rect class="bar" x="{x + slot * 0.15:.1f}" y="{base - h:.1f}" width="{slot * 0.7:.1f}" '
            f'height="{h:.1f}" fill="steelblue"><title>class {i}: {v:.4f}</title></rect>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def run_report(paths: list[str], kind: str, out_dir: Path | None) -> str:
    docs = [(Path(p).stem if Path(p).stem != "report" else Path(p).parent.name or "report",
             evaluation.load_report(p)) for p in paths]
    table = format_table(docs, [kind])
    for (name, doc), path in zip(docs, paths):
        target = out_dir if out_dir is not None else Path(path).parent
        target.mkdir(parents=True, exist_ok=True)
        svg = bar_chart_svg(doc["kinds"][kind]["class_ineff"], f"{name}: per-class inefficiency ({kind})")
        (target / f"{name}_class_ineff_{kind}.svg").write_text(svg)
    return table


# ---------------------------------------------------------------------------
# Argument handling
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conftr", description="Conformal training experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required, help="JSON run configuration")
        p.add_argument("--preset", help="named preset used as defaults under the config file")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, help="overrides train.seed and eval.seed")

    common(sub.add_parser("train", help="train n_train_trials models and write checkpoints"))
    ev = sub.add_parser("evaluate", help="evaluate checkpoints and write JSON/CSV reports")
    common(ev)
    ev.add_argument("--checkpoints", nargs="+", help="checkpoint files (default: <out>/checkpoints)")
    sw = sub.add_parser("sweep", help="grid search over config keys")
    common(sw)
    sw.add_argument("--grid", action="append", default=[], help="axis as section.key=v1,v2 (repeatable)")
    sw.add_argument("--summary-kind", help="predictor kind ranked in the summary")
    rp = sub.add_parser("report", help="print a table and write per-class SVG charts")
    rp.add_argument("reports", nargs="+", help="report JSON files")
    rp.add_argument("--kind", default="THR_prob")
    rp.add_argument("--out", help="directory for SVG charts (default: next to each report)")
    return parser


def _load(args) -> tuple[RunConfig, dict]:
    if args.config is None and args.preset is None:
        raise ConfigError("need --config and/or --preset")
    overrides = {}
    if args.out is not None:
        overrides["output_dir"] = args.out
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        overrides["train.seed"] = args.seed
        overrides["eval.seed"] = args.seed
    cfg = config_mod.load_config(args.config, args.preset, overrides)
    return cfg, json.loads(cfg.model_dump_json())


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            print(run_report(args.reports, args.kind, Path(args.out) if args.out else None))
            return EXIT_OK
        cfg, doc = _load(args)
        if args.command == "sweep":
            grid = parse_grid(args.grid)
            rows = run_sweep(doc, grid, Path(cfg.output_dir), args.summary_kind)
            print(f"{len(rows)} points; best {rows[0]['point']} "
                  f"inefficiency {rows[0]['inefficiency_mean']:.4f} -> {Path(cfg.output_dir) / 'summary.csv'}")
            return EXIT_OK
        dataset = config_mod.load_dataset(cfg.dataset)
        if args.command == "train":
            paths = run_train(cfg, dataset)
            print(f"wrote {len(paths)} checkpoint(s) under {Path(cfg.output_dir) / 'checkpoints'}")
        else:
            report = run_evaluate(cfg, dataset, _find_checkpoints(cfg, args.checkpoints))
            print(format_table([("report", report.to_dict())], list(report.kinds)))
            print(f"wrote {Path(cfg.output_dir) / 'report.json'} and report.csv")
        return EXIT_OK
    except (NumericalError, StepError) as exc:
        print(f"conftr: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, FormatError, ContractError, OSError) as exc:
        print(f"conftr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfTrError as exc:
        print(f"conftr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
