"""Command-line entry point: ``conceptloop {gen,train,eval,sweep}``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical
failure (a NaN or Inf reached a loss, gradient or metric).
"""

from __future__ import annotations

import argparse
import csv
import json
import re
import sys
from dataclasses import asdict, fields, replace
from importlib import resources
from pathlib import Path
from typing import Sequence

import jsonschema
import numpy as np

from . import concept as cc
from . import config as cfgmod
from . import metrics as mt
from . import policy as pl
from . import synthbench as sb
from . import training as tr
from .config import ConfigError, RunConfig

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
SCHEMA_VERSION = 1
SWEEP_DEFAULTS = {"L2": "1,2,4,8", "k": "1,2", "rewards": "w/o box & meta,w/o mask,all"}
ROW_COLUMNS = ["mode", "family", "n", *mt.METRIC_COLUMNS, "routing_rate", "target_acc"]


class Trace:
    """JSON-lines log; ``write`` returns the 1-based line number."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = self.path.open("w")
        self.lines = 0

    def write(self, record: dict) -> int:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()
        self.lines += 1
        return self.lines

    def close(self) -> None:
        self._fh.close()


class TracedFailure(tr.NumericalFailure):
    pass


def load_schema() -> dict:
    text = resources.files("conceptloop").joinpath("data/report_schema.json").read_text()
    return json.loads(text)


def validate_report(report: dict) -> None:
    jsonschema.validate(report, load_schema())


def _train_views(cfg: RunConfig) -> list[pl.EncodedEpisode]:
    eps = sb.gen_dataset(cfg.n_train, cfg.seed, cfg.k, cfg.family_list())
    return [pl.encode_episode(e) for e in eps]


def _eval_views(cfg: RunConfig) -> list[pl.EncodedEpisode]:
    eps = sb.gen_dataset(cfg.n_eval, cfg.seed, cfg.k, cfg.family_list(), offset=cfg.eval_offset)
    return [pl.encode_episode(e) for e in eps]


def _traced(trace: Trace | None, fn, *args, **kwargs):
    """Run a training call; on NaN, append a failure line and point at it."""
    try:
        return fn(*args, **kwargs)
    except tr.NumericalFailure as e:
        if trace is None:
            raise
        line = trace.write({"event": "numerical_failure", "message": str(e)})
        raise TracedFailure(f"{e} (trace {trace.path}:{line})") from None


# ---- commands ---------------------------------------------------------------


def cmd_gen(cfg: RunConfig) -> Path:
    eps = sb.gen_dataset(cfg.n_train, cfg.seed, cfg.k, cfg.family_list())
    sb.write_dataset(eps, Path(cfg.dataset), meta={"seed": cfg.seed, "k": cfg.k})
    return Path(cfg.dataset)


def check_compatible(store: dict[str, np.ndarray], cfg: RunConfig) -> None:
    expected = tr.init_model(cfg.train_settings())
    for name, arr in expected.items():
        if name not in store:
            raise ConfigError(f"checkpoint lacks tensor {name}")
        if store[name].shape != arr.shape:
            raise ConfigError(f"checkpoint tensor {name} has shape {store[name].shape}; "
                              f"the config expects {arr.shape}")


def _header(cfg: RunConfig, stage: int) -> dict:
    return {"stage": stage, "config": asdict(cfg)}


def run_stage1(cfg: RunConfig, views, trace: Trace | None = None) -> dict[str, np.ndarray]:
    s = cfg.train_settings()
    store = tr.init_model(s)
    log = trace.write if trace else None
    losses = _traced(trace, tr.train_stage1, store, views, s, log)
    if trace:
        trace.write({"event": "summary", "stage": 1, "steps": len(losses),
                     "first_loss": losses[0] if losses else None,
                     "final_loss": losses[-1] if losses else None})
    return store


def run_stage2(cfg: RunConfig, store: dict[str, np.ndarray], views,
               trace: Trace | None = None) -> dict[str, np.ndarray]:
    s = cfg.train_settings()
    recent: list[dict] = []

    def log(d):
        recent.append(d)
        del recent[:-100]
        if trace:
            trace.write(d)

    _traced(trace, tr.train_stage2, store, views, s, log)
    if trace:
        keys = ("r_format", "r_mask", "r_meta", "r_uni", "kl", "seg_loss", "policy_loss")
        summary = {k: float(np.mean([d[k] for d in recent])) if recent else None for k in keys}
        trace.write({"event": "summary", "stage": 2, "steps": s.stage2_steps,
                     "window": len(recent), "rewards": s.rewards, **summary})
    return store


def cmd_train(cfg: RunConfig, stage: int) -> Path:
    if stage not in (1, 2):
        raise ConfigError(f"stage must be 1 or 2; got {stage}")
    views = [pl.encode_episode(e) for e in _load_dataset(cfg.dataset)]
    if stage == 1:
        trace = Trace(cfg.trace)
        try:
            store = run_stage1(cfg, views, trace)
        finally:
            trace.close()
        out = Path(cfg.stage1_checkpoint)
        out.parent.mkdir(parents=True, exist_ok=True)
        cc.save_checkpoint(out, store, _header(cfg, 1))
        return out
    src = Path(cfg.stage1_checkpoint)
    if not src.is_file():
        raise FileNotFoundError(f"stage 2 requires a stage-1 checkpoint; none at {src}")
    store, header = cc.load_checkpoint(src)
    if header.get("stage") != 1:
        raise ConfigError(f"{src} holds a stage-{header.get('stage')} checkpoint, not stage 1")
    check_compatible(store, cfg)
    trace = Trace(cfg.trace)
    try:
        run_stage2(cfg, store, views, trace)
    finally:
        trace.close()
    out = Path(cfg.checkpoint)
    out.parent.mkdir(parents=True, exist_ok=True)
    cc.save_checkpoint(out, store, _header(cfg, 2))
    return out


def _load_dataset(path: str | Path) -> list[sb.Episode]:
    path = Path(path)
    if not (path / "manifest.json").is_file():
        raise FileNotFoundError(f"no dataset manifest at {path}; run 'conceptloop gen' first")
    return sb.load_dataset(path)


def evaluate_store(cfg: RunConfig, store: dict[str, np.ndarray],
                   views: Sequence[pl.EncodedEpisode] | None = None) -> tuple[list[dict], list]:
    views = _eval_views(cfg) if views is None else views
    records = tr.evaluate(views, store, cfg.theta, cfg.eval_trajectory, cfg.workers)
    for r in records:
        for m in (r.direct, r.reason, r.adaptive):
            if not all(np.isfinite(getattr(m, f)) for f in ("mae", "iou", "dice", "wfm", "sm")):
                raise tr.NumericalFailure(f"non-finite metric in family {r.family}")
    return tr.summarize(records, cfg.workers), records


def build_report(cfg: RunConfig, rows: list[dict], checkpoint: str) -> dict:
    report = {"kind": "eval", "schema_version": SCHEMA_VERSION, "mode": cfg.router,
              "checkpoint": checkpoint,
              "n_episodes": next(r["n"] for r in rows if r["family"] == "all"),
              "config": asdict(cfg),
              "families": [r for r in rows if r["mode"] == cfg.router],
              "modes": rows}
    validate_report(report)
    return report


def _write_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


def write_eval_report(cfg: RunConfig, report: dict, out: Path,
                      trace_path: Path | None = None) -> list[Path]:
    from . import plots

    out.mkdir(parents=True, exist_ok=True)
    rows, chosen = report["modes"], report["families"]
    written = [out / "report.json", out / "metrics.csv", out / "families.csv",
               out / "plot_family_miou.csv", out / "plot_routing.csv"]
    mt.write_json(out / "report.json", report)
    _write_csv(out / "metrics.csv", rows, ROW_COLUMNS)
    _write_csv(out / "families.csv", chosen, ROW_COLUMNS)
    fams = [r["family"] for r in chosen]
    wide = [{"family": f, **{m: next(r["mIoU"] for r in rows if r["mode"] == m and r["family"] == f)
                             for m in tr.MODES}} for f in fams]
    _write_csv(out / "plot_family_miou.csv", wide, ["family", *tr.MODES])
    _write_csv(out / "plot_routing.csv", chosen, ["family", "routing_rate"])
    trace = _read_trace(trace_path) if trace_path else []
    if trace:
        written.append(out / "plot_training.csv")
        _write_csv(out / "plot_training.csv", [t for t in trace if "step" in t],
                   ["stage", "step", "loss", "r_uni", "r_format", "r_mask", "r_meta", "kl"])
    if cfg.figures:
        written += [plots.family_bars([r for r in rows if r["family"] != "all"],
                                      out / "family_miou.png"),
                    plots.routing_bars([r for r in chosen if r["family"] != "all"],
                                       out / "routing.png")]
        if trace:
            written.append(plots.training_curves(trace, out / "training.png"))
    return written


def _read_trace(path: Path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def cmd_eval(cfg: RunConfig) -> dict:
    ckpt = Path(cfg.checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(f"no checkpoint at {ckpt}")
    store, _ = cc.load_checkpoint(ckpt)
    check_compatible(store, cfg)
    rows, _ = evaluate_store(cfg, store)
    report = build_report(cfg, rows, str(ckpt))
    write_eval_report(cfg, report, Path(cfg.report), Path(cfg.trace))
    return report


def _slug(value) -> str:
    return re.sub(r"[^A-Za-z0-9.]+", "_", str(value).replace("&", "and")).strip("_")


def sweep_values(cfg: RunConfig) -> list:
    if cfg.sweep_values == "auto":
        cfg = replace(cfg, sweep_values=SWEEP_DEFAULTS[cfg.sweep_axis])
    values = cfg.sweep_list()
    for v in values:
        replace(cfg, **{cfg.sweep_axis: v}).validate()
    return values


def cmd_sweep(cfg: RunConfig) -> dict:
    """Train and evaluate once per swept value; Stage I is shared when the axis allows."""
    axis = cfg.sweep_axis
    values = sweep_values(cfg)
    root = Path(cfg.report)
    root.mkdir(parents=True, exist_ok=True)
    stage1_cache: dict[tuple, dict] = {}
    rows, plot_rows, reports = [], [], []
    for value in values:
        sub = replace(cfg, **{axis: value}).validate()
        out = root / f"{axis}={_slug(value)}"
        out.mkdir(parents=True, exist_ok=True)
        views = _train_views(sub)
        key = (sub.L2, sub.k)
        trace = Trace(out / "trace.jsonl")
        try:
            if key not in stage1_cache:
                stage1_cache[key] = run_stage1(sub, views, trace)
            store = {k: v.copy() for k, v in stage1_cache[key].items()}
            if sub.stage2_steps:
                run_stage2(sub, store, views, trace)
        finally:
            trace.close()
        cc.save_checkpoint(out / "model.npz", store, _header(sub, 2 if sub.stage2_steps else 1))
        mode_rows, _ = evaluate_store(sub, store)
        report = build_report(sub, mode_rows, str(out / "model.npz"))
        write_eval_report(sub, report, out, out / "trace.jsonl")
        reports.append(str(out / "report.json"))
        total = {r["mode"]: r for r in mode_rows if r["family"] == "all"}
        rows.append({"value": value, **total[cfg.router]})
        plot_rows += [{"value": value, **total[m]} for m in tr.MODES]
    sweep = {"kind": "sweep", "schema_version": SCHEMA_VERSION, "axis": axis, "values": values,
             "rows": rows, "reports": reports}
    validate_report(sweep)
    mt.write_json(root / "sweep.json", sweep)
    _write_csv(root / "sweep.csv", rows, ["value", *ROW_COLUMNS])
    _write_csv(root / "plot_sweep.csv", plot_rows, ["value", "mode", *mt.METRIC_COLUMNS])
    if cfg.figures:
        from . import plots
        plots.sweep_lines(plot_rows, axis, root / "sweep.png")
    return sweep


# ---- argument parsing --------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conceptloop", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {"gen": "write the synthetic episode dataset",
             "train": "run Stage I or Stage II training",
             "eval": "evaluate a checkpoint under the three router modes",
             "sweep": "train and evaluate across values of one setting"}
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="flat 'key = value' config file")
        for f in fields(RunConfig):
            if name == "sweep" and f.name == "sweep_axis":
                continue
            flag = "--" + f.name.replace("_", "-")
            p.add_argument(flag, dest=f.name, metavar=f.type.upper() if isinstance(f.type, str)
                           else None, help=f"default {f.default!r}")
        if name == "train":
            p.add_argument("--stage", type=int, choices=(1, 2), required=True)
        if name == "sweep":
            p.add_argument("--axis", dest="sweep_axis", choices=cfgmod.SWEEP_AXES)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    names = {f.name for f in fields(RunConfig)}
    overrides = {k: v for k, v in vars(args).items() if k in names and v is not None}
    try:
        cfg = cfgmod.load(args.config, overrides)
        if args.command == "gen":
            print(f"dataset written to {cmd_gen(cfg)}")
        elif args.command == "train":
            print(f"checkpoint written to {cmd_train(cfg, args.stage)}; trace {cfg.trace}")
        elif args.command == "eval":
            report = cmd_eval(cfg)
            total = next(r for r in report["families"] if r["family"] == "all")
            print(f"{cfg.router}: mIoU {total['mIoU']:.2f}%  report in {cfg.report}")
        else:
            sweep = cmd_sweep(cfg)
            for r in sweep["rows"]:
                print(f"{cfg.sweep_axis}={r['value']}: mIoU {r['mIoU']:.2f}%")
    except ConfigError as e:
        print(f"conceptloop: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except tr.NumericalFailure as e:
        print(f"conceptloop: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"conceptloop: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
