"""Command-line entry point.

    curricast generate | train | forecast | baseline | evaluate | compare [flags]

Settings come from built-in defaults, then an optional JSON ``--config``,
then flags. Logs go to stderr; data goes to files under ``--out``. Every
artifact starts with a ``# config_hash=...`` line (JSON artifacts carry a
``config_hash`` field instead).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from . import baseline as bl
from . import evaluation as ev
from . import training as tr
from .curriculum import CurriculumError
from .forecasters import DcnnForecasterConfig, LstmForecasterConfig, ModelState, config_hash
from .nn import TrainingError
from .nn.checkpoint import CheckpointError
from .panel_data import PanelDataset, PanelError, SyntheticSpec, generate_synthetic, load_panel, panel_to_csv

logger = logging.getLogger("curricast")

EXIT_OK, EXIT_VALIDATION, EXIT_TRAINING, EXIT_IO = 0, 2, 3, 4
SCHEMA_VERSION = 1
CONFIG_SECTIONS = ("schema_version", "synthetic", "panel", "training", "baseline", "evaluation", "compare")


class CliError(Exception):
    code = EXIT_VALIDATION


class UsageError(CliError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --- parsing ------------------------------------------------------------------

def _csv_list(text: str) -> List[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    panel = _Parser(add_help=False)
    panel.add_argument("--panel", help="panel CSV; without it the synthetic panel from the config is used")
    panel.add_argument("--horizon", type=int, help="test quarters at the end of the panel")
    panel.add_argument("--quarters", type=int, help="panel length in quarters")
    panel.add_argument("--panel-seed", type=int, help="seed of the synthetic panel")
    panel.add_argument("--segments", type=int)
    panel.add_argument("--regions", type=int)
    panel.add_argument("--products", type=int)
    panel.add_argument("--noise", type=float, help="log-noise sigma of the synthetic panel")

    train = _Parser(add_help=False)
    train.add_argument("--variant", choices=sorted(tr.VARIANTS))
    train.add_argument("--runs", type=int)
    train.add_argument("--seed", type=int, help="seed of run 0; run i uses seed + i")
    train.add_argument("--k", type=int, help="curriculum batches")
    train.add_argument("--p", type=int, help="epochs per curriculum stage")
    train.add_argument("--ordering", choices=["ascending", "descending"])
    train.add_argument("--grouping", choices=["uniform", "by_segment"])
    train.add_argument("--weighting", choices=["uniform", "segment_revenue", "segment_revenue_raw"])
    train.add_argument("--window", type=int, help="LSTM window size (encoder + horizon)")
    train.add_argument("--epochs", type=int, help="epochs per window without curriculum (LSTM)")
    train.add_argument("--dcnn-epochs", type=int, help="epochs without curriculum (DCNN)")
    train.add_argument("--hidden", type=int, help="LSTM hidden size")
    train.add_argument("--parallel", type=int, default=1, help="runs trained concurrently")

    parser = _Parser(prog="curricast", description="Hierarchical revenue forecasting toolkit.")
    parser.add_argument("--version", action="version", version=f"curricast {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic panel CSV")
    g.add_argument("--seed", type=int, help="synthetic panel seed")
    for name in ("segments", "regions", "products", "quarters", "horizon"):
        g.add_argument(f"--{name}", type=int)
    g.add_argument("--noise", type=float)
    g.add_argument("--short-fraction", type=float, help="fraction of rows with short history")

    sub.add_parser("train", parents=[common, panel, train], help="train models, write checkpoints and forecasts")

    f = sub.add_parser("forecast", parents=[common, panel], help="forecast from trained checkpoints")
    f.add_argument("--train-dir", required=True, help="output directory of a train command")

    b = sub.add_parser("baseline", parents=[common, panel], help="classical baseline forecasts")
    b.add_argument("--full-history", type=int, help="quarters needed for Holt-Winters (default 8)")
    b.add_argument("--naive-history", type=int, help="quarters needed for seasonal naive (default 4)")

    e = sub.add_parser("evaluate", parents=[common, panel], help="MAPE report for a forecast file")
    e.add_argument("--forecasts", required=True, help="forecast CSV (train, forecast or baseline output)")
    e.add_argument("--baseline", help="baseline forecast CSV for improvement percentages")
    e.add_argument("--mode", choices=["per_quarter", "total"])
    e.add_argument("--bins", type=int, help="histogram bins for run-to-run densities")

    c = sub.add_parser("compare", parents=[common, panel, train],
                       help="train several variants and report improvement over the baseline")
    c.add_argument("--variants", type=_csv_list, help="comma-separated variants (default: all seven)")
    c.add_argument("--mode", choices=["per_quarter", "total"])
    c.add_argument("--from-forecasts", action="append", default=[], metavar="VARIANT=CSV",
                   help="use an existing forecast file for a variant instead of training it")
    return parser


# --- configuration -----------------------------------------------------------------

def load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"config {path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(doc, dict):
        raise CliError(f"config {path}: top level must be an object")
    unknown = sorted(set(doc) - set(CONFIG_SECTIONS))
    if unknown:
        raise CliError(f"config {path}: unknown section(s) {unknown}")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise CliError(f"config {path}: schema_version must be {SCHEMA_VERSION}, got {version!r}")
    return doc


def _section(cfg: dict, name: str, allowed: Optional[Sequence[str]] = None) -> dict:
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise CliError(f"config section {name!r} must be an object")
    if allowed is not None:
        unknown = sorted(set(sec) - set(allowed))
        if unknown:
            raise CliError(f"config section {name!r}: unknown option(s) {unknown}")
    return dict(sec)


def _overlay(base: dict, **flags) -> dict:
    out = dict(base)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _horizon(args, cfg) -> int:
    h = getattr(args, "horizon", None)
    if h is None:
        h = _section(cfg, "training").get("horizon", _section(cfg, "panel").get("horizon", 4))
    return h


def synthetic_spec(args, cfg) -> SyntheticSpec:
    d = _overlay(_section(cfg, "synthetic"),
                 n_segments=getattr(args, "segments", None), n_regions=getattr(args, "regions", None),
                 n_products=getattr(args, "products", None), noise_sigma=getattr(args, "noise", None),
                 n_quarters=getattr(args, "quarters", None), horizon=_horizon(args, cfg),
                 short_history_fraction=getattr(args, "short_fraction", None))
    seed = args.seed if args.command == "generate" else getattr(args, "panel_seed", None)
    if seed is not None:
        d["seed"] = seed
    return SyntheticSpec.from_dict(d)


def resolve_panel(args, cfg):
    """The panel plus a description of where it came from."""
    sec = _section(cfg, "panel", ("path", "schema", "horizon", "n_quarters"))
    path = args.panel or sec.get("path")
    h = _horizon(args, cfg)
    if path:
        quarters = args.quarters if args.quarters is not None else sec.get("n_quarters")
        panel = load_panel(path, sec.get("schema"), horizon=h, n_quarters=quarters)
        return panel, {"source": "file", "path": str(path)}
    spec = synthetic_spec(args, cfg)
    return generate_synthetic(spec), {"source": "synthetic", "spec": spec.to_dict()}


def training_config(args, cfg, variant: Optional[str] = None) -> tr.TrainingConfig:
    d = _overlay(_section(cfg, "training"),
                 variant=variant or args.variant, runs=args.runs, seed_base=args.seed, k=args.k, p=args.p,
                 ordering=args.ordering, grouping=args.grouping, weighting=args.weighting,
                 window_size=args.window, epochs_per_window=args.epochs, dcnn_epochs=args.dcnn_epochs,
                 hidden_size=args.hidden, horizon=getattr(args, "horizon", None))
    return tr.TrainingConfig.from_dict(d)


# --- output helpers ------------------------------------------------------------------

def _header(command: str, resolved: dict) -> str:
    return f"config_hash={config_hash(resolved)} command={command} curricast={__version__}"


def _write(out: Path, name: str, text: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(text)
    logger.info("wrote %s", path)
    return path


def _write_json(out: Path, name: str, doc: dict, resolved: dict) -> Path:
    doc = {"config_hash": config_hash(resolved), **doc}
    return _write(out, name, ev.to_json(doc) + "\n")


def _single_set_csv(label: str, forecasts, panel: PanelDataset, header: str) -> str:
    text = tr.forecasts_to_csv([(0, forecasts)], panel, panel.train_end, header)
    # relabel the run column; the file holds one forecast set
    lines = text.splitlines(keepends=True)
    return "".join(lines[:2]) + "".join(f"{label}{ln[1:]}" for ln in lines[2:])


# --- commands ----------------------------------------------------------------------------

def cmd_generate(args, cfg) -> int:
    spec = synthetic_spec(args, cfg)
    panel = generate_synthetic(spec)
    resolved = {"synthetic": spec.to_dict()}
    _write(Path(args.out), "panel.csv", panel_to_csv(panel, _header("generate", resolved)))
    return EXIT_OK


def _loss_trace_csv(results, header: str) -> str:
    buf = io.StringIO()
    buf.write(f"# {header}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "window", "stage", "epoch", "loss"])
    for r in results:
        for rec in r.loss_trace:
            w.writerow([r.run_index, "" if rec.window is None else rec.window,
                        "" if rec.stage is None else rec.stage, rec.epoch, repr(rec.loss)])
    return buf.getvalue()


def _train_variant(panel, config: tr.TrainingConfig, parallel: int):
    results = tr.run_experiment(panel, config, parallel=parallel)
    failed = [r for r in results if not r.ok]
    if len(failed) == len(results):
        raise TrainingError(f"all {len(results)} run(s) of {config.variant} failed: {failed[0].error}")
    return results


def cmd_train(args, cfg) -> int:
    panel, source = resolve_panel(args, cfg)
    config = training_config(args, cfg)
    resolved = {"panel": source, "training": config.to_dict()}
    header = _header("train", resolved)
    out = Path(args.out)
    logger.info("training %s: %d run(s), seeds %d..%d", config.variant, config.runs, config.seed_base,
                config.seed_base + config.runs - 1)
    results = _train_variant(panel, config, args.parallel)
    good = [r for r in results if r.ok]
    text = tr.forecasts_to_csv([(r.run_index, r.forecasts) for r in good], panel, panel.train_end, header)
    _write(out, "forecasts.csv", text)
    _write(out, "loss_trace.csv", _loss_trace_csv(good, header))
    ckpt = out / "checkpoints"
    ckpt.mkdir(parents=True, exist_ok=True)
    for r in good:
        r.state.save(ckpt / f"run_{r.run_index:03d}.json",
                     {"run": r.run_index, "seed": r.seed, "training_config_hash": config_hash(config)})
    manifest = tr.experiment_manifest(panel, config, results)
    manifest["panel_source"] = source
    if config.spec.curriculum:
        prepared = tr.prepare_panel(panel, config)
        plan = tr.build_curriculum(prepared, config, config.seed_base)
        manifest["curriculum_plan"] = json.loads(plan.to_json())
    _write_json(out, "manifest.json", manifest, resolved)
    if len(good) < len(results):
        logger.warning("%d of %d run(s) failed and were excluded", len(results) - len(good), len(results))
    return EXIT_OK


def cmd_forecast(args, cfg) -> int:
    train_dir = Path(args.train_dir)
    manifest = json.loads((train_dir / "manifest.json").read_text())
    config = tr.TrainingConfig.from_dict(manifest["config"])
    panel, source = resolve_panel(args, cfg)
    if tr.panel_hash(panel) != manifest["panel_sha256"]:
        raise CliError("panel differs from the one the checkpoints were trained on")
    prepared = tr.prepare_panel(panel, config)
    fam_cfg = tr.lstm_config_for(config, prepared) if config.spec.family == "lstm" \
        else tr.dcnn_config_for(config, prepared)
    cfg_type = LstmForecasterConfig if config.spec.family == "lstm" else DcnnForecasterConfig
    paths = sorted((train_dir / "checkpoints").glob("run_*.json"))
    if not paths:
        raise CliError(f"no checkpoints under {train_dir / 'checkpoints'}")
    results = []
    for i, path in enumerate(paths):
        state = ModelState.load(path, cfg_type, fam_cfg.param_shapes())
        if state.config != fam_cfg:
            raise CheckpointError(f"{path.name}: model config does not match the manifest")
        fc, bad = tr.forecast_rows(prepared, state, config)
        results.append(tr.RunResult(i, 0, forecasts=fc, unforecastable=bad))
    mean = tr.aggregate_runs(results)
    resolved = {"panel": source, "training": config.to_dict(), "checkpoints": [p.name for p in paths]}
    _write(Path(args.out), "forecast.csv", _single_set_csv("mean", mean, panel, _header("forecast", resolved)))
    if results[0].unforecastable:
        logger.warning("%d row(s) lack the history needed to forecast", len(results[0].unforecastable))
    return EXIT_OK


def _baseline_settings(args, cfg) -> dict:
    return _overlay(_section(cfg, "baseline", ("full", "naive")),
                    full=getattr(args, "full_history", None), naive=getattr(args, "naive_history", None))


def _run_baseline(panel, settings) -> bl.BaselineResult:
    return bl.baseline_forecast(panel, full=settings.get("full", 8), naive=settings.get("naive", 4))


def cmd_baseline(args, cfg) -> int:
    panel, source = resolve_panel(args, cfg)
    settings = _baseline_settings(args, cfg)
    res = _run_baseline(panel, settings)
    resolved = {"panel": source, "baseline": settings}
    header = _header("baseline", resolved)
    out = Path(args.out)
    _write(out, "baseline.csv", _single_set_csv("baseline", res.forecasts, panel, header))
    buf = io.StringIO()
    buf.write(f"# {header}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["segment", "region", "product", "tier"])
    for k in sorted(res.tiers):
        w.writerow([*k, res.tiers[k]])
    _write(out, "baseline_tiers.csv", buf.getvalue())
    return EXIT_OK


def _read_forecast_file(path: str, panel: PanelDataset) -> Dict[object, dict]:
    runs = tr.read_forecasts_csv(Path(path).read_text(), panel)
    if not runs:
        raise CliError(f"{path}: no forecasts")
    return runs


def _mean_of(runs: Dict[object, dict]) -> dict:
    return tr.aggregate_runs([tr.RunResult(i, 0, forecasts=fc) for i, fc in enumerate(runs.values())])


def cmd_evaluate(args, cfg) -> int:
    panel, source = resolve_panel(args, cfg)
    sec = _section(cfg, "evaluation", ("mode", "bins"))
    mode = args.mode or sec.get("mode", "per_quarter")
    bins = args.bins or sec.get("bins", 10)
    runs = _read_forecast_file(args.forecasts, panel)
    model = _mean_of(runs)
    keys = set(model)
    base = None
    if args.baseline:
        base = _mean_of(_read_forecast_file(args.baseline, panel))
        keys &= set(base)
    keys = sorted(keys & set(ev.test_actuals(panel)))
    if not keys:
        raise CliError("no rows with both forecasts and test actuals")
    resolved = {"panel": source, "mode": mode, "bins": bins, "forecasts": Path(args.forecasts).name,
                "baseline": Path(args.baseline).name if args.baseline else None}
    header = _header("evaluate", resolved)
    report = ev.evaluate(model, panel, mode, keys)
    doc = {"model": report.to_dict(), "n_runs": len(runs)}
    out = Path(args.out)
    if base is not None:
        b = ev.evaluate(base, panel, mode, keys)
        doc["baseline"] = b.to_dict()
        doc["improvement_pct"] = ev.improvement_report(report, b).to_dict()
    if len(runs) >= 2:
        dens = ev.density_summary(ev.per_run_signed_errors(list(runs.values()), panel, keys), bins)
        doc["density"] = {k: asdict(v) for k, v in dens.items()}
        _write(out, "density.csv", ev.density_to_csv(dens, header))
    _write(out, "report.csv", ev.report_to_csv(report, header))
    _write_json(out, "report.json", doc, resolved)
    return EXIT_OK


def _fmt(v: Optional[float]) -> str:
    return "undefined" if v is None else repr(round(v, 6))


def cmd_compare(args, cfg) -> int:
    panel, source = resolve_panel(args, cfg)
    sec = _section(cfg, "compare", ("variants", "mode"))
    variants = args.variants or sec.get("variants") or list(tr.VARIANTS)
    unknown = [v for v in variants if v not in tr.VARIANTS]
    if unknown:
        raise CliError(f"unknown variant(s) {unknown}")
    mode = args.mode or sec.get("mode", "per_quarter")
    given = {}
    for item in args.from_forecasts:
        name, sep, path = item.partition("=")
        if not sep or name not in variants:
            raise CliError(f"--from-forecasts expects VARIANT=CSV with a listed variant, got {item!r}")
        given[name] = path
    settings = _baseline_settings(args, cfg)
    configs = {v: training_config(args, cfg, v) for v in variants}
    resolved = {"panel": source, "mode": mode, "baseline": settings,
                "training": {v: configs[v].to_dict() for v in variants},
                "from_forecasts": {v: Path(p).name for v, p in sorted(given.items())}}
    header = _header("compare", resolved)

    forecasts = {}
    for v in variants:
        if v in given:
            forecasts[v] = _mean_of(_read_forecast_file(given[v], panel))
        else:
            logger.info("compare: training %s (%d run(s))", v, configs[v].runs)
            forecasts[v] = tr.aggregate_runs(_train_variant(panel, configs[v], args.parallel))
    base = _run_baseline(panel, settings).forecasts
    keys = set(base) & set(ev.test_actuals(panel))
    for fc in forecasts.values():
        keys &= set(fc)
    keys = sorted(keys)
    if not keys:
        raise CliError("no rows are forecast by every variant and the baseline")
    base_rep = ev.evaluate(base, panel, mode, keys)
    reports = {v: ev.evaluate(forecasts[v], panel, mode, keys) for v in variants}
    imps = {v: ev.improvement_report(reports[v], base_rep) for v in variants}

    out = Path(args.out)
    buf = io.StringIO()
    buf.write(f"# {header}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "world_mape", "baseline_world_mape", "improvement_pct"])
    for v in variants:
        w.writerow([v, repr(reports[v].world_mape), repr(base_rep.world_mape), _fmt(imps[v].world)])
    _write(out, "compare_world.csv", buf.getvalue())

    buf = io.StringIO()
    buf.write(f"# {header}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["segment", *variants])
    for s in sorted(base_rep.segment_mape):
        w.writerow([s, *(_fmt(imps[v].segment[s]) for v in variants)])
    w.writerow(["revenue_weighted", *(_fmt(imps[v].revenue_weighted_segment) for v in variants)])
    _write(out, "compare_segment.csv", buf.getvalue())

    doc = {"n_rows": len(keys), "baseline": base_rep.to_dict(),
           "models": {v: {"report": reports[v].to_dict(), "improvement_pct": imps[v].to_dict()} for v in variants}}
    _write_json(out, "compare.json", doc, resolved)
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "forecast": cmd_forecast,
            "baseline": cmd_baseline, "evaluate": cmd_evaluate, "compare": cmd_compare}


def _error_line(code: int, exc: BaseException) -> str:
    msg = " ".join(str(exc).split())
    problems = getattr(exc, "problems", None)
    if problems:
        msg += " [" + "; ".join(" ".join(str(p).split()) for p in list(problems)[:20]) + "]"
    return "error: " + json.dumps({"code": code, "kind": type(exc).__name__, "message": msg})


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(_error_line(EXIT_VALIDATION, exc), file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(stream=sys.stderr, level=getattr(logging, args.log_level),
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except (TrainingError, tr.AggregationError) as exc:
        code, err = EXIT_TRAINING, exc
    except (CliError, tr.ConfigError, PanelError, CurriculumError, ev.EvaluationError, bl.BaselineError,
            CheckpointError, ValueError, KeyError) as exc:
        code, err = EXIT_VALIDATION, exc
    except OSError as exc:
        code, err = EXIT_IO, exc
    print(_error_line(code, err), file=sys.stderr)
    return code
