"""Command line entry point: ``refcast <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .evaluation import (
    GridSpec,
    default_threads,
    format_ranking,
    predictor_influence,
    rank_results,
    read_results,
    results_frame,
    run_grid,
    write_results,
)
from .forecast import (
    EmpiricalDistribution,
    base_rate_frame,
    base_rate_table,
    default_grid,
    kde_density,
    place_estimates,
)
from .panel import IngestOptions, PanelError, open_panel
from .predictors import PredictorId, build_tables, summarize_predictors
from .refclass import ClassParams, SkipCase, build_class
from .synth import SynthSpec, generate_panel

log = logging.getLogger("refcast")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _alpha(text: str) -> float:
    value = float(text)
    if not 0 <= value < 0.5:
        raise argparse.ArgumentTypeError("trim fraction must be in [0, 0.5)")
    return value


# -- output helpers ----------------------------------------------------------

def _digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: str | Path, args: argparse.Namespace, inputs: list[str | Path]) -> Path:
    """Record config, input digests and versions next to ``out``."""
    config = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    manifest = {
        "refcast": __version__,
        "command": args.command,
        "config": config,
        "inputs": {str(p): _digest(p) for p in inputs if p},
        "output": str(out),
        "output_sha256": _digest(out),
        "versions": {"python": platform.python_version(), "numpy": np.__version__,
                     "pandas": pd.__version__},
    }
    path = Path(f"{out}.manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def write_table(frame: pd.DataFrame, path: str | Path, fmt: str, index: bool = False) -> None:
    if fmt == "json":
        orient = "index" if index else "records"
        Path(path).write_text(frame.to_json(orient=orient, indent=1, double_precision=15) + "\n")
    else:
        frame.to_csv(path, index=index, float_format="%.12g", lineterminator="\n")


# -- argument groups ---------------------------------------------------------

def _add_panel_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--panel", required=True, help="panel cache or raw panel CSV")
    p.add_argument("--cpi", help="CPI CSV (year,month,cpi); only used for raw CSV input")
    p.add_argument("--exclude-sic", action="store_true",
                   help="drop financial / real-estate firms (SIC 6000-6799)")
    p.add_argument("--start-year", type=int)
    p.add_argument("--end-year", type=int)


def _add_format(p: argparse.ArgumentParser) -> None:
    p.add_argument("--format", choices=("csv", "json"), default="csv")


def _add_class_args(p: argparse.ArgumentParser, need_case: bool = True) -> None:
    if need_case:
        p.add_argument("--firm", required=True)
        p.add_argument("--year", type=int, required=True)
    p.add_argument("--predictor", default="sales")
    p.add_argument("--horizon", type=int, default=1)
    p.add_argument("--window", type=int, default=30)
    p.add_argument("--size", type=float)
    p.add_argument("--method", choices=("similarity", "mauboussin", "major_group", "industry_group"),
                   default="similarity")
    p.add_argument("--min-class", type=int, default=20)
    p.add_argument("--exclude-self", action="store_true",
                   help="drop the initial firm's own observations from its candidates")


def _panel(args):
    options = IngestOptions(exclude_sic=args.exclude_sic, start_year=args.start_year,
                            end_year=args.end_year)
    return open_panel(args.panel, args.cpi, options)


def _params(args, horizon: int | None = None) -> ClassParams:
    method = args.method
    predictor = args.predictor
    if method == "mauboussin":
        predictor = "sales"
    elif method in ("major_group", "industry_group"):
        predictor = method
    size = args.size
    if method == "similarity" and size is None:
        size = 0.05
    if method != "similarity":
        size = None
    return ClassParams(predictor, horizon or args.horizon, args.window, size, method, args.min_class)


def _inputs(args) -> list:
    return [getattr(args, "panel", None), getattr(args, "cpi", None)]


# -- subcommands ---------------------------------------------------------------

def cmd_ingest(args) -> int:
    panel = _panel(args)
    panel.to_cache(args.out)
    write_manifest(args.out, args, _inputs(args))
    print(f"{panel}; dropped: {json.dumps(panel.dropped, sort_keys=True)}")
    return 0


def cmd_predictors(args) -> int:
    panel = _panel(args)
    summary = summarize_predictors(build_tables(panel).predictors)
    write_table(summary, args.out, args.format)
    write_manifest(args.out, args, _inputs(args))
    print(f"wrote {len(summary)} predictor summaries to {args.out}")
    return 0


def cmd_synth(args) -> int:
    spec = SynthSpec(n_firms=args.firms, n_years=args.years, seed=args.seed,
                     start_year=args.start_year, margin_drift=args.drift,
                     sigma_slope=args.sigma_slope, death_rate=args.death_rate)
    synth = generate_panel(spec)
    synth.panel.to_csv(args.out)
    write_manifest(args.out, args, [])
    print(f"wrote {synth.panel} to {args.out}")
    return 0


def _grid(args) -> GridSpec:
    grid = GridSpec() if args.grid == "default" else GridSpec.from_toml(args.grid)
    changes = {}
    if args.horizons:
        changes["horizons"] = tuple(args.horizons)
    if args.predictors:
        changes["predictors"] = tuple(PredictorId.parse(p) for p in args.predictors.split(","))
    if args.windows:
        changes["windows"] = tuple(args.windows)
    if args.sizes:
        changes["sizes"] = tuple(args.sizes)
    if args.no_benchmarks:
        changes.update(mauboussin=False, groups=False)
    if args.min_class is not None:
        changes["min_class"] = args.min_class
    return GridSpec(**{**grid.__dict__, **changes})


def cmd_backtest(args) -> int:
    panel = _panel(args)
    tables = build_tables(panel)
    grid = _grid(args)
    combos = grid.combinations()
    threads = args.threads or default_threads()
    log.info("backtesting %d combinations with %d workers", len(combos), threads)
    results = run_grid(panel, tables, combos, threads=threads, exclude_self=args.exclude_self)
    frame = results_frame(results)
    write_results(frame, args.out, args.format)
    inputs = _inputs(args) + ([args.grid] if args.grid != "default" else [])
    write_manifest(args.out, args, inputs)
    print(f"wrote {len(frame)} combinations to {args.out}")
    return 0


def cmd_rank(args) -> int:
    ranked = rank_results(read_results(args.results), by=args.by)
    if args.top:
        ranked = ranked.groupby("horizon", sort=True).head(args.top).reset_index(drop=True)
    print(format_ranking(ranked))
    if args.out:
        write_results(ranked, args.out, args.format)
        write_manifest(args.out, args, [args.results])
    return 0


def cmd_class(args) -> int:
    panel = _panel(args)
    tables = build_tables(panel)
    cls = build_class(tables, args.firm, args.year, _params(args), args.exclude_self)
    m = cls.members
    frame = pd.DataFrame({"firm_id": m.firm, "year": m.year, "predictor_value": m.x, "outcome": m.y})
    if args.out:
        write_table(frame, args.out, args.format)
        write_manifest(args.out, args, _inputs(args))
    else:
        frame.to_csv(sys.stdout, index=False, float_format="%.12g", lineterminator="\n")
    return 0


def cmd_forecast(args) -> int:
    panel = _panel(args)
    tables = build_tables(panel)
    cls = build_class(tables, args.firm, args.year, _params(args), args.exclude_self)
    dist = cls.distribution
    placements = pd.DataFrame(columns=["analyst_id", "estimate_pct", "quantile"])
    inputs = _inputs(args)
    if args.estimates:
        est = pd.read_csv(args.estimates, dtype={"analyst_id": str})
        if not {"analyst_id", "estimate_pct"} <= set(est.columns):
            raise PanelError(f"{args.estimates}: header must be analyst_id,estimate_pct")
        placed = place_estimates(dist, est["estimate_pct"].astype(float))
        placements = pd.DataFrame({"analyst_id": est["analyst_id"],
                                   "estimate_pct": [e for e, _ in placed],
                                   "quantile": [q for _, q in placed]})
        inputs.append(args.estimates)
    write_table(placements, args.out, args.format)
    write_manifest(args.out, args, inputs)
    grid = default_grid(dist, args.grid_points)
    density = pd.DataFrame({"growth_pct": grid, "density": kde_density(dist, grid)})
    density_out = args.density_out or str(Path(args.out).with_name(Path(args.out).stem + "_density"
                                                                    + Path(args.out).suffix))
    write_table(density, density_out, args.format)
    write_manifest(density_out, args, inputs)
    print(f"class of {cls.n} members; median {np.median(dist.outcomes):.2f}%")
    return 0


def cmd_baserates(args) -> int:
    panel = _panel(args)
    tables = build_tables(panel)
    columns = {}
    for h in args.horizons:
        label = f"{h}-Yr"
        if args.firm is None:
            y = tables.outcomes.values(h)
            columns[label] = base_rate_table(EmpiricalDistribution.from_values(y[~np.isnan(y)]), args.alpha)
            continue
        cls = build_class(tables, args.firm, args.year, _params(args, h), args.exclude_self)
        columns[label] = base_rate_table(cls.distribution, args.alpha)
        if args.mauboussin:
            mc = ClassParams("sales", h, args.window, None, "mauboussin", args.min_class)
            columns[f"{label} MC"] = base_rate_table(
                build_class(tables, args.firm, args.year, mc, args.exclude_self).distribution, args.alpha)
    frame = base_rate_frame(columns)
    write_table(frame, args.out, args.format, index=True)
    write_manifest(args.out, args, _inputs(args))
    print(frame.round(2).to_string())
    return 0


def cmd_influence(args) -> int:
    panel = _panel(args)
    tables = build_tables(panel)
    frame = predictor_influence(panel, tables, _params(args), args.year, alpha=args.alpha)
    write_table(frame, args.out, args.format)
    write_manifest(args.out, args, _inputs(args))
    print(frame.round(2).to_string(index=False))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="refcast", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="validate, filter and deflate a panel into a cache file")
    _add_panel_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("predictors", help="predictor summary (quantiles, mean, missings)")
    _add_panel_args(p)
    _add_format(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predictors)

    p = sub.add_parser("synth", help="write a synthetic panel CSV with a known mechanism")
    p.add_argument("--firms", type=int, default=2000)
    p.add_argument("--years", type=int, default=50)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--start-year", type=int, default=1950)
    p.add_argument("--drift", type=float, default=SynthSpec.margin_drift)
    p.add_argument("--sigma-slope", type=float, default=0.0)
    p.add_argument("--death-rate", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("backtest", help="score every grid combination by PIT calibration")
    _add_panel_args(p)
    _add_format(p)
    p.add_argument("--grid", default="default", help="'default' or a TOML grid file")
    p.add_argument("--horizons", type=_int_list)
    p.add_argument("--predictors", help="comma-separated predictor names (overrides the grid)")
    p.add_argument("--windows", type=_int_list)
    p.add_argument("--sizes", type=_float_list)
    p.add_argument("--no-benchmarks", action="store_true")
    p.add_argument("--min-class", type=int)
    p.add_argument("--exclude-self", action="store_true")
    p.add_argument("--threads", type=int, help="worker cap (default: REFCAST_THREADS or cores)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_backtest)

    p = sub.add_parser("rank", help="order backtest results by one measure")
    p.add_argument("--results", required=True)
    p.add_argument("--by", choices=("delta_q", "ks", "cvm"), default="delta_q")
    p.add_argument("--top", type=int)
    p.add_argument("--out")
    _add_format(p)
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("class", help="print the reference class of one case")
    _add_panel_args(p)
    _add_class_args(p)
    _add_format(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_class)

    p = sub.add_parser("forecast", help="place analyst estimates and write the class density")
    _add_panel_args(p)
    _add_class_args(p)
    _add_format(p)
    p.add_argument("--estimates", help="CSV with analyst_id,estimate_pct")
    p.add_argument("--grid-points", type=int, default=512)
    p.add_argument("--density-out")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("baserates", help="bucketed growth base rates per horizon")
    _add_panel_args(p)
    _add_class_args(p, need_case=False)
    _add_format(p)
    p.add_argument("--firm", help="initial firm; omit for the full universe")
    p.add_argument("--year", type=int)
    p.add_argument("--horizons", type=_int_list, default=[1, 3, 5, 10])
    p.add_argument("--mauboussin", action="store_true", help="add Mauboussin benchmark columns")
    p.add_argument("--alpha", type=_alpha, default=0.025)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_baserates)

    p = sub.add_parser("influence", help="class location/scale at predictor deciles for one year")
    _add_panel_args(p)
    _add_class_args(p, need_case=False)
    _add_format(p)
    p.add_argument("--year", type=int, required=True)
    p.add_argument("--alpha", type=_alpha, default=0.025)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_influence)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "firm", None) is not None and getattr(args, "year", None) is None:
        parser.error("--firm needs --year")
    try:
        return args.func(args)
    except BrokenPipeError:
        # stdout closed early (e.g. piped into head); not an error
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return 0
    except (PanelError, SkipCase, KeyError, ValueError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"refcast {args.command}: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
