"""Command-line entry point: ``recordbreak <subcommand> ...``.

Exit codes: 0 success, 1 runtime or input failure (message names the
step), 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import fields as dc_fields
from pathlib import Path

import numpy as np

from . import io as rio
from .design import DESIGN_COLUMNS, build_ortho_poly, panel_design
from .diagnostics import CVPlan, psrf_table, run_crossval
from .eda import exclude_sites, nested_model_table, yearly_eda
from .mcmc import ModelSpec, run_chain
from .predict import (area_fraction_exceeding, ers_bar, nbar, ratio, simulate_predictive,
                      summarize)
from .records import SimulatedSeriesConfig, extract_records, simulate_series


class StepError(RuntimeError):
    def __init__(self, step: str, exc: BaseException):
        super().__init__(f"[{step}] {type(exc).__name__}: {exc}")
        self.step = step


class _Steps:
    """Context helper tagging failures with the running step."""

    def __init__(self):
        self.name = "start"

    def __call__(self, name: str) -> "_Steps":
        self.name = name
        return self


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _load_spec(args) -> ModelSpec:
    cfg = {}
    if getattr(args, "config", None):
        cfg = json.loads(Path(args.config).read_text())
        known = {f.name for f in dc_fields(ModelSpec)}
        unknown = sorted(set(cfg) - known)
        if unknown:
            raise ValueError(f"unknown config keys {unknown}")
    if getattr(args, "model", None):
        cfg["variant"] = args.model
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if cfg.get("days") is not None:
        cfg["days"] = tuple(cfg["days"])
    return ModelSpec(**cfg)


def _load_tensor(args, step):
    step("ingest")
    panel, report = rio.ingest(args.temps, args.stations)
    step("records")
    return panel, extract_records(panel), report


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args, step) -> dict:
    step("simulate")
    cfg = SimulatedSeriesConfig(model=args.model, drift=args.c, sigma=args.sigma, T=args.T,
                                replicates=args.reps, seed=args.seed)
    panel = simulate_series(cfg)
    step("write")
    rio.write_panel(panel, args.out / "temps.csv", args.out / "stations.csv")
    return {"config": vars(cfg) if hasattr(cfg, "__dict__") else str(cfg)}


def cmd_records(args, step) -> dict:
    panel, tensor, report = _load_tensor(args, step)
    step("write")
    rio.write_indicators(tensor, args.out / "indicators.csv", years=panel.years)
    return {"leap_rows_dropped": report.n_leap_dropped, "missing_cells": report.n_missing}


def cmd_eda(args, step) -> dict:
    _, tensor, report = _load_tensor(args, step)
    dropped = []
    if args.dedupe_region:
        step("dedupe")
        region = [s.strip() for s in args.dedupe_region.split(",") if s.strip()]
        dropped = region[1:]
        tensor = exclude_sites(tensor, dropped)
    step("yearly")
    yearly = yearly_eda(tensor)
    keys = ["t", "p_hat", "lor1", "lor_..1", "lor_..0"]
    _write_csv(args.out / "eda_yearly.csv", keys,
               zip(*[np.asarray(yearly[k]).tolist() for k in keys]))
    step("nested-models")
    table = nested_model_table(tensor)
    _write_csv(args.out / "eda_models.csv", ["model", "dof", "loglik", "aic"],
               ((name, fit.dof, fit.loglik, fit.aic) for name, fit in table))
    return {"dropped_sites": dropped, "leap_rows_dropped": report.n_leap_dropped}


def cmd_design(args, step) -> dict:
    if args.action != "dump":
        raise ValueError(f"unknown design action {args.action!r}")
    panel, tensor, _ = _load_tensor(args, step)
    step("design")
    T = tensor.shape[1]
    X = panel_design(tensor.values("exclude"), np.asarray(tensor.dist_coast),
                     build_ortho_poly(T))["main"]
    years = panel.years

    def rows():
        for ti in range(X.shape[0]):
            for di in range(X.shape[1]):
                for j, s in enumerate(tensor.sites):
                    yield [int(years[ti + 1]), di + 3, s, *X[ti, di, j].tolist()]

    step("write")
    _write_csv(args.out / "design.csv", ["year", "doy", "site", *DESIGN_COLUMNS], rows())
    return {}


def cmd_fit(args, step) -> dict:
    step("config")
    spec = _load_spec(args)
    _, tensor, _ = _load_tensor(args, step)
    step("sample")
    draws = run_chain(spec, tensor, threads=args.threads)
    step("write")
    rio.persist_draws(draws, args.out / "draws")
    if draws.dic is not None:
        _write_csv(args.out / "dic.csv", ["model", "d_hat", "p_d", "dic"],
                   [(draws.model, draws.dic["d_hat"], draws.dic["p_d"], draws.dic["dic"])])
    return {"spec": spec.to_dict(), "chains": draws.chain_meta}


def cmd_predict(args, step) -> dict:
    step("load-draws")
    draws = rio.load_draws(args.draws)
    grid = rio.read_grid(args.grid)
    stats = [s.strip() for s in args.stats.split(",") if s.strip()]
    bad = sorted(set(stats) - {"nbar", "ratio", "ers"})
    if bad:
        raise ValueError(f"unknown statistics {bad}")
    t2 = args.t2 or draws.T
    step("simulate")
    field = simulate_predictive(draws, grid, np.random.default_rng(args.seed), t_max=t2,
                                n_draws=args.n_draws)
    step("summarize")
    grid_rows, series_rows = [], []
    for stat in stats:
        if stat in ("nbar", "ratio"):
            vals = (nbar if stat == "nbar" else ratio)(field, args.t1, t2)
            sm = summarize(vals)
            grid_rows += [(cid, stat, sm["mean"][j], sm["q05"][j], sm["q95"][j])
                          for j, cid in enumerate(grid.cell_ids)]
            if stat == "ratio":
                frac = area_fraction_exceeding(vals, 1.0, mode="q05")
                series_rows.append(("", "area_ratio_q05_gt_1", frac, frac, frac))
        else:
            labels = [None] + (sorted(set(grid.block) - {""}) if grid.block else [])
            for lab in labels:
                name = "t_ers_bar" if lab is None else f"t_ers_bar:{lab}"
                for t in range(max(2, args.t1), t2 + 1):
                    sm = summarize(t * ers_bar(field, t, block=lab))
                    series_rows.append((t, name, sm["mean"], sm["q05"], sm["q95"]))
    step("write")
    _write_csv(args.out / "grid_stats.csv", ["cell_id", "stat", "mean", "q05", "q95"], grid_rows)
    _write_csv(args.out / "series_stats.csv", ["t", "stat", "mean", "q05", "q95"], series_rows)
    return {"n_draws": int(field.n_draws)}


def cmd_crossval(args, step) -> dict:
    step("config")
    models = [m.strip() for m in args.models.split(",") if m.strip()]
    base = _load_spec(args)
    specs = {m: ModelSpec(**{**base.to_dict(), "variant": m,
                             "days": base.days}) for m in models}
    _, tensor, _ = _load_tensor(args, step)
    step("plan")
    plan = (CVPlan.from_json(args.plan) if args.plan
            else CVPlan.random(tensor.sites, args.groups, seed=base.seed))
    step("crossval")
    res = run_crossval(specs, tensor, plan, threads=args.threads, n_draws=args.n_draws,
                       pooled_auc=args.pooled_auc)
    step("write")
    _write_csv(args.out / "crossval.csv", ["model", "fold", "period", "bs", "auc"],
               ((r["model"], r["fold"], r["period"], r["bs"], r["auc"]) for r in res.rows))
    _write_csv(args.out / "crossval_summary.csv", ["model", "period", "bs", "auc"],
               ((r["model"], r["period"], r["bs"], r["auc"]) for r in res.summary))
    plan.to_json(args.out / "plan.json")
    return {"failed_folds": [r for r in res.rows if r["error"]]}


def cmd_diagnose(args, step) -> dict:
    step("load-draws")
    draws = rio.load_draws(args.draws)
    step("psrf")
    table = psrf_table(draws)
    step("write")
    _write_csv(args.out / "psrf.csv", ["param", "psrf"], table.items())
    return {}


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="recordbreak", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="worker threads (results do not depend on this)")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, data=True, out=True):
        sp = sub.add_parser(name, help=help_)
        if data:
            sp.add_argument("--in", dest="temps", type=Path, required=True,
                            help="temperature CSV (site,year,doy,tmax_c)")
            sp.add_argument("--stations", type=Path, required=True,
                            help="station CSV (site,x_km,y_km,dist_coast_km)")
        if out:
            sp.add_argument("--out", type=Path, required=True, help="output directory")
        sp.set_defaults(func=fn)
        return sp

    sp = add("simulate", cmd_simulate, "simulate a temperature panel", data=False)
    sp.add_argument("--model", choices=["crm", "ldm"], default="crm")
    sp.add_argument("--c", type=float, default=0.0, help="linear drift per year")
    sp.add_argument("--sigma", type=float, default=1.0)
    sp.add_argument("--T", type=int, default=62)
    sp.add_argument("--reps", type=int, default=1, help="number of sites")
    sp.add_argument("--seed", type=int, default=0)

    add("records", cmd_records, "extract record indicators")

    sp = add("eda", cmd_eda, "yearly rates, odds ratios and nested AIC table")
    sp.add_argument("--dedupe-region", default=None, metavar="SITES",
                    help="comma-separated sites of one region; only the first is kept")

    sp = add("design", cmd_design, "design-matrix utilities")
    sp.add_argument("action", choices=["dump"])

    sp = add("fit", cmd_fit, "run the Gibbs sampler")
    sp.add_argument("--model", choices=[f"M{i}" for i in range(6)], default=None)
    sp.add_argument("--config", type=Path, default=None, help="JSON file of ModelSpec fields")
    sp.add_argument("--seed", type=int, default=None)

    sp = add("predict", cmd_predict, "posterior-predictive grid statistics", data=False)
    sp.add_argument("--draws", type=Path, required=True)
    sp.add_argument("--grid", type=Path, required=True)
    sp.add_argument("--t1", type=int, default=1)
    sp.add_argument("--t2", type=int, default=None)
    sp.add_argument("--stats", default="nbar,ratio,ers")
    sp.add_argument("--n-draws", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("crossval", cmd_crossval, "spatial cross-validation")
    sp.add_argument("--plan", type=Path, default=None, help="JSON plan of site groups")
    sp.add_argument("--groups", type=int, default=10)
    sp.add_argument("--models", default="M0,M1")
    sp.add_argument("--config", type=Path, default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--n-draws", type=int, default=200)
    sp.add_argument("--pooled-auc", action="store_true")

    sp = add("diagnose", cmd_diagnose, "PSRF table for saved draws", data=False)
    sp.add_argument("--draws", type=Path, required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    step = _Steps()
    t0 = time.perf_counter()
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        extra = args.func(args, step)
        step("manifest")
        inputs = [p for p in (getattr(args, k, None) for k in
                              ("temps", "stations", "config", "grid", "plan")) if p]
        config = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
                  if k != "func"}
        chains = extra.pop("chains", []) if isinstance(extra, dict) else []
        rio.write_manifest(args.out, {**config, **(extra or {})}, inputs,
                           time.perf_counter() - t0, chains)
    except Exception as exc:  # categorised exit
        print(f"recordbreak {args.command}: {StepError(step.name, exc)}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
