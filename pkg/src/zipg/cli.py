"""Command-line interface: fit, test, simulate, benchmark, gof."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from typing import Optional

import numpy as np

from .em import FitError, fit, fit_full
from .inference import (
    InferenceError,
    LinearHypothesis,
    _report_from_draws,
    bh_fdr,
    bootstrap_draws,
    confidence_interval,
    ks_goodness_of_fit,
    likelihood_ratio_test,
    parametric_bootstrap_wald,
    predictive_quantiles,
)
from .io import RunConfig, filter_taxa, load_dataset, provenance, write_results
from .likelihood import NonFiniteLikelihood
from .simulation import ScenarioConfig, run_experiment, simulate_dataset
from . import rng as rngmod

log = logging.getLogger("zipg")

FIT_COLUMNS = ("taxon", "coefficient", "estimate", "loglik", "bic", "aic", "n_em_iterations",
               "converged")
GOF_COLUMNS = ("taxon", "ks_statistic", "ks_p", "n_obs")
SIM_COLUMNS = ("parameter", "truth", "avg_bias", "bias_se", "avg_se", "rmse", "coverage")


def taxon_key(name: str) -> int:
    # stable per-taxon stream key, so results do not depend on row order
    return zlib.crc32(name.encode("utf-8"))


def _split(s: Optional[str]) -> list:
    return [c for c in (s or "").split(",") if c]


def _pmap(fn, items, workers):
    if workers <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _config(args) -> RunConfig:
    base = {}
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            base = json.load(fh)
    cfg = RunConfig.from_dict(base)
    overrides = {
        "mean_cols": _split(args.mean_cols) if args.mean_cols is not None else None,
        "disp_cols": _split(args.disp_cols) if args.disp_cols is not None else None,
        "zi_cols": _split(args.zi_cols) if args.zi_cols is not None else None,
        "offset": args.offset, "B": args.B, "seed": args.seed, "workers": args.workers,
        "min_pobs": args.min_pobs, "max_pobs": args.max_pobs, "resample": args.resample,
        "ci": args.ci, "out": args.out,
        "tests": _split(args.tests) if getattr(args, "tests", None) is not None else None,
        "test_method": getattr(args, "method", None),
        "joint_fdr": True if getattr(args, "joint_fdr", False) else None,
        "q": getattr(args, "q", None),
    }
    d = cfg.to_dict()
    d.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_dict(d)


def _load(args, cfg):
    if not args.counts or not args.covariates:
        raise ValueError("--counts and --covariates are required")
    table, datasets = load_dataset(args.counts, args.covariates, cfg)
    kept, excluded = filter_taxa(table, cfg.min_pobs, cfg.max_pobs)
    for name, reason in excluded:
        log.info("excluded %s: %s", name, reason)
    return kept, {t: datasets[t] for t in kept.taxa}, excluded


def _variant(cfg):
    return "zipg-full" if cfg.zi_cols else "zipg"


def cmd_fit(args) -> int:
    cfg = _config(args)
    table, datasets, excluded = _load(args, cfg)
    spec = cfg.spec_for(_variant(cfg))
    settings = cfg.settings()
    names = spec.param_names()

    def one(taxon):
        try:
            res = fit(datasets[taxon], spec, settings)
        except (FitError, NonFiniteLikelihood) as err:
            return [{"taxon": taxon, "coefficient": None, "error": str(err)}]
        return [{"taxon": taxon, "coefficient": n, "estimate": float(v), "loglik": res.loglik,
                 "bic": res.bic, "aic": res.aic, "n_em_iterations": res.n_em_iterations,
                 "converged": res.converged} for n, v in zip(names, res.params)]

    rows = [r for rows in _pmap(one, table.taxa, cfg.workers) for r in rows]
    write_results(cfg.out, "fit", rows, provenance(cfg, command="fit", excluded=excluded),
                  FIT_COLUMNS)
    return 0


def _coefficients(cfg, spec) -> list:
    if cfg.tests:
        return list(cfg.tests)
    names = spec.param_names()
    return [n for n in names if (n.startswith("beta") and not n.startswith("beta_star")
                                 and n != "beta0") or (n.startswith("beta_star")
                                                       and n != "beta_star0")]


def cmd_test(args) -> int:
    cfg = _config(args)
    table, datasets, excluded = _load(args, cfg)
    spec = cfg.spec_for(_variant(cfg))
    settings = cfg.settings()
    coefs = _coefficients(cfg, spec)
    for c in coefs:
        spec.index_of(c)

    def one(taxon):
        data = datasets[taxon]
        key = (cfg.seed, taxon_key(taxon))
        try:
            base = fit(data, spec, settings)
            draws = bootstrap_draws(data, spec, base, cfg.B, cfg.resample, key, 1, settings)
        except (FitError, NonFiniteLikelihood) as err:
            return [{"taxon": taxon, "coefficient": c, "method": cfg.test_method,
                     "error": str(err)} for c in coefs]
        ok = np.all(np.isfinite(draws), axis=1)
        se = np.std(draws[ok], axis=0, ddof=1)
        out = []
        for c in coefs:
            j = spec.index_of(c)
            hyp = LinearHypothesis.coefficient(spec, c)
            row = {"taxon": taxon, "coefficient": c, "estimate": float(base.params[j]),
                   "boot_se": float(se[j]), "method": cfg.test_method}
            try:
                ci = confidence_interval(base, draws, j, cfg.level, cfg.ci, data=data,
                                         settings=settings)
                row["ci_lo"], row["ci_hi"] = ci.lower, ci.upper
                if cfg.test_method == "bWald":
                    rep = _report_from_draws("bWald", base.params, draws, hyp)
                elif cfg.test_method == "pbWald":
                    rep = parametric_bootstrap_wald(data, spec, hyp, cfg.B, key,
                                                    settings=settings, base=base)
                else:
                    rep = likelihood_ratio_test(data, spec, hyp, settings=settings, base=base)
                row["p"] = rep.p_value
                row["unreliable"] = rep.unreliable
            except InferenceError as err:
                row["error"] = str(err)
            out.append(row)
        return out

    rows = [r for rows in _pmap(one, table.taxa, cfg.workers) for r in rows]
    families = {"all": coefs} if cfg.joint_fdr else {
        "mean": [c for c in coefs if not c.startswith("beta_star")],
        "dispersion": [c for c in coefs if c.startswith("beta_star")],
    }
    for members in families.values():
        idx = [i for i, r in enumerate(rows) if r["coefficient"] in members and "p" in r]
        if idx:
            rejected, qv = bh_fdr([rows[i]["p"] for i in idx], cfg.q)
            for i, qi, rej in zip(idx, qv, rejected):
                rows[i]["q"] = float(qi)
                rows[i]["rejected"] = bool(rej)
    write_results(cfg.out, "test", rows, provenance(cfg, command="test", excluded=excluded))
    return 0


def cmd_gof(args) -> int:
    cfg = _config(args)
    table, datasets, excluded = _load(args, cfg)
    spec = cfg.spec_for(_variant(cfg))
    settings = cfg.settings()

    def one(taxon):
        data = datasets[taxon]
        try:
            res = fit(data, spec, settings)
        except (FitError, NonFiniteLikelihood) as err:
            return {"taxon": taxon, "error": str(err)}, []
        key = (cfg.seed, taxon_key(taxon))
        stat, p = ks_goodness_of_fit(data, res, key)
        q = predictive_quantiles(data, res, key)
        return ({"taxon": taxon, "ks_statistic": stat, "ks_p": p, "n_obs": data.n_obs},
                [{"taxon": taxon, "prob": float(a), "observed": float(b), "predicted": float(c)}
                 for a, b, c in q])

    out = _pmap(one, table.taxa, cfg.workers)
    meta = provenance(cfg, command="gof", excluded=excluded)
    write_results(cfg.out, "gof", [o[0] for o in out], meta, GOF_COLUMNS)
    write_results(cfg.out, "gof_quantiles", [r for o in out for r in o[1]], meta,
                  ("taxon", "prob", "observed", "predicted"))
    return 0


def _scenario(args):
    with open(args.scenario, encoding="utf-8") as fh:
        doc = json.load(fh)
    run = {k: doc.pop(k) for k in ("L", "B", "tests", "alpha", "level", "ci_method",
                                   "resample_unit") if k in doc}
    return ScenarioConfig(**doc), run


def cmd_simulate(args) -> int:
    scenario, run = _scenario(args)
    if args.seed is not None:
        scenario.seed = args.seed
    L = args.L if args.L is not None else run.pop("L", 200)
    run.pop("L", None)
    B = args.B if args.B is not None else run.pop("B", 200)
    run.pop("B", None)
    summary = run_experiment(scenario, L, B, workers=args.workers or 1, **run)
    rows = [summary.row(n) for n in summary.names]
    meta = provenance(None, command="simulate", scenario=scenario.to_dict(), L=L, B=B,
                      seed=scenario.seed, run=run, n_failed=summary.n_failed,
                      rejection_rate=summary.rejection_rate)
    write_results(args.out or "results", "simulate", rows, meta, SIM_COLUMNS)
    return 0


def cmd_benchmark(args) -> int:
    scenario, _ = _scenario(args) if args.scenario else (ScenarioConfig(), {})
    n = args.L or 20
    data = [simulate_dataset(scenario, rngmod.stream(scenario.seed, rngmod.DATA, i))
            for i in range(n)]
    fitter = fit_full if scenario.full_variant else None
    from .model import ModelSpec
    spec = ModelSpec.for_data(data[0], variant="zipg-full" if fitter else "zipg")
    fit(data[0], spec)  # compile
    t0 = time.perf_counter()
    its = [fit(d, spec).n_em_iterations for d in data]
    elapsed = time.perf_counter() - t0
    rows = [{"n_fits": n, "seconds": elapsed, "per_fit": elapsed / n,
             "mean_em_iterations": float(np.mean(its)), "n_obs": data[0].n_obs}]
    write_results(args.out or "results", "benchmark", rows,
                  provenance(None, command="benchmark", scenario=scenario.to_dict()),
                  ("n_fits", "seconds", "per_fit", "mean_em_iterations", "n_obs"))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="zipg", description="ZIPG regression for longitudinal "
                                "microbiome counts")
    sub = p.add_subparsers(dest="command", required=True)

    def data_flags(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--counts")
        sp.add_argument("--covariates")
        sp.add_argument("--mean-cols")
        sp.add_argument("--disp-cols")
        sp.add_argument("--zi-cols")
        sp.add_argument("--offset", choices=["depth", "median-ratios", "none"])
        sp.add_argument("--B", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int)
        sp.add_argument("--min-pobs", type=float)
        sp.add_argument("--max-pobs", type=float)
        sp.add_argument("--resample", choices=["measurement", "subject"])
        sp.add_argument("--ci", choices=["normal", "quantile", "bca"])
        sp.add_argument("--out")

    sp = sub.add_parser("fit", help="fit every taxon")
    data_flags(sp)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("test", help="bootstrap tests with BH adjustment")
    data_flags(sp)
    sp.add_argument("--tests", help="comma-separated coefficient names (default: all slopes)")
    sp.add_argument("--method", choices=["bWald", "pbWald", "LRT"])
    sp.add_argument("--q", type=float)
    sp.add_argument("--joint-fdr", action="store_true",
                    help="one BH family instead of separate mean and dispersion families")
    sp.set_defaults(func=cmd_test)

    sp = sub.add_parser("gof", help="KS goodness of fit and quantile tables")
    data_flags(sp)
    sp.set_defaults(func=cmd_gof)

    for name, func in (("simulate", cmd_simulate), ("benchmark", cmd_benchmark)):
        sp = sub.add_parser(name)
        sp.add_argument("--scenario", required=name == "simulate")
        sp.add_argument("--L", type=int)
        sp.add_argument("--B", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int)
        sp.add_argument("--out")
        sp.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except Exception as err:  # noqa: BLE001 - reported as a structured record
        record = {"error": type(err).__name__, "message": str(err), "command": args.command}
        line = getattr(err, "line", None)
        if line is not None:
            record["line"] = line
        print(json.dumps(record), file=sys.stderr)
        out = getattr(args, "out", None)
        if out:
            os.makedirs(out, exist_ok=True)
            with open(os.path.join(out, "error.json"), "w", encoding="utf-8") as fh:
                json.dump(record, fh, indent=2)
        return 1


if __name__ == "__main__":
    sys.exit(main())
