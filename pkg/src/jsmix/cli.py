"""Command-line interface: simulate, fit, compare, classify, diagnose, experiment."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .errors import InputError, InvariantViolation
from .experiment import ExperimentConfig, run_experiment, survival_pair
from .inference import overlap_index, rhat, summarize_fit
from .model import GroupParams, ModelSpec, build_time_grid, grid_from_day_lags
from .sampler import McmcConfig, Model, run_fit
from .simulate import ScenarioConfig, augment, scenario_expected_nsuper, simulate_population

log = logging.getLogger("jsmix")


def _add_mcmc_flags(p):
    p.add_argument("--chains", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--burnin", type=int)
    p.add_argument("--thin", type=int)
    p.add_argument("--seed", type=int)


def _mcmc_overrides(args, base: McmcConfig) -> McmcConfig:
    d = base.to_dict()
    for flag, key in (("chains", "n_chains"), ("iters", "n_iters"), ("burnin", "burn_in"), ("thin", "thin"), ("seed", "seed")):
        v = getattr(args, flag, None)
        if v is not None:
            d[key] = v
    return McmcConfig(**d)


# -- simulate -------------------------------------------------------------------

def _custom_scenario(path, seed, unit) -> ScenarioConfig:
    """Scenario from JSON: T, M_star, day_lags and a params object."""
    raw = json.loads(Path(path).read_text())
    T = int(raw["T"])
    grid = grid_from_day_lags(raw["day_lags"], unit) if "day_lags" in raw else None
    params = None
    if "params" in raw:
        p = raw["params"]
        params = GroupParams(
            rho=p["rho"],
            phi=p["phi"],
            mu=p["mu"],
            tau=p.get("tau", [0.0] * T),
            weights=p["weights"],
            delta=p.get("delta", 0.0),
            part_time=p.get("part_time"),
        )
    names = tuple(raw.get("group_names", [str(g + 1) for g in range(params.G)] if params else ("R", "P", "T")))
    return ScenarioConfig(
        T=T,
        M_star=int(raw.get("M_star", 500)),
        params=params,
        lag_mode="custom" if grid is not None else raw.get("lag_mode", "scenario"),
        grid=grid,
        seed=seed,
        unit=unit,
        group_names=names,
    )


def cmd_simulate(args) -> int:
    if args.config:
        cfg = _custom_scenario(args.config, args.seed, args.unit)
    else:
        cfg = ScenarioConfig(T=args.scenario, M_star=args.m_star, seed=args.seed, unit=args.unit, lag_mode=args.lags)
    data, truth = simulate_population(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_capture_csv(out / "captures.csv", data)
    io.write_occasions_csv(out / "occasions.csv", truth.grid)
    io.write_csv_rows(
        out / "truth_labels.csv",
        ["id", "group"],
        [(rid, truth.group_names[g]) for rid, g in zip(data.ids, truth.observed_labels)],
    )
    p = truth.params
    io.write_json(
        out / "truth.json",
        {
            "T": cfg.T,
            "M_star": cfg.M_star,
            "seed": cfg.seed,
            "D": data.D,
            "N_super": truth.N_super,
            "N_t": truth.N_t.tolist(),
            "N_group": dict(zip(truth.group_names, truth.N_group.tolist())),
            "params": {
                "rho": p.rho.tolist(),
                "phi": p.phi.tolist(),
                "mu": p.mu.tolist(),
                "tau": p.tau.tolist(),
                "weights": p.weights.tolist(),
                "delta": p.delta,
                "part_time": p.part_time.tolist(),
            },
        },
    )
    print(f"simulated D={data.D} T={data.T} N_super={truth.N_super} -> {out}")
    return 0


# -- fit ------------------------------------------------------------------------

def _resolve_fit_config(args) -> io.RunConfig:
    cfg = io.load_config(args.config) if args.config else io.RunConfig()
    d = cfg.to_dict()
    d["jobs"] = cfg.jobs
    for flag in ("data", "occasions", "model", "unit", "augment", "out", "jobs"):
        v = getattr(args, flag, None)
        if v is not None:
            d[flag] = v
    d["mcmc"] = _mcmc_overrides(args, cfg.mcmc).to_dict()
    return io.RunConfig.from_dict(d)


def _calendar(cfg: io.RunConfig, occ: io.Occasions, T: int):
    cal = cfg.calendar
    if cal is None:
        return None
    if cal == "year":
        return occ.calendar_years()
    if isinstance(cal, list) and len(cal) == T:
        return cal
    raise InputError("calendar must be \"year\" or a list with one label per occasion")


def cmd_fit(args) -> int:
    cfg = _resolve_fit_config(args)
    cfg.check_files()
    data = io.read_capture_csv(cfg.data)
    occ = io.read_occasions_csv(cfg.occasions)
    if len(occ.offsets) != data.T:
        raise InputError(f"capture file has {data.T} occasions, occasions file has {len(occ.offsets)}")
    grid = build_time_grid(occ.offsets, cfg.unit)
    model = Model(augment(data, cfg.augment), cfg.model_spec(), grid, cfg.prior_config())
    store = run_fit(model, cfg.mcmc, jobs=cfg.jobs)
    summary = summarize_fit(store, calendar=_calendar(cfg, occ, data.T))
    # the output location does not change results, so it stays out of the manifest
    resolved = {k: v for k, v in cfg.to_dict().items() if k != "out"}
    io.write_outputs(store, summary, cfg.out, resolved, data.ids)
    ns = summary.abundance["N_super"]
    print(
        f"{summary.model}: N_super {ns['median']:.1f} [{ns['lower']:.1f}, {ns['upper']:.1f}]"
        f"  WAIC {summary.waic['waic']:.2f}  max R-hat {summary.diagnostics['max_rhat']:.3f}  -> {cfg.out}"
    )
    return 0


# -- compare / classify / diagnose -----------------------------------------------

def _fit_dirs(paths) -> list[Path]:
    out = []
    for p in map(Path, paths):
        if (p / "manifest.json").exists():
            out.append(p)
        elif p.is_dir():
            out.extend(sorted(q.parent for q in p.glob("*/manifest.json")))
    if not out:
        raise InputError("no fit directories found")
    return out


def cmd_compare(args) -> int:
    rows = []
    for d in _fit_dirs(args.fits):
        summ = json.loads((d / "summary.json").read_text())
        ns = summ["abundance"]["N_super"]
        w = summ["waic"]
        rows.append((summ["model"], w["waic"], w["lppd"], w["p_waic"], ns["median"], ns["lower"], ns["upper"], str(d)))
    rows.sort(key=lambda r: (r[1], r[0]))
    header = ["model", "waic", "lppd", "p_waic", "N_super_median", "N_super_lower", "N_super_upper", "fit"]
    if args.out:
        io.write_csv_rows(args.out, header, rows)
    print(f"{'model':<10}{'WAIC':>12}{'p_waic':>10}{'N_super':>10}")
    for r in rows:
        print(f"{r[0]:<10}{r[1]:>12.2f}{r[3]:>10.2f}{r[4]:>10.1f}")
    return 0


def cmd_classify(args) -> int:
    store, manifest = io.load_fit(args.fit)
    summ = summarize_fit(store)
    text = summ.membership_csv(manifest["ids"])
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_diagnose(args) -> int:
    store, _ = io.load_fit(args.fit)
    out = Path(args.out or Path(args.fit) / "diagnostics")
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name in store.parameter_names():
        val, flag = rhat(store.chains(name), return_flag=True)
        rows.append((name, val, int(flag)))
    io.write_csv_rows(out / "rhat.csv", ["parameter", "rhat", "constant"], rows)
    pair = survival_pair(store.spec)
    surv = store.names["survival"]
    ov_rows = []
    if pair is not None:
        ov_rows.append((pair[0], pair[1], overlap_index(store.pooled(pair[0]), store.pooled(pair[1]))))
    elif len(surv) > 1 and len(surv) <= 6:
        for i in range(len(surv)):
            for j in range(i + 1, len(surv)):
                ov_rows.append((surv[i], surv[j], overlap_index(store.pooled(surv[i]), store.pooled(surv[j]))))
    io.write_csv_rows(out / "overlap.csv", ["a", "b", "ov"], ov_rows)
    main = [n for n in ("N_super", *surv, *store.names["capture"][:3]) if n in store.parameter_names()]
    with (out / "traces.csv").open("w") as fh:
        fh.write("chain,iter,parameter,value\n")
        for name in main:
            ch = store.chains(name)
            for c in range(ch.shape[0]):
                fh.write("".join(f"{c + 1},{it},{name},{io._num(v)}\n" for it, v in zip(store.iterations, ch[c])))
    finite = [r[1] for r in rows if np.isfinite(r[1])]
    print(f"max R-hat {max(finite):.4f} over {len(rows)} parameters -> {out}")
    for a, b, ov in ov_rows:
        print(f"OV({a}, {b}) = {ov:.3f}")
    return 0


# -- experiment -----------------------------------------------------------------

def cmd_experiment(args) -> int:
    base = McmcConfig(n_chains=2, n_iters=6000, burn_in=1000, thin=1)
    mc = _mcmc_overrides(args, base)
    cfg = ExperimentConfig(
        scenarios=tuple(int(x) for x in args.scenarios.split(",")),
        models=tuple(x.strip() for x in args.models.split(",")),
        replicas=args.replicas,
        mcmc=mc,
        augment=args.augment,
        seed=mc.seed,
        fixed_tau=args.fixed_tau,
    )
    for m in cfg.models:
        ModelSpec.from_name(m)
    for T in cfg.scenarios:
        scenario_expected_nsuper(T)

    def progress(rec):
        log.info("T=%s replica %s %s: N_super %.1f (truth %s)", rec["scenario"], rec["replica"], rec["model"], rec["median"], rec["truth"])

    records, table = run_experiment(cfg, jobs=args.jobs or 1, progress=progress)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_json(out / "records.json", records)
    (out / "metrics.csv").write_text(table.to_csv())
    print(table.to_csv(), end="")
    return 0


# -- entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="jsmix", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a capture-recapture data set")
    p.add_argument("--scenario", type=int, default=10, help="T of a built-in scenario (10, 20, 30, 40)")
    p.add_argument("--config", help="JSON with a custom scenario")
    p.add_argument("--m-star", type=int, default=500)
    p.add_argument("--lags", choices=("scenario", "random"), default="scenario")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--unit", default="month")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit a model to capture data")
    p.add_argument("--data")
    p.add_argument("--occasions")
    p.add_argument("--model", help="rpt or m1..m10")
    p.add_argument("--config", help="JSON run configuration or a previous manifest.json")
    _add_mcmc_flags(p)
    p.add_argument("--augment", type=int)
    p.add_argument("--unit")
    p.add_argument("--out")
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("compare", help="WAIC table over fit directories")
    p.add_argument("fits", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("classify", help="MAP labels and membership probabilities")
    p.add_argument("--fit", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("diagnose", help="R-hat, survival overlap and traces")
    p.add_argument("--fit", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("experiment", help="simulation study over scenarios, models and replicas")
    p.add_argument("--scenarios", default="10")
    p.add_argument("--models", default="rpt,m1")
    p.add_argument("--replicas", type=int, default=10)
    _add_mcmc_flags(p)
    p.add_argument("--augment", type=int, default=500)
    p.add_argument("--jobs", type=int)
    p.add_argument("--fixed-tau", action="store_true", help="share one set of occasion effects across replicas")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_experiment)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except InvariantViolation as exc:
        print(f"sampler invariant violated: {exc}", file=sys.stderr)
        if exc.dump:
            print(json.dumps(exc.dump, sort_keys=True), file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
