"""Simulation-study harness: scenarios x models x replicas."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .inference import experiment_metrics, map_classify, mauc, overlap_index, summarize_fit
from .model import ModelSpec
from .sampler import McmcConfig, Model, run_fit
from .simulate import ScenarioConfig, augment, scenario_expected_nsuper, simulate_population

MAIN_PARAMETERS = ("N_super", "phi[T]", "phi[NT]", "delta", "mu")


@dataclass
class ExperimentConfig:
    scenarios: tuple = (10,)
    models: tuple = ("rpt",)
    replicas: int = 10
    mcmc: McmcConfig = field(default_factory=lambda: McmcConfig(n_chains=2, n_iters=6000, burn_in=1000, thin=1))
    augment: int = 500
    M_star: int = 500
    seed: int = 2024
    fixed_tau: bool = False

    def jobs(self) -> list[tuple]:
        """(T, replica, model, data seed, tau seed, chain seed) per fit."""
        root = np.random.SeedSequence(self.seed)
        out = []
        for T, scen_ss in zip(self.scenarios, root.spawn(len(self.scenarios))):
            tau_ss, *rep_ss = scen_ss.spawn(self.replicas + 1)
            tau_seed = int(tau_ss.generate_state(1)[0]) if self.fixed_tau else None
            for r, ss in enumerate(rep_ss):
                data_seed, fit_seed = (int(x) for x in ss.generate_state(2))
                for model in self.models:
                    out.append((int(T), r, str(model), data_seed, tau_seed, fit_seed))
        return out


def survival_pair(spec: ModelSpec) -> tuple[str, str] | None:
    if spec.rpt:
        return "phi[T]", "phi[NT]"
    if spec.phi_structure.value == "group" and spec.G == 2:
        return "phi[1]", "phi[2]"
    return None


def replica_job(cfg: ExperimentConfig, job: tuple) -> dict:
    """Simulate one replica and fit one model to it; returns a flat record."""
    T, r, model_name, data_seed, tau_seed, fit_seed = job
    data, truth = simulate_population(ScenarioConfig(T=T, M_star=cfg.M_star, seed=data_seed, tau_seed=tau_seed))
    spec = ModelSpec.from_name(model_name)
    model = Model(augment(data, cfg.augment), spec, truth.grid)
    mc = McmcConfig(**{**cfg.mcmc.to_dict(), "seed": fit_seed})
    store = run_fit(model, mc)
    fs = summarize_fit(store)
    ns = fs.abundance["N_super"]
    rec = {
        "scenario": T,
        "replica": r,
        "model": model_name,
        "truth": truth.N_super,
        "expected": scenario_expected_nsuper(T, cfg.M_star),
        "D": data.D,
        "median": ns["median"],
        "lower": ns["lower"],
        "upper": ns["upper"],
        "waic": fs.waic["waic"],
        "rhat": {k: fs.parameters[k]["rhat"] for k in MAIN_PARAMETERS if k in fs.parameters},
    }
    pair = survival_pair(spec)
    if pair is not None:
        a, b = store.pooled(pair[0]), store.pooled(pair[1])
        rec["ov"] = overlap_index(a, b)
        rec["ov_pooled_bw"] = overlap_index(a, b, bandwidth="pooled")
    if spec.rpt:
        labels = truth.observed_labels
        rec["mauc"] = mauc(fs.membership, labels)
        rec["map_accuracy"] = float(np.mean(map_classify(fs.membership) == labels))
    return rec


def _run(args):
    return replica_job(*args)


def run_experiment(cfg: ExperimentConfig, jobs: int = 1, progress=None):
    """Run every job; records come back in job order whatever ``jobs`` is."""
    tasks = [(cfg, j) for j in cfg.jobs()]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_run, tasks))
    else:
        records = []
        for t in tasks:
            records.append(_run(t))
            if progress is not None:
                progress(records[-1])
    return records, experiment_metrics(records)
