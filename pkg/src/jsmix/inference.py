"""Posterior post-processing: WAIC, R-hat, overlap, classification, summaries."""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp
from scipy.stats import gaussian_kde, rankdata

from .errors import InputError

# rows of the pointwise matrix are draws, columns are units
WAIC_UNIT = "augmented_row"


def waic(loglik, multiplicity=None) -> tuple[float, float, float]:
    """Widely applicable information criterion from pointwise log-likelihoods.

    Parameters
    ----------
    loglik : array (S, N)
        log p(y_i | theta_s) per draw and unit.
    multiplicity : array (N,), optional
        Number of identical units each column stands for.

    Returns
    -------
    (waic, lppd, p_waic)
    """
    ll = np.asarray(loglik, dtype=float)
    if ll.ndim != 2:
        raise InputError("pointwise log-likelihood must be a draws x units matrix")
    S = ll.shape[0]
    if S < 2:
        raise InputError("WAIC needs at least two draws")
    w = np.ones(ll.shape[1]) if multiplicity is None else np.asarray(multiplicity, dtype=float)
    lppd_i = logsumexp(ll, axis=0) - np.log(S)
    p_i = np.var(ll, axis=0, ddof=1)
    lppd = float(np.dot(w, lppd_i))
    p_waic = float(np.dot(w, p_i))
    return -2.0 * (lppd - p_waic), lppd, p_waic


def rhat(chains, return_flag: bool = False):
    """Split-chain potential scale reduction factor.

    ``chains`` has shape (C, S). Each chain is cut in two halves (dropping
    the middle draw when S is odd). Constant input gives 1 and, with
    ``return_flag``, a True flag.
    """
    x = np.asarray(chains, dtype=float)
    if x.ndim != 2:
        raise InputError("rhat needs a (chains, draws) array")
    n = x.shape[1] // 2
    if n < 2:
        raise InputError("chains too short to split")
    halves = np.concatenate([x[:, :n], x[:, -n:]], axis=0)
    means = halves.mean(axis=1)
    W = halves.var(axis=1, ddof=1).mean()
    B = n * means.var(ddof=1)
    if W <= 0.0:
        val, flag = 1.0, True
        if B > 0.0:
            val, flag = float("inf"), False
    else:
        var_plus = (n - 1) / n * W + B / n
        val, flag = float(np.sqrt(var_plus / W)), False
    return (val, flag) if return_flag else val


def silverman_bandwidth(x) -> float:
    x = np.asarray(x, dtype=float)
    sd = x.std(ddof=1) if x.size > 1 else 0.0
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.349) if q75 > q25 else sd
    if spread <= 0.0:
        spread = max(abs(x.mean()), 1.0) * 1e-3
    return 0.9 * spread * x.size ** (-0.2)


def _kde_on(x, h, grid):
    if x.size == 1 or np.ptp(x) == 0.0:
        return np.exp(-0.5 * ((grid - x[0]) / h) ** 2) / (h * np.sqrt(2 * np.pi))
    return gaussian_kde(x, bw_method=h / x.std(ddof=1))(grid)


def overlap_index(a, b, n_grid: int = 1024, bandwidth: str = "separate") -> float:
    """Overlap of two kernel density estimates, in [0, 1].

    Each sample gets its own Gaussian bandwidth by Silverman's rule
    (``bandwidth="pooled"`` uses one bandwidth from the pooled sample). The
    pointwise minimum is integrated on a shared grid spanning both samples.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise InputError("overlap needs two non-empty samples")
    pooled = np.concatenate([a, b])
    if bandwidth == "pooled":
        ha = hb = silverman_bandwidth(pooled)
    elif bandwidth == "separate":
        ha, hb = silverman_bandwidth(a), silverman_bandwidth(b)
    else:
        raise InputError(f"unknown bandwidth rule {bandwidth!r}")
    pad = 4 * max(ha, hb)
    grid = np.linspace(pooled.min() - pad, pooled.max() + pad, n_grid)
    fa, fb = _kde_on(a, ha, grid), _kde_on(b, hb, grid)
    ov = np.trapezoid(np.minimum(fa, fb), grid)
    return float(np.clip(ov, 0.0, 1.0))


def _pair_auc(score, positive, negative) -> float:
    s = np.concatenate([score[positive], score[negative]])
    n1, n0 = positive.sum(), negative.sum()
    ranks = rankdata(s)
    return float((ranks[:n1].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def mauc(prob, labels, return_skipped: bool = False):
    """Hand-Till multi-class AUC.

    ``prob`` is (D, G) membership probabilities, ``labels`` the true group
    indices. Pairs with an absent class are skipped.
    """
    prob = np.asarray(prob, dtype=float)
    labels = np.asarray(labels)
    G = prob.shape[1]
    total, n_pairs, skipped = 0.0, 0, []
    for i in range(G):
        for j in range(i + 1, G):
            in_i, in_j = labels == i, labels == j
            if not in_i.any() or not in_j.any():
                skipped.append((i, j))
                continue
            a_ij = _pair_auc(prob[:, i], in_i, in_j)
            a_ji = _pair_auc(prob[:, j], in_j, in_i)
            total += 0.5 * (a_ij + a_ji)
            n_pairs += 1
    if skipped:
        warnings.warn(f"mAUC skipped class pairs absent from truth: {skipped}", stacklevel=2)
    value = total / n_pairs if n_pairs else float("nan")
    return (value, skipped) if return_skipped else value


def map_classify(membership) -> np.ndarray:
    """Most probable group per row; ties go to the lowest index."""
    return np.argmax(np.asarray(membership), axis=1)


def membership_matrix(labels, G: int, rows=None) -> np.ndarray:
    """Per-row label frequencies over draws; ``labels`` is (S, M)."""
    labels = np.asarray(labels)
    if rows is not None:
        labels = labels[:, rows]
    S, n = labels.shape
    out = np.zeros((n, G))
    for g in range(G):
        out[:, g] = (labels == g).sum(axis=0)
    return out / S


def interval(x, level: float = 0.95) -> dict:
    x = np.asarray(x, dtype=float)
    tail = 50.0 * (1.0 - level)
    lo, med, hi = np.percentile(x, [tail, 50.0, 100.0 - tail])
    return {"median": float(med), "mean": float(x.mean()), "lower": float(lo), "upper": float(hi)}


def calendar_blocks(calendar, T: int) -> list[tuple[object, int, int]]:
    """Contiguous (year, first, last) occasion ranges of a calendar mapping."""
    calendar = list(calendar)
    if len(calendar) != T:
        raise InputError(f"calendar maps {len(calendar)} occasions, expected {T}")
    blocks = []
    for t, year in enumerate(calendar):
        if blocks and blocks[-1][0] == year:
            blocks[-1][2] = t
        else:
            if any(b[0] == year for b in blocks):
                raise InputError(f"occasions of year {year!r} are not contiguous")
            blocks.append([year, t, t])
    return [tuple(b) for b in blocks]


def yearly_sizes(entry, exit_, labels, calendar, G: int) -> dict:
    """Per-draw counts of rows alive at some occasion of each year, by group.

    ``entry``/``exit_`` hold first/last alive occasion per row (-1 if never
    alive), shape (S, M). Returns ``{year: array (S, G)}``.
    """
    entry = np.asarray(entry)
    exit_ = np.asarray(exit_)
    labels = np.asarray(labels)
    out = {}
    for year, a, b in calendar_blocks(calendar, len(calendar)):
        present = (entry >= 0) & (entry <= b) & (exit_ >= a)
        counts = np.zeros((entry.shape[0], G), dtype=np.int64)
        for g in range(G):
            counts[:, g] = (present & (labels == g)).sum(axis=1)
        out[year] = counts
    return out


def uncaught_composition(draws_uncaught) -> np.ndarray:
    """Per-draw group fractions among alive-but-never-captured rows.

    Draws with no such rows are dropped. Returns (S', G).
    """
    u = np.asarray(draws_uncaught, dtype=float)
    tot = u.sum(axis=1)
    keep = tot > 0
    return u[keep] / tot[keep, None]


@dataclass
class FitSummary:
    model: str
    parameters: dict
    abundance: dict
    waic: dict
    membership: np.ndarray
    group_names: list
    uncaught: dict = field(default_factory=dict)
    yearly: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "parameters": self.parameters,
            "abundance": self.abundance,
            "waic": self.waic,
            "group_names": list(self.group_names),
            "uncaught_composition": self.uncaught,
            "yearly": self.yearly,
            "diagnostics": self.diagnostics,
        }

    def membership_csv(self, ids) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id"] + [f"p_{g}" for g in self.group_names] + ["map"])
        labels = map_classify(self.membership)
        for rid, row, lab in zip(ids, self.membership, labels):
            w.writerow([rid] + [repr(float(x)) for x in row] + [self.group_names[lab]])
        return buf.getvalue()


def summarize_fit(store, calendar=None, level: float = 0.95) -> FitSummary:
    """Collapse a :class:`~jsmix.sampler.DrawStore` into reported quantities."""
    params = {}
    for name in store.parameter_names():
        ch = store.chains(name)
        entry = interval(ch.reshape(-1), level)
        if store.n_chains > 1 or ch.shape[1] >= 4:
            entry["rhat"], flag = rhat(ch, return_flag=True)
            if flag:
                entry["rhat_constant"] = True
        params[name] = entry
    abundance = {
        "N_super": params["N_super"],
        "N_t": [params[f"N[{t + 1}]"] for t in range(store.grid.T)],
        "N_group": {g: params[f"N_group[{g}]"] for g in store.spec.group_names},
    }
    w, lppd, p = waic(store.pointwise_loglik(), store.multiplicity)
    waic_rec = {"waic": w, "lppd": lppd, "p_waic": p, "unit": WAIC_UNIT, "n_units": int(store.M)}
    G = store.spec.G
    names = list(store.spec.group_names)
    if store.labels is not None:
        memb = membership_matrix(store.pooled_labels(), G, rows=np.arange(store.n_observed))
    else:
        memb = np.full((store.n_observed, G), np.nan)
    unc = np.stack([store.pooled(f"uncaught[{g}]") for g in names], axis=1)
    frac = uncaught_composition(unc)
    uncaught = {g: float(frac[:, k].mean()) if len(frac) else float("nan") for k, g in enumerate(names)}
    yearly = {}
    if calendar is not None and store.entry is not None:
        S = store.n_chains * store.n_draws
        sizes = yearly_sizes(
            store.entry.reshape(S, -1), store.exit.reshape(S, -1), store.pooled_labels(), calendar, G
        )
        for year, counts in sizes.items():
            rec = {"total": interval(counts.sum(axis=1), level)}
            rec.update({g: interval(counts[:, k], level) for k, g in enumerate(names)})
            yearly[str(year)] = rec
    diag = {
        "accept": [{k: np.asarray(v).tolist() for k, v in a.items()} for a in store.accept],
        "max_rhat": max((v.get("rhat", 1.0) for v in params.values() if np.isfinite(v.get("rhat", 1.0))), default=1.0),
    }
    return FitSummary(
        model=store.spec.label,
        parameters=params,
        abundance=abundance,
        waic=waic_rec,
        membership=memb,
        group_names=names,
        uncaught=uncaught,
        yearly=yearly,
        diagnostics=diag,
    )


@dataclass
class MetricsTable:
    """Simulation-study metrics, one row per (scenario, model)."""

    rows: list

    def to_csv(self) -> str:
        if not self.rows:
            return ""
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(self.rows[0]), lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow(r)
        return buf.getvalue()

    def get(self, scenario, model) -> dict:
        for r in self.rows:
            if r["scenario"] == scenario and r["model"] == model:
                return r
        raise KeyError((scenario, model))


def _finite(x):
    return [v for v in x if v is not None and np.isfinite(v)]


def _nanmedian(x):
    x = _finite(x)
    return float(np.median(x)) if x else float("nan")


def _nanmean(x):
    x = _finite(x)
    return float(np.mean(x)) if x else float("nan")


def experiment_metrics(records) -> MetricsTable:
    """Aggregate replica results.

    Each record is a dict with keys ``scenario``, ``model``, ``replica``,
    ``truth`` (N_super), ``expected`` (E[N_super]), ``median``, ``lower``,
    ``upper``, ``waic`` and optionally ``ov``, ``mauc``, ``map_accuracy``.
OV is averaged over replicas; mAUC and MAP accuracy are medians.
    """
    records = list(records)
    best = {}
    for r in records:
        key = (r["scenario"], r["replica"])
        if key not in best or r["waic"] < best[key][0]:
            best[key] = (r["waic"], r["model"])
    rows = []
    for scen in sorted({r["scenario"] for r in records}, key=str):
        for model in sorted({r["model"] for r in records if r["scenario"] == scen}, key=str):
            rs = [r for r in records if r["scenario"] == scen and r["model"] == model]
            expected = rs[0]["expected"]
            err = np.array([abs(r["median"] - r["truth"]) for r in rs])
            ciw = np.array([r["upper"] - r["lower"] for r in rs])
            cov = np.mean([r["lower"] <= r["truth"] <= r["upper"] for r in rs])
            n_best = sum(best[(scen, r["replica"])][1] == model for r in rs)
            rows.append(
                {
                    "scenario": scen,
                    "model": model,
                    "replicas": len(rs),
                    "MAE": float(err.mean()),
                    "MAE_rel": float(err.mean() / expected),
                    "coverage": float(cov),
                    "CIW_rel": float(ciw.mean() / expected),
                    "median_WAIC": float(np.median([r["waic"] for r in rs])),
                    "pct_best_WAIC": float(100.0 * n_best / len(rs)),
                    "OV": _nanmean([r.get("ov") for r in rs]),
                    "mAUC": _nanmedian([r.get("mauc") for r in rs]),
                    "MAP_accuracy": _nanmedian([r.get("map_accuracy") for r in rs]),
                }
            )
    return MetricsTable(rows)
