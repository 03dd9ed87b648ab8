"""Beta-family priors, ordered chains and the objective recruitment prior.

Truncated Beta (``tBeta``) renormalises a Beta density on ``(lower, upper)``;
restricted Beta (``rBeta``) shifts and scales a Beta to ``(lower, upper)``.
Ordered chains stack either kind so that ``u_1 < u_2 < ... < u_G``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import betainc, betaincinv, betaln, xlog1py, xlogy

from .errors import InputError
from .model import LOG_ZERO

PLAIN, TRUNCATED, RESTRICTED = "plain", "truncated", "restricted"


@dataclass(frozen=True)
class BetaSpec:
    alpha: float
    beta: float
    lower: float = 0.0
    upper: float = 1.0
    kind: str = PLAIN

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise InputError("Beta shapes must be positive")
        if not (0.0 <= self.lower < self.upper <= 1.0):
            raise InputError(f"invalid support ({self.lower}, {self.upper})")
        if self.kind not in (PLAIN, TRUNCATED, RESTRICTED):
            raise InputError(f"unknown Beta kind {self.kind!r}")
        if self.kind == PLAIN and (self.lower, self.upper) != (0.0, 1.0):
            raise InputError("a plain Beta lives on (0, 1)")

    def on(self, lower: float, upper: float = 1.0) -> "BetaSpec":
        return replace(self, lower=lower, upper=upper)


def _beta_logpdf(x, a, b):
    return xlogy(a - 1.0, x) + xlog1py(b - 1.0, -x) - betaln(a, b)


def _log_mass(a, b, lower, upper):
    """log P(lower < X < upper) for X ~ Beta(a, b), tail-accurate."""
    if lower >= 0.5:
        # upper tail through the mirrored variable 1 - X ~ Beta(b, a)
        return np.log(betainc(b, a, 1.0 - lower) - betainc(b, a, 1.0 - upper))
    return np.log(betainc(a, b, upper) - betainc(a, b, lower))


def beta_logpdf(x, spec: BetaSpec):
    """Log-density for any :class:`BetaSpec` kind; ``LOG_ZERO`` off support."""
    x = np.asarray(x, dtype=float)
    inside = (x > spec.lower) & (x < spec.upper)
    if spec.kind == RESTRICTED:
        width = spec.upper - spec.lower
        xs = np.where(inside, (x - spec.lower) / width, 0.5)
        out = _beta_logpdf(xs, spec.alpha, spec.beta) - np.log(width)
    else:
        xs = np.where(inside, x, 0.5)
        out = _beta_logpdf(xs, spec.alpha, spec.beta)
        if spec.kind == TRUNCATED:
            out = out - _log_mass(spec.alpha, spec.beta, spec.lower, spec.upper)
    out = np.where(inside, out, LOG_ZERO)
    return float(out) if out.ndim == 0 else out


def tbeta_logpdf(x, spec: BetaSpec):
    if spec.kind != TRUNCATED:
        raise InputError("tbeta_logpdf needs a truncated BetaSpec")
    return beta_logpdf(x, spec)


def rbeta_logpdf(x, spec: BetaSpec):
    if spec.kind != RESTRICTED:
        raise InputError("rbeta_logpdf needs a restricted BetaSpec")
    return beta_logpdf(x, spec)


def tbeta_sample(spec: BetaSpec, rng: np.random.Generator, size=None):
    """Inverse-CDF draw from a truncated Beta on ``(lower, upper)``.

    Works on whichever tail keeps the quantile range well resolved, so a
    lower bound close to 1 stays cheap and exact.
    """
    a, b, lo, hi = spec.alpha, spec.beta, spec.lower, spec.upper
    u = rng.random(size)
    if lo >= 0.5:
        qlo, qhi = betainc(b, a, 1.0 - hi), betainc(b, a, 1.0 - lo)
        x = 1.0 - betaincinv(b, a, qlo + u * (qhi - qlo))
    else:
        qlo, qhi = betainc(a, b, lo), betainc(a, b, hi)
        x = betaincinv(a, b, qlo + u * (qhi - qlo))
    # quantile round-off can land on the boundary
    x = np.clip(x, np.nextafter(lo, 1.0), np.nextafter(hi, 0.0))
    return float(x) if np.ndim(x) == 0 else x


def rbeta_sample(spec: BetaSpec, rng: np.random.Generator, size=None):
    x = spec.lower + (spec.upper - spec.lower) * rng.beta(spec.alpha, spec.beta, size)
    x = np.clip(x, np.nextafter(spec.lower, 1.0), np.nextafter(spec.upper, 0.0))
    return float(x) if np.ndim(x) == 0 else x


def beta_sample(spec: BetaSpec, rng: np.random.Generator, size=None):
    if spec.kind == TRUNCATED:
        return tbeta_sample(spec, rng, size)
    if spec.kind == RESTRICTED:
        return rbeta_sample(spec, rng, size)
    return rng.beta(spec.alpha, spec.beta, size)


def dorazio_params(t: int, T: int) -> tuple[float, float]:
    """Beta shapes of the objective recruitment prior at occasion ``t`` (1-based)."""
    if not (isinstance(T, (int, np.integer)) and T >= 1):
        raise InputError("T must be a positive integer")
    if not 1 <= t <= T:
        raise InputError(f"occasion index {t} outside 1..{T}")
    return 1.0 / T, 2.0 - t / T


def dorazio_matrix(T: int) -> tuple[np.ndarray, np.ndarray]:
    t = np.arange(1, T + 1)
    return np.full(T, 1.0 / T), 2.0 - t / T


def tbeta_marginal_pdf(u2, alpha1: float, beta1: float, beta2: float):
    """Marginal density of ``u2`` when ``u1 ~ Beta(alpha1, beta1)`` and
    ``u2 | u1 ~ tBeta(1, beta2; u1, 1)``.

    Only defined for ``beta1 > beta2``; the normalising Beta function diverges
    otherwise.
    """
    if not beta1 > beta2:
        raise InputError(
            f"closed-form marginal needs beta1 > beta2 (got beta1={beta1}, beta2={beta2}); "
            "B(alpha1, beta1 - beta2) diverges otherwise"
        )
    if alpha1 <= 0 or beta2 <= 0:
        raise InputError("Beta shapes must be positive")
    u2 = np.asarray(u2, dtype=float)
    db = beta1 - beta2
    log_const = betaln(alpha1, db) - betaln(alpha1, beta1) + np.log(beta2)
    inside = (u2 > 0) & (u2 < 1)
    us = np.where(inside, u2, 0.5)
    dens = np.exp(log_const + xlog1py(beta2 - 1.0, -us)) * betainc(alpha1, db, us)
    out = np.where(inside, dens, 0.0)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class OrderedChainSpec:
    """``u_1 ~ first``; ``u_g | u_{g-1} ~ links[g-2]`` on ``(u_{g-1}, 1)``."""

    first: BetaSpec
    links: tuple[BetaSpec, ...]

    def __post_init__(self):
        if not self.links:
            raise InputError("an ordered chain needs at least two components")
        if self.first.kind != PLAIN:
            raise InputError("the first chain component must be a plain Beta")
        for link in self.links:
            if link.kind not in (TRUNCATED, RESTRICTED):
                raise InputError("chain links must be truncated or restricted Betas")

    @property
    def length(self) -> int:
        return 1 + len(self.links)

    @classmethod
    def uniform(cls, G: int, kind: str = TRUNCATED) -> "OrderedChainSpec":
        """Concatenated conditional uniforms."""
        return cls(BetaSpec(1.0, 1.0), tuple(BetaSpec(1.0, 1.0, kind=kind) for _ in range(G - 1)))

    @classmethod
    def from_shapes(cls, shapes: Sequence[tuple[float, float]], kind: str = TRUNCATED) -> "OrderedChainSpec":
        (a1, b1), *rest = shapes
        return cls(BetaSpec(a1, b1), tuple(BetaSpec(a, b, kind=kind) for a, b in rest))

    def logpdf(self, u) -> float:
        u = np.asarray(u, dtype=float)
        if u.shape != (self.length,):
            raise InputError("chain value has the wrong length")
        total = beta_logpdf(u[0], self.first)
        for g, link in enumerate(self.links, start=1):
            if total <= LOG_ZERO or u[g] <= u[g - 1]:
                return LOG_ZERO
            total += beta_logpdf(u[g], link.on(u[g - 1]))
        return float(max(total, LOG_ZERO))


def ordered_chain_sample(chain: OrderedChainSpec, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw increasing vectors; shape (G,) or (size, G)."""
    n = 1 if size is None else size
    out = np.empty((n, chain.length))
    out[:, 0] = rng.beta(chain.first.alpha, chain.first.beta, n)
    for g, link in enumerate(chain.links, start=1):
        lower = out[:, g - 1]
        if link.kind == RESTRICTED:
            out[:, g] = lower + (1.0 - lower) * rng.beta(link.alpha, link.beta, n)
        else:
            out[:, g] = _tbeta_vec(link.alpha, link.beta, lower, rng)
    # keep strict ordering under floating round-off
    for g in range(1, chain.length):
        out[:, g] = np.maximum(out[:, g], np.nextafter(out[:, g - 1], 2.0))
    return out[0] if size is None else out


def _tbeta_vec(a, b, lower, rng):
    u = rng.random(lower.shape)
    hi_tail = lower >= 0.5
    x = np.empty_like(lower)
    lo_q = betainc(a, b, lower[~hi_tail])
    x[~hi_tail] = betaincinv(a, b, lo_q + u[~hi_tail] * (1.0 - lo_q))
    hi_q = betainc(b, a, 1.0 - lower[hi_tail])
    x[hi_tail] = 1.0 - betaincinv(b, a, u[hi_tail] * hi_q)
    return np.minimum(x, np.nextafter(1.0, 0.0))


def rbeta_chain_moments(chain: OrderedChainSpec) -> tuple[np.ndarray, np.ndarray]:
    """Marginal means and variances of each chain component.

    The first link is a plain Beta; the rest must be restricted Betas, whose
    affine structure gives the moments by total expectation and variance.
    """
    if any(link.kind != RESTRICTED for link in chain.links):
        raise InputError("moment recursion applies to restricted-Beta links")
    a, b = chain.first.alpha, chain.first.beta
    means = [a / (a + b)]
    variances = [a * b / ((a + b) ** 2 * (a + b + 1.0))]
    for link in chain.links:
        a, b = link.alpha, link.beta
        s = a + b
        m_prev, v_prev = means[-1], variances[-1]
        means.append(a / s + m_prev * b / s)
        variances.append(
            v_prev * b**2 / s**2 * (1.0 + a / (b * (s + 1.0)))
            + (1.0 - m_prev) ** 2 * a * b / (s**2 * (s + 1.0))
        )
    return np.array(means), np.array(variances)


@dataclass
class PriorConfig:
    """Prior hyperparameters.

    Recruitment always uses the objective ``Beta(1/T, 2 - t/T)`` prior.
    ``survival_chain`` overrides the model's default ordered survival prior.
    """

    mu_var: float = 10.0
    tau_var: float = 0.25
    delta_a: float = 1.0
    delta_b: float = 1.0
    dirichlet_alpha: float | Sequence[float] = 1.0
    survival_chain: OrderedChainSpec | None = None
    single_survival: BetaSpec = field(default_factory=lambda: BetaSpec(1.0, 1.0))

    def __post_init__(self):
        alpha = np.atleast_1d(np.asarray(self.dirichlet_alpha, dtype=float))
        if min(self.mu_var, self.tau_var, self.delta_a, self.delta_b) <= 0 or np.any(alpha <= 0):
            raise InputError("prior hyperparameters must be strictly positive")

    def dirichlet(self, G: int) -> np.ndarray:
        alpha = np.atleast_1d(np.asarray(self.dirichlet_alpha, dtype=float))
        if alpha.size == 1:
            return np.full(G, float(alpha[0]))
        if alpha.size != G:
            raise InputError(f"Dirichlet prior has {alpha.size} entries for {G} groups")
        return alpha

    def to_dict(self) -> dict:
        out = {
            "mu_var": self.mu_var,
            "tau_var": self.tau_var,
            "delta_a": self.delta_a,
            "delta_b": self.delta_b,
            "dirichlet_alpha": np.atleast_1d(self.dirichlet_alpha).tolist(),
        }
        if self.survival_chain is not None:
            out["survival_chain"] = {
                "shapes": [[self.survival_chain.first.alpha, self.survival_chain.first.beta]]
                + [[lk.alpha, lk.beta] for lk in self.survival_chain.links],
                "kind": self.survival_chain.links[0].kind,
            }
        return out

    @classmethod
    def from_dict(cls, data: dict | None) -> "PriorConfig":
        data = dict(data or {})
        chain = data.pop("survival_chain", None)
        known = {"mu_var", "tau_var", "delta_a", "delta_b", "dirichlet_alpha"}
        unknown = set(data) - known
        if unknown:
            raise InputError(f"unknown prior settings: {sorted(unknown)}")
        cfg = cls(**data)
        if chain is not None:
            cfg.survival_chain = OrderedChainSpec.from_shapes(
                [tuple(s) for s in chain["shapes"]], kind=chain.get("kind", TRUNCATED)
            )
        return cfg
