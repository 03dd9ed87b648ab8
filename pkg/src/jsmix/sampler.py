"""Metropolis-within-Gibbs sampler for augmented Jolly-Seber mixtures.

One sweep updates, in order: mixture labels (likelihood collapsed over the
trajectory), trajectories by forward-filtering backward-sampling, part-time
presence and undetectability, mixture weights, recruitment (conjugate Beta),
survival (random-walk MH on the logit scale) and the capture block
(random-walk MH on intercepts and sum-to-zero occasion effects).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import kernels
from .errors import InputError, InvariantViolation
from .model import (
    ALIVE,
    LOG_ZERO,
    NOT_ENTERED,
    PROB_FLOOR,
    CaptureData,
    Effect,
    GroupParams,
    ModelSpec,
    TimeGrid,
    inclusion_prob,
)
from .priors import OrderedChainSpec, PriorConfig, beta_logpdf, dorazio_matrix, ordered_chain_sample

log = logging.getLogger(__name__)

TARGET_ACCEPT = 0.35

AT_RISK, RECRUITS, ALIVE_PREV, SURVIVORS, EXPOSED, CAPTURED = range(6)


@dataclass
class McmcConfig:
    n_chains: int = 2
    n_iters: int = 20000
    burn_in: int = 5000
    thin: int = 2
    seed: int = 1
    adapt: bool = True
    init_steps: dict = field(default_factory=lambda: {"phi": 0.5, "mu": 0.3, "tau": 0.3, "collapsed": 0.3})
    store_latent: bool = True
    check_every: int = 1
    # extra MH moves on survival, capture intercepts and delta using the
    # likelihood with labels and trajectories summed out
    collapsed: bool = True

    def __post_init__(self):
        if self.n_chains < 1:
            raise InputError("need at least one chain")
        if not 0 <= self.burn_in < self.n_iters:
            raise InputError("burn_in must be smaller than n_iters")
        if self.thin < 1:
            raise InputError("thin must be at least 1")

    @property
    def n_draws(self) -> int:
        return len(range(self.burn_in, self.n_iters, self.thin))

    def chain_seeds(self) -> list[int]:
        ss = np.random.SeedSequence(self.seed)
        return [int(s.generate_state(1)[0]) for s in ss.spawn(self.n_chains)]

    def to_dict(self) -> dict:
        return {
            "n_chains": self.n_chains,
            "n_iters": self.n_iters,
            "burn_in": self.burn_in,
            "thin": self.thin,
            "seed": self.seed,
            "adapt": self.adapt,
            "init_steps": dict(self.init_steps),
            "store_latent": self.store_latent,
            "collapsed": self.collapsed,
        }


class Layout:
    """Maps a :class:`ModelSpec` onto free parameter vectors.

    ``phi_index[g, t]`` points into the free survival vector; ``mu_index[g]``
    into the capture intercepts; ``tau_row[g]`` selects the occasion-effect
    row (``-1`` when the capture structure has no time effect).
    """

    def __init__(self, spec: ModelSpec, T: int, priors: PriorConfig):
        self.spec = spec
        self.T = T
        G = self.G = spec.G
        t_idx = np.maximum(np.arange(T) - 1, 0)
        if spec.rpt:
            self.rho_shared = False
            self.n_phi = 2
            self.phi_index = np.repeat(np.array([1, 1, 0])[:, None], T, axis=1)
            self.phi_names = ["phi[T]", "phi[NT]"]
            self.phi_chain = priors.survival_chain or OrderedChainSpec.from_shapes([(1.0, 2.0), (1.0, 1.0)])
            self.n_mu, self.mu_index, self.n_tau_rows = 1, np.zeros(G, dtype=int), 1
            self.tau_row = np.zeros(G, dtype=int)
        else:
            self.rho_shared = spec.rho_structure == Effect.TIME
            ps = spec.phi_structure
            self.phi_chain = None
            if ps == Effect.CONST:
                self.n_phi, self.phi_index, self.phi_names = 1, np.zeros((G, T), dtype=int), ["phi"]
            elif ps == Effect.TIME:
                self.n_phi = max(T - 1, 1)
                self.phi_index = np.repeat(t_idx[None, :], G, axis=0)
                self.phi_names = [f"phi[{t + 2}]" for t in range(self.n_phi)]
            elif ps == Effect.GROUP:
                self.n_phi = G
                self.phi_index = np.repeat(np.arange(G)[:, None], T, axis=1)
                self.phi_names = [f"phi[{g + 1}]" for g in range(G)]
                if priors.survival_chain is not None:
                    self.phi_chain = priors.survival_chain
                elif G == 2:
                    self.phi_chain = OrderedChainSpec.from_shapes([(1.0, 2.0), (1.0, 1.0)])
                else:
                    self.phi_chain = OrderedChainSpec.uniform(G)
            else:
                n_t = max(T - 1, 1)
                self.n_phi = G * n_t
                self.phi_index = np.arange(G)[:, None] * n_t + t_idx[None, :]
                self.phi_names = [f"phi[{g + 1},{t + 2}]" for g in range(G) for t in range(n_t)]
            if self.phi_chain is not None and self.phi_chain.length != self.n_phi:
                raise InputError("survival chain length does not match the number of survival groups")
            pstruct = spec.p_structure
            if pstruct in (Effect.CONST, Effect.TIME):
                self.n_mu, self.mu_index = 1, np.zeros(G, dtype=int)
            else:
                self.n_mu, self.mu_index = G, np.arange(G)
            if pstruct in (Effect.CONST, Effect.GROUP):
                self.n_tau_rows, self.tau_row = 0, np.full(G, -1)
            elif pstruct == Effect.TIME_BY_GROUP:
                self.n_tau_rows, self.tau_row = G, np.arange(G)
            else:
                self.n_tau_rows, self.tau_row = 1, np.zeros(G, dtype=int)
        self.part_time = spec.part_time
        self.has_delta = bool(self.part_time.any())
        self.group_names = spec.group_names
        self.mu_names = ["mu"] if self.n_mu == 1 else [f"mu[{g}]" for g in self.group_names]
        if self.n_tau_rows == 1:
            self.tau_names = [f"tau[{t + 1}]" for t in range(T)]
        else:
            self.tau_names = [f"tau[{g},{t + 1}]" for g in self.group_names[: self.n_tau_rows] for t in range(T)]
        # cells (g, t) feeding each free survival parameter, pooled by occasion
        self.phi_cells = np.zeros((self.n_phi, G, T), dtype=bool)
        for g in range(G):
            for t in range(1, T):
                self.phi_cells[self.phi_index[g, t], g, t] = True


@dataclass
class ChainState:
    rho: np.ndarray
    phi_free: np.ndarray
    mu_free: np.ndarray
    tau: np.ndarray
    delta: float
    weights: np.ndarray
    states: np.ndarray
    v: np.ndarray
    c: np.ndarray
    rng: np.random.Generator
    iteration: int = 0

    def group_params(self, layout: Layout) -> GroupParams:
        T = layout.T
        if layout.n_tau_rows == 0:
            tau = np.zeros(T)
        elif layout.n_tau_rows == 1:
            tau = self.tau[0]
        else:
            tau = self.tau
        return GroupParams(
            rho=self.rho.copy(),
            phi=self.phi_free[layout.phi_index],
            mu=self.mu_free[layout.mu_index],
            tau=np.array(tau, copy=True),
            weights=self.weights.copy(),
            delta=self.delta,
            part_time=layout.part_time,
        )


class Model:
    """Data, grid, structure and priors bundled for the sampler."""

    def __init__(self, data: CaptureData, spec: ModelSpec, grid: TimeGrid, priors: PriorConfig | None = None):
        if data.T != grid.T:
            raise InputError(f"capture matrix has {data.T} occasions but the grid has {grid.T}")
        self.data = data
        self.spec = spec
        self.grid = grid
        self.priors = priors or PriorConfig()
        self.layout = Layout(spec, grid.T, self.priors)
        self.Y = data.augmented()
        self.M, self.T = self.Y.shape
        self.G = spec.G
        uniq, inverse, counts = np.unique(self.Y, axis=0, return_inverse=True, return_counts=True)
        self.Y_unique = np.ascontiguousarray(uniq, dtype=np.uint8)
        self.uidx = inverse.reshape(-1).astype(np.intp)
        self.multiplicity = counts
        self.rho_a, self.rho_b = dorazio_matrix(self.T)
        self.dirichlet = self.priors.dirichlet(self.G)
        self.captured_rows = self.Y.any(axis=1)
        self.first_capture = np.where(self.captured_rows, self.Y.argmax(axis=1), -1)
        self.last_capture = np.where(self.captured_rows, self.T - 1 - self.Y[:, ::-1].argmax(axis=1), -1)

    # -- parameter transforms -------------------------------------------------
    def survival_unit(self, phi_free: np.ndarray) -> np.ndarray:
        return phi_free[self.layout.phi_index]

    def compounded(self, phi_free: np.ndarray) -> np.ndarray:
        return np.power(self.survival_unit(phi_free), self.grid.lags[None, :])

    def exposed_logit(self, mu_free: np.ndarray, tau: np.ndarray) -> np.ndarray:
        lay = self.layout
        eta = np.repeat(mu_free[lay.mu_index][:, None], self.T, axis=1)
        if lay.n_tau_rows:
            eta = eta + tau[lay.tau_row]
        return eta

    def capture_matrix(self, mu_free, tau, delta) -> np.ndarray:
        p = 1.0 / (1.0 + np.exp(-self.exposed_logit(mu_free, tau)))
        p = p * np.where(self.layout.part_time, 1.0 - delta, 1.0)[:, None]
        return np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)

    def kernel_inputs(self, st: ChainState):
        rho = np.clip(st.rho, PROB_FLOOR, 1.0 - PROB_FLOOR)
        phic = np.clip(self.compounded(st.phi_free), 0.0, 1.0 - PROB_FLOOR)
        phic[:, 0] = 1.0
        return rho, phic, self.capture_matrix(st.mu_free, st.tau, st.delta)

    # -- priors ---------------------------------------------------------------
    def phi_logprior(self, phi_free: np.ndarray) -> np.ndarray | float:
        lay = self.layout
        if lay.phi_chain is not None:
            return lay.phi_chain.logpdf(phi_free)
        return beta_logpdf(phi_free, self.priors.single_survival)

    def mu_logprior(self, mu_free: np.ndarray) -> float:
        if np.any(np.diff(mu_free) <= 0):
            return LOG_ZERO
        return float(-0.5 * np.sum(mu_free**2) / self.priors.mu_var)

    def sample_prior(self, rng: np.random.Generator) -> dict:
        lay, T, G = self.layout, self.T, self.G
        rho = rng.beta(np.broadcast_to(self.rho_a, (G, T)), np.broadcast_to(self.rho_b, (G, T)))
        if lay.rho_shared:
            rho = np.repeat(rho[:1], G, axis=0)
        if lay.phi_chain is not None:
            phi = ordered_chain_sample(lay.phi_chain, rng)
        else:
            phi = rng.beta(self.priors.single_survival.alpha, self.priors.single_survival.beta, lay.n_phi)
        mu = np.sort(rng.normal(0.0, np.sqrt(self.priors.mu_var), lay.n_mu))
        tau = rng.normal(0.0, np.sqrt(self.priors.tau_var), (lay.n_tau_rows, T))
        tau -= tau.mean(axis=1, keepdims=True)
        delta = rng.beta(self.priors.delta_a, self.priors.delta_b) if lay.has_delta else 0.0
        weights = rng.dirichlet(self.dirichlet)
        return dict(
            rho=np.clip(rho, PROB_FLOOR, 1.0 - PROB_FLOOR),
            phi_free=np.clip(phi, PROB_FLOOR, 1.0 - PROB_FLOOR),
            mu_free=mu,
            tau=tau,
            delta=float(min(delta, 1.0 - PROB_FLOOR)),
            weights=weights,
        )


def init_state(model: Model, rng: np.random.Generator) -> ChainState:
    """Starting state consistent with the data.

    Captured rows are alive from first to last capture, not yet entered
    before and departed after. All-zero rows stay out with probability 1/2,
    otherwise get a random alive window. Parameters and labels come from
    the priors.
    """
    M, T = model.M, model.T
    states = np.zeros((M, T), dtype=np.int8)
    t = np.arange(T)
    for i in np.flatnonzero(model.captured_rows):
        a, b = model.first_capture[i], model.last_capture[i]
        states[i] = np.where(t < a, NOT_ENTERED, np.where(t <= b, ALIVE, 2))
    pseudo = np.flatnonzero(~model.captured_rows)
    enter = rng.random(len(pseudo)) < 0.5
    starts = rng.integers(0, T, len(pseudo))
    ends = starts + rng.integers(0, T, len(pseudo))
    for i, e, a, b in zip(pseudo, enter, starts, ends):
        if e:
            states[i] = np.where(t < a, NOT_ENTERED, np.where(t <= min(b, T - 1), ALIVE, 2))
    par = model.sample_prior(rng)
    c = rng.choice(model.G, size=M, p=par["weights"]).astype(np.intp)
    v = (states == ALIVE).astype(np.uint8)
    return ChainState(states=states, v=v, c=c, rng=rng, **par)


# -- individual Gibbs blocks ----------------------------------------------------

def sample_labels(loglik_rows: np.ndarray, weights: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Categorical draw per row with probabilities ``w_g * exp(loglik[i, g])``."""
    with np.errstate(divide="ignore"):
        logw = np.log(weights)
    lp = loglik_rows + logw[None, :]
    lp -= lp.max(axis=1, keepdims=True)
    prob = np.exp(lp)
    cum = np.cumsum(prob, axis=1)
    x = u * cum[:, -1]
    lab = (x[:, None] >= cum).sum(axis=1)
    return np.minimum(lab, len(weights) - 1).astype(np.intp)


def sample_label(history, weights, params: GroupParams, grid: TimeGrid, rng: np.random.Generator) -> int:
    """Draw one label given a single history (collapsed over its trajectory)."""
    y = np.asarray(history, dtype=np.uint8)[None, :]
    phic = params.survival_matrix(grid)
    phic[:, 0] = 1.0
    ll, _ = kernels.forward_filter(y, params.rho, phic, params.capture_matrix())
    return int(sample_labels(ll, np.asarray(weights, dtype=float), rng.random(1))[0])


def ffbs_individual(history, rho, phi, p, grid: TimeGrid, rng: np.random.Generator):
    """Exact posterior draw of one trajectory under fixed group parameters.

    Returns ``(z, r)`` as uint8 vectors.
    """
    T = grid.T
    y = np.asarray(history, dtype=np.uint8)[None, :]
    rho = np.broadcast_to(np.asarray(rho, dtype=float), (T,))[None, :]
    phic = np.power(np.broadcast_to(np.asarray(phi, dtype=float), (T,)), grid.lags)[None, :]
    p = np.broadcast_to(np.asarray(p, dtype=float), (T,))[None, :]
    ll, filt = kernels.forward_filter(y, rho, phic, p)
    if ll[0, 0] <= LOG_ZERO:
        raise InvariantViolation("history has zero probability under the given parameters")
    states, _ = kernels.backward_sample(filt, np.zeros(1, dtype=np.intp), np.zeros(1, dtype=np.intp), rho, phic, rng.random((1, T)))
    s = states[0]
    z = (s == ALIVE).astype(np.uint8)
    r = np.ones(T, dtype=np.uint8)
    r[1:] = s[:-1] == NOT_ENTERED
    return z, r


def update_weights(counts, dirichlet_alpha, rng: np.random.Generator) -> np.ndarray:
    return rng.dirichlet(np.asarray(dirichlet_alpha, dtype=float) + np.asarray(counts, dtype=float))


def update_recruitment(at_risk, recruits, rng: np.random.Generator, shared: bool = False) -> np.ndarray:
    """Conjugate Beta draw of recruitment per (group, occasion).

    ``shared`` pools tallies over groups and returns identical rows.
    """
    at_risk = np.atleast_2d(np.asarray(at_risk))
    recruits = np.atleast_2d(np.asarray(recruits))
    if np.any(recruits > at_risk) or np.any(recruits < 0):
        raise InvariantViolation("recruitment tallies exceed the at-risk counts")
    G, T = at_risk.shape
    a0, b0 = dorazio_matrix(T)
    if shared:
        n, k = at_risk.sum(axis=0, keepdims=True), recruits.sum(axis=0, keepdims=True)
        draw = rng.beta(a0 + k, b0 + n - k)
        rho = np.repeat(draw, G, axis=0)
    else:
        rho = rng.beta(a0[None, :] + recruits, b0[None, :] + at_risk - recruits)
    return np.clip(rho, PROB_FLOOR, 1.0 - PROB_FLOOR)


def bounded_logit_step(phi, k: int, step: float, z: float, ordered: bool):
    """Random-walk proposal for ``phi[k]`` on the logit scale of its free interval.

    With an ordered chain the interval is (phi[k-1], phi[k+1]), so proposals
    never leave the prior support; otherwise it is (0, 1). Returns the
    proposed value and the log Jacobian ratio of the move.
    """
    lo = phi[k - 1] if ordered and k > 0 else 0.0
    hi = phi[k + 1] if ordered and k < len(phi) - 1 else 1.0
    width = hi - lo
    s = min(max((phi[k] - lo) / width, PROB_FLOOR), 1.0 - PROB_FLOOR)
    x = np.log(s) - np.log1p(-s) + step * z
    s_new = float(np.clip(1.0 / (1.0 + np.exp(-x)), PROB_FLOOR, 1.0 - PROB_FLOOR))
    new = float(np.clip(lo + width * s_new, PROB_FLOOR, 1.0 - PROB_FLOOR))
    return new, np.log(s_new) + np.log1p(-s_new) - np.log(s) - np.log1p(-s)


def survival_loglik(phi, lags, alive_prev, survivors) -> np.ndarray:
    """Binomial survival log-likelihood for each row of pooled tallies.

    ``phi`` has shape (K,); tallies have shape (K, T).
    """
    logphi = np.log(np.asarray(phi, dtype=float))[:, None]
    lp = lags[None, :] * logphi
    with np.errstate(divide="ignore"):
        ld = np.log(-np.expm1(lp))
    died = alive_prev - survivors
    dead_terms = np.multiply(died, ld, out=np.zeros(np.broadcast(died, ld).shape), where=died > 0)
    terms = survivors * lp + dead_terms
    return terms.sum(axis=1)


def capture_loglik(eta, exposed, captured) -> np.ndarray:
    """Bernoulli-logit log-likelihood summed over the last axis."""
    return np.sum(-captured * np.logaddexp(0.0, -eta) - (exposed - captured) * np.logaddexp(0.0, eta), axis=-1)


def update_delta_aux(z_pt, y_pt, p_exposed, delta, a, b, rng: np.random.Generator):
    """Presence draws for part-time alive cells, then the conjugate delta draw.

    ``z_pt`` and ``y_pt`` are the part-time rows; ``p_exposed`` is the (T,)
    capture probability of a present individual.
    """
    alive = z_pt.astype(bool)
    q = (1.0 - delta) * (1.0 - p_exposed)
    q = q / (q + delta)
    v = np.where(y_pt.astype(bool), True, rng.random(z_pt.shape) < q[None, :]) & alive
    n_alive = int(alive.sum())
    n_present = int(v.sum())
    new_delta = rng.beta(a + n_alive - n_present, b + n_present)
    return v.astype(np.uint8), float(min(max(new_delta, PROB_FLOOR), 1.0 - PROB_FLOOR))


class Adapter:
    """Robbins-Monro scaling of log step sizes toward a target acceptance."""

    def __init__(self, n: int, step: float):
        self.log_step = np.full(n, np.log(step))
        self.accepted = np.zeros(n)
        self.proposed = np.zeros(n)

    @property
    def step(self) -> np.ndarray:
        return np.exp(self.log_step)

    def record(self, acc, idx, iteration: int, adapt: bool):
        acc = np.asarray(acc, dtype=float)
        self.accepted[idx] += acc
        self.proposed[idx] += 1
        if adapt:
            gain = min(0.5, 2.0 / (iteration + 1) ** 0.6)
            self.log_step[idx] += gain * (acc - TARGET_ACCEPT)

    def reset_counts(self):
        self.accepted[:] = 0
        self.proposed[:] = 0

    def rates(self) -> np.ndarray:
        return np.divide(self.accepted, self.proposed, out=np.zeros_like(self.accepted), where=self.proposed > 0)


class Sampler:
    """Runs one chain of the blocked Gibbs sweep."""

    def __init__(self, model: Model, mcmc: McmcConfig, seed: int):
        self.model = model
        self.mcmc = mcmc
        self.rng = np.random.default_rng(seed)
        self.state = init_state(model, self.rng)
        lay = model.layout
        steps = mcmc.init_steps
        self.adapt_phi = Adapter(lay.n_phi, steps.get("phi", 0.5))
        self.adapt_mu = Adapter(lay.n_mu, steps.get("mu", 0.3))
        self.adapt_tau = Adapter(max(lay.n_tau_rows, 1) * max(model.T - 1, 1), steps.get("tau", 0.3))
        self.n_rho_rows = 1 if lay.rho_shared else model.G
        self.adapt_collapsed = Adapter(
            lay.n_phi + lay.n_mu + 1 + model.G + self.n_rho_rows, steps.get("collapsed", 0.3)
        )
        self.loglik = None
        self.filt = None
        self.tallies = None
        # when set, the next sweep stores the mixture loglik of the incoming
        # parameters (the previous retained draw) before touching them
        self.record_incoming = False
        self.incoming_ll = None

    # -- sweep components -----------------------------------------------------
    def forward(self):
        rho, phic, p = self.model.kernel_inputs(self.state)
        self.loglik, self.filt = kernels.forward_filter(self.model.Y_unique, rho, phic, p)
        return rho, phic

    def marginal_loglik(self, loglik=None) -> float:
        ll = self.loglik if loglik is None else loglik
        with np.errstate(divide="ignore"):
            logw = np.log(self.state.weights)
        return float(np.dot(self.model.multiplicity, logsumexp(ll + logw[None, :], axis=1)))

    def step_collapsed(self, adapt: bool):
        """Random-walk MH on phi, mu and delta against the marginal likelihood.

        Labels and trajectories are integrated out, so these moves are not
        slowed by the latent configuration; the latent block redrawn right
        after restores the joint state.
        """
        m, st, lay = self.model, self.state, self.model.layout
        steps = self.adapt_collapsed.step
        cur = self.marginal_loglik()
        rho, phic, p = m.kernel_inputs(st)

        def attempt(k, apply, log_ratio_extra):
            nonlocal cur, rho, phic, p
            saved = (st.phi_free, st.mu_free, st.delta, st.rho, st.weights)
            apply()
            lp_extra = log_ratio_extra()
            accepted = False
            if lp_extra > LOG_ZERO:
                r2, f2, p2 = m.kernel_inputs(st)
                ll, filt = kernels.forward_filter(m.Y_unique, r2, f2, p2)
                new = self.marginal_loglik(ll)
                if np.log(st.rng.random()) < new - cur + lp_extra:
                    cur, self.loglik, self.filt = new, ll, filt
                    rho, phic, p = r2, f2, p2
                    accepted = True
            if not accepted:
                st.phi_free, st.mu_free, st.delta, st.rho, st.weights = saved
            self.adapt_collapsed.record(accepted, k, st.iteration, adapt)

        ordered = lay.phi_chain is not None
        for k in range(lay.n_phi):
            old = st.phi_free
            value, jac = bounded_logit_step(old, k, steps[k], st.rng.standard_normal(), ordered)

            def apply(k=k, old=old, value=value):
                new = old.copy()
                new[k] = value
                st.phi_free = new

            def extra(old=old, jac=jac):
                lp_new = np.sum(m.phi_logprior(st.phi_free))
                if lp_new <= LOG_ZERO:
                    return LOG_ZERO
                return lp_new - np.sum(m.phi_logprior(old)) + jac

            attempt(k, apply, extra)
        for k in range(lay.n_mu):
            old = st.mu_free
            j = lay.n_phi + k

            def apply(k=k, old=old, j=j):
                new = old.copy()
                new[k] += steps[j] * st.rng.standard_normal()
                st.mu_free = new

            def extra(old=old):
                lp_new = m.mu_logprior(st.mu_free)
                return LOG_ZERO if lp_new <= LOG_ZERO else lp_new - m.mu_logprior(old)

            attempt(j, apply, extra)
        if lay.has_delta:
            old = st.delta
            j = lay.n_phi + lay.n_mu
            a, b = m.priors.delta_a, m.priors.delta_b

            def apply():
                x = np.log(old) - np.log1p(-old) + steps[j] * st.rng.standard_normal()
                st.delta = float(np.clip(1.0 / (1.0 + np.exp(-x)), PROB_FLOOR, 1.0 - PROB_FLOOR))

            def extra():
                d = st.delta
                # Beta prior times the logit Jacobian d(1-d)
                return a * (np.log(d) - np.log(old)) + b * (np.log1p(-d) - np.log1p(-old))

            attempt(j, apply, extra)
        # weights as normalised Gamma variables; the total is redrawn from its
        # conditional (independent of w) before each move
        alpha = m.dirichlet
        base = lay.n_phi + lay.n_mu + 1
        if m.G > 1:
            for g in range(m.G):
                gam = st.weights * st.rng.gamma(alpha.sum())
                j = base + g
                xi = steps[j] * st.rng.standard_normal()

                def apply(g=g, gam=gam, xi=xi):
                    new = gam.copy()
                    new[g] *= np.exp(xi)
                    st.weights = new / new.sum()

                def extra(g=g, gam=gam, xi=xi):
                    if np.any(st.weights <= 0.0):
                        return LOG_ZERO
                    # Gamma(alpha_g, 1) prior on gamma_g with the log-scale Jacobian
                    return alpha[g] * xi - gam[g] * (np.exp(xi) - 1.0)

                attempt(j, apply, extra)
        # common logit shift of a recruitment row
        a0, b0 = m.rho_a, m.rho_b
        base += m.G
        for row in range(self.n_rho_rows):
            j = base + row
            xi = steps[j] * st.rng.standard_normal()
            old = st.rho

            def apply(row=row, xi=xi, old=old):
                new = old.copy()
                rows = slice(None) if lay.rho_shared else slice(row, row + 1)
                x = np.log(old[rows]) - np.log1p(-old[rows]) + xi
                new[rows] = np.clip(1.0 / (1.0 + np.exp(-x)), PROB_FLOOR, 1.0 - PROB_FLOOR)
                st.rho = new

            def extra(row=row, old=old):
                r0, r1 = old[row], st.rho[row]
                # Beta prior times the logit Jacobian rho(1-rho), per occasion
                return float(np.sum(a0 * (np.log(r1) - np.log(r0)) + b0 * (np.log1p(-r1) - np.log1p(-r0))))

            attempt(j, apply, extra)
        return rho, phic

    def pointwise_mixture_loglik(self) -> np.ndarray:
        """log sum_g w_g P(y_u | g) for every unique history."""
        with np.errstate(divide="ignore"):
            logw = np.log(self.state.weights)
        return logsumexp(self.loglik + logw[None, :], axis=1)

    def step_latent(self, rho, phic):
        m, st = self.model, self.state
        rows = self.loglik[m.uidx]
        st.c = sample_labels(rows, st.weights, st.rng.random(m.M))
        u = st.rng.random((m.M, m.T))
        states, failures = kernels.backward_sample(self.filt, m.uidx, st.c, rho, phic, u)
        if failures:
            raise InvariantViolation(
                f"{failures} zero-probability backward steps at iteration {st.iteration}",
                dump=self.dump(),
            )
        st.states = states

    def step_presence(self):
        m, st, lay = self.model, self.state, self.model.layout
        z = (st.states == ALIVE).astype(np.uint8)
        st.v = z
        if not lay.has_delta:
            return
        pt_rows = lay.part_time[st.c]
        eta = m.exposed_logit(st.mu_free, st.tau)
        g_pt = int(np.flatnonzero(lay.part_time)[0])
        p_exp = np.clip(1.0 / (1.0 + np.exp(-eta[g_pt])), PROB_FLOOR, 1.0 - PROB_FLOOR)
        v_pt, st.delta = update_delta_aux(
            z[pt_rows], m.Y[pt_rows], p_exp, st.delta, m.priors.delta_a, m.priors.delta_b, st.rng
        )
        v = z.copy()
        v[pt_rows] = v_pt
        st.v = v

    def step_tallies(self):
        m, st = self.model, self.state
        self.tallies = kernels.tally(st.states, st.c, m.Y, st.v, m.G)

    def step_weights(self):
        st = self.state
        counts = np.bincount(st.c, minlength=self.model.G)
        st.weights = update_weights(counts, self.model.dirichlet, st.rng)

    def step_recruitment(self):
        tl = self.tallies
        self.state.rho = update_recruitment(
            tl[AT_RISK], tl[RECRUITS], self.state.rng, shared=self.model.layout.rho_shared
        )

    def _phi_pooled(self):
        lay, tl = self.model.layout, self.tallies
        cells = lay.phi_cells
        alive = np.einsum("kgt,gt->kt", cells, tl[ALIVE_PREV])
        surv = np.einsum("kgt,gt->kt", cells, tl[SURVIVORS])
        return alive, surv

    def step_survival(self, adapt: bool):
        m, st, lay = self.model, self.state, self.model.layout
        alive, surv = self._phi_pooled()
        lags = m.grid.lags
        steps = self.adapt_phi.step
        phi = st.phi_free.copy()
        x = np.log(phi) - np.log1p(-phi)
        if lay.phi_chain is None:
            # independent priors: all coordinates in one vectorised pass
            xp = x + steps * st.rng.standard_normal(lay.n_phi)
            php = np.clip(1.0 / (1.0 + np.exp(-xp)), PROB_FLOOR, 1.0 - PROB_FLOOR)
            cur = survival_loglik(phi, lags, alive, surv) + m.phi_logprior(phi) + np.log(phi) + np.log1p(-phi)
            new = survival_loglik(php, lags, alive, surv) + m.phi_logprior(php) + np.log(php) + np.log1p(-php)
            acc = np.log(st.rng.random(lay.n_phi)) < new - cur
            phi = np.where(acc, php, phi)
            self.adapt_phi.record(acc, slice(None), st.iteration, adapt)
        else:
            ll = survival_loglik(phi, lags, alive, surv)
            lp = m.phi_logprior(phi)
            for k in range(lay.n_phi):
                pk, jac = bounded_logit_step(phi, k, steps[k], st.rng.standard_normal(), ordered=True)
                prop = phi.copy()
                prop[k] = pk
                lp_new = m.phi_logprior(prop)
                accepted = False
                if lp_new > LOG_ZERO:
                    ll_k = survival_loglik(prop[k:k + 1], lags, alive[k:k + 1], surv[k:k + 1])[0]
                    diff = (ll_k - ll[k]) + (lp_new - lp) + jac
                    if np.log(st.rng.random()) < diff:
                        phi, ll[k], lp = prop, ll_k, lp_new
                        accepted = True
                self.adapt_phi.record(accepted, k, st.iteration, adapt)
        st.phi_free = phi

    def step_capture(self, adapt: bool):
        m, st, lay, tl = self.model, self.state, self.model.layout, self.tallies
        expo, capt = tl[EXPOSED].astype(float), tl[CAPTURED].astype(float)
        T = m.T
        # intercepts
        steps = self.adapt_mu.step
        for k in range(lay.n_mu):
            groups = lay.mu_index == k
            eta = m.exposed_logit(st.mu_free, st.tau)[groups]
            cur = capture_loglik(eta, expo[groups], capt[groups]).sum()
            prop = st.mu_free.copy()
            prop[k] += steps[k] * st.rng.standard_normal()
            lp_new, lp_old = m.mu_logprior(prop), m.mu_logprior(st.mu_free)
            accepted = False
            if lp_new > LOG_ZERO:
                new = capture_loglik(eta + (prop[k] - st.mu_free[k]), expo[groups], capt[groups]).sum()
                if np.log(st.rng.random()) < new - cur + lp_new - lp_old:
                    st.mu_free = prop
                    accepted = True
            self.adapt_mu.record(accepted, k, st.iteration, adapt)
        # sum-to-zero occasion effects: move tau[t] and compensate on tau[T-1]
        if lay.n_tau_rows == 0 or T < 2:
            return
        steps = self.adapt_tau.step.reshape(lay.n_tau_rows, T - 1)
        var = m.priors.tau_var
        for row in range(lay.n_tau_rows):
            groups = lay.tau_row == row
            base = st.mu_free[lay.mu_index][groups][:, None]
            e_row, c_row = expo[groups], capt[groups]
            tau = st.tau[row].copy()
            eps_all = st.rng.standard_normal(T - 1) * steps[row]
            logu = np.log(st.rng.random(T - 1))
            acc = np.zeros(T - 1, dtype=bool)
            last = T - 1
            for t in range(T - 1):
                cols = [t, last]
                old = tau[cols]
                new = old + np.array([eps_all[t], -eps_all[t]])
                d_ll = capture_loglik(base + new, e_row[:, cols], c_row[:, cols]).sum() - capture_loglik(
                    base + old, e_row[:, cols], c_row[:, cols]
                ).sum()
                d_lp = -0.5 * (np.sum(new**2) - np.sum(old**2)) / var
                if logu[t] < d_ll + d_lp:
                    tau[cols] = new
                    acc[t] = True
            tau[last] = -tau[:last].sum()
            st.tau[row] = tau
            self.adapt_tau.record(acc, slice(row * (T - 1), (row + 1) * (T - 1)), st.iteration, adapt)

    def check(self):
        st, m = self.state, self.model
        s = st.states
        if np.any(np.diff(s.astype(np.int16), axis=1) < 0):
            raise InvariantViolation("a trajectory re-entered the population", dump=self.dump())
        if np.any(m.Y.astype(bool) & (s != ALIVE)):
            raise InvariantViolation("a capture occurred outside the alive window", dump=self.dump())
        if np.any(st.v > (s == ALIVE)):
            raise InvariantViolation("presence outside the alive window", dump=self.dump())
        if abs(st.weights.sum() - 1.0) > 1e-9:
            raise InvariantViolation("weights left the simplex", dump=self.dump())

    def dump(self) -> dict:
        st = self.state
        return {
            "iteration": st.iteration,
            "rho": st.rho.tolist(),
            "phi": st.phi_free.tolist(),
            "mu": st.mu_free.tolist(),
            "tau": st.tau.tolist(),
            "delta": st.delta,
            "weights": st.weights.tolist(),
        }

    def sweep(self, adapt: bool):
        rho, phic = self.forward()
        if self.record_incoming:
            self.incoming_ll = self.pointwise_mixture_loglik()
            self.record_incoming = False
        if self.mcmc.collapsed:
            rho, phic = self.step_collapsed(adapt)
        self.step_latent(rho, phic)
        self.step_presence()
        self.step_tallies()
        self.step_weights()
        self.step_recruitment()
        self.step_survival(adapt)
        self.step_capture(adapt)
        if self.mcmc.check_every and self.state.iteration % self.mcmc.check_every == 0:
            self.check()
        self.state.iteration += 1


@dataclass
class ChainDraws:
    """Retained draws of a single chain."""

    blocks: dict
    names: dict
    loglik_unique: np.ndarray
    labels: np.ndarray | None
    entry: np.ndarray | None
    exit: np.ndarray | None
    accept: dict
    steps: dict
    iterations: np.ndarray


def _entry_exit(states):
    alive = states == ALIVE
    any_alive = alive.any(axis=1)
    T = states.shape[1]
    entry = np.where(any_alive, alive.argmax(axis=1), -1).astype(np.int16)
    exit_ = np.where(any_alive, T - 1 - alive[:, ::-1].argmax(axis=1), -1).astype(np.int16)
    return entry, exit_


def run_chain(model: Model, mcmc: McmcConfig, seed: int, progress=None) -> ChainDraws:
    """Run one chain; returns its retained draws."""
    sampler = Sampler(model, mcmc, seed)
    lay, G, T, M = model.layout, model.G, model.T, model.M
    keep = np.arange(mcmc.burn_in, mcmc.n_iters, mcmc.thin)
    S = len(keep)
    names = {
        "weights": [f"w[{g}]" for g in lay.group_names],
        "recruitment": [f"rho[{g},{t + 1}]" for g in lay.group_names for t in range(T)],
        "survival": list(lay.phi_names),
        "capture": list(lay.mu_names) + (list(lay.tau_names) if lay.n_tau_rows else []) + (["delta"] if lay.has_delta else []),
        "abundance": ["N_super"]
        + [f"N[{t + 1}]" for t in range(T)]
        + [f"N_group[{g}]" for g in lay.group_names]
        + [f"psi[{g}]" for g in lay.group_names]
        + [f"uncaught[{g}]" for g in lay.group_names],
    }
    blocks = {k: np.empty((S, len(v))) for k, v in names.items()}
    loglik_u = np.empty((S, len(model.Y_unique)))
    store = mcmc.store_latent
    labels = np.empty((S, M), dtype=np.int8) if store else None
    entry = np.empty((S, M), dtype=np.int16) if store else None
    exit_ = np.empty((S, M), dtype=np.int16) if store else None
    pending = None
    s_idx = 0
    uncaught_rows = ~model.captured_rows
    for it in range(mcmc.n_iters):
        burning = it < mcmc.burn_in
        if it == mcmc.burn_in:
            for a in (sampler.adapt_phi, sampler.adapt_mu, sampler.adapt_tau, sampler.adapt_collapsed):
                a.reset_counts()
        sampler.record_incoming = pending is not None
        sampler.sweep(adapt=mcmc.adapt and burning)
        if pending is not None:
            loglik_u[pending] = sampler.incoming_ll
            pending = None
        if s_idx < S and it == keep[s_idx]:
            st = sampler.state
            z = st.states == ALIVE
            ever = z.any(axis=1)
            n_group = np.bincount(st.c[ever], minlength=G)
            unc = np.bincount(st.c[ever & uncaught_rows], minlength=G)
            psi = np.array([inclusion_prob(r) for r in st.rho])
            capture = [st.mu_free]
            if lay.n_tau_rows:
                capture.append(st.tau.reshape(-1))
            if lay.has_delta:
                capture.append([st.delta])
            blocks["weights"][s_idx] = st.weights
            blocks["recruitment"][s_idx] = st.rho.reshape(-1)
            blocks["survival"][s_idx] = st.phi_free
            blocks["capture"][s_idx] = np.concatenate(capture)
            blocks["abundance"][s_idx] = np.concatenate([[ever.sum()], z.sum(axis=0), n_group, psi, unc])
            if store:
                labels[s_idx] = st.c
                entry[s_idx], exit_[s_idx] = _entry_exit(st.states)
            pending = s_idx
            s_idx += 1
        if progress is not None:
            progress(it)
    if pending is not None:
        sampler.forward()
        loglik_u[pending] = sampler.pointwise_mixture_loglik()
    return ChainDraws(
        blocks=blocks,
        names=names,
        loglik_unique=loglik_u,
        labels=labels,
        entry=entry,
        exit=exit_,
        accept={
            "phi": sampler.adapt_phi.rates(),
            "mu": sampler.adapt_mu.rates(),
            "tau": sampler.adapt_tau.rates(),
            "collapsed": sampler.adapt_collapsed.rates(),
        },
        steps={
            "phi": sampler.adapt_phi.step,
            "mu": sampler.adapt_mu.step,
            "tau": sampler.adapt_tau.step,
            "collapsed": sampler.adapt_collapsed.step,
        },
        iterations=keep,
    )



@dataclass
class DrawStore:
    """Retained draws of all chains, stacked along a leading chain axis.

    ``blocks[name]`` has shape (C, S, K). Pointwise log-likelihoods are kept
    per unique augmented history; ``uidx`` maps rows to them.
    """

    spec: ModelSpec
    grid: TimeGrid
    mcmc: McmcConfig
    seeds: list
    names: dict
    blocks: dict
    loglik_unique: np.ndarray
    uidx: np.ndarray
    multiplicity: np.ndarray
    n_observed: int
    labels: np.ndarray | None = None
    entry: np.ndarray | None = None
    exit: np.ndarray | None = None
    accept: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    iterations: np.ndarray | None = None

    @property
    def n_chains(self) -> int:
        return self.loglik_unique.shape[0]

    @property
    def n_draws(self) -> int:
        return self.loglik_unique.shape[1]

    @property
    def M(self) -> int:
        return len(self.uidx)

    def parameter_names(self) -> list[str]:
        return [n for block in self.names.values() for n in block]

    def locate(self, name: str) -> tuple[str, int]:
        for block, names in self.names.items():
            if name in names:
                return block, names.index(name)
        raise KeyError(name)

    def chains(self, name: str) -> np.ndarray:
        """Draws of one parameter, shape (C, S)."""
        block, k = self.locate(name)
        return self.blocks[block][:, :, k]

    def pooled(self, name: str) -> np.ndarray:
        return self.chains(name).reshape(-1)

    def pointwise_loglik(self, expand: bool = False) -> np.ndarray:
        """(C*S, U) per unique history, or (C*S, M) per augmented row."""
        ll = self.loglik_unique.reshape(-1, self.loglik_unique.shape[-1])
        return ll[:, self.uidx] if expand else ll

    def pooled_labels(self) -> np.ndarray | None:
        return None if self.labels is None else self.labels.reshape(-1, self.M)


def merge_chains(model: Model, mcmc: McmcConfig, seeds, draws: list[ChainDraws]) -> DrawStore:
    blocks = {k: np.stack([d.blocks[k] for d in draws]) for k in draws[0].blocks}
    latent = draws[0].labels is not None

    def stack(attr):
        return np.stack([getattr(d, attr) for d in draws]) if latent else None

    return DrawStore(
        spec=model.spec,
        grid=model.grid,
        mcmc=mcmc,
        seeds=list(seeds),
        names=draws[0].names,
        blocks=blocks,
        loglik_unique=np.stack([d.loglik_unique for d in draws]),
        uidx=model.uidx,
        multiplicity=model.multiplicity,
        n_observed=model.data.D,
        labels=stack("labels"),
        entry=stack("entry"),
        exit=stack("exit"),
        accept=[d.accept for d in draws],
        steps=[d.steps for d in draws],
        iterations=draws[0].iterations,
    )


def _chain_job(args):
    model, mcmc, seed = args
    return run_chain(model, mcmc, seed)


def run_fit(model: Model, mcmc: McmcConfig, jobs: int = 1) -> DrawStore:
    """Run ``mcmc.n_chains`` chains and merge them in chain order.

    Each chain owns a seed spawned from ``mcmc.seed``, so the result does not
    depend on ``jobs``.
    """
    seeds = mcmc.chain_seeds()
    tasks = [(model, mcmc, s) for s in seeds]
    if jobs > 1 and len(seeds) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=min(jobs, len(seeds))) as pool:
            draws = list(pool.map(_chain_job, tasks))
    else:
        draws = [_chain_job(t) for t in tasks]
    return merge_chains(model, mcmc, seeds, draws)
