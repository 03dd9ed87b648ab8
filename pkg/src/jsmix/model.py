"""Domain types, the three-state latent process and exact individual likelihoods.

Latent states of an augmented row at each occasion are encoded as small
integers::

    NOT_ENTERED = 0   never part of the population so far
    ALIVE       = 1   part of the population (exposed to capture)
    DEPARTED    = 2   left the population for good (absorbing)

State codes never decrease along a trajectory, which is how the
``r``/``z`` recurrence and the no-re-entry rule are enforced.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np
from scipy.special import expit, logsumexp

from .errors import InputError

NOT_ENTERED, ALIVE, DEPARTED = 0, 1, 2

# finite stand-in for log(0); MH treats it as certain rejection
LOG_ZERO = -1.0e300

PROB_FLOOR = 1e-12

UNIT_DAYS = {
    "day": 1.0,
    "week": 7.0,
    "month": 365.25 / 12.0,
    "year": 365.25,
}


class Effect(str, Enum):
    """Pledger-style effect structure of a parameter family."""

    CONST = "const"
    TIME = "time"
    GROUP = "group"
    TIME_PLUS_GROUP = "time_plus_group"
    TIME_BY_GROUP = "time_by_group"


RECRUITMENT_EFFECTS = (Effect.TIME, Effect.TIME_BY_GROUP)
SURVIVAL_EFFECTS = (Effect.CONST, Effect.TIME, Effect.GROUP, Effect.TIME_BY_GROUP)
CAPTURE_EFFECTS = tuple(Effect)

RPT_NAMES = ("R", "P", "T")


@dataclass(frozen=True)
class ModelSpec:
    """Which parameter families vary by occasion and/or mixture group.

    ``rpt`` selects the three-group resident / part-time / transient
    parameterisation: group-specific recruitment, survival shared by R and P
    and lower for T, one capture intercept, and a part-time undetectability.
    """

    G: int = 1
    rho_structure: Effect = Effect.TIME
    phi_structure: Effect = Effect.CONST
    p_structure: Effect = Effect.TIME
    rpt: bool = False
    name: str = ""

    def __post_init__(self):
        for attr in ("rho_structure", "phi_structure", "p_structure"):
            try:
                object.__setattr__(self, attr, Effect(getattr(self, attr)))
            except ValueError:
                raise InputError(f"unknown effect {getattr(self, attr)!r} for {attr}") from None
        if self.G < 1:
            raise InputError("G must be at least 1")
        if self.rpt:
            if self.G != 3:
                raise InputError("the RPT model has exactly 3 groups")
            return
        if self.rho_structure not in RECRUITMENT_EFFECTS:
            raise InputError("recruitment must be time or time_by_group")
        if self.phi_structure not in SURVIVAL_EFFECTS:
            raise InputError("survival must be const, time, group or time_by_group")
        grouped = {Effect.GROUP, Effect.TIME_PLUS_GROUP, Effect.TIME_BY_GROUP}
        if self.G == 1 and (
            self.rho_structure in grouped or self.phi_structure in grouped or self.p_structure in grouped
        ):
            raise InputError("group effects need G >= 2")

    @classmethod
    def rpt_model(cls) -> "ModelSpec":
        return cls(3, Effect.TIME_BY_GROUP, Effect.GROUP, Effect.TIME, rpt=True, name="rpt")

    @classmethod
    def pledger(cls, k: int) -> "ModelSpec":
        """Competitor models m1..m10.

        m1 homogeneous; m2-m4 capture heterogeneity (t+h); m5-m7 survival
        heterogeneity; m8-m10 recruitment, survival and capture all t x h.
        """
        if k == 1:
            return cls(1, Effect.TIME, Effect.CONST, Effect.TIME, name="m1")
        if 2 <= k <= 4:
            return cls(k, Effect.TIME_BY_GROUP, Effect.CONST, Effect.TIME_PLUS_GROUP, name=f"m{k}")
        if 5 <= k <= 7:
            return cls(k - 3, Effect.TIME_BY_GROUP, Effect.GROUP, Effect.TIME, name=f"m{k}")
        if 8 <= k <= 10:
            return cls(k - 6, Effect.TIME_BY_GROUP, Effect.TIME_BY_GROUP, Effect.TIME_BY_GROUP, name=f"m{k}")
        raise InputError(f"no competitor model m{k}; expected m1..m10")

    @classmethod
    def from_name(cls, name: str) -> "ModelSpec":
        key = name.strip().lower()
        if key == "rpt":
            return cls.rpt_model()
        if key.startswith("m") and key[1:].isdigit():
            return cls.pledger(int(key[1:]))
        raise InputError(f"unknown model {name!r}; expected rpt or m1..m10")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        return f"custom[G={self.G},rho={self.rho_structure.value},phi={self.phi_structure.value},p={self.p_structure.value}]"

    @property
    def group_names(self) -> tuple[str, ...]:
        if self.rpt:
            return RPT_NAMES
        return tuple(str(g + 1) for g in range(self.G))

    @property
    def part_time(self) -> np.ndarray:
        mask = np.zeros(self.G, dtype=bool)
        if self.rpt:
            mask[1] = True
        return mask

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "G": self.G,
            "rho_structure": self.rho_structure.value,
            "phi_structure": self.phi_structure.value,
            "p_structure": self.p_structure.value,
            "rpt": self.rpt,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        return cls(**data)


def unit_length(unit: str) -> float:
    try:
        return UNIT_DAYS[unit]
    except KeyError:
        raise InputError(f"unknown time unit {unit!r}; expected one of {sorted(UNIT_DAYS)}") from None


@dataclass(frozen=True)
class TimeGrid:
    """Occasion timestamps (days from study start) and lags in ``unit``."""

    occasion_times: np.ndarray
    unit: str
    lags: np.ndarray

    @property
    def T(self) -> int:
        return len(self.occasion_times)


def build_time_grid(occasion_times: Sequence[float], unit: str = "month") -> TimeGrid:
    """Build a :class:`TimeGrid` with ``lags[0] == 0`` by convention.

    Raises
    ------
    InputError
        If no occasion is given or offsets are not strictly increasing.
    """
    times = np.asarray(occasion_times, dtype=float)
    if times.ndim != 1 or len(times) < 1:
        raise InputError("a time grid needs at least one occasion")
    if not np.all(np.isfinite(times)):
        raise InputError("occasion offsets must be finite")
    steps = np.diff(times)
    if np.any(steps <= 0):
        bad = int(np.argmax(steps <= 0)) + 2
        raise InputError(f"occasion offsets must be strictly increasing (occasion {bad})")
    lags = np.concatenate([[0.0], steps / unit_length(unit)])
    times.setflags(write=False)
    lags.setflags(write=False)
    return TimeGrid(times, unit, lags)


def grid_from_day_lags(day_lags: Sequence[float], unit: str = "month") -> TimeGrid:
    return build_time_grid(np.concatenate([[0.0], np.cumsum(day_lags)]), unit)


def compound_survival(phi_base, lag):
    """Survival over ``lag`` time units given per-unit survival ``phi_base``."""
    phi_base = np.asarray(phi_base, dtype=float)
    lag = np.asarray(lag, dtype=float)
    if np.any((phi_base < 0) | (phi_base > 1)):
        raise InputError("survival probability must lie in [0, 1]")
    if np.any(lag < 0):
        raise InputError("lag must be non-negative")
    out = np.power(phi_base, lag)
    return float(out) if out.ndim == 0 else out


def capture_prob(mu, tau_t, delta=0.0, part_time=False):
    """logit^-1(mu + tau_t), thinned by ``1 - delta`` for part-time rows."""
    if not 0.0 <= delta < 1.0:
        raise InputError("delta must lie in [0, 1)")
    p = expit(np.add(mu, tau_t))
    if part_time:
        p = (1.0 - delta) * p
    return float(p) if np.ndim(p) == 0 else p


def transition_matrix(rho_t: float, phi_compounded: float) -> np.ndarray:
    """3x3 transition matrix over (not-entered, alive, departed)."""
    if not (0.0 <= rho_t <= 1.0 and 0.0 <= phi_compounded <= 1.0):
        raise InputError("transition probabilities must lie in [0, 1]")
    return np.array(
        [
            [1.0 - rho_t, rho_t, 0.0],
            [0.0, phi_compounded, 1.0 - phi_compounded],
            [0.0, 0.0, 1.0],
        ]
    )


def _as_row(x, T: int, name: str) -> np.ndarray:
    arr = np.broadcast_to(np.asarray(x, dtype=float), (T,))
    if np.any((arr < 0) | (arr > 1)):
        raise InputError(f"{name} must lie in [0, 1]")
    return arr


def forward_loglik(history, rho, phi, p, grid: TimeGrid) -> float:
    """Exact log P(history | one group's parameters).

    ``rho`` and ``p`` are per-occasion; ``phi`` is per-unit survival (scalar or
    per-occasion) and is compounded with the grid lags. Returns ``LOG_ZERO``
    for histories of probability zero.
    """
    y = np.asarray(history)
    T = grid.T
    if y.shape != (T,):
        raise InputError(f"history length {y.shape} does not match grid with T={T}")
    rho = _as_row(rho, T, "rho")
    p = _as_row(p, T, "p")
    phic = np.power(_as_row(phi, T, "phi"), grid.lags)
    total = 0.0
    a = np.array([1.0 - rho[0], rho[0], 0.0])
    for t in range(T):
        if t > 0:
            a = a @ transition_matrix(rho[t], phic[t])
        if y[t]:
            a = np.array([0.0, a[1] * p[t], 0.0])
        else:
            a = np.array([a[0], a[1] * (1.0 - p[t]), a[2]])
        s = a.sum()
        if s <= 0.0:
            return LOG_ZERO
        total += np.log(s)
        a = a / s
    return float(total)


@dataclass
class GroupParams:
    """Full parameter state for G mixture components.

    ``phi`` holds per-unit survival per group, either shape (G,) or (G, T);
    ``tau`` is shape (T,) shared across groups or (G, T) for a group-by-time
    capture structure. ``part_time`` flags the groups whose capture
    probability is thinned by ``1 - delta``.
    """

    rho: np.ndarray
    phi: np.ndarray
    mu: np.ndarray
    tau: np.ndarray
    weights: np.ndarray
    delta: float = 0.0
    part_time: np.ndarray = field(default=None)

    def __post_init__(self):
        self.rho = np.atleast_2d(np.asarray(self.rho, dtype=float))
        G, T = self.rho.shape
        self.phi = np.asarray(self.phi, dtype=float)
        self.mu = np.broadcast_to(np.asarray(self.mu, dtype=float), (G,)).copy()
        self.tau = np.asarray(self.tau, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.part_time is None:
            self.part_time = np.zeros(G, dtype=bool)
        self.part_time = np.asarray(self.part_time, dtype=bool)
        if self.weights.shape != (G,) or self.part_time.shape != (G,):
            raise InputError("weights and part_time must have one entry per group")
        if abs(self.weights.sum() - 1.0) > 1e-9 or np.any(self.weights < 0):
            raise InputError("mixture weights must lie on the simplex")
        if self.tau.shape not in ((T,), (G, T)):
            raise InputError("tau must have shape (T,) or (G, T)")
        if not 0.0 <= self.delta < 1.0:
            raise InputError("delta must lie in [0, 1)")

    @property
    def G(self) -> int:
        return self.rho.shape[0]

    @property
    def T(self) -> int:
        return self.rho.shape[1]

    def survival_unit(self) -> np.ndarray:
        """Per-unit survival broadcast to (G, T)."""
        if self.phi.ndim == 2:
            return self.phi
        return np.repeat(np.broadcast_to(self.phi, (self.G,))[:, None], self.T, axis=1)

    def survival_matrix(self, grid: TimeGrid) -> np.ndarray:
        """Compounded survival phi_g ** l_t, shape (G, T); column 0 is 1."""
        return np.power(self.survival_unit(), grid.lags[None, :])

    def exposed_capture_matrix(self) -> np.ndarray:
        """Capture probability of a present individual, shape (G, T)."""
        tau = self.tau if self.tau.ndim == 2 else np.broadcast_to(self.tau, (self.G, self.T))
        return expit(self.mu[:, None] + tau)

    def capture_matrix(self) -> np.ndarray:
        """Capture probability of an alive individual, shape (G, T)."""
        p = self.exposed_capture_matrix()
        thin = np.where(self.part_time, 1.0 - self.delta, 1.0)
        return p * thin[:, None]


def mixture_loglik(history, params: GroupParams, grid: TimeGrid) -> float:
    """log sum_g w_g P(history | group g)."""
    phic = params.survival_unit()
    p = params.capture_matrix()
    terms = []
    for g in range(params.G):
        if params.weights[g] <= 0.0:
            continue
        ll = forward_loglik(history, params.rho[g], phic[g], p[g], grid)
        if ll > LOG_ZERO:
            terms.append(np.log(params.weights[g]) + ll)
    if not terms:
        return LOG_ZERO
    return float(logsumexp(terms))


def inclusion_prob(rho_row) -> float:
    rho_row = np.asarray(rho_row, dtype=float)
    if np.any((rho_row < 0) | (rho_row > 1)):
        raise InputError("recruitment probabilities must lie in [0, 1]")
    return float(-np.expm1(np.sum(np.log1p(-rho_row)))) if np.all(rho_row < 1) else 1.0


def expected_nsuper(M: float, weights, psi_per_group) -> float:
    weights = np.asarray(weights, dtype=float)
    if abs(weights.sum() - 1.0) > 1e-9 or np.any(weights < 0):
        raise InputError("mixture weights must lie on the simplex")
    return float(M * np.dot(weights, psi_per_group))


@dataclass
class CaptureData:
    """Observed D x T detection matrix plus ``n_augmented`` all-zero rows."""

    observed: np.ndarray
    n_augmented: int = 0
    ids: list[str] | None = None

    def __post_init__(self):
        obs = np.asarray(self.observed)
        if obs.ndim != 2:
            raise InputError("capture matrix must be two-dimensional")
        if not np.all((obs == 0) | (obs == 1)):
            raise InputError("capture matrix must be binary")
        self.observed = obs.astype(np.uint8)
        if self.observed.shape[0] and np.any(self.observed.sum(axis=1) == 0):
            row = int(np.argmax(self.observed.sum(axis=1) == 0))
            raise InputError(f"observed row {row + 1} has no captures")
        if self.n_augmented < 0:
            raise InputError("augmentation size must be non-negative")
        if self.ids is None:
            self.ids = [str(i + 1) for i in range(self.D)]
        if len(self.ids) != self.D:
            raise InputError("one id per observed row is required")

    @property
    def D(self) -> int:
        return self.observed.shape[0]

    @property
    def T(self) -> int:
        return self.observed.shape[1]

    @property
    def M(self) -> int:
        return self.D + self.n_augmented

    def augmented(self) -> np.ndarray:
        return np.vstack([self.observed, np.zeros((self.n_augmented, self.T), dtype=np.uint8)])


@dataclass
class LatentState:
    """Per-row trajectories and labels.

    ``v`` is presence given alive; it equals ``z`` for rows whose group is
    not part-time.
    """

    z: np.ndarray
    r: np.ndarray
    v: np.ndarray
    c: np.ndarray

    @classmethod
    def from_states(cls, states: np.ndarray, c: np.ndarray, v: np.ndarray | None = None) -> "LatentState":
        states = np.asarray(states)
        z = (states == ALIVE).astype(np.uint8)
        r = np.ones_like(z)
        r[:, 1:] = states[:, :-1] == NOT_ENTERED
        if v is None:
            v = z.copy()
        return cls(z=z, r=r, v=np.asarray(v, dtype=np.uint8), c=np.asarray(c))

    def check(self) -> None:
        """Raise ``AssertionError`` if the r/z recurrence is broken."""
        z, r = self.z.astype(int), self.r.astype(int)
        assert np.all(r[:, 0] == 1)
        assert np.all(r[:, 1:] == np.minimum(r[:, :-1], 1 - z[:, :-1]))
        # no alive -> gone -> alive pattern
        started = np.maximum.accumulate(z, axis=1)
        gone = started & (1 - z)
        assert not np.any(np.maximum.accumulate(gone, axis=1)[:, :-1] & z[:, 1:])
        assert np.all(self.v <= self.z)


@dataclass
class AbundanceDraw:
    N_t: np.ndarray
    N_super: int
    N_group: np.ndarray
    psi_g: np.ndarray | None = None


def derived_counts(latent: LatentState, G: int | None = None, rho: np.ndarray | None = None) -> AbundanceDraw:
    """Population sizes implied by one latent configuration."""
    z = np.asarray(latent.z)
    c = np.asarray(latent.c)
    if G is None:
        G = int(c.max()) + 1 if c.size else 1
    ever = z.any(axis=1)
    N_group = np.bincount(c[ever], minlength=G).astype(np.int64)
    psi = None if rho is None else np.array([inclusion_prob(row) for row in np.atleast_2d(rho)])
    return AbundanceDraw(
        N_t=z.sum(axis=0).astype(np.int64),
        N_super=int(ever.sum()),
        N_group=N_group,
        psi_g=psi,
    )
