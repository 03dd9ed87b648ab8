"""Generative simulation of augmented populations and capture histories."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .model import (
    ALIVE,
    DEPARTED,
    NOT_ENTERED,
    CaptureData,
    GroupParams,
    TimeGrid,
    expected_nsuper,
    grid_from_day_lags,
    inclusion_prob,
)

# published within-year day lags between consecutive occasions
YEAR_DAY_LAGS = (20, 1, 12, 15, 56, 9, 9, 12, 10)
YEAR_GAP_DAYS = 240
GEOMETRIC_P = 0.05

RPT_GROUPS = ("R", "P", "T")
RPT_WEIGHTS = (0.2, 0.45, 0.35)
RPT_PHI_T, RPT_PHI_NT = 0.01, 0.997
RPT_MU, RPT_DELTA, RPT_TAU_VAR = 0.0, 0.7, 0.25


def scenario_day_lags(T: int) -> np.ndarray:
    if T not in (10, 20, 30, 40):
        raise InputError(f"scenario time grids exist for T in (10, 20, 30, 40), not {T}")
    lags = []
    for year in range(T // 10):
        if year:
            lags.append(YEAR_GAP_DAYS)
        lags.extend(YEAR_DAY_LAGS)
    return np.array(lags, dtype=float)


def gen_scenario_timegrid(T: int, unit: str = "month") -> TimeGrid:
    """Fixed multi-year occasion grid used by the simulation scenarios."""
    return grid_from_day_lags(scenario_day_lags(T), unit)


def random_timegrid(T: int, rng: np.random.Generator, unit: str = "month", per_year: int = 10) -> TimeGrid:
    """Fresh within-year lags from a shifted geometric; yearly gaps as above."""
    if T < 2:
        raise InputError("a time grid needs at least 2 occasions")
    lags = []
    for t in range(1, T):
        lags.append(YEAR_GAP_DAYS if t % per_year == 0 else int(rng.geometric(GEOMETRIC_P)))
    return grid_from_day_lags(lags, unit)


def rpt_recruitment(T: int) -> np.ndarray:
    """3 x T recruitment matrix of the RPT scenarios (rows R, P, T)."""
    t = np.arange(1, T + 1)
    new_year = (t > 1) & ((t - 1) % 10 == 0)
    rho_r = np.where(t == 1, 0.4, np.where(new_year, 0.02, 0.0025))
    rho_p = np.where(t == 1, 0.4, np.where(new_year, 0.04, 0.005))
    rho_t = np.full(T, 0.02)
    return np.vstack([rho_r, rho_p, rho_t])


def rpt_params(T: int, tau=None) -> GroupParams:
    """True RPT parameters of the simulation scenarios."""
    tau = np.zeros(T) if tau is None else np.asarray(tau, dtype=float)
    return GroupParams(
        rho=rpt_recruitment(T),
        phi=np.array([RPT_PHI_NT, RPT_PHI_NT, RPT_PHI_T]),
        mu=np.full(3, RPT_MU),
        tau=tau,
        weights=np.array(RPT_WEIGHTS),
        delta=RPT_DELTA,
        part_time=np.array([False, True, False]),
    )


def scenario_expected_nsuper(T: int, M_star: int = 500) -> float:
    params = rpt_params(T)
    psi = [inclusion_prob(row) for row in params.rho]
    return expected_nsuper(M_star, params.weights, psi)


def draw_tau(T: int, rng: np.random.Generator, var: float = RPT_TAU_VAR) -> np.ndarray:
    """Occasion effects from N(0, var), recentred to sum to zero."""
    tau = rng.normal(0.0, np.sqrt(var), T)
    return tau - tau.mean()


@dataclass
class ScenarioConfig:
    T: int = 10
    M_star: int = 500
    params: GroupParams | None = None
    lag_mode: str = "scenario"
    grid: TimeGrid | None = None
    seed: int = 0
    unit: str = "month"
    group_names: tuple[str, ...] = RPT_GROUPS
    # occasion effects drawn once per scenario from this seed; None draws
    # them from the replica stream instead
    tau_seed: int | None = None

    def __post_init__(self):
        if self.M_star < 1:
            raise InputError("M_star must be positive")
        if self.lag_mode not in ("scenario", "custom", "random"):
            raise InputError(f"unknown lag mode {self.lag_mode!r}")
        if self.lag_mode == "scenario" and self.T % 10:
            raise InputError("the fixed scenario grid needs T to be a multiple of 10")
        if self.lag_mode == "custom" and self.grid is None:
            raise InputError("custom lag mode needs an explicit grid")
        if self.params is not None and self.params.T != self.T:
            raise InputError("parameter matrices do not match T")


@dataclass
class SimTruth:
    labels: np.ndarray
    states: np.ndarray
    v: np.ndarray
    y_full: np.ndarray
    observed_rows: np.ndarray
    params: GroupParams
    grid: TimeGrid
    group_names: tuple[str, ...] = field(default=RPT_GROUPS)

    @property
    def z(self) -> np.ndarray:
        return (self.states == ALIVE).astype(np.uint8)

    @property
    def r(self) -> np.ndarray:
        r = np.ones_like(self.states, dtype=np.uint8)
        r[:, 1:] = self.states[:, :-1] == NOT_ENTERED
        return r

    @property
    def N_t(self) -> np.ndarray:
        return self.z.sum(axis=0)

    @property
    def N_super(self) -> int:
        return int(self.z.any(axis=1).sum())

    @property
    def N_group(self) -> np.ndarray:
        ever = self.z.any(axis=1)
        return np.bincount(self.labels[ever], minlength=self.params.G)

    @property
    def observed_labels(self) -> np.ndarray:
        return self.labels[self.observed_rows]


def simulate_states(labels, params: GroupParams, grid: TimeGrid, rng: np.random.Generator) -> np.ndarray:
    """Run the three-state chain forward for every row."""
    M, T = len(labels), params.T
    phic = params.survival_matrix(grid)
    states = np.empty((M, T), dtype=np.int8)
    u = rng.random((M, T))
    rho = params.rho[labels]
    phi = phic[labels]
    states[:, 0] = np.where(u[:, 0] < rho[:, 0], ALIVE, NOT_ENTERED)
    for t in range(1, T):
        prev = states[:, t - 1]
        enter = u[:, t] < rho[:, t]
        stay = u[:, t] < phi[:, t]
        states[:, t] = np.where(
            prev == NOT_ENTERED,
            np.where(enter, ALIVE, NOT_ENTERED),
            np.where((prev == ALIVE) & stay, ALIVE, DEPARTED),
        )
    return states


def simulate_captures(states, labels, params: GroupParams, rng: np.random.Generator, collapsed: bool = False):
    """Presence and detections given trajectories.

    Part-time rows are present at an alive occasion with probability
    ``1 - delta``. With ``collapsed=True`` presence is not drawn and the
    thinned capture probability is used directly (``v`` is then ``z``).
    """
    z = states == ALIVE
    pt = params.part_time[labels][:, None]
    p_exposed = params.exposed_capture_matrix()[labels]
    u_v = rng.random(z.shape)
    u_y = rng.random(z.shape)
    if collapsed:
        v = z.copy()
        p = np.where(pt, (1.0 - params.delta) * p_exposed, p_exposed)
    else:
        v = z & (~pt | (u_v < 1.0 - params.delta))
        p = p_exposed
    y = v & (u_y < p)
    return v.astype(np.uint8), y.astype(np.uint8)


def simulate_population(config: ScenarioConfig, collapsed: bool = False) -> tuple[CaptureData, SimTruth]:
    """Simulate one pseudo-population and its observed capture matrix.

    The returned :class:`CaptureData` holds only rows with at least one
    capture and no augmentation.

    Raises
    ------
    InputError
        If no individual could ever be observed (all recruitment or all
        capture probabilities zero, or all-zero weights on such groups).
    """
    rng = np.random.default_rng(config.seed)
    if config.lag_mode == "scenario":
        grid = gen_scenario_timegrid(config.T, config.unit)
    elif config.lag_mode == "random":
        grid = random_timegrid(config.T, rng, config.unit)
    else:
        grid = config.grid
        if grid.T != config.T:
            raise InputError("custom grid length does not match T")
    params = config.params
    if params is None:
        tau_rng = rng if config.tau_seed is None else np.random.default_rng(config.tau_seed)
        params = rpt_params(config.T, draw_tau(config.T, tau_rng))
    observable = (params.weights > 0) & (params.rho.max(axis=1) > 0) & (params.capture_matrix().max(axis=1) > 0)
    if not observable.any():
        raise InputError("degenerate configuration: no individual can ever be captured")
    labels = rng.choice(params.G, size=config.M_star, p=params.weights)
    states = simulate_states(labels, params, grid, rng)
    v, y = simulate_captures(states, labels, params, rng, collapsed=collapsed)
    seen = np.flatnonzero(y.any(axis=1))
    data = CaptureData(y[seen], n_augmented=0)
    truth = SimTruth(
        labels=labels,
        states=states,
        v=v,
        y_full=y,
        observed_rows=seen,
        params=params,
        grid=grid,
        group_names=config.group_names,
    )
    return data, truth


def augment(observed: CaptureData, n_zero: int) -> CaptureData:
    """Append ``n_zero`` all-zero rows (on top of any already present)."""
    if n_zero < 0:
        raise InputError("augmentation size must be non-negative")
    return CaptureData(observed.observed.copy(), n_augmented=observed.n_augmented + n_zero, ids=list(observed.ids))
