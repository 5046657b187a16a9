# mixlab/mixing.py
"""
TV decay of the laws of u_k, the empirical stationary measure, the exponential
rate fit, and the two certificates behind geometric mixing:

- recurrence: from anywhere in the extended space, the chain reaches a ball
  around (0, 0) in m steps with probability at least p;
- coupling: two-step laws started in a small ball overlap by at least the
  mass of a common minorizing measure.

Balls in the extended space use max(|v|, |xi|).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.optimize import minimize_scalar
from scipy.stats import linregress

from mixlab.dynamics import RdsSystem, check_dissipativity
from mixlab.errors import (BudgetExceeded, CertificateContradicted, EmptyMinorization,
                           InsufficientDecorrelation, TooFewPoints)
from mixlab.markov_noise import (MarkovKernel, _normalize_rows, ball_cell_fraction, check_strong_recurrence,
                                 density_rows, step_error_bound, transition_matrix)
from mixlab.measures import (Box, GridDensity, EmpiricalMeasure, binned_probabilities, cell_centers,
                             cell_diameter, cell_index, cell_volume, histogram, sample_grid_density,
                             tv_bootstrap_band, tv_null_band, tv_samples, _cells_tuple)
from mixlab.pushforward import ParamDensityKernel, RegularMap, pushforward_density
from mixlab.reduction import (ExtendedState, NoiseModel, as_stationary, extended_kernel,
                              extended_transfer_matrix, simulate_ensemble)
from utils.logging_utils import get_logger
from utils.sample_points import ball_points, box_points, corners, lattice_spacing
from utils.seeding import BLOCK_SIZE, rng_for

logger = get_logger(__name__)

# ---- Config ----
FLOOR_FACTOR = 10.0          # fit only where tv > FLOOR_FACTOR * noise_floor
MIN_FIT_POINTS = 4
FLOOR_REPEATS = 11
PILOT_N = 2000
PILOT_HORIZON = 50
PILOT_CELLS_1D = 64
PILOT_CELLS_ND = 16
HARVESTS_PER_TRAJECTORY = 4
SEGMENT_CELLS_1D = 40
SEGMENT_CELLS_ND = 12
STATE_CELLS_1D = 256
STATE_CELLS_ND = 32
MAX_SEGMENT = 3
DELTA_BISECTIONS = 30
DELTA_SAFETY = 0.9
KICK_PATTERNS = 32
MC_SIGMAS = 3.0
RECURRENCE_STARTS = 8
MINORIZATION_STATE_CELLS = 48
MINORIZATION_NOISE_CELLS = 32
MINORIZATION_STARTS = 2       # S(v, .) is injective for kicked systems
SEARCH_STATE_CELLS = 16
SEARCH_NOISE_CELLS = 12
DELTA_SEARCH_FLOOR = 0.5
DELTA_CANDIDATES = 5
BOX_SIZES = 33
GRID_BAND_LIMIT = 0.05
COUPLING_CELLS = 24
DOMINATION_SIGMAS = 4.0


# ---------------- Types ---------------- #
@dataclass(frozen=True)
class DecayCurve:
    horizon: int
    tv_values: np.ndarray
    bands: np.ndarray            # (horizon + 1, 2)
    noise_floor: float

    def __post_init__(self):
        tv = np.asarray(self.tv_values, dtype=float).reshape(-1)
        if np.any(tv < 0):
            raise ValueError("tv values must be nonnegative")
        if not self.noise_floor > 0:
            raise ValueError("noise_floor must be positive")
        object.__setattr__(self, "tv_values", tv)
        object.__setattr__(self, "bands", np.asarray(self.bands, dtype=float).reshape(tv.size, 2))

    @classmethod
    def synthetic(cls, values, noise_floor: float) -> "DecayCurve":
        values = np.asarray(values, dtype=float)
        return cls(max(values.size - 1, 0), values, np.stack([values, values], axis=-1), noise_floor)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "k": np.arange(self.tv_values.size, dtype=int),
            "tv": self.tv_values,
            "band_lo": self.bands[:, 0],
            "band_hi": self.bands[:, 1],
            "floor": np.full(self.tv_values.size, self.noise_floor),
        })


@dataclass(frozen=True)
class RateFit:
    C_fit: float
    gamma_fit: float
    r_squared: float
    k_range_used: Tuple[int, int]

    def to_dict(self) -> Dict[str, float]:
        return {"C_fit": self.C_fit, "gamma_fit": self.gamma_fit, "r_squared": self.r_squared,
                "k_min": self.k_range_used[0], "k_max": self.k_range_used[1]}


@dataclass(frozen=True)
class RecurrenceReport:
    m_steps: int
    p_bound: float
    target_radius: float
    delta: float = 0.0
    p_stay: float = 0.0          # noise stays in B(0, delta) for the contraction steps
    p_reach: float = 0.0         # noise reaches B(0, delta) from anywhere
    contraction_steps: int = 0
    reach_steps: int = 0
    mc_frequency: float = float("nan")


@dataclass(frozen=True)
class MinorizingMeasure:
    density: GridDensity         # gamma on W, 0 elsewhere (unnormalized)
    mass: float
    gamma: float
    window: Box
    delta: float
    lower: GridDensity           # full two-step lower density before the box extraction
    state_free: bool = False


@dataclass(frozen=True)
class DominationCheck:
    passed: bool
    worst_margin: float
    margins: np.ndarray


@dataclass(frozen=True)
class CouplingCertificate:
    n_steps: int
    epsilon: float
    ball_radius: float
    worst_pair_tv: float
    band: float = 0.0
    passed: bool = True
    method: str = "mc"
    pair_tvs: np.ndarray = field(default_factory=lambda: np.zeros(0))


# ---------------- Helpers ---------------- #
def _state_cells(sys: RdsSystem, cells=None):
    if cells is None:
        cells = STATE_CELLS_1D if sys.dim_state == 1 else STATE_CELLS_ND
    return _cells_tuple(cells, sys.dim_state)


def _power_box(box: Box, times: int) -> Box:
    out = box
    for _ in range(times - 1):
        out = out.product(box)
    return out


def _ball_points(box: Box, radius: float, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform points of box ∩ closed ball B(0, radius)."""
    lo = np.maximum(box.lo, -radius)
    hi = np.minimum(box.hi, radius)
    out = np.empty((0, box.dim))
    while out.shape[0] < count:
        cand = lo + (hi - lo) * rng.random((4 * count, box.dim))
        out = np.concatenate([out, cand[np.linalg.norm(cand, axis=-1) <= radius]])
    return out[:count]


def extended_ball_points(sys: RdsSystem, radius: float, count: int, seed: int) -> np.ndarray:
    """Points U = (v, xi) with max(|v|, |xi|) <= radius, shape (count, dim_state + dim_noise)."""
    rng = rng_for(seed, "ball_points")
    v = _ball_points(sys.invariant_set, radius, count, rng)
    xi = _ball_points(sys.noise_support, radius, count, rng)
    return np.concatenate([v, xi], axis=-1)


def _split(sys: RdsSystem, U) -> Tuple[np.ndarray, np.ndarray]:
    U = np.asarray(U, dtype=float).reshape(-1, sys.dim_state + sys.dim_noise)
    return U[:, :sys.dim_state], U[:, sys.dim_state:]


# ---------------- Stationary measure ---------------- #
def decorrelation_lag(sys: RdsSystem, noise_model: NoiseModel, seed: int, pilot_n: int = PILOT_N,
                      pilot_horizon: int = PILOT_HORIZON, threads: int = 1,
                      block_size: int = BLOCK_SIZE) -> int:
    """Steps after which two ensembles from opposite corners of X are indistinguishable."""
    X = sys.invariant_set
    cells = PILOT_CELLS_1D if sys.dim_state == 1 else PILOT_CELLS_ND
    a = simulate_ensemble(sys, noise_model, X.lo, pilot_n, pilot_horizon, seed, threads=threads,
                          block_size=block_size, stage="pilot_lo").states
    b = simulate_ensemble(sys, noise_model, X.hi, pilot_n, pilot_horizon, seed, threads=threads,
                          block_size=block_size, stage="pilot_hi").states
    tv = np.array([tv_samples(a[:, k], b[:, k], X, cells) for k in range(pilot_horizon + 1)])
    floor = max(float(np.median(tv[-5:])), 1e-12)
    reached = np.flatnonzero(tv <= 1.5 * floor)
    try:
        fit = fit_rate(DecayCurve.synthetic(tv, floor))
        fitted = math.ceil(math.log(max(fit.C_fit, 1.0) / floor) / fit.gamma_fit) if fit.gamma_fit > 0 else None
    except TooFewPoints:
        fitted = None
    if reached.size:
        lag = int(reached[0]) if fitted is None else max(int(reached[0]), min(fitted, pilot_horizon))
    elif fitted is not None:
        lag = int(fitted)
    else:
        raise InsufficientDecorrelation(f"{sys.name}: pilot TV never reached its floor and no rate could be fitted")
    lag = max(lag, 1)
    logger.info("%s: decorrelation lag %d (pilot floor %.4f)", sys.name, lag, floor)
    return lag


def estimate_stationary(sys: RdsSystem, noise_model: NoiseModel, burn_in: int, N: int, segment_m: int,
                        seed: int, state_cells=None, segment_cells=None, threads: int = 1,
                        block_size: int = BLOCK_SIZE, harvests: int = HARVESTS_PER_TRAJECTORY,
                        pilot_n: int = PILOT_N, pilot_horizon: int = PILOT_HORIZON) -> List[GridDensity]:
    """
    Empirical marginals mu_0, ..., mu_m of the stationary law on X, X^2, ...:
    segments [u_t, ..., u_{t+j}] harvested after `burn_in` steps, `harvests` per
    trajectory, spaced by the pilot decorrelation lag.
    """
    if not 0 <= segment_m <= MAX_SEGMENT:
        raise ValueError(f"segment_m must be in 0..{MAX_SEGMENT}")
    X = sys.invariant_set
    lag = decorrelation_lag(sys, noise_model, seed, pilot_n, pilot_horizon, threads, block_size)
    gap = max(lag, segment_m + 1)
    n_traj = math.ceil(int(N) / harvests)
    start = np.clip(np.zeros(sys.dim_state), X.lo, X.hi)
    burn = simulate_ensemble(sys, noise_model, start, n_traj, burn_in, seed, threads=threads,
                             block_size=block_size, stage="stationary_burn_in", keep_path=False)
    run = simulate_ensemble(sys, noise_model, burn.states[:, -1], n_traj, (harvests - 1) * gap + segment_m, seed,
                            xi0=burn.buffers, threads=threads, block_size=block_size, stage="stationary_harvest")
    segments = np.concatenate([run.states[:, i * gap:i * gap + segment_m + 1] for i in range(harvests)])[:int(N)]

    s_cells = _state_cells(sys, state_cells)
    seg_cells = segment_cells or (SEGMENT_CELLS_1D if sys.dim_state == 1 else SEGMENT_CELLS_ND)
    out = []
    for j in range(segment_m + 1):
        box = _power_box(X, j + 1)
        pts = segments[:, :j + 1].reshape(segments.shape[0], -1)
        cells = s_cells if j == 0 else _cells_tuple(seg_cells, box.dim)
        mu = histogram(EmpiricalMeasure.from_points(pts, box, seed=seed), box, cells)
        out.append(GridDensity(mu.box, mu.cells, mu.values, {"lag": float(lag), "samples": float(pts.shape[0])}))
    logger.info("%s: stationary estimate from %d segments (burn-in %d, gap %d)", sys.name, segments.shape[0], burn_in, gap)
    return out


# ---------------- Decay ---------------- #
def noise_floor(mu_ref: GridDensity, N: int, seed: int, repeats: int = FLOOR_REPEATS) -> float:
    """Median TV between two independent N-sample histograms of mu_ref."""
    rng = rng_for(seed, "noise_floor")
    vals = []
    for _ in range(int(repeats)):
        a = sample_grid_density(mu_ref, N, rng).points
        b = sample_grid_density(mu_ref, N, rng).points
        vals.append(tv_samples(a, b, mu_ref.box, mu_ref.cells))
    return float(np.median(vals))


def decay_curve(sys: RdsSystem, noise_model: NoiseModel, u0, mu_ref: GridDensity, horizon: int, N: int,
                seed: int, threads: int = 1, block_size: int = BLOCK_SIZE, n_boot: int = 200,
                level: float = 0.95, xi0=None) -> DecayCurve:
    """
    tv(k) = TV(histogram of u_k, mu_ref) for k = 0..horizon, started from delta_{u0}
    times the stationary past law; u0 may also hold one state per trajectory.
    A noise value xi0 fixes every entry of the past buffer instead.
    """
    buffers = None
    if xi0 is not None:
        model = as_stationary(noise_model)
        xi0 = np.asarray(xi0, dtype=float).reshape(model.dim)
        buffers = np.broadcast_to(xi0, (int(N), model.memory_m, model.dim))
    paths = simulate_ensemble(sys, noise_model, u0, N, horizon, seed, xi0=buffers, threads=threads,
                              block_size=block_size, stage="decay")
    tv = np.empty(int(horizon) + 1)
    bands = np.empty((int(horizon) + 1, 2))
    for k in range(int(horizon) + 1):
        obs, lo, hi = tv_bootstrap_band(paths.states[:, k], mu_ref, rng_for(seed, "decay_band", k), n_boot, level)
        tv[k] = obs
        bands[k] = (lo, hi)
    floor = max(noise_floor(mu_ref, N, seed), 1e-12)
    return DecayCurve(int(horizon), tv, bands, floor)


def fit_rate(curve: DecayCurve, floor_factor: float = FLOOR_FACTOR, min_points: int = MIN_FIT_POINTS,
             ceiling: Optional[float] = None) -> RateFit:
    """
    log tv = log C - gamma k on the leading run of k with tv > floor_factor * noise_floor.
    With a ceiling, the run starts at the first k with tv below it.
    """
    tv = curve.tv_values
    start = 0
    if ceiling is not None:
        under = tv < ceiling
        start = int(np.argmax(under)) if np.any(under) else tv.size
    above = tv[start:] > floor_factor * curve.noise_floor
    stop = start + (int(np.argmin(above)) if not np.all(above) else above.size)
    if stop - start < min_points:
        raise TooFewPoints(f"{stop - start} points between the ceiling and {floor_factor:g} x floor "
                           f"({curve.noise_floor:.3g}); need {min_points}")
    k = np.arange(start, stop, dtype=float)
    res = linregress(k, np.log(tv[start:stop]))
    r2 = float(min(max(res.rvalue ** 2, 0.0), 1.0))
    logger.info("fit_rate: window k=%d..%d gamma=%.4f C=%.4f r2=%.4f", start, stop - 1, -res.slope,
                math.exp(res.intercept), r2)
    return RateFit(float(math.exp(res.intercept)), float(-res.slope), r2, (start, stop - 1))


# ---------------- Recurrence ---------------- #
def _worst_small_kick_norm(sys: RdsSystem, m: int, delta: float, u: np.ndarray, kicks: np.ndarray) -> float:
    """max |S_m(u; eta_1..eta_m)| over sample states and kick patterns scaled into B(0, delta)."""
    n_u, n_k = u.shape[0], kicks.shape[0]
    x = np.repeat(u, n_k, axis=0)
    seq = np.tile(delta * kicks, (n_u, 1, 1))
    for j in range(m):
        x = sys(x, seq[:, j])
    return float(np.linalg.norm(x, axis=-1).max())


def _kick_patterns(sys: RdsSystem, m: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-ball kick sequences: constant +-e_i plus random draws, shape (P, m, dim_noise)."""
    d = sys.dim_noise
    axes = np.concatenate([np.eye(d), -np.eye(d)])
    const = np.repeat(axes[:, None, :], m, axis=1)
    v = rng.normal(size=(KICK_PATTERNS, m, d))
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    v *= rng.random((KICK_PATTERNS, m, 1)) ** (1.0 / d)
    return np.concatenate([const, v])


def _small_kick_delta(sys: RdsSystem, m: int, radius: float, seed: int) -> float:
    """Largest delta (bisection, then a safety factor) with |S_m(u; eta)| < radius for kicks in B(0, delta)."""
    X, K = sys.invariant_set, sys.noise_support
    u = box_points(X.lo, X.hi, n_random=128, seed=seed)
    kicks = _kick_patterns(sys, m, rng_for(seed, "kick_patterns"))
    hi = min(radius, float(np.min(np.minimum(-K.lo, K.hi))))
    if hi <= 0:
        raise BudgetExceeded(f"{sys.name}: 0 is not interior to the noise support")
    if _worst_small_kick_norm(sys, m, hi, u, kicks) < radius:
        return DELTA_SAFETY * hi
    lo = 0.0
    for _ in range(DELTA_BISECTIONS):
        mid = 0.5 * (lo + hi)
        if _worst_small_kick_norm(sys, m, mid, u, kicks) < radius:
            lo = mid
        else:
            hi = mid
    if lo <= 0:
        raise BudgetExceeded(f"{sys.name}: no kick size keeps S_{m} inside B(0, {radius})")
    return DELTA_SAFETY * lo


def _stay_probability(kernel: MarkovKernel, delta: float, steps: int, cells=None, seed: int = 0) -> float:
    """inf over xi in B(0, delta) of P{next `steps` noises all in B(0, delta)}, minus grid and lattice slack."""
    K = kernel.noise_support
    cells = kernel.sampler_cells if cells is None else _cells_tuple(cells, K.dim)
    per_axis = 33 if K.dim == 1 else 9
    zero = np.zeros(K.dim)
    xs = ball_points(zero, delta, K.lo, K.hi, n_random=64, seed=seed, per_axis=per_axis)
    frac = ball_cell_fraction(K, cells, delta)
    rows = _normalize_rows(density_rows(kernel, xs, cells), cell_volume(K, cells))
    q = rows * frac
    if steps > 1:
        P = transition_matrix(kernel, cells)
        for _ in range(steps - 1):
            q = (q @ P) * frac
    ball_vol = float(frac.sum() * cell_volume(K, cells))
    slack = kernel.lipschitz_bound * ball_vol * lattice_spacing(np.maximum(K.lo, -delta), np.minimum(K.hi, delta), per_axis)
    return float(q.sum(axis=1).min()) - steps * step_error_bound(kernel, cells) - slack


def _recurrence_starts(sys: RdsSystem, count: int, seed: int) -> np.ndarray:
    X, K = sys.invariant_set, sys.noise_support
    lo = np.concatenate([X.lo, K.lo])
    hi = np.concatenate([X.hi, K.hi])
    pts = corners(lo, hi)
    rng = rng_for(seed, "recurrence_starts")
    extra = lo + (hi - lo) * rng.random((max(count - pts.shape[0], 0), lo.size))
    return np.concatenate([pts, extra])[:max(count, pts.shape[0])]


def certify_recurrence(sys: RdsSystem, kernel: MarkovKernel, target: ExtendedState, radius: float,
                       budget_m: int, N: int, seed: int, cells=None, budget_l: int = 20,
                       threads: int = 1, block_size: int = BLOCK_SIZE) -> RecurrenceReport:
    """
    P_U{U_{l+m} in B((0,0), radius)} >= p_reach * p_stay for every U:
    the noise reaches B(0, delta) in l steps (strong recurrence), then stays there for
    m steps while the zero-noise contraction brings |v| below radius/2.
    Cross-checked by direct simulation from corners and random starts.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    if np.linalg.norm(target.state_v) > 0 or np.linalg.norm(target.last_noise) > 0:
        raise ValueError("recurrence is certified towards the origin (0, 0)")
    m = max(1, check_dissipativity(sys, 0.5 * radius, budget_m, seed=seed))
    delta = _small_kick_delta(sys, m, radius, seed)
    p_stay = _stay_probability(kernel, delta, m, cells, seed)
    if p_stay <= 0:
        raise BudgetExceeded(f"{sys.name}/{kernel.name}: staying {m} steps in B(0,{delta:.3g}) has no certified mass")
    reach = check_strong_recurrence(kernel, delta, budget_l, cells, seed=seed)
    p_bound = p_stay * reach.kappa
    total = reach.steps_l + m

    starts = _recurrence_starts(sys, RECURRENCE_STARTS, seed)
    trials = max(int(N) // starts.shape[0], 1)
    v0, xi0 = _split(sys, np.repeat(starts, trials, axis=0))
    paths = simulate_ensemble(sys, kernel, v0, v0.shape[0], total, seed, xi0=xi0[:, None, :], threads=threads,
                              block_size=block_size, stage="recurrence_mc", keep_path=False)
    hit = (np.linalg.norm(paths.states[:, -1], axis=-1) < radius) & (np.linalg.norm(paths.noises[:, -1], axis=-1) < radius)
    freq = hit.reshape(starts.shape[0], trials).mean(axis=1)
    worst = float(freq.min())
    report = RecurrenceReport(total, float(p_bound), float(radius), float(delta), float(p_stay),
                              float(reach.kappa), m, reach.steps_l, worst)
    se = math.sqrt(max(p_bound * (1.0 - p_bound), 1.0 / trials) / trials)
    logger.info("%s/%s: recurrence m=%d delta=%.4g p_bound=%.4g mc=%.4g", sys.name, kernel.name, total, delta, p_bound, worst)
    if worst + MC_SIGMAS * se < p_bound:
        raise CertificateContradicted(f"hitting frequency {worst:.4g} below the certified {p_bound:.4g}", report)
    return report


# ---------------- Minorization ---------------- #
def _minimal_density(kernel: MarkovKernel, delta: float, cells, seed: int) -> np.ndarray:
    """m_delta(z) = min over xi in K ∩ B(0, delta) of rho(xi, z), at noise cell centers, minus slack."""
    K = kernel.noise_support
    per_axis = 17 if K.dim == 1 else 7
    xs = ball_points(np.zeros(K.dim), delta, K.lo, K.hi, n_random=32, seed=seed, per_axis=per_axis)
    lo, hi = np.maximum(K.lo, -delta), np.minimum(K.hi, delta)
    slack = kernel.lipschitz_bound * (lattice_spacing(lo, hi, per_axis) + 0.5 * cell_diameter(K, cells))
    return np.maximum(density_rows(kernel, xs, cells).min(axis=0) - slack, 0.0)


def _two_step_map(sys: RdsSystem) -> RegularMap:
    """(z1, z2) -> (S(S(v, z1), z2), z2) with parameter v."""
    ds, dn = sys.dim_state, sys.dim_noise

    def F(v, y):
        y = np.asarray(y, dtype=float)
        z1, z2 = y[..., :dn], y[..., dn:]
        mid = sys(np.broadcast_to(v, y.shape[:-1] + (ds,)), z1)
        return np.concatenate([sys(mid, z2), z2], axis=-1)

    def dF(v, y):
        y = np.asarray(y, dtype=float)
        z1, z2 = y[..., :dn], y[..., dn:]
        v = np.broadcast_to(v, y.shape[:-1] + (ds,))
        mid = sys(v, z1)
        J = np.zeros(y.shape[:-1] + (ds + dn, 2 * dn))
        J[..., :ds, :dn] = np.asarray(sys.d_state(mid, z2), dtype=float) @ np.asarray(sys.d_noise(v, z1), dtype=float)
        J[..., :ds, dn:] = np.asarray(sys.d_noise(mid, z2), dtype=float)
        J[..., ds:, dn:] = np.eye(dn)
        return J

    return RegularMap(f"{sys.name}^2", 2 * dn, ds + dn, F, dF)


def _largest_window(lower: GridDensity) -> Tuple[float, float, Box, np.ndarray]:
    """Best gamma * 1_W below the lower density over boxes W centered at its peak."""
    vals = lower.values.ravel()
    centers = lower.centers()
    peak = centers[int(np.argmax(vals))]
    half = lower.box.widths
    w = 0.5 * lower.box.widths / np.asarray(lower.cells)

    def window(t: float) -> np.ndarray:
        return np.all(np.abs(centers - peak) <= t * half + w * (1 + 1e-9), axis=-1)

    def mass(t: float) -> float:
        inside = window(t)
        return float(vals[inside].min() * inside.sum() * lower.cell_volume)

    grid = np.linspace(0.0, 1.0, BOX_SIZES)
    best_t = float(grid[int(np.argmax([mass(t) for t in grid]))])
    res = minimize_scalar(lambda t: -mass(t), bounds=(0.0, 1.0), method="bounded")
    if res.success and -res.fun > mass(best_t):
        best_t = float(res.x)
    inside = window(best_t)
    gamma = float(vals[inside].min())
    sel = centers[inside]
    W = Box(sel.min(axis=0) - w, sel.max(axis=0) + w)
    return gamma, gamma * inside.sum() * lower.cell_volume, W, inside


def _lower_density(sys: RdsSystem, kernel: MarkovKernel, delta: float, state_cells, noise_cells, v_points: int,
                   seed: int, **pushforward_kwargs) -> Tuple[GridDensity, bool]:
    """
    Lower density of P_2(U; .) uniform over U in the closed delta-ball:
    Q(xi; dz1) Q(z1; dz2) >= m_delta(z1) rho(z1, z2) dz1 dz2, pushed through
    (z1, z2) -> (S(S(v, z1), z2), z2) once per sample v and minimized over them.
    """
    X, K = sys.invariant_set, kernel.noise_support
    n_cells = _cells_tuple(noise_cells, K.dim)
    m_delta = _minimal_density(kernel, delta, n_cells, seed)
    if not np.any(m_delta > 0):
        raise EmptyMinorization(f"{kernel.name}: min over B(0,{delta:.3g}) of the transition density vanishes")
    L = kernel.lipschitz_bound
    vol = cell_volume(K, n_cells)
    if bool(sys.info.get("state_free", 0.0)):
        centers = cell_centers(K, n_cells)
        rows = density_rows(kernel, centers, n_cells)                     # rho(c_i, c_j)
        low = (m_delta * vol) @ rows - 0.5 * L * cell_diameter(K, n_cells) * float(m_delta.sum() * vol)
        return GridDensity(K, n_cells, np.maximum(low, 0.0)), True
    if sys.dim_state > K.dim:
        raise EmptyMinorization(f"{sys.name}: two kicks in {K.dim} dimensions cannot spread a {X.dim}-dimensional state")

    def density(v, y):
        z1, z2 = y[..., :K.dim], y[..., K.dim:]
        idx = cell_index(np.clip(z1, K.lo, K.hi).reshape(-1, K.dim), K, n_cells)
        m = m_delta[idx].reshape(z1.shape[:-1])
        with np.errstate(invalid="ignore", over="ignore"):
            rho = np.nan_to_num(np.asarray(kernel.density(z1, z2), dtype=float), nan=0.0, posinf=0.0)
        return np.where(m > 0, m * rho, 0.0)

    s_cells = _cells_tuple(state_cells, X.dim)
    F = _two_step_map(sys)
    lam = ParamDensityKernel(density, K.product(K), L)
    vs = ball_points(np.zeros(X.dim), delta, X.lo, X.hi, n_random=v_points, seed=seed,
                     per_axis=3 if X.dim == 1 else 2)
    options = {"n_starts": MINORIZATION_STARTS, **pushforward_kwargs}
    low = None
    for v in vs:
        g = pushforward_density(F, lam, v, X.product(K), s_cells + n_cells, normalize=False, **options).values
        low = g if low is None else np.minimum(low, g)
    return GridDensity(X.product(K), s_cells + n_cells, low), False


def _search_delta(sys: RdsSystem, kernel: MarkovKernel, upper: float, seed: int, **pushforward_kwargs) -> float:
    """delta in [DELTA_SEARCH_FLOOR * upper, upper] with the largest minorizing mass on coarse grids."""
    cache: Dict[float, float] = {}

    def mass(delta: float) -> float:
        key = round(float(delta), 12)
        if key not in cache:
            try:
                lower, _ = _lower_density(sys, kernel, key, SEARCH_STATE_CELLS, SEARCH_NOISE_CELLS, 0, seed,
                                          **{"sub_points": 2, **pushforward_kwargs})
                cache[key] = _largest_window(lower)[1] if lower.values.max() > 0 else 0.0
            except EmptyMinorization:
                cache[key] = 0.0
        return cache[key]

    lo = DELTA_SEARCH_FLOOR * upper
    grid = np.linspace(lo, upper, DELTA_CANDIDATES)
    masses = np.array([mass(d) for d in grid])
    # ties go to the wider ball
    best = float(grid[np.flatnonzero(masses >= masses.max() * (1.0 - 1e-9))[-1]])
    res = minimize_scalar(lambda d: -mass(d), bounds=(lo, upper), method="bounded", options={"xatol": 1e-2 * upper})
    if res.success and -res.fun > mass(best) * (1.0 + 1e-9):
        best = float(res.x)
    logger.info("%s/%s: delta search over [%.4g, %.4g] chose %.4g (coarse mass %.4g)", sys.name, kernel.name,
                lo, upper, best, mass(best))
    return best


def minorizing_measure(sys: RdsSystem, kernel: MarkovKernel, delta: float,
                       state_cells=MINORIZATION_STATE_CELLS, noise_cells=MINORIZATION_NOISE_CELLS,
                       v_points: int = 4, seed: int = 0, search: bool = True, **pushforward_kwargs) -> MinorizingMeasure:
    """
    Largest gamma * 1_W below the two-step lower density. With search, delta is the upper
    end of the ball radii tried and the chosen radius is reported in the result.
    """
    if kernel.atomic:
        raise EmptyMinorization(f"{kernel.name}: atomic kernels admit no minorizing density")
    if delta <= 0:
        raise ValueError("delta must be positive")
    if search:
        delta = _search_delta(sys, kernel, delta, seed, **pushforward_kwargs)
    lower, state_free = _lower_density(sys, kernel, delta, state_cells, noise_cells, v_points, seed,
                                       **pushforward_kwargs)
    if lower.values.max() <= 0:
        raise EmptyMinorization(f"{sys.name}/{kernel.name}: two-step lower density vanishes")
    gamma, mass, W, inside = _largest_window(lower)
    if mass <= 0:
        raise EmptyMinorization(f"{sys.name}/{kernel.name}: no box carries positive minorizing mass")
    values = np.where(inside, gamma, 0.0).reshape(lower.cells)
    logger.info("%s/%s: minorizing measure delta=%.4g gamma=%.4g mass=%.4g on %s", sys.name, kernel.name,
                delta, gamma, mass, W)
    return MinorizingMeasure(GridDensity(lower.box, lower.cells, values, {"mass": mass, "delta": float(delta)}),
                             float(mass), gamma, W, float(delta), lower, state_free)


def _two_step_samples(sys: RdsSystem, kernel: MarkovKernel, U: np.ndarray, n: int, seed: int, stage: str,
                      state_free: bool, steps: int = 2, threads: int = 1,
                      block_size: int = BLOCK_SIZE) -> np.ndarray:
    v, xi = _split(sys, U)
    paths = simulate_ensemble(sys, kernel, v, n, steps, seed, xi0=np.broadcast_to(xi, (int(n), sys.dim_noise))[:, None, :],
                              threads=threads, block_size=block_size, stage=stage, keep_path=False)
    if state_free:
        return paths.noises[:, -1]
    return np.concatenate([paths.states[:, -1], paths.noises[:, -1]], axis=-1)


def verify_minorization(sys: RdsSystem, kernel: MarkovKernel, measure: MinorizingMeasure, points, n: int,
                        seed: int, threads: int = 1, block_size: int = BLOCK_SIZE) -> DominationCheck:
    """Cellwise check that the empirical P_2(U; .) dominates lambda, up to a binomial slack."""
    grid = measure.density
    lam = (grid.values * grid.cell_volume).ravel()
    points = np.asarray(points, dtype=float).reshape(-1, sys.dim_state + sys.dim_noise)
    margins = np.empty(points.shape[0])
    for i, U in enumerate(points):
        samples = _two_step_samples(sys, kernel, U, n, seed, f"verify_minorization_{i}", measure.state_free,
                                    threads=threads, block_size=block_size)
        inside = grid.box.contains(samples, tol=1e-12)
        p_hat = binned_probabilities(samples[inside], grid.box, grid.cells).ravel() / int(n)
        slack = DOMINATION_SIGMAS * np.sqrt(np.maximum(lam, 1.0 / n) * (1.0 - np.minimum(lam, 1.0)) / n)
        margins[i] = float(np.min(p_hat - lam + slack))
    worst = float(margins.min()) if margins.size else 0.0
    logger.info("%s/%s: lambda-domination worst margin %.3e over %d points", sys.name, kernel.name, worst, margins.size)
    return DominationCheck(worst >= 0, worst, margins)


# ---------------- Coupling ---------------- #
def _grid_pair_tvs(sys: RdsSystem, kernel: MarkovKernel, pairs: np.ndarray, n: int, state_cells, noise_cells) -> np.ndarray:
    M = extended_transfer_matrix(sys, kernel, state_cells, noise_cells)
    out = np.empty(pairs.shape[0])
    for i, (Ua, Ub) in enumerate(pairs):
        rows = []
        for U in (Ua, Ub):
            v, xi = _split(sys, U)
            p = extended_kernel(sys, kernel, ExtendedState(v[0], xi[0]), state_cells, noise_cells).probabilities.ravel()
            for _ in range(n - 1):
                p = M.T @ p
            rows.append(p)
        out[i] = 0.5 * float(np.abs(rows[0] - rows[1]).sum())
    return out


def certify_coupling(sys: RdsSystem, kernel: MarkovKernel, lam_mass: float, n: int, ball: float, N: int, seed: int,
                     pairs: int = 50, method: str = "auto", state_cells=48, noise_cells=128,
                     threads: int = 1, block_size: int = BLOCK_SIZE) -> CouplingCertificate:
    """
    worst over sampled pairs (U1, U2) in B(0, ball) of TV(P_n(U1; .), P_n(U2; .)) must not exceed
    1 - lam_mass + band. Grid propagation through the extended transfer matrix when its
    quadrature slack is small, Monte Carlo histograms otherwise.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    U1 = extended_ball_points(sys, ball, pairs, seed)
    U2 = extended_ball_points(sys, ball, pairs, seed + 1)
    pair_arr = np.stack([U1, U2], axis=1)
    n_cells = _cells_tuple(noise_cells, kernel.dim)
    grid_band = 2.0 * n * step_error_bound(kernel, n_cells)
    use_grid = method == "grid" or (method == "auto" and sys.dim_state + sys.dim_noise <= 2
                                    and grid_band <= GRID_BAND_LIMIT and not kernel.atomic)
    state_free = bool(sys.info.get("state_free", 0.0))
    if use_grid:
        tvs = _grid_pair_tvs(sys, kernel, pair_arr, n, state_cells, n_cells)
        band = grid_band
        used = "grid"
    else:
        box = sys.noise_support if state_free else sys.invariant_set.product(sys.noise_support)
        cells = _cells_tuple(COUPLING_CELLS, box.dim)
        tvs = np.empty(pairs)
        his = np.empty(pairs)
        for i in range(pairs):
            a = _two_step_samples(sys, kernel, U1[i], N, seed, f"coupling_a_{i}", state_free, n, threads, block_size)
            b = _two_step_samples(sys, kernel, U2[i], N, seed, f"coupling_b_{i}", state_free, n, threads, block_size)
            tvs[i] = tv_samples(a, b, box, cells)
            his[i] = tv_null_band(a, b, box, cells, rng_for(seed, "coupling_band", i))[1]
        band = float(his[int(np.argmax(tvs))])
        used = "mc"
    worst = float(tvs.max())
    passed = worst <= 1.0 - lam_mass + band
    cert = CouplingCertificate(int(n), float(lam_mass), float(ball), worst, float(band), passed, used, tvs)
    logger.info("%s/%s: coupling (%s) worst tv=%.4f bound=%.4f pass=%s", sys.name, kernel.name, used, worst,
                1.0 - lam_mass + band, passed)
    if not passed:
        raise CertificateContradicted(f"worst pair TV {worst:.4f} exceeds 1 - {lam_mass:.4f} + {band:.4f}", cert)
    return cert


__all__ = [
    "DecayCurve",
    "RateFit",
    "RecurrenceReport",
    "MinorizingMeasure",
    "DominationCheck",
    "CouplingCertificate",
    "extended_ball_points",
    "decorrelation_lag",
    "estimate_stationary",
    "noise_floor",
    "decay_curve",
    "fit_rate",
    "certify_recurrence",
    "minorizing_measure",
    "verify_minorization",
    "certify_coupling",
]
