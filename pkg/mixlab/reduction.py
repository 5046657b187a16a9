# mixlab/reduction.py
"""
Markovian reduction of an RDS driven by dependent noise.

The extended state is U = (v, xi): the system state plus either the last noise
(Markov noise) or a finite buffer of past noises (stationary noise). Both cases
share one sampling path: a Markov kernel is treated as a stationary model of
memory 1, and every step draws one uniform vector that the xi-dependent
inverse CDF turns into the next noise.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, NamedTuple, Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.stats import beta as beta_dist
from scipy.stats import chi2_contingency

from mixlab.dynamics import RdsSystem, step
from mixlab.errors import BudgetExceeded, MismatchedBuffers, ResolutionTooCoarse
from mixlab.markov_noise import (MarkovKernel, _normalize_rows, ball_cell_fraction, density_rows,
                                 inverse_cdf_rows, step_error_bound, stationary_noise_density,
                                 transition_matrix)
from mixlab.measures import (Box, GridDensity, cell_centers, cell_diameter, cell_index, cell_volume,
                             cell_widths, sample_grid_density, tv_null_band, tv_samples, _cells_tuple)
from mixlab.pushforward import ParamDensityKernel, RegularMap, pushforward_density
from utils.logging_utils import get_logger
from utils.parallel import map_ordered
from utils.seeding import BLOCK_SIZE, blocks, rng_for

logger = get_logger(__name__)

# ---- Config ----
DEFAULT_MEMORY = 16
DEFAULT_IOTA = 2.0
DEFAULT_BURN_IN = 10_000
HARVEST_CHAINS = 64
LAW_CELLS = 40
JOINT_CELLS_1D = 128         # per axis for conditional_m_step
JOINT_CELLS_2D = 16
MAX_SEGMENT = 3
SPLAT_NODES = 4              # sub-nodes per noise axis when splatting S(v, .) onto the state grid
RECURRENCE_BUFFERS = 256
RECURRENCE_TRIALS = 2000
RECURRENCE_MC_PASTS = 32     # pasts kept when the bound is estimated by Monte Carlo
CONFIDENCE = 0.99
SURJECTIVITY_THRESHOLD = 1e-8


# ---------------- Types ---------------- #
@dataclass(frozen=True, eq=False)
class PastBuffer:
    """Noise history (xi_{-m+1}, ..., xi_0), oldest first."""
    entries: np.ndarray
    iota: float = DEFAULT_IOTA

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=float)
        if e.ndim == 1:
            e = e[:, None]
        if e.ndim != 2 or e.shape[0] < 1:
            raise ValueError("a past buffer holds at least one noise vector")
        if not self.iota > 1:
            raise ValueError(f"iota must exceed 1, got {self.iota}")
        e = e.copy()
        e.setflags(write=False)
        object.__setattr__(self, "entries", e)

    @property
    def memory_m(self) -> int:
        return int(self.entries.shape[0])

    @property
    def dim(self) -> int:
        return int(self.entries.shape[1])

    @property
    def latest(self) -> np.ndarray:
        return self.entries[-1]

    def push(self, eta) -> "PastBuffer":
        eta = np.asarray(eta, dtype=float).reshape(1, self.dim)
        return PastBuffer(np.concatenate([self.entries[1:], eta]), self.iota)

    def to_bytes(self) -> bytes:
        header = np.array([self.memory_m, self.dim], dtype="<u8").tobytes()
        return header + np.array([self.iota], dtype="<f8").tobytes() + self.entries.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "PastBuffer":
        m, d = (int(x) for x in np.frombuffer(blob[:16], dtype="<u8"))
        iota = float(np.frombuffer(blob[16:24], dtype="<f8")[0])
        entries = np.frombuffer(blob[24:24 + 8 * m * d], dtype="<f8").reshape(m, d)
        return cls(entries, iota)


@dataclass(frozen=True, eq=False)
class ExtendedState:
    state_v: np.ndarray
    noise_xi: Union[np.ndarray, PastBuffer]

    def __post_init__(self):
        object.__setattr__(self, "state_v", np.atleast_1d(np.asarray(self.state_v, dtype=float)))
        if not isinstance(self.noise_xi, PastBuffer):
            object.__setattr__(self, "noise_xi", np.atleast_1d(np.asarray(self.noise_xi, dtype=float)))

    @property
    def is_stationary(self) -> bool:
        return isinstance(self.noise_xi, PastBuffer)

    @property
    def last_noise(self) -> np.ndarray:
        return self.noise_xi.latest if self.is_stationary else self.noise_xi


@dataclass(frozen=True, eq=False)
class StationaryNoiseModel:
    """
    Q(xi; dz) = rho(window(xi), z) dz. `depth` is the true memory of the conditional
    law; the reduced system keeps `memory_m` past noises and pads older ones with 0.
    """
    name: str
    noise_support: Box
    conditional_density: Callable        # (past (..., depth, d), z (..., d)) -> (...)
    depth: int = 1
    lipschitz_bound: float = 0.0
    memory_m: int = DEFAULT_MEMORY
    iota: float = DEFAULT_IOTA
    burn_in: int = DEFAULT_BURN_IN
    sampler_cells: Optional[Tuple[int, ...]] = None
    direct_sampler: Optional[Callable] = None   # (n_paths, length, rng) -> (n_paths, length, d)

    def __post_init__(self):
        if self.memory_m < 1 or self.depth < 1:
            raise ValueError("memory_m and depth must be positive")
        if not self.iota > 1:
            raise ValueError("iota must exceed 1")
        cells = self.sampler_cells
        if cells is None:
            cells = 256 if self.dim == 1 else 64
        object.__setattr__(self, "sampler_cells", _cells_tuple(cells, self.dim))

    @property
    def dim(self) -> int:
        return self.noise_support.dim

    @classmethod
    def from_kernel(cls, kernel: MarkovKernel, memory_m: int = 1, iota: float = DEFAULT_IOTA,
                    burn_in: int = DEFAULT_BURN_IN) -> "StationaryNoiseModel":
        density = kernel.density

        def conditional(past, z):
            return density(past[..., -1, :], z)

        return cls(kernel.name, kernel.noise_support, conditional, 1, kernel.lipschitz_bound,
                   memory_m, iota, burn_in, kernel.sampler_cells, kernel.direct_sampler)

    def windows(self, buffers: np.ndarray) -> np.ndarray:
        """Last `depth` entries of each buffer (n, m, d), zero-padded in front when m < depth."""
        buffers = np.asarray(buffers, dtype=float)
        m = buffers.shape[-2]
        if m >= self.depth:
            return buffers[..., m - self.depth:, :]
        pad = np.zeros(buffers.shape[:-2] + (self.depth - m, self.dim))
        return np.concatenate([pad, buffers], axis=-2)

    def markov_kernel(self) -> MarkovKernel:
        if self.depth != 1:
            raise ValueError(f"{self.name}: the conditional law depends on {self.depth} past noises")
        cond = self.conditional_density
        return MarkovKernel(self.name, self.noise_support, lambda y, z: cond(y[..., None, :], z),
                            self.lipschitz_bound, self.sampler_cells, direct_sampler=self.direct_sampler)

    def next_density(self, buffer: PastBuffer, cells=None) -> GridDensity:
        """Q(xi; .) on the sampler grid."""
        cells = self.sampler_cells if cells is None else _cells_tuple(cells, self.dim)
        masses = _conditional_masses(self, buffer.entries[None], cells)[0]
        return GridDensity.from_probabilities(self.noise_support, cells, masses)


NoiseModel = Union[MarkovKernel, StationaryNoiseModel]


class EnsemblePaths(NamedTuple):
    states: np.ndarray     # (n, horizon + 1, dim_state), states[:, 0] = u0
    noises: np.ndarray     # (n, horizon + 1, dim_noise), noises[:, 0] = xi_0 (latest entry of the initial buffer)
    buffers: np.ndarray    # (n, m, dim_noise) past buffers after the last step


@dataclass(frozen=True)
class NoiseModelCheck:
    normalization_defect: float
    lipschitz_ratio: float
    passed: bool


@dataclass(frozen=True)
class LawEqualityRow:
    k: int
    tv: float
    band_lo: float
    band_hi: float
    passed: bool


@dataclass(frozen=True)
class LawEqualityReport:
    rows: List[LawEqualityRow]
    ensemble_n: int
    truncation_bound: float = 0.0

    @property
    def tv(self) -> float:
        return self.rows[-1].tv if self.rows else 0.0

    @property
    def band_hi(self) -> float:
        return self.rows[-1].band_hi if self.rows else 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [{"k": r.k, "tv": r.tv, "band_lo": r.band_lo, "band_hi": r.band_hi,
              "verdict": "pass" if r.passed else "fail"} for r in self.rows],
            columns=["k", "tv", "band_lo", "band_hi", "verdict"],
        )


@dataclass(frozen=True)
class MarkovPropertyReport:
    statistic: float
    dof: int
    p_value: float
    level: float
    passed: bool


# ---------------- Past buffers ---------------- #
def past_metric(b1: PastBuffer, b2: PastBuffer) -> float:
    """sum_j iota^{-j} |xi_{-j} - xi'_{-j}| over the stored entries (j = 0 is the latest)."""
    if b1.memory_m != b2.memory_m or b1.dim != b2.dim or b1.iota != b2.iota:
        raise MismatchedBuffers(f"buffers (m={b1.memory_m}, iota={b1.iota}) and (m={b2.memory_m}, iota={b2.iota})")
    lags = np.arange(b1.memory_m)[::-1]
    gaps = np.linalg.norm(b1.entries - b2.entries, axis=-1)
    return float(np.sum(b1.iota ** (-lags.astype(float)) * gaps))


def truncation_bound(diameter: float, memory_m: int, iota: float = DEFAULT_IOTA) -> float:
    """Largest contribution of the entries older than the buffer to the full past metric."""
    return float(diameter * iota ** (-memory_m) / (1.0 - 1.0 / iota))


def as_stationary(model: NoiseModel) -> StationaryNoiseModel:
    return model if isinstance(model, StationaryNoiseModel) else StationaryNoiseModel.from_kernel(model)


def _shift_buffers(buffers: np.ndarray, eta: np.ndarray) -> np.ndarray:
    """Drop the oldest entry of each buffer and append eta."""
    return np.concatenate([buffers[:, 1:], eta[:, None, :]], axis=1)


def _conditional_masses(model: StationaryNoiseModel, buffers: np.ndarray, cells) -> np.ndarray:
    centers = cell_centers(model.noise_support, cells)
    win = model.windows(buffers)
    rows = np.asarray(model.conditional_density(win[:, None, :, :], centers[None, :, :]), dtype=float)
    return _normalize_rows(rows, cell_volume(model.noise_support, cells))


def _next_noise(model: StationaryNoiseModel, buffers: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    masses = _conditional_masses(model, buffers, model.sampler_cells)
    return inverse_cdf_rows(masses, model.noise_support, model.sampler_cells, uniforms)


def validate_noise_model(model: StationaryNoiseModel, n_points: int = 64, seed: int = 0) -> NoiseModelCheck:
    """Normalization per sampled buffer and the Lipschitz quotient in the past metric."""
    rng = np.random.default_rng(seed)
    K = model.noise_support
    m = max(model.memory_m, model.depth)
    bufs = K.lo + K.widths * rng.random((int(n_points), 2, m, model.dim))
    masses = np.asarray(model.conditional_density(
        model.windows(bufs[:, 0])[:, None], cell_centers(K, model.sampler_cells)[None]), dtype=float)
    defect = float(np.abs(masses.sum(axis=1) * cell_volume(K, model.sampler_cells) - 1.0).max())
    z = K.lo + K.widths * rng.random((int(n_points), model.dim))
    num = np.abs(model.conditional_density(model.windows(bufs[:, 0]), z)
                 - model.conditional_density(model.windows(bufs[:, 1]), z))
    lags = np.arange(m)[::-1].astype(float)
    den = np.sum(model.iota ** (-lags) * np.linalg.norm(bufs[:, 0] - bufs[:, 1], axis=-1), axis=-1)
    ratio = float(np.max(num / np.maximum(den, 1e-300)))
    passed = defect <= 1e-4 and ratio <= model.lipschitz_bound * (1 + 1e-9)
    return NoiseModelCheck(defect, ratio, passed)


def stationary_buffers(model: NoiseModel, n: int, seed: int, block_size: int = BLOCK_SIZE) -> np.ndarray:
    """
    Past buffers drawn (approximately) from the stationary law of the noise, shape (n, m, d).

    Memory-1 laws start from the invariant density of the grid chain and fill the
    buffer by forward steps. Longer memories run HARVEST_CHAINS chains through
    `burn_in` steps and then take a buffer every max(m, depth) steps.
    """
    model = as_stationary(model)
    m, d = model.memory_m, model.dim
    out = np.empty((int(n), m, d))
    if model.depth == 1:
        pi = stationary_noise_density(model.markov_kernel())
        for b in blocks(n, block_size):
            rng = rng_for(seed, "stationary_buffers", b.index)
            buf = sample_grid_density(pi, b.size, rng).points[:, None, :]
            for _ in range(m - 1):
                eta = _next_noise(model, buf, rng.random((b.size, d)))
                buf = np.concatenate([buf, eta[:, None, :]], axis=1)
            out[b.start:b.stop] = buf
        return out

    rng = rng_for(seed, "stationary_buffers", 0)
    chains = min(int(n), HARVEST_CHAINS)
    width = max(m, model.depth)
    buf = np.zeros((chains, width, d))
    for _ in range(int(model.burn_in)):
        buf = _shift_buffers(buf, _next_noise(model, buf, rng.random((chains, d))))
    harvested = 0
    gap = width
    while harvested < n:
        take = min(chains, int(n) - harvested)
        out[harvested:harvested + take] = buf[:take, width - m:]
        harvested += take
        for _ in range(gap):
            buf = _shift_buffers(buf, _next_noise(model, buf, rng.random((chains, d))))
    logger.info("%s: harvested %d buffers from %d chains after %d burn-in steps", model.name, n, chains, model.burn_in)
    return out


# ---------------- Extended dynamics ---------------- #
def extended_map(sys: RdsSystem, U: ExtendedState, zeta) -> ExtendedState:
    """(v, xi) -> (S(v, zeta), zeta), or (S(v, zeta), buffer shifted by zeta)."""
    zeta = np.atleast_1d(np.asarray(zeta, dtype=float))
    v = step(sys, U.state_v, zeta)
    if U.is_stationary:
        return ExtendedState(v, U.noise_xi.push(zeta))
    return ExtendedState(v, zeta)


def _splat_nodes(K: Box, cells, per_axis: int):
    """Midpoint sub-nodes inside each noise cell, shape (n_cells, per_axis^d, d)."""
    w = cell_widths(K, cells)
    offs = (np.arange(per_axis) + 0.5) / per_axis - 0.5
    sub = np.stack(np.meshgrid(*[offs * wi for wi in w], indexing="ij"), axis=-1).reshape(-1, K.dim)
    return cell_centers(K, cells)[:, None, :] + sub[None, :, :]


def extended_kernel(sys: RdsSystem, kernel: MarkovKernel, U: ExtendedState, state_cells=64,
                    noise_cells=None, nodes: int = SPLAT_NODES) -> GridDensity:
    """
    Law of (S(v, zeta), zeta), zeta ~ Q(xi; .), as cell masses on X x K. The noise
    marginal is the grid row of Q(xi; .) itself; each noise cell's mass is spread over
    `nodes` sub-nodes per axis and sent to the state cell of S(v, node).
    """
    X, K = sys.invariant_set, kernel.noise_support
    s_cells = _cells_tuple(state_cells, X.dim)
    n_cells = kernel.sampler_cells if noise_cells is None else _cells_tuple(noise_cells, K.dim)
    row = _normalize_rows(density_rows(kernel, U.last_noise[None, :], n_cells), cell_volume(K, n_cells))[0]
    z = _splat_nodes(K, n_cells, nodes)
    n_noise, n_sub = z.shape[0], z.shape[1]
    v = np.broadcast_to(U.state_v, (n_noise * n_sub, X.dim))
    img = sys(v, z.reshape(-1, K.dim))
    s_idx = cell_index(img, X, s_cells)
    noise_idx = np.repeat(np.arange(n_noise), n_sub)
    n_state = int(np.prod(s_cells))
    joint = np.bincount(s_idx * n_noise + noise_idx, weights=np.repeat(row, n_sub) / n_sub,
                        minlength=n_state * n_noise)
    return GridDensity.from_probabilities(X.product(K), s_cells + n_cells, joint,
                                          {"quadrature_bound": step_error_bound(kernel, n_cells)})


def regular_map_of(sys: RdsSystem) -> RegularMap:
    """F(U, y) = S(v, y) with parameter U = (v, xi)."""
    ds = sys.dim_state

    def F(U, y):
        y = np.asarray(y, dtype=float)
        return sys(np.broadcast_to(U[:ds], y.shape[:-1] + (ds,)), y)

    def dF(U, y):
        y = np.asarray(y, dtype=float)
        return np.asarray(sys.d_noise(np.broadcast_to(U[:ds], y.shape[:-1] + (ds,)), y), dtype=float)

    return RegularMap(sys.name, sys.dim_noise, ds, F, dF)


def param_kernel_of(sys: RdsSystem, kernel: MarkovKernel) -> ParamDensityKernel:
    """lambda(U, dy) = Q(xi; dy)."""
    ds = sys.dim_state
    return ParamDensityKernel(lambda U, y: kernel.density(np.asarray(U[ds:]), y),
                              kernel.noise_support, kernel.lipschitz_bound)


def extended_state_marginal(sys: RdsSystem, kernel: MarkovKernel, U: ExtendedState, state_cells=64,
                            **kwargs) -> GridDensity:
    """State marginal of the extended kernel, S(v, .)_* Q(xi; .), by the pushforward density."""
    param = np.concatenate([U.state_v, U.last_noise])
    return pushforward_density(regular_map_of(sys), param_kernel_of(sys, kernel), param,
                               sys.invariant_set, state_cells, **kwargs)


def extended_transfer_matrix(sys: RdsSystem, kernel: MarkovKernel, state_cells=64, noise_cells=64,
                             nodes: int = SPLAT_NODES) -> sparse.csr_matrix:
    """Row-stochastic sparse matrix of the extended kernel between (state x noise) cells."""
    X, K = sys.invariant_set, kernel.noise_support
    s_cells = _cells_tuple(state_cells, X.dim)
    n_cells = _cells_tuple(noise_cells, K.dim)
    P = transition_matrix(kernel, n_cells)                       # (nn, nn)
    v = cell_centers(X, s_cells)                                 # (ns, ds)
    z = _splat_nodes(K, n_cells, nodes)                          # (nn, q, dn)
    ns, nn, q = v.shape[0], z.shape[0], z.shape[1]
    img = sys(np.repeat(v, nn * q, axis=0), np.tile(z.reshape(-1, K.dim), (ns, 1)))
    s_idx = cell_index(img, X, s_cells).reshape(ns, nn * q)
    target_noise = np.repeat(np.arange(nn), q)                   # noise cell of each sub-node
    cols = s_idx * nn + target_noise[None, :]                    # (ns, nn*q)
    rows = np.arange(ns * nn).reshape(ns, nn)
    data = np.repeat(P, q, axis=1) / q                           # (nn, nn*q)
    R = np.broadcast_to(rows[:, :, None], (ns, nn, nn * q)).ravel()
    C = np.broadcast_to(cols[:, None, :], (ns, nn, nn * q)).ravel()
    D = np.broadcast_to(data[None, :, :], (ns, nn, nn * q)).ravel()
    keep = D > 0
    M = sparse.coo_matrix((D[keep], (R[keep], C[keep])), shape=(ns * nn, ns * nn)).tocsr()
    M.sum_duplicates()
    return M


# ---------------- Simulation ---------------- #
def _initial_buffers(model: StationaryNoiseModel, U0: ExtendedState) -> np.ndarray:
    if U0.is_stationary:
        if U0.noise_xi.memory_m != model.memory_m:
            raise MismatchedBuffers(f"buffer of length {U0.noise_xi.memory_m} for memory {model.memory_m}")
        return U0.noise_xi.entries[None].copy()
    return np.broadcast_to(U0.noise_xi, (1, model.memory_m, model.dim)).copy()


def simulate_extended(sys: RdsSystem, noise_model: NoiseModel, U0: ExtendedState, n: int,
                      seed: int) -> List[ExtendedState]:
    """[U_1, ..., U_n]; the noise of step k is drawn given the noise component of U_{k-1}."""
    model = as_stationary(noise_model)
    rng = rng_for(seed, "simulate_extended")
    buf = _initial_buffers(model, U0)
    v = U0.state_v[None, :]
    keep_buffer = U0.is_stationary
    out = []
    for k in range(int(n)):
        eta = _next_noise(model, buf, rng.random((1, model.dim)))
        v = step(sys, v, eta, index=k)
        buf = _shift_buffers(buf, eta)
        xi = PastBuffer(buf[0], model.iota) if keep_buffer else eta[0]
        out.append(ExtendedState(v[0], xi))
    return out


def simulate_ensemble(sys: RdsSystem, noise_model: NoiseModel, u0, n: int, horizon: int, seed: int,
                      xi0: Optional[np.ndarray] = None, threads: int = 1,
                      block_size: int = BLOCK_SIZE, stage: str = "ensemble",
                      keep_path: bool = True) -> EnsemblePaths:
    """
    n independent reduced trajectories of length `horizon`.
    u0 is one state or one per trajectory; xi0 defaults to stationary buffers.
    Streams are keyed by (stage, block index), so the result does not depend on `threads`.
    With keep_path=False only the first and last time slices are returned.
    """
    model = as_stationary(noise_model)
    n, horizon = int(n), int(horizon)
    u0 = np.asarray(u0, dtype=float).reshape(-1, sys.dim_state)
    if u0.shape[0] not in (1, n):
        raise ValueError("u0 must hold one state or one state per trajectory")
    if xi0 is None:
        xi0 = stationary_buffers(model, n, seed, block_size)
    xi0 = np.asarray(xi0, dtype=float).reshape(n, model.memory_m, model.dim)
    slices = horizon + 1 if keep_path else 2

    def run(block):
        rng = rng_for(seed, stage, block.index)
        v = np.broadcast_to(u0, (n, sys.dim_state))[block.start:block.stop].copy()
        buf = xi0[block.start:block.stop].copy()
        states = np.empty((block.size, slices, sys.dim_state))
        noises = np.empty((block.size, slices, model.dim))
        states[:, 0] = v
        noises[:, 0] = buf[:, -1]
        for k in range(horizon):
            eta = _next_noise(model, buf, rng.random((block.size, model.dim)))
            v = step(sys, v, eta, index=k)
            buf = _shift_buffers(buf, eta)
            if keep_path:
                states[:, k + 1] = v
                noises[:, k + 1] = eta
        if not keep_path:
            states[:, -1] = v
            noises[:, -1] = buf[:, -1]
        return states, noises, buf

    parts = map_ordered(run, blocks(n, block_size), threads)
    if not parts:
        return EnsemblePaths(np.empty((0, slices, sys.dim_state)), np.empty((0, slices, model.dim)),
                             np.empty((0, model.memory_m, model.dim)))
    return EnsemblePaths(*(np.concatenate([p[i] for p in parts]) for i in range(3)))


def direct_paths(noise_model: NoiseModel, n: int, length: int, seed: int,
                 block_size: int = BLOCK_SIZE) -> np.ndarray:
    """Stationary paths (eta_1, ..., eta_length) of the original noise process."""
    sampler = noise_model.direct_sampler
    if sampler is None:
        raise ValueError(f"{noise_model.name}: no direct path sampler")
    parts = [np.asarray(sampler(b.size, int(length), rng_for(seed, "direct_paths", b.index)), dtype=float)
             for b in blocks(n, block_size)]
    return np.concatenate(parts).reshape(int(n), int(length), -1)


def _segment_box(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray, Box]:
    """Drop columns constant over both samples and bound the rest."""
    pooled = np.concatenate([a, b])
    live = np.ptp(pooled, axis=0) > 0
    lo = pooled[:, live].min(axis=0)
    hi = pooled[:, live].max(axis=0)
    pad = 1e-9 * (1.0 + np.abs(hi - lo))
    return a[:, live], b[:, live], Box(lo - pad, hi + pad)


def law_equality_test(sys: RdsSystem, noise_model: NoiseModel, u0, horizon_k: int, ensemble_n: int,
                      seed: int, cells: int = LAW_CELLS, n_boot: int = 200, level: float = 0.95,
                      threads: int = 1, block_size: int = BLOCK_SIZE) -> LawEqualityReport:
    """
    Joint law of [u_0, ..., u_j], j = 1..k, of the original RDS (direct noise paths)
    against the state component of the reduced system, binned on a product grid.
    """
    if not 1 <= horizon_k <= MAX_SEGMENT:
        raise ValueError(f"horizon_k must be in 1..{MAX_SEGMENT}")
    model = as_stationary(noise_model)
    u0 = np.asarray(u0, dtype=float).reshape(1, sys.dim_state)
    eta = direct_paths(model, ensemble_n, horizon_k, seed, block_size)
    original = np.empty((int(ensemble_n), horizon_k + 1, sys.dim_state))
    original[:, 0] = u0
    u = np.repeat(u0, int(ensemble_n), axis=0)
    for k in range(horizon_k):
        u = step(sys, u, eta[:, k], index=k)
        original[:, k + 1] = u
    reduced = simulate_ensemble(sys, model, u0, ensemble_n, horizon_k, seed, threads=threads,
                                block_size=block_size).states

    rows = []
    for j in range(1, horizon_k + 1):
        a, b, box = _segment_box(original[:, :j + 1].reshape(int(ensemble_n), -1),
                                 reduced[:, :j + 1].reshape(int(ensemble_n), -1))
        tv = tv_samples(a, b, box, cells)
        lo, hi = tv_null_band(a, b, box, cells, rng_for(seed, "law_band", j), n_boot, level)
        rows.append(LawEqualityRow(j, tv, lo, hi, tv <= hi))
        logger.info("%s/%s: law equality k=%d tv=%.4f band=[%.4f, %.4f]", sys.name, model.name, j, tv, lo, hi)
    bound = 0.0
    if model.depth > model.memory_m:
        bound = model.lipschitz_bound * truncation_bound(model.noise_support.diameter, model.memory_m, model.iota)
    return LawEqualityReport(rows, int(ensemble_n), bound)


# ---------------- Conditional laws and recurrence ---------------- #
def _joint_cells(model: StationaryNoiseModel, cells):
    if cells is None:
        return _cells_tuple(JOINT_CELLS_1D if model.dim == 1 else JOINT_CELLS_2D, model.dim)
    return _cells_tuple(cells, model.dim)


def _grid_step_bound(model: StationaryNoiseModel, cells) -> float:
    K = model.noise_support
    return 0.25 * model.lipschitz_bound * cell_diameter(K, cells) * K.volume


def conditional_m_step(model: NoiseModel, b: PastBuffer, k: int, cells=None) -> GridDensity:
    """Joint density of the next k noises given the past b, by sequential conditioning."""
    model = as_stationary(model)
    if not 1 <= k <= MAX_SEGMENT:
        raise ValueError(f"k must be in 1..{MAX_SEGMENT}")
    if b.memory_m != model.memory_m:
        raise MismatchedBuffers(f"buffer of length {b.memory_m} for memory {model.memory_m}")
    cells = _joint_cells(model, cells)
    bound = k * _grid_step_bound(model, cells)
    if bound > 0.1:
        raise ResolutionTooCoarse(f"{model.name}: quadrature bound {bound:.3g} at {cells} cells for k={k}")
    K = model.noise_support
    centers = cell_centers(K, cells)
    nc = centers.shape[0]
    joint = _conditional_masses(model, b.entries[None], cells)[0]          # (nc,)
    bufs = np.broadcast_to(b.entries, (nc,) + b.entries.shape)
    bufs = _shift_buffers(bufs, centers)
    for _ in range(1, k):
        rows = _conditional_masses(model, bufs, cells)                      # (n_prev, nc)
        joint = (joint[:, None] * rows).ravel()
        bufs = _shift_buffers(np.repeat(bufs, nc, axis=0), np.tile(centers, (bufs.shape[0], 1)))
    box = K
    for _ in range(1, k):
        box = box.product(K)
    return GridDensity.from_probabilities(box, cells * k, joint, {"quadrature_bound": bound})


def _clopper_pearson_lower(hits: np.ndarray, trials: int, alpha: float) -> np.ndarray:
    lower = beta_dist.ppf(alpha, np.maximum(hits, 1), trials - hits + 1)
    return np.where(hits > 0, lower, 0.0)


def check_recurrence_to_zero(model: NoiseModel, n: int, delta: float, budget_s: int, cells=None,
                             n_buffers: int = RECURRENCE_BUFFERS, trials: int = RECURRENCE_TRIALS,
                             seed: int = 0) -> Tuple[int, float]:
    """
    First s <= budget_s with inf over sampled pasts of P{eta_s, ..., eta_{s+n-1} in B(0, delta)} > 0.
    Pasts come from stationary_buffers. Memory-1 laws use grid propagation minus the
    accumulated quadrature bound; longer memories use Monte Carlo with a
    Clopper-Pearson lower bound.
    """
    if not 1 <= n <= 2:
        raise ValueError("n must be 1 or 2")
    if delta <= 0:
        raise ValueError("delta must be positive")
    model = as_stationary(model)
    K = model.noise_support
    pasts = stationary_buffers(model, n_buffers, seed)

    if model.depth == 1:
        kernel = model.markov_kernel()
        cells = kernel.sampler_cells if cells is None else _cells_tuple(cells, K.dim)
        frac = ball_cell_fraction(K, cells, delta)
        P = transition_matrix(kernel, cells)
        unit = step_error_bound(kernel, cells)
        rows = _normalize_rows(density_rows(kernel, pasts[:, -1], cells), cell_volume(K, cells))
        for s in range(1, int(budget_s) + 1):
            if s > 1:
                rows = rows @ P
            q = rows * frac
            for _ in range(n - 1):
                q = (q @ P) * frac
            bound = float(q.sum(axis=1).min()) - (s + n - 1) * unit
            logger.debug("%s: recurrence to zero s=%d bound=%.4g", model.name, s, bound)
            if bound > 0:
                return s, bound
        raise BudgetExceeded(f"{model.name}: no visit of B(0,{delta})^{n} within {budget_s} steps")

    pasts = pasts[:RECURRENCE_MC_PASTS]
    alpha = (1.0 - CONFIDENCE) / pasts.shape[0]
    rng = rng_for(seed, "recurrence_to_zero")
    for s in range(1, int(budget_s) + 1):
        buf = np.repeat(pasts, int(trials), axis=0)
        inside = np.ones(buf.shape[0], dtype=bool)
        for j in range(s + n - 1):
            eta = _next_noise(model, buf, rng.random((buf.shape[0], model.dim)))
            if j >= s - 1:
                inside &= np.linalg.norm(eta, axis=-1) < delta
            buf = _shift_buffers(buf, eta)
        hits = inside.reshape(pasts.shape[0], int(trials)).sum(axis=1)
        bound = float(_clopper_pearson_lower(hits, int(trials), alpha).min())
        if bound > 0:
            return s, bound
    raise BudgetExceeded(f"{model.name}: no visit of B(0,{delta})^{n} within {budget_s} steps")


def check_vec_surjectivity(sys: RdsSystem, m: int, n_points: int = 64, seed: int = 0) -> float:
    """
    Smallest singular value of D(eta_1..eta_m) [S_1, ..., S_m] over random (v, eta).
    Row block j is [D_v S(u_{j-1}, eta_j) B_{j-1}, D_eta S(u_{j-1}, eta_j)], padded with zeros.
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    rng = np.random.default_rng(seed)
    X, K = sys.invariant_set, sys.noise_support
    ds, dn = sys.dim_state, sys.dim_noise
    v = X.lo + X.widths * rng.random((int(n_points), ds))
    eta = K.lo + K.widths * rng.random((int(n_points), m, dn))
    full = np.zeros((int(n_points), m * ds, m * dn))
    B = np.zeros((int(n_points), ds, 0))
    u = v
    for j in range(m):
        Du = np.asarray(sys.d_state(u, eta[:, j]), dtype=float).reshape(-1, ds, ds)
        De = np.asarray(sys.d_noise(u, eta[:, j]), dtype=float).reshape(-1, ds, dn)
        B = np.concatenate([Du @ B, De], axis=-1)
        full[:, j * ds:(j + 1) * ds, :(j + 1) * dn] = B
        u = sys(u, eta[:, j])
    if m * ds > m * dn:
        return 0.0
    sv = np.linalg.svd(full, compute_uv=False)[:, -1]
    worst = float(sv.min())
    logger.info("%s: vec-surjectivity m=%d min singular value %.3e over %d points", sys.name, m, worst, n_points)
    return worst


# ---------------- Markov property ---------------- #
def _first_axis_pit(kernel: MarkovKernel, xi: np.ndarray, zeta: np.ndarray) -> np.ndarray:
    """Conditional CDF of the first noise coordinate, matching the grid inverse-CDF sampler."""
    K = kernel.noise_support
    cells = kernel.sampler_cells
    masses = _normalize_rows(density_rows(kernel, xi, cells), cell_volume(K, cells))
    marg = masses.reshape(xi.shape[0], cells[0], -1).sum(axis=-1)
    cdf = np.cumsum(marg, axis=1)
    w = cell_widths(K, cells)[0]
    idx = np.clip(np.floor((zeta[:, 0] - K.lo[0]) / w).astype(int), 0, cells[0] - 1)
    rows = np.arange(xi.shape[0])
    before = np.where(idx > 0, cdf[rows, np.maximum(idx - 1, 0)], 0.0)
    frac = np.clip((zeta[:, 0] - K.lo[0]) / w - idx, 0.0, 1.0)
    return (before + frac * marg[rows, idx]) / cdf[:, -1]


def _quantile_bins(x: np.ndarray, bins: int) -> np.ndarray:
    edges = np.quantile(x, np.linspace(0, 1, bins + 1)[1:-1])
    return np.searchsorted(edges, x, side="right")


def markov_property_test(sys: RdsSystem, kernel: MarkovKernel, n: int, seed: int, step_k: int = 2,
                         bins: int = 4, pit_bins: int = 5, level: float = 0.01, threads: int = 1,
                         block_size: int = BLOCK_SIZE) -> MarkovPropertyReport:
    """
    Given U_k, the next noise has conditional CDF F(. | xi_k); its value (PIT) must be
    uniform and independent of U_{k-1}. Chi-square independence of PIT bins against
    coarse bins of U_{k-1}.
    """
    if step_k < 1:
        raise ValueError("step_k must be at least 1")
    paths = simulate_ensemble(sys, kernel, np.zeros(sys.dim_state), n, step_k + 1, seed,
                              threads=threads, block_size=block_size)
    pit = _first_axis_pit(kernel, paths.noises[:, step_k], paths.noises[:, step_k + 1])
    history = (_quantile_bins(paths.states[:, step_k - 1, 0], bins) * bins
               + _quantile_bins(paths.noises[:, step_k - 1, 0], bins))
    pit_idx = np.minimum((pit * pit_bins).astype(int), pit_bins - 1)
    table = np.zeros((bins * bins, pit_bins))
    np.add.at(table, (history, pit_idx), 1.0)
    table = table[table.sum(axis=1) > 0][:, table.sum(axis=0) > 0]
    stat, p_value, dof, _ = chi2_contingency(table)
    passed = bool(p_value > level)
    logger.info("%s/%s: Markov property chi2=%.3f dof=%d p=%.4f", sys.name, kernel.name, stat, dof, p_value)
    return MarkovPropertyReport(float(stat), int(dof), float(p_value), level, passed)


__all__ = [
    "PastBuffer",
    "ExtendedState",
    "StationaryNoiseModel",
    "EnsemblePaths",
    "NoiseModelCheck",
    "LawEqualityRow",
    "LawEqualityReport",
    "MarkovPropertyReport",
    "past_metric",
    "truncation_bound",
    "as_stationary",
    "validate_noise_model",
    "stationary_buffers",
    "extended_map",
    "extended_kernel",
    "extended_state_marginal",
    "regular_map_of",
    "param_kernel_of",
    "extended_transfer_matrix",
    "simulate_extended",
    "simulate_ensemble",
    "direct_paths",
    "law_equality_test",
    "conditional_m_step",
    "check_recurrence_to_zero",
    "check_vec_surjectivity",
    "markov_property_test",
]
