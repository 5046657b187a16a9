# mixlab/markov_noise.py
"""
Markov noise with transition densities Q(y; dz) = rho(y, z) dz on a box K.

Everything is evaluated on the sampler grid: sampling is an inverse-CDF over
cell masses (one uniform per axis), k-step kernels are products of the grid
transition matrix. Certificates subtract Lipschitz-based discretization
slack, so a pass is conservative.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from mixlab.errors import BudgetExceeded, DegenerateDensity, MinorizationFails, ResolutionTooCoarse
from mixlab.measures import Box, GridDensity, cell_centers, cell_diameter, cell_volume, cell_widths, _cells_tuple
from utils.logging_utils import get_logger
from utils.sample_points import ball_points, box_points, lattice_spacing

logger = get_logger(__name__)

# ---- Config ----
DEFAULT_CELLS_1D = 256
DEFAULT_CELLS_2D = 64
DEGENERATE_MASS = 1e-12
MAX_QUADRATURE_BOUND = 0.1
NORMALIZATION_TOL = 1e-4
BALL_SUBSAMPLES = 4          # sub-points per axis when measuring cell/ball overlap (dim >= 2)


# ---------------- Types ---------------- #
@dataclass(frozen=True, eq=False)
class MarkovKernel:
    name: str
    noise_support: Box
    density: Callable            # (y (..., d), z (..., d)) -> (...)
    lipschitz_bound: float
    sampler_cells: Optional[Tuple[int, ...]] = None
    atomic: bool = False         # degenerate test fixture, never a valid minorant
    direct_sampler: Optional[Callable] = None   # (n_paths, length, rng) -> stationary paths

    def __post_init__(self):
        cells = self.sampler_cells
        if cells is None:
            cells = DEFAULT_CELLS_1D if self.dim == 1 else DEFAULT_CELLS_2D
        object.__setattr__(self, "sampler_cells", _cells_tuple(cells, self.dim))

    @property
    def dim(self) -> int:
        return self.noise_support.dim


@dataclass(frozen=True)
class MinorizationCertificate:
    radius_r: float
    lower_density_at_zero: float
    minorizing_mass: float
    point_count: int
    slack: float


@dataclass(frozen=True)
class RecurrenceCertificate:
    delta: float
    steps_l: int
    kappa: float
    point_count: int


@dataclass(frozen=True)
class KernelCheck:
    normalization_defect: float
    lipschitz_ratio: float
    min_density: float
    passed: bool


# ---------------- Grid machinery ---------------- #
def resolve_cells(kernel: MarkovKernel, cells=None) -> Tuple[int, ...]:
    return kernel.sampler_cells if cells is None else _cells_tuple(cells, kernel.dim)


def density_rows(kernel: MarkovKernel, ys, cells=None) -> np.ndarray:
    """rho(y, c_j) at the cell centers c_j, shape (n, n_cells)."""
    cells = resolve_cells(kernel, cells)
    ys = np.asarray(ys, dtype=float).reshape(-1, kernel.dim)
    centers = cell_centers(kernel.noise_support, cells)
    return np.asarray(kernel.density(ys[:, None, :], centers[None, :, :]), dtype=float)


def step_error_bound(kernel: MarkovKernel, cells=None) -> float:
    """TV-scale midpoint-quadrature error of one grid step: (1/2) L (diam/2) vol(K)."""
    cells = resolve_cells(kernel, cells)
    return 0.25 * kernel.lipschitz_bound * cell_diameter(kernel.noise_support, cells) * kernel.noise_support.volume


def _normalize_rows(rows: np.ndarray, vol: float) -> np.ndarray:
    mass = rows.sum(axis=-1, keepdims=True) * vol
    if np.any(mass < DEGENERATE_MASS):
        raise DegenerateDensity(f"transition density integrates to {float(mass.min()):.3e}")
    return rows * vol / mass


def transition_matrix(kernel: MarkovKernel, cells=None) -> np.ndarray:
    """Row-stochastic matrix of cell-to-cell transition probabilities."""
    cells = resolve_cells(kernel, cells)
    centers = cell_centers(kernel.noise_support, cells)
    return _normalize_rows(density_rows(kernel, centers, cells), cell_volume(kernel.noise_support, cells))


def inverse_cdf_rows(masses: np.ndarray, box: Box, cells, uniforms: np.ndarray) -> np.ndarray:
    """
    Conditional inverse-CDF sweep over cell masses.
    masses: (n, n_cells) nonnegative; uniforms: (n, dim) in [0, 1). Within a cell the
    density is taken constant, so the last step is a linear interpolation.
    """
    cells = _cells_tuple(cells, box.dim)
    n = masses.shape[0]
    uniforms = np.asarray(uniforms, dtype=float).reshape(n, box.dim)
    w = cell_widths(box, cells)
    cur = masses.reshape((n,) + cells)
    out = np.empty((n, box.dim))
    rows = np.arange(n)
    for axis in range(box.dim):
        c = cells[axis]
        marg = cur.reshape(n, c, -1).sum(axis=-1)
        cdf = np.cumsum(marg, axis=1)
        total = cdf[:, -1]
        if np.any(total <= 0):
            raise DegenerateDensity("inverse CDF on a row of zero mass")
        target = uniforms[:, axis] * total
        idx = np.minimum((cdf <= target[:, None]).sum(axis=1), c - 1)
        prev = np.where(idx > 0, cdf[rows, np.maximum(idx - 1, 0)], 0.0)
        cell_mass = marg[rows, idx]
        frac = np.where(cell_mass > 0, (target - prev) / np.where(cell_mass > 0, cell_mass, 1.0), 0.5)
        out[:, axis] = box.lo[axis] + (idx + np.clip(frac, 0.0, 1.0)) * w[axis]
        cur = cur[rows, idx]
    return np.clip(out, box.lo, box.hi)


def inverse_cdf(kernel: MarkovKernel, ys, uniforms, cells=None) -> np.ndarray:
    """Map uniforms to draws of Q(y; .) for a batch of current noises y."""
    cells = resolve_cells(kernel, cells)
    rows = density_rows(kernel, ys, cells)
    masses = _normalize_rows(rows, cell_volume(kernel.noise_support, cells))
    return inverse_cdf_rows(masses, kernel.noise_support, cells, uniforms)


def sample(kernel: MarkovKernel, y, rng: np.random.Generator, cells=None) -> np.ndarray:
    """Draw z ~ Q(y; .); y may be one point (d,) or a batch (n, d)."""
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    ys = y.reshape(-1, kernel.dim)
    z = inverse_cdf(kernel, ys, rng.random(ys.shape), cells)
    return z[0] if single else z


def sample_chain(kernel: MarkovKernel, y0, n_steps: int, rng: np.random.Generator, cells=None) -> np.ndarray:
    """Paths of the noise chain, shape (n_paths, n_steps, d)."""
    y = np.asarray(y0, dtype=float).reshape(-1, kernel.dim)
    out = np.empty((y.shape[0], int(n_steps), kernel.dim))
    for k in range(int(n_steps)):
        y = sample(kernel, y, rng, cells)
        out[:, k] = y
    return out


# ---------------- Propagation ---------------- #
def _start_rows(kernel: MarkovKernel, ys, cells) -> np.ndarray:
    return _normalize_rows(density_rows(kernel, ys, cells), cell_volume(kernel.noise_support, cells))


def propagate(kernel: MarkovKernel, density: GridDensity, steps: int) -> GridDensity:
    """Push a noise density forward `steps` times through the grid transition matrix."""
    cells = density.cells
    if not density.box.same_as(kernel.noise_support):
        raise ValueError("density must live on the kernel's noise support")
    P = transition_matrix(kernel, cells)
    p = density.probabilities.ravel() / density.mass
    for _ in range(int(steps)):
        p = p @ P
    bound = float(density.diagnostics.get("quadrature_bound", 0.0)) + steps * step_error_bound(kernel, cells)
    return GridDensity.from_probabilities(kernel.noise_support, cells, p, {"quadrature_bound": bound})


def k_step_kernel(kernel: MarkovKernel, y, k: int, cells=None) -> GridDensity:
    """Density of Q_k(y; .) by iterated grid convolution, with its accumulated quadrature bound."""
    if k < 1:
        raise ValueError("k must be at least 1")
    cells = resolve_cells(kernel, cells)
    bound = k * step_error_bound(kernel, cells)
    if bound > MAX_QUADRATURE_BOUND:
        raise ResolutionTooCoarse(f"{kernel.name}: quadrature bound {bound:.3g} at {cells} cells for k={k}")
    p = _start_rows(kernel, np.asarray(y, dtype=float).reshape(1, -1), cells)[0]
    if k > 1:
        P = transition_matrix(kernel, cells)
        for _ in range(k - 1):
            p = p @ P
    return GridDensity.from_probabilities(kernel.noise_support, cells, p, {"quadrature_bound": bound})


def stationary_noise_density(kernel: MarkovKernel, cells=None, tol: float = 1e-13,
                             max_iter: int = 100_000) -> GridDensity:
    """Invariant density of the grid chain by power iteration from the uniform law."""
    cells = resolve_cells(kernel, cells)
    P = transition_matrix(kernel, cells)
    p = np.full(P.shape[0], 1.0 / P.shape[0])
    for _ in range(int(max_iter)):
        nxt = p @ P
        if 0.5 * np.abs(nxt - p).sum() < tol:
            p = nxt
            break
        p = nxt
    return GridDensity.from_probabilities(kernel.noise_support, cells, p)


def ball_cell_fraction(box: Box, cells, radius: float, center=None) -> np.ndarray:
    """Fraction of each grid cell lying in the open ball B(center, radius)."""
    cells = _cells_tuple(cells, box.dim)
    center = np.zeros(box.dim) if center is None else np.asarray(center, dtype=float)
    w = cell_widths(box, cells)
    centers = cell_centers(box, cells)
    if box.dim == 1:
        lo = centers[:, 0] - 0.5 * w[0]
        hi = centers[:, 0] + 0.5 * w[0]
        overlap = np.clip(np.minimum(hi, center[0] + radius) - np.maximum(lo, center[0] - radius), 0.0, None)
        return overlap / w[0]
    k = BALL_SUBSAMPLES
    offs = (np.arange(k) + 0.5) / k - 0.5
    sub = np.stack(np.meshgrid(*[offs * wi for wi in w], indexing="ij"), axis=-1).reshape(-1, box.dim)
    pts = centers[:, None, :] + sub[None, :, :]
    return np.mean(np.linalg.norm(pts - center, axis=-1) < radius, axis=1)


# ---------------- Validation and certificates ---------------- #
def validate_kernel(kernel: MarkovKernel, n_points: int = 64, seed: int = 0, cells=None) -> KernelCheck:
    cells = resolve_cells(kernel, cells)
    K = kernel.noise_support
    rng = np.random.default_rng(seed)
    ys = box_points(K.lo, K.hi, n_random=n_points, seed=seed)
    rows = density_rows(kernel, ys, cells)
    defect = float(np.abs(rows.sum(axis=1) * cell_volume(K, cells) - 1.0).max())
    a = K.lo + K.widths * rng.random((n_points, 4, kernel.dim))
    num = np.abs(kernel.density(a[:, 0], a[:, 1]) - kernel.density(a[:, 2], a[:, 3]))
    den = np.linalg.norm(a[:, 0] - a[:, 2], axis=-1) + np.linalg.norm(a[:, 1] - a[:, 3], axis=-1)
    ratio = float(np.max(num / np.maximum(den, 1e-300)))
    passed = defect <= NORMALIZATION_TOL and ratio <= kernel.lipschitz_bound * (1 + 1e-9) and rows.min() >= 0
    return KernelCheck(defect, ratio, float(rows.min()), passed)


def check_minorization(kernel: MarkovKernel, radius_r: float, cells=None, per_axis: int = 33,
                       n_random: int = 64, seed: int = 0) -> MinorizationCertificate:
    """m(z) = min over y in K ∩ B(r) of rho(y, z); pass requires m(0) > 0 after slack."""
    if radius_r <= 0:
        raise ValueError("radius_r must be positive")
    if kernel.atomic:
        raise MinorizationFails(f"{kernel.name}: atomic kernels have no density to minorize")
    K = kernel.noise_support
    zero = np.zeros(kernel.dim)
    if not np.all(K.contains(zero)):
        raise MinorizationFails(f"{kernel.name}: 0 is not in the noise support")
    cells = resolve_cells(kernel, cells)
    ys = ball_points(zero, radius_r, K.lo, K.hi, n_random=n_random, seed=seed, per_axis=per_axis)
    lo = np.maximum(K.lo, -radius_r)
    hi = np.minimum(K.hi, radius_r)
    slack = kernel.lipschitz_bound * lattice_spacing(lo, hi, per_axis)
    m = density_rows(kernel, ys, cells).min(axis=0)
    m0 = float(np.min(kernel.density(ys, zero[None, :]))) - slack
    vol = cell_volume(K, cells)
    quad = 0.5 * kernel.lipschitz_bound * cell_diameter(K, cells) * K.volume
    mass = float(np.clip(np.maximum(m - slack, 0.0).sum() * vol - quad, 0.0, 1.0))
    if m0 <= 0:
        raise MinorizationFails(f"{kernel.name}: min density at 0 over B({radius_r}) is {m0:.3e} after slack")
    if mass <= 0:
        raise MinorizationFails(f"{kernel.name}: minorizing mass vanishes after slack")
    logger.info("%s: minorization r=%.3g m(0)=%.4g mass=%.4g (%d points)", kernel.name, radius_r, m0, mass, ys.shape[0])
    return MinorizationCertificate(float(radius_r), m0, mass, int(ys.shape[0]), float(slack))


def check_strong_recurrence(kernel: MarkovKernel, delta: float, budget_l: int, cells=None,
                            per_axis: Optional[int] = None, n_random: int = 64,
                            seed: int = 0) -> RecurrenceCertificate:
    """First l <= budget_l with inf over sampled y of Q_l(y; B(0, delta)) positive after slack."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    K = kernel.noise_support
    cells = resolve_cells(kernel, cells)
    per_axis = per_axis or (65 if kernel.dim == 1 else 17)
    ys = box_points(K.lo, K.hi, n_random=n_random, seed=seed, per_axis=per_axis)
    frac = ball_cell_fraction(K, cells, delta)
    ball_volume = float(frac.sum() * cell_volume(K, cells))
    y_slack = kernel.lipschitz_bound * ball_volume * lattice_spacing(K.lo, K.hi, per_axis)
    rows = _start_rows(kernel, ys, cells)
    P = None
    for l in range(1, int(budget_l) + 1):
        if l > 1:
            P = transition_matrix(kernel, cells) if P is None else P
            rows = rows @ P
        kappa = float((rows @ frac).min()) - l * step_error_bound(kernel, cells) - y_slack
        logger.debug("%s: strong recurrence l=%d kappa=%.4g", kernel.name, l, kappa)
        if kappa > 0:
            return RecurrenceCertificate(float(delta), l, min(kappa, 1.0), int(ys.shape[0]))
    raise BudgetExceeded(f"{kernel.name}: no return to B(0,{delta}) with positive probability within {budget_l} steps")


__all__ = [
    "MarkovKernel",
    "MinorizationCertificate",
    "RecurrenceCertificate",
    "KernelCheck",
    "resolve_cells",
    "density_rows",
    "step_error_bound",
    "transition_matrix",
    "inverse_cdf_rows",
    "inverse_cdf",
    "sample",
    "sample_chain",
    "propagate",
    "k_step_kernel",
    "stationary_noise_density",
    "ball_cell_fraction",
    "validate_kernel",
    "check_minorization",
    "check_strong_recurrence",
]
