# mixlab/catalog.py
"""
Named systems, noise laws and pushforward cases.

Every factory takes keyword parameters (the `params` tables of a run config)
and returns a ready object. Truncated-Gaussian laws carry a direct path
sampler built on scipy.stats.truncnorm, independent of the grid sampler.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from scipy.special import ndtr
from scipy.stats import truncnorm

from mixlab.dynamics import KickedOde, RdsSystem, make_kicked_system
from mixlab.errors import ConfigError
from mixlab.markov_noise import MarkovKernel
from mixlab.measures import Box
from mixlab.pushforward import ParamDensityKernel, RegularMap
from mixlab.reduction import StationaryNoiseModel

# ---- Config ----
LIPSCHITZ_GRID = 401           # points per axis for the numerical Lipschitz sup
LIPSCHITZ_SAFETY = 1.05
DIRECT_BURN_IN = 200
INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


# ---------------- Systems ---------------- #
def kicked_linear_1d(seed: int = 0) -> RdsSystem:
    """xdot = -x, kicks in [-1, 1]: S(x, eta) = e^{-1} x + eta."""
    ode = KickedOde(lambda x: -x, lambda x: np.broadcast_to(-np.eye(1), x.shape + (1,)).copy(),
                    dissipation_c=1.0, dissipation_C=0.0, bounding_box=Box.cube(2000.0, 1), name="kicked_linear_1d")
    return make_kicked_system(ode, Box.cube(1.0, 1), seed=seed)


def kicked_cubic_1d(seed: int = 0) -> RdsSystem:
    """xdot = -x^3 (flow x / sqrt(1 + 2 x^2 t)), kicks in [-1, 1]."""
    ode = KickedOde(lambda x: -x ** 3, lambda x: (-3.0 * x ** 2)[..., None],
                    dissipation_c=1.0, dissipation_C=0.25, bounding_box=Box.cube(5.0, 1), name="kicked_cubic_1d")
    return make_kicked_system(ode, Box.cube(1.0, 1), seed=seed)


def kicked_linear_2d(seed: int = 0) -> RdsSystem:
    """xdot = A x with A = [[-1, -0.5], [0.5, -1]] (damped rotation), kicks in [-1, 1]^2."""
    A = np.array([[-1.0, -0.5], [0.5, -1.0]])
    ode = KickedOde(lambda x: x @ A.T, lambda x: np.broadcast_to(A, x.shape + (2,)).copy(),
                    dissipation_c=1.0, dissipation_C=0.0, bounding_box=Box.cube(50.0, 2), name="kicked_linear_2d")
    return make_kicked_system(ode, Box.cube(1.0, 2), seed=seed)


def pure_noise(half_width: float = 1.0) -> RdsSystem:
    """S(u, eta) = eta on X = K = [-h, h]."""
    K = Box.cube(half_width, 1)

    def shape(u, eta):
        return np.broadcast_shapes(np.shape(u)[:-1], np.shape(eta)[:-1])

    return RdsSystem(
        name="pure_noise",
        dim_state=1,
        dim_noise=1,
        map=lambda u, eta: np.broadcast_to(eta, shape(u, eta) + (1,)).copy(),
        d_state=lambda u, eta: np.zeros(shape(u, eta) + (1, 1)),
        d_noise=lambda u, eta: np.ones(shape(u, eta) + (1, 1)),
        invariant_set=K,
        noise_support=K,
        info={"state_free": 1.0},
    )


SYSTEMS: Dict[str, Callable[..., RdsSystem]] = {
    "kicked_linear_1d": kicked_linear_1d,
    "kicked_cubic_1d": kicked_cubic_1d,
    "kicked_linear_2d": kicked_linear_2d,
    "pure_noise": pure_noise,
}


# ---------------- Kernels ---------------- #
def _grid_lipschitz(density: Callable, lo: float, hi: float) -> float:
    """Sup of |d rho/dy| and |d rho/dz| from central differences on a fine grid, with a safety factor."""
    t = np.linspace(lo, hi, LIPSCHITZ_GRID)
    Y, Z = np.meshgrid(t, t, indexing="ij")
    rho = density(Y[..., None], Z[..., None])
    dy, dz = np.gradient(rho, t, t)
    return LIPSCHITZ_SAFETY * float(max(np.abs(dy).max(), np.abs(dz).max()))


def _uniform_paths(K: Box):
    def sampler(n_paths: int, length: int, rng: np.random.Generator) -> np.ndarray:
        return K.lo + K.widths * rng.random((int(n_paths), int(length), K.dim))
    return sampler


def iid_uniform(half_width: float = 1.0, dim: int = 1) -> MarkovKernel:
    K = Box.cube(half_width, dim)
    level = 1.0 / K.volume

    def density(y, z):
        return np.full(np.broadcast_shapes(np.shape(y)[:-1], np.shape(z)[:-1]), level)

    return MarkovKernel("iid_uniform", K, density, 0.0, direct_sampler=_uniform_paths(K))


def _truncgauss_density(mean, z, s: float, lo: float, hi: float):
    mass = ndtr((hi - mean) / s) - ndtr((lo - mean) / s)
    t = (z - mean) / s
    return INV_SQRT_2PI * np.exp(-0.5 * t * t) / (s * mass)


def _truncgauss_paths(coeffs: Tuple[float, ...], s: float, lo: float, hi: float):
    """Direct AR(p) paths eta_k ~ TN(sum_i a_i eta_{k-i}, s^2; [lo, hi]), burnt in from zeros."""
    p = len(coeffs)

    def sampler(n_paths: int, length: int, rng: np.random.Generator) -> np.ndarray:
        hist = np.zeros((int(n_paths), p))
        out = np.empty((int(n_paths), int(length), 1))
        for k in range(DIRECT_BURN_IN + int(length)):
            mean = hist @ np.asarray(coeffs)[::-1]
            eta = truncnorm.rvs((lo - mean) / s, (hi - mean) / s, loc=mean, scale=s, random_state=rng)
            hist = np.concatenate([hist[:, 1:], eta[:, None]], axis=1)
            if k >= DIRECT_BURN_IN:
                out[:, k - DIRECT_BURN_IN, 0] = eta
        return out

    return sampler


def ar1_truncgauss(a: float = 0.5, s: float = 0.3, half_width: float = 1.0) -> MarkovKernel:
    """eta_k ~ N(a eta_{k-1}, s^2) truncated to [-h, h]."""
    if s <= 0:
        raise ConfigError("ar1_truncgauss: s must be positive")
    lo, hi = -half_width, half_width

    def density(y, z):
        return _truncgauss_density(a * np.asarray(y)[..., 0], np.asarray(z)[..., 0], s, lo, hi)

    L = _grid_lipschitz(density, lo, hi)
    return MarkovKernel("ar1_truncgauss", Box.cube(half_width, 1), density, L,
                        direct_sampler=_truncgauss_paths((a,), s, lo, hi))


def drift_away(half_width: float = 1.0, shift: float = 0.5, cells: int = 64) -> MarkovKernel:
    """Hat of half-width one coarse cell at clip(y + shift): the chain drifts to the top edge and stays."""
    K = Box.cube(half_width, 1)
    w = 2.0 * half_width / cells

    def center(y):
        return np.clip(np.asarray(y)[..., 0] + shift, -half_width + w, half_width - w)

    def density(y, z):
        return np.maximum(0.0, 1.0 - np.abs(np.asarray(z)[..., 0] - center(y)) / w) / w

    def sampler(n_paths: int, length: int, rng: np.random.Generator) -> np.ndarray:
        y = np.zeros(int(n_paths))
        out = np.empty((int(n_paths), int(length), 1))
        for k in range(DIRECT_BURN_IN + int(length)):
            y = center(y[:, None]) + w * (rng.random(y.size) - rng.random(y.size))
            if k >= DIRECT_BURN_IN:
                out[:, k - DIRECT_BURN_IN, 0] = y
        return out

    return MarkovKernel("drift_away", K, density, 1.0 / w ** 2, atomic=True, direct_sampler=sampler)


KERNELS: Dict[str, Callable[..., MarkovKernel]] = {
    "iid_uniform": iid_uniform,
    "ar1_truncgauss": ar1_truncgauss,
    "drift_away": drift_away,
}


# ---------------- Stationary noise models ---------------- #
def ar2_truncgauss(a1: float = 0.4, a2: float = 0.3, s: float = 0.3, half_width: float = 1.0,
                   memory_m: int = 16, iota: float = 2.0, burn_in: int = 10_000) -> StationaryNoiseModel:
    """eta_k ~ N(a1 eta_{k-1} + a2 eta_{k-2}, s^2) truncated to [-h, h]; true memory 2."""
    lo, hi = -half_width, half_width

    def density(past, z):
        past = np.asarray(past)
        mean = a1 * past[..., -1, 0] + a2 * past[..., -2, 0]
        return _truncgauss_density(mean, np.asarray(z)[..., 0], s, lo, hi)

    t = np.linspace(lo, hi, 81)
    P1, P2, Z = np.meshgrid(t, t, t, indexing="ij")
    rho = density(np.stack([P2, P1], axis=-1)[..., None], Z[..., None])
    d_latest, d_older, d_z = np.gradient(rho, t, t, t)
    L = LIPSCHITZ_SAFETY * float(max(np.abs(d_latest).max(), iota * np.abs(d_older).max(), np.abs(d_z).max()))
    return StationaryNoiseModel("ar2_truncgauss", Box.cube(half_width, 1), density, depth=2, lipschitz_bound=L,
                                memory_m=memory_m, iota=iota, burn_in=burn_in,
                                direct_sampler=_truncgauss_paths((a1, a2), s, lo, hi))


def _from_kernel(factory: Callable[..., MarkovKernel]):
    def build(memory_m: int = 16, iota: float = 2.0, burn_in: int = 10_000, **params) -> StationaryNoiseModel:
        return StationaryNoiseModel.from_kernel(factory(**params), memory_m, iota, burn_in)
    return build


STATIONARY_MODELS: Dict[str, Callable[..., StationaryNoiseModel]] = {
    "iid_uniform": _from_kernel(iid_uniform),
    "ar1_truncgauss": _from_kernel(ar1_truncgauss),
    "ar2_truncgauss": ar2_truncgauss,
}


# ---------------- Pushforward cases ---------------- #
@dataclass(frozen=True, eq=False)
class PushforwardCase:
    name: str
    F: RegularMap
    lam: ParamDensityKernel
    param: np.ndarray
    out_box: Box
    out_cells: int
    oracle: Callable                  # x (..., dH) -> exact density g
    sample: Callable                  # (n, rng) -> image points F(U, y), y ~ lambda(U, .)
    options: Dict[str, int] = field(default_factory=dict)
    mass_tol: float = 1e-3           # accepted |mass - 1| before normalization


def _identity_case() -> PushforwardCase:
    kernel = ar1_truncgauss()
    U = np.array([0.4])
    F = RegularMap("identity", 1, 1, lambda U, y: np.asarray(y, dtype=float),
                   lambda U, y: np.ones(np.shape(y)[:-1] + (1, 1)))
    lam = ParamDensityKernel(lambda U, y: kernel.density(np.asarray(U), y), kernel.noise_support, kernel.lipschitz_bound)

    def sample(n, rng):
        mean = 0.5 * U[0]
        return truncnorm.rvs((-1 - mean) / 0.3, (1 - mean) / 0.3, loc=mean, scale=0.3, size=int(n),
                             random_state=rng)[:, None]

    return PushforwardCase("identity", F, lam, U, kernel.noise_support, 256,
                           lambda x: kernel.density(U, x), sample)


def _scaling_case() -> PushforwardCase:
    support = Box([0.0], [1.0])
    F = RegularMap("scaling_2x", 1, 1, lambda U, y: 2.0 * np.asarray(y, dtype=float),
                   lambda U, y: np.full(np.shape(y)[:-1] + (1, 1), 2.0))
    lam = ParamDensityKernel(lambda U, y: np.where(support.contains(np.asarray(y).reshape(-1, 1)),
                                                    1.0, 0.0).reshape(np.shape(y)[:-1]), support, 0.0)
    return PushforwardCase("scaling_2x", F, lam, np.zeros(1), Box([-0.5], [2.5]), 300,
                           lambda x: np.where((np.asarray(x)[..., 0] >= 0) & (np.asarray(x)[..., 0] <= 2), 0.5, 0.0),
                           lambda n, rng: 2.0 * rng.random((int(n), 1)))


def _sum_case() -> PushforwardCase:
    support = Box([0.0, 0.0], [1.0, 1.0])
    F = RegularMap("sum_2to1", 2, 1, lambda U, y: np.asarray(y, dtype=float).sum(axis=-1, keepdims=True),
                   lambda U, y: np.ones(np.shape(y)[:-1] + (1, 2)))
    lam = ParamDensityKernel(lambda U, y: np.where(support.contains(np.asarray(y).reshape(-1, 2)),
                                                    1.0, 0.0).reshape(np.shape(y)[:-1]), support, 0.0)
    return PushforwardCase("sum_2to1", F, lam, np.zeros(1), Box([0.0], [2.0]), 200,
                           lambda x: np.maximum(0.0, 1.0 - np.abs(np.asarray(x)[..., 0] - 1.0)),
                           lambda n, rng: rng.random((int(n), 2)).sum(axis=-1, keepdims=True),
                           {"quad_nodes": 128})


PUSHFORWARD_CASES: Dict[str, Callable[[], PushforwardCase]] = {
    "identity": _identity_case,
    "scaling_2x": _scaling_case,
    "sum_2to1": _sum_case,
}


# ---------------- Lookup ---------------- #
def _lookup(table: Dict[str, Callable], kind: str, name: str, params: Optional[dict]):
    if name not in table:
        raise ConfigError(f"unknown {kind} {name!r}; known: {sorted(table)}")
    try:
        return table[name](**(params or {}))
    except TypeError as exc:
        raise ConfigError(f"bad parameters for {kind} {name!r}: {exc}") from exc


def build_system(name: str, params: Optional[dict] = None) -> RdsSystem:
    return _lookup(SYSTEMS, "system", name, params)


def build_kernel(name: str, params: Optional[dict] = None) -> MarkovKernel:
    return _lookup(KERNELS, "kernel", name, params)


def build_stationary(name: str, params: Optional[dict] = None) -> StationaryNoiseModel:
    return _lookup(STATIONARY_MODELS, "stationary noise model", name, params)


def build_pushforward_case(name: str) -> PushforwardCase:
    return _lookup(PUSHFORWARD_CASES, "pushforward case", name, None)


__all__ = [
    "SYSTEMS",
    "KERNELS",
    "STATIONARY_MODELS",
    "PUSHFORWARD_CASES",
    "PushforwardCase",
    "kicked_linear_1d",
    "kicked_cubic_1d",
    "kicked_linear_2d",
    "pure_noise",
    "iid_uniform",
    "ar1_truncgauss",
    "drift_away",
    "ar2_truncgauss",
    "build_system",
    "build_kernel",
    "build_stationary",
    "build_pushforward_case",
]
