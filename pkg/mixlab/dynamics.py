# mixlab/dynamics.py
"""
Random dynamical systems u_k = S(u_{k-1}, eta_k) on a box X, the kicked-ODE
instance S(x, eta) = phi(x) + eta, and sampled checks of the
dissipativity and controllability hypotheses.

All maps are vectorized: states have shape (..., dim_state), noises
(..., dim_noise); derivatives return (..., dim_state, dim_state) and
(..., dim_state, dim_noise).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Mapping, NamedTuple, Optional

import numpy as np
from scipy.optimize import lsq_linear

from mixlab.errors import Blowup, BudgetExceeded, LeftInvariantSet, NotDissipative
from mixlab.measures import Box
from utils.logging_utils import get_logger
from utils.sample_points import box_points

logger = get_logger(__name__)

# ---- Config ----
INVARIANCE_TOL = 1e-9
RK4_STEPS = 100
BLOWUP_FACTOR = 10.0
FD_STEP = 1e-5
FD_REL_TOL = 1e-4
DISSIPATIVITY_BUDGET = 200
DISSIPATION_RADII = 10_000
CONTROLLABILITY_THRESHOLD = 1e-8
NOT_DISSIPATIVE_MARGIN = 1e-3


# ---------------- Types ---------------- #
@dataclass(frozen=True, eq=False)
class RdsSystem:
    name: str
    dim_state: int
    dim_noise: int
    map: Callable
    d_state: Callable
    d_noise: Callable
    invariant_set: Box
    noise_support: Box
    zero_fixed_point: bool = True
    info: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.invariant_set.dim != self.dim_state or self.noise_support.dim != self.dim_noise:
            raise ValueError(f"{self.name}: box dimensions do not match dim_state/dim_noise")

    def __call__(self, u, eta) -> np.ndarray:
        return np.asarray(self.map(np.asarray(u, dtype=float), np.asarray(eta, dtype=float)), dtype=float)


@dataclass(frozen=True, eq=False)
class KickedOde:
    vector_field: Callable
    d_vector_field: Callable
    dissipation_c: float
    dissipation_C: float
    bounding_box: Box
    rk4_steps: int = RK4_STEPS
    name: str = "kicked"

    @property
    def dim(self) -> int:
        return self.bounding_box.dim


class Controllability(NamedTuple):
    sigma_min_noise: float
    sigma_min_state: float
    passed: bool


@dataclass(frozen=True)
class SystemCheck:
    point_count: int
    invariance_worst: float        # largest distance of S(u, eta) outside X over sampled points
    derivative_rel_error: float    # worst finite-difference mismatch
    zero_residual: float
    passed: bool


# ---------------- Single steps and trajectories ---------------- #
def _outside_distance(box: Box, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=float).reshape(-1, box.dim)
    below = np.maximum(box.lo - pts, 0.0)
    above = np.maximum(pts - box.hi, 0.0)
    return np.linalg.norm(below + above, axis=-1)


def step(sys: RdsSystem, u, eta, index: Optional[int] = None) -> np.ndarray:
    """S(u, eta); raises LeftInvariantSet if the image leaves X by more than the tolerance."""
    u = np.asarray(u, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if not np.all(sys.invariant_set.contains(u, tol=INVARIANCE_TOL)):
        raise ValueError(f"{sys.name}: state {u.tolist()} is outside X")
    if not np.all(sys.noise_support.contains(eta, tol=INVARIANCE_TOL)):
        raise ValueError(f"{sys.name}: noise {eta.tolist()} is outside the noise support")
    out = sys(u, eta)
    gap = _outside_distance(sys.invariant_set, out).max(initial=0.0)
    if gap > INVARIANCE_TOL:
        raise LeftInvariantSet(f"{sys.name}: S(u, eta) left X by {gap:.3e}", index)
    return out


def iterate(sys: RdsSystem, u0, noise_seq) -> List[np.ndarray]:
    """[u_1, ..., u_n] with u_k = S(u_{k-1}, zeta_k)."""
    out = []
    u = np.asarray(u0, dtype=float)
    for k, zeta in enumerate(noise_seq):
        u = step(sys, u, zeta, index=k)
        out.append(u)
    return out


def iterate_zero_noise(sys: RdsSystem, u0, n: int) -> np.ndarray:
    """S_n(u; 0, ..., 0) for a batch of states (no invariance assertion)."""
    u = np.asarray(u0, dtype=float)
    zero = np.zeros(u.shape[:-1] + (sys.dim_noise,))
    for _ in range(int(n)):
        u = sys(u, zero)
    return u


# ---------------- Kicked ODE ---------------- #
def _rk4(ode: KickedOde, x: np.ndarray, steps: int) -> np.ndarray:
    h = 1.0 / steps
    limit = BLOWUP_FACTOR * ode.bounding_box.diameter
    V = ode.vector_field
    for _ in range(steps):
        k1 = V(x)
        k2 = V(x + 0.5 * h * k1)
        k3 = V(x + 0.5 * h * k2)
        k4 = V(x + h * k3)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)) or np.any(np.linalg.norm(x, axis=-1) > limit):
            raise Blowup(f"{ode.name}: trajectory exceeded {limit:.3g} during the unit-time flow")
    return x


def flow_map(ode: KickedOde, x, steps: Optional[int] = None) -> np.ndarray:
    """Time-1 shift along xdot = V(x) by classical RK4 (global error O(h^4))."""
    x = np.asarray(x, dtype=float)
    if not np.all(ode.bounding_box.contains(x)):
        raise ValueError(f"{ode.name}: flow_map evaluated outside the bounding box")
    return _rk4(ode, x, int(steps or ode.rk4_steps))


def flow_map_with_jacobian(ode: KickedOde, x, steps: Optional[int] = None):
    """phi(x) and D phi(x) from RK4 on the variational system Mdot = DV(x) M."""
    x = np.asarray(x, dtype=float)
    if not np.all(ode.bounding_box.contains(x)):
        raise ValueError(f"{ode.name}: flow_map evaluated outside the bounding box")
    steps = int(steps or ode.rk4_steps)
    h = 1.0 / steps
    V, DV = ode.vector_field, ode.d_vector_field
    M = np.broadcast_to(np.eye(x.shape[-1]), x.shape + (x.shape[-1],)).copy()
    for _ in range(steps):
        k1x = V(x)
        k1m = DV(x) @ M
        x2 = x + 0.5 * h * k1x
        k2x = V(x2)
        k2m = DV(x2) @ (M + 0.5 * h * k1m)
        x3 = x + 0.5 * h * k2x
        k3x = V(x3)
        k3m = DV(x3) @ (M + 0.5 * h * k2m)
        x4 = x + h * k3x
        k4x = V(x4)
        k4m = DV(x4) @ (M + h * k3m)
        x = x + (h / 6.0) * (k1x + 2 * k2x + 2 * k3x + k4x)
        M = M + (h / 6.0) * (k1m + 2 * k2m + 2 * k3m + k4m)
    return x, M


def check_ode_dissipation(ode: KickedOde, n_points: int = 4096, seed: int = 0) -> float:
    """Worst value of <V(x),x> + c|x|^2 - C over sampled points; must be <= 0."""
    pts = box_points(ode.bounding_box.lo, ode.bounding_box.hi, n_random=n_points, seed=seed)
    lhs = np.sum(ode.vector_field(pts) * pts, axis=-1)
    return float(np.max(lhs + ode.dissipation_c * np.sum(pts ** 2, axis=-1) - ode.dissipation_C))


def fit_dissipation(ode: KickedOde, n_radii: int = DISSIPATION_RADII, seed: int = 0):
    """
    Least-squares fit of |phi(x)| <= beta |x| + C1 over sampled points,
    beta constrained to [0, 1]; C1 then raised to cover every residual.
    """
    rng = np.random.default_rng(seed)
    box = ode.bounding_box
    pts = box.lo + box.widths * rng.random((int(n_radii), box.dim))
    r = np.linalg.norm(pts, axis=-1)
    y = np.linalg.norm(flow_map(ode, pts), axis=-1)
    A = np.stack([r, np.ones_like(r)], axis=-1)
    res = lsq_linear(A, y, bounds=([0.0, 0.0], [1.0, np.inf]))
    beta, c1 = float(res.x[0]), float(res.x[1])
    c1 = max(0.0, c1 + float(np.max(y - beta * r - c1)))
    return beta, c1


def make_kicked_system(ode: KickedOde, noise_support: Box, n_radii: int = DISSIPATION_RADII,
                       seed: int = 0, name: Optional[str] = None) -> RdsSystem:
    """S(x, eta) = phi(x) + eta on the ball radius R = 2(kappa + C1)/(1 - beta) (as a cube)."""
    if noise_support.dim != ode.dim:
        raise ValueError("kicked systems need dim E = dim H")
    worst = check_ode_dissipation(ode, seed=seed)
    if worst > 1e-9:
        logger.warning("%s: <V(x),x> <= -c|x|^2 + C violated on sampled points by %.3e", ode.name, worst)
    beta, c1 = fit_dissipation(ode, n_radii, seed)
    if beta >= 1.0 - NOT_DISSIPATIVE_MARGIN:
        raise NotDissipative(f"{ode.name}: fitted beta = {beta:.6f} is not below 1")
    kappa = noise_support.max_norm
    radius = 2.0 * (kappa + c1) / (1.0 - beta)
    X = Box.cube(radius, ode.dim)
    if not np.all((X.lo >= ode.bounding_box.lo) & (X.hi <= ode.bounding_box.hi)):
        raise ValueError(f"{ode.name}: invariant cube of radius {radius:.4g} exceeds the bounding box")
    logger.info("%s: beta=%.6f C1=%.3e kappa=%.4g R=%.6g", ode.name, beta, c1, kappa, radius)

    dim = ode.dim

    def kicked_map(x, eta):
        return flow_map(ode, x) + eta

    def kicked_d_state(x, eta):
        return flow_map_with_jacobian(ode, x)[1]

    def kicked_d_noise(x, eta):
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(eta)[:-1])
        return np.broadcast_to(np.eye(dim), shape + (dim, dim)).copy()

    zero_fixed = bool(np.linalg.norm(ode.vector_field(np.zeros(dim))) < 1e-12)
    return RdsSystem(
        name=name or ode.name,
        dim_state=dim,
        dim_noise=dim,
        map=kicked_map,
        d_state=kicked_d_state,
        d_noise=kicked_d_noise,
        invariant_set=X,
        noise_support=noise_support,
        zero_fixed_point=zero_fixed,
        info={"beta": beta, "C1": c1, "kappa": kappa, "R": radius},
    )


def absorption_time(sys: RdsSystem, x0, budget: int = 1000) -> int:
    """
    Steps for a trajectory from x0 (possibly far outside X) to enter X when every
    kick pushes outward with the largest admissible norm.
    """
    x = np.asarray(x0, dtype=float)
    K = sys.noise_support
    for n in range(int(budget) + 1):
        if np.all(sys.invariant_set.contains(x)):
            return n
        direction = x / max(np.linalg.norm(x), 1e-300)
        kick = K.clip(direction * K.max_norm)
        x = sys(x, kick)
    raise BudgetExceeded(f"{sys.name}: not absorbed into X within {budget} steps")


# ---------------- Hypothesis checks ---------------- #
def check_dissipativity(sys: RdsSystem, eps: float, budget: int = DISSIPATIVITY_BUDGET,
                        n_random: int = 256, seed: int = 0) -> int:
    """Smallest n with max over sampled u in X of |S_n(u; 0,...,0)| <= eps."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not np.all(sys.noise_support.contains(np.zeros(sys.dim_noise))):
        raise ValueError(f"{sys.name}: the zero kick is not in the noise support")
    X = sys.invariant_set
    u = box_points(X.lo, X.hi, n_random=n_random, seed=seed)
    zero = np.zeros((u.shape[0], sys.dim_noise))
    for n in range(int(budget) + 1):
        worst = float(np.linalg.norm(u, axis=-1).max())
        if worst <= eps:
            logger.info("%s: dissipativity n=%d over %d points (worst %.3e, eps %.3e)",
                        sys.name, n, u.shape[0], worst, eps)
            return n
        u = sys(u, zero)
    raise BudgetExceeded(f"{sys.name}: |S_n(u;0)| > {eps} after {budget} steps (worst {worst:.3e})")


def _smallest_singular(mat: np.ndarray) -> float:
    mat = np.atleast_2d(mat)
    if mat.shape[0] > mat.shape[1]:
        return 0.0
    return float(np.linalg.svd(mat, compute_uv=False)[-1])


def check_controllability(sys: RdsSystem, threshold: float = CONTROLLABILITY_THRESHOLD) -> Controllability:
    """Smallest singular values of D_eta S(0,0) (surjectivity) and D_u S(0,0) (isomorphism)."""
    u0 = np.zeros(sys.dim_state)
    e0 = np.zeros(sys.dim_noise)
    s_noise = _smallest_singular(sys.d_noise(u0, e0))
    s_state = _smallest_singular(sys.d_state(u0, e0))
    passed = s_noise > threshold and s_state > threshold
    logger.info("%s: controllability sigma_noise=%.3e sigma_state=%.3e pass=%s",
                sys.name, s_noise, s_state, passed)
    return Controllability(s_noise, s_state, passed)


# ---------------- Validation ---------------- #
def finite_difference_jacobian(fn: Callable, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of a vectorized map; x is (n, d), result (n, m, d)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    cols = []
    for j in range(x.shape[-1]):
        e = np.zeros(x.shape[-1])
        e[j] = h
        cols.append((np.asarray(fn(x + e)) - np.asarray(fn(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def jacobian_mismatch(exact: np.ndarray, approx: np.ndarray) -> float:
    num = np.linalg.norm(exact - approx, axis=(-2, -1))
    den = np.maximum(np.linalg.norm(exact, axis=(-2, -1)), 1.0)
    return float(np.max(num / den))


def validate_system(sys: RdsSystem, n_points: int = 10_000, n_derivative: int = 64,
                    seed: int = 0) -> SystemCheck:
    """Sampled invariance S(X x K) in X, S(0,0)=0 and the supplied derivatives."""
    rng = np.random.default_rng(seed)
    X, K = sys.invariant_set, sys.noise_support
    u = X.lo + X.widths * rng.random((int(n_points), sys.dim_state))
    e = K.lo + K.widths * rng.random((int(n_points), sys.dim_noise))
    worst = float(_outside_distance(X, sys(u, e)).max())

    zero_res = 0.0
    if sys.zero_fixed_point:
        zero_res = float(np.linalg.norm(sys(np.zeros(sys.dim_state), np.zeros(sys.dim_noise))))

    # keep finite-difference stencils inside both boxes
    m = int(n_derivative)
    shrink_u = X.lo + FD_STEP * 2 + (X.widths - 4 * FD_STEP) * rng.random((m, sys.dim_state))
    shrink_e = K.lo + FD_STEP * 2 + (K.widths - 4 * FD_STEP) * rng.random((m, sys.dim_noise))
    fd_state = finite_difference_jacobian(lambda v: sys(v, shrink_e), shrink_u)
    fd_noise = finite_difference_jacobian(lambda z: sys(shrink_u, z), shrink_e)
    err = max(jacobian_mismatch(np.asarray(sys.d_state(shrink_u, shrink_e)), fd_state),
              jacobian_mismatch(np.asarray(sys.d_noise(shrink_u, shrink_e)), fd_noise))
    passed = worst <= INVARIANCE_TOL and zero_res <= 1e-9 and err <= FD_REL_TOL
    return SystemCheck(int(n_points), worst, err, zero_res, passed)


__all__ = [
    "RdsSystem",
    "KickedOde",
    "Controllability",
    "SystemCheck",
    "step",
    "iterate",
    "iterate_zero_noise",
    "flow_map",
    "flow_map_with_jacobian",
    "fit_dissipation",
    "check_ode_dissipation",
    "make_kicked_system",
    "absorption_time",
    "check_dissipativity",
    "check_controllability",
    "finite_difference_jacobian",
    "jacobian_mismatch",
    "validate_system",
]
