# mixlab/pushforward.py
"""
Densities of image measures F(U, .)_* lambda(U, .) for maps F: params x E -> H
with surjective D_y F (dim H <= dim E).

E is split as E1 (+) E2 with E1 spanned by the top dim-H right singular vectors
of D_y F at a reference point. For every output point x and every E2 fiber
node b the equation F(U, y_ref + E1 a + E2 b) = x is solved for a by damped
multistart Newton, and

    g(U, x) = sum_b w_b sum_{roots a} rho(U, y) / |det(D_y F(U, y) E1)|.

With dim E = dim H the fiber is a single point and this is the sum over
preimages of rho / |det D_y F|.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from numpy.polynomial.legendre import leggauss

from mixlab.errors import EpsilonTooLarge, NewtonDivergence, NotLocallyInjective, SurjectivityLost
from mixlab.measures import (Box, EmpiricalMeasure, GridDensity, axis_centers, cell_widths,
                             dual_lipschitz_distance, tv_distance, _cells_tuple)
from utils.logging_utils import get_logger

logger = get_logger(__name__)

# ---- Config ----
QUAD_NODES = 32              # Gauss-Legendre nodes per E2 axis
SUB_POINTS = 4               # Gauss-Legendre points per axis inside each output cell
NEWTON_STARTS = 8
NEWTON_TOL = 1e-10
NEWTON_MAX_ITER = 50
NEWTON_BACKTRACKS = 8
DEDUP_RADIUS = 1e-6
MAX_SKIP_FRACTION = 0.01
SURJECTIVITY_THRESHOLD = 1e-8
BLEND_HALVINGS = 6
INJECTIVITY_PAIRS = 100_000


# ---------------- Types ---------------- #
@dataclass(frozen=True, eq=False)
class RegularMap:
    name: str
    dim_in: int
    dim_out: int
    eval: Callable               # (U (p,), y (..., dim_in)) -> (..., dim_out)
    d_y: Callable                # (U, y) -> (..., dim_out, dim_in)
    lipschitz_in_U: float = 0.0

    def __post_init__(self):
        if self.dim_out > self.dim_in:
            raise ValueError(f"{self.name}: dim H must not exceed dim E")


@dataclass(frozen=True, eq=False)
class ParamDensityKernel:
    density: Callable            # (U (p,), y (..., dim)) -> (...)
    support: Box
    lipschitz: float = 0.0


@dataclass(frozen=True, eq=False)
class GlobalDiffeo:
    base_point: np.ndarray
    cutoff_radius: float
    linearization: np.ndarray
    local_map: Callable
    halvings: int = 0
    _phi_base: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        base = np.asarray(self.base_point, dtype=float)
        object.__setattr__(self, "base_point", base)
        object.__setattr__(self, "linearization", np.atleast_2d(np.asarray(self.linearization, dtype=float)))
        object.__setattr__(self, "_phi_base", np.asarray(self.local_map(base[None, :]), dtype=float)[0])

    def __call__(self, z) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=float))
        dz = z - self.base_point
        chi = bump(np.linalg.norm(dz, axis=-1) / self.cutoff_radius)
        out = self._phi_base + (1.0 - chi)[:, None] * (dz @ self.linearization.T)
        inside = chi > 0
        if np.any(inside):
            local = np.asarray(self.local_map(z[inside]), dtype=float) - self._phi_base
            out[inside] += chi[inside, None] * local
        return out


@dataclass(frozen=True)
class ImageLipschitzEstimate:
    ratio_max: float
    pair: Tuple[EmpiricalMeasure, EmpiricalMeasure]
    ratios: np.ndarray
    trials_used: int


# ---------------- Helpers ---------------- #
def bump(t) -> np.ndarray:
    """C^2 quintic cutoff: 1 for t <= 1/2, 0 for t >= 1."""
    s = np.clip(2.0 * np.asarray(t, dtype=float) - 1.0, 0.0, 1.0)
    return 1.0 - s ** 3 * (10.0 - 15.0 * s + 6.0 * s ** 2)


def _tensor_gauss(lo, hi, n: int):
    """Tensor Gauss-Legendre nodes/weights on the box [lo, hi]."""
    lo = np.atleast_1d(lo)
    hi = np.atleast_1d(hi)
    t, w = leggauss(int(n))
    axes = [0.5 * (h - l) * t + 0.5 * (h + l) for l, h in zip(lo, hi)]
    wts = [0.5 * (h - l) * w for l, h in zip(lo, hi)]
    nodes = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, lo.size)
    weights = np.prod(np.stack(np.meshgrid(*wts, indexing="ij"), axis=-1).reshape(-1, lo.size), axis=-1)
    return nodes, weights


def _cell_sub_points(box: Box, cells, per_axis: int):
    """Gauss-Legendre points inside every output cell; weights average over the cell."""
    cells = _cells_tuple(cells, box.dim)
    t, w = leggauss(int(per_axis))
    width = cell_widths(box, cells)
    axes = []
    for i, c in enumerate(axis_centers(box, cells)):
        axes.append((c[:, None] + 0.5 * width[i] * t[None, :]).ravel())
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    # reorder to (cell, sub) so each cell's points are contiguous
    shape = []
    for c in cells:
        shape += [c, per_axis]
    pts = mesh.reshape(tuple(shape) + (box.dim,))
    order = list(range(0, 2 * box.dim, 2)) + list(range(1, 2 * box.dim, 2)) + [2 * box.dim]
    pts = pts.transpose(order).reshape(int(np.prod(cells)), per_axis ** box.dim, box.dim)
    sub_w = np.prod(np.stack(np.meshgrid(*([w / 2.0] * box.dim), indexing="ij"), axis=-1).reshape(-1, box.dim), axis=-1)
    return pts, sub_w


def _solve(J: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Batched J^{-1} r; singular systems give a zero step."""
    if J.shape[-1] == 1:
        d = J[..., 0, 0]
        ok = np.abs(d) > 1e-300
        return np.where(ok, r[..., 0] / np.where(ok, d, 1.0), 0.0)[..., None]
    try:
        return np.linalg.solve(J, r[..., None])[..., 0]
    except np.linalg.LinAlgError:
        return (np.linalg.pinv(J) @ r[..., None])[..., 0]


def _projection_range(box: Box, origin: np.ndarray, basis: np.ndarray):
    from utils.sample_points import corners
    proj = (corners(box.lo, box.hi) - origin) @ basis
    return proj.min(axis=0), proj.max(axis=0)


def _start_lattice(lo, hi, n: int) -> np.ndarray:
    dim = lo.size
    per = max(int(np.ceil(n ** (1.0 / dim))), 1)
    axes = [np.linspace(l, h, per + 2)[1:-1] for l, h in zip(lo, hi)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dim)
    return pts[: max(n, 1)]


def _newton(F: RegularMap, U: np.ndarray, x: np.ndarray, origin: np.ndarray, E1: np.ndarray,
            b_shift: np.ndarray, a: np.ndarray, a_lo: np.ndarray, a_hi: np.ndarray):
    """
    Damped Newton for F(U, origin + E1 a + b_shift) = x, one flat row per
    (target, fiber node, start). A row whose step fails every backtrack stops.
    """
    a_pad = 0.5 * (a_hi - a_lo)

    def residual(rows, a_):
        y_ = origin + a_ @ E1.T + b_shift[rows]
        return y_, np.asarray(F.eval(U, y_), dtype=float) - x[rows]

    y, r = residual(np.arange(a.shape[0]), a)
    rn = np.linalg.norm(r, axis=-1)
    active = np.flatnonzero(rn >= NEWTON_TOL)
    for _ in range(NEWTON_MAX_ITER):
        if active.size == 0:
            break
        step = _solve(np.asarray(F.d_y(U, y[active]), dtype=float) @ E1, r[active])
        t = np.ones(active.size)
        pending = np.ones(active.size, dtype=bool)
        for _ in range(NEWTON_BACKTRACKS):
            idx = np.flatnonzero(pending)
            rows = active[idx]
            trial = np.clip(a[rows] - t[idx, None] * step[idx], a_lo - a_pad, a_hi + a_pad)
            y_t, r_t = residual(rows, trial)
            rn_t = np.linalg.norm(r_t, axis=-1)
            good = rn_t < rn[rows]
            hit = rows[good]
            a[hit], y[hit], r[hit], rn[hit] = trial[good], y_t[good], r_t[good], rn_t[good]
            pending[idx[good]] = False
            t[idx[~good]] *= 0.5
            if not pending.any():
                break
        active = active[~pending]
        active = active[rn[active] >= NEWTON_TOL]
    return a, y, rn < NEWTON_TOL


def _warm_restart(F: RegularMap, U: np.ndarray, x: np.ndarray, origin: np.ndarray, E1: np.ndarray,
                  b_shift: np.ndarray, a: np.ndarray, y: np.ndarray, converged: np.ndarray,
                  a_lo: np.ndarray, a_hi: np.ndarray) -> int:
    """Fiber nodes with no root restart from the roots of the previous node; updates in place."""
    nb, ns, dH = a.shape[1], a.shape[2], a.shape[3]
    rescued = 0
    for _ in range(nb - 1):
        found = np.any(converged, axis=-1)                       # (nx, nb)
        retry = np.zeros_like(found)
        retry[:, 1:] = ~found[:, 1:] & found[:, :-1]
        if not retry.any():
            break
        ix, jb = np.nonzero(retry)
        seeds = np.where(converged[ix, jb - 1][..., None], a[ix, jb - 1], a[ix, jb]).reshape(-1, dH)
        a_r, y_r, ok = _newton(F, U, np.repeat(x[ix], ns, axis=0), origin, E1, np.repeat(b_shift[jb], ns, axis=0),
                               seeds.copy(), a_lo, a_hi)
        a[ix, jb] = a_r.reshape(-1, ns, dH)
        y[ix, jb] = y_r.reshape(-1, ns, y.shape[-1])
        converged[ix, jb] = ok.reshape(-1, ns)
        gained = int(np.any(ok.reshape(-1, ns), axis=-1).sum())
        if not gained:
            break
        rescued += gained
    return rescued


def _fiber_integral(F: RegularMap, lam: ParamDensityKernel, U: np.ndarray, x: np.ndarray, origin: np.ndarray,
                    E1: np.ndarray, E2: np.ndarray, quad_nodes: int, n_starts: int, ref_block: float,
                    threshold: float):
    """
    g(x) = sum_b w_b sum_{roots a} rho(U, y) / |det(D_yF(U, y) E1)| with y = origin + E1 a + E2 b,
    for targets x of shape (nx, dH). Also returns the Newton skips per (target, node), the
    number of warm restarts, and per target the fiber point where the restricted block is
    weakest, if it fell below half of ref_block (NaN rows otherwise).
    """
    support = lam.support
    dE, dH = F.dim_in, F.dim_out
    if dE > dH:
        b_lo, b_hi = _projection_range(support, origin, E2)
        b_nodes, b_w = _tensor_gauss(b_lo, b_hi, quad_nodes)
    else:
        b_nodes, b_w = np.zeros((1, 0)), np.ones(1)
    b_shift = b_nodes @ E2.T                                     # (nb, dE)
    a_lo, a_hi = _projection_range(support, origin, E1)
    starts = _start_lattice(a_lo, a_hi, max(n_starts - 1, 1))
    nx, nb, ns = x.shape[0], b_nodes.shape[0], starts.shape[0] + 1

    # linearization at the chart origin, plus a lattice of starts
    J0 = np.asarray(F.d_y(U, origin[None, :]), dtype=float).reshape(dH, dE) @ E1
    F0 = np.asarray(F.eval(U, origin[None, :]), dtype=float).reshape(dH)
    a = np.empty((nx, nb, ns, dH))
    a[:, :, 0, :] = np.linalg.solve(J0, (x - F0).T).T[:, None, :]
    a[:, :, 1:, :] = starts[None, None, :, :]
    a, y, converged = _newton(F, U, np.repeat(x, nb * ns, axis=0), origin, E1,
                              np.tile(np.repeat(b_shift, ns, axis=0), (nx, 1)), a.reshape(-1, dH), a_lo, a_hi)
    a, y, converged = a.reshape(nx, nb, ns, dH), y.reshape(nx, nb, ns, dE), converged.reshape(nx, nb, ns)
    rescued = _warm_restart(F, U, x, origin, E1, b_shift, a, y, converged, a_lo, a_hi) if nb > 1 else 0

    # keep one root per cluster of starts
    keep = converged.copy()
    for j in range(1, ns):
        dist = np.linalg.norm(a[:, :, :j, :] - a[:, :, j:j + 1, :], axis=-1)
        dup = np.any((dist < DEDUP_RADIUS) & converged[:, :, :j], axis=-1)
        keep[:, :, j] &= ~dup

    in_support = support.contains(y.reshape(-1, dE), tol=1e-12).reshape(converged.shape)
    use = keep & in_support
    det = np.zeros(use.shape)
    rho = np.zeros(use.shape)
    weak_point = np.full((nx, dE), np.nan)
    if np.any(use):
        J_use = np.asarray(F.d_y(U, y[use]), dtype=float)
        sv = np.linalg.svd(J_use, compute_uv=False)[..., -1]
        if np.min(sv) < threshold:
            raise SurjectivityLost(f"{F.name}: D_yF singular value {np.min(sv):.3e} at a visited point")
        block = J_use @ E1
        det[use] = np.abs(np.linalg.det(block))
        rho[use] = np.asarray(lam.density(U, y[use]), dtype=float)
        if dE > dH and ref_block > 0:
            block_sv = np.full(use.shape, np.inf)
            block_sv[use] = np.linalg.svd(block, compute_uv=False)[..., -1]
            flat = block_sv.reshape(nx, -1)
            worst = flat.argmin(axis=1)
            weak = flat[np.arange(nx), worst] < 0.5 * ref_block
            weak_point[weak] = y.reshape(nx, -1, dE)[weak, worst[weak]]
    contrib = np.divide(rho, det, out=np.zeros(use.shape), where=use & (det > 0)).sum(axis=-1)   # (nx, nb)
    skipped = (~np.any(converged, axis=-1)) & np.any(in_support, axis=-1)
    return contrib @ b_w, skipped, rescued, weak_point


# ---------------- Pushforward density ---------------- #
def pushforward_density(F: RegularMap, lam: ParamDensityKernel, U, out_box: Box, out_cells,
                        quad_nodes: int = QUAD_NODES, sub_points: int = SUB_POINTS,
                        n_starts: int = NEWTON_STARTS, normalize: bool = True,
                        threshold: float = SURJECTIVITY_THRESHOLD) -> GridDensity:
    """
    Grid density of F(U, .)_* lambda(U, .) on out_box; diagnostics carry the mass defect,
    Newton skips, warm restarts and the number of re-charted output points.

    An output point whose fiber meets a restricted block below half its reference value is
    solved again in a chart whose E1 comes from the SVD of D_yF at the weakest point.
    """
    U = np.atleast_1d(np.asarray(U, dtype=float))
    dE, dH = F.dim_in, F.dim_out
    y_ref = lam.support.center
    J_ref = np.asarray(F.d_y(U, y_ref[None, :]), dtype=float).reshape(dH, dE)
    _, svals, Vt = np.linalg.svd(J_ref)
    if svals[-1] < threshold:
        raise SurjectivityLost(f"{F.name}: D_yF at the reference point has singular value {svals[-1]:.3e}")
    E1 = Vt[:dH].T                   # (dE, dH)
    E2 = Vt[dH:].T                   # (dE, dE - dH)
    ref_block = float(np.linalg.svd(J_ref @ E1, compute_uv=False)[-1])

    xs, sub_w = _cell_sub_points(out_box, out_cells, sub_points)
    n_cells, n_sub = xs.shape[0], xs.shape[1]
    x = xs.reshape(-1, dH)
    g, skipped, rescued, weak_at = _fiber_integral(F, lam, U, x, y_ref, E1, E2, quad_nodes, n_starts,
                                                   ref_block, threshold)
    recharted = np.flatnonzero(~np.isnan(weak_at[:, 0]))
    for i in recharted:
        Vt_w = np.linalg.svd(np.asarray(F.d_y(U, weak_at[i][None, :]), dtype=float).reshape(dH, dE))[2]
        g_i, skip_i, rescued_i, _ = _fiber_integral(F, lam, U, x[i:i + 1], weak_at[i], Vt_w[:dH].T, Vt_w[dH:].T,
                                                    quad_nodes, n_starts, 0.0, threshold)
        g[i], skipped[i] = g_i[0], skip_i[0]
        rescued += rescued_i
    if recharted.size:
        logger.info("%s: %d output points re-solved in a chart fitted at their weakest fiber point",
                    F.name, recharted.size)

    skip_frac = float(skipped.mean())
    if skip_frac > MAX_SKIP_FRACTION:
        raise NewtonDivergence(f"{F.name}: Newton failed at {skip_frac:.2%} of fiber points")
    if skipped.any():
        logger.info("%s: %d fiber points skipped (Newton did not converge)", F.name, int(skipped.sum()))

    cells = _cells_tuple(out_cells, out_box.dim)
    values = (g.reshape(n_cells, n_sub) @ sub_w).reshape(cells)
    out = GridDensity(out_box, cells, np.maximum(values, 0.0))
    mass = out.mass
    diag: Dict[str, float] = {
        "mass_before_normalization": mass,
        "mass_defect": abs(mass - 1.0),
        "newton_skips": float(skipped.sum()),
        "warm_restarts": float(rescued),
        "recharted_points": float(recharted.size),
        "fiber_nodes": float(skipped.shape[1]),
    }
    if normalize:
        return GridDensity(out_box, cells, out.values / mass, diag) if mass > 0 else out
    return GridDensity(out_box, cells, out.values, diag)


def image_map_apply(F: RegularMap, lam: ParamDensityKernel, nu: EmpiricalMeasure, out_box: Box,
                    out_cells, **kwargs) -> GridDensity:
    """Psi(nu) = sum_i w_i F(U_i, .)_* lambda(U_i, .)."""
    cells = _cells_tuple(out_cells, out_box.dim)
    acc = np.zeros(cells)
    for U, w in zip(nu.points, nu.weights):
        if w > 0:
            acc += w * pushforward_density(F, lam, U, out_box, cells, **kwargs).values
    return GridDensity(out_box, cells, acc)


def estimate_image_lipschitz(F: RegularMap, lam: ParamDensityKernel, param_box: Box, trials: int,
                             seed: int, out_box: Box, out_cells, param_cells=12, n_atoms: int = 3,
                             **kwargs) -> ImageLipschitzEstimate:
    """max over random (nu1, nu2) of ||Psi nu1 - Psi nu2||_var / ||nu1 - nu2||_L^*."""
    rng = np.random.default_rng(seed)
    cache: Dict[bytes, GridDensity] = {}
    cells = _cells_tuple(out_cells, out_box.dim)

    def psi(nu: EmpiricalMeasure) -> GridDensity:
        acc = np.zeros(cells)
        for U, w in zip(nu.points, nu.weights):
            key = U.tobytes()
            if key not in cache:
                cache[key] = pushforward_density(F, lam, U, out_box, cells, **kwargs)
            acc += w * cache[key].values
        return GridDensity(out_box, cells, acc)

    def draw() -> EmpiricalMeasure:
        pts = param_box.lo + param_box.widths * rng.random((n_atoms, param_box.dim))
        return EmpiricalMeasure.from_points(pts, param_box, seed=seed, weights=rng.dirichlet(np.ones(n_atoms)))

    best, best_pair, ratios = 0.0, None, []
    for _ in range(int(trials)):
        nu1, nu2 = draw(), draw()
        den = dual_lipschitz_distance(nu1, nu2, param_box, param_cells)
        if den <= 0:
            continue
        ratio = tv_distance(psi(nu1), psi(nu2)) / den
        ratios.append(ratio)
        if best_pair is None or ratio > best:
            best, best_pair = ratio, (nu1, nu2)
    return ImageLipschitzEstimate(float(best), best_pair, np.asarray(ratios), len(ratios))


# ---------------- Local-to-global diffeomorphism ---------------- #
def _injectivity_margin(fn: Callable, center: np.ndarray, radius: float, rng: np.random.Generator,
                        n_pairs: int) -> float:
    """Smallest |fn(a) - fn(b)| / |a - b| over random far and near pairs in B(center, radius)."""
    dim = center.size

    def in_ball(n):
        v = rng.normal(size=(n, dim))
        v /= np.linalg.norm(v, axis=-1, keepdims=True)
        return center + v * radius * rng.random((n, 1)) ** (1.0 / dim)

    half = n_pairs // 2
    a = in_ball(n_pairs)
    b = np.concatenate([in_ball(half), a[half:] + 1e-3 * radius * rng.normal(size=(n_pairs - half, dim))])
    sep = np.linalg.norm(a - b, axis=-1)
    ok = sep > 1e-12 * max(radius, 1.0)
    img = np.linalg.norm(np.asarray(fn(a[ok])) - np.asarray(fn(b[ok])), axis=-1)
    return float(np.min(img / sep[ok]))


def extend_local_diffeo(local: Callable, base_point, derivative_at_base, epsilon: float, seed: int = 0,
                        n_pairs: int = INJECTIVITY_PAIRS,
                        threshold: float = SURJECTIVITY_THRESHOLD) -> GlobalDiffeo:
    """
    Phi~(z) = Phi(z0) + (1 - chi) A (z - z0) + chi (Phi(z) - Phi(z0)),  chi = bump(|z - z0| / eps).
    Equals Phi on B(z0, eps/2) and the affine map outside B(z0, eps). eps is halved
    (at most BLEND_HALVINGS times) while the blend fails the injectivity check.
    """
    z0 = np.atleast_1d(np.asarray(base_point, dtype=float))
    A = np.atleast_2d(np.asarray(derivative_at_base, dtype=float))
    s_min = float(np.linalg.svd(A, compute_uv=False)[-1])
    if s_min <= threshold:
        raise NotLocallyInjective(f"derivative at the base point is singular (sigma_min {s_min:.3e})")
    margin = 1e-3 * s_min
    rng = np.random.default_rng(seed)
    local_margin = _injectivity_margin(local, z0, 2.0 * epsilon, rng, n_pairs)
    if local_margin < margin:
        raise NotLocallyInjective(f"local map folds on B(base, {2 * epsilon:g}) (quotient {local_margin:.3e})")
    eps = float(epsilon)
    for halving in range(BLEND_HALVINGS + 1):
        candidate = GlobalDiffeo(z0, eps, A, local, halving)
        blend_margin = _injectivity_margin(candidate, z0, 4.0 * eps, rng, n_pairs)
        if blend_margin >= margin:
            if halving:
                logger.info("extend_local_diffeo: epsilon halved %d times to %.4g", halving, eps)
            return candidate
        logger.info("extend_local_diffeo: blend not injective at eps=%.4g (quotient %.3e)", eps, blend_margin)
        eps *= 0.5
    raise EpsilonTooLarge(f"blend still folds after {BLEND_HALVINGS} halvings of epsilon")


__all__ = [
    "RegularMap",
    "ParamDensityKernel",
    "GlobalDiffeo",
    "ImageLipschitzEstimate",
    "bump",
    "pushforward_density",
    "image_map_apply",
    "estimate_image_lipschitz",
    "extend_local_diffeo",
]
