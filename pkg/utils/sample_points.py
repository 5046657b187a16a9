# utils/sample_points.py
"""Deterministic point sets: lattice/extremal points plus seeded random points."""
import itertools

import numpy as np

# ---- Config ----
LATTICE_PER_AXIS = 9
RANDOM_POINTS = 256


def lattice(lo, hi, per_axis: int = LATTICE_PER_AXIS) -> np.ndarray:
    """Tensor lattice including both endpoints of every axis."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    axes = [np.linspace(a, b, per_axis) for a, b in zip(lo, hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def corners(lo, hi) -> np.ndarray:
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    return np.array([[hi[i] if bit else lo[i] for i, bit in enumerate(bits)]
                     for bits in itertools.product((0, 1), repeat=lo.size)])


def box_points(lo, hi, n_random: int = RANDOM_POINTS, seed: int = 0,
               per_axis: int = LATTICE_PER_AXIS) -> np.ndarray:
    """Corners, lattice and uniform random points of the box [lo, hi]."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    rng = np.random.default_rng(seed)
    pts = [corners(lo, hi), lattice(lo, hi, per_axis)]
    if n_random > 0:
        pts.append(lo + (hi - lo) * rng.random((int(n_random), lo.size)))
    return np.unique(np.concatenate(pts, axis=0), axis=0)


def ball_points(center, radius: float, lo, hi, n_random: int = RANDOM_POINTS, seed: int = 0,
                per_axis: int = LATTICE_PER_AXIS) -> np.ndarray:
    """Points of the closed ball B(center, radius) intersected with the box [lo, hi]."""
    center = np.asarray(center, dtype=float)
    lo = np.maximum(np.asarray(lo, dtype=float), center - radius)
    hi = np.minimum(np.asarray(hi, dtype=float), center + radius)
    pts = box_points(lo, hi, n_random=n_random, seed=seed, per_axis=per_axis)
    keep = np.linalg.norm(pts - center, axis=-1) <= radius * (1 + 1e-12)
    pts = pts[keep]
    if pts.shape[0] == 0:
        pts = np.clip(center, lo, hi)[None, :]
    return pts


def lattice_spacing(lo, hi, per_axis: int = LATTICE_PER_AXIS) -> float:
    """Largest distance from a point of the box to the nearest lattice node."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    step = (hi - lo) / max(per_axis - 1, 1)
    return float(0.5 * np.linalg.norm(step))


__all__ = ["lattice", "corners", "box_points", "ball_points", "lattice_spacing",
           "LATTICE_PER_AXIS", "RANDOM_POINTS"]
