"""Small generators used by the test-suite and the acceptance harness."""
from __future__ import annotations

import numpy as np

from .cp_engine import FeatureSplit, Permutation
from .data import Dataset


def toy_domain() -> tuple[Dataset, FeatureSplit, Permutation]:
    """Five points on the diagonal: 2x(0,0)+, 2x(1,1)+, 1x(-1,-1)-.

    The crossover keeps x and exchanges y between each (0,0) and a (1,1).
    """
    X = np.array([[0, 0], [0, 0], [1, 1], [1, 1], [-1, -1]], dtype=float)
    y = np.array([1, 1, 1, 1, -1])
    ds = Dataset(X, y, ("x", "y"))
    return ds, FeatureSplit((0,), (1,)), Permutation([2, 3, 0, 1, 4])


def random_dataset(m: int, d: int, rng: np.random.Generator, m_pos: int | None = None) -> Dataset:
    if m_pos is None:
        m_pos = int(rng.integers(1, m))
    y = np.r_[np.ones(m_pos, dtype=int), -np.ones(m - m_pos, dtype=int)]
    X = rng.normal(size=(m, d)) + 0.7 * y[:, None] * rng.normal(size=d)
    return Dataset(X, y, tuple(f"x{j}" for j in range(d)))


def dependent_pair(m: int, seed=None, noise: float = 0.4, label_noise: float = 2.0) -> Dataset:
    """Two strongly dependent features; the label follows their sum loosely."""
    rng = np.random.default_rng(seed)
    a = rng.normal(size=m)
    b = a + noise * rng.normal(size=m)
    y = np.where(a + b + label_noise * rng.normal(size=m) > 0, 1, -1)
    if y.min() == y.max():
        y[0] = -y[0]
    return Dataset.from_arrays(np.c_[a, b], y, ("u", "v"))


def two_spirals(m: int, seed=None, noise: float = 0.3, turns: float = 1.0) -> Dataset:
    """Interleaved spirals in the plane plus a constant third coordinate."""
    rng = np.random.default_rng(seed)
    y = np.where(np.arange(m) < m // 2, 1, -1)
    t = np.sqrt(rng.uniform(0.05, 1.0, size=m)) * turns * 2 * np.pi
    r = t / (turns * 2 * np.pi) * 3.0
    phase = np.where(y == 1, 0.0, np.pi)
    X = np.c_[r * np.cos(t + phase), r * np.sin(t + phase), np.zeros(m)]
    X[:, :2] += noise * rng.normal(size=(m, 2))
    return Dataset.from_arrays(X, y, ("x", "y", "z"))


def cm_model(m: int, seed=None, a: float = 0.6, b: float = 0.8, c: float = 0.4,
             e: float = 0.7, label_signal: float = 0.4) -> Dataset:
    """Chain x1 -> x2 -> x3 with a hidden x4 feeding x2 and (negatively) x3.

    The label depends weakly on x1. Conditioning on the collider x2 links x1 and
    x3 through x4, which gives a positive partial correlation rho_{(13).2}.
    """
    rng = np.random.default_rng(seed)
    x1 = rng.normal(size=m)
    x4 = rng.normal(size=m)
    x2 = a * x1 + b * x4 + 0.5 * rng.normal(size=m)
    x3 = c * x2 - e * x4 + 0.5 * rng.normal(size=m)
    y = np.where(label_signal * x1 + rng.normal(size=m) > 0, 1, -1)
    if y.min() == y.max():
        y[0] = -y[0]
    return Dataset.from_arrays(np.c_[x1, x2, x3], y, ("x1", "x2", "x3"))
