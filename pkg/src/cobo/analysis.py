"""Distance-correlation diagnostics, the correlation lower bound and its Monte Carlo check.

The bound: if D_Y <= L * D_Z for every pair then

    corr(D_Z, D_Y) >= ((sigma_Y^2 + mu_Y^2) / L - L * mu_Z^2) / sqrt(sigma_Z^2 * sigma_Y^2)

where D_Z, D_Y are latent and objective distances of i.i.d. pairs.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass
class CorrelationStats:
    mu_dz: float
    var_dz: float
    mu_dy: float
    var_dy: float
    pearson: float | None  # None when either distance set has zero variance
    n_pairs: int

    def row(self) -> dict:
        return asdict(self)


def pearson(a, b) -> float | None:
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    da, db = a - a.mean(), b - b.mean()
    va, vb = (da * da).mean(), (db * db).mean()
    if va <= 1e-300 or vb <= 1e-300:
        return None
    return float(np.clip((da * db).mean() / math.sqrt(va * vb), -1.0, 1.0))


def _pair_indices(n: int, max_pairs: int | None, rng: np.random.Generator | None):
    i, j = np.triu_indices(n, k=1)
    if max_pairs is not None and len(i) > max_pairs:
        rng = rng if rng is not None else np.random.default_rng(0)
        pick = np.sort(rng.choice(len(i), size=max_pairs, replace=False))
        i, j = i[pick], j[pick]
    return i, j


def stats_from_distances(dz, dy) -> CorrelationStats:
    dz, dy = np.asarray(dz, float), np.asarray(dy, float)
    return CorrelationStats(float(dz.mean()), float(dz.var()), float(dy.mean()), float(dy.var()),
                            pearson(dz, dy), int(dz.size))


def pairwise_stats(z, y, max_pairs: int | None = 100_000, rng: np.random.Generator | None = None) -> CorrelationStats:
    """Moments and Pearson correlation of (||z_i - z_j||, |y_i - y_j|) over pairs i < j."""
    z = np.atleast_2d(np.asarray(z, float))
    y = np.asarray(y, float)
    if len(y) < 3:
        raise ValueError(f"need at least 3 points, got {len(y)}")
    i, j = _pair_indices(len(y), max_pairs, rng)
    return stats_from_distances(np.linalg.norm(z[i] - z[j], axis=1), np.abs(y[i] - y[j]))


def corr_lower_bound(stats: CorrelationStats, L: float) -> float:
    if not L > 0:
        raise ValueError(f"Lipschitz constant must be positive, got {L}")
    if stats.var_dz <= 0 or stats.var_dy <= 0:
        raise ValueError("bound undefined for zero-variance distances")
    num = (stats.var_dy + stats.mu_dy ** 2) / L - L * stats.mu_dz ** 2
    return num / math.sqrt(stats.var_dz * stats.var_dy)


def zdist_summary(z) -> dict[str, float]:
    """10th, 25th, 50th, 75th and 90th percentiles of pairwise latent distances."""
    z = np.atleast_2d(np.asarray(z, float))
    if len(z) < 2:
        raise ValueError("need at least 2 points")
    i, j = np.triu_indices(len(z), k=1)
    q = np.quantile(np.linalg.norm(z[i] - z[j], axis=1), [0.1, 0.25, 0.5, 0.75, 0.9])
    return dict(zip(("p10", "q1", "median", "q3", "p90"), map(float, q)))


@dataclass
class Pca2d:
    points: np.ndarray        # (N, 2)
    components: np.ndarray    # (2, n)
    explained: np.ndarray     # (2,) fractions of total variance


def pca2d(z, iters: int = 200, tol: float = 1e-9) -> Pca2d:
    """Top-2 principal components by power iteration with deflation."""
    z = np.atleast_2d(np.asarray(z, float))
    if len(z) < 3:
        raise ValueError("need at least 3 points")
    x = z - z.mean(0)
    cov = x.T @ x / len(x)
    total = float(np.trace(cov))
    dim = cov.shape[0]
    comps, evals = [], []
    work = cov.copy()
    for k in range(2):
        if k >= dim:
            comps.append(np.zeros(dim))
            evals.append(0.0)
            continue
        # deterministic start vector with a component along every axis
        v = np.ones(dim) / math.sqrt(dim) + 1e-3 * np.arange(dim)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(iters):
            w = work @ v
            norm = np.linalg.norm(w)
            if norm <= 1e-14 * max(total, 1e-300):
                v, lam = np.zeros(dim), 0.0
                break
            w /= norm
            done = np.linalg.norm(w - v) < tol or np.linalg.norm(w + v) < tol
            v = w
            lam = float(v @ work @ v)
            if done:
                break
        if lam <= 1e-12 * max(total, 1e-300):
            v, lam = np.zeros(dim), 0.0
        if v.any() and v[np.argmax(np.abs(v))] < 0:
            v = -v
        comps.append(v)
        evals.append(lam)
        work = work - lam * np.outer(v, v)
    comps = np.array(comps)
    explained = np.array(evals) / total if total > 0 else np.zeros(2)
    return Pca2d(x @ comps.T, comps, explained)


# --- Monte Carlo verification of the bound --------------------------------------

def _linear(rng):
    a = rng.uniform(0.5, 3.0) * rng.choice([-1.0, 1.0])
    return (lambda z: a * z), abs(a)


def _piecewise_linear(rng):
    knots = np.sort(np.concatenate([[0.0, 1.0], rng.uniform(0, 1, rng.integers(2, 8))]))
    slopes = rng.uniform(-1.0, 1.0, len(knots) - 1)
    slopes[rng.integers(len(slopes))] = rng.choice([-1.0, 1.0])
    values = np.concatenate([[0.0], np.cumsum(slopes * np.diff(knots))])
    return (lambda z: np.interp(z, knots, values)), float(np.abs(slopes).max())


def _clipped_quadratic(rng):
    a = rng.uniform(0.5, 3.0)
    cap = rng.uniform(0.1, 1.0) * a
    z_cap = min(1.0, math.sqrt(cap / a))
    return (lambda z: np.minimum(a * z * z, cap)), 2.0 * a * z_cap


FAMILIES = {"linear": _linear, "piecewise_linear": _piecewise_linear, "clipped_quadratic": _clipped_quadratic}


@dataclass
class BoundConfig:
    families: list[str] = field(default_factory=lambda: list(FAMILIES))
    trials: int = 100
    pairs: int = 100_000
    seed: int = 0
    eps: float = 0.02
    lipschitz_scale: float = 1.0  # < 1 deliberately understates L (negative control)


@dataclass
class BoundReport:
    rows: list[dict]

    @property
    def pass_rate(self) -> float:
        return float(np.mean([r["satisfied"] for r in self.rows])) if self.rows else 1.0

    @property
    def passed(self) -> bool:
        return all(r["satisfied"] for r in self.rows)

    def by_family(self) -> dict[str, dict]:
        out = {}
        for r in self.rows:
            f = out.setdefault(r["family"], {"trials": 0, "satisfied": 0, "max_gap": -np.inf})
            f["trials"] += 1
            f["satisfied"] += int(r["satisfied"])
            f["max_gap"] = max(f["max_gap"], abs(r["pearson"] - r["bound"]))
        return out


def bound_experiment(cfg: BoundConfig | None = None) -> BoundReport:
    """Empirical Pearson vs the lower bound for random L-Lipschitz functions of Z ~ U[0, 1]."""
    cfg = cfg or BoundConfig()
    rows = []
    for fi, family in enumerate(cfg.families):
        if family not in FAMILIES:
            raise ValueError(f"unknown function family {family!r}; choose from {sorted(FAMILIES)}")
        for trial in range(cfg.trials):
            rng = np.random.default_rng([cfg.seed, fi, trial])
            f, lip = FAMILIES[family](rng)
            z1, z2 = rng.uniform(0, 1, cfg.pairs), rng.uniform(0, 1, cfg.pairs)
            st = stats_from_distances(np.abs(z1 - z2), np.abs(f(z1) - f(z2)))
            L = lip * cfg.lipschitz_scale
            bound = corr_lower_bound(st, L)
            r = st.pearson
            rows.append({"family": family, "trial": trial, "L": L, **asdict(st), "bound": bound,
                         "satisfied": bool(r is not None and r >= bound - cfg.eps)})
    return BoundReport(rows)
