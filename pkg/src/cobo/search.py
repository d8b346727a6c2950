"""Trust-region candidate generation, Thompson-sampling selection and recoordination."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import seqvae, surrogate


@dataclass(frozen=True)
class TrustRegionState:
    center: np.ndarray
    length: float = 0.8
    success_count: int = 0
    failure_count: int = 0
    success_tolerance: int = 3
    failure_tolerance: int = 4
    length_min: float = 0.5 ** 7
    length_max: float = 1.6
    length_init: float = 0.8
    restart_required: bool = False

    @classmethod
    def create(cls, center, dim: int | None = None, **kw) -> "TrustRegionState":
        center = np.asarray(center, float)
        dim = dim or center.shape[0]
        kw.setdefault("failure_tolerance", max(4, dim))
        length = kw.pop("length", kw.get("length_init", 0.8))
        kw.setdefault("length_init", length)
        return cls(center=center, length=length, **kw)

    def restarted(self, center) -> "TrustRegionState":
        return replace(self, center=np.asarray(center, float), length=self.length_init,
                       success_count=0, failure_count=0, restart_required=False)


def tr_update(tr: TrustRegionState, improved: bool) -> TrustRegionState:
    """Success/failure bookkeeping: double after ``success_tolerance`` consecutive
    successes (capped at ``length_max``), halve after ``failure_tolerance``
    consecutive failures. Falling below ``length_min`` sets ``restart_required``.
    """
    if improved:
        succ, fail = tr.success_count + 1, 0
    else:
        succ, fail = 0, tr.failure_count + 1
    length = tr.length
    if succ == tr.success_tolerance:
        length, succ = min(2.0 * length, tr.length_max), 0
    elif fail == tr.failure_tolerance:
        length, fail = length / 2.0, 0
    return replace(tr, length=length, success_count=succ, failure_count=fail,
                   restart_required=length < tr.length_min)


def tr_widen(tr: TrustRegionState) -> TrustRegionState:
    """Double the side (capped at ``length_max``) after a step whose candidates all decoded to known inputs."""
    return replace(tr, length=min(2.0 * tr.length, tr.length_max), success_count=0, failure_count=0)


def generate_candidates(tr: TrustRegionState, count: int, rng: np.random.Generator,
                        lengthscales=None, scale=None) -> np.ndarray:
    """Uniform draws in the box center +/- length * w_d * s_d / 2 with w = ls / mean(ls).

    ``scale`` (default 1) expresses the side in units of a per-dimension spread,
    e.g. the standard deviation of the current latent dataset.
    """
    if count < 1:
        raise ValueError("need at least one candidate")
    dim = tr.center.shape[0]
    ls = np.ones(dim) if lengthscales is None else np.asarray(lengthscales, float)
    s = np.ones(dim) if scale is None else np.asarray(scale, float)
    half = 0.5 * tr.length * s * ls / ls.mean()
    lo, hi = tr.center - half, tr.center + half
    u = rng.random((count, dim))
    return np.clip(lo + u * (hi - lo), lo, hi)


def thompson_select(gp: surrogate.GpState, candidates: np.ndarray, batch: int, rng: np.random.Generator,
                       max_redraws: int = 10, return_indices: bool = False) -> np.ndarray:
    """Pick ``batch`` candidates, each the argmax of an independent posterior draw.

    A draw whose argmax was already chosen is redrawn up to ``max_redraws``
    times; after that the duplicate is kept.
    """
    candidates = np.atleast_2d(candidates)
    k = len(candidates)
    if not 1 <= batch <= k:
        raise ValueError(f"batch size {batch} must lie in [1, {k}]")
    if k == 1:
        return np.zeros(batch, dtype=int) if return_indices else candidates.repeat(batch, axis=0)
    draw = surrogate.posterior_sampler(gp, candidates)
    chosen: list[int] = []
    for _ in range(batch):
        for attempt in range(max_redraws + 1):
            idx = int(np.argmax(draw(rng)[0]))
            if idx not in chosen or attempt == max_redraws:
                break
        chosen.append(idx)
    return np.array(chosen) if return_indices else candidates[chosen]


def tr_recoordinate(tr: TrustRegionState, z_star, vae: seqvae.VaeParams) -> TrustRegionState:
    """Re-centre at the encoder mean of the decoded incumbent under the updated VAE."""
    x_hat = seqvae.decode_map(vae, np.asarray(z_star, float))
    center, _ = seqvae.encode(vae, x_hat)
    return replace(tr, center=center)
