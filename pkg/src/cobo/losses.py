"""Latent-space regularizers, objective-value loss weighting and the joint training loss."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from . import diffcore as dc
from . import seqvae, surrogate
from .diffcore import Tensor


@dataclass
class Batch:
    latents: np.ndarray      # (N, n)
    objectives: np.ndarray   # (N,)
    sequences: np.ndarray | None = None  # (N, T)

    def __post_init__(self):
        self.latents = np.atleast_2d(np.asarray(self.latents, float))
        self.objectives = np.asarray(self.objectives, float).reshape(-1)
        if len(self.latents) != len(self.objectives):
            raise ValueError("latents and objectives differ in length")
        if self.sequences is not None:
            self.sequences = np.atleast_2d(np.asarray(self.sequences, np.int64))
            if len(self.sequences) != len(self.objectives):
                raise ValueError("sequences and objectives differ in length")

    def __len__(self):
        return len(self.objectives)


@dataclass
class WeightingConfig:
    quantile: float = 0.95
    sigma: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.quantile < 1.0:
            raise ValueError("quantile must lie in (0, 1)")
        if not self.sigma > 0.0:
            raise ValueError("sigma must be positive")


@dataclass
class LossCoefficients:
    c_lip: float = 10.0
    c_z: float = 0.1
    c_recon: float = 1.0
    c_kl: float = 0.1
    c_surr: float = 1.0

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ValueError(f"{k} must be >= 0")


def _need_pairs(n: int):
    if n < 2:
        raise ValueError(f"pairwise loss needs at least 2 points, got {n}")


def _upper_pairs(n: int):
    return np.triu_indices(n, k=1)


def pairwise_slopes(z, y) -> np.ndarray:
    """|y_i - y_j| / max(||z_i - z_j||, 1e-8) over unordered pairs i < j."""
    z = np.atleast_2d(np.asarray(z, float))
    y = np.asarray(y, float)
    i, j = _upper_pairs(len(y))
    dist = np.maximum(np.linalg.norm(z[i] - z[j], axis=1), dc.PDIST_EPS)
    return np.abs(y[i] - y[j]) / dist


def lipschitz_constant(batch: Batch) -> float:
    """Median slope over all unordered pairs; a constant for gradient purposes."""
    _need_pairs(len(batch))
    return float(np.median(pairwise_slopes(batch.latents, batch.objectives)))


def weight_lambda(y, yq: float, sigma: float):
    """P(Y > yq) for Y ~ N(y, sigma^2), i.e. Phi((y - yq) / sigma)."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    out = ndtr((np.asarray(y, float) - yq) / sigma)
    return float(out) if np.ndim(out) == 0 else out


def compute_yq(objectives, q: float) -> float:
    """Empirical q-quantile with linear interpolation between order statistics."""
    objectives = np.asarray(objectives, float)
    if objectives.size < 1:
        raise ValueError("need at least one objective value")
    return float(np.quantile(objectives, q))


def loss_lip_weighted_t(z: Tensor, y: np.ndarray, L: float, weights: np.ndarray) -> Tensor:
    n = z.shape[0]
    _need_pairs(n)
    y = np.asarray(y, float)
    w = np.sqrt(np.outer(weights, weights)) * np.triu(np.ones((n, n)), k=1)
    dy = np.abs(y[:, None] - y[None, :])
    slopes = dy / dc.pdist(z)
    return (dc.relu(slopes - L) * w).sum()


def loss_lip_weighted(batch: Batch, L: float, weights=None) -> float:
    """Sum over i < j of sqrt(w_i w_j) * max(0, slope_ij - L)."""
    w = np.ones(len(batch)) if weights is None else np.asarray(weights, float)
    return loss_lip_weighted_t(Tensor(batch.latents), batch.objectives, L, w).item()


def chi_mean_c(k: int) -> float:
    """E||U - V|| for independent standard normal k-vectors: 2 Gamma((k+1)/2) / Gamma(k/2)."""
    if int(k) != k or k < 1:
        raise ValueError(f"latent dimension must be a positive integer, got {k}")
    return 2.0 * math.exp(math.lgamma((k + 1) / 2) - math.lgamma(k / 2))


def loss_z_t(z: Tensor, c: float) -> Tensor:
    n = z.shape[0]
    _need_pairs(n)
    off = 1.0 - np.eye(n)
    mean_dist = (dc.pdist(z) * off).sum() * (1.0 / n ** 2)
    return dc.absolute(mean_dist - c)


def loss_z(batch: Batch, c: float) -> float:
    """|(1/N^2) sum_{i,j} ||z_i - z_j|| - c|, diagonal zeros included in the normalization."""
    return loss_z_t(Tensor(batch.latents), c).item()


def loss_recon_weighted(recon_losses, weights):
    if isinstance(recon_losses, Tensor):
        return (recon_losses * np.asarray(weights, float)).mean()
    r = np.asarray(recon_losses, float)
    w = np.asarray(weights, float)
    if r.shape != w.shape:
        raise ValueError(f"{r.shape[0] if r.ndim else 1} losses but {w.shape[0] if w.ndim else 1} weights")
    return float((r * w).mean())


# --- joint loss ------------------------------------------------------------------

@dataclass
class LossOptions:
    use_lip: bool = True
    use_z: bool = True
    use_weighting: bool = True
    standardize_y: bool = False
    sparse: bool = False
    yq: float | None = None  # defaults to the batch quantile
    lipschitz: float | None = None  # fixed L; defaults to the median slope of the current means


TERMS = ("lip", "z", "recon", "kl", "surr")


@dataclass
class CoboLoss:
    total: Tensor
    terms: dict[str, Tensor] = field(default_factory=dict)
    lipschitz: float = 0.0

    def breakdown(self) -> dict[str, float]:
        out = {k: (v.item() if isinstance(v, Tensor) else float(v)) for k, v in self.terms.items()}
        out["total"] = self.total.item()
        return out


def cobo_loss_t(vae_w: dict[str, Tensor], gp_w: dict[str, Tensor], batch: Batch,
                vae_meta: seqvae.VaeParams, coeffs: LossCoefficients, wcfg: WeightingConfig,
                eps: np.ndarray, opts: LossOptions | None = None) -> CoboLoss:
    """Coefficient-weighted sum of the weighted Lipschitz, latent-distance,
    weighted reconstruction, KL and surrogate terms.

    The regularizers and the surrogate act on encoder means; reconstruction
    uses the reparameterized sample built from ``eps``.
    """
    opts = opts or LossOptions()
    x = batch.sequences
    y = batch.objectives
    if opts.standardize_y:
        y = surrogate.standardize(y)[0]
    mean, logvar = seqvae.encoder_t(vae_w, seqvae.one_hot(x, vae_meta.vocab_size), vae_meta.latent_dim)
    z = seqvae.reparameterize_t(mean, logvar, eps)
    recon = seqvae.recon_nll_t(seqvae.decoder_t(vae_w, z), x, vae_meta.seq_len, vae_meta.vocab_size)

    if opts.use_weighting:
        yq = compute_yq(y, wcfg.quantile) if opts.yq is None else opts.yq
        weights = np.asarray(weight_lambda(y, yq, wcfg.sigma), float).reshape(-1)
    else:
        weights = np.ones(len(y))

    terms: dict[str, Tensor] = {}
    if opts.lipschitz is not None:
        L = float(opts.lipschitz)
    else:
        L = float(np.median(pairwise_slopes(mean.data, y))) if len(y) >= 2 else 0.0
    zero = Tensor(0.0)
    terms["lip"] = loss_lip_weighted_t(mean, y, L, weights) if opts.use_lip and coeffs.c_lip else zero
    terms["z"] = loss_z_t(mean, chi_mean_c(vae_meta.latent_dim)) if opts.use_z and coeffs.c_z else zero
    terms["recon"] = loss_recon_weighted(recon, weights)
    terms["kl"] = seqvae.kl_t(mean, logvar).mean()
    terms["surr"] = surrogate.surrogate_loss_t(gp_w, mean, y, opts.sparse) if coeffs.c_surr else zero

    # terms["recon"] is reported per position; the objective uses the sequence NLL
    total = (coeffs.c_lip * terms["lip"] + coeffs.c_z * terms["z"]
             + coeffs.c_recon * vae_meta.seq_len * terms["recon"]
             + coeffs.c_kl * terms["kl"] + coeffs.c_surr * terms["surr"])
    return CoboLoss(total, terms, L)


def loss_cobo(batch: Batch, vae: seqvae.VaeParams, gp: surrogate.GpState, coeffs: LossCoefficients,
              wcfg: WeightingConfig, eps: np.ndarray | None = None,
              opts: LossOptions | None = None) -> tuple[float, dict[str, float]]:
    """Joint loss value and per-term breakdown (unscaled terms plus ``total``)."""
    if eps is None:
        eps = np.zeros((len(batch), vae.latent_dim))
    opts = opts or LossOptions(sparse=gp.sparse)
    res = cobo_loss_t({k: Tensor(v) for k, v in vae.weights.items()},
                      {k: Tensor(v) for k, v in gp.params.items()}, batch, vae, coeffs, wcfg, eps, opts)
    return res.total.item(), res.breakdown()
