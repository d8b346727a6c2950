"""Dense VAE over one-hot encoded fixed-length token sequences.

Encoder: one-hot flatten -> dense(h) -> tanh -> dense(2n) split into mean and
log-variance. Decoder: dense(h) -> tanh -> dense(T*V) logits. Log-variances are
clamped to [-6, 6].
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

LOGVAR_MIN, LOGVAR_MAX = -6.0, 6.0
CHECKPOINT_FORMAT = "cobo-vae"
CHECKPOINT_VERSION = 1
PARAM_NAMES = ("enc_w1", "enc_b1", "enc_w2", "enc_b2", "dec_w1", "dec_b1", "dec_w2", "dec_b2")


@dataclass
class VaeParams:
    seq_len: int
    vocab_size: int
    latent_dim: int
    hidden: int
    weights: dict[str, np.ndarray]

    def shapes(self) -> dict[str, tuple[int, ...]]:
        d_in = self.seq_len * self.vocab_size
        h, n = self.hidden, self.latent_dim
        return {"enc_w1": (d_in, h), "enc_b1": (h,), "enc_w2": (h, 2 * n), "enc_b2": (2 * n,),
                "dec_w1": (n, h), "dec_b1": (h,), "dec_w2": (h, d_in), "dec_b2": (d_in,)}

    def replace(self, weights: dict[str, np.ndarray]) -> "VaeParams":
        return VaeParams(self.seq_len, self.vocab_size, self.latent_dim, self.hidden,
                         {k: np.array(v, dtype=np.float64) for k, v in weights.items()})

    def copy(self) -> "VaeParams":
        return self.replace(self.weights)


def init_vae(seq_len: int, vocab_size: int, latent_dim: int = 8, hidden: int = 64,
             rng: np.random.Generator | None = None, zero: bool = False) -> VaeParams:
    p = VaeParams(seq_len, vocab_size, latent_dim, hidden, {})
    rng = rng if rng is not None else np.random.default_rng(0)
    for name, shape in p.shapes().items():
        if zero or len(shape) == 1:
            p.weights[name] = np.zeros(shape)
        else:
            p.weights[name] = rng.normal(0.0, np.sqrt(1.0 / shape[0]), shape)
    return p


def one_hot(x, vocab_size: int) -> np.ndarray:
    """(N, T) token indices -> (N, T*V) one-hot rows."""
    x = np.atleast_2d(np.asarray(x, dtype=np.int64))
    if x.size and (x.min() < 0 or x.max() >= vocab_size):
        raise ValueError(f"token index outside [0, {vocab_size})")
    out = np.zeros(x.shape + (vocab_size,))
    np.put_along_axis(out, x[..., None], 1.0, axis=-1)
    return out.reshape(x.shape[0], -1)


# --- differentiable network pieces -------------------------------------------

def encoder_t(w: dict[str, Tensor], onehot, latent_dim: int) -> tuple[Tensor, Tensor]:
    h = dc.tanh(dc.as_tensor(onehot) @ w["enc_w1"] + w["enc_b1"])
    out = h @ w["enc_w2"] + w["enc_b2"]
    mean = out[:, :latent_dim]
    logvar = dc.clip(out[:, latent_dim:], LOGVAR_MIN, LOGVAR_MAX)
    return mean, logvar


def decoder_t(w: dict[str, Tensor], z) -> Tensor:
    h = dc.tanh(dc.as_tensor(z) @ w["dec_w1"] + w["dec_b1"])
    return h @ w["dec_w2"] + w["dec_b2"]


def reparameterize_t(mean: Tensor, logvar: Tensor, eps: np.ndarray) -> Tensor:
    return mean + dc.exp(logvar * 0.5) * eps


def recon_nll_t(logits: Tensor, x: np.ndarray, seq_len: int, vocab_size: int) -> Tensor:
    """Per-sequence mean over positions of the categorical negative log-likelihood, shape (N,)."""
    x = np.atleast_2d(x)
    n = x.shape[0]
    logp = dc.log_softmax(logits.reshape(n * seq_len, vocab_size), axis=-1)
    picked = logp[np.arange(n * seq_len), x.reshape(-1)]
    return -picked.reshape(n, seq_len).mean(axis=1)


def kl_t(mean: Tensor, logvar: Tensor) -> Tensor:
    """Per-sample KL(N(mean, exp(logvar)) || N(0, I)), shape (N,)."""
    return 0.5 * (dc.exp(logvar) + mean * mean - 1.0 - logvar).sum(axis=-1)


def _tensors(params: VaeParams, requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad) for k, v in params.weights.items()}


# --- numpy-facing API -------------------------------------------------------------

def encode(params: VaeParams, x) -> tuple[np.ndarray, np.ndarray]:
    """Encoder mean and clamped log-variance. Accepts one sequence (T,) or a batch (N, T)."""
    x = np.asarray(x, dtype=np.int64)
    single = x.ndim == 1
    if x.shape[-1] != params.seq_len:
        raise ValueError(f"expected sequences of length {params.seq_len}, got {x.shape[-1]}")
    mean, logvar = encoder_t(_tensors(params), one_hot(x, params.vocab_size), params.latent_dim)
    if single:
        return mean.data[0], logvar.data[0]
    return mean.data, logvar.data


def reparameterize(mean, logvar, rng: np.random.Generator) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64)
    logvar = np.clip(np.asarray(logvar, dtype=np.float64), LOGVAR_MIN, LOGVAR_MAX)
    if mean.shape != logvar.shape:
        raise ValueError(f"mean shape {mean.shape} != logvar shape {logvar.shape}")
    return mean + np.exp(0.5 * logvar) * rng.standard_normal(mean.shape)


def decode_logits(params: VaeParams, z) -> np.ndarray:
    """Logits of shape (T, V) for one latent vector or (N, T, V) for a batch."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    if z.shape[-1] != params.latent_dim:
        raise ValueError(f"expected latent dimension {params.latent_dim}, got {z.shape[-1]}")
    logits = decoder_t(_tensors(params), np.atleast_2d(z)).data
    logits = logits.reshape(-1, params.seq_len, params.vocab_size)
    return logits[0] if single else logits


def decode_map(params: VaeParams, z) -> np.ndarray:
    """Per-position argmax; ties go to the lowest token index."""
    return np.argmax(decode_logits(params, z), axis=-1).astype(np.int64)


def loss_recon(params: VaeParams, x, z) -> float:
    x = np.atleast_2d(np.asarray(x, dtype=np.int64))
    logits = decoder_t(_tensors(params), np.atleast_2d(z))
    return float(recon_nll_t(logits, x, params.seq_len, params.vocab_size).data.mean())


def loss_kl(mean, logvar) -> float:
    mean = np.atleast_2d(mean)
    logvar = np.clip(np.atleast_2d(logvar), LOGVAR_MIN, LOGVAR_MAX)
    return float(kl_t(Tensor(mean), Tensor(logvar)).data.mean())


def elbo_loss_t(w: dict[str, Tensor], x: np.ndarray, eps: np.ndarray, meta: VaeParams,
                kl_coef: float = 0.1) -> Tensor:
    mean, logvar = encoder_t(w, one_hot(x, meta.vocab_size), meta.latent_dim)
    z = reparameterize_t(mean, logvar, eps)
    recon = recon_nll_t(decoder_t(w, z), x, meta.seq_len, meta.vocab_size)
    # sequence log-likelihood (sum over positions), not the per-position mean
    return meta.seq_len * recon.mean() + kl_coef * kl_t(mean, logvar).mean()


def pretrain(params: VaeParams, corpus, rng: np.random.Generator, epochs: int = 20,
             batch_size: int = 64, lr: float = 3e-3, kl_coef: float = 0.1) -> tuple[VaeParams, list[float]]:
    """Plain ELBO pretraining with Adam; returns new params and the per-epoch mean loss."""
    data = np.asarray(corpus, dtype=np.int64)
    weights = {k: v.copy() for k, v in params.weights.items()}
    opt = dc.Adam(lr)
    trace = []
    for _ in range(epochs):
        order = rng.permutation(len(data))
        losses = []
        for start in range(0, len(data), batch_size):
            xb = data[order[start:start + batch_size]]
            eps = rng.standard_normal((len(xb), params.latent_dim))
            loss, grads = dc.value_and_grad(lambda w: elbo_loss_t(w, xb, eps, params, kl_coef), weights)
            weights = opt.step(weights, grads)
            losses.append(loss)
        trace.append(float(np.mean(losses)))
    return params.replace(weights), trace


# --- checkpoints ----------------------------------------------------------------

def vae_to_dict(params: VaeParams) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "seq_len": params.seq_len,
        "vocab_size": params.vocab_size,
        "latent_dim": params.latent_dim,
        "hidden": params.hidden,
        "tensors": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
                    for k, v in params.weights.items()},
    }


def vae_from_dict(d: dict) -> VaeParams:
    if d.get("format") != CHECKPOINT_FORMAT or d.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"not a {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION} checkpoint")
    p = VaeParams(d["seq_len"], d["vocab_size"], d["latent_dim"], d["hidden"], {})
    expected = p.shapes()
    for name in PARAM_NAMES:
        t = d["tensors"][name]
        arr = np.array(t["data"], dtype=np.float64).reshape(t["shape"])
        if arr.shape != expected[name]:
            raise ValueError(f"checkpoint tensor {name} has shape {arr.shape}, expected {expected[name]}")
        p.weights[name] = arr
    return p


def save_vae(params: VaeParams, path) -> None:
    Path(path).write_text(json.dumps(vae_to_dict(params)))


def load_vae(path) -> VaeParams:
    return vae_from_dict(json.loads(Path(path).read_text()))
