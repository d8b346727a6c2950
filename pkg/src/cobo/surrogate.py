"""Gaussian-process surrogate over latent space with a deep-kernel feature map.

Latents pass through a small tanh network (the DKL feature map) before an ARD
RBF kernel. Targets are standardized over the current training set; every
public prediction is returned on the original scale.

Two likelihoods are available:

* exact GP marginal likelihood, used below ``exact_cap`` points;
* the collapsed variational bound with M inducing points in feature space,
  evaluated in O(N M^2) through the Woodbury identity.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

from pathlib import Path

import numpy as np
from scipy import linalg as sla

from . import diffcore as dc
from .diffcore import Tensor

JITTER_START, JITTER_MAX = 1e-8, 1e-2
LOG_SN2_MIN = math.log(1e-6)
LOG_LS_RANGE = (-5.0, 5.0)
FULL_COV_MAX = 256
LOG2PI = math.log(2 * math.pi)


class CholeskyError(np.linalg.LinAlgError):
    pass


def safe_cholesky(K: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``K``, adding jitter 1e-8, 1e-7, ... 1e-2 as needed.

    The unjittered matrix is tried first.
    """
    n = K.shape[0]
    jitter = 0.0
    while True:
        try:
            return np.linalg.cholesky(K + jitter * np.eye(n)), jitter
        except np.linalg.LinAlgError:
            jitter = JITTER_START if jitter == 0.0 else jitter * 10
            if jitter > JITTER_MAX * (1 + 1e-9):
                raise CholeskyError(f"kernel matrix not positive definite even with jitter {JITTER_MAX}")


@dataclass
class GpState:
    params: dict[str, np.ndarray]
    latent_dim: int
    train_z: np.ndarray | None = None
    train_y: np.ndarray | None = None
    y_mean: float = 0.0
    y_std: float = 1.0
    exact_cap: int = 512
    cache: dict = field(default_factory=dict, repr=False)

    @property
    def sparse(self) -> bool:
        return "inducing" in self.params

    @property
    def use_dkl(self) -> bool:
        return "dkl_w1" in self.params

    @property
    def lengthscales(self) -> np.ndarray:
        return np.exp(self.params["log_ls"])

    @property
    def signal_var(self) -> float:
        return float(np.exp(self.params["log_sf2"]))

    @property
    def noise_var(self) -> float:
        return float(np.exp(self.params["log_sn2"]))

    def kernel_params(self) -> dict[str, np.ndarray]:
        return {k: self.params[k] for k in ("log_ls", "log_sf2", "log_sn2")}


def init_gp(latent_dim: int, rng: np.random.Generator | None = None, use_dkl: bool = True,
            hidden: int = 32, feature_dim: int = 8, lengthscale: float = 1.0,
            signal_var: float = 1.0, noise_var: float = 0.1, exact_cap: int = 512) -> GpState:
    rng = rng if rng is not None else np.random.default_rng(0)
    d = feature_dim if use_dkl else latent_dim
    params = {
        "log_ls": np.full(d, math.log(lengthscale)),
        "log_sf2": np.array(math.log(signal_var)),
        "log_sn2": np.array(math.log(noise_var)) if noise_var > 0 else np.array(-np.inf),
    }
    if use_dkl:
        params["dkl_w1"] = rng.normal(0.0, math.sqrt(1.0 / latent_dim), (latent_dim, hidden))
        params["dkl_b1"] = np.zeros(hidden)
        params["dkl_w2"] = rng.normal(0.0, math.sqrt(1.0 / hidden), (hidden, feature_dim))
        params["dkl_b2"] = np.zeros(feature_dim)
    return GpState(params, latent_dim, exact_cap=exact_cap)


def with_inducing(state: GpState, z: np.ndarray, rng: np.random.Generator, m: int = 64) -> GpState:
    """Switch to the sparse likelihood, placing min(m, N) inducing points at random training features."""
    feats = features(state, z)
    idx = rng.choice(len(feats), size=min(m, len(feats)), replace=False)
    params = dict(state.params, inducing=feats[np.sort(idx)].copy())
    return replace(state, params=params, cache={})


# --- kernels ----------------------------------------------------------------------

def rbf_kernel(a, b, kp: dict) -> float:
    """Single kernel value k(a, b) = sf2 * exp(-0.5 * sum(((a - b) / ls)^2))."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.shape != b.shape:
        raise ValueError(f"kernel inputs differ in shape: {a.shape} vs {b.shape}")
    ls = np.exp(kp["log_ls"])
    return float(np.exp(kp["log_sf2"]) * np.exp(-0.5 * np.sum(((a - b) / ls) ** 2)))


def kernel_matrix(A: np.ndarray, B: np.ndarray, kp: dict) -> np.ndarray:
    ls = np.exp(kp["log_ls"])
    a, b = A / ls, B / ls
    d2 = np.maximum((a ** 2).sum(1)[:, None] + (b ** 2).sum(1)[None, :] - 2 * a @ b.T, 0.0)
    return float(np.exp(kp["log_sf2"])) * np.exp(-0.5 * d2)


def features_t(p: dict[str, Tensor], z) -> Tensor:
    z = dc.as_tensor(z)
    if "dkl_w1" not in p:
        return z
    return dc.tanh(z @ p["dkl_w1"] + p["dkl_b1"]) @ p["dkl_w2"] + p["dkl_b2"]


def kernel_t(p: dict[str, Tensor], A: Tensor, B: Tensor) -> Tensor:
    ls = dc.exp(p["log_ls"])
    return dc.exp(p["log_sf2"]) * dc.exp(-0.5 * dc.sqdist(A / ls, B / ls))


def features(state: GpState, z) -> np.ndarray:
    z = np.atleast_2d(np.asarray(z, float))
    if not state.use_dkl:
        return z
    p = state.params
    return np.tanh(z @ p["dkl_w1"] + p["dkl_b1"]) @ p["dkl_w2"] + p["dkl_b2"]


# --- likelihoods -----------------------------------------------------------------

def _jittered(K: Tensor) -> Tensor:
    L, jitter = safe_cholesky(K.data)
    out = K + jitter * np.eye(K.shape[0]) if jitter else K
    dc.remember_factor(out, L)
    return out


def exact_nll_t(p: dict[str, Tensor], z, y_std: np.ndarray) -> Tensor:
    """Negative exact marginal log-likelihood of standardized targets."""
    F = features_t(p, z)
    n = F.shape[0]
    K = _jittered(kernel_t(p, F, F) + dc.exp(p["log_sn2"]) * np.eye(n))
    alpha = dc.solve_spd(K, Tensor(y_std))
    return 0.5 * (alpha * y_std).sum() + 0.5 * dc.logdet_spd(K) + 0.5 * n * LOG2PI


def sparse_nll_t(p: dict[str, Tensor], z, y_std: np.ndarray) -> Tensor:
    """Negative collapsed variational bound with inducing features ``p['inducing']``.

    -log N(y | 0, Q + s I) + tr(K - Q) / (2 s), Q = K_fu K_uu^-1 K_uf, via Woodbury.
    """
    F = features_t(p, z)
    U = p["inducing"]
    n, m = F.shape[0], U.shape[0]
    sn2 = dc.exp(p["log_sn2"])
    sf2 = dc.exp(p["log_sf2"])
    Kuu = _jittered(kernel_t(p, U, U))
    Kuf = kernel_t(p, U, F)
    A = _jittered(Kuu + (Kuf @ Kuf.T) / sn2)
    b = Kuf @ y_std
    quad = (float(y_std @ y_std) - (b * dc.solve_spd(A, b)).sum() / sn2) / sn2
    logdet = dc.logdet_spd(A) - dc.logdet_spd(Kuu) + n * dc.log(sn2)
    trace_q = (Kuf * dc.solve_spd(Kuu, Kuf)).sum()
    return 0.5 * quad + 0.5 * logdet + 0.5 * n * LOG2PI + 0.5 * (n * sf2 - trace_q) / sn2


def standardize(y) -> tuple[np.ndarray, float, float]:
    y = np.asarray(y, float)
    mu = float(y.mean())
    sd = float(y.std())
    if not sd > 1e-12:
        sd = 1.0
    return (y - mu) / sd, mu, sd


def surrogate_loss_t(p: dict[str, Tensor], z, y, sparse: bool) -> Tensor:
    """Per-point negative (approximate) marginal likelihood; this is the surrogate term of the joint loss."""
    ys, _, _ = standardize(y)
    nll = sparse_nll_t(p, z, ys) if sparse else exact_nll_t(p, z, ys)
    return nll * (1.0 / len(ys))


def gp_nll(state: GpState, z, y, sparse: bool | None = None) -> float:
    """Total negative (approximate) log marginal likelihood of ``(z, y)`` under ``state``."""
    sparse = state.sparse if sparse is None else sparse
    ys, _, _ = standardize(y)
    p = {k: Tensor(v) for k, v in state.params.items()}
    fn = sparse_nll_t if sparse else exact_nll_t
    return fn(p, np.atleast_2d(z), ys).item()


sparse_gp_nll = gp_nll


# --- conditioning and prediction -------------------------------------------------

def condition(state: GpState, z, y) -> GpState:
    """Attach training data and cache the factorizations used for prediction."""
    z = np.atleast_2d(np.asarray(z, float))
    y = np.asarray(y, float)
    if len(z) == 0:
        raise ValueError("cannot condition a GP on an empty training set")
    if not state.sparse and len(z) > state.exact_cap:
        raise ValueError(f"{len(z)} points exceed the exact-GP cap of {state.exact_cap}; use inducing points")
    ys, mu, sd = standardize(y)
    kp = state.kernel_params()
    F = features(state, z)
    cache = {"F": F, "ys": ys}
    if state.sparse:
        U = state.params["inducing"]
        Luu, _ = safe_cholesky(kernel_matrix(U, U, kp))
        Kuf = kernel_matrix(U, F, kp)
        LA, _ = safe_cholesky(Luu @ Luu.T + Kuf @ Kuf.T / state.noise_var)
        cache.update(Luu=Luu, LA=LA, w=sla.cho_solve((LA, True), Kuf @ ys) / state.noise_var)
    else:
        L, _ = safe_cholesky(kernel_matrix(F, F, kp) + state.noise_var * np.eye(len(F)))
        cache.update(L=L, alpha=sla.cho_solve((L, True), ys))
    return replace(state, train_z=z, train_y=y, y_mean=mu, y_std=sd, cache=cache)


def _predict_std(state: GpState, zq, full_cov: bool):
    """Latent-function posterior on the standardized scale."""
    if not state.cache:
        raise ValueError("GP state has no training data; call condition() first")
    kp = state.kernel_params()
    Fq = features(state, zq)
    c = state.cache
    if state.sparse:
        U = state.params["inducing"]
        Ksu = kernel_matrix(Fq, U, kp)
        mean = Ksu @ c["w"]
        v1 = sla.solve_triangular(c["Luu"], Ksu.T, lower=True)
        v2 = sla.solve_triangular(c["LA"], Ksu.T, lower=True)
        if full_cov:
            cov = kernel_matrix(Fq, Fq, kp) - v1.T @ v1 + v2.T @ v2
        else:
            cov = state.signal_var - (v1 ** 2).sum(0) + (v2 ** 2).sum(0)
    else:
        Ks = kernel_matrix(Fq, c["F"], kp)
        mean = Ks @ c["alpha"]
        v = sla.solve_triangular(c["L"], Ks.T, lower=True)
        if full_cov:
            cov = kernel_matrix(Fq, Fq, kp) - v.T @ v
        else:
            cov = state.signal_var - (v ** 2).sum(0)
    if full_cov:
        cov = 0.5 * (cov + cov.T)
    else:
        cov = np.maximum(cov, 0.0)
    return mean, cov


def posterior(state: GpState, zq, full_cov: bool = False):
    """Predictive mean and variance (or covariance) of f at ``zq`` on the original y scale."""
    mean, cov = _predict_std(state, zq, full_cov)
    return state.y_mean + state.y_std * mean, cov * state.y_std ** 2


def exact_gp_posterior(state: GpState, z, y, zq):
    """Exact-GP predictive mean and variance, ignoring any inducing points on ``state``."""
    params = {k: v for k, v in state.params.items() if k != "inducing"}
    exact = condition(replace(state, params=params, exact_cap=max(state.exact_cap, len(np.atleast_2d(z)))), z, y)
    return posterior(exact, zq)


def sparse_gp_posterior(state: GpState, zq):
    if not state.sparse:
        raise ValueError("state has no inducing points")
    return posterior(state, zq)


def inducing_targets(state: GpState) -> np.ndarray:
    """Posterior mean of the function at the inducing features, original scale."""
    c = state.cache
    U = state.params["inducing"]
    Kuu = kernel_matrix(U, U, state.kernel_params())
    return state.y_mean + state.y_std * (Kuu @ c["w"])


def posterior_sampler(state: GpState, zq):
    """Factorize the predictive distribution at ``zq`` once; returns ``draw(rng, n) -> (n, K)``.

    Uses the full covariance for at most ``FULL_COV_MAX`` queries and the
    diagonal otherwise.
    """
    zq = np.atleast_2d(zq)
    k = len(zq)
    if k <= FULL_COV_MAX:
        mean, cov = posterior(state, zq, full_cov=True)
        evals, evecs = np.linalg.eigh(cov)
        root = evecs * np.sqrt(np.clip(evals, 0.0, None))

        def draw(rng, n=1):
            return (mean[:, None] + root @ rng.standard_normal((k, n))).T
    else:
        mean, var = posterior(state, zq)
        sd = np.sqrt(var)

        def draw(rng, n=1):
            return mean[None, :] + sd[None, :] * rng.standard_normal((n, k))
    return draw


def posterior_sample(state: GpState, zq, rng: np.random.Generator, n_samples: int | None = None) -> np.ndarray:
    """Joint draw(s) of f at ``zq``; shape (K,) or (n_samples, K)."""
    out = posterior_sampler(state, zq)(rng, 1 if n_samples is None else n_samples)
    return out[0] if n_samples is None else out


# --- fitting ---------------------------------------------------------------------

def _project(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = dict(params)
    out["log_sn2"] = np.maximum(out["log_sn2"], LOG_SN2_MIN)
    out["log_ls"] = np.clip(out["log_ls"], *LOG_LS_RANGE)
    return out


def fit_surrogate(state: GpState, z, y, steps: int = 20, lr: float = 0.1,
                  max_retries: int = 6) -> tuple[GpState, list[float]]:
    """Adam on the (approximate) marginal likelihood, then condition on the data.

    A step that would raise the objective is rejected and retried at half the
    learning rate, so the recorded NLL trace never increases.
    """
    z = np.atleast_2d(np.asarray(z, float))
    y = np.asarray(y, float)
    if len(z) == 0:
        raise ValueError("cannot fit a GP on an empty training set")
    sparse = state.sparse

    def objective(p):
        return surrogate_loss_t(p, z, y, sparse)

    params = {k: v.copy() for k, v in state.params.items()}
    loss, grads = dc.value_and_grad(objective, params)
    if not np.isfinite(loss):
        raise FloatingPointError("surrogate objective is non-finite at the starting point")
    trace = [loss]
    opt = dc.Adam(lr)
    retries = 0
    step = 0
    while step < steps:
        saved_m, saved_v, saved_t = dict(opt.m), dict(opt.v), opt.t
        candidate = _project(opt.step(params, grads))
        try:
            new_loss, new_grads = dc.value_and_grad(objective, candidate)
            ok = np.isfinite(new_loss) and new_loss <= loss
        except (np.linalg.LinAlgError, FloatingPointError):
            ok = False
        if not ok:
            opt.m, opt.v, opt.t = saved_m, saved_v, saved_t
            opt.lr *= 0.5
            retries += 1
            if retries > max_retries:
                break
            continue
        retries = 0
        params, loss, grads = candidate, new_loss, new_grads
        trace.append(loss)
        step += 1
    fitted = replace(state, params=params, cache={})
    return condition(fitted, z, y), [t * len(y) for t in trace]


# --- checkpoints ----------------------------------------------------------------

GP_FORMAT = "cobo-gp"
GP_VERSION = 1


def _arr(v: np.ndarray) -> dict:
    v = np.asarray(v, float)
    return {"shape": list(v.shape), "data": v.reshape(-1).tolist()}


def _unarr(d: dict) -> np.ndarray:
    return np.array(d["data"], dtype=np.float64).reshape(d["shape"])


def gp_to_dict(state: GpState) -> dict:
    """Hyperparameters plus training data; the posterior cache is rebuilt on load."""
    out = {"format": GP_FORMAT, "version": GP_VERSION, "latent_dim": state.latent_dim,
           "exact_cap": state.exact_cap, "params": {k: _arr(v) for k, v in state.params.items()}}
    if state.train_z is not None:
        out["train_z"] = _arr(state.train_z)
        out["train_y"] = _arr(state.train_y)
    return out


def gp_from_dict(d: dict) -> GpState:
    if d.get("format") != GP_FORMAT or d.get("version") != GP_VERSION:
        raise ValueError(f"not a {GP_FORMAT} v{GP_VERSION} checkpoint")
    state = GpState({k: _unarr(v) for k, v in d["params"].items()}, d["latent_dim"], exact_cap=d["exact_cap"])
    if "train_z" in d:
        state = condition(state, _unarr(d["train_z"]), _unarr(d["train_y"]))
    return state


def save_gp(state: GpState, path) -> None:
    Path(path).write_text(json.dumps(gp_to_dict(state)))


def load_gp(path) -> GpState:
    return gp_from_dict(json.loads(Path(path).read_text()))
