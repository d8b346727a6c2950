"""Latent-space BO driver: dataset bookkeeping, joint latent retraining and the acquisition loop.

Random streams (all derived from ``cfg.seed``):

* ``[seed, 0]`` BO stream: initial dataset, joint-training noise, candidate
  draws, Thompson draws, inducing-point placement, in that order of use;
* ``[seed, 1]`` pretraining corpus and VAE pretraining;
* ``[seed, 2]`` analysis pair subsampling;
* ``[seed, 3]`` initial VAE / GP weights.

Objective values are sign-normalized at ingestion so larger is always better.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import analysis, diffcore as dc, losses, search, seqvae, surrogate
from .diffcore import Tensor
from .config import RunConfig
from .tasks import Task, get_task

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("lip", "z", "recon", "kl", "surr", "total")


class Dataset:
    """Evaluated samples in insertion order; y is sign-normalized (larger is better)."""

    def __init__(self, seq_len: int, latent_dim: int):
        self.seq_len = seq_len
        self.latent_dim = latent_dim
        self.x = np.zeros((0, seq_len), dtype=np.int64)
        self.z = np.zeros((0, latent_dim))
        self.y = np.zeros(0)
        self.raw = np.zeros(0)
        self._keys: set[bytes] = set()

    def __len__(self):
        return len(self.y)

    def __contains__(self, x) -> bool:
        return np.asarray(x, np.int64).tobytes() in self._keys

    def add(self, x, raw: float, y: float, z) -> None:
        x = np.asarray(x, np.int64)
        self._keys.add(x.tobytes())
        self.x = np.vstack([self.x, x[None]])
        self.z = np.vstack([self.z, np.asarray(z, float)[None]])
        self.y = np.append(self.y, y)
        self.raw = np.append(self.raw, raw)

    @property
    def best_index(self) -> int:
        return int(np.argmax(self.y))  # first occurrence on ties

    def batch(self, idx) -> losses.Batch:
        return losses.Batch(self.z[idx], self.y[idx], self.x[idx])


def init_dataset(task: Task, n0: int, rng: np.random.Generator, latent_dim: int = 8) -> Dataset:
    """``n0`` distinct random sequences, each evaluated once (latents left at zero until embedded)."""
    if n0 < 1:
        raise ValueError("need at least one initial point")
    data = Dataset(task.seq_len, latent_dim)
    for x in task.corpus(n0, rng):
        raw = task.evaluate(x)
        data.add(x, raw, task.normalize(raw), np.zeros(latent_dim))
    if len(data) < n0:
        raise RuntimeError(f"could only draw {len(data)} distinct initial sequences")
    return data


def topk_indices(y, k: int) -> np.ndarray:
    y = np.asarray(y)
    if y.size == 0:
        raise ValueError("empty dataset")
    order = np.argsort(-y, kind="stable")
    return order[:min(k, y.size)]


def topk_select(dataset: Dataset, k: int) -> losses.Batch:
    """The k highest-objective samples; ties resolved by earlier insertion."""
    return dataset.batch(topk_indices(dataset.y, k))


def embed(vae: seqvae.VaeParams, dataset: Dataset) -> None:
    if len(dataset):
        dataset.z = seqvae.encode(vae, dataset.x)[0]


# --- joint latent retraining ---------------------------------------------------

@dataclass
class RetrainResult:
    vae: seqvae.VaeParams
    gp: surrogate.GpState
    trace: list[dict]
    aborted: bool = False


def loss_options(cfg: RunConfig, gp: surrogate.GpState, yq: float | None) -> losses.LossOptions:
    return losses.LossOptions(use_lip=cfg.ablation.use_lip, use_z=cfg.ablation.use_z,
                              use_weighting=cfg.ablation.use_weighting, standardize_y=cfg.standardize_y,
                              sparse=gp.sparse, yq=yq)


def retrain_latent(vae: seqvae.VaeParams, gp: surrogate.GpState, batch: losses.Batch, cfg: RunConfig,
                   rng: np.random.Generator, yq: float | None = None) -> RetrainResult:
    """``cfg.retrain_epochs`` full-batch Adam steps on the joint loss over VAE and GP parameters.

    Batches above 256 points are subsampled to 256 per step. A non-finite loss
    or failed factorization aborts and returns the inputs unchanged.
    """
    opts = loss_options(cfg, gp, yq)
    frozen = {} if cfg.vae.retrain_decoder else {k: v for k, v in vae.weights.items() if k.startswith("dec_")}
    params = {f"vae.{k}": v for k, v in vae.weights.items() if k not in frozen}
    params.update({f"gp.{k}": v for k, v in gp.params.items()})
    opt = dc.Adam(cfg.retrain_lr)
    trace = []
    n = len(batch)
    for epoch in range(cfg.retrain_epochs):
        if n > 256:
            idx = np.sort(rng.choice(n, 256, replace=False))
            sub = losses.Batch(batch.latents[idx], batch.objectives[idx], batch.sequences[idx])
        else:
            sub = batch
        eps = rng.standard_normal((len(sub), vae.latent_dim))
        holder = {}

        def objective(t):
            vae_t = {k: Tensor(v) for k, v in frozen.items()}
            vae_t.update({k[4:]: v for k, v in t.items() if k.startswith("vae.")})
            res = losses.cobo_loss_t(vae_t,
                                     {k[3:]: v for k, v in t.items() if k.startswith("gp.")},
                                     sub, vae, cfg.loss, cfg.weighting, eps, opts)
            holder["res"] = res
            return res.total

        try:
            _, grads = dc.value_and_grad(objective, params)
        except (dc.NonFiniteError, np.linalg.LinAlgError) as exc:
            log.warning("latent retraining aborted at epoch %d: %s", epoch, exc)
            return RetrainResult(vae, gp, trace, aborted=True)
        row = {"epoch": epoch, **holder["res"].breakdown(), "lipschitz": holder["res"].lipschitz}
        trace.append(row)
        params = opt.step(params, grads)
        if not all(np.all(np.isfinite(v)) for v in params.values()):
            log.warning("latent retraining produced non-finite parameters at epoch %d", epoch)
            return RetrainResult(vae, gp, trace, aborted=True)
    new_vae = vae.replace({**frozen, **{k[4:]: v for k, v in params.items() if k.startswith("vae.")}})
    new_gp = replace(gp, params={k[3:]: v for k, v in params.items() if k.startswith("gp.")}, cache={})
    return RetrainResult(new_vae, new_gp, trace)


# --- run state ---------------------------------------------------------------------

@dataclass
class RunHistory:
    rows: list[dict] = field(default_factory=list)
    loss_trace: list[dict] = field(default_factory=list)
    correlation: list[dict] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)
    best_x: list[int] = field(default_factory=list)
    best_y: float = -math.inf
    best_raw: float = math.nan
    stopped_early: bool = False

    @property
    def best_curve(self) -> np.ndarray:
        return np.array([r["best"] for r in self.rows])


@dataclass
class BoState:
    cfg: RunConfig
    task: Task
    vae: seqvae.VaeParams
    gp: surrogate.GpState
    data: Dataset
    tr: search.TrustRegionState
    rng: np.random.Generator
    analysis_rng: np.random.Generator
    history: RunHistory = field(default_factory=RunHistory)
    fail_accum: int = 0
    retrain_count: int = 0
    stall_steps: int = 0
    last_breakdown: dict = field(default_factory=dict)
    last_pearson: float | None = None
    on_retrain: Callable[["BoState"], None] | None = None

    @property
    def oracle_calls(self) -> int:
        return len(self.data)

    @property
    def best(self) -> float:
        return float(self.data.y.max())


def _record(state: BoState, idx: int) -> None:
    d = state.data
    row = {
        "call": idx + 1,
        "y_raw": float(d.raw[idx]),
        "y": float(d.y[idx]),
        "best": float(d.y[:idx + 1].max()),
        "tr_length": float(state.tr.length),
        "retrains": state.retrain_count,
    }
    for k in LOSS_COLUMNS:
        row[f"loss_{k}"] = state.last_breakdown.get(k, math.nan)
    row["pearson"] = math.nan if state.last_pearson is None else state.last_pearson
    state.history.rows.append(row)


def correlation_snapshot(state: BoState, tag: str) -> dict:
    batch = topk_select(state.data, state.cfg.top_k)
    row = {"retrain": state.retrain_count, "calls": state.oracle_calls, "when": tag}
    if len(batch) >= 3:
        st = analysis.pairwise_stats(batch.latents, batch.objectives, state.cfg.max_pairs, state.analysis_rng)
        row.update(st.row())
        row.update(analysis.zdist_summary(batch.latents))
    return row


def refit_surrogate(state: BoState, steps: int) -> None:
    cfg = state.cfg
    gp = state.gp
    if not gp.sparse and (cfg.gp.sparse or len(state.data) > gp.exact_cap):
        gp = surrogate.with_inducing(gp, state.data.z, state.rng, cfg.gp.num_inducing)
    state.gp, _ = surrogate.fit_surrogate(gp, state.data.z, state.data.y, steps, cfg.gp.lr)


def do_retrain(state: BoState) -> None:
    """Joint retraining on the top-k batch, re-embedding, surrogate refit and recoordination."""
    cfg = state.cfg
    before = correlation_snapshot(state, "before")
    batch = topk_select(state.data, cfg.top_k)
    yq = losses.compute_yq(state.data.y, cfg.weighting.quantile)
    res = retrain_latent(state.vae, state.gp, batch, cfg, state.rng, yq)
    state.retrain_count += 1
    for row in res.trace:
        state.history.loss_trace.append({"retrain": state.retrain_count, "calls": state.oracle_calls, **row})
    if res.aborted:
        state.history.events.append({"calls": state.oracle_calls, "event": "retrain_aborted"})
    old_center = state.tr.center
    state.vae, state.gp = res.vae, res.gp
    embed(state.vae, state.data)
    refit_surrogate(state, cfg.gp.retrain_fit_steps)
    if res.trace:
        state.last_breakdown = {k: res.trace[-1][k] for k in LOSS_COLUMNS}
    after = correlation_snapshot(state, "after")
    state.last_pearson = after.get("pearson")
    state.history.correlation += [before, after]
    if cfg.ablation.use_recoord:
        state.tr = search.tr_recoordinate(state.tr, old_center, state.vae)
    state.fail_accum = 0
    if state.on_retrain is not None:
        state.on_retrain(state)


def setup(cfg: RunConfig, on_retrain=None) -> BoState:
    """Initial dataset, pretrained VAE, embedded data, fitted surrogate and trust region."""
    task = get_task(cfg.task, cfg.task_seed)
    rng = np.random.default_rng([cfg.seed, 0])
    analysis_rng = np.random.default_rng([cfg.seed, 2])
    data = init_dataset(task, cfg.n_init, rng, cfg.vae.latent_dim)
    vae = pretrained_vae(cfg, task)
    gp = surrogate.init_gp(cfg.vae.latent_dim, np.random.default_rng([cfg.seed, 3]), use_dkl=cfg.gp.use_dkl,
                           hidden=cfg.gp.hidden, feature_dim=cfg.gp.feature_dim, exact_cap=cfg.gp.exact_cap)
    embed(vae, data)
    tr = search.TrustRegionState.create(
        data.z[data.best_index], length=cfg.tr.length_init, length_min=cfg.tr.length_min,
        length_max=cfg.tr.length_max, success_tolerance=cfg.tr.success_tolerance,
        failure_tolerance=cfg.tr.failure_tolerance or max(4, cfg.vae.latent_dim))
    state = BoState(cfg, task, vae, gp, data, tr, rng, analysis_rng, on_retrain=on_retrain)
    for i in range(len(data)):
        _record(state, i)
    return state


_PRETRAIN_CACHE: dict[tuple, seqvae.VaeParams] = {}


def pretrained_vae(cfg: RunConfig, task: Task) -> seqvae.VaeParams:
    """VAE pretrained with the plain ELBO on a random task corpus (memoized per seed and settings)."""
    v = cfg.vae
    key = (task.name, cfg.task_seed, cfg.seed, v.latent_dim, v.hidden, v.corpus_size,
           v.pretrain_epochs, v.pretrain_batch, v.pretrain_lr, v.kl_coef)
    if key not in _PRETRAIN_CACHE:
        prng = np.random.default_rng([cfg.seed, 1])
        corpus = task.corpus(v.corpus_size, prng)
        init = seqvae.init_vae(task.seq_len, len(task.vocab), v.latent_dim, v.hidden,
                               np.random.default_rng([cfg.seed, 3]))
        _PRETRAIN_CACHE[key], _ = seqvae.pretrain(init, corpus, prng, v.pretrain_epochs,
                                                  v.pretrain_batch, v.pretrain_lr, v.kl_coef)
    return _PRETRAIN_CACHE[key].copy()


def latent_scale(data: Dataset) -> np.ndarray:
    """Per-dimension std of the stored latents; trust-region sides are measured in these units."""
    if len(data) < 2:
        return np.ones(data.latent_dim)
    return np.maximum(data.z.std(0), 1e-6)


def novel_candidates(state: BoState, cands: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Keep the first candidate for each decoded sequence not already in the dataset.

    Decoded sequences are mapped to the task's canonical form first.
    """
    decoded = seqvae.decode_map(state.vae, cands)
    if state.task.canonical is not None:
        decoded = np.stack([state.task.canonicalize(x) for x in decoded]) if len(decoded) else decoded
    keep, seen = [], set()
    for i, x in enumerate(decoded):
        key = x.tobytes()
        if key in seen or x in state.data:
            continue
        seen.add(key)
        keep.append(i)
    return cands[keep], decoded[keep]


def bo_step(state: BoState) -> list[int]:
    """One acquisition round; returns dataset indices of newly evaluated samples.

    Candidates are decoded before selection and those mapping to known (or
    already proposed) sequences are dropped, so Thompson sampling only chooses
    among novel inputs. If fewer than B novel candidates survive, the sampling
    box is doubled (up to ``tr.max_expansions`` times) without touching the
    trust-region state.
    """
    cfg = state.cfg
    refit_surrogate(state, cfg.gp.fit_steps)
    k = cfg.tr.candidates_per_batch * cfg.batch_size
    if cfg.method == "lsbo":
        cands, decoded = novel_candidates(state, state.rng.standard_normal((k, cfg.vae.latent_dim)))
    else:
        scale = latent_scale(state.data)
        # a box that decodes to fewer than B unseen inputs is doubled for this step only
        for attempt in range(cfg.tr.max_expansions + 1):
            box = replace(state.tr, length=state.tr.length * 2.0 ** attempt)
            cands, decoded = novel_candidates(state, search.generate_candidates(box, k, state.rng, scale=scale))
            if len(cands) >= cfg.batch_size:
                break
    prev_best = state.best
    new = []
    if len(cands):
        picks = search.thompson_select(state.gp, cands, min(cfg.batch_size, len(cands)), state.rng,
                                       return_indices=True)
        for i in picks:
            if state.oracle_calls >= cfg.budget:
                break
            x = decoded[i]
            if x in state.data:
                continue
            raw = state.task.evaluate(x)
            state.data.add(x, raw, state.task.normalize(raw), seqvae.encode(state.vae, x)[0])
            new.append(len(state.data) - 1)

    improved = bool(new) and float(state.data.y[new].max()) > prev_best
    state.stall_steps = 0 if new else state.stall_steps + 1
    if cfg.method == "cobo" and not new:
        state.tr = search.tr_widen(state.tr)
    elif cfg.method == "cobo":
        tr = search.tr_update(state.tr, improved)
        if improved:
            tr = replace(tr, center=state.data.z[state.data.best_index].copy())
        if tr.restart_required:
            tr = tr.restarted(state.data.z[state.data.best_index].copy())
            state.history.events.append({"calls": state.oracle_calls, "event": "tr_restart"})
        state.tr = tr
    for i in new:
        _record(state, i)
    state.fail_accum = 0 if improved else state.fail_accum + 1
    if cfg.method == "cobo" and state.fail_accum >= cfg.n_fail and state.oracle_calls < cfg.budget:
        do_retrain(state)
    return new


def run_bo(cfg: RunConfig, on_retrain=None, on_step=None) -> RunHistory:
    """Full run: initialize, pretrain, initial retrain (CoBO only), then acquire until the budget is spent."""
    state = setup(cfg, on_retrain)
    try:
        if cfg.method == "cobo":
            do_retrain(state)
        while state.oracle_calls < cfg.budget:
            bo_step(state)
            if on_step is not None:
                on_step(state)
            if state.stall_steps >= cfg.max_stall_steps:
                log.warning("no new sequences for %d steps; stopping at %d calls",
                            state.stall_steps, state.oracle_calls)
                state.history.stopped_early = True
                state.history.events.append({"calls": state.oracle_calls, "event": "stalled"})
                break
    except Exception as exc:
        finalize(state)
        exc.history = state.history  # partial record for callers that flush to disk
        raise
    finalize(state)
    return state.history


def finalize(state: BoState) -> None:
    h = state.history
    if len(state.data):
        b = state.data.best_index
        h.best_x = state.data.x[b].tolist()
        h.best_y = float(state.data.y[b])
        h.best_raw = float(state.data.raw[b])
