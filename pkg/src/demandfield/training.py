"""Two-phase training of the demand surface.

Phase 0 freezes every spline-coefficient head and fits a context-dependent
log-linear surface against smoothed targets (a calibrated warm start whose
own elasticities open at the cross-sectional prior).  Phase 1 unfreezes
everything and fits raw targets.  Both phases share one loss: masked Huber
fit + curvature smoothness + soft elasticity bands.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, asdict

import numpy as np

from .autodiff import Tensor
from .model import (Batch, ForwardOutput, ModelState, SparseGraph, forward,
                    select_graph, trainable_names, decay_names, wrap_params,
                    SPLINE_HEAD_PARAMS)
from .util import rng_stream


class DivergenceError(RuntimeError):
    """Loss or gradients became non-finite during training."""


@dataclass(frozen=True)
class LossConfig:
    delta: float = 1.0
    lambda_smooth: float = 3.514e-2
    lambda_band: float = 4.450e-2
    own_band: tuple = (-5.0, 0.0)
    cross_band: tuple = (-1.0, 1.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["own_band"] = list(self.own_band)
        d["cross_band"] = list(self.cross_band)
        return d


@dataclass(frozen=True)
class TrainConfig:
    epochs_p0: int = 40
    epochs_p1: int = 80
    batch_size: int = 256
    lr_p0: float = 1.686e-3
    lr_p1: float = 1.625e-3
    weight_decay: float = 1e-2
    clip_norm: float = 1.0
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    early_stop_patience: int = 15
    val_frac: float = 0.2
    beta_eda: float = -2.0
    smooth_window: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    fit: float
    smooth: float
    band: float
    total: float
    n_obs: int      # masked entries contributing to fit/smooth
    n_band: int     # elasticity entries contributing to the band term
    n_instances: int


def collate(instances) -> Batch:
    """Stack wide instances into one batch."""
    if len(instances) == 0:
        raise ValueError("cannot collate zero instances")
    return Batch(
        u=np.stack([w.u for w in instances]),
        y=np.stack([w.y for w in instances]),
        mask=np.stack([w.mask for w in instances]).astype(float),
        cat=np.stack([w.cat for w in instances]),
        num=np.stack([w.num for w in instances]),
        stores=[w.store for w in instances],
        weeks=[w.week_id for w in instances],
    )


def compute_loss(out: ForwardOutput, batch: Batch, cfg: LossConfig):
    """Masked batch loss.

    Returns ``(total, breakdown)`` where ``total`` is an engine scalar.  Each
    term is first averaged within an instance over its observed entries, then
    averaged over instances that have at least one observed entry; instances
    with none contribute nothing.
    """
    mask = batch.mask
    nm = mask.sum(axis=1)
    valid = nm > 0
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise DivergenceError("batch has no observed entries")
    denom = np.where(valid, np.maximum(nm, 1.0), 1.0)
    w_inst = valid.astype(float) / n_valid

    y_safe = np.where(mask > 0, batch.y, 0.0)
    resid = out.yhat * mask - y_safe
    fit = ((resid.huber(cfg.delta).sum(axis=1) * (1.0 / denom)) * w_inst).sum()

    smooth = ((((out.curvature ** 2.0) * mask).sum(axis=1) * (1.0 / denom)) * w_inst).sum()

    own_lo, own_hi = cfg.own_band
    cross_lo, cross_hi = cfg.cross_band
    own_pen = ((out.e_own - own_hi).relu() ** 2.0 + (own_lo - out.e_own).relu() ** 2.0) * mask
    mj = mask[:, out.graph.edges]                       # (B, n, k_eff)
    pair_mask = mask[:, :, None] * mj
    cross_pen = ((out.e_cross - cross_hi).relu() ** 2.0
                 + (cross_lo - out.e_cross).relu() ** 2.0) * pair_mask
    ne = mask.sum(axis=1) + pair_mask.sum(axis=(1, 2))
    band_denom = np.where(ne > 0, ne, 1.0)
    band = (((own_pen.sum(axis=1) + cross_pen.sum(axis=(1, 2))) * (1.0 / band_denom)) * w_inst).sum()

    total = fit + cfg.lambda_smooth * smooth + cfg.lambda_band * band
    bd = LossBreakdown(fit=fit.item(), smooth=smooth.item(), band=band.item(),
                       total=total.item(), n_obs=int(mask[valid].sum()),
                       n_band=int(ne[valid].sum()), n_instances=n_valid)
    return total, bd


def compute_gradients(state: ModelState, batch: Batch, loss_cfg: LossConfig,
                      trainable, *, graph: SparseGraph | None = None,
                      rng=None, mode: str = "train"):
    """Gradients of the mean total loss w.r.t. every requested parameter."""
    pt = wrap_params(state, trainable)
    out = forward(state, batch, pt, mode=mode, graph=graph, rng=rng)
    total, bd = compute_loss(out, batch, loss_cfg)
    total.backward()
    grads = {}
    for name in trainable:
        g = pt[name].grad
        grads[name] = np.zeros_like(state.params[name]) if g is None else g
    return grads, bd, out


class AdamW:
    """Decoupled weight decay Adam over named numpy parameters."""

    def __init__(self, names, decay, lr, weight_decay=1e-2,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        self.names = tuple(names)
        self.decay = frozenset(decay) & frozenset(names)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params: dict, grads: dict, clip_norm: float | None = None) -> float:
        """Apply one update in place; returns the pre-clip gradient norm."""
        sq = 0.0
        for name in self.names:
            sq += float((grads[name] ** 2).sum())
        gnorm = math.sqrt(sq)
        if not math.isfinite(gnorm):
            raise DivergenceError("non-finite gradient norm")
        scale = 1.0
        if clip_norm is not None and gnorm > clip_norm:
            scale = clip_norm / (gnorm + 1e-12)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name in self.names:
            g = grads[name] * scale
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            self.m[name], self.v[name] = m, v
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if name in self.decay:
                update = update + self.weight_decay * params[name]
            params[name] -= self.lr * update
        return gnorm


class PlateauScheduler:
    """Halve (by ``factor``) the learning rate when a metric stops improving."""

    def __init__(self, optimizer: AdamW, factor: float = 0.5, patience: int = 5):
        self.opt = optimizer
        self.factor = factor
        self.patience = patience
        self.best = math.inf
        self.bad = 0

    def step(self, metric: float) -> bool:
        if metric < self.best - 1e-12:
            self.best = metric
            self.bad = 0
            return False
        self.bad += 1
        if self.bad > self.patience:
            self.bad = 0
            self.opt.lr *= self.factor
            return True
        return False


def _masked_r2(y, yhat, mask) -> float:
    m = mask > 0
    if not m.any():
        return float("nan")
    ybar = y[m].mean()
    sst = ((y[m] - ybar) ** 2).sum()
    if sst == 0.0:
        return float("nan")
    return float(1.0 - ((y[m] - yhat[m]) ** 2).sum() / sst)


def eval_split(state: ModelState, instances, loss_cfg: LossConfig,
               graph: SparseGraph, batch_size: int = 512) -> dict:
    """Evaluation-mode losses and masked R^2 over a split, graph pinned."""
    sums = {"fit": 0.0, "smooth": 0.0, "band": 0.0, "total": 0.0}
    n_inst = 0
    ys, yhats, masks = [], [], []
    for start in range(0, len(instances), batch_size):
        batch = collate(instances[start:start + batch_size])
        out = forward(state, batch, mode="eval", graph=graph)
        _, bd = compute_loss(out, batch, loss_cfg)
        for key in sums:
            sums[key] += getattr(bd, key) * bd.n_instances
        n_inst += bd.n_instances
        ys.append(batch.y)
        yhats.append(out.yhat.data)
        masks.append(batch.mask)
    if n_inst == 0:
        raise ValueError("evaluation split has no observed entries")
    metrics = {key: sums[key] / n_inst for key in sums}
    metrics["r2"] = _masked_r2(np.concatenate(ys), np.concatenate(yhats), np.concatenate(masks))
    return metrics


def _graph_from_train(state: ModelState, instances, batch_size: int = 512) -> SparseGraph:
    """Mean evaluation-mode scores over the train split -> top-k graph."""
    insts = sorted(instances, key=lambda w: (w.store, w.week_id))
    total = np.zeros((state.universe.n, state.universe.n))
    count = 0
    for start in range(0, len(insts), batch_size):
        batch = collate(insts[start:start + batch_size])
        out = forward(state, batch, mode="eval")
        total += out.scores.data.sum(axis=0)
        count += batch.size
    return select_graph(total / count, state.config.k_neighbors,
                        state.config.category_priority, state.same_category(),
                        provenance="frozen")


def run_phase(state: ModelState, train_insts, val_insts, *, phase: int,
              lr: float, epochs: int, loss_cfg: LossConfig, train_cfg: TrainConfig,
              shuffle_rng, dropout_rng, history: list) -> ModelState:
    """Run one training phase in place; returns the best-validation state.

    The retained checkpoint is the running argmin of validation fit loss, so
    the retained sequence is nonincreasing in that metric by construction.
    """
    trainable = trainable_names(state, freeze_spline_heads=(phase == 0))
    opt = AdamW(trainable, decay_names(state), lr,
                weight_decay=train_cfg.weight_decay, beta1=train_cfg.beta1,
                beta2=train_cfg.beta2, eps=train_cfg.eps)
    sched = PlateauScheduler(opt, train_cfg.plateau_factor, train_cfg.plateau_patience)
    best_fit = math.inf
    best_params = copy.deepcopy(state.params)
    since_best = 0
    for epoch in range(epochs):
        order = shuffle_rng.permutation(len(train_insts))
        run = {"fit": 0.0, "smooth": 0.0, "band": 0.0, "total": 0.0}
        n_batches = 0
        diverged = False
        for start in range(0, len(order), train_cfg.batch_size):
            ids = order[start:start + train_cfg.batch_size]
            batch = collate([train_insts[i] for i in ids])
            try:
                grads, bd, _ = compute_gradients(state, batch, loss_cfg, trainable,
                                                 rng=dropout_rng, mode="train")
                if not math.isfinite(bd.total):
                    raise DivergenceError("non-finite loss")
                opt.step(state.params, grads, train_cfg.clip_norm)
            except DivergenceError:
                diverged = True
                break
            for key in run:
                run[key] += getattr(bd, key)
            n_batches += 1
        if diverged:
            state.params = best_params
            history.append({"epoch": epoch, "phase": phase, "lr": opt.lr,
                            "event": "diverged; restored best checkpoint"})
            break
        graph = _graph_from_train(state, train_insts)
        val = eval_split(state, val_insts, loss_cfg, graph)
        history.append({
            "epoch": epoch, "phase": phase, "lr": opt.lr,
            "fit": run["fit"] / max(n_batches, 1),
            "smooth": run["smooth"] / max(n_batches, 1),
            "band": run["band"] / max(n_batches, 1),
            "total": run["total"] / max(n_batches, 1),
            "val_r2": val["r2"], "val_fit": val["fit"],
        })
        if val["fit"] < best_fit - 1e-12:
            best_fit = val["fit"]
            best_params = copy.deepcopy(state.params)
            since_best = 0
        else:
            since_best += 1
        sched.step(val["fit"])
        if since_best >= train_cfg.early_stop_patience:
            break
    state.params = best_params
    return state


def run_two_phase(fpanel, model_cfg, loss_cfg: LossConfig, train_cfg: TrainConfig,
                  seed: int, *, train_weeks=None, val_weeks=None) -> tuple:
    """Full protocol on a feature panel: warm start, refine, freeze the graph.

    Returns ``(state, history)``.  ``history`` carries one dict per epoch plus
    any divergence events.
    """
    from . import panel as panel_mod
    from .model import init_state, freeze_graph

    weeks = sorted(fpanel["week_id"].unique())
    if train_weeks is None:
        n_val = max(1, int(round(train_cfg.val_frac * len(weeks))))
        if n_val >= len(weeks):
            raise ValueError("val_frac leaves no training weeks")
        train_weeks = weeks[:-n_val]
        val_weeks = weeks[-n_val:]
    train_weeks = [int(w) for w in train_weeks]
    val_weeks = [int(w) for w in val_weeks]
    fp_train = fpanel[fpanel["week_id"].isin(train_weeks)]
    fp_val = fpanel[fpanel["week_id"].isin(val_weeks)]
    if len(fp_train) == 0 or len(fp_val) == 0:
        raise ValueError("empty train or validation split")

    universe = panel_mod.build_universe(fp_train)
    specs = panel_mod.fit_spline_specs(fp_train, universe, model_cfg.n_knots)
    codec = panel_mod.fit_token_codec(fp_train)

    insts_val = panel_mod.assemble_wide(fp_val, universe, codec)
    insts_train_raw = panel_mod.assemble_wide(fp_train, universe, codec)
    fp_smooth = panel_mod.smoothed_targets(fp_train, train_cfg.smooth_window)
    insts_train_p0 = panel_mod.assemble_wide(fp_smooth, universe, codec)

    state = init_state(model_cfg, universe, specs, codec.to_dict(),
                       codec.n_features, seed, beta_eda=train_cfg.beta_eda)
    state.train_weeks = train_weeks
    state.val_weeks = val_weeks

    shuffle_rng = rng_stream(seed, "shuffle")
    dropout_rng = rng_stream(seed, "dropout")
    history: list = []
    run_phase(state, insts_train_p0, insts_val, phase=0, lr=train_cfg.lr_p0,
              epochs=train_cfg.epochs_p0, loss_cfg=loss_cfg, train_cfg=train_cfg,
              shuffle_rng=shuffle_rng, dropout_rng=dropout_rng, history=history)
    run_phase(state, insts_train_raw, insts_val, phase=1, lr=train_cfg.lr_p1,
              epochs=train_cfg.epochs_p1, loss_cfg=loss_cfg, train_cfg=train_cfg,
              shuffle_rng=shuffle_rng, dropout_rng=dropout_rng, history=history)
    freeze_graph(state, insts_train_raw)
    state.extra["loss_config"] = loss_cfg.to_dict()
    state.extra["train_config"] = train_cfg.to_dict()
    return state, history
