"""Losses, Adam, the cyclic learning-rate schedule and the alternating training loop."""

from __future__ import annotations

import csv
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from .align import AlignmentConfig, SinkhornConfig, SinkhornNonConvergence, alignment_loss
from .data import DomainDataset, DataConfigError, sample_batch
from .model import NBeatsModel, model_forward_full, predict, save_checkpoint
from .numcore import Tensor

logger = logging.getLogger(__name__)

SMAPE_GUARD = 1e-12


class TrainingAborted(RuntimeError):
    """A loss or gradient went non-finite; carries where it happened."""

    def __init__(self, message: str, iteration: int | None = None, substep: str | None = None):
        super().__init__(message)
        self.iteration = iteration
        self.substep = substep


# losses -----------------------------------------------------------------------------


def smape_loss(pred: Tensor, target) -> Tensor:
    """Mean of 2|y - yhat| / (|y| + |yhat|); zero where the denominator vanishes."""
    pred = nc.as_tensor(pred)
    target = nc.as_tensor(target)
    if pred.shape != target.shape:
        raise nc.DimensionError(f"prediction shape {pred.shape} differs from target shape {target.shape}")
    den = nc.absolute(pred) + nc.absolute(target)
    ok = den.data >= SMAPE_GUARD
    safe = nc.where(ok, den, Tensor(1.0))
    ratio = nc.absolute(pred - target) / safe
    return nc.where(ok, ratio, Tensor(0.0)).mean() * 2.0


# optimizer --------------------------------------------------------------------------


@dataclass
class AdamState:
    """Per-parameter moments and step counts, keyed by parameter name.

    A parameter that is not passed to a step keeps its moments and its count,
    so one state can serve several sub-steps that touch different subsets.
    """

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: dict[str, int] = field(default_factory=dict)


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    names: Sequence[str] | None = None,
) -> AdamState:
    """Bias-corrected Adam descent; parameters are replaced, not mutated in place."""
    keys = list(names) if names is not None else [f"#{i}" for i in range(len(params))]
    if not (len(keys) == len(params) == len(grads)):
        raise nc.DimensionError(f"got {len(params)} parameters, {len(grads)} gradients and {len(keys)} names")
    for key, p, g in zip(keys, params, grads):
        if g.shape != p.data.shape:
            raise nc.DimensionError(f"gradient shape {g.shape} differs from parameter shape {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingAborted(f"non-finite gradient for parameter {key}")
    for key, p, g in zip(keys, params, grads):
        if key not in state.m:
            state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
            state.step[key] = 0
        state.step[key] += 1
        t = state.step[key]
        state.m[key] = beta1 * state.m[key] + (1.0 - beta1) * g
        state.v[key] = beta2 * state.v[key] + (1.0 - beta2) * g * g
        if lr == 0.0:
            continue
        m_hat = state.m[key] / (1.0 - beta1**t)
        v_hat = state.v[key] / (1.0 - beta2**t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> list[np.ndarray]:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if total <= max_norm or total == 0.0:
        return grads
    return [g * (max_norm / total) for g in grads]


# schedule and config ----------------------------------------------------------------


@dataclass
class TrainConfig:
    batch_size: int = 4096
    iterations: int = 1000
    lam: float = 1.0
    base_lr: float = 2e-7
    max_lr: float = 2e-5
    step_size_up: int = 10
    lr_mode: str = "triangular2"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    clip_norm: float | None = None
    shared_optimizer: bool = True
    val_every: int = 10
    val_max_instances: int | None = 2000
    checkpoint_every: int | None = None
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.batch_size < 2:
            raise DataConfigError("batch size must be >= 2")
        if self.lam < 0:
            raise DataConfigError("lambda must be >= 0")
        if self.iterations < 0:
            raise DataConfigError("iterations must be >= 0")
        if self.lr_mode not in ("triangular", "triangular2"):
            raise DataConfigError(f"unknown learning-rate mode {self.lr_mode!r}")


def cyclic_lr(iteration: int, cfg: TrainConfig) -> float:
    """Triangular cyclic schedule; ``triangular2`` halves the amplitude every cycle."""
    step = cfg.step_size_up
    cycle = math.floor(1 + iteration / (2 * step))
    x = abs(iteration / step - 2 * cycle + 1)
    scale = 1.0 if cfg.lr_mode == "triangular" else 0.5 ** (cycle - 1)
    return cfg.base_lr + (cfg.max_lr - cfg.base_lr) * max(0.0, 1.0 - x) * scale


# training ---------------------------------------------------------------------------


@dataclass
class OptimState:
    """Optimizer state for the alternating loop.

    With ``shared`` (the default) both sub-steps write into one Adam state, so
    the feature extractors see a single moment estimate mixing the weighted
    alignment gradient with the forecast gradient and lambda sets their ratio.
    Separate states make the alignment step blind to lambda, since Adam
    divides out any constant gradient scale.
    """

    shared: bool = True
    forecast: AdamState = field(default_factory=AdamState)
    _align: AdamState = field(default_factory=AdamState)

    @property
    def align(self) -> AdamState:
        return self.forecast if self.shared else self._align


@dataclass
class StepRecord:
    forecast_loss: float
    align_loss: float
    total_loss: float


def collect_taps(model: NBeatsModel, x: Tensor, granularity: str, sizes: Sequence[int]):
    """Forward the stacked batch and split each tap back into per-domain pieces."""
    res = model_forward_full(x, model)
    units = res.taps if granularity == "stack_wise" else [z for feats in res.block_features for z in feats]
    bounds = np.cumsum([0, *sizes])
    per_domain = [[u[bounds[k] : bounds[k + 1]] for u in units] for k in range(len(sizes))]
    return res, per_domain


def _check_finite(value: float, iteration, substep: str) -> None:
    if not math.isfinite(value):
        raise TrainingAborted(f"non-finite {substep} loss at iteration {iteration}", iteration, substep)


def _grads(loss: Tensor, params: list[Tensor], iteration, substep: str) -> list[np.ndarray]:
    try:
        return nc.grad(loss, params)
    except FloatingPointError as exc:
        raise TrainingAborted(f"{exc} at iteration {iteration}", iteration, substep) from exc


def _stack(batches: Sequence[tuple[Tensor, Tensor]]):
    xs = [nc.as_tensor(x) for x, _ in batches]
    ys = [nc.as_tensor(y) for _, y in batches]
    sizes = [x.shape[0] for x in xs]
    return Tensor(np.concatenate([x.data for x in xs])), ys, sizes


def alignment_substep(
    model: NBeatsModel,
    batches: Sequence[tuple[Tensor, Tensor]],
    cfg: TrainConfig,
    state: OptimState,
    lr: float,
    iteration: int | None = None,
) -> float:
    """Sub-step (a): descend on lambda times the alignment loss, feature extractors only."""
    x_all, _, sizes = _stack(batches)
    names, phi = zip(*[(n, t) for n, t, g in model.named_parameters() if g == "phi"])
    _, taps = collect_taps(model, x_all, cfg.alignment.granularity, sizes)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SinkhornNonConvergence)
        try:
            align = alignment_loss(taps, cfg.alignment, cfg.sinkhorn)
        except FloatingPointError as exc:
            raise TrainingAborted(f"{exc} at iteration {iteration}", iteration, "align") from exc
    value = align.item()
    _check_finite(value, iteration, "align")
    if align.requires_grad:
        grads = _grads(align * cfg.lam, list(phi), iteration, "align")
        if cfg.clip_norm:
            grads = clip_global_norm(grads, cfg.clip_norm)
        try:
            adam_step(phi, grads, state.align, lr, cfg.beta1, cfg.beta2, cfg.adam_eps, names)
        except TrainingAborted as exc:
            raise TrainingAborted(f"{exc} at iteration {iteration}", iteration, "align") from exc
    return value


def forecast_substep(
    model: NBeatsModel,
    batches: Sequence[tuple[Tensor, Tensor]],
    cfg: TrainConfig,
    state: OptimState,
    lr: float,
    iteration: int | None = None,
) -> float:
    """Sub-step (b): re-forward and descend on the domain-averaged SMAPE, all trainable parameters."""
    x_all, ys, sizes = _stack(batches)
    names, params = zip(*[(n, t) for n, t, g in model.named_parameters() if g != "basis"])
    res = model_forward_full(x_all, model)
    bounds = np.cumsum([0, *sizes])
    loss = None
    for k in range(len(batches)):
        lk = smape_loss(res.forecast[bounds[k] : bounds[k + 1]], ys[k])
        loss = lk if loss is None else loss + lk
    loss = loss * (1.0 / len(batches))
    value = loss.item()
    _check_finite(value, iteration, "forecast")
    grads = _grads(loss, list(params), iteration, "forecast")
    if cfg.clip_norm:
        grads = clip_global_norm(grads, cfg.clip_norm)
    try:
        adam_step(params, grads, state.forecast, lr, cfg.beta1, cfg.beta2, cfg.adam_eps, names)
    except TrainingAborted as exc:
        raise TrainingAborted(f"{exc} at iteration {iteration}", iteration, "forecast") from exc
    return value


def train_step(
    model: NBeatsModel,
    batches: Sequence[tuple[Tensor, Tensor]],
    cfg: TrainConfig,
    state: OptimState,
    lr: float,
    iteration: int | None = None,
) -> StepRecord:
    """One iteration: alignment descent on the feature extractors, then forecast descent on everything."""
    if len(batches) < 2:
        raise DataConfigError(f"training needs at least two source domains, got {len(batches)}")
    align_value = alignment_substep(model, batches, cfg, state, lr, iteration) if cfg.lam > 0 else 0.0
    forecast_value = forecast_substep(model, batches, cfg, state, lr, iteration)
    return StepRecord(forecast_value, align_value, forecast_value + cfg.lam * align_value)


HISTORY_COLUMNS = ("iteration", "lr", "forecast_loss", "align_loss", "total_loss", "wall_ms")


@dataclass
class TrainHistory:
    iteration: list[int] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    forecast_loss: list[float] = field(default_factory=list)
    align_loss: list[float] = field(default_factory=list)
    total_loss: list[float] = field(default_factory=list)
    wall_ms: list[float] = field(default_factory=list)
    val_iteration: list[int] = field(default_factory=list)
    val_smape: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.iteration)

    def append(self, it: int, lr: float, rec: StepRecord, wall_ms: float) -> None:
        self.iteration.append(it)
        self.lr.append(lr)
        self.forecast_loss.append(rec.forecast_loss)
        self.align_loss.append(rec.align_loss)
        self.total_loss.append(rec.total_loss)
        self.wall_ms.append(wall_ms)

    def losses(self) -> np.ndarray:
        """Deterministic part of the history (everything but wall time)."""
        return np.array([self.lr, self.forecast_loss, self.align_loss, self.total_loss]).T

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.losses()))) and all(math.isfinite(v) for v in self.val_smape)

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(HISTORY_COLUMNS)
            for row in zip(self.iteration, self.lr, self.forecast_loss, self.align_loss, self.total_loss, self.wall_ms):
                w.writerow([row[0], *(repr(float(v)) for v in row[1:])])
        return path


def validation_smape(model: NBeatsModel, datasets: Sequence[DomainDataset], max_instances: int | None = None) -> float:
    from .evaluation import smape_metric

    scores = []
    for ds in datasets:
        X, Y = ds.split("val")
        if len(X) == 0:
            continue
        if max_instances is not None:
            X, Y = X[:max_instances], Y[:max_instances]
        scores.append(smape_metric(predict(model, X), Y))
    return float(np.mean(scores)) if scores else math.nan


def train_loop(
    datasets: Sequence[DomainDataset],
    model: NBeatsModel,
    cfg: TrainConfig,
    callback: Callable[[int, StepRecord], None] | None = None,
) -> tuple[NBeatsModel, TrainHistory]:
    """Run ``cfg.iterations`` alternating steps with seeded per-domain sampling."""
    if len(datasets) < 2:
        raise DataConfigError(f"training needs at least two source domains, got {len(datasets)}")
    for ds in datasets:
        if len(ds.train_idx) == 0:
            raise DataConfigError(f"train split of domain {ds.domain_id!r} is empty")
        if ds.alpha != model.alpha or ds.beta != model.beta:
            raise DataConfigError(
                f"domain {ds.domain_id!r} windows are ({ds.alpha}, {ds.beta}), model expects ({model.alpha}, {model.beta})"
            )
    rng = np.random.default_rng(cfg.seed)
    state = OptimState(shared=cfg.shared_optimizer)
    history = TrainHistory()
    for it in range(cfg.iterations):
        lr = cyclic_lr(it, cfg)
        batches = [sample_batch(ds, "train", cfg.batch_size, rng) for ds in datasets]
        t0 = time.perf_counter()
        rec = train_step(model, batches, cfg, state, lr, iteration=it)
        history.append(it, lr, rec, (time.perf_counter() - t0) * 1e3)
        if cfg.val_every and (it + 1) % cfg.val_every == 0:
            history.val_iteration.append(it + 1)
            history.val_smape.append(validation_smape(model, datasets, cfg.val_max_instances))
        if cfg.checkpoint_every and cfg.checkpoint_dir and (it + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(model, Path(cfg.checkpoint_dir) / f"checkpoint_{it + 1:06d}.npz")
        if callback is not None:
            callback(it, rec)
    return model, history


def fit_linear_baseline(params, datasets: Sequence[DomainDataset], cfg: TrainConfig) -> TrainHistory:
    """Plain SMAPE minimisation for NLinear / DLinear on pooled source batches."""
    from .model import linear_baseline_forward

    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    history = TrainHistory()
    ps = params.parameters()
    for it in range(cfg.iterations):
        lr = cyclic_lr(it, cfg)
        batches = [sample_batch(ds, "train", cfg.batch_size, rng) for ds in datasets]
        t0 = time.perf_counter()
        x = Tensor(np.concatenate([b[0].data for b in batches]))
        y = Tensor(np.concatenate([b[1].data for b in batches]))
        loss = smape_loss(linear_baseline_forward(x, params.kind, params), y)
        _check_finite(loss.item(), it, "forecast")
        adam_step(ps, nc.grad(loss, ps), state, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        history.append(it, lr, StepRecord(loss.item(), 0.0, loss.item()), (time.perf_counter() - t0) * 1e3)
    return history
