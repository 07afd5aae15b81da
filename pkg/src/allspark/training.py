"""Naive pseudo-label training: L = CE(labeled) + CE(unlabeled, argmax targets)."""
from __future__ import annotations

import csv
import io
import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .data_io import Sample, stack_batch
from .errors import ContractError, NumericError
from .memory import SemanticMemory
from .metrics import ConfusionMatrix, miou
from .model import Prediction, SegModel

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr_init: float = 0.05
    max_iterations: int = 400
    epochs: int = 0  # >0 overrides max_iterations: epochs over the unlabeled set
    poly_power: float = 0.9
    head_lr_mult: float = 5.0
    n_labeled: int = 8
    n_unlabeled: int = 8
    seed: int = 0
    ignore_index: int = 255
    eval_interval: int = 100
    momentum: float = 0.0
    weight_decay: float = 0.0
    grad_clip: float = 0.0  # >0 rescales the global gradient norm down to this value
    unsupervised: bool = True
    unsup_start: float = 0.25  # fraction of iterations trained on labels alone before pseudo labels kick in
    flip: bool = True
    dtype: str = "f32"
    # where unlabeled targets come from: "self" is the prediction being trained on the
    # unlabeled branch; "memory" re-reads the unlabeled batch through memory cross-attention
    pseudo_source: str = "self"

    def __post_init__(self):
        if self.lr_init <= 0 or self.max_iterations <= 0 or self.head_lr_mult <= 0:
            raise ContractError("lr_init, max_iterations and head_lr_mult must be positive")
        if self.n_labeled < 1 or self.n_unlabeled < 1:
            raise ContractError("batch sizes must be positive")
        if self.pseudo_source not in ("self", "memory"):
            raise ContractError(f"pseudo_source must be 'self' or 'memory', got {self.pseudo_source!r}")
        if self.dtype not in ("f32", "f64"):
            raise ContractError(f"dtype must be f32 or f64, got {self.dtype!r}")

    def iterations(self, n_unlabeled_samples: int) -> int:
        if self.epochs > 0:
            return self.epochs * max(1, -(-n_unlabeled_samples // self.n_unlabeled))
        return self.max_iterations


def poly_lr(lr_init: float, i: int, max_iter: int, power: float = 0.9) -> float:
    if i > max_iter:
        warnings.warn(f"iteration {i} past max {max_iter}; learning rate clamped to 0")
        return 0.0
    if i < 0:
        raise ContractError(f"negative iteration {i}")
    return lr_init * (1.0 - i / max_iter) ** power


def pseudo_label(pred: Prediction) -> np.ndarray:
    """Per-pixel argmax (first max wins), shaped like the prediction's leading dims + (H, W)."""
    p = pred.probs.data
    return np.argmax(p, axis=-1).reshape(*p.shape[:-2], pred.height, pred.width)


def total_loss(pred_l: Prediction, y, pred_u: Optional[Prediction] = None, y_hat=None, ignore_index: Optional[int] = 255):
    """Returns (L, L_s, L_u); L_u is None without an unlabeled branch."""
    loss_s = T.cross_entropy_mean(pred_l.probs, np.asarray(y).reshape(pred_l.probs.shape[:-1]), ignore_index)
    if pred_u is None:
        return loss_s, loss_s, None
    if isinstance(y_hat, T.Tensor) and y_hat.requires_grad:
        raise ContractError("pseudo labels must be detached")
    targets = np.asarray(getattr(y_hat, "data", y_hat)).reshape(pred_u.probs.shape[:-1])
    loss_u = T.cross_entropy_mean(pred_u.probs, targets, ignore_index)
    return T.add(loss_s, loss_u), loss_s, loss_u


class SGD:
    """Plain SGD over named parameter groups, each with its own LR multiplier."""

    def __init__(self, groups: dict, lr_mult: dict, momentum: float = 0.0, weight_decay: float = 0.0,
                 grad_clip: float = 0.0):
        self.groups = groups
        self.lr_mult = lr_mult
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self._buf: dict[int, np.ndarray] = {}

    def group_lrs(self, lr: float) -> dict[str, float]:
        return {g: lr * self.lr_mult.get(g, 1.0) for g in self.groups}

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64)))
                                 for ps in self.groups.values() for p in ps if p.grad is not None)))

    def step(self, lr: float) -> dict[str, float]:
        lrs = self.group_lrs(lr)
        scale = 1.0
        if self.grad_clip > 0:
            norm = self.grad_norm()
            if norm > self.grad_clip:
                scale = self.grad_clip / norm
        for g, params in self.groups.items():
            for p in params:
                if p.grad is None:
                    continue
                d = p.grad if scale == 1.0 else p.grad * scale
                if self.weight_decay:
                    d = d + self.weight_decay * p.data
                if self.momentum:
                    buf = self._buf.get(id(p))
                    buf = d if buf is None else self.momentum * buf + d
                    self._buf[id(p)] = buf
                    d = buf
                p.data = (p.data - lrs[g] * d).astype(p.data.dtype)
        return lrs

    def zero_grad(self) -> None:
        for params in self.groups.values():
            for p in params:
                p.grad = None


@dataclass
class StepReport:
    iteration: int
    loss_s: float
    loss_u: float
    lr: float
    lr_head: float
    occupancy: list = field(default_factory=list)


class CyclicSampler:
    """Draws fixed-size batches from a reshuffled cycle over the indices."""

    def __init__(self, n: int, batch: int, rng: np.random.Generator):
        self.n, self.batch, self.rng = n, batch, rng
        self._order = np.empty(0, dtype=np.int64)

    def next(self) -> np.ndarray:
        while self._order.size < self.batch:
            self._order = np.concatenate([self._order, self.rng.permutation(self.n)])
        out, self._order = self._order[: self.batch], self._order[self.batch :]
        return out


def _augment(images, masks, rng, enabled):
    if not enabled:
        return images, masks
    flip = rng.random(images.shape[0]) < 0.5
    images = images.copy()
    images[flip] = images[flip][..., ::-1]
    if masks is not None:
        masks = masks.copy()
        masks[flip] = masks[flip][..., ::-1]
    return images, masks


def _diagnose(model: SegModel, loss_s, loss_u) -> str:
    bad = [k for k, v in model.params.items() if not np.isfinite(v.data).all()]
    return f"non-finite loss (loss_s={float(loss_s)}, loss_u={loss_u}); non-finite params: {bad or 'none'}"


def train_step(model: SegModel, memory: Optional[SemanticMemory], batch_l, batch_u, config: TrainConfig, i: int,
               optimizer: SGD, max_iter: Optional[int] = None) -> StepReport:
    """One iteration: forward, pseudo-label, loss, backward, SGD update.

    batch_l is (images, masks); batch_u is images, or None for supervised-only.
    """
    I = max_iter or config.max_iterations
    if i >= I:
        raise ContractError(f"iteration {i} is not below max_iterations {I}")
    x_l, y_l = batch_l
    use_u = batch_u is not None and config.unsupervised and i >= int(config.unsup_start * I)
    y_hat = None
    try:
        if use_u and config.pseudo_source == "memory" and memory is not None:
            with T.no_grad():
                p_mem, _, _ = model.forward_train(batch_u, batch_u, memory, update_memory=False)
            y_hat = pseudo_label(p_mem)
        if batch_u is None:
            pred_l = model.forward_supervised(x_l)
            pred_u = None
        else:
            pred_l, pred_u, _ = model.forward_train(x_l, batch_u, memory)

        if use_u and y_hat is None:
            y_hat = pseudo_label(pred_u)
        loss, loss_s, loss_u = total_loss(pred_l, y_l, pred_u if use_u else None, y_hat, config.ignore_index)
    except NumericError as e:
        raise NumericError(f"iteration {i}: {e}; {_diagnose(model, float('nan'), None)}") from e
    if not np.isfinite(loss.data):
        raise NumericError(_diagnose(model, loss_s.data, None if loss_u is None else float(loss_u.data)))

    optimizer.zero_grad()
    T.backward(loss)
    lr = poly_lr(config.lr_init, i, I, config.poly_power)
    lrs = optimizer.step(lr)
    return StepReport(
        i,
        float(loss_s.data),
        0.0 if loss_u is None else float(loss_u.data),
        lrs["backbone"],
        lrs["head"],
        memory.occupancy() if memory is not None else [],
    )


@dataclass
class MetricsReport:
    miou: float
    per_class: np.ndarray
    confusion: ConfusionMatrix


def evaluate(model: SegModel, dataset: Sequence[Sample], ignore_index: Optional[int] = 255, batch: int = 32) -> MetricsReport:
    if len(dataset) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    cm = ConfusionMatrix(model.config.num_classes)
    with T.no_grad():
        for start in range(0, len(dataset), batch):
            images, masks = stack_batch(dataset[start : start + batch])
            pred = model.forward_infer(images)
            cm.accumulate(pseudo_label(pred), masks, ignore_index)
    m, per_class = miou(cm)
    return MetricsReport(m, per_class, cm)


def _fmt(x: float) -> str:
    return "nan" if np.isnan(x) else f"{x:.6f}"


@dataclass
class FitResult:
    reports: list
    metrics: Optional[MetricsReport]
    csv_text: str
    memory: Optional[SemanticMemory]


def fit(model: SegModel, labeled: Sequence[Sample], unlabeled: Sequence[Sample], config: TrainConfig,
        val: Sequence[Sample] = (), progress=None) -> FitResult:
    """Full training run. Evaluates on `val` every eval_interval steps and at the end.

    Without unlabeled data use, and with AllSpark off, the unlabeled flow is skipped.
    """
    rng = np.random.default_rng(config.seed)
    supervised_only = not config.unsupervised and not model.config.allspark
    if not unlabeled and not supervised_only:
        raise ContractError("semi-supervised training needs unlabeled samples")
    I = config.iterations(len(unlabeled))
    optimizer = SGD(model.groups(), {"backbone": 1.0, "head": config.head_lr_mult}, config.momentum, config.weight_decay,
                    config.grad_clip)
    memory = model.new_memory(seed=config.seed) if model.config.allspark else None
    lab_x, lab_y = stack_batch(labeled)
    unl_x = stack_batch(unlabeled)[0] if unlabeled else None
    s_l = CyclicSampler(len(labeled), config.n_labeled, rng)
    s_u = CyclicSampler(len(unlabeled), config.n_unlabeled, rng) if unlabeled else None

    K = model.config.num_classes
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["iteration", "loss_s", "loss_u", "lr", "miou", *[f"iou_{k}" for k in range(K)]])
    reports, metrics = [], None
    for i in range(I):
        idx = s_l.next()
        xl, yl = _augment(lab_x[idx], lab_y[idx], rng, config.flip)
        xu = None
        if not supervised_only:
            xu, _ = _augment(unl_x[s_u.next()], None, rng, config.flip)
        rep = train_step(model, memory, (xl, yl), xu, config, i, optimizer, I)
        reports.append(rep)
        if progress is not None:
            progress(rep)
        last = i == I - 1
        if val and ((i + 1) % config.eval_interval == 0 or last):
            metrics = evaluate(model, val, config.ignore_index)
            writer.writerow([i + 1, _fmt(rep.loss_s), _fmt(rep.loss_u), _fmt(rep.lr), _fmt(metrics.miou),
                             *[_fmt(v) for v in metrics.per_class]])
            log.info("iter %d loss_s %.4f loss_u %.4f miou %.4f", i + 1, rep.loss_s, rep.loss_u, metrics.miou)
    return FitResult(reports, metrics, buf.getvalue(), memory)
