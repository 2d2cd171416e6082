"""Training and evaluation: AdamW with poly decay, cross-entropy, mIoU,
and single/multi-scale flip inference. Fully deterministic given a seed."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .data import IGNORE_INDEX, SegSample, augment
from .encoder import ModelConfig
from .model import ParamEntry, SegModel, build_model
from .ops import softmax_cross_entropy as cross_entropy  # public loss entry point
from .tensor import GradTape, Tensor, backward


class TrainingDiverged(RuntimeError):
    """Raised when the loss turns non-finite; the last checkpoint survives."""


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    max_iter: int
    power: float = 1.0
    warmup_iters: int = 0
    warmup_ratio: float = 0.1

    def __post_init__(self) -> None:
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.warmup_iters < 0:
            raise ValueError(f"warmup_iters must be >= 0, got {self.warmup_iters}")
        if not 0.0 < self.warmup_ratio <= 1.0:
            raise ValueError(f"warmup_ratio must be in (0, 1], got {self.warmup_ratio}")


def poly_lr(i: int, sched: LrSchedule) -> float:
    if i < 0 or i > sched.max_iter:
        raise ValueError(f"iteration {i} outside [0, {sched.max_iter}]")
    if i < sched.warmup_iters:
        frac = i / sched.warmup_iters
        return sched.base_lr * (sched.warmup_ratio + (1.0 - sched.warmup_ratio) * frac)
    return sched.base_lr * (1.0 - i / sched.max_iter) ** sched.power


@dataclass
class OptimState:
    """AdamW moments keyed by parameter name, plus the step counter."""

    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def init_optim(params: list[ParamEntry], betas=(0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.01) -> OptimState:
    state = OptimState(betas=betas, eps=eps, weight_decay=weight_decay)
    for e in params:
        state.m[e.name] = np.zeros_like(e.tensor.data)
        state.v[e.name] = np.zeros_like(e.tensor.data)
    return state


def adamw_step(params: list[ParamEntry], grads, state: OptimState, lr: float) -> None:
    """One in-place decoupled-weight-decay Adam update.

    Decay multiplies the parameter by (1 - lr*wd) before the moment update,
    and applies only to entries flagged for decay (conv and linear weights,
    not norms, biases, or layer scales).
    """
    b1, b2 = state.betas
    state.t += 1
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for e in params:
        g = grads.of(e.tensor)
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for parameter {e.name}")
        p = e.tensor.data
        if e.decay and state.weight_decay:
            p *= 1.0 - lr * state.weight_decay
        m = state.m[e.name]
        v = state.v[e.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


@dataclass
class IouResult:
    per_class: np.ndarray  # NaN for classes absent from both pred and gt
    mean: float


def confusion(preds, gts, num_classes: int, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """Accumulated (num_classes, num_classes) matrix, rows = ground truth."""
    mat = np.zeros((num_classes, num_classes), dtype=np.int64)
    for p, g in zip(preds, gts):
        p = np.asarray(p)
        g = np.asarray(g)
        if p.shape != g.shape:
            raise ValueError(f"prediction shape {p.shape} != label shape {g.shape}")
        keep = g != ignore_index
        pk = p[keep].astype(np.int64)
        gk = g[keep].astype(np.int64)
        if pk.size and (pk.min() < 0 or pk.max() >= num_classes):
            raise ValueError(f"prediction value outside [0, {num_classes})")
        if gk.size and (gk.min() < 0 or gk.max() >= num_classes):
            raise ValueError(f"label value outside [0, {num_classes}) and not ignored")
        mat += np.bincount(gk * num_classes + pk,
                           minlength=num_classes * num_classes
                           ).reshape(num_classes, num_classes)
    return mat


def miou(preds, gts, num_classes: int, ignore_index: int = IGNORE_INDEX) -> IouResult:
    mat = confusion(preds, gts, num_classes, ignore_index)
    tp = np.diag(mat).astype(np.float64)
    union = mat.sum(axis=0) + mat.sum(axis=1) - np.diag(mat)
    per_class = np.full(num_classes, np.nan)
    present = union > 0
    per_class[present] = tp[present] / union[present]
    mean = float(per_class[present].mean()) if present.any() else 0.0
    return IouResult(per_class, mean)


def _forward_at_scale(model: SegModel, image: Tensor, scale: float,
                      out_h: int, out_w: int, flip: bool) -> Tensor:
    x = image
    if flip:
        x = Tensor(np.ascontiguousarray(x.data[:, :, :, ::-1]))
    h = max(1, round(out_h * scale))
    w = max(1, round(out_w * scale))
    x = ops.bilinear_resize(x, h, w)
    logits = model.forward(x, training=False)
    logits = ops.bilinear_resize(logits, out_h, out_w)
    if flip:
        logits = Tensor(np.ascontiguousarray(logits.data[:, :, :, ::-1]))
    return logits


def ms_flip_inference(model: SegModel, image: Tensor, scales=(1.0,),
                      flip: bool = False) -> Tensor:
    """Average logits over scales (and mirrored copies); argmax downstream.

    With scales=(1.0,) and flip off this is bitwise equal to a plain
    forward pass: the resize short-circuits and the average has one term.
    """
    scales = tuple(scales)
    if not scales:
        raise ValueError("scales must be non-empty")
    if any(s <= 0 for s in scales):
        raise ValueError(f"scales must be positive, got {scales}")
    _, _, h, w = image.shape
    total = None
    count = 0
    for s in scales:
        for flipped in ((False, True) if flip else (False,)):
            logits = _forward_at_scale(model, image, s, h, w, flipped)
            total = logits.data if total is None else total + logits.data
            count += 1
    if count == 1:
        return Tensor(total)
    return Tensor(total / np.asarray(count, dtype=total.dtype))


def predict(model: SegModel, image: Tensor, scales=(1.0,), flip: bool = False) -> np.ndarray:
    logits = ms_flip_inference(model, image, scales, flip)
    return np.argmax(logits.data[0], axis=0)


def evaluate(model: SegModel, samples: list[SegSample], num_classes: int,
             scales=(1.0,), flip: bool = False) -> IouResult:
    preds = [predict(model, s.image, scales, flip) for s in samples]
    gts = [s.label for s in samples]
    return miou(preds, gts, num_classes)


@dataclass
class TrainResult:
    model: SegModel
    optim: OptimState
    metrics: list[str]
    final_miou: IouResult | None


def train(cfg: ModelConfig, train_set: list[SegSample], iters: int, batch: int,
          seed: int, *, lr: float = 6e-5, power: float = 1.0,
          warmup_iters: int = 0, warmup_ratio: float = 0.1,
          weight_decay: float = 0.01, crop: int = 128,
          val_set: list[SegSample] | None = None, eval_interval: int = 250,
          checkpoint_interval: int = 500, checkpoint_fn=None,
          log_fn=None) -> TrainResult:
    """Deterministic training loop; returns the model and the metric lines.

    Metric lines are tab-separated: iteration, loss, lr, and mIoU on eval
    iterations. ``checkpoint_fn(model, optim, tag)`` is called at the start,
    every checkpoint_interval iterations, and at the end. A non-finite loss
    aborts with TrainingDiverged; the last checkpoint stays on disk.
    """
    if iters < 0:
        raise ValueError(f"iters must be >= 0, got {iters}")
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    if not train_set:
        raise ValueError("training set is empty")
    ss = np.random.SeedSequence(seed).spawn(3)
    model_seed = int(ss[0].generate_state(1, np.uint32)[0])
    rng_order = np.random.default_rng(ss[1])
    rng_aug = np.random.default_rng(ss[2])

    model = build_model(cfg, model_seed)
    params = model.parameters()
    optim = init_optim(params, weight_decay=weight_decay)
    metrics: list[str] = []
    final_miou: IouResult | None = None

    def emit(line: str) -> None:
        metrics.append(line)
        if log_fn is not None:
            log_fn(line)

    def save(tag: str) -> None:
        if checkpoint_fn is not None:
            checkpoint_fn(model, optim, tag)

    if iters == 0:
        save("final")
        return TrainResult(model, optim, metrics, None)

    sched = LrSchedule(lr, iters, power, warmup_iters, warmup_ratio)
    save("init")
    for it in range(iters):
        idx = rng_order.integers(0, len(train_set), size=batch)
        images = np.empty((batch, 3, crop, crop), dtype=np.float32)
        labels = np.empty((batch, crop, crop), dtype=np.int64)
        for bi, j in enumerate(idx):
            s = augment(train_set[int(j)], rng_aug, crop)
            images[bi] = s.image.data[0]
            labels[bi] = s.label
        step_lr = poly_lr(it, sched)
        with GradTape() as tape:
            logits = model.forward(Tensor(images), training=True)
            loss = cross_entropy(logits, labels)
        loss_val = float(loss.item())
        if not np.isfinite(loss_val):
            raise TrainingDiverged(f"loss became non-finite at iteration {it}")
        grads = backward(tape, loss)
        adamw_step(params, grads, optim, step_lr)

        line = f"{it}\t{loss_val:.6f}\t{step_lr:.8f}"
        done = it + 1 == iters
        if val_set and (done or (eval_interval and (it + 1) % eval_interval == 0)):
            result = evaluate(model, val_set, cfg.num_classes)
            line += f"\t{result.mean:.4f}"
            if done:
                final_miou = result
        emit(line)
        if checkpoint_interval and (it + 1) % checkpoint_interval == 0 and not done:
            save(f"iter{it + 1}")
    save("final")
    return TrainResult(model, optim, metrics, final_miou)
