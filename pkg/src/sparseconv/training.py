"""Loss, optimisers, plateau schedule, augmentation and the training loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .data import Sample
from .network import DvmnModel, forward, load_checkpoint, save_checkpoint
from .tensor import Tape, Tensor, absolute, add, backward, diff, gate, mean, mul, square, sub, total

LR_FLOOR = 1e-6


@dataclass
class LossConfig:
    lambda_smooth: float = 0.1

    def __post_init__(self):
        if self.lambda_smooth < 0:
            raise ValueError("lambda_smooth must be >= 0")


def completion_loss(pred: Tensor, gt, gt_mask, cfg: LossConfig = LossConfig()) -> Tensor:
    """Masked MSE against ground truth plus an L1 smoothness penalty on ``pred``.

    The smoothness term is the mean absolute first-order difference along
    each spatial axis (summed over the axes that have more than one pixel).
    """
    gt = np.asarray(gt, dtype=pred.dtype)
    gt_mask = np.asarray(gt_mask)
    if gt.shape != pred.shape or gt_mask.shape[-2:] != pred.shape[-2:]:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    count = float(np.broadcast_to(gt_mask, pred.shape).sum())
    if count == 0:
        raise ValueError("ground-truth mask is empty; nothing to supervise")
    err = gate(sub(pred, gt), gt_mask)
    loss = mul(total(square(err)), 1.0 / count)
    if cfg.lambda_smooth > 0:
        for axis in (-2, -1):
            if pred.shape[axis] > 1:
                loss = add(loss, mul(mean(absolute(diff(pred, axis))), cfg.lambda_smooth))
    return loss


# ---------------------------------------------------------------------------
# Optimiser
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    mode: str = "adam"
    lr: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: Optional[float] = None
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("adam", "adamw"):
            raise ValueError(f"unknown optimiser {self.mode!r}")
        if self.weight_decay is None:
            self.weight_decay = 0.01 if self.mode == "adamw" else 0.0


def optimizer_step(state: OptimizerState, params: Dict[str, Tensor],
                   grads: Dict[str, np.ndarray]) -> None:
    """One bias-corrected Adam step; AdamW first applies decoupled weight decay.

    Parameters are updated by replacing ``.data``, so every layer holding
    the same tensor (shared SISL branches) sees the update.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        data = p.data
        if state.mode == "adamw" and state.weight_decay:
            data = data * (1.0 - state.lr * state.weight_decay)
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (data - update).astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# Plateau schedule
# ---------------------------------------------------------------------------

def plateau_schedule(history: Sequence[float], lr: float, patience: int = 3,
                     factor: float = 0.5, floor: float = LR_FLOOR) -> float:
    """Learning rate after the latest validation score in ``history``.

    Replays the history: a score counts as an improvement only if it is
    strictly below the best so far. Once more than ``patience`` evaluations
    pass without improvement the rate is multiplied by ``factor`` and the
    counter restarts. Returns ``lr * factor`` (clamped to ``floor``) when the
    most recent evaluation triggers a reduction, else ``lr``.
    """
    if not 0 < factor < 1:
        raise ValueError("factor must lie in (0, 1)")
    if patience < 1:
        raise ValueError("patience must be >= 1")
    best = math.inf
    bad = 0
    reduced = False
    for score in history:
        reduced = False
        if score < best:
            best, bad = score, 0
        else:
            bad += 1
            if bad > patience:
                reduced, bad = True, 0
    return max(lr * factor, floor) if reduced else lr


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

@dataclass
class AugmentConfig:
    flip_h: bool = True
    flip_v: bool = True
    rot_max_deg: float = 5.0
    noise_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.rot_max_deg < 0 or self.noise_sigma < 0:
            raise ValueError("rotation range and noise sigma must be >= 0")


def _rotate(a: np.ndarray, angle: float, order: int) -> np.ndarray:
    return ndimage.rotate(a, angle, axes=(-1, -2), reshape=False, order=order,
                          mode="constant", cval=0.0, prefilter=False)


def augment(sample: Sample, cfg: AugmentConfig, key: Sequence[int] = ()) -> Sample:
    """Apply one random flip/rotation to all planes and noise to the image.

    The random draw depends only on ``cfg.seed`` and ``key`` (e.g. epoch and
    sample index), so results do not depend on call order.
    """
    rng = np.random.default_rng([cfg.seed, *key])
    do_h = cfg.flip_h and rng.random() < 0.5
    do_v = cfg.flip_v and rng.random() < 0.5
    angle = rng.uniform(-cfg.rot_max_deg, cfg.rot_max_deg) if cfg.rot_max_deg > 0 else 0.0
    planes = [sample.depth, sample.mask, sample.image, sample.gt, sample.gt_mask]
    if do_h:
        planes = [p[..., ::-1] for p in planes]
    if do_v:
        planes = [p[..., ::-1, :] for p in planes]
    depth, mask, image, gt, gt_mask = [np.ascontiguousarray(p) for p in planes]
    if angle != 0.0:
        mask = np.rint(_rotate(mask, angle, 0))
        gt_mask = np.rint(_rotate(gt_mask, angle, 0))
        depth = np.where(mask > 0, _rotate(depth, angle, 0), 0.0)
        gt = np.where(gt_mask > 0, _rotate(gt, angle, 0), 0.0)
        # nearest sampling can land a valid mask pixel on a zero depth; drop those
        mask = (depth > 0).astype(mask.dtype)
        gt_mask = (gt > 0).astype(gt_mask.dtype)
        image = np.clip(_rotate(image, angle, 1), 0.0, 1.0)
    if cfg.noise_sigma > 0:
        image = np.clip(image + rng.normal(0.0, cfg.noise_sigma, size=image.shape), 0.0, 1.0)
    return Sample(depth, mask, image, gt, gt_mask)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

LOG_HEADER = ("epoch", "step", "lr", "train_loss", "val_rmse_mm", "val_mae_mm")
LOG_VERSION = "# sparseconv-train-log v1"


@dataclass
class ScheduleConfig:
    patience: int = 3
    factor: float = 0.5
    enabled: bool = True


@dataclass
class EpochRecord:
    epoch: int
    step: int
    lr: float
    train_loss: float
    val_rmse_mm: float
    val_mae_mm: float

    def line(self) -> str:
        return "\t".join([str(self.epoch), str(self.step), repr(self.lr), repr(self.train_loss),
                          repr(self.val_rmse_mm), repr(self.val_mae_mm)])


@dataclass
class TrainResult:
    model: DvmnModel
    log: List[EpochRecord]
    step_losses: List[float]
    optimizer: OptimizerState
    best_val_rmse_mm: float


class TrainingDiverged(RuntimeError):
    """Raised when the loss turns non-finite; the model holds the last good weights."""


def read_log(path) -> List[EpochRecord]:
    records = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#") or line.startswith("epoch") or not line.strip():
                continue
            e, s, lr, tl, rm, ma = line.rstrip("\n").split("\t")
            records.append(EpochRecord(int(e), int(s), float(lr), float(tl), float(rm), float(ma)))
    return records


def stack(samples: Sequence[Sample]) -> Sample:
    return Sample(*(np.stack([getattr(s, f) for s in samples])
                    for f in ("depth", "mask", "image", "gt", "gt_mask")))


def predict(model: DvmnModel, samples: Sequence[Sample], batch_size: int = 4) -> np.ndarray:
    """Inference-mode predictions in metres, shape (N, 1, H, W)."""
    was_training = model.training
    model.eval()
    try:
        outs = []
        for i in range(0, len(samples), batch_size):
            b = stack(samples[i:i + batch_size])
            outs.append(forward(model, b.depth, b.mask, b.image).data)
        return np.concatenate(outs)
    finally:
        model.train(was_training)


def depth_errors(pred: np.ndarray, samples: Sequence[Sample]) -> Tuple[float, float]:
    """Pooled RMSE and MAE (mm) over every observed ground-truth pixel."""
    gt = np.stack([s.gt for s in samples]).astype(np.float64)
    valid = np.stack([s.gt_mask for s in samples]) > 0
    err = (pred.astype(np.float64) - gt)[valid] * 1000.0
    return float(np.sqrt(np.mean(err ** 2))), float(np.mean(np.abs(err)))


def _state_arrays(opt: OptimizerState) -> Dict[str, np.ndarray]:
    out = {}
    for name, arr in opt.m.items():
        out[f"optim.m.{name}"] = arr
        out[f"optim.v.{name}"] = opt.v[name]
    return out


def save_training_state(model: DvmnModel, opt: OptimizerState, path, epoch: int,
                        history: List[float], step_losses: List[float],
                        log: List[EpochRecord], best: float) -> None:
    meta = {"epoch": epoch, "history": history, "step_losses": step_losses,
            "log": [r.line() for r in log], "best": best,
            "optimizer": {"mode": opt.mode, "lr": opt.lr, "betas": list(opt.betas),
                          "eps": opt.eps, "weight_decay": opt.weight_decay, "step": opt.step}}
    save_checkpoint(model, path, extra_arrays=_state_arrays(opt), meta=meta)


def load_training_state(path):
    """Inverse of :func:`save_training_state`."""
    model, meta, extra = load_checkpoint(path)
    o = meta["optimizer"]
    opt = OptimizerState(o["mode"], o["lr"], tuple(o["betas"]), o["eps"], o["weight_decay"],
                         o["step"])
    for key, arr in extra.items():
        _, which, name = key.split(".", 2)
        (opt.m if which == "m" else opt.v)[name] = arr
    log = [EpochRecord(*(int(v) if i < 2 else float(v) for i, v in enumerate(l.split("\t"))))
           for l in meta["log"]]
    return model, opt, meta, log


def _emit_log(sink, record: EpochRecord) -> None:
    if sink is None:
        return
    if callable(sink):
        sink(record)
    else:
        sink.write(record.line() + "\n")
        sink.flush()


def train_loop(model: DvmnModel, dataset: Sequence[Sample], epochs: int, batch_size: int = 4,
               loss_cfg: LossConfig = LossConfig(), optimizer: Optional[OptimizerState] = None,
               schedule: ScheduleConfig = ScheduleConfig(),
               augment_cfg: Optional[AugmentConfig] = None, log_sink=None,
               val_dataset: Optional[Sequence[Sample]] = None, seed: int = 0,
               checkpoint_dir=None, resume_from=None, shuffle: bool = True) -> TrainResult:
    """Train ``model`` in place.

    Each epoch walks the dataset in a seed-determined order, logs the mean
    training loss and validation RMSE/MAE (mm), steps the plateau schedule on
    validation RMSE, and (with ``checkpoint_dir``) writes ``last.ckpt`` plus
    ``best.ckpt`` whenever validation RMSE improves. ``resume_from`` restarts
    from a ``last.ckpt``.
    """
    if not dataset:
        raise ValueError("training needs at least one sample")
    val = list(val_dataset) if val_dataset else list(dataset)
    opt = optimizer if optimizer is not None else OptimizerState()
    history: List[float] = []
    step_losses: List[float] = []
    log: List[EpochRecord] = []
    best = math.inf
    start = 0
    if resume_from is not None:
        loaded, opt, meta, log = load_training_state(resume_from)
        for name, p in loaded.params.items():
            model.params[name].data = p.data
        for name, b in loaded.buffers.items():
            model.buffers[name][...] = b
        start, history = meta["epoch"], list(meta["history"])
        step_losses, best = list(meta["step_losses"]), meta["best"]
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)

    params = model.params
    names = {id(t): n for n, t in params.items()}
    last_good = {n: p.data.copy() for n, p in params.items()}
    n = len(dataset)
    for epoch in range(start, epochs):
        order = np.random.default_rng([seed, epoch]).permutation(n) if shuffle else np.arange(n)
        epoch_losses = []
        model.train()
        for first in range(0, n, batch_size):
            idx = order[first:first + batch_size]
            batch = [dataset[i] for i in idx]
            if augment_cfg is not None:
                batch = [augment(s, augment_cfg, key=(epoch, int(i))) for s, i in zip(batch, idx)]
            b = stack(batch)
            try:
                with Tape() as tape:
                    pred = forward(model, b.depth, b.mask, b.image)
                    loss = completion_loss(pred, b.gt, b.gt_mask, loss_cfg)
                value = loss.item()
            except FloatingPointError:
                value = math.nan
            if not math.isfinite(value):
                for name, arr in last_good.items():
                    params[name].data = arr
                raise TrainingDiverged(f"loss became {value} at epoch {epoch}")
            grads = backward(tape, loss)
            named = {names[id(t)]: g for t, g in grads.items() if id(t) in names}
            last_good = {k: p.data for k, p in params.items()}
            optimizer_step(opt, params, named)
            epoch_losses.append(value)
            step_losses.append(value)
        rmse, mae = depth_errors(predict(model, val, batch_size), val)
        history.append(rmse)
        record = EpochRecord(epoch + 1, opt.step, opt.lr, float(np.mean(epoch_losses)), rmse, mae)
        log.append(record)
        _emit_log(log_sink, record)
        if schedule.enabled:
            opt.lr = plateau_schedule(history, opt.lr, schedule.patience, schedule.factor)
        improved = rmse < best
        best = min(best, rmse)
        if ckpt is not None:
            save_training_state(model, opt, ckpt / "last.ckpt", epoch + 1, history, step_losses,
                                log, best)
            if improved:
                save_checkpoint(model, ckpt / "best.ckpt", meta={"epoch": epoch + 1,
                                                                 "val_rmse_mm": rmse})
    model.eval()
    return TrainResult(model, log, step_losses, opt, best)
