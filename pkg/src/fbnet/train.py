"""Optimization, evaluation metrics, the training loop, and the ablation harness."""

from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import (DataConfig, IGNORE_INDEX, Sample, augment, downsample_labels,
                   eval_resize)
from .errors import ConfigError, DataError, NumericError, ShapeError
from .kernels import thread_cap
from .model import FBNet, ModelConfig, count_parameters, save_model
from .nn import Ctx
from .tensor import Tensor


@dataclass
class OptimConfig:
    base_lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_power: float = 0.9
    backbone_lr_multiplier: float = 0.1
    epochs: int = 50
    batch_size: int = 8
    aux_weight: float = 0.4

    def __post_init__(self):
        if min(self.base_lr, self.epochs, self.batch_size) <= 0 or self.aux_weight < 0:
            raise ConfigError("base_lr, epochs and batch_size must be positive")
        if not 0 < self.lr_power <= 1:
            raise ConfigError(f"lr_power must be in (0,1], got {self.lr_power}")
        if self.momentum < 0 or self.weight_decay < 0 or self.backbone_lr_multiplier <= 0:
            raise ConfigError("momentum/weight_decay must be >= 0, lr multiplier > 0")


@dataclass
class MetricsRecord:
    epoch: int
    main_loss: float
    aux_loss: float | None
    lr: float
    miou_class: float
    miou_sample: float
    pix_acc: float
    seconds: float


def poly_lr(iteration: int, total_iter: int, base_lr: float, power: float = 0.9) -> float:
    """base_lr * (1 - iter/total_iter)^power; monotone non-increasing."""
    if iteration < 0 or total_iter <= 0 or iteration > total_iter:
        raise ConfigError(f"poly_lr: need 0 <= iter <= total_iter, got {iteration}/{total_iter}")
    return base_lr * (1.0 - iteration / total_iter) ** power


class SGD:
    """Momentum SGD with L2 weight decay and a reduced backbone learning rate."""

    def __init__(self, named_params, cfg: OptimConfig, backbone_prefix: str = "backbone."):
        self.cfg = cfg
        self.params = [(name, t, name.startswith(backbone_prefix)) for name, t in named_params]
        self.velocity = [np.zeros_like(t.data) for _, t, _ in self.params]

    def step(self, lr: float) -> None:
        for (name, p, is_backbone), v in zip(self.params, self.velocity):
            if p.grad is None:
                g = np.zeros_like(p.data)
            else:
                g = p.grad
                if not np.all(np.isfinite(g)):
                    raise NumericError(f"non-finite gradient in parameter {name}")
            v *= self.cfg.momentum
            v += g + self.cfg.weight_decay * p.data
            p.data -= (lr * (self.cfg.backbone_lr_multiplier if is_backbone else 1.0)) * v

    def zero_grad(self) -> None:
        for _, p, _ in self.params:
            p.zero_grad()


def sgd_step(optimizer: SGD, lr: float) -> None:
    optimizer.step(lr)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def confusion_matrix(pred: np.ndarray, label: np.ndarray, num_classes: int,
                     ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """counts[c, p] = pixels with true class c predicted as p; ignore excluded."""
    pred = np.asarray(pred)
    label = np.asarray(label)
    if pred.shape != label.shape:
        raise ShapeError(f"confusion_matrix: pred {pred.shape} != label {label.shape}")
    valid = label != ignore_index
    lv = label[valid].astype(np.int64)
    pv = pred[valid].astype(np.int64)
    if lv.size and (lv.min() < 0 or lv.max() >= num_classes):
        raise DataError(f"labels outside 0..{num_classes - 1}")
    if pv.size and (pv.min() < 0 or pv.max() >= num_classes):
        raise DataError(f"predictions outside 0..{num_classes - 1}")
    return np.bincount(lv * num_classes + pv,
                       minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def _class_mean_iou(conf: np.ndarray) -> float:
    tp = np.diag(conf).astype(np.float64)
    denom = conf.sum(axis=1) + conf.sum(axis=0) - np.diag(conf)
    present = denom > 0
    if not present.any():
        raise NumericError("mIoU over an empty evaluation set")
    return float((tp[present] / denom[present]).mean())


def miou(conf_or_samples, mode: str = "class_mean") -> float:
    """Mean IoU, either from one aggregate matrix or averaged over per-sample matrices.

    Classes absent from both prediction and label are excluded from the mean.
    """
    if mode == "class_mean":
        return _class_mean_iou(np.asarray(conf_or_samples))
    if mode == "sample_mean":
        vals = []
        for conf in conf_or_samples:
            conf = np.asarray(conf)
            if conf.sum() == 0:
                continue
            vals.append(_class_mean_iou(conf))
        if not vals:
            raise NumericError("mIoU over an empty evaluation set")
        return float(np.mean(vals))
    raise ConfigError(f"miou mode must be class_mean or sample_mean, got {mode!r}")


def pixel_accuracy(conf: np.ndarray) -> float:
    conf = np.asarray(conf)
    total = conf.sum()
    if total == 0:
        raise NumericError("pixel accuracy over an empty evaluation set")
    return float(np.trace(conf) / total)


def predict_labels(logits: np.ndarray) -> np.ndarray:
    """Argmax over the class axis; exact ties go to the lowest class index."""
    return np.argmax(logits, axis=1).astype(np.int32)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _pad_to_multiple(image: np.ndarray, mult: int = 8) -> np.ndarray:
    h, w = image.shape[1], image.shape[2]
    ph = (-h) % mult
    pw = (-w) % mult
    if ph == 0 and pw == 0:
        return image
    return np.pad(image, ((0, 0), (0, ph), (0, pw)))


def _eval_one(model: FBNet, sample: Sample, base_size: int, num_classes: int) -> np.ndarray:
    with T.no_grad():
        s = eval_resize(sample, base_size)
        h, w = s.labels.shape
        img = _pad_to_multiple(s.image)
        out = model.forward(Tensor(img[None], dtype=model.dtype))
        logits = T.bilinear_upsample(out.main_logits, 4).data[0, :, :h, :w]
        pred = predict_labels(logits[None])[0]
    return confusion_matrix(pred, s.labels, num_classes)


def evaluate(model: FBNet, samples: list[Sample], base_size: int) -> dict:
    """Full-resolution evaluation: logits are upsampled x4 to the label grid.

    Runs forward passes in parallel worker threads when FBNET_THREADS > 1;
    integer confusion counts make the aggregation order-independent.
    """
    if not samples:
        raise NumericError("evaluate: empty evaluation set")
    num_classes = model.cfg.num_classes
    workers = min(thread_cap() or 1, len(samples))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            confs = list(pool.map(lambda s: _eval_one(model, s, base_size, num_classes), samples))
    else:
        confs = [_eval_one(model, s, base_size, num_classes) for s in samples]
    agg = np.sum(confs, axis=0)
    return {
        "miou_class": miou(agg, "class_mean"),
        "miou_sample": miou(confs, "sample_mean"),
        "pix_acc": pixel_accuracy(agg),
        "confusion": agg,
    }


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def split_train_val(samples: list[Sample], val_fraction: float) -> tuple[list[Sample], list[Sample]]:
    """Deterministic split by sorted id; val_fraction 0 validates on the train set."""
    ordered = sorted(samples, key=lambda s: s.id)
    n_val = int(round(len(ordered) * val_fraction))
    if n_val == 0:
        return ordered, ordered
    return ordered[:-n_val], ordered[-n_val:]


def _make_batch(samples: list[Sample], dtype) -> tuple[Tensor, np.ndarray]:
    extents = {s.labels.shape for s in samples}
    if len(extents) != 1:
        raise DataError(f"cannot batch samples of mixed extents {sorted(extents)}; "
                        "enable augmentation or pre-size the dataset")
    images = np.stack([s.image for s in samples]).astype(dtype)
    labels = np.stack([s.labels for s in samples])
    return Tensor(images, dtype=dtype), labels


def train_loop(model: FBNet, samples: list[Sample], optim_cfg: OptimConfig,
               data_cfg: DataConfig, seed: int, checkpoint_path=None,
               ckpt_extra: dict | None = None, log=None):
    """Train with per-iteration poly LR decay; returns (records, best).

    Each epoch shuffles (seeded), augments with per-sample rng streams derived
    from (seed, epoch, sample index), and evaluates on the held-out split.
    ``best`` tracks the earliest epoch attaining the maximum validation
    class-mean mIoU; the checkpoint on disk always corresponds to it.  A
    non-finite loss or gradient aborts with the last-good checkpoint retained.
    """
    if not samples:
        raise DataError("train_loop: empty dataset")
    train_set, val_set = split_train_val(samples, data_cfg.val_fraction)
    steps_per_epoch = (len(train_set) + optim_cfg.batch_size - 1) // optim_cfg.batch_size
    total_iter = optim_cfg.epochs * steps_per_epoch
    opt = SGD(list(model.named_parameters()), optim_cfg)

    records: list[MetricsRecord] = []
    best = {"epoch": 0, "miou_class": -1.0, "miou_sample": 0.0, "pix_acc": 0.0}
    it = 0
    for epoch in range(1, optim_cfg.epochs + 1):
        t0 = time.perf_counter()
        shuffle_rng = np.random.default_rng(np.random.SeedSequence([seed, 33, epoch]))
        order = shuffle_rng.permutation(len(train_set))
        main_losses, aux_losses = [], []
        lr = poly_lr(it, total_iter, optim_cfg.base_lr, optim_cfg.lr_power)
        for step in range(steps_per_epoch):
            idxs = order[step * optim_cfg.batch_size:(step + 1) * optim_cfg.batch_size]
            batch = []
            for i in idxs:
                if data_cfg.augment:
                    rng_i = np.random.default_rng(np.random.SeedSequence([seed, 11, epoch, int(i)]))
                    batch.append(augment(train_set[i], rng_i, data_cfg))
                else:
                    batch.append(train_set[i])
            images, labels = _make_batch(batch, model.dtype)
            drop_rng = np.random.default_rng(np.random.SeedSequence([seed, 22, epoch, step]))
            ctx = Ctx(training=True, rng=drop_rng)
            out = model.forward(images, ctx)
            loss = T.cross_entropy(out.main_logits, Tensor(downsample_labels(labels, 4), dtype=np.int32))
            main_losses.append(loss.item())
            if out.aux_logits is not None:
                aux = T.cross_entropy(out.aux_logits, Tensor(downsample_labels(labels, 8), dtype=np.int32))
                aux_losses.append(aux.item())
                loss = loss + aux * optim_cfg.aux_weight
            loss.check_finite("training loss")
            T.backward(loss)
            lr = poly_lr(it, total_iter, optim_cfg.base_lr, optim_cfg.lr_power)
            opt.step(lr)
            opt.zero_grad()
            it += 1

        stats = evaluate(model, val_set, data_cfg.base_size)
        rec = MetricsRecord(
            epoch=epoch,
            main_loss=float(np.mean(main_losses)),
            aux_loss=float(np.mean(aux_losses)) if aux_losses else None,
            lr=lr,
            miou_class=stats["miou_class"],
            miou_sample=stats["miou_sample"],
            pix_acc=stats["pix_acc"],
            seconds=time.perf_counter() - t0,
        )
        records.append(rec)
        if log:
            log(f"epoch {epoch:3d}/{optim_cfg.epochs}  loss={rec.main_loss:.4f}  lr={rec.lr:.5f}  "
                f"miou={rec.miou_class * 100:.2f}  acc={rec.pix_acc * 100:.2f}")
        if stats["miou_class"] > best["miou_class"]:
            best = {"epoch": epoch, "miou_class": stats["miou_class"],
                    "miou_sample": stats["miou_sample"], "pix_acc": stats["pix_acc"]}
            if checkpoint_path is not None:
                extra = {"eval_base": str(data_cfg.base_size), "best_epoch": str(epoch)}
                if ckpt_extra:
                    extra.update(ckpt_extra)
                save_model(checkpoint_path, model, extra)
    return records, best


def write_metrics_csv(path, records: list[MetricsRecord]) -> None:
    """Per-epoch CSV; mIoU and accuracy are written as percentages."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "main_loss", "aux_loss", "lr", "miou_class",
                    "miou_sample", "pix_acc", "seconds"])
        for r in records:
            w.writerow([r.epoch, f"{r.main_loss:.6f}",
                        "" if r.aux_loss is None else f"{r.aux_loss:.6f}",
                        f"{r.lr:.8f}", f"{r.miou_class * 100:.4f}",
                        f"{r.miou_sample * 100:.4f}", f"{r.pix_acc * 100:.4f}",
                        f"{r.seconds:.3f}"])


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------

STRATEGY_LABELS = {
    "SAM": "SAM",
    "CAM": "CAM",
    "FF": "FF",
    "PARALLEL": "CAM+SAM (parallel)",
    "SERIES": "CAM+SAM (series)",
    "FULL": "FF+SAM+CAM",
}
ABLATION_ORDER = ("SAM", "CAM", "FF", "PARALLEL", "SERIES", "FULL")


def ablation_run(samples: list[Sample], model_cfg: ModelConfig, optim_cfg: OptimConfig,
                 data_cfg: DataConfig, seed: int, out_dir, log=None) -> list[dict]:
    """Train every strategy with identical seed/data/optimizer; write the summary CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for strategy in ABLATION_ORDER:
        cfg = replace(model_cfg, strategy=strategy)
        model = FBNet(cfg, np.random.default_rng(np.random.SeedSequence([seed, 7])))
        run_dir = out_dir / strategy.lower()
        run_dir.mkdir(parents=True, exist_ok=True)
        if log:
            log(f"[{STRATEGY_LABELS[strategy]}] training...")
        records, best = train_loop(model, samples, optim_cfg, data_cfg, seed,
                                   checkpoint_path=run_dir / "best.fbck", log=log)
        write_metrics_csv(run_dir / "metrics.csv", records)
        rows.append({
            "strategy": STRATEGY_LABELS[strategy],
            "miou": best["miou_class"] * 100,
            "accuracy": best["pix_acc"] * 100,
            "epochs": best["epoch"],
            "params": count_parameters(model)["total"],
        })
    with open(out_dir / "ablation.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["strategy", "miou", "accuracy", "epochs", "params"])
        for r in rows:
            w.writerow([r["strategy"], f"{r['miou']:.2f}", f"{r['accuracy']:.2f}",
                        r["epochs"], r["params"]])
    return rows
