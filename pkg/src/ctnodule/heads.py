"""Trainable task heads on frozen features: linear classifier trained with a
symmetric cross-entropy objective, logistic-squashed bounding-box regressor
with smooth-L1 loss, analytic gradients, Adam, and the training loop."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from .archive import load_tensor_archive, save_tensor_archive
from .errors import EmptyTrainingSet, InvalidDistribution, ShapeMismatch

log = logging.getLogger(__name__)


@dataclass
class ClassifierHead:
    weight: np.ndarray  # (2, D)
    bias: np.ndarray    # (2,)


@dataclass
class DetectionHead:
    weight: np.ndarray  # (4, D)
    bias: np.ndarray    # (4,)


@dataclass(frozen=True)
class SceConfig:
    alpha: float = 1.0
    beta: float = 1.0
    clamp_a: float = -4.0  # stands in for log 0 inside the reverse term

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise InvalidDistribution("need alpha, beta >= 0 and alpha + beta > 0")
        if self.clamp_a >= 0:
            raise InvalidDistribution("clamp_a must be negative")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    weight_decay: float = 0.01
    epochs: int = 100
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    bbox_weight: float = 1.0  # weight of the detection loss in the joint objective


# --- elementary pieces ---

def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_distribution(p: np.ndarray, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if abs(p.sum() - 1.0) > 1e-6 or (p < 0).any():
        raise InvalidDistribution(f"{name} is not a probability vector: {p}")
    return p


def ce_loss(target: np.ndarray, predicted: np.ndarray) -> float:
    """Cross entropy -sum(t * log s), with 0 * log 0 := 0."""
    t = _check_distribution(target, "target")
    s = _check_distribution(predicted, "predicted")
    mask = t > 0
    if (s[mask] <= 0).any():
        raise InvalidDistribution("predicted assigns zero mass where target > 0")
    return float(-(t[mask] * np.log(s[mask])).sum())


def rce_loss(target: np.ndarray, predicted: np.ndarray, clamp_a: float = -4.0) -> float:
    """Reverse cross entropy -sum(s * log t), with log 0 := clamp_a."""
    t = _check_distribution(target, "target")
    s = _check_distribution(predicted, "predicted")
    log_t = np.where(t > 0, np.log(np.maximum(t, 1e-300)), clamp_a)
    return float(-(s * log_t).sum())


def sce_loss(target: np.ndarray, predicted: np.ndarray, cfg: SceConfig) -> float:
    """Weighted sum of forward and reverse cross entropy."""
    total = 0.0
    if cfg.alpha != 0.0:
        total += cfg.alpha * ce_loss(target, predicted)
    if cfg.beta != 0.0:
        total += cfg.beta * rce_loss(target, predicted, cfg.clamp_a)
    return total


def logistic(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def head_forward_classify(feature: np.ndarray, head: ClassifierHead):
    """Returns (logits, probs) for one feature or a (B, D) batch."""
    f = np.asarray(feature, dtype=np.float64)
    if f.shape[-1] != head.weight.shape[1]:
        raise ShapeMismatch(f"feature dim {f.shape[-1]} != {head.weight.shape[1]}")
    logits = f @ head.weight.T.astype(np.float64) + head.bias.astype(np.float64)
    return logits, softmax(logits)


def head_forward_detect(feature: np.ndarray, head: DetectionHead) -> np.ndarray:
    """Returns (cx, cy, bw, bh) in (0,1)^4 for one feature or a batch."""
    f = np.asarray(feature, dtype=np.float64)
    if f.shape[-1] != head.weight.shape[1]:
        raise ShapeMismatch(f"feature dim {f.shape[-1]} != {head.weight.shape[1]}")
    return logistic(f @ head.weight.T.astype(np.float64) + head.bias.astype(np.float64))


def bbox_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Smooth-L1 over the four box components (transition at |d| = 1)."""
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    per = np.where(np.abs(d) < 1.0, 0.5 * d * d, np.abs(d) - 0.5)
    return float(per.sum(axis=-1).mean()) if per.ndim > 1 else float(per.sum())


# --- gradients ---

def _one_hot(labels: np.ndarray) -> np.ndarray:
    t = np.zeros((len(labels), 2))
    t[np.arange(len(labels)), labels] = 1.0
    return t


def classify_batch_loss_and_grads(
    features: np.ndarray,
    targets: np.ndarray,
    head: ClassifierHead,
    sce: SceConfig,
    weight_decay: float = 0.0,
):
    """Mean SCE over a batch plus analytic gradients (decoupled weight decay
    added to the weight gradient only)."""
    if len(features) == 0:
        raise EmptyTrainingSet("empty batch")
    f = np.asarray(features, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    logits, s = head_forward_classify(f, head)

    log_s = np.log(np.maximum(s, 1e-300))
    log_t = np.where(t > 0, np.log(np.maximum(t, 1e-300)), sce.clamp_a)
    loss = float(
        np.mean(
            sce.alpha * -(t * np.where(t > 0, log_s, 0.0)).sum(axis=1)
            + sce.beta * -(s * log_t).sum(axis=1)
        )
    )

    # d(CE)/dz = s - t; d(RCE)/dz_j = s_j * (<s, log_t> - log_t_j)
    g_ce = s - t
    g_rce = s * ((s * log_t).sum(axis=1, keepdims=True) - log_t)
    g_z = (sce.alpha * g_ce + sce.beta * g_rce) / len(f)
    grad_w = g_z.T @ f + weight_decay * head.weight.astype(np.float64)
    grad_b = g_z.sum(axis=0)
    return loss, grad_w, grad_b


def detect_batch_loss_and_grads(
    features: np.ndarray,
    targets: np.ndarray,
    head: DetectionHead,
    weight_decay: float = 0.0,
):
    """Mean smooth-L1 through the logistic squash, with analytic gradients."""
    if len(features) == 0:
        raise EmptyTrainingSet("empty batch")
    f = np.asarray(features, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    pred = head_forward_detect(f, head)
    d = pred - t
    per = np.where(np.abs(d) < 1.0, 0.5 * d * d, np.abs(d) - 0.5)
    loss = float(per.sum(axis=1).mean())

    dloss_dpred = np.where(np.abs(d) < 1.0, d, np.sign(d))
    g_z = dloss_dpred * pred * (1.0 - pred) / len(f)
    grad_w = g_z.T @ f + weight_decay * head.weight.astype(np.float64)
    grad_b = g_z.sum(axis=0)
    return loss, grad_w, grad_b


# --- Adam ---

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    cfg: TrainConfig,
    t: int,
) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; mutates state, returns new params."""
    if t < 1:
        raise ShapeMismatch("step index t must be >= 1")
    updated = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: grad shape {g.shape} != param {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p, dtype=np.float64))
        v = state.v.setdefault(name, np.zeros_like(p, dtype=np.float64))
        m[...] = cfg.adam_beta1 * m + (1 - cfg.adam_beta1) * g
        v[...] = cfg.adam_beta2 * v + (1 - cfg.adam_beta2) * g * g
        m_hat = m / (1 - cfg.adam_beta1 ** t)
        v_hat = v / (1 - cfg.adam_beta2 ** t)
        updated[name] = p - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return updated


# --- training loop ---

@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float


@dataclass
class FeatureSet:
    """Features with labels and (for positives) normalized box targets."""

    features: np.ndarray              # (n, D)
    labels: np.ndarray                # (n,) in {0, 1}
    bboxes: np.ndarray | None = None  # (n, 4); rows for negatives are ignored

    def __len__(self):
        return len(self.features)


def _dataset_loss_and_acc(data: FeatureSet, cls_head, det_head, sce, bbox_weight):
    _, probs = head_forward_classify(data.features, cls_head)
    targets = _one_hot(data.labels)
    log_s = np.log(np.maximum(probs, 1e-300))
    log_t = np.where(targets > 0, np.log(np.maximum(targets, 1e-300)), sce.clamp_a)
    loss = float(
        np.mean(
            sce.alpha * -(targets * np.where(targets > 0, log_s, 0.0)).sum(axis=1)
            + sce.beta * -(probs * log_t).sum(axis=1)
        )
    )
    pos = data.labels == 1
    if det_head is not None and data.bboxes is not None and pos.any():
        pred = head_forward_detect(data.features[pos], det_head)
        loss += bbox_weight * bbox_loss(pred, data.bboxes[pos])
    acc = float(np.mean(probs.argmax(axis=1) == data.labels))
    return loss, acc


def train_heads(
    train: FeatureSet,
    val: FeatureSet,
    cfg: TrainConfig,
    sce: SceConfig,
) -> tuple[ClassifierHead, DetectionHead | None, list[EpochRecord]]:
    """Jointly train both heads with Adam; returns the parameters from the
    best-validation-accuracy epoch (ties go to the earlier epoch)."""
    if len(train) == 0:
        raise EmptyTrainingSet("training set is empty")
    d = train.features.shape[1]
    cls_head = ClassifierHead(np.zeros((2, d)), np.zeros(2))
    has_positives = bool((train.labels == 1).any()) and train.bboxes is not None
    det_head = DetectionHead(np.zeros((4, d)), np.zeros(4)) if has_positives else None
    if not has_positives:
        log.warning("no positive samples with boxes; detection head skipped")

    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    targets_all = _one_hot(train.labels)
    history: list[EpochRecord] = []
    best = None  # (acc, epoch, params)
    step = 0

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            f = train.features[idx]
            t = targets_all[idx]
            loss, gw_c, gb_c = classify_batch_loss_and_grads(
                f, t, cls_head, sce, cfg.weight_decay
            )
            params = {"cls.weight": cls_head.weight, "cls.bias": cls_head.bias}
            grads = {"cls.weight": gw_c, "cls.bias": gb_c}

            if det_head is not None:
                pos = train.labels[idx] == 1
                if pos.any():
                    dloss, gw_d, gb_d = detect_batch_loss_and_grads(
                        f[pos], train.bboxes[idx][pos], det_head, cfg.weight_decay
                    )
                    loss += cfg.bbox_weight * dloss
                    params.update(
                        {"det.weight": det_head.weight, "det.bias": det_head.bias}
                    )
                    grads.update(
                        {"det.weight": cfg.bbox_weight * gw_d, "det.bias": cfg.bbox_weight * gb_d}
                    )
            step += 1
            new_params = adam_step(params, grads, state, cfg, step)
            cls_head = ClassifierHead(new_params["cls.weight"], new_params["cls.bias"])
            if "det.weight" in new_params:
                det_head = DetectionHead(new_params["det.weight"], new_params["det.bias"])
            epoch_losses.append(loss)

        val_loss, val_acc = _dataset_loss_and_acc(
            val, cls_head, det_head, sce, cfg.bbox_weight
        )
        history.append(
            EpochRecord(epoch, float(np.mean(epoch_losses)), val_loss, val_acc)
        )
        if best is None or val_acc > best[0]:
            best = (
                val_acc,
                epoch,
                (
                    ClassifierHead(cls_head.weight.copy(), cls_head.bias.copy()),
                    None
                    if det_head is None
                    else DetectionHead(det_head.weight.copy(), det_head.bias.copy()),
                ),
            )
    return best[2][0], best[2][1], history


# --- persistence ---

def save_heads(
    cls_head: ClassifierHead,
    det_head: DetectionHead | None,
    cfg: TrainConfig,
    sce: SceConfig,
    extra_metadata: dict | None = None,
) -> bytes:
    metadata = {
        "train_config": {
            "lr": cfg.lr,
            "batch_size": cfg.batch_size,
            "weight_decay": cfg.weight_decay,
            "epochs": cfg.epochs,
            "adam_beta1": cfg.adam_beta1,
            "adam_beta2": cfg.adam_beta2,
            "adam_eps": cfg.adam_eps,
            "seed": cfg.seed,
            "bbox_weight": cfg.bbox_weight,
        },
        "sce_config": {"alpha": sce.alpha, "beta": sce.beta, "clamp_a": sce.clamp_a},
    }
    if extra_metadata:
        metadata.update(extra_metadata)
    tensors = {"cls_head.weight": cls_head.weight, "cls_head.bias": cls_head.bias}
    if det_head is not None:
        tensors["det_head.weight"] = det_head.weight
        tensors["det_head.bias"] = det_head.bias
    return save_tensor_archive(metadata, tensors)


def load_heads(data: bytes) -> tuple[ClassifierHead, DetectionHead | None, dict]:
    metadata, tensors = load_tensor_archive(data)
    cls_head = ClassifierHead(
        tensors["cls_head.weight"].astype(np.float64),
        tensors["cls_head.bias"].astype(np.float64),
    )
    det_head = None
    if "det_head.weight" in tensors:
        det_head = DetectionHead(
            tensors["det_head.weight"].astype(np.float64),
            tensors["det_head.bias"].astype(np.float64),
        )
    return cls_head, det_head, metadata


def history_to_csv(history: list[EpochRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "train_loss", "val_loss", "val_acc"])
    for rec in history:
        writer.writerow([rec.epoch, repr(rec.train_loss), repr(rec.val_loss), repr(rec.val_acc)])
    return buf.getvalue()
