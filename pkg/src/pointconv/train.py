"""Optimization loop: Adam, augmentation, metrics.

Training is seeded and deterministic in single-thread mode. The per-epoch
log is line-oriented CSV with columns epoch,split,loss,accuracy,miou.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pointconv import network as N
from pointconv import pointops as P
from pointconv import tensor as T

__all__ = ["Adam", "Metrics", "augment", "evaluate", "fit", "TrainingError", "LOG_HEADER"]

LOG_HEADER = "epoch,split,loss,accuracy,miou"


class TrainingError(RuntimeError):
    """Optimization aborted (missing gradients, non-finite loss)."""


class Adam:
    """Bias-corrected adaptive-moment updates over named parameters."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self):
        """Apply one update from the accumulated gradients, then zero them."""
        self.step_count += 1
        t = self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                raise TrainingError(f"missing gradient for parameter {name!r}")
            g = p.grad
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / (1 - self.beta1**t)
            v_hat = self.v[name] / (1 - self.beta2**t)
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)
            p.grad = None


def clip_global_norm(params, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = np.sqrt(total)
    if norm > max_norm:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor
    return norm


def _rotation(dim: int, angle: float, axis: str) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    if dim == 2:
        return np.array([[c, -s], [s, c]])  # about the out-of-plane axis
    fixed = {"x": 0, "y": 1, "z": 2}[axis]
    u, v = [i for i in range(3) if i != fixed]
    rot = np.eye(3)
    rot[u, u] = c
    rot[u, v] = -s
    rot[v, u] = s
    rot[v, v] = c
    return rot


def augment(cloud: P.PointCloud, rng, jitter_sigma: float = 0.02, rotate_axis: str = "z",
            angle: float | None = None) -> P.PointCloud:
    """Random rotation about ``rotate_axis`` plus Gaussian position jitter.

    2-d clouds rotate in-plane (about the out-of-plane axis). Normal-vector
    features (first ``dim`` channels when the cloud is flagged) rotate with
    the positions; jitter applies to positions only.
    """
    if rotate_axis not in ("x", "y", "z"):
        raise ValueError(f"rotate_axis must be x, y or z, got {rotate_axis!r}")
    if angle is None:
        angle = rng.uniform(0.0, 2.0 * np.pi)
    rot = _rotation(cloud.dim, angle, rotate_axis)
    pos = cloud.positions @ rot.T
    feats = cloud.features
    if feats is not None and cloud.has_normals:
        feats = feats.copy()
        feats[:, : cloud.dim] = feats[:, : cloud.dim] @ rot.T.astype(feats.dtype)
    if jitter_sigma > 0:
        pos = pos + rng.normal(0.0, jitter_sigma, pos.shape)
    return P.PointCloud(pos, features=feats, labels=cloud.labels, has_normals=cloud.has_normals)


@dataclass
class Metrics:
    accuracy: float
    per_class_iou: list | None = None
    miou: float | None = None

    def headline(self) -> float:
        return self.miou if self.miou is not None else self.accuracy


def _batch_labels(clouds, task):
    if task == "classify":
        return np.array([int(c.labels) for c in clouds])
    return np.concatenate([np.asarray(c.labels, dtype=np.int64) for c in clouds])


def evaluate(net: N.PointConvNet, clouds) -> Metrics:
    """Accuracy, and for segmentation per-class IoU over the whole set.

    IoU per class is |pred n gt| / |pred u gt| aggregated over all clouds;
    classes absent from both prediction and ground truth are excluded from
    the mean.
    """
    task = net.config.task
    if any(c.labels is None for c in clouds):
        raise TrainingError("evaluation needs labeled clouds")
    num_classes = net.config.num_classes
    correct = total = 0
    inter = np.zeros(num_classes)
    union = np.zeros(num_classes)
    for cloud in clouds:
        pred = np.argmax(net.forward(cloud).data, axis=1)
        gt = np.array([int(cloud.labels)]) if task == "classify" else np.asarray(cloud.labels)
        correct += int((pred == gt).sum())
        total += gt.size
        if task == "segment":
            for c in range(num_classes):
                p, g = pred == c, gt == c
                inter[c] += int((p & g).sum())
                union[c] += int((p | g).sum())
    if task == "classify":
        return Metrics(accuracy=correct / total)
    present = union > 0
    iou = np.where(present, inter / np.maximum(union, 1), 0.0)
    return Metrics(
        accuracy=correct / total,
        per_class_iou=[float(v) for v in iou],
        miou=float(iou[present].mean()),
    )


def fit(net, train_clouds, test_clouds, epochs, seed, lr=1e-3, batch_size=8,
        augment_train=True, jitter_sigma=0.02, clip_norm=10.0, log_fn=None,
        checkpoint_path=None):
    """Seeded training loop; returns the per-epoch history.

    Each history row is a dict with train loss/accuracy and eval metrics;
    the best checkpoint by headline eval metric is written when a path is
    given. Non-finite loss aborts with a diagnostic.
    """
    if not train_clouds:
        raise TrainingError("training set is empty")
    rng = np.random.default_rng(seed)
    params = net.named_parameters()
    opt = Adam(params, lr=lr)
    task = net.config.task
    history = []
    best = -np.inf
    if log_fn:
        log_fn(LOG_HEADER)

    for epoch in range(epochs):
        order = rng.permutation(len(train_clouds))
        losses = []
        correct = total = 0
        for lo in range(0, len(order), batch_size):
            batch = [train_clouds[i] for i in order[lo:lo + batch_size]]
            if augment_train:
                batch = [augment(c, rng, jitter_sigma=jitter_sigma) for c in batch]
            labels = _batch_labels(batch, task)
            with T.record():
                logits = net.forward_batch(batch, train=True, rng=rng)
                loss = T.softmax_cross_entropy(logits, labels)
                loss_val = loss.item()
                if not np.isfinite(loss_val):
                    raise TrainingError(
                        f"non-finite loss {loss_val} at epoch {epoch}, batch {lo // batch_size}"
                    )
                T.backward(loss)
            clip_global_norm(params, clip_norm)
            opt.step()
            losses.append(loss_val)
            pred = np.argmax(logits.data, axis=1)
            correct += int((pred == labels).sum())
            total += labels.size

        train_loss = float(np.mean(losses))
        train_acc = correct / total
        metrics = evaluate(net, test_clouds) if test_clouds else Metrics(accuracy=float("nan"))
        row = {
            "epoch": epoch,
            "train_loss": train_loss,
            "train_accuracy": train_acc,
            "eval_accuracy": metrics.accuracy,
            "eval_miou": metrics.miou,
        }
        history.append(row)
        if log_fn:
            log_fn(f"{epoch},train,{train_loss:.6f},{train_acc:.6f},")
            miou = "" if metrics.miou is None else f"{metrics.miou:.6f}"
            log_fn(f"{epoch},eval,,{metrics.accuracy:.6f},{miou}")
        if test_clouds and checkpoint_path is not None and metrics.headline() >= best:
            best = metrics.headline()
            N.save_params(net, checkpoint_path)

    if checkpoint_path is not None and not test_clouds:
        N.save_params(net, checkpoint_path)
    return history
