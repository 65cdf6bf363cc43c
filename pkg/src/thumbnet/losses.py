"""Training objectives: moment matching, classification, distillation,
feature mapping, and l2 weight regularization."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import GeometryError, ShapeError, UsageError
from .layers import log_softmax
from .tensor import Tensor, as_tensor

_STD_EPS = 1e-12


@dataclass
class Hyperparams:
    alpha: float = 1.0
    beta: float = 0.5
    theta: float = 1e-4
    tau: float = 2.0
    lambda_mm: float = 0.1
    base_lr: float = 0.1
    momentum: float = 0.9
    finetune_lr_factor: float = 0.01

    def __post_init__(self):
        if self.tau < 1:
            raise UsageError(f"tau must be >= 1, got {self.tau}")
        for name in ("alpha", "beta", "theta", "lambda_mm", "base_lr", "momentum"):
            if getattr(self, name) < 0:
                raise UsageError(f"{name} must be non-negative")
        if not 0 < self.finetune_lr_factor <= 1:
            raise UsageError("finetune_lr_factor must lie in (0, 1]")

    def to_dict(self):
        return asdict(self)


def channel_moments(images: Tensor):
    """Per-image, per-channel pixel mean and population std, each N x C."""
    mean = images.mean(axis=(2, 3), keepdims=True)
    var = ((images - mean) ** 2).mean(axis=(2, 3))
    return mean.reshape(images.shape[0], images.shape[1]), (var + _STD_EPS).sqrt()


def mm_loss(x, y, lambda_mm=0.1):
    x, y = as_tensor(x), as_tensor(y)
    if x.ndim != 4 or y.ndim != 4 or x.shape[1] != 3 or y.shape[1] != 3:
        raise UsageError(f"mm_loss: both images need 3 channels, got {x.shape} and {y.shape}")
    if x.shape[0] != y.shape[0]:
        raise UsageError(f"mm_loss: batch sizes differ ({x.shape[0]} vs {y.shape[0]})")
    mu_x, sd_x = channel_moments(x.detach())
    mu_y, sd_y = channel_moments(y)
    first = ((mu_x - mu_y) ** 2).sum(axis=1) / 3.0
    second = ((sd_x - sd_y) ** 2).sum(axis=1) / 3.0
    return (first + lambda_mm * second).mean()


def _one_hot(labels, k, dtype):
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise UsageError(f"label out of range [0, {k})")
    out = np.zeros((labels.size, k), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return out


def cl_loss(logits, labels):
    """Mean cross entropy of logits against integer labels."""
    if logits.ndim != 2:
        raise ShapeError(f"cl_loss: logits must be N x K, got {logits.shape}")
    target = _one_hot(labels, logits.shape[1], logits.dtype)
    if target.shape[0] != logits.shape[0]:
        raise ShapeError(f"cl_loss: {target.shape[0]} labels for {logits.shape[0]} samples")
    return -(log_softmax(logits) * target).sum() / logits.shape[0]


def softened(logits, tau):
    z = np.asarray(logits, dtype=np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def kd_loss(logits_s, logits_t, tau=2.0):
    """Cross entropy with the teacher's softened distribution as target.

    Teacher logits are treated as constants.
    """
    t = logits_t.data if isinstance(logits_t, Tensor) else np.asarray(logits_t)
    if logits_s.shape != t.shape:
        raise UsageError(f"kd_loss: student {logits_s.shape} and teacher {t.shape} logits differ in shape")
    if tau <= 0:
        raise UsageError("kd_loss: tau must be positive")
    p_t = softened(t, tau).astype(logits_s.dtype)
    return -(log_softmax(logits_s / tau) * p_t).sum() / logits_s.shape[0]


def fm_loss(feat_t, feat_s, decoder=None, mode="train"):
    """Half mean squared error between teacher features and decoded student features."""
    decoded = decoder.forward(feat_s, mode=mode) if decoder is not None else feat_s
    t = feat_t.detach() if isinstance(feat_t, Tensor) else Tensor(feat_t, dtype=decoded.dtype)
    if decoded.shape != t.shape:
        raise GeometryError(
            f"fm_loss: decoded student features {decoded.shape} do not match teacher features {t.shape}; "
            "check the decoder depth against the downscale factor"
        )
    diff = t - decoded
    return (diff * diff).sum() / (2.0 * t.size)


def l2_reg(weights):
    """Sum of squared entries over the given weight tensors."""
    total = None
    for w in weights:
        term = (w * w).sum()
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)
