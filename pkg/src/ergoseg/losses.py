"""Frame-summed risk regression loss, segmentation cross-entropy and their weighted sum."""
from __future__ import annotations

import warnings

import numpy as np

from .tensor import Tensor, abs_, as_tensor, clamp_min, log_softmax, mul, square, sum_

WEIGHT_FLOOR = 1e-3


class AllMaskedWarning(UserWarning):
    """Every frame was masked; the loss is defined as zero."""


class LossWeights:
    """Learnable alpha (squared error), beta (absolute error) and gamma (segmentation).

    Effective values are ``max(raw, WEIGHT_FLOOR)``; raw values start at 1.
    """

    names = ("alpha", "beta", "gamma")

    def __init__(self, alpha: float = 1.0, beta: float = 1.0, gamma: float = 1.0):
        self.alpha = Tensor(alpha, requires_grad=True, name="alpha")
        self.beta = Tensor(beta, requires_grad=True, name="beta")
        self.gamma = Tensor(gamma, requires_grad=True, name="gamma")

    def effective(self, name: str) -> Tensor:
        return clamp_min(getattr(self, name), WEIGHT_FLOOR)

    def values(self) -> dict[str, float]:
        return {n: max(getattr(self, n).item(), WEIGHT_FLOOR) for n in self.names}

    def named_parameters(self) -> dict[str, Tensor]:
        return {n: getattr(self, n) for n in self.names}

    def load(self, raw: dict) -> None:
        for n in self.names:
            if n in raw:
                getattr(self, n).data = np.asarray(raw[n], dtype=np.float64).reshape(())


def _mask_array(mask, shape) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != tuple(shape):
        raise ValueError(f"mask shape {mask.shape} does not match {tuple(shape)}")
    return mask


def hpa_loss(pred, target, weights: LossWeights, mask=None) -> Tensor:
    """Sum over real frames of ``alpha * r^2 + beta * |r|`` with ``r = pred - target``."""
    pred = as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"pred {pred.shape} and target {target.shape} differ")
    m = _mask_array(mask, pred.shape)
    if not m.any():
        warnings.warn("hpa_loss: all frames masked", AllMaskedWarning, stacklevel=2)
        return Tensor(0.0)
    # masked residuals are zeroed before abs so their kink carries no gradient
    r = mul(pred - np.where(m, target, 0.0), m.astype(np.float64))
    return (weights.effective("alpha") * sum_(square(r))
            + weights.effective("beta") * sum_(abs_(r)))


def has_loss(logits, labels, mask=None) -> Tensor:
    """Sum over real frames of ``-log softmax(logits)[label]``.

    ``logits``: (..., T, Cl); ``labels``: (..., T) integer ids.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    n_classes = logits.shape[-1]
    m = _mask_array(mask, labels.shape)
    real = labels[m]
    if real.size and (real.min() < 0 or real.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    if not m.any():
        warnings.warn("has_loss: all frames masked", AllMaskedWarning, stacklevel=2)
        return Tensor(0.0)
    onehot = np.zeros(logits.shape)
    idx = np.where(m, labels, 0)
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    onehot *= m[..., None]
    return -sum_(mul(log_softmax(logits, axis=-1), onehot))


def mtl_loss(hpa: Tensor, has: Tensor, weights: LossWeights) -> Tensor:
    return hpa + weights.effective("gamma") * has
