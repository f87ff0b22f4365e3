"""Dense, convolutional and pooling primitives with explicit backward passes.

Everything here works on float64 numpy arrays. Batches are leading axes:
dense activations are ``(B, units)`` and feature maps are ``(B, C, H, W)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class NumericError(FloatingPointError):
    """Raised when a forward or backward pass produces NaN or Inf."""


def check_finite(arr, what="array"):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")
    return arr


# ---------------------------------------------------------------------------
# activations and losses

@dataclass(frozen=True)
class Identity:
    def __call__(self, x):
        return x

    def grad(self, x):
        return np.ones_like(x)


@dataclass(frozen=True)
class LeakyReLU:
    slope: float = 1e-3

    def __post_init__(self):
        if not 0.0 < self.slope < 1.0:
            raise ValueError(f"leak slope must lie in (0, 1), got {self.slope}")

    def __call__(self, x):
        return np.where(x > 0, x, self.slope * x)

    def grad(self, x):
        # subgradient at exactly 0 is the leak slope
        return np.where(x > 0, 1.0, self.slope)


def softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class GaussianNLL:
    """Negative log-likelihood of ``N(y; yhat, 1/tau)`` with identity output."""

    tau: float = 1.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"precision tau must be positive, got {self.tau}")

    def per_sample(self, outputs, targets):
        diff = outputs - targets
        d = outputs.shape[-1]
        const = 0.5 * d * np.log(2.0 * np.pi / self.tau)
        losses = 0.5 * self.tau * np.sum(diff * diff, axis=-1) + const
        return losses, self.tau * diff

    def predict(self, outputs):
        return outputs


@dataclass(frozen=True)
class CategoricalCE:
    """Cross-entropy on softmax outputs; the gradient is taken w.r.t. logits."""

    def per_sample(self, outputs, targets):
        rows = targets.reshape(-1, targets.shape[-1])
        if not (np.all((rows == 0) | (rows == 1)) and np.all(rows.sum(axis=-1) == 1)):
            raise ValueError("categorical targets must be one-hot")
        shifted = outputs - outputs.max(axis=-1, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        log_probs = shifted - log_norm
        losses = -np.sum(targets * log_probs, axis=-1)
        return losses, np.exp(log_probs) - targets

    def predict(self, outputs):
        return softmax(outputs)


def loss_and_grad(kind, outputs, targets):
    """Summed batch loss and per-sample gradient w.r.t. the output pre-activations."""
    outputs = np.asarray(outputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if outputs.shape != targets.shape:
        raise ValueError(f"outputs {outputs.shape} and targets {targets.shape} disagree")
    losses, grad = kind.per_sample(outputs, targets)
    return float(np.sum(losses)), grad


# ---------------------------------------------------------------------------
# affine

def affine_forward(weights, z, bias=None):
    """``W @ z + b`` for a batch ``z`` of shape (B, in) or a single vector.

    Without ``bias`` the last column of ``weights`` is taken as the bias,
    i.e. the input is augmented with a constant 1.
    """
    weights = np.asarray(weights, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if bias is None:
        weights, bias = weights[:, :-1], weights[:, -1]
    if weights.shape[1] != z.shape[-1]:
        raise ValueError(f"weight matrix {weights.shape} does not accept inputs of size {z.shape[-1]}")
    return z @ weights.T + bias


def affine_backward(weights, z, dzeta):
    """Gradients of a dense layer: (dW, db, dz)."""
    return dzeta.T @ z, dzeta.sum(axis=0), dzeta @ weights


# ---------------------------------------------------------------------------
# convolution (valid padding, stride 1, cross-correlation)

def conv2d_forward(fmap, filters, bias=None):
    fmap = np.asarray(fmap, dtype=np.float64)
    filters = np.asarray(filters, dtype=np.float64)
    squeeze = fmap.ndim == 3
    if squeeze:
        fmap = fmap[None]
    n_out, c_in, kh, kw = filters.shape
    if fmap.shape[1] != c_in:
        raise ValueError(f"filters expect {c_in} channels, input has {fmap.shape[1]}")
    if kh > fmap.shape[2] or kw > fmap.shape[3]:
        raise ValueError(f"kernel {kh}x{kw} larger than input {fmap.shape[2]}x{fmap.shape[3]}")
    windows = sliding_window_view(fmap, (kh, kw), axis=(2, 3))  # (B, C, Ho, Wo, kh, kw)
    out = np.tensordot(windows, filters, axes=([1, 4, 5], [1, 2, 3]))  # (B, Ho, Wo, F)
    out = out.transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + np.asarray(bias)[None, :, None, None]
    out = np.ascontiguousarray(out)
    return out[0] if squeeze else out


def conv2d_backward(fmap, filters, dout):
    """Gradients of :func:`conv2d_forward`: (dfilters, dbias, dfmap)."""
    _, _, kh, kw = filters.shape
    windows = sliding_window_view(fmap, (kh, kw), axis=(2, 3))
    dfilters = np.tensordot(dout, windows, axes=([0, 2, 3], [0, 2, 3]))  # (F, C, kh, kw)
    dbias = dout.sum(axis=(0, 2, 3))
    padded = np.pad(dout, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    flipped = filters[:, :, ::-1, ::-1]
    pwin = sliding_window_view(padded, (kh, kw), axis=(2, 3))  # (B, F, H, W, kh, kw)
    dfmap = np.tensordot(pwin, flipped, axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
    return dfilters, dbias, np.ascontiguousarray(dfmap)


# ---------------------------------------------------------------------------
# 2x2 max pooling, stride 2

def pool_forward(fmap):
    """Max over non-overlapping 2x2 blocks.

    Returns the pooled map and the winner index (0..3, row-major inside the
    block; ties go to the first index).
    """
    fmap = np.asarray(fmap, dtype=np.float64)
    h, w = fmap.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"pooling needs even spatial dims, got {h}x{w}")
    lead = fmap.shape[:-2]
    blocks = fmap.reshape(*lead, h // 2, 2, w // 2, 2)
    blocks = np.moveaxis(blocks, -3, -2).reshape(*lead, h // 2, w // 2, 4)
    trace = blocks.argmax(axis=-1)
    pooled = np.take_along_axis(blocks, trace[..., None], axis=-1)[..., 0]
    return pooled, trace


def pool_backward(dpooled, trace):
    lead = dpooled.shape[:-2]
    ho, wo = dpooled.shape[-2:]
    blocks = np.zeros((*lead, ho, wo, 4))
    np.put_along_axis(blocks, trace[..., None], dpooled[..., None], axis=-1)
    blocks = blocks.reshape(*lead, ho, wo, 2, 2)
    return np.moveaxis(blocks, -2, -3).reshape(*lead, 2 * ho, 2 * wo)
