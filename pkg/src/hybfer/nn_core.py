"""Numeric foundation: tensors, deterministic RNG, layer forward/backward
rules, He initialization, Adam, and categorical cross-entropy.

Tensors are plain numpy arrays in row-major order; images and activations
use channels-last layout (H, W, C), optionally with a leading batch axis.
Training code runs in float32 by default, gradient checking in float64.
All randomness flows through an explicit ``numpy.random.Generator`` so the
same seed reproduces the same stream bit for bit.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

Tensor = np.ndarray
Rng = np.random.Generator

LEAKY_SLOPE = 20.0  # f(x) = max(x, x / 20)


def make_rng(seed: int) -> Rng:
    """Deterministic generator; identical seed gives an identical stream."""
    if seed < 0:
        raise ValueError(f"seed must be nonnegative, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


# ---------------------------------------------------------------------------
# initialization

def he_variance(fan_in: int) -> float:
    """Variance 2 / fan_in of the He-normal initializer."""
    if fan_in <= 0:
        raise ValueError(f"fan_in must be positive, got {fan_in}")
    return 2.0 / fan_in


def he_init(shape, fan_in: int, rng: Rng, dtype=np.float32) -> Tensor:
    """Zero-mean normal samples with variance 2 / fan_in.

    Draws in float64 and casts, so the stream consumed from ``rng`` does
    not depend on the requested dtype.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise ValueError("shape must be nonempty")
    if any(s <= 0 for s in shape):
        raise ValueError(f"shape dimensions must be positive, got {shape}")
    std = np.sqrt(he_variance(fan_in))
    return rng.normal(0.0, std, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# convolution (3x3, stride 1, zero padding 1: output spatial size == input)

def _as_batched(x, rank):
    """Add a leading batch axis if ``x`` has ``rank`` dims; report whether."""
    if x.ndim == rank:
        return x[None], False
    if x.ndim == rank + 1:
        return x, True
    raise ShapeError(f"expected {rank}D or {rank + 1}D input, got {x.ndim}D")


def _im2col3(xp):
    # xp: zero-padded (N, H+2, W+2, C); columns ordered (ky, kx, c) to match
    # a (3, 3, Cin, Cout) weight tensor flattened row-major.
    n, hp, wp, c = xp.shape
    h, w = hp - 2, wp - 2
    cols = np.empty((n, h, w, 3, 3, c), dtype=xp.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, :, :, ky, kx, :] = xp[:, ky:ky + h, kx:kx + w, :]
    return cols.reshape(n * h * w, 9 * c)


def _check_conv_shapes(x, weights, bias):
    if weights.ndim != 4 or weights.shape[0] != 3 or weights.shape[1] != 3:
        raise ShapeError(f"weights must be 3x3xCinxCout, got {weights.shape}")
    if x.shape[-1] != weights.shape[2]:
        raise ShapeError(
            f"input has {x.shape[-1]} channels but weights expect {weights.shape[2]}")
    if bias is not None and bias.shape != (weights.shape[3],):
        raise ShapeError(f"bias must have shape ({weights.shape[3]},), got {bias.shape}")


def conv2d_forward(x: Tensor, weights: Tensor, bias: Tensor | None) -> Tensor:
    """Cross-correlation with 1-pixel zero padding and stride 1.

    ``x`` is (H, W, Cin) or (N, H, W, Cin); the output keeps the spatial
    size and gains Cout channels, with the bias added per output channel.
    """
    _check_conv_shapes(x, weights, bias)
    xb, batched = _as_batched(x, 3)
    n, h, w, cin = xb.shape
    cout = weights.shape[3]
    xp = np.pad(xb, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = _im2col3(xp) @ weights.reshape(9 * cin, cout)
    if bias is not None:
        out += bias
    out = out.reshape(n, h, w, cout)
    return out if batched else out[0]


def conv2d_backward(x: Tensor, weights: Tensor, dout: Tensor):
    """Gradients of conv2d_forward: returns (dx, dweights, dbias).

    dx is the full correlation of the upstream gradient with the kernels
    flipped spatially and transposed across channel axes.
    """
    _check_conv_shapes(x, weights, None)
    xb, batched = _as_batched(x, 3)
    db_, _ = _as_batched(dout, 3)
    n, h, w, cin = xb.shape
    cout = weights.shape[3]
    if db_.shape != (n, h, w, cout):
        raise ShapeError(f"upstream gradient shape {dout.shape} does not match output")

    xp = np.pad(xb, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = _im2col3(xp)
    dout2 = db_.reshape(n * h * w, cout)
    dweights = (cols.T @ dout2).reshape(3, 3, cin, cout)
    dbias = dout2.sum(axis=0)
    wflip = weights[::-1, ::-1].transpose(0, 1, 3, 2)
    dx = conv2d_forward(db_, np.ascontiguousarray(wflip), None)
    if not batched:
        dx = dx[0]
    return dx, dweights, dbias


# ---------------------------------------------------------------------------
# max pooling (2x2 windows, stride 2)

def _pool_windows(xb):
    n, h, w, c = xb.shape
    r = xb.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
    return r.reshape(n, h // 2, w // 2, 4, c)


def maxpool_forward(x: Tensor):
    """Disjoint 2x2 max pooling; returns (output, argmax indices).

    Argmax values are 0..3 in row-major window order, so ties resolve to
    the first maximal position; the indices drive the backward pass.
    """
    xb, batched = _as_batched(x, 3)
    n, h, w, c = xb.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool needs even spatial dims, got {h}x{w}")
    win = _pool_windows(xb)
    arg = win.argmax(axis=3)
    out = np.take_along_axis(win, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    if not batched:
        return out[0], arg[0]
    return out, arg


def maxpool_backward(dout: Tensor, argmax: Tensor) -> Tensor:
    """Routes each upstream value to its window's argmax position."""
    db_, batched = _as_batched(dout, 3)
    ab_ = argmax if batched else argmax[None]
    if ab_.shape != db_.shape:
        raise ShapeError(f"argmax shape {argmax.shape} does not match upstream {dout.shape}")
    n, oh, ow, c = db_.shape
    win = np.zeros((n, oh, ow, 4, c), dtype=db_.dtype)
    np.put_along_axis(win, ab_[:, :, :, None, :], db_[:, :, :, None, :], axis=3)
    dx = win.reshape(n, oh, ow, 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
    dx = dx.reshape(n, oh * 2, ow * 2, c)
    return dx if batched else dx[0]


# ---------------------------------------------------------------------------
# Leaky ReLU, Eq-style f(x) = max(x, x / 20)

def leaky_relu(x: Tensor) -> Tensor:
    return np.maximum(x, x / LEAKY_SLOPE)


def leaky_relu_backward(dout: Tensor, x: Tensor) -> Tensor:
    # slope at exactly 0 is defined as 1
    return dout * np.where(x >= 0, np.asarray(1.0, x.dtype),
                           np.asarray(1.0 / LEAKY_SLOPE, x.dtype))


# ---------------------------------------------------------------------------
# dense (affine) layer

def dense_forward(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map x @ weights + bias; x is (N,) or batched (B, N)."""
    if x.shape[-1] != weights.shape[0]:
        raise ShapeError(
            f"input length {x.shape[-1]} does not match weight rows {weights.shape[0]}")
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"bias must have shape ({weights.shape[1]},), got {bias.shape}")
    return x @ weights + bias


def dense_backward(x: Tensor, weights: Tensor, dout: Tensor):
    """Gradients of dense_forward: returns (dx, dweights, dbias)."""
    xb = x[None] if x.ndim == 1 else x
    db_ = dout[None] if dout.ndim == 1 else dout
    dweights = xb.T @ db_
    dbias = db_.sum(axis=0)
    dx = db_ @ weights.T
    if x.ndim == 1:
        dx = dx[0]
    return dx, dweights, dbias


# ---------------------------------------------------------------------------
# dropout (inverted: survivors scaled at train time, inference is identity)

def dropout_forward(x: Tensor, rate: float, rng: Rng, training: bool):
    """Zeroes each element with probability ``rate`` and rescales survivors.

    Returns (output, mask) where mask is 0/1 with the input's dtype. In
    inference mode the output is the input and the mask is all ones.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, np.ones_like(x)
    mask = (rng.random(x.shape) >= rate).astype(x.dtype)
    return x * mask / np.asarray(1.0 - rate, x.dtype), mask


def dropout_backward(dout: Tensor, mask: Tensor, rate: float) -> Tensor:
    return dout * mask / np.asarray(1.0 - rate, dout.dtype)


# ---------------------------------------------------------------------------
# softmax and categorical cross-entropy

def softmax(logits: Tensor) -> Tensor:
    """Exp-normalization with max subtraction; sums to 1 along the last axis."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


PROB_FLOOR = 1e-12  # clamp inside the log so saturated outputs stay finite


def cross_entropy(probs: Tensor, label: int):
    """Loss -log p[label] and its gradient w.r.t. the logits (probs - onehot)."""
    c = probs.shape[-1]
    if not 0 <= label < c:
        raise ValueError(f"label {label} out of range for {c} classes")
    loss = -np.log(max(float(probs[label]), PROB_FLOOR))
    dlogits = probs.copy()
    dlogits[label] -= 1.0
    return loss, dlogits


def cross_entropy_batch(probs: Tensor, labels: Tensor):
    """Mean cross-entropy over a batch and the mean gradient w.r.t. logits."""
    b, c = probs.shape
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError("label out of range")
    picked = np.clip(probs[np.arange(b), labels], PROB_FLOOR, None)
    loss = float(-np.log(picked).mean())
    dlogits = probs.copy()
    dlogits[np.arange(b), labels] -= 1.0
    dlogits /= np.asarray(b, dtype=probs.dtype)
    return loss, dlogits


# ---------------------------------------------------------------------------
# Adam

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
ADAM_LR = 1e-3


@dataclass
class AdamState:
    """Per-parameter optimizer moments; step_count increases by 1 per step."""
    first_moment: Tensor
    second_moment: Tensor
    step_count: int = 0


def adam_init(param: Tensor) -> AdamState:
    return AdamState(np.zeros_like(param), np.zeros_like(param), 0)


def adam_step(param: Tensor, grad: Tensor, state: AdamState, lr: float = ADAM_LR,
              beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
              eps: float = ADAM_EPS):
    """One bias-corrected Adam update; returns (new_param, new_state)."""
    if param.shape != grad.shape or param.shape != state.first_moment.shape:
        raise ShapeError(
            f"param {param.shape}, grad {grad.shape} and moments "
            f"{state.first_moment.shape} must all match")
    t = state.step_count + 1
    m = beta1 * state.first_moment + (1.0 - beta1) * grad
    v = beta2 * state.second_moment + (1.0 - beta2) * (grad * grad)
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    new_param = param - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_param, AdamState(m, v, t)
