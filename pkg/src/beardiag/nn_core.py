"""Minimal differentiable compute kernel for the fault classifier.

Forward/backward pairs for the fixed layer set the network needs
(1-D convolution, linear, ReLU, sigmoid, pooling, batch norm, channel
scaling), softmax cross-entropy, a decoupled-weight-decay Adam optimizer,
a loss-plateau learning-rate schedule, and a binary weight checkpoint
format.  Everything computes in float64; each backward is the exact
analytic gradient of its forward, which is what the finite-difference
test suite checks.

Convolution is implemented as cross-correlation (no kernel flip), the
usual CNN convention, and lowered to one BLAS matmul per call via a
strided window view.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, LabelError, ShapeError

CHECKPOINT_MAGIC = b"BDXW"


# ---------------------------------------------------------------------------
# parameters


@dataclass
class Param:
    """A named trainable (or buffer) tensor with its gradient accumulator."""

    name: str
    value: np.ndarray
    trainable: bool = True
    grad: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.value = np.asarray(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)


def kaiming_uniform(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    """Fan-in scaled uniform init for ReLU networks."""
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# functional forward/backward pairs


def conv1d_forward(x, w, b, stride: int = 1, padding: int = 0):
    """Cross-correlate (B, C_in, L) with (C_out, C_in, K) kernels.

    Returns (y, ctx) with y of shape (B, C_out, L_out),
    L_out = (L + 2*padding - K) // stride + 1.

    Stride-1 convolutions run as K shifted matrix products on a
    channels-last buffer (no window gather); strided ones fall back to the
    window-matrix (im2col) form.
    """
    B, C_in, L = x.shape
    C_out, C_in_w, K = w.shape
    if C_in != C_in_w:
        raise ShapeError(f"input channels {C_in} != kernel channels {C_in_w}")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    if L + 2 * padding < K:
        raise ShapeError(f"length {L} + 2*{padding} padding is shorter than kernel {K}")
    if stride == 1:
        return _conv1d_shift_forward(x, w, b, padding)
    return _conv1d_col_forward(x, w, b, stride, padding)


def conv1d_backward(ctx, dy, need_input_grad: bool = True):
    """Gradients of conv1d_forward; returns (dx, dw, db).

    dx is None when need_input_grad is False (first layers can skip the
    input-gradient scatter entirely).
    """
    if ctx[0] == "shift":
        return _conv1d_shift_backward(ctx, dy, need_input_grad)
    return _conv1d_col_backward(ctx, dy, need_input_grad)


def _conv1d_shift_forward(x, w, b, padding):
    B, C_in, L = x.shape
    C_out, _, K = w.shape
    Lp = L + 2 * padding
    L_out = Lp - K + 1
    xt = np.zeros((B, Lp, C_in))
    xt[:, padding : padding + L, :] = x.transpose(0, 2, 1)
    flat = xt.reshape(B * Lp, C_in)
    # (K, C_in, C_out) contiguous slices keep every product on the BLAS path
    w_slices = np.ascontiguousarray(w.transpose(2, 1, 0))
    acc = np.zeros((B, L_out, C_out))
    for k in range(K):
        z = (flat @ w_slices[k]).reshape(B, Lp, C_out)
        acc += z[:, k : k + L_out, :]
    if b is not None:
        acc += b
    ctx = ("shift", flat, (B, C_in, L, Lp, L_out), w_slices, padding)
    return acc.transpose(0, 2, 1), ctx


def _conv1d_shift_backward(ctx, dy, need_input_grad):
    _, flat, (B, C_in, L, Lp, L_out), w_slices, padding = ctx
    K, C_in_w, C_out = w_slices.shape
    # zero rows at [L_out, Lp) guard the shifted products against crossing
    # batch-item boundaries (the shift never exceeds K - 1 = Lp - L_out)
    dyp = np.zeros((B, Lp, C_out))
    dyp[:, :L_out, :] = dy.transpose(0, 2, 1)
    dyf = dyp.reshape(B * Lp, C_out)
    n = dyf.shape[0]
    dw = np.empty((C_out, C_in, K))
    dxf = np.zeros((B * Lp, C_in)) if need_input_grad else None
    for k in range(K):
        dw[:, :, k] = dyf[: n - k].T @ flat[k:]
        if need_input_grad:
            dxf[k:] += dyf[: n - k] @ w_slices[k].T
    db = dy.sum(axis=(0, 2))
    if not need_input_grad:
        return None, dw, db
    dxt = dxf.reshape(B, Lp, C_in)[:, padding : padding + L, :]
    return dxt.transpose(0, 2, 1), dw, db


def _conv1d_col_forward(x, w, b, stride, padding):
    B, C_in, L = x.shape
    C_out, _, K = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding))) if padding else x
    L_out = (L + 2 * padding - K) // stride + 1
    sB, sC, sL = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp, shape=(B, C_in, L_out, K), strides=(sB, sC, sL * stride, sL)
    )
    col = windows.transpose(0, 2, 1, 3).reshape(B * L_out, C_in * K)
    y = col @ w.reshape(C_out, -1).T
    if b is not None:
        y += b
    y = y.reshape(B, L_out, C_out).transpose(0, 2, 1)
    ctx = ("col", col, x.shape, w, stride, padding, L_out)
    return y, ctx


def _conv1d_col_backward(ctx, dy, need_input_grad):
    _, col, x_shape, w, stride, padding, L_out = ctx
    B, C_in, L = x_shape
    C_out, _, K = w.shape
    dyr = dy.transpose(0, 2, 1).reshape(B * L_out, C_out)
    dw = (dyr.T @ col).reshape(w.shape)
    db = dy.sum(axis=(0, 2))
    if not need_input_grad:
        return None, dw, db
    dcol = (dyr @ w.reshape(C_out, -1)).reshape(B, L_out, C_in, K).transpose(0, 2, 1, 3)
    dxp = np.zeros((B, C_in, L + 2 * padding))
    for k in range(K):
        dxp[:, :, k : k + stride * L_out : stride] += dcol[:, :, :, k]
    dx = dxp[:, :, padding : padding + L] if padding else dxp
    return dx, dw, db


def linear_forward(x, w, b):
    """(B, D) @ (H, D)^T + b -> (B, H)."""
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"input width {x.shape[1]} != weight width {w.shape[1]}")
    y = x @ w.T
    if b is not None:
        y += b
    return y, (x, w)


def linear_backward(ctx, dy):
    x, w = ctx
    return dy @ w, dy.T @ x, dy.sum(axis=0)


def relu_forward(x):
    return np.maximum(x, 0.0), (x > 0)


def relu_backward(ctx, dy):
    return dy * ctx


def sigmoid_forward(x):
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return y, y


def sigmoid_backward(ctx, dy):
    y = ctx
    return dy * y * (1.0 - y)


def global_avg_pool_forward(x):
    """(B, C, L) -> (B, C) mean over length."""
    return x.mean(axis=2), (x.shape,)


def global_avg_pool_backward(ctx, dy):
    (shape,) = ctx
    return np.broadcast_to(dy[:, :, None] / shape[2], shape).copy()


def global_max_pool_forward(x):
    """(B, C, L) -> (B, C) max over length."""
    arg = x.argmax(axis=2)
    return np.take_along_axis(x, arg[:, :, None], axis=2)[:, :, 0], (x.shape, arg)


def global_max_pool_backward(ctx, dy):
    shape, arg = ctx
    dx = np.zeros(shape)
    np.put_along_axis(dx, arg[:, :, None], dy[:, :, None], axis=2)
    return dx


def windowed_max_pool_forward(x, width: int):
    """Non-overlapping max pooling; trailing remainder is dropped."""
    if width < 1:
        raise ShapeError("pool width must be >= 1")
    B, C, L = x.shape
    L_out = L // width
    if L_out == 0:
        raise ShapeError(f"length {L} is shorter than pool width {width}")
    xw = x[:, :, : L_out * width].reshape(B, C, L_out, width)
    arg = xw.argmax(axis=3)
    y = np.take_along_axis(xw, arg[:, :, :, None], axis=3)[:, :, :, 0]
    return y, (x.shape, arg, width)


def windowed_max_pool_backward(ctx, dy):
    shape, arg, width = ctx
    B, C, L = shape
    L_out = arg.shape[2]
    dxw = np.zeros((B, C, L_out, width))
    np.put_along_axis(dxw, arg[:, :, :, None], dy[:, :, :, None], axis=3)
    dx = np.zeros(shape)
    dx[:, :, : L_out * width] = dxw.reshape(B, C, L_out * width)
    return dx


def windowed_avg_pool_forward(x, width: int):
    """Non-overlapping average pooling; trailing remainder is dropped."""
    if width < 1:
        raise ShapeError("pool width must be >= 1")
    B, C, L = x.shape
    L_out = L // width
    if L_out == 0:
        raise ShapeError(f"length {L} is shorter than pool width {width}")
    xw = x[:, :, : L_out * width].reshape(B, C, L_out, width)
    return xw.mean(axis=3), (x.shape, width, L_out)


def windowed_avg_pool_backward(ctx, dy):
    shape, width, L_out = ctx
    B, C, L = shape
    dx = np.zeros(shape)
    dx[:, :, : L_out * width] = np.repeat(dy / width, width, axis=2)
    return dx


def add_forward(a, c):
    if a.shape != c.shape:
        raise ShapeError(f"cannot add {a.shape} and {c.shape}")
    return a + c, None


def add_backward(ctx, dy):
    return dy, dy


def channel_scale_forward(x, s):
    """Scale (B, C, L) features by per-channel weights (B, C)."""
    if x.shape[:2] != s.shape:
        raise ShapeError(f"scale shape {s.shape} does not match features {x.shape}")
    return x * s[:, :, None], (x, s)


def channel_scale_backward(ctx, dy):
    x, s = ctx
    dx = dy * s[:, :, None]
    ds = (dy * x).sum(axis=2)
    return dx, ds


def batchnorm1d_forward(
    x, gamma, beta, running_mean, running_var, *, train: bool,
    momentum: float = 0.1, eps: float = 1e-5,
):
    """Per-channel batch norm over (B, C, L).

    Returns (y, ctx, new_running_mean, new_running_var).  Running statistics
    are returned, not mutated, so the function stays pure; callers commit
    them.  Normalization uses biased batch variance, running_var tracks the
    unbiased estimate, matching common deep-learning practice.
    """
    if x.ndim != 3 or x.shape[1] != gamma.size:
        raise ShapeError(f"expected (B, {gamma.size}, L) features, got {x.shape}")
    if train:
        n = x.shape[0] * x.shape[2]
        mean = x.mean(axis=(0, 2))
        var = x.var(axis=(0, 2))
        unbiased = var * (n / (n - 1)) if n > 1 else var
        new_rm = (1.0 - momentum) * running_mean + momentum * mean
        new_rv = (1.0 - momentum) * running_var + momentum * unbiased
        train_flag = True
    else:
        mean, var = running_mean, running_var
        n = x.shape[0] * x.shape[2]
        new_rm, new_rv = running_mean, running_var
        train_flag = False
    inv_std = 1.0 / np.sqrt(var + eps)
    # single fused scale/shift pass; xhat is rebuilt lazily in backward
    scale = gamma * inv_std
    y = x * scale[None, :, None]
    y += (beta - mean * scale)[None, :, None]
    ctx = (x, mean, inv_std, gamma, n, train_flag)
    return y, ctx, new_rm, new_rv


def batchnorm1d_backward(ctx, dy):
    """Gradients of batchnorm1d_forward; returns (dx, dgamma, dbeta)."""
    x, mean, inv_std, gamma, n, train = ctx
    xhat = (x - mean[None, :, None]) * inv_std[None, :, None]
    dgamma = (dy * xhat).sum(axis=(0, 2))
    dbeta = dy.sum(axis=(0, 2))
    if train:
        # dx = (inv_std * gamma / n) * (n dy - sum(dy) - xhat * sum(dy xhat))
        dx = dy * n
        dx -= dbeta[None, :, None]
        dx -= xhat * dgamma[None, :, None]
        dx *= (inv_std * gamma / n)[None, :, None]
    else:
        dx = dy * (gamma * inv_std)[None, :, None]
    return dx, dgamma, dbeta


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over a batch; returns (loss, dlogits).

    dlogits is (softmax - onehot) / B, the exact gradient of the mean loss.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    B, n_classes = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"expected {B} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise LabelError(
            f"labels must lie in [0, {n_classes}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    log_softmax = shifted - np.log(total)
    loss = -float(log_softmax[np.arange(B), labels].mean())
    grad = exp / total
    grad[np.arange(B), labels] -= 1.0
    return loss, grad / B


# ---------------------------------------------------------------------------
# layer objects (thin stateful wrappers used to assemble models)


class Conv1d:
    def __init__(self, name, c_in, c_out, kernel, *, stride=1, padding=0, rng,
                 input_grad=True):
        self.stride, self.padding = stride, padding
        self.input_grad = input_grad
        self.w = Param(f"{name}.weight", kaiming_uniform((c_out, c_in, kernel), c_in * kernel, rng))
        self.b = Param(f"{name}.bias", np.zeros(c_out))
        self._ctx = None

    def forward(self, x, train=False):
        y, self._ctx = conv1d_forward(x, self.w.value, self.b.value, self.stride, self.padding)
        return y

    def backward(self, dy):
        dx, dw, db = conv1d_backward(self._ctx, dy, self.input_grad)
        self.w.grad += dw
        self.b.grad += db
        return dx

    def params(self):
        return [self.w, self.b]


class Linear:
    def __init__(self, name, d_in, d_out, *, rng):
        self.w = Param(f"{name}.weight", kaiming_uniform((d_out, d_in), d_in, rng))
        self.b = Param(f"{name}.bias", np.zeros(d_out))
        self._ctx = None

    def forward(self, x, train=False):
        y, self._ctx = linear_forward(x, self.w.value, self.b.value)
        return y

    def backward(self, dy):
        dx, dw, db = linear_backward(self._ctx, dy)
        self.w.grad += dw
        self.b.grad += db
        return dx

    def params(self):
        return [self.w, self.b]


class BatchNorm1d:
    """Batch norm layer with cumulative running statistics.

    The running mean/variance are the exact average of all batch statistics
    seen so far (effective momentum 1/n on the n-th batch), so inference
    mode is usable right after the first training batch even when
    activation scales are far from 1.
    """

    def __init__(self, name, channels, *, eps=1e-5):
        self.eps = eps
        self.gamma = Param(f"{name}.gamma", np.ones(channels))
        self.beta = Param(f"{name}.beta", np.zeros(channels))
        self.running_mean = Param(f"{name}.running_mean", np.zeros(channels), trainable=False)
        self.running_var = Param(f"{name}.running_var", np.ones(channels), trainable=False)
        self.batches_seen = Param(f"{name}.batches_seen", np.zeros(()), trainable=False)
        self._ctx = None

    def forward(self, x, train=False):
        momentum = 1.0 / (float(self.batches_seen.value) + 1.0) if train else 0.0
        y, self._ctx, new_rm, new_rv = batchnorm1d_forward(
            x, self.gamma.value, self.beta.value,
            self.running_mean.value, self.running_var.value,
            train=train, momentum=momentum, eps=self.eps,
        )
        if train:
            self.running_mean.value = new_rm
            self.running_var.value = new_rv
            self.batches_seen.value = self.batches_seen.value + 1.0
        return y

    def backward(self, dy):
        dx, dgamma, dbeta = batchnorm1d_backward(self._ctx, dy)
        self.gamma.grad += dgamma
        self.beta.grad += dbeta
        return dx

    def params(self):
        return [self.gamma, self.beta, self.running_mean, self.running_var,
                self.batches_seen]


class ReLU:
    def __init__(self):
        self._ctx = None

    def forward(self, x, train=False):
        y, self._ctx = relu_forward(x)
        return y

    def backward(self, dy):
        return relu_backward(self._ctx, dy)

    def params(self):
        return []


class MaxPool1d:
    def __init__(self, width):
        self.width = width
        self._ctx = None

    def forward(self, x, train=False):
        y, self._ctx = windowed_max_pool_forward(x, self.width)
        return y

    def backward(self, dy):
        return windowed_max_pool_backward(self._ctx, dy)

    def params(self):
        return []


class AvgPool1d:
    def __init__(self, width):
        self.width = width
        self._ctx = None

    def forward(self, x, train=False):
        y, self._ctx = windowed_avg_pool_forward(x, self.width)
        return y

    def backward(self, dy):
        return windowed_avg_pool_backward(self._ctx, dy)

    def params(self):
        return []


# ---------------------------------------------------------------------------
# optimization


class AdamW:
    """Adam with bias correction and decoupled weight decay.

    The decay step (value *= 1 - lr * wd) is applied independently of the
    adaptive update, so a zero gradient with positive decay still shrinks
    the parameter.
    """

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0):
        self.params = [p for p in params if p.trainable]
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad[...] = 0.0

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self._m, self._v):
            if self.weight_decay:
                p.value *= 1.0 - self.lr * self.weight_decay
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(p.grad)
            p.value -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class PlateauSchedule:
    """Halve the learning rate after `patience` consecutive non-improving batches.

    Training should stop once the rate drops below `floor`.
    """

    lr: float
    patience: int = 150
    factor: float = 0.5
    floor: float = 1e-7
    best_loss: float = math.inf
    stale_count: int = 0

    def step(self, batch_loss: float) -> float:
        if batch_loss < self.best_loss:
            self.best_loss = batch_loss
            self.stale_count = 0
        else:
            self.stale_count += 1
            if self.stale_count >= self.patience:
                self.lr *= self.factor
                self.stale_count = 0
        return self.lr

    @property
    def should_stop(self) -> bool:
        return self.lr < self.floor


# ---------------------------------------------------------------------------
# checkpoint format


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named float64 tensors: magic, count, then per-tensor records."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype=np.float64)
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise FormatError(f"tensor rank {arr.ndim} unsupported")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint written by :func:`save_checkpoint` (bit-exact)."""
    blob = Path(path).read_bytes()
    if len(blob) < 8 or blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a weight checkpoint")
    (count,) = struct.unpack_from("<I", blob, 4)
    offset = 8
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            dims = struct.unpack_from(f"<{rank}I", blob, offset)
            offset += 4 * rank
            n_values = int(np.prod(dims, dtype=np.int64)) if rank else 1
            end = offset + 8 * n_values
            if end > len(blob):
                raise FormatError(f"{path}: truncated tensor {name!r}")
            values = np.frombuffer(blob, dtype="<f8", offset=offset, count=n_values)
            tensors[name] = values.reshape(dims).astype(np.float64)
            offset = end
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint") from exc
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes")
    return tensors
