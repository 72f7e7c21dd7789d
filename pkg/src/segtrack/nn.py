"""Minimal differentiable layers, ADAM, and the parameter checkpoint format.

Tensors are plain numpy arrays laid out as ``(C, H, W)`` or batched
``(N, C, H, W)``.  Every layer is a forward function plus an explicit
backward function; backward functions take the forward input as their cache.
Convolution weights are ``(C_out, C_in, k, k)`` with ``k`` in ``{1, 3}``.

The heavy 3x3 correlation primitive has two interchangeable backends: numpy
(always available) and torch (used automatically when importable, for speed).
The gradient formulas live here in either case.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

try:  # optional accelerator for the correlation primitive
    import torch
    import torch.nn.functional as _tF
except ImportError:  # pragma: no cover - exercised only without torch
    torch = None

_BACKEND = os.environ.get("SEGTRACK_BACKEND", "torch" if torch is not None else "numpy")
if torch is not None:
    torch.set_num_threads(int(os.environ.get("SEGTRACK_TORCH_THREADS", "1")))


def set_backend(name: str) -> None:
    """Select the correlation backend: ``"numpy"`` or ``"torch"``."""
    global _BACKEND
    if name not in ("numpy", "torch"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "torch" and torch is None:
        raise RuntimeError("torch backend requested but torch is not installed")
    _BACKEND = name


def get_backend() -> str:
    return _BACKEND


# ---------------------------------------------------------------------------
# parameters


@dataclass
class LayerParams:
    """Trainable convolution parameters with gradient buffers."""

    weights: np.ndarray
    bias: np.ndarray
    grad_weights: np.ndarray = field(default=None, repr=False)
    grad_bias: np.ndarray = field(default=None, repr=False)
    trainable: bool = True

    def __post_init__(self):
        if self.weights.ndim != 4 or self.weights.shape[2] != self.weights.shape[3]:
            raise ValueError(f"conv weights must be (out, in, k, k), got {self.weights.shape}")
        if self.weights.shape[2] not in (1, 3):
            raise ValueError("only 1x1 and 3x3 kernels are supported")
        if self.bias.shape != (self.weights.shape[0],):
            raise ValueError("bias must have one entry per output channel")
        if self.grad_weights is None:
            self.grad_weights = np.zeros_like(self.weights)
        if self.grad_bias is None:
            self.grad_bias = np.zeros_like(self.bias)

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[2]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    def zero_grad(self) -> None:
        self.grad_weights[...] = 0
        self.grad_bias[...] = 0

    @classmethod
    def kaiming(cls, in_channels, out_channels, kernel_size, rng, dtype=np.float32):
        """Fan-in scaled normal init, zero bias."""
        fan_in = in_channels * kernel_size * kernel_size
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (out_channels, in_channels, kernel_size, kernel_size))
        return cls(w.astype(dtype), np.zeros(out_channels, dtype=dtype))


# ---------------------------------------------------------------------------
# convolution


def _batched(x):
    return (x[None], True) if x.ndim == 3 else (x, False)


def _corr3_numpy(x, w):
    # x (N, C, H, W), w (O, C, 3, 3); zero padding 1
    n, c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def _corr3_weight_grad_numpy(x, g):
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))


def _corr3_torch(x, w):
    with torch.no_grad():
        y = _tF.conv2d(torch.from_numpy(np.ascontiguousarray(x)), torch.from_numpy(np.ascontiguousarray(w)), padding=1)
    return y.numpy()


def _corr3_weight_grad_torch(x, g):
    # correlate input with output gradient, treating the batch as channels
    with torch.no_grad():
        xt = torch.from_numpy(np.ascontiguousarray(x.transpose(1, 0, 2, 3)))
        gt = torch.from_numpy(np.ascontiguousarray(g.transpose(1, 0, 2, 3)))
        gw = _tF.conv2d(xt, gt, padding=1)  # (C, O, 3, 3)
    return gw.numpy().transpose(1, 0, 2, 3)


def _corr3(x, w):
    return _corr3_torch(x, w) if _BACKEND == "torch" else _corr3_numpy(x, w)


def _corr3_weight_grad(x, g):
    if _BACKEND == "torch":
        return _corr3_weight_grad_torch(x, g)
    return _corr3_weight_grad_numpy(x, g)


def conv2d(x: np.ndarray, params: LayerParams) -> np.ndarray:
    """Stride-1 convolution (cross-correlation) preserving spatial size.

    3x3 kernels use symmetric zero padding of one pixel.
    """
    xb, single = _batched(x)
    xb = xb.astype(np.result_type(xb, params.weights), copy=False)
    if xb.shape[1] != params.in_channels:
        raise ValueError(f"input has {xb.shape[1]} channels, weights expect {params.in_channels}")
    if params.kernel_size == 1:
        y = np.einsum("oc,nchw->nohw", params.weights[:, :, 0, 0], xb, optimize=True)
    else:
        y = _corr3(xb, params.weights)
    y = y + params.bias[None, :, None, None]
    return y[0] if single else y


def conv2d_backward(grad_out: np.ndarray, x: np.ndarray, params: LayerParams) -> np.ndarray:
    """Accumulate weight/bias gradients into ``params`` and return the input gradient."""
    gb, single = _batched(grad_out)
    xb, _ = _batched(x)
    dtype = np.result_type(gb, xb, params.weights)
    gb, xb = gb.astype(dtype, copy=False), xb.astype(dtype, copy=False)
    params.grad_bias += gb.sum(axis=(0, 2, 3))
    if params.kernel_size == 1:
        w = params.weights[:, :, 0, 0]
        params.grad_weights[:, :, 0, 0] += np.einsum("nohw,nchw->oc", gb, xb, optimize=True)
        gx = np.einsum("oc,nohw->nchw", w, gb, optimize=True)
    else:
        params.grad_weights += _corr3_weight_grad(xb, gb)
        flipped = np.ascontiguousarray(params.weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gx = _corr3(gb, flipped)
    return gx[0] if single else gx


# ---------------------------------------------------------------------------
# activations


def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, x):
    return grad_out * (x > 0)


def _check_pelu(a, b):
    if a <= 0 or b <= 0:
        raise ValueError("PeLU parameters must be positive")


def pelu(x, a=1.0, b=1.0):
    """Parametric ELU: (a/b)x for x >= 0, a(exp(x/b) - 1) otherwise."""
    _check_pelu(a, b)
    neg = a * np.expm1(np.minimum(x, 0) / b)
    return np.where(x >= 0, (a / b) * x, neg)


def pelu_backward(grad_out, x, a=1.0, b=1.0):
    _check_pelu(a, b)
    slope = np.where(x >= 0, a / b, (a / b) * np.exp(np.minimum(x, 0) / b))
    return grad_out * slope


def activation(x, kind="relu", a=1.0, b=1.0):
    if kind == "relu":
        return relu(x)
    if kind == "pelu":
        return pelu(x, a, b)
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(grad_out, x, kind="relu", a=1.0, b=1.0):
    if kind == "relu":
        return relu_backward(grad_out, x)
    if kind == "pelu":
        return pelu_backward(grad_out, x, a, b)
    raise ValueError(f"unknown activation {kind!r}")


def softmax_channels(x):
    """Per-pixel softmax over the channel axis (axis -3)."""
    if x.shape[-3] < 2:
        raise ValueError("softmax needs at least two channels")
    z = x - x.max(axis=-3, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-3, keepdims=True)


# ---------------------------------------------------------------------------
# upsampling


def bilinear_matrix(n: int, dtype=np.float64) -> np.ndarray:
    """(2n, n) interpolation matrix, half-pixel centers, edge clamped."""
    out = np.arange(2 * n)
    src = np.clip((out + 0.5) / 2.0 - 0.5, 0, n - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = src - lo
    m = np.zeros((2 * n, n), dtype=dtype)
    m[out, lo] += 1 - frac
    m[out, hi] += frac
    return m


def upsample2x(x, mode="bilinear"):
    h, w = x.shape[-2:]
    if mode == "nearest":
        return x.repeat(2, axis=-2).repeat(2, axis=-1)
    if mode == "bilinear":
        mh = bilinear_matrix(h, x.dtype)
        mw = bilinear_matrix(w, x.dtype)
        return mh @ x @ mw.T
    raise ValueError(f"unknown upsample mode {mode!r}")


def upsample2x_backward(grad_out, mode="bilinear"):
    h2, w2 = grad_out.shape[-2:]
    if mode == "nearest":
        s = grad_out.shape[:-2] + (h2 // 2, 2, w2 // 2, 2)
        return grad_out.reshape(s).sum(axis=(-1, -3))
    if mode == "bilinear":
        mh = bilinear_matrix(h2 // 2, grad_out.dtype)
        mw = bilinear_matrix(w2 // 2, grad_out.dtype)
        return mh.T @ grad_out @ mw
    raise ValueError(f"unknown upsample mode {mode!r}")


# ---------------------------------------------------------------------------
# loss

LOG_CLAMP = 1e-7


def crossentropy_loss(logits, target_mask):
    """Mean two-class negative log-likelihood and its gradient w.r.t. logits.

    ``logits`` is ``(2, H, W)`` or ``(N, 2, H, W)``; class 1 is the target.
    Probabilities are softmax(logits); the log is clamped at ``LOG_CLAMP``
    for the reported value.  The gradient is the unclamped ``p - onehot``,
    which stays finite, so confidently wrong pixels still receive a signal.
    """
    lb, single = _batched(logits)
    tb = np.asarray(target_mask).astype(bool)
    if tb.ndim == 2:
        tb = tb[None]
    if lb.shape[1] != 2 or tb.shape != (lb.shape[0],) + lb.shape[2:]:
        raise ValueError("logits must be (N, 2, H, W) with a matching (N, H, W) mask")
    p = softmax_channels(lb)
    p_true = np.where(tb, p[:, 1], p[:, 0])
    count = tb.size
    loss = float(-np.log(np.maximum(p_true, LOG_CLAMP)).sum() / count)
    onehot = np.stack([~tb, tb], axis=1).astype(lb.dtype)
    grad = (p - onehot) / count
    return loss, (grad[0] if single else grad)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    decay_factor: float = 0.2
    decay_interval_epochs: int = 15
    step_count: int = 0
    first_moment: dict = field(default_factory=dict, repr=False)
    second_moment: dict = field(default_factory=dict, repr=False)
    base_learning_rate: float = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.base_learning_rate is None:
            self.base_learning_rate = self.learning_rate

    def set_epoch(self, epoch: int) -> float:
        """Apply the step decay for a 0-based epoch index and return the rate."""
        self.learning_rate = self.base_learning_rate * self.decay_factor ** (epoch // self.decay_interval_epochs)
        return self.learning_rate


def adam_step(params: dict, state: AdamState) -> None:
    """One ADAM update of every trainable entry of ``params`` (name -> LayerParams)."""
    state.step_count += 1
    t = state.step_count
    c1 = 1 - state.beta1**t
    c2 = 1 - state.beta2**t
    for name, p in params.items():
        if not p.trainable:
            continue
        for suffix, value, grad in (("w", p.weights, p.grad_weights), ("b", p.bias, p.grad_bias)):
            key = f"{name}.{suffix}"
            m = state.first_moment.setdefault(key, np.zeros_like(value))
            v = state.second_moment.setdefault(key, np.zeros_like(value))
            m *= state.beta1
            m += (1 - state.beta1) * grad
            v *= state.beta2
            v += (1 - state.beta2) * grad * grad
            value -= (state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)).astype(value.dtype)


# ---------------------------------------------------------------------------
# checkpoint format
#
#   magic   8 bytes  b"SEGTRKCK"
#   version uint32   FORMAT_VERSION
#   count   uint32   number of tensors
#   per tensor, in order:
#     name_len uint16, name (utf-8), ndim uint8, dims uint32 * ndim,
#     data float32 * prod(dims), row-major
#   all integers and floats little-endian

MAGIC = b"SEGTRKCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors: dict) -> None:
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_tensors(path) -> dict:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a segtrack tensor file")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    pos = 16
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) * 4
            if pos + size > len(buf):
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f4", count=size // 4, offset=pos).reshape(shape).astype(np.float32)
            pos += size
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated file") from exc
    return out


def save_checkpoint(path, params: dict) -> None:
    """Write ``name -> LayerParams`` as ``name.weight`` / ``name.bias`` tensors."""
    tensors = {}
    for name, p in params.items():
        tensors[f"{name}.weight"] = p.weights
        tensors[f"{name}.bias"] = p.bias
    save_tensors(path, tensors)


def load_checkpoint(path, params: dict) -> None:
    """Fill ``params`` in place from a checkpoint; shapes must match."""
    tensors = load_tensors(path)
    for name, p in params.items():
        for suffix, dest in (("weight", p.weights), ("bias", p.bias)):
            key = f"{name}.{suffix}"
            if key not in tensors:
                raise CheckpointError(f"{path}: missing tensor {key!r}")
            if tensors[key].shape != dest.shape:
                raise CheckpointError(f"{path}: {key} has shape {tensors[key].shape}, expected {dest.shape}")
            dest[...] = tensors[key]
