"""
Federated sCT Simulator - Differentiable Layer Set

Dense NumPy tensors with hand-derived reverse-mode rules for the small layer
set the residual U-Net needs: same-padded stride-1 convolution, batch
normalization, ReLU, 2x2 max-pooling, nearest-neighbour x2 upsampling, the L1
loss and the proximal penalty of the local objective, plus an Adam optimizer.

Every forward function returns ``(output, cache)``; the matching ``*_backward``
consumes the upstream gradient and the cache. Arrays are plain ``numpy.ndarray``
in NCHW layout; float32 is used for training and float64 for gradient checks.
"""

import enum
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, NamedTuple, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

import config
import utils

logger = utils.logger

__all__ = [
    "ParamKind",
    "LayerTag",
    "Parameter",
    "AdamState",
    "Adam",
    "conv2d",
    "conv2d_backward",
    "batchnorm2d",
    "batchnorm2d_backward",
    "relu",
    "relu_backward",
    "maxpool2d",
    "maxpool2d_backward",
    "upsample2d_nearest",
    "upsample2d_nearest_backward",
    "l1_loss",
    "prox_penalty",
    "adam_step",
    "numerical_gradient",
    "relative_error",
]

SUPPORTED_KERNELS = (1, 3, 7)

# ============================================================================
# Parameters and Tags
# ============================================================================


class ParamKind(str, enum.Enum):
    """Role of a parameter inside its layer."""

    CONV_WEIGHT = "conv_weight"
    CONV_BIAS = "conv_bias"
    BN_GAMMA = "bn_gamma"
    BN_BETA = "bn_beta"
    BN_RUNNING_MEAN = "bn_running_mean"
    BN_RUNNING_VAR = "bn_running_var"

    @property
    def code(self) -> int:
        return list(ParamKind).index(self)

    @classmethod
    def from_code(cls, code: int) -> "ParamKind":
        members = list(cls)
        if not 0 <= code < len(members):
            raise ValueError(f"unknown parameter kind code {code}")
        return members[code]


_BN_KINDS = frozenset({ParamKind.BN_GAMMA, ParamKind.BN_BETA, ParamKind.BN_RUNNING_MEAN, ParamKind.BN_RUNNING_VAR})
_RUNNING_KINDS = frozenset({ParamKind.BN_RUNNING_MEAN, ParamKind.BN_RUNNING_VAR})


@dataclass(frozen=True)
class LayerTag:
    """Kind of a parameter and the ordinal of the layer that owns it."""

    kind: ParamKind
    layer_index: int

    @property
    def is_batchnorm(self) -> bool:
        return self.kind in _BN_KINDS

    @property
    def trainable(self) -> bool:
        """Running statistics are buffers: never touched by the optimizer."""
        return self.kind not in _RUNNING_KINDS


@dataclass
class Parameter:
    """A value, its accumulated gradient and its tag."""

    value: np.ndarray
    tag: LayerTag
    grad: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad.fill(0)

    def accumulate(self, grad: np.ndarray) -> None:
        if grad.shape != self.value.shape:
            raise ValueError(f"gradient shape {grad.shape} does not match parameter shape {self.value.shape}")
        self.grad += grad


# ============================================================================
# Convolution
# ============================================================================


class ConvCache(NamedTuple):
    windows: np.ndarray
    weight: np.ndarray
    input_shape: Tuple[int, ...]


def _check_conv_shapes(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> int:
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be NCHW, got rank {x.ndim}")
    if weight.ndim != 4:
        raise ValueError(f"conv2d weight must be FCkk, got rank {weight.ndim}")
    n_filters, in_channels, kh, kw = weight.shape
    if kh != kw:
        raise ValueError(f"conv2d kernel must be square, got axis 2 = {kh} and axis 3 = {kw}")
    if kh not in SUPPORTED_KERNELS:
        raise ValueError(f"conv2d kernel size {kh} not in {SUPPORTED_KERNELS}")
    if x.shape[1] != in_channels:
        raise ValueError(f"conv2d channel axis mismatch: input axis 1 = {x.shape[1]}, weight axis 1 = {in_channels}")
    if bias.shape != (n_filters,):
        raise ValueError(f"conv2d bias axis 0 = {bias.shape} does not match {n_filters} filters")
    if x.shape[2] < kh or x.shape[3] < kh:
        raise ValueError(f"conv2d spatial axes {x.shape[2:]} smaller than kernel {kh}")
    return kh


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> Tuple[np.ndarray, ConvCache]:
    """Same-padded, stride-1 2D convolution (cross-correlation).

    Args:
        x: Input of shape ``[N, C, H, W]``
        weight: Filters of shape ``[F, C, k, k]`` with ``k`` in {1, 3, 7}
        bias: Per-filter bias ``[F]``

    Returns:
        ``([N, F, H, W] output, cache)``
    """
    k = _check_conv_shapes(x, weight, bias)
    pad = k // 2
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))  # N, C, H, W, k, k
    out = np.tensordot(windows, weight, axes=([1, 4, 5], [1, 2, 3]))  # N, H, W, F
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    out += bias[None, :, None, None]
    return out, ConvCache(windows, weight, x.shape)


def conv2d_backward(dout: np.ndarray, cache: ConvCache) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of :func:`conv2d` with respect to input, weight and bias."""
    windows, weight, _ = cache
    dbias = dout.sum(axis=(0, 2, 3))
    dweight = np.tensordot(dout, windows, axes=([0, 2, 3], [0, 2, 3]))  # F, C, k, k
    # Input gradient is a same-padded convolution with the flipped, transposed kernel.
    flipped = np.ascontiguousarray(weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    dx, _ = conv2d(dout, flipped, np.zeros(flipped.shape[0], dtype=dout.dtype))
    return dx, dweight, dbias


# ============================================================================
# Batch Normalization
# ============================================================================


class BatchNormCache(NamedTuple):
    x_hat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    train: bool


def batchnorm2d(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tuple[np.ndarray, BatchNormCache]:
    """Per-channel batch normalization over the N, H and W axes.

    In train mode the batch statistics normalize the input and the running
    statistics are updated in place (unbiased variance). In eval mode only the
    running statistics are used and nothing is mutated.
    """
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ValueError(f"batchnorm2d channel axis mismatch: input axis 1 = {channels}, gamma {gamma.shape}")
    if running_mean.shape != (channels,) or running_var.shape != (channels,):
        raise ValueError(f"batchnorm2d running statistics do not match {channels} channels")

    if train:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        count = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var * (count / (count - 1)) if count > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mean = running_mean
        var = running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma[None, :, None, None] * x_hat + beta[None, :, None, None]
    return out.astype(x.dtype, copy=False), BatchNormCache(x_hat, inv_std, gamma, train)


def batchnorm2d_backward(dout: np.ndarray, cache: BatchNormCache) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of :func:`batchnorm2d` with respect to input, gamma and beta."""
    x_hat, inv_std, gamma, train = cache
    dbeta = dout.sum(axis=(0, 2, 3))
    dgamma = (dout * x_hat).sum(axis=(0, 2, 3))
    dx_hat = dout * gamma[None, :, None, None]
    if not train:
        return dx_hat * inv_std[None, :, None, None], dgamma, dbeta
    count = dout.shape[0] * dout.shape[2] * dout.shape[3]
    sum_dx_hat = dx_hat.sum(axis=(0, 2, 3))[None, :, None, None]
    sum_dx_hat_xhat = (dx_hat * x_hat).sum(axis=(0, 2, 3))[None, :, None, None]
    dx = (inv_std[None, :, None, None] / count) * (count * dx_hat - sum_dx_hat - x_hat * sum_dx_hat_xhat)
    return dx, dgamma, dbeta


# ============================================================================
# Activation, Pooling, Upsampling
# ============================================================================


def relu(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mask = x > 0
    return x * mask, mask


def relu_backward(dout: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dout * mask


class PoolCache(NamedTuple):
    indices: np.ndarray
    input_shape: Tuple[int, ...]


def maxpool2d(x: np.ndarray) -> Tuple[np.ndarray, PoolCache]:
    """2x2 max-pooling with stride 2.

    Returns the pooled tensor and a cache holding, per output cell, the flat
    index (0..3, row-major within the window) of the winning input. Ties go to
    the first occurrence.
    """
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2d needs even spatial axes, got axis 2 = {h}, axis 3 = {w}")
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    indices = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, indices[..., None], axis=-1)[..., 0]
    return out, PoolCache(indices, x.shape)


def maxpool2d_backward(dout: np.ndarray, cache: PoolCache) -> np.ndarray:
    indices, (n, c, h, w) = cache
    blocks = np.zeros((n, c, h // 2, w // 2, 4), dtype=dout.dtype)
    np.put_along_axis(blocks, indices[..., None], dout[..., None], axis=-1)
    return blocks.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


def upsample2d_nearest(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbour x2 upsampling by pixel replication."""
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample2d_nearest_backward(dout: np.ndarray) -> np.ndarray:
    n, c, h, w = dout.shape
    return dout.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


# ============================================================================
# Objectives
# ============================================================================


def l1_loss(pred: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean absolute error and its gradient ``sign(pred - target) / n``."""
    if pred.shape != target.shape:
        raise ValueError(f"l1_loss shape mismatch: pred {pred.shape} vs target {target.shape}")
    if pred.size == 0:
        raise ValueError("l1_loss of empty tensors is undefined")
    diff = pred - target
    value = float(np.abs(diff).mean(dtype=np.float64))
    grad = (np.sign(diff) / pred.size).astype(pred.dtype, copy=False)
    return value, grad


def prox_penalty(w: np.ndarray, w_ref: np.ndarray, mu: float) -> Tuple[float, np.ndarray]:
    """Proximal term ``(mu / 2) * ||w - w_ref||^2`` and its gradient ``mu * (w - w_ref)``."""
    if mu < 0:
        raise ValueError(f"proximal coefficient must be non-negative, got {mu}")
    if w.shape != w_ref.shape:
        raise ValueError(f"prox_penalty shape mismatch: {w.shape} vs {w_ref.shape}")
    diff = w - w_ref
    value = 0.5 * mu * float(np.dot(diff.ravel().astype(np.float64), diff.ravel().astype(np.float64)))
    return value, mu * diff


# ============================================================================
# Adam
# ============================================================================


@dataclass
class AdamState:
    """First/second moment estimates for one parameter."""

    m: np.ndarray
    v: np.ndarray
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def for_parameter(cls, param: Parameter, **hyper: Any) -> "AdamState":
        return cls(m=np.zeros_like(param.value), v=np.zeros_like(param.value), **hyper)


def adam_step(param: Parameter, state: AdamState) -> Parameter:
    """Apply one bias-corrected Adam update in place.

    Running batch-norm statistics are buffers and are returned unchanged.

    Raises:
        FloatingPointError: if the gradient holds NaN or infinity
    """
    if not param.tag.trainable:
        return param
    if state.m.shape != param.value.shape or state.v.shape != param.value.shape:
        raise ValueError(f"Adam state shape {state.m.shape} does not match parameter {param.value.shape}")
    grad = param.grad
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError(f"non-finite gradient for {param.tag.kind.value} of layer {param.tag.layer_index}")

    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    param.value -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(param.value.dtype, copy=False)
    return param


class Adam:
    """Adam over a named collection of parameters."""

    def __init__(
        self,
        params: Iterable[Tuple[str, Parameter]],
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params: Dict[str, Parameter] = {name: p for name, p in params if p.tag.trainable}
        self.states: Dict[str, AdamState] = {
            name: AdamState.for_parameter(p, lr=lr, beta1=beta1, beta2=beta2, eps=eps)
            for name, p in self.params.items()
        }

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        for name, p in self.params.items():
            try:
                adam_step(p, self.states[name])
            except FloatingPointError as e:
                raise FloatingPointError(f"{name}: {e}") from e


# ============================================================================
# Gradient Checking
# ============================================================================


def numerical_gradient(f: Callable[[], float], x: np.ndarray, eps: Optional[float] = None) -> np.ndarray:
    """Central finite differences of the scalar ``f()`` with respect to ``x``.

    ``x`` is perturbed in place and restored, so ``f`` should read it by
    reference. Use float64 arrays.
    """
    eps = config.GRADCHECK_EPS if eps is None else eps
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"], op_flags=[["readwrite"]])
    for _ in it:
        idx = it.multi_index
        original = x[idx]
        x[idx] = original + eps
        plus = f()
        x[idx] = original - eps
        minus = f()
        x[idx] = original
        grad[idx] = (plus - minus) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm relative error with a floor that keeps near-zero gradients stable."""
    if analytic.size == 0:
        return 0.0
    num = float(np.max(np.abs(analytic - numeric)))
    scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))), 1e-8)
    return num / scale if math.isfinite(num) else math.inf
