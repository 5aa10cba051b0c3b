"""Forward and backward passes of the per-timestep feature extractor and head.

Spatial layers take channel-last volumes, either a single ``[D1, D2, D3, C]``
volume or a batch ``[B, D1, D2, D3, C]``; outputs keep the same batching.
Every ``*_forward`` returns ``(output, cache)`` and the matching
``*_backward`` consumes that cache.  :func:`layer_backward` dispatches on
the cache kind.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import ContractError, LabelError, ShapeError
from .tensor import Tensor, activation, activation_grad

BN_EPSILON = 1e-3
BN_MOMENTUM = 0.99
DROPOUT_RATE = 0.5


@dataclass
class Conv3DParams:
    """Kernel ``[L, M, N, Cin, Cout]`` and bias ``[Cout]``; stride 1, valid padding."""

    kernel: Tensor
    bias: Tensor

    def __post_init__(self):
        if self.kernel.ndim != 5:
            raise ShapeError(f"conv kernel must be [L,M,N,Cin,Cout], got {self.kernel.shape}")
        if self.bias.shape != (self.kernel.shape[4],):
            raise ShapeError(f"conv bias {self.bias.shape} does not match Cout={self.kernel.shape[4]}")

    @property
    def n_params(self) -> int:
        return self.kernel.size + self.bias.size


@dataclass(frozen=True)
class Pool3DConfig:
    window: tuple[int, int, int] = (2, 2, 2)

    def __post_init__(self):
        if len(self.window) != 3 or min(self.window) < 1:
            raise ShapeError(f"pool window must be three extents >= 1, got {self.window}")


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    epsilon: float = BN_EPSILON
    momentum: float = BN_MOMENTUM
    mode: str = "train"

    @classmethod
    def fresh(cls, channels: int, dtype=np.float64) -> "BatchNormState":
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
        )

    @property
    def n_params(self) -> int:
        # the two running vectors are counted too, as Keras summaries do
        return 4 * self.gamma.size


@dataclass
class DenseParams:
    weights: Tensor
    bias: Tensor
    activation: str = "linear"

    def __post_init__(self):
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ShapeError(
                f"dense weights {self.weights.shape} and bias {self.bias.shape} are inconsistent"
            )

    @property
    def n_params(self) -> int:
        return self.weights.size + self.bias.size


@dataclass
class LayerCache:
    """Values saved by a forward call for its backward pass."""

    kind: str
    out_shape: tuple
    values: dict[str, Any] = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]


def _batched(x: Tensor, rank: int = 4) -> tuple[Tensor, bool]:
    if x.ndim == rank:
        return x[None], False
    if x.ndim == rank + 1:
        return x, True
    raise ShapeError(f"expected a rank-{rank} volume or a batch of them, got shape {x.shape}")


def _unbatch(y: Tensor, batched: bool) -> Tensor:
    return y if batched else y[0]


def _check_upstream(cache: LayerCache, upstream: Tensor, kind: str) -> None:
    if cache.kind != kind:
        raise ContractError(f"{kind} backward received a {cache.kind!r} cache")
    if tuple(upstream.shape) != tuple(cache.out_shape):
        raise ContractError(
            f"{kind} upstream shape {upstream.shape} != forward output shape {cache.out_shape}"
        )


# -- 3D convolution -----------------------------------------------------------


def conv3d_output_shape(in_shape, kernel_shape) -> tuple[int, int, int, int]:
    d1, d2, d3, cin = in_shape
    L, M, N, kcin, cout = kernel_shape
    if cin != kcin:
        raise ShapeError(f"input has {cin} channels but kernel expects {kcin}")
    if d1 < L or d2 < M or d3 < N:
        raise ShapeError(f"spatial extent {(d1, d2, d3)} is smaller than kernel {(L, M, N)}")
    return (d1 - L + 1, d2 - M + 1, d3 - N + 1, cout)


def conv3d_forward(x: Tensor, p: Conv3DParams) -> tuple[Tensor, LayerCache]:
    """Valid, stride-1 3D convolution (cross-correlation) summed over input channels.

    ``y[i,j,k,co] = sum_{l,m,n,ci} x[i+l, j+m, k+n, ci] * w[l,m,n,ci,co] + b[co]``
    """
    xb, batched = _batched(x)
    o1, o2, o3, cout = conv3d_output_shape(xb.shape[1:], p.kernel.shape)
    L, M, N = p.kernel.shape[:3]
    y = np.zeros((xb.shape[0], o1, o2, o3, cout), dtype=np.result_type(xb, p.kernel))
    # one BLAS product per kernel offset keeps memory at the size of the output
    for l in range(L):
        for m in range(M):
            for n in range(N):
                window = xb[:, l : l + o1, m : m + o2, n : n + o3, :]
                y += np.tensordot(window, p.kernel[l, m, n], axes=([4], [0]))
    y += p.bias
    y = _unbatch(y, batched)
    return y, LayerCache("conv3d", y.shape, {"x": xb, "batched": batched})


def conv3d_backward(p: Conv3DParams, cache: LayerCache, upstream: Tensor, need_input_grad: bool = True):
    """Returns ``(grad_x, {"kernel": ..., "bias": ...})``; ``grad_x`` is None if not requested."""
    _check_upstream(cache, upstream, "conv3d")
    xb = cache["x"]
    g, _ = _batched(upstream)
    o1, o2, o3 = g.shape[1:4]
    L, M, N = p.kernel.shape[:3]
    grad_kernel = np.empty_like(p.kernel)
    grad_x = np.zeros_like(xb) if need_input_grad else None
    for l in range(L):
        for m in range(M):
            for n in range(N):
                window = xb[:, l : l + o1, m : m + o2, n : n + o3, :]
                grad_kernel[l, m, n] = np.tensordot(window, g, axes=([0, 1, 2, 3], [0, 1, 2, 3]))
                if need_input_grad:
                    grad_x[:, l : l + o1, m : m + o2, n : n + o3, :] += np.tensordot(
                        g, p.kernel[l, m, n], axes=([4], [1])
                    )
    grad_bias = g.sum(axis=(0, 1, 2, 3))
    if grad_x is not None:
        grad_x = _unbatch(grad_x, cache["batched"])
    return grad_x, {"kernel": grad_kernel, "bias": grad_bias}


# -- 3D max pooling -----------------------------------------------------------


def maxpool3d_output_shape(in_shape, cfg: Pool3DConfig) -> tuple[int, int, int, int]:
    d1, d2, d3, c = in_shape
    P, Q, R = cfg.window
    if d1 < P or d2 < Q or d3 < R:
        raise ShapeError(f"pool window {cfg.window} larger than input extent {(d1, d2, d3)}")
    return (d1 // P, d2 // Q, d3 // R, c)


def maxpool3d_forward(x: Tensor, cfg: Pool3DConfig = Pool3DConfig()) -> tuple[Tensor, LayerCache]:
    """Non-overlapping max pooling; trailing voxels that do not fill a window are dropped."""
    xb, batched = _batched(x)
    o1, o2, o3, c = maxpool3d_output_shape(xb.shape[1:], cfg)
    P, Q, R = cfg.window
    B = xb.shape[0]
    win = (
        xb[:, : o1 * P, : o2 * Q, : o3 * R, :]
        .reshape(B, o1, P, o2, Q, o3, R, c)
        .transpose(0, 1, 3, 5, 7, 2, 4, 6)
        .reshape(B, o1, o2, o3, c, P * Q * R)
    )
    # argmax picks the first maximum, i.e. the lowest flat index in the window
    idx = np.argmax(win, axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    y = _unbatch(y, batched)
    return y, LayerCache(
        "maxpool3d", y.shape, {"idx": idx, "in_shape": xb.shape, "window": cfg.window, "batched": batched}
    )


def maxpool3d_backward(cache: LayerCache, upstream: Tensor) -> Tensor:
    _check_upstream(cache, upstream, "maxpool3d")
    g, _ = _batched(upstream)
    idx = cache["idx"]
    P, Q, R = cache["window"]
    B, d1, d2, d3, c = cache["in_shape"]
    o1, o2, o3 = idx.shape[1:4]
    gwin = np.zeros(idx.shape + (P * Q * R,), dtype=g.dtype)
    np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
    gwin = gwin.reshape(B, o1, o2, o3, c, P, Q, R).transpose(0, 1, 5, 2, 6, 3, 7, 4)
    grad_x = np.zeros((B, d1, d2, d3, c), dtype=g.dtype)
    grad_x[:, : o1 * P, : o2 * Q, : o3 * R, :] = gwin.reshape(B, o1 * P, o2 * Q, o3 * R, c)
    return _unbatch(grad_x, cache["batched"])


# -- batch normalization ------------------------------------------------------


def batchnorm_forward(xbatch: Tensor, s: BatchNormState) -> tuple[Tensor, LayerCache]:
    """Per-channel (last axis) normalization.

    In train mode the batch statistics are used and ``s.running_mean`` /
    ``s.running_var`` are updated in place; infer mode uses the running
    statistics and leaves ``s`` untouched.
    """
    axes = tuple(range(xbatch.ndim - 1))
    if s.mode == "train":
        if xbatch.shape[0] < 1:
            raise ShapeError("batch normalization in train mode needs at least one sample")
        mean = xbatch.mean(axis=axes)
        var = ((xbatch - mean) ** 2).mean(axis=axes)
        s.running_mean[...] = s.momentum * s.running_mean + (1.0 - s.momentum) * mean
        s.running_var[...] = s.momentum * s.running_var + (1.0 - s.momentum) * var
    elif s.mode == "infer":
        mean, var = s.running_mean, s.running_var
    else:
        raise ValueError(f"batch-norm mode must be 'train' or 'infer', got {s.mode!r}")
    inv_std = 1.0 / np.sqrt(var + s.epsilon)
    xhat = (xbatch - mean) * inv_std
    y = s.gamma * xhat + s.beta
    return y, LayerCache("batchnorm", y.shape, {"xhat": xhat, "inv_std": inv_std, "mode": s.mode})


def batchnorm_backward(s: BatchNormState, cache: LayerCache, upstream: Tensor):
    _check_upstream(cache, upstream, "batchnorm")
    xhat, inv_std = cache["xhat"], cache["inv_std"]
    axes = tuple(range(upstream.ndim - 1))
    grad_gamma = (upstream * xhat).sum(axis=axes)
    grad_beta = upstream.sum(axis=axes)
    dxhat = upstream * s.gamma
    if cache["mode"] == "infer":
        grad_x = dxhat * inv_std
    else:
        n = upstream.size // upstream.shape[-1]
        grad_x = (inv_std / n) * (
            n * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes)
        )
    return grad_x, {"gamma": grad_gamma, "beta": grad_beta}


# -- global max pooling -------------------------------------------------------


def global_maxpool3d_forward(x: Tensor) -> tuple[Tensor, LayerCache]:
    xb, batched = _batched(x)
    B, c = xb.shape[0], xb.shape[-1]
    flat = xb.reshape(B, -1, c)
    idx = np.argmax(flat, axis=1)
    y = np.take_along_axis(flat, idx[:, None, :], axis=1)[:, 0, :]
    y = _unbatch(y, batched)
    return y, LayerCache("global_maxpool3d", y.shape, {"idx": idx, "in_shape": xb.shape, "batched": batched})


def global_maxpool3d(x: Tensor) -> Tensor:
    """Per-channel maximum over all spatial positions."""
    return global_maxpool3d_forward(x)[0]


def global_maxpool3d_backward(cache: LayerCache, upstream: Tensor) -> Tensor:
    _check_upstream(cache, upstream, "global_maxpool3d")
    shape = cache["in_shape"]
    g = upstream if cache["batched"] else upstream[None]
    flat = np.zeros((shape[0], int(np.prod(shape[1:4])), shape[4]), dtype=g.dtype)
    np.put_along_axis(flat, cache["idx"][:, None, :], g[:, None, :], axis=1)
    return _unbatch(flat.reshape(shape), cache["batched"])


# -- dense --------------------------------------------------------------------


def dense_forward(x: Tensor, p: DenseParams) -> tuple[Tensor, LayerCache]:
    if x.ndim != 2 or x.shape[1] != p.weights.shape[0]:
        raise ShapeError(f"dense input {x.shape} does not match weights {p.weights.shape}")
    pre = x @ p.weights + p.bias
    y = activation(pre, p.activation)
    return y, LayerCache("dense", y.shape, {"x": x, "pre": pre, "y": y})


def dense_backward(p: DenseParams, cache: LayerCache, upstream: Tensor):
    _check_upstream(cache, upstream, "dense")
    if p.activation == "linear":
        dpre = upstream
    else:
        dpre = upstream * activation_grad(cache["pre"], cache["y"], p.activation)
    grad_w = cache["x"].T @ dpre
    grad_b = dpre.sum(axis=0)
    grad_x = dpre @ p.weights.T
    return grad_x, {"weights": grad_w, "bias": grad_b}


# -- dropout ------------------------------------------------------------------


def dropout(x: Tensor, rate: float, mode: str, rng: np.random.Generator | None = None):
    """Inverted dropout.  Returns ``(y, mask)``; ``mask`` already carries the 1/(1-rate) scale."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "infer" or rate == 0.0:
        mask = np.ones_like(x)
        return x.copy(), mask
    if rng is None:
        raise ValueError("train-mode dropout needs a random generator")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / (1.0 - rate)
    return x * mask, mask


def dropout_backward(mask: Tensor, upstream: Tensor) -> Tensor:
    if mask.shape != upstream.shape:
        raise ContractError(f"dropout upstream {upstream.shape} != mask {mask.shape}")
    return upstream * mask


# -- softmax / cross-entropy head ---------------------------------------------


def softmax(logits: Tensor) -> Tensor:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels):
    """Mean categorical cross-entropy.

    Returns ``(loss, probs, grad_logits)`` with ``grad_logits = (probs - onehot) / B``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    B, K = logits.shape
    if labels.shape != (B,):
        raise LabelError(f"expected {B} labels, got {labels.shape}")
    if B and (labels.min() < 0 or labels.max() >= K):
        raise LabelError(f"labels must lie in [0, {K}), got {labels.tolist()}")
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    probs = np.exp(log_probs)
    rows = np.arange(B)
    loss = float(-log_probs[rows, labels].mean())
    grad = probs.copy()
    grad[rows, labels] -= 1.0
    grad /= B
    return loss, probs, grad


# -- dispatch -----------------------------------------------------------------


def layer_backward(params, cache: LayerCache, upstream: Tensor):
    """Backward pass for any layer kind, as ``(grad_input, grad_params)``.

    ``params`` is the layer's parameter object (``None`` for parameter-free
    layers).  ``grad_params`` is an empty dict for parameter-free layers.
    """
    kind = cache.kind
    if kind == "conv3d":
        return conv3d_backward(params, cache, upstream)
    if kind == "maxpool3d":
        return maxpool3d_backward(cache, upstream), {}
    if kind == "batchnorm":
        return batchnorm_backward(params, cache, upstream)
    if kind == "global_maxpool3d":
        return global_maxpool3d_backward(cache, upstream), {}
    if kind == "dense":
        return dense_backward(params, cache, upstream)
    if kind == "dropout":
        return dropout_backward(cache["mask"], upstream), {}
    raise ContractError(f"no backward pass for layer kind {kind!r}")


def dropout_forward(x: Tensor, rate: float, mode: str, rng=None) -> tuple[Tensor, LayerCache]:
    y, mask = dropout(x, rate, mode, rng)
    return y, LayerCache("dropout", y.shape, {"mask": mask})
