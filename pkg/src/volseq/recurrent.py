"""LSTM and GRU cells, masked sequence runners and backpropagation through time.

Gate blocks are stored fused along the last axis:

* LSTM: ``W [in, 4H]``, ``U [H, 4H]``, ``b [4H]`` in gate order input,
  forget, candidate, output.  One bias per gate.
* GRU: ``W [in, 3H]``, ``U [H, 3H]``, input bias ``b [3H]`` and recurrent
  bias ``c [3H]`` in gate order update, reset, candidate.  The reset gate
  multiplies the recurrent product (``r * (h U_h + c_h)``).

All step functions take batched inputs: ``x [B, in]``, ``h [B, H]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, InputError, ShapeError
from .tensor import Tensor, sigmoid


@dataclass
class LstmParams:
    W: Tensor
    U: Tensor
    b: Tensor

    def __post_init__(self):
        H = self.U.shape[0]
        if self.U.shape != (H, 4 * H) or self.W.shape[1] != 4 * H or self.b.shape != (4 * H,):
            raise ShapeError(
                f"inconsistent LSTM blocks W{self.W.shape} U{self.U.shape} b{self.b.shape}"
            )

    @property
    def hidden(self) -> int:
        return self.U.shape[0]

    @property
    def input_width(self) -> int:
        return self.W.shape[0]

    @property
    def n_params(self) -> int:
        return self.W.size + self.U.size + self.b.size

    def arrays(self) -> dict[str, Tensor]:
        return {"W": self.W, "U": self.U, "b": self.b}


@dataclass
class GruParams:
    W: Tensor
    U: Tensor
    b: Tensor
    c: Tensor

    def __post_init__(self):
        H = self.U.shape[0]
        if (
            self.U.shape != (H, 3 * H)
            or self.W.shape[1] != 3 * H
            or self.b.shape != (3 * H,)
            or self.c.shape != (3 * H,)
        ):
            raise ShapeError(
                f"inconsistent GRU blocks W{self.W.shape} U{self.U.shape} b{self.b.shape} c{self.c.shape}"
            )

    @property
    def hidden(self) -> int:
        return self.U.shape[0]

    @property
    def input_width(self) -> int:
        return self.W.shape[0]

    @property
    def n_params(self) -> int:
        return self.W.size + self.U.size + self.b.size + self.c.size

    def arrays(self) -> dict[str, Tensor]:
        return {"W": self.W, "U": self.U, "b": self.b, "c": self.c}


def lstm_param_count(n_in: int, hidden: int) -> int:
    return 4 * ((n_in + hidden) * hidden + hidden)


def gru_param_count(n_in: int, hidden: int) -> int:
    return 3 * (n_in * hidden + hidden * hidden + 2 * hidden)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape, dtype=np.float64) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_lstm(rng: np.random.Generator, n_in: int, hidden: int, dtype=np.float64) -> LstmParams:
    # per-gate Glorot blocks, forget-gate bias 1
    W = np.concatenate([glorot(rng, n_in, hidden, (n_in, hidden), dtype) for _ in range(4)], axis=1)
    U = np.concatenate([glorot(rng, hidden, hidden, (hidden, hidden), dtype) for _ in range(4)], axis=1)
    b = np.zeros(4 * hidden, dtype)
    b[hidden : 2 * hidden] = 1.0
    return LstmParams(W, U, b)


def init_gru(rng: np.random.Generator, n_in: int, hidden: int, dtype=np.float64) -> GruParams:
    W = np.concatenate([glorot(rng, n_in, hidden, (n_in, hidden), dtype) for _ in range(3)], axis=1)
    U = np.concatenate([glorot(rng, hidden, hidden, (hidden, hidden), dtype) for _ in range(3)], axis=1)
    return GruParams(W, U, np.zeros(3 * hidden, dtype), np.zeros(3 * hidden, dtype))


@dataclass
class RecurrentState:
    h: Tensor
    c: Tensor | None = None


def _as_batch(x: Tensor, width: int, what: str) -> tuple[Tensor, bool]:
    batched = x.ndim == 2
    xb = x if batched else x[None]
    if xb.ndim != 2 or xb.shape[1] != width:
        raise ShapeError(f"{what} has shape {x.shape}, expected width {width}")
    return xb, batched


# -- single steps -------------------------------------------------------------


def lstm_step(x_t: Tensor, state: RecurrentState, p: LstmParams):
    """One LSTM step.  Returns ``(RecurrentState, cache)``."""
    H = p.hidden
    x, batched = _as_batch(x_t, p.input_width, "LSTM input")
    h, _ = _as_batch(state.h, H, "LSTM hidden state")
    c, _ = _as_batch(state.c, H, "LSTM cell state")
    a = x @ p.W + h @ p.U + p.b
    i = sigmoid(a[:, :H])
    f = sigmoid(a[:, H : 2 * H])
    g = np.tanh(a[:, 2 * H : 3 * H])
    o = sigmoid(a[:, 3 * H :])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    cache = {"x": x, "h": h, "c": c, "i": i, "f": f, "g": g, "o": o, "tc": tc}
    if not batched:
        return RecurrentState(h_new[0], c_new[0]), cache
    return RecurrentState(h_new, c_new), cache


def lstm_step_backward(p: LstmParams, cache, dh: Tensor, dc: Tensor, grads: dict):
    """Accumulates parameter gradients into ``grads``; returns ``(dx, dh_prev, dc_prev)``."""
    i, f, g, o, tc = cache["i"], cache["f"], cache["g"], cache["o"], cache["tc"]
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc * tc)
    da = np.concatenate(
        [
            dc * g * i * (1.0 - i),
            dc * cache["c"] * f * (1.0 - f),
            dc * i * (1.0 - g * g),
            do * o * (1.0 - o),
        ],
        axis=1,
    )
    grads["W"] += cache["x"].T @ da
    grads["U"] += cache["h"].T @ da
    grads["b"] += da.sum(axis=0)
    return da @ p.W.T, da @ p.U.T, dc * f


def gru_step(x_t: Tensor, h: Tensor, p: GruParams):
    """One GRU step.  Returns ``(h_new, cache)``."""
    H = p.hidden
    x, batched = _as_batch(x_t, p.input_width, "GRU input")
    hb, _ = _as_batch(h, H, "GRU hidden state")
    ax = x @ p.W + p.b
    ah = hb @ p.U + p.c
    z = sigmoid(ax[:, :H] + ah[:, :H])
    r = sigmoid(ax[:, H : 2 * H] + ah[:, H : 2 * H])
    ah_h = ah[:, 2 * H :]
    cand = np.tanh(ax[:, 2 * H :] + r * ah_h)
    h_new = (1.0 - z) * hb + z * cand
    cache = {"x": x, "h": hb, "z": z, "r": r, "cand": cand, "ah_h": ah_h}
    return (h_new if batched else h_new[0]), cache


def gru_step_backward(p: GruParams, cache, dh: Tensor, grads: dict):
    """Accumulates parameter gradients into ``grads``; returns ``(dx, dh_prev)``."""
    z, r, cand, ah_h, h = cache["z"], cache["r"], cache["cand"], cache["ah_h"], cache["h"]
    dpre_h = dh * z * (1.0 - cand * cand)
    da_z = dh * (cand - h) * z * (1.0 - z)
    da_r = dpre_h * ah_h * r * (1.0 - r)
    dax = np.concatenate([da_z, da_r, dpre_h], axis=1)
    dah = np.concatenate([da_z, da_r, dpre_h * r], axis=1)
    grads["W"] += cache["x"].T @ dax
    grads["b"] += dax.sum(axis=0)
    grads["U"] += h.T @ dah
    grads["c"] += dah.sum(axis=0)
    return dax @ p.W.T, dh * (1.0 - z) + dah @ p.U.T


# -- sequences ----------------------------------------------------------------


@dataclass
class SequenceBatch:
    """Right-padded batch of feature sequences.

    ``features`` is ``[B, T, F]``; ``mask[b, t]`` is True for real steps,
    which must form a prefix of each row.
    """

    features: Tensor
    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.features.ndim != 3 or self.mask.shape != self.features.shape[:2]:
            raise ShapeError(
                f"features {self.features.shape} and mask {self.mask.shape} do not align"
            )
        lengths = self.mask.sum(axis=1)
        prefix = np.arange(self.mask.shape[1])[None, :] < lengths[:, None]
        if not np.array_equal(prefix, self.mask):
            raise InputError("mask must mark a prefix of real steps in every row (right padding)")

    @classmethod
    def from_sequences(cls, seqs: Sequence[Tensor]) -> "SequenceBatch":
        """Pad a list of ``[T_b, F]`` arrays to a common length."""
        T = max(s.shape[0] for s in seqs)
        F = seqs[0].shape[1]
        feats = np.zeros((len(seqs), T, F), dtype=np.result_type(*seqs))
        mask = np.zeros((len(seqs), T), dtype=bool)
        for b, s in enumerate(seqs):
            feats[b, : s.shape[0]] = s
            mask[b, : s.shape[0]] = True
        return cls(feats, mask)

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)


@dataclass
class RunCache:
    cell: object
    direction: str
    return_mode: str
    steps: list  # (t, step cache) in processing order
    mask: np.ndarray
    in_shape: tuple
    out_shape: tuple


def run_sequence(seq: SequenceBatch, cell, direction: str = "forward", return_mode: str = "last"):
    """Iterate ``cell`` over the real steps of every sequence in the batch.

    Padded steps leave the state unchanged.  ``return_mode="last"`` gives the
    final state ``[B, H]`` (for ``direction="backward"`` that is the state
    after reaching t=0); ``"all"`` gives the per-timestep states
    ``[B, T, H]``, aligned to input time and zero at padded steps.

    Returns ``(output, RunCache)``.
    """
    if direction not in ("forward", "backward"):
        raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")
    if return_mode not in ("last", "all"):
        raise ValueError(f"return_mode must be 'last' or 'all', got {return_mode!r}")
    B, T, F = seq.features.shape
    if F != cell.input_width:
        raise ShapeError(f"feature width {F} does not match cell input width {cell.input_width}")
    if T == 0 or np.any(seq.lengths == 0):
        raise InputError("every sequence needs at least one real timestep")
    is_lstm = isinstance(cell, LstmParams)
    H = cell.hidden
    dtype = np.result_type(seq.features, cell.W)
    h = np.zeros((B, H), dtype)
    c = np.zeros((B, H), dtype) if is_lstm else None
    out_all = np.zeros((B, T, H), dtype) if return_mode == "all" else None
    order = range(T) if direction == "forward" else range(T - 1, -1, -1)
    steps = []
    for t in order:
        m = seq.mask[:, t : t + 1].astype(dtype)
        x_t = seq.features[:, t, :]
        if is_lstm:
            st, cache = lstm_step(x_t, RecurrentState(h, c), cell)
            h = m * st.h + (1.0 - m) * h
            c = m * st.c + (1.0 - m) * c
        else:
            h_new, cache = gru_step(x_t, h, cell)
            h = m * h_new + (1.0 - m) * h
        steps.append((t, cache))
        if out_all is not None:
            out_all[:, t, :] = h * m
    out = h if return_mode == "last" else out_all
    return out, RunCache(cell, direction, return_mode, steps, seq.mask, seq.features.shape, out.shape)


def zero_grads(cell) -> dict[str, Tensor]:
    return {k: np.zeros_like(v) for k, v in cell.arrays().items()}


def bptt_backward(cache: RunCache, upstream: Tensor):
    """Gradients of a :func:`run_sequence` call.

    ``upstream`` has the shape of the run's output.  Returns
    ``(grad_params, grad_features)`` where ``grad_params`` maps the cell's
    array names to summed per-step gradients and ``grad_features`` is
    ``[B, T, F]``.
    """
    if tuple(upstream.shape) != tuple(cache.out_shape):
        raise ContractError(f"upstream shape {upstream.shape} != run output shape {cache.out_shape}")
    cell = cache.cell
    is_lstm = isinstance(cell, LstmParams)
    B, T, F = cache.in_shape
    H = cell.hidden
    grads = zero_grads(cell)
    grad_x = np.zeros((B, T, F), dtype=upstream.dtype)
    dh = upstream.copy() if cache.return_mode == "last" else np.zeros((B, H), upstream.dtype)
    dc = np.zeros((B, H), upstream.dtype) if is_lstm else None
    for t, step in reversed(cache.steps):
        m = cache.mask[:, t : t + 1].astype(upstream.dtype)
        if cache.return_mode == "all":
            dh = dh + upstream[:, t, :] * m
        if is_lstm:
            dx, dh_prev, dc_prev = lstm_step_backward(cell, step, m * dh, m * dc, grads)
            dh = (1.0 - m) * dh + dh_prev
            dc = (1.0 - m) * dc + dc_prev
        else:
            dx, dh_prev = gru_step_backward(cell, step, m * dh, grads)
            dh = (1.0 - m) * dh + dh_prev
        grad_x[:, t, :] = dx
    return grads, grad_x


def bidirectional(seq: SequenceBatch, cell_fwd, cell_bwd, return_mode: str = "last"):
    """Run both directions and concatenate along features (width ``2H``).

    Returns ``(output, (cache_fwd, cache_bwd))``.
    """
    if cell_fwd.input_width != cell_bwd.input_width or cell_fwd.hidden != cell_bwd.hidden:
        raise ShapeError("forward and backward cells must share input width and hidden size")
    out_f, cache_f = run_sequence(seq, cell_fwd, "forward", return_mode)
    out_b, cache_b = run_sequence(seq, cell_bwd, "backward", return_mode)
    return np.concatenate([out_f, out_b], axis=-1), (cache_f, cache_b)


def bidirectional_backward(caches, upstream: Tensor):
    """Returns ``(grads_fwd, grads_bwd, grad_features)``."""
    cache_f, cache_b = caches
    H = cache_f.cell.hidden
    gf, xf = bptt_backward(cache_f, upstream[..., :H])
    gb, xb = bptt_backward(cache_b, upstream[..., H:])
    return gf, gb, xf + xb


def time_distributed(extractor: Callable[[Tensor], Tensor], volumes: Sequence[Tensor]) -> SequenceBatch:
    """Apply one shared-weight extractor to every timestep of a single sequence.

    ``extractor`` maps a batch ``[N, D1, D2, D3, C]`` to features ``[N, F]``.
    The result is a one-row batch ``[1, T, F]``.
    """
    if not volumes:
        raise InputError("time_distributed needs at least one volume")
    shape = volumes[0].shape
    for v in volumes:
        if v.shape != shape:
            raise ShapeError(f"all volumes must share a shape; got {shape} and {v.shape}")
    feats = extractor(np.stack(volumes))
    return SequenceBatch(feats[None], np.ones((1, len(volumes)), dtype=bool))
