"""The six 3D-CNN + recurrent architectures.

A :class:`ModelSpec` is an ordered list of :class:`LayerSpec` entries in
three stages: the per-timestep ``extractor`` (applied time-distributed), the
``recurrent`` stack, and the dense ``head``.  Parameters live in plain
dicts of arrays on each layer; :func:`forward_batch` / :func:`backward`
walk the list.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Sequence

import numpy as np

from . import layers as L
from . import recurrent as R
from .errors import ShapeError
from .tensor import Tensor


class ArchitectureId(str, Enum):
    GRU = "gru"
    SGRU = "sgru"
    SBIGRU = "sbigru"
    LSTM = "lstm"
    SLSTM = "slstm"
    SBILSTM = "sbilstm"

    @property
    def cell(self) -> str:
        return "lstm" if self.value.endswith("lstm") else "gru"

    @property
    def depth(self) -> int:
        return 1 if self.value in ("gru", "lstm") else 2

    @property
    def bidirectional(self) -> bool:
        return "bi" in self.value

    @property
    def display_name(self) -> str:
        names = {"gru": "GRU", "sgru": "sGRU", "sbigru": "sbiGRU", "lstm": "LSTM", "slstm": "sLSTM", "sbilstm": "sbiLSTM"}
        return "3DCNN+" + names[self.value]

    @classmethod
    def parse(cls, value: "str | ArchitectureId") -> "ArchitectureId":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            valid = "|".join(a.value for a in cls)
            raise ValueError(f"unknown architecture {value!r}; valid ids: {valid}") from None


@dataclass(frozen=True)
class Profile:
    """Scale of a model: input grid, conv widths (one conv/pool/BN block each), recurrent and dense widths."""

    name: str
    input_shape: tuple[int, int, int]
    conv_channels: tuple[int, ...]
    hidden: int
    dense_units: tuple[int, ...]
    kernel: int = 3
    pool: int = 2
    n_classes: int = 4

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "conv_channels": list(self.conv_channels),
            "hidden": self.hidden,
            "dense_units": list(self.dense_units),
            "kernel": self.kernel,
            "pool": self.pool,
            "n_classes": self.n_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Profile":
        return cls(
            name=d["name"],
            input_shape=tuple(d["input_shape"]),
            conv_channels=tuple(d["conv_channels"]),
            hidden=int(d["hidden"]),
            dense_units=tuple(d["dense_units"]),
            kernel=int(d.get("kernel", 3)),
            pool=int(d.get("pool", 2)),
            n_classes=int(d.get("n_classes", 4)),
        )


FULL = Profile("full", (128, 128, 64), (64, 64, 128, 256), 128, (1024, 512, 128, 64))
# 32x32x16 only has room for two valid-conv + pool blocks along the short axis
REDUCED = Profile("reduced", (32, 32, 16), (16, 16), 32, (256, 128, 32, 16))
PROFILES = {"full": FULL, "reduced": REDUCED}


def get_profile(profile: "str | Profile") -> Profile:
    if isinstance(profile, Profile):
        return profile
    try:
        return PROFILES[profile]
    except KeyError:
        raise ValueError(f"unknown profile {profile!r}; valid: {'|'.join(PROFILES)}") from None


@dataclass
class LayerSpec:
    name: str
    kind: str
    stage: str
    output_shape: tuple
    config: dict = field(default_factory=dict)
    params: dict[str, Tensor] = field(default_factory=dict)

    @property
    def n_params(self) -> int:
        return int(sum(a.size for a in self.params.values()))

    @property
    def type_label(self) -> str:
        if self.kind in ("lstm", "gru"):
            return self.kind.upper()
        return _TYPE_LABELS[self.kind]


_TYPE_LABELS = {
    "input": "InputLayer",
    "conv3d": "Conv3D",
    "maxpool3d": "MaxPooling3D",
    "batchnorm": "BatchNormalization",
    "global_maxpool3d": "GlobalMaxPooling3D",
    "dense": "Dense",
    "dropout": "Dropout",
}

NON_TRAINABLE = ("running_mean", "running_var")


@dataclass
class ModelSpec:
    arch: ArchitectureId
    profile: Profile
    layers: list[LayerSpec]
    dropout_rate: float = L.DROPOUT_RATE

    def stage(self, name: str) -> list[LayerSpec]:
        return [l for l in self.layers if l.stage == name]

    def layer(self, name: str) -> LayerSpec:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def named_params(self, trainable_only: bool = False):
        for layer in self.layers:
            for pname, arr in layer.params.items():
                if trainable_only and pname in NON_TRAINABLE:
                    continue
                yield f"{layer.name}/{pname}", arr

    def state_dict(self) -> dict[str, Tensor]:
        return dict(self.named_params())

    def copy(self) -> "ModelSpec":
        layers = [replace(l, config=dict(l.config), params={k: v.copy() for k, v in l.params.items()}) for l in self.layers]
        return replace(self, layers=layers)

    @property
    def input_shape(self) -> tuple[int, int, int, int]:
        return tuple(self.profile.input_shape) + (1,)


# -- construction -------------------------------------------------------------


def _conv_kernel(rng, k: int, cin: int, cout: int, dtype) -> Tensor:
    fan_in, fan_out = k**3 * cin, k**3 * cout
    return R.glorot(rng, fan_in, fan_out, (k, k, k, cin, cout), dtype)


def build_architecture(arch, seed: int = 0, profile: "str | Profile" = "full", dtype=np.float64) -> ModelSpec:
    """Build one of the six architectures with deterministic initialization from ``seed``."""
    arch = ArchitectureId.parse(arch)
    profile = get_profile(profile)
    rng = np.random.default_rng(seed)
    layers: list[LayerSpec] = []
    shape = tuple(profile.input_shape) + (1,)
    layers.append(LayerSpec("input", "input", "extractor", (None,) + shape))
    k, pool = profile.kernel, L.Pool3DConfig((profile.pool,) * 3)
    for bi, cout in enumerate(profile.conv_channels, start=1):
        cin = shape[-1]
        shape = L.conv3d_output_shape(shape, (k, k, k, cin, cout))
        layers.append(
            LayerSpec(
                f"conv{bi}", "conv3d", "extractor", (None,) + shape, {"activation": "relu"},
                {"kernel": _conv_kernel(rng, k, cin, cout, dtype), "bias": np.zeros(cout, dtype)},
            )
        )
        shape = L.maxpool3d_output_shape(shape, pool)
        layers.append(LayerSpec(f"pool{bi}", "maxpool3d", "extractor", (None,) + shape, {"window": list(pool.window)}))
        bn = L.BatchNormState.fresh(cout, dtype)
        layers.append(
            LayerSpec(
                f"bn{bi}", "batchnorm", "extractor", (None,) + shape,
                {"epsilon": bn.epsilon, "momentum": bn.momentum},
                {"gamma": bn.gamma, "beta": bn.beta, "running_mean": bn.running_mean, "running_var": bn.running_var},
            )
        )
    width = shape[-1]
    layers.append(LayerSpec("gmp", "global_maxpool3d", "extractor", (None, width)))

    H = profile.hidden
    for ri in range(1, arch.depth + 1):
        last = ri == arch.depth
        dirs = ("fwd", "bwd") if arch.bidirectional else ("",)
        params = {}
        for d in dirs:
            cell = R.init_lstm(rng, width, H, dtype) if arch.cell == "lstm" else R.init_gru(rng, width, H, dtype)
            for pname, arr in cell.arrays().items():
                params[f"{d}.{pname}" if d else pname] = arr
        out_w = H * len(dirs)
        out_shape = (None, out_w) if last else (None, None, out_w)
        layers.append(
            LayerSpec(
                f"rnn{ri}", arch.cell, "recurrent", out_shape,
                {"hidden": H, "bidirectional": arch.bidirectional, "return_sequences": not last},
                params,
            )
        )
        width = out_w

    n_dense = len(profile.dense_units)
    for di, units in enumerate(list(profile.dense_units) + [profile.n_classes], start=1):
        act = "softmax" if di == n_dense + 1 else "relu"
        limit_w = R.glorot(rng, width, units, (width, units), dtype)
        layers.append(
            LayerSpec(f"dense{di}", "dense", "head", (None, units), {"activation": act},
                      {"weights": limit_w, "bias": np.zeros(units, dtype)})
        )
        # dropout after every hidden dense layer except the last one
        if di < n_dense:
            layers.append(LayerSpec(f"dropout{di}", "dropout", "head", (None, units)))
        width = units
    return ModelSpec(arch, profile, layers)


# -- parameter accounting -----------------------------------------------------


@dataclass(frozen=True)
class TableRow:
    name: str
    type_label: str
    output_shape: tuple
    params: int


def count_parameters(spec: ModelSpec) -> tuple[list[TableRow], int]:
    """Per-layer rows (batch-norm running statistics included) and their total."""
    rows = [TableRow(l.name, l.type_label, l.output_shape, l.n_params) for l in spec.layers]
    return rows, sum(r.params for r in rows)


def format_shape(shape: tuple) -> str:
    return "(" + ", ".join("None" if s is None else str(s) for s in shape) + ")"


def format_table(rows: Sequence[TableRow]) -> str:
    lines = [f"{'Layer (type)':<28}{'Output Shape':<30}{'Param':>10}", "-" * 68]
    for r in rows:
        lines.append(f"{r.name + ' (' + r.type_label + ')':<28}{format_shape(r.output_shape):<30}{r.params:>10}")
    lines.append("-" * 68)
    lines.append(f"{'Total params':<58}{sum(r.params for r in rows):>10}")
    return "\n".join(lines)


_CNN_TABLE = [
    ("InputLayer", (None, 128, 128, 64, 1), 0),
    ("Conv3D", (None, 126, 126, 62, 64), 1792),
    ("MaxPooling3D", (None, 63, 63, 31, 64), 0),
    ("BatchNormalization", (None, 63, 63, 31, 64), 256),
    ("Conv3D", (None, 61, 61, 29, 64), 110656),
    ("MaxPooling3D", (None, 30, 30, 14, 64), 0),
    ("BatchNormalization", (None, 30, 30, 14, 64), 256),
    ("Conv3D", (None, 28, 28, 12, 128), 221312),
    ("MaxPooling3D", (None, 14, 14, 6, 128), 0),
    ("BatchNormalization", (None, 14, 14, 6, 128), 512),
    ("Conv3D", (None, 12, 12, 4, 256), 884992),
    ("MaxPooling3D", (None, 6, 6, 2, 256), 0),
    ("BatchNormalization", (None, 6, 6, 2, 256), 1024),
    ("GlobalMaxPooling3D", (None, 256), 0),
]


def _head(first: int):
    return [
        ("Dense", (None, 1024), first),
        ("Dropout", (None, 1024), 0),
        ("Dense", (None, 512), 524800),
        ("Dropout", (None, 512), 0),
        ("Dense", (None, 128), 65664),
        ("Dropout", (None, 128), 0),
        ("Dense", (None, 64), 8256),
        ("Dense", (None, 4), 260),
    ]


# Reference layer tables for the full-scale models (recurrent stack + head).
GOLDEN_TABLES = {
    "cnn": _CNN_TABLE,
    "gru": [("GRU", (None, 128), 148224)] + _head(132096),
    "sgru": [("GRU", (None, None, 128), 148224), ("GRU", (None, 128), 99072)] + _head(132096),
    "sbigru": [("GRU", (None, None, 256), 296448), ("GRU", (None, 256), 296448)] + _head(263168),
    "lstm": [("LSTM", (None, 128), 197120)] + _head(132096),
    "slstm": [("LSTM", (None, None, 128), 197120), ("LSTM", (None, 128), 131584)] + _head(132096),
    "sbilstm": [("LSTM", (None, None, 256), 394240), ("LSTM", (None, 256), 394240)] + _head(263168),
}


def golden_diff(spec: ModelSpec) -> list[str]:
    """Differences between ``spec``'s layer table and the reference table; empty when they match."""
    rows, _ = count_parameters(spec)
    actual = [(r.type_label, tuple(r.output_shape), r.params) for r in rows]
    expected = GOLDEN_TABLES["cnn"] + GOLDEN_TABLES[spec.arch.value]
    problems = []
    if len(actual) != len(expected):
        problems.append(f"layer count {len(actual)} != expected {len(expected)}")
    for i, (a, e) in enumerate(zip(actual, expected)):
        if a != e:
            problems.append(f"row {i}: got {a[0]} {format_shape(a[1])} {a[2]}, expected {e[0]} {format_shape(e[1])} {e[2]}")
    return problems


# -- forward / backward -------------------------------------------------------


def _cell(layer: LayerSpec, prefix: str = ""):
    p = {k[len(prefix):]: v for k, v in layer.params.items() if k.startswith(prefix)}
    return R.LstmParams(**p) if layer.kind == "lstm" else R.GruParams(**p)


def _bn_state(layer: LayerSpec, mode: str) -> L.BatchNormState:
    p = layer.params
    return L.BatchNormState(
        p["gamma"], p["beta"], p["running_mean"], p["running_var"],
        layer.config.get("epsilon", L.BN_EPSILON), layer.config.get("momentum", L.BN_MOMENTUM), mode,
    )


def stack_sequences(sequences: Sequence[Tensor]) -> tuple[Tensor, np.ndarray]:
    """Right-pad ``[T_b, D1, D2, D3, C]`` sequences into ``[B, T, ...]`` plus a ``[B, T]`` mask."""
    T = max(s.shape[0] for s in sequences)
    vshape = sequences[0].shape[1:]
    x = np.zeros((len(sequences), T) + vshape, dtype=np.result_type(*sequences))
    mask = np.zeros((len(sequences), T), dtype=bool)
    for b, s in enumerate(sequences):
        if s.shape[1:] != vshape:
            raise ShapeError(f"sequence {b} has volume shape {s.shape[1:]}, expected {vshape}")
        x[b, : s.shape[0]] = s
        mask[b, : s.shape[0]] = True
    return x, mask


def extract_features(spec: ModelSpec, volumes: Tensor, mode: str = "infer"):
    """Run the extractor on a batch of volumes ``[N, D1, D2, D3, 1]`` → ``([N, F], caches)``."""
    caches = []
    h = volumes
    for layer in spec.stage("extractor"):
        if layer.kind == "input":
            continue
        if layer.kind == "conv3d":
            p = L.Conv3DParams(layer.params["kernel"], layer.params["bias"])
            pre, c = L.conv3d_forward(h, p)
            h = np.maximum(pre, 0.0)
            caches.append((layer, (c, pre)))
        elif layer.kind == "maxpool3d":
            h, c = L.maxpool3d_forward(h, L.Pool3DConfig(tuple(layer.config["window"])))
            caches.append((layer, c))
        elif layer.kind == "batchnorm":
            h, c = L.batchnorm_forward(h, _bn_state(layer, mode))
            caches.append((layer, c))
        elif layer.kind == "global_maxpool3d":
            h, c = L.global_maxpool3d_forward(h)
            caches.append((layer, c))
    return h, caches


@dataclass
class ForwardCache:
    mask: np.ndarray
    n_features: int
    extractor: list
    recurrent: list
    head: list


def forward_batch(spec: ModelSpec, x: Tensor, mask: np.ndarray, mode: str = "infer",
                  rng: np.random.Generator | None = None, dropout_rate: float | None = None):
    """Forward pass over a padded batch.

    ``x`` is ``[B, T, D1, D2, D3, 1]`` and ``mask`` ``[B, T]``.  Returns
    ``(logits [B, K], probs [B, K], ForwardCache)``.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    expected = spec.input_shape
    if x.ndim != 6 or tuple(x.shape[2:]) != expected:
        raise ShapeError(f"expected input volumes of shape {expected}, got {tuple(x.shape[2:])}")
    mask = np.asarray(mask, dtype=bool)
    rate = spec.dropout_rate if dropout_rate is None else dropout_rate

    feats_real, ext_caches = extract_features(spec, x[mask], mode)
    B, T = mask.shape
    feats = np.zeros((B, T, feats_real.shape[1]), dtype=feats_real.dtype)
    feats[mask] = feats_real

    rec_caches = []
    seq = R.SequenceBatch(feats, mask)
    h = None
    for layer in spec.stage("recurrent"):
        ret = "all" if layer.config["return_sequences"] else "last"
        if layer.config["bidirectional"]:
            h, c = R.bidirectional(seq, _cell(layer, "fwd."), _cell(layer, "bwd."), ret)
        else:
            h, c = R.run_sequence(seq, _cell(layer), "forward", ret)
        rec_caches.append((layer, c))
        if ret == "all":
            seq = R.SequenceBatch(h, mask)

    head_caches = []
    for layer in spec.stage("head"):
        if layer.kind == "dense":
            act = layer.config["activation"]
            p = L.DenseParams(layer.params["weights"], layer.params["bias"], "linear" if act == "softmax" else act)
            h, c = L.dense_forward(h, p)
        else:
            h, c = L.dropout_forward(h, rate, mode, rng)
        head_caches.append((layer, c))
    logits = h
    return logits, L.softmax(logits), ForwardCache(mask, feats_real.shape[1], ext_caches, rec_caches, head_caches)


def backward(spec: ModelSpec, cache: ForwardCache, grad_logits: Tensor) -> dict[str, Tensor]:
    """Gradients of every trainable parameter, keyed ``"layer/param"``."""
    grads: dict[str, Tensor] = {}
    g = grad_logits
    for layer, c in reversed(cache.head):
        if layer.kind == "dense":
            act = layer.config["activation"]
            p = L.DenseParams(layer.params["weights"], layer.params["bias"], "linear" if act == "softmax" else act)
            g, gp = L.dense_backward(p, c, g)
            for k, v in gp.items():
                grads[f"{layer.name}/{k}"] = v
        else:
            g = L.layer_backward(None, c, g)[0]

    for layer, c in reversed(cache.recurrent):
        if layer.config["bidirectional"]:
            gf, gb, g = R.bidirectional_backward(c, g)
            for k, v in gf.items():
                grads[f"{layer.name}/fwd.{k}"] = v
            for k, v in gb.items():
                grads[f"{layer.name}/bwd.{k}"] = v
        else:
            gp, g = R.bptt_backward(c, g)
            for k, v in gp.items():
                grads[f"{layer.name}/{k}"] = v
    # g is now [B, T, F]; padded steps received zero gradient
    g = g[cache.mask]

    first_conv = next(l.name for l in spec.layers if l.kind == "conv3d")
    for layer, c in reversed(cache.extractor):
        if layer.kind == "conv3d":
            conv_cache, pre = c
            g = g * (pre > 0)
            p = L.Conv3DParams(layer.params["kernel"], layer.params["bias"])
            # the input volume needs no gradient
            g, gp = L.conv3d_backward(p, conv_cache, g, need_input_grad=layer.name != first_conv)
            for k, v in gp.items():
                grads[f"{layer.name}/{k}"] = v
        elif layer.kind == "batchnorm":
            g, gp = L.batchnorm_backward(_bn_state(layer, c["mode"]), c, g)
            for k, v in gp.items():
                grads[f"{layer.name}/{k}"] = v
        else:
            g = L.layer_backward(None, c, g)[0]
    return grads


def _as_volume(v: Tensor, expected: tuple) -> Tensor:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[..., None]
    if tuple(arr.shape) != expected:
        raise ShapeError(f"expected volume shape {expected}, got {tuple(np.asarray(v).shape)}")
    return arr


def forward(spec: ModelSpec, sequence: Sequence[Tensor], mode: str = "infer",
            rng: np.random.Generator | None = None) -> Tensor:
    """Class probabilities ``[K]`` for one sequence of ``T >= 1`` volumes."""
    if len(sequence) < 1:
        raise ShapeError("a sequence needs at least one volume")
    vols = np.stack([_as_volume(v, spec.input_shape) for v in sequence])
    _, probs, _ = forward_batch(spec, vols[None], np.ones((1, len(sequence)), bool), mode, rng)
    return probs[0]


def predict_proba(spec: ModelSpec, sequences: Sequence[Tensor], batch_size: int = 8) -> Tensor:
    """Infer-mode probabilities ``[n, K]`` for a list of ``[T, D1, D2, D3, 1]`` sequences."""
    out = []
    for start in range(0, len(sequences), batch_size):
        x, mask = stack_sequences(sequences[start : start + batch_size])
        out.append(forward_batch(spec, x, mask, "infer")[1])
    return np.concatenate(out, axis=0) if out else np.zeros((0, spec.profile.n_classes))
