"""Finite-difference verification of every hand-written backward pass.

Each component builds a small random instance, reduces its output to the
scalar ``sum(R * out)`` for a fixed random ``R`` (or the cross-entropy loss
for whole models), and compares analytic gradients with central
differences.  The error of a parameter block is the norm ratio
``|a - n| / max(|a|, |n|)``, which stays meaningful when single entries are
near zero.

Backward functions are looked up on their modules at call time, so a
patched (e.g. deliberately broken) implementation is what gets checked.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import layers as L
from . import model as Mdl
from . import recurrent as R
from .errors import GradientCheckError

STEP = 1e-5
TOLERANCE = 1e-4


@dataclass
class GradCheckReport:
    component: str
    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = TOLERANCE

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def lines(self) -> list[str]:
        return [f"{self.component}\t{name}\t{err:.3e}" for name, err in self.errors.items()]


def relative_error(a: np.ndarray, n: np.ndarray) -> float:
    a = np.ravel(a)
    n = np.ravel(n)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    return 0.0 if scale == 0.0 else float(np.linalg.norm(a - n) / scale)


def numeric_grad(loss: Callable[[], float], arr: np.ndarray, indices=None, h: float = STEP) -> np.ndarray:
    """Central differences of ``loss`` w.r.t. ``arr`` (perturbed in place) at flat ``indices``."""
    flat = arr.reshape(-1)
    indices = range(flat.size) if indices is None else indices
    out = []
    for i in indices:
        old = flat[i]
        flat[i] = old + h
        up = loss()
        flat[i] = old - h
        down = loss()
        flat[i] = old
        out.append((up - down) / (2.0 * h))
    return np.array(out)


def _compare(report: GradCheckReport, loss, blocks: dict, analytic: dict, h: float) -> None:
    for name, arr in blocks.items():
        report.errors[name] = relative_error(analytic[name], numeric_grad(loss, arr, h=h))


# -- components ---------------------------------------------------------------


def _dense(rng, report, h):
    x = rng.normal(size=(3, 5))
    p = L.DenseParams(rng.normal(size=(5, 4)), rng.normal(size=4), "linear")
    r = rng.normal(size=(3, 4))

    def loss():
        return float(np.sum(r * L.dense_forward(x, p)[0]))

    _, cache = L.dense_forward(x, p)
    gx, gp = L.dense_backward(p, cache, r)
    _compare(report, loss, {"x": x, "weights": p.weights, "bias": p.bias}, {"x": gx, **gp}, h)


def _dense_relu(rng, report, h):
    x = rng.normal(size=(3, 5))
    p = L.DenseParams(rng.normal(size=(5, 4)), rng.normal(size=4), "relu")
    r = rng.normal(size=(3, 4))

    def loss():
        return float(np.sum(r * L.dense_forward(x, p)[0]))

    _, cache = L.dense_forward(x, p)
    gx, gp = L.dense_backward(p, cache, r)
    _compare(report, loss, {"x": x, "weights": p.weights, "bias": p.bias}, {"x": gx, **gp}, h)


def _conv3d(rng, report, h):
    x = rng.normal(size=(2, 5, 5, 4, 2))
    p = L.Conv3DParams(rng.normal(size=(3, 3, 3, 2, 3)), rng.normal(size=3))
    r = rng.normal(size=(2, 3, 3, 2, 3))

    def loss():
        return float(np.sum(r * L.conv3d_forward(x, p)[0]))

    _, cache = L.conv3d_forward(x, p)
    gx, gp = L.conv3d_backward(p, cache, r)
    _compare(report, loss, {"x": x, "kernel": p.kernel, "bias": p.bias}, {"x": gx, **gp}, h)


def _maxpool3d(rng, report, h):
    # distinct values keep every window's maximum unique
    x = rng.permutation(2 * 5 * 4 * 4 * 2).reshape(2, 5, 4, 4, 2) / 10.0
    cfg = L.Pool3DConfig()
    r = rng.normal(size=(2, 2, 2, 2, 2))

    def loss():
        return float(np.sum(r * L.maxpool3d_forward(x, cfg)[0]))

    _, cache = L.maxpool3d_forward(x, cfg)
    _compare(report, loss, {"x": x}, {"x": L.maxpool3d_backward(cache, r)}, h)


def _global_maxpool3d(rng, report, h):
    x = rng.permutation(2 * 3 * 3 * 2 * 3).reshape(2, 3, 3, 2, 3) / 10.0
    r = rng.normal(size=(2, 3))

    def loss():
        return float(np.sum(r * L.global_maxpool3d_forward(x)[0]))

    _, cache = L.global_maxpool3d_forward(x)
    _compare(report, loss, {"x": x}, {"x": L.global_maxpool3d_backward(cache, r)}, h)


def _batchnorm(rng, report, h):
    x = rng.normal(size=(3, 2, 2, 2, 2))
    s = L.BatchNormState.fresh(2)
    s.gamma[:] = rng.normal(size=2)
    s.beta[:] = rng.normal(size=2)
    s.mode = "train"
    r = rng.normal(size=x.shape)

    def loss():
        return float(np.sum(r * L.batchnorm_forward(x, s)[0]))

    _, cache = L.batchnorm_forward(x, s)
    gx, gp = L.batchnorm_backward(s, cache, r)
    _compare(report, loss, {"x": x, "gamma": s.gamma, "beta": s.beta}, {"x": gx, **gp}, h)


def _dropout(rng, report, h):
    x = rng.normal(size=(4, 6))
    r = rng.normal(size=x.shape)

    def forward():
        return L.dropout_forward(x, 0.5, "train", np.random.default_rng(7))

    def loss():
        return float(np.sum(r * forward()[0]))

    _, cache = forward()
    gx, _ = L.layer_backward(None, cache, r)
    _compare(report, loss, {"x": x}, {"x": gx}, h)


def _softmax_ce(rng, report, h):
    z = rng.normal(size=(5, 4))
    y = rng.integers(0, 4, size=5)

    def loss():
        return L.softmax_cross_entropy(z, y)[0]

    _compare(report, loss, {"logits": z}, {"logits": L.softmax_cross_entropy(z, y)[2]}, h)


def _lstm_step(rng, report, h):
    p = R.LstmParams(rng.normal(size=(5, 16)) * 0.5, rng.normal(size=(4, 16)) * 0.5, rng.normal(size=16))
    x, h0, c0 = rng.normal(size=(2, 5)), rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
    rh, rc = rng.normal(size=(2, 4)), rng.normal(size=(2, 4))

    def loss():
        st, _ = R.lstm_step(x, R.RecurrentState(h0, c0), p)
        return float(np.sum(rh * st.h) + np.sum(rc * st.c))

    _, cache = R.lstm_step(x, R.RecurrentState(h0, c0), p)
    grads = R.zero_grads(p)
    dx, dh, dc = R.lstm_step_backward(p, cache, rh, rc, grads)
    blocks = {"x": x, "h": h0, "c": c0, **p.arrays()}
    _compare(report, loss, blocks, {"x": dx, "h": dh, "c": dc, **grads}, h)


def _gru_step(rng, report, h):
    p = R.GruParams(rng.normal(size=(5, 12)) * 0.5, rng.normal(size=(4, 12)) * 0.5,
                    rng.normal(size=12), rng.normal(size=12))
    x, h0 = rng.normal(size=(2, 5)), rng.normal(size=(2, 4))
    rh = rng.normal(size=(2, 4))

    def loss():
        return float(np.sum(rh * R.gru_step(x, h0, p)[0]))

    _, cache = R.gru_step(x, h0, p)
    grads = R.zero_grads(p)
    dx, dh = R.gru_step_backward(p, cache, rh, grads)
    _compare(report, loss, {"x": x, "h": h0, **p.arrays()}, {"x": dx, "h": dh, **grads}, h)


def _seq_instance(rng, T=3, F=5):
    feats = rng.normal(size=(2, T, F))
    mask = np.ones((2, T), bool)
    mask[1, T - 1 :] = False  # second sequence is one step shorter
    feats[~mask] = 0.0
    return feats, mask


def _make_cell(rng, cell, F=5, H=4):
    if cell == "lstm":
        return R.init_lstm(rng, F, H)
    p = R.init_gru(rng, F, H)
    p.b[:] = rng.normal(size=p.b.shape) * 0.1
    p.c[:] = rng.normal(size=p.c.shape) * 0.1
    return p


def _bptt(cell):
    def run(rng, report, h):
        feats, mask = _seq_instance(rng)
        p = _make_cell(rng, cell)
        for direction in ("forward", "backward"):
            for mode in ("last", "all"):
                out, _ = R.run_sequence(R.SequenceBatch(feats, mask), p, direction, mode)
                r = rng.normal(size=out.shape)

                def loss():
                    return float(np.sum(r * R.run_sequence(R.SequenceBatch(feats, mask), p, direction, mode)[0]))

                _, cache = R.run_sequence(R.SequenceBatch(feats, mask), p, direction, mode)
                grads, gx = R.bptt_backward(cache, r)
                sub = GradCheckReport(report.component)
                # padded feature entries do not influence the output; compare real steps only
                _compare(sub, loss, {"x": feats, **p.arrays()}, {"x": gx * mask[..., None], **grads}, h)
                for k, v in sub.errors.items():
                    report.errors[f"{direction}/{mode}/{k}"] = v

    return run


def _bidirectional(cell):
    def run(rng, report, h):
        feats, mask = _seq_instance(rng)
        pf, pb = _make_cell(rng, cell), _make_cell(rng, cell)
        for mode in ("last", "all"):
            out, _ = R.bidirectional(R.SequenceBatch(feats, mask), pf, pb, mode)
            r = rng.normal(size=out.shape)

            def loss():
                return float(np.sum(r * R.bidirectional(R.SequenceBatch(feats, mask), pf, pb, mode)[0]))

            _, caches = R.bidirectional(R.SequenceBatch(feats, mask), pf, pb, mode)
            gf, gb, gx = R.bidirectional_backward(caches, r)
            blocks = {"x": feats, **{f"fwd.{k}": v for k, v in pf.arrays().items()},
                      **{f"bwd.{k}": v for k, v in pb.arrays().items()}}
            analytic = {"x": gx, **{f"fwd.{k}": v for k, v in gf.items()}, **{f"bwd.{k}": v for k, v in gb.items()}}
            sub = GradCheckReport(report.component)
            _compare(sub, loss, blocks, analytic, h)
            for k, v in sub.errors.items():
                report.errors[f"{mode}/{k}"] = v

    return run


def model_check(arch: str = "lstm", n_samples: int = 50, seed: int = 0, h: float = STEP,
                tolerance: float = TOLERANCE) -> GradCheckReport:
    """Cross-entropy of a reduced-profile model w.r.t. ``n_samples`` randomly chosen parameters.

    The batch holds one two-visit and one single-visit sequence and runs in
    train mode, so batch norm uses batch statistics and dropout is active
    (with a fixed mask).
    """
    rng = np.random.default_rng(seed)
    spec = Mdl.build_architecture(arch, seed=seed, profile="reduced")
    for layer in spec.layers:
        # move BN affine parameters and biases off their trivial initial values
        for k in ("gamma", "beta", "bias", "b", "c"):
            if k in layer.params:
                layer.params[k] += rng.normal(scale=0.1, size=layer.params[k].shape)
    shape = spec.input_shape
    x = rng.uniform(size=(2, 2) + shape)
    mask = np.array([[True, True], [True, False]])
    x[~mask] = 0.0
    y = np.array([1, 3])

    def forward():
        return Mdl.forward_batch(spec, x, mask, "train", np.random.default_rng(seed + 1))

    def loss():
        return L.softmax_cross_entropy(forward()[0], y)[0]

    logits, _, cache = forward()
    grads = Mdl.backward(spec, cache, L.softmax_cross_entropy(logits, y)[2])
    params = dict(spec.named_params(trainable_only=True))
    names = sorted(params)
    sizes = np.array([params[n].size for n in names])
    flat_ids = rng.choice(sizes.sum(), size=n_samples, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    analytic, numeric = [], []
    for fid in sorted(flat_ids):
        bi = int(np.searchsorted(offsets, fid, side="right") - 1)
        name, local = names[bi], int(fid - offsets[bi])
        analytic.append(grads[name].reshape(-1)[local])
        numeric.append(numeric_grad(loss, params[name], [local], h)[0])
    report = GradCheckReport(f"model:{arch}", tolerance=tolerance)
    report.errors[f"{n_samples} sampled parameters"] = relative_error(np.array(analytic), np.array(numeric))
    return report


COMPONENTS: dict[str, Callable] = {
    "dense": _dense,
    "dense_relu": _dense_relu,
    "conv3d": _conv3d,
    "maxpool3d": _maxpool3d,
    "global_maxpool3d": _global_maxpool3d,
    "batchnorm": _batchnorm,
    "dropout": _dropout,
    "softmax_cross_entropy": _softmax_ce,
    "lstm_step": _lstm_step,
    "gru_step": _gru_step,
    "bptt_lstm": _bptt("lstm"),
    "bptt_gru": _bptt("gru"),
    "bidirectional_lstm": _bidirectional("lstm"),
    "bidirectional_gru": _bidirectional("gru"),
}


def gradient_check(component: str, tolerance: float = TOLERANCE, seed: int = 0, h: float = STEP,
                   raise_on_failure: bool = True) -> GradCheckReport:
    """Check one component (a key of :data:`COMPONENTS` or ``"model"``) in 64-bit."""
    if component == "model":
        report = model_check(seed=seed, h=h, tolerance=tolerance)
    else:
        if component not in COMPONENTS:
            raise KeyError(f"unknown component {component!r}; choose from {', '.join(COMPONENTS)} or model")
        report = GradCheckReport(component, tolerance=tolerance)
        COMPONENTS[component](np.random.default_rng(seed), report, h)
    if raise_on_failure and not report.passed:
        worst = max(report.errors, key=report.errors.get)
        raise GradientCheckError(
            f"{component}: relative error {report.errors[worst]:.3e} in {worst} exceeds {tolerance:.0e}"
        )
    return report


def check_all(tolerance: float = TOLERANCE, seed: int = 0, include_model: bool = True) -> list[GradCheckReport]:
    names = list(COMPONENTS) + (["model"] if include_model else [])
    return [gradient_check(n, tolerance, seed, raise_on_failure=False) for n in names]
