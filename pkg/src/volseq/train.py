"""Splitting, the optimization loop, evaluation and k-fold cross-validation.

Splits and folds are drawn over patients, not sequences: every sequence of a
patient (original or augmented) lands on the same side, so augmented
descendants of a held-out patient never leak into training.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import layers as L
from . import metrics as M
from .errors import DivergenceError, InputError, SizeError, StratificationWarning
from .model import ModelSpec, backward, build_architecture, forward_batch, predict_proba, stack_sequences

OPTIMIZERS = ("adam", "sgd")


@dataclass
class TrainConfig:
    epochs: int = 35
    batch_size: int = 4
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    dropout: float | None = None
    seed: int = 0
    deterministic: bool = True
    profile: str = "full"
    dtype: str = "float64"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.dropout is not None and not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype!r}")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class SplitIndices:
    train: np.ndarray
    test: np.ndarray


# -- splitting ----------------------------------------------------------------


def _units(groups: Sequence) -> tuple[list, dict]:
    """Distinct group ids in first-seen order and their member indices."""
    members: dict = {}
    for i, g in enumerate(groups):
        members.setdefault(g, []).append(i)
    return list(members), members


def _expand(units, members) -> np.ndarray:
    out = [i for u in units for i in members[u]]
    return np.array(sorted(out), dtype=np.int64)


def stratified_split(labels, groups=None, test_fraction: float = 0.2, seed: int = 0) -> SplitIndices:
    """Patient-disjoint split holding out ``test_fraction`` of each class.

    ``labels[i]`` is the class of sequence ``i`` and ``groups[i]`` its patient
    id (default: every sequence is its own patient).  Patients are the unit
    of selection, so each class's test share is exact to within one patient.
    A class with fewer than two patients cannot be stratified; its patients
    are pooled and split without regard to class, with a warning.
    """
    labels = np.asarray(labels)
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    groups = list(range(len(labels))) if groups is None else list(groups)
    if len(groups) != len(labels):
        raise InputError(f"{len(labels)} labels but {len(groups)} group ids")
    units, members = _units(groups)
    unit_label = {}
    for u in units:
        cls = set(labels[members[u]].tolist())
        if len(cls) != 1:
            raise InputError(f"patient {u!r} has sequences in several classes {sorted(cls)}")
        unit_label[u] = cls.pop()

    rng = np.random.default_rng(seed)
    test_units, pooled = [], []
    for k in sorted(set(unit_label.values())):
        class_units = [u for u in units if unit_label[u] == k]
        if len(class_units) < 2:
            warnings.warn(f"class {k} has {len(class_units)} patient(s); it is split without stratification",
                          StratificationWarning, stacklevel=2)
            pooled.extend(class_units)
            continue
        order = [class_units[i] for i in rng.permutation(len(class_units))]
        n_test = int(math.floor(test_fraction * len(class_units) + 0.5))
        test_units.extend(order[:n_test])
    if pooled:
        order = [pooled[i] for i in rng.permutation(len(pooled))]
        test_units.extend(order[: int(math.floor(test_fraction * len(pooled) + 0.5))])
    test_set = set(test_units)
    return SplitIndices(_expand([u for u in units if u not in test_set], members), _expand(test_units, members))


def kfold_indices(n: int, k: int = 10, seed: int = 0, groups=None) -> list[SplitIndices]:
    """``k`` folds whose validation sets partition ``range(n)``.

    Folds are drawn over groups (default: each index alone); fold sizes in
    groups differ by at most one, with the first ``n_groups % k`` folds taking
    the extra group.
    """
    if k < 2:
        raise SizeError(f"k must be >= 2, got {k}")
    groups = list(range(n)) if groups is None else list(groups)
    if len(groups) != n:
        raise InputError(f"n={n} but {len(groups)} group ids")
    units, members = _units(groups)
    m = len(units)
    if m < k:
        raise SizeError(f"cannot make {k} folds from {m} {'patients' if m != n else 'samples'}")
    order = [units[i] for i in np.random.default_rng(seed).permutation(m)]
    base, extra = divmod(m, k)
    folds, start = [], 0
    for f in range(k):
        size = base + (1 if f < extra else 0)
        val_units = order[start : start + size]
        start += size
        val = set(val_units)
        folds.append(SplitIndices(_expand([u for u in units if u not in val], members), _expand(val_units, members)))
    return folds


# -- optimization -------------------------------------------------------------


class Optimizer:
    """In-place Adam or momentum SGD over a dict of named parameter arrays."""

    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()} if cfg.optimizer == "adam" else {}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        c = self.cfg
        self.t += 1
        for name, p in self.params.items():
            g = grads[name]
            if c.optimizer == "adam":
                m, v = self.m[name], self.v[name]
                m *= c.beta1
                m += (1 - c.beta1) * g
                v *= c.beta2
                v += (1 - c.beta2) * g * g
                mhat = m / (1 - c.beta1**self.t)
                vhat = v / (1 - c.beta2**self.t)
                p -= c.learning_rate * mhat / (np.sqrt(vhat) + c.adam_epsilon)
            else:
                buf = self.m[name]
                buf *= c.momentum
                buf += g
                p -= c.learning_rate * buf


def _cast(arrays, dtype) -> list[np.ndarray]:
    return [np.asarray(a, dtype=dtype) for a in arrays]


def train_model(spec: ModelSpec, arrays: Sequence[np.ndarray], labels, cfg: TrainConfig,
                log=None) -> tuple[ModelSpec, list[dict]]:
    """Mini-batch training of a copy of ``spec``; returns ``(trained spec, history)``.

    ``arrays`` are ``[T, D1, D2, D3, 1]`` sequences and ``labels`` 0-based
    classes.  History has one ``{epoch, loss, accuracy}`` entry per epoch,
    averaged over samples.  All randomness (shuffling, dropout) comes from a
    generator seeded by ``cfg.seed``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(arrays) == 0:
        raise InputError("training data is empty")
    if len(arrays) != labels.size:
        raise InputError(f"{len(arrays)} sequences but {labels.size} labels")
    spec = spec.copy()
    dtype = np.dtype(cfg.dtype)
    arrays = _cast(arrays, dtype)
    for layer in spec.layers:
        for k in layer.params:
            layer.params[k] = layer.params[k].astype(dtype, copy=False)
    params = dict(spec.named_params(trainable_only=True))
    opt = Optimizer(params, cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    n = len(arrays)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total_loss, correct = 0.0, 0
        for bi, start in enumerate(range(0, n, cfg.batch_size), start=1):
            idx = order[start : start + cfg.batch_size]
            x, mask = stack_sequences([arrays[i] for i in idx])
            logits, _, cache = forward_batch(spec, x, mask, "train", rng, cfg.dropout)
            loss, probs, grad = L.softmax_cross_entropy(logits.astype(np.float64), labels[idx])
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss {loss} at epoch {epoch}, batch {bi}")
            grads = backward(spec, cache, grad.astype(dtype))
            opt.step(grads)
            total_loss += loss * idx.size
            correct += int((probs.argmax(axis=1) == labels[idx]).sum())
        entry = {"epoch": epoch, "loss": total_loss / n, "accuracy": correct / n}
        history.append(entry)
        if log is not None:
            log(entry)
    return spec, history


# -- evaluation ---------------------------------------------------------------


@dataclass
class EvalBundle:
    confusion: M.ConfusionMatrix
    summary: dict[str, float]
    class_auc: np.ndarray
    macro_auc: float
    probs: np.ndarray
    labels: np.ndarray

    def flat(self) -> dict[str, float]:
        out = dict(self.summary)
        for k, a in enumerate(self.class_auc, start=1):
            out[f"AUC_class{k}"] = float(a)
        out["MacroOVR_AUC"] = self.macro_auc
        return out


def evaluate(spec: ModelSpec, arrays: Sequence[np.ndarray], labels, batch_size: int = 8) -> EvalBundle:
    """Infer-mode metrics; AUC scores are softmax probabilities.

    Classes absent from ``labels`` get a NaN AUC and are left out of the macro AUC.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(arrays) == 0:
        raise InputError("test data is empty")
    dtype = next(iter(spec.state_dict().values())).dtype
    probs = predict_proba(spec, _cast(arrays, dtype), batch_size).astype(np.float64)
    K = probs.shape[1]
    cm = M.confusion(labels, probs.argmax(axis=1), K)
    aucs = np.full(K, np.nan)
    for k in range(K):
        try:
            aucs[k] = M.roc_ovr(labels, probs, k).auc
        except M.DegenerateClassError:
            pass
    macro = float(np.nanmean(aucs)) if np.any(np.isfinite(aucs)) else float("nan")
    return EvalBundle(cm, M.macro_summary(cm), aucs, macro, probs, labels)


# -- cross-validation ---------------------------------------------------------


@dataclass
class FoldReport:
    folds: list[dict[str, float]]
    confusions: list[np.ndarray]
    splits: list[SplitIndices] = field(repr=False, default_factory=list)

    @property
    def k(self) -> int:
        return len(self.folds)

    def mean(self) -> dict[str, float]:
        return {key: float(np.mean([f[key] for f in self.folds])) for key in self.folds[0]}

    def std(self) -> dict[str, float]:
        return {key: float(np.std([f[key] for f in self.folds])) for key in self.folds[0]}


def _run_fold(args):
    arch, arrays, labels, split, cfg = args
    spec = build_architecture(arch, seed=cfg.seed, profile=cfg.profile)
    trained, _ = train_model(spec, [arrays[i] for i in split.train], labels[split.train], cfg)
    bundle = evaluate(trained, [arrays[i] for i in split.test], labels[split.test])
    return bundle.flat(), bundle.confusion.counts


def kfold_cross_validate(arch, arrays: Sequence[np.ndarray], labels, cfg: TrainConfig, k: int = 10,
                         groups=None, jobs: int = 1) -> FoldReport:
    """Train a fresh model per fold (same seed-derived init) and score it on the held-out fold."""
    labels = np.asarray(labels, dtype=np.int64)
    splits = kfold_indices(len(arrays), k, cfg.seed, groups)
    tasks = [(arch, arrays, labels, s, cfg) for s in splits]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold, tasks))
    else:
        results = [_run_fold(t) for t in tasks]
    return FoldReport([r[0] for r in results], [r[1] for r in results], splits)
