"""Command-line entry point.

Every command accepts ``--config FILE``: a flat ``key=value`` file whose keys
are the command's long flag names (dashes or underscores).  Values given on
the command line win over the file, which wins over built-in defaults.

Exit codes: 0 success, 1 internal failure, 2 usage or contract error.
"""

from __future__ import annotations

import argparse
import os
import sys
import traceback
from pathlib import Path

import numpy as np

from . import __version__
from . import metrics as M
from .checkpoint import load_checkpoint_with_config, save_checkpoint
from .data import (
    balance_dataset, default_templates, generate_synthetic_cohort, load_dataset, materialize, read_manifest,
    read_nifti, write_manifest,
)
from .data.augment import lineage_violations, read_templates
from .data.manifest import group_sequences
from .data.resample import preprocess_volume
from .errors import VolseqError
from .model import ArchitectureId, build_architecture, count_parameters, format_table, forward, golden_diff
from .train import TrainConfig, evaluate, kfold_cross_validate, stratified_split, train_model

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _int(s):
    return int(s)


def _float(s):
    return float(s)


def _bool(s):
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _optional_float(s):
    return None if s in (None, "", "none", "None") else float(s)


COMMON = [
    ("seed", _int, 0, "random seed"),
    ("jobs", _int, 1, "worker processes"),
    ("deterministic", _bool, True, "bitwise-reproducible runs"),
]

TRAIN_OPTIONS = [
    ("epochs", _int, 35, "training epochs"),
    ("profile", str, "full", "model scale: full or reduced"),
    ("batch-size", _int, 4, "sequences per mini-batch"),
    ("learning-rate", _float, 1e-3, "optimizer step size"),
    ("optimizer", str, "adam", "adam or sgd"),
    ("dropout", _optional_float, None, "dropout rate override"),
    ("dtype", str, "float64", "float64 or float32 training"),
]

# command -> [(flag, type, default, help)]; default REQUIRED marks a mandatory option
REQUIRED = object()
COMMANDS = {
    "synth": [
        ("out", str, REQUIRED, "output directory"),
        ("per-class", _int, 10, "patients per class"),
        ("visits", _int, 2, "visits per patient"),
        ("shape", str, "32x32x16", "volume shape D1xD2xD3"),
    ],
    "augment": [
        ("manifest", str, REQUIRED, "input manifest"),
        ("templates", str, None, "template transform file (default: built-in set)"),
        ("target", _int, REQUIRED, "sequences per class after balancing"),
        ("out", str, REQUIRED, "output manifest; volumes go to an augmented/ directory beside it"),
    ],
    "split": [
        ("manifest", str, REQUIRED, "input manifest"),
        ("test-fraction", _float, 0.2, "held-out share of each class"),
        ("out-train", str, REQUIRED, "training manifest"),
        ("out-test", str, REQUIRED, "test manifest"),
    ],
    "train": [
        ("manifest", str, REQUIRED, "training manifest"),
        ("arch", str, REQUIRED, "architecture id"),
        *TRAIN_OPTIONS,
        ("out", str, REQUIRED, "checkpoint path"),
        ("history", str, None, "history table (default: <out>.history.tsv)"),
    ],
    "cv": [
        ("manifest", str, REQUIRED, "manifest to cross-validate over"),
        ("arch", str, REQUIRED, "architecture id"),
        ("k", _int, 10, "number of folds"),
        *TRAIN_OPTIONS,
        ("report", str, REQUIRED, "report directory"),
    ],
    "evaluate": [
        ("checkpoint", str, REQUIRED, "checkpoint path"),
        ("manifest", str, REQUIRED, "test manifest"),
        ("report", str, REQUIRED, "report directory"),
    ],
    "predict": [
        ("checkpoint", str, REQUIRED, "checkpoint path"),
    ],
    "inspect": [
        ("arch", str, None, "architecture id"),
        ("checkpoint", str, None, "checkpoint path"),
        ("profile", str, "full", "profile used with --arch"),
        ("table-out", str, None, "also write the table as TSV"),
    ],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="volseq", description="3D volume-sequence classifiers")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, options in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key=value file with option values")
        for flag, _, default, text in options + COMMON:
            shown = "required" if default is REQUIRED else f"default: {default}"
            if default is None and "default" in text:
                shown = None
            if flag == "deterministic":
                p.add_argument("--deterministic", dest="deterministic", action="store_const", const=True,
                               default=None, help=f"{text} ({shown})")
                p.add_argument("--no-deterministic", dest="deterministic", action="store_const", const=False,
                               default=None)
            else:
                # values stay strings so file and flag share one conversion path
                p.add_argument(f"--{flag}", default=None, help=text if shown is None else f"{text} ({shown})")
        if name == "predict":
            p.add_argument("--sequence", nargs="+", required=True, help="volume paths in visit order")
        if name == "inspect":
            p.add_argument("--golden", action="store_true", help="diff against the reference tables")
    return parser


def read_config(path) -> dict[str, str]:
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, val = line.split("=", 1)
        values[key.strip().replace("_", "-")] = val.strip()
    return values


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Merge flags over config file over defaults; returns values keyed by underscore names."""
    options = COMMANDS[command] + COMMON
    known = {flag: (conv, default) for flag, conv, default, _ in options}
    file_values = read_config(args.config) if args.config else {}
    unknown = sorted(set(file_values) - set(known))
    if unknown:
        raise UsageError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
    out = {}
    for flag, (conv, default) in known.items():
        raw = getattr(args, flag.replace("-", "_"))
        if raw is None:
            raw = file_values.get(flag)
        if raw is None:
            if default is REQUIRED:
                raise UsageError(f"{command}: --{flag} is required")
            out[flag.replace("-", "_")] = default
            continue
        try:
            out[flag.replace("-", "_")] = conv(raw)
        except ValueError as exc:
            raise UsageError(f"--{flag}: {exc}") from None
    return out


def _train_config(c: dict) -> TrainConfig:
    return TrainConfig(
        epochs=c["epochs"], batch_size=c["batch_size"], learning_rate=c["learning_rate"], optimizer=c["optimizer"],
        dropout=c["dropout"], seed=c["seed"], deterministic=c["deterministic"], profile=c["profile"], dtype=c["dtype"],
    )


def _parse_shape(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"shape must look like 32x32x16, got {text!r}") from None


def _ensure_dir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create directory {path}: {exc}") from None
    if not os.access(path, os.W_OK):
        raise UsageError(f"directory {path} is not writable")
    return path


def _counts_line(counts: dict) -> str:
    return " ".join(f"class{k}={v}" for k, v in sorted(counts.items()))


# -- commands -----------------------------------------------------------------


def cmd_synth(c, args, out):
    shape = _parse_shape(c["shape"])
    target = _ensure_dir(c["out"])
    m = generate_synthetic_cohort(target, c["per_class"], shape, c["visits"], c["seed"])
    out(f"wrote {len(m.rows)} volumes and {target / 'manifest.tsv'}")


def _rebase(m, new_root: Path):
    rows = []
    for r in m.rows:
        path = os.path.relpath(m.resolve(r.path), new_root)
        mask = os.path.relpath(m.resolve(r.mask), new_root) if r.mask else ""
        rows.append(type(r)(r.patient_id, r.visit_code, path, r.label, r.provenance, r.date, mask))
    return type(m)(rows, m.seed, new_root)


def cmd_augment(c, args, out):
    out_path = Path(c["out"])
    root = _ensure_dir(out_path.parent.resolve())
    m = _rebase(read_manifest(c["manifest"]), root)
    templates = read_templates(c["templates"]) if c["templates"] else default_templates()
    before = m.sequence_counts()
    balanced = balance_dataset(m, templates, c["target"], c["seed"], Path("augmented"))
    n = materialize(balanced, templates)
    write_manifest(balanced, out_path)
    after = balanced.sequence_counts()
    bad = lineage_violations(balanced)
    if bad:
        raise VolseqError("lineage check failed: " + "; ".join(bad[:5]))
    M.write_table(out_path.with_suffix(".counts.tsv"), ["class", "before", "after"],
                  [[k, before[k], after[k]] for k in sorted(before)])
    out(f"before {_counts_line(before)}")
    out(f"after {_counts_line(after)}")
    out(f"generated {n} volumes")


def cmd_split(c, args, out):
    m = read_manifest(c["manifest"])
    seqs = group_sequences(m, min_visits=1)
    labels = [s.label for s in seqs]
    split = stratified_split(labels, [s.patient_id for s in seqs], c["test_fraction"], c["seed"])
    for key, idx in (("out_train", split.train), ("out_test", split.test)):
        path = Path(c[key])
        root = _ensure_dir(path.parent.resolve())
        rows = [r for i in idx for r in seqs[i].visits]
        write_manifest(_rebase(m.with_rows(rows), root), path)
    out(f"train={len(split.train)} test={len(split.test)} sequences")


def _load(manifest_path, spec):
    m = read_manifest(manifest_path)
    return load_dataset(m, spec.profile.input_shape)


def _write_history(history, path):
    M.write_table(path, ["epoch", "loss", "accuracy"],
                  [[h["epoch"], f"{h['loss']:.8f}", f"{h['accuracy']:.6f}"] for h in history])


def cmd_train(c, args, out):
    arch = ArchitectureId.parse(c["arch"])
    cfg = _train_config(c)
    dtype = np.dtype(cfg.dtype)
    spec = build_architecture(arch, seed=cfg.seed, profile=cfg.profile, dtype=dtype)
    seqs, arrays, labels = _load(c["manifest"], spec)
    out(f"training {arch.display_name} ({cfg.profile}) on {len(arrays)} sequences")
    trained, history = train_model(
        spec, arrays, labels, cfg, log=lambda e: out(f"epoch={e['epoch']} loss={e['loss']:.6f} accuracy={e['accuracy']:.4f}")
    )
    save_checkpoint(trained, c["out"], cfg.as_dict())
    hist_path = c["history"] or f"{c['out']}.history.tsv"
    _write_history(history, hist_path)
    out(f"wrote {c['out']} and {hist_path}")


def _write_report(bundle, report: Path, out, prefix: str = ""):
    flat = bundle.flat()
    (report / f"{prefix}metrics.txt").write_text(M.format_key_values(flat) + "\n", encoding="utf-8")
    M.write_table(report / f"{prefix}metrics.tsv", ["metric", "value"], [[k, f"{v:.6f}"] for k, v in flat.items()])
    K = bundle.confusion.k
    M.write_table(report / f"{prefix}confusion.tsv", ["true\\pred"] + [f"class{j + 1}" for j in range(K)],
                  [[f"class{i + 1}"] + row.tolist() for i, row in enumerate(bundle.confusion.counts)])
    M.write_table(report / f"{prefix}predictions.tsv", ["true"] + [f"p{j + 1}" for j in range(K)],
                  [[int(y) + 1] + [f"{p:.8f}" for p in row] for y, row in zip(bundle.labels, bundle.probs)])
    for k in range(K):
        try:
            M.write_roc_points(M.roc_ovr(bundle.labels, bundle.probs, k), report / f"{prefix}roc_class{k + 1}.tsv")
        except M.DegenerateClassError:
            pass


def cmd_cv(c, args, out):
    arch = ArchitectureId.parse(c["arch"])
    cfg = _train_config(c)
    spec = build_architecture(arch, seed=cfg.seed, profile=cfg.profile)
    seqs, arrays, labels = _load(c["manifest"], spec)
    report = _ensure_dir(c["report"])
    fr = kfold_cross_validate(arch, arrays, labels, cfg, c["k"], [s.patient_id for s in seqs], c["jobs"])
    keys = list(fr.folds[0])
    M.write_table(report / "folds.tsv", ["fold"] + keys,
                  [[i + 1] + [f"{f[k]:.6f}" for k in keys] for i, f in enumerate(fr.folds)])
    mean, std = fr.mean(), fr.std()
    M.write_table(report / "summary.tsv", ["metric", "mean", "std"], [[k, f"{mean[k]:.6f}", f"{std[k]:.6f}"] for k in keys])
    for k in keys:
        out(f"{k}={mean[k]:.6f} std={std[k]:.6f}")


def cmd_evaluate(c, args, out):
    spec, _ = load_checkpoint_with_config(_existing(c["checkpoint"]))
    seqs, arrays, labels = _load(c["manifest"], spec)
    bundle = evaluate(spec, arrays, labels)
    report = _ensure_dir(c["report"])
    _write_report(bundle, report, out)
    out(M.format_key_values(bundle.flat()))
    out("confusion (rows=true, cols=predicted):")
    for row in bundle.confusion.counts:
        out(" ".join(f"{v:4d}" for v in row))


def cmd_predict(c, args, out):
    spec, _ = load_checkpoint_with_config(_existing(c["checkpoint"]))
    vols = [preprocess_volume(read_nifti(_existing(p)), spec.profile.input_shape) for p in args.sequence]
    probs = forward(spec, vols)
    out(" ".join(f"p{k + 1}={p:.6f}" for k, p in enumerate(probs)))
    out(f"class={int(np.argmax(probs)) + 1}")


def cmd_inspect(c, args, out):
    if (c["arch"] is None) == (c["checkpoint"] is None):
        raise UsageError("inspect needs exactly one of --arch or --checkpoint")
    if c["checkpoint"]:
        spec, _ = load_checkpoint_with_config(_existing(c["checkpoint"]))
    else:
        spec = build_architecture(c["arch"], profile=c["profile"])
    rows, total = count_parameters(spec)
    out(f"{spec.arch.display_name} [{spec.arch.value}, {spec.profile.name} profile]")
    out(format_table(rows))
    if c["table_out"]:
        M.write_table(c["table_out"], ["layer", "type", "output_shape", "params"],
                      [[r.name, r.type_label, "x".join("None" if s is None else str(s) for s in r.output_shape), r.params]
                       for r in rows])
    if args.golden:
        if spec.profile.name != "full":
            raise UsageError("reference tables exist only for the full profile")
        problems = golden_diff(spec)
        if problems:
            for p in problems:
                out(f"MISMATCH {p}")
            return EXIT_INTERNAL
        out(f"golden: match ({len(rows)} rows, total {total})")
    return EXIT_OK


def _existing(path) -> str:
    if not Path(path).is_file():
        raise UsageError(f"no such file: {path}")
    return str(path)


HANDLERS = {
    "synth": cmd_synth,
    "augment": cmd_augment,
    "split": cmd_split,
    "train": cmd_train,
    "cv": cmd_cv,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK

    def out(line):
        print(line, flush=True)

    try:
        config = resolve_config(args.command, args)
        code = HANDLERS[args.command](config, args, out)
        return EXIT_OK if code is None else code
    except (UsageError, VolseqError, ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"volseq {args.command}: error: {msg}", file=sys.stderr)
        return EXIT_USAGE
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
