"""Class balancing by template warps and flips.

Balancing runs in two phases per class.  First, template transforms are
applied round-robin over the class's original sequences (every patient gets
template 0 before anyone gets template 1, patients in seeded-shuffled
order) until the class reaches the size of the largest class.  Then flips
along voxel axes 0, 1, 2 are applied round-robin over the un-flipped
sequences until the class reaches the target.  All visits of a sequence
always receive the same transform.
"""

from __future__ import annotations

from functools import lru_cache
from pathlib import Path

import numpy as np

from ..errors import CapacityError, FormatError
from .manifest import DatasetManifest, ManifestRow, ScanSequence, group_sequences
from .nifti import Volume, read_nifti, write_nifti
from .resample import AffineTransform, affine_resample
from ..tensor import flip

FLIP_AXES = (0, 1, 2)


def _rot(axis: int, degrees: float) -> np.ndarray:
    a = np.deg2rad(degrees)
    c, s = np.cos(a), np.sin(a)
    i, j = [k for k in range(3) if k != axis]
    m = np.eye(3)
    m[i, i], m[i, j], m[j, i], m[j, j] = c, -s, s, c
    return m


def default_templates() -> list[AffineTransform]:
    """Six mild rotations / scalings used when no template file is given."""
    return [
        AffineTransform(_rot(2, 4.0), np.zeros(3), "0"),
        AffineTransform(_rot(2, -4.0), np.zeros(3), "1"),
        AffineTransform(1.03 * _rot(0, 3.0), np.zeros(3), "2"),
        AffineTransform(0.97 * _rot(1, -3.0), np.zeros(3), "3"),
        AffineTransform(np.diag([1.04, 0.98, 1.0]), np.zeros(3), "4"),
        AffineTransform(_rot(2, 2.0) @ _rot(0, -2.0), np.array([1.0, -1.0, 0.0]), "5"),
    ]


def write_templates(templates, path) -> None:
    lines = ["# id a11 a12 a13 a21 a22 a23 a31 a32 a33 tx ty tz"]
    for i, t in enumerate(templates):
        vals = list(t.linear.ravel()) + list(t.translation)
        lines.append(" ".join([t.label or str(i)] + [repr(float(v)) for v in vals]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_templates(path) -> list[AffineTransform]:
    out = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 13:
            raise FormatError(f"{path}:{n}: expected an id and 12 numbers, got {len(parts)} fields")
        try:
            vals = [float(p) for p in parts[1:]]
        except ValueError as exc:
            raise FormatError(f"{path}:{n}: {exc}") from None
        out.append(AffineTransform(np.array(vals[:9]).reshape(3, 3), np.array(vals[9:]), parts[0]))
    return out


def _derived_path(out_dir: Path, pid: str, visit: str, provenance: str) -> str:
    tag = provenance.replace(":", "").replace("+", "_")
    return str(out_dir / f"{pid}_{visit}_{tag}.nii.gz")


def _derive(seq: ScanSequence, step: str, out_dir: Path) -> ScanSequence:
    prov = step if seq.provenance == "original" else f"{seq.provenance}+{step}"
    rows = [
        ManifestRow(r.patient_id, r.visit_code, _derived_path(out_dir, r.patient_id, r.visit_code, prov), r.label, prov, r.date, r.mask)
        for r in seq.visits
    ]
    return ScanSequence(seq.patient_id, prov, rows)


def balance_dataset(m: DatasetManifest, templates, target: int, seed: int = 0, out_dir=None) -> DatasetManifest:
    """Plan a balanced manifest with exactly ``target`` sequences per class.

    New rows point at files under ``out_dir`` (default ``augmented/``
    relative to the manifest); :func:`materialize` creates them.
    """
    out_dir = Path(out_dir) if out_dir is not None else Path("augmented")
    seqs = group_sequences(m, min_visits=1)
    by_class: dict[int, list[ScanSequence]] = {}
    for s in seqs:
        by_class.setdefault(s.label, []).append(s)
    counts = {k: len(v) for k, v in by_class.items()}
    largest = max(counts.values()) if counts else 0
    if target < largest:
        raise CapacityError(f"target {target} is below the largest class size {largest}")
    phase1 = largest
    n_t = len(templates)

    problems = []
    for k, members in sorted(by_class.items()):
        originals = [s for s in members if s.provenance == "original"]
        after_templates = min(phase1, len(members) + n_t * len(originals)) if len(members) < phase1 else len(members)
        unflipped = after_templates - sum("flip" in s.provenance for s in members)
        capacity = after_templates + len(FLIP_AXES) * unflipped
        if capacity < target:
            problems.append(f"class {k}: can reach {capacity} of {target} (deficit {target - capacity})")
    if problems:
        raise CapacityError("insufficient augmentation capacity; " + "; ".join(problems))

    rows = list(m.rows)
    for k, members in sorted(by_class.items()):
        rng = np.random.default_rng([seed, k])
        pool = list(members)
        originals = [s for s in members if s.provenance == "original"]
        order = [originals[i] for i in rng.permutation(len(originals))]
        for ti in range(n_t):
            for s in order:
                if len(pool) >= phase1:
                    break
                pool.append(_derive(s, f"template:{ti}", out_dir))
        flippable = [s for s in pool if "flip" not in s.provenance]
        added = pool[len(members):]
        for axis in FLIP_AXES:
            for s in flippable:
                if len(pool) >= target:
                    break
                d = _derive(s, f"flip:{axis}", out_dir)
                pool.append(d)
                added.append(d)
        for s in added:
            rows.extend(s.visits)
    return DatasetManifest(rows, seed, m.root)


def apply_step(v: Volume, step: str, templates) -> Volume:
    kind, arg = step.split(":")
    if kind == "flip":
        return Volume(flip(np.asarray(v.grid), int(arg)), v.spacing, v.affine)
    t = templates[int(arg)]
    center = v.affine @ np.append((np.array(v.grid.shape) - 1) / 2.0, 1.0)
    return affine_resample(v, t.centered(center[:3]))


def materialize(balanced: DatasetManifest, templates, datatype: int = 16) -> int:
    """Write every derived volume of ``balanced`` from its original; returns the number written."""
    originals = {(r.patient_id, r.visit_code): r for r in balanced.rows if r.is_original}
    written = 0
    read = lru_cache(maxsize=256)(read_nifti)
    for r in balanced.rows:
        if r.is_original:
            continue
        src = originals.get((r.patient_id, r.visit_code))
        if src is None:
            raise FormatError(f"derived row {r.path} has no original row for {r.patient_id}/{r.visit_code}")
        v = read(str(balanced.resolve(src.path)))
        for step in r.provenance.split("+"):
            v = apply_step(v, step, templates)
        target = balanced.resolve(r.path)
        target.parent.mkdir(parents=True, exist_ok=True)
        write_nifti(v, target, datatype)
        written += 1
    return written


def lineage_violations(m: DatasetManifest) -> list[str]:
    """Derived rows whose original (same patient and visit) is missing or has another class."""
    originals = {(r.patient_id, r.visit_code): r for r in m.rows if r.is_original}
    bad = []
    for r in m.rows:
        if r.is_original:
            continue
        src = originals.get((r.patient_id, r.visit_code))
        if src is None:
            bad.append(f"{r.path}: no original row")
        elif src.label != r.label:
            bad.append(f"{r.path}: class {r.label} but original has class {src.label}")
    return bad
