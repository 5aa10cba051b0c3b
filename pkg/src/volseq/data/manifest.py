"""Dataset manifests and their grouping into ordered scan sequences.

A manifest is a tab-separated UTF-8 file with a header row::

    patient_id  visit_code  path  class  provenance

Optional extra columns ``date`` (ISO acquisition date) and ``mask`` (path of
a binary brain mask) are understood when present.  A leading
``# seed=<int>`` comment records the dataset-level seed.  Relative paths are
resolved against the manifest's directory.

Provenance is ``original`` or a ``+``-joined chain of ``template:<k>`` and
``flip:<axis>`` steps applied to the original row with the same patient and
visit code.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..errors import InputError, LabelError, SchemaError
from .nifti import read_nifti
from .resample import preprocess_volume

COLUMNS = ("patient_id", "visit_code", "path", "class", "provenance")
OPTIONAL_COLUMNS = ("date", "mask")
N_CLASSES = 4
_PROVENANCE = re.compile(r"^(original|(template:\d+|flip:[012])(\+(template:\d+|flip:[012]))*)$")


@dataclass(frozen=True)
class ManifestRow:
    patient_id: str
    visit_code: str
    path: str
    label: int
    provenance: str = "original"
    date: str = ""
    mask: str = ""

    @property
    def is_original(self) -> bool:
        return self.provenance == "original"


@dataclass
class DatasetManifest:
    rows: list[ManifestRow]
    seed: int | None = None
    root: Path | None = None

    def __post_init__(self):
        paths = set()
        for r in self.rows:
            if not 1 <= r.label <= N_CLASSES:
                raise LabelError(f"row {r.patient_id}/{r.visit_code}: class {r.label} not in 1..{N_CLASSES}")
            if not _PROVENANCE.match(r.provenance):
                raise SchemaError(f"row {r.patient_id}/{r.visit_code}: bad provenance {r.provenance!r}")
            if r.path in paths:
                raise SchemaError(f"duplicate path {r.path!r}")
            paths.add(r.path)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def sequence_counts(self) -> dict[int, int]:
        """Number of sequences (patient, provenance) per class of their latest visit."""
        counts = {k: 0 for k in range(1, N_CLASSES + 1)}
        for s in group_sequences(self, min_visits=1):
            counts[s.label] += 1
        return counts

    def with_rows(self, rows) -> "DatasetManifest":
        return replace(self, rows=list(rows))


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    seed = None
    with path.open(encoding="utf-8", newline="") as fh:
        lines = []
        for line in fh:
            if line.startswith("#"):
                m = re.match(r"#\s*seed\s*=\s*(-?\d+)", line)
                if m:
                    seed = int(m.group(1))
                continue
            lines.append(line)
    reader = csv.DictReader(lines, delimiter="\t")
    if reader.fieldnames is None or any(c not in reader.fieldnames for c in COLUMNS):
        raise SchemaError(f"{path}: header must contain {', '.join(COLUMNS)}; got {reader.fieldnames}")
    rows = []
    for i, rec in enumerate(reader, start=2):
        try:
            label = int(rec["class"])
        except (TypeError, ValueError):
            raise SchemaError(f"{path}:{i}: class {rec['class']!r} is not an integer") from None
        rows.append(
            ManifestRow(
                rec["patient_id"], rec["visit_code"], rec["path"], label, rec["provenance"] or "original",
                rec.get("date") or "", rec.get("mask") or "",
            )
        )
    return DatasetManifest(rows, seed, path.parent)


def write_manifest(m: DatasetManifest, path) -> None:
    path = Path(path)
    extra = [c for c in OPTIONAL_COLUMNS if any(getattr(r, c) for r in m.rows)]
    with path.open("w", encoding="utf-8", newline="") as fh:
        if m.seed is not None:
            fh.write(f"# seed={m.seed}\n")
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(list(COLUMNS) + extra)
        for r in m.rows:
            w.writerow([r.patient_id, r.visit_code, r.path, r.label, r.provenance] + [getattr(r, c) for c in extra])


def visit_rank(code: str) -> tuple:
    """Sort key: screening < BL < V01 < ... < V15 < anything else (alphabetical)."""
    code = code.upper()
    if code == "SC":
        return (0, -1, code)
    if code == "BL":
        return (0, 0, code)
    m = re.fullmatch(r"V(\d+)", code)
    if m:
        return (0, int(m.group(1)), code)
    return (1, 0, code)


@dataclass
class ScanSequence:
    """One patient's time-ordered visits under one provenance."""

    patient_id: str
    provenance: str
    visits: list[ManifestRow] = field(default_factory=list)

    @property
    def label(self) -> int:
        """Class recorded at the latest visit (1-based)."""
        return self.visits[-1].label

    @property
    def labels(self) -> list[int]:
        return [v.label for v in self.visits]

    @property
    def key(self) -> tuple[str, str]:
        return (self.patient_id, self.provenance)


def group_sequences(m: DatasetManifest, min_visits: int = 2) -> list[ScanSequence]:
    """Group rows into sequences ordered by acquisition date, then visit code.

    Sequences come out sorted by (patient_id, provenance) so the order is
    independent of row order in the file.
    """
    groups: dict[tuple[str, str], list[ManifestRow]] = {}
    for r in m.rows:
        groups.setdefault((r.patient_id, r.provenance), []).append(r)
    seqs = []
    for (pid, prov), rows in sorted(groups.items()):
        if all(r.date for r in rows):
            rows.sort(key=lambda r: (r.date, visit_rank(r.visit_code)))
        else:
            rows.sort(key=lambda r: visit_rank(r.visit_code))
        codes = [r.visit_code for r in rows]
        if len(set(codes)) != len(codes):
            raise InputError(f"patient {pid} ({prov}) has repeated visit codes {codes}")
        if len(rows) < min_visits:
            raise InputError(f"patient {pid} ({prov}) has {len(rows)} visit(s); at least {min_visits} required")
        seqs.append(ScanSequence(pid, prov, rows))
    return seqs


def load_sequence(m: DatasetManifest, seq: ScanSequence, target_shape) -> np.ndarray:
    """Preprocessed ``[T, D1, D2, D3, 1]`` array for one sequence."""
    vols = []
    for r in seq.visits:
        mask = read_nifti(m.resolve(r.mask)) if r.mask else None
        vols.append(preprocess_volume(read_nifti(m.resolve(r.path)), target_shape, mask))
    return np.stack(vols)


def load_dataset(m: DatasetManifest, target_shape, min_visits: int = 2):
    """``(sequences, arrays, labels)`` with 0-based labels taken from each sequence's last visit."""
    seqs = group_sequences(m, min_visits)
    arrays = [load_sequence(m, s, target_shape) for s in seqs]
    labels = np.array([s.label - 1 for s in seqs], dtype=np.int64)
    return seqs, arrays, labels
