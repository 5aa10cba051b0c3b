"""Synthetic stand-in cohort.

Each patient gets a noisy background plus one bright, soft-edged ellipsoid.
Its size and intensity fall with the class index, and it shrinks further at
every visit at a class-dependent rate.  Every patient draws from its own
generator seeded by ``(seed, class, index)``, so output does not depend on
generation order.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from ..errors import ShapeError
from .manifest import DatasetManifest, ManifestRow, write_manifest
from .nifti import Volume, write_nifti

MIN_EXTENT = 16
# per class: ellipsoid semi-axis as a fraction of the half-extent, peak intensity, shrink per visit
CLASS_SIZE = {1: 0.72, 2: 0.55, 3: 0.40, 4: 0.26}
CLASS_INTENSITY = {1: 1.00, 2: 0.80, 3: 0.62, 4: 0.46}
CLASS_SHRINK = {1: 0.03, 2: 0.06, 3: 0.09, 4: 0.12}
BACKGROUND = 0.15
NOISE = 0.05


def visit_code(i: int) -> str:
    return "BL" if i == 0 else f"V{i:02d}"


def structure_radius(grid_shape, center, semi_axes) -> np.ndarray:
    """Normalized ellipsoid radius at every voxel (1 on the surface)."""
    idx = np.indices(grid_shape, dtype=np.float64)
    return np.sqrt(sum(((idx[a] - center[a]) / semi_axes[a]) ** 2 for a in range(3)))


def patient_volumes(label: int, index: int, shape, visits: int, seed: int):
    """Grids for one patient plus the per-visit ellipsoid geometry ``(center, semi_axes)``."""
    rng = np.random.default_rng([seed, label, index])
    half = np.array(shape, dtype=np.float64) / 2.0
    center = half - 0.5 + rng.uniform(-1.5, 1.5, size=3)
    size = CLASS_SIZE[label] * (1.0 + 0.05 * rng.uniform(-1, 1))
    peak = CLASS_INTENSITY[label] * (1.0 + 0.03 * rng.uniform(-1, 1))
    grids, geometry = [], []
    for v in range(visits):
        semi = np.maximum(size * half * (1.0 - CLASS_SHRINK[label]) ** v, 1.0)
        r = structure_radius(shape, center, semi)
        structure = peak / (1.0 + np.exp((r - 1.0) / 0.08))
        noise = gaussian_filter(rng.normal(0.0, NOISE, size=shape), 0.7)
        grids.append(BACKGROUND + noise + structure)
        geometry.append((center, semi))
    return grids, geometry


def generate_synthetic_cohort(out_dir, n_per_class=10, shape=(32, 32, 16), visits: int = 2, seed: int = 0,
                              datatype: int = 16, manifest_name: str = "manifest.tsv") -> DatasetManifest:
    """Write ``visits`` NIfTI volumes per patient and a manifest; returns the manifest.

    ``n_per_class`` is a single count or a mapping ``{class: count}`` for classes 1..4.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or min(shape) < MIN_EXTENT:
        raise ShapeError(f"synthetic volumes need every extent >= {MIN_EXTENT}, got {shape}")
    if visits < 1:
        raise ValueError("visits must be >= 1")
    counts = n_per_class if isinstance(n_per_class, dict) else {k: int(n_per_class) for k in CLASS_SIZE}
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spacing = (1.0, 1.0, 1.0)
    rows = []
    for label in sorted(counts):
        for i in range(counts[label]):
            pid = f"c{label}p{i:04d}"
            grids, _ = patient_volumes(label, i, shape, visits, seed)
            for v, grid in enumerate(grids):
                name = f"{pid}_{visit_code(v)}.nii.gz"
                write_nifti(Volume.from_grid(grid, spacing), out_dir / name, datatype)
                rows.append(ManifestRow(pid, visit_code(v), name, label, "original"))
    manifest = DatasetManifest(rows, seed, out_dir)
    write_manifest(manifest, out_dir / manifest_name)
    return manifest
