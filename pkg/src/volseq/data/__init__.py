"""Volume I/O, preprocessing, augmentation and dataset manifests."""

from .nifti import Volume, read_nifti, write_nifti
from .resample import AffineTransform, affine_resample, preprocess_volume
from .manifest import DatasetManifest, ManifestRow, ScanSequence, group_sequences, load_dataset, read_manifest, write_manifest
from .augment import balance_dataset, default_templates, materialize
from .synthetic import generate_synthetic_cohort

__all__ = [
    "AffineTransform",
    "DatasetManifest",
    "ManifestRow",
    "ScanSequence",
    "Volume",
    "affine_resample",
    "balance_dataset",
    "default_templates",
    "generate_synthetic_cohort",
    "group_sequences",
    "load_dataset",
    "materialize",
    "preprocess_volume",
    "read_manifest",
    "read_nifti",
    "write_manifest",
    "write_nifti",
]
