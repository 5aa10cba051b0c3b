"""Masking, trilinear resampling, intensity normalization and affine warps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

from ..errors import ShapeError, TransformError
from .nifti import Volume


@dataclass
class AffineTransform:
    """World-space (mm) map ``y = linear @ x + translation``."""

    linear: np.ndarray
    translation: np.ndarray
    label: str = ""

    def __post_init__(self):
        self.linear = np.asarray(self.linear, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        # singular matrices are rejected when the transform is applied

    @classmethod
    def identity(cls, label: str = "identity") -> "AffineTransform":
        return cls(np.eye(3), np.zeros(3), label)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.linear
        m[:3, 3] = self.translation
        return m

    def inverse_matrix(self) -> np.ndarray:
        if abs(np.linalg.det(self.linear)) < 1e-12:
            raise TransformError(f"transform {self.label!r} has a singular linear part")
        return np.linalg.inv(self.matrix())

    def centered(self, center) -> "AffineTransform":
        """The same linear map applied about ``center`` instead of the world origin."""
        center = np.asarray(center, dtype=np.float64)
        return AffineTransform(self.linear, self.translation + center - self.linear @ center, self.label)

    def inverse(self) -> "AffineTransform":
        inv = self.inverse_matrix()
        return AffineTransform(inv[:3, :3], inv[:3, 3], self.label + "^-1")


def sample_trilinear(grid: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Trilinear interpolation at voxel ``coords`` (shape ``[3, ...]``); 0 outside ``[0, D-1]``."""
    return map_coordinates(grid, coords, order=1, mode="constant", cval=0.0)


def resize_trilinear(grid: np.ndarray, target_shape) -> np.ndarray:
    """Resample onto ``target_shape`` with corner voxels aligned."""
    axes = [np.linspace(0.0, n - 1.0, t) for n, t in zip(grid.shape, target_shape)]
    coords = np.stack(np.meshgrid(*axes, indexing="ij"))
    return sample_trilinear(np.asarray(grid, dtype=np.float64), coords)


def minmax(grid: np.ndarray) -> np.ndarray:
    lo, hi = float(grid.min()), float(grid.max())
    if hi <= lo:
        return np.zeros_like(grid, dtype=np.float64)
    return (grid - lo) / (hi - lo)


def preprocess_volume(v: Volume, target_shape, mask: Volume | None = None) -> np.ndarray:
    """Mask, resample to ``target_shape`` and scale intensities into [0, 1].

    Returns a ``[D1, D2, D3, 1]`` array.
    """
    target_shape = tuple(int(t) for t in target_shape)
    if len(target_shape) != 3 or min(target_shape) < 1:
        raise ShapeError(f"target shape must be three positive extents, got {target_shape}")
    grid = np.asarray(v.grid, dtype=np.float64)
    if mask is not None:
        if mask.grid.shape != grid.shape:
            raise ShapeError(f"mask shape {mask.grid.shape} differs from volume shape {grid.shape}")
        grid = grid * (mask.grid != 0)
    if grid.shape != target_shape:
        grid = resize_trilinear(grid, target_shape)
    return minmax(grid)[..., None]


def affine_resample(v: Volume, t: AffineTransform, target: tuple | None = None) -> Volume:
    """Warp ``v`` by world-space transform ``t``.

    Output voxel ``p`` (on the ``target`` grid, given as ``(shape, affine)``;
    defaults to ``v``'s own grid) takes the interpolated value of ``v`` at
    world point ``t^-1(affine @ p)``.  Samples falling outside ``v`` are 0.
    """
    shape, out_affine = target if target is not None else (v.grid.shape, v.affine)
    out_affine = np.asarray(out_affine, dtype=np.float64)
    vox_map = np.linalg.inv(v.affine) @ t.inverse_matrix() @ out_affine
    idx = np.indices(tuple(shape), dtype=np.float64).reshape(3, -1)
    src = vox_map[:3, :3] @ idx + vox_map[:3, 3:4]
    # snap round-off so exact lattice hits (identity, flips) are not dropped at the border
    snapped = np.round(src)
    src = np.where(np.abs(src - snapped) < 1e-9, snapped, src)
    out = sample_trilinear(np.asarray(v.grid, dtype=np.float64), src).reshape(shape)
    spacing = tuple(float(s) for s in np.linalg.norm(out_affine[:3, :3], axis=0))
    return Volume(out, spacing, out_affine)


def flip_transform(v: Volume, axis: int) -> AffineTransform:
    """World transform that mirrors ``v`` about the centre of its grid along voxel ``axis``."""
    n = v.grid.shape[axis]
    mirror = np.eye(4)
    mirror[axis, axis] = -1.0
    mirror[axis, 3] = n - 1.0
    world = v.affine @ mirror @ np.linalg.inv(v.affine)
    return AffineTransform(world[:3, :3], world[:3, 3], f"flip{axis}")
