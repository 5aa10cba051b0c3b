"""Single-file NIfTI-1 (``.nii`` / ``.nii.gz``) reading and writing.

Only 3D volumes are handled (a 4D file with a singleton fourth axis is
accepted).  Supported datatypes: uint8, int16, float32, float64.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import FormatError, LengthError, ShapeError, UnsupportedError, WriteError

HEADER_SIZE = 348
VOX_OFFSET = 352

DATATYPES = {
    2: np.dtype("u1"),
    4: np.dtype("i2"),
    16: np.dtype("f4"),
    64: np.dtype("f8"),
}
DATATYPE_CODES = {v: k for k, v in DATATYPES.items()}


@dataclass
class Volume:
    """A 3D scan: voxel grid, voxel spacing in mm, and 4x4 voxel-to-world affine."""

    grid: np.ndarray
    spacing: tuple[float, float, float]
    affine: np.ndarray

    def __post_init__(self):
        self.grid = np.asarray(self.grid)
        self.affine = np.asarray(self.affine, dtype=np.float64)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.grid.ndim != 3:
            raise ShapeError(f"volume grid must be 3D, got shape {self.grid.shape}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ShapeError(f"voxel spacing must be three positive values, got {self.spacing}")
        if self.affine.shape != (4, 4):
            raise ShapeError(f"affine must be 4x4, got {self.affine.shape}")

    @classmethod
    def from_grid(cls, grid, spacing=(1.0, 1.0, 1.0)) -> "Volume":
        return cls(grid, spacing, np.diag(list(spacing) + [1.0]))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.grid.shape


# Field layout of the 348-byte header (offset, struct code).
_FIELDS = {
    "sizeof_hdr": (0, "i"),
    "dim": (40, "8h"),
    "datatype": (70, "h"),
    "bitpix": (72, "h"),
    "pixdim": (76, "8f"),
    "vox_offset": (108, "f"),
    "scl_slope": (112, "f"),
    "scl_inter": (116, "f"),
    "xyzt_units": (123, "B"),
    "descrip": (148, "80s"),
    "qform_code": (252, "h"),
    "sform_code": (254, "h"),
    "quatern": (256, "3f"),
    "qoffset": (268, "3f"),
    "srow_x": (280, "4f"),
    "srow_y": (296, "4f"),
    "srow_z": (312, "4f"),
    "magic": (344, "4s"),
}


def _unpack(raw: bytes, endian: str) -> dict:
    out = {}
    for name, (off, code) in _FIELDS.items():
        vals = struct.unpack_from(endian + code, raw, off)
        out[name] = vals if len(vals) > 1 else vals[0]
    return out


def _open_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise LengthError(f"{path}: truncated or corrupt gzip stream ({exc})") from exc
    return raw


def quaternion_affine(hdr: dict) -> np.ndarray:
    """Affine from the qform quaternion, pixdim and offsets."""
    b, c, d = (float(v) for v in hdr["quatern"])
    a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ]
    )
    pix = hdr["pixdim"]
    qfac = -1.0 if pix[0] < 0 else 1.0
    aff = np.eye(4)
    aff[:3, :3] = rot * np.array([pix[1], pix[2], pix[3] * qfac])
    aff[:3, 3] = hdr["qoffset"]
    return aff


def read_nifti(path) -> Volume:
    raw = _open_bytes(path)
    if len(raw) < HEADER_SIZE:
        raise LengthError(f"{path}: {len(raw)} bytes is shorter than a NIfTI-1 header")
    if raw[344:348] != b"n+1\0":
        raise FormatError(f"{path}: bad magic {raw[344:348]!r}; expected single-file NIfTI-1 'n+1\\0'")
    endian = "<"
    if struct.unpack_from("<i", raw, 0)[0] != HEADER_SIZE:
        if struct.unpack_from(">i", raw, 0)[0] != HEADER_SIZE:
            raise FormatError(f"{path}: sizeof_hdr is not {HEADER_SIZE}")
        endian = ">"
    hdr = _unpack(raw, endian)

    dim = hdr["dim"]
    ndim = dim[0]
    if ndim < 3 or ndim > 7 or any(d != 1 for d in dim[4 : ndim + 1]):
        raise UnsupportedError(f"{path}: only 3D volumes are supported, got dim={dim[: ndim + 1]}")
    shape = tuple(int(d) for d in dim[1:4])
    if min(shape) < 1:
        raise FormatError(f"{path}: non-positive extent in dim {dim}")
    code = hdr["datatype"]
    if code not in DATATYPES:
        raise UnsupportedError(f"{path}: datatype {code} is not supported (supported: {sorted(DATATYPES)})")
    dtype = DATATYPES[code].newbyteorder(endian)

    offset = int(hdr["vox_offset"]) or VOX_OFFSET
    nbytes = int(np.prod(shape)) * dtype.itemsize
    if len(raw) < offset + nbytes:
        raise LengthError(f"{path}: payload has {max(0, len(raw) - offset)} bytes, header promises {nbytes}")
    data = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=offset)
    grid = data.reshape(shape, order="F").astype(np.float64)
    slope, inter = hdr["scl_slope"], hdr["scl_inter"]
    if slope != 0 and np.isfinite(slope) and (slope, inter) != (1.0, 0.0):
        grid = grid * slope + inter

    pix = hdr["pixdim"]
    spacing = tuple(abs(float(p)) for p in pix[1:4])
    if hdr["sform_code"] > 0:
        affine = np.eye(4)
        affine[0], affine[1], affine[2] = hdr["srow_x"], hdr["srow_y"], hdr["srow_z"]
    elif hdr["qform_code"] > 0:
        affine = quaternion_affine(hdr)
    else:
        affine = np.diag(list(spacing) + [1.0])
    if min(spacing) <= 0:
        raise FormatError(f"{path}: non-positive voxel spacing {spacing}")
    return Volume(np.ascontiguousarray(grid), spacing, affine)


def encode_nifti(v: Volume, datatype: int = 64) -> bytes:
    if datatype not in DATATYPES:
        raise UnsupportedError(f"datatype {datatype} is not supported (supported: {sorted(DATATYPES)})")
    dtype = DATATYPES[datatype].newbyteorder("<")
    hdr = bytearray(VOX_OFFSET)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *v.grid.shape, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, datatype, dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *v.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<fff", hdr, 108, float(VOX_OFFSET), 1.0, 0.0)
    struct.pack_into("<B", hdr, 123, 2)  # mm
    struct.pack_into("<hh", hdr, 252, 0, 2)  # qform unset, sform aligned
    for row, off in zip(v.affine[:3], (280, 296, 312)):
        struct.pack_into("<4f", hdr, off, *row)
    hdr[344:348] = b"n+1\0"
    payload = np.asarray(v.grid).astype(dtype).tobytes(order="F")
    return bytes(hdr) + payload


def write_nifti(v: Volume, path, datatype: int = 64, compress: bool | None = None) -> None:
    """Write ``v`` as single-file NIfTI-1 with the sform set to ``v.affine``.

    ``compress`` defaults to whether ``path`` ends in ``.gz``.  Gzip output
    carries no timestamp, so identical volumes give identical files.
    """
    path = Path(path)
    blob = encode_nifti(v, datatype)
    if compress is None:
        compress = path.suffix == ".gz"
    if compress:
        blob = gzip.compress(blob, mtime=0)
    try:
        path.write_bytes(blob)
    except OSError as exc:
        raise WriteError(f"cannot write {path}: {exc}") from exc
