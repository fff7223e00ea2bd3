"""Minimal NIfTI-1 reader/writer.

Supports single-file images (.nii, .nii.gz), the common integer/float
datatypes, header scale/intercept, and sform/qform/pixdim affines. Data is
stored x-fastest on disk; arrays here are indexed [x, y, z].
"""

from __future__ import annotations

import gzip
from pathlib import Path

import numpy as np


class NiftiFormatError(Exception):
    """Unreadable, truncated, or unsupported NIfTI file."""


HEADER_SIZE = 348
SINGLE_VOX_OFFSET = 352

# NIfTI-1 header, little-endian byte offsets per the standard.
_HEADER_DTD = [
    ("sizeof_hdr", "i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "i4"),
    ("session_error", "i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "i2", (8,)),
    ("intent_p1", "f4"),
    ("intent_p2", "f4"),
    ("intent_p3", "f4"),
    ("intent_code", "i2"),
    ("datatype", "i2"),
    ("bitpix", "i2"),
    ("slice_start", "i2"),
    ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"),
    ("scl_slope", "f4"),
    ("scl_inter", "f4"),
    ("slice_end", "i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "f4"),
    ("cal_min", "f4"),
    ("slice_duration", "f4"),
    ("toffset", "f4"),
    ("glmax", "i4"),
    ("glmin", "i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "i2"),
    ("sform_code", "i2"),
    ("quatern_b", "f4"),
    ("quatern_c", "f4"),
    ("quatern_d", "f4"),
    ("qoffset_x", "f4"),
    ("qoffset_y", "f4"),
    ("qoffset_z", "f4"),
    ("srow_x", "f4", (4,)),
    ("srow_y", "f4", (4,)),
    ("srow_z", "f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
]

_DTYPE_CODES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
}
_CODE_FOR_DTYPE = {np.dtype(v): k for k, v in _DTYPE_CODES.items()}


def _open_maybe_gzip(path: Path):
    with open(path, "rb") as f:
        magic = f.read(2)
    if magic == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _quaternion_affine(hdr: np.void) -> np.ndarray:
    b = float(hdr["quatern_b"])
    c = float(hdr["quatern_c"])
    d = float(hdr["quatern_d"])
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(max(a2, 0.0))
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )
    pixdim = np.asarray(hdr["pixdim"], dtype=np.float64)
    qfac = -1.0 if pixdim[0] < 0 else 1.0
    scale = np.array([pixdim[1], pixdim[2], pixdim[3] * qfac])
    affine = np.eye(4)
    affine[:3, :3] = rot * scale
    affine[:3, 3] = [hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"]]
    return affine


def _header_affine(hdr: np.void) -> np.ndarray:
    if int(hdr["sform_code"]) > 0:
        affine = np.eye(4)
        affine[0] = np.asarray(hdr["srow_x"], dtype=np.float64)
        affine[1] = np.asarray(hdr["srow_y"], dtype=np.float64)
        affine[2] = np.asarray(hdr["srow_z"], dtype=np.float64)
        return affine
    if int(hdr["qform_code"]) > 0:
        return _quaternion_affine(hdr)
    # Fall back to a pixdim-scaled grid with no rotation (method 1).
    pixdim = np.asarray(hdr["pixdim"], dtype=np.float64)
    affine = np.diag([pixdim[1], pixdim[2], pixdim[3], 1.0])
    return affine


def read_nifti(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read a single-file NIfTI-1 image.

    Returns (data, affine) where data is a 3D float32/float64 array indexed
    [x, y, z] with header scale/intercept applied, and affine is the 4x4
    grid-to-world matrix in mm.

    Raises NiftiFormatError for truncated files, bad magic, unsupported
    datatypes, or non-3D images (more than three non-unit dimensions).
    """
    path = Path(path)
    if not path.exists():
        raise NiftiFormatError(f"no such file: {path}")
    try:
        with _open_maybe_gzip(path) as f:
            raw = f.read(HEADER_SIZE)
            if len(raw) < HEADER_SIZE:
                raise NiftiFormatError(f"truncated header in {path}")
            hdr_dtype = np.dtype(_HEADER_DTD).newbyteorder("<")
            hdr = np.frombuffer(raw, dtype=hdr_dtype, count=1)[0]
            if int(hdr["sizeof_hdr"]) != HEADER_SIZE:
                hdr = np.frombuffer(raw, dtype=hdr_dtype.newbyteorder(">"), count=1)[0]
                if int(hdr["sizeof_hdr"]) != HEADER_SIZE:
                    raise NiftiFormatError(f"corrupt header (sizeof_hdr) in {path}")
            magic = bytes(hdr["magic"]).rstrip(b"\x00")
            if magic == b"ni1":
                raise NiftiFormatError("paired (.hdr/.img) NIfTI is not supported")
            if magic != b"n+1":
                raise NiftiFormatError(f"bad magic {magic!r} in {path}")

            dim = np.asarray(hdr["dim"], dtype=int)
            ndim = int(dim[0])
            if not 1 <= ndim <= 7:
                raise NiftiFormatError(f"corrupt header (dim[0]={ndim}) in {path}")
            shape = [int(n) for n in dim[1 : 1 + ndim]]
            if any(n < 1 for n in shape):
                raise NiftiFormatError(f"corrupt header (non-positive dim) in {path}")

            code = int(hdr["datatype"])
            if code not in _DTYPE_CODES:
                raise NiftiFormatError(f"unsupported datatype code {code} in {path}")
            dtype = np.dtype(_DTYPE_CODES[code]).newbyteorder(hdr_dtype.byteorder)

            vox_offset = int(hdr["vox_offset"]) or SINGLE_VOX_OFFSET
            f.read(max(vox_offset - HEADER_SIZE, 0))
            count = int(np.prod(shape))
            buf = f.read(count * dtype.itemsize)
            if len(buf) < count * dtype.itemsize:
                raise NiftiFormatError(f"truncated data in {path}")
            data = np.frombuffer(buf, dtype=dtype).reshape(shape, order="F")
    except OSError as exc:
        raise NiftiFormatError(f"unreadable file {path}: {exc}") from exc

    # Squeeze trailing singleton dims; anything 4D+ with real extent is out.
    while data.ndim > 3 and data.shape[-1] == 1:
        data = data[..., 0]
    if data.ndim > 3:
        raise NiftiFormatError(
            f"{path} has {data.ndim} non-unit dimensions; only 3D volumes are supported"
        )
    while data.ndim < 3:
        data = data[..., np.newaxis]

    out_dtype = np.float64 if data.dtype.type is np.float64 else np.float32
    values = data.astype(out_dtype)
    slope = float(hdr["scl_slope"])
    inter = float(hdr["scl_inter"])
    if np.isfinite(slope) and slope != 0.0 and not (slope == 1.0 and inter == 0.0):
        values = values * slope + inter

    return values, _header_affine(hdr)


def write_nifti(
    path: str | Path,
    data: np.ndarray,
    affine: np.ndarray,
    dtype: np.dtype | type | None = None,
) -> None:
    """Write a 3D array as a single-file NIfTI-1 image (.nii or .nii.gz).

    The affine is stored as the sform; pixdim is derived from its column
    norms. No scale/intercept is applied (slope 1, intercept 0).
    """
    path = Path(path)
    data = np.asarray(data)
    if data.ndim != 3:
        raise ValueError(f"expected 3D data, got shape {data.shape}")
    if dtype is None:
        dtype = np.float32 if data.dtype.kind == "f" else data.dtype
    dtype = np.dtype(dtype)
    if dtype not in _CODE_FOR_DTYPE:
        raise ValueError(f"unsupported output dtype {dtype}")
    affine = np.asarray(affine, dtype=np.float64)
    if affine.shape != (4, 4):
        raise ValueError("affine must be 4x4")

    hdr_dtype = np.dtype(_HEADER_DTD).newbyteorder("<")
    hdr = np.zeros((), dtype=hdr_dtype)
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["regular"] = b"r"
    dim = np.ones(8, dtype=np.int16)
    dim[0] = 3
    dim[1:4] = data.shape
    hdr["dim"] = dim
    hdr["datatype"] = _CODE_FOR_DTYPE[dtype]
    hdr["bitpix"] = dtype.itemsize * 8
    pixdim = np.zeros(8, dtype=np.float32)
    pixdim[0] = 1.0
    pixdim[1:4] = np.linalg.norm(affine[:3, :3], axis=0)
    hdr["pixdim"] = pixdim
    hdr["vox_offset"] = SINGLE_VOX_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = 10  # mm | sec
    hdr["descrip"] = b"headqc"
    hdr["sform_code"] = 1
    hdr["qform_code"] = 0
    hdr["srow_x"] = affine[0].astype(np.float32)
    hdr["srow_y"] = affine[1].astype(np.float32)
    hdr["srow_z"] = affine[2].astype(np.float32)
    hdr["magic"] = b"n+1"

    payload = hdr.tobytes() + b"\x00\x00\x00\x00" + data.astype(dtype).tobytes(order="F")
    if path.suffix == ".gz":
        # mtime pinned so identical volumes produce identical files.
        with open(path, "wb") as raw:
            with gzip.GzipFile(fileobj=raw, mode="wb", compresslevel=4, mtime=0) as f:
                f.write(payload)
    else:
        with open(path, "wb") as f:
            f.write(payload)
