"""Minimal single-file NIfTI-1 (.nii / .nii.gz) reader and writer.

Volumes are returned in the on-disk index order ``(i, j, k)`` = ``(dim[1], dim[2], dim[3])``
as C-ordered numpy arrays; spacing comes from ``pixdim[1:4]``.
"""
import gzip
import struct
from pathlib import Path

import numpy as np

from ..errors import NiftiDtypeError, NiftiHeaderError, NiftiMagicError, NiftiTruncatedError

HEADER_SIZE = 348
VOX_OFFSET = 352

# NIfTI datatype code -> numpy kind/size
DTYPES = {
    2: "u1",
    4: "i2",
    8: "i4",
    16: "f4",
    64: "f8",
}
CODES = {v: k for k, v in DTYPES.items()}


def _open_bytes(path):
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (EOFError, OSError) as e:
            raise NiftiTruncatedError(f"{path}: corrupt gzip stream ({e})") from e
    return raw


def _detect_endian(hdr, path):
    (dim0,) = struct.unpack("<h", hdr[40:42])
    if 1 <= dim0 <= 7:
        return "<"
    (dim0,) = struct.unpack(">h", hdr[40:42])
    if 1 <= dim0 <= 7:
        return ">"
    raise NiftiHeaderError(f"{path}: dim[0] is not in 1..7 under either byte order")


def parse_header(hdr, path="<bytes>"):
    """Decode the fields of a 348-byte NIfTI-1 header that this package uses."""
    if len(hdr) < HEADER_SIZE:
        raise NiftiTruncatedError(f"{path}: header has {len(hdr)} bytes, expected {HEADER_SIZE}")
    magic = hdr[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise NiftiMagicError(f"{path}: bad magic {magic!r}")
    if magic == b"ni1\x00":
        raise NiftiMagicError(f"{path}: two-file (.hdr/.img) NIfTI is not supported")
    e = _detect_endian(hdr, path)
    (sizeof_hdr,) = struct.unpack(e + "i", hdr[0:4])
    if sizeof_hdr != HEADER_SIZE:
        raise NiftiHeaderError(f"{path}: sizeof_hdr is {sizeof_hdr}, expected {HEADER_SIZE}")
    dim = struct.unpack(e + "8h", hdr[40:56])
    datatype, bitpix = struct.unpack(e + "2h", hdr[70:74])
    pixdim = struct.unpack(e + "8f", hdr[76:108])
    vox_offset, scl_slope, scl_inter = struct.unpack(e + "3f", hdr[108:120])
    ndim = dim[0]
    shape = tuple(int(d) for d in dim[1:ndim + 1])
    if any(d < 1 for d in shape):
        raise NiftiHeaderError(f"{path}: non-positive extent in dim {dim}")
    if datatype not in DTYPES:
        raise NiftiDtypeError(f"{path}: unsupported datatype code {datatype}")
    return {
        "endian": e,
        "shape": shape,
        "datatype": datatype,
        "bitpix": bitpix,
        "pixdim": pixdim,
        "vox_offset": int(vox_offset),
        "scl_slope": scl_slope,
        "scl_inter": scl_inter,
        "descrip": hdr[148:228].split(b"\x00")[0].decode("latin-1"),
    }


def read_nifti(path):
    """Load a NIfTI-1 volume.

    Returns ``(volume, spacing, meta)``. Intensity scaling is applied only when
    the header carries a slope other than 0/1 or a nonzero intercept.
    """
    raw = _open_bytes(path)
    meta = parse_header(raw[:HEADER_SIZE], path)
    dtype = np.dtype(meta["endian"] + DTYPES[meta["datatype"]])
    count = int(np.prod(meta["shape"]))
    start = max(meta["vox_offset"], HEADER_SIZE)
    need = start + count * dtype.itemsize
    if len(raw) < need:
        raise NiftiTruncatedError(f"{path}: payload has {len(raw) - start} bytes, expected {count * dtype.itemsize}")
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=start)
    vol = flat.reshape(meta["shape"], order="F")
    vol = np.ascontiguousarray(vol.astype(dtype.newbyteorder("="), copy=False))
    slope, inter = meta["scl_slope"], meta["scl_inter"]
    if (slope not in (0.0, 1.0) and np.isfinite(slope)) or (inter != 0.0 and np.isfinite(inter)):
        vol = vol.astype(np.float64) * (slope if slope else 1.0) + inter
    ndim = len(meta["shape"])
    spacing = tuple(float(p) for p in meta["pixdim"][1:min(ndim, 3) + 1])
    return vol, spacing, meta


def build_header(shape, spacing, datatype, endian="<", descrip=b"hnfnet"):
    """Serialize a NIfTI-1 header plus the 4-byte empty extension block."""
    if not 1 <= len(shape) <= 7:
        raise NiftiHeaderError(f"cannot write a {len(shape)}-D volume")
    hdr = bytearray(VOX_OFFSET)
    dim = [len(shape)] + list(shape) + [1] * (7 - len(shape))
    pixdim = [1.0] + list(spacing) + [1.0] * (7 - len(spacing))
    struct.pack_into(endian + "i", hdr, 0, HEADER_SIZE)
    hdr[38] = ord("r")
    struct.pack_into(endian + "8h", hdr, 40, *dim)
    bitpix = np.dtype(DTYPES[datatype]).itemsize * 8
    struct.pack_into(endian + "2h", hdr, 70, datatype, bitpix)
    struct.pack_into(endian + "8f", hdr, 76, *pixdim)
    struct.pack_into(endian + "3f", hdr, 108, float(VOX_OFFSET), 1.0, 0.0)
    hdr[123] = 2  # xyzt_units: mm
    hdr[148:148 + len(descrip[:79])] = descrip[:79]
    # qform: scaled identity
    struct.pack_into(endian + "2h", hdr, 252, 1, 1)
    srow = np.zeros((3, 4), dtype=np.float32)
    for a, s in enumerate(list(spacing)[:3]):
        srow[a, a] = s
    struct.pack_into(endian + "12f", hdr, 280, *srow.ravel().tolist())
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr)


def write_nifti(volume, spacing, path, kind="image"):
    """Write ``volume`` as little-endian f32 (``kind="image"``) or u8 (``kind="label"``).

    Other numpy dtypes can be forced with ``kind="native"`` when they are supported.
    """
    volume = np.asarray(volume)
    if kind == "image":
        volume = volume.astype("<f4", copy=False)
    elif kind == "label":
        if volume.size and (volume.min() < 0 or volume.max() > 255):
            raise NiftiDtypeError("label values must fit in u8")
        volume = volume.astype("u1", copy=False)
    elif kind != "native":
        raise ValueError(f"kind must be 'image', 'label' or 'native', got {kind!r}")
    code = CODES.get(volume.dtype.newbyteorder("=").str[1:])
    if code is None:
        raise NiftiDtypeError(f"unsupported dtype {volume.dtype}")
    volume = volume.astype(volume.dtype.newbyteorder("<"), copy=False)
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) < min(volume.ndim, 3):
        spacing = spacing + (1.0,) * (min(volume.ndim, 3) - len(spacing))
    payload = build_header(volume.shape, spacing, code) + volume.tobytes(order="F")
    path = Path(path)
    if path.suffix == ".gz":
        payload = gzip.compress(payload, compresslevel=6, mtime=0)
    path.write_bytes(payload)
    return path
