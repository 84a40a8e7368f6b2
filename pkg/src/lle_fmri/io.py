"""File formats: ``rawvol v1`` volumes, NIfTI-1 ingestion and dataset manifests."""
from __future__ import annotations

from dataclasses import dataclass, field
import os
from pathlib import Path
import struct

import numpy as np

from .grid import GridDims, ScanVolume

RAW_MAGIC = "rawvol v1"
PARTITIONS = ("training", "holdout")


class FormatError(ValueError):
    """Malformed file; ``offset`` is the byte position where reading failed."""

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class UnsupportedFeatureError(FormatError):
    pass


class ManifestError(ValueError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


# ---------------------------------------------------------------------------
# rawvol v1
# ---------------------------------------------------------------------------

def write_raw_volume(scan: ScanVolume, path) -> None:
    """Header line ``rawvol v1 L W H T`` then V*T little-endian float32.

    Samples are written one volume at a time, each volume in voxel-index
    order. Values are stored as float32, so only float32-representable
    data round-trips exactly.
    """
    d = scan.dims
    header = f"{RAW_MAGIC} {d.L} {d.W} {d.H} {d.T}\n".encode("ascii")
    payload = np.ascontiguousarray(scan.data.T, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def _parse_raw_header(raw: bytes, path) -> tuple[GridDims, int]:
    nl = raw.find(b"\n", 0, 256)
    if nl < 0:
        raise FormatError(f"{path}: no header line found", 0)
    try:
        parts = raw[:nl].decode("ascii").split()
    except UnicodeDecodeError:
        raise FormatError(f"{path}: header is not ASCII", 0) from None
    if parts[:2] != RAW_MAGIC.split():
        raise FormatError(f"{path}: bad magic {raw[:min(nl, 16)]!r}", 0)
    if len(parts) != 6:
        raise FormatError(f"{path}: header needs L W H T after the magic", len(RAW_MAGIC))
    try:
        dims = GridDims(*(int(p) for p in parts[2:]))
    except ValueError as exc:
        raise FormatError(f"{path}: bad header dims: {exc}", len(RAW_MAGIC)) from None
    return dims, nl + 1


def read_raw_header(path) -> GridDims:
    with open(path, "rb") as fh:
        head = fh.read(256)
    return _parse_raw_header(head, path)[0]


def read_raw_volume(path, subject_id: str = "", label=None) -> ScanVolume:
    with open(path, "rb") as fh:
        raw = fh.read()
    dims, start = _parse_raw_header(raw, path)
    need = 4 * dims.V * dims.T
    have = len(raw) - start
    if have < need:
        raise FormatError(
            f"{path}: truncated payload, expected {need} bytes ({dims.V * dims.T} floats) "
            f"but found {have}", len(raw))
    if have > need:
        raise FormatError(f"{path}: {have - need} trailing bytes after payload", start + need)
    samples = np.frombuffer(raw, dtype="<f4", count=dims.V * dims.T, offset=start)
    data = samples.reshape(dims.T, dims.V).T.astype(np.float64)
    return ScanVolume(dims, data, subject_id, label)


# ---------------------------------------------------------------------------
# NIfTI-1 (single file, uncompressed)
# ---------------------------------------------------------------------------

NIFTI_HEADER_SIZE = 348
NIFTI_DTYPES = {4: "i2", 16: "f4", 64: "f8"}
_DTYPE_CODES = {v: k for k, v in NIFTI_DTYPES.items()}


def _nifti_byte_order(header: bytes) -> str:
    for order in ("<", ">"):
        (dim0,) = struct.unpack_from(order + "h", header, 40)
        if 1 <= dim0 <= 7:
            return order
    raise FormatError("cannot determine byte order: dim[0] outside [1, 7] either way", 40)


def read_nifti1(path, subject_id: str = "", label=None) -> ScanVolume:
    """Read an uncompressed ``.nii`` file with up to four dimensions.

    Integer payloads are scaled by ``scl_slope`` and ``scl_inter`` whenever
    the slope is non-zero.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raise UnsupportedFeatureError(f"{path}: gzip-compressed NIfTI is not supported", 0)
    if len(raw) < NIFTI_HEADER_SIZE:
        raise FormatError(f"{path}: file shorter than a NIfTI-1 header", len(raw))
    order = _nifti_byte_order(raw)
    (sizeof_hdr,) = struct.unpack_from(order + "i", raw, 0)
    if sizeof_hdr != NIFTI_HEADER_SIZE:
        raise FormatError(f"{path}: sizeof_hdr is {sizeof_hdr}, expected 348", 0)
    magic = raw[344:348]
    if magic != b"n+1\x00":
        raise UnsupportedFeatureError(
            f"{path}: magic {magic!r} is not single-file NIfTI-1 (n+1)", 344)
    dim = struct.unpack_from(order + "8h", raw, 40)
    ndim = dim[0]
    if ndim > 4:
        raise UnsupportedFeatureError(f"{path}: {ndim} dimensions, at most 4 supported", 40)
    shape = [max(int(n), 1) for n in dim[1:ndim + 1]] + [1] * (4 - ndim)
    (datatype,) = struct.unpack_from(order + "h", raw, 70)
    if datatype not in NIFTI_DTYPES:
        raise UnsupportedFeatureError(f"{path}: datatype code {datatype} not supported", 70)
    (vox_offset,) = struct.unpack_from(order + "f", raw, 108)
    slope, inter = struct.unpack_from(order + "2f", raw, 112)
    start = int(vox_offset)
    if start < NIFTI_HEADER_SIZE:
        raise FormatError(f"{path}: vox_offset {vox_offset} inside the header", 108)
    dtype = np.dtype(NIFTI_DTYPES[datatype]).newbyteorder(order)
    count = int(np.prod(shape))
    need = count * dtype.itemsize
    if len(raw) - start < need:
        raise FormatError(
            f"{path}: truncated payload, expected {need} bytes after offset {start}", len(raw))
    values = np.frombuffer(raw, dtype=dtype, count=count, offset=start).astype(np.float64)
    if slope != 0.0:
        values = values * float(slope) + float(inter)
    L, W, H, T = shape
    dims = GridDims(L, W, H, T)
    # NIfTI stores x fastest, then y, z and t: Fortran order over (x, y, z, t)
    data = values.reshape(dims.V, T, order="F")
    return ScanVolume(dims, data, subject_id, label)


def write_nifti1(scan: ScanVolume, path, dtype: str = "f4", byte_order: str = "<",
                 slope: float = 0.0, inter: float = 0.0) -> None:
    """Write a minimal single-file NIfTI-1 (used to build fixtures).

    Stored values are ``scan.data`` cast to ``dtype`` as given; when a slope
    is supplied the reader will apply it on the way back.
    """
    if dtype not in _DTYPE_CODES:
        raise UnsupportedFeatureError(f"datatype {dtype!r} not supported")
    d = scan.dims
    dt = np.dtype(dtype).newbyteorder(byte_order)
    hdr = bytearray(NIFTI_HEADER_SIZE)
    struct.pack_into(byte_order + "i", hdr, 0, NIFTI_HEADER_SIZE)
    struct.pack_into(byte_order + "8h", hdr, 40, 4, d.L, d.W, d.H, d.T, 1, 1, 1)
    struct.pack_into(byte_order + "2h", hdr, 70, _DTYPE_CODES[dtype], 8 * dt.itemsize)
    struct.pack_into(byte_order + "8f", hdr, 76, 1, 1, 1, 1, 1, 0, 0, 0)
    struct.pack_into(byte_order + "3f", hdr, 108, 352.0, slope, inter)
    hdr[344:348] = b"n+1\x00"
    payload = np.asarray(scan.data).reshape(-1, order="F").astype(dt).tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(hdr))
        fh.write(b"\x00" * 4)  # extension flag
        fh.write(payload)


def read_volume(path, subject_id: str = "", label=None) -> ScanVolume:
    """Dispatch on the file name: ``.nii`` goes to NIfTI, anything else to rawvol."""
    name = str(path)
    if name.endswith(".nii.gz"):
        raise UnsupportedFeatureError(f"{path}: gzip-compressed NIfTI is not supported")
    if name.endswith(".nii"):
        return read_nifti1(path, subject_id, label)
    return read_raw_volume(path, subject_id, label)


def read_volume_dims(path) -> GridDims:
    name = str(path)
    if name.endswith(".nii"):
        return read_nifti1(path).dims
    return read_raw_header(path)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass
class SubjectEntry:
    subject_id: str
    path: Path
    label: int
    partition: str = "training"
    line: int = 0


@dataclass
class DatasetManifest:
    name: str
    dims: GridDims
    subjects: list = field(default_factory=list)
    r: int | None = None
    d_grid: list | None = None
    base_dir: Path = Path(".")

    def partition(self, which: str) -> list:
        return [s for s in self.subjects if s.partition == which]

    @property
    def counts(self) -> tuple[int, int]:
        return len(self.partition("training")), len(self.partition("holdout"))

    def load(self, which: str | None = None) -> list:
        entries = self.subjects if which is None else self.partition(which)
        scans = []
        for e in entries:
            scan = read_volume(e.path, e.subject_id, e.label)
            if scan.dims != self.dims:
                raise ManifestError(
                    f"subject {e.subject_id}: file dims {scan.dims} != declared {self.dims}", e.line)
            scans.append(scan)
        return scans

    def to_text(self) -> str:
        d = self.dims
        lines = [f"dataset={self.name}", f"dims={d.L} {d.W} {d.H} {d.T}"]
        if self.r is not None:
            lines.append(f"r={self.r}")
        if self.d_grid:
            lines.append("d_grid=" + ",".join(str(g) for g in self.d_grid))
        for s in self.subjects:
            try:
                rel = Path(os.path.relpath(s.path, self.base_dir))
            except ValueError:
                rel = s.path
            lines += ["", f"subject={s.subject_id}", f"file={rel.as_posix()}",
                      f"label={s.label}", f"partition={s.partition}"]
        return "\n".join(lines) + "\n"


def _split_line(raw: str, lineno: int):
    if "=" not in raw:
        raise ManifestError(f"expected key=value, got {raw!r}", lineno)
    key, value = raw.split("=", 1)
    return key.strip(), value.strip()


def _int_list(value: str, key: str, lineno: int) -> list[int]:
    try:
        return [int(v) for v in value.replace(",", " ").split()]
    except ValueError:
        raise ManifestError(f"{key} must be a list of integers, got {value!r}", lineno) from None


def parse_manifest(text: str, base_dir=".", check_files: bool = True) -> DatasetManifest:
    """Parse the line-oriented manifest format.

    Header keys (``dataset``, ``dims``, ``r``, ``d_grid``) come first; each
    ``subject=<id>`` line opens a block that takes ``file``, ``label`` and
    ``partition`` keys. Blank lines and ``#`` comments are ignored. File
    paths are resolved relative to ``base_dir``.
    """
    base = Path(base_dir)
    header: dict = {}
    subjects: list[SubjectEntry] = []
    seen: dict[str, int] = {}
    current = None
    header_keys = ("dataset", "dims", "r", "d_grid")
    subject_keys = ("file", "label", "partition")

    def close(block):
        if block is None:
            return
        sid, line, fields = block
        if "label" not in fields:
            raise ManifestError(f"subject {sid!r} has no label", line)
        if "file" not in fields:
            raise ManifestError(f"subject {sid!r} has no file", line)
        subjects.append(SubjectEntry(sid, fields["file"][0], fields["label"][0],
                                     fields.get("partition", ("training",))[0], line))

    for lineno, raw in enumerate(text.splitlines(), start=1):
        raw = raw.strip()
        if not raw or raw.startswith("#"):
            continue
        key, value = _split_line(raw, lineno)
        if key == "subject":
            close(current)
            if not value:
                raise ManifestError("empty subject id", lineno)
            if value in seen:
                raise ManifestError(
                    f"duplicate subject id {value!r} (first at line {seen[value]})", lineno)
            seen[value] = lineno
            current = (value, lineno, {})
            continue
        if current is None:
            if key not in header_keys:
                raise ManifestError(f"unknown header key {key!r}", lineno)
            if key in header:
                raise ManifestError(f"header key {key!r} given twice", lineno)
            header[key] = (value, lineno)
            continue
        if key not in subject_keys:
            raise ManifestError(f"unknown subject key {key!r}", lineno)
        fields = current[2]
        if key in fields:
            raise ManifestError(f"subject {current[0]!r}: key {key!r} given twice", lineno)
        if key == "label":
            if value not in ("0", "1"):
                raise ManifestError(f"label must be 0 or 1, got {value!r}", lineno)
            fields[key] = (int(value), lineno)
        elif key == "partition":
            if value not in PARTITIONS:
                raise ManifestError(f"partition must be one of {PARTITIONS}, got {value!r}", lineno)
            fields[key] = (value, lineno)
        else:
            fields[key] = (base / value, lineno)
    close(current)

    if "dims" not in header:
        raise ManifestError("missing dims header (dims=L W H T)")
    dvals = _int_list(header["dims"][0], "dims", header["dims"][1])
    if len(dvals) != 4:
        raise ManifestError("dims needs four integers L W H T", header["dims"][1])
    try:
        dims = GridDims(*dvals)
    except ValueError as exc:
        raise ManifestError(str(exc), header["dims"][1]) from None
    r = None
    if "r" in header:
        r = _int_list(header["r"][0], "r", header["r"][1])
        if len(r) != 1 or r[0] < 1:
            raise ManifestError("r must be one positive integer", header["r"][1])
        r = r[0]
    grid = None
    if "d_grid" in header:
        grid = _int_list(header["d_grid"][0], "d_grid", header["d_grid"][1])
        if not grid or any(not 1 <= g <= dims.T for g in grid):
            raise ManifestError(f"d_grid entries must lie in [1, {dims.T}]", header["d_grid"][1])
    if not subjects:
        raise ManifestError("manifest lists no subjects")
    training = [s for s in subjects if s.partition == "training"]
    if len({s.label for s in training}) < 2:
        raise ManifestError("training partition must contain both classes")

    if check_files:
        for s in subjects:
            if not s.path.is_file():
                raise ManifestError(f"subject {s.subject_id!r}: file {s.path} not found", s.line)
            try:
                fdims = read_volume_dims(s.path)
            except FormatError as exc:
                raise ManifestError(f"subject {s.subject_id!r}: {exc}", s.line) from None
            if fdims != dims:
                raise ManifestError(
                    f"subject {s.subject_id!r}: file dims {fdims} do not match declared {dims}",
                    s.line)
    name = header.get("dataset", ("dataset", 0))[0]
    return DatasetManifest(name, dims, subjects, r, grid, base)


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    return parse_manifest(path.read_text(encoding="utf-8"), path.parent, check_files)
