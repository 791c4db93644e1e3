"""Binary file formats for range images, overlap tables, checkpoints and indexes.

All formats start with four magic bytes and a one-byte version, followed by
little-endian payloads:

- ``SQRI`` range image: u32 h, u32 w, h*w f32 row-major, invalid = -1.0
- ``SQOT`` overlap table: u32 n, f32 delta, f32 threshold, n*n f32 row-major
- ``SQWT`` checkpoint: u32 count, then per tensor u16 name length, UTF-8 name,
  u8 rank, rank * u32 dims, f32 data
- ``SQIX`` descriptor index: u32 count, u32 dim, count * (u64 id, dim * f32)
"""

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .exceptions import DataError
from .models import OverlapTable, RangeImage

VERSION = 1

MAGIC_RANGE_IMAGE = b'SQRI'
MAGIC_OVERLAP = b'SQOT'
MAGIC_WEIGHTS = b'SQWT'
MAGIC_INDEX = b'SQIX'


def _read_bytes(path: Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from None


def _write_bytes(path: Path, payload: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        path.write_bytes(payload)
    except OSError as e:
        raise DataError(f"cannot write {path}: {e}") from None


def _check_header(data: bytes, magic: bytes, path: Path) -> int:
    """Validate magic and version, return the payload offset."""
    if len(data) < 5 or data[:4] != magic:
        raise DataError(f"{path} is not a {magic.decode()} file")
    if data[4] != VERSION:
        raise DataError(f"{path}: unsupported {magic.decode()} version {data[4]}")
    return 5


def _take(data: bytes, offset: int, size: int, path: Path) -> bytes:
    if offset + size > len(data):
        raise DataError(f"{path}: truncated at byte offset {offset}")
    return data[offset:offset + size]


# ----------------------------------------------------------------------------
# Range images
# ----------------------------------------------------------------------------

def encode_range_image(image: RangeImage) -> bytes:
    h, w = image.shape
    grid = np.where(image.mask, image.grid, -1.0).astype('<f4')
    return MAGIC_RANGE_IMAGE + struct.pack('<BII', VERSION, h, w) + grid.tobytes()


def decode_range_image(data: bytes, path: Path = Path('<bytes>')) -> RangeImage:
    offset = _check_header(data, MAGIC_RANGE_IMAGE, path)
    h, w = struct.unpack('<II', _take(data, offset, 8, path))
    offset += 8
    grid = np.frombuffer(_take(data, offset, 4 * h * w, path), dtype='<f4').reshape(h, w)
    if offset + 4 * h * w != len(data):
        raise DataError(f"{path}: {len(data) - offset - 4 * h * w} trailing bytes")
    return RangeImage.from_grid(grid.astype(np.float32))


def write_range_image(path: Path, image: RangeImage):
    _write_bytes(path, encode_range_image(image))


def read_range_image(path: Path) -> RangeImage:
    return decode_range_image(_read_bytes(path), path)


# ----------------------------------------------------------------------------
# Overlap tables
# ----------------------------------------------------------------------------

def write_overlap_table(path: Path, table: OverlapTable):
    n = len(table)
    header = MAGIC_OVERLAP + bytes([VERSION]) + struct.pack('<Iff', n, table.delta, table.pos_threshold)
    _write_bytes(path, header + table.values.astype('<f4').tobytes())


def read_overlap_table(path: Path, scan_ids: Optional[np.ndarray] = None) -> OverlapTable:
    """Load a table; the file carries no ids, so rows are 0..n-1 unless ids are given."""
    data = _read_bytes(path)
    offset = _check_header(data, MAGIC_OVERLAP, path)
    n, delta, threshold = struct.unpack('<Iff', _take(data, offset, 12, path))
    offset += 12
    values = np.frombuffer(_take(data, offset, 4 * n * n, path), dtype='<f4').reshape(n, n)
    if scan_ids is None:
        scan_ids = np.arange(n, dtype=np.int64)
    elif len(scan_ids) != n:
        raise DataError(f"{path}: table has {n} rows but {len(scan_ids)} scan ids were given")
    return OverlapTable(values=values.astype(np.float32), scan_ids=scan_ids,
                        delta=float(delta), pos_threshold=float(threshold))


# ----------------------------------------------------------------------------
# Checkpoints
# ----------------------------------------------------------------------------

def write_checkpoint(path: Path, tensors: Dict[str, np.ndarray]):
    parts = [MAGIC_WEIGHTS, bytes([VERSION]), struct.pack('<I', len(tensors))]
    for name, array in tensors.items():
        array = np.asarray(array)
        encoded = name.encode('utf-8')
        parts.append(struct.pack('<H', len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack('<B', array.ndim))
        parts.append(struct.pack(f'<{array.ndim}I', *array.shape))
        parts.append(np.ascontiguousarray(array, dtype='<f4').tobytes())
    _write_bytes(path, b''.join(parts))


def read_checkpoint(path: Path) -> 'OrderedDict[str, np.ndarray]':
    data = _read_bytes(path)
    offset = _check_header(data, MAGIC_WEIGHTS, path)
    (count,) = struct.unpack('<I', _take(data, offset, 4, path))
    offset += 4
    tensors: 'OrderedDict[str, np.ndarray]' = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack('<H', _take(data, offset, 2, path))
        offset += 2
        name = _take(data, offset, name_len, path).decode('utf-8')
        offset += name_len
        (rank,) = struct.unpack('<B', _take(data, offset, 1, path))
        offset += 1
        dims = struct.unpack(f'<{rank}I', _take(data, offset, 4 * rank, path))
        offset += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(_take(data, offset, 4 * size, path), dtype='<f4')
        offset += 4 * size
        tensors[name] = values.astype(np.float32).reshape(dims)
    return tensors


# ----------------------------------------------------------------------------
# Descriptor indexes
# ----------------------------------------------------------------------------

def write_index_rows(path: Path, ids: np.ndarray, descriptors: np.ndarray):
    count, dim = descriptors.shape
    row = np.dtype([('id', '<u8'), ('vec', '<f4', (dim,))])
    rows = np.empty(count, dtype=row)
    rows['id'] = ids
    rows['vec'] = descriptors
    header = MAGIC_INDEX + bytes([VERSION]) + struct.pack('<II', count, dim)
    _write_bytes(path, header + rows.tobytes())


def read_index_rows(path: Path) -> Tuple[np.ndarray, np.ndarray]:
    data = _read_bytes(path)
    offset = _check_header(data, MAGIC_INDEX, path)
    count, dim = struct.unpack('<II', _take(data, offset, 8, path))
    offset += 8
    row = np.dtype([('id', '<u8'), ('vec', '<f4', (dim,))])
    rows = np.frombuffer(_take(data, offset, row.itemsize * count, path), dtype=row)
    return rows['id'].astype(np.uint64), rows['vec'].astype(np.float32).reshape(count, dim)
