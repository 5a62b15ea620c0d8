"""
TensorFile binary format.

Layout (all header integers unsigned 32-bit little-endian)::

    magic    8 bytes  b'M3DMTNSR'
    version  u32      1
    ndim     u32
    dims     ndim x u32
    dtype    u32      0 = float32 little-endian, 1 = float64 little-endian
    payload  prod(dims) values, row-major
"""
import os

import numpy as np

from m3dm_lite.errors import FormatError, SizeMismatch, BadArity, DataError

MAGIC = b'M3DMTNSR'
VERSION = 1
FLOAT32, FLOAT64 = 0, 1
DTYPES = {FLOAT32: np.dtype('<f4'), FLOAT64: np.dtype('<f8')}
_U32 = np.dtype('<u4')


def save_tensor(path, dims, values, dtype_tag=FLOAT32):
    """
    Writes `values` as a tensor of shape `dims`.

    :param path: str;
    :param dims: Tuple[int]; non-empty shape
    :param values: array-like; anything numpy can flatten to prod(dims) float values
    :param dtype_tag: int; payload type, `FLOAT64` for artifacts that have to be restored bit-exactly
    :return: None
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) == 0 or any(d < 0 for d in dims):
        raise BadArity(f'Invalid tensor shape {dims}.')
    if dtype_tag not in DTYPES:
        raise FormatError(f'Unknown dtype tag {dtype_tag}.')
    payload = np.ascontiguousarray(values, dtype=DTYPES[dtype_tag]).reshape(-1)
    if payload.size != int(np.prod(dims)):
        raise SizeMismatch(f'{payload.size} values do not fill a tensor of shape {dims}.')

    header = np.array((VERSION, len(dims)) + dims + (dtype_tag, ), dtype=_U32)
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(MAGIC)
        f.write(header.tobytes())
        f.write(payload.tobytes())


def load_tensor(path):
    """
    Reads tensor file.

    :param path: str;
    :return: Tuple[Tuple[int], numpy.array]; shape and flat payload in its stored dtype
    """
    try:
        with open(path, 'rb') as f:
            raw = f.read()
    except FileNotFoundError:
        raise DataError(f'Tensor file {path} does not exist.')

    if raw[:8] != MAGIC:
        raise FormatError(f'{path}: bad magic {raw[:8]!r}.')
    if len(raw) < 16:
        raise FormatError(f'{path}: truncated header.')
    version, ndim = np.frombuffer(raw, dtype=_U32, count=2, offset=8)
    if version != VERSION:
        raise FormatError(f'{path}: unsupported version {version}.')
    header_end = 16 + 4 * (int(ndim) + 1)
    if ndim == 0 or len(raw) < header_end:
        raise FormatError(f'{path}: truncated header.')

    dims = tuple(int(d) for d in np.frombuffer(raw, dtype=_U32, count=int(ndim), offset=16))
    dtype_tag = int(np.frombuffer(raw, dtype=_U32, count=1, offset=header_end - 4)[0])
    if dtype_tag not in DTYPES:
        raise FormatError(f'{path}: unknown dtype tag {dtype_tag}.')

    expected = int(np.prod(dims)) * DTYPES[dtype_tag].itemsize
    if len(raw) - header_end != expected:
        raise SizeMismatch(f'{path}: payload has {len(raw) - header_end} bytes, header promises {expected}.')
    values = np.frombuffer(raw, dtype=DTYPES[dtype_tag], offset=header_end).copy()
    return dims, values


def save_array(path, arr, dtype_tag=FLOAT32):
    arr = np.asarray(arr)
    save_tensor(path, arr.shape, arr, dtype_tag=dtype_tag)


def load_array(path):
    dims, values = load_tensor(path)
    return values.reshape(dims)
