"""Shared forward-pass machinery and the PHW1 weight container.

Convolutions run channels-last on (S, S, C) arrays with zero padding and
stride 1; kernels are stored (out, in, kh, kw).  The PHW1 container holds a
branch tag (0 = classification, 1 = localization), the block count and input
channel width, and a sequence of shape-tagged float32 arrays::

    b"PHW1" | u8 branch | u32 block_count | u32 in_channels | u32 n_arrays
    | per array: u32 ndim, ndim * u32 dims, float32 payload
"""

from __future__ import annotations

import math
import struct

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import CorruptFileError, FormatError, ValidationError

PHW_MAGIC = b"PHW1"
BRANCH_CLS = 0
BRANCH_LOC = 1


def sigmoid(x):
    """Numerically stable elementwise logistic function."""
    x = np.asarray(x, dtype=np.float64)
    t = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))


def softmax(x):
    """Softmax over all entries of x (any shape), summing to 1."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max())
    return e / e.sum()


def conv2d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Same-size 2-D convolution: (S, S, Cin) -> (S, S, Cout), zero padded."""
    if x.ndim != 3:
        raise ValidationError(f"conv input must be (S, S, C), got shape {x.shape}")
    if kernel.ndim != 4 or kernel.shape[1] != x.shape[2]:
        raise ValidationError(
            f"kernel {kernel.shape} does not accept {x.shape[2]} input channels"
        )
    out_ch, _, kh, kw = kernel.shape
    if bias.shape != (out_ch,):
        raise ValidationError(f"bias shape {bias.shape} does not match {out_ch} outputs")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValidationError("kernel extents must be odd for same-size padding")
    ph, pw = kh // 2, kw // 2
    padded = np.pad(x.astype(np.float64), ((ph, ph), (pw, pw), (0, 0)))
    windows = sliding_window_view(padded, (kh, kw), axis=(0, 1))  # (S, S, Cin, kh, kw)
    return np.einsum("ijckl,ockl->ijo", windows, kernel, optimize=True) + bias


def fan_in_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def write_weight_container(path, branch: int, block_count: int, in_channels: int, arrays) -> None:
    parts = [PHW_MAGIC, struct.pack("<B3I", branch, block_count, in_channels, len(arrays))]
    for arr in arrays:
        arr = np.asarray(arr, dtype=np.float64)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_weight_container(path):
    """Returns (branch, block_count, in_channels, [float32 arrays])."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != PHW_MAGIC:
        raise FormatError(f"{path}: expected magic {PHW_MAGIC!r}, got {blob[:4]!r}")
    if len(blob) < 17:
        raise CorruptFileError(f"{path}: truncated header ({len(blob)} bytes)")
    branch, block_count, in_channels, n_arrays = struct.unpack_from("<B3I", blob, 4)
    pos = 17
    arrays = []
    for _ in range(n_arrays):
        if pos + 4 > len(blob):
            raise CorruptFileError(f"{path}: truncated array table")
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if ndim > 8 or pos + 4 * ndim > len(blob):
            raise CorruptFileError(f"{path}: implausible array rank {ndim}")
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        if pos + 4 * count > len(blob):
            raise CorruptFileError(f"{path}: truncated array payload")
        arrays.append(np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape))
        pos += 4 * count
    if pos != len(blob):
        raise CorruptFileError(f"{path}: {len(blob) - pos} trailing bytes")
    return branch, block_count, in_channels, arrays
