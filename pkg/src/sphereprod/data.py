"""Binary image datasets: IDX files, raw uint8 matrices, static binarisation,
synthetic blobs and deterministic batching."""

import gzip
import os
import struct
from dataclasses import dataclass, replace

import numpy as np

STATIC_BINARIZATION_SEED = 1337


class IdxError(ValueError):
    """Malformed IDX file; ``offset`` is the byte where the problem was found."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class BadMagicError(IdxError):
    pass


class TruncatedError(IdxError):
    pass


class DimensionOverflowError(IdxError):
    pass


class DataError(ValueError):
    pass


_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_MAX_ELEMENTS = 2**31


@dataclass(frozen=True)
class BinaryImageDataset:
    images: np.ndarray  # (N, h*w) uint8 of 0/1
    height: int
    width: int
    split: str = "all"

    def __post_init__(self):
        if self.images.ndim != 2 or self.images.shape[1] != self.height * self.width:
            raise DataError(
                f"images of shape {self.images.shape} do not match {self.height}x{self.width}"
            )
        if np.any(self.images > 1):
            raise DataError("dataset entries must be exactly 0 or 1")

    def __len__(self):
        return self.images.shape[0]

    @property
    def dim(self):
        return self.images.shape[1]


def _read_bytes(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    with opener(path, "rb") as fh:
        return fh.read()


def load_idx(path):
    """Read an IDX file.

    Image files (magic 0x00000803) come back as an ``(N, rows*cols)`` float
    matrix scaled to [0, 1] plus ``(rows, cols)``. Label files (0x00000801)
    come back as an integer vector and ``()``. Gzipped files are detected
    from their header.
    """
    data = _read_bytes(path)
    if len(data) < 4:
        raise TruncatedError(f"need 4 magic bytes, file has {len(data)}", len(data))
    zero, dtype_code, ndim = struct.unpack(">HBB", data[:4])
    magic = int.from_bytes(data[:4], "big")
    if zero != 0 or dtype_code not in _IDX_TYPES or magic not in (0x00000803, 0x00000801):
        raise BadMagicError(f"bad IDX magic 0x{magic:08x}", 0)
    dtype = _IDX_TYPES[dtype_code]
    header_end = 4 + 4 * ndim
    if len(data) < header_end:
        raise TruncatedError("header ends early", len(data))
    dims = struct.unpack(f">{ndim}I", data[4:header_end])
    total = 1
    for i, d in enumerate(dims):
        total *= d
        if total > _MAX_ELEMENTS:
            raise DimensionOverflowError(f"element count exceeds {_MAX_ELEMENTS}", 4 + 4 * i)
    need = header_end + total * dtype.itemsize
    if len(data) < need:
        raise TruncatedError(f"expected {need} bytes, file has {len(data)}", len(data))
    arr = np.frombuffer(data, dtype=dtype, count=total, offset=header_end)
    if magic == 0x00000801:
        return arr.astype(np.int64), ()
    arr = arr.reshape(dims[0], -1).astype(np.float64)
    if dtype_code == 0x08:
        arr = arr / 255.0
    return arr, tuple(dims[1:])


def load_raw_matrix(path):
    """Read ``<name>.u8`` with its ``<name>.meta`` sidecar holding ``n h w``.

    Entries already in {0, 1} are returned as-is; anything else is treated
    as 8-bit intensity and scaled by 1/255.
    """
    base = path[:-3] if path.endswith(".u8") else path
    meta_path = base + ".meta"
    if not os.path.exists(meta_path):
        raise DataError(f"missing sidecar {meta_path}")
    with open(meta_path) as fh:
        fields = fh.read().split()
    try:
        n, h, w = (int(f) for f in fields[:3])
    except ValueError as exc:
        raise DataError(f"{meta_path}: expected 'n h w'") from exc
    if len(fields) != 3:
        raise DataError(f"{meta_path}: expected 'n h w'")
    raw = np.fromfile(base + ".u8", dtype=np.uint8)
    if raw.size != n * h * w:
        raise DataError(f"{base}.u8 has {raw.size} bytes, sidecar says {n * h * w}")
    raw = raw.reshape(n, h * w)
    if raw.max(initial=0) <= 1:
        return raw.astype(np.float64), (h, w)
    return raw.astype(np.float64) / 255.0, (h, w)


def binarize_static(images, shape, seed=STATIC_BINARIZATION_SEED, split="all"):
    """One fixed Bernoulli draw per pixel with probability = intensity."""
    images = np.asarray(images, dtype=float)
    if np.any(images < 0.0) or np.any(images > 1.0) or np.isnan(images).any():
        raise DataError("intensities must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    bits = (rng.random(images.shape) < images).astype(np.uint8)
    h, w = shape
    return BinaryImageDataset(bits, h, w, split)


def synthetic_blobs(n, h, w, seed, objects=1):
    """Random filled rectangles and plus-shaped crosses.

    Each image holds ``objects`` shapes (unioned). Factors of variation per
    shape: kind, centre row/column, half-height and half-width.
    """
    if min(n, h, w, objects) < 1:
        raise ValueError("n, h, w and objects must be >= 1")
    rng = np.random.default_rng(seed)
    images = np.zeros((n, h, w), dtype=np.uint8)
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    size = (n, objects)
    kind = rng.integers(0, 2, size)
    half_h = rng.integers(1, max(2, h // 3) + 1, size)
    half_w = rng.integers(1, max(2, w // 3) + 1, size)
    cy = rng.integers(0, h, size)
    cx = rng.integers(0, w, size)
    for i in range(n):
        for j in range(objects):
            in_r = np.abs(rows - cy[i, j]) <= half_h[i, j]
            in_c = np.abs(cols - cx[i, j]) <= half_w[i, j]
            if kind[i, j] == 0:
                mask = in_r & in_c
            else:
                bar = min(half_h[i, j], half_w[i, j]) // 3
                mask = (in_r & (np.abs(cols - cx[i, j]) <= bar)) | (
                    in_c & (np.abs(rows - cy[i, j]) <= bar)
                )
            images[i] |= mask.astype(np.uint8)
    return BinaryImageDataset(images.reshape(n, h * w), h, w, "synthetic")


def train_val_split(dataset, seed, val_fraction=0.1):
    """Seeded permutation split; validation gets ``round(N * val_fraction)``
    items (at least one when N > 1)."""
    n = len(dataset)
    perm = np.random.default_rng([seed, 0]).permutation(n)
    n_val = int(round(n * val_fraction))
    if n > 1:
        n_val = min(max(n_val, 1), n - 1)
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])
    train = replace(dataset, images=dataset.images[train_idx], split="train")
    val = replace(dataset, images=dataset.images[val_idx], split="val")
    return train, val


def batches(data, batch_size, seed, epoch):
    """Yield shuffled minibatches; the order depends only on (seed, epoch).

    ``data`` may be a dataset or an array; the final short batch is kept.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    arr = data.images if isinstance(data, BinaryImageDataset) else np.asarray(data)
    perm = np.random.default_rng([seed, 1, epoch]).permutation(arr.shape[0])
    for start in range(0, arr.shape[0], batch_size):
        yield arr[perm[start : start + batch_size]]


def load_dataset(source, synthetic_seed=0):
    """Resolve a ``--data`` argument.

    ``synthetic`` or ``synthetic:N:H:W[:OBJECTS]`` renders blobs; ``*.u8``
    reads a raw matrix; anything else is an IDX image file (statically
    binarised).
    """
    if source == "synthetic" or source.startswith("synthetic:"):
        parts = source.split(":")[1:]
        if parts and len(parts) not in (3, 4):
            raise DataError(f"expected synthetic:N:H:W[:OBJECTS], got {source!r}")
        try:
            vals = [int(p) for p in parts]
        except ValueError as exc:
            raise DataError(f"non-integer field in {source!r}") from exc
        n, h, w, objects = (vals + [1])[:4] if vals else (2000, 16, 16, 1)
        if min(n, h, w, objects) < 1:
            raise DataError(f"synthetic fields must be >= 1 in {source!r}")
        return synthetic_blobs(n, h, w, synthetic_seed, objects=objects)
    if not os.path.exists(source):
        raise DataError(f"no such file: {source}")
    if source.endswith(".u8"):
        images, shape = load_raw_matrix(source)
    else:
        images, shape = load_idx(source)
        if not shape:
            raise DataError(f"{source} is an IDX label file, not images")
    return binarize_static(images, shape)
