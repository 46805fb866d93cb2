"""Small dense-network toolkit with hand-written backward passes.

Parameters are stored in float32 (the checkpoint format) and every matmul
and reduction runs in float64. Pass ``dtype=np.float64`` for exact
finite-difference checks.
"""

import struct

import numpy as np


class DivergenceError(RuntimeError):
    """Non-finite values appeared in a forward or backward pass."""


class CheckpointError(ValueError):
    pass


def check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise DivergenceError(f"non-finite values in {name}")
    return arr


class Dense:
    """y = x W + b with Kaiming-uniform fan-in initialisation."""

    def __init__(self, n_in, n_out, rng=None, dtype=np.float32, name="dense"):
        self.name = name
        if rng is None:
            self.W = np.zeros((n_in, n_out), dtype=dtype)
        else:
            bound = np.sqrt(6.0 / n_in)
            self.W = rng.uniform(-bound, bound, size=(n_in, n_out)).astype(dtype)
        self.b = np.zeros(n_out, dtype=dtype)
        self.gW = np.zeros((n_in, n_out))
        self.gb = np.zeros(n_out)

    @property
    def shape(self):
        return self.W.shape

    def forward(self, x):
        if x.shape[-1] != self.W.shape[0]:
            raise ValueError(f"{self.name}: input width {x.shape[-1]} != {self.W.shape[0]}")
        return x @ self.W.astype(np.float64) + self.b.astype(np.float64)

    def backward(self, x, dy):
        """Accumulate parameter gradients and return dL/dx."""
        if dy.shape[-1] != self.W.shape[1]:
            raise ValueError(f"{self.name}: upstream width {dy.shape[-1]} != {self.W.shape[1]}")
        x2 = x.reshape(-1, x.shape[-1])
        dy2 = dy.reshape(-1, dy.shape[-1])
        self.gW += x2.T @ dy2
        self.gb += dy2.sum(axis=0)
        return dy @ self.W.T.astype(np.float64)

    def zero_grad(self):
        self.gW[...] = 0.0
        self.gb[...] = 0.0

    def params(self):
        return [(f"{self.name}.W", self.W, self.gW), (f"{self.name}.b", self.b, self.gb)]


def dense_forward(layer, x):
    return layer.forward(x)


def dense_backward(layer, x, dy):
    return layer.backward(x, dy)


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(x, dy):
    # derivative at exactly 0 taken as 0
    return np.where(x > 0.0, dy, 0.0)


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def bernoulli_nll_logits(logits, targets):
    """Per-example Bernoulli negative log-likelihood and d loss / d logits.

    Uses max(l, 0) - t*l + log1p(exp(-|l|)), which is stable for any logit.
    """
    logits = np.asarray(logits, dtype=float)
    targets = np.asarray(targets)
    if logits.shape != targets.shape:
        raise ValueError(f"logits {logits.shape} vs targets {targets.shape}")
    t = targets.astype(float)
    if np.any((t != 0.0) & (t != 1.0)):
        raise ValueError("targets must be 0 or 1")
    per_pixel = np.maximum(logits, 0.0) - t * logits + np.log1p(np.exp(-np.abs(logits)))
    return per_pixel.sum(axis=-1), sigmoid(logits) - t


class Adam:
    """Bias-corrected Adam over a list of ``(name, param, grad)`` triples.

    Parameters are updated in place; moments are kept in float64.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros(p.shape) for _, p, _ in self.params]
        self.v = [np.zeros(p.shape) for _, p, _ in self.params]

    def step(self):
        for name, _, g in self.params:
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient for parameter {name}")
        self.step_count += 1
        c1 = 1.0 - self.beta1**self.step_count
        c2 = 1.0 - self.beta2**self.step_count
        for (_, p, g), m, v in zip(self.params, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p[...] = (p.astype(np.float64) - update).astype(p.dtype)


def adam_step(optimizer):
    optimizer.step()


# --------------------------------------------------------------------------
# checkpoint container
#
#   magic     8 bytes  b"SPHPVAE\0"
#   version   u32
#   header    u32 length + UTF-8 "key=value" lines
#   count     u32
#   per array: u32 name length, name, u32 ndim, ndim x u32 dims,
#              little-endian float32 data (row-major)

MAGIC = b"SPHPVAE\x00"
VERSION = 1


def save_checkpoint(path, meta, arrays):
    header = "".join(f"{k}={meta[k]}\n" for k in sorted(meta)).encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(header)), header]
    chunks.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path):
    """Return ``(meta, arrays)`` with ``arrays`` a list of ``(name, float32 array)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        out = data[pos : pos + n]
        pos += n
        return out

    if take(8) != MAGIC:
        raise CheckpointError(f"{path}: not a sphereprod checkpoint")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<I", take(4))
    meta = {}
    for line in take(hlen).decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        meta[key] = value
    (count,) = struct.unpack("<I", take(4))
    arrays = []
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
        arrays.append((name, arr))
    if pos != len(data):
        raise CheckpointError(f"trailing bytes after offset {pos}")
    return meta, arrays
