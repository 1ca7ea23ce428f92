"""
plaincnn Tensor Module
Dense array storage, seeded random streams, and the two kernels every layer
is built on: matrix multiply and im2col/col2im for 3x3 same-padded
convolution.

A Tensor is a numpy.ndarray. Activations are laid out [batch, channels,
height, width]. Training runs in float32; float64 is the verification mode
used by gradient checks and oracles.
"""

import numpy as np

from errors import InvalidShapeError, NumericError, ShapeMismatchError


TRAIN_DTYPE = np.float32
VERIFY_DTYPE = np.float64

# Substream ids. Keys are always (stream, epoch, index) so every derived
# seed has the same spawn-key length.
AUGMENT_STREAM = 0
DROPOUT_STREAM = 1
SHUFFLE_STREAM = 2
SPLIT_STREAM = 3
INIT_STREAM = 4

KERNEL = 3
PAD = 1


# ---------------------------------------------------------------------------
# Construction and checks
# ---------------------------------------------------------------------------

def tensor_new(shape, fill=0.0, dtype=TRAIN_DTYPE):
    """Return a tensor of the given shape with every element equal to fill."""
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise InvalidShapeError(f"Invalid shape {list(shape)}: every extent must be >= 1")
    out = np.full(shape, fill, dtype=dtype)
    check_finite(out, "tensor_new")
    return out


def check_finite(x, what="tensor"):
    """Raise NumericError if x holds a NaN or Inf."""
    arr = np.asarray(x)
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NumericError(f"{what}: {bad} non-finite value(s) in shape {list(arr.shape)}")
    return x


# ---------------------------------------------------------------------------
# Random streams (PCG64)
# ---------------------------------------------------------------------------

def make_rng(seed):
    """Root generator for a seed."""
    return np.random.Generator(np.random.PCG64(_check_seed(seed)))


def substream(seed, epoch=0, index=0, stream=AUGMENT_STREAM):
    """
    Independent generator for (seed, epoch, index) within a stream.

    Pure: the same arguments always give the same draw sequence, so work can
    be handed to any worker in any order.
    """
    ss = np.random.SeedSequence(
        _check_seed(seed), spawn_key=(int(stream), int(epoch), int(index))
    )
    return np.random.Generator(np.random.PCG64(ss))


def _check_seed(seed):
    seed = int(seed)
    if seed < 0 or seed >= 2 ** 64:
        raise ValueError(f"Seed must be a 64-bit unsigned integer, got {seed}")
    return seed


# ---------------------------------------------------------------------------
# Matrix multiply
# ---------------------------------------------------------------------------

def matmul(a, b):
    """
    [m,k] x [k,n] -> [m,n].

    float64 operands are summed as rank-1 updates over k in ascending order,
    which is bit-identical to a scalar left-to-right triple loop. float32
    goes through BLAS.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatchError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul inner extents differ: {a.shape} x {b.shape}")

    if a.dtype == np.float64 or b.dtype == np.float64:
        a = a.astype(np.float64, copy=False)
        b = b.astype(np.float64, copy=False)
        out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
        for p in range(a.shape[1]):
            out += a[:, p:p + 1] * b[p:p + 1, :]
    else:
        out = np.matmul(a, b)
    return check_finite(out, f"matmul {list(a.shape)} x {list(b.shape)}")


# ---------------------------------------------------------------------------
# im2col / col2im  (kernel 3, stride 1, pad 1)
# ---------------------------------------------------------------------------

def im2col(x):
    """
    [n,c,h,w] -> [c*9, n*h*w].

    Rows run (channel, kernel row, kernel col); columns run (n, h, w).
    Column j holds the zero-padded 3x3xc neighbourhood of output position j.
    """
    x = np.asarray(x)
    if x.ndim != 4:
        raise InvalidShapeError(f"im2col needs [n,c,h,w], got {list(x.shape)}")
    n, c, h, w = x.shape
    if min(x.shape) < 1:
        raise InvalidShapeError(f"im2col got an empty extent: {list(x.shape)}")

    padded = np.pad(x, ((0, 0), (0, 0), (PAD, PAD), (PAD, PAD)), mode="constant")
    cols = np.empty((c, KERNEL, KERNEL, n, h, w), dtype=x.dtype)
    for u in range(KERNEL):
        for v in range(KERNEL):
            cols[:, u, v] = padded[:, :, u:u + h, v:v + w].transpose(1, 0, 2, 3)
    return cols.reshape(c * KERNEL * KERNEL, n * h * w)


def col2im(cols, out_shape):
    """Scatter-add adjoint of im2col: [c*9, n*h*w] -> out_shape [n,c,h,w]."""
    cols = np.asarray(cols)
    n, c, h, w = (int(s) for s in out_shape)
    expected = (c * KERNEL * KERNEL, n * h * w)
    if cols.shape != expected:
        raise ShapeMismatchError(
            f"col2im: cols shape {list(cols.shape)} does not match {list(expected)} "
            f"for output {[n, c, h, w]}"
        )

    blocks = cols.reshape(c, KERNEL, KERNEL, n, h, w)
    padded = np.zeros((n, c, h + 2 * PAD, w + 2 * PAD), dtype=cols.dtype)
    for u in range(KERNEL):
        for v in range(KERNEL):
            padded[:, :, u:u + h, v:v + w] += blocks[:, u, v].transpose(1, 0, 2, 3)
    return padded[:, :, PAD:PAD + h, PAD:PAD + w].copy()
