"""
Dense and pointwise operations with their adjoints.

Volumes are stored channels-last as (X, Y, Z, C) arrays. Kernel weights are
(K**3, C_in, C_out) with offsets enumerated by :func:`kernel_offsets`, the same
ordering the sparse convolution uses, so one weight array drives both.
"""

import itertools
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, record
from .errors import ContractError
from .geometry import VolumeSpec


def kernel_offsets(kernel_size):
    if kernel_size % 2 != 1 or kernel_size < 1:
        raise ContractError(f"kernel size must be odd and positive, got {kernel_size}")
    r = kernel_size // 2
    return np.array(list(itertools.product(range(-r, r + 1), repeat=3)), dtype=np.int64)


@dataclass
class DenseVolume:
    """A channels-last feature grid tied to a volume layout."""

    spec: VolumeSpec
    data: Tensor

    def __post_init__(self):
        shape = self.data.shape
        if len(shape) != 4 or tuple(shape[:3]) != self.spec.dims:
            raise ContractError(f"volume data shape {shape} does not match dims {self.spec.dims}")

    @property
    def channels(self):
        return self.data.shape[3]


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return record(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def scale(x, c):
    """Multiply by a constant (non-differentiable) scalar."""
    x = as_tensor(x)
    c = float(c)
    return record(x.data * c, (x,), lambda g: (g * c,))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return record(a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def total(x):
    x = as_tensor(x)
    return record(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def linear(x, w, b=None):
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ContractError(f"linear: cannot multiply {x.shape} by {w.shape}")
    out = x.data @ w.data
    if b is None:
        return record(out, (x, w), lambda g: (g @ w.data.T, x.data.T @ g))
    b = as_tensor(b)
    if b.shape != (w.shape[1],):
        raise ContractError(f"linear: bias shape {b.shape} for {w.shape[1]} outputs")
    return record(out + b.data, (x, w, b), lambda g: (g @ w.data.T, x.data.T @ g, g.sum(axis=0)))


def relu(x):
    x = as_tensor(x)
    on = x.data > 0
    return record(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,))


def leaky_relu(x, slope=0.01):
    x = as_tensor(x)
    factor = np.where(x.data > 0, 1.0, slope)
    return record(x.data * factor, (x,), lambda g: (g * factor,))


def affine(x, gain, shift):
    """Per-channel gain and shift along the last axis."""
    x, gain, shift = as_tensor(x), as_tensor(gain), as_tensor(shift)
    c = x.shape[-1]
    if gain.shape != (c,) or shift.shape != (c,):
        raise ContractError(f"affine: parameters must have shape ({c},)")
    axes = tuple(range(x.data.ndim - 1))
    return record(
        x.data * gain.data + shift.data, (x, gain, shift),
        lambda g: (g * gain.data, (g * x.data).sum(axis=axes), g.sum(axis=axes)),
    )


def concat(xs, axis=-1):
    xs = [as_tensor(x) for x in xs]
    axis = axis % xs[0].data.ndim
    for x in xs[1:]:
        if x.data.ndim != xs[0].data.ndim or any(
                x.shape[d] != xs[0].shape[d] for d in range(x.data.ndim) if d != axis):
            raise ContractError(f"concat: incompatible shapes {[t.shape for t in xs]}")
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    return record(np.concatenate([x.data for x in xs], axis=axis), xs,
                  lambda g: tuple(np.split(g, cuts, axis=axis)))


def softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return record(p, (x,), back)


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def take_rows(x, idx):
    """Gather rows x[idx]; indices may repeat."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)

    def back(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return record(x.data[idx], (x,), back)


def put_rows(base, idx, rows):
    """base with ``rows`` added at the (unique) row positions ``idx``."""
    base, rows = as_tensor(base), as_tensor(rows)
    idx = np.asarray(idx, dtype=np.int64)
    if len(np.unique(idx)) != len(idx):
        raise ContractError("put_rows: row positions must be unique")
    if rows.shape != (len(idx),) + base.shape[1:]:
        raise ContractError(f"put_rows: {rows.shape} rows for {len(idx)} positions of {base.shape}")
    out = base.data.copy()
    out[idx] += rows.data
    return record(out, (base, rows), lambda g: (g, g[idx]))


def segment_mean(x, segment, num_segments):
    """Row means grouped by ``segment`` id; empty groups are zero."""
    x = as_tensor(x)
    segment = np.asarray(segment, dtype=np.int64)
    counts = np.bincount(segment, minlength=num_segments).astype(np.float64)
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)
    out = np.zeros((num_segments,) + x.shape[1:])
    np.add.at(out, segment, x.data)
    out *= inv.reshape((-1,) + (1,) * (x.data.ndim - 1))
    return record(out, (x,), lambda g: (g[segment] * inv[segment].reshape((-1,) + (1,) * (g.ndim - 1)),))


def max_reduce(x, axis):
    """Componentwise max along ``axis``; the gradient goes to the first maximal entry."""
    x = as_tensor(x)
    arg = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis).squeeze(axis)

    def back(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis)
        return (full,)

    return record(out, (x,), back)


def _pad(a, p):
    if p == 0:
        return a
    return np.pad(a, ((p, p), (p, p), (p, p), (0, 0)))


def conv3d(x, w, b=None, stride=1, padding=None):
    """
    Cross-correlation out[p] = b + sum_o x[stride * p + o - padding] @ w[o] with zero padding.

    ``x`` is (X, Y, Z, C_in); ``w`` is (K**3, C_in, C_out).
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 3:
        raise ContractError(f"conv3d: bad ranks {x.shape}, {w.shape}")
    k = round(w.shape[0] ** (1 / 3))
    if k ** 3 != w.shape[0] or k % 2 != 1:
        raise ContractError(f"conv3d: {w.shape[0]} kernel taps is not an odd cube")
    if w.shape[1] != x.shape[3]:
        raise ContractError(f"conv3d: kernel expects {w.shape[1]} channels, input has {x.shape[3]}")
    pad = k // 2 if padding is None else int(padding)
    xp = _pad(x.data, pad)
    full = tuple(n - k + 1 for n in xp.shape[:3])
    if min(full) <= 0:
        raise ContractError("conv3d: kernel larger than padded input")
    out_dims = tuple((n - 1) // stride + 1 for n in full)
    cin, cout = w.shape[1], w.shape[2]
    taps = [tuple(o) for o in itertools.product(range(k), repeat=3)]

    def window(arr, o):
        sl = tuple(slice(o[d], o[d] + stride * (out_dims[d] - 1) + 1, stride) for d in range(3))
        return arr[sl]

    out = np.zeros(out_dims + (cout,))
    for t, o in enumerate(taps):
        out += (window(xp, o).reshape(-1, cin) @ w.data[t]).reshape(out_dims + (cout,))
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise ContractError(f"conv3d: bias shape {b.shape} for {cout} outputs")
        out += b.data
        parents = (x, w, b)

    def back(g):
        g2 = g.reshape(-1, cout)
        gx = np.zeros_like(xp)
        gw = np.empty_like(w.data)
        for t, o in enumerate(taps):
            gw[t] = window(xp, o).reshape(-1, cin).T @ g2
            window(gx, o)[...] += (g2 @ w.data[t].T).reshape(out_dims + (cin,))
        if pad:
            gx = gx[pad:-pad, pad:-pad, pad:-pad]
        grads = (gx, gw)
        if b is not None:
            grads += (g2.sum(axis=0),)
        return grads

    return record(out, parents, back)


def max_pool3d(x, size=2):
    """Non-overlapping max pooling; dims must divide evenly."""
    x = as_tensor(x)
    X, Y, Z, C = x.shape
    if X % size or Y % size or Z % size:
        raise ContractError(f"max_pool3d: dims {(X, Y, Z)} not divisible by {size}")
    s = size
    blocks = (x.data.reshape(X // s, s, Y // s, s, Z // s, s, C)
              .transpose(0, 2, 4, 6, 1, 3, 5).reshape(X // s, Y // s, Z // s, C, s ** 3))
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], -1)[..., 0]

    def back(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], -1)
        gx = (gb.reshape(X // s, Y // s, Z // s, C, s, s, s)
              .transpose(0, 4, 1, 5, 2, 6, 3).reshape(X, Y, Z, C))
        return (gx,)

    return record(out, (x,), back)


def _shuffle(a, r):
    X, Y, Z, C = a.shape
    c = C // (r ** 3)
    return (a.reshape(X, Y, Z, c, r, r, r).transpose(0, 4, 1, 5, 2, 6, 3)
            .reshape(X * r, Y * r, Z * r, c))


def _unshuffle(a, r):
    X, Y, Z, c = a.shape
    return (a.reshape(X // r, r, Y // r, r, Z // r, r, c).transpose(0, 2, 4, 6, 1, 3, 5)
            .reshape(X // r, Y // r, Z // r, c * r ** 3))


def voxel_shuffle(x, r):
    """
    Channel-to-space upsampling: out[x, y, z, ch] =
    in[x // r, y // r, z // r, ch * r**3 + ((x % r) * r + y % r) * r + z % r].
    """
    x = as_tensor(x)
    if x.data.ndim != 4 or x.shape[3] % (r ** 3):
        raise ContractError(f"voxel_shuffle: {x.shape[-1]} channels not divisible by {r ** 3}")
    return record(_shuffle(x.data, r), (x,), lambda g: (_unshuffle(g, r),))


def voxel_unshuffle(x, r):
    """Exact inverse of :func:`voxel_shuffle` (space-to-channel)."""
    x = as_tensor(x)
    if x.data.ndim != 4 or any(n % r for n in x.shape[:3]):
        raise ContractError(f"voxel_unshuffle: dims {x.shape[:3]} not divisible by {r}")
    return record(_unshuffle(x.data, r), (x,), lambda g: (_shuffle(g, r),))
