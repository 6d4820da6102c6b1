"""
Submanifold sparse convolution driven by rulebooks, and stride-2 sparse pooling.

A rulebook lists, for every kernel offset ``o``, the (input_row, output_row)
pairs with ``coords[input_row] == coords[output_row] + o``. Output sites equal
input sites, so sparsity never dilates through the network.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, record
from .dense import kernel_offsets
from .errors import ContractError, StructuralError
from .geometry import SparseTensor


@dataclass(frozen=True)
class Rulebook:
    kernel_size: int
    offsets: np.ndarray
    in_rows: tuple
    out_rows: tuple
    num_sites: int

    def __len__(self):
        return sum(len(r) for r in self.in_rows)

    def pairs(self):
        """All (offset_index, input_row, output_row) triples sorted by output row, then offset."""
        t = np.concatenate([np.full(len(r), k) for k, r in enumerate(self.in_rows)] or [np.zeros(0, int)])
        i = np.concatenate(self.in_rows) if self.in_rows else np.zeros(0, int)
        j = np.concatenate(self.out_rows) if self.out_rows else np.zeros(0, int)
        order = np.lexsort((t, j))
        return np.stack([t[order], i[order], j[order]], axis=1)


@dataclass
class KernelWeights:
    weights: Tensor
    bias: Tensor = None

    @property
    def kernel_size(self):
        return round(self.weights.shape[0] ** (1 / 3))


def build_rulebook(coords, kernel_size, index=None):
    offsets = kernel_offsets(kernel_size)
    if isinstance(coords, SparseTensor):
        index = coords.index
        coords = coords.coords
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    m = len(coords)
    if index is None:
        from .geometry import CoordIndex
        index = CoordIndex(coords)
    if m == 0:
        empty = tuple(np.zeros(0, dtype=np.int64) for _ in offsets)
        return Rulebook(kernel_size, offsets, empty, empty, 0)
    queries = (coords[None, :, :] + offsets[:, None, :]).reshape(-1, 3)
    found = index.lookup(queries).reshape(len(offsets), m)
    outs = np.arange(m)
    in_rows, out_rows = [], []
    for t in range(len(offsets)):
        hit = found[t] >= 0
        in_rows.append(found[t][hit])
        out_rows.append(outs[hit])
    return Rulebook(kernel_size, offsets, tuple(in_rows), tuple(out_rows), m)


def _conv_features(x, w, b, rb):
    x, w = as_tensor(x), as_tensor(w)
    if w.data.ndim != 3 or w.shape[0] != rb.kernel_size ** 3:
        raise ContractError(f"kernel shape {w.shape} does not match rulebook size {rb.kernel_size}")
    if x.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ContractError(f"features {x.shape} do not match kernel input width {w.shape[1]}")
    if len(x.data) != rb.num_sites:
        raise ContractError(f"rulebook built for {rb.num_sites} sites, got {len(x.data)} rows")
    out = np.zeros((rb.num_sites, w.shape[2]))
    for t, (ii, jj) in enumerate(zip(rb.in_rows, rb.out_rows)):
        if len(ii):
            out[jj] += x.data[ii] @ w.data[t]
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[2],):
            raise ContractError(f"bias shape {b.shape} for {w.shape[2]} outputs")
        out += b.data
        parents = (x, w, b)

    def back(g):
        gx = np.zeros_like(x.data)
        gw = np.zeros_like(w.data)
        for t, (ii, jj) in enumerate(zip(rb.in_rows, rb.out_rows)):
            if len(ii):
                gj = g[jj]
                gx[ii] += gj @ w.data[t].T
                gw[t] = x.data[ii].T @ gj
        grads = (gx, gw)
        if b is not None:
            grads += (g.sum(axis=0),)
        return grads

    return record(out, parents, back)


def submanifold_conv(inp, kw, rb):
    """out[j] = bias + sum over rules (i, j) at offset o of features[i] @ w[o]."""
    feats = _conv_features(inp.features, kw.weights, kw.bias, rb)
    return SparseTensor(inp.coords, feats, inp.index)


@dataclass(frozen=True)
class PoolMap:
    """Links a fine sparse tensor to its stride-2 parent: parent[i] is the coarse row of fine row i."""

    parent: np.ndarray
    fine_coords: np.ndarray
    fine_index: object
    num_coarse: int


def _segment_max(x, segment, n):
    x = as_tensor(x)
    data = x.data
    out = np.full((n, data.shape[1]), -np.inf)
    np.maximum.at(out, segment, data)
    rows = np.arange(len(data))[:, None]
    cand = np.where(data == out[segment], rows, len(data))
    winner = np.full((n, data.shape[1]), len(data))
    np.minimum.at(winner, segment, cand)

    def back(g):
        gx = np.zeros_like(data)
        cols = np.broadcast_to(np.arange(data.shape[1]), winner.shape)
        gx[winner, cols] = g
        return (gx,)

    return record(out, (x,), back)


def sparse_pool(inp, stride=2):
    """Max-pool children into parent cells floor(coords / stride)."""
    coarse_cells = np.floor_divide(inp.coords, stride)
    coarse, parent = np.unique(coarse_cells, axis=0, return_inverse=True)
    parent = parent.reshape(-1)
    feats = _segment_max(inp.features, parent, len(coarse))
    pmap = PoolMap(parent, inp.coords, inp.index, len(coarse))
    return SparseTensor(coarse, feats), pmap


def sparse_unpool(coarse, pmap):
    """Copy each parent's feature back to all of its fine children."""
    if coarse.num_active != pmap.num_coarse:
        raise StructuralError(
            f"pool map expects {pmap.num_coarse} coarse sites, tensor has {coarse.num_active}")
    from .dense import take_rows
    return SparseTensor(pmap.fine_coords, take_rows(coarse.features, pmap.parent), pmap.fine_index)


def densify(coords, features, dims, origin=(0, 0, 0)):
    """Scatter sparse rows into a zero dense (X, Y, Z, F) grid; used by tests and debugging."""
    grid = np.zeros(tuple(dims) + (np.asarray(features).shape[1],))
    c = np.asarray(coords) - np.asarray(origin)
    grid[c[:, 0], c[:, 1], c[:, 2]] = features
    return grid
