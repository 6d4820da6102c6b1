"""
Point-voxel interaction: refine a coarse completion volume with the raw points.

Centers of voxels predicted non-empty query their k nearest raw points. Each
(center, point) pair forms an edge whose input is the concatenation of the
center's [position, logits] with the difference to the point's
[position, projected shape embedding]. A shared MLP embeds every edge, the
embeddings are max-pooled over neighbors, and a linear head turns the result
into a residual added to the center's logits.
"""

from dataclasses import dataclass

import numpy as np

from . import dense
from .autodiff import Tensor, as_tensor
from .errors import ContractError
from .geometry import CoordIndex


def _volume_tensor(volume):
    """The logits tensor of a DenseVolume, a Tensor, or a plain array, keeping tape links."""
    if isinstance(volume, Tensor):
        return volume
    inner = getattr(volume, "data", None)
    if isinstance(inner, Tensor):
        return inner
    return as_tensor(volume)


@dataclass
class VoxelCenters:
    cells: np.ndarray
    rows: np.ndarray
    positions: np.ndarray
    features: Tensor

    def __len__(self):
        return len(self.rows)


def extract_voxel_centers(coarse, spec, empty_class=0):
    """Centers and logits of every voxel whose argmax is not the empty class."""
    data = _volume_tensor(coarse)
    if data.data.ndim != 4:
        raise ContractError(f"coarse volume must be (X, Y, Z, C+1), got {data.shape}")
    flat = dense.reshape(data, (-1, data.shape[3]))
    rows = np.nonzero(flat.data.argmax(axis=1) != empty_class)[0]
    cells = np.stack(np.unravel_index(rows, spec.dims), axis=1)
    return VoxelCenters(cells, rows, spec.center_of(cells), dense.take_rows(flat, rows))


@dataclass
class NeighborGraph:
    k: int
    neighbor_ids: np.ndarray
    distances: np.ndarray


def _sq_dists(queries, points):
    diff = queries[:, None, :] - points[None, :, :]
    return (diff * diff).sum(axis=-1)


def _select(sq, ids, k):
    ids_b = np.broadcast_to(ids, sq.shape)
    order = np.lexsort((ids_b, sq), axis=-1)[:, :k]
    return np.take_along_axis(ids_b, order, -1), np.take_along_axis(sq, order, -1)


def knn_brute_force(queries, points, k):
    """Reference O(N' * N) scan; ties broken by smaller point index."""
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    _check_k(points, k)
    ids, sq = _select(_sq_dists(queries, points), np.arange(len(points)), k)
    return NeighborGraph(k, ids, np.sqrt(sq))


def _check_k(points, k):
    if len(points) == 0:
        raise ContractError("kNN needs a non-empty point cloud")
    if not 1 <= k <= len(points):
        raise ContractError(f"k={k} but the cloud holds {len(points)} points")


class GridIndex:
    """Uniform bucket grid over a point set for exact kNN queries."""

    def __init__(self, points, cell_size=None, target_per_cell=2.0):
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        lo = self.points.min(axis=0)
        hi = self.points.max(axis=0)
        if cell_size is None:
            # flat or thin clouds would otherwise get needle-sized cells
            span = np.maximum(hi - lo, max(float((hi - lo).max()), 1e-6) / 8)
            cell_size = float((np.prod(span) * target_per_cell / len(self.points)) ** (1 / 3))
            cell_size = max(cell_size, float(span.max()) / 256)
        self.cell_size = cell_size
        self.origin = lo
        cells = np.floor((self.points - lo) / cell_size).astype(np.int64)
        uniq, inverse = np.unique(cells, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        self.order = np.argsort(inverse, kind="stable")
        self.offsets = np.zeros(len(uniq) + 1, dtype=np.int64)
        np.cumsum(np.bincount(inverse, minlength=len(uniq)), out=self.offsets[1:])
        self.index = CoordIndex(uniq)
        self.cell_lo = uniq.min(axis=0)
        self.cell_hi = uniq.max(axis=0)

    def _candidates(self, group_cells, radius, k):
        """Padded (G, M) matrix of point ids in each group's cube, padded with len(points)."""
        r = np.arange(-radius, radius + 1)
        cube = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
        rows = self.index.lookup((group_cells[:, None, :] + cube[None, :, :]).reshape(-1, 3))
        hit = rows >= 0
        starts = np.where(hit, self.offsets[np.maximum(rows, 0)], 0)
        lens = np.where(hit, self.offsets[np.maximum(rows, 0) + 1] - starts, 0)
        counts = lens.reshape(len(group_cells), -1).sum(axis=1)
        out = np.full((len(group_cells), max(int(counts.max()), k)), len(self.points), dtype=np.int64)
        total = int(lens.sum())
        if total:
            # offset of every candidate within its cell run and within its group's row
            within = np.arange(total) - np.repeat(np.cumsum(lens) - lens, lens)
            src = np.repeat(starts, lens) + within
            col = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
            out[np.repeat(np.arange(len(group_cells)), counts), col] = self.order[src]
        return out, counts

    def query(self, queries, k, chunk=1024):
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        _check_k(self.points, k)
        ids = np.zeros((len(queries), k), dtype=np.int64)
        sq = np.zeros((len(queries), k))
        if not len(queries):
            return NeighborGraph(k, ids, sq)
        qcells = np.floor((queries - self.origin) / self.cell_size).astype(np.int64)
        groups, inverse = np.unique(qcells, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        # once the cube around a query cell spans every occupied cell, the scan is exhaustive
        full = np.maximum(np.abs(groups - self.cell_lo).max(axis=1),
                          np.abs(self.cell_hi - groups).max(axis=1))
        padded = np.vstack([self.points, np.zeros((1, 3))])
        pending = np.arange(len(queries))
        radius = 1
        while len(pending):
            if (2 * radius + 1) ** 3 > len(self.index):
                # the cube would cover more cells than are occupied: scan everything directly
                gid, gsq = _select(_sq_dists(queries[pending], self.points), np.arange(len(self.points)), k)
                ids[pending], sq[pending] = gid, gsq
                break
            done = np.zeros(len(pending), dtype=bool)
            safe = (radius * self.cell_size) ** 2 * (1 - 1e-9)
            for lo in range(0, len(pending), chunk):
                qi = pending[lo:lo + chunk]
                used, local = np.unique(inverse[qi], return_inverse=True)
                local = local.reshape(-1)
                cand, counts = self._candidates(groups[used], radius, k)
                rows = cand[local]
                diff = queries[qi][:, None, :] - padded[rows]
                d2 = np.where(rows < len(self.points), (diff * diff).sum(axis=-1), np.inf)
                gid, gsq = _select(d2, rows, k)
                ok = (counts[local] >= k) & ((radius >= full[used][local]) | (gsq[:, -1] < safe))
                ids[qi[ok]], sq[qi[ok]] = gid[ok], gsq[ok]
                done[lo:lo + chunk] = ok
            pending = pending[~done]
            if len(pending):
                radius = min(2 * radius, int(full[inverse[pending]].max()))
        return NeighborGraph(k, ids, np.sqrt(sq))


def knn_query(centers, points, k, method="grid"):
    """Exact k nearest raw points for every center, sorted by (distance, index)."""
    queries = getattr(centers, "positions", centers)
    points = getattr(points, "positions", points)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    _check_k(points, k)
    if method == "brute" or len(points) <= 64:
        return knn_brute_force(queries, points, k)
    return GridIndex(points).query(queries, k)


def edge_inputs(center_pos, center_feat, nbr_pos, nbr_feat):
    """
    Rows [p_i, f_i, p_i - p_j, f_i - f_j] for aligned (center, neighbor) pairs.

    Positions are constants; features may be tape tensors.
    """
    center_feat, nbr_feat = as_tensor(center_feat), as_tensor(nbr_feat)
    center_pos = np.asarray(center_pos, dtype=np.float64)
    nbr_pos = np.asarray(nbr_pos, dtype=np.float64)
    if center_feat.shape != nbr_feat.shape or center_pos.shape != nbr_pos.shape:
        raise ContractError(
            f"edge endpoints disagree: {center_feat.shape}/{nbr_feat.shape}, {center_pos.shape}/{nbr_pos.shape}")
    if len(center_pos) != len(center_feat.data):
        raise ContractError("positions and features must have the same number of rows")
    diff_feat = dense.add(center_feat, dense.scale(nbr_feat, -1.0))
    return dense.concat([Tensor(center_pos), center_feat, Tensor(center_pos - nbr_pos), diff_feat])


def edge_mlp(x, layers, slope=0.01):
    """Shared edge function: a stack of (w, b) linear layers with leaky-ReLU after each."""
    for w, b in layers:
        x = dense.leaky_relu(dense.linear(x, w, b), slope)
    return x


def edge_features(center_pos, center_feat, nbr_pos, nbr_feat, layers, slope=0.01):
    return edge_mlp(edge_inputs(center_pos, center_feat, nbr_pos, nbr_feat), layers, slope)


@dataclass
class GraphLayer:
    phi: list
    head_w: Tensor
    head_b: Tensor


def gcn_layer(center_pos, center_feat, graph, point_pos, point_feat, layer, slope=0.01):
    """One edge-conv layer: max over neighbors of the edge MLP, then a linear residual head."""
    n, k = graph.neighbor_ids.shape
    rep = np.repeat(np.arange(n), k)
    flat_ids = graph.neighbor_ids.reshape(-1)
    e = edge_features(center_pos[rep], dense.take_rows(center_feat, rep),
                      point_pos[flat_ids], dense.take_rows(point_feat, flat_ids), layer.phi, slope)
    h = dense.max_reduce(dense.reshape(e, (n, k, e.shape[1])), axis=1)
    return dense.linear(h, layer.head_w, layer.head_b)


def gcn_refine(centers, graph, point_pos, point_feat, layers, slope=0.01):
    """
    Refined logits for every center: coarse logits plus the summed residuals
    of ``layers`` stacked edge-conv layers. Returns (refined, total_delta).
    """
    feat = centers.features
    total = None
    for layer in layers:
        delta = gcn_layer(centers.positions, feat, graph, point_pos, point_feat, layer, slope)
        feat = dense.add(feat, delta)
        total = delta if total is None else dense.add(total, delta)
    return feat, total


def refine_volume(coarse, centers, delta):
    """Add per-center residuals into the coarse volume; cells without centers are untouched."""
    data = _volume_tensor(coarse)
    if delta is None or len(centers) == 0:
        return data
    flat = dense.reshape(data, (-1, data.shape[3]))
    return dense.reshape(dense.put_rows(flat, centers.rows, delta), data.shape)
