"""
Geometric containers: point clouds, rigid poses, voxel volumes and sparse
voxel tensors, plus the point <-> voxel mappings built on top of them.

All containers are treated as immutable once built; array fields are marked
read-only so accidental in-place edits fail loudly.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import Tensor
from .errors import BoundsError, ContractError, StructuralError

EMPTY_LABEL = 0
INVALID_LABEL = 255


def _frozen(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PointCloud:
    positions: np.ndarray
    features: np.ndarray = None
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pos)):
            raise ContractError("point positions must be finite")
        n = len(pos)
        feats = self.features
        if feats is None:
            feats = np.zeros((n, 0))
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats[:, None]
        if len(feats) != n:
            raise ContractError(f"{len(feats)} feature rows for {n} points")
        labels = self.labels
        if labels is not None:
            labels = np.asarray(labels).reshape(-1).astype(np.int64)
            if len(labels) != n:
                raise ContractError(f"{len(labels)} labels for {n} points")
            if n and labels.min() < 0:
                raise ContractError("labels must be non-negative")
            labels = _frozen(labels)
        object.__setattr__(self, "positions", _frozen(pos))
        object.__setattr__(self, "features", _frozen(feats))
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.positions)

    def subset(self, idx):
        labels = None if self.labels is None else self.labels[idx]
        return PointCloud(self.positions[idx], self.features[idx], labels)

    @staticmethod
    def concatenate(clouds):
        clouds = list(clouds)
        if not clouds:
            return PointCloud(np.zeros((0, 3)))
        has_labels = [c.labels is not None for c in clouds]
        if any(has_labels) and not all(has_labels):
            raise ContractError("cannot concatenate labeled and unlabeled clouds")
        labels = np.concatenate([c.labels for c in clouds]) if all(has_labels) else None
        return PointCloud(
            np.concatenate([c.positions for c in clouds]),
            np.concatenate([c.features for c in clouds]),
            labels,
        )


@dataclass(frozen=True)
class Pose:
    """Rigid transform x -> R x + t."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ContractError(f"rotation determinant {np.linalg.det(r)} is not 1")
        object.__setattr__(self, "rotation", _frozen(r))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other):
        """self after other: x -> self(other(x))."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def __matmul__(self, other):
        return self.compose(other)

    def inverse(self):
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, points):
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


def transform_cloud(cloud, pose):
    return PointCloud(pose.apply(cloud.positions), cloud.features, cloud.labels)


@dataclass(frozen=True)
class VolumeSpec:
    origin: tuple
    voxel_size: float
    dims: tuple

    def __post_init__(self):
        origin = tuple(float(v) for v in np.asarray(self.origin, dtype=np.float64).reshape(3))
        dims = tuple(int(v) for v in np.asarray(self.dims).reshape(3))
        vs = float(self.voxel_size)
        if not vs > 0:
            raise ContractError(f"voxel_size must be positive, got {vs}")
        if min(dims) <= 0:
            raise ContractError(f"dims must be positive, got {dims}")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_size", vs)

    @classmethod
    def semantic_kitti(cls):
        """51.2 m ahead, 25.6 m to each side, 6.4 m tall at 0.2 m: 256 x 256 x 32."""
        return cls.from_extent((0.0, -25.6, -2.0), (51.2, 25.6, 4.4), 0.2)

    @classmethod
    def from_extent(cls, lo, hi, voxel_size):
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        dims = np.rint((hi - lo) / voxel_size).astype(int)
        return cls(tuple(lo), voxel_size, tuple(dims))

    @property
    def n_cells(self):
        return int(np.prod(self.dims))

    @property
    def extent(self):
        return np.asarray(self.dims) * self.voxel_size

    def cell_of(self, points):
        """Integer cell indices floor((p - origin) / voxel_size); no bounds check."""
        p = np.asarray(points, dtype=np.float64)
        return np.floor((p - np.asarray(self.origin)) / self.voxel_size).astype(np.int64)

    def in_bounds(self, cells):
        cells = np.asarray(cells)
        return np.all((cells >= 0) & (cells < np.asarray(self.dims)), axis=-1)

    def contains(self, points):
        return self.in_bounds(self.cell_of(points))

    def center_of(self, cells):
        return np.asarray(self.origin) + (np.asarray(cells, dtype=np.float64) + 0.5) * self.voxel_size

    def linear_index(self, cells):
        """x + X * (y + Y * z): the x-fastest order used on disk."""
        cells = np.asarray(cells, dtype=np.int64)
        x, y, _ = self.dims
        return cells[..., 0] + x * (cells[..., 1] + y * cells[..., 2])

    def cells_from_linear(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        x, y, _ = self.dims
        return np.stack([idx % x, (idx // x) % y, idx // (x * y)], axis=-1)


class CoordIndex:
    """
    Open-addressed hash table from integer (x, y, z) voxel coordinates to rows.

    Insertion and lookup are vectorized: every pending key advances one probe
    per round, so the Python loop runs for at most the longest probe chain.
    """

    _BITS = 21
    _BIAS = 1 << (_BITS - 1)
    _EMPTY = np.uint64(0xFFFFFFFFFFFFFFFF)
    _MULT = np.uint64(0x9E3779B97F4A7C15)

    def __init__(self, coords):
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        if len(coords) and (coords.min() < -self._BIAS or coords.max() >= self._BIAS):
            raise ContractError("voxel coordinates exceed the +-2^20 index range")
        n = len(coords)
        self._log2 = max(4, int(np.ceil(np.log2(max(2 * n, 1)))) + 1)
        size = 1 << self._log2
        self._keys = np.full(size, self._EMPTY, dtype=np.uint64)
        self._rows = np.full(size, -1, dtype=np.int64)
        self.size = n
        self._insert(self._pack(coords))

    @classmethod
    def _pack(cls, coords):
        c = (np.asarray(coords, dtype=np.int64) + cls._BIAS).astype(np.uint64)
        return (c[:, 0] << np.uint64(2 * cls._BITS)) | (c[:, 1] << np.uint64(cls._BITS)) | c[:, 2]

    def _slot(self, keys):
        return (keys * self._MULT) >> np.uint64(64 - self._log2)

    def _insert(self, keys):
        mask = np.uint64((1 << self._log2) - 1)
        home = self._slot(keys)
        pending = np.arange(len(keys))
        probe = np.zeros(len(keys), dtype=np.uint64)
        while len(pending):
            slots = (home[pending] + probe[pending]) & mask
            occupant = self._keys[slots]
            if np.any(occupant == keys[pending]):
                raise ContractError("duplicate voxel coordinate inserted into index")
            free = occupant == self._EMPTY
            cand, cand_slots = pending[free], slots[free]
            _, first = np.unique(cand_slots, return_index=True)
            winners = cand[first]
            self._keys[cand_slots[first]] = keys[winners]
            self._rows[cand_slots[first]] = winners
            placed = np.zeros(len(keys), dtype=bool)
            placed[winners] = True
            # losers of a contested free slot retry it, so a duplicate meets the winner's key
            probe[pending[~free]] += np.uint64(1)
            pending = pending[~placed[pending]]

    def lookup(self, coords):
        """Row for each coordinate, or -1 where absent."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        out = np.full(len(coords), -1, dtype=np.int64)
        inside = np.all((coords >= -self._BIAS) & (coords < self._BIAS), axis=1)
        pending = np.nonzero(inside)[0]
        if not len(pending):
            return out
        keys = self._pack(coords[pending])
        home = self._slot(keys)
        mask = np.uint64((1 << self._log2) - 1)
        live = np.arange(len(pending))
        probe = np.uint64(0)
        while len(live):
            slots = (home[live] + probe) & mask
            occupant = self._keys[slots]
            hit = occupant == keys[live]
            out[pending[live[hit]]] = self._rows[slots[hit]]
            live = live[~(hit | (occupant == self._EMPTY))]
            probe += np.uint64(1)
        return out

    def get(self, coord):
        row = int(self.lookup(np.asarray(coord).reshape(1, 3))[0])
        return None if row < 0 else row

    def __len__(self):
        return self.size


class SparseTensor:
    """Active voxel coordinates (M x 3, unique) with M x F features."""

    def __init__(self, coords, features, index=None):
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        if not isinstance(features, Tensor):
            features = np.asarray(features, dtype=np.float64)
            if features.ndim == 1:
                features = features[:, None]
        if len(features) != len(coords):
            raise ContractError(f"{len(features)} feature rows for {len(coords)} coordinates")
        self.coords = _frozen(coords)
        self.features = features
        self.index = index if index is not None else CoordIndex(coords)

    @property
    def num_active(self):
        return len(self.coords)

    @property
    def channels(self):
        return self.features.shape[1]

    @property
    def feature_data(self):
        """Raw feature array whether features are plain or tape-tracked."""
        return self.features.data if isinstance(self.features, Tensor) else self.features

    def with_features(self, features):
        return SparseTensor(self.coords, features, self.index)


@dataclass(frozen=True)
class PointVoxelMap:
    """point_to_voxel[i] is the row of point i's voxel; voxel_order/voxel_offsets is CSR."""

    point_to_voxel: np.ndarray
    voxel_order: np.ndarray
    voxel_offsets: np.ndarray

    @classmethod
    def from_assignment(cls, point_to_voxel, num_voxels):
        p2v = np.asarray(point_to_voxel, dtype=np.int64)
        order = np.argsort(p2v, kind="stable")
        offsets = np.zeros(num_voxels + 1, dtype=np.int64)
        np.cumsum(np.bincount(p2v, minlength=num_voxels), out=offsets[1:])
        return cls(_frozen(p2v), _frozen(order), _frozen(offsets))

    @property
    def num_points(self):
        return len(self.point_to_voxel)

    @property
    def num_voxels(self):
        return len(self.voxel_offsets) - 1

    def points_in(self, voxel):
        return self.voxel_order[self.voxel_offsets[voxel]:self.voxel_offsets[voxel + 1]]

    def counts(self):
        return np.diff(self.voxel_offsets)


def segment_mean(values, segment, num_segments):
    """Mean of ``values`` rows grouped by ``segment`` ids; empty segments get zeros."""
    values = np.asarray(values, dtype=np.float64)
    counts = np.bincount(segment, minlength=num_segments).astype(np.float64)
    out = np.zeros((num_segments, values.shape[1]))
    for c in range(values.shape[1]):
        out[:, c] = np.bincount(segment, weights=values[:, c], minlength=num_segments)
    nz = counts > 0
    out[nz] /= counts[nz, None]
    return out


def voxelize_cells(cells, features):
    """Group points by integer cell; returns (SparseTensor of mean features, PointVoxelMap)."""
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
    coords, inverse = np.unique(cells, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    feats = segment_mean(np.asarray(features, dtype=np.float64).reshape(len(cells), -1), inverse, len(coords))
    return SparseTensor(coords, feats), PointVoxelMap.from_assignment(inverse, len(coords))


def voxelize_points(cloud, spec):
    cells = spec.cell_of(cloud.positions)
    ok = spec.in_bounds(cells)
    if not np.all(ok):
        bad = int(np.argmin(ok))
        raise BoundsError(bad, cloud.positions[bad])
    return voxelize_cells(cells, cloud.features)


def lattice_voxelize(cloud, voxel_size):
    """Voxelize on the unbounded lattice anchored at the world origin."""
    cells = np.floor(cloud.positions / voxel_size).astype(np.int64)
    return voxelize_cells(cells, cloud.features)


def devoxelize(sparse, pv_map):
    if sparse.num_active != pv_map.num_voxels:
        raise StructuralError(
            f"map references {pv_map.num_voxels} voxels but tensor holds {sparse.num_active}"
        )
    if isinstance(sparse.features, Tensor):
        from .dense import take_rows
        return take_rows(sparse.features, pv_map.point_to_voxel)
    return sparse.features[pv_map.point_to_voxel]


@dataclass(frozen=True)
class LabeledVolume:
    """Dense class-id grid of shape spec.dims; 0 = empty, 1..C semantic, 255 = unobserved."""

    spec: VolumeSpec
    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.shape != self.spec.dims:
            raise ContractError(f"label grid shape {labels.shape} != dims {self.spec.dims}")
        if labels.dtype != np.uint8:
            if labels.size and (labels.min() < 0 or labels.max() > 255):
                raise ContractError("labels must fit in 0..255")
            labels = labels.astype(np.uint8)
        object.__setattr__(self, "labels", _frozen(labels))

    def check_classes(self, num_classes):
        bad = (self.labels > num_classes) & (self.labels != INVALID_LABEL)
        if np.any(bad):
            raise ContractError(f"volume holds labels outside 0..{num_classes} and 255")

    @property
    def valid(self):
        return self.labels != INVALID_LABEL

    def __eq__(self, other):
        if not isinstance(other, LabeledVolume):
            return NotImplemented
        return self.spec == other.spec and np.array_equal(self.labels, other.labels)


def vote_cells(linear, labels):
    """
    Majority label per linear cell index. Label 0 only wins when a cell holds
    nothing else; ties go to the smallest class id. Returns (cells, winners).
    """
    linear = np.asarray(linear, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if not len(linear):
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    width = int(labels.max()) + 1
    pairs, counts = np.unique(linear * width + labels, return_counts=True)
    cell, lab = pairs // width, pairs % width
    order = np.lexsort((lab, -counts, lab == 0, cell))
    cell, lab = cell[order], lab[order]
    first = np.ones(len(cell), dtype=bool)
    first[1:] = cell[1:] != cell[:-1]
    return cell[first], lab[first]


def majority_vote_labels(cloud, spec):
    if cloud.labels is None:
        raise ContractError("majority vote needs a labeled cloud")
    cells = spec.cell_of(cloud.positions)
    ok = spec.in_bounds(cells)
    if not np.all(ok):
        bad = int(np.argmin(ok))
        raise BoundsError(bad, cloud.positions[bad])
    cell_ids, winners = vote_cells(spec.linear_index(cells), cloud.labels)
    if len(winners) and winners.max() > 254:
        raise ContractError("class ids must stay below the 255 invalid marker")
    flat = np.zeros(spec.n_cells, dtype=np.uint8)
    flat[cell_ids] = winners
    return LabeledVolume(spec, flat.reshape(spec.dims, order="F"))
