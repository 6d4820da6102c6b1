"""
Dataset ingestion and ground-truth volume generation.

Readers follow the SemanticKITTI on-disk conventions:

* scans: consecutive 16-byte records of little-endian float32 (x, y, z, intensity)
* labels: one little-endian uint32 per point; the low 16 bits are the semantic id
* poses: one line per frame, 12 reals forming a row-major 3x4 matrix
* calib: ``Tr:`` line with 12 reals (velodyne -> camera)

Completion targets are built by merging a window of frames into the center
frame, voting one label per occupied voxel, and carving observed free space by
walking every sensor ray through the grid. Cells that no ray ever touched stay
marked 255 and are excluded downstream.
"""

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError
from .geometry import (
    INVALID_LABEL,
    LabeledVolume,
    PointCloud,
    Pose,
    VolumeSpec,
    majority_vote_labels,
    transform_cloud,
)

# ---------------------------------------------------------------- readers


def read_scan(buf):
    buf = bytes(buf)
    if len(buf) % 16:
        whole = len(buf) // 16 * 16
        raise FormatError(f"scan length {len(buf)} is not a multiple of 16; truncated record", whole)
    rec = np.frombuffer(buf, dtype="<f4").reshape(-1, 4).astype(np.float64)
    bad = ~np.all(np.isfinite(rec[:, :3]), axis=1)
    if np.any(bad):
        raise FormatError("non-finite point coordinate", int(np.argmax(bad)) * 16)
    return PointCloud(rec[:, :3], rec[:, 3:4])


def write_scan(cloud):
    intensity = cloud.features[:, 0] if cloud.features.shape[1] else np.zeros(len(cloud))
    rec = np.column_stack([cloud.positions, intensity]).astype("<f4")
    return rec.tobytes()


def read_label_words(buf, expected=None):
    buf = bytes(buf)
    if len(buf) % 4:
        raise FormatError(f"label length {len(buf)} is not a multiple of 4", len(buf) // 4 * 4)
    words = np.frombuffer(buf, dtype="<u4")
    if expected is not None and len(words) != expected:
        raise FormatError(f"{len(words)} labels for {expected} points", min(len(words), expected) * 4)
    return words


def read_labels(buf, remap=None, expected=None):
    """Semantic ids (low 16 bits), optionally remapped; unmapped raw ids become 0."""
    raw = (read_label_words(buf, expected) & 0xFFFF).astype(np.int64)
    if remap is None:
        return raw
    lut = np.zeros(0x10000, dtype=np.int64)
    for k, v in remap.items():
        lut[int(k)] = int(v)
    return lut[raw]


def write_labels(labels):
    return (np.asarray(labels, dtype=np.int64) & 0xFFFF).astype("<u4").tobytes()


def read_remap(text):
    """``raw_id target_id`` per line; blank lines and # comments are skipped."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise FormatError(f"remap line needs 'raw_id target_id', got {line!r}", lineno)
        try:
            out[int(parts[0])] = int(parts[1])
        except ValueError:
            raise FormatError(f"non-integer remap entry {line!r}", lineno) from None
    return out


def _pose_from_values(vals, where):
    m = np.eye(4)
    m[:3, :] = np.asarray(vals, dtype=np.float64).reshape(3, 4)
    try:
        return Pose.from_matrix(m)
    except ContractError as exc:
        raise FormatError(str(exc), where) from None


def read_poses(text):
    poses = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 12:
            raise FormatError(f"pose line has {len(parts)} values, expected 12", lineno)
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            raise FormatError(f"non-numeric pose value in {line!r}", lineno) from None
        poses.append(_pose_from_values(vals, lineno))
    return poses


def write_poses(poses):
    return "".join(" ".join(f"{v:.9e}" for v in p.matrix()[:3, :].reshape(-1)) + "\n" for p in poses)


def read_calib(text):
    for lineno, line in enumerate(text.splitlines(), 1):
        key, _, rest = line.partition(":")
        if key.strip() == "Tr":
            parts = rest.split()
            if len(parts) != 12:
                raise FormatError(f"Tr has {len(parts)} values, expected 12", lineno)
            return _pose_from_values([float(p) for p in parts], lineno)
    raise FormatError("calibration has no 'Tr:' entry")


def write_calib(tr):
    return "Tr: " + " ".join(f"{v:.9e}" for v in tr.matrix()[:3, :].reshape(-1)) + "\n"


# ---------------------------------------------------------------- sequences


@dataclass
class FrameRecord:
    scan_path: Path
    label_path: Path
    pose: Pose


@dataclass
class SequenceIndex:
    frames: list
    calib: Pose = field(default_factory=Pose.identity)
    remap: dict = None

    def __len__(self):
        return len(self.frames)

    @classmethod
    def from_directory(cls, root, remap=None):
        """KITTI layout: velodyne/NNNNNN.bin, labels/NNNNNN.label, poses.txt, calib.txt."""
        root = Path(root)
        poses_path = root / "poses.txt"
        if not poses_path.is_file():
            raise FileNotFoundError(f"missing poses file: {poses_path}")
        poses = read_poses(poses_path.read_text())
        calib_path = root / "calib.txt"
        calib = read_calib(calib_path.read_text()) if calib_path.is_file() else Pose.identity()
        scans = sorted((root / "velodyne").glob("*.bin"))
        if len(scans) != len(poses):
            raise FormatError(f"{len(scans)} scans but {len(poses)} poses in {root}")
        frames = [FrameRecord(s, root / "labels" / (s.stem + ".label"), p) for s, p in zip(scans, poses)]
        return cls(frames, calib, remap)

    def load(self, i):
        rec = self.frames[i]
        try:
            cloud = read_scan(rec.scan_path.read_bytes())
            labels = read_labels(rec.label_path.read_bytes(), self.remap, expected=len(cloud))
        except FileNotFoundError as exc:
            raise FileNotFoundError(f"frame {i}: missing {exc.filename}") from None
        except FormatError as exc:
            raise FormatError(f"frame {i} ({rec.scan_path.name}): {exc}") from None
        return PointCloud(cloud.positions, cloud.features, labels)


def window_frames(num_frames, center, window):
    """Frames merged for ``center``: a centered window, truncated at sequence ends."""
    if window < 1:
        raise ContractError("window must be at least 1")
    lo = center - (window - 1) // 2
    hi = lo + window
    return list(range(max(lo, 0), min(hi, num_frames)))


def frame_to_center(poses, calib, center, j):
    """Tr^-1 . pose_center^-1 . pose_j . Tr: sensor frame j -> sensor frame ``center``."""
    return calib.inverse() @ poses[center].inverse() @ poses[j] @ calib


def aligned_frames(seq, center, window, loader=None):
    """[(cloud in center coordinates, sensor origin in center coordinates)] for the window."""
    loader = loader or seq.load
    poses = [f.pose for f in seq.frames]
    out = []
    for j in window_frames(len(seq), center, window):
        rel = frame_to_center(poses, seq.calib, center, j)
        out.append((transform_cloud(loader(j), rel), rel.translation.copy()))
    return out


def aggregate_frames(seq, center, window=70, loader=None):
    return PointCloud.concatenate(c for c, _ in aligned_frames(seq, center, window, loader))


# ---------------------------------------------------------------- ray traversal


def _clip_segments(a, b, dims):
    """Parametric [t0, t1] of each segment a + t (b - a) inside the box [0, dims]."""
    d = b - a
    t0 = np.zeros(len(a))
    t1 = np.ones(len(a))
    hit = np.ones(len(a), dtype=bool)
    for ax in range(3):
        da = d[:, ax]
        moving = da != 0
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (0.0 - a[:, ax]) / da
            tb = (dims[ax] - a[:, ax]) / da
        lo = np.where(moving, np.minimum(ta, tb), -np.inf)
        hi = np.where(moving, np.maximum(ta, tb), np.inf)
        outside = ~moving & ((a[:, ax] < 0) | (a[:, ax] >= dims[ax]))
        hit &= ~outside
        t0 = np.maximum(t0, lo)
        t1 = np.minimum(t1, hi)
    zero = np.all(d == 0, axis=1)
    hit &= (t0 < t1) | (zero & (t0 <= t1))
    return t0, t1, hit


def _walk(a, b, dims):
    """
    Incremental grid traversal of many segments in lockstep (unit cells, box [0, dims]).

    Yields (ray ids, cells, is_last) per step; a segment's cells come in ray order.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    dims_arr = np.asarray(dims)
    t0, t1, hit = _clip_segments(a, b, dims_arr)
    ids = np.nonzero(hit)[0]
    if not len(ids):
        return
    a, d, t0, t1 = a[ids], (b - a)[ids], t0[ids], t1[ids]
    start = a + t0[:, None] * d
    cell = np.clip(np.floor(start).astype(np.int64), 0, dims_arr - 1)
    step = np.sign(d).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        boundary = cell + (step > 0)
        t_max = np.where(step != 0, (boundary - a) / d, np.inf)
        t_delta = np.where(step != 0, 1.0 / np.abs(d), np.inf)
    rows = np.arange(len(ids))
    while len(ids):
        axis = np.argmin(t_max, axis=1)
        t_next = t_max[rows, axis]
        nxt = cell[rows, axis] + step[rows, axis]
        # rounding can leave the exit time a hair below t1; the grid wall ends the ray too
        last = (t_next >= t1) | (nxt < 0) | (nxt >= dims_arr[axis])
        yield ids, cell.copy(), last
        keep = ~last
        ids, cell, t_max, t_delta, t1, axis = ids[keep], cell[keep], t_max[keep], t_delta[keep], t1[keep], axis[keep]
        step = step[keep]
        rows = np.arange(len(ids))
        cell[rows, axis] += step[rows, axis]
        t_max[rows, axis] += t_delta[rows, axis]


def traverse_rays(origin, points, spec):
    """Cells visited by each segment origin -> point, as {ray index: [cells in order]}."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    o = np.asarray(spec.origin)
    a = np.broadcast_to((np.asarray(origin, dtype=np.float64) - o) / spec.voxel_size, points.shape)
    b = (points - o) / spec.voxel_size
    out = {i: [] for i in range(len(points))}
    for ids, cells, _ in _walk(a, b, spec.dims):
        for i, c in zip(ids, cells):
            out[int(i)].append(tuple(int(v) for v in c))
    return out


@dataclass
class Visibility:
    """Boolean (X, Y, Z) grids: cells a ray passed through, and cells holding a ray endpoint."""

    empty: np.ndarray
    occupied: np.ndarray

    @property
    def observed(self):
        return self.empty | self.occupied

    def merge(self, other):
        occ = self.occupied | other.occupied
        return Visibility((self.empty | other.empty) & ~occ, occ)


def raycast_visibility(points, origin, spec):
    """
    Carve free space from ``origin`` to every point. The endpoint cell of a point
    inside the volume is occupied; every other traversed cell is observed empty.
    Occupied wins where the two overlap.
    """
    points = getattr(points, "positions", points)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    o = np.asarray(spec.origin)
    a = np.broadcast_to((np.asarray(origin, dtype=np.float64) - o) / spec.voxel_size, points.shape)
    b = (points - o) / spec.voxel_size
    endpoint_inside = spec.contains(points)
    empty = np.zeros(spec.dims, dtype=bool)
    for ids, cells, last in _walk(a, b, spec.dims):
        # the final cell of a ray ending inside the volume is its endpoint, not free space
        free = ~(last & endpoint_inside[ids])
        c = cells[free]
        empty[c[:, 0], c[:, 1], c[:, 2]] = True
    occupied = np.zeros(spec.dims, dtype=bool)
    c = spec.cell_of(points[endpoint_inside])
    occupied[c[:, 0], c[:, 1], c[:, 2]] = True
    return Visibility(empty & ~occupied, occupied)


# ---------------------------------------------------------------- ground truth


def ground_truth_from_frames(frames, spec):
    """Vote labels of the merged cloud and carve free space from every frame's sensor origin."""
    vis = Visibility(np.zeros(spec.dims, dtype=bool), np.zeros(spec.dims, dtype=bool))
    clouds = []
    for cloud, origin in frames:
        vis = vis.merge(raycast_visibility(cloud.positions, origin, spec))
        clouds.append(cloud)
    merged = PointCloud.concatenate(clouds)
    inside = spec.contains(merged.positions)
    voted = majority_vote_labels(merged.subset(np.nonzero(inside)[0]), spec).labels
    out = np.full(spec.dims, INVALID_LABEL, dtype=np.uint8)
    out[vis.empty] = 0
    out[vis.occupied] = voted[vis.occupied]
    return LabeledVolume(spec, out)


def generate_gt(seq, center, window, spec, loader=None):
    return ground_truth_from_frames(aligned_frames(seq, center, window, loader), spec)


# ---------------------------------------------------------------- SSCV volumes

SSCV_MAGIC = b"SSCV"
SSCV_VERSION = 1
SSCV_HEADER = struct.Struct("<4sI3I3ff")


def _shortest_f32(v):
    """The shortest decimal that maps to the same float32, so 0.2 stays 0.2 on reload."""
    return float(np.format_float_positional(np.float32(v), unique=True, trim="0"))


def write_volume(volume):
    spec = volume.spec
    header = SSCV_HEADER.pack(SSCV_MAGIC, SSCV_VERSION, *spec.dims, *spec.origin, spec.voxel_size)
    return header + np.asarray(volume.labels, dtype=np.uint8).tobytes(order="F")


def read_volume(buf):
    buf = bytes(buf)
    if len(buf) < SSCV_HEADER.size:
        raise FormatError(f"volume header needs {SSCV_HEADER.size} bytes, got {len(buf)}", 0)
    magic, version, x, y, z, ox, oy, oz, vs = SSCV_HEADER.unpack_from(buf)
    if magic != SSCV_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != SSCV_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    expected = x * y * z
    actual = len(buf) - SSCV_HEADER.size
    if actual != expected:
        raise FormatError(f"payload length {actual} != expected {expected}", SSCV_HEADER.size)
    spec = VolumeSpec(tuple(_shortest_f32(v) for v in (ox, oy, oz)), _shortest_f32(vs), (x, y, z))
    labels = np.frombuffer(buf, dtype=np.uint8, offset=SSCV_HEADER.size).reshape((x, y, z), order="F")
    return LabeledVolume(spec, labels.copy())


# ---------------------------------------------------------------- synthetic scenes


@dataclass(frozen=True)
class SyntheticSceneSpec:
    volume: VolumeSpec
    num_classes: int = 4
    num_boxes: int = 8
    num_planes: int = 1
    sample_fraction: float = 0.1
    occlusion: float = 0.3
    density: float = 300.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.sample_fraction <= 1:
            raise ContractError("sample_fraction must lie in (0, 1]")
        if not 0 <= self.occlusion < 1:
            raise ContractError("occlusion must lie in [0, 1)")
        if self.num_classes < 2:
            raise ContractError("synthetic scenes need at least two classes")


def _box_family(cls, num_classes):
    """(footprint range, height range) in meters for object class ``cls`` (2..C)."""
    fam = (cls - 2) % 3
    if fam == 0:
        return (1.0, 2.0), (0.9, 1.3)   # large and tall
    if fam == 1:
        return (0.5, 0.9), (0.35, 0.55)  # small and low
    return (0.2, 0.25), (0.9, 1.3)     # thin and tall


def _sample_rect(rng, corner, u, v, density):
    area = np.linalg.norm(u) * np.linalg.norm(v)
    n = max(1, int(rng.poisson(area * density)))
    s = rng.random((n, 2))
    return corner + s[:, :1] * u + s[:, 1:] * v


def synth_dense(spec):
    """Densely sampled labeled primitives filling ``spec.volume``."""
    rng = np.random.default_rng(spec.seed)
    vol = spec.volume
    lo = np.asarray(vol.origin)
    ext = vol.extent
    vs = vol.voxel_size
    parts, labels = [], []
    ground_top = lo[2] + vs
    for p in range(spec.num_planes):
        z = lo[2] + vs * (0.25 + 0.5 * rng.random()) + p * vs
        pts = _sample_rect(rng, np.array([lo[0], lo[1], z]), np.array([ext[0], 0, 0]),
                           np.array([0, ext[1], 0]), spec.density)
        parts.append(pts)
        labels.append(np.full(len(pts), 1))
    for _ in range(spec.num_boxes):
        cls = int(rng.integers(2, spec.num_classes + 1))
        (f0, f1), (h0, h1) = _box_family(cls, spec.num_classes)
        sx, sy = rng.uniform(f0, f1, size=2)
        h = min(rng.uniform(h0, h1), lo[2] + ext[2] - ground_top - 1e-6)
        x0 = rng.uniform(lo[0], lo[0] + ext[0] - sx)
        y0 = rng.uniform(lo[1], lo[1] + ext[1] - sy)
        c = np.array([x0, y0, ground_top])
        ex, ey, ez = np.array([sx, 0, 0]), np.array([0, sy, 0]), np.array([0, 0, h])
        faces = [(c, ex, ez), (c + ey, ex, ez), (c, ey, ez), (c + ex, ey, ez), (c + ez, ex, ey)]
        for corner, u, v in faces:
            pts = _sample_rect(rng, corner, u, v, spec.density)
            parts.append(pts)
            labels.append(np.full(len(pts), cls))
    pos = np.concatenate(parts)
    lab = np.concatenate(labels)
    inside = vol.contains(pos)
    return PointCloud(pos[inside], None, lab[inside])


def sensor_origin(vol):
    lo = np.asarray(vol.origin)
    return lo + vol.extent * np.array([0.5, 0.5, 0.5])


def synth_generate(spec):
    """(sparse single-view sweep, complete ground-truth volume) for one synthetic scene."""
    dense_cloud = synth_dense(spec)
    gt = majority_vote_labels(dense_cloud, spec.volume)
    rng = np.random.default_rng([spec.seed, 1])
    n = len(dense_cloud)
    keep = np.sort(rng.choice(n, size=int(round(spec.sample_fraction * n)), replace=False))
    if spec.occlusion > 0 and len(keep):
        rel = dense_cloud.positions[keep] - sensor_origin(spec.volume)
        az = np.mod(np.arctan2(rel[:, 1], rel[:, 0]), 2 * np.pi)
        sectors = int(rng.integers(1, 4))
        widths = rng.dirichlet(np.ones(sectors)) * spec.occlusion * 2 * np.pi
        starts = rng.uniform(0, 2 * np.pi, size=sectors)
        hidden = np.zeros(len(keep), dtype=bool)
        for s, w in zip(starts, widths):
            hidden |= np.mod(az - s, 2 * np.pi) < w
        keep = keep[~hidden]
    sweep = dense_cloud.subset(keep)
    rel = sweep.positions - sensor_origin(spec.volume)
    intensity = np.exp(-np.linalg.norm(rel, axis=1) / 10.0)
    return PointCloud(sweep.positions, intensity[:, None], sweep.labels), gt


def write_synthetic_dataset(out_dir, volume, scenes, seed, num_classes=4, **scene_kwargs):
    """Write ``scenes`` sweeps as KITTI-format scans/labels plus SSCV targets."""
    out = Path(out_dir)
    for sub in ("velodyne", "labels", "voxels"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    manifest = []
    for i in range(scenes):
        spec = SyntheticSceneSpec(volume, num_classes=num_classes, seed=seed * 100003 + i, **scene_kwargs)
        sweep, gt = synth_generate(spec)
        name = f"{i:06d}"
        (out / "velodyne" / f"{name}.bin").write_bytes(write_scan(sweep))
        (out / "labels" / f"{name}.label").write_bytes(write_labels(sweep.labels))
        (out / "voxels" / f"{name}.sscv").write_bytes(write_volume(gt))
        manifest.append(f"{name} velodyne/{name}.bin labels/{name}.label voxels/{name}.sscv\n")
    (out / "poses.txt").write_text(write_poses([Pose.identity()] * scenes))
    (out / "calib.txt").write_text(write_calib(Pose.identity()))
    (out / "manifest.txt").write_text("".join(manifest))
    (out / "dataset.cfg").write_text(
        f"num_classes = {num_classes}\nscenes = {scenes}\nseed = {seed}\n"
        f"origin = {','.join(repr(v) for v in volume.origin)}\n"
        f"voxel_size = {volume.voxel_size!r}\ndims = {','.join(str(v) for v in volume.dims)}\n")
    return out


@dataclass
class Sample:
    cloud: PointCloud
    gt: LabeledVolume


def read_keyvalue(text):
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"expected 'key = value', got {line!r}", lineno)
        out[key.strip()] = value.strip()
    return out


def load_dataset(root):
    """Samples listed in a synthetic dataset directory's manifest."""
    root = Path(root)
    manifest = root / "manifest.txt"
    if not manifest.is_file():
        raise FileNotFoundError(f"missing manifest: {manifest}")
    samples = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 4:
            raise FormatError(f"manifest line needs 4 fields: {line!r}", lineno)
        cloud = read_scan((root / parts[1]).read_bytes())
        labels = read_labels((root / parts[2]).read_bytes(), expected=len(cloud))
        gt = read_volume((root / parts[3]).read_bytes())
        samples.append(Sample(PointCloud(cloud.positions, cloud.features, labels), gt))
    return samples


def dataset_spec(root):
    cfg = read_keyvalue((Path(root) / "dataset.cfg").read_text())
    return (VolumeSpec(tuple(float(v) for v in cfg["origin"].split(",")), float(cfg["voxel_size"]),
                       tuple(int(v) for v in cfg["dims"].split(","))), int(cfg["num_classes"]))


def write_bytes_atomic(path, data):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def synthetic_samples(volume, count, seed, num_classes=4, **scene_kwargs):
    """In-memory counterpart of :func:`write_synthetic_dataset` (same scene seeds)."""
    out = []
    for i in range(count):
        spec = SyntheticSceneSpec(volume, num_classes=num_classes, seed=seed * 100003 + i, **scene_kwargs)
        sweep, gt = synth_generate(spec)
        out.append(Sample(sweep, gt))
    return out
