"""
The joint network: a sparse-conv U-Net for point segmentation, a dense completion
decoder fed with the segmentation probabilities, and point-voxel refinement.

The completion branch only ever reads segmentation outputs, so inference can
skip it and still produce the same segmentation logits bit for bit.
"""

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import dense, pvi
from .autodiff import ParamStore, Tensor
from .dense import DenseVolume
from .errors import ContractError, FormatError
from .geometry import (
    LabeledVolume,
    PointCloud,
    VolumeSpec,
    devoxelize,
    lattice_voxelize,
)
from .sparse import KernelWeights, build_rulebook, sparse_pool, sparse_unpool, submanifold_conv

SLOPE = 0.01


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    seg_channels: tuple
    voxel_size_seg: float
    ssc_volume: VolumeSpec
    ssc_blocks: int
    ssc_width: int
    embed_dim: int
    knn_k: int
    pvi_layers: int
    pvi_hidden: int = 32
    preset: str = "toy"

    def __post_init__(self):
        if self.num_classes < 1 or not self.seg_channels:
            raise ContractError("need at least one class and one segmentation block")
        if any(d % 2 for d in self.ssc_volume.dims):
            raise ContractError(f"completion dims {self.ssc_volume.dims} must be even")
        if self.knn_k < 1 or self.pvi_layers < 0:
            raise ContractError("knn_k must be positive and pvi_layers non-negative")

    @classmethod
    def toy(cls, **overrides):
        cfg = cls(num_classes=4, seg_channels=(8, 16, 24), voxel_size_seg=0.1,
                  ssc_volume=VolumeSpec((0.0, 0.0, 0.0), 0.2, (32, 32, 8)),
                  ssc_blocks=3, ssc_width=16, embed_dim=16, knn_k=8, pvi_layers=1, preset="toy")
        return replace(cfg, **overrides)

    @classmethod
    def full(cls, **overrides):
        cfg = cls(num_classes=19, seg_channels=(16, 32, 48, 64, 80, 96, 112), voxel_size_seg=0.05,
                  ssc_volume=VolumeSpec.semantic_kitti(), ssc_blocks=5, ssc_width=32,
                  embed_dim=32, knn_k=8, pvi_layers=1, preset="full")
        return replace(cfg, **overrides)

    @classmethod
    def from_preset(cls, name, **overrides):
        if name not in ("toy", "full"):
            raise ContractError(f"unknown preset {name!r}")
        return getattr(cls, name)(**overrides)

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "ssc_volume":
                lines.append(f"ssc_origin = {','.join(repr(float(c)) for c in v.origin)}")
                lines.append(f"ssc_voxel_size = {v.voxel_size!r}")
                lines.append(f"ssc_dims = {','.join(str(d) for d in v.dims)}")
            elif isinstance(v, tuple):
                lines.append(f"{f.name} = {','.join(str(c) for c in v)}")
            else:
                lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        from .datagen import read_keyvalue
        kv = read_keyvalue(text)
        try:
            spec = VolumeSpec(tuple(float(c) for c in kv.pop("ssc_origin").split(",")),
                              float(kv.pop("ssc_voxel_size")),
                              tuple(int(c) for c in kv.pop("ssc_dims").split(",")))
            return cls(
                num_classes=int(kv.pop("num_classes")),
                seg_channels=tuple(int(c) for c in kv.pop("seg_channels").split(",")),
                voxel_size_seg=float(kv.pop("voxel_size_seg")),
                ssc_volume=spec,
                ssc_blocks=int(kv.pop("ssc_blocks")),
                ssc_width=int(kv.pop("ssc_width")),
                embed_dim=int(kv.pop("embed_dim")),
                knn_k=int(kv.pop("knn_k")),
                pvi_layers=int(kv.pop("pvi_layers")),
                pvi_hidden=int(kv.pop("pvi_hidden", 32)),
                preset=kv.pop("preset", "toy"),
            )
        except KeyError as exc:
            raise FormatError(f"model config is missing key {exc.args[0]!r}") from None
        except ValueError as exc:
            raise FormatError(f"bad model config value: {exc}") from None


def seg_input_features(cloud):
    """Per-point network input: a constant 1, the position, and any per-point attributes."""
    return np.column_stack([np.ones(len(cloud)), cloud.positions, cloud.features])


@dataclass
class ForwardOutput:
    f_enc: Tensor
    f_se: Tensor
    seg_logits: Tensor
    coarse_ssc: DenseVolume = None
    refined_ssc: DenseVolume = None
    counters: dict = field(default_factory=dict)


class JointNet:
    """Parameters plus forward passes. Segmentation parameters carry seg=True in the store."""

    def __init__(self, cfg, seed=0, num_point_features=1, store=None):
        self.cfg = cfg
        self.in_channels = 4 + num_point_features
        if store is not None:
            self.in_channels = store["seg.in.w"].shape[1]
        else:
            store = ParamStore()
            self._init_params(store, np.random.default_rng(seed))
        self.store = store

    # ------------------------------------------------------------ parameters

    def _init_params(self, s, rng):
        cfg = self.cfg
        C, ch, de = cfg.num_classes, cfg.seg_channels, cfg.embed_dim

        def he(shape, fan_in, gain=2.0):
            return rng.normal(0.0, math.sqrt(gain / fan_in), size=shape)

        def conv(name, k, cin, cout, seg):
            s.add(f"{name}.w", he((k ** 3, cin, cout), k ** 3 * cin), seg)
            s.add(f"{name}.b", np.zeros(cout), seg)

        def norm(name, c, seg):
            s.add(f"{name}.gain", np.ones(c), seg)
            s.add(f"{name}.shift", np.zeros(c), seg)

        def lin(name, cin, cout, seg, zero=False):
            s.add(f"{name}.w", np.zeros((cin, cout)) if zero else he((cin, cout), cin), seg)
            s.add(f"{name}.b", np.zeros(cout), seg)

        # segmentation U-Net
        conv("seg.in", 3, self.in_channels, ch[0], True)
        for lvl, c in enumerate(ch):
            cin = ch[lvl - 1] if lvl else ch[0]
            conv(f"seg.enc{lvl}.c1", 3, cin, c, True)
            norm(f"seg.enc{lvl}.n1", c, True)
            conv(f"seg.enc{lvl}.c2", 3, c, c, True)
            norm(f"seg.enc{lvl}.n2", c, True)
        for lvl in range(len(ch) - 2, -1, -1):
            lin(f"seg.dec{lvl}.proj", ch[lvl] + ch[lvl + 1], ch[lvl], True)
            conv(f"seg.dec{lvl}.c1", 3, ch[lvl], ch[lvl], True)
            norm(f"seg.dec{lvl}.n1", ch[lvl], True)
            conv(f"seg.dec{lvl}.c2", 3, ch[lvl], ch[lvl], True)
            norm(f"seg.dec{lvl}.n2", ch[lvl], True)
        lin("seg.mlp1", ch[0], de, True)
        lin("seg.mlp2", ch[0], de, True)
        lin("seg.mlp3", de, C, True)

        # completion decoder
        w = cfg.ssc_width
        conv("ssc.stem", 3, C, w, False)
        for i in range(cfg.ssc_blocks):
            conv(f"ssc.block{i}.c1", 3, w, w, False)
            norm(f"ssc.block{i}.n1", w, False)
            conv(f"ssc.block{i}.c2", 3, w, w, False)
            norm(f"ssc.block{i}.n2", w, False)
        conv("ssc.out", 1, 9 * w, 8 * (C + 1), False)
        # lean the initial coarse volume toward "empty" so few centers reach the refinement
        b = s["ssc.out.b"].data.reshape(C + 1, 8)
        b[0] = math.log(C + 1)

        # point-voxel refinement
        lin("pvi.proj", de, C + 1, False)
        edge_in = 2 * (3 + C + 1)
        for layer in range(cfg.pvi_layers):
            widths = [edge_in] + [cfg.pvi_hidden] * 3
            for j in range(3):
                lin(f"pvi.l{layer}.phi{j}", widths[j], widths[j + 1], False)
            lin(f"pvi.l{layer}.head", cfg.pvi_hidden, C + 1, False, zero=True)

    def p(self, name):
        return self.store[name]

    def _kw(self, name):
        return KernelWeights(self.p(f"{name}.w"), self.p(f"{name}.b"))

    def _sparse_block(self, x, rb, name):
        for j in (1, 2):
            x = submanifold_conv(x, self._kw(f"{name}.c{j}"), rb)
            act = dense.leaky_relu(
                dense.affine(x.features, self.p(f"{name}.n{j}.gain"), self.p(f"{name}.n{j}.shift")), SLOPE)
            x = x.with_features(act)
        return x

    # ------------------------------------------------------------ forward passes

    def seg_forward(self, cloud):
        """(F_enc, F_SE, seg_logits) for every point of ``cloud``."""
        if len(cloud) == 0:
            raise ContractError("segmentation needs a non-empty cloud")
        cfg = self.cfg
        vox, pv_map = lattice_voxelize(PointCloud(cloud.positions, seg_input_features(cloud)),
                                       cfg.voxel_size_seg)
        rb = build_rulebook(vox, 3)
        x = submanifold_conv(vox, self._kw("seg.in"), rb)
        skips, pools = [], []
        levels = len(cfg.seg_channels)
        for lvl in range(levels):
            x = self._sparse_block(x, rb, f"seg.enc{lvl}")
            if lvl < levels - 1:
                skips.append((x, rb))
                x, pmap = sparse_pool(x)
                pools.append(pmap)
                rb = build_rulebook(x, 3)
        for lvl in range(levels - 2, -1, -1):
            skip, rb = skips[lvl]
            up = sparse_unpool(x, pools[lvl])
            merged = dense.concat([skip.features, up.features])
            proj = dense.linear(merged, self.p(f"seg.dec{lvl}.proj.w"), self.p(f"seg.dec{lvl}.proj.b"))
            x = self._sparse_block(skip.with_features(proj), rb, f"seg.dec{lvl}")
        f_enc = devoxelize(x, pv_map)
        f_se = dense.leaky_relu(dense.linear(f_enc, self.p("seg.mlp1.w"), self.p("seg.mlp1.b")), SLOPE)
        fused = dense.add(f_se, dense.linear(f_enc, self.p("seg.mlp2.w"), self.p("seg.mlp2.b")))
        logits = dense.linear(fused, self.p("seg.mlp3.w"), self.p("seg.mlp3.b"))
        return f_enc, f_se, logits

    def ssc_input(self, seg_probs, cloud):
        """Mean member-point probability per completion voxel; zeros where no point falls."""
        spec = self.cfg.ssc_volume
        probs = seg_probs if isinstance(seg_probs, Tensor) else Tensor(seg_probs)
        if probs.shape != (len(cloud), self.cfg.num_classes):
            raise ContractError(f"probabilities {probs.shape} for {len(cloud)} points and "
                                f"{self.cfg.num_classes} classes")
        rowsum = probs.data.sum(axis=1)
        if len(rowsum) and np.max(np.abs(rowsum - 1.0)) > 1e-6:
            raise ContractError("segmentation probabilities must sum to 1 per point")
        inside = np.nonzero(spec.contains(cloud.positions))[0]
        # the volume is stored (X, Y, Z, C) in C order
        rows = np.ravel_multi_index(tuple(spec.cell_of(cloud.positions[inside]).T), spec.dims)
        vol = dense.segment_mean(dense.take_rows(probs, inside), rows, spec.n_cells)
        return dense.reshape(vol, spec.dims + (self.cfg.num_classes,)), inside

    def ssc_decode(self, volume):
        """Coarse C+1 logits from an (X, Y, Z, C) input volume."""
        cfg = self.cfg
        if tuple(volume.shape[:3]) != cfg.ssc_volume.dims:
            raise ContractError(f"input volume {volume.shape[:3]} does not match {cfg.ssc_volume.dims}")
        p = self.p
        stem = dense.leaky_relu(dense.conv3d(volume, p("ssc.stem.w"), p("ssc.stem.b")), SLOPE)
        x = dense.max_pool3d(stem, 2)
        for i in range(cfg.ssc_blocks):
            name = f"ssc.block{i}"
            h = x
            for j in (1, 2):
                h = dense.conv3d(h, p(f"{name}.c{j}.w"), p(f"{name}.c{j}.b"))
                h = dense.affine(h, p(f"{name}.n{j}.gain"), p(f"{name}.n{j}.shift"))
                if j == 1:
                    h = dense.leaky_relu(h, SLOPE)
            x = dense.leaky_relu(dense.add(x, h), SLOPE)
        multi = dense.concat([dense.voxel_unshuffle(stem, 2), x])
        out = dense.conv3d(multi, p("ssc.out.w"), p("ssc.out.b"))
        return dense.voxel_shuffle(out, 2)

    def ssc_forward(self, seg_probs, cloud):
        vol, _ = self.ssc_input(seg_probs, cloud)
        return DenseVolume(self.cfg.ssc_volume, self.ssc_decode(vol))

    def pvi_layers(self):
        out = []
        for layer in range(self.cfg.pvi_layers):
            phi = [(self.p(f"pvi.l{layer}.phi{j}.w"), self.p(f"pvi.l{layer}.phi{j}.b")) for j in range(3)]
            out.append(pvi.GraphLayer(phi, self.p(f"pvi.l{layer}.head.w"), self.p(f"pvi.l{layer}.head.b")))
        return out

    def pvi_refine(self, coarse, cloud, f_se, inside, counters):
        spec = self.cfg.ssc_volume
        centers = pvi.extract_voxel_centers(coarse.data, spec)
        counters["pvi_centers"] = len(centers)
        if len(centers) == 0 or len(inside) == 0 or self.cfg.pvi_layers == 0:
            return DenseVolume(spec, coarse.data)
        pts = cloud.positions[inside]
        k = min(self.cfg.knn_k, len(pts))
        graph = pvi.knn_query(centers.positions, pts, k)
        counters["pvi_graphs"] = counters.get("pvi_graphs", 0) + 1
        counters["pvi_edges"] = int(graph.neighbor_ids.size)
        point_feat = dense.linear(dense.take_rows(f_se, inside), self.p("pvi.proj.w"), self.p("pvi.proj.b"))
        _, delta = pvi.gcn_refine(centers, graph, pts, point_feat, self.pvi_layers(), SLOPE)
        return DenseVolume(spec, pvi.refine_volume(coarse.data, centers, delta))

    def full_forward(self, cloud, mode="train"):
        if mode not in ("train", "infer"):
            raise ContractError(f"mode must be 'train' or 'infer', got {mode!r}")
        counters = {"ssc_volumes": 0, "pvi_graphs": 0, "pvi_centers": 0, "pvi_edges": 0}
        f_enc, f_se, logits = self.seg_forward(cloud)
        out = ForwardOutput(f_enc, f_se, logits, counters=counters)
        if mode == "infer":
            return out
        probs = dense.softmax(logits)
        vol, inside = self.ssc_input(probs, cloud)
        coarse = DenseVolume(self.cfg.ssc_volume, self.ssc_decode(vol))
        counters["ssc_volumes"] += 1
        out.coarse_ssc = coarse
        out.refined_ssc = self.pvi_refine(coarse, cloud, f_se, inside, counters)
        return out


# ---------------------------------------------------------------- augmentation


def _rotation_z(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class SegAugment:
    """Rotation about the vertical axis through ``center``, then uniform scaling about it."""

    theta: float
    scale: float
    center: tuple = (0.0, 0.0, 0.0)

    @classmethod
    def draw(cls, rng, center=(0.0, 0.0, 0.0)):
        return cls(float(rng.uniform(0.0, 2 * math.pi)), float(rng.uniform(0.9, 1.1)), tuple(center))

    @classmethod
    def identity(cls):
        return cls(0.0, 1.0)

    def apply(self, cloud):
        c = np.asarray(self.center, dtype=np.float64)
        pos = (cloud.positions - c) @ (self.scale * _rotation_z(self.theta)).T + c
        return PointCloud(pos, cloud.features, cloud.labels)


def augment_seg(cloud, seed, center=(0.0, 0.0, 0.0)):
    return SegAugment.draw(np.random.default_rng(seed), center).apply(cloud)


@dataclass(frozen=True)
class GridAugment:
    """Lossless flips along x and y, then ``quarter_turns`` x 90 degrees about the vertical axis."""

    flip_x: bool
    flip_y: bool
    quarter_turns: int

    @classmethod
    def draw(cls, rng):
        fx, fy = (bool(v) for v in rng.integers(0, 2, size=2))
        return cls(fx, fy, int(rng.integers(0, 4)))

    def apply_labels(self, labels):
        a = np.asarray(labels)
        if self.flip_x:
            a = a[::-1]
        if self.flip_y:
            a = a[:, ::-1]
        for _ in range(self.quarter_turns % 4):
            if a.shape[0] != a.shape[1]:
                raise ContractError("quarter turns need a square horizontal grid")
            # new[n - 1 - j, i] = old[i, j]
            a = a.transpose(1, 0, *range(2, a.ndim))[::-1]
        return np.ascontiguousarray(a)

    def apply_points(self, positions, spec):
        lo = np.asarray(spec.origin)
        mid = lo + spec.extent / 2
        p = np.array(positions, dtype=np.float64)
        if self.flip_x:
            p[:, 0] = 2 * mid[0] - p[:, 0]
        if self.flip_y:
            p[:, 1] = 2 * mid[1] - p[:, 1]
        for _ in range(self.quarter_turns % 4):
            x, y = p[:, 0] - mid[0], p[:, 1] - mid[1]
            p[:, 0], p[:, 1] = mid[0] - y, mid[1] + x
        return p

    def apply(self, cloud, volume):
        spec = volume.spec
        moved = PointCloud(self.apply_points(cloud.positions, spec), cloud.features, cloud.labels)
        return moved, LabeledVolume(spec, self.apply_labels(volume.labels))


def augment_ssc(cloud, volume, seed):
    return GridAugment.draw(np.random.default_rng(seed)).apply(cloud, volume)


def vote_inference(net, cloud, votes, seed=0, augments=None, center=(0.0, 0.0, 0.0)):
    """
    Mean softmax over ``votes`` augmented copies. Points keep their order under
    augmentation, so each row maps straight back to the original point.
    """
    if votes < 1:
        raise ContractError("votes must be at least 1")
    if augments is None:
        augments = [SegAugment.draw(np.random.default_rng([seed, v]), center) for v in range(votes)]
    if len(augments) != votes:
        raise ContractError(f"{len(augments)} augmentations for {votes} votes")
    acc = None
    for aug in augments:
        _, _, logits = net.seg_forward(aug.apply(cloud))
        probs = dense.softmax(logits).data
        acc = probs if acc is None else acc + probs
    return acc / votes
