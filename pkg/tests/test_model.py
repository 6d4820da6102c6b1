import time

import numpy as np
import pytest

from jointseg import dense
from jointseg.autodiff import Tape
from jointseg.datagen import SyntheticSceneSpec, synth_generate
from jointseg.errors import ContractError, FormatError
from jointseg.geometry import LabeledVolume, PointCloud, VolumeSpec
from jointseg.losses import LossState, completion_loss, seg_loss, uncertainty_loss
from jointseg.model import (
    GridAugment,
    JointNet,
    ModelConfig,
    SegAugment,
    augment_seg,
    augment_ssc,
    vote_inference,
)

TOY = ModelConfig.toy()


def toy_scene(seed, points=None):
    sweep, gt = synth_generate(SyntheticSceneSpec(TOY.ssc_volume, seed=seed))
    if points is not None:
        idx = np.random.default_rng(seed).choice(len(sweep), size=min(points, len(sweep)), replace=False)
        sweep = sweep.subset(np.sort(idx))
    return sweep, gt


def micro_config():
    return ModelConfig(num_classes=2, seg_channels=(4, 6), voxel_size_seg=0.25,
                       ssc_volume=VolumeSpec((0.0, 0.0, 0.0), 0.5, (4, 4, 2)), ssc_blocks=1, ssc_width=4,
                       embed_dim=4, knn_k=3, pvi_layers=1, pvi_hidden=5)


def micro_scene(seed):
    r = np.random.default_rng(seed)
    pos = r.uniform(0.05, 1.0, size=(40, 3)) * [2, 2, 1]
    return PointCloud(pos, r.random((40, 1)), r.integers(1, 3, size=40))


class TestConfig:
    def test_presets(self):
        full = ModelConfig.full()
        assert full.seg_channels == (16, 32, 48, 64, 80, 96, 112)
        assert full.voxel_size_seg == 0.05 and full.ssc_blocks == 5 and full.ssc_width == 32
        assert full.pvi_layers == 1 and full.ssc_volume.dims == (256, 256, 32)
        assert TOY.ssc_volume.dims == (32, 32, 8) and len(TOY.seg_channels) == 3

    def test_text_round_trip(self):
        for cfg in (TOY, ModelConfig.full(), micro_config()):
            assert ModelConfig.from_text(cfg.to_text()) == cfg

    def test_bad_text(self):
        with pytest.raises(FormatError):
            ModelConfig.from_text("num_classes = 4\n")
        with pytest.raises(ContractError):
            ModelConfig.from_preset("huge")

    def test_odd_dims_rejected(self):
        with pytest.raises(ContractError):
            ModelConfig.toy(ssc_volume=VolumeSpec((0, 0, 0), 0.2, (31, 32, 8)))


class TestSegmentation:
    net = JointNet(TOY, seed=0)

    def test_shapes(self):
        cloud, _ = toy_scene(0, points=100)
        f_enc, f_se, logits = self.net.seg_forward(cloud)
        assert f_enc.shape == (100, TOY.seg_channels[0])
        assert f_se.shape == (100, TOY.embed_dim)
        assert logits.shape == (100, TOY.num_classes)

    def test_identical_points_identical_rows(self):
        cloud, _ = toy_scene(1, points=50)
        pos = np.vstack([cloud.positions, cloud.positions[:1]])
        feats = np.vstack([cloud.features, cloud.features[:1]])
        outs = self.net.seg_forward(PointCloud(pos, feats))
        for t in outs:
            np.testing.assert_array_equal(t.data[0], t.data[-1])

    def test_zero_head_gives_bias(self):
        net = JointNet(TOY, seed=3)
        net.store["seg.mlp3.w"].data[:] = 0.0
        net.store["seg.mlp3.b"].data[:] = [0.5, -1.0, 2.0, 0.0]
        _, _, logits = net.seg_forward(toy_scene(2, points=30)[0])
        np.testing.assert_array_equal(logits.data, np.tile([0.5, -1.0, 2.0, 0.0], (30, 1)))
        assert np.all(logits.data.argmax(axis=1) == 2)

    def test_empty_cloud(self):
        with pytest.raises(ContractError):
            self.net.seg_forward(PointCloud(np.zeros((0, 3)), np.zeros((0, 1))))

    def test_outputs_finite(self):
        for seed in range(3):
            out = self.net.full_forward(toy_scene(seed)[0], "train")
            assert np.all(np.isfinite(out.seg_logits.data))
            assert np.all(np.isfinite(out.refined_ssc.data.data))


class TestCompletion:
    def test_constant_output_with_zero_layer(self):
        net = JointNet(TOY, seed=1)
        net.store["ssc.out.w"].data[:] = 0.0
        out = net.ssc_decode(np.zeros((32, 32, 8, 4))).data
        assert out.shape == (32, 32, 8, 5)
        np.testing.assert_array_equal(out, np.broadcast_to(out[0, 0, 0], out.shape))

    def test_toy_dims(self):
        net = JointNet(TOY, seed=1)
        cloud, _ = toy_scene(4)
        coarse = net.ssc_forward(dense.softmax(net.seg_forward(cloud)[2]), cloud)
        assert coarse.data.shape == (32, 32, 8, 5)

    def test_full_dims(self):
        cfg = ModelConfig.full()
        net = JointNet(cfg, seed=0)
        out = net.ssc_decode(np.zeros((256, 256, 32, 19), dtype=np.float64))
        assert out.shape == (256, 256, 32, 20)

    def test_input_volume_is_voxelized_cloud(self):
        net = JointNet(TOY, seed=2)
        cloud, _ = toy_scene(5)
        extra = PointCloud(np.array([[-1.0, 3.0, 0.5], [3.0, 9.0, 0.5]]), np.zeros((2, 1)), [1, 2])
        cloud = PointCloud.concatenate([cloud, extra])
        probs = dense.softmax(net.seg_forward(cloud)[2])
        vol, inside = net.ssc_input(probs, cloud)
        occupied = set(zip(*np.nonzero(np.any(vol.data != 0, axis=-1))))
        spec = TOY.ssc_volume
        cells = set(map(tuple, spec.cell_of(cloud.positions[spec.contains(cloud.positions)])))
        assert occupied == cells
        assert len(inside) == len(cloud) - 2
        np.testing.assert_allclose(vol.data.sum(axis=-1)[tuple(np.array(list(cells)).T)], 1.0, atol=1e-12)

    def test_probabilities_must_be_normalized(self):
        net = JointNet(TOY, seed=2)
        cloud, _ = toy_scene(5, points=20)
        with pytest.raises(ContractError):
            net.ssc_input(np.full((20, 4), 0.3), cloud)


class TestModes:
    def test_disposability(self):
        net = JointNet(TOY, seed=4)
        for seed in range(3):
            cloud, _ = toy_scene(seed)
            train = net.full_forward(cloud, "train")
            infer = net.full_forward(cloud, "infer")
            np.testing.assert_array_equal(train.seg_logits.data, infer.seg_logits.data)
            assert infer.coarse_ssc is None and infer.refined_ssc is None
            assert set(infer.counters.values()) == {0}
            assert train.counters["ssc_volumes"] == 1

    def test_zero_head_refinement_is_identity(self):
        net = JointNet(TOY, seed=5)
        # drop the empty-class lean so the refinement sees many centers
        net.store["ssc.out.b"].data[:] = 0.0
        out = net.full_forward(toy_scene(6)[0], "train")
        assert out.counters["pvi_centers"] > 100 and out.counters["pvi_edges"] > 0
        np.testing.assert_array_equal(out.refined_ssc.data.data, out.coarse_ssc.data.data)

    def test_bad_mode(self):
        with pytest.raises(ContractError):
            JointNet(TOY).full_forward(toy_scene(0, points=10)[0], "eval")

    def test_budget(self):
        net = JointNet(TOY, seed=0)
        cloud, gt = toy_scene(7, points=500)
        loss = LossState(net.store, np.ones(4), np.ones(5))
        start = time.perf_counter()
        with Tape() as tape:
            out = net.full_forward(cloud, "train")
            ls = seg_loss(out.seg_logits, cloud.labels, loss.seg_weights)
            lc = completion_loss(dense.reshape(out.refined_ssc.data, (-1, 5)), gt.labels.reshape(-1),
                                 loss.complet_weights)
            tape.backward(uncertainty_loss(ls, lc, loss.s1, loss.s2))
        assert time.perf_counter() - start < 5.0


def joint_loss(net, loss, cloud, gt):
    C = net.cfg.num_classes
    out = net.full_forward(cloud, "train")
    ls = seg_loss(out.seg_logits, cloud.labels, loss.seg_weights)
    lc = completion_loss(dense.reshape(out.refined_ssc.data, (-1, C + 1)), gt.reshape(-1), loss.complet_weights)
    return ls, lc, uncertainty_loss(ls, lc, loss.s1, loss.s2)


class TestGradients:
    def setup_net(self, seed):
        cfg = micro_config()
        net = JointNet(cfg, seed=seed)
        r = np.random.default_rng(seed)
        # a non-zero residual head so the refinement path carries gradient
        net.store["pvi.l0.head.w"].data[:] = r.normal(size=net.store["pvi.l0.head.w"].shape)
        net.store["ssc.out.b"].data[:] = r.normal(size=net.store["ssc.out.b"].shape)
        loss = LossState(net.store, np.array([1.0, 1.5]), np.array([0.5, 1.0, 2.0]), r)
        gt = r.choice([0, 1, 2, 255], size=cfg.ssc_volume.dims)
        return net, loss, gt

    def test_segmentation_loss_reaches_only_segmentation(self):
        net, loss, gt = self.setup_net(0)
        cloud = micro_scene(0)
        with Tape() as tape:
            ls, _, _ = joint_loss(net, loss, cloud, gt)
            tape.backward(ls)
        grads = net.store.grads()
        assert all(np.all(grads[n] == 0) for n in net.store.names(False))
        assert any(np.any(grads[n] != 0) for n in net.store.names(True))

    def test_completion_loss_reaches_both_parts(self):
        net, loss, gt = self.setup_net(1)
        with Tape() as tape:
            _, lc, _ = joint_loss(net, loss, micro_scene(1), gt)
            tape.backward(lc)
        grads = net.store.grads()
        for prefix in ("seg.", "ssc.", "pvi."):
            assert any(np.any(grads[n] != 0) for n in net.store if n.startswith(prefix))

    def test_end_to_end_finite_differences(self):
        net, loss, gt = self.setup_net(2)
        cloud = micro_scene(2)
        net.store.zero_grad()
        with Tape() as tape:
            _, _, total = joint_loss(net, loss, cloud, gt)
            tape.backward(total)
        grads = net.store.grads()
        r = np.random.default_rng(0)
        eps = 1e-6
        worst = 0.0
        for name in net.store:
            p = net.store[name]
            flat = p.data.reshape(-1)
            for i in r.choice(flat.size, size=min(2, flat.size), replace=False):
                keep = flat[i]
                flat[i] = keep + eps
                up = joint_loss(net, loss, cloud, gt)[2].item()
                flat[i] = keep - eps
                down = joint_loss(net, loss, cloud, gt)[2].item()
                flat[i] = keep
                fd = (up - down) / (2 * eps)
                worst = max(worst, abs(fd - grads[name].reshape(-1)[i]) / max(1.0, abs(fd)))
        assert worst < 1e-4


class TestAugmentation:
    spec = TOY.ssc_volume

    def test_quarter_turn_group(self, rng):
        labels = rng.integers(0, 5, size=(32, 32, 8)).astype(np.uint8)
        aug = GridAugment(False, False, 1)
        out = labels
        for _ in range(4):
            out = aug.apply_labels(out)
        np.testing.assert_array_equal(out, labels)
        assert not np.array_equal(aug.apply_labels(labels), labels)

    def test_flip_involution(self, rng):
        labels = rng.integers(0, 5, size=(32, 32, 8)).astype(np.uint8)
        aug = GridAugment(True, True, 0)
        np.testing.assert_array_equal(aug.apply_labels(aug.apply_labels(labels)), labels)

    @pytest.mark.parametrize("fx,fy,turns", [(a, b, t) for a in (False, True) for b in (False, True) for t in range(4)])
    def test_labels_follow_points(self, rng, fx, fy, turns):
        cells = rng.integers(0, [32, 32, 8], size=(30, 3))
        pos = self.spec.center_of(cells)
        labels = np.zeros((32, 32, 8), dtype=np.uint8)
        labels[tuple(cells.T)] = rng.integers(1, 5, size=30)
        aug = GridAugment(fx, fy, turns)
        moved = aug.apply_points(pos, self.spec)
        new = aug.apply_labels(labels)
        assert np.all(self.spec.contains(moved))
        np.testing.assert_array_equal(new[tuple(self.spec.cell_of(moved).T)], labels[tuple(cells.T)])
        assert sorted(new.reshape(-1)) == sorted(labels.reshape(-1))

    def test_scale_example(self):
        out = SegAugment(0.0, 1.1).apply(PointCloud(np.array([[1.0, 0.0, 0.0]])))
        np.testing.assert_allclose(out.positions, [[1.1, 0.0, 0.0]], rtol=1e-15)

    def test_rotation_keeps_height_and_radius(self, rng):
        cloud = PointCloud(rng.normal(size=(20, 3)))
        out = SegAugment(1.234, 1.0).apply(cloud)
        np.testing.assert_array_equal(out.positions[:, 2], cloud.positions[:, 2])
        np.testing.assert_allclose(np.linalg.norm(out.positions[:, :2], axis=1),
                                   np.linalg.norm(cloud.positions[:, :2], axis=1), rtol=1e-12)

    def test_seeded_repeat(self):
        cloud, gt = toy_scene(3)
        np.testing.assert_array_equal(augment_seg(cloud, 9).positions, augment_seg(cloud, 9).positions)
        a, b = augment_ssc(cloud, gt, 9), augment_ssc(cloud, gt, 9)
        np.testing.assert_array_equal(a[0].positions, b[0].positions)
        np.testing.assert_array_equal(a[1].labels, b[1].labels)
        draws = {SegAugment.draw(np.random.default_rng(s)) for s in range(50)}
        assert all(0 <= d.theta < 2 * np.pi and 0.9 <= d.scale <= 1.1 for d in draws)

    def test_volume_shape_checked(self):
        vol = LabeledVolume(VolumeSpec((0, 0, 0), 1.0, (2, 4, 1)), np.zeros((2, 4, 1), np.uint8))
        with pytest.raises(ContractError):
            GridAugment(False, False, 1).apply(PointCloud(np.zeros((1, 3))), vol)


class TestVoting:
    net = JointNet(TOY, seed=6)

    def test_single_identity_vote(self):
        cloud, _ = toy_scene(8, points=200)
        plain = dense.softmax(self.net.seg_forward(cloud)[2]).data
        np.testing.assert_array_equal(vote_inference(self.net, cloud, 1, augments=[SegAugment.identity()]), plain)

    def test_repeated_vote(self):
        cloud, _ = toy_scene(8, points=200)
        aug = SegAugment(0.7, 1.05, (3.2, 3.2, 0.8))
        one = vote_inference(self.net, cloud, 1, augments=[aug])
        np.testing.assert_array_equal(vote_inference(self.net, cloud, 2, augments=[aug, aug]), one)

    def test_rows_normalized(self):
        cloud, _ = toy_scene(9, points=200)
        probs = vote_inference(self.net, cloud, 4, seed=3, center=(3.2, 3.2, 0.8))
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)

    def test_bad_votes(self):
        cloud, _ = toy_scene(9, points=20)
        with pytest.raises(ContractError):
            vote_inference(self.net, cloud, 0)
        with pytest.raises(ContractError):
            vote_inference(self.net, cloud, 2, augments=[SegAugment.identity()])
