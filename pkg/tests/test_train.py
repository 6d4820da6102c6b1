import math

import numpy as np
import pytest

from jointseg.autodiff import encode_checkpoint
from jointseg.datagen import Sample, synthetic_samples
from jointseg.errors import ContractError, NumericalError
from jointseg.geometry import LabeledVolume, PointCloud
from jointseg.model import ModelConfig
from jointseg.train import StepRecord, TrainConfig, Trainer, dataset_class_weights, evaluate

TOY = ModelConfig.toy()


@pytest.fixture(scope="module")
def samples():
    return synthetic_samples(TOY.ssc_volume, 6, seed=3)


def test_class_weights_from_counts():
    spec = TOY.ssc_volume
    labels = np.full(spec.dims, 255, np.uint8)
    labels[0, 0, :4] = [0, 0, 1, 1]
    cloud = PointCloud(np.zeros((4, 3)), None, [1, 1, 1, 2])
    seg_w, comp_w = dataset_class_weights([Sample(cloud, LabeledVolume(spec, labels))], 4)
    assert seg_w.shape == (4,) and comp_w.shape == (5,)
    assert seg_w[0] < seg_w[1] and seg_w[2] == seg_w[3]
    assert comp_w[0] == comp_w[1] and comp_w[2] > comp_w[0]


def test_config_validation():
    with pytest.raises(ContractError):
        TrainConfig(augment="flip")
    with pytest.raises(ContractError):
        TrainConfig(accumulate=0)


def test_log_line_columns():
    line = StepRecord(3, 0.5, math.nan, 1.0, 1.25, -0.125).line()
    assert line == "3 0.5 nan 1.0 1.25 -0.125\n"


def test_sigma_initialization(samples):
    tr = Trainer(TOY, samples, TrainConfig(seed=4))
    s1, s2 = tr.loss.sigmas
    assert 0.8 <= s1 <= 1.2 and 0.8 <= s2 <= 1.2
    assert tr.net.store.params["loss.s1"].lr_mult == 10.0
    assert not tr.net.store.params["loss.s1"].seg


def test_epoch_is_deterministic(samples):
    runs = []
    for _ in range(2):
        tr = Trainer(TOY, samples, TrainConfig(epochs=1, seed=2))
        lines = []
        tr.fit(lambda rec: lines.append(rec.line()))
        runs.append((lines, encode_checkpoint(tr.net.store)))
    assert runs[0] == runs[1]
    assert len(runs[0][0]) == len(samples)


def test_seg_only_leaves_auxiliary_untouched(samples):
    tr = Trainer(TOY, samples, TrainConfig(epochs=1, seed=0, joint=False))
    before = {n: tr.net.store[n].data.copy() for n in tr.net.store.names(False)}
    lines = []
    tr.fit(lambda rec: lines.append(rec))
    assert all(np.array_equal(before[n], tr.net.store[n].data) for n in before)
    assert all(math.isnan(r.l_complet) for r in lines)


def test_accumulation_steps(samples):
    tr = Trainer(TOY, samples, TrainConfig(epochs=1, seed=0, accumulate=4, joint=False))
    tr.fit()
    assert tr.net.store.step == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_raises(samples):
    tr = Trainer(TOY, samples, TrainConfig(epochs=1, seed=0))
    tr.net.store["seg.mlp3.b"].data[:] = np.inf
    with pytest.raises(NumericalError):
        tr.fit()


def test_evaluate_report_keys(samples):
    tr = Trainer(TOY, samples, TrainConfig(seed=0))
    report = evaluate(tr.net, samples[:2], completion=True).report()
    for key in ("seg.miou", "sc.precision", "sc.recall", "sc.iou", "ssc.miou", "seg.iou.1", "ssc.iou.4"):
        assert key in report
    assert 0.0 <= report["sc.iou"] <= 1.0
