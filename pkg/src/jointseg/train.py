"""Training loops (joint and segmentation-only) and evaluation over sample lists."""

import math
from dataclasses import dataclass

import numpy as np

from . import dense
from .autodiff import Tape, adam_step, lr_schedule
from .errors import ContractError, NumericalError
from .losses import LossState, class_weights, completion_loss, seg_loss, uncertainty_loss
from .metrics import ConfusionMatrix, sc_metrics, seg_miou, ssc_miou
from .model import GridAugment, JointNet, SegAugment


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    seed: int = 0
    joint: bool = True
    augment: str = "ssc"
    base_lr: float = 1e-3
    lr_decay: float = 0.7
    decay_every: int = 5
    accumulate: int = 1

    def __post_init__(self):
        if self.epochs < 0 or self.accumulate < 1:
            raise ContractError("epochs must be >= 0 and accumulate >= 1")
        if self.augment not in ("none", "seg", "ssc"):
            raise ContractError(f"unknown augmentation {self.augment!r}")


def dataset_class_weights(samples, num_classes):
    """(segmentation weights over 1..C, completion weights over 0..C) from training counts."""
    pts = np.zeros(num_classes + 1, dtype=np.int64)
    vox = np.zeros(num_classes + 1, dtype=np.int64)
    for s in samples:
        pts += np.bincount(s.cloud.labels, minlength=num_classes + 1)[:num_classes + 1]
        v = s.gt.labels[s.gt.valid]
        vox += np.bincount(v, minlength=num_classes + 1)[:num_classes + 1]
    return class_weights(pts[1:]), class_weights(vox)


def _augmented(sample, mode, rng, spec):
    if mode == "ssc":
        return GridAugment.draw(rng).apply(sample.cloud, sample.gt)
    if mode == "seg":
        # free rotations break the grid alignment; only the segmentation sees them
        center = np.asarray(spec.origin) + spec.extent / 2
        return SegAugment.draw(rng, center).apply(sample.cloud), sample.gt
    return sample.cloud, sample.gt


@dataclass
class StepRecord:
    step: int
    l_seg: float
    l_complet: float
    sigma1: float
    sigma2: float
    total: float

    def line(self):
        return (f"{self.step} {self.l_seg!r} {self.l_complet!r} {self.sigma1!r} "
                f"{self.sigma2!r} {self.total!r}\n")


class Trainer:
    def __init__(self, cfg, train_samples, tcfg, net=None):
        self.cfg = cfg
        self.tcfg = tcfg
        self.samples = train_samples
        feat = train_samples[0].cloud.features.shape[1] if train_samples else 1
        self.net = net if net is not None else JointNet(cfg, seed=tcfg.seed, num_point_features=feat)
        seg_w, comp_w = dataset_class_weights(train_samples, cfg.num_classes)
        if "loss.s1" in self.net.store:
            self.loss = LossState.__new__(LossState)
            self.loss.s1, self.loss.s2 = self.net.store["loss.s1"], self.net.store["loss.s2"]
            self.loss.seg_weights, self.loss.complet_weights = seg_w, comp_w
        else:
            self.loss = LossState(self.net.store, seg_w, comp_w, np.random.default_rng([tcfg.seed, 7]))
        self.epoch = 0

    def step_losses(self, cloud, gt):
        """Forward + backward on one sample; returns (L_seg, L_complet or nan, total)."""
        net = self.net
        with Tape() as tape:
            if self.tcfg.joint:
                out = net.full_forward(cloud, "train")
                l_seg = seg_loss(out.seg_logits, cloud.labels, self.loss.seg_weights)
                logits = dense.reshape(out.refined_ssc.data, (-1, self.cfg.num_classes + 1))
                l_c = completion_loss(logits, gt.labels.reshape(-1), self.loss.complet_weights)
                total = uncertainty_loss(l_seg, l_c, self.loss.s1, self.loss.s2)
                lc_value = l_c.item()
            else:
                _, _, logits = net.seg_forward(cloud)
                l_seg = seg_loss(logits, cloud.labels, self.loss.seg_weights)
                total = l_seg
                lc_value = math.nan
            if not math.isfinite(total.item()):
                raise NumericalError(f"non-finite loss at step {net.store.step + 1}")
            tape.backward(total)
        return l_seg.item(), lc_value, total.item()

    def run_epoch(self, log=None):
        """One pass in a seeded order; returns the mean total loss."""
        t = self.tcfg
        rng = np.random.default_rng([t.seed, self.epoch, 11])
        order = rng.permutation(len(self.samples))
        lr = lr_schedule(self.epoch, t.base_lr, t.lr_decay, t.decay_every)
        spec = self.cfg.ssc_volume
        totals = []
        acc = None
        pending = 0
        for n, i in enumerate(order):
            cloud, gt = _augmented(self.samples[i], t.augment, rng, spec)
            labeled = np.any(cloud.labels > 0)
            if not labeled:
                continue
            self.net.store.zero_grad()
            l_seg, l_c, total = self.step_losses(cloud, gt)
            grads = self.net.store.grads()
            acc = grads if acc is None else {k: acc[k] + grads[k] for k in acc}
            pending += 1
            totals.append(total)
            if pending == t.accumulate or n == len(order) - 1:
                adam_step(self.net.store, {k: v / pending for k, v in acc.items()}, lr)
                acc, pending = None, 0
                self._check_params()
                if log is not None:
                    s1, s2 = self.loss.sigmas
                    log(StepRecord(self.net.store.step, l_seg, l_c, s1, s2, total))
        self.epoch += 1
        return float(np.mean(totals)) if totals else math.nan

    def _check_params(self):
        store = self.net.store
        for name in store.names():
            if not np.all(np.isfinite(store[name].data)):
                raise NumericalError(f"non-finite parameter {name} after step {store.step}")
        if not all(math.isfinite(v) for v in self.loss.sigmas):
            raise NumericalError(f"non-finite task uncertainty after step {store.step}")

    def fit(self, log=None, on_epoch=None):
        history = []
        for _ in range(self.tcfg.epochs):
            history.append(self.run_epoch(log))
            if on_epoch is not None:
                on_epoch(self)
        return history


@dataclass
class Evaluation:
    seg: object
    seg_cm: ConfusionMatrix
    completion: object = None
    ssc: object = None
    ssc_cm: ConfusionMatrix = None

    def report(self):
        out = {"seg.miou": self.seg.miou}
        out.update({f"seg.iou.{c}": v for c, v in self.seg.per_class.items()})
        if self.completion is not None:
            out["sc.precision"] = self.completion.precision
            out["sc.recall"] = self.completion.recall
            out["sc.iou"] = self.completion.iou
            out["ssc.miou"] = self.ssc.miou
            out.update({f"ssc.iou.{c}": v for c, v in self.ssc.per_class.items()})
        return out


def evaluate(net, samples, completion=False):
    """Accumulate confusion matrices over all samples, then score once."""
    C = net.cfg.num_classes
    seg_cm = ConfusionMatrix(C)
    ssc_cm = ConfusionMatrix(C) if completion else None
    for s in samples:
        mode = "train" if completion else "infer"
        out = net.full_forward(s.cloud, mode)
        pred = out.seg_logits.data.argmax(axis=1) + 1
        seg_cm.update(s.cloud.labels, pred, valid=s.cloud.labels != 0)
        if completion:
            vol = out.refined_ssc.data.data.argmax(axis=-1)
            ssc_cm.update(s.gt.labels, vol, valid=s.gt.valid)
    ev = Evaluation(seg_miou(None, None, C, cm=seg_cm), seg_cm)
    if completion:
        ev.completion = sc_metrics(None, None, cm=ssc_cm)
        ev.ssc = ssc_miou(None, None, C, cm=ssc_cm)
        ev.ssc_cm = ssc_cm
    return ev
