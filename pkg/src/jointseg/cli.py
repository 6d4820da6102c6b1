"""
Command-line entry point.

    jointseg synth   --out DIR [--scenes N --seed S ...]
    jointseg gen-gt  SEQUENCE_DIR OUT_DIR [--window 70 --spec kitti|toy ...]
    jointseg train   --data DIR --out DIR [--preset toy --epochs 5 --seed 0 --mode joint|seg]
    jointseg infer   --checkpoint FILE --scan FILE --out FILE [--mode infer|train --votes 1]
    jointseg eval    --data DIR (--checkpoint FILE | --pred DIR) --out FILE [--completion]

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 non-finite loss.
"""

import argparse
import sys
import time
from pathlib import Path

from . import dense
from .autodiff import decode_checkpoint, encode_checkpoint
from .datagen import (
    SequenceIndex,
    dataset_spec,
    generate_gt,
    load_dataset,
    read_labels,
    read_remap,
    read_scan,
    read_volume,
    write_bytes_atomic,
    write_labels,
    write_synthetic_dataset,
    write_volume,
)
from .errors import ContractError, FormatError, NumericalError
from .geometry import VolumeSpec
from .metrics import ConfusionMatrix, format_keyvalue, sc_metrics, seg_miou, ssc_miou
from .model import JointNet, ModelConfig, vote_inference
from .train import Trainer, TrainConfig, evaluate


EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _floats(text, n):
    vals = [float(v) for v in text.split(",")]
    if len(vals) != n:
        raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}")
    return tuple(vals)


def _triple_float(text):
    return _floats(text, 3)


def _triple_int(text):
    return tuple(int(v) for v in _floats(text, 3))


def _volume_from_args(args):
    if args.spec == "kitti":
        return VolumeSpec.semantic_kitti()
    if args.spec == "toy":
        return ModelConfig.toy().ssc_volume
    return VolumeSpec(args.origin, args.voxel_size, args.dims)


def _add_volume_flags(p, default):
    p.add_argument("--spec", choices=("kitti", "toy", "custom"), default=default,
                   help="volume layout; 'custom' reads --origin/--voxel-size/--dims")
    p.add_argument("--origin", type=_triple_float, default=(0.0, 0.0, 0.0))
    p.add_argument("--voxel-size", type=float, default=0.2)
    p.add_argument("--dims", type=_triple_int, default=(32, 32, 8))


# ---------------------------------------------------------------- commands


def cmd_synth(args):
    vol = _volume_from_args(args)
    write_synthetic_dataset(args.out, vol, args.scenes, args.seed, num_classes=args.classes,
                            sample_fraction=args.fraction, occlusion=args.occlusion)
    print(f"wrote {args.scenes} scenes to {args.out}")


def cmd_gen_gt(args):
    remap = read_remap(Path(args.remap).read_text()) if args.remap else None
    seq = SequenceIndex.from_directory(args.sequence_dir, remap)
    spec = _volume_from_args(args)
    out = Path(args.out_dir)
    (out / "voxels").mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(len(seq)):
        vol = generate_gt(seq, i, args.window, spec)
        name = f"voxels/{seq.frames[i].scan_path.stem}.sscv"
        write_bytes_atomic(out / name, write_volume(vol))
        lines.append(f"{i} {name}\n")
    (out / "manifest.txt").write_text("".join(lines))
    print(f"wrote {len(lines)} volumes to {out}")


def _model_config(args, num_classes, volume):
    overrides = {"num_classes": num_classes, "ssc_volume": volume}
    cfg = ModelConfig.from_preset(args.preset, **overrides)
    if args.config:
        cfg = ModelConfig.from_text(Path(args.config).read_text())
    return cfg


def cmd_train(args):
    volume, num_classes = dataset_spec(args.data)
    samples = load_dataset(args.data)
    if not samples:
        raise FormatError(f"dataset {args.data} holds no samples")
    cfg = _model_config(args, num_classes, volume)
    tcfg = TrainConfig(epochs=args.epochs, seed=args.seed, joint=args.mode == "joint",
                       augment=args.augment, base_lr=args.lr, accumulate=args.accumulate)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "model.cfg").write_text(cfg.to_text())
    (out / "train.cfg").write_text(format_keyvalue({
        "data": str(args.data), "epochs": tcfg.epochs, "seed": tcfg.seed, "mode": args.mode,
        "augment": tcfg.augment, "base_lr": tcfg.base_lr, "accumulate": tcfg.accumulate}))
    trainer = Trainer(cfg, samples, tcfg)
    write_bytes_atomic(out / "epoch_000.ckpt", encode_checkpoint(trainer.net.store))
    with open(out / "train_log.txt", "w") as log:
        def on_step(rec):
            log.write(rec.line())

        def on_epoch(t):
            log.flush()
            write_bytes_atomic(out / f"epoch_{t.epoch:03d}.ckpt", encode_checkpoint(t.net.store))

        history = trainer.fit(on_step, on_epoch)
    (out / "epochs.txt").write_text("".join(f"{i + 1} {v!r}\n" for i, v in enumerate(history)))
    print(f"trained {tcfg.epochs} epochs; checkpoints in {out}")


def _load_net(checkpoint, config):
    ckpt = Path(checkpoint)
    cfg_path = Path(config) if config else ckpt.parent / "model.cfg"
    cfg = ModelConfig.from_text(cfg_path.read_text())
    store = decode_checkpoint(ckpt.read_bytes())
    return JointNet(cfg, store=store)


def cmd_infer(args):
    net = _load_net(args.checkpoint, args.config)
    cloud = read_scan(Path(args.scan).read_bytes())
    if len(cloud) == 0:
        raise FormatError(f"scan {args.scan} holds no points")
    t0 = time.perf_counter()
    if args.votes > 1:
        probs = vote_inference(net, cloud, args.votes, args.seed)
        counters = {"ssc_volumes": 0, "pvi_graphs": 0, "pvi_centers": 0, "pvi_edges": 0}
    else:
        out = net.full_forward(cloud, args.mode)
        probs = dense.softmax(out.seg_logits).data
        counters = out.counters
    elapsed = time.perf_counter() - t0
    labels = probs.argmax(axis=1) + 1
    write_bytes_atomic(args.out, write_labels(labels))
    log = {"mode": args.mode, "votes": args.votes, "points": len(cloud)}
    log.update({f"alloc.{k}": v for k, v in counters.items()})
    # fields under "time." vary between runs and are excluded from reproducibility checks
    log["time.forward_seconds"] = elapsed
    log["time.finished_unix"] = time.time()
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log")
    log_path.write_text(format_keyvalue(log))
    print(f"wrote {len(labels)} labels to {args.out}")


def _pred_labels(pred_dir, name, expected):
    return read_labels((Path(pred_dir) / f"{name}.label").read_bytes(), expected=expected)


def cmd_eval(args):
    volume, num_classes = dataset_spec(args.data)
    samples = load_dataset(args.data)
    names = [line.split()[0] for line in (Path(args.data) / "manifest.txt").read_text().splitlines() if line.strip()]
    if args.checkpoint:
        net = _load_net(args.checkpoint, args.config)
        report = evaluate(net, samples, completion=args.completion).report()
    else:
        seg_cm = ConfusionMatrix(num_classes)
        ssc_cm = ConfusionMatrix(num_classes)
        for name, s in zip(names, samples):
            pred = _pred_labels(args.pred, name, len(s.cloud))
            seg_cm.update(s.cloud.labels, pred, valid=s.cloud.labels != 0)
            if args.completion:
                vol = read_volume((Path(args.pred) / f"{name}.sscv").read_bytes())
                ssc_cm.update(s.gt.labels, vol.labels, valid=s.gt.valid)
        seg = seg_miou(None, None, num_classes, cm=seg_cm)
        report = {"seg.miou": seg.miou}
        report.update({f"seg.iou.{c}": v for c, v in seg.per_class.items()})
        if args.completion:
            sc = sc_metrics(None, None, cm=ssc_cm)
            ssc = ssc_miou(None, None, num_classes, cm=ssc_cm)
            report.update({"sc.precision": sc.precision, "sc.recall": sc.recall, "sc.iou": sc.iou,
                           "ssc.miou": ssc.miou})
            report.update({f"ssc.iou.{c}": v for c, v in ssc.per_class.items()})
    text = format_keyvalue(report)
    Path(args.out).write_text(text)
    sys.stdout.write(text)


# ---------------------------------------------------------------- parser


def build_parser():
    p = _Parser(prog="jointseg", description="Joint point segmentation and scene completion.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--scenes", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--fraction", type=float, default=0.1, help="sweep subsampling fraction")
    s.add_argument("--occlusion", type=float, default=0.3, help="fraction of azimuth hidden")
    _add_volume_flags(s, "toy")
    s.set_defaults(func=cmd_synth)

    g = sub.add_parser("gen-gt", help="build completion targets for a KITTI-layout sequence")
    g.add_argument("sequence_dir")
    g.add_argument("out_dir")
    g.add_argument("--window", type=int, default=70)
    g.add_argument("--remap", help="class remap file: 'raw_id target_id' per line")
    _add_volume_flags(g, "kitti")
    g.set_defaults(func=cmd_gen_gt)

    t = sub.add_parser("train", help="train on a synthetic dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--preset", choices=("toy", "full"), default="toy")
    t.add_argument("--config", help="model config file (key = value) replacing the preset")
    t.add_argument("--epochs", type=int, default=5)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--mode", choices=("joint", "seg"), default="joint")
    t.add_argument("--augment", choices=("none", "seg", "ssc"), default="ssc")
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--accumulate", type=int, default=1, help="samples per optimizer step")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="label the points of one scan")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--config", help="model config; defaults to model.cfg beside the checkpoint")
    i.add_argument("--scan", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--log", help="counter log; defaults to OUT.log")
    i.add_argument("--mode", choices=("infer", "train"), default="infer")
    i.add_argument("--votes", type=int, default=1)
    i.add_argument("--seed", type=int, default=0)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score a checkpoint or saved predictions")
    e.add_argument("--data", required=True)
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--pred", help="directory of NNNNNN.label (and .sscv) predictions")
    e.add_argument("--config")
    e.add_argument("--completion", action="store_true", help="also score completion")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
        if getattr(args, "votes", 1) < 1 or getattr(args, "window", 1) < 1:
            raise UsageError("--votes and --window must be at least 1")
        args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, ContractError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
