"""Command line entry point: ``hnfnet {train,infer,eval,selftest}``."""
import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, read_manifest, save_checkpoint
from .data import load_dataset, preprocess, read_nifti, write_nifti
from .engine import InferConfig, TrainConfig, infer_study, train
from .errors import ConfigurationError, HNFError, InputError
from .metrics import aggregate, evaluate_case
from .network import NetworkConfig, build

log = logging.getLogger("hnfnet")


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"{path}: cannot read config ({e})") from e


def split_config(doc):
    """Top-level TrainConfig keys plus optional ``network`` and ``infer`` sections."""
    if not isinstance(doc, dict):
        raise ConfigurationError("config must be a JSON object")
    doc = dict(doc)
    net = NetworkConfig.from_dict(doc.pop("network", {}))
    infer = InferConfig.from_dict(doc.pop("infer", {}))
    seed = os.environ.get("HNF_SEED")
    if seed is not None:
        try:
            seed = int(seed)
        except ValueError as e:
            raise ConfigurationError(f"HNF_SEED must be an integer, got {seed!r}") from e
        doc["seed"] = seed
        net = NetworkConfig.from_dict({**net.to_dict(), "seed": seed})
    return TrainConfig.from_dict(doc), net, infer


def cmd_train(args):
    train_cfg, net_cfg, infer_cfg = split_config(_read_json(args.config))
    studies = [preprocess(s) for s in load_dataset(args.data)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = {**train_cfg.to_dict(), "network": net_cfg.to_dict(), "infer": infer_cfg.to_dict()}
    (out / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True))
    net = build(net_cfg)
    log.info("training on %d studies for %d epochs", len(studies), train_cfg.epochs)
    history = train(net, studies, train_cfg, out_dir=out)
    save_checkpoint(net, out / "model.ckpt",
                    {"epoch": train_cfg.epochs, "train": train_cfg.to_dict(), "infer": infer_cfg.to_dict()})
    last = history[-1]
    print(f"trained {train_cfg.epochs} epochs; final loss {last['loss']:.4f}; checkpoint {out / 'model.ckpt'}")
    return 0


def _infer_config(args, checkpoints):
    if args.config:
        doc = _read_json(args.config)
        return InferConfig.from_dict(doc.get("infer", doc) if isinstance(doc, dict) else doc)
    stored = read_manifest(checkpoints[0]).get("extra", {}).get("infer")
    return InferConfig.from_dict(stored) if stored else InferConfig()


def cmd_infer(args):
    nets = [load_checkpoint(p) for p in args.checkpoint]
    config = _infer_config(args, args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for study in load_dataset(args.data):
        labels = infer_study(nets, preprocess(study), config)
        path = write_nifti(labels, study.spacing, out / f"{study.id}_seg.nii.gz", kind="label")
        counts = {v: int((labels == v).sum()) for v in (1, 2, 4)}
        print(f"{study.id}: {path.name} NCR/NET {counts[1]} ED {counts[2]} ET {counts[4]}")
    return 0


def cmd_eval(args):
    pred_dir = Path(args.pred)
    rows = []
    for study in load_dataset(args.gt):
        if study.label is None:
            raise InputError(f"reference study {study.id} has no label")
        path = pred_dir / f"{study.id}_seg.nii.gz"
        if not path.exists():
            raise InputError(f"missing prediction {path}")
        pred, _, _ = read_nifti(path)
        rows.append(evaluate_case(np.asarray(pred), study.label, study.spacing, case_id=study.id))
    report = aggregate(rows)
    report.to_csv(args.report)
    m = report.mean
    print(f"{len(rows)} cases; mean Dice ET {m['dice_et']:.4f} TC {m['dice_tc']:.4f} WT {m['dice_wt']:.4f}; "
          f"report {args.report}")
    return 0


def cmd_selftest(args):
    from . import selftest

    return 0 if selftest.run() else 1


def build_parser():
    p = argparse.ArgumentParser(prog="hnfnet", description="Multi-scale 3D brain tumor segmentation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a network from scratch")
    t.add_argument("--config", required=True, help="JSON: training keys plus optional 'network'/'infer' sections")
    t.add_argument("--data", required=True, help="dataset manifest (JSON list) or synthetic spec (JSON object)")
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="segment studies with one or more checkpoints")
    i.add_argument("--checkpoint", required=True, nargs="+", help="several checkpoints form an ensemble")
    i.add_argument("--data", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--config", help="inference config JSON (defaults to the one stored in the checkpoint)")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score predictions against reference labels")
    e.add_argument("--pred", required=True, help="directory of <id>_seg.nii.gz files")
    e.add_argument("--gt", required=True, help="manifest or synthetic spec with labels")
    e.add_argument("--report", required=True, help="output CSV")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("selftest", help="run the built-in oracle checks")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except HNFError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
