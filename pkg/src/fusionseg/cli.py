"""Command-line entry point: gen, train, finetune, eval, segment, stream, info."""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import datagen, stream as streaming
from .cloud import load_cloud, save_cloud, LabeledCloud
from .metrics import confusion, report
from .nn import (Checkpoint, FusionConfig, cross_entropy_loss, fusion_forward,
                 init_params, load_checkpoint, predict_labels, save_checkpoint)
from .training import (FreezeSpec, PreprocessPolicy, TrainConfig, evaluate,
                       finetune, train)


def worker_count(default: int = 0) -> int:
    """Parallelism bound from FUSIONSEG_THREADS (0 = serial)."""
    try:
        return max(0, int(os.environ.get("FUSIONSEG_THREADS", default)))
    except ValueError:
        return default


def _dataclass_from(cls, mapping):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(mapping) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**mapping)


def load_config_file(path):
    """YAML config with optional sections: model, train, scene, profiles,
    stream, preprocess, augmentation."""
    with open(path) as f:
        return yaml.safe_load(f) or {}


def _model_config(cfg: dict) -> FusionConfig:
    return _dataclass_from(FusionConfig, cfg.get("model", {}))


def _train_config(cfg: dict, seed=None) -> TrainConfig:
    tc = _dataclass_from(TrainConfig, cfg.get("train", {}))
    if seed is not None:
        tc.seed = seed
    return tc


def _preprocess_policy(cfg: dict) -> PreprocessPolicy:
    section = dict(cfg.get("preprocess", {}))
    aug = cfg.get("augmentation")
    policy = PreprocessPolicy()
    if "budget" in section:
        policy.budget = int(section["budget"])
    if section.get("decimation") is False:
        policy.decimation = None
    if aug:
        policy.augmentation = _dataclass_from(datagen.AugmentationSpec, aug)
    return policy


def _profile(cfg: dict, name: str) -> datagen.DomainProfile:
    profiles = cfg.get("profiles", {})
    if name in profiles:
        return _dataclass_from(datagen.DomainProfile, profiles[name])
    return {"sim": datagen.SIM_PROFILE, "real": datagen.REAL_PROFILE}[name]


def _scene_spec(cfg: dict, profile, seed) -> datagen.SceneSpec:
    spec = _dataclass_from(datagen.SceneSpec, cfg.get("scene", {}))
    spec.profile = profile
    spec.seed = seed
    return spec


def cmd_gen(args, cfg):
    if args.scenes < 1:
        raise UsageError("--scenes must be >= 1")
    profile = _profile(cfg, args.profile)
    base = _scene_spec(cfg, profile, args.seed)
    scenes = datagen.make_dataset(args.scenes, profile, base, seed=args.seed)
    datagen.save_dataset(args.output, scenes, profile, args.seed)
    print(f"wrote {len(scenes)} scenes to {args.output}")
    return 0


def cmd_train(args, cfg):
    dataset = datagen.load_dataset(args.dataset)
    best, history = train(_train_config(cfg, args.seed), _model_config(cfg),
                          dataset, preprocess=_preprocess_policy(cfg),
                          run_dir=args.output)
    last = history.records[-1] if history.records else None
    if last:
        print(f"trained {len(history.records)} epochs; "
              f"final eval OA {last.eval_oa:.4f}")
    print(f"checkpoints in {args.output}")
    return 0


def cmd_finetune(args, cfg):
    ckpt = load_checkpoint(args.checkpoint)
    samples = datagen.load_dataset(args.dataset)
    freeze = FreezeSpec.head_last2(ckpt.config)
    out, history = finetune(ckpt, samples, freeze,
                            _train_config(cfg, args.seed),
                            preprocess=_preprocess_policy(cfg),
                            run_dir=args.output)
    print(f"fine-tuned on {len(samples)} samples; checkpoints in {args.output}")
    return 0


def cmd_eval(args, cfg):
    ckpt = load_checkpoint(args.checkpoint)
    dataset = datagen.load_dataset(args.dataset)
    policy = _preprocess_policy(cfg)
    ready = [policy.apply(c, seed=args.seed * 1000 + i)
             for i, c in enumerate(dataset)]
    _, _, rep = evaluate(ckpt.params, ckpt.config, ready, classes=args.classes)
    text = rep.to_json() if args.report == "json" else rep.to_text()
    if args.output:
        Path(args.output).mkdir(parents=True, exist_ok=True)
        out = Path(args.output) / f"metrics_{args.classes}class.{args.report}"
        out.write_text(text + "\n")
        print(f"wrote {out}")
    else:
        print(text)
    return 0


def cmd_segment(args, cfg):
    ckpt = load_checkpoint(args.checkpoint)
    cloud = load_cloud(args.input)
    if args.voxel_size:
        from .cloud import voxel_downsample
        cloud = voxel_downsample(cloud, args.voxel_size)
    labels = streaming.segment_cloud(cloud, ckpt)
    labeled = LabeledCloud(cloud.points, labels)
    out_dir = Path(args.output or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / (Path(args.input).stem + "_labeled.pcsb")
    save_cloud(labeled, out_path, format="binary")
    counts = {str(c): int(n) for c, n in enumerate(labeled.class_counts()) if n}
    print(json.dumps({"output": str(out_path), "per_class_counts": counts},
                     sort_keys=True))
    return 0


def cmd_stream(args, cfg):
    ckpt = load_checkpoint(args.checkpoint)
    sconf = _dataclass_from(streaming.StreamConfig, cfg.get("stream", {}))
    if args.voxel_size:
        sconf.voxel_size = args.voxel_size
    sconf.seed = args.seed
    if args.frames == "-":
        frames = streaming.stdin_frames(sys.stdin.buffer)
    else:
        frames = streaming.directory_frames(args.frames)
    out_dir = Path(args.output) if args.output else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    for result in streaming.run_stream(sconf, ckpt, frames):
        print(result.to_json())
        if out_dir:
            labeled = LabeledCloud(result.points, np.maximum(result.labels, 0))
            save_cloud(labeled,
                       out_dir / f"frame_{result.frame_index:04d}_labeled.pcsb")
    return 0


def cmd_info(args, cfg):
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        print(json.dumps({
            "parameters": ckpt.params.num_params(),
            "entries": len(ckpt.params.names()),
            "config": dataclasses.asdict(ckpt.config),
        }, sort_keys=True, indent=2))
    if args.dataset:
        dataset = datagen.load_dataset(args.dataset)
        sizes = [len(c) for c in dataset]
        print(json.dumps({
            "scenes": len(dataset),
            "points_total": int(sum(sizes)),
            "points_mean": float(np.mean(sizes)) if sizes else 0.0,
        }, sort_keys=True, indent=2))
    if not args.checkpoint and not args.dataset:
        raise UsageError("info needs --checkpoint and/or --dataset")
    return 0


class UsageError(ValueError):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fusionseg",
                                description="Point-cloud semantic segmentation "
                                            "with Sim2Real fine-tuning")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=False, output=True):
        sp.add_argument("--config", type=str, default=None,
                        help="YAML config file")
        sp.add_argument("--seed", type=int, default=0)
        if checkpoint:
            sp.add_argument("--checkpoint", type=str, required=True)
        if output:
            sp.add_argument("--output", type=str, default=None)

    sp = sub.add_parser("gen", help="generate a synthetic dataset")
    sp.add_argument("--scenes", type=int, required=True)
    sp.add_argument("--profile", choices=["sim", "real"], default="sim")
    common(sp)
    sp.set_defaults(fn=cmd_gen)

    sp = sub.add_parser("train", help="train from scratch")
    sp.add_argument("--dataset", type=str, required=True)
    common(sp)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("finetune", help="fine-tune with head.last2 freezing")
    sp.add_argument("--dataset", type=str, required=True)
    common(sp, checkpoint=True)
    sp.set_defaults(fn=cmd_finetune)

    sp = sub.add_parser("eval", help="evaluate a checkpoint over a dataset")
    sp.add_argument("--dataset", type=str, required=True)
    sp.add_argument("--classes", type=int, choices=[7, 8], default=8)
    sp.add_argument("--report", choices=["json", "text"], default="text")
    common(sp, checkpoint=True)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("segment", help="label one cloud file")
    sp.add_argument("--input", type=str, required=True)
    sp.add_argument("--voxel-size", type=float, default=None)
    common(sp, checkpoint=True)
    sp.set_defaults(fn=cmd_segment)

    sp = sub.add_parser("stream", help="streaming per-frame segmentation")
    sp.add_argument("--frames", type=str, required=True,
                    help="frame directory, or '-' for stdin framing")
    sp.add_argument("--voxel-size", type=float, default=None)
    common(sp, checkpoint=True)
    sp.set_defaults(fn=cmd_stream)

    sp = sub.add_parser("info", help="summarize checkpoints/datasets")
    sp.add_argument("--checkpoint", type=str, default=None)
    sp.add_argument("--dataset", type=str, default=None)
    sp.add_argument("--config", type=str, default=None)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_info)

    return p


def cli_dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    cfg = load_config_file(args.config) if getattr(args, "config", None) else {}
    try:
        return args.fn(args, cfg)
    except UsageError as e:
        print(f"error: usage: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_dispatch())
