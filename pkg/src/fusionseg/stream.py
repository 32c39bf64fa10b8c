"""Per-frame streaming segmentation: dual-sensor merge, voxel downsampling,
static-class caching and latency telemetry.

The warmup frame is segmented in full; voxels predicted Floor/Wall are
then cached and skipped by inference on later frames. Their per-layer
warmup features are kept as frozen context, so post-warmup forwards
convolve only the fresh points while graph neighborhoods and the global
descriptor still span the whole scene. A single NormalizationRecord
taken from the warmup frame keeps the voxel grid and the cache
consistent for the whole stream.
"""
from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cloud import (FLOOR, NUM_CLASSES, UNLABELED, WALL, LabeledCloud,
                    NormalizationRecord, load_cloud, merge_clouds,
                    voxel_downsample, voxel_keys, zero_center_normalize)
from .nn import (Checkpoint, FeatureContext, feature_context, fusion_forward,
                 fusion_forward_context, predict_labels)


@dataclass
class FrameMessage:
    index: int
    timestamp: float
    sensor: str              # "A" or "B"
    cloud: LabeledCloud      # unlabeled on ingest


@dataclass
class StaticCache:
    voxel_labels: dict       # (i, j, k) voxel coordinate -> cached class id
    voxel_size: float
    built_at_frame: int
    static_classes: frozenset = frozenset({FLOOR, WALL})

    def lookup(self, keys: np.ndarray) -> np.ndarray:
        """Cached label per voxel key, -1 where uncached."""
        out = np.full(keys.shape[0], -1, dtype=np.int64)
        for i, key in enumerate(map(tuple, keys)):
            out[i] = self.voxel_labels.get(key, -1)
        return out


@dataclass
class StreamConfig:
    voxel_size: float = 0.05
    warmup_frames: int = 1
    budget: int | None = None       # resample size for post-warmup inference
    static_classes: frozenset = frozenset({FLOOR, WALL})
    output_mode: str = "full"       # full | dynamic-only
    seed: int = 0

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if self.warmup_frames < 1:
            raise ValueError("need at least one warmup frame")
        if self.output_mode not in ("full", "dynamic-only"):
            raise ValueError(f"unknown output mode {self.output_mode!r}")


@dataclass
class FrameResult:
    frame_index: int
    labels: np.ndarray
    points: np.ndarray
    per_class_counts: dict
    cache_hit_fraction: float
    inference_points: int
    latency_ms: dict
    warnings: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "frame_index": self.frame_index,
            "per_class_counts": self.per_class_counts,
            "cache_hit_fraction": self.cache_hit_fraction,
            "latency_ms": self.latency_ms,
            "warnings": self.warnings,
        }, sort_keys=True)


def segment_cloud(cloud: LabeledCloud, ckpt: Checkpoint,
                  norm: NormalizationRecord | None = None) -> np.ndarray:
    """Offline segmentation of one cloud (already merged/downsampled).

    If `norm` is given, that fixed record maps the cloud into the model
    frame; otherwise the cloud is normalized on its own.
    """
    if norm is None:
        normalized, _ = zero_center_normalize(cloud)
    else:
        normalized = cloud.with_points(norm.apply(cloud.points))
    logits, _ = fusion_forward(normalized, ckpt.params, ckpt.config, mode="eval")
    return predict_labels(logits)


def _counts_dict(labels: np.ndarray) -> dict:
    counts = np.bincount(labels, minlength=NUM_CLASSES)
    return {str(c): int(counts[c]) for c in range(NUM_CLASSES)}


def run_stream(config: StreamConfig, ckpt: Checkpoint, frames):
    """Consume FrameMessages and yield one FrameResult per frame index."""
    if max(config.static_classes) >= ckpt.config.num_classes:
        raise ValueError("static_classes exceed the checkpoint's class count")
    pending: dict[int, dict] = {}
    norm: NormalizationRecord | None = None
    cache: StaticCache | None = None
    context: FeatureContext | None = None
    warmup_done = 0

    def frame_groups():
        """Group incoming messages pairwise by index; a frame is released
        when both sensors arrived or a later index shows the counterpart
        will never come."""
        nonlocal pending
        order = []
        for msg in frames:
            slot = pending.setdefault(msg.index, {})
            if msg.index not in order:
                order.append(msg.index)
            slot[msg.sensor] = msg
            while order and (len(pending[order[0]]) == 2
                             or any(i > order[0] for i in order[1:])):
                idx = order.pop(0)
                yield idx, pending.pop(idx)
        for idx in order:
            yield idx, pending.pop(idx)

    for idx, group in sorted_releases(frame_groups()):
        warnings = []
        t_start = time.perf_counter()
        clouds = [group[s].cloud for s in ("A", "B") if s in group]
        if len(clouds) == 1:
            warnings.append("single-sensor frame")
            merged = clouds[0]
        else:
            merged = merge_clouds(clouds[0], clouds[1])
        down = voxel_downsample(merged, config.voxel_size)
        keys = voxel_keys(down.points, config.voxel_size)
        if norm is None:
            _, norm = zero_center_normalize(down)

        in_warmup = warmup_done < config.warmup_frames
        n = len(down)
        labels = np.full(n, -1, dtype=np.int64)
        if in_warmup:
            inference_mask = np.ones(n, dtype=bool)
            hit_fraction = 0.0
        else:
            cached = cache.lookup(keys)
            hit = cached >= 0
            labels[hit] = cached[hit]
            inference_mask = ~hit
            hit_fraction = float(hit.mean()) if n else 0.0

        n_inf = int(inference_mask.sum())
        t_pre = time.perf_counter()     # cache lookup counts as preprocessing
        t_inf0 = time.perf_counter()
        trace = None
        if in_warmup:
            if n > ckpt.config.k:
                logits, trace = fusion_forward(norm.apply(down.points),
                                               ckpt.params, ckpt.config,
                                               mode="eval")
                labels[:] = predict_labels(logits)
            else:
                warnings.append("frame too small for inference")
                labels[:] = UNLABELED
        elif n_inf:
            miss = np.flatnonzero(inference_mask)
            ctx_rows = len(context.fused) if context is not None else 0
            if context is not None and miss.size + ctx_rows > ckpt.config.k:
                sub = down.take(miss)
                if config.budget is not None and len(sub) > config.budget:
                    chosen = np.random.default_rng(config.seed + idx).choice(
                        len(sub), size=config.budget, replace=False)
                    chosen.sort()
                    picked = sub.take(chosen)
                    pred = predict_labels(fusion_forward_context(
                        norm.apply(picked.points), context,
                        ckpt.params, ckpt.config))
                    # unpicked points inherit the nearest picked label
                    full = np.empty(len(sub), dtype=np.int64)
                    full[chosen] = pred
                    rest = np.setdiff1d(np.arange(len(sub)), chosen)
                    if rest.size:
                        diff = (sub.points[rest, None, :]
                                - picked.points[None, :, :])
                        nearest = np.einsum("ijk,ijk->ij", diff,
                                            diff).argmin(axis=1)
                        full[rest] = pred[nearest]
                    labels[inference_mask] = full
                else:
                    labels[inference_mask] = predict_labels(
                        fusion_forward_context(norm.apply(sub.points),
                                               context, ckpt.params,
                                               ckpt.config))
            else:
                # not enough points even with context; reuse nearest cache
                warnings.append(
                    "frame too small for inference; using cache only")
                cached_idx = np.flatnonzero(~inference_mask)
                if cached_idx.size:
                    diff = (down.points[miss, None, :]
                            - down.points[cached_idx][None, :, :])
                    nearest = np.einsum("ijk,ijk->ij", diff,
                                        diff).argmin(axis=1)
                    labels[miss] = labels[cached_idx[nearest]]
                else:
                    labels[miss] = UNLABELED
        t_inf1 = time.perf_counter()

        if in_warmup:
            warmup_done += 1
            if warmup_done == config.warmup_frames:
                static_mask = np.isin(labels, list(config.static_classes))
                vox = {tuple(k): int(l)
                       for k, l in zip(keys[static_mask], labels[static_mask])}
                cache = StaticCache(vox, config.voxel_size, built_at_frame=idx,
                                    static_classes=config.static_classes)
                if trace is not None:
                    context = feature_context(trace,
                                              np.flatnonzero(static_mask))
        t_post = time.perf_counter()

        out_labels, out_points = labels, down.points
        if config.output_mode == "dynamic-only":
            dyn = ~np.isin(labels, list(config.static_classes))
            out_labels, out_points = labels[dyn], down.points[dyn]

        yield FrameResult(
            frame_index=idx,
            labels=out_labels,
            points=out_points,
            per_class_counts=_counts_dict(out_labels[out_labels >= 0]),
            cache_hit_fraction=hit_fraction,
            inference_points=n_inf,
            latency_ms={
                "preprocess": (t_pre - t_start) * 1e3,
                "inference": (t_inf1 - t_inf0) * 1e3,
                "postprocess": (t_post - t_inf1) * 1e3,
                "total": (t_post - t_start) * 1e3,
            },
            warnings=warnings,
        )


def sorted_releases(groups, start: int = 0):
    """Buffer released frames so results come out in frame-index order.

    Emits contiguously from `start`; anything held back by a gap that
    never fills is flushed in sorted order when the stream ends.
    """
    held = {}
    expected = start
    for idx, group in groups:
        held[idx] = group
        while expected in held:
            yield expected, held.pop(expected)
            expected += 1
    for idx in sorted(held):
        yield idx, held.pop(idx)


# --------------------------------------------------------------------------
# frame sources


def directory_frames(directory) -> list[FrameMessage]:
    """frame_<idx>_<sensor>.pcsb files, consumed in index order."""
    directory = Path(directory)
    messages = []
    for path in sorted(directory.glob("frame_*.pcsb")):
        stem = path.stem.split("_")
        if len(stem) != 3 or stem[2] not in ("A", "B"):
            raise ValueError(f"unexpected frame file name {path.name}")
        idx = int(stem[1])
        messages.append(FrameMessage(index=idx, timestamp=float(idx),
                                     sensor=stem[2], cloud=load_cloud(path)))
    messages.sort(key=lambda m: (m.index, m.sensor))
    return messages


_STDIN_HEADER = struct.Struct("<IIB")


def write_stdin_frame(stream, msg: FrameMessage, payload: bytes) -> None:
    """Length-prefixed framing: u32 payload length, u32 index, u8 sensor."""
    stream.write(_STDIN_HEADER.pack(len(payload), msg.index,
                                    ord(msg.sensor)))
    stream.write(payload)


def stdin_frames(stream):
    """Parse the length-prefixed PCSB framing from a binary stream."""
    from .cloud import loads_pcsb

    while True:
        header = stream.read(_STDIN_HEADER.size)
        if not header:
            return
        if len(header) != _STDIN_HEADER.size:
            raise ValueError("truncated frame header")
        length, idx, sensor = _STDIN_HEADER.unpack(header)
        payload = stream.read(length)
        if len(payload) != length:
            raise ValueError("truncated frame payload")
        yield FrameMessage(index=idx, timestamp=float(idx),
                           sensor=chr(sensor), cloud=loads_pcsb(payload))
