"""Streaming per-frame segmentation with a static-voxel cache.

Two sensors ("A" and "B") deliver point clouds per frame. Each frame is
merged, voxel-downsampled and segmented. After the warmup frame, voxels
predicted Floor or Wall are cached; later frames reuse those labels and
run inference only on the uncached remainder, which is where the
latency win comes from.

Run:  python3 demos/05_streaming.py
"""
import numpy as np

from fusionseg import FusionConfig, SIM_PROFILE, SceneSpec, generate_scene
from fusionseg.nn import Checkpoint, init_params
from fusionseg.stream import FrameMessage, StreamConfig, run_stream

# An untrained model keeps the demo fast; swap in a trained checkpoint
# (fusionseg.load_checkpoint) for meaningful labels.
model = FusionConfig(k=10, edgeconv_widths=[16, 16], residual_widths=[16],
                     head_widths=[32, 16])
ckpt = Checkpoint(init_params(model, 0), model)

# Simulate a sensor pair: the static scene stays put, so most voxels
# repeat across frames and the cache can absorb them.
scene = generate_scene(SceneSpec(profile=SIM_PROFILE, seed=3, density=40.0))
rng = np.random.default_rng(0)
frames = []
for i in range(4):
    half = len(scene) // 2
    overlap = len(scene) // 10
    a = scene.take(np.arange(0, half + overlap))
    b = scene.take(np.arange(half - overlap, len(scene)))
    frames.append(FrameMessage(i, float(i), "A", a.with_points(a.points)))
    frames.append(FrameMessage(i, float(i), "B", b.with_points(b.points)))

config = StreamConfig(voxel_size=0.1, warmup_frames=1, budget=800)
for result in run_stream(config, ckpt, iter(frames)):
    lat = result.latency_ms
    print(f"frame {result.frame_index}: {len(result.labels)} voxels, "
          f"cache hits {100 * result.cache_hit_fraction:.0f}%, "
          f"inference on {result.inference_points} points, "
          f"total {lat['total']:.0f} ms "
          f"(infer {lat['inference']:.0f} ms)")
    if result.warnings:
        print(f"  warnings: {result.warnings}")

print("\nper-frame JSON telemetry (as the CLI prints it):")
print(result.to_json())
