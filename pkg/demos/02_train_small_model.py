"""Train a small dual-stream segmentation model from scratch.

The network fuses two streams: EdgeConv layers over a dynamically
recomputed k-nearest-neighbor graph, and a residual stack of pointwise
convolutions. Per-point features from both streams are concatenated
with a global descriptor and classified by a small fully connected head.

Training is plain Adam with a cosine learning-rate schedule over
analytically derived gradients — no autograd framework involved.

Run:  python3 demos/02_train_small_model.py        (takes a few minutes)
"""
from fusionseg import (FusionConfig, PreprocessPolicy, SIM_PROFILE,
                       TrainConfig, evaluate, make_dataset, train)

# A deliberately small model so the demo finishes quickly; bump the
# widths (e.g. [64, 64, 128, 256]) for real experiments.
model = FusionConfig(k=10, edgeconv_widths=[16, 16], residual_widths=[16],
                     head_widths=[32, 16])
print(f"model with k={model.k} and widths "
      f"{model.edgeconv_widths}/{model.residual_widths}/{model.head_widths}")

scenes = make_dataset(12, SIM_PROFILE, seed=0)
policy = PreprocessPolicy(budget=1024)   # decimate, resample, normalize
config = TrainConfig(lr0=0.002, epochs=30, batch_size=4, seed=0)

best, history = train(config, model, scenes, preprocess=policy,
                      run_dir="demo_run")
for rec in history.records:
    print(f"epoch {rec.epoch:>2}  train loss {rec.train_loss:.3f}  "
          f"eval OA {rec.eval_oa:.3f}  lr {rec.lr:.5f}")

eval_scenes = [policy.apply(c, seed=100 + i)
               for i, c in enumerate(make_dataset(4, SIM_PROFILE, seed=99))]
loss, oa, report = evaluate(best.params, model, eval_scenes)
print(f"\nheld-out overall accuracy: {oa:.3f}")
print(report.to_text())
print("\ncheckpoints written to demo_run/ (best.ckpt, last.ckpt)")
