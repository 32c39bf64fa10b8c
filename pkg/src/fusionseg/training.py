"""Training engine: dataset splitting, Adam with cosine decay, the main
loop, and the Sim2Real fine-tuning protocol with selective freezing."""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import datagen
from .cloud import (DecimationPolicy, LabeledCloud, class_aware_decimate,
                    resample_to_budget, zero_center_normalize)
from .metrics import confusion, report
from .nn import (Checkpoint, FusionConfig, ParameterStore, backward,
                 cross_entropy_loss, fusion_forward, head_last2_patterns,
                 init_params, predict_labels, save_checkpoint)


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries a diagnostic snapshot."""

    def __init__(self, epoch, step, loss, snapshot_path=None):
        self.epoch, self.step, self.loss = epoch, step, loss
        self.snapshot_path = snapshot_path
        super().__init__(f"non-finite loss {loss} at epoch {epoch} step {step}")


@dataclass
class TrainConfig:
    lr0: float = 0.001
    epochs: int = 100
    batch_size: int = 4
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    lr_min: float = 0.0

    def __post_init__(self):
        if self.lr0 <= 0 or not 0 <= self.lr_min <= self.lr0:
            raise ValueError("need 0 <= lr_min <= lr0 and lr0 > 0")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("bad epochs/batch_size")


@dataclass
class PreprocessPolicy:
    """Scene -> network-ready cloud: decimate, resample to budget, normalize."""

    decimation: DecimationPolicy | None = field(default_factory=DecimationPolicy)
    budget: int = 11000
    augmentation: datagen.AugmentationSpec | None = None  # train-time only

    def apply(self, cloud: LabeledCloud, seed: int,
              augment: bool = False) -> LabeledCloud:
        if augment and self.augmentation is not None:
            cloud = datagen.augment(cloud, self.augmentation, seed)
        if self.decimation is not None and cloud.has_labels:
            cloud = class_aware_decimate(cloud, self.decimation, seed + 1)
        cloud = resample_to_budget(cloud, self.budget, seed + 2)
        cloud, _ = zero_center_normalize(cloud)
        return cloud


class AdamState:
    """First/second moment arrays per parameter plus the step counter."""

    def __init__(self, params: ParameterStore):
        self.m = {n: np.zeros_like(e.value) for n, e in params.items()}
        self.v = {n: np.zeros_like(e.value) for n, e in params.items()}
        self.t = 0


@dataclass(frozen=True)
class FreezeSpec:
    """fnmatch patterns naming the parameters that stay trainable."""

    trainable_groups: tuple

    @staticmethod
    def head_last2(config: FusionConfig) -> "FreezeSpec":
        return FreezeSpec(tuple(head_last2_patterns(config)))

    @staticmethod
    def all_trainable() -> "FreezeSpec":
        return FreezeSpec(("*",))


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    eval_loss: float
    eval_oa: float
    lr: float
    seconds: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        self.records.append(rec)

    def write_jsonl(self, path) -> None:
        with open(path, "w") as f:
            for rec in self.records:
                f.write(json.dumps(asdict(rec), sort_keys=True) + "\n")


def split_dataset(dataset: list, train_fraction: float,
                  seed: int) -> tuple[list, list]:
    """Seeded shuffle, then round(fraction * N) scenes go to training."""
    if not dataset:
        raise ValueError("empty dataset")
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset))
    n_train = int(round(train_fraction * len(dataset)))
    train_idx, eval_idx = order[:n_train], order[n_train:]
    return [dataset[i] for i in train_idx], [dataset[i] for i in eval_idx]


def cosine_lr(t: int, T: int, lr0: float, lr_min: float = 0.0) -> float:
    """lr_min + (lr0 - lr_min)(1 + cos(pi t / T)) / 2, clamped past T."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if t < 0:
        raise ValueError("t must be >= 0")
    if t > T:
        return lr_min
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * t / T))


def adam_step(params: ParameterStore, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999,
              epsilon: float = 1e-8) -> None:
    """Bias-corrected Adam on non-frozen entries; frozen moments untouched."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, e in params.items():
        if e.frozen:
            continue
        m, v = state.m[name], state.v[name]
        if m.shape != e.value.shape:
            raise RuntimeError(f"Adam state shape mismatch for {name}")
        m *= beta1
        m += (1.0 - beta1) * e.grad
        v *= beta2
        v += (1.0 - beta2) * np.square(e.grad)
        e.value -= lr * (m / bc1) / (np.sqrt(v / bc2) + epsilon)


def evaluate(params: ParameterStore, model_config: FusionConfig,
             clouds: list[LabeledCloud], classes: int | None = None):
    """Mean eval loss, overall accuracy and a full report over clouds."""
    if classes is None:
        classes = model_config.num_classes
    total_conf = None
    losses = []
    for cloud in clouds:
        logits, _ = fusion_forward(cloud, params, model_config, mode="eval")
        loss, _ = cross_entropy_loss(logits, cloud.labels)
        losses.append(loss)
        cm = confusion(predict_labels(logits), cloud.labels,
                       model_config.num_classes)
        total_conf = cm if total_conf is None else total_conf.merge(cm)
    rep = report(total_conf, classes=classes)
    return float(np.mean(losses)), rep.overall_accuracy, rep


def _run_epochs(params, model_config, config, train_clouds, eval_clouds,
                preprocess, run_dir, augment_train):
    """Shared inner loop for train() and finetune()."""
    state = AdamState(params)
    history = TrainHistory()
    steps_per_epoch = max(1, math.ceil(len(train_clouds) / config.batch_size))
    total_steps = max(1, config.epochs * steps_per_epoch)
    rng = np.random.default_rng(config.seed)
    best = (-1.0, None)
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        with open(run_dir / "config.json", "w") as f:
            json.dump({"train": asdict(config), "model": asdict(model_config)},
                      f, indent=2, sort_keys=True)

    global_step = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_clouds))
        epoch_losses = []
        lr = config.lr0
        for bstart in range(0, len(order), config.batch_size):
            batch = order[bstart:bstart + config.batch_size]
            lr = cosine_lr(global_step, total_steps, config.lr0, config.lr_min)
            params.zero_grads()
            grads = {n: np.zeros_like(e.value) for n, e in params.items()}
            batch_loss = 0.0
            for bi in batch:
                scene = train_clouds[bi]
                seed = int(rng.integers(2 ** 31))
                cloud = preprocess.apply(scene, seed, augment=augment_train)
                logits, trace = fusion_forward(cloud, params, model_config,
                                               mode="train")
                loss, lgrad = cross_entropy_loss(logits, cloud.labels)
                batch_loss += loss
                backward(trace, lgrad, params)
                for n, e in params.items():
                    grads[n] += e.grad
            batch_loss /= len(batch)
            if not math.isfinite(batch_loss):
                snap = None
                if run_dir is not None:
                    snap = run_dir / "diverged.ckpt"
                    save_checkpoint(Checkpoint(params, model_config), snap)
                raise TrainingDiverged(epoch, global_step, batch_loss, snap)
            for n, e in params.items():
                e.grad[...] = grads[n] / len(batch)
            adam_step(params, state, lr, config.adam_beta1, config.adam_beta2,
                      config.adam_epsilon)
            epoch_losses.append(batch_loss)
            global_step += 1

        eval_set = eval_clouds if eval_clouds else None
        if eval_set:
            eval_loss, eval_oa, _ = evaluate(params, model_config, eval_set)
        else:
            eval_loss, eval_oa = float("nan"), float("nan")
        history.append(EpochRecord(
            epoch=epoch, train_loss=float(np.mean(epoch_losses)),
            eval_loss=eval_loss, eval_oa=eval_oa, lr=lr,
            seconds=time.perf_counter() - t0))
        if eval_set and eval_oa > best[0]:
            best = (eval_oa, params.copy())
        if run_dir is not None:
            history.write_jsonl(run_dir / "history.jsonl")

    best_params = best[1] if best[1] is not None else params
    final = Checkpoint(params, model_config)
    best_ckpt = Checkpoint(best_params, model_config)
    if run_dir is not None:
        save_checkpoint(final, run_dir / "last.ckpt")
        save_checkpoint(best_ckpt, run_dir / "best.ckpt")
    return best_ckpt, final, history


def train(config: TrainConfig, model_config: FusionConfig,
          dataset: list[LabeledCloud],
          preprocess: PreprocessPolicy | None = None,
          train_fraction: float = 0.8, run_dir=None, augment_train=None,
          ) -> tuple[Checkpoint, TrainHistory]:
    """Train from scratch; returns the best-eval-OA checkpoint and history."""
    preprocess = preprocess or PreprocessPolicy()
    train_clouds, eval_clouds = split_dataset(dataset, train_fraction,
                                              config.seed)
    # eval scenes are preprocessed once, deterministically, without augmentation
    eval_ready = [preprocess.apply(c, seed=config.seed * 1000 + i)
                  for i, c in enumerate(eval_clouds)]
    params = init_params(model_config, config.seed)
    if augment_train is None:
        augment_train = preprocess.augmentation is not None
    best, final, history = _run_epochs(
        params, model_config, config, train_clouds, eval_ready, preprocess,
        run_dir, augment_train)
    return best, history


def finetune(checkpoint: Checkpoint, target_samples: list[LabeledCloud],
             freeze: FreezeSpec, config: TrainConfig,
             preprocess: PreprocessPolicy | None = None, run_dir=None,
             eval_clouds: list[LabeledCloud] | None = None,
             ) -> tuple[Checkpoint, TrainHistory]:
    """Continue training on target-domain samples with selective freezing."""
    preprocess = preprocess or PreprocessPolicy()
    params = checkpoint.params.copy()
    matched = params.set_trainable(freeze.trainable_groups)
    # An empty pattern set is an explicit freeze-everything request; non-empty
    # patterns that match nothing are treated as a configuration mistake.
    if matched == 0 and freeze.trainable_groups:
        raise ValueError("FreezeSpec matches no parameter")
    eval_ready = None
    if eval_clouds:
        eval_ready = [preprocess.apply(c, seed=config.seed * 1000 + i)
                      for i, c in enumerate(eval_clouds)]
    best, final, history = _run_epochs(
        params, checkpoint.config, config, target_samples, eval_ready,
        preprocess, run_dir, augment_train=preprocess.augmentation is not None)
    out = best if eval_ready else final
    return out, history
