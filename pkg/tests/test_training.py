import json
import math

import numpy as np
import pytest

from fusionseg.cloud import LabeledCloud
from fusionseg.nn import (FusionConfig, cross_entropy_loss, fusion_forward,
                          init_params, predict_labels)
from fusionseg.training import (AdamState, FreezeSpec, PreprocessPolicy,
                                TrainConfig, adam_step, cosine_lr, evaluate,
                                finetune, split_dataset, train)

SMALL = FusionConfig(k=4, edgeconv_widths=[8, 8], residual_widths=[8],
                     head_widths=[16], num_classes=4)


def toy_scene(seed, n=120, classes=4):
    """Linearly separable blobs so a tiny model can overfit quickly."""
    rng = np.random.default_rng(seed)
    centers = np.array([[0.0, 0, 0], [4.0, 0, 0], [0.0, 4, 0], [4.0, 4, 0]])
    labels = rng.integers(0, classes, size=n)
    pts = centers[labels] + rng.normal(scale=0.3, size=(n, 3))
    return LabeledCloud(pts, labels)


class TestSplit:
    def test_sizes(self):
        train_s, eval_s = split_dataset(list(range(10)), 0.8, seed=0)
        assert len(train_s) == 8 and len(eval_s) == 2

    def test_partition(self):
        data = list(range(17))
        a, b = split_dataset(data, 0.7, seed=1)
        assert sorted(a + b) == data

    def test_deterministic(self):
        a1, _ = split_dataset(list(range(20)), 0.5, seed=3)
        a2, _ = split_dataset(list(range(20)), 0.5, seed=3)
        assert a1 == a2

    def test_empty(self):
        with pytest.raises(ValueError):
            split_dataset([], 0.8, 0)

    def test_bad_fraction(self):
        with pytest.raises(ValueError):
            split_dataset([1, 2], 1.0, 0)


class TestCosine:
    def test_endpoints(self):
        assert cosine_lr(0, 100, 0.001) == pytest.approx(0.001)
        assert cosine_lr(100, 100, 0.001) == pytest.approx(0.0, abs=1e-12)

    def test_midpoint(self):
        assert cosine_lr(50, 100, 0.001) == pytest.approx(0.0005)

    def test_closed_form(self):
        lr0, lr_min, T = 0.01, 0.001, 37
        for t in range(T + 1):
            want = lr_min + 0.5 * (lr0 - lr_min) * (1 + math.cos(math.pi * t / T))
            assert cosine_lr(t, T, lr0, lr_min) == pytest.approx(want)

    def test_monotone_decreasing(self):
        vals = [cosine_lr(t, 50, 0.1) for t in range(51)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_clamped_past_horizon(self):
        assert cosine_lr(120, 100, 0.1, 0.01) == 0.01

    def test_invalid(self):
        with pytest.raises(ValueError):
            cosine_lr(0, 0, 0.1)
        with pytest.raises(ValueError):
            cosine_lr(-1, 10, 0.1)


class TestAdam:
    def test_first_step_hand_value(self):
        # With one parameter and gradient g, bias-corrected Adam's first
        # update is lr * g / (|g| + eps) ~= lr * sign(g).
        params = init_params(SMALL, 0)
        name = next(iter(dict(params.items())))
        for n, e in params.items():
            e.grad = np.zeros_like(e.value)
        entry = params[name]
        entry.grad = np.full_like(entry.value, 0.5)
        before = entry.value.copy()
        adam_step(params, AdamState(params), lr=0.01)
        np.testing.assert_allclose(entry.value, before - 0.01, rtol=1e-6)

    def test_frozen_untouched(self):
        params = init_params(SMALL, 0)
        for n, e in params.items():
            e.grad = np.ones_like(e.value)
            e.frozen = True
        snapshot = {n: e.value.copy() for n, e in params.items()}
        state = AdamState(params)
        adam_step(params, state, lr=0.1)
        for n, e in params.items():
            np.testing.assert_array_equal(e.value, snapshot[n])
            assert (state.m[n] == 0).all()

    def test_step_counter(self):
        params = init_params(SMALL, 0)
        for n, e in params.items():
            e.grad = np.zeros_like(e.value)
        state = AdamState(params)
        adam_step(params, state, 0.01)
        adam_step(params, state, 0.01)
        assert state.t == 2


class TestFreezeSpec:
    def test_head_last2_patterns(self):
        spec = FreezeSpec.head_last2(SMALL)
        params = init_params(SMALL, 0)
        params.set_trainable(spec.trainable_groups)
        trainable = {n for n, e in params.items() if not e.frozen}
        assert trainable == {"head.fc0.weight", "head.fc0.bias",
                             "head.out.weight", "head.out.bias"}

    def test_all_trainable(self):
        params = init_params(SMALL, 0)
        params.set_trainable(FreezeSpec.all_trainable().trainable_groups)
        assert not any(e.frozen for _, e in params.items())


class TestTrainLoop:
    def _dataset(self):
        return [toy_scene(s) for s in range(5)]

    def _policy(self):
        return PreprocessPolicy(decimation=None, budget=64)

    def test_zero_epochs_returns_init(self, tmp_path):
        cfg = TrainConfig(epochs=0, lr0=0.01, seed=0)
        ckpt, history = train(cfg, SMALL, self._dataset(),
                              preprocess=self._policy())
        ref = init_params(SMALL, 0)
        assert not history.records
        for (n, e), (_, r) in zip(ckpt.params.items(), ref.items()):
            np.testing.assert_array_equal(e.value, r.value)

    def test_overfits_toy_data(self, tmp_path):
        cfg = TrainConfig(epochs=15, lr0=0.01, batch_size=2, seed=0)
        ckpt, history = train(cfg, SMALL, self._dataset(),
                              preprocess=self._policy(),
                              run_dir=tmp_path / "run")
        assert history.records[-1].train_loss < history.records[0].train_loss
        _, oa, _ = evaluate(ckpt.params, SMALL,
                            [self._policy().apply(toy_scene(99), seed=0)])
        assert oa > 0.8
        # run artifacts written
        assert (tmp_path / "run" / "history.jsonl").exists()
        assert (tmp_path / "run" / "best.ckpt").exists()
        with open(tmp_path / "run" / "history.jsonl") as f:
            rec = json.loads(f.readline())
        assert {"epoch", "train_loss", "eval_loss", "eval_oa",
                "lr"} <= set(rec)

    def test_deterministic(self):
        cfg = TrainConfig(epochs=2, lr0=0.01, seed=4)
        a, _ = train(cfg, SMALL, self._dataset(), preprocess=self._policy())
        b, _ = train(cfg, SMALL, self._dataset(), preprocess=self._policy())
        for (n, ea), (_, eb) in zip(a.params.items(), b.params.items()):
            np.testing.assert_array_equal(ea.value, eb.value)


class TestFinetune:
    def _pretrained(self):
        cfg = TrainConfig(epochs=8, lr0=0.01, batch_size=2, seed=0)
        ckpt, _ = train(cfg, SMALL, [toy_scene(s) for s in range(5)],
                        preprocess=PreprocessPolicy(decimation=None, budget=64))
        return ckpt

    def test_frozen_layers_unchanged(self):
        ckpt = self._pretrained()
        target = [toy_scene(s + 50) for s in range(3)]
        cfg = TrainConfig(epochs=3, lr0=0.01, batch_size=1, seed=1)
        tuned, _ = finetune(ckpt, target, FreezeSpec.head_last2(SMALL), cfg,
                            preprocess=PreprocessPolicy(decimation=None,
                                                        budget=64))
        head = {"head.fc0.weight", "head.fc0.bias",
                "head.out.weight", "head.out.bias"}
        changed = set()
        for (n, before), (_, after) in zip(ckpt.params.items(),
                                           tuned.params.items()):
            if not np.array_equal(before.value, after.value):
                changed.add(n)
        assert changed <= head and changed

    def test_unmatched_pattern_rejected(self):
        ckpt = self._pretrained()
        with pytest.raises(ValueError):
            finetune(ckpt, [toy_scene(1)], FreezeSpec(("nope.*",)),
                     TrainConfig(epochs=1),
                     preprocess=PreprocessPolicy(decimation=None, budget=64))

    def test_empty_patterns_freeze_everything(self):
        ckpt = self._pretrained()
        cfg = TrainConfig(epochs=1, lr0=0.01, seed=0)
        tuned, _ = finetune(ckpt, [toy_scene(1)], FreezeSpec(()), cfg,
                            preprocess=PreprocessPolicy(decimation=None,
                                                        budget=64))
        for (n, before), (_, after) in zip(ckpt.params.items(),
                                           tuned.params.items()):
            np.testing.assert_array_equal(before.value, after.value)
