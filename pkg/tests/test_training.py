"""Tests for losses, optimizer, schedule, metrics, and the loops."""

import math

import numpy as np
import pytest

from sitsformer import training as tr
from sitsformer.errors import (
    ConfigError,
    DataError,
    MetricError,
    TrainingDiverged,
)
from sitsformer.metrics import ConfusionMatrix, metrics
from sitsformer.model import ModelConfig, SitsFormer, load_checkpoint
from sitsformer.tensor import Tensor, backward

from _gradcheck import check_gradients


class TestMaskedCrossEntropy:
    def test_single_pixel_even_logits(self):
        logits = Tensor(np.zeros((1, 1, 2), dtype=np.float32))
        loss = tr.masked_cross_entropy(logits, [[0]], ignore_label=2)
        assert abs(loss.item() - math.log(2.0)) < 1e-6

    def test_uniform_logits_four_classes(self):
        logits = Tensor(np.ones((3, 3, 4), dtype=np.float32) * 0.7)
        labels = np.zeros((3, 3), dtype=np.int64)
        loss = tr.masked_cross_entropy(logits, labels, ignore_label=4)
        assert abs(loss.item() - math.log(4.0)) < 1e-6

    def test_all_ignored_is_zero_with_zero_grads(self):
        logits = Tensor(
            np.random.default_rng(0).standard_normal((2, 2, 3)).astype(np.float32),
            requires_grad=True,
        )
        labels = np.full((2, 2), 3)
        loss = tr.masked_cross_entropy(logits, labels, ignore_label=3)
        assert loss.item() == 0.0
        backward(loss)
        np.testing.assert_array_equal(logits.grad, np.zeros((2, 2, 3)))

    def test_ignored_pixels_have_exactly_zero_gradient(self):
        rng = np.random.default_rng(1)
        logits = Tensor(rng.standard_normal((2, 2, 3)).astype(np.float32),
                        requires_grad=True)
        labels = np.array([[0, 3], [1, 3]])
        loss = tr.masked_cross_entropy(logits, labels, ignore_label=3)
        backward(loss)
        np.testing.assert_array_equal(logits.grad[0, 1], np.zeros(3))
        np.testing.assert_array_equal(logits.grad[1, 1], np.zeros(3))
        assert np.any(logits.grad[0, 0] != 0)

    def test_out_of_range_label(self):
        logits = Tensor(np.zeros((1, 1, 3), dtype=np.float32))
        with pytest.raises(DataError, match="7"):
            tr.masked_cross_entropy(logits, [[7]], ignore_label=3)

    def test_gradcheck(self):
        rng = np.random.default_rng(2)
        logits = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True,
                        dtype=np.float64)
        labels = np.array([[0, 4, 2], [1, 3, 4]])

        def loss(_):
            return tr.masked_cross_entropy(logits, labels, ignore_label=4)

        assert check_gradients(loss, [logits]) < 1e-3


class TestFocalLoss:
    def test_hand_value(self):
        logits = Tensor(np.zeros(2, dtype=np.float32))
        loss = tr.focal_loss(logits, 0, gamma=2.0)
        assert abs(loss.item() - 0.25 * math.log(2.0)) < 1e-6

    def test_gamma_zero_equals_cross_entropy(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            logits_np = rng.standard_normal(5)
            label = int(rng.integers(5))
            loss = tr.focal_loss(Tensor(logits_np, dtype=np.float64), label,
                                 gamma=0.0)
            shifted = logits_np - logits_np.max()
            ce = -(shifted[label] - math.log(np.exp(shifted).sum()))
            assert abs(loss.item() - ce) < 1e-7

    def test_confident_prediction_vanishes(self):
        logits = Tensor(np.array([20.0, -20.0], dtype=np.float32))
        assert tr.focal_loss(logits, 0, gamma=2.0).item() < 1e-8

    def test_label_out_of_range(self):
        with pytest.raises(DataError):
            tr.focal_loss(Tensor(np.zeros(3, dtype=np.float32)), 5)

    def test_gradcheck(self):
        rng = np.random.default_rng(4)
        logits = Tensor(rng.standard_normal(4), requires_grad=True,
                        dtype=np.float64)

        def loss(_):
            return tr.focal_loss(logits, 2, gamma=2.0)

        assert check_gradients(loss, [logits]) < 1e-3


class TestAdamW:
    def test_pure_decay(self):
        p = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        p.grad = np.zeros(3, dtype=np.float32)
        state = tr.AdamWState([p], weight_decay=0.01)
        tr.adamw_step([p], state, lr=0.1)
        np.testing.assert_allclose(p.data, 0.999, rtol=1e-6)

    def test_no_decay_matches_reference_adam(self):
        theta = Tensor(np.array([0.5]), requires_grad=True, dtype=np.float64)
        state = tr.AdamWState([theta], weight_decay=0.0)
        grads = [0.3, -0.1, 0.25, 0.4, -0.05]
        for g in grads:
            theta.grad = np.array([g])
            tr.adamw_step([theta], state, lr=0.01)

        ref, m, v = 0.5, 0.0, 0.0
        for t, g in enumerate(grads, 1):
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref -= 0.01 * (m / (1 - 0.9 ** t)) / (
                math.sqrt(v / (1 - 0.999 ** t)) + 1e-8
            )
        assert abs(float(theta.data[0]) - ref) < 1e-7

    def test_ten_steps_are_bitwise_deterministic(self):
        def run():
            rng = np.random.default_rng(5)
            p = Tensor(rng.standard_normal(4).astype(np.float32),
                       requires_grad=True)
            state = tr.AdamWState([p])
            for _ in range(10):
                p.grad = rng.standard_normal(4).astype(np.float32)
                tr.adamw_step([p], state, lr=0.01)
            return p.data

        np.testing.assert_array_equal(run(), run())

    def test_mismatched_params(self):
        p = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        state = tr.AdamWState([p])
        with pytest.raises(Exception):
            tr.adamw_step([p, p], state, lr=0.1)


class TestSchedule:
    def test_pins(self):
        sched = tr.LRSchedule(total_epochs=40, steps_per_epoch=7)
        assert tr.lr_at_step(sched, 0) == 0.0
        assert tr.lr_at_step(sched, 10 * 7) == 1e-3
        assert tr.lr_at_step(sched, 40 * 7) == 5e-6

    def test_clamps_beyond_schedule(self):
        sched = tr.LRSchedule(total_epochs=20, steps_per_epoch=3)
        assert tr.lr_at_step(sched, 10_000) == 5e-6

    def test_warmup_monotone_then_decay_monotone(self):
        sched = tr.LRSchedule(total_epochs=30, steps_per_epoch=5)
        values = [tr.lr_at_step(sched, s) for s in range(sched.total_steps + 1)]
        w = sched.warmup_steps
        assert all(a <= b for a, b in zip(values[:w], values[1 : w + 1]))
        assert all(a >= b for a, b in zip(values[w:-1], values[w + 1 :]))

    def test_continuous_at_junction(self):
        sched = tr.LRSchedule(total_epochs=25, steps_per_epoch=4)
        warm_side = tr.lr_at_step(sched, sched.warmup_steps)
        cos_side = sched.floor + 0.5 * (sched.peak - sched.floor) * (
            1.0 + math.cos(0.0)
        )
        assert abs(warm_side - cos_side) < 1e-12

    def test_warmup_must_fit(self):
        with pytest.raises(ConfigError):
            tr.LRSchedule(total_epochs=10, steps_per_epoch=2)


class TestMetrics:
    def test_perfect_diagonal(self):
        cm = ConfusionMatrix.from_counts([[3, 0], [0, 5]])
        assert metrics(cm) == (1.0, 1.0, 1.0)

    def test_hand_computed_matrix(self):
        cm = ConfusionMatrix.from_counts([[1, 1], [0, 2]])
        oa, miou, macc = metrics(cm)
        assert oa == 0.75
        assert abs(miou - 7.0 / 12.0) < 1e-12
        assert macc == 0.75

    def test_absent_class_excluded(self):
        cm = ConfusionMatrix.from_counts([[1, 1, 0], [0, 2, 0], [0, 0, 0]])
        oa, miou, macc = metrics(cm)
        assert oa == 0.75
        assert abs(miou - 7.0 / 12.0) < 1e-12
        assert macc == 0.75

    def test_relabeling_symmetry(self):
        rng = np.random.default_rng(6)
        counts = rng.integers(0, 9, size=(5, 5))
        perm = rng.permutation(5)
        base = metrics(ConfusionMatrix.from_counts(counts))
        shuffled = metrics(ConfusionMatrix.from_counts(counts[perm][:, perm]))
        np.testing.assert_allclose(base, shuffled, rtol=1e-12)

    def test_update_skips_ignore_label(self):
        cm = ConfusionMatrix(2)
        cm.update([0, 2, 1, 2], [0, 0, 1, 1])
        assert cm.total() == 2
        assert metrics(cm)[0] == 1.0

    def test_empty_matrix_rejected(self):
        with pytest.raises(MetricError):
            metrics(ConfusionMatrix(3))

    def test_labels_fed_through_are_perfect(self):
        rng = np.random.default_rng(7)
        labels = rng.integers(0, 4, size=(10, 10))
        cm = ConfusionMatrix(4)
        cm.update(labels, labels)
        assert metrics(cm) == (1.0, 1.0, 1.0)


class Record:
    def __init__(self, values, dates, labels):
        self.values = values
        self.dates = dates
        self.labels = labels


def tiny_setup(n_samples=4, seed=0):
    cfg = ModelConfig(
        n_classes=2,
        dim=8,
        depth_temporal=1,
        depth_spatial=1,
        n_heads=2,
        mlp_ratio=2,
        patch=(1, 2, 2),
        input_shape=(2, 4, 4, 1),
    )
    model = SitsFormer(cfg, seed=seed)
    rng = np.random.default_rng(seed + 100)
    records = []
    for _ in range(n_samples):
        values = rng.standard_normal(cfg.input_shape).astype(np.float32)
        labels = rng.integers(0, 3, size=(4, 4)).astype(np.int64)
        labels[0, 0] = 0  # keep at least one counted pixel
        records.append(Record(values, np.array([5, 20]), labels))
    return model, records


TINY_TRAIN = dict(epochs=6, batch_size=2, warmup_epochs=2, seed=3)


class TestTrainLoop:
    def test_loss_decreases_and_log_matches_schedule(self, tmp_path):
        model, records = tiny_setup()
        cfg = tr.TrainConfig(**{**TINY_TRAIN, "epochs": 12})
        log = tmp_path / "log.csv"
        ckpt = tmp_path / "best.ckpt"
        tr.train_loop(model, records, cfg, log, ckpt)
        lines = log.read_text().strip().splitlines()
        assert len(lines) == 12
        sched = tr.LRSchedule(total_epochs=12, steps_per_epoch=2,
                              warmup_epochs=2)
        for line in lines:
            epoch, step, lr, loss, oa, miou = line.split(",")
            assert float(lr) == tr.lr_at_step(sched, int(step))
        first = float(lines[0].split(",")[3])
        last = float(lines[-1].split(",")[3])
        assert last < first
        assert ckpt.exists()
        loaded = load_checkpoint(ckpt)
        assert loaded.config == model.config

    def test_identical_seeds_give_identical_logs(self, tmp_path):
        logs = []
        finals = []
        for run in ("a", "b"):
            model, records = tiny_setup()
            log = tmp_path / f"log_{run}.csv"
            tr.train_loop(model, records, tr.TrainConfig(**TINY_TRAIN), log,
                          tmp_path / f"ckpt_{run}")
            logs.append(log.read_bytes())
            finals.append(np.concatenate([p.data.ravel()
                                          for _, p in model.named_parameters()]))
        assert logs[0] == logs[1]
        np.testing.assert_array_equal(finals[0], finals[1])

    def test_resume_reproduces_uninterrupted_run(self, tmp_path):
        cfg = tr.TrainConfig(**TINY_TRAIN)

        model_a, records = tiny_setup()
        log_a = tmp_path / "a.csv"
        tr.train_loop(model_a, records, cfg, log_a, tmp_path / "a.ckpt",
                      state_path=tmp_path / "a.state")

        model_b, records_b = tiny_setup()
        log_b = tmp_path / "b.csv"
        state_b = tmp_path / "b.state"
        tr.train_loop(model_b, records_b, cfg, log_b, tmp_path / "b.ckpt",
                      state_path=state_b, stop_after_epoch=3)

        model_c, records_c = tiny_setup()
        tr.train_loop(model_c, records_c, cfg, log_b, tmp_path / "b.ckpt",
                      state_path=state_b, resume=True)

        for (_, pa), (_, pc) in zip(model_a.named_parameters(),
                                    model_c.named_parameters()):
            np.testing.assert_array_equal(pa.data, pc.data)
        assert log_a.read_bytes() == log_b.read_bytes()

    def test_nan_loss_aborts_with_diagnostics(self, tmp_path):
        model, records = tiny_setup()
        model.embed.weight.data[:] = np.nan
        with pytest.raises(TrainingDiverged) as err:
            tr.train_loop(model, records, tr.TrainConfig(**TINY_TRAIN),
                          tmp_path / "log.csv", tmp_path / "ckpt")
        assert err.value.step == 1

    def test_empty_dataset_rejected(self, tmp_path):
        model, _ = tiny_setup()
        with pytest.raises(DataError):
            tr.train_loop(model, [], tr.TrainConfig(**TINY_TRAIN),
                          tmp_path / "log.csv", tmp_path / "ckpt")


class TestEvaluate:
    def test_repeat_evaluation_is_identical(self):
        model, records = tiny_setup()
        a = tr.evaluate(model, records)
        b = tr.evaluate(model, records)
        assert a[:3] == b[:3]
        np.testing.assert_array_equal(a[4].counts, b[4].counts)

    def test_background_only_sample_adds_no_counts(self):
        model, records = tiny_setup(n_samples=2)
        records[1].labels = np.full((4, 4), 2, dtype=np.int64)
        *_, cm_both = tr.evaluate(model, records)
        *_, cm_one = tr.evaluate(model, records[:1])
        np.testing.assert_array_equal(cm_both.counts, cm_one.counts)

    def test_classification_records(self):
        cfg = ModelConfig(
            n_classes=3,
            dim=8,
            depth_temporal=1,
            depth_spatial=1,
            n_heads=2,
            mlp_ratio=2,
            patch=(1, 2, 2),
            input_shape=(2, 4, 4, 1),
            task="classification",
        )
        model = SitsFormer(cfg, seed=1)
        rng = np.random.default_rng(8)
        records = [
            Record(rng.standard_normal(cfg.input_shape).astype(np.float32),
                   np.array([3, 9]), int(rng.integers(3)))
            for _ in range(5)
        ]
        oa, miou, macc, table, cm = tr.evaluate(model, records)
        assert cm.total() == 5
        assert len(table) == 3
