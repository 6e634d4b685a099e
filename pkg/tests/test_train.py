import io

import numpy as np
import pytest

from qvit import autodiff as ad
from qvit import data, model, train


def brute_force_binary_auc(scores, positive):
    """Pairwise comparison oracle: wins + half-ties over all pos/neg pairs."""
    pos = scores[positive]
    neg = scores[~positive]
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))


class TestAdam:
    def test_first_step_magnitude_is_lr(self):
        t = ad.parameter(np.array([5.0, -3.0]))
        t.grad = np.array([0.2, -0.7])
        state = train.OptimState()
        train.adam_step([t], state, lr=1e-3)
        # bias-corrected m/sqrt(v) is sign(g) on step one
        assert np.allclose(t.data, [5.0 - 1e-3 * (0.2 / (0.2 + 1e-8)),
                                    -3.0 + 1e-3 * (0.7 / (0.7 + 1e-8))])

    def test_zero_gradient_is_noop(self):
        t = ad.parameter(np.array([1.0, 2.0]))
        t.grad = np.zeros(2)
        before = t.data.copy()
        train.adam_step([t], train.OptimState(), lr=1e-3)
        assert np.array_equal(t.data, before)

    def test_matches_hand_rolled_recurrence_on_quadratic(self):
        # f(x) = x^2 from x = 1, lr 0.1: three steps computed independently
        x = 1.0
        m = v = 0.0
        expected = []
        for step in range(1, 4):
            g = 2 * x
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mhat = m / (1 - 0.9 ** step)
            vhat = v / (1 - 0.999 ** step)
            x -= 0.1 * mhat / (np.sqrt(vhat) + 1e-8)
            expected.append(x)

        t = ad.parameter(np.array([1.0]))
        state = train.OptimState()
        got = []
        for _ in range(3):
            t.grad = 2 * t.data
            train.adam_step([t], state, lr=0.1)
            got.append(float(t.data[0]))
        assert np.allclose(got, expected, atol=1e-12)

    def test_non_finite_gradient_skips_step(self, caplog):
        t = ad.parameter(np.array([1.0]))
        t.grad = np.array([np.nan])
        state = train.OptimState()
        ok = train.adam_step([t], state, lr=0.1)
        assert not ok
        assert t.data[0] == 1.0
        assert state.step == 0


class TestSchedule:
    @pytest.mark.parametrize("epoch,expected", [
        (0, 1e-3), (49, 1e-3), (50, 1e-4), (74, 1e-4), (75, 1e-5), (99, 1e-5),
    ])
    def test_boundaries(self, epoch, expected):
        assert train.lr_schedule(epoch) == pytest.approx(expected, rel=1e-12)


class TestAuc:
    def test_perfect_separation(self):
        scores = np.array([0.9, 0.8, 0.2, 0.1])
        labels = np.array([1, 1, 0, 0])
        probs = np.stack([1 - scores, scores], axis=1)
        auc, _ = train.macro_auc(probs, labels)
        assert auc == 1.0

    def test_random_scores_near_half(self):
        rng = np.random.default_rng(0)
        n = 10_000
        labels = np.repeat([0, 1], n // 2)
        scores = rng.uniform(size=n)
        probs = np.stack([1 - scores, scores], axis=1)
        auc, _ = train.macro_auc(probs, labels)
        assert abs(auc - 0.5) < 0.02

    def test_ties_contribute_half(self):
        scores = np.array([0.5, 0.5, 0.5, 0.5])
        labels = np.array([1, 1, 0, 0])
        assert train.binary_auc(scores, labels == 1) == 0.5

    def test_three_class_fixture_matches_pair_counting(self, rng):
        for _ in range(10):
            n = int(rng.integers(8, 40))
            labels = rng.integers(0, 3, size=n)
            if len(np.unique(labels)) < 3:
                continue
            probs = rng.uniform(size=(n, 3))
            # inject ties to exercise the half-credit path
            probs[: n // 3, 0] = 0.5
            auc, per_class = train.macro_auc(probs, labels)
            brute = np.mean([
                brute_force_binary_auc(probs[:, c], labels == c)
                for c in range(3)
            ])
            assert abs(auc - brute) < 1e-12
            for c in range(3):
                assert abs(per_class[c]
                           - brute_force_binary_auc(probs[:, c], labels == c)) < 1e-12

    def test_empty_split_rejected(self):
        cfg = model.ModelConfig(image_size=4, in_channels=1, patch_size=2,
                                embed_dim=4, depth=0, attention_kind="classical",
                                mlp_hidden=8, n_classes=2)
        params = model.init_params(cfg, seed=0)
        split = data.DatasetSplit(np.zeros((0, 1, 4, 4)),
                                  np.zeros(0, dtype=np.int64), 2, "test")
        with pytest.raises(ValueError, match="empty"):
            train.evaluate(params, split)


def tiny_splits(seed=0, separability=1.0, n_per_class=6, n_classes=3):
    train_s, val_s, test_s = data.synthetic_dataset(
        seed=seed, n_classes=n_classes, n_per_class=n_per_class, image_size=4,
        separability=separability)
    return {k: data.normalize_to_angles(v)
            for k, v in (("train", train_s), ("val", val_s), ("test", test_s))}


def tiny_model(seed=0, kind="classical", n_classes=3):
    cfg = model.ModelConfig(image_size=4, in_channels=1, patch_size=2,
                            embed_dim=4, depth=1, attention_kind=kind,
                            mlp_hidden=8, n_classes=n_classes)
    return model.init_params(cfg, seed)


class TestTrainLoop:
    def test_same_seed_identical_history(self):
        splits = tiny_splits()
        r1 = train.train_loop(tiny_model(1), splits, epochs=3, seed=9)
        r2 = train.train_loop(tiny_model(1), splits, epochs=3, seed=9)
        assert r1.history == r2.history

    def test_evaluate_is_pure(self):
        splits = tiny_splits()
        params = tiny_model(2)
        m1 = train.evaluate(params, splits["val"])
        m2 = train.evaluate(params, splits["val"])
        assert m1 == m2

    def test_prediction_ties_break_toward_lowest_class(self):
        # zeroed head -> identical logits for every class -> predict class 0
        splits = tiny_splits()
        params = tiny_model(11)
        params.tensors["head.weight"].data[:] = 0.0
        params.tensors["head.bias"].data[:] = 0.0
        logits = train.predict_logits(params, splits["val"])
        assert np.ptp(logits) == 0.0
        probs = train.softmax_probs(logits)
        preds = np.argmax(probs, axis=1)
        assert np.all(preds == 0)

    def test_best_checkpoint_tracks_val_auc(self):
        splits = tiny_splits()
        result = train.train_loop(tiny_model(3), splits, epochs=4, seed=1)
        keys = [(row["val_auc"], row["val_acc"]) for row in result.history]
        assert result.best_val_auc == max(k[0] for k in keys)
        # ties on (AUC, accuracy) go to the later epoch
        best_key = max(keys)
        assert keys[result.best_epoch] == best_key
        assert result.best_epoch == max(i for i, k in enumerate(keys)
                                        if k == best_key)


class TestTeacherBundle:
    def make_bundle(self, rng, n=10, width=4, classes=3):
        return train.TeacherBundle(
            targets=rng.normal(size=(n, width)),
            head_weights=rng.normal(size=(width, classes)),
            head_bias=rng.normal(size=classes),
            metadata={"note": "fixture"})

    def test_round_trip_bit_exact(self, rng, tmp_path):
        bundle = self.make_bundle(rng)
        path = tmp_path / "teacher.qkd"
        train.save_teacher_bundle(path, bundle)
        loaded = train.load_teacher_bundle(path)
        assert loaded.targets.tobytes() == bundle.targets.tobytes()
        assert loaded.head_weights.tobytes() == bundle.head_weights.tobytes()
        assert loaded.head_bias.tobytes() == bundle.head_bias.tobytes()
        assert loaded.metadata == bundle.metadata

    def test_bad_magic(self):
        with pytest.raises(ValueError, match="magic"):
            train.load_teacher_bundle(io.BytesIO(b"XXXX" + b"\x00" * 16))

    def test_width_mismatch_rejected(self, rng):
        splits = tiny_splits()
        bundle = self.make_bundle(rng, width=6)
        with pytest.raises(ValueError, match="width"):
            train.kd_pretrain(tiny_model(0), bundle, splits["train"], epochs=1)


class TestKdMechanics:
    def test_fixed_point_zero_loss_and_no_update(self):
        splits = tiny_splits()
        params = tiny_model(4)
        targets = train.predict_intermediates(params, splits["train"])
        bundle = train.TeacherBundle(
            targets=targets,
            head_weights=params.tensors["head.weight"].data.copy(),
            head_bias=params.tensors["head.bias"].data.copy())
        before = {k: t.data.copy() for k, t in params.tensors.items()}
        history = train.kd_pretrain(params, bundle, splits["train"], epochs=1,
                                    seed=0)
        assert history[0]["kd_loss"] == 0.0
        for k, t in params.tensors.items():
            assert np.array_equal(t.data, before[k]), k

    def test_transfer_head_composition_identity(self, rng):
        params = tiny_model(5)
        bundle = TestTeacherBundle().make_bundle(rng, width=4, classes=3)
        train.transfer_head(params, bundle)
        row = bundle.targets[0]
        expected = np.maximum(row, 0.0) @ bundle.head_weights + bundle.head_bias
        got = np.maximum(row, 0.0) @ params.tensors["head.weight"].data \
            + params.tensors["head.bias"].data
        assert np.array_equal(got, expected)

    def test_transfer_head_idempotent_and_targeted(self, rng):
        params = tiny_model(6)
        bundle = TestTeacherBundle().make_bundle(rng, width=4, classes=3)
        others_before = {k: t.data.copy() for k, t in params.tensors.items()
                         if k not in ("head.weight", "head.bias")}
        train.transfer_head(params, bundle)
        first = {k: t.data.copy() for k, t in params.tensors.items()}
        train.transfer_head(params, bundle)
        for k, t in params.tensors.items():
            assert np.array_equal(t.data, first[k])
        for k, arr in others_before.items():
            assert params.tensors[k].data.tobytes() == arr.tobytes(), k

    def test_transfer_head_shape_mismatch(self, rng):
        params = tiny_model(7)
        bundle = TestTeacherBundle().make_bundle(rng, width=4, classes=5)
        with pytest.raises(ValueError):
            train.transfer_head(params, bundle)

    def test_direct_logit_fixed_point(self):
        splits = tiny_splits()
        params = tiny_model(10)
        targets = train.predict_logits(params, splits["train"])
        before = {k: t.data.copy() for k, t in params.tensors.items()}
        history = train.kd_direct_logits(params, targets, splits["train"],
                                         epochs=1, seed=0)
        assert history[0]["kd_loss"] == 0.0
        for k, t in params.tensors.items():
            assert np.array_equal(t.data, before[k]), k

    def test_direct_logit_kd_deterministic(self, rng):
        splits = tiny_splits()
        targets = rng.normal(size=(len(splits["train"]), 3))
        h1 = train.kd_direct_logits(tiny_model(8), targets, splits["train"],
                                    epochs=2, seed=3)
        h2 = train.kd_direct_logits(tiny_model(8), targets, splits["train"],
                                    epochs=2, seed=3)
        assert h1 == h2

    def test_kd_loss_decreases_on_real_teacher(self):
        splits = tiny_splits(separability=0.8, n_per_class=8)
        tcfg = model.ModelConfig(image_size=4, in_channels=1, patch_size=2,
                                 embed_dim=8, depth=1, attention_kind="classical",
                                 mlp_hidden=16, n_classes=3, head_to=4)
        _, bundle, _ = train.train_teacher(tcfg, splits, epochs=3, seed=0)
        student = tiny_model(9)
        history = train.kd_pretrain(student, bundle, splits["train"], epochs=6,
                                    seed=0)
        losses = [row["kd_loss"] for row in history]
        assert losses[-1] < losses[0]

    def test_teacher_bundle_width_matches_contract(self):
        splits = tiny_splits()
        tcfg = model.ModelConfig(image_size=4, in_channels=1, patch_size=2,
                                 embed_dim=8, depth=1, attention_kind="classical",
                                 mlp_hidden=16, n_classes=3, head_to=4)
        _, bundle, _ = train.train_teacher(tcfg, splits, epochs=1, seed=0)
        assert bundle.width == 4
        assert bundle.head_weights.shape == (4, 3)
        assert len(bundle.targets) == len(splits["train"])

    def test_teacher_beats_untrained_student(self):
        # sanity precondition for distillation to be worth anything
        splits = tiny_splits(separability=0.8, n_per_class=12)
        tcfg = model.ModelConfig(image_size=4, in_channels=1, patch_size=2,
                                 embed_dim=8, depth=1, attention_kind="classical",
                                 mlp_hidden=16, n_classes=3, head_to=4,
                                 residual=True, layer_norm=True)
        teacher, _, _ = train.train_teacher(tcfg, splits, epochs=15, seed=0)
        student = tiny_model(0, kind="classical")
        t_acc = train.evaluate(teacher, splits["val"]).accuracy
        s_acc = train.evaluate(student, splits["val"]).accuracy
        assert t_acc > s_acc
