import copy

import numpy as np
import pytest
from gradcheck import finite_diff, max_rel_err

from mclseq.numerics import Rng
from mclseq.seq2seq import SequenceSpec, encode, model_param_list, predict_future
from mclseq.selection import (
    MlpClassifier,
    SelectionResult,
    classifier_accuracy,
    classifier_features,
    classifier_forward,
    classifier_loss_and_grads,
    classifier_param_list,
    classifier_select,
    classifier_select_many,
    fit_mlp,
    init_classifier,
    oracle_select,
    oracle_select_many,
    prediction_errors,
    reconstruction_errors,
    reconstruction_select,
    train_classifier,
)
from mclseq.training import OptimizerConfig, build_ensemble

SPEC = SequenceSpec(L=8, n=4, frame_dim=5)


def small_ensemble(seed=0, n_members=3, dtype=np.float64):
    return build_ensemble(Rng(seed), SPEC, 6, 2, n_members, dtype=dtype,
                          init_scale=0.2)


def random_windows(seed, n):
    return Rng(seed).uniform(-1.0, 1.0, (n, SPEC.L, SPEC.frame_dim))


class TestSelectionResult:
    def test_index_range_enforced(self):
        with pytest.raises(ValueError, match="model_index"):
            SelectionResult(model_index=0, scores=np.zeros(3), strategy="oracle")
        with pytest.raises(ValueError, match="model_index"):
            SelectionResult(model_index=4, scores=np.zeros(3), strategy="oracle")

    def test_strategy_checked(self):
        with pytest.raises(ValueError, match="strategy"):
            SelectionResult(model_index=1, scores=np.zeros(2), strategy="best")


class TestOracleSelect:
    def test_single_member_picks_index_one(self):
        ens = small_ensemble(n_members=1)
        result = oracle_select(ens, random_windows(1, 1)[0])
        assert result.model_index == 1
        assert result.strategy == "oracle"
        assert not result.deployable

    def test_exact_member_wins(self):
        ens = small_ensemble(seed=2)
        # member 2 becomes a stub that emits exactly the constant future
        target = 0.3
        stub = ens.members[2].model
        for p in model_param_list(stub):
            p[...] = 0.0
        stub.pred_proj.b[...] = target
        window = np.zeros((SPEC.L, SPEC.frame_dim))
        window[SPEC.prefix_len:] = target
        result = oracle_select(ens, window)
        assert result.model_index == 3
        assert result.scores[2] == 0.0

    def test_agrees_with_per_sample_recomputation(self):
        ens = small_ensemble(seed=3)
        windows = random_windows(4, 100)
        results = oracle_select_many(ens, windows)
        for window, result in zip(windows, results):
            prefix = window[:SPEC.prefix_len]
            future = window[SPEC.prefix_len:]
            losses = []
            for member in ens.members:
                pred = predict_future(member.model, encode(member.model, prefix))
                losses.append(float(np.mean((pred - future) ** 2)))
            assert result.model_index == int(np.argmin(losses)) + 1
            assert np.allclose(result.scores, losses, rtol=1e-12, atol=1e-15)

    def test_oracle_score_never_above_any_member(self):
        ens = small_ensemble(seed=5)
        errors = prediction_errors(ens, random_windows(6, 20))
        chosen = errors.min(axis=1)
        assert (chosen[:, None] <= errors).all()


class TestReconstructionSelect:
    def test_single_member_picks_index_one(self):
        ens = small_ensemble(n_members=1)
        prefix = random_windows(7, 1)[0, :SPEC.prefix_len]
        result = reconstruction_select(ens, prefix)
        assert result.model_index == 1
        assert result.deployable

    def test_identical_members_tie_break_to_one(self):
        ens = small_ensemble(seed=8, n_members=2)
        ens.members[1].model = copy.deepcopy(ens.members[0].model)
        prefix = random_windows(9, 1)[0, :SPEC.prefix_len]
        result = reconstruction_select(ens, prefix)
        assert result.model_index == 1
        assert result.scores[0] == result.scores[1]

    def test_errors_match_direct_computation(self):
        ens = small_ensemble(seed=10, n_members=2)
        prefixes = random_windows(11, 5)[:, :SPEC.prefix_len]
        table = reconstruction_errors(ens, prefixes)
        assert table.shape == (5, 2)
        assert (table >= 0).all()

    def test_rejects_full_windows(self):
        ens = small_ensemble()
        with pytest.raises(ValueError, match="prefixes"):
            reconstruction_errors(ens, random_windows(12, 2))


class TestClassifierFeatures:
    def test_single_member_is_top_hidden_state(self):
        ens = small_ensemble(n_members=1)
        prefix = random_windows(13, 1)[0, :SPEC.prefix_len]
        feats = classifier_features(ens, prefix)
        states = encode(ens.members[0].model, prefix)
        assert np.array_equal(feats, states[-1].h)

    def test_zero_ensemble_zero_features(self):
        ens = small_ensemble(n_members=2)
        for member in ens.members:
            for p in model_param_list(member.model):
                p[...] = 0.0
        prefix = random_windows(14, 1)[0, :SPEC.prefix_len]
        assert np.array_equal(classifier_features(ens, prefix), np.zeros(12))

    @pytest.mark.parametrize("n_members,hidden", [(1, 4), (3, 6), (5, 2)])
    def test_feature_length(self, n_members, hidden):
        ens = build_ensemble(Rng(15), SPEC, hidden, 1, n_members, dtype=np.float64)
        prefixes = random_windows(16, 3)[:, :SPEC.prefix_len]
        feats = classifier_features(ens, prefixes)
        assert feats.shape == (3, n_members * hidden)


class TestMlpClassifier:
    def make(self, seed=0, input_dim=6, classes=3, hidden=(8, 5), dtype=np.float64):
        return init_classifier(Rng(seed), input_dim, classes, hidden=hidden,
                               dtype=dtype)

    def test_probabilities_sum_to_one(self):
        clf = self.make()
        x = Rng(1).normal(0.0, 1.0, (7, 6))
        probs = classifier_forward(clf, x)
        assert probs.shape == (7, 3)
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-12)
        probs_train, _ = classifier_forward(clf, x, train=True)
        assert np.allclose(probs_train.sum(axis=1), 1.0, atol=1e-12)

    def test_inference_is_pure(self):
        clf = self.make(seed=2)
        x = Rng(3).normal(0.0, 1.0, (4, 6))
        assert np.array_equal(classifier_forward(clf, x), classifier_forward(clf, x))

    def test_training_mode_updates_running_stats(self):
        clf = self.make(seed=4)
        x = Rng(5).normal(2.0, 3.0, (64, 6))
        classifier_forward(clf, x, train=True)
        assert not np.allclose(clf.bn1_mean, 0.0)
        assert (clf.bn1_var > 0).all() and (clf.bn2_var > 0).all()

    def test_gradients_match_finite_differences(self):
        clf = self.make(seed=6)
        x = Rng(7).normal(0.0, 1.0, (9, 6))
        labels = Rng(8).integers(0, 3, (9,))
        frozen = copy.deepcopy(clf)

        def loss():
            # reset running stats so repeated train-mode calls are identical
            for name in ("bn1_mean", "bn1_var", "bn2_mean", "bn2_var"):
                getattr(clf, name)[...] = getattr(frozen, name)
            _, cache = classifier_forward(clf, x, train=True)
            val, _ = classifier_loss_and_grads(clf, cache, labels)
            return val

        _, cache = classifier_forward(clf, x, train=True)
        _, analytic = classifier_loss_and_grads(clf, cache, labels)
        # b1 and b2 feed straight into batch norm, which subtracts the batch
        # mean: their true gradient is exactly zero and finite differences
        # would only measure noise.  Check them by their invariance instead.
        assert max(np.abs(analytic[1]).max(), np.abs(analytic[3]).max()) < 1e-12
        base = loss()
        clf.b1 += 5.0
        clf.b2 -= 3.0
        assert abs(loss() - base) < 1e-12
        clf.b1 -= 5.0
        clf.b2 += 3.0
        params = classifier_param_list(clf)
        checked = [i for i in range(len(params)) if i not in (1, 3)]
        numeric = finite_diff(loss, [params[i] for i in checked], eps=1e-6)
        assert max_rel_err([analytic[i] for i in checked], numeric) < 1e-5

    def test_fit_separable_features(self):
        rng = Rng(9)
        n, classes = 240, 4
        labels = np.arange(n) % classes
        features = rng.normal(0.0, 0.3, (n, 8))
        features[np.arange(n), labels] += 4.0
        clf = self.make(seed=10, input_dim=8, classes=classes)
        clf = fit_mlp(clf, features, labels, features[:40], labels[:40],
                      OptimizerConfig(learning_rate=0.1, batch_size=16),
                      Rng(11), patience=5, max_epochs=60)
        assert classifier_accuracy(clf, features, labels) >= 0.99

    def test_degenerate_labels_warn_but_train(self):
        features = Rng(12).normal(0.0, 1.0, (20, 4))
        labels = np.zeros(20, dtype=int)
        clf = self.make(seed=13, input_dim=4, classes=2)
        with pytest.warns(UserWarning, match="all training labels"):
            fit_mlp(clf, features, labels, features, labels,
                    OptimizerConfig(batch_size=8), Rng(14), max_epochs=2)


class TestTrainClassifier:
    def test_frozen_ensemble_and_valid_output(self):
        ens = small_ensemble(seed=15, n_members=2)
        before = [copy.deepcopy(m.model) for m in ens.members]
        windows = random_windows(16, 30)
        clf = train_classifier(ens, windows, windows[:8], Rng(17),
                               opt=OptimizerConfig(learning_rate=0.02, batch_size=8),
                               hidden=(16, 8), max_epochs=3)
        for member, prev in zip(ens.members, before):
            for a, b in zip(model_param_list(member.model), model_param_list(prev)):
                assert np.array_equal(a, b)
        probs = classifier_forward(clf, classifier_features(
            ens, windows[:5, :SPEC.prefix_len]))
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-12)


class TestClassifierSelect:
    def trained(self):
        ens = small_ensemble(seed=18, n_members=2)
        windows = random_windows(19, 20)
        clf = train_classifier(ens, windows, windows[:5], Rng(20),
                               opt=OptimizerConfig(learning_rate=0.02, batch_size=8),
                               hidden=(8, 4), max_epochs=2)
        return ens, clf, windows

    def test_single_member_picks_index_one(self):
        ens = small_ensemble(seed=21, n_members=1)
        windows = random_windows(22, 12)
        clf = train_classifier(ens, windows, windows[:4], Rng(23),
                               hidden=(8, 4), max_epochs=1)
        result = classifier_select(ens, clf, windows[0, :SPEC.prefix_len])
        assert result.model_index == 1

    def test_softmax_shift_invariance(self):
        ens, clf, windows = self.trained()
        prefix = windows[0, :SPEC.prefix_len]
        before = classifier_select(ens, clf, prefix)
        clf.b3[...] += 7.5   # constant shift of every pre-softmax score
        after = classifier_select(ens, clf, prefix)
        assert before.model_index == after.model_index

    def test_choice_is_argmax_of_scores(self):
        ens, clf, windows = self.trained()
        results = classifier_select_many(ens, clf, windows[:, :SPEC.prefix_len])
        for r in results:
            assert r.model_index == int(np.argmax(r.scores)) + 1
            assert abs(float(r.scores.sum()) - 1.0) < 1e-6
