"""Label-shift estimation: conditional stats, the ridge closed form against
a grid-search oracle, importance weights, and the hour-ratio diagnostic."""

import dataclasses
import math

import numpy as np
import pytest

from promofit import synthgen as sg
from promofit.errors import ConfigError, RuntimeAbort
from promofit.metrics import EvalSet, auc
from promofit.model import CvrModel, LabeledExamples, ModelConfig, TrainConfig, predict, train
from promofit.shiftcorr import (
    CondPredMatrix,
    PredDist,
    ShiftEstimate,
    clip_label_dist,
    estimate_shift,
    historical_stats,
    hour_ratio_profile,
    importance_weights,
    read_shift_estimate,
    shift_objective,
    solve_label_dist,
    target_pred_dist,
    write_shift_estimate,
)

from _oracles import grid_min, grid_min_naive, random_shift_instance


@pytest.fixture(scope="module")
def world():
    cal = sg.default_calendar(60)
    truth = sg.default_truth(cal)
    ordinary = [d for d in range(60) if cal.day_types[d] == sg.DayType.ORDINARY]
    return cal, truth, ordinary


@pytest.fixture(scope="module")
def trained(world):
    cal, truth, ordinary = world
    batches = [sg.generate_day(cal, d, truth, 8000, seed=97) for d in ordinary[:5]]
    model = CvrModel.build(ModelConfig(sg.DEFAULT_USER_GROUPS, sg.DEFAULT_CATEGORIES), seed=11)
    train(model, LabeledExamples.from_batch(sg.concat_batches(batches)), TrainConfig(epochs=40, seed=11))
    held = LabeledExamples.from_batch(sg.generate_day(cal, ordinary[6], truth, 20000, seed=555))
    assert auc(EvalSet(predict(model, held), held.label)) >= 0.7
    return model


def separable_model():
    """Two user groups, group 1 always converts, group 0 never; the network
    is wired by hand to push the logit to the +-30 clip."""
    cfg = ModelConfig(2, 1, embed_dim=1, hidden_sizes=(1,), noise_dim=0)
    m = CvrModel.zeros(cfg)
    m.params["user_embed"][:] = [[-1.0], [1.0]]
    m.params["w0"][:] = [[1.0], [0.0]]
    m.params["w1"][:] = [[60.0]]
    m.params["b1"][:] = [-30.0]
    return m


def hand_batch(day, hours, user_group, converted):
    n = len(hours)
    return sg.ClickBatch(
        day_index=day,
        hour=np.asarray(hours, dtype=np.int64),
        user_group=np.asarray(user_group, dtype=np.int64),
        category=np.zeros(n, dtype=np.int64),
        noise=np.zeros((n, 0)),
        converted=np.asarray(converted, dtype=bool),
        delay_hours=np.full(n, np.nan),
    )


def separable_examples(labels):
    labels = np.asarray(labels, dtype=np.float64)
    return LabeledExamples(
        user_group=labels.astype(np.int64),
        category=np.zeros(labels.size, dtype=np.int64),
        noise=np.zeros((labels.size, 0)),
        label=labels,
    )


class TestDomainTypes:
    def test_pred_dist_accepts_valid(self):
        d = PredDist(np.array([0.3, 0.7]))
        assert d.m.sum() == 1.0

    def test_pred_dist_rejects_bad_sum(self):
        with pytest.raises(ConfigError, match="sum to 1"):
            PredDist(np.array([0.3, 0.6]))

    def test_pred_dist_rejects_out_of_range(self):
        with pytest.raises(ConfigError, match=r"\[0, 1\]"):
            PredDist(np.array([-0.1, 1.1]))

    def test_pred_dist_rejects_wrong_shape(self):
        with pytest.raises(ConfigError, match="2-vector"):
            PredDist(np.array([0.2, 0.3, 0.5]))

    def test_cond_matrix_accepts_valid(self):
        m = CondPredMatrix(np.array([[0.8, 0.1], [0.2, 0.9]]))
        assert m.condition_number > 1.0

    def test_cond_matrix_rejects_bad_column_sum(self):
        with pytest.raises(ConfigError, match="columns must sum to 1"):
            CondPredMatrix(np.array([[0.8, 0.1], [0.3, 0.9]]))

    def test_cond_matrix_identity_condition_number(self):
        assert CondPredMatrix(np.eye(2)).condition_number == pytest.approx(1.0)

    def test_shift_estimate_rejects_nonpositive_weights(self):
        with pytest.raises(ConfigError, match="positive"):
            ShiftEstimate(
                m_y=np.array([0.5, 0.5]),
                m_y_prior=np.array([0.5, 0.5]),
                weights=(0.0, 1.0),
                ridge=1.0,
                condition_number=1.0,
                clipped=False,
            )


class TestHistoricalStats:
    def test_perfect_classifier_gives_identity(self):
        # saturated logits land on the +-30 clip, so the soft columns sit
        # within sigmoid(-30) ~ 9.4e-14 of the exact one-hot split
        model = separable_model()
        ex = separable_examples([0, 1] * 20)
        soft, prior = historical_stats(model, ex, "soft", min_class_count=1)
        hard, _ = historical_stats(model, ex, "hard", min_class_count=1)
        assert np.abs(soft.matrix - np.eye(2)).max() < 1e-12
        assert np.array_equal(hard.matrix, np.eye(2))
        assert np.array_equal(prior, [0.5, 0.5])

    def test_uninformative_model_gives_half_columns(self):
        model = CvrModel.zeros(ModelConfig(2, 1, embed_dim=1, hidden_sizes=(1,), noise_dim=0))
        ex = separable_examples([0, 0, 1])
        matrix, prior = historical_stats(model, ex, min_class_count=1)
        assert np.array_equal(matrix.matrix, np.full((2, 2), 0.5))
        assert np.allclose(prior, [1 / 3, 2 / 3])

    def test_matches_single_pass_accumulation(self, world, trained):
        cal, truth, ordinary = world
        ex = LabeledExamples.from_batch(sg.generate_day(cal, ordinary[9], truth, 10000, seed=44))
        matrix, prior = historical_stats(trained, ex)
        p = predict(trained, ex)
        for col, cls in ((0, 1.0), (1, 0.0)):
            mask = ex.label == cls
            mean = math.fsum(float(v) for v in p[mask]) / int(mask.sum())
            assert abs(matrix.matrix[0, col] - mean) < 1e-12
            assert abs(matrix.matrix[1, col] - (1.0 - mean)) < 1e-12
        assert prior[0] == pytest.approx(float(np.mean(ex.label)), abs=1e-15)

    def test_hard_mode_thresholds(self):
        model = separable_model()
        # move the bias so group 0 scores ~0.27 and group 1 ~0.73: soft and
        # hard must now disagree, and hard must match direct counting
        model.params["b1"][:] = [-1.0]
        model.params["w1"][:] = [[2.0]]
        ex = separable_examples([0, 1, 1, 0, 1])
        soft, _ = historical_stats(model, ex, "soft", min_class_count=1)
        hard, _ = historical_stats(model, ex, "hard", min_class_count=1)
        assert np.array_equal(hard.matrix, np.eye(2))
        assert 0.6 < soft.matrix[0, 0] < 0.8

    def test_single_class_is_degenerate(self):
        with pytest.raises(ConfigError, match="degenerate conditional"):
            historical_stats(separable_model(), separable_examples([1, 1, 1]), min_class_count=1)

    def test_min_count_enforced(self):
        ex = separable_examples([0] * 20 + [1] * 3)
        with pytest.raises(ConfigError, match="degenerate conditional"):
            historical_stats(separable_model(), ex, min_class_count=5)
        historical_stats(separable_model(), ex, min_class_count=3)

    def test_unknown_mode_rejected(self):
        with pytest.raises(ConfigError, match="mode"):
            historical_stats(separable_model(), separable_examples([0, 1]), "fuzzy", min_class_count=1)


class TestTargetPredDist:
    def test_constant_prediction(self):
        model = separable_model()
        model.params["user_embed"][:] = 0.0
        model.params["b1"][:] = [math.log(0.02 / 0.98)]
        model.params["w1"][:] = [[1.0]]
        d = target_pred_dist(model, separable_examples([0, 1, 0, 1]))
        assert np.allclose(d.m, [0.02, 0.98], atol=1e-12)

    def test_saturated_prediction(self):
        model = separable_model()
        model.params["user_embed"][:] = 1.0
        d = target_pred_dist(model, separable_examples([1, 1, 1]))
        assert np.allclose(d.m, [1.0, 0.0], atol=1e-12)

    def test_matches_single_pass_accumulation(self, world, trained):
        cal, truth, ordinary = world
        batch = sg.generate_day(cal, ordinary[10], truth, 5000, seed=45)
        d = target_pred_dist(trained, batch)
        mean = math.fsum(float(v) for v in predict(trained, batch)) / batch.n
        assert abs(d.m[0] - mean) < 1e-12

    def test_empty_input_rejected(self, trained):
        with pytest.raises(ConfigError, match="empty"):
            target_pred_dist(trained, hand_batch(0, [], [], []))


class TestSolveLabelDist:
    def test_identity_matrix_returns_observation(self):
        out = solve_label_dist(CondPredMatrix(np.eye(2)), PredDist(np.array([0.3, 0.7])),
                               np.array([0.5, 0.5]), 0.0)
        assert np.allclose(out, [0.3, 0.7], atol=1e-15)

    def test_huge_ridge_returns_prior(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            m, m_hat, b0, _ = random_shift_instance(rng)
            out = solve_label_dist(CondPredMatrix(m), PredDist(m_hat), b0, 1e12)
            assert np.abs(out - b0).max() < 1e-6

    def test_matches_grid_oracle_at_unit_ridge(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            m, m_hat, b0, _ = random_shift_instance(rng)
            matrix, dist = CondPredMatrix(m), PredDist(m_hat)
            b = solve_label_dist(matrix, dist, b0, 1.0)
            f_closed = shift_objective(b, matrix, dist, b0, 1.0)
            f_grid, *_ = grid_min(m, m_hat, b0, 1.0)
            assert abs(f_grid - f_closed) <= 1e-8
            assert f_closed <= f_grid + 1e-12

    def test_matches_grid_oracle_at_random_ridge(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            m, m_hat, b0, ridge = random_shift_instance(rng)
            matrix, dist = CondPredMatrix(m), PredDist(m_hat)
            b = solve_label_dist(matrix, dist, b0, ridge)
            f_closed = shift_objective(b, matrix, dist, b0, ridge)
            f_grid, *_ = grid_min(m, m_hat, b0, ridge)
            assert abs(f_grid - f_closed) <= 1e-8

    def test_grid_shortcut_equals_enumeration(self):
        # the column-scan oracle must be the exact grid minimum, proven here
        # against brute-force enumeration of the full two-stage grid
        rng = np.random.default_rng(12)
        for _ in range(12):
            m, m_hat, b0, ridge = random_shift_instance(rng)
            assert grid_min(m, m_hat, b0, ridge) == grid_min_naive(m, m_hat, b0, ridge)

    def test_singular_without_ridge_rejected(self):
        flat = CondPredMatrix(np.array([[0.5, 0.5], [0.5, 0.5]]))
        with pytest.raises(RuntimeAbort, match="singular system"):
            solve_label_dist(flat, PredDist(np.array([0.4, 0.6])), np.array([0.5, 0.5]), 0.0)

    def test_singular_with_ridge_solves(self):
        flat = CondPredMatrix(np.array([[0.5, 0.5], [0.5, 0.5]]))
        out = solve_label_dist(flat, PredDist(np.array([0.4, 0.6])), np.array([0.5, 0.5]), 1.0)
        assert np.all(np.isfinite(out))

    def test_negative_ridge_rejected(self):
        with pytest.raises(ConfigError, match="ridge"):
            solve_label_dist(CondPredMatrix(np.eye(2)), PredDist(np.array([0.4, 0.6])),
                             np.array([0.5, 0.5]), -1.0)

    def test_ridge_pulls_monotonically_toward_prior(self):
        rng = np.random.default_rng(13)
        for _ in range(5):
            m, m_hat, b0, _ = random_shift_instance(rng)
            prev = np.inf
            for ridge in (0.0, 1e-3, 1e-2, 0.1, 1.0, 10.0, 1e3, 1e6):
                b = solve_label_dist(CondPredMatrix(m), PredDist(m_hat), b0, ridge)
                dist = float(np.linalg.norm(b - b0))
                assert dist <= prev + 1e-12
                prev = dist


class TestClipLabelDist:
    def test_in_range_raw_is_not_flagged(self):
        out, flagged = clip_label_dist(np.array([0.2, 0.6]))
        assert not flagged
        assert np.allclose(out, [0.25, 0.75])

    def test_negative_component_clips_and_flags(self):
        out, flagged = clip_label_dist(np.array([-0.2, 1.1]))
        assert flagged
        assert out.min() >= 1e-6 / 2
        assert out.sum() == pytest.approx(1.0, abs=1e-15)

    def test_non_finite_rejected(self):
        with pytest.raises(ConfigError, match="finite"):
            clip_label_dist(np.array([np.nan, 0.5]))


class TestImportanceWeights:
    def test_no_shift_gives_unit_weights(self):
        assert importance_weights(np.array([0.3, 0.7]), np.array([0.3, 0.7])) == (1.0, 1.0)

    def test_worked_example(self):
        w_pos, w_neg = importance_weights(np.array([0.02, 0.98]), np.array([0.01, 0.99]))
        assert w_pos == pytest.approx(2.0, abs=1e-12)
        assert w_neg == pytest.approx(0.98989899, abs=1e-8)

    def test_vanishing_prior_rejected(self):
        with pytest.raises(ConfigError, match="vanishing"):
            importance_weights(np.array([0.5, 0.5]), np.array([1e-9, 1.0 - 1e-9]))


class TestEstimateShift:
    def test_consistency_no_shift_gives_unit_weights(self, world, trained):
        # target drawn from the same distribution as the history: importance
        # weights must come back within 0.05 of (1, 1) at this sample size
        cal, truth, ordinary = world
        for s in range(4):
            hist = sg.generate_day(cal, ordinary[7], truth, 100_000, seed=2000 + s)
            tgt = sg.generate_day(cal, ordinary[8], truth, 100_000, seed=6000 + s)
            est = estimate_shift(trained, hist, tgt, hour=24)
            assert abs(est.weights[0] - 1.0) < 0.05
            assert abs(est.weights[1] - 1.0) < 0.05
            assert not est.clipped

    def test_recovers_planted_double_rate(self, world, trained):
        # same class conditionals, positive rate doubled on the target day;
        # the estimate must land within 10% relative and the positive weight
        # inside [1.8, 2.2]
        cal, truth, ordinary = world
        mults = list(truth.rate_multipliers)
        mults[ordinary[8]] = 2.0
        truth2 = dataclasses.replace(truth, rate_multipliers=tuple(mults))
        true_rate = truth2.day_positive_rate(cal, ordinary[8])
        for s in range(1, 4):
            hist = sg.generate_day(cal, ordinary[7], truth2, 100_000, seed=1000 + s)
            tgt = sg.generate_day(cal, ordinary[8], truth2, 100_000, seed=5000 + s)
            est = estimate_shift(trained, hist, tgt, hour=24, ridge=1e-4)
            assert abs(est.m_y[0] - true_rate) / true_rate <= 0.10
            assert 1.8 <= est.weights[0] <= 2.2

    def test_soft_and_hard_agree_for_perfect_classifier(self):
        model = separable_model()
        hist = hand_batch(1, [0] * 60, [0] * 40 + [1] * 20, [0] * 40 + [1] * 20)
        tgt = hand_batch(2, [0] * 40, [0] * 28 + [1] * 12, [0] * 28 + [1] * 12)
        kw = dict(hour=24, ridge=0.0, min_class_count=1)
        soft = estimate_shift(model, hist, tgt, mode="soft", **kw)
        hard = estimate_shift(model, hist, tgt, mode="hard", **kw)
        assert np.allclose(soft.m_y, hard.m_y, atol=1e-9)
        assert np.allclose(hard.m_y, [0.3, 0.7], atol=1e-12)
        assert hard.weights[0] == pytest.approx(0.9, abs=1e-12)

    def test_list_history_pools_before_estimating(self, world, trained):
        cal, truth, ordinary = world
        a = sg.generate_day(cal, ordinary[7], truth, 20000, seed=70)
        b = sg.generate_day(cal, ordinary[9], truth, 20000, seed=71)
        tgt = sg.generate_day(cal, ordinary[8], truth, 20000, seed=72)
        pooled = estimate_shift(trained, [a, b], tgt)
        manual = estimate_shift(trained, sg.concat_batches([a, b]), tgt)
        assert np.array_equal(pooled.m_y, manual.m_y)
        assert pooled.weights == manual.weights

    def test_hour_alignment_slices_history(self, world, trained):
        # aligned mode must equal manually truncating the history by hand
        cal, truth, ordinary = world
        hist = sg.generate_day(cal, 41, truth, 50000, seed=73)
        tgt = sg.generate_day(cal, 11, truth, 50000, seed=74)
        aligned = estimate_shift(trained, hist, tgt, hour=10)
        manual = estimate_shift(trained, hist.before_hour(10), tgt, hour=10, align="full")
        assert np.array_equal(aligned.m_y, manual.m_y)
        full = estimate_shift(trained, hist, tgt, hour=10, align="full")
        assert not np.array_equal(aligned.m_y, full.m_y)

    def test_bad_arguments_rejected(self, trained):
        b = hand_batch(0, [0, 1], [0, 1], [0, 1])
        with pytest.raises(ConfigError, match="hour"):
            estimate_shift(trained, b, b, hour=0)
        with pytest.raises(ConfigError, match="align"):
            estimate_shift(trained, b, b, align="sideways")
        with pytest.raises(ConfigError, match="no historical days"):
            estimate_shift(trained, [], b)


class TestHourRatioProfile:
    class Store(dict):
        def events(self, day):
            return self[day]

    def test_day_against_itself_is_flat_one(self, world):
        cal, truth, _ = world
        store = self.Store({11: sg.generate_day(cal, 11, truth, 10000, seed=31)})
        ratio = hour_ratio_profile(store, 11, 11)
        assert ratio.shape == (24,)
        assert np.nanmax(np.abs(ratio - 1.0)) == 0.0

    def test_same_family_spread_stays_under_ten_percent(self, world):
        # days 11 and 41 share one sale archetype and differ only by a flat
        # rate multiplier, so their cumulative ratio should be nearly level
        # across the day; day 26 runs the other archetype with a different
        # evening skew and must wander visibly more
        cal, truth, _ = world
        store = self.Store(
            {d: sg.generate_day(cal, d, truth, 200_000, seed=31) for d in (11, 41, 26)}
        )

        def spread(r):
            r = r[5:]  # hours 6 through 24, per-hour entries are 1-indexed
            return float((np.nanmax(r) - np.nanmin(r)) / np.nanmean(r))

        same_family = spread(hour_ratio_profile(store, 11, 41))
        cross_family = spread(hour_ratio_profile(store, 11, 26))
        assert same_family < 0.10
        assert cross_family > same_family

    def test_zero_conversion_denominator_is_nan(self):
        store = self.Store()
        store[1] = hand_batch(1, [0, 1, 2, 3, 4], [0] * 5, [1, 1, 1, 1, 1])
        store[2] = hand_batch(2, [0, 1, 2, 3, 4], [0] * 5, [0, 0, 0, 1, 1])
        ratio = hour_ratio_profile(store, 1, 2)
        assert np.all(np.isnan(ratio[:3]))
        assert np.all(np.isfinite(ratio[3:]))

    def test_empty_day_rejected(self):
        store = self.Store({1: hand_batch(1, [], [], []), 2: hand_batch(2, [0], [0], [1])})
        with pytest.raises(ConfigError, match="empty day"):
            hour_ratio_profile(store, 1, 2)


class TestRecordIO:
    def test_roundtrip_is_exact(self, tmp_path, world, trained):
        cal, truth, ordinary = world
        hist = sg.generate_day(cal, ordinary[7], truth, 30000, seed=80)
        tgt = sg.generate_day(cal, ordinary[8], truth, 30000, seed=81)
        est = estimate_shift(trained, hist, tgt)
        path = tmp_path / "shift.tsv"
        write_shift_estimate(path, est)
        back = read_shift_estimate(path)
        assert np.array_equal(back.m_y, est.m_y)
        assert np.array_equal(back.m_y_prior, est.m_y_prior)
        assert back.weights == est.weights
        assert back.ridge == est.ridge
        assert back.condition_number == est.condition_number
        assert back.clipped == est.clipped

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "junk.tsv"
        path.write_text("not a record\n")
        with pytest.raises(ConfigError, match="not a shift-estimate record"):
            read_shift_estimate(path)

    def test_rejects_truncated_record(self, tmp_path, world, trained):
        cal, truth, ordinary = world
        hist = sg.generate_day(cal, ordinary[7], truth, 30000, seed=80)
        tgt = sg.generate_day(cal, ordinary[8], truth, 30000, seed=81)
        path = tmp_path / "shift.tsv"
        write_shift_estimate(path, estimate_shift(trained, hist, tgt))
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:3]) + "\n")
        with pytest.raises(ConfigError, match="malformed"):
            read_shift_estimate(path)
