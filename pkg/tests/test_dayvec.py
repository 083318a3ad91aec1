from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from promofit.dayvec import (
    DayVector,
    build_day_vector,
    compute_day_aggregates,
    cosine_similarity,
    read_day_vector,
    retrieve_top_k,
    select_representative_categories,
    vector_from_aggregates,
    write_day_vector,
)
from promofit.errors import ConfigError
from promofit.synthgen import (
    ClickBatch,
    DayType,
    MemoryDayStore,
    default_calendar,
    default_truth,
)


class DictStore:
    """Minimal store stub: explicit per-day batches and impression tables."""

    def __init__(self, events: dict, impressions: dict):
        self._events = events
        self._impressions = impressions

    def events(self, day: int) -> ClickBatch:
        return self._events[day]

    def impressions(self, day: int) -> np.ndarray:
        return self._impressions[day]


def make_batch(day, hours, converted, delays, category=None) -> ClickBatch:
    n = len(hours)
    return ClickBatch(
        day_index=day,
        hour=np.asarray(hours, dtype=np.int64),
        user_group=np.zeros(n, dtype=np.int64),
        category=np.asarray(category if category is not None else np.zeros(n), dtype=np.int64),
        noise=np.zeros((n, 4)),
        converted=np.asarray(converted, dtype=bool),
        delay_hours=np.asarray(delays, dtype=np.float64),
    )


def flat_impressions(counts_by_cat, n_hours=24) -> np.ndarray:
    counts = np.tile(np.asarray(counts_by_cat, dtype=np.int64), (n_hours, 1))
    return counts


def tiny_store() -> DictStore:
    nan = float("nan")
    events = {
        # day 0: two clicks, one converts in 10h (same day), one in 30h (next day)
        0: make_batch(0, [2, 5], [True, True], [10.0, 30.0]),
        # day 1: four clicks, one converts at 50h from hour 20 (lands day 3!)
        1: make_batch(1, [1, 8, 14, 20], [False, True, False, True], [nan, 4.0, nan, 50.0]),
        # day 2: no conversions
        2: make_batch(2, [3, 9], [False, False], [nan, nan]),
        3: make_batch(3, [0], [False], [nan]),
    }
    impressions = {
        0: flat_impressions([10, 30, 60]),  # ratios .1/.3/.6
        1: flat_impressions([50, 25, 25]),
        2: flat_impressions([20, 20, 60]),
        3: flat_impressions([80, 10, 10]),
    }
    return DictStore(events, impressions)


class TestBuildDayVector:
    def test_hand_computed_layout(self):
        store = tiny_store()
        vec = build_day_vector(store, 3, hour_cutoff=10, categories=(0, 2))
        # day 0 (T-3): click@2 delay 10 lands hour 12 (day 0); click@5 delay 30
        # lands hour 35 (day 1). cvr_1d=1/2, cvr_2d=2/2, cvr_3d=2/2.
        # day 1 (T-2): click@8 delay 4 lands same day; click@20 delay 50 lands
        # hour 70, i.e. day 3 -> outside the two-day window. cvr_1d=cvr_2d=1/4.
        # day 2 (T-1): no conversions -> cvr_1d=0.
        np.testing.assert_allclose(vec.cvr_feats, [0.0, 0.25, 0.25, 0.5, 1.0, 1.0])
        np.testing.assert_allclose(
            vec.impr_feats, [0.1, 0.5, 0.2, 0.6, 0.25, 0.6]
        )  # cat0@T-3,T-2,T-1 then cat2
        np.testing.assert_allclose(vec.early_feats, [0.8, 0.1])
        assert vec.values.size == 6 + 4 * 2

    def test_zero_conversion_history_gives_zero_cvr_feats(self):
        store = tiny_store()
        nan = float("nan")
        store._events[0] = make_batch(0, [2, 5], [False, False], [nan, nan])
        store._events[1] = make_batch(1, [1, 8], [False, False], [nan, nan])
        vec = build_day_vector(store, 3, hour_cutoff=10, categories=(0,))
        np.testing.assert_array_equal(vec.cvr_feats, np.zeros(6))

    def test_single_category_takes_ratio_one(self):
        store = tiny_store()
        store._impressions = {d: flat_impressions([100, 0, 0]) for d in range(4)}
        vec = build_day_vector(store, 3, hour_cutoff=10, categories=(0, 1))
        np.testing.assert_array_equal(vec.impr_feats, [1, 1, 1, 0, 0, 0])
        np.testing.assert_array_equal(vec.early_feats, [1, 0])

    def test_too_early_target_rejected(self):
        with pytest.raises(ConfigError):
            build_day_vector(tiny_store(), 2, hour_cutoff=10, categories=(0,))

    def test_missing_day_errors(self):
        store = tiny_store()
        del store._events[1]
        with pytest.raises((KeyError, ConfigError)):
            build_day_vector(store, 3, hour_cutoff=10, categories=(0,))

    def test_empty_day_errors(self):
        store = tiny_store()
        store._events[2] = make_batch(2, [], [], [])
        with pytest.raises(ConfigError, match="empty day"):
            build_day_vector(store, 3, hour_cutoff=10, categories=(0,))

    def test_promo_day_lifts_boosted_category_early_share(self):
        cal = default_calendar(60)
        truth = default_truth(cal)
        store = MemoryDayStore(cal, truth, n_clicks_per_day=4000, seed=17)
        peak = cal.peak_days()[0]
        fam = cal.families[peak]
        boosted = {0: 1, 1: 2}[fam]  # strongest surge category per archetype
        cats = tuple(range(truth.n_categories))
        peak_vec = build_day_vector(store, peak, 10, cats)
        peak_share = peak_vec.early_feats[boosted]
        for day in range(3, cal.num_days):
            if cal.day_types[day] == DayType.ORDINARY:
                ord_vec = build_day_vector(store, day, 10, cats)
                assert peak_share > ord_vec.early_feats[boosted]

    def test_matches_aggregate_assembly(self):
        cal = default_calendar(60)
        truth = default_truth(cal)
        store = MemoryDayStore(cal, truth, n_clicks_per_day=1500, seed=23)
        cats = (0, 1, 4, 7)
        direct = build_day_vector(store, 12, 10, cats)
        aggs = {d: compute_day_aggregates(store, d, 10) for d in (9, 10, 11, 12)}
        assembled = vector_from_aggregates(aggs[12], aggs[9], aggs[10], aggs[11], cats)
        np.testing.assert_array_equal(direct.values, assembled.values)


class TestFeatureCausality:
    def test_future_records_cannot_move_the_vector(self):
        cal = default_calendar(60)
        truth = default_truth(cal)
        store = MemoryDayStore(cal, truth, n_clicks_per_day=3000, seed=29)
        target, h = 20, 10
        cats = (0, 1, 2, 5)
        baseline = build_day_vector(store, target, h, cats)

        poisoned_events = {}
        for day in (17, 18, 19):
            batch = store.events(day)
            # kill every conversion that lands at or after day T's midnight;
            # a causal feature builder cannot have seen them
            lands_at = (day - target) * 24.0 + batch.hour + batch.delay_hours
            with np.errstate(invalid="ignore"):
                future = batch.converted & (lands_at >= 0.0)
            converted = batch.converted & ~future
            delay = np.where(future, np.nan, batch.delay_hours)
            poisoned_events[day] = replace(batch, converted=converted, delay_hours=delay)
        assert sum(int((~poisoned_events[d].converted & store.events(d).converted).sum())
                   for d in (17, 18, 19)) > 0

        # garbage on day T from hour h onward: labels flipped, impressions x1000
        target_batch = store.events(target)
        late = target_batch.hour >= h
        poisoned_events[target] = replace(
            target_batch,
            converted=np.where(late, ~target_batch.converted, target_batch.converted),
            delay_hours=np.where(late, 1.0, target_batch.delay_hours),
        )
        impressions = {d: store.impressions(d) for d in (17, 18, 19, target)}
        poisoned_impr = impressions[target].copy()
        poisoned_impr[h:] *= 1000
        impressions[target] = poisoned_impr

        poisoned = DictStore(poisoned_events, impressions)
        again = build_day_vector(poisoned, target, h, cats)
        np.testing.assert_array_equal(baseline.values, again.values)


class TestCosine:
    def vec(self, values) -> DayVector:
        return DayVector(day_index=0, hour_cutoff=10, categories=(0,), values=values)

    def test_identity(self):
        v = self.vec([0.2, 0.4, 0.1, 0.9, 0.3, 0.5, 0.2, 0.1, 0.6, 0.7])
        assert cosine_similarity(v, v) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal_one_hots(self):
        a = self.vec([1.0] + [0.0] * 9)
        b = self.vec([0.0, 1.0] + [0.0] * 8)
        assert cosine_similarity(a, b) == 0.0

    def test_known_angle(self):
        a = self.vec([1.0, 1.0] + [0.0] * 8)
        b = self.vec([1.0, 0.0] + [0.0] * 8)
        assert cosine_similarity(a, b) == pytest.approx(0.70710678, abs=1e-8)

    def test_zero_vector_rejected(self):
        a = self.vec([0.0] * 10)
        b = self.vec([1.0] + [0.0] * 9)
        with pytest.raises(ConfigError, match="degenerate"):
            cosine_similarity(a, b)

    def test_scale_invariance(self):
        rng = np.random.default_rng(31)
        for _ in range(25):
            a = self.vec(rng.random(10))
            b = self.vec(rng.random(10))
            scaled = self.vec(a.values * 0.37)
            assert cosine_similarity(scaled, b) == pytest.approx(
                cosine_similarity(a, b), abs=1e-12
            )


class TestRetrieve:
    def vec(self, day, values) -> DayVector:
        return DayVector(day_index=day, hour_cutoff=10, categories=(0,), values=values)

    def test_exact_copy_ranks_first(self):
        target = self.vec(10, [0.3, 0.7, 0.1, 0.5, 0.2, 0.4, 0.8, 0.1, 0.9, 0.2])
        rng = np.random.default_rng(37)
        history = [self.vec(d, rng.random(10)) for d in range(5)]
        history.append(self.vec(5, target.values.copy()))
        result = retrieve_top_k(target, history, k=2)
        assert result.ranked[0][0] == 5
        assert result.ranked[0][1] == pytest.approx(1.0, abs=1e-12)

    def test_k1_picks_higher_score(self):
        target = self.vec(9, [1.0, 1.0] + [0.0] * 8)
        near = self.vec(3, [1.0, 0.9] + [0.0] * 8)
        far = self.vec(4, [1.0, 0.0] + [0.0] * 8)
        result = retrieve_top_k(target, [far, near], k=1)
        assert result.days == (3,)

    def test_tie_prefers_recent_day(self):
        target = self.vec(9, [1.0, 0.0] + [0.0] * 8)
        a = self.vec(2, [0.5, 0.0] + [0.0] * 8)
        b = self.vec(7, [0.8, 0.0] + [0.0] * 8)  # same direction, same score 1.0
        result = retrieve_top_k(target, [a, b], k=2)
        assert result.days == (7, 2)
        assert result.ranked[0][1] == result.ranked[1][1] == pytest.approx(1.0, abs=1e-12)

    def test_small_history_truncates(self):
        target = self.vec(9, [1.0] + [0.0] * 9)
        history = [self.vec(1, [0.5, 0.5] + [0.0] * 8)]
        result = retrieve_top_k(target, history, k=2)
        assert result.truncated and len(result.ranked) == 1

    def test_history_after_target_rejected(self):
        target = self.vec(5, [1.0] + [0.0] * 9)
        history = [self.vec(6, [1.0] + [0.0] * 9)]
        with pytest.raises(ConfigError):
            retrieve_top_k(target, history, k=1)

    def test_ranking_invariant_to_target_rescaling(self):
        rng = np.random.default_rng(41)
        target = self.vec(30, rng.random(10))
        shrunk = self.vec(30, target.values * 0.25)
        history = [self.vec(d, rng.random(10)) for d in range(20)]
        assert retrieve_top_k(target, history, 5).days == retrieve_top_k(shrunk, history, 5).days


class TestCategorySelection:
    def test_gap_ranking_with_ties_by_id(self):
        ordinary = np.array([[0.5, 0.2, 0.2, 0.1]] * 3)
        promo = np.array([[0.3, 0.4, 0.2, 0.1]] * 2)  # gaps: .2, .2, 0, 0
        ratios = np.vstack([ordinary, promo])
        flags = np.array([False] * 3 + [True] * 2)
        assert select_representative_categories(ratios, flags, k=3) == (0, 1, 2)

    def test_no_promo_days_falls_back_to_first_ids(self):
        ratios = np.full((4, 5), 0.2)
        flags = np.zeros(4, dtype=bool)
        assert select_representative_categories(ratios, flags, k=2) == (0, 1)

    def test_k_out_of_range(self):
        ratios = np.full((4, 5), 0.2)
        flags = np.array([True, False, True, False])
        with pytest.raises(ConfigError):
            select_representative_categories(ratios, flags, k=6)

    def test_surge_categories_found_on_default_generator(self):
        cal = default_calendar(60)
        truth = default_truth(cal)
        store = MemoryDayStore(cal, truth, n_clicks_per_day=2000, seed=43)
        ratios = np.stack(
            [compute_day_aggregates(store, d, 10).cat_ratio_full for d in range(cal.num_days)]
        )
        flags = np.array([cal.families[d] >= 0 for d in range(cal.num_days)])
        picked = select_representative_categories(ratios, flags, k=7)
        # each archetype's headline sale category must make the cut; they are
        # what lets retrieval tell the two promotion archetypes apart
        assert {1, 2} <= set(picked)
        peaks = [d for d in range(cal.num_days) if cal.day_types[d] == DayType.PROMO_PEAK]
        fam0 = ratios[[d for d in peaks if cal.families[d] == 0]].mean(axis=0)
        fam1 = ratios[[d for d in peaks if cal.families[d] == 1]].mean(axis=0)
        assert fam0[1] > 3 * fam1[1]
        assert fam1[2] > 3 * fam0[2]


class TestSeparability:
    def test_same_family_peaks_cluster_together(self):
        cal = default_calendar(90)
        truth = default_truth(cal)
        store = MemoryDayStore(cal, truth, n_clicks_per_day=3000, seed=47)
        cats = (1, 2, 4, 5, 7, 8, 0)
        vectors = {d: build_day_vector(store, d, 10, cats) for d in range(3, cal.num_days)}
        peaks = [d for d in vectors if cal.day_types[d] == DayType.PROMO_PEAK]
        ordinary = [d for d in vectors if cal.day_types[d] == DayType.ORDINARY]
        for fam in (0, 1):
            own = [d for d in peaks if cal.families[d] == fam]
            same = [
                cosine_similarity(vectors[a], vectors[b]) for a in own for b in own if a < b
            ]
            vs_ordinary = [
                cosine_similarity(vectors[a], vectors[b]) for a in own for b in ordinary
            ]
            cross_family = [
                cosine_similarity(vectors[a], vectors[b])
                for a in own
                for b in peaks
                if cal.families[b] != fam
            ]
            # nearest neighbours of a sale day must be its own reruns, with
            # ordinary days closer than the competing archetype's sales
            assert np.mean(same) > np.mean(vs_ordinary) > np.mean(cross_family)


class TestSerialization:
    def test_roundtrip_exact(self, tmp_path):
        rng = np.random.default_rng(53)
        vec = DayVector(
            day_index=42,
            hour_cutoff=10,
            categories=(1, 4, 7),
            values=rng.random(6 + 12),
        )
        path = tmp_path / "vec.txt"
        write_day_vector(path, vec)
        again = read_day_vector(path)
        assert again.day_index == 42
        assert again.hour_cutoff == 10
        assert again.categories == (1, 4, 7)
        np.testing.assert_array_equal(again.values, vec.values)

    def test_bad_schema_rejected(self, tmp_path):
        path = tmp_path / "vec.txt"
        path.write_text("something.else.v9\n")
        with pytest.raises(ConfigError):
            read_day_vector(path)


class TestDayVectorValidation:
    def test_wrong_length_rejected(self):
        with pytest.raises(ConfigError):
            DayVector(day_index=0, hour_cutoff=10, categories=(0, 1), values=np.zeros(10))

    def test_out_of_range_rejected(self):
        with pytest.raises(ConfigError):
            DayVector(day_index=0, hour_cutoff=10, categories=(0,), values=np.full(10, 1.5))
