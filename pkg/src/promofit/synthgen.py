"""Synthetic clickstream generator with a promotion calendar and delayed labels.

The generator is the test bed's oracle: every downstream component is judged
against quantities that are exact by construction here. Design constraints,
all load-bearing for the test suite:

  * Label-first sampling. For each click we draw hour, then the conversion
    label, then the (user_group, category) cell from a per-class cell
    distribution. Days sharing a (day_type, promo_family) profile therefore
    have *identical* class-conditional feature distributions, while their
    positive rates may differ through per-promotion rate multipliers. That
    makes "the class conditionals are preserved, only the label mix moves"
    exactly true between same-family days, which is the regime the shift
    corrector assumes.
  * Conversion delays are a two-component mixture of exponentials truncated
    at the 72 h attribution window (a fast "impulse" component and a slow
    tail). One exponential cannot reproduce realistic one-day and two-day
    conversion shares simultaneously; the mixture hits both targets exactly
    in expectation (see fit_delay_mixture).
  * Hour-of-day affects volume (hour_clicks) and conversion propensity
    (hour_boost, click-weighted mean 1). The boost curve is shared within a
    profile, so cumulative-CVR ratios between same-family days are constant
    in the hour, another property the shift corrector leans on.

Everything is reproducible bit-for-bit from (config, seed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from enum import IntEnum
from pathlib import Path
from typing import Iterator, Mapping, NamedTuple

import numpy as np
from scipy.optimize import brentq

from ._rng import child_rng
from .errors import ConfigError

ATTRIBUTION_HOURS = 72.0
DEFAULT_WAITING_HOURS = 24.0
NOISE_DIM = 4

EVENTS_SCHEMA = "promofit.events.v1"
IMPRESSIONS_SCHEMA = "promofit.impressions.v1"
MANIFEST_SCHEMA = "promofit.dataset.v1"


class DayType(IntEnum):
    ORDINARY = 0
    PRE_PROMO = 1
    PROMO_PEAK = 2
    POST_PROMO = 3


# ----- Calendar -----


@dataclass(frozen=True)
class PromotionSpec:
    """One promotion: pre_days of ramp-up, peak_days of sale, post_days of cooldown."""

    peak_start: int
    family: int = 0
    pre_days: int = 2
    peak_days: int = 3
    post_days: int = 2

    def __post_init__(self) -> None:
        if min(self.pre_days, self.peak_days, self.post_days) < 1:
            raise ConfigError("promotion phases must each span at least one day")
        if self.family < 0:
            raise ConfigError("promo family must be nonnegative")

    @property
    def first_day(self) -> int:
        return self.peak_start - self.pre_days

    @property
    def last_day(self) -> int:
        return self.peak_start + self.peak_days + self.post_days - 1


@dataclass(frozen=True)
class CalendarConfig:
    num_days: int
    promotions: tuple[PromotionSpec, ...] = ()


@dataclass(frozen=True)
class PromotionCalendar:
    num_days: int
    day_types: tuple[DayType, ...]
    families: tuple[int, ...]  # -1 outside promotion windows
    promo_index: tuple[int, ...]  # which PromotionSpec a day belongs to, -1 outside

    def family_of(self, day: int) -> int:
        return self.families[day]

    def peak_days(self) -> list[int]:
        return [d for d in range(self.num_days) if self.day_types[d] == DayType.PROMO_PEAK]

    def promo_days(self) -> list[int]:
        return [d for d in range(self.num_days) if self.families[d] >= 0]


def build_calendar(config: CalendarConfig) -> PromotionCalendar:
    if config.num_days < 1:
        raise ConfigError("calendar needs at least one day")
    types = [DayType.ORDINARY] * config.num_days
    families = [-1] * config.num_days
    promo_index = [-1] * config.num_days
    for i, promo in enumerate(config.promotions):
        if promo.first_day < 0 or promo.last_day >= config.num_days:
            raise ConfigError(f"promotion {i} falls outside the calendar")
        for day in range(promo.first_day, promo.last_day + 1):
            if families[day] != -1:
                raise ConfigError(f"promotion {i} overlaps an earlier promotion on day {day}")
            if day < promo.peak_start:
                types[day] = DayType.PRE_PROMO
            elif day < promo.peak_start + promo.peak_days:
                types[day] = DayType.PROMO_PEAK
            else:
                types[day] = DayType.POST_PROMO
            families[day] = promo.family
            promo_index[day] = i
    return PromotionCalendar(
        num_days=config.num_days,
        day_types=tuple(types),
        families=tuple(families),
        promo_index=tuple(promo_index),
    )


# ----- Delay model -----


@dataclass(frozen=True)
class DelayMixture:
    """Fast/slow exponential mixture, each component truncated at cap_hours."""

    fast_share: float
    fast_rate: float  # per hour
    slow_rate: float
    cap_hours: float = ATTRIBUTION_HOURS

    def __post_init__(self) -> None:
        if not 0.0 <= self.fast_share <= 1.0:
            raise ConfigError("fast_share outside [0, 1]")
        if min(self.fast_rate, self.slow_rate) <= 0.0:
            raise ConfigError("delay rates must be positive")

    def cdf(self, t: np.ndarray | float) -> np.ndarray | float:
        t = np.clip(t, 0.0, self.cap_hours)

        def part(rate: float) -> np.ndarray | float:
            return -np.expm1(-rate * t) / -np.expm1(-rate * self.cap_hours)

        return self.fast_share * part(self.fast_rate) + (1.0 - self.fast_share) * part(
            self.slow_rate
        )

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        slow = rng.random(n) >= self.fast_share
        return self.sample_given(rng, slow)

    def sample_given(self, rng: np.random.Generator, slow: np.ndarray) -> np.ndarray:
        """Delays with the component membership already decided per event."""
        rate = np.where(slow, self.slow_rate, self.fast_rate)
        # inverse CDF of the truncated exponential
        u = rng.random(slow.size)
        return -np.log1p(u * np.expm1(-rate * self.cap_hours)) / rate


def fit_delay_mixture(
    one_day_share: float,
    two_day_share: float,
    fast_rate: float = 1.0 / 3.0,
    cap_hours: float = ATTRIBUTION_HOURS,
) -> DelayMixture:
    """Solve (fast_share, slow_rate) so that P(delay<=24h) and P(delay<=48h)
    among converted clicks equal the two targets exactly.

    With q = exp(-24*rate), a single truncated exponential forces
    P(<=24) = 1/(1+q+q^2) and P(<=48) = (1+q)/(1+q+q^2), which cannot hit
    both realistic targets at once. Decreasing-density mixtures cover
    exactly the region two_day <= 2*one_day and two_day >= (1+one_day)/2.
    """
    r1, r2 = one_day_share, two_day_share
    if not 0.0 < r1 < r2 < 1.0:
        raise ConfigError("need 0 < one_day_share < two_day_share < 1")
    if r2 > 2.0 * r1 + 1e-12 or r2 < (1.0 + r1) / 2.0 - 1e-12:
        raise ConfigError("targets outside the exponential-mixture envelope")

    def shares(q: float) -> tuple[float, float]:
        denom = 1.0 + q + q * q
        return 1.0 / denom, (1.0 + q) / denom

    q_fast = float(np.exp(-24.0 * fast_rate))
    a1, b1 = shares(q_fast)

    def residual(q_slow: float) -> float:
        a2, b2 = shares(q_slow)
        if abs(a1 - a2) < 1e-15:
            return b1 - r2
        share = (r1 - a2) / (a1 - a2)
        return share * b1 + (1.0 - share) * b2 - r2

    q_slow = brentq(residual, q_fast * (1.0 + 1e-9), 1.0 - 1e-12, xtol=1e-15)
    a2, _ = shares(q_slow)
    share = (r1 - a2) / (a1 - a2)
    if not -1e-9 <= share <= 1.0 + 1e-9:
        raise ConfigError("targets not representable with the given fast rate")
    return DelayMixture(
        fast_share=float(min(max(share, 0.0), 1.0)),
        fast_rate=fast_rate,
        slow_rate=float(-np.log(q_slow) / 24.0),
        cap_hours=cap_hours,
    )


# ----- Ground truth -----


@dataclass(frozen=True)
class DayProfile:
    """Generator parameters for one (day_type, promo_family) combination."""

    pos_rate: float  # P(converted within the attribution window)
    cell_pos: np.ndarray  # (G, C) cell distribution given converted
    cell_neg: np.ndarray  # (G, C) given not converted
    hour_clicks: np.ndarray  # (24,) click volume share per hour
    hour_boost: np.ndarray  # (24,) conversion multiplier, click-weighted mean 1
    delay: DelayMixture
    impression_mix: np.ndarray  # (C,) category share of impressions
    impressions_per_click: float
    # (G, C) probability a conversion draws the slow delay component, or None
    # to use the mixture's own fast_share uniformly. Delay timing conditions
    # on (cell, converted) only, so this never touches the class conditionals.
    delay_slow_share: np.ndarray | None = None

    def __post_init__(self) -> None:
        for name in ("cell_pos", "cell_neg", "hour_clicks", "hour_boost", "impression_mix"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.delay_slow_share is not None:
            share = np.asarray(self.delay_slow_share, dtype=np.float64)
            object.__setattr__(self, "delay_slow_share", share)
            if share.shape != np.asarray(self.cell_pos).shape:
                raise ConfigError("delay_slow_share must be per cell")
            if np.any(share < 0.0) or np.any(share > 1.0):
                raise ConfigError("delay_slow_share outside [0, 1]")
        if not 0.0 <= self.pos_rate <= 1.0:
            raise ConfigError("pos_rate outside [0, 1]")
        for name in ("cell_pos", "cell_neg", "impression_mix"):
            arr = getattr(self, name)
            if np.any(arr < 0) or abs(arr.sum() - 1.0) > 1e-9:
                raise ConfigError(f"{name} must be a distribution")
        if self.cell_pos.shape != self.cell_neg.shape or self.cell_pos.ndim != 2:
            raise ConfigError("cell distributions must share a (G, C) shape")
        if self.hour_clicks.shape != (24,) or self.hour_boost.shape != (24,):
            raise ConfigError("hour curves must have 24 entries")
        if np.max(self.pos_rate * self.hour_boost) > 1.0 + 1e-12:
            raise ConfigError("hourly conversion probability exceeds 1")

    def cell_conversion_probs(self) -> np.ndarray:
        """Implied per-cell conversion probability P(y=1 | cell), (G, C)."""
        joint_pos = self.pos_rate * self.cell_pos
        joint = joint_pos + (1.0 - self.pos_rate) * self.cell_neg
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.where(joint > 0, joint_pos / joint, 0.0)
        return out


def profile_from_cell_rates(
    traffic: np.ndarray,
    cell_cvr: np.ndarray,
    hour_clicks: np.ndarray,
    hour_boost: np.ndarray,
    delay: DelayMixture,
    impression_mix: np.ndarray,
    impressions_per_click: float = 25.0,
    delay_slow_share: np.ndarray | None = None,
) -> DayProfile:
    """Build a profile from the causal view (cell traffic + per-cell CVR).

    Inverted through Bayes into the label-first parameterization the sampler
    uses; cell_conversion_probs() recovers cell_cvr exactly.
    """
    traffic = np.asarray(traffic, dtype=np.float64)
    cell_cvr = np.asarray(cell_cvr, dtype=np.float64)
    if traffic.shape != cell_cvr.shape:
        raise ConfigError("traffic and cell_cvr shapes differ")
    if np.any(cell_cvr < 0) or np.any(cell_cvr > 1):
        raise ConfigError("cell conversion rates outside [0, 1]")
    traffic = traffic / traffic.sum()
    pos_rate = float((traffic * cell_cvr).sum())
    if not 0.0 < pos_rate < 1.0:
        raise ConfigError("degenerate day-level conversion rate")
    hour_clicks = np.asarray(hour_clicks, dtype=np.float64)
    hour_clicks = hour_clicks / hour_clicks.sum()
    hour_boost = np.asarray(hour_boost, dtype=np.float64)
    hour_boost = hour_boost / float((hour_clicks * hour_boost).sum())
    impression_mix = np.asarray(impression_mix, dtype=np.float64)
    return DayProfile(
        pos_rate=pos_rate,
        cell_pos=traffic * cell_cvr / pos_rate,
        cell_neg=traffic * (1.0 - cell_cvr) / (1.0 - pos_rate),
        hour_clicks=hour_clicks,
        hour_boost=hour_boost,
        delay=delay,
        impression_mix=impression_mix / impression_mix.sum(),
        impressions_per_click=impressions_per_click,
        delay_slow_share=delay_slow_share,
    )


@dataclass(frozen=True)
class GroundTruth:
    """Per-(day_type, family) profiles plus per-day rate multipliers.

    Multipliers scale only the positive rate, never the class conditionals,
    so they are a pure label-shift knob between days that share a profile.

    With a nonzero drift amplitude, each cell's conversion rate additionally
    wanders on a slow sinusoid (merchandising, price position and inventory
    rotate over weeks; a cell's quality is not a catalog constant). Days far
    apart then rank cells measurably differently even when they repeat the
    same sale, while neighbouring days stay close. Zero amplitude restores
    exact day-type profiles.
    """

    n_user_groups: int
    n_categories: int
    profiles: Mapping[tuple[DayType, int], DayProfile]
    rate_multipliers: tuple[float, ...]
    rate_drift_amplitude: float = 0.0
    rate_drift_period_days: float = 0.0
    session_signal_scale: float = 0.0
    session_signal_period_days: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.rate_drift_amplitude < 1.0:
            raise ConfigError("rate_drift_amplitude outside [0, 1)")
        if self.rate_drift_amplitude > 0.0 and self.rate_drift_period_days <= 0.0:
            raise ConfigError("rate drift needs a positive period")
        if self.session_signal_scale < 0.0:
            raise ConfigError("session_signal_scale must be nonnegative")
        if self.session_signal_scale > 0.0 and self.session_signal_period_days <= 0.0:
            raise ConfigError("session signal needs a positive period")
        object.__setattr__(self, "_drift_cache", {})

    def session_signal_direction(self, day: int) -> np.ndarray | None:
        """Unit direction of the converted-session trace on a given day.

        Converted sessions leave a weak directional mark in the first two
        dense features (what browsing-with-intent looks like is not fixed;
        instrumentation and shopping habits move with the season). The mark
        rotates through a full turn per period, so a reader tuned half a
        period ago has the direction backwards, while day-to-day the world
        barely moves. Class conditionals over (group, category) cells never
        see it, which keeps label-shift estimation honest by construction.
        """
        if self.session_signal_scale == 0.0:
            return None
        theta = 2.0 * np.pi * day / self.session_signal_period_days
        return np.array([np.cos(theta), np.sin(theta)])

    def profile_for(self, calendar: PromotionCalendar, day: int) -> DayProfile:
        key = (calendar.day_types[day], calendar.families[day])
        base = self.profiles[key]
        if self.rate_drift_amplitude == 0.0:
            return base
        cache: dict = self._drift_cache  # type: ignore[attr-defined]
        hit = cache.get((key, day))
        if hit is None:
            hit = cache[(key, day)] = self._drifted(base, day)
        return hit

    def _drifted(self, base: DayProfile, day: int) -> DayProfile:
        cvr = base.cell_conversion_probs()
        traffic = base.pos_rate * base.cell_pos + (1.0 - base.pos_rate) * base.cell_neg
        # fixed per-cell phases, golden-ratio spaced so no two cells move in
        # step; the drift is a property of the world, not of any seed
        idx = np.arange(cvr.size, dtype=np.float64).reshape(cvr.shape)
        phase = 2.0 * np.pi * ((0.6180339887498949 * (idx + 1.0)) % 1.0)
        angle = 2.0 * np.pi * day / self.rate_drift_period_days + phase
        mod = 1.0 + self.rate_drift_amplitude * np.sin(angle)
        # clip looser than the profile builders so modulation stays two-sided
        drifted = np.clip(cvr * mod, 0.0005, 0.8)
        return profile_from_cell_rates(
            traffic=traffic,
            cell_cvr=drifted,
            hour_clicks=base.hour_clicks,
            hour_boost=base.hour_boost,
            delay=base.delay,
            impression_mix=base.impression_mix,
            impressions_per_click=base.impressions_per_click,
            delay_slow_share=base.delay_slow_share,
        )

    def day_positive_rate(self, calendar: PromotionCalendar, day: int) -> float:
        return self.profile_for(calendar, day).pos_rate * self.rate_multipliers[day]


# ----- Event containers -----


class ClickEvent(NamedTuple):
    day_index: int
    hour: int
    user_group: int
    category: int
    noise_feats: np.ndarray
    converted: bool
    delay_hours: float  # NaN when not converted


@dataclass(frozen=True)
class ClickBatch:
    """Columnar store of one day's clicks, rows ordered by click hour."""

    day_index: int
    hour: np.ndarray
    user_group: np.ndarray
    category: np.ndarray
    noise: np.ndarray  # (n, NOISE_DIM)
    converted: np.ndarray  # bool
    delay_hours: np.ndarray  # NaN where not converted

    @property
    def n(self) -> int:
        return self.hour.size

    def row(self, i: int) -> ClickEvent:
        return ClickEvent(
            day_index=self.day_index,
            hour=int(self.hour[i]),
            user_group=int(self.user_group[i]),
            category=int(self.category[i]),
            noise_feats=self.noise[i],
            converted=bool(self.converted[i]),
            delay_hours=float(self.delay_hours[i]),
        )

    def __iter__(self) -> Iterator[ClickEvent]:
        return (self.row(i) for i in range(self.n))

    def select(self, mask: np.ndarray) -> "ClickBatch":
        return ClickBatch(
            day_index=self.day_index,
            hour=self.hour[mask],
            user_group=self.user_group[mask],
            category=self.category[mask],
            noise=self.noise[mask],
            converted=self.converted[mask],
            delay_hours=self.delay_hours[mask],
        )

    def before_hour(self, hour: int) -> "ClickBatch":
        return self.select(self.hour < hour)

    def from_hour(self, hour: int) -> "ClickBatch":
        return self.select(self.hour >= hour)


def concat_batches(batches: list[ClickBatch]) -> ClickBatch:
    if not batches:
        raise ValueError("nothing to concatenate")
    return ClickBatch(
        day_index=batches[0].day_index,
        hour=np.concatenate([b.hour for b in batches]),
        user_group=np.concatenate([b.user_group for b in batches]),
        category=np.concatenate([b.category for b in batches]),
        noise=np.concatenate([b.noise for b in batches]),
        converted=np.concatenate([b.converted for b in batches]),
        delay_hours=np.concatenate([b.delay_hours for b in batches]),
    )


# ----- Sampling -----


def generate_day(
    calendar: PromotionCalendar,
    day: int,
    truth: GroundTruth,
    n_clicks: int,
    seed: int,
) -> ClickBatch:
    """Sample one day of clicks; independent of every other day's stream."""
    if not 0 <= day < calendar.num_days:
        raise ConfigError("day outside the calendar")
    if n_clicks < 1:
        raise ConfigError("n_clicks must be positive")
    profile = truth.profile_for(calendar, day)
    mult = truth.rate_multipliers[day]
    if np.max(profile.pos_rate * mult * profile.hour_boost) > 1.0 + 1e-12:
        raise ConfigError("rate multiplier pushes an hourly conversion probability above 1")

    rng = child_rng(seed, "events", day)
    hour = rng.choice(24, size=n_clicks, p=profile.hour_clicks)
    p_hour = profile.pos_rate * mult * profile.hour_boost[hour]
    converted = rng.random(n_clicks) < p_hour

    g, c = profile.cell_pos.shape
    cells = np.empty(n_clicks, dtype=np.int64)
    n_pos = int(converted.sum())
    if n_pos:
        cells[converted] = rng.choice(g * c, size=n_pos, p=profile.cell_pos.ravel())
    if n_pos < n_clicks:
        cells[~converted] = rng.choice(g * c, size=n_clicks - n_pos, p=profile.cell_neg.ravel())

    noise = rng.standard_normal((n_clicks, NOISE_DIM))
    direction = truth.session_signal_direction(day)
    if direction is not None and n_pos:
        noise[converted, :2] += truth.session_signal_scale * direction
    delay = np.full(n_clicks, np.nan)
    if n_pos:
        if profile.delay_slow_share is None:
            delay[converted] = profile.delay.sample(rng, n_pos)
        else:
            p_slow = profile.delay_slow_share.ravel()[cells[converted]]
            slow = rng.random(n_pos) < p_slow
            delay[converted] = profile.delay.sample_given(rng, slow)

    order = np.argsort(hour, kind="stable")
    return ClickBatch(
        day_index=day,
        hour=hour[order].astype(np.int64),
        user_group=(cells[order] // c).astype(np.int64),
        category=(cells[order] % c).astype(np.int64),
        noise=noise[order],
        converted=converted[order],
        delay_hours=delay[order],
    )


def generate_day_impressions(
    calendar: PromotionCalendar,
    day: int,
    truth: GroundTruth,
    n_clicks: int,
    seed: int,
) -> np.ndarray:
    """Per-(hour, category) impression counts for one day, shape (24, C)."""
    profile = truth.profile_for(calendar, day)
    rng = child_rng(seed, "impressions", day)
    total = int(round(n_clicks * profile.impressions_per_click))
    weights = np.outer(profile.hour_clicks, profile.impression_mix).ravel()
    counts = rng.multinomial(total, weights / weights.sum())
    return counts.reshape(24, truth.n_categories)


def observed_label(event: ClickEvent, waiting_window_hours: float = DEFAULT_WAITING_HOURS) -> int:
    if waiting_window_hours > ATTRIBUTION_HOURS:
        raise ConfigError("waiting window exceeds the attribution window")
    return int(event.converted and event.delay_hours <= waiting_window_hours)


def observed_labels(batch: ClickBatch, waiting_window_hours: float = DEFAULT_WAITING_HOURS) -> np.ndarray:
    """Vectorized observed_label over a batch."""
    if waiting_window_hours > ATTRIBUTION_HOURS:
        raise ConfigError("waiting window exceeds the attribution window")
    with np.errstate(invalid="ignore"):
        within = batch.delay_hours <= waiting_window_hours
    return (batch.converted & within).astype(np.float64)


def conversions_within_days(batch: ClickBatch, n_days: int) -> np.ndarray:
    """Labels under natural-day attribution: converted by the end of the
    (n_days-1)-th day after the click day. Knowable at the following midnight,
    which is what makes these usable as same-morning retrieval features."""
    with np.errstate(invalid="ignore"):
        within = batch.hour + batch.delay_hours < 24.0 * n_days
    return (batch.converted & within).astype(np.float64)


# ----- Default desk-scale truth -----

DEFAULT_USER_GROUPS = 8
DEFAULT_CATEGORIES = 10

# categories whose impressions and conversions surge under each sale archetype
FAMILY_BOOST_CATS: dict[int, tuple[int, ...]] = {0: (1, 4, 7), 1: (2, 5, 8)}

DELAY_TARGETS: dict[DayType, tuple[float, float]] = {
    DayType.ORDINARY: (0.816, 0.935),
    DayType.PRE_PROMO: (0.40, 0.72),  # conversions stall until the sale starts
    DayType.POST_PROMO: (0.78, 0.92),
}


def _hour_click_curve() -> np.ndarray:
    h = np.arange(24, dtype=np.float64)
    # quiet overnight, midday shoulder, strong evening peak
    curve = 0.35 + 0.65 * np.exp(-0.5 * ((h - 21.0) / 3.2) ** 2) + 0.3 * np.exp(
        -0.5 * ((h - 12.0) / 2.5) ** 2
    )
    curve[0:6] *= 0.35
    return curve / curve.sum()


def _hour_boost_curve(tilt: float) -> np.ndarray:
    h = np.arange(24, dtype=np.float64)
    # conversion propensity rises through the evening; tilt varies by archetype
    return 1.0 + tilt * np.sin(np.pi * (h - 5.0) / 19.0).clip(0.0)


def _group_traffic() -> np.ndarray:
    g = np.arange(DEFAULT_USER_GROUPS, dtype=np.float64)
    return (g + 1.0) ** -0.5


def _ordinary_category_traffic() -> np.ndarray:
    c = np.arange(DEFAULT_CATEGORIES, dtype=np.float64)
    return (c + 2.0) ** -0.25


def _ordinary_cell_cvr(base_cvr: float) -> np.ndarray:
    # the spread is deliberately wide (roughly 60x between the best and the
    # worst live cell): a model that reads (group, category) must be able to
    # rank clicks far better than chance, otherwise nothing downstream of it
    # can be measured
    g = np.arange(DEFAULT_USER_GROUPS, dtype=np.float64)[:, None]
    c = np.arange(DEFAULT_CATEGORIES, dtype=np.float64)[None, :]
    group_factor = 2.2 * 0.48**g
    cat_factor = 0.30 + 0.36 * c
    return np.clip(base_cvr * group_factor * cat_factor, 0.002, 0.5)


def _promo_cell_cvr(base: np.ndarray, family: int, surge: float) -> np.ndarray:
    """Peak-day conversion surface: global surge, extra lift on the sale
    categories, and a family-specific group interaction so the quality
    *ordering* of cells genuinely changes versus ordinary days."""
    cvr = base * surge
    cats = FAMILY_BOOST_CATS[family]
    cvr[:, list(cats)] *= 1.7
    g = np.arange(DEFAULT_USER_GROUPS)
    if family == 0:
        group_lift = np.where(g % 2 == 0, 1.45, 0.75)
    else:
        group_lift = np.where(g % 2 == 1, 1.45, 0.75)
    cvr = cvr * group_lift[:, None]
    return np.clip(cvr, 0.002, 0.6)


def _category_mix(day_type: DayType, family: int) -> np.ndarray:
    mix = _ordinary_category_traffic().copy()
    if family >= 0 and day_type != DayType.ORDINARY:
        strength = {DayType.PRE_PROMO: 2.2, DayType.PROMO_PEAK: 5.0, DayType.POST_PROMO: 1.6}[
            day_type
        ]
        boosts = (strength, 0.72 * strength, 0.5 * strength)
        for cat, b in zip(FAMILY_BOOST_CATS[family], boosts):
            mix[cat] *= b
    return mix / mix.sum()


def default_truth(
    calendar: PromotionCalendar,
    *,
    base_cvr: float = 0.032,
    peak_surge: float = 2.6,
    pre_suppression: float = 0.62,
    post_recovery: float = 0.85,
    instance_rate_mults: tuple[float, ...] = (1.0, 1.0, 1.28, 0.82, 1.15, 0.9),
    peak_rate_scale: float = 1.0,
    rate_drift_amplitude: float = 0.0,
    rate_drift_period_days: float = 180.0,
    session_signal_scale: float = 0.0,
    session_signal_period_days: float = 180.0,
    checkout_lag_share: float = 0.75,
    checkout_lag_rate: float = 1.0 / 60.0,
) -> GroundTruth:
    """Desk-scale ground truth over a calendar.

    instance_rate_mults assigns each promotion (in calendar order) a positive
    rate multiplier, cycling if there are more promotions than entries. First
    occurrence of each family keeps 1.0 in the default so later same-family
    promotions genuinely shift the label mix relative to their history.

    checkout_lag_share is the probability that a peak-day conversion in a
    sale category clears slowly (stuffed carts, payment holds on discounted
    big-ticket orders). A label window of a day then hides most of exactly
    the lift the sale creates, and only matured history shows it. Off-sale
    cells keep a 0.10 lag share; other day types convert on their usual
    clocks. Setting the share to 0.10 makes the lag cell-independent.

    Rate drift and the session signal (see GroundTruth) default off: the
    stock world keeps same-day-type conditionals identical across the whole
    calendar and the dense features carry no label signal. Both knobs exist
    to stress estimators against worlds that break those guarantees.
    """
    families = sorted({f for f in calendar.families if f >= 0})
    unknown = [f for f in families if f not in FAMILY_BOOST_CATS]
    if unknown:
        raise ConfigError(f"no sale archetype defined for families {unknown}")

    group_traffic = _group_traffic()
    hour_clicks = _hour_click_curve()
    boost_tilt = {DayType.ORDINARY: 0.35, DayType.PRE_PROMO: 0.25, DayType.PROMO_PEAK: 0.55,
                  DayType.POST_PROMO: 0.30}
    family_tilt_shift = {0: 0.0, 1: 0.18}

    ordinary_cvr = _ordinary_cell_cvr(base_cvr)
    delays = {dt: fit_delay_mixture(*targets) for dt, targets in DELAY_TARGETS.items()}
    # peak fast component: impulse purchases complete within hours
    delays[DayType.PROMO_PEAK] = DelayMixture(0.9, 1.0 / 3.0, checkout_lag_rate)

    def make(day_type: DayType, family: int, cell_cvr: np.ndarray) -> DayProfile:
        mix = _category_mix(day_type, family)
        traffic = group_traffic[:, None] * mix[None, :]
        tilt = boost_tilt[day_type] + (family_tilt_shift.get(family, 0.0) if family >= 0 else 0.0)
        return profile_from_cell_rates(
            traffic=traffic,
            cell_cvr=cell_cvr,
            hour_clicks=hour_clicks,
            hour_boost=_hour_boost_curve(tilt),
            delay=delays[day_type],
            impression_mix=mix,
        )

    profiles: dict[tuple[DayType, int], DayProfile] = {
        (DayType.ORDINARY, -1): make(DayType.ORDINARY, -1, ordinary_cvr)
    }
    for fam in families:
        peak = make(DayType.PROMO_PEAK, fam, _promo_cell_cvr(ordinary_cvr, fam, peak_surge))
        lag = np.full(peak.cell_pos.shape, 0.10)
        lag[:, list(FAMILY_BOOST_CATS[fam])] = checkout_lag_share
        # keep the mixture's own split at the conversion-weighted average so
        # day-level cdf readers stay honest about what a window will catch
        day_slow = float((peak.cell_pos * lag).sum())
        peak = replace(
            peak,
            delay=replace(delays[DayType.PROMO_PEAK], fast_share=1.0 - day_slow),
            delay_slow_share=lag,
        )
        if peak_rate_scale != 1.0:
            # pure label-shift knob: moves B(y) while both class conditionals
            # stay bit-identical, unlike rescaling per-cell probabilities
            peak = replace(peak, pos_rate=peak.pos_rate * peak_rate_scale)
        profiles[(DayType.PROMO_PEAK, fam)] = peak
        profiles[(DayType.PRE_PROMO, fam)] = make(
            DayType.PRE_PROMO, fam, np.clip(ordinary_cvr * pre_suppression, 0.002, 0.5)
        )
        profiles[(DayType.POST_PROMO, fam)] = make(
            DayType.POST_PROMO, fam, np.clip(ordinary_cvr * post_recovery, 0.002, 0.5)
        )

    mults = np.ones(calendar.num_days)
    for day in range(calendar.num_days):
        idx = calendar.promo_index[day]
        if idx >= 0:
            mults[day] = instance_rate_mults[idx % len(instance_rate_mults)]
    return GroundTruth(
        n_user_groups=DEFAULT_USER_GROUPS,
        n_categories=DEFAULT_CATEGORIES,
        profiles=profiles,
        rate_multipliers=tuple(float(m) for m in mults),
        rate_drift_amplitude=rate_drift_amplitude,
        rate_drift_period_days=rate_drift_period_days,
        session_signal_scale=session_signal_scale,
        session_signal_period_days=session_signal_period_days,
    )


def default_calendar(num_days: int = 180) -> PromotionCalendar:
    """Four promotions alternating between two sale archetypes."""
    if num_days < 60:
        raise ConfigError("default calendar needs at least 60 days")
    anchors = [int(round(num_days * frac)) for frac in (0.19, 0.44, 0.69, 0.92)]
    promos = tuple(
        PromotionSpec(peak_start=a, family=i % 2) for i, a in enumerate(anchors)
    )
    return build_calendar(CalendarConfig(num_days=num_days, promotions=promos))


# ----- Plain-text persistence -----


def _fmt(x: float) -> str:
    return repr(float(x))


def write_day_events(path: Path, batch: ClickBatch) -> None:
    lines = [EVENTS_SCHEMA]
    for i in range(batch.n):
        conv = int(batch.converted[i])
        delay = _fmt(batch.delay_hours[i]) if conv else ""
        noise = "\t".join(_fmt(v) for v in batch.noise[i])
        lines.append(
            f"{batch.day_index}\t{batch.hour[i]}\t{batch.user_group[i]}"
            f"\t{batch.category[i]}\t{noise}\t{conv}\t{delay}"
        )
    path.write_text("\n".join(lines) + "\n")


def read_day_events(path: Path) -> ClickBatch:
    with open(path) as fh:
        header = fh.readline().strip()
        if header != EVENTS_SCHEMA:
            raise ConfigError(f"unrecognized events schema in {path}: {header!r}")
        rows = [line.rstrip("\n").split("\t") for line in fh if line.strip()]
    n = len(rows)
    hour = np.empty(n, dtype=np.int64)
    group = np.empty(n, dtype=np.int64)
    cat = np.empty(n, dtype=np.int64)
    noise = np.empty((n, NOISE_DIM))
    converted = np.empty(n, dtype=bool)
    delay = np.full(n, np.nan)
    day_index = 0
    for i, parts in enumerate(rows):
        day_index = int(parts[0])
        hour[i], group[i], cat[i] = int(parts[1]), int(parts[2]), int(parts[3])
        noise[i] = [float(v) for v in parts[4 : 4 + NOISE_DIM]]
        converted[i] = parts[4 + NOISE_DIM] == "1"
        delay[i] = float(parts[5 + NOISE_DIM]) if converted[i] else np.nan
    return ClickBatch(
        day_index=day_index,
        hour=hour,
        user_group=group,
        category=cat,
        noise=noise,
        converted=converted,
        delay_hours=delay,
    )


def write_day_impressions(path: Path, day: int, counts: np.ndarray) -> None:
    lines = [IMPRESSIONS_SCHEMA]
    for h in range(counts.shape[0]):
        for c in range(counts.shape[1]):
            if counts[h, c]:
                lines.append(f"{day}\t{h}\t{c}\t{int(counts[h, c])}")
    path.write_text("\n".join(lines) + "\n")


def read_day_impressions(path: Path, n_categories: int) -> np.ndarray:
    with open(path) as fh:
        header = fh.readline().strip()
        if header != IMPRESSIONS_SCHEMA:
            raise ConfigError(f"unrecognized impressions schema in {path}: {header!r}")
        counts = np.zeros((24, n_categories), dtype=np.int64)
        for line in fh:
            if not line.strip():
                continue
            _, h, c, v = line.split("\t")
            counts[int(h), int(c)] = int(v)
    return counts


@dataclass(frozen=True)
class DatasetManifest:
    num_days: int
    day_types: tuple[int, ...]
    families: tuple[int, ...]
    promo_index: tuple[int, ...]
    n_user_groups: int
    n_categories: int
    n_clicks_per_day: int
    seed: int
    rate_multipliers: tuple[float, ...]
    day_positive_rates: tuple[float, ...]

    def calendar(self) -> PromotionCalendar:
        return PromotionCalendar(
            num_days=self.num_days,
            day_types=tuple(DayType(t) for t in self.day_types),
            families=self.families,
            promo_index=self.promo_index,
        )


def _events_name(day: int) -> str:
    return f"events_{day:05d}.tsv"


def _impressions_name(day: int) -> str:
    return f"impressions_{day:05d}.tsv"


def write_dataset(
    out_dir: Path,
    calendar: PromotionCalendar,
    truth: GroundTruth,
    n_clicks_per_day: int,
    seed: int,
) -> DatasetManifest:
    """Generate and persist every day of the calendar under out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for day in range(calendar.num_days):
        batch = generate_day(calendar, day, truth, n_clicks_per_day, seed)
        write_day_events(out_dir / _events_name(day), batch)
        counts = generate_day_impressions(calendar, day, truth, n_clicks_per_day, seed)
        write_day_impressions(out_dir / _impressions_name(day), day, counts)
    manifest = DatasetManifest(
        num_days=calendar.num_days,
        day_types=tuple(int(t) for t in calendar.day_types),
        families=calendar.families,
        promo_index=calendar.promo_index,
        n_user_groups=truth.n_user_groups,
        n_categories=truth.n_categories,
        n_clicks_per_day=n_clicks_per_day,
        seed=seed,
        rate_multipliers=truth.rate_multipliers,
        day_positive_rates=tuple(
            truth.day_positive_rate(calendar, d) for d in range(calendar.num_days)
        ),
    )
    payload = {"schema": MANIFEST_SCHEMA, **manifest.__dict__}
    (out_dir / "manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(dataset_dir: Path) -> DatasetManifest:
    payload = json.loads((Path(dataset_dir) / "manifest.json").read_text())
    if payload.pop("schema", None) != MANIFEST_SCHEMA:
        raise ConfigError(f"unrecognized manifest schema in {dataset_dir}")
    for key in ("day_types", "families", "promo_index", "rate_multipliers", "day_positive_rates"):
        payload[key] = tuple(payload[key])
    return DatasetManifest(**payload)


class DayStore:
    """Read-through cache over a generated dataset directory."""

    def __init__(self, dataset_dir: Path):
        self.dir = Path(dataset_dir)
        self.manifest = read_manifest(self.dir)
        self.calendar = self.manifest.calendar()
        self._events: dict[int, ClickBatch] = {}
        self._impressions: dict[int, np.ndarray] = {}

    @property
    def num_days(self) -> int:
        return self.manifest.num_days

    def events(self, day: int) -> ClickBatch:
        if day not in self._events:
            self._events[day] = read_day_events(self.dir / _events_name(day))
        return self._events[day]

    def impressions(self, day: int) -> np.ndarray:
        if day not in self._impressions:
            self._impressions[day] = read_day_impressions(
                self.dir / _impressions_name(day), self.manifest.n_categories
            )
        return self._impressions[day]


class MemoryDayStore:
    """Same interface as DayStore, backed by in-process generation.

    Used by the pipeline and the heavier tests to skip the text round trip.
    """

    def __init__(
        self,
        calendar: PromotionCalendar,
        truth: GroundTruth,
        n_clicks_per_day: int,
        seed: int,
    ):
        self.calendar = calendar
        self.truth = truth
        self.n_clicks_per_day = n_clicks_per_day
        self.seed = seed
        self._events: dict[int, ClickBatch] = {}
        self._impressions: dict[int, np.ndarray] = {}

    @property
    def num_days(self) -> int:
        return self.calendar.num_days

    def events(self, day: int) -> ClickBatch:
        if day not in self._events:
            self._events[day] = generate_day(
                self.calendar, day, self.truth, self.n_clicks_per_day, self.seed
            )
        return self._events[day]

    def impressions(self, day: int) -> np.ndarray:
        if day not in self._impressions:
            self._impressions[day] = generate_day_impressions(
                self.calendar, day, self.truth, self.n_clicks_per_day, self.seed
            )
        return self._impressions[day]
