"""Day-level vector profiles and nearest-day retrieval.

A day is summarized by what was knowable at hour h of that morning:

  cvr_feats   6 values: one-day CVR of T-1; one- and two-day CVR of T-2;
              one-, two-, and three-day CVR of T-3. "n-day" uses natural-day
              attribution (conversion lands within n calendar days of the
              click day), so every value is final by T's midnight: nothing
              here can move after hour 0 of day T.
  impr_feats  per tracked category, full-day impression ratio on each of
              T-3, T-2, T-1 (category-major: cat0@T-3, cat0@T-2, cat0@T-1,
              cat1@T-3, ...).
  early_feats per tracked category, impression ratio over hours [0, h) of
              day T itself.

Vector length is 6 + 4K for K tracked categories. Similar days are found by
exact cosine scan over the (small) history.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .synthgen import ClickBatch, conversions_within_days

DAYVEC_SCHEMA = "promofit.dayvec.v1"
DEFAULT_HOUR_CUTOFF = 10
DEFAULT_TRACKED_CATEGORIES = 7
DEFAULT_TOP_K = 2


@dataclass(frozen=True)
class DayAggregates:
    """Layout-independent per-day summary; vectors are views over these."""

    day_index: int
    n_clicks: int
    cvr_1d: float
    cvr_2d: float
    cvr_3d: float
    cat_ratio_full: np.ndarray  # (C,) full-day impression share per category
    cat_ratio_early: np.ndarray  # (C,) share over hours [0, h)
    hour_cutoff: int


@dataclass(frozen=True)
class DayVector:
    day_index: int
    hour_cutoff: int
    categories: tuple[int, ...]
    values: np.ndarray  # cvr_feats + impr_feats + early_feats

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.shape != (6 + 4 * len(self.categories),):
            raise ConfigError("day vector length must be 6 + 4K")
        if np.any(vals < 0.0) or np.any(vals > 1.0) or not np.all(np.isfinite(vals)):
            raise ConfigError("day vector components must lie in [0, 1]")
        object.__setattr__(self, "values", vals)

    @property
    def cvr_feats(self) -> np.ndarray:
        return self.values[:6]

    @property
    def impr_feats(self) -> np.ndarray:
        return self.values[6 : 6 + 3 * len(self.categories)]

    @property
    def early_feats(self) -> np.ndarray:
        return self.values[6 + 3 * len(self.categories) :]


@dataclass(frozen=True)
class RetrievalResult:
    ranked: tuple[tuple[int, float], ...]  # (day_index, similarity), best first
    k: int
    truncated: bool  # history had fewer than k candidates

    @property
    def days(self) -> tuple[int, ...]:
        return tuple(day for day, _ in self.ranked)


def compute_day_aggregates(store, day: int, hour_cutoff: int = DEFAULT_HOUR_CUTOFF) -> DayAggregates:
    """Summarize one fully recorded day (clicks plus impressions)."""
    batch: ClickBatch = store.events(day)
    if batch.n == 0:
        raise ConfigError(f"empty day {day}")
    impressions = np.asarray(store.impressions(day), dtype=np.float64)
    total = impressions.sum()
    early = impressions[:hour_cutoff].sum(axis=0)
    early_total = early.sum()
    if total <= 0 or early_total <= 0:
        raise ConfigError(f"empty day {day}")
    return DayAggregates(
        day_index=day,
        n_clicks=batch.n,
        cvr_1d=float(conversions_within_days(batch, 1).mean()),
        cvr_2d=float(conversions_within_days(batch, 2).mean()),
        cvr_3d=float(conversions_within_days(batch, 3).mean()),
        cat_ratio_full=impressions.sum(axis=0) / total,
        cat_ratio_early=early / early_total,
        hour_cutoff=hour_cutoff,
    )


def vector_from_aggregates(
    target_early: DayAggregates,
    back3: DayAggregates,
    back2: DayAggregates,
    back1: DayAggregates,
    categories: tuple[int, ...],
) -> DayVector:
    """Assemble the vector for day T from T's early slice and T-3..T-1."""
    cvr = [back1.cvr_1d, back2.cvr_1d, back2.cvr_2d, back3.cvr_1d, back3.cvr_2d, back3.cvr_3d]
    impr = []
    for cat in categories:
        impr.extend(
            (back3.cat_ratio_full[cat], back2.cat_ratio_full[cat], back1.cat_ratio_full[cat])
        )
    early = [target_early.cat_ratio_early[cat] for cat in categories]
    return DayVector(
        day_index=target_early.day_index,
        hour_cutoff=target_early.hour_cutoff,
        categories=tuple(int(c) for c in categories),
        values=np.array(cvr + impr + early),
    )


def build_day_vector(
    store,
    target_day: int,
    hour_cutoff: int = DEFAULT_HOUR_CUTOFF,
    categories: tuple[int, ...] = (),
) -> DayVector:
    """Day profile for target_day as of hour hour_cutoff that morning.

    Reads days T-3..T-1 in full and day T strictly before hour_cutoff. The
    CVR features rely on natural-day attribution, so they never touch a
    conversion that lands on day T or later.
    """
    if target_day < 3:
        raise ConfigError("day vectors need three fully recorded prior days")
    if not 1 <= hour_cutoff <= 24:
        raise ConfigError("hour cutoff must be in [1, 24]")
    if not categories:
        raise ConfigError("no tracked categories given")
    # day T is touched only through its impressions in hours [0, h); its
    # events and labels stay unread by construction
    target_impressions = np.asarray(store.impressions(target_day), dtype=np.float64)
    early = target_impressions[:hour_cutoff].sum(axis=0)
    if early.sum() <= 0:
        raise ConfigError(f"empty day {target_day}")
    target_early = DayAggregates(
        day_index=target_day,
        n_clicks=-1,
        cvr_1d=float("nan"),
        cvr_2d=float("nan"),
        cvr_3d=float("nan"),
        cat_ratio_full=np.full(early.size, np.nan),
        cat_ratio_early=early / early.sum(),
        hour_cutoff=hour_cutoff,
    )
    back3, back2, back1 = (
        compute_day_aggregates(store, target_day - 3, hour_cutoff),
        compute_day_aggregates(store, target_day - 2, hour_cutoff),
        compute_day_aggregates(store, target_day - 1, hour_cutoff),
    )
    return vector_from_aggregates(target_early, back3, back2, back1, tuple(categories))


def cosine_similarity(a: DayVector, b: DayVector) -> float:
    if a.values.shape != b.values.shape:
        raise ConfigError("day vectors have different dimensions")
    norm_a = float(np.linalg.norm(a.values))
    norm_b = float(np.linalg.norm(b.values))
    if norm_a == 0.0 or norm_b == 0.0:
        raise ConfigError("degenerate vector")
    return float(np.dot(a.values, b.values) / (norm_a * norm_b))


def retrieve_top_k(
    target: DayVector, history: list[DayVector], k: int = DEFAULT_TOP_K
) -> RetrievalResult:
    """The k most cosine-similar historical days, ties going to the more
    recent day. History must lie strictly before the target day."""
    if not history:
        raise ConfigError("retrieval needs a nonempty history")
    if k < 1:
        raise ConfigError("k must be positive")
    for hv in history:
        if hv.day_index >= target.day_index:
            raise ConfigError("history must precede the target day")
    scored = [(hv.day_index, cosine_similarity(target, hv)) for hv in history]
    scored.sort(key=lambda pair: (-pair[1], -pair[0]))
    truncated = k > len(scored)
    return RetrievalResult(ranked=tuple(scored[:k]), k=k, truncated=truncated)


def select_representative_categories(
    ratios_by_day: np.ndarray,
    promo_flags: np.ndarray,
    k: int = DEFAULT_TRACKED_CATEGORIES,
) -> tuple[int, ...]:
    """Categories with the largest promo vs non-promo impression-ratio gap.

    ratios_by_day: (D, C) full-day impression ratios over a calibration
    split; promo_flags: (D,) booleans. Ties break toward the smaller
    category id; with no promo (or no ordinary) day in the split, the gap is
    undefined and the first k ids are returned. The result is sorted so the
    vector layout does not depend on gap ordering.
    """
    ratios_by_day = np.asarray(ratios_by_day, dtype=np.float64)
    promo_flags = np.asarray(promo_flags, dtype=bool)
    n_cats = ratios_by_day.shape[1]
    if k < 1 or k > n_cats:
        raise ConfigError("tracked-category count out of range")
    if promo_flags.all() or not promo_flags.any():
        return tuple(range(k))
    gap = np.abs(
        ratios_by_day[promo_flags].mean(axis=0) - ratios_by_day[~promo_flags].mean(axis=0)
    )
    order = np.lexsort((np.arange(n_cats), -gap))  # gap desc, id asc on ties
    return tuple(sorted(int(c) for c in order[:k]))


# ----- Flat text serialization -----


def write_day_vector(path: Path, vec: DayVector) -> None:
    lines = [
        DAYVEC_SCHEMA,
        f"day\t{vec.day_index}",
        f"hour\t{vec.hour_cutoff}",
        "categories\t" + ",".join(str(c) for c in vec.categories),
        "values\t" + " ".join(repr(float(v)) for v in vec.values),
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def read_day_vector(path: Path) -> DayVector:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != DAYVEC_SCHEMA:
        raise ConfigError(f"unrecognized day-vector schema in {path}")
    fields = dict(line.split("\t", 1) for line in lines[1:] if line)
    return DayVector(
        day_index=int(fields["day"]),
        hour_cutoff=int(fields["hour"]),
        categories=tuple(int(c) for c in fields["categories"].split(",") if c),
        values=np.array([float(v) for v in fields["values"].split()]),
    )
