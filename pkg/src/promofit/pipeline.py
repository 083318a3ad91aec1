"""Daily train-and-finetune schedule over a synthetic promotion calendar.

One simulated day proceeds in serving order: the main model takes its single
daily update on yesterday's observed labels, then (on scheduled promotion
days) the morning's partial traffic drives retrieval of the two most similar
historical days, a label-shift estimate between them and today, and a
fine-tune of a fresh transition head on the retrieved set. The resulting
model serves the remainder of the day and is discarded; the main model never
sees the fine-tuned parameters, so its trajectory is identical across
variants that share a seed.

Variants select what serves the remainder:

    base                 the main model as-is
    base_no_dfm          a main model trained on fully matured labels three
                         days back instead of yesterday's partial window
    base_direct_retrain  the main model re-trained directly on the retrieved
                         set, no transition head
    hdr                  transition head fine-tuned with shift-corrected
                         weights on the retrieved set
    hdr_no_dsc           same, weights forced to (1, 1)
    hdr_no_transblock    full-model fine-tune on the retrieved set with the
                         shift-corrected weights, no transition head

Retrieval that finds no usable history (none matured yet, or nothing similar
enough to clear the gate) falls back to serving the base predictions for the
day, flagged in the report.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError
from ._rng import child_rng
from . import synthgen as sg
from .dayvec import (
    DayVector,
    build_day_vector,
    compute_day_aggregates,
    retrieve_top_k,
    select_representative_categories,
)
from .metrics import EvalSet, MetricsReport, evaluate
from .model import CvrModel, LabeledExamples, ModelConfig, TrainConfig, predict, train
from .shiftcorr import ShiftEstimate, estimate_shift
from .transblock import (
    FinetuneConfig,
    TransBlockConfig,
    TransBlockHead,
    finetune,
    finetuned_predict,
)

VARIANTS = (
    "base",
    "base_no_dfm",
    "base_direct_retrain",
    "hdr",
    "hdr_no_dsc",
    "hdr_no_transblock",
)
# Variants whose serving path consumes the retrieved set.
RETRIEVAL_VARIANTS = ("base_direct_retrain", "hdr", "hdr_no_dsc", "hdr_no_transblock")

CONFIG_SCHEMA = "promofit-experiment/1"
DEFAULT_SIMILARITY_GATE = 0.95
DEFAULT_WEIGHT_CLIP = (0.2, 5.0)
# Days a retrieval candidate must age before its labels and trailing-CVR
# features are complete: the 72h attribution window plus the day itself.
DEFAULT_MATURITY_DAYS = 4
FIRST_CANDIDATE_DAY = 3


@dataclass(frozen=True)
class ExperimentConfig:
    """Full description of one experiment run; everything downstream is
    derived from these fields plus the seed, so two runs with equal configs
    produce byte-identical artifacts."""

    variant: str = "hdr"
    num_days: int = 180
    clicks_per_day: int = 10_000
    seeds: tuple[int, ...] = (0,)
    out_dir: str | None = None

    serving_hour: int = 10
    retrieval_k: int = 2
    maturity_days: int = DEFAULT_MATURITY_DAYS
    similarity_gate: float = DEFAULT_SIMILARITY_GATE

    # main-model schedule
    warmup_days: int = 20
    warmup_epochs: int = 10
    daily_lr: float = 1e-3
    daily_batch: int = 2500
    waiting_window_hours: float = 24.0
    matured_window_hours: float = 72.0

    # serving-day adaptation
    head_lr: float = 1e-3
    backbone_lr: float = 1e-5
    finetune_batch: int = 250
    finetune_epochs: int = 16
    direct_epochs: int = 1

    # shift estimation
    ridge: float = 1e-4
    weight_clip: tuple[float, float] = DEFAULT_WEIGHT_CLIP

    model: ModelConfig = field(
        default_factory=lambda: ModelConfig(sg.DEFAULT_USER_GROUPS, sg.DEFAULT_CATEGORIES)
    )

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.num_days < 10:
            raise ConfigError(f"num_days must be at least 10, got {self.num_days}")
        if self.clicks_per_day < 1:
            raise ConfigError("clicks_per_day must be positive")
        if not self.seeds:
            raise ConfigError("at least one seed required")
        if not 1 <= self.serving_hour <= 23:
            raise ConfigError(f"serving_hour must be in [1, 23], got {self.serving_hour}")
        if self.retrieval_k < 1:
            raise ConfigError("retrieval_k must be positive")
        if self.maturity_days < 1:
            raise ConfigError("maturity_days must be positive")
        if not 0.0 <= self.similarity_gate <= 1.0:
            raise ConfigError("similarity_gate must be in [0, 1]")
        if self.warmup_days < 0 or self.warmup_epochs < 1:
            raise ConfigError("warmup_days must be >= 0 and warmup_epochs >= 1")
        if self.direct_epochs < 0:
            raise ConfigError("direct_epochs must be >= 0")
        lo, hi = self.weight_clip
        if not 0 < lo <= 1 <= hi:
            raise ConfigError(f"weight_clip must straddle 1, got {self.weight_clip}")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "weight_clip", (float(lo), float(hi)))


def desk_config(**overrides) -> ExperimentConfig:
    """The default desk-scale preset: 180 days, 10k clicks/day, four
    promotions across two families."""
    return ExperimentConfig(**overrides)


@dataclass(frozen=True)
class DailyReport:
    """One day of one variant: what served, what retrieval saw, how it scored
    on the post-serving-hour remainder."""

    day_index: int
    day_type: str
    variant: str
    served: str  # "base" | "adapted" | "fallback"
    gated: bool
    retrieved: tuple[int, ...]
    top_similarity: float  # nan when no retrieval ran
    weights: tuple[float, float]
    raw_weights: tuple[float, float]
    metrics: MetricsReport
    main_digest: str = field(repr=False, default="")
    train_seconds: float = field(repr=False, default=0.0)
    serve_seconds: float = field(repr=False, default=0.0)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    seed: int
    reports: dict[str, list[DailyReport]]  # variant -> one report per day


# ---------------------------------------------------------------------------
# simulation state: day store plus retrieval caches


def _seed_for(seed: int, *tags) -> int:
    return int(child_rng(seed, *tags).integers(2**31))


class _Simulation:
    """Caches per-day aggregates and the tracked-category selection so the
    many retrievals of one run do not recompute them."""

    def __init__(self, store, serving_hour: int, maturity_days: int):
        self.store = store
        self.calendar = store.calendar
        self.hour = serving_hour
        self.maturity = maturity_days
        self._aggregates: dict[int, object] = {}
        self._categories: dict[int, tuple[int, ...]] = {}
        self._vectors: dict[tuple[int, tuple[int, ...]], DayVector] = {}

    def aggregates(self, day: int):
        if day not in self._aggregates:
            self._aggregates[day] = compute_day_aggregates(self.store, day, self.hour)
        return self._aggregates[day]

    def candidate_days(self, day: int) -> list[int]:
        return list(range(FIRST_CANDIDATE_DAY, day - self.maturity + 1))

    def categories_for(self, day: int) -> tuple[int, ...]:
        last = day - self.maturity
        if last not in self._categories:
            days = self.candidate_days(day)
            ratios = np.stack([self.aggregates(d).cat_ratio_full for d in days])
            flags = np.array(
                [self.calendar.day_types[d] != sg.DayType.ORDINARY for d in days]
            )
            self._categories[last] = select_representative_categories(ratios, flags)
        return self._categories[last]

    def vector(self, day: int, cats: tuple[int, ...]) -> DayVector:
        key = (day, cats)
        if key not in self._vectors:
            self._vectors[key] = build_day_vector(self.store, day, self.hour, cats)
        return self._vectors[key]

    def retrieve(self, day: int, k: int):
        cats = self.categories_for(day)
        target = self.vector(day, cats)
        history = [self.vector(d, cats) for d in self.candidate_days(day)]
        return retrieve_top_k(target, history, k=k)


@dataclass
class _RetrievalContext:
    """Everything the serving lanes share on one promotion day."""

    retrieved: tuple[int, ...]
    top_similarity: float
    gated: bool
    examples: LabeledExamples | None  # pooled retrieved days, matured labels
    estimate: ShiftEstimate | None
    weights: tuple[float, float]
    raw_weights: tuple[float, float]


_EMPTY_CONTEXT = _RetrievalContext(
    retrieved=(),
    top_similarity=float("nan"),
    gated=True,
    examples=None,
    estimate=None,
    weights=(1.0, 1.0),
    raw_weights=(1.0, 1.0),
)


def _retrieval_context(
    sim: _Simulation, model: CvrModel, day: int, cfg: ExperimentConfig
) -> _RetrievalContext:
    """Retrieve, gate, and estimate once; every retrieval variant reuses the
    result. Returns the empty context (gated, no examples) when no candidate
    has matured or nothing clears the similarity gate."""
    if not sim.candidate_days(day):
        return _EMPTY_CONTEXT
    result = sim.retrieve(day, cfg.retrieval_k)
    top = result.ranked[0][1]
    if top < cfg.similarity_gate:
        return replace(_EMPTY_CONTEXT, retrieved=result.days, top_similarity=top)
    batches = [sim.store.events(d) for d in result.days]
    examples = LabeledExamples.from_batch(sg.concat_batches(batches))
    try:
        estimate = estimate_shift(
            model, batches, sim.store.events(day), hour=cfg.serving_hour, ridge=cfg.ridge
        )
    except ConfigError:
        # retrieved history too thin to estimate on (degenerate class counts);
        # same serving posture as finding no usable history at all
        return replace(_EMPTY_CONTEXT, retrieved=result.days, top_similarity=top)
    lo, hi = cfg.weight_clip
    weights = (
        float(np.clip(estimate.weights[0], lo, hi)),
        float(np.clip(estimate.weights[1], lo, hi)),
    )
    return _RetrievalContext(
        retrieved=result.days,
        top_similarity=top,
        gated=False,
        examples=examples,
        estimate=estimate,
        weights=weights,
        raw_weights=(float(estimate.weights[0]), float(estimate.weights[1])),
    )


# ---------------------------------------------------------------------------
# serving lanes


def _serve_variant(
    variant: str,
    model: CvrModel,
    ctx: _RetrievalContext,
    remainder: sg.ClickBatch,
    day: int,
    seed: int,
    cfg: ExperimentConfig,
) -> tuple[np.ndarray, str]:
    """Predictions for the post-serving-hour remainder plus how they were
    produced. Retrieval variants fall back to base predictions on gated
    days."""
    if variant in ("base", "base_no_dfm"):
        return predict(model, remainder), "base"
    if ctx.gated:
        return predict(model, remainder), "fallback"

    if variant == "base_direct_retrain":
        if cfg.direct_epochs == 0:
            return predict(model, remainder), "base"
        retrained = model.copy()
        train(
            retrained,
            ctx.examples,
            TrainConfig(
                learning_rate=cfg.head_lr,
                batch_size=cfg.finetune_batch,
                epochs=cfg.direct_epochs,
                seed=_seed_for(seed, "direct", day),
            ),
        )
        return predict(retrained, remainder), "adapted"

    if variant == "hdr_no_transblock":
        retrained = model.copy()
        train(
            retrained,
            ctx.examples,
            TrainConfig(
                learning_rate=cfg.head_lr,
                batch_size=cfg.finetune_batch,
                epochs=cfg.direct_epochs,
                importance_weights=ctx.weights,
                seed=_seed_for(seed, "direct", day),
            ),
        )
        return predict(retrained, remainder), "adapted"

    # hdr / hdr_no_dsc: fresh head on a copy of the main model, discarded
    # after serving. The copy means the main trajectory cannot be touched
    # even with a nonzero backbone rate.
    weights = (1.0, 1.0) if variant == "hdr_no_dsc" else ctx.weights
    head = TransBlockHead.build(
        TransBlockConfig(cfg.model.representation_dim),
        seed=_seed_for(seed, "head", day),
    )
    tuned = model.copy()
    tuned, head, _ = finetune(
        tuned,
        head,
        ctx.examples,
        weights,
        FinetuneConfig(
            head_lr=cfg.head_lr,
            backbone_lr=cfg.backbone_lr,
            batch_size=cfg.finetune_batch,
            epochs=cfg.finetune_epochs,
            seed=_seed_for(seed, "finetune", day),
        ),
    )
    return finetuned_predict(tuned, head, remainder), "adapted"


def _weights_for_report(variant: str, ctx: _RetrievalContext) -> tuple:
    if variant == "hdr_no_dsc" and not ctx.gated:
        return (1.0, 1.0), ctx.raw_weights
    if variant in ("base", "base_no_dfm", "base_direct_retrain") or ctx.gated:
        return (1.0, 1.0), (1.0, 1.0)
    return ctx.weights, ctx.raw_weights


# ---------------------------------------------------------------------------
# main-model schedule


def _warmup_model(cfg: ExperimentConfig, seed: int) -> CvrModel:
    """Converged starting point: the production model has served ordinary
    traffic long before the experiment window opens, so the desk run
    pretrains on synthetic ordinary days drawn from the same ground truth."""
    model = CvrModel.build(cfg.model, seed=seed)
    if cfg.warmup_days == 0:
        return model
    calendar = sg.build_calendar(sg.CalendarConfig(num_days=cfg.warmup_days))
    truth = sg.default_truth(calendar)
    batches = [
        sg.generate_day(
            calendar, d, truth, cfg.clicks_per_day, _seed_for(seed, "warmup", d)
        )
        for d in range(cfg.warmup_days)
    ]
    pool = sg.concat_batches(batches)
    examples = LabeledExamples.from_batch(
        pool, labels=sg.observed_labels(pool, cfg.waiting_window_hours)
    )
    train(
        model,
        examples,
        TrainConfig(
            learning_rate=cfg.daily_lr,
            batch_size=cfg.daily_batch,
            epochs=cfg.warmup_epochs,
            seed=_seed_for(seed, "warmup-train"),
        ),
    )
    return model


def _daily_update(
    model: CvrModel, store, day: int, seed: int, cfg: ExperimentConfig, matured: bool
) -> None:
    """One daily pass. The fresh-label path trains on yesterday within the
    waiting window; the matured path waits out the full attribution window
    and trains on the newest fully labeled day instead."""
    if matured:
        lag = int(np.ceil(cfg.matured_window_hours / 24.0))
        source = day - lag
        window = cfg.matured_window_hours
    else:
        source = day - 1
        window = cfg.waiting_window_hours
    if source < 0:
        return
    batch = store.events(source)
    examples = LabeledExamples.from_batch(batch, labels=sg.observed_labels(batch, window))
    train(
        model,
        examples,
        TrainConfig(
            learning_rate=cfg.daily_lr,
            batch_size=cfg.daily_batch,
            epochs=1,
            seed=_seed_for(seed, "daily", day),
        ),
    )


def _digest(model: CvrModel) -> str:
    h = hashlib.sha256()
    for name in model.param_names():
        h.update(np.ascontiguousarray(model.params[name]).tobytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# the run loop


@dataclass(frozen=True)
class Lane:
    """One serving arm of a run: a variant plus optional fine-tune overrides,
    reported under its own label. The rate grid runs hdr lanes that differ
    only in backbone_lr."""

    label: str
    variant: str
    backbone_lr: float | None = None
    finetune_epochs: int | None = None

    def effective(self, cfg: ExperimentConfig) -> ExperimentConfig:
        overrides: dict = {}
        if self.backbone_lr is not None:
            overrides["backbone_lr"] = self.backbone_lr
        if self.finetune_epochs is not None:
            overrides["finetune_epochs"] = self.finetune_epochs
        return replace(cfg, **overrides) if overrides else cfg


def _run_lanes(
    cfg: ExperimentConfig, seed: int, lanes: tuple[Lane, ...], store=None
) -> ExperimentResult:
    """Process every day once, serving all requested lanes side by side.

    All lanes except base_no_dfm share one main-model trajectory (the
    fine-tuned or retrained copies are discarded, so the shared model is
    bit-identical to a base-only run); base_no_dfm trains its own main model
    on matured labels. Per-lane randomness is scoped by (seed, purpose, day)
    only, so single-lane runs and grid runs produce identical rows for the
    same (lane, seed).
    """
    for lane in lanes:
        if lane.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {lane.variant!r}")
    if len({lane.label for lane in lanes}) != len(lanes):
        raise ConfigError("lane labels must be unique")
    if store is None:
        calendar = sg.default_calendar(cfg.num_days)
        truth = sg.default_truth(calendar)
        store = sg.MemoryDayStore(calendar, truth, cfg.clicks_per_day, seed)
    calendar = store.calendar
    sim = _Simulation(store, cfg.serving_hour, cfg.maturity_days)

    t0 = time.perf_counter()
    main = _warmup_model(cfg, seed)
    no_dfm = main.copy() if any(l.variant == "base_no_dfm" for l in lanes) else None
    warmup_seconds = time.perf_counter() - t0

    needs_retrieval = any(l.variant in RETRIEVAL_VARIANTS for l in lanes)
    reports: dict[str, list[DailyReport]] = {lane.label: [] for lane in lanes}

    for day in range(calendar.num_days):
        t0 = time.perf_counter()
        if day > 0:
            _daily_update(main, store, day, seed, cfg, matured=False)
            if no_dfm is not None:
                _daily_update(no_dfm, store, day, seed, cfg, matured=True)
        train_seconds = time.perf_counter() - t0 + warmup_seconds
        warmup_seconds = 0.0
        digest = _digest(main)

        remainder = store.events(day).from_hour(cfg.serving_hour)
        labels = remainder.converted.astype(np.float64)
        day_type = calendar.day_types[day]
        promo_day = day_type != sg.DayType.ORDINARY

        ctx = _EMPTY_CONTEXT
        if promo_day and needs_retrieval:
            ctx = _retrieval_context(sim, main, day, cfg)

        base_pred = None
        for i, lane in enumerate(lanes):
            t0 = time.perf_counter()
            retrieval_lane = lane.variant in RETRIEVAL_VARIANTS and promo_day
            if retrieval_lane:
                preds, served = _serve_variant(
                    lane.variant, main, ctx, remainder, day, seed, lane.effective(cfg)
                )
                v_ctx = ctx
            else:
                if lane.variant == "base_no_dfm":
                    preds = predict(no_dfm, remainder)
                else:
                    if base_pred is None:
                        base_pred = predict(main, remainder)
                    preds = base_pred
                served = "base"
                v_ctx = _EMPTY_CONTEXT
            weights, raw = _weights_for_report(lane.variant, v_ctx)
            reports[lane.label].append(
                DailyReport(
                    day_index=day,
                    day_type=day_type.name,
                    variant=lane.label,
                    served=served,
                    gated=bool(v_ctx.gated and retrieval_lane),
                    retrieved=v_ctx.retrieved if retrieval_lane else (),
                    top_similarity=v_ctx.top_similarity if retrieval_lane else float("nan"),
                    weights=weights,
                    raw_weights=raw,
                    metrics=evaluate(EvalSet(preds, labels)),
                    main_digest=digest,
                    train_seconds=train_seconds if i == 0 else 0.0,
                    serve_seconds=time.perf_counter() - t0,
                )
            )

    return ExperimentResult(config=cfg, seed=seed, reports=reports)


def run_day(state: dict, day: int, cfg: ExperimentConfig) -> DailyReport:
    """One day of one variant against caller-held state.

    state is a plain dict carrying 'store', 'sim', 'main', and (for
    base_no_dfm) 'no_dfm'; run_experiment builds it via make_state. Exposed
    for step-by-step drivers and the causality tests.
    """
    seed = state["seed"]
    store, sim, main = state["store"], state["sim"], state["main"]
    if day > 0:
        _daily_update(main, store, day, seed, cfg, matured=False)
        if "no_dfm" in state:
            _daily_update(state["no_dfm"], store, day, seed, cfg, matured=True)
    digest = _digest(main)
    remainder = store.events(day).from_hour(cfg.serving_hour)
    labels = remainder.converted.astype(np.float64)
    day_type = store.calendar.day_types[day]
    promo_day = day_type != sg.DayType.ORDINARY

    ctx = _EMPTY_CONTEXT
    if promo_day and cfg.variant in RETRIEVAL_VARIANTS:
        ctx = _retrieval_context(sim, main, day, cfg)
    served_model = state.get("no_dfm", main) if cfg.variant == "base_no_dfm" else main
    if cfg.variant in RETRIEVAL_VARIANTS and promo_day:
        preds, served = _serve_variant(cfg.variant, main, ctx, remainder, day, seed, cfg)
    else:
        preds, served = predict(served_model, remainder), "base"
        ctx = _EMPTY_CONTEXT
    weights, raw = _weights_for_report(cfg.variant, ctx)
    return DailyReport(
        day_index=day,
        day_type=day_type.name,
        variant=cfg.variant,
        served=served,
        gated=bool(ctx.gated and cfg.variant in RETRIEVAL_VARIANTS and promo_day),
        retrieved=ctx.retrieved if cfg.variant in RETRIEVAL_VARIANTS else (),
        top_similarity=(
            ctx.top_similarity if cfg.variant in RETRIEVAL_VARIANTS else float("nan")
        ),
        weights=weights,
        raw_weights=raw,
        metrics=evaluate(EvalSet(preds, labels)),
        main_digest=digest,
    )


def make_state(cfg: ExperimentConfig, seed: int, store=None) -> dict:
    """State dict for run_day: the day store, retrieval caches, and the
    warmed-up main model(s)."""
    if store is None:
        calendar = sg.default_calendar(cfg.num_days)
        truth = sg.default_truth(calendar)
        store = sg.MemoryDayStore(calendar, truth, cfg.clicks_per_day, seed)
    state = {
        "seed": seed,
        "store": store,
        "sim": _Simulation(store, cfg.serving_hour, cfg.maturity_days),
        "main": _warmup_model(cfg, seed),
    }
    if cfg.variant == "base_no_dfm":
        state["no_dfm"] = state["main"].copy()
    return state


def run_experiment(cfg: ExperimentConfig, store=None) -> list[ExperimentResult]:
    """Run cfg.variant over every seed; write artifacts if out_dir is set."""
    lanes = (Lane(cfg.variant, cfg.variant),)
    results = [_run_lanes(cfg, seed, lanes, store=store) for seed in cfg.seeds]
    if cfg.out_dir is not None:
        _write_results(Path(cfg.out_dir), cfg, results)
    return results


def run_grid(
    cfg: ExperimentConfig,
    variants: tuple[str, ...] = (),
    backbone_lrs: tuple[float, ...] = (),
    store=None,
) -> list[ExperimentResult]:
    """The ablation grid: every requested variant, plus one hdr lane per
    backbone rate, all sharing each seed's single pass. Writes the per-lane
    daily CSVs plus the two comparison tables if out_dir is set."""
    lanes = [Lane(v, v) for v in variants]
    for lr in backbone_lrs:
        lanes.append(Lane(f"hdr@blr={lr:g}", "hdr", backbone_lr=float(lr)))
    if not lanes:
        raise ConfigError("grid needs at least one variant or backbone rate")
    results = [_run_lanes(cfg, seed, tuple(lanes), store=store) for seed in cfg.seeds]
    if cfg.out_dir is not None:
        out = Path(cfg.out_dir)
        _write_results(out, cfg, results)
        if variants:
            write_comparison_csv(
                out / "ablation_table.csv",
                results,
                [l.label for l in lanes if l.backbone_lr is None],
            )
        if backbone_lrs:
            write_comparison_csv(
                out / "rate_table.csv",
                results,
                [l.label for l in lanes if l.backbone_lr is not None],
            )
    return results


def _write_results(out: Path, cfg: ExperimentConfig, results: list[ExperimentResult]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for result in results:
        for label, reports in sorted(result.reports.items()):
            safe = label.replace("@", "_").replace("=", "")
            write_daily_csv(out / f"daily_{safe}_seed{result.seed}.csv", reports)
    write_summary_csv(out / "summary.csv", results)
    write_experiment_manifest(out / "manifest.ini", cfg)


def run_direct_retrain(cfg: ExperimentConfig, store=None) -> list[ExperimentResult]:
    """The direct-retraining arm: re-train the full main model on the
    retrieved set at the head learning rate, serve, discard."""
    return run_experiment(replace(cfg, variant="base_direct_retrain"), store=store)


# ---------------------------------------------------------------------------
# aggregation

PROMO_GROUP = "promo_window"
PEAK_GROUP = "promo_peak"
ORDINARY_GROUP = "ordinary"


def _day_group(day_type: str) -> str:
    return ORDINARY_GROUP if day_type == "ORDINARY" else PROMO_GROUP


@dataclass(frozen=True)
class GroupSummary:
    variant: str
    seed: int
    group: str
    n_days: int
    n_fallback: int
    auc: float
    logloss: float
    pcoc_dev: float  # mean |PCOC - 1| over days
    ece: float


def summarize(result: ExperimentResult) -> list[GroupSummary]:
    """Mean per-day metrics by day group. Promo peaks also aggregate
    separately since they carry the sharpest shift."""
    rows = []
    for variant, reports in sorted(result.reports.items()):
        groups: dict[str, list[DailyReport]] = {}
        for r in reports:
            groups.setdefault(_day_group(r.day_type), []).append(r)
            if r.day_type == "PROMO_PEAK":
                groups.setdefault(PEAK_GROUP, []).append(r)
        for group in (ORDINARY_GROUP, PROMO_GROUP, PEAK_GROUP):
            if group not in groups:
                continue
            rs = groups[group]
            rows.append(
                GroupSummary(
                    variant=variant,
                    seed=result.seed,
                    group=group,
                    n_days=len(rs),
                    n_fallback=sum(r.served == "fallback" for r in rs),
                    auc=float(np.mean([r.metrics.auc for r in rs])),
                    logloss=float(np.mean([r.metrics.logloss for r in rs])),
                    pcoc_dev=float(np.mean([abs(r.metrics.pcoc - 1.0) for r in rs])),
                    ece=float(np.mean([r.metrics.ece for r in rs])),
                )
            )
    return rows


# ---------------------------------------------------------------------------
# artifact writers: text formats are pinned down to the byte so reruns of the
# same config+seed compare equal


def _fmt(x: float) -> str:
    return repr(float(x))


DAILY_HEADER = (
    "day,day_type,variant,served,gated,retrieved,top_similarity,"
    "w_pos,w_neg,raw_w_pos,raw_w_neg,n_eval,n_pos,auc,logloss,pcoc,ece"
)


def write_daily_csv(path: Path, reports: list[DailyReport]) -> None:
    lines = [DAILY_HEADER]
    for r in reports:
        m = r.metrics
        lines.append(
            ",".join(
                [
                    str(r.day_index),
                    r.day_type,
                    r.variant,
                    r.served,
                    str(int(r.gated)),
                    "|".join(str(d) for d in r.retrieved),
                    _fmt(r.top_similarity),
                    _fmt(r.weights[0]),
                    _fmt(r.weights[1]),
                    _fmt(r.raw_weights[0]),
                    _fmt(r.raw_weights[1]),
                    str(m.n),
                    str(m.n_pos),
                    _fmt(m.auc),
                    _fmt(m.logloss),
                    _fmt(m.pcoc),
                    _fmt(m.ece),
                ]
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


SUMMARY_HEADER = "variant,seed,group,n_days,n_fallback,auc,logloss,pcoc_dev,ece"


def write_summary_csv(path: Path, results: list[ExperimentResult]) -> None:
    lines = [SUMMARY_HEADER]
    for result in results:
        for s in summarize(result):
            lines.append(
                ",".join(
                    [
                        s.variant,
                        str(s.seed),
                        s.group,
                        str(s.n_days),
                        str(s.n_fallback),
                        _fmt(s.auc),
                        _fmt(s.logloss),
                        _fmt(s.pcoc_dev),
                        _fmt(s.ece),
                    ]
                )
            )
    Path(path).write_text("\n".join(lines) + "\n")


COMPARISON_HEADER = "lane,n_seeds,promo_auc,promo_logloss,promo_pcoc_dev,promo_ece"


def write_comparison_csv(
    path: Path, results: list[ExperimentResult], labels: list[str]
) -> None:
    """One row per lane: promotion-window means of the per-day metrics,
    averaged over seeds. This is the side-by-side layout the ablation and
    rate grids are read through."""
    lines = [COMPARISON_HEADER]
    for label in labels:
        per_seed = {"auc": [], "logloss": [], "pcoc_dev": [], "ece": []}
        for result in results:
            rows = [s for s in summarize(result) if s.variant == label and s.group == PROMO_GROUP]
            if not rows:
                continue
            per_seed["auc"].append(rows[0].auc)
            per_seed["logloss"].append(rows[0].logloss)
            per_seed["pcoc_dev"].append(rows[0].pcoc_dev)
            per_seed["ece"].append(rows[0].ece)
        lines.append(
            ",".join(
                [
                    label,
                    str(len(per_seed["auc"])),
                    _fmt(np.mean(per_seed["auc"])),
                    _fmt(np.mean(per_seed["logloss"])),
                    _fmt(np.mean(per_seed["pcoc_dev"])),
                    _fmt(np.mean(per_seed["ece"])),
                ]
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


_MANIFEST_FIELDS = (
    "variant",
    "num_days",
    "clicks_per_day",
    "serving_hour",
    "retrieval_k",
    "maturity_days",
    "similarity_gate",
    "warmup_days",
    "warmup_epochs",
    "daily_lr",
    "daily_batch",
    "waiting_window_hours",
    "matured_window_hours",
    "head_lr",
    "backbone_lr",
    "finetune_batch",
    "finetune_epochs",
    "direct_epochs",
    "ridge",
)


def write_experiment_manifest(path: Path, cfg: ExperimentConfig) -> None:
    """Structured-text record of the exact configuration and seeds."""
    lines = ["[experiment]", f"schema = {CONFIG_SCHEMA}"]
    for name in _MANIFEST_FIELDS:
        lines.append(f"{name} = {getattr(cfg, name)}")
    lines.append(f"weight_clip = {cfg.weight_clip[0]} {cfg.weight_clip[1]}")
    lines.append(f"seeds = {' '.join(str(s) for s in cfg.seeds)}")
    lines.append("[model]")
    lines.append(f"n_user_groups = {cfg.model.n_user_groups}")
    lines.append(f"n_categories = {cfg.model.n_categories}")
    lines.append(f"embed_dim = {cfg.model.embed_dim}")
    lines.append(f"hidden_sizes = {' '.join(str(h) for h in cfg.model.hidden_sizes)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_experiment_config(path: Path) -> ExperimentConfig:
    """Parse the documented key = value schema (same layout the manifest
    writes). Unknown keys are rejected so typos fail loudly."""
    import configparser

    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    if "experiment" not in parser:
        raise ConfigError(f"{path}: missing [experiment] section")
    exp = dict(parser["experiment"])
    schema = exp.pop("schema", None)
    if schema != CONFIG_SCHEMA:
        raise ConfigError(f"{path}: schema {schema!r}, expected {CONFIG_SCHEMA!r}")

    kwargs: dict = {}
    int_fields = {
        "num_days",
        "clicks_per_day",
        "serving_hour",
        "retrieval_k",
        "maturity_days",
        "warmup_days",
        "warmup_epochs",
        "daily_batch",
        "finetune_batch",
        "finetune_epochs",
        "direct_epochs",
    }
    float_fields = {
        "similarity_gate",
        "daily_lr",
        "waiting_window_hours",
        "matured_window_hours",
        "head_lr",
        "backbone_lr",
        "ridge",
    }
    for key, value in exp.items():
        if key == "variant":
            kwargs["variant"] = value
        elif key == "out_dir":
            kwargs["out_dir"] = value
        elif key == "seeds":
            kwargs["seeds"] = tuple(int(s) for s in value.split())
        elif key == "weight_clip":
            lo, hi = value.split()
            kwargs["weight_clip"] = (float(lo), float(hi))
        elif key in int_fields:
            kwargs[key] = int(value)
        elif key in float_fields:
            kwargs[key] = float(value)
        else:
            raise ConfigError(f"{path}: unknown experiment key {key!r}")
    if "model" in parser:
        m = dict(parser["model"])
        extra = set(m) - {"n_user_groups", "n_categories", "embed_dim", "hidden_sizes"}
        if extra:
            raise ConfigError(f"{path}: unknown model keys {sorted(extra)}")
        model_kwargs = {
            "n_user_groups": int(m.get("n_user_groups", sg.DEFAULT_USER_GROUPS)),
            "n_categories": int(m.get("n_categories", sg.DEFAULT_CATEGORIES)),
        }
        if "embed_dim" in m:
            model_kwargs["embed_dim"] = int(m["embed_dim"])
        if "hidden_sizes" in m:
            model_kwargs["hidden_sizes"] = tuple(int(h) for h in m["hidden_sizes"].split())
        kwargs["model"] = ModelConfig(**model_kwargs)
    return ExperimentConfig(**kwargs)
