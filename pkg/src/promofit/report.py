"""Figure rendering for run artifacts.

Takes the daily CSVs a run writes (or the in-memory results directly) and
draws a small set of diagnostic figures next to them: per-day ranking and
calibration timelines with the promotion windows shaded, the estimated
importance weights over time, and per-group summary bars across seeds.

Everything renders through the Agg backend so the report path works on
headless boxes; no figure is ever shown interactively.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import ConfigError
from .metrics import MetricsReport
from .pipeline import (
    DAILY_HEADER,
    DailyReport,
    ExperimentResult,
    ORDINARY_GROUP,
    PEAK_GROUP,
    PROMO_GROUP,
)

FIGURE_DPI = 120

# one fixed color per lane so the same lane looks the same across figures
_PALETTE = plt.rcParams["axes.prop_cycle"].by_key()["color"]


def read_daily_csv(path: Path) -> list[DailyReport]:
    """Parse a per-day CSV back into report rows.

    Only the plotted fields survive the round trip; the calibration bucket
    table and the run digests are not serialized.
    """
    text = Path(path).read_text()
    lines = text.strip().split("\n")
    if not lines or lines[0] != DAILY_HEADER:
        raise ConfigError(f"{path}: not a daily report CSV")
    reports = []
    for line in lines[1:]:
        f = line.split(",")
        if len(f) != 17:
            raise ConfigError(f"{path}: malformed row {line!r}")
        retrieved = tuple(int(d) for d in f[5].split("|")) if f[5] else ()
        reports.append(
            DailyReport(
                day_index=int(f[0]),
                day_type=f[1],
                variant=f[2],
                served=f[3],
                gated=bool(int(f[4])),
                retrieved=retrieved,
                top_similarity=float(f[6]),
                weights=(float(f[7]), float(f[8])),
                raw_weights=(float(f[9]), float(f[10])),
                metrics=MetricsReport(
                    n=int(f[11]),
                    n_pos=int(f[12]),
                    auc=float(f[13]),
                    logloss=float(f[14]),
                    pcoc=float(f[15]),
                    ece=float(f[16]),
                    ece_buckets=0,
                ),
            )
        )
    return reports


def _load_run_dir(out_dir: Path) -> dict[int, dict[str, list[DailyReport]]]:
    """All daily CSVs in a run directory, keyed seed -> lane label."""
    found: dict[int, dict[str, list[DailyReport]]] = {}
    for path in sorted(Path(out_dir).glob("daily_*_seed*.csv")):
        stem = path.stem[len("daily_") :]
        label, _, seed_part = stem.rpartition("_seed")
        if not label or not seed_part.isdigit():
            continue
        found.setdefault(int(seed_part), {})[label] = read_daily_csv(path)
    if not found:
        raise ConfigError(f"no daily report CSVs under {out_dir}")
    return found


def _shade_promo(ax, reports: list[DailyReport]) -> None:
    # windows light, peaks dark; spans merge visually on adjacent days
    for r in reports:
        if r.day_type == "ORDINARY":
            continue
        dark = r.day_type == "PROMO_PEAK"
        ax.axvspan(
            r.day_index - 0.5,
            r.day_index + 0.5,
            color="tab:red" if dark else "tab:orange",
            alpha=0.22 if dark else 0.10,
            linewidth=0,
        )


def _lane_color(idx: int) -> str:
    return _PALETTE[idx % len(_PALETTE)]


def fig_metric_timeline(by_label: dict[str, list[DailyReport]], path: Path) -> Path:
    """Per-day AUC and |PCOC - 1| for every lane, promo days shaded."""
    fig, (ax_auc, ax_cal) = plt.subplots(2, 1, figsize=(10, 6), sharex=True)
    first = next(iter(by_label.values()))
    _shade_promo(ax_auc, first)
    _shade_promo(ax_cal, first)
    for idx, (label, reports) in enumerate(sorted(by_label.items())):
        days = [r.day_index for r in reports]
        color = _lane_color(idx)
        ax_auc.plot(days, [r.metrics.auc for r in reports], label=label, color=color, lw=1.2)
        ax_cal.plot(
            days,
            [abs(r.metrics.pcoc - 1.0) for r in reports],
            label=label,
            color=color,
            lw=1.2,
        )
    ax_auc.set_ylabel("AUC")
    ax_cal.set_ylabel("|PCOC - 1|")
    ax_cal.set_xlabel("day")
    ax_cal.set_yscale("log")
    ax_auc.legend(loc="lower left", fontsize=8, ncol=2)
    ax_auc.set_title("per-day ranking and calibration by lane")
    fig.tight_layout()
    fig.savefig(path, dpi=FIGURE_DPI)
    plt.close(fig)
    return Path(path)


def fig_shift_weights(by_label: dict[str, list[DailyReport]], path: Path) -> Path:
    """Estimated class weights over time for the lanes that estimate them.

    Clipped weights draw solid, the raw estimates dotted; days where the
    similarity gate blocked adaptation are marked on the baseline.
    """
    lanes = {
        label: reports
        for label, reports in by_label.items()
        if any(r.weights != (1.0, 1.0) or r.gated for r in reports)
    }
    if not lanes:
        lanes = dict(by_label)
    fig, ax = plt.subplots(figsize=(10, 3.6))
    _shade_promo(ax, next(iter(lanes.values())))
    for idx, (label, reports) in enumerate(sorted(lanes.items())):
        days = [r.day_index for r in reports]
        color = _lane_color(idx)
        ax.plot(days, [r.weights[0] for r in reports], color=color, lw=1.2, label=f"{label} w+")
        ax.plot(days, [r.weights[1] for r in reports], color=color, lw=1.2, ls="--", label=f"{label} w-")
        ax.plot(
            days,
            [r.raw_weights[0] for r in reports],
            color=color,
            lw=0.7,
            ls=":",
            alpha=0.7,
        )
        gated = [r.day_index for r in reports if r.gated]
        if gated:
            ax.plot(gated, [1.0] * len(gated), "x", color=color, ms=5, alpha=0.8)
    ax.axhline(1.0, color="gray", lw=0.6)
    ax.set_ylabel("importance weight")
    ax.set_xlabel("day")
    ax.set_title("distribution-shift weights (x marks gated days)")
    ax.legend(loc="upper left", fontsize=7, ncol=3)
    fig.tight_layout()
    fig.savefig(path, dpi=FIGURE_DPI)
    plt.close(fig)
    return Path(path)


def _group_means(reports: list[DailyReport]) -> dict[str, tuple[float, float]]:
    """Mean (auc, |pcoc-1|) per day group, same grouping the summary uses."""
    buckets: dict[str, list[DailyReport]] = {}
    for r in reports:
        group = ORDINARY_GROUP if r.day_type == "ORDINARY" else PROMO_GROUP
        buckets.setdefault(group, []).append(r)
        if r.day_type == "PROMO_PEAK":
            buckets.setdefault(PEAK_GROUP, []).append(r)
    return {
        group: (
            float(np.mean([r.metrics.auc for r in rs])),
            float(np.mean([abs(r.metrics.pcoc - 1.0) for r in rs])),
        )
        for group, rs in buckets.items()
    }


def fig_group_bars(
    per_seed: dict[int, dict[str, list[DailyReport]]], path: Path
) -> Path:
    """Seed-averaged AUC and |PCOC - 1| per day group, one bar per lane."""
    labels = sorted({label for lanes in per_seed.values() for label in lanes})
    groups = (ORDINARY_GROUP, PROMO_GROUP, PEAK_GROUP)
    means: dict[str, dict[str, tuple[float, float]]] = {}
    for label in labels:
        acc: dict[str, list[tuple[float, float]]] = {g: [] for g in groups}
        for lanes in per_seed.values():
            if label not in lanes:
                continue
            for group, pair in _group_means(lanes[label]).items():
                acc[group].append(pair)
        means[label] = {
            g: (
                float(np.mean([p[0] for p in pairs])),
                float(np.mean([p[1] for p in pairs])),
            )
            for g, pairs in acc.items()
            if pairs
        }

    fig, (ax_auc, ax_cal) = plt.subplots(1, 2, figsize=(11, 3.8))
    width = 0.8 / max(len(labels), 1)
    x = np.arange(len(groups))
    for idx, label in enumerate(labels):
        offs = x + (idx - (len(labels) - 1) / 2) * width
        auc = [means[label].get(g, (np.nan, np.nan))[0] for g in groups]
        cal = [means[label].get(g, (np.nan, np.nan))[1] for g in groups]
        color = _lane_color(idx)
        ax_auc.bar(offs, auc, width, label=label, color=color)
        ax_cal.bar(offs, cal, width, label=label, color=color)
    for ax, name in ((ax_auc, "AUC"), (ax_cal, "|PCOC - 1|")):
        ax.set_xticks(x)
        ax.set_xticklabels(groups, fontsize=8)
        ax.set_ylabel(name)
    lo = min(
        (v[0] for by in means.values() for v in by.values()), default=0.5
    )
    ax_auc.set_ylim(max(0.0, lo - 0.02), None)
    ax_cal.legend(loc="upper left", fontsize=7)
    fig.suptitle(f"group means over {len(per_seed)} seed(s)")
    fig.tight_layout()
    fig.savefig(path, dpi=FIGURE_DPI)
    plt.close(fig)
    return Path(path)


def render_report(
    out_dir: Path, results: list[ExperimentResult] | None = None
) -> list[Path]:
    """Render the figure set into out_dir and return the written paths.

    With results given, plots them directly; otherwise re-reads the daily
    CSVs previously written to out_dir. Timelines draw for the lowest seed
    (one run's trajectory is the readable one), bars average every seed.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if results is not None:
        per_seed = {res.seed: dict(res.reports) for res in results}
    else:
        per_seed = _load_run_dir(out)
    first = per_seed[min(per_seed)]
    written = [
        fig_metric_timeline(first, out / "metric_timeline.png"),
        fig_shift_weights(first, out / "shift_weights.png"),
        fig_group_bars(per_seed, out / "group_summary.png"),
    ]
    return written
