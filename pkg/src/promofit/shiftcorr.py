"""Label-shift correction from partial-day prediction logs.

The target day's label distribution is not observable at serving time, but
the model's prediction mass on the target's early hours is. With historical
labeled data providing (a) the model's prediction mass conditioned on each
label class and (b) the historical label frequencies, the target label
distribution is recovered by ridge-regularized moment matching:

    minimize  || M b - m_hat ||^2  +  ridge * || b - b_prior ||^2

whose closed form is  b = (M^T M + ridge*I)^(-1) (M^T m_hat + ridge*b_prior).
Distributions are 2-vectors ordered [positive mass, negative mass]. The
importance weights exported to fine-tuning are per-label ratios of the
estimated target distribution to the historical one.

Everything here is pure given a model snapshot; accumulation order is fixed
by the underlying numpy reductions, so repeated calls are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, RuntimeAbort
from .model import CvrModel, LabeledExamples, predict
from .synthgen import ClickBatch, concat_batches

CLIP_EPS = 1e-6
DEFAULT_MIN_CLASS_COUNT = 10
DEFAULT_SERVING_HOUR = 10
DIST_TOL = 1e-9

SHIFT_SCHEMA = "promofit.shift.v1"


def _check_dist(name: str, m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (2,):
        raise ConfigError(f"{name} must be a 2-vector, got shape {m.shape}")
    if not np.all(np.isfinite(m)) or m.min() < 0.0 or m.max() > 1.0:
        raise ConfigError(f"{name} entries must lie in [0, 1], got {m}")
    if abs(float(m.sum()) - 1.0) > DIST_TOL:
        raise ConfigError(f"{name} must sum to 1, got {m} (sum {m.sum()!r})")
    return m


@dataclass(frozen=True)
class PredDist:
    """Prediction mass split [positive, negative] over one set of clicks."""

    m: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "m", _check_dist("prediction distribution", self.m))


@dataclass(frozen=True)
class CondPredMatrix:
    """Columns are the model's prediction-mass split conditioned on the true
    label: column 0 for positives, column 1 for negatives."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (2, 2):
            raise ConfigError(f"conditional matrix must be 2x2, got {m.shape}")
        if not np.all(np.isfinite(m)) or m.min() < 0.0 or m.max() > 1.0:
            raise ConfigError(f"conditional matrix entries must lie in [0, 1], got {m}")
        sums = m.sum(axis=0)
        if np.any(np.abs(sums - 1.0) > DIST_TOL):
            raise ConfigError(f"conditional matrix columns must sum to 1, got sums {sums}")
        object.__setattr__(self, "matrix", m)

    @property
    def condition_number(self) -> float:
        return float(np.linalg.cond(self.matrix))


@dataclass(frozen=True)
class ShiftEstimate:
    m_y: np.ndarray
    m_y_prior: np.ndarray
    weights: tuple[float, float]
    ridge: float
    condition_number: float
    clipped: bool

    def __post_init__(self):
        object.__setattr__(self, "m_y", _check_dist("estimated label distribution", self.m_y))
        object.__setattr__(
            self, "m_y_prior", _check_dist("historical label distribution", self.m_y_prior)
        )
        w_pos, w_neg = self.weights
        if not (w_pos > 0 and w_neg > 0):
            raise ConfigError(f"importance weights must be positive, got {self.weights}")


def _pred_mass(p: np.ndarray, mode: str) -> np.ndarray:
    """Mean [positive, negative] prediction mass, soft or thresholded."""
    if mode == "hard":
        p = (p >= 0.5).astype(np.float64)
    elif mode != "soft":
        raise ConfigError(f"mode must be 'soft' or 'hard', got {mode!r}")
    pos = float(np.mean(p))
    return np.array([pos, 1.0 - pos])


def historical_stats(
    model: CvrModel,
    labeled_data: LabeledExamples,
    mode: str = "soft",
    *,
    min_class_count: int = DEFAULT_MIN_CLASS_COUNT,
) -> tuple[CondPredMatrix, np.ndarray]:
    """Score the historical set and split its prediction mass by true label.

    Returns the conditional matrix and the empirical label distribution
    [positive share, negative share] of the historical data.
    """
    y = labeled_data.label
    n_pos = int(np.sum(y == 1.0))
    n_neg = int(np.sum(y == 0.0))
    if n_pos < min_class_count or n_neg < min_class_count:
        raise ConfigError(
            f"degenerate conditional: {n_pos} positives / {n_neg} negatives, "
            f"need at least {min_class_count} of each"
        )
    p = predict(model, labeled_data)
    if mode == "hard":
        p = (p >= 0.5).astype(np.float64)
    elif mode != "soft":
        raise ConfigError(f"mode must be 'soft' or 'hard', got {mode!r}")
    pos_col = float(np.mean(p[y == 1.0]))
    neg_col = float(np.mean(p[y == 0.0]))
    matrix = CondPredMatrix(np.array([[pos_col, neg_col], [1.0 - pos_col, 1.0 - neg_col]]))
    prior = np.array([n_pos / (n_pos + n_neg), n_neg / (n_pos + n_neg)])
    return matrix, prior


def target_pred_dist(model: CvrModel, clicks, mode: str = "soft") -> PredDist:
    """Prediction-mass split of the (unlabeled) target slice."""
    n = np.asarray(clicks.user_group).shape[0]
    if n == 0:
        raise ConfigError("empty target slice")
    return PredDist(_pred_mass(predict(model, clicks), mode))


def shift_objective(
    b: np.ndarray, matrix: CondPredMatrix, m_hat: PredDist, m_prior: np.ndarray, ridge: float
) -> float:
    """The quantity the closed form minimizes; exposed for the oracle tests."""
    b = np.asarray(b, dtype=np.float64)
    r = matrix.matrix @ b - m_hat.m
    d = b - m_prior
    return float(r @ r + ridge * (d @ d))


def solve_label_dist(
    matrix: CondPredMatrix, m_hat: PredDist, m_prior, ridge: float
) -> np.ndarray:
    """Raw ridge-regularized estimate of the target label distribution.

    No clipping here: the result is the exact unconstrained minimizer and
    may leave [0, 1] when the system is poorly conditioned.
    """
    if ridge < 0:
        raise ConfigError(f"ridge must be >= 0, got {ridge}")
    m_prior = _check_dist("prior label distribution", m_prior)
    m = matrix.matrix
    a = m.T @ m + ridge * np.eye(2)
    if ridge == 0.0:
        # determinant of the 2x2 normal matrix; scale-aware singularity test
        det = a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]
        if abs(det) < 1e-12 * max(1.0, float(np.abs(a).max()) ** 2):
            raise RuntimeAbort(
                "singular system: the conditional matrix has no inverse and ridge is zero"
            )
    rhs = m.T @ m_hat.m + ridge * m_prior
    return np.linalg.solve(a, rhs)


def clip_label_dist(raw: np.ndarray) -> tuple[np.ndarray, bool]:
    """Project a raw estimate back onto valid distributions.

    Entries are clipped to [CLIP_EPS, 1] and renormalized; the flag reports
    whether the raw solution had actually left [0, 1].
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (2,) or not np.all(np.isfinite(raw)):
        raise ConfigError(f"raw estimate must be a finite 2-vector, got {raw}")
    clipped_flag = bool(raw.min() < 0.0 or raw.max() > 1.0)
    clipped = np.clip(raw, CLIP_EPS, 1.0)
    return clipped / clipped.sum(), clipped_flag


def importance_weights(m_y, m_prior) -> tuple[float, float]:
    """Per-label ratios target/historical: (positive weight, negative weight)."""
    m_y = _check_dist("estimated label distribution", m_y)
    m_prior = np.asarray(m_prior, dtype=np.float64)
    if m_prior.shape != (2,):
        raise ConfigError(f"prior must be a 2-vector, got shape {m_prior.shape}")
    if m_prior.min() < CLIP_EPS:
        raise ConfigError(
            f"historical label distribution has a vanishing component: {m_prior}"
        )
    return float(m_y[0] / m_prior[0]), float(m_y[1] / m_prior[1])


def estimate_shift(
    model: CvrModel,
    history,
    target: ClickBatch,
    *,
    hour: int = DEFAULT_SERVING_HOUR,
    align: str = "hour",
    ridge: float = 1.0,
    mode: str = "soft",
    min_class_count: int = DEFAULT_MIN_CLASS_COUNT,
) -> ShiftEstimate:
    """End-to-end estimate from raw click batches.

    history is one fully labeled day or a list of them (the retrieved days),
    pooled before anything else. The target day is truncated to hours before
    `hour` since nothing later exists at estimation time; with align="hour"
    the historical days are truncated the same way so both sides aggregate
    the same slice of the daily cycle, align="full" keeps whole days for
    sensitivity runs. hour=24 with either alignment degenerates to whole
    days on both sides.
    """
    if not 1 <= hour <= 24:
        raise ConfigError(f"hour must be in [1, 24], got {hour}")
    if align not in ("hour", "full"):
        raise ConfigError(f"align must be 'hour' or 'full', got {align!r}")
    batches = [history] if isinstance(history, ClickBatch) else list(history)
    if not batches:
        raise ConfigError("no historical days to estimate from")
    pooled = concat_batches(batches)
    if align == "hour":
        pooled = pooled.before_hour(hour)
    hist = LabeledExamples.from_batch(pooled)
    matrix, prior = historical_stats(model, hist, mode, min_class_count=min_class_count)
    m_hat = target_pred_dist(model, target.before_hour(hour), mode)
    raw = solve_label_dist(matrix, m_hat, prior, ridge)
    m_y, clipped = clip_label_dist(raw)
    weights = importance_weights(m_y, prior)
    return ShiftEstimate(
        m_y=m_y,
        m_y_prior=prior,
        weights=weights,
        ridge=ridge,
        condition_number=matrix.condition_number,
        clipped=clipped,
    )


def hour_ratio_profile(store, day_a: int, day_b: int) -> np.ndarray:
    """Cumulative positive-rate ratio between two fully labeled days.

    Entry h-1 is (rate of day_a over clicks in hours [0, h)) divided by the
    same quantity for day_b, for h = 1..24. A diagnostic for how steady the
    between-day disparity stays across the day; entries whose denominator
    has no conversions yet are NaN.
    """
    rates = []
    for day in (day_a, day_b):
        batch: ClickBatch = store.events(day)
        if batch.n == 0:
            raise ConfigError(f"empty day {day}")
        hours = np.arange(1, 25)
        counts = np.array([np.sum(batch.hour < h) for h in hours], dtype=np.float64)
        positives = np.array(
            [np.sum(batch.converted & (batch.hour < h)) for h in hours], dtype=np.float64
        )
        with np.errstate(invalid="ignore", divide="ignore"):
            rates.append(np.where(counts > 0, positives / counts, np.nan))
    numer, denom = rates
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(denom > 0, numer / denom, np.nan)
    return ratio


def write_shift_estimate(path, est: ShiftEstimate) -> None:
    def fmt(x) -> str:
        return repr(float(x))

    lines = [
        SHIFT_SCHEMA,
        f"m_y\t{fmt(est.m_y[0])}\t{fmt(est.m_y[1])}",
        f"m_y_prior\t{fmt(est.m_y_prior[0])}\t{fmt(est.m_y_prior[1])}",
        f"weights\t{fmt(est.weights[0])}\t{fmt(est.weights[1])}",
        f"ridge\t{fmt(est.ridge)}",
        f"condition_number\t{fmt(est.condition_number)}",
        f"clipped\t{int(est.clipped)}",
    ]
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def read_shift_estimate(path) -> ShiftEstimate:
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != SHIFT_SCHEMA:
        raise ConfigError(f"{path}: not a shift-estimate record")
    fields = {}
    for line in lines[1:]:
        if line:
            key, *vals = line.split("\t")
            fields[key] = vals
    try:
        return ShiftEstimate(
            m_y=np.array([float(v) for v in fields["m_y"]]),
            m_y_prior=np.array([float(v) for v in fields["m_y_prior"]]),
            weights=(float(fields["weights"][0]), float(fields["weights"][1])),
            ridge=float(fields["ridge"][0]),
            condition_number=float(fields["condition_number"][0]),
            clipped=bool(int(fields["clipped"][0])),
        )
    except (KeyError, IndexError, ValueError) as exc:
        raise ConfigError(f"{path}: malformed shift-estimate record ({exc})") from exc
