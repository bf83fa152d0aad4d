"""Prediction-error evaluation and model selection.

The root mean square prediction error is a per-day series: at day j, the
Euclidean error norm over the free categories is averaged across seasons
under the square root.  Monte-Carlo cross-validation repeats train/test
season splits (exhaustively when few enough, otherwise a seeded
counter-based sample without replacement), averages the per-replicate
series, and the model-selection grid ranks every link and effect-structure
combination by the season-averaged error.
"""

from __future__ import annotations

import itertools
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import clone

from .estimation import CumulativeLinkModel
from .exceptions import DataError, FitError
from .features import FeatureFrame, setting_covariates

#: Coding glyphs: (ordinal, nominal) per covariate, after the link letter.
_GLYPHS = {
    "calendar": ("●", "○"),   # filled / hollow circle
    "thermal": ("■", "□"),    # filled / hollow square
    "ndvi": ("◆", "◇"),       # filled / hollow diamond
    "greenup": ("◆", "◇"),
}
_LINK_LETTERS = {"logit": "l", "probit": "p", "cauchit": "c"}


@dataclass(frozen=True)
class CvPlan:
    """Monte-Carlo cross-validation plan over season partitions.

    All partitions are enumerated when their count does not exceed
    ``n_replicates``; otherwise that many distinct partitions are sampled
    without replacement from a counter-based (Philox) stream keyed by
    ``seed``, so replicate n's partition is a deterministic function of
    (seed, n) and replicates can be fitted in parallel.
    """

    n_replicates: int = 500
    train_fraction: float = 0.75
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.train_fraction < 1.0):
            raise DataError("train_fraction must be in (0, 1)")
        if self.n_replicates < 1:
            raise DataError("n_replicates must be positive")


@dataclass(frozen=True)
class RmspeSeries:
    """Per-day prediction error with its season average."""

    days: np.ndarray
    pooled: np.ndarray
    per_stage: np.ndarray
    average: float


@dataclass
class CvReport:
    """Aggregated cross-validation errors.

    ``pooled``/``per_stage`` average the per-replicate error series in
    replicate order; ``average`` is the arithmetic mean of the pooled
    series over evaluated days. Proportion scale; multiply by 100 for the
    percent convention used in reports.
    """

    days: np.ndarray
    pooled: np.ndarray
    per_stage: np.ndarray
    average: float
    n_replicates: int
    n_failures: int
    exhaustive: bool
    train_size: int
    test_size: int
    seed: int
    flagged: bool = False
    day_replicate_counts: np.ndarray = field(default=None)
    dropped_cells: int = 0

    @property
    def average_percent(self):
        return 100.0 * self.average


def _squared_errors(y, predicted):
    err = np.asarray(y)[:, 1:] - np.asarray(predicted)[:, 1:]
    return np.sum(err**2, axis=1), err**2


def rmspe(observed, predicted):
    """Error series between an observed panel and a prediction on shared keys.

    Both inputs are matched on (season, day); an empty intersection is an
    error.  Category 1 is excluded from the norm (it is identically one on
    both sides).
    """
    obs_keys = {
        (int(s), int(d)): i
        for i, (s, d) in enumerate(zip(observed.seasons, observed.days))
    }
    pred_keys = {
        (int(s), int(d)): i
        for i, (s, d) in enumerate(zip(predicted.seasons, predicted.days))
    }
    shared = sorted(set(obs_keys) & set(pred_keys))
    if not shared:
        raise DataError("observed and predicted share no (season, day) keys")
    oi = np.asarray([obs_keys[k] for k in shared])
    pi = np.asarray([pred_keys[k] for k in shared])
    y = np.asarray(observed.y)[oi]
    m = np.asarray(predicted.values)[pi]
    days = np.asarray([d for _, d in shared])
    sq, sq_stage = _squared_errors(y, m)

    uniq_days = np.unique(days)
    pooled = np.empty(uniq_days.size)
    per_stage = np.empty((uniq_days.size, y.shape[1] - 1))
    for j, day in enumerate(uniq_days):
        mask = days == day
        pooled[j] = np.sqrt(np.mean(sq[mask]))
        per_stage[j] = np.sqrt(np.mean(sq_stage[mask], axis=0))
    return RmspeSeries(uniq_days, pooled, per_stage, float(np.mean(pooled)))


def _unrank_combination(rank, n, k):
    """Lexicographic unranking of a k-subset of range(n)."""
    combo = []
    x = 0
    for slot in range(k, 0, -1):
        while math.comb(n - x - 1, slot - 1) <= rank:
            rank -= math.comb(n - x - 1, slot - 1)
            x += 1
        combo.append(x)
        x += 1
    return tuple(combo)


def season_partitions(season_values, plan):
    """(train, test) season-label partitions for a CV plan.

    Returns (partitions, exhaustive) where each partition is a pair of
    sorted tuples of season labels.
    """
    seasons = sorted(int(s) for s in np.asarray(season_values).ravel())
    n = len(seasons)
    if n < 4:
        raise DataError(f"need at least 4 seasons for cross-validation, got {n}")
    train_size = math.ceil(plan.train_fraction * n)
    test_size = n - train_size
    if test_size < 1:
        raise DataError("train fraction leaves no test seasons")
    total = math.comb(n, test_size)

    if total <= plan.n_replicates:
        test_sets = [set(c) for c in itertools.combinations(range(n), test_size)]
        exhaustive = True
    else:
        rng = np.random.Generator(np.random.Philox(key=plan.seed))
        if total <= 1_000_000:
            ranks = rng.permutation(total)[: plan.n_replicates]
            test_sets = [set(_unrank_combination(int(r), n, test_size)) for r in ranks]
        else:
            seen, test_sets = set(), []
            while len(test_sets) < plan.n_replicates:
                cand = frozenset(rng.choice(n, size=test_size, replace=False).tolist())
                if cand not in seen:
                    seen.add(cand)
                    test_sets.append(set(cand))
        exhaustive = False

    partitions = []
    for test in test_sets:
        test_labels = tuple(seasons[i] for i in sorted(test))
        train_labels = tuple(s for i, s in enumerate(seasons) if i not in test)
        partitions.append((train_labels, test_labels))
    return partitions, exhaustive


def _replicate_errors(estimator, table, train_labels, test_labels, all_days):
    """Fit on the train seasons, predict the test rows, return day errors."""
    model = clone(estimator)
    model.fit(table.subset_seasons(train_labels))
    test = table.subset_seasons(test_labels)
    frame = FeatureFrame(test.seasons, test.days, dict(test.covariates))
    pred = model.predict(frame)
    sq, sq_stage = _squared_errors(test.y, pred.values)

    n_days = all_days.size
    pooled = np.full(n_days, np.nan)
    per_stage = np.full((n_days, sq_stage.shape[1]), np.nan)
    cells = 0
    for j, day in enumerate(all_days):
        mask = test.days == day
        if mask.any():
            pooled[j] = np.sqrt(np.mean(sq[mask]))
            per_stage[j] = np.sqrt(np.mean(sq_stage[mask], axis=0))
            cells += int(np.count_nonzero(mask))
    return pooled, per_stage, cells


def monte_carlo_cv(table, estimator, plan=None, n_workers=1):
    """Monte-Carlo cross-validated prediction error for one model.

    Each replicate refits a clone of ``estimator`` on its training seasons
    (standardization included) and scores the held-out seasons.  Replicates
    whose fit fails numerically are dropped and counted; losing more than
    10 percent flags the whole report.  Results are deterministic given the
    plan seed: partitions derive from a counter-based stream and the
    replicate reduction runs in replicate-index order.
    """
    plan = plan or CvPlan()
    partitions, exhaustive = season_partitions(table.season_values, plan)
    all_days = np.unique(table.days)

    def run(partition):
        train_labels, test_labels = partition
        try:
            return _replicate_errors(estimator, table, train_labels, test_labels, all_days)
        except FitError:
            return None

    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(run, partitions))
    else:
        results = [run(p) for p in partitions]

    kept = [r for r in results if r is not None]
    n_failures = len(results) - len(kept)
    if not kept:
        raise FitError("every cross-validation replicate failed to fit")
    pooled_stack = np.stack([r[0] for r in kept])
    stage_stack = np.stack([r[1] for r in kept])
    cells = sum(r[2] for r in kept)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN days
        pooled = np.nanmean(pooled_stack, axis=0)
        per_stage = np.nanmean(stage_stack, axis=0)
    counts = np.sum(np.isfinite(pooled_stack), axis=0)
    evaluated = counts > 0
    days = all_days[evaluated]
    pooled = pooled[evaluated]
    per_stage = per_stage[evaluated]

    flagged = n_failures > 0.1 * len(results)
    if flagged:
        warnings.warn(
            f"{n_failures} of {len(results)} cross-validation replicates "
            "failed to converge; the report is flagged",
            stacklevel=2,
        )
    return CvReport(
        days=days,
        pooled=pooled,
        per_stage=per_stage,
        average=float(np.mean(pooled)),
        n_replicates=len(results),
        n_failures=n_failures,
        exhaustive=exhaustive,
        train_size=len(partitions[0][0]),
        test_size=len(partitions[0][1]),
        seed=plan.seed,
        flagged=flagged,
        day_replicate_counts=counts[evaluated],
        dropped_cells=cells,
    )


def structure_code(link, covariates, nominal):
    """Compact text code for one grid cell.

    One letter for the link, then one glyph per covariate: filled shapes
    mark ordinal (shared-slope) effects and hollow shapes nominal
    (per-stage) ones; circle = calendar, square = thermal, diamond =
    NDVI/greenup.
    """
    glyphs = [
        _GLYPHS[c][1] if c in set(nominal) else _GLYPHS[c][0] for c in covariates
    ]
    return _LINK_LETTERS[link] + " " + "".join(glyphs)


@dataclass
class GridCell:
    link: str
    nominal: tuple
    code: str
    average: float
    report: CvReport | None
    failed: bool = False

    @property
    def average_percent(self):
        return 100.0 * self.average


def selection_grid(table, family, setting, plan=None,
                   links=("logit", "probit", "cauchit"), n_trials=100,
                   n_workers=1):
    """Rank every link and ordinal/nominal structure by CV error.

    The grid crosses the requested links with every assignment of
    per-covariate ordinal or nominal effects for the setting; cells are
    sorted by the average error, ascending.
    """
    covariates = setting_covariates(setting)
    plan = plan or CvPlan()
    cells = []
    for link in links:
        for r in range(len(covariates) + 1):
            for nominal in itertools.combinations(covariates, r):
                estimator = CumulativeLinkModel(
                    link=link, family=family, setting=setting,
                    nominal=nominal, n_trials=n_trials,
                )
                code = structure_code(link, covariates, nominal)
                try:
                    report = monte_carlo_cv(table, estimator, plan, n_workers=n_workers)
                except FitError as exc:
                    warnings.warn(f"grid cell {code} failed to fit: {exc}", stacklevel=2)
                    cells.append(
                        GridCell(link=link, nominal=nominal, code=code,
                                 average=np.inf, report=None, failed=True)
                    )
                    continue
                cells.append(
                    GridCell(
                        link=link,
                        nominal=nominal,
                        code=code,
                        average=report.average,
                        report=report,
                    )
                )
    cells.sort(key=lambda c: c.average)
    return cells
