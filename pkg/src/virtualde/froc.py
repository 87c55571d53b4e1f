"""Free-response ROC analysis of lesion localization marks.

A mark within the acceptance radius of one or more lesion centres is
assigned to the nearest of them (lowest lesion index on ties).  Each lesion
is credited once, by the highest-scoring mark assigned to it (earliest mark
on score ties); every other mark is a non-lesion localization.

Because credit always goes to the best mark, raising the score threshold
never changes the status of a surviving mark, so one classification serves
the whole curve.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .phantom import LesionRecord

DEFAULT_RADIUS = 25.0


@dataclass(frozen=True)
class Mark:
    image_id: str
    x: float
    y: float
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"mark score must be finite, got {self.score}")


@dataclass
class FrocCase:
    image_id: str
    lesions: list = field(default_factory=list)
    marks: list = field(default_factory=list)


@dataclass(frozen=True)
class FrocCurve:
    """Operating points at descending thresholds, starting from ``(0, 0)``."""

    thresholds: tuple
    fp_per_image: tuple
    sensitivity: tuple

    def points(self):
        return list(zip(self.fp_per_image, self.sensitivity))


def classify_marks(case: FrocCase, radius: float = DEFAULT_RADIUS):
    """Split ``case.marks`` into ``(lesion_localizations, non_lesion_localizations)``.

    Lesion localizations come back as ``(mark, lesion_index)`` pairs.
    """
    if not radius > 0:
        raise ValueError(f"acceptance radius must be positive, got {radius}")
    best = {}      # lesion index -> mark index
    nearest = []
    for mi, m in enumerate(case.marks):
        hit, hit_d = None, None
        for li, les in enumerate(case.lesions):
            d = math.hypot(m.x - les.x, m.y - les.y)
            if d <= radius and (hit_d is None or d < hit_d):
                hit, hit_d = li, d
        nearest.append(hit)
        if hit is not None:
            cur = best.get(hit)
            if cur is None or m.score > case.marks[cur].score:
                best[hit] = mi
    credited = {mi: li for li, mi in best.items()}
    ll = [(case.marks[mi], credited[mi]) for mi in sorted(credited)]
    nl = [m for mi, m in enumerate(case.marks) if mi not in credited]
    return ll, nl


def _case_scores(cases, radius):
    per_case = []
    for c in cases:
        ll, nl = classify_marks(c, radius)
        per_case.append((np.array([m.score for m, _ in ll], dtype=np.float64),
                         np.array([m.score for m in nl], dtype=np.float64), len(c.lesions)))
    return per_case


def froc_curve(cases, radius: float = DEFAULT_RADIUS) -> FrocCurve:
    """Sweep every distinct mark score from high to low."""
    cases = list(cases)
    if not cases:
        raise ValueError("need at least one case")
    per_case = _case_scores(cases, radius)
    n_lesions = sum(n for _, _, n in per_case)
    if n_lesions == 0:
        raise ValueError("FROC curve undefined: no lesions in the case set")
    ll = np.concatenate([a for a, _, _ in per_case])
    nl = np.concatenate([b for _, b, _ in per_case])
    thresholds = np.unique(np.concatenate([ll, nl]))[::-1]
    fps, sens = [0.0], [0.0]
    for t in thresholds:
        fps.append(float(np.count_nonzero(nl >= t)) / len(cases))
        sens.append(float(np.count_nonzero(ll >= t)) / n_lesions)
    return FrocCurve((math.inf,) + tuple(float(t) for t in thresholds), tuple(fps), tuple(sens))


def sensitivity_at_fp(curve: FrocCurve, fp: float) -> float:
    """Sensitivity of the last operating point whose FP rate is ``<= fp``."""
    if fp < 0:
        raise ValueError("fp must be non-negative")
    best = 0.0
    for f, s in zip(curve.fp_per_image, curve.sensitivity):
        if f <= fp:
            best = s
        else:
            break
    return best


@dataclass(frozen=True)
class BootstrapResult:
    fp_levels: tuple
    mean: tuple
    lo95: tuple
    hi95: tuple
    n_boot: int
    n_skipped: int

    @property
    def skip_fraction(self) -> float:
        return self.n_skipped / self.n_boot


def _count_tables(per_case, thresholds):
    """Per-case counts of LL/NL marks with score >= each threshold."""
    ll = np.array([[np.count_nonzero(a >= t) for t in thresholds] for a, _, _ in per_case])
    nl = np.array([[np.count_nonzero(b >= t) for t in thresholds] for _, b, _ in per_case])
    n_les = np.array([n for _, _, n in per_case], dtype=np.float64)
    return ll.reshape(len(per_case), -1), nl.reshape(len(per_case), -1), n_les


def bootstrap_sensitivities(cases, radius, fp_levels, draws) -> np.ndarray:
    """Sensitivity at each FP level for every resample in ``draws``.

    ``draws`` is an integer array ``(n_resamples, n_cases)`` of case indices.
    Rows whose resample holds no lesion are NaN.
    """
    per_case = _case_scores(cases, radius)
    scores = np.concatenate([np.concatenate([a, b]) for a, b, _ in per_case])
    thresholds = np.unique(scores)[::-1]
    ll, nl, n_les = _count_tables(per_case, thresholds)
    n = draws.shape[1]
    counts = np.zeros((draws.shape[0], len(cases)))
    np.add.at(counts, (np.repeat(np.arange(draws.shape[0]), n), draws.ravel()), 1.0)
    lesions = counts @ n_les
    # origin point first, then one point per threshold
    fp = np.concatenate([np.zeros((len(counts), 1)), counts @ nl / n], axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        sens = np.concatenate([np.zeros((len(counts), 1)), counts @ ll], axis=1) / lesions[:, None]
    out = np.empty((len(counts), len(fp_levels)))
    for j, level in enumerate(fp_levels):
        # fp and sens are both non-decreasing along the sweep
        out[:, j] = np.max(np.where(fp <= level, sens, 0.0), axis=1)
    out[lesions == 0] = np.nan
    return out


def bootstrap_ci(cases, radius: float = DEFAULT_RADIUS, fp_levels=(1.0, 2.0),
                 n_boot: int = 2000, seed: int = 0) -> BootstrapResult:
    """Case-level percentile bootstrap of sensitivity at fixed FP rates.

    Resamples with zero lesions are skipped and counted in ``n_skipped``.
    """
    if n_boot < 100:
        raise ValueError(f"n_boot must be >= 100, got {n_boot}")
    cases = list(cases)
    rng = np.random.default_rng(seed)
    draws = rng.integers(0, len(cases), size=(n_boot, len(cases)))
    sens = bootstrap_sensitivities(cases, radius, tuple(fp_levels), draws)
    ok = ~np.isnan(sens[:, 0])
    kept = sens[ok]
    if len(kept) == 0:
        raise ValueError("every bootstrap resample was lesion-free")
    lo, hi = np.percentile(kept, [2.5, 97.5], axis=0)
    return BootstrapResult(tuple(float(f) for f in fp_levels),
                           tuple(float(v) for v in kept.mean(axis=0)),
                           tuple(float(v) for v in lo), tuple(float(v) for v in hi),
                           n_boot, int(np.count_nonzero(~ok)))


# -- files -----------------------------------------------------------------


def read_marks(path) -> list[Mark]:
    with open(path, newline="") as fh:
        return [Mark(r["image_id"], float(r["x"]), float(r["y"]), float(r["score"]))
                for r in csv.DictReader(fh)]


def write_marks(path, marks):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "x", "y", "score"])
        for m in marks:
            w.writerow([m.image_id, repr(m.x), repr(m.y), repr(m.score)])


def build_cases(lesions, marks, image_ids=None) -> list[FrocCase]:
    """Group lesions and marks per image; ``image_ids`` adds lesion-free images."""
    ids = list(dict.fromkeys(list(image_ids or []) + [les.image_id for les in lesions]
                             + [m.image_id for m in marks]))
    by_id = {i: FrocCase(i) for i in ids}
    for les in lesions:
        by_id[les.image_id].lesions.append(les)
    for m in marks:
        by_id[m.image_id].marks.append(m)
    return [by_id[i] for i in ids]


def write_curve_csv(path, curve: FrocCurve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fp_per_image", "sensitivity"])
        for f, s in curve.points():
            w.writerow([repr(f), repr(s)])


def plot_curves(path, curves: dict):
    """Overlay labelled FROC curves as step plots in an SVG file."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "froc", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(5, 4))
        for label, curve in curves.items():
            ax.step(curve.fp_per_image, curve.sensitivity, where="post", label=label)
        ax.set_xlabel("false positives per image")
        ax.set_ylabel("sensitivity")
        ax.set_ylim(0, 1.02)
        ax.grid(alpha=0.3)
        ax.legend(loc="lower right")
        fig.tight_layout()
        fig.savefig(Path(path), format="svg", metadata={"Date": None})
        plt.close(fig)
