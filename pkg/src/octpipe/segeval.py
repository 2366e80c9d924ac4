"""Per-tissue overlap scores and paired significance testing."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import betainc

from .volcore import CLASS_NAMES, NUM_CLASSES, LabelVolume
from .validation import check_same_shape

# RNFL+prelamina, GCC, other retinal layers, RPE, choroid.  LC, noise and
# vitreous are not scored.
SCORED_CLASSES = (1, 2, 3, 4, 5)


@dataclass(frozen=True)
class TissueScore:
    class_id: int
    dice: float
    sensitivity: float
    specificity: float
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def name(self) -> str:
        return CLASS_NAMES[self.class_id]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["name"] = self.name
        return d


def _labels(x) -> np.ndarray:
    return x.labels if isinstance(x, LabelVolume) else np.asarray(x)


def score_tissue(d, m, c: int) -> TissueScore:
    """Score class ``c`` of a predicted volume ``d`` against manual ``m``.

    A class absent from both volumes scores dice = sensitivity = 1; absent
    from only one it scores dice 0.
    """
    d, m = _labels(d), _labels(m)
    check_same_shape(d, m, "label volume")
    if not 0 <= int(c) < NUM_CLASSES:
        raise ValueError(f"class id must be in 0..{NUM_CLASSES - 1}, got {c}")
    dm = d == c
    mm = m == c
    tp = int(np.count_nonzero(dm & mm))
    fp = int(np.count_nonzero(dm & ~mm))
    fn = int(np.count_nonzero(~dm & mm))
    tn = int(dm.size - tp - fp - fn)

    denom = 2 * tp + fp + fn
    dice = 2 * tp / denom if denom else 1.0
    if tp + fn:
        sens = tp / (tp + fn)
    else:
        sens = 1.0 if fp == 0 else 0.0
    spec = tn / (tn + fp) if tn + fp else 1.0
    return TissueScore(int(c), dice, sens, spec, tp, fp, fn, tn)


@dataclass(frozen=True)
class ScoreSet:
    scores: tuple[TissueScore, ...]

    @property
    def mean_dice(self) -> float:
        return float(np.mean([s.dice for s in self.scores]))

    @property
    def mean_sensitivity(self) -> float:
        return float(np.mean([s.sensitivity for s in self.scores]))

    @property
    def mean_specificity(self) -> float:
        return float(np.mean([s.specificity for s in self.scores]))

    def to_dict(self) -> dict:
        return {
            "tissues": [s.to_dict() for s in self.scores],
            "mean_dice": self.mean_dice,
            "mean_sensitivity": self.mean_sensitivity,
            "mean_specificity": self.mean_specificity,
        }


def score_all(d, m, classes: Sequence[int] = SCORED_CLASSES) -> ScoreSet:
    return ScoreSet(tuple(score_tissue(d, m, c) for c in classes))


class TTestResult(NamedTuple):
    statistic: float
    pvalue: float
    degenerate: bool = False


def paired_ttest(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Two-sided paired t-test.

    Zero differences give ``(0, 1)``.  Constant non-zero differences have no
    variance; the result is ``(+-inf, 0)`` with ``degenerate=True``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"samples must be 1D of equal length, got {a.shape} and {b.shape}")
    n = a.size
    if n < 2:
        raise ValueError("paired t-test needs at least 2 pairs")
    diff = a - b
    mean = diff.mean()
    sd = math.sqrt(np.sum((diff - mean) ** 2) / (n - 1))
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, 1.0, True)
        return TTestResult(math.copysign(math.inf, mean), 0.0, True)
    t = mean / (sd / math.sqrt(n))
    dof = n - 1
    # two-sided tail of Student's t via the regularised incomplete beta
    p = float(betainc(dof / 2.0, 0.5, dof / (dof + t * t)))
    return TTestResult(float(t), p, False)
