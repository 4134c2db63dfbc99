"""Discretization, sub-score aggregation and the global benchmark score.

Each metric value is graded against a (inferior, superior) threshold pair:
values at or below the inferior threshold are *great* (2 points), values at
or below the superior one *acceptable* (1 point), anything above
*unacceptable* (0 points); boundary values take the better grade.  A grade
vector maps to a sub-score (2 Ng + No) / (2 N).  Per evaluation split the
accuracy and physics sub-scores combine as 0.66 / 0.34, the two splits and
the speed-up combine as 0.30 / 0.30 / 0.40, and the speed-up ratio itself
is squashed through a stretched-exponential (Weibull-shaped) curve
``1 - exp(-(x/a)**b)`` with ``a = c * (-ln 0.9)**(-1/b)``, b = 1.7, c = 5,
so a ratio of c scores 0.1 and gains flatten out around thirtyfold.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import IntEnum


class Grade(IntEnum):
    UNACCEPTABLE = 0
    ACCEPTABLE = 1
    GREAT = 2


ML_QUANTITIES = ("a_or", "a_ex", "p_or", "p_ex", "v_or", "v_ex")
PHYSICS_QUANTITIES = ("p1", "p2", "p3", "p4", "p5", "p6", "p7", "p8")


@dataclass(frozen=True)
class ThresholdTable:
    """(inferior, superior) pairs per metric.

    Accuracy: 2%/5% for the four MAPE quantities, 0.2/0.5 kV for the
    voltage MAEs.  Physics: 1%/5% for p1-p5 and p8, 5%/10% for p6-p7.
    """

    ml: dict = field(default_factory=lambda: {
        "a_or": (0.02, 0.05), "a_ex": (0.02, 0.05),
        "p_or": (0.02, 0.05), "p_ex": (0.02, 0.05),
        "v_or": (0.2, 0.5), "v_ex": (0.2, 0.5)})
    physics: dict = field(default_factory=lambda: {
        "p1": (0.01, 0.05), "p2": (0.01, 0.05), "p3": (0.01, 0.05),
        "p4": (0.01, 0.05), "p5": (0.01, 0.05), "p6": (0.05, 0.10),
        "p7": (0.05, 0.10), "p8": (0.01, 0.05)})

    def validate(self):
        for group in (self.ml, self.physics):
            for name, (inf, sup) in group.items():
                if not 0 < inf < sup:
                    raise ValueError(f"thresholds for {name} must satisfy 0 < inferior < superior")


@dataclass(frozen=True)
class ScoreWeights:
    alpha_test: float = 0.30
    alpha_ood: float = 0.30
    alpha_speedup: float = 0.40
    alpha_ml: float = 0.66
    alpha_physics: float = 0.34
    weibull_b: float = 1.7
    weibull_c: float = 5.0

    def validate(self):
        if abs(self.alpha_test + self.alpha_ood + self.alpha_speedup - 1.0) > 1e-9:
            raise ValueError("split weights must sum to 1")
        if abs(self.alpha_ml + self.alpha_physics - 1.0) > 1e-9:
            raise ValueError("category weights must sum to 1")


def discretize(value, thresholds):
    """Three-way grade; boundary values classify into the better grade."""
    inferior, superior = thresholds
    if not 0 < inferior < superior:
        raise ValueError("invalid thresholds")
    if value < 0:
        raise ValueError(f"metric value {value} is negative")
    if value <= inferior:
        return Grade.GREAT
    if value <= superior:
        return Grade.ACCEPTABLE
    return Grade.UNACCEPTABLE


def subscore(grades):
    """(2 Ng + No) / (2 N) over a grade vector."""
    grades = list(grades)
    if not grades:
        raise ValueError("empty grade vector")
    return sum(int(g) for g in grades) / (2.0 * len(grades))


def weibull_scale(b=1.7, c=5.0):
    """The ``a`` constant: scores 0.1 exactly at a speed-up ratio of c."""
    return c * (-math.log(0.9)) ** (-1.0 / b)


def speedup_score(ratio, b=1.7, c=5.0):
    """Stretched-exponential speed-up score, clamped into [0, 1]."""
    if ratio <= 0:
        raise ValueError("speed-up ratio must be positive")
    a = weibull_scale(b, c)
    return min(1.0 - math.exp(-((ratio / a) ** b)), 1.0)


def measure_speedup(baseline_time, inference_time):
    """Ratio of classical-solver time to surrogate inference time."""
    if baseline_time <= 0 or inference_time <= 0:
        raise ValueError("timings must be positive")
    return baseline_time / inference_time


def grade_ml(report, thresholds=None):
    t = thresholds or ThresholdTable()
    return [discretize(v, t.ml[q]) for q, v in zip(ML_QUANTITIES, report.ordered())]


def grade_physics(report, thresholds=None):
    t = thresholds or ThresholdTable()
    return [discretize(v, t.physics[q]) for q, v in zip(PHYSICS_QUANTITIES, report.ordered())]


@dataclass
class ScoreReport:
    grades_ml_test: list
    grades_physics_test: list
    grades_ml_ood: list
    grades_physics_ood: list
    score_ml_test: float
    score_physics_test: float
    score_ml_ood: float
    score_physics_ood: float
    score_test: float
    score_ood: float
    score_speedup: float
    speedup_ratio: float
    global_score: float          # in [0, 1]

    @property
    def global_percent(self):
        return 100.0 * self.global_score

    def as_dict(self):
        return {
            "grades": {
                "ml_test": [int(g) for g in self.grades_ml_test],
                "physics_test": [int(g) for g in self.grades_physics_test],
                "ml_ood": [int(g) for g in self.grades_ml_ood],
                "physics_ood": [int(g) for g in self.grades_physics_ood],
            },
            "score_ml_test": round(self.score_ml_test, 4),
            "score_physics_test": round(self.score_physics_test, 4),
            "score_ml_ood": round(self.score_ml_ood, 4),
            "score_physics_ood": round(self.score_physics_ood, 4),
            "score_test": round(self.score_test, 4),
            "score_ood": round(self.score_ood, 4),
            "score_speedup": round(self.score_speedup, 4),
            "speedup_ratio": round(self.speedup_ratio, 4),
            "global_score": round(self.global_score, 6),
            "global_percent": round(self.global_percent, 1),
        }

    def to_json(self):
        return json.dumps(self.as_dict(), indent=1, sort_keys=True)

    def render_table(self):
        """Human-readable table mirroring the benchmark presentation."""
        sym = {Grade.GREAT: "G", Grade.ACCEPTABLE: "a", Grade.UNACCEPTABLE: "x"}

        def row(grades):
            return " ".join(sym[Grade(g)] for g in grades)

        lines = [
            "                 " + " ".join(f"{q:>5}" for q in ML_QUANTITIES),
            f"ML test      ({self.score_ml_test:.4f})  " + row(self.grades_ml_test),
            f"ML ood       ({self.score_ml_ood:.4f})  " + row(self.grades_ml_ood),
            "                 " + " ".join(f"{q:>3}" for q in PHYSICS_QUANTITIES),
            f"Physics test ({self.score_physics_test:.4f})  " + row(self.grades_physics_test),
            f"Physics ood  ({self.score_physics_ood:.4f})  " + row(self.grades_physics_ood),
            f"Score_test    = {self.score_test:.4f}",
            f"Score_OOD     = {self.score_ood:.4f}",
            f"Score_speedup = {self.score_speedup:.4f}  (ratio {self.speedup_ratio:.2f})",
            f"GLOBAL        = {self.global_percent:.1f}%",
            "grades: G great (2) / a acceptable (1) / x unacceptable (0)",
        ]
        return "\n".join(lines)


def score_from_grades(grades_ml_test, grades_physics_test, grades_ml_ood,
                      grades_physics_ood, speedup_ratio, weights=None):
    """Aggregate explicit grade vectors plus a measured speed-up ratio."""
    w = weights or ScoreWeights()
    w.validate()
    s_ml_t = subscore(grades_ml_test)
    s_ph_t = subscore(grades_physics_test)
    s_ml_o = subscore(grades_ml_ood)
    s_ph_o = subscore(grades_physics_ood)
    s_test = w.alpha_ml * s_ml_t + w.alpha_physics * s_ph_t
    s_ood = w.alpha_ml * s_ml_o + w.alpha_physics * s_ph_o
    s_speed = speedup_score(speedup_ratio, w.weibull_b, w.weibull_c)
    global_score = (w.alpha_test * s_test + w.alpha_ood * s_ood
                    + w.alpha_speedup * s_speed)
    return ScoreReport(
        grades_ml_test=list(grades_ml_test), grades_physics_test=list(grades_physics_test),
        grades_ml_ood=list(grades_ml_ood), grades_physics_ood=list(grades_physics_ood),
        score_ml_test=s_ml_t, score_physics_test=s_ph_t,
        score_ml_ood=s_ml_o, score_physics_ood=s_ph_o,
        score_test=s_test, score_ood=s_ood, score_speedup=s_speed,
        speedup_ratio=speedup_ratio, global_score=global_score,
    )


def global_score(ml_test, physics_test, ml_ood, physics_ood, speedup_ratio,
                 weights=None, thresholds=None):
    """Full pipeline: discretize metric reports, aggregate, weight."""
    t = thresholds or ThresholdTable()
    t.validate()
    return score_from_grades(
        grade_ml(ml_test, t), grade_physics(physics_test, t),
        grade_ml(ml_ood, t), grade_physics(physics_ood, t),
        speedup_ratio, weights)


def aggregate_scores(reports):
    """Mean and population standard deviation of repeated global scores."""
    if not reports:
        raise ValueError("no reports to aggregate")
    vals = [r.global_percent for r in reports]
    mean = sum(vals) / len(vals)
    var = sum((v - mean) ** 2 for v in vals) / len(vals)
    return {"runs": len(vals), "mean_percent": mean, "std_percent": math.sqrt(var),
            "values_percent": vals}
