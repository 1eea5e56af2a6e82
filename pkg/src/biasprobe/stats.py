"""Two-proportion z-tests over accuracy contrasts."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .templates import ANTI, FEMALE_SUFFIX, NEUTRAL, PRO, EvalRecord, accuracy_breakdown


@dataclass(frozen=True)
class ProportionSample:
    successes: int
    trials: int

    def __post_init__(self):
        if self.trials <= 0:
            raise ValueError("trials must be positive")
        if not 0 <= self.successes <= self.trials:
            raise ValueError(f"successes {self.successes} outside [0, {self.trials}]")

    @property
    def proportion(self) -> float:
        return self.successes / self.trials


@dataclass(frozen=True)
class ZTestResult:
    comparison_label: str
    z: float
    p_value: float
    n1: int = 0
    x1: int = 0
    n2: int = 0
    x2: int = 0
    degenerate: bool = False  # pooled proportion 0 or 1, z undefined
    computable: bool = True  # False when a contrast cell was empty


def normal_cdf(z: float) -> float:
    """Standard normal CDF via the complementary error function."""
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def two_proportion_ztest(a: ProportionSample, b: ProportionSample,
                         label: str = "") -> ZTestResult:
    """Pooled two-proportion z statistic with a two-sided p-value.

    z = (p1 - p2) / sqrt(p*(1-p)*(1/n1 + 1/n2)) with p pooled over both
    samples; antisymmetric in argument order. A pooled proportion of exactly
    0 or 1 has no sampling variance, so the result carries a degenerate marker.
    """
    pooled = (a.successes + b.successes) / (a.trials + b.trials)
    if pooled <= 0.0 or pooled >= 1.0:
        return ZTestResult(label, math.nan, math.nan, a.trials, a.successes,
                           b.trials, b.successes, degenerate=True)
    se = math.sqrt(pooled * (1.0 - pooled) * (1.0 / a.trials + 1.0 / b.trials))
    z = (a.proportion - b.proportion) / se
    p = math.erfc(abs(z) / math.sqrt(2.0))
    return ZTestResult(label, z, p, a.trials, a.successes, b.trials, b.successes)


# (label, facet filters for each side) for the seven reported contrasts
CONTRASTS = (
    ("all: pro-stereotypical vs anti-stereotypical",
     {"alignment": PRO}, {"alignment": ANTI}),
    ("female targets: pro-stereotypical vs anti-stereotypical",
     {"target_gender": "female", "alignment": PRO},
     {"target_gender": "female", "alignment": ANTI}),
    ("male targets: pro-stereotypical vs anti-stereotypical",
     {"target_gender": "male", "alignment": PRO},
     {"target_gender": "male", "alignment": ANTI}),
    ("anti-stereotypical: female targets vs male targets",
     {"alignment": ANTI, "target_gender": "female"},
     {"alignment": ANTI, "target_gender": "male"}),
    ("pro-stereotypical: female targets vs male targets",
     {"alignment": PRO, "target_gender": "female"},
     {"alignment": PRO, "target_gender": "male"}),
    ("female anti-stereotypical: female-suffix vs neutral",
     {"target_gender": "female", "alignment": ANTI, "attribute_form": FEMALE_SUFFIX},
     {"target_gender": "female", "alignment": ANTI, "attribute_form": NEUTRAL}),
    ("female pro-stereotypical: female-suffix vs neutral",
     {"target_gender": "female", "alignment": PRO, "attribute_form": FEMALE_SUFFIX},
     {"target_gender": "female", "alignment": PRO, "attribute_form": NEUTRAL}),
)


def significance_table(records: list[EvalRecord]) -> list[ZTestResult]:
    """The seven accuracy contrasts computed from the run's own counts."""
    table = accuracy_breakdown(records, ("alignment", "target_gender", "attribute_form"))
    out = []
    for label, side1, side2 in CONTRASTS:
        c1 = table.aggregate(**side1)
        c2 = table.aggregate(**side2)
        if c1.n == 0 or c2.n == 0:
            out.append(ZTestResult(label, math.nan, math.nan, c1.n, c1.correct,
                                   c2.n, c2.correct, computable=False))
            continue
        out.append(two_proportion_ztest(ProportionSample(c1.correct, c1.n),
                                        ProportionSample(c2.correct, c2.n), label))
    return out
