"""Joint objective: weighted sum of reconstruction and contrastive losses."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass


@dataclass(frozen=True)
class LossReport:
    """Per-step record of both loss components and their weighted total.

    ``total == lambda1 * l_mse + lambda2 * l_nce`` exactly, in the same
    floating-point precision as the inputs.
    """

    l_mse: float
    l_nce: float
    lambda1: float
    lambda2: float
    total: float
    step: int

    def to_dict(self) -> dict:
        return asdict(self)


CSV_HEADER = "step,l_mse,l_nce,total"


def combined_loss(l_mse: float, l_nce: float, lambda1: float = 1.0,
                  lambda2: float = 0.1, step: int = 0) -> LossReport:
    """Combine the two proxy-task losses; defaults weight them 1.0 / 0.1."""
    if not (math.isfinite(l_mse) and math.isfinite(l_nce)):
        raise ValueError(f"non-finite loss component: l_mse={l_mse}, l_nce={l_nce}")
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError(f"loss weights must be >= 0, got {lambda1}, {lambda2}")
    total = lambda1 * l_mse + lambda2 * l_nce
    return LossReport(l_mse=l_mse, l_nce=l_nce, lambda1=lambda1, lambda2=lambda2,
                      total=total, step=step)


def csv_line(report: LossReport) -> str:
    """One loss.csv row; full float precision so reruns can be diffed."""
    return f"{report.step},{report.l_mse!r},{report.l_nce!r},{report.total!r}"
