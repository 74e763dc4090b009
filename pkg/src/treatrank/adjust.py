"""Outcome targets and the per-arm adjustment that strips the randomization
artifact: models learn how much a patient deviates from the average
improvement of their arm, not which arm they happened to receive."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Mapping

from .core import DataError, Dataset


def delta_q(q_baseline: float, q_final: float) -> float:
    """Improvement: baseline minus final score (positive = improved)."""
    if q_final is None:
        raise DataError("missing final score; filter dropouts before computing improvements")
    if not (math.isfinite(q_baseline) and math.isfinite(q_final)):
        raise DataError("scores must be finite")
    return q_baseline - q_final


@dataclass(frozen=True)
class AdjustmentTable:
    """Mean verified training-set improvement per arm."""

    arm_means: Mapping[str, float]
    provenance: str = ""

    def __getitem__(self, arm_id: str) -> float:
        try:
            return self.arm_means[arm_id]
        except KeyError:
            raise DataError(f"no adjustment entry for arm {arm_id!r}")

    def __contains__(self, arm_id: str) -> bool:
        return arm_id in self.arm_means

    def to_dict(self) -> dict:
        return {"arm_means": dict(sorted(self.arm_means.items())), "provenance": self.provenance}

    @classmethod
    def from_dict(cls, doc: Mapping) -> "AdjustmentTable":
        return cls(arm_means={k: float(v) for k, v in doc["arm_means"].items()},
                   provenance=doc.get("provenance", ""))


def build_adjustment_table(train: Dataset) -> AdjustmentTable:
    """Arm means over the training set's verified (complete-case) records.

    Arms without a single complete case get no entry; a warning is recorded.
    """
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    for r in train.records:
        if r.q_final is None:
            continue
        dq = delta_q(r.q_baseline, r.q_final)
        sums[r.arm_assigned] = sums.get(r.arm_assigned, 0.0) + dq
        counts[r.arm_assigned] = counts.get(r.arm_assigned, 0) + 1
    for arm_id in train.arm_ids:
        if arm_id not in counts:
            warnings.warn(f"arm {arm_id!r}: no verified training records, no adjustment entry")
    means = {a: sums[a] / counts[a] for a in sorted(sums)}
    return AdjustmentTable(arm_means=means, provenance=f"train:n={sum(counts.values())}")


def adjust(dq: float, arm_id: str, table: AdjustmentTable) -> float:
    """Center an improvement on its arm's training mean."""
    return dq - table[arm_id]


def unadjust(pred: float, arm_id: str, table: AdjustmentTable) -> float:
    """Inverse of :func:`adjust`: back to the improvement scale."""
    return pred + table[arm_id]
