"""Counterfactual outcome scores via similarity-weighted nearest neighbours.

For a patient x and an arm x did not receive, the counterfactual score is
aggregated from the verified improvements of the k most similar patients
who did receive that arm. Similarity is 1/(1+d) where d adds the mean
squared standardized difference over co-observed quantitative features and
the mean mismatch indicator over co-observed categorical ones, so records
are comparable without imputing anything.

Two aggregation modes are supported:

* ``normalized`` (default): sum(s_i * dq_i) / sum(s_i), a weighted mean
  that stays on the improvement scale.
* ``k_scaled``: sum(s_i * dq_i) / k, which shrinks towards zero whenever
  similarities are below 1.

Completing the patient-by-arm outcome matrix puts the verified improvement
in each patient's assigned-arm cell and counterfactual scores everywhere
else the patient is eligible.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import (
    Arm,
    ConfigError,
    DataError,
    Dataset,
    FeatureSpace,
    PatientRecord,
    QUANTITATIVE_KINDS,
)
from .adjust import delta_q

AGGREGATIONS = ("normalized", "k_scaled")

EMPTY, VERIFIED, COUNTERFACTUAL = 0, 1, 2


@dataclass(frozen=True)
class SimilarityConfig:
    """Neighbour count, aggregation mode, and the per-feature (mean, sd)
    standardization fitted on training data."""

    k: int = 5
    aggregation: str = "normalized"
    standardization: Mapping[str, tuple[float, float]] | None = None

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"aggregation must be one of {AGGREGATIONS}")
        if self.standardization is not None:
            for name, (_, sd) in self.standardization.items():
                if not sd > 0:
                    raise ConfigError(f"standardization sd for {name!r} must be > 0")

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "aggregation": self.aggregation,
            "standardization": (
                {n: list(ms) for n, ms in sorted(self.standardization.items())}
                if self.standardization is not None else None
            ),
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "SimilarityConfig":
        std = doc.get("standardization")
        return cls(
            k=int(doc.get("k", 5)),
            aggregation=doc.get("aggregation", "normalized"),
            standardization={n: (float(m), float(s)) for n, (m, s) in std.items()} if std else None,
        )


def fit_standardization(train: Dataset) -> dict[str, tuple[float, float]]:
    """Observed mean and sd per quantitative feature; constant or fully
    missing features get sd 1 so standardization never divides by zero."""
    out: dict[str, tuple[float, float]] = {}
    for j, feat in enumerate(train.feature_space.features):
        if feat.kind not in QUANTITATIVE_KINDS:
            continue
        values = np.array([
            r.features.get(feat.name) for r in train.records
            if r.features.get(feat.name) is not None
        ], dtype=float)
        if len(values) == 0:
            out[feat.name] = (0.0, 1.0)
            continue
        mean = float(values.mean())
        sd = float(values.std())
        out[feat.name] = (mean, sd if sd > 0 else 1.0)
    return out


def fitted_config(cfg: SimilarityConfig, train: Dataset) -> SimilarityConfig:
    """cfg with standardization filled in from the training set if absent."""
    if cfg.standardization is not None:
        return cfg
    return replace(cfg, standardization=fit_standardization(train))


# ---------------------------------------------------------------------------
# record encoding and the shared similarity kernel
# ---------------------------------------------------------------------------


def _encode(records: Sequence[PatientRecord], space: FeatureSpace,
            std: Mapping[str, tuple[float, float]]) -> tuple[np.ndarray, np.ndarray]:
    """(quantitative standardized matrix, categorical code matrix), NaN = missing."""
    quant_feats = [f for f in space.features if f.kind in QUANTITATIVE_KINDS]
    cat_feats = [f for f in space.features if f.kind not in QUANTITATIVE_KINDS]
    Q = np.full((len(records), len(quant_feats)), np.nan)
    C = np.full((len(records), len(cat_feats)), np.nan)
    for i, r in enumerate(records):
        for j, f in enumerate(quant_feats):
            v = r.features.get(f.name)
            if v is not None:
                mean, sd = std.get(f.name, (0.0, 1.0))
                Q[i, j] = (v - mean) / sd
        for j, f in enumerate(cat_feats):
            v = r.features.get(f.name)
            if v is not None:
                C[i, j] = v
    return Q, C


def _sims(xq: np.ndarray, xc: np.ndarray, candq: np.ndarray, candc: np.ndarray) -> np.ndarray:
    """Similarity of one encoded record to each encoded candidate row."""
    n = len(candq)
    total = np.zeros(n)
    n_co = np.zeros(n)
    if xq.size:
        co = ~np.isnan(xq)[None, :] & ~np.isnan(candq)
        diff = np.where(co, candq - xq[None, :], 0.0)
        nq = co.sum(axis=1)
        sq = (diff * diff).sum(axis=1)
        total += np.divide(sq, nq, out=np.zeros(n), where=nq > 0)
        n_co += nq
    if xc.size:
        co = ~np.isnan(xc)[None, :] & ~np.isnan(candc)
        mism = (co & (candc != xc[None, :])).sum(axis=1)
        nc = co.sum(axis=1)
        total += np.divide(mism.astype(float), nc, out=np.zeros(n), where=nc > 0)
        n_co += nc
    s = 1.0 / (1.0 + total)
    return np.where(n_co > 0, s, 0.0)


def similarity(x: PatientRecord, u: PatientRecord, cfg: SimilarityConfig) -> float:
    """Similarity in [0, 1]; symmetric; 1 for identical observed records.

    Records with no co-observed feature are maximally dissimilar by
    convention (0), reported with a warning.
    """
    if cfg.standardization is None:
        raise ConfigError("similarity requires a fitted standardization; see fitted_config()")
    space = _space_of(x, u, cfg)
    Q, C = _encode([x, u], space, cfg.standardization)
    s = float(_sims(Q[0], C[0], Q[1:], C[1:])[0])
    if s == 0.0:
        warnings.warn(f"patients {x.id!r} and {u.id!r} share no observed feature; similarity 0")
    return s


def _space_of(x: PatientRecord, u: PatientRecord, cfg: SimilarityConfig) -> FeatureSpace:
    # scalar path has no Dataset at hand: reconstruct a minimal ordering from
    # the standardization (quantitative) plus remaining names (categorical)
    from .core import Feature

    quant = [Feature(n, "numeric", "_") for n in cfg.standardization]
    cat_names = sorted((set(x.features) | set(u.features)) - set(cfg.standardization))
    cat = [Feature(n, "categorical", "_") for n in cat_names]
    return FeatureSpace(features=tuple(quant + cat))


def knn(x: PatientRecord, arm_patients: Sequence[PatientRecord], k: int,
        cfg: SimilarityConfig, space: FeatureSpace | None = None) -> list[tuple[PatientRecord, float]]:
    """Top-k most similar arm patients, descending similarity.

    Ties resolve by ascending patient id; x itself is excluded; k is
    clamped to the candidate count.
    """
    if cfg.standardization is None:
        raise ConfigError("knn requires a fitted standardization; see fitted_config()")
    candidates = sorted((u for u in arm_patients if u.id != x.id), key=lambda r: r.id)
    if not candidates:
        raise DataError("no candidate patients in arm")
    if space is None:
        space = _space_of(x, candidates[0], cfg)
    Q, C = _encode([x, *candidates], space, cfg.standardization)
    s = _sims(Q[0], C[0], Q[1:], C[1:])
    order = np.argsort(-s, kind="stable")[: min(k, len(candidates))]
    return [(candidates[i], float(s[i])) for i in order]


def _aggregate(sims: np.ndarray, outcomes: np.ndarray, aggregation: str) -> float:
    weighted = float(np.sum(sims * outcomes))
    if aggregation == "k_scaled":
        return weighted / len(sims)
    total = float(np.sum(sims))
    if total == 0.0:
        warnings.warn("all neighbour similarities are 0; falling back to unweighted mean")
        return float(np.mean(outcomes))
    return weighted / total


def counterfactual_score(x: PatientRecord, arm: Arm, train: Dataset,
                         cfg: SimilarityConfig) -> float:
    """Estimated improvement of x under an arm x did not receive."""
    if x.arm_assigned == arm.id:
        raise DataError(f"patient {x.id!r} received arm {arm.id!r}; its outcome is verified")
    flag = arm.requires_eligibility
    if flag is not None and not x.eligibility.get(flag, False):
        raise DataError(f"patient {x.id!r} is not eligible for arm {arm.id!r}")
    members = [r for r in train.records if r.arm_assigned == arm.id and r.q_final is not None]
    if not members:
        raise DataError(f"arm {arm.id!r} has no verified training patients")
    cfg = fitted_config(cfg, train)
    neighbours = knn(x, members, cfg.k, cfg, space=train.feature_space)
    sims = np.array([s for _, s in neighbours])
    outcomes = np.array([delta_q(u.q_baseline, u.q_final) for u, _ in neighbours])
    return _aggregate(sims, outcomes, cfg.aggregation)


# ---------------------------------------------------------------------------
# outcome matrix
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OutcomeCell:
    value: float
    provenance: str  # "verified" | "counterfactual"


@dataclass(frozen=True)
class OutcomeMatrix:
    """Patients x arms improvement matrix; NaN values are empty cells."""

    patient_ids: tuple[str, ...]
    arm_ids: tuple[str, ...]
    values: np.ndarray
    provenance: np.ndarray

    @property
    def _row_index(self) -> dict[str, int]:
        return {p: i for i, p in enumerate(self.patient_ids)}

    def cell(self, patient_id: str, arm_id: str) -> OutcomeCell | None:
        i = self._row_index[patient_id]
        j = self.arm_ids.index(arm_id)
        code = int(self.provenance[i, j])
        if code == EMPTY:
            return None
        return OutcomeCell(
            value=float(self.values[i, j]),
            provenance="verified" if code == VERIFIED else "counterfactual",
        )

    def count(self, code: int) -> int:
        return int((self.provenance == code).sum())

    def to_csv(self, path: str | Path, provenance_note: str | None = None) -> None:
        with Path(path).open("w", newline="") as fh:
            if provenance_note:
                fh.write(f"# {provenance_note}\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["patient_id", "arm", "value", "provenance"])
            for i, pid in enumerate(self.patient_ids):
                for j, arm_id in enumerate(self.arm_ids):
                    code = int(self.provenance[i, j])
                    if code == EMPTY:
                        continue
                    label = "verified" if code == VERIFIED else "counterfactual"
                    writer.writerow([pid, arm_id, repr(float(self.values[i, j])), label])


def complete_matrix(train: Dataset, cfg: SimilarityConfig) -> OutcomeMatrix:
    """Fill the patient-by-arm matrix: verified improvements on the assigned
    arm, counterfactual scores on every other eligible arm.

    ``train`` must be complete-case filtered. Arms without training
    patients keep an empty column (warning).
    """
    if any(r.q_final is None for r in train.records):
        raise DataError("complete_matrix requires a complete-case filtered dataset")
    cfg = fitted_config(cfg, train)
    space = train.feature_space
    arm_ids = train.arm_ids
    records = train.records
    Q, C = _encode(records, space, cfg.standardization)
    dq = np.array([delta_q(r.q_baseline, r.q_final) for r in records])

    # candidate rows per arm, sorted by patient id (the knn tie order)
    members: dict[str, np.ndarray] = {}
    for arm_id in arm_ids:
        rows = [i for i, r in enumerate(records) if r.arm_assigned == arm_id]
        rows.sort(key=lambda i: records[i].id)
        members[arm_id] = np.array(rows, dtype=int)
        if len(rows) == 0:
            warnings.warn(f"arm {arm_id!r}: no training patients, column left empty")

    values = np.full((len(records), len(arm_ids)), np.nan)
    prov = np.zeros((len(records), len(arm_ids)), dtype=np.int8)
    for i, r in enumerate(records):
        eligible = {a.id for a in train.eligible_arms(r)}
        for j, arm_id in enumerate(arm_ids):
            if arm_id == r.arm_assigned:
                values[i, j] = dq[i]
                prov[i, j] = VERIFIED
                continue
            if arm_id not in eligible:
                continue
            rows = members[arm_id]
            if len(rows) == 0:
                continue
            s = _sims(Q[i], C[i], Q[rows], C[rows])
            order = np.argsort(-s, kind="stable")[: min(cfg.k, len(rows))]
            values[i, j] = _aggregate(s[order], dq[rows[order]], cfg.aggregation)
            prov[i, j] = COUNTERFACTUAL
    return OutcomeMatrix(patient_ids=tuple(r.id for r in records), arm_ids=arm_ids,
                         values=values, provenance=prov)
