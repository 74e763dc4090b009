"""Domain types and dataset handling for multi-arm treatment studies.

A study consists of therapies (atomic treatment components), arms (single or
paired components, possibly gated by an eligibility flag), and a feature space
of baseline patient measurements grouped into questionnaire blocks. Patient
cohorts are loaded from / saved to CSV; arms, therapies and features come from
a JSON study configuration.

All types are immutable after construction; the operations here are pure
functions of their inputs.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence
from zlib import crc32

import numpy as np

FEATURE_KINDS = ("numeric", "ordinal", "categorical", "binary")

#: Feature kinds compared by standardized difference (vs categorical mismatch).
QUANTITATIVE_KINDS = ("numeric", "ordinal")


class ConfigError(Exception):
    """Invalid study / run configuration."""


class DataError(Exception):
    """Malformed or inconsistent cohort data."""


@dataclass(frozen=True)
class Therapy:
    """Atomic treatment component, e.g. ``CBT`` or ``HA``."""

    id: str


@dataclass(frozen=True)
class Arm:
    """One branch of the trial: a set of 1 or 2 therapy components.

    ``requires_eligibility`` names a boolean patient flag that must be true
    for the patient to be assignable to this arm (e.g. sufficient hearing
    loss for arms involving hearing aids).
    """

    id: str
    components: tuple[str, ...]
    requires_eligibility: str | None = None

    def __post_init__(self) -> None:
        comps = tuple(sorted(self.components))
        if not 1 <= len(comps) <= 2:
            raise ConfigError(f"arm {self.id!r}: needs 1 or 2 components, got {len(comps)}")
        if len(set(comps)) != len(comps):
            raise ConfigError(f"arm {self.id!r}: duplicate components")
        object.__setattr__(self, "components", comps)


@dataclass(frozen=True)
class Feature:
    """Baseline feature: name, kind, and the questionnaire block it belongs to.

    Categorical features may declare ``categories``; raw string labels are
    then encoded as their index (ordinal encoding), otherwise cells must
    already hold numeric codes.
    """

    name: str
    kind: str
    block: str
    categories: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if self.kind not in FEATURE_KINDS:
            raise ConfigError(f"feature {self.name!r}: unknown kind {self.kind!r}")
        if self.categories is not None:
            object.__setattr__(self, "categories", tuple(self.categories))


@dataclass(frozen=True)
class FeatureSpace:
    """Ordered feature list plus the study's eligibility flag names."""

    features: tuple[Feature, ...]
    eligibility_flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "features", tuple(self.features))
        object.__setattr__(self, "eligibility_flags", tuple(self.eligibility_flags))
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate feature names")

    @cached_property
    def names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.features)

    @cached_property
    def by_name(self) -> dict[str, Feature]:
        return {f.name: f for f in self.features}

    @cached_property
    def blocks(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for f in self.features:
            seen.setdefault(f.block, None)
        return tuple(seen)


@dataclass(frozen=True)
class PatientRecord:
    """One participant: baseline features, eligibility flags, assigned arm,
    and outcome scores (lower score = better; ``q_final`` absent = dropout).
    """

    id: str
    features: Mapping[str, float | None]
    eligibility: Mapping[str, bool]
    arm_assigned: str
    q_baseline: float
    q_final: float | None = None

    def delta_q(self) -> float:
        """Verified improvement; requires a final score."""
        if self.q_final is None:
            raise DataError(f"patient {self.id!r}: no final score (dropout)")
        return self.q_baseline - self.q_final


@dataclass(frozen=True)
class Dataset:
    """A cohort bound to its study configuration."""

    feature_space: FeatureSpace
    arms: tuple[Arm, ...]
    therapies: tuple[Therapy, ...]
    records: tuple[PatientRecord, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "arms", tuple(self.arms))
        object.__setattr__(self, "therapies", tuple(self.therapies))
        object.__setattr__(self, "records", tuple(self.records))

    def __len__(self) -> int:
        return len(self.records)

    @cached_property
    def arm_by_id(self) -> dict[str, Arm]:
        return {a.id: a for a in self.arms}

    @cached_property
    def arm_ids(self) -> tuple[str, ...]:
        """Arm ids in canonical (lexicographic) order."""
        return tuple(sorted(a.id for a in self.arms))

    @cached_property
    def therapy_ids(self) -> tuple[str, ...]:
        """Therapy ids in canonical (lexicographic) order."""
        return tuple(sorted(t.id for t in self.therapies))

    def by_arm(self) -> dict[str, list[PatientRecord]]:
        """Records grouped by assigned arm, dataset order preserved."""
        groups: dict[str, list[PatientRecord]] = {a: [] for a in self.arm_ids}
        for r in self.records:
            groups[r.arm_assigned].append(r)
        return groups

    def eligible_arms(self, record: PatientRecord) -> list[Arm]:
        """Arms the record may be assigned to, in canonical order."""
        out = []
        for arm_id in self.arm_ids:
            arm = self.arm_by_id[arm_id]
            flag = arm.requires_eligibility
            if flag is None or record.eligibility.get(flag, False):
                out.append(arm)
        return out

    def with_records(self, records: Iterable[PatientRecord]) -> "Dataset":
        return replace(self, records=tuple(records))


@dataclass(frozen=True)
class StudyConfig:
    """The arms / therapies / feature-space part of a study, as configured."""

    therapies: tuple[Therapy, ...]
    arms: tuple[Arm, ...]
    feature_space: FeatureSpace

    def __post_init__(self) -> None:
        object.__setattr__(self, "therapies", tuple(self.therapies))
        object.__setattr__(self, "arms", tuple(self.arms))
        therapy_ids = [t.id for t in self.therapies]
        if len(set(therapy_ids)) != len(therapy_ids):
            raise ConfigError("duplicate therapy ids")
        arm_ids = [a.id for a in self.arms]
        if len(set(arm_ids)) != len(arm_ids):
            raise ConfigError("duplicate arm ids")
        comp_sets = [a.components for a in self.arms]
        if len(set(comp_sets)) != len(comp_sets):
            raise ConfigError("two arms share the same component set")
        known = set(therapy_ids)
        for a in self.arms:
            for c in a.components:
                if c not in known:
                    raise ConfigError(f"arm {a.id!r}: unknown therapy {c!r}")
            if a.requires_eligibility is not None and a.requires_eligibility not in self.feature_space.eligibility_flags:
                raise ConfigError(f"arm {a.id!r}: unknown eligibility flag {a.requires_eligibility!r}")

    def to_dict(self) -> dict:
        return {
            "therapies": [{"id": t.id} for t in self.therapies],
            "arms": [
                {
                    "id": a.id,
                    "components": list(a.components),
                    **({"requires_eligibility": a.requires_eligibility} if a.requires_eligibility else {}),
                }
                for a in self.arms
            ],
            "features": [
                {
                    "name": f.name,
                    "kind": f.kind,
                    "block": f.block,
                    **({"categories": list(f.categories)} if f.categories else {}),
                }
                for f in self.feature_space.features
            ],
            "eligibility_flags": list(self.feature_space.eligibility_flags),
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "StudyConfig":
        try:
            therapies = tuple(Therapy(id=t["id"]) for t in doc["therapies"])
            arms = tuple(
                Arm(
                    id=a["id"],
                    components=tuple(a["components"]),
                    requires_eligibility=a.get("requires_eligibility"),
                )
                for a in doc["arms"]
            )
            features = tuple(
                Feature(
                    name=f["name"],
                    kind=f["kind"],
                    block=f["block"],
                    categories=tuple(f["categories"]) if f.get("categories") else None,
                )
                for f in doc["features"]
            )
        except KeyError as exc:
            raise ConfigError(f"study config: missing key {exc}") from exc
        space = FeatureSpace(features=features, eligibility_flags=tuple(doc.get("eligibility_flags", ())))
        return cls(therapies=therapies, arms=arms, feature_space=space)

    def config_hash(self) -> str:
        """Stable digest of the study configuration (artifact integrity checks)."""
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def dataset(self, records: Iterable[PatientRecord]) -> Dataset:
        return Dataset(
            feature_space=self.feature_space,
            arms=self.arms,
            therapies=self.therapies,
            records=tuple(records),
        )


def study_of(ds: Dataset) -> StudyConfig:
    """The study configuration a dataset is bound to."""
    return StudyConfig(therapies=ds.therapies, arms=ds.arms, feature_space=ds.feature_space)


@dataclass(frozen=True)
class SplitSpec:
    """Stratified holdout split specification."""

    holdout_fraction: float
    seed: int
    stratify_by: str = "arm"

    def __post_init__(self) -> None:
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must be in (0,1)")
        if self.stratify_by != "arm":
            raise ConfigError("only stratify_by='arm' is supported")


# ---------------------------------------------------------------------------
# value parsing / validation
# ---------------------------------------------------------------------------

_MISSING_TOKENS = ("", "NA")


def _parse_cell(raw: str, feat: Feature, where: str) -> float | None:
    raw = raw.strip()
    if raw in _MISSING_TOKENS:
        return None
    if feat.categories is not None:
        if raw in feat.categories:
            return float(feat.categories.index(raw))
        # numeric codes also accepted for declared categoricals
    try:
        value = float(raw)
    except ValueError:
        raise DataError(f"{where}: cannot parse {raw!r} for feature {feat.name!r}")
    _check_value(value, feat, where)
    return value


def _check_value(value: float, feat: Feature, where: str) -> None:
    if not math.isfinite(value):
        raise DataError(f"{where}: non-finite value for feature {feat.name!r}")
    if feat.kind == "binary" and value not in (0.0, 1.0):
        raise DataError(f"{where}: binary feature {feat.name!r} must be 0 or 1, got {value}")
    if feat.kind == "categorical" and feat.categories is not None:
        if value != int(value) or not 0 <= value < len(feat.categories):
            raise DataError(f"{where}: categorical code {value} out of range for {feat.name!r}")


def _parse_bool(raw: str, where: str) -> bool:
    raw = raw.strip().lower()
    if raw in ("1", "true", "t", "yes"):
        return True
    if raw in ("0", "false", "f", "no", ""):
        return False
    raise DataError(f"{where}: cannot parse boolean {raw!r}")


def validate_record(record: PatientRecord, study: StudyConfig, where: str | None = None) -> None:
    """Check a record against the study: known arm, eligibility satisfied,
    kind-valid feature values."""
    where = where or f"patient {record.id!r}"
    arm = next((a for a in study.arms if a.id == record.arm_assigned), None)
    if arm is None:
        raise DataError(f"{where}: unknown arm {record.arm_assigned!r}")
    flag = arm.requires_eligibility
    if flag is not None and not record.eligibility.get(flag, False):
        raise DataError(f"{where}: assigned arm {arm.id!r} requires eligibility flag {flag!r}")
    if not math.isfinite(record.q_baseline):
        raise DataError(f"{where}: non-finite baseline score")
    for name, value in record.features.items():
        feat = study.feature_space.by_name.get(name)
        if feat is None:
            raise DataError(f"{where}: unknown feature {name!r}")
        if value is not None:
            _check_value(value, feat, where)


# ---------------------------------------------------------------------------
# CSV and JSON I/O
# ---------------------------------------------------------------------------


def load_study(path: str | Path) -> StudyConfig:
    """Read a study configuration JSON document."""
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"study config not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"study config {path}: invalid JSON ({exc})") from exc
    return StudyConfig.from_dict(doc)


def save_study(study: StudyConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(study.to_dict(), indent=2) + "\n")


def _fmt_float(v: float | None) -> str:
    if v is None:
        return ""
    return repr(float(v))


def dataset_header(study: StudyConfig) -> list[str]:
    flags = list(study.feature_space.eligibility_flags)
    names = list(study.feature_space.names)
    return ["patient_id", "arm", *flags, "q_baseline", "q_final", *names]


def load_dataset(path: str | Path, study: StudyConfig) -> Dataset:
    """Load a cohort CSV against a study configuration.

    Empty cells and the literal ``NA`` are missing values; ``q_final`` may
    be empty (dropout). Leading lines starting with ``#`` (provenance
    headers) are skipped. Raises :class:`DataError` naming the offending
    row and column on any malformed cell, unknown arm, eligibility
    violation or duplicate patient id.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset not found: {path}")
    with path.open(newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    try:
        header = next(reader)
    except StopIteration:
        raise DataError(f"{path}: empty file")
    expected = dataset_header(study)
    if header != expected:
        raise DataError(f"{path}: header mismatch; expected {expected!r}")
    flags = study.feature_space.eligibility_flags
    feats = study.feature_space.features
    records: list[PatientRecord] = []
    seen: set[str] = set()
    for lineno, row in enumerate(reader, start=2):
        where = f"{path.name} row {lineno}"
        if len(row) != len(expected):
            raise DataError(f"{where}: expected {len(expected)} columns, got {len(row)}")
        pid = row[0].strip()
        if not pid:
            raise DataError(f"{where}: empty patient id")
        if pid in seen:
            raise DataError(f"{where}: duplicate patient id {pid!r}")
        seen.add(pid)
        arm = row[1].strip()
        elig = {flag: _parse_bool(row[2 + i], where) for i, flag in enumerate(flags)}
        base_col = 2 + len(flags)
        try:
            q_baseline = float(row[base_col])
        except ValueError:
            raise DataError(f"{where}: cannot parse q_baseline {row[base_col]!r}")
        q_final_raw = row[base_col + 1].strip()
        q_final = None if q_final_raw in _MISSING_TOKENS else float(q_final_raw)
        values = {}
        for i, feat in enumerate(feats):
            values[feat.name] = _parse_cell(row[base_col + 2 + i], feat, where)
        rec = PatientRecord(
            id=pid, features=values, eligibility=elig,
            arm_assigned=arm, q_baseline=q_baseline, q_final=q_final,
        )
        validate_record(rec, study, where)
        records.append(rec)
    return study.dataset(records)


def save_dataset(ds: Dataset, path: str | Path, provenance: str | None = None) -> None:
    """Write a cohort CSV (missing cells empty, floats at round-trip precision)."""
    study = study_of(ds)
    flags = study.feature_space.eligibility_flags
    names = study.feature_space.names
    with Path(path).open("w", newline="") as fh:
        if provenance:
            fh.write(f"# {provenance}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(dataset_header(study))
        for r in ds.records:
            row = [r.id, r.arm_assigned]
            row += ["1" if r.eligibility.get(fl, False) else "0" for fl in flags]
            row.append(_fmt_float(r.q_baseline))
            row.append(_fmt_float(r.q_final))
            row += [_fmt_float(r.features.get(n)) for n in names]
            writer.writerow(row)


# ---------------------------------------------------------------------------
# cohort operations
# ---------------------------------------------------------------------------


def complete_case_filter(ds: Dataset) -> Dataset:
    """Keep only records with a final outcome score; order preserved."""
    return ds.with_records(r for r in ds.records if r.q_final is not None)


def _holdout_counts(arm_sizes: dict[str, int], fraction: float) -> dict[str, int]:
    """Per-arm holdout counts: floors of fraction*size, remainders distributed
    largest-first with lexicographic arm-id tie-break."""
    total = math.floor(fraction * sum(arm_sizes.values()) + 0.5)
    base = {a: math.floor(fraction * n) for a, n in arm_sizes.items()}
    leftover = total - sum(base.values())
    order = sorted(arm_sizes, key=lambda a: (-(fraction * arm_sizes[a] - base[a]), a))
    counts = dict(base)
    for a in order[:leftover]:
        counts[a] += 1
    return counts


def stratified_split(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Split into (train, holdout), stratified by assigned arm.

    Each arm is shuffled by its own random stream derived from
    ``(seed, arm id)``, so adding an arm to the study never reshuffles the
    others. Both sides preserve the original record order.
    """
    if not ds.records:
        raise DataError("cannot split an empty dataset")
    groups = ds.by_arm()
    counts = _holdout_counts({a: len(g) for a, g in groups.items() if g}, spec.holdout_fraction)
    holdout_ids: set[str] = set()
    for arm_id, group in groups.items():
        if not group:
            continue
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed % 2**63, crc32(arm_id.encode())]))
        order = rng.permutation(len(group))
        k = counts[arm_id]
        holdout_ids.update(group[i].id for i in order[:k])
        if len(group) >= 2 and (k == 0 or k == len(group)):
            warnings.warn(f"arm {arm_id!r}: one split side is empty ({len(group)} records, {k} held out)")
        elif len(group) == 1:
            warnings.warn(f"arm {arm_id!r}: single record, one split side is empty")
    train = ds.with_records(r for r in ds.records if r.id not in holdout_ids)
    holdout = ds.with_records(r for r in ds.records if r.id in holdout_ids)
    return train, holdout


def feature_matrix(records: Sequence[PatientRecord], space: FeatureSpace) -> np.ndarray:
    """Records as a float64 matrix in feature-space order, NaN = missing."""
    X = np.full((len(records), len(space.features)), np.nan)
    for i, r in enumerate(records):
        for j, name in enumerate(space.names):
            v = r.features.get(name)
            if v is not None:
                X[i, j] = v
    return X
