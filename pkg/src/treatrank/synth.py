"""Seeded synthetic multi-arm trial cohorts with known ground truth.

The generator draws baseline features, applies feature- and block-level
missingness, assigns each patient uniformly at random to one of the arms
they are eligible for, and realizes the final outcome as

    q_final = q_baseline - (true effect + noise)

where the true effect of an arm is the average over its components of a
per-therapy base effect plus feature interactions on standardized observed
values (missing features contribute the standardized mean, i.e. zero).
The per-(patient, arm) true effects are returned as ground truth so that
rankers can be scored against an oracle.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .core import (
    Arm,
    ConfigError,
    DataError,
    Dataset,
    Feature,
    FeatureSpace,
    PatientRecord,
    StudyConfig,
    Therapy,
)


@dataclass(frozen=True)
class EffectModel:
    """Per-therapy base improvements and (therapy, feature) interactions."""

    base: Mapping[str, float]
    interactions: Mapping[str, Mapping[str, float]] = field(default_factory=dict)

    def coefficient(self, therapy: str, feature: str) -> float:
        return self.interactions.get(therapy, {}).get(feature, 0.0)


@dataclass(frozen=True)
class GeneratorConfig:
    seed: int
    n_patients: int
    study: StudyConfig
    effect: EffectModel
    noise_sd: float = 0.0
    feature_missing_rate: float = 0.0
    block_missing_rate: float = 0.0
    dropout_rate: float = 0.0
    eligibility_rate: Mapping[str, float] = field(default_factory=dict)
    baseline_mean: float = 55.0
    baseline_sd: float = 15.0

    def __post_init__(self) -> None:
        if self.n_patients < 1:
            raise ConfigError("n_patients must be >= 1")
        if self.noise_sd < 0:
            raise ConfigError("noise_sd must be >= 0")
        for name, rate in (
            ("feature_missing_rate", self.feature_missing_rate),
            ("block_missing_rate", self.block_missing_rate),
            ("dropout_rate", self.dropout_rate),
            *((f"eligibility_rate[{k}]", v) for k, v in self.eligibility_rate.items()),
        ):
            if not 0.0 <= rate <= 1.0:
                raise ConfigError(f"{name} must be in [0,1]")
        for tid in self.effect.base:
            if tid not in {t.id for t in self.study.therapies}:
                raise ConfigError(f"effect model: unknown therapy {tid!r}")


@dataclass(frozen=True)
class GroundTruth:
    """True expected improvement per (patient, eligible arm) plus the
    realized noise draw per patient."""

    effects: Mapping[str, Mapping[str, float]]
    noise: Mapping[str, float]

    def true_effect(self, patient_id: str, arm_id: str) -> float:
        try:
            per_arm = self.effects[patient_id]
        except KeyError:
            raise DataError(f"unknown patient {patient_id!r}")
        try:
            return per_arm[arm_id]
        except KeyError:
            raise DataError(f"patient {patient_id!r} not eligible for arm {arm_id!r}")


def generator_config_from_dict(doc: Mapping, study: StudyConfig) -> GeneratorConfig:
    """Build a GeneratorConfig from its JSON form plus a resolved study."""
    try:
        effect = EffectModel(
            base=dict(doc["effect"]["base"]),
            interactions={t: dict(fs) for t, fs in doc["effect"].get("interactions", {}).items()},
        )
        cfg = GeneratorConfig(
            seed=int(doc["seed"]),
            n_patients=int(doc["n_patients"]),
            study=study,
            effect=effect,
            noise_sd=float(doc.get("noise_sd", 0.0)),
            feature_missing_rate=float(doc.get("feature_missing_rate", 0.0)),
            block_missing_rate=float(doc.get("block_missing_rate", 0.0)),
            dropout_rate=float(doc.get("dropout_rate", 0.0)),
            eligibility_rate={k: float(v) for k, v in doc.get("eligibility_rate", {}).items()},
            baseline_mean=float(doc.get("baseline_mean", 55.0)),
            baseline_sd=float(doc.get("baseline_sd", 15.0)),
        )
    except KeyError as exc:
        raise ConfigError(f"generator config: missing key {exc}") from exc
    return cfg


def load_generator_config(path: str | Path, study: StudyConfig) -> GeneratorConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"generator config not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"generator config {path}: invalid JSON ({exc})") from exc
    return generator_config_from_dict(doc, study)


# ---------------------------------------------------------------------------
# feature sampling and standardization under the generative distribution
# ---------------------------------------------------------------------------


def _draw_feature(rng: np.random.Generator, feat: Feature) -> float:
    if feat.kind == "numeric":
        return float(rng.normal(0.0, 1.0))
    if feat.kind == "ordinal":
        return float(rng.integers(0, 5))
    if feat.kind == "binary":
        return float(rng.integers(0, 2))
    n_cat = len(feat.categories) if feat.categories else 3
    return float(rng.integers(0, n_cat))


def _standardize(value: float, feat: Feature) -> float:
    """Standardize by the known generative moments of the feature kind."""
    if feat.kind == "numeric":
        return value
    if feat.kind == "ordinal":
        return (value - 2.0) / math.sqrt(2.0)
    if feat.kind == "binary":
        return (value - 0.5) / 0.5
    n_cat = len(feat.categories) if feat.categories else 3
    mean = (n_cat - 1) / 2.0
    sd = math.sqrt((n_cat**2 - 1) / 12.0)
    return (value - mean) / sd


def _true_effect(arm: Arm, observed: Mapping[str, float], cfg: GeneratorConfig) -> float:
    """Average over arm components of base + interaction terms; pair arms are
    halved so single and combination arms stay on a comparable scale."""
    space = cfg.study.feature_space
    total = 0.0
    for comp in arm.components:
        term = cfg.effect.base.get(comp, 0.0)
        inter = cfg.effect.interactions.get(comp, {})
        for fname, coef in sorted(inter.items()):
            value = observed.get(fname)
            if value is not None:
                term += coef * _standardize(value, space.by_name[fname])
        total += term
    return total / len(arm.components)


def generate(cfg: GeneratorConfig) -> tuple[Dataset, GroundTruth]:
    """Generate a cohort and its ground truth; bit-identical per (config, seed).

    Raises :class:`ConfigError` if any patient would be eligible for zero arms.
    """
    rng = np.random.default_rng(cfg.seed)
    study = cfg.study
    space = study.feature_space
    arms_lex = sorted(study.arms, key=lambda a: a.id)
    width = max(4, len(str(cfg.n_patients)))

    records: list[PatientRecord] = []
    effects: dict[str, dict[str, float]] = {}
    noises: dict[str, float] = {}
    for i in range(cfg.n_patients):
        pid = f"P{i + 1:0{width}d}"
        elig = {
            flag: bool(rng.random() < cfg.eligibility_rate.get(flag, 0.0))
            for flag in space.eligibility_flags
        }
        q_baseline = float(np.clip(rng.normal(cfg.baseline_mean, cfg.baseline_sd), 10.0, 100.0))
        raw = {f.name: _draw_feature(rng, f) for f in space.features}
        block_missing = {b: bool(rng.random() < cfg.block_missing_rate) for b in space.blocks}
        observed: dict[str, float | None] = {}
        for f in space.features:
            drop = rng.random() < cfg.feature_missing_rate
            observed[f.name] = None if (drop or block_missing[f.block]) else raw[f.name]

        eligible = [a for a in arms_lex if a.requires_eligibility is None or elig[a.requires_eligibility]]
        if not eligible:
            raise ConfigError(f"patient {pid}: eligible for zero arms")
        arm = eligible[int(rng.integers(0, len(eligible)))]

        effects[pid] = {a.id: _true_effect(a, observed, cfg) for a in eligible}
        noise = float(rng.normal(0.0, cfg.noise_sd)) if cfg.noise_sd > 0 else 0.0
        noises[pid] = noise
        dropout = rng.random() < cfg.dropout_rate
        q_final = None if dropout else q_baseline - (effects[pid][arm.id] + noise)

        records.append(
            PatientRecord(
                id=pid, features=observed, eligibility=elig,
                arm_assigned=arm.id, q_baseline=q_baseline, q_final=q_final,
            )
        )

    return study.dataset(records), GroundTruth(effects=effects, noise=noises)


def true_best_arm(gt: GroundTruth, patient: PatientRecord) -> str:
    """Eligible arm with maximal true expected improvement, ties lexicographic."""
    if patient.id not in gt.effects:
        raise DataError(f"unknown patient {patient.id!r}")
    per_arm = gt.effects[patient.id]
    return max(sorted(per_arm), key=lambda a: per_arm[a])


def save_ground_truth(gt: GroundTruth, path: str | Path, provenance: str | None = None) -> None:
    """Write the ground-truth effects CSV: ``patient_id,arm,true_effect``."""
    with Path(path).open("w", newline="") as fh:
        if provenance:
            fh.write(f"# {provenance}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["patient_id", "arm", "true_effect"])
        for pid in gt.effects:
            for arm_id in sorted(gt.effects[pid]):
                writer.writerow([pid, arm_id, repr(gt.effects[pid][arm_id])])


def load_ground_truth(path: str | Path) -> GroundTruth:
    effects: dict[str, dict[str, float]] = {}
    with Path(path).open(newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    if header != ["patient_id", "arm", "true_effect"]:
        raise DataError(f"{path}: unexpected ground-truth header {header!r}")
    for pid, arm_id, value in reader:
        effects.setdefault(pid, {})[arm_id] = float(value)
    return GroundTruth(effects=effects, noise={})


# ---------------------------------------------------------------------------
# built-in demo study: 4 therapies, 10 arms, 32 baseline features
# ---------------------------------------------------------------------------

_TFI_SUBSCALES = (
    "tfi_intrusive", "tfi_sense_of_control", "tfi_cognitive", "tfi_sleep",
    "tfi_auditory", "tfi_relaxation", "tfi_quality_of_life", "tfi_emotional",
)
_WHOQOL = (
    "whoqol_overall", "whoqol_health", "whoqol_physical",
    "whoqol_psychological", "whoqol_social", "whoqol_environment",
)
_BFI2 = (
    "bfi2_extraversion", "bfi2_agreeableness", "bfi2_conscientiousness",
    "bfi2_negative_emotionality", "bfi2_open_mindedness",
)


def tinnitus_demo_study() -> StudyConfig:
    """A 10-arm tinnitus study shape: four therapy components offered alone
    and in all pairs, hearing-aid arms gated on a hearing-loss flag, and a
    32-feature baseline battery of singles, questionnaire scores and
    subscale scores."""
    therapies = tuple(Therapy(t) for t in ("CBT", "HA", "SC", "ST"))
    singles = [Arm(id=t.id, components=(t.id,)) for t in therapies]
    pairs = []
    ids = [t.id for t in therapies]
    for i in range(len(ids)):
        for j in range(i + 1, len(ids)):
            pairs.append(Arm(id=f"{ids[i]}+{ids[j]}", components=(ids[i], ids[j])))
    arms = tuple(
        Arm(id=a.id, components=a.components,
            requires_eligibility="hearing_loss" if "HA" in a.components else None)
        for a in singles + pairs
    )
    features = [
        Feature("gender", "binary", "demographics"),
        Feature("age", "numeric", "demographics"),
        Feature("tinnitus_loudness", "numeric", "audiology"),
        Feature("tinnitus_frequency", "numeric", "audiology"),
        Feature("tinnitus_duration", "numeric", "audiology"),
        Feature("audiogram_left", "numeric", "audiology"),
        Feature("audiogram_right", "numeric", "audiology"),
        Feature("hearing_loss_db", "numeric", "audiology"),
        Feature("ftq_score", "numeric", "ftq"),
        Feature("minitq_score", "numeric", "minitq"),
        Feature("guef_score", "numeric", "guef"),
        Feature("phq9_score", "ordinal", "phq9"),
        Feature("tsq_score", "numeric", "tsq"),
        *(Feature(n, "numeric", "tfi") for n in _TFI_SUBSCALES),
        *(Feature(n, "numeric", "whoqol") for n in _WHOQOL),
        *(Feature(n, "numeric", "bfi2") for n in _BFI2),
    ]
    space = FeatureSpace(features=tuple(features), eligibility_flags=("hearing_loss",))
    return StudyConfig(therapies=therapies, arms=arms, feature_space=space)


def tinnitus_demo_generator(seed: int = 7, n_patients: int = 400,
                            noise_sd: float = 3.0) -> GeneratorConfig:
    """Generator defaults with strongly heterogeneous therapy effects
    (interaction coefficients at least twice the noise level)."""
    study = tinnitus_demo_study()
    coef = 2.0 * noise_sd
    effect = EffectModel(
        base={"CBT": 12.0, "HA": 10.0, "SC": 8.0, "ST": 9.0},
        interactions={
            "CBT": {"phq9_score": coef, "tfi_cognitive": coef, "bfi2_negative_emotionality": coef},
            "HA": {"hearing_loss_db": coef + noise_sd, "audiogram_left": coef},
            "SC": {"guef_score": coef, "whoqol_social": coef},
            "ST": {"tinnitus_loudness": coef + noise_sd, "tfi_auditory": coef},
        },
    )
    return GeneratorConfig(
        seed=seed,
        n_patients=n_patients,
        study=study,
        effect=effect,
        noise_sd=noise_sd,
        feature_missing_rate=0.08,
        block_missing_rate=0.04,
        dropout_rate=0.15,
        eligibility_rate={"hearing_loss": 0.5},
    )
