"""Latent-study sampling from a generation profile."""

from __future__ import annotations

import numpy as np

from .types import (
    KINDS,
    SEVERITIES,
    ZONE_LOCATIONS,
    GenProfile,
    LatentFinding,
    LatentStudy,
    fixed_location,
)

_TEMPORAL_CHOICES = ("new", "stable", "improved", "worsened")


def sample_latent_study(
    rng: np.random.Generator, profile: GenProfile, study_id: str = "s000000", seed: int = 0
) -> LatentStudy:
    if rng.random() < profile.normal_prob:
        return LatentStudy(study_id=study_id, seed=seed, findings=())
    n = int(rng.integers(1, profile.max_findings + 1))
    kinds = list(KINDS)
    weights = np.array([profile.kind_weights[k] for k in kinds], dtype=np.float64)
    probs = weights / weights.sum()
    findings = []
    taken = set()
    for _ in range(100):
        if len(findings) == n:
            break
        kind = kinds[int(rng.choice(len(kinds), p=probs))]
        loc = fixed_location(kind)
        if loc is None:
            loc = ZONE_LOCATIONS[int(rng.integers(len(ZONE_LOCATIONS)))]
        if (kind, loc) in taken:
            continue
        taken.add((kind, loc))
        negated = bool(rng.random() < profile.negated_prob)
        if kind == "support_device":
            severity = "mild"
        else:
            severity = SEVERITIES[int(rng.integers(3))]
        temporal = "none"
        if not negated and rng.random() < profile.temporal_prob:
            temporal = _TEMPORAL_CHOICES[int(rng.integers(4))]
        findings.append(LatentFinding(kind, loc, severity, negated, temporal))
    return LatentStudy(study_id=study_id, seed=seed, findings=tuple(findings))
