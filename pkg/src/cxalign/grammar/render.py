"""Report rendering: canonical/verbose/abbreviated styles, the four report
variants, erroneous impressions, and status sentences.

All rendering is a pure function of the latent study (plus an rng only for
error injection), so every label is recoverable exactly by the parser in
`labels.py`.
"""

from __future__ import annotations

import re

import numpy as np

from .lexicon import contract_acronyms
from .types import (
    KINDS,
    NODULE_MM,
    SEVERITIES,
    ZONE_LOCATIONS,
    LatentFinding,
    LatentStudy,
    fixed_location,
)

# surface noun phrases: bank 0 (canonical) / bank 1 (paraphrase)
NOUN_PHRASES = {
    "opacity": ("opacity", "airspace opacity"),
    "consolidation": ("consolidation", "focal consolidation"),
    "pleural_effusion": ("pleural effusion", "pleural fluid collection"),
    "pneumothorax": ("pneumothorax", "pneumothorax"),
    "atelectasis": ("atelectasis", "collapse of the lung"),
}

SEV_WORDS = {"mild": ("mild", "minimal"), "moderate": ("moderate", "moderate"), "severe": ("severe", "large")}
SEV_ADVERBS = {"mild": "mildly", "moderate": "moderately", "severe": "severely"}
GRANULOMA_SEV = {"mild": "tiny", "moderate": "small", "severe": "large"}

NORMAL_FINDINGS = {
    "canonical": ("The lungs are clear.", "No acute cardiopulmonary process is seen."),
    "paraphrase": ("The lungs are well expanded and clear.", "No acute findings are identified."),
    "verbose": (
        "The frontal radiograph demonstrates clear lungs.",
        "No acute cardiopulmonary process is identified.",
    ),
}
NORMAL_IMPRESSION = "No active lung disease."

STATUS_NAMES = {
    "opacity": "opacity",
    "consolidation": "consolidation",
    "pleural_effusion": "pleural effusion",
    "pneumothorax": "pneumothorax",
    "cardiomegaly": "heart enlargement",
    "edema": "pulmonary edema",
    "nodule": "nodule",
    "granuloma": "granuloma",
    "atelectasis": "atelectasis",
    "support_device": "support device",
}

ERROR_CATEGORIES = (
    "Change Severity",
    "Change Location",
    "False Prediction",
    "False Negation",
    "Change Measurement",
    "Add Opposite Sentence",
    "Add Medical Device",
    "Change Position of Device",
)


def _temp_clause(f: LatentFinding) -> str:
    if f.temporal == "none":
        return ""
    return f", {f.temporal} compared to the prior study"


def _loc_phrase(location: str) -> str:
    return f"{location} lung field"


def _positive_clause(f: LatentFinding) -> str:
    """Bank-0 clause for a positive, non-cardiomegaly finding."""
    t = _temp_clause(f)
    if f.kind == "edema":
        return f"{f.severity} pulmonary edema{t}"
    loc = _loc_phrase(f.location)
    if f.kind == "nodule":
        return f"a {NODULE_MM[f.severity]} mm nodule in the {loc}{t}"
    if f.kind == "granuloma":
        return f"a {GRANULOMA_SEV[f.severity]} calcified granuloma in the {loc}{t}"
    if f.kind == "support_device":
        return f"a support device projecting over the {loc}{t}"
    return f"a {f.severity} {NOUN_PHRASES[f.kind][0]} in the {loc}{t}"


def _sentence_canonical(f: LatentFinding) -> str:
    if f.kind == "cardiomegaly":
        if f.negated:
            return "The heart size is within normal limits."
        return f"The heart is {SEV_ADVERBS[f.severity]} enlarged{_temp_clause(f)}."
    if f.negated:
        if f.kind == "edema":
            return "No pulmonary edema is seen."
        loc = _loc_phrase(f.location)
        noun = {
            "nodule": "nodule",
            "granuloma": "granuloma",
            "support_device": "support device",
        }.get(f.kind, NOUN_PHRASES.get(f.kind, ("",))[0])
        return f"No {noun} is seen in the {loc}."
    return f"There is {_positive_clause(f)}."


def _sentence_paraphrase(f: LatentFinding) -> str:
    if f.kind == "cardiomegaly":
        if f.negated:
            return "The cardiac silhouette is normal in size."
        return f"The cardiac silhouette is {SEV_ADVERBS[f.severity]} enlarged{_temp_clause(f)}."
    if f.negated:
        if f.kind == "edema":
            return "There is no pulmonary edema."
        noun = {
            "nodule": "nodule",
            "granuloma": "granuloma",
            "support_device": "support device",
        }.get(f.kind, NOUN_PHRASES.get(f.kind, ("",))[0])
        return f"There is no {noun} in the {_loc_phrase(f.location)}."
    t = _temp_clause(f)
    if f.kind == "edema":
        return f"{SEV_WORDS[f.severity][1].capitalize()} pulmonary edema is noted{t}."
    loc = _loc_phrase(f.location)
    if f.kind == "nodule":
        return f"A {NODULE_MM[f.severity]} mm nodular opacity is seen in the {loc}{t}."
    if f.kind == "granuloma":
        return f"A {GRANULOMA_SEV[f.severity]} calcified granuloma is noted in the {loc}{t}."
    if f.kind == "support_device":
        return f"A support device is seen in the {loc}{t}."
    return f"{SEV_WORDS[f.severity][1].capitalize()} {NOUN_PHRASES[f.kind][1]} is noted in the {loc}{t}."


def _sentence_verbose(f: LatentFinding) -> str:
    lead = "The frontal radiograph demonstrates"
    if f.kind == "cardiomegaly":
        if f.negated:
            return "The cardiac silhouette is within normal limits."
        return f"{lead} {f.severity} enlargement of the cardiac silhouette{_temp_clause(f)}."
    if f.negated:
        if f.kind == "edema":
            return f"{lead} no pulmonary edema."
        noun = {
            "nodule": "nodule",
            "granuloma": "granuloma",
            "support_device": "support device",
        }.get(f.kind, NOUN_PHRASES.get(f.kind, ("",))[0])
        return f"{lead} no {noun} in the {_loc_phrase(f.location)}."
    return f"{lead} {_positive_clause(f)}."


def _impression_sentence(f: LatentFinding, location: str | None = None) -> str:
    """Compressed impression form; `location` overrides for bilateral merges."""
    t = _temp_clause(f)
    if f.negated:
        if f.kind == "cardiomegaly":
            return "Heart size within normal limits."
        if f.kind == "edema":
            return "No pulmonary edema."
        noun = {
            "nodule": "nodule",
            "granuloma": "granuloma",
            "support_device": "support device",
        }.get(f.kind, NOUN_PHRASES.get(f.kind, ("",))[0])
        return f"No {noun} in the {_loc_phrase(f.location)}."
    if f.kind == "cardiomegaly":
        return f"{SEV_ADVERBS[f.severity].capitalize()} enlarged heart{t}."
    if f.kind == "edema":
        return f"{f.severity.capitalize()} pulmonary edema{t}."
    # `location` is a full phrase override, e.g. "bilateral lower lung fields"
    loc = location if location else _loc_phrase(f.location)
    if f.kind == "nodule":
        return f"{NODULE_MM[f.severity]} mm nodule in the {loc}{t}."
    if f.kind == "granuloma":
        return f"{GRANULOMA_SEV[f.severity].capitalize()} calcified granuloma in the {loc}{t}."
    if f.kind == "support_device":
        return f"Support device over the {loc}{t}."
    return f"{f.severity.capitalize()} {NOUN_PHRASES[f.kind][0]} in the {loc}{t}."


def _clauseable(f: LatentFinding) -> bool:
    return not f.negated and f.kind != "cardiomegaly"


def _findings_sentences_canonical(findings, compound: bool = True) -> list[str]:
    """Bank-0 sentences; adjacent clause-able findings pair into compounds."""
    out = []
    i = 0
    fs = list(findings)
    while i < len(fs):
        f = fs[i]
        if compound and _clauseable(f) and i + 1 < len(fs) and _clauseable(fs[i + 1]):
            out.append(f"There is {_positive_clause(f)}, and {_positive_clause(fs[i + 1])}.")
            i += 2
        else:
            out.append(_sentence_canonical(f))
            i += 1
    return out


def _merge_bilateral(positives):
    """Group mirrored findings for impression rendering.

    Returns a list of (finding, location_override) where the override is a
    bilateral phrase when the mirrored twin was merged away.
    """
    out = []
    consumed = set()
    for i, f in enumerate(positives):
        if i in consumed:
            continue
        if f.location in ZONE_LOCATIONS:
            side, row = f.location.split()
            other = ("left" if side == "right" else "right") + f" {row}"
            for j in range(i + 1, len(positives)):
                g = positives[j]
                if (
                    j not in consumed
                    and g.kind == f.kind
                    and g.location == other
                    and g.severity == f.severity
                    and g.temporal == f.temporal
                ):
                    consumed.add(j)
                    out.append((f, f"bilateral {row} lung fields"))
                    break
            else:
                out.append((f, None))
        else:
            out.append((f, None))
    return out


def render_impression(findings, keep_negated: bool = False) -> str:
    """Compression of the findings list: negations dropped, mirrored
    locations merged. `keep_negated` is used for erroneous impressions."""
    kept = [f for f in findings if keep_negated or not f.negated]
    if not kept:
        return NORMAL_IMPRESSION
    sentences = []
    positives = [f for f in kept if not f.negated]
    merged = _merge_bilateral(positives)
    by_id = {id(f): loc for f, loc in merged}
    merged_ids = {id(f) for f, _ in merged}
    for f in kept:
        if f.negated:
            sentences.append(_impression_sentence(f))
        elif id(f) in merged_ids:
            sentences.append(_impression_sentence(f, by_id[id(f)]))
        # mirrored twins merged away render nothing
    return " ".join(sentences)


def drop_articles(text: str) -> str:
    return re.sub(r"\b([Aa]n?|[Tt]he)\s+", "", text)


def abbreviate_text(text: str, lexicon: dict | None = None) -> str:
    """Shorthand style: reverse lexicon lookup plus article dropping."""
    return drop_articles(contract_acronyms(text, lexicon))


def render_report(study: LatentStudy, style: str = "canonical") -> tuple[str, str]:
    """Render (findings_text, impression_text) in the requested style."""
    if style not in ("canonical", "verbose", "abbreviated"):
        raise ValueError(f"unknown style {style!r}")
    impression = render_impression(study.findings)
    if study.is_normal:
        if style == "verbose":
            return " ".join(NORMAL_FINDINGS["verbose"]), impression
        findings = " ".join(NORMAL_FINDINGS["canonical"])
    elif style == "verbose":
        return " ".join(_sentence_verbose(f) for f in study.findings), impression
    else:
        findings = " ".join(_findings_sentences_canonical(study.findings))
    if style == "abbreviated":
        return abbreviate_text(findings), abbreviate_text(impression)
    return findings, impression


def _clear_temporal(f: LatentFinding) -> LatentFinding:
    if f.temporal == "none":
        return f
    return LatentFinding(f.kind, f.location, f.severity, f.negated, "none")


REGION_ORDER = ("Right lung", "Left lung", "Heart", "Other")


def _region(f: LatentFinding) -> str:
    if f.kind == "cardiomegaly":
        return "Heart"
    if f.location.startswith("right"):
        return "Right lung"
    if f.location.startswith("left"):
        return "Left lung"
    return "Other"


def make_variants(study: LatentStudy, findings_text: str | None = None) -> dict:
    """The five variant texts of a study's findings section."""
    if findings_text is None:
        findings_text, _ = render_report(study, "canonical")
    if study.is_normal:
        paraphrase = " ".join(NORMAL_FINDINGS["paraphrase"])
        return {
            "paraphrase": paraphrase,
            "split": findings_text,
            "prior_omitted": findings_text,
            "partitioned": findings_text,
            "abbreviated": abbreviate_text(findings_text),
        }
    atomic = [_sentence_canonical(f) for f in study.findings]
    omitted = " ".join(
        _findings_sentences_canonical([_clear_temporal(f) for f in study.findings])
    )
    groups: dict[str, list[str]] = {r: [] for r in REGION_ORDER}
    for f, s in zip(study.findings, atomic):
        groups[_region(f)].append(s)
    parts = [f"{r}: " + " ".join(groups[r]) for r in REGION_ORDER if groups[r]]
    return {
        "paraphrase": " ".join(_sentence_paraphrase(f) for f in study.findings),
        "split": " ".join(atomic),
        "prior_omitted": omitted,
        "partitioned": " ".join(parts),
        "abbreviated": abbreviate_text(findings_text),
    }


def status_sentence(kind: str, status: str) -> str:
    """Canonical status sentence used as a classification-pair positive."""
    if status not in ("new", "stable", "improved", "worsened", "present", "absent"):
        raise ValueError(f"unknown status {status!r}")
    return f"The {STATUS_NAMES[kind]} is {status}."


def finding_status(f: LatentFinding) -> str:
    if f.negated:
        return "absent"
    if f.temporal != "none":
        return f.temporal
    return "present"


# ---------------------------------------------------------------------------
# error injection
# ---------------------------------------------------------------------------


def _free_kind_locations(study: LatentStudy):
    taken = {(f.kind, f.location) for f in study.findings}
    combos = []
    for kind in KINDS:
        fixed = fixed_location(kind)
        locs = [fixed] if fixed else list(ZONE_LOCATIONS)
        for loc in locs:
            if (kind, loc) not in taken:
                combos.append((kind, loc))
    return combos


def _swap_side(location: str) -> str:
    side, row = location.split()
    return ("left" if side == "right" else "right") + f" {row}"


def inject_errors(study: LatentStudy, rng: np.random.Generator, n_errors: int = 3):
    """Synthesize `n_errors` tagged erroneous impressions, each one edit away
    from the true impression and guaranteed label-distinct from it."""
    from .labels import extract_labels  # local import avoids a cycle

    positives = study.positives()
    truth_labels = extract_labels(render_impression(study.findings)).label_set

    def pick(items):
        return items[int(rng.integers(len(items)))]

    sev_editable = [f for f in positives if f.kind not in ("nodule", "support_device")]
    loc_editable = [f for f in positives if f.location in ZONE_LOCATIONS]
    nodules = [f for f in positives if f.kind == "nodule"]
    devices = [f for f in positives if f.kind == "support_device"]

    eligible = []
    if sev_editable:
        eligible.append("Change Severity")
    if loc_editable:
        eligible.append("Change Location")
    eligible.append("False Prediction")
    if positives:
        eligible.append("False Negation")
    if nodules:
        eligible.append("Change Measurement")
    eligible.append("Add Opposite Sentence")
    device_eligible = []
    if not devices:
        device_eligible.append("Add Medical Device")
    if devices:
        device_eligible.append("Change Position of Device")

    # non-device categories first, per the generation protocol
    order = list(rng.permutation(eligible)) + list(rng.permutation(device_eligible))
    chosen = order[:n_errors]
    while len(chosen) < n_errors:
        chosen.append("False Prediction")

    used_insertions: set = set()

    def edit(category: str) -> list[LatentFinding]:
        fs = list(positives)
        if category == "Change Severity":
            f = pick(sev_editable)
            new_sev = pick([s for s in SEVERITIES if s != f.severity])
            return [
                LatentFinding(g.kind, g.location, new_sev, False, g.temporal) if g is f else g
                for g in fs
            ]
        if category == "Change Location":
            f = pick(loc_editable)
            return [
                LatentFinding(g.kind, _swap_side(g.location), g.severity, False, g.temporal)
                if g is f
                else g
                for g in fs
            ]
        if category == "False Prediction":
            combos = [c for c in _free_kind_locations(study) if c not in used_insertions]
            kind, loc = combos[int(rng.integers(len(combos)))]
            used_insertions.add((kind, loc))
            sev = pick(list(SEVERITIES))
            return fs + [LatentFinding(kind, loc, sev, False, "none")]
        if category == "False Negation":
            f = pick(positives)
            return [
                LatentFinding(g.kind, g.location, "mild", True, "none") if g is f else g
                for g in fs
            ]
        if category == "Change Measurement":
            f = pick(nodules)
            new_sev = pick([s for s in SEVERITIES if s != f.severity])
            return [
                LatentFinding(g.kind, g.location, new_sev, False, g.temporal) if g is f else g
                for g in fs
            ]
        if category == "Add Opposite Sentence":
            if positives:
                f = pick(positives)
                return fs + [LatentFinding(f.kind, f.location, "mild", True, "none")]
            combos = _free_kind_locations(study)
            kind, loc = combos[int(rng.integers(len(combos)))]
            return fs + [LatentFinding(kind, loc, pick(list(SEVERITIES)), False, "none")]
        if category == "Add Medical Device":
            locs = [
                loc
                for loc in ZONE_LOCATIONS
                if ("support_device", loc) not in {(f.kind, f.location) for f in study.findings}
            ]
            return fs + [LatentFinding("support_device", pick(locs), "mild", False, "none")]
        if category == "Change Position of Device":
            f = pick(devices)
            return [
                LatentFinding(g.kind, _swap_side(g.location), g.severity, False, g.temporal)
                if g is f
                else g
                for g in fs
            ]
        raise ValueError(f"unknown error category {category!r}")

    out = []
    for category in chosen:
        for _ in range(20):
            text = render_impression(edit(category), keep_negated=True)
            if extract_labels(text).label_set != truth_labels:
                break
        else:  # pragma: no cover - construction guarantees distinctness
            raise RuntimeError(f"could not build a label-distinct {category} error")
        out.append((category, text))
    return out
