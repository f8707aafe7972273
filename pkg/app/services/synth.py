"""
Deterministic template grammars for synthetic corpora.

The clinical grammar writes findings as observation clauses conditioned on the
report's modality and anatomy, and derives the impression from the positive
findings by rule, so every impression entity also occurs in its findings. The
general grammar writes unrelated declarative sentence pairs.
"""
import logging
from typing import Dict, List, Sequence, Tuple

import numpy as np

from app.core.exceptions import CorpusError
from app.schemas.corpus import (
    Anatomy,
    Domain,
    GrammarConfig,
    Modality,
    Report,
    Stratum,
    stratum_label,
    stratum_proportions,
)

logger = logging.getLogger(__name__)

ENTITIES: Dict[Anatomy, Tuple[str, ...]] = {
    Anatomy.HEAD: ("hemorrhage", "infarct", "edema", "hydrocephalus", "contusion", "white matter disease"),
    Anatomy.CHEST: ("pneumothorax", "effusion", "consolidation", "nodule", "atelectasis", "emphysema"),
    Anatomy.ABDOMEN: ("cyst", "hematoma", "ascites", "lesion", "steatosis", "calculus"),
    Anatomy.SPINE: ("fracture", "stenosis", "disc herniation", "spondylosis", "listhesis", "cord compression"),
    Anatomy.NECK: ("lymphadenopathy", "goiter", "abscess", "tumor", "airway narrowing"),
    Anatomy.SINUS: ("mucosal thickening", "air fluid level", "polyp", "opacification", "sinusitis"),
    Anatomy.PELVIS: ("fibroid", "free fluid", "diverticulosis", "lymphocele", "varices"),
}

SITES: Dict[Anatomy, Tuple[str, ...]] = {
    Anatomy.HEAD: ("frontal lobe", "parietal lobe", "temporal lobe", "occipital lobe", "cerebellum", "basal ganglia"),
    Anatomy.CHEST: ("upper lobe", "lower lobe", "hilum", "pleural space", "lung base"),
    Anatomy.ABDOMEN: ("liver", "spleen", "pancreas", "kidney", "adrenal gland"),
    Anatomy.SPINE: ("cervical spine", "thoracic spine", "lumbar spine", "sacrum"),
    Anatomy.NECK: ("thyroid", "parotid gland", "submandibular gland", "larynx"),
    Anatomy.SINUS: ("maxillary sinus", "frontal sinus", "ethmoid air cells", "sphenoid sinus"),
    Anatomy.PELVIS: ("bladder", "uterus", "adnexa", "rectum"),
}

SIDES = ("left", "right", "bilateral")

DESCRIPTORS: Dict[Modality, Tuple[str, ...]] = {
    Modality.CT: ("hyperdense", "hypodense", "acute", "chronic", "small"),
    Modality.MR: ("hyperintense", "hypointense", "acute", "chronic", "small"),
}

POSITIVE_TEMPLATES = (
    "there is a {adj} {entity} in the {site}{measure}.",
    "{adj} {entity} is noted in the {site}{measure}.",
    "a {adj} {entity} involves the {site}{measure}.",
)

NEGATIVE_TEMPLATES = (
    "no acute {entity} is seen.",
    "there is no evidence of acute {entity}.",
)

NORMAL_TEMPLATES = (
    "the {site} is unremarkable.",
    "the {site} appears normal.",
)

IMPRESSION_TEMPLATES = (
    "{adj} {entity} in the {site}{measure}.",
    "{site} {entity}{measure}.",
)

NO_ACUTE_IMPRESSION = "no acute findings."

GENERAL_SUBJECTS = (
    "the committee", "a small bakery", "the river", "our neighbor", "the orchestra", "a new library",
    "the old train", "my cousin", "the village council", "a quiet garden", "the museum", "the football team",
)
GENERAL_VERBS = (
    "opened", "painted", "visited", "repaired", "celebrated", "described", "watched", "planned",
    "discussed", "carried", "announced", "welcomed",
)
GENERAL_OBJECTS = (
    "the harbor", "a wooden bridge", "the summer festival", "a long letter", "the market square",
    "an early concert", "the city park", "a blue bicycle", "the spring fair", "the mountain road",
)
GENERAL_TIMES = (
    "on monday", "last winter", "after lunch", "in the evening", "before sunrise", "during the storm",
    "every weekend", "at noon",
)


def apportion(n: int, proportions: Dict[Stratum, float]) -> Dict[Stratum, int]:
    """
    Largest-remainder apportionment of `n` reports across strata.

    Remainder ties go to the stratum earlier in (modality, anatomy) order.
    """
    strata = sorted(proportions, key=lambda s: (s[0].value, s[1].value))
    quotas = {s: n * proportions[s] for s in strata}
    counts = {s: int(np.floor(quotas[s])) for s in strata}
    leftover = n - sum(counts.values())
    by_remainder = sorted(strata, key=lambda s: -(quotas[s] - counts[s]))
    for s in by_remainder[:leftover]:
        counts[s] += 1
    return counts


def _pick(rng: np.random.Generator, options: Sequence[str]) -> str:
    return options[int(rng.integers(len(options)))]


def _measure(rng: np.random.Generator, config: GrammarConfig) -> str:
    if rng.random() >= config.measurement_rate:
        return ""
    if rng.random() < 0.5:
        return f" measuring {int(rng.integers(3, 41))} mm"
    return f" measuring {int(rng.integers(1, 10))}.{int(rng.integers(0, 10))} cm"


def _located(rng: np.random.Generator, anatomy: Anatomy) -> str:
    site = _pick(rng, SITES[anatomy])
    return f"{_pick(rng, SIDES)} {site}"


def clinical_report(report_id: str, stratum: Stratum, rng: np.random.Generator, config: GrammarConfig) -> Report:
    """
    One clinical-like report for `stratum`.
    """
    modality, anatomy = stratum
    entities = ENTITIES[anatomy]
    n_clauses = int(rng.integers(config.min_clauses, config.max_clauses + 1))
    order = rng.permutation(len(entities))
    next_entity = 0

    clauses: List[str] = []
    positives: List[Dict[str, str]] = []
    for _ in range(n_clauses):
        draw = rng.random()
        if next_entity < len(entities) and draw < config.negation_rate:
            entity = entities[order[next_entity]]
            next_entity += 1
            clauses.append(_pick(rng, NEGATIVE_TEMPLATES).format(entity=entity))
        elif next_entity < len(entities) and draw < config.negation_rate + (1 - config.negation_rate) * 0.6:
            slots = {
                "entity": entities[order[next_entity]],
                "adj": _pick(rng, DESCRIPTORS[modality]),
                "site": _located(rng, anatomy),
                "measure": _measure(rng, config),
            }
            next_entity += 1
            positives.append(slots)
            clauses.append(_pick(rng, POSITIVE_TEMPLATES).format(**slots))
        else:
            clauses.append(_pick(rng, NORMAL_TEMPLATES).format(site=_pick(rng, SITES[anatomy])))

    if positives:
        n_impression = int(rng.integers(config.min_impression_clauses, config.max_impression_clauses + 1))
        impression = " ".join(
            _pick(rng, IMPRESSION_TEMPLATES).format(**slots) for slots in positives[:n_impression]
        )
    else:
        if next_entity == 0:
            # the impression's "acute" must occur in the findings too
            clauses.append(_pick(rng, NEGATIVE_TEMPLATES).format(entity=entities[order[0]]))
        impression = NO_ACUTE_IMPRESSION
    return Report(
        id=report_id,
        findings=" ".join(clauses),
        impression=impression,
        modality=modality,
        anatomy=anatomy,
    )


def _general_sentence(rng: np.random.Generator) -> str:
    return (
        f"{_pick(rng, GENERAL_SUBJECTS)} {_pick(rng, GENERAL_VERBS)} "
        f"{_pick(rng, GENERAL_OBJECTS)} {_pick(rng, GENERAL_TIMES)}."
    )


def general_report(report_id: str, stratum: Stratum, rng: np.random.Generator, config: GrammarConfig) -> Report:
    modality, anatomy = stratum
    n_findings = int(rng.integers(config.min_clauses, config.max_clauses + 1))
    n_impression = int(rng.integers(config.min_impression_clauses, config.max_impression_clauses + 1))
    return Report(
        id=report_id,
        findings=" ".join(_general_sentence(rng) for _ in range(n_findings)),
        impression=" ".join(_general_sentence(rng) for _ in range(n_impression)),
        modality=modality,
        anatomy=anatomy,
    )


def synth_corpus(config: GrammarConfig, domain: Domain, n: int, seed: int) -> List[Report]:
    """
    `n` reports apportioned across the configured stratum proportions, shuffled
    with `seed`. Identical arguments give identical reports.
    """
    if n <= 0:
        raise CorpusError(f"n must be positive, got {n}")
    counts = apportion(n, stratum_proportions(config.proportions))
    strata = [s for s, c in counts.items() for _ in range(c)]
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(strata))
    make = clinical_report if domain == Domain.CLINICAL else general_report
    prefix = config.id_prefix if domain == Domain.CLINICAL else f"{config.id_prefix}g"
    reports = [make(f"{prefix}{i:06d}", strata[j], rng, config) for i, j in enumerate(order)]
    logger.info(f"Generated {len(reports)} {domain.value} reports over {len(counts)} strata")
    return reports


def corpus_manifest(reports: Sequence[Report], config: GrammarConfig, domain: Domain, seed: int) -> Dict[str, object]:
    counts: Dict[str, int] = {}
    for report in reports:
        label = stratum_label(report.stratum)
        counts[label] = counts.get(label, 0) + 1
    return {
        "domain": domain.value,
        "seed": seed,
        "grammar_version": config.version,
        "grammar": config.model_dump(mode="json"),
        "n_reports": len(reports),
        "stratum_counts": dict(sorted(counts.items())),
    }


def grammar_lexicon() -> List[str]:
    """All entity phrases the clinical grammar can emit."""
    return sorted({e for entities in ENTITIES.values() for e in entities})
