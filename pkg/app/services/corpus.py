"""
Corpus files (one JSON report per line), stratified splits and the
out-of-distribution partition.
"""
import json
import logging
from collections import defaultdict
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from app.core.exceptions import CorpusError
from app.schemas.corpus import OodSelector, Report, Split, Stratum, stratum_label

logger = logging.getLogger(__name__)

DEFAULT_RATIOS = (0.8, 0.1, 0.1)


def load_corpus(path: Path) -> List[Report]:
    """
    Read and validate a JSONL corpus. Errors name the offending line and record id.
    """
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"corpus file {path} does not exist")
    reports: List[Report] = []
    seen: Dict[str, int] = {}
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"{path}:{line_no}: not valid JSON ({e.msg})") from e
            record_id = record.get("id", "?") if isinstance(record, dict) else "?"
            try:
                report = Report(**record)
            except (ValidationError, TypeError) as e:
                detail = e.errors()[0] if isinstance(e, ValidationError) else {"loc": (), "msg": str(e)}
                field_name = ".".join(str(p) for p in detail["loc"])
                raise CorpusError(
                    f"{path}:{line_no}: record '{record_id}' invalid field '{field_name}': {detail['msg']}"
                ) from e
            if report.id in seen:
                raise CorpusError(
                    f"{path}:{line_no}: duplicate id '{report.id}' (first seen on line {seen[report.id]})"
                )
            seen[report.id] = line_no
            reports.append(report)
    logger.info(f"Loaded {len(reports)} reports from {path}")
    return reports


def save_corpus(reports: Iterable[Report], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        for report in reports:
            handle.write(json.dumps(report.model_dump(mode="json"), sort_keys=True) + "\n")


def stratum_counts(reports: Iterable[Report]) -> Dict[str, int]:
    counts: Dict[str, int] = defaultdict(int)
    for report in reports:
        counts[stratum_label(report.stratum)] += 1
    return dict(sorted(counts.items()))


def _sort_key(stratum: Stratum) -> Tuple[str, str]:
    return (stratum[0].value, stratum[1].value)


def split(reports: Sequence[Report], seed: int, ratios: Sequence[float] = DEFAULT_RATIOS) -> List[Report]:
    """
    Assign train/val/test per (modality, anatomy) stratum.

    Each stratum is shuffled with a generator seeded from `seed` and cut by the
    rounded ratios. Strata too small for a three-way split go entirely to train.
    Returns copies of the reports with `split` set, in input order.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise CorpusError(f"ratios must be three non-negative numbers summing to 1, got {tuple(ratios)}")
    if ratios[0] <= 0:
        raise CorpusError(f"the train ratio must be positive, got {tuple(ratios)}")
    by_stratum: Dict[Stratum, List[int]] = defaultdict(list)
    for i, report in enumerate(reports):
        by_stratum[report.stratum].append(i)

    rng = np.random.default_rng(seed)
    assignment: Dict[int, Split] = {}
    three_way = sum(1 for r in ratios if r > 0) == 3
    for stratum in sorted(by_stratum, key=_sort_key):
        members = by_stratum[stratum]
        order = [members[j] for j in rng.permutation(len(members))]
        if three_way and len(members) < 3:
            logger.warning(
                f"Stratum {stratum_label(stratum)} has {len(members)} reports; assigning all to train"
            )
            assignment.update({i: Split.TRAIN for i in order})
            continue
        n_val = int(round(len(members) * ratios[1]))
        n_test = int(round(len(members) * ratios[2]))
        n_test = min(n_test, len(members) - n_val)
        n_train = len(members) - n_val - n_test
        for position, i in enumerate(order):
            if position < n_train:
                assignment[i] = Split.TRAIN
            elif position < n_train + n_val:
                assignment[i] = Split.VAL
            else:
                assignment[i] = Split.TEST
    return [r.model_copy(update={"split": assignment[i]}) for i, r in enumerate(reports)]


def by_split(reports: Iterable[Report], which: Split) -> List[Report]:
    return [r for r in reports if r.split == which]


class OodPartition(NamedTuple):
    train: List[Report]
    test: List[Report]


def ood_partition(reports: Sequence[Report], selector: OodSelector) -> OodPartition:
    """
    Train-split reports matching the train selector and test-split reports
    matching the test selector.
    """
    if any(r.split is None for r in reports):
        raise CorpusError("ood_partition needs split-tagged reports; run split first")
    train = [r for r in reports if r.split == Split.TRAIN and selector.matches_train(r)]
    test = [r for r in reports if r.split == Split.TEST and selector.matches_test(r)]
    if not train:
        raise CorpusError(f"selector '{selector.name}' selects no training reports")
    if not test:
        raise CorpusError(f"selector '{selector.name}' selects no test reports")
    return OodPartition(train=train, test=test)
