from enum import Enum
from typing import Dict, FrozenSet, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_serializer, field_validator


class Modality(str, Enum):
    CT = "CT"
    MR = "MR"


class Anatomy(str, Enum):
    HEAD = "head"
    CHEST = "chest"
    ABDOMEN = "abdomen"
    SPINE = "spine"
    NECK = "neck"
    SINUS = "sinus"
    PELVIS = "pelvis"


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class Domain(str, Enum):
    """
    Grammar family for synthetic text.
    """
    GENERAL = "general"
    CLINICAL = "clinical"


Stratum = Tuple[Modality, Anatomy]


def stratum_label(stratum: Stratum) -> str:
    modality, anatomy = stratum
    return f"{modality.value} {anatomy.value}"


class Report(BaseModel):
    """
    One radiology-style record: findings (input) and impression (label).
    """
    model_config = ConfigDict(frozen=True)

    id: str = Field(..., min_length=1)
    findings: str
    impression: str
    modality: Modality
    anatomy: Anatomy
    split: Optional[Split] = None

    @field_validator("findings", "impression")
    @classmethod
    def validate_text(cls, v: str) -> str:
        if not v or not v.strip():
            raise ValueError("must be non-empty")
        return v

    @property
    def stratum(self) -> Stratum:
        return (self.modality, self.anatomy)


class OodSelector(BaseModel):
    """
    Train/test stratum selection for the out-of-distribution protocol.

    A selector of `None` means ALL strata.
    """
    model_config = ConfigDict(frozen=True)

    name: str
    train: Optional[FrozenSet[Stratum]] = None
    test: Optional[FrozenSet[Stratum]] = None

    @field_validator("train", "test")
    @classmethod
    def validate_selector(cls, v):
        if v is not None and not v:
            raise ValueError("selector must be ALL or a non-empty set of strata")
        return v

    @field_serializer("train", "test")
    def serialize_selector(self, v):
        if v is None:
            return "ALL"
        return sorted(stratum_label(s) for s in v)

    def matches_train(self, report: Report) -> bool:
        return self.train is None or report.stratum in self.train

    def matches_test(self, report: Report) -> bool:
        return self.test is None or report.stratum in self.test


CT_HEAD = frozenset({(Modality.CT, Anatomy.HEAD)})
MR_HEAD = frozenset({(Modality.MR, Anatomy.HEAD)})
CT_OTHER = frozenset(
    (Modality.CT, a) for a in (Anatomy.ABDOMEN, Anatomy.CHEST, Anatomy.SPINE, Anatomy.NECK, Anatomy.SINUS)
)
MR_OTHER = frozenset(
    (Modality.MR, a) for a in (Anatomy.SPINE, Anatomy.ABDOMEN, Anatomy.PELVIS, Anatomy.NECK)
)

# Row order and labels of the out-of-distribution table
OOD_PRESETS = (
    OodSelector(name="CT head -> CT head", train=CT_HEAD, test=CT_HEAD),
    OodSelector(name="CT head -> MR head", train=CT_HEAD, test=MR_HEAD),
    OodSelector(name="CT head -> CT other", train=CT_HEAD, test=CT_OTHER),
    OodSelector(name="CT head -> MR other", train=CT_HEAD, test=MR_OTHER),
    OodSelector(name="All -> CT head", train=None, test=CT_HEAD),
)

# Report counts per stratum: (train, val, test)
STRATUM_COUNTS: Dict[Stratum, Tuple[int, int, int]] = {
    (Modality.CT, Anatomy.HEAD): (25122, 3140, 3141),
    (Modality.CT, Anatomy.ABDOMEN): (12792, 1599, 1599),
    (Modality.CT, Anatomy.CHEST): (10229, 1278, 1280),
    (Modality.MR, Anatomy.HEAD): (5851, 731, 732),
    (Modality.CT, Anatomy.SPINE): (4414, 551, 553),
    (Modality.CT, Anatomy.NECK): (912, 114, 115),
    (Modality.MR, Anatomy.SPINE): (0, 0, 2822),
    (Modality.CT, Anatomy.SINUS): (0, 0, 1268),
    (Modality.MR, Anatomy.ABDOMEN): (0, 0, 1062),
    (Modality.MR, Anatomy.PELVIS): (0, 0, 254),
    (Modality.MR, Anatomy.NECK): (0, 0, 231),
}


def stratum_proportions(columns: str = "train") -> Dict[Stratum, float]:
    """
    Stratum proportions from the report-count table.

    `columns="train"` uses the training column (six strata); `columns="all"` uses
    row totals so the test-only strata are present too.
    """
    if columns == "train":
        weights = {s: c[0] for s, c in STRATUM_COUNTS.items() if c[0] > 0}
    elif columns == "all":
        weights = {s: sum(c) for s, c in STRATUM_COUNTS.items()}
    else:
        raise ValueError(f"unknown proportion columns '{columns}'")
    total = float(sum(weights.values()))
    return {s: w / total for s, w in weights.items()}


class GrammarConfig(BaseModel):
    """
    Knobs of the synthetic report grammar.
    """
    model_config = ConfigDict(frozen=True)

    version: str = "1"
    proportions: str = Field("train", description="'train' or 'all' column set of the dataset table")
    min_clauses: int = Field(3, ge=1)
    max_clauses: int = Field(8, ge=1)
    min_impression_clauses: int = Field(1, ge=1)
    max_impression_clauses: int = Field(3, ge=1)
    negation_rate: float = Field(0.45, ge=0, le=1)
    measurement_rate: float = Field(0.5, ge=0, le=1)
    id_prefix: str = "r"
