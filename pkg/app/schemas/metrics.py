from typing import Dict, List, Literal

from pydantic import BaseModel, Field, field_validator

METRIC_NAMES = ("bleu", "rouge_l", "embed_sim_f1", "entity_f1")


class ExampleScores(BaseModel):
    """
    All metrics for one reference/hypothesis pair, on a 0-100 scale.
    """
    id: str
    modality: str
    anatomy: str
    bleu: float = Field(..., ge=0, le=100)
    rouge_l: float = Field(..., ge=0, le=100)
    embed_sim_f1: float = Field(..., ge=0, le=100)
    entity_f1: float = Field(..., ge=0, le=100)

    @property
    def stratum(self) -> str:
        return f"{self.modality} {self.anatomy}"


class StratumScores(BaseModel):
    count: int
    means: Dict[str, float]


class ScoreReport(BaseModel):
    """
    Per-example and aggregated scores of one evaluated system.
    """
    examples: List[ExampleScores]
    corpus_means: Dict[str, float]
    stratified: Dict[str, StratumScores]
    metadata: Dict[str, object] = Field(default_factory=dict)


class ReaderResponse(BaseModel):
    """
    One reader's answer to one question about one generated impression.
    """
    reader_id: str
    example_id: str
    question: Literal[1, 2, 3]
    score: int

    @field_validator("score")
    @classmethod
    def validate_score(cls, v: int) -> int:
        if v not in (0, 5, 10):
            raise ValueError("score must be 0 (no), 5 (somewhat) or 10 (yes)")
        return v
