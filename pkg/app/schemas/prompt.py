from enum import Enum

from pydantic import BaseModel, ConfigDict, Field, model_validator

DEFAULT_INSTRUCTION = "summarize the following radiology report:"
FEW_SHOT_GRID = (1, 2, 4)


class PromptMode(str, Enum):
    NULL = "null"
    INSTRUCTION = "instruction"
    FEW_SHOT = "few_shot"


class PromptSpec(BaseModel):
    """
    Discrete prompting strategy for a frozen model.
    """
    model_config = ConfigDict(frozen=True)

    mode: PromptMode = PromptMode.NULL
    k: int = Field(0, ge=0, description="Number of in-context examples (few_shot only)")
    instruction: str = Field(DEFAULT_INSTRUCTION, description="Instruction line for instruction mode")

    @model_validator(mode="after")
    def validate_mode(self) -> "PromptSpec":
        if self.mode == PromptMode.FEW_SHOT and self.k not in FEW_SHOT_GRID:
            raise ValueError(f"few_shot prompting needs k in {FEW_SHOT_GRID}, got {self.k}")
        if self.mode != PromptMode.FEW_SHOT and self.k != 0:
            raise ValueError("k must be 0 unless mode is few_shot")
        if self.mode == PromptMode.INSTRUCTION and not self.instruction.strip():
            raise ValueError("instruction text must be non-empty")
        return self

    @property
    def label(self) -> str:
        if self.mode == PromptMode.FEW_SHOT:
            return f"few_shot_{self.k}"
        return self.mode.value
