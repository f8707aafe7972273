import math
from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


class LrSchedule(BaseModel):
    """
    Linear warm-up from 0 to `peak_rate`, then linear decay to `final_rate` at `total_steps`.
    """
    model_config = ConfigDict(frozen=True)

    warmup_steps: int = Field(100, ge=0)
    peak_rate: float = Field(1e-2, gt=0)
    final_rate: float = Field(1e-3, gt=0)
    total_steps: int = Field(..., gt=0)

    @model_validator(mode="after")
    def validate_schedule(self) -> "LrSchedule":
        if self.final_rate > self.peak_rate:
            raise ValueError("final_rate must not exceed peak_rate")
        if self.warmup_steps >= self.total_steps:
            raise ValueError(
                f"warmup_steps ({self.warmup_steps}) must be below total_steps ({self.total_steps})"
            )
        return self


class TrainConfig(BaseModel):
    """
    Hyperparameters of one tuning run.

    The effective batch is `micro_batch_size * accumulation_steps`.
    """
    model_config = ConfigDict(frozen=True)

    max_epochs: int = Field(10, gt=0)
    patience: Optional[int] = Field(5, gt=0, description="Early-stop patience in epochs; None disables")
    micro_batch_size: int = Field(16, gt=0)
    accumulation_steps: int = Field(4, ge=1)
    warmup_steps: int = Field(100, ge=0)
    peak_lr: float = Field(1e-2, gt=0)
    final_lr: float = Field(1e-3, gt=0)
    seed: int = 0

    @model_validator(mode="after")
    def validate_patience(self) -> "TrainConfig":
        if self.patience is not None and self.patience >= self.max_epochs:
            raise ValueError("patience must be smaller than max_epochs")
        if self.final_lr > self.peak_lr:
            raise ValueError("final_lr must not exceed peak_lr")
        return self

    def steps_per_epoch(self, n_examples: int) -> int:
        micro_batches = math.ceil(n_examples / self.micro_batch_size)
        return math.ceil(micro_batches / self.accumulation_steps)

    def schedule_for(self, n_examples: int) -> LrSchedule:
        """
        Build the schedule for a run over `n_examples` training examples.

        The warm-up is shortened when the whole run has fewer optimizer steps than it.
        """
        total = max(1, self.steps_per_epoch(n_examples) * self.max_epochs)
        warmup = min(self.warmup_steps, total - 1)
        return LrSchedule(
            warmup_steps=warmup,
            peak_rate=self.peak_lr,
            final_rate=self.final_lr,
            total_steps=total,
        )


# Tuning regimes per adaptation kind
PREFIX_REGIME = TrainConfig(
    max_epochs=10,
    patience=5,
    micro_batch_size=16,
    accumulation_steps=4,
    warmup_steps=100,
    peak_lr=1e-2,
    final_lr=1e-3,
)

LORA_REGIME = TrainConfig(
    max_epochs=5,
    patience=None,
    micro_batch_size=6,
    accumulation_steps=4,
    warmup_steps=100,
    peak_lr=1e-3,
    final_lr=1e-4,
)

FULL_REGIME = TrainConfig(
    max_epochs=5,
    patience=None,
    micro_batch_size=6,
    accumulation_steps=4,
    warmup_steps=100,
    peak_lr=1e-3,
    final_lr=1e-4,
)

PRETRAIN_REGIME = TrainConfig(
    max_epochs=8,
    patience=None,
    micro_batch_size=16,
    accumulation_steps=1,
    warmup_steps=100,
    peak_lr=3e-3,
    final_lr=3e-4,
)


class SpanCorruptionConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    noise_density: float = Field(0.15, gt=0, lt=1)
    mean_span_length: float = Field(3.0, gt=0)
    pack: bool = Field(
        False,
        description="Also corrupt runs of consecutive texts packed up to the source length, so every position is trained",
    )


class RunHistory(BaseModel):
    """
    Per-epoch record of a training run.
    """
    train_loss: List[float] = Field(default_factory=list)
    val_loss: List[float] = Field(default_factory=list)
    lr_log: List[float] = Field(default_factory=list, description="Learning rate of every optimizer step")
    epoch_seconds: List[float] = Field(default_factory=list)
    best_epoch: Optional[int] = None
    stopped_early: bool = False

    @property
    def epochs_completed(self) -> int:
        return len(self.train_loss)
