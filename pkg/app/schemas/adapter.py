from enum import Enum
from typing import FrozenSet, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_serializer, field_validator


class AdapterKind(str, Enum):
    """
    Tuning methods that change parameters.
    """
    PREFIX = "prefix_tuning"
    LORA = "lora"
    FULL = "full_finetune"


class Projection(str, Enum):
    QUERY = "q"
    KEY = "k"
    VALUE = "v"
    OUTPUT = "o"


class AttentionClass(str, Enum):
    """
    Attention-layer classes that can receive prefix key/values.
    """
    ENCODER_SELF = "encoder_self"
    DECODER_SELF = "decoder_self"
    DECODER_CROSS = "decoder_cross"


class LoraConfig(BaseModel):
    """
    Low-rank adapter settings.

    The effective weight is W + (alpha / rank) * B @ A with B zero-initialized.
    """
    model_config = ConfigDict(frozen=True)

    kind: AdapterKind = AdapterKind.LORA
    rank: int = Field(8, gt=0)
    alpha: float = Field(16.0, gt=0)
    targets: FrozenSet[Projection] = frozenset({Projection.QUERY, Projection.VALUE})
    init_std: float = Field(0.02, gt=0, description="Std of the random A factor")
    seed: int = 0

    @field_validator("targets")
    @classmethod
    def validate_targets(cls, v):
        if not v:
            raise ValueError("LoRA needs at least one target projection")
        return v

    @field_serializer("targets")
    def serialize_targets(self, v):
        return sorted(p.value for p in v)

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


class PrefixConfig(BaseModel):
    """
    Prefix-tuning settings: L trainable key and value vectors per placed attention layer.
    """
    model_config = ConfigDict(frozen=True)

    kind: AdapterKind = AdapterKind.PREFIX
    length: int = Field(10, gt=0)
    placement: FrozenSet[AttentionClass] = frozenset(
        {AttentionClass.ENCODER_SELF, AttentionClass.DECODER_SELF}
    )
    init_std: float = Field(0.02, gt=0)
    seed: int = 0

    @field_validator("placement")
    @classmethod
    def validate_placement(cls, v):
        if not v:
            raise ValueError("prefix placement must name at least one attention class")
        return v

    @field_serializer("placement")
    def serialize_placement(self, v):
        return sorted(p.value for p in v)


AdapterConfig = Union[LoraConfig, PrefixConfig]


def adapter_config_from_dict(data: Optional[dict]) -> Optional[AdapterConfig]:
    """
    Rebuild an adapter config from its JSON form (as stored in checkpoints).
    """
    if not data:
        return None
    kind = AdapterKind(data["kind"])
    if kind == AdapterKind.LORA:
        return LoraConfig(**data)
    if kind == AdapterKind.PREFIX:
        return PrefixConfig(**data)
    raise ValueError(f"no adapter config for kind {kind.value}")
