from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator


class ModelConfig(BaseModel):
    """
    Encoder-decoder transformer shape.
    """
    model_config = ConfigDict(frozen=True)

    d_model: int = Field(64, gt=0, description="Width of the residual stream")
    n_heads: int = Field(4, gt=0, description="Attention heads per attention layer")
    n_encoder_blocks: int = Field(2, gt=0)
    n_decoder_blocks: int = Field(2, gt=0)
    d_ff: int = Field(128, gt=0, description="Hidden width of the feed-forward sublayer")
    vocab_size: int = Field(320, gt=0)
    max_source_len: int = Field(256, gt=0)
    max_target_len: int = Field(48, gt=0)
    layer_norm_eps: float = Field(1e-6, gt=0)
    init_seed: int = Field(0, description="Seed for the scaled-normal weight init")

    @model_validator(mode="after")
    def validate_heads(self) -> "ModelConfig":
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        return self

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


class DecodeConfig(BaseModel):
    """
    Decoding settings. Only greedy decoding is supported.
    """
    strategy: Literal["greedy"] = "greedy"
    max_target_len: int = Field(48, gt=0)
    eos_id: int = Field(1, ge=0)


# Desk-scale default used by the experiment runner
DESK_CONFIG = ModelConfig()

# Shapes used only for parameter accounting against the published table
T5_BASE_SHAPED = ModelConfig(
    d_model=768,
    n_heads=12,
    n_encoder_blocks=12,
    n_decoder_blocks=12,
    d_ff=3072,
    vocab_size=32128,
    max_source_len=512,
    max_target_len=512,
)

T5_LARGE_SHAPED = ModelConfig(
    d_model=1024,
    n_heads=16,
    n_encoder_blocks=24,
    n_decoder_blocks=24,
    d_ff=4096,
    vocab_size=32128,
    max_source_len=512,
    max_target_len=512,
)

# Published totals for the two shapes, used as the denominator of the tunable fraction
PUBLISHED_TOTALS = {
    "base": 223_000_000,
    "large": 738_000_000,
}
