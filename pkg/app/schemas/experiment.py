from typing import List, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.schemas.adapter import AdapterKind, LoraConfig, PrefixConfig
from app.schemas.corpus import OOD_PRESETS, Domain, GrammarConfig
from app.schemas.model import DESK_CONFIG, ModelConfig
from app.schemas.prompt import DEFAULT_INSTRUCTION, FEW_SHOT_GRID, PromptMode, PromptSpec
from app.schemas.training import (
    FULL_REGIME,
    LORA_REGIME,
    PREFIX_REGIME,
    PRETRAIN_REGIME,
    SpanCorruptionConfig,
    TrainConfig,
)

PROMPT_METHODS = ("null", "instruction") + tuple(f"few_shot_{k}" for k in FEW_SHOT_GRID)
ADAPTER_METHODS = tuple(k.value for k in AdapterKind)


class _Section(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class CorpusSection(_Section):
    """
    Task corpus and the two pretraining corpora.

    `path` points to an external JSONL corpus; otherwise the clinical grammar
    generates `n_task` reports.
    """
    path: Optional[str] = None
    grammar: GrammarConfig = GrammarConfig(proportions="all")
    n_task: int = Field(600, gt=0)
    n_pretrain: int = Field(600, gt=0)
    ratios: Tuple[float, float, float] = (0.8, 0.1, 0.1)

    @field_validator("ratios")
    @classmethod
    def validate_ratios(cls, v):
        if any(r < 0 for r in v) or abs(sum(v) - 1.0) > 1e-9 or v[0] <= 0:
            raise ValueError(f"split ratios must be non-negative, sum to 1 and give train a share, got {v}")
        return v


class TokenizerSection(_Section):
    vocab_size: int = Field(320, gt=0)
    n_sentinels: int = Field(8, ge=1)


class PretrainSection(_Section):
    domains: List[Domain] = [Domain.GENERAL, Domain.CLINICAL]
    train: TrainConfig = PRETRAIN_REGIME
    span: SpanCorruptionConfig = SpanCorruptionConfig(pack=True)

    @field_validator("domains")
    @classmethod
    def validate_domains(cls, v):
        if not v or len(set(v)) != len(v):
            raise ValueError("pretraining domains must be non-empty and distinct")
        return v


class AdaptSection(_Section):
    lora: LoraConfig = LoraConfig()
    prefix: PrefixConfig = PrefixConfig()
    lora_train: TrainConfig = LORA_REGIME
    prefix_train: TrainConfig = PREFIX_REGIME
    full_train: TrainConfig = FULL_REGIME

    def regime(self, kind: AdapterKind) -> TrainConfig:
        return {
            AdapterKind.LORA: self.lora_train,
            AdapterKind.PREFIX: self.prefix_train,
            AdapterKind.FULL: self.full_train,
        }[kind]


class PromptingSection(_Section):
    instruction: str = DEFAULT_INSTRUCTION
    embedder: str = Field("encoder", description="'encoder' (mean-pooled base encoder) or 'bow'")

    @field_validator("embedder")
    @classmethod
    def validate_embedder(cls, v: str) -> str:
        if v not in ("encoder", "bow"):
            raise ValueError("embedder must be 'encoder' or 'bow'")
        return v


class GenerateSection(_Section):
    max_target_len: int = Field(48, gt=0)
    batch_size: int = Field(16, gt=0)
    max_test: Optional[int] = Field(None, gt=0, description="Cap on test reports per system")


class EvalSection(_Section):
    lexicon_path: Optional[str] = None
    lexicon_top_n: int = Field(50, gt=0)


class OodSection(_Section):
    presets: List[str] = [p.name for p in OOD_PRESETS]
    base: Domain = Domain.CLINICAL
    method: AdapterKind = AdapterKind.PREFIX

    @field_validator("presets")
    @classmethod
    def validate_presets(cls, v):
        known = {p.name for p in OOD_PRESETS}
        unknown = [name for name in v if name not in known]
        if unknown or not v:
            raise ValueError(f"unknown OOD presets {unknown}; choose from {sorted(known)}")
        return v


class ShotsSection(_Section):
    ks: List[int] = [0, 1, 2, 4]
    bases: List[Domain] = [Domain.GENERAL, Domain.CLINICAL]

    @field_validator("ks")
    @classmethod
    def validate_ks(cls, v):
        bad = [k for k in v if k != 0 and k not in FEW_SHOT_GRID]
        if bad or not v:
            raise ValueError(f"shot counts must be 0 or one of {FEW_SHOT_GRID}, got {v}")
        return v


class ParamsSection(_Section):
    shapes: List[str] = ["desk", "base", "large"]

    @field_validator("shapes")
    @classmethod
    def validate_shapes(cls, v):
        bad = [s for s in v if s not in ("desk", "base", "large")]
        if bad or not v:
            raise ValueError(f"unknown shapes {bad}; choose from desk, base, large")
        return v


class SweepSection(_Section):
    """
    Seeds for the multi-seed trend check and how many must agree.
    """
    seeds: List[int] = [0, 1, 2, 3, 4]
    required: int = Field(4, gt=0, description="Seeds on which a trend must hold")

    @model_validator(mode="after")
    def validate_seeds(self) -> "SweepSection":
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ValueError("sweep seeds must be non-empty and distinct")
        if self.required > len(self.seeds):
            raise ValueError(f"sweep.required ({self.required}) exceeds the {len(self.seeds)} seeds")
        return self


Method = Union[PromptSpec, AdapterKind]


def parse_method(name: str, instruction: str = DEFAULT_INSTRUCTION) -> Method:
    """
    `null`, `instruction`, `few_shot_<k>`, `prefix_tuning`, `lora` or `full_finetune`.
    """
    if name not in PROMPT_METHODS + ADAPTER_METHODS:
        raise ValueError(f"unknown method '{name}'; choose from {PROMPT_METHODS + ADAPTER_METHODS}")
    if name in ADAPTER_METHODS:
        return AdapterKind(name)
    if name == "null":
        return PromptSpec(mode=PromptMode.NULL)
    if name == "instruction":
        return PromptSpec(mode=PromptMode.INSTRUCTION, instruction=instruction)
    return PromptSpec(mode=PromptMode.FEW_SHOT, k=int(name[len("few_shot_"):]))


class ExperimentPlan(_Section):
    """
    One experiment: every section of the YAML file plus seed and output directory.
    """
    seed: int = 0
    output_dir: str = "runs"
    methods: List[str] = ["null", "instruction", "few_shot_4", "prefix_tuning", "lora"]
    corpus: CorpusSection = CorpusSection()
    tokenizer: TokenizerSection = TokenizerSection()
    model: ModelConfig = DESK_CONFIG
    pretrain: PretrainSection = PretrainSection()
    adapt: AdaptSection = AdaptSection()
    prompting: PromptingSection = PromptingSection()
    generate: GenerateSection = GenerateSection()
    eval: EvalSection = EvalSection()
    ood: OodSection = OodSection()
    shots: ShotsSection = ShotsSection()
    params: ParamsSection = ParamsSection()
    sweep: SweepSection = SweepSection()

    @field_validator("methods")
    @classmethod
    def validate_methods(cls, v):
        if not v:
            raise ValueError("method list must be non-empty")
        if len(set(v)) != len(v):
            raise ValueError("methods must be distinct")
        for name in v:
            parse_method(name)
        return v

    @model_validator(mode="after")
    def validate_plan(self) -> "ExperimentPlan":
        if self.model.vocab_size != self.tokenizer.vocab_size:
            raise ValueError(
                f"model.vocab_size ({self.model.vocab_size}) must equal tokenizer.vocab_size "
                f"({self.tokenizer.vocab_size})"
            )
        if self.generate.max_target_len > self.model.max_target_len:
            raise ValueError("generate.max_target_len exceeds model.max_target_len")
        if self.ood.base not in self.pretrain.domains:
            raise ValueError(f"ood.base '{self.ood.base.value}' is not a pretraining domain")
        missing = [b.value for b in self.shots.bases if b not in self.pretrain.domains]
        if missing:
            raise ValueError(f"shots.bases {missing} are not pretraining domains")
        return self

    def parsed_methods(self) -> List[Tuple[str, Method]]:
        return [(name, parse_method(name, self.prompting.instruction)) for name in self.methods]

    def adapter_methods(self) -> List[AdapterKind]:
        return [m for _, m in self.parsed_methods() if isinstance(m, AdapterKind)]
