"""
Parameter-efficient adaptation: LoRA factor injection, key/value prefixes,
merging, and closed-form tunable-parameter accounting.
"""
import logging
from typing import List, Optional

import numpy as np

from app.core.exceptions import AdapterError
from app.models.parameters import ParameterCounts, Parameters, is_adapter_tensor
from app.schemas.adapter import AdapterConfig, AdapterKind, AttentionClass, LoraConfig, PrefixConfig
from app.schemas.model import ModelConfig
from app.services.transformer import attention_paths, count_parameters

logger = logging.getLogger(__name__)


def lora_targets(config: ModelConfig, lora: LoraConfig) -> List[str]:
    """
    Weight paths receiving LoRA factors: the targeted projections of every attention layer.
    """
    targets = sorted(p.value for p in lora.targets)
    return [f"{attn.path}.{p}" for attn in attention_paths(config) for p in targets]


def prefix_layers(config: ModelConfig, prefix: PrefixConfig) -> List[str]:
    return [attn.path for attn in attention_paths(config) if attn.kind in prefix.placement]


def lora_parameter_count(config: ModelConfig, lora: LoraConfig) -> int:
    # every attention projection is d_model x d_model
    return len(lora_targets(config, lora)) * lora.rank * (config.d_model + config.d_model)


def prefix_parameter_count(config: ModelConfig, prefix: PrefixConfig) -> int:
    return len(prefix_layers(config, prefix)) * 2 * prefix.length * config.d_model


def adapter_parameter_count(config: ModelConfig, adapter: AdapterConfig) -> int:
    if isinstance(adapter, LoraConfig):
        return lora_parameter_count(config, adapter)
    return prefix_parameter_count(config, adapter)


def adapter_counts(config: ModelConfig, adapter: Optional[AdapterConfig]) -> ParameterCounts:
    """
    {total, trainable} for a base config under an adapter; None means full fine-tuning.
    """
    trainable = None if adapter is None else adapter_parameter_count(config, adapter)
    return count_parameters(config, trainable)


def tunable_fraction(counts: ParameterCounts) -> float:
    """
    Percentage of parameters that are trainable.
    """
    if counts.total <= 0:
        raise AdapterError("total parameter count must be positive")
    return 100.0 * counts.trainable / counts.total


def _check_no_adapter(params: Parameters) -> None:
    if params.adapter is not None or any(is_adapter_tensor(k) for k in params.tensors):
        raise AdapterError("parameters already carry an adapter; multi-adapter composition is not supported")


def attach_lora(config: ModelConfig, lora: LoraConfig, params: Parameters) -> Parameters:
    """
    Freeze the base model and add B (out x r, zeros) and A (r x in, random) factors
    next to each targeted projection. Mutates and returns `params`.
    """
    _check_no_adapter(params)
    targets = lora_targets(config, lora)
    for path in targets:
        if path not in params.tensors:
            raise AdapterError(f"target projection '{path}' does not exist in the architecture")
        if lora.rank > min(params.tensors[path].shape):
            raise AdapterError(f"rank {lora.rank} exceeds min dimension of '{path}' {params.tensors[path].shape}")
    # nothing is touched until every target passed
    rng = np.random.default_rng(lora.seed)
    params.freeze_all()
    for path in targets:
        out_dim, in_dim = params.tensors[path].shape
        params.add(f"{path}.lora_a", rng.normal(0.0, lora.init_std, size=(lora.rank, in_dim)), trainable=True)
        params.add(f"{path}.lora_b", np.zeros((out_dim, lora.rank)), trainable=True)
    params.adapter = lora
    logger.info(
        f"Attached LoRA r={lora.rank} to {len(targets)} projections "
        f"({lora_parameter_count(config, lora)} trainable parameters)"
    )
    return params


def attach_prefix(config: ModelConfig, prefix: PrefixConfig, params: Parameters) -> Parameters:
    """
    Freeze the base model and add L trainable key and value vectors to each placed
    attention layer. Mutates and returns `params`.
    """
    _check_no_adapter(params)
    if prefix.length >= config.max_source_len or prefix.length >= config.max_target_len:
        raise AdapterError(
            f"prefix length {prefix.length} must be below max_source_len "
            f"({config.max_source_len}) and max_target_len ({config.max_target_len})"
        )
    rng = np.random.default_rng(prefix.seed)
    params.freeze_all()
    layers = prefix_layers(config, prefix)
    for path in layers:
        params.add(f"{path}.prefix_k", rng.normal(0.0, prefix.init_std, size=(prefix.length, config.d_model)), trainable=True)
        params.add(f"{path}.prefix_v", rng.normal(0.0, prefix.init_std, size=(prefix.length, config.d_model)), trainable=True)
    params.adapter = prefix
    logger.info(
        f"Attached prefix L={prefix.length} to {len(layers)} attention layers "
        f"({prefix_parameter_count(config, prefix)} trainable parameters)"
    )
    return params


def attach_full(params: Parameters) -> Parameters:
    """
    End-to-end fine-tuning: every base tensor trainable.
    """
    _check_no_adapter(params)
    params.set_trainable(params.tensors.keys())
    return params


def attach(config: ModelConfig, kind: AdapterKind, params: Parameters,
           lora: Optional[LoraConfig] = None, prefix: Optional[PrefixConfig] = None) -> Parameters:
    if kind == AdapterKind.LORA:
        return attach_lora(config, lora or LoraConfig(), params)
    if kind == AdapterKind.PREFIX:
        return attach_prefix(config, prefix or PrefixConfig(), params)
    return attach_full(params)


def merge_lora(params: Parameters) -> Parameters:
    """
    Fold each B @ A into its base weight and drop the factors. Mutates and returns `params`.
    """
    if not isinstance(params.adapter, LoraConfig):
        raise AdapterError("merge_lora needs parameters with an attached LoRA adapter")
    lora = params.adapter
    for name in [k for k in params.tensors if k.endswith(".lora_a")]:
        path = name[: -len(".lora_a")]
        a = params.remove(name)
        b = params.remove(f"{path}.lora_b")
        params.tensors[path] = params.tensors[path] + lora.scaling * (b @ a)
    params.adapter = None
    return params


def adapter_tensor_names(params: Parameters) -> List[str]:
    return sorted(k for k in params.tensors if is_adapter_tensor(k))
