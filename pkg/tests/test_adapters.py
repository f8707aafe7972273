import numpy as np
import pytest
from pydantic import ValidationError

from app.core.exceptions import AdapterError
from app.models.parameters import ParameterCounts
from app.schemas.adapter import AdapterKind, AttentionClass, LoraConfig, PrefixConfig, Projection
from app.schemas.model import PUBLISHED_TOTALS, T5_BASE_SHAPED, T5_LARGE_SHAPED
from app.services import adapters, numerics, transformer

SOURCE = np.array([[5, 6, 7, 1]])
TARGET = np.array([[8, 4, 1]])


def test_lora_counts_for_published_shapes():
    lora = LoraConfig()
    assert adapters.lora_parameter_count(T5_BASE_SHAPED, lora) == 884_736
    assert adapters.lora_parameter_count(T5_LARGE_SHAPED, lora) == 2_359_296


def test_prefix_counts_for_published_shapes():
    prefix = PrefixConfig()
    assert adapters.prefix_parameter_count(T5_BASE_SHAPED, prefix) == 368_640
    assert adapters.prefix_parameter_count(T5_LARGE_SHAPED, prefix) == 983_040


def test_tunable_fractions_against_published_totals():
    base = adapters.tunable_fraction(ParameterCounts(PUBLISHED_TOTALS["base"], 884_736))
    assert 0.39 <= base < 0.40
    large = adapters.tunable_fraction(ParameterCounts(PUBLISHED_TOTALS["large"], 2_359_296))
    assert round(large, 2) == 0.32
    prefix = adapters.tunable_fraction(ParameterCounts(PUBLISHED_TOTALS["base"], 368_640))
    assert round(prefix, 2) == 0.17
    assert adapters.tunable_fraction(ParameterCounts(100, 0)) == 0.0
    with pytest.raises(AdapterError):
        adapters.tunable_fraction(ParameterCounts(0, 0))


def test_toy_counts_by_hand(tiny_config):
    # three attention layers, two targets each, r * (8 + 8) per target
    assert adapters.lora_parameter_count(tiny_config, LoraConfig(rank=2)) == 3 * 2 * 2 * 16
    # two self-attention layers, key and value, 3 vectors of width 8
    assert adapters.prefix_parameter_count(tiny_config, PrefixConfig(length=3)) == 96


def test_attached_lora_matches_closed_form(tiny_params, tiny_config):
    lora = LoraConfig(rank=2)
    adapters.attach_lora(tiny_config, lora, tiny_params)
    assert tiny_params.counts().trainable == adapters.lora_parameter_count(tiny_config, lora)
    assert tiny_params.counts().total == transformer.base_parameter_count(tiny_config)
    assert all(name.endswith((".lora_a", ".lora_b")) for name in tiny_params.trainable_names())


def test_attached_prefix_matches_closed_form(tiny_params, tiny_config):
    prefix = PrefixConfig(length=3, placement=frozenset({AttentionClass.DECODER_CROSS}))
    adapters.attach_prefix(tiny_config, prefix, tiny_params)
    assert adapters.adapter_tensor_names(tiny_params) == [
        "decoder.0.cross_attn.prefix_k",
        "decoder.0.cross_attn.prefix_v",
    ]
    assert tiny_params.counts().trainable == 48


def test_fresh_lora_is_the_identity(tiny_params, tiny_config):
    before = transformer.forward(tiny_params, SOURCE, TARGET)
    adapters.attach_lora(tiny_config, LoraConfig(rank=2), tiny_params)
    np.testing.assert_array_equal(transformer.forward(tiny_params, SOURCE, TARGET), before)


def test_merge_matches_unmerged_forward(tiny_params, tiny_config, rng):
    lora = LoraConfig(rank=2, targets=frozenset({Projection.QUERY, Projection.VALUE, Projection.OUTPUT}))
    adapters.attach_lora(tiny_config, lora, tiny_params)
    for name in adapters.adapter_tensor_names(tiny_params):
        tiny_params.tensors[name] = rng.normal(size=tiny_params.tensors[name].shape)
    unmerged = transformer.forward(tiny_params, SOURCE, TARGET)
    adapters.merge_lora(tiny_params)
    assert adapters.adapter_tensor_names(tiny_params) == []
    np.testing.assert_allclose(transformer.forward(tiny_params, SOURCE, TARGET), unmerged, atol=1e-6)
    with pytest.raises(AdapterError):
        adapters.merge_lora(tiny_params)


def test_merge_with_zero_b_leaves_weights(tiny_params, tiny_config):
    weight = tiny_params.tensors["encoder.0.self_attn.q"].copy()
    adapters.attach_lora(tiny_config, LoraConfig(rank=2), tiny_params)
    adapters.merge_lora(tiny_params)
    np.testing.assert_array_equal(tiny_params.tensors["encoder.0.self_attn.q"], weight)


def test_lora_gradients_reach_only_the_factors(tiny_params, tiny_config, rng):
    adapters.attach_lora(tiny_config, LoraConfig(rank=2), tiny_params)
    tiny_params.tensors["decoder.0.cross_attn.v.lora_b"] = rng.normal(size=(8, 2))
    grads = transformer.backward(tiny_params, SOURCE, TARGET)
    assert sorted(grads) == adapters.adapter_tensor_names(tiny_params)

    name = "decoder.0.cross_attn.v.lora_a"
    numeric = numerics.finite_difference_gradient(
        lambda _: transformer.loss(tiny_params, SOURCE, TARGET), tiny_params.tensors[name]
    )
    np.testing.assert_allclose(grads[name], numeric, rtol=1e-4, atol=1e-8)


def test_prefix_gradients_match_finite_differences(tiny_params, tiny_config):
    adapters.attach_prefix(tiny_config, PrefixConfig(length=2), tiny_params)
    grads = transformer.backward(tiny_params, SOURCE, TARGET)
    for name in ("encoder.0.self_attn.prefix_k", "decoder.0.self_attn.prefix_v"):
        numeric = numerics.finite_difference_gradient(
            lambda _: transformer.loss(tiny_params, SOURCE, TARGET), tiny_params.tensors[name]
        )
        np.testing.assert_allclose(grads[name], numeric, rtol=1e-4, atol=1e-8)


def test_second_adapter_is_rejected(tiny_params, tiny_config):
    adapters.attach_prefix(tiny_config, PrefixConfig(length=2), tiny_params)
    with pytest.raises(AdapterError):
        adapters.attach_lora(tiny_config, LoraConfig(rank=2), tiny_params)


def test_invalid_adapter_settings(tiny_params, tiny_config):
    with pytest.raises(ValidationError):
        PrefixConfig(length=0)
    with pytest.raises(ValidationError):
        LoraConfig(rank=0)
    with pytest.raises(AdapterError):
        adapters.attach_lora(tiny_config, LoraConfig(rank=9), tiny_params)
    with pytest.raises(AdapterError):
        adapters.attach_prefix(tiny_config, PrefixConfig(length=tiny_config.max_target_len), tiny_params.copy())


def test_rejected_lora_leaves_the_model_untouched(tiny_params, tiny_config):
    tiny_params.set_trainable(list(tiny_params.tensors), True)
    before = dict(tiny_params.trainable)
    with pytest.raises(AdapterError, match="rank 9"):
        adapters.attach_lora(tiny_config, LoraConfig(rank=9), tiny_params)
    assert tiny_params.trainable == before
    assert not any(name.endswith((".lora_a", ".lora_b")) for name in tiny_params.tensors)
    assert tiny_params.adapter is None


def test_attach_full_trains_everything(tiny_params, tiny_config):
    tiny_params.freeze_all()
    adapters.attach(tiny_config, AdapterKind.FULL, tiny_params)
    counts = tiny_params.counts()
    assert counts.trainable == counts.total
    assert adapters.adapter_counts(tiny_config, None).trainable == counts.total
