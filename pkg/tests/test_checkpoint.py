import numpy as np
import pytest

from app.core.exceptions import CheckpointError, MissingArtifactError
from app.schemas.adapter import LoraConfig, PrefixConfig
from app.services import adapters, checkpoint, transformer

SOURCE = np.array([[5, 6, 7, 1]])
TARGET = np.array([[8, 4, 1]])


def test_model_roundtrip(tmp_path, tiny_params):
    tiny_params.set_trainable(["embed.token"], False)
    path = tmp_path / "model.npz"
    checkpoint.save_checkpoint(tiny_params, path, vocab_ref={"fingerprint": "v1"})
    loaded = checkpoint.load_checkpoint(path)
    assert loaded.config == tiny_params.config
    assert loaded.trainable == tiny_params.trainable
    assert loaded.metadata["vocab_fingerprint"] == "v1"
    assert loaded.fingerprint() == tiny_params.fingerprint()
    np.testing.assert_array_equal(
        transformer.forward(loaded, SOURCE, TARGET), transformer.forward(tiny_params, SOURCE, TARGET)
    )


def test_lora_adapter_roundtrip(tmp_path, tiny_params, tiny_config, rng):
    adapted = tiny_params.copy()
    adapters.attach_lora(tiny_config, LoraConfig(rank=2), adapted)
    for name in adapters.adapter_tensor_names(adapted):
        adapted.tensors[name] = rng.normal(size=adapted.tensors[name].shape)
    path = tmp_path / "adapter.npz"
    checkpoint.save_adapter(adapted, path)

    restored = checkpoint.load_adapter(path, tiny_params)
    assert restored.adapter == adapted.adapter
    assert restored.trainable_names() == adapters.adapter_tensor_names(adapted)
    np.testing.assert_array_equal(
        transformer.forward(restored, SOURCE, TARGET), transformer.forward(adapted, SOURCE, TARGET)
    )
    assert tiny_params.adapter is None


def test_prefix_adapter_roundtrip(tmp_path, tiny_params, tiny_config):
    adapted = tiny_params.copy()
    adapters.attach_prefix(tiny_config, PrefixConfig(length=2), adapted)
    path = tmp_path / "prefix.npz"
    checkpoint.save_adapter(adapted, path)
    restored = checkpoint.load_adapter(path, tiny_params)
    assert isinstance(restored.adapter, PrefixConfig)
    assert restored.fingerprint() == adapted.fingerprint()


def test_adapter_refuses_a_different_base(tmp_path, tiny_params, tiny_config):
    adapted = tiny_params.copy()
    adapters.attach_lora(tiny_config, LoraConfig(rank=2), adapted)
    path = tmp_path / "adapter.npz"
    checkpoint.save_adapter(adapted, path)
    with pytest.raises(CheckpointError, match="different base"):
        checkpoint.load_adapter(path, transformer.init_params(tiny_config, seed=1))
    with pytest.raises(CheckpointError, match="different model configuration"):
        checkpoint.load_adapter(path, transformer.init_params(tiny_config.model_copy(update={"d_ff": 32})))


def test_wrong_checkpoint_kinds(tmp_path, tiny_params, tiny_config):
    with pytest.raises(CheckpointError):
        checkpoint.save_adapter(tiny_params, tmp_path / "none.npz")
    adapted = tiny_params.copy()
    adapters.attach_lora(tiny_config, LoraConfig(rank=2), adapted)
    checkpoint.save_adapter(adapted, tmp_path / "adapter.npz")
    with pytest.raises(CheckpointError, match="adapter-only"):
        checkpoint.load_checkpoint(tmp_path / "adapter.npz")
    checkpoint.save_checkpoint(tiny_params, tmp_path / "model.npz")
    with pytest.raises(CheckpointError):
        checkpoint.load_adapter(tmp_path / "model.npz", tiny_params)


def test_missing_checkpoint(tmp_path, tiny_params):
    with pytest.raises(MissingArtifactError) as e:
        checkpoint.load_checkpoint(tmp_path / "absent.npz", stage="pretrain")
    assert e.value.exit_code == 3
    with pytest.raises(MissingArtifactError):
        checkpoint.load_adapter(tmp_path / "absent.npz", tiny_params)


def test_file_without_metadata(tmp_path):
    path = tmp_path / "plain.npz"
    np.savez(path, weights=np.zeros(3))
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        checkpoint.load_checkpoint(path)
