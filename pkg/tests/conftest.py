"""
Shared fixtures: a tiny model shape, small corpora and vocabularies, and an
experiment YAML small enough to run the whole pipeline in seconds.
"""
from pathlib import Path
from typing import Iterable

import numpy as np
import pytest
import yaml

from app.schemas.corpus import Anatomy, Modality, Report, Split
from app.schemas.model import ModelConfig
from app.services import tokenizer, transformer

CLINICAL_TEXTS = [
    "findings: there is a small hemorrhage in the left frontal lobe measuring 4 mm.",
    "impression: small hemorrhage in the left frontal lobe.",
    "findings: no acute infarct is seen. the cerebellum is unremarkable.",
    "impression: no acute findings.",
    "findings: a chronic effusion involves the right pleural space. no acute pneumothorax is seen.",
    "impression: chronic effusion in the right pleural space.",
    "summarize the following radiology report:",
]


def vocab_for(texts: Iterable[str], extra: int = 30, n_sentinels: int = 4):
    """
    A BPE vocabulary over `texts` with `extra` merged tokens on top of the characters.
    """
    texts = list(texts)
    chars = {ch for t in texts for ch in tokenizer.normalize(t) if not ch.isspace()}
    return tokenizer.build_vocab(texts, 3 + n_sentinels + 1 + len(chars) + extra, n_sentinels)


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(
        d_model=8,
        n_heads=2,
        n_encoder_blocks=1,
        n_decoder_blocks=1,
        d_ff=16,
        vocab_size=20,
        max_source_len=12,
        max_target_len=8,
    )


@pytest.fixture
def tiny_params(tiny_config):
    return transformer.init_params(tiny_config, seed=0)


@pytest.fixture
def clinical_vocab():
    return vocab_for(CLINICAL_TEXTS)


def make_report(report_id: str, modality=Modality.CT, anatomy=Anatomy.HEAD, split=None, findings=None, impression=None) -> Report:
    return Report(
        id=report_id,
        findings=findings or f"there is a small hemorrhage in the left frontal lobe {report_id}.",
        impression=impression or "small hemorrhage in the left frontal lobe.",
        modality=modality,
        anatomy=anatomy,
        split=split,
    )


@pytest.fixture
def sample_reports():
    """Six split-tagged reports over three strata."""
    return [
        make_report("a1", Modality.CT, Anatomy.HEAD, Split.TRAIN),
        make_report("a2", Modality.CT, Anatomy.HEAD, Split.TEST),
        make_report("b1", Modality.MR, Anatomy.HEAD, Split.TRAIN),
        make_report("b2", Modality.MR, Anatomy.HEAD, Split.TEST),
        make_report("c1", Modality.CT, Anatomy.CHEST, Split.TRAIN),
        make_report("c2", Modality.CT, Anatomy.CHEST, Split.TEST),
    ]


TINY_PLAN = {
    "seed": 3,
    "methods": ["null", "lora"],
    "corpus": {
        "n_task": 60,
        "n_pretrain": 32,
        "grammar": {"proportions": "all", "min_clauses": 1, "max_clauses": 3, "max_impression_clauses": 1},
    },
    "tokenizer": {"vocab_size": 120, "n_sentinels": 4},
    "model": {
        "d_model": 16,
        "n_heads": 2,
        "n_encoder_blocks": 1,
        "n_decoder_blocks": 1,
        "d_ff": 32,
        "vocab_size": 120,
        "max_source_len": 64,
        "max_target_len": 16,
    },
    "pretrain": {
        "domains": ["clinical"],
        "train": {
            "max_epochs": 1,
            "patience": None,
            "micro_batch_size": 16,
            "accumulation_steps": 1,
            "warmup_steps": 1,
            "peak_lr": 0.003,
            "final_lr": 0.0003,
        },
    },
    "adapt": {
        "lora_train": {
            "max_epochs": 1,
            "patience": None,
            "micro_batch_size": 16,
            "accumulation_steps": 1,
            "warmup_steps": 1,
            "peak_lr": 0.001,
            "final_lr": 0.0001,
        },
    },
    "generate": {"max_target_len": 8, "batch_size": 8, "max_test": 4},
    "shots": {"ks": [0, 1], "bases": ["clinical"]},
    "ood": {"presets": ["CT head -> CT head", "All -> CT head"], "method": "lora"},
}


@pytest.fixture
def plan_file(tmp_path) -> Path:
    """The tiny plan as YAML, writing into `tmp_path / 'runs'`."""
    path = tmp_path / "plan.yaml"
    path.write_text(yaml.safe_dump({**TINY_PLAN, "output_dir": str(tmp_path / "runs")}), encoding="utf-8")
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(0)
