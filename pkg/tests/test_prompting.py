import numpy as np
import pytest

from app.core.exceptions import PromptError, RetrievalError
from app.models.index import EmbeddingIndex
from app.schemas.corpus import Split
from app.schemas.prompt import PromptMode, PromptSpec
from app.services import prompting, tokenizer, transformer

from tests.conftest import make_report


def test_null_prompt():
    assert prompting.render_null("no acute process.") == "findings: no acute process.\nimpression:"
    assert prompting.render_null("  no acute process.  ") == "findings: no acute process.\nimpression:"
    with pytest.raises(PromptError):
        prompting.render_null("   ")


def test_instruction_prompt():
    assert prompting.render_instruction("no acute process.") == (
        "summarize the following radiology report:\nfindings: no acute process.\nimpression:"
    )
    spec = PromptSpec(mode=PromptMode.INSTRUCTION, instruction="condense this report:")
    assert prompting.render_instruction("x.", spec).startswith("condense this report:\n")
    with pytest.raises(ValueError):
        PromptSpec(mode=PromptMode.INSTRUCTION, instruction=" ")


def test_prompt_spec_validation():
    assert PromptSpec(mode=PromptMode.FEW_SHOT, k=4).label == "few_shot_4"
    with pytest.raises(ValueError):
        PromptSpec(mode=PromptMode.FEW_SHOT, k=3)
    with pytest.raises(ValueError):
        PromptSpec(mode=PromptMode.NULL, k=1)


def test_index_over_a_split(tiny_config, clinical_vocab):
    config = tiny_config.model_copy(update={"vocab_size": len(clinical_vocab), "max_source_len": 256})
    params = transformer.init_params(config)
    reports = [make_report(f"r{i}", split=Split.TRAIN) for i in range(3)]
    embedder = prompting.EncoderEmbedder(params, clinical_vocab)
    index = prompting.build_index(reports, embedder)
    assert len(index) == 3
    assert index.split == "train"
    np.testing.assert_allclose(np.linalg.norm(index.vectors, axis=1), 1.0, atol=1e-9)
    again = prompting.build_index(reports, prompting.EncoderEmbedder(params, clinical_vocab))
    np.testing.assert_array_equal(index.vectors, again.vectors)
    direct = transformer.embed(params, [tokenizer.encode(reports[1].findings, clinical_vocab, add_eos=True)])
    np.testing.assert_allclose(index.vectors[1], direct[0], atol=1e-9)
    with pytest.raises(RetrievalError):
        prompting.build_index([], embedder)


def test_bag_of_words_embedder():
    embedder = prompting.BagOfWordsEmbedder(dim=64)
    vectors = embedder(["small hemorrhage", "small hemorrhage", "large effusion"])
    np.testing.assert_allclose(vectors[0], vectors[1])
    np.testing.assert_allclose(np.linalg.norm(vectors, axis=1), 1.0)
    with pytest.raises(RetrievalError):
        embedder([" "])


def _unit(rows):
    rows = np.asarray(rows, dtype=np.float64)
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def test_knn_self_match_and_exclusion():
    vectors = _unit([[1, 0], [0.9, 0.1], [0, 1]])
    index = EmbeddingIndex(ids=("a", "b", "c"), vectors=vectors, split="train", embedder="test")
    assert prompting.knn_retrieve(vectors[0], index, 1) == ["a"]
    assert prompting.knn_retrieve(vectors[0], index, 1, exclude_id="a") == ["b"]
    assert prompting.knn_retrieve(vectors[0], index, 0) == []
    with pytest.raises(RetrievalError):
        prompting.knn_retrieve(vectors[0], index, 3, exclude_id="a")


def test_knn_matches_brute_force(rng):
    vectors = _unit(rng.normal(size=(5, 4)))
    ids = ("e", "d", "c", "b", "a")
    index = EmbeddingIndex(ids=ids, vectors=vectors, split=None, embedder="test")
    query = _unit(rng.normal(size=(1, 4)))[0]
    expected = [ids[i] for i in np.argsort(-(vectors @ query), kind="stable")[:3]]
    assert prompting.knn_retrieve(query, index, 3) == expected


def test_knn_ties_go_to_lower_id():
    vectors = _unit([[1, 0], [1, 0], [0, 1]])
    index = EmbeddingIndex(ids=("z", "m", "q"), vectors=vectors, split=None, embedder="test")
    assert prompting.knn_retrieve(np.array([1.0, 0.0]), index, 2) == ["m", "z"]


def test_index_save_and_load(tmp_path):
    index = EmbeddingIndex(ids=("a", "b"), vectors=_unit([[1, 2], [3, 1]]), split="train", embedder="bow-8")
    prompting.save_index(index, tmp_path / "index.npz")
    loaded = prompting.load_index(tmp_path / "index.npz")
    assert loaded.ids == index.ids
    assert loaded.split == "train"
    np.testing.assert_array_equal(loaded.vectors, index.vectors)


def test_few_shot_with_one_example(clinical_vocab):
    example = make_report("e1", findings="No acute infarct is seen.", impression="No acute findings.")
    prompt = prompting.assemble_few_shot([example], "the cerebellum is unremarkable.", 1, 512, clinical_vocab)
    assert prompt == (
        "findings: no acute infarct is seen.\nimpression: no acute findings.\n"
        "findings: the cerebellum is unremarkable.\nimpression:"
    )


def test_few_shot_with_zero_examples_is_the_null_prompt(clinical_vocab):
    findings = "the cerebellum is unremarkable."
    assert prompting.assemble_few_shot([], findings, 0, 512, clinical_vocab) == prompting.render_null(findings)


def test_few_shot_nearest_example_is_last(clinical_vocab):
    near = make_report("n", findings="small hemorrhage.", impression="small hemorrhage.")
    far = make_report("f", findings="no acute infarct.", impression="no acute findings.")
    prompt = prompting.assemble_few_shot([near, far], "small hemorrhage.", 2, 512, clinical_vocab)
    assert prompt.index("no acute infarct") < prompt.index("impression: small hemorrhage.")


def test_few_shot_drops_farthest_examples_over_budget(clinical_vocab):
    examples = [make_report(f"e{i}", findings=f"the cerebellum is unremarkable {i}.") for i in range(4)]
    query = "no acute infarct is seen."
    three = prompting.assemble_few_shot(examples[:3], query, 3, 512, clinical_vocab)
    budget = len(tokenizer.encode(three, clinical_vocab, add_eos=True))
    assert prompting.assemble_few_shot(examples, query, 4, budget, clinical_vocab) == three


def test_over_long_findings_are_cut_from_the_tail(clinical_vocab):
    findings = " ".join(["the cerebellum is unremarkable."] * 20)
    prompt = prompting.build_prompt(findings, PromptSpec(), clinical_vocab, 60)
    assert len(tokenizer.encode(prompt, clinical_vocab, add_eos=True)) <= 60
    assert prompt.startswith("findings: the cerebellum")
    assert prompt.endswith("\nimpression:")


def test_few_shot_needs_enough_examples(clinical_vocab):
    with pytest.raises(PromptError):
        prompting.assemble_few_shot([], "x.", 1, 512, clinical_vocab)


def test_index_requires_unit_vectors(tmp_path):
    with pytest.raises(ValueError, match="unit norm"):
        EmbeddingIndex(ids=("a", "b"), vectors=np.array([[1.0, 0.0], [3.0, 4.0]]), split=None, embedder="test")
    with open(tmp_path / "index.npz", "wb") as handle:
        np.savez(
            handle,
            ids=np.array(["a", "b"]),
            vectors=np.array([[1.0, 0.0], [0.5, 0.5]]),
            split=np.array("train"),
            embedder=np.array("bow-8"),
        )
    with pytest.raises(RetrievalError, match="unit norm"):
        prompting.load_index(tmp_path / "index.npz")
