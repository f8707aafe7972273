"""
Discrete prompts for frozen models: null, instruction-prefixed, and kNN
in-context few-shot prompts.
"""
import hashlib
import logging
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np

from app.core.exceptions import PromptError, RetrievalError
from app.models.index import EmbeddingIndex
from app.models.parameters import Parameters
from app.models.vocab import Vocab
from app.schemas.corpus import Report
from app.schemas.prompt import PromptMode, PromptSpec
from app.services import tokenizer, transformer

logger = logging.getLogger(__name__)


def _clean(text: str) -> str:
    return tokenizer.normalize(text)


def _null_template(findings: str) -> str:
    return f"findings: {findings}\nimpression:"


def _example_block(report: Report) -> str:
    return f"findings: {_clean(report.findings)}\nimpression: {_clean(report.impression)}"


def render_null(findings: str) -> str:
    """
    The basic zero-shot prompt ending in the cue word "impression:".
    """
    cleaned = _clean(findings)
    if not cleaned:
        raise PromptError("findings must be non-empty")
    return _null_template(cleaned)


def render_instruction(findings: str, spec: Optional[PromptSpec] = None) -> str:
    spec = spec or PromptSpec(mode=PromptMode.INSTRUCTION)
    instruction = _clean(spec.instruction)
    if not instruction:
        raise PromptError("instruction text must be non-empty")
    return f"{instruction}\n{render_null(findings)}"


# ---------------------------------------------------------------------------
# Embedders and the retrieval index
# ---------------------------------------------------------------------------

class BagOfWordsEmbedder:
    """
    Hashed bag-of-words vectors; the fallback when no encoder is available.
    """

    def __init__(self, dim: int = 512):
        self.dim = dim
        self.fingerprint = f"bow-{dim}"

    def _bucket(self, word: str) -> int:
        return int.from_bytes(hashlib.md5(word.encode()).digest()[:4], "little") % self.dim

    def __call__(self, texts: Sequence[str]) -> np.ndarray:
        vectors = np.zeros((len(texts), self.dim))
        for row, text in enumerate(texts):
            for word in tokenizer.words(text):
                vectors[row, self._bucket(word)] += 1.0
        norms = np.linalg.norm(vectors, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise RetrievalError("cannot embed a text without words")
        return vectors / norms


class EncoderEmbedder:
    """
    Mean-pooled final encoder states of a model.
    """

    def __init__(self, params: Parameters, vocab: Vocab, batch_size: int = 32):
        self.params = params
        self.vocab = vocab
        self.batch_size = batch_size
        self.fingerprint = f"encoder-{params.fingerprint()[:16]}"

    def __call__(self, texts: Sequence[str]) -> np.ndarray:
        max_len = self.params.config.max_source_len
        rows = []
        for start in range(0, len(texts), self.batch_size):
            chunk = texts[start : start + self.batch_size]
            ids = [tokenizer.encode(t, self.vocab, add_eos=True)[-max_len:] for t in chunk]
            rows.append(transformer.embed(self.params, transformer.pad_batch(ids)))
        if not rows:
            return np.zeros((0, self.params.config.d_model))
        return np.concatenate(rows, axis=0)


Embedder = Callable[[Sequence[str]], np.ndarray]


def build_index(reports: Sequence[Report], embedder: Embedder) -> EmbeddingIndex:
    """
    One unit vector per training findings section.
    """
    if not reports:
        raise RetrievalError("cannot build an index over an empty split")
    vectors = np.asarray(embedder([r.findings for r in reports]), dtype=np.float64)
    splits = {r.split.value if r.split else None for r in reports}
    return EmbeddingIndex(
        ids=tuple(r.id for r in reports),
        vectors=vectors,
        split=splits.pop() if len(splits) == 1 else None,
        embedder=getattr(embedder, "fingerprint", "custom"),
    )


def knn_retrieve(query: np.ndarray, index: EmbeddingIndex, k: int, exclude_id: Optional[str] = None) -> List[str]:
    """
    Ids of the k most cosine-similar examples, nearest first; ties go to the lower id.
    """
    candidates = [i for i, example_id in enumerate(index.ids) if example_id != exclude_id]
    if k > len(candidates):
        raise RetrievalError(f"k={k} exceeds the {len(candidates)} retrievable examples")
    if k <= 0:
        return []
    sims = index.vectors[candidates] @ np.asarray(query, dtype=np.float64)
    ids = [index.ids[i] for i in candidates]
    order = sorted(range(len(candidates)), key=lambda j: (-sims[j], ids[j]))
    return [ids[j] for j in order[:k]]


def save_index(index: EmbeddingIndex, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as handle:
        np.savez(
            handle,
            ids=np.array(index.ids),
            vectors=index.vectors,
            split=np.array(index.split or ""),
            embedder=np.array(index.embedder),
        )


def load_index(path: Path) -> EmbeddingIndex:
    with np.load(Path(path), allow_pickle=False) as data:
        try:
            return EmbeddingIndex(
                ids=tuple(str(i) for i in data["ids"]),
                vectors=data["vectors"],
                split=str(data["split"]) or None,
                embedder=str(data["embedder"]),
            )
        except ValueError as e:
            raise RetrievalError(f"index {path} is invalid: {e}") from e


# ---------------------------------------------------------------------------
# Prompt assembly under a token budget
# ---------------------------------------------------------------------------

def _fits(text: str, vocab: Vocab, max_source_len: int) -> bool:
    return len(tokenizer.encode(text, vocab, add_eos=True)) <= max_source_len


def _truncate_findings(build: Callable[[str], str], findings: str, vocab: Vocab, max_source_len: int) -> str:
    """
    Longest word prefix of `findings` whose prompt fits the budget.
    """
    words = _clean(findings).split(" ")
    lo, hi = 0, len(words)
    if not _fits(build(""), vocab, max_source_len):
        raise PromptError(f"prompt template alone exceeds {max_source_len} tokens")
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if _fits(build(" ".join(words[:mid])), vocab, max_source_len):
            lo = mid
        else:
            hi = mid - 1
    return build(" ".join(words[:lo]))


def assemble_few_shot(
    examples: Sequence[Report],
    findings: str,
    k: int,
    max_source_len: int,
    vocab: Vocab,
) -> str:
    """
    k example blocks (nearest last) followed by the null prompt of the query.

    `examples` are ordered nearest first. Over the budget, the farthest examples
    are dropped one at a time, then the query findings are cut from the tail.
    """
    if k > len(examples):
        raise PromptError(f"{k} examples requested, {len(examples)} supplied")
    blocks = [_example_block(r) for r in reversed(list(examples[:k]))]
    query = _clean(findings)

    def build(query_findings: str) -> str:
        return "\n".join(blocks + [_null_template(query_findings)])

    while blocks and not _fits(build(query), vocab, max_source_len):
        blocks.pop(0)
    if _fits(build(query), vocab, max_source_len):
        if not query:
            raise PromptError("findings must be non-empty")
        return build(query)
    return _truncate_findings(build, query, vocab, max_source_len)


def build_prompt(
    findings: str,
    spec: PromptSpec,
    vocab: Vocab,
    max_source_len: int,
    neighbors: Sequence[Report] = (),
) -> str:
    """
    Prompt text for any mode, cut to fit `max_source_len` tokens.
    """
    if spec.mode == PromptMode.FEW_SHOT:
        return assemble_few_shot(neighbors, findings, spec.k, max_source_len, vocab)
    if spec.mode == PromptMode.INSTRUCTION:
        text = render_instruction(findings, spec)
        instruction = _clean(spec.instruction)
        build = lambda f: f"{instruction}\n{_null_template(f)}"  # noqa: E731
    else:
        text = render_null(findings)
        build = _null_template
    if _fits(text, vocab, max_source_len):
        return text
    return _truncate_findings(build, findings, vocab, max_source_len)
