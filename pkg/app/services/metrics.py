"""
Evaluation metrics on a 0-100 scale: BLEU, ROUGE-L, a token-embedding
similarity F1, a lexicon entity-overlap F1, and reader-study aggregation.

All metrics tokenize with the tokenizer's word-level pre-split, so scores do not
depend on the BPE vocabulary size.
"""
import logging
import math
from collections import Counter, defaultdict
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import ValidationError

from app.core.exceptions import MetricError
from app.models.parameters import Parameters
from app.models.vocab import Vocab
from app.schemas.metrics import METRIC_NAMES, ExampleScores, ReaderResponse, ScoreReport, StratumScores
from app.services import tokenizer
from app.services.manifest import write_json

logger = logging.getLogger(__name__)

BLEU_MAX_ORDER = 4
BLEU_EPSILON = 1e-9
BLEU_CONFIG = {
    "max_order": BLEU_MAX_ORDER,
    "smoothing": "epsilon-on-zero-counts",
    "epsilon": BLEU_EPSILON,
    "effective_order": True,
    "brevity_penalty": True,
}

STOPWORDS = frozenset(
    "a an and are as at be by for from has have in is it its no not of on or the there this to was were "
    "with without within which measuring measures cm mm findings impression unchanged new stable".split()
)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_precisions(reference: Sequence[str], hypothesis: Sequence[str]) -> List[Tuple[int, int]]:
    """
    (clipped matches, hypothesis n-gram count) for orders 1..4.
    """
    stats = []
    for n in range(1, BLEU_MAX_ORDER + 1):
        hyp = _ngrams(hypothesis, n)
        ref = _ngrams(reference, n)
        matches = sum(min(count, ref[gram]) for gram, count in hyp.items())
        stats.append((matches, max(len(hypothesis) - n + 1, 0)))
    return stats


def bleu(reference: Sequence[str], hypothesis: Sequence[str]) -> float:
    """
    Geometric mean of clipped 1-4-gram precisions with brevity penalty.

    Orders longer than the hypothesis are left out; a zero match count at a used
    order counts as BLEU_EPSILON. No unigram match scores 0.
    """
    if not reference:
        raise MetricError("BLEU needs a non-empty reference")
    if not hypothesis:
        return 0.0
    stats = bleu_precisions(reference, hypothesis)
    if stats[0][0] == 0:
        return 0.0
    order = min(BLEU_MAX_ORDER, len(hypothesis))
    log_sum = 0.0
    for matches, total in stats[:order]:
        log_sum += math.log((matches if matches > 0 else BLEU_EPSILON) / total)
    geo_mean = math.exp(log_sum / order)
    ref_len, hyp_len = len(reference), len(hypothesis)
    penalty = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return min(100.0, 100.0 * penalty * geo_mean)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    previous = [0] * (len(b) + 1)
    for x in a:
        current = [0]
        for j, y in enumerate(b):
            current.append(previous[j] + 1 if x == y else max(previous[j + 1], current[j]))
        previous = current
    return previous[-1]


def rouge_l(reference: Sequence[str], hypothesis: Sequence[str]) -> float:
    """
    F-measure of the longest common subsequence.
    """
    if not reference:
        raise MetricError("ROUGE-L needs a non-empty reference")
    lcs = lcs_length(reference, hypothesis)
    if lcs == 0:
        return 0.0
    precision = lcs / len(hypothesis)
    recall = lcs / len(reference)
    return 100.0 * 2 * precision * recall / (precision + recall)


TokenEmbedder = Callable[[Sequence[str]], np.ndarray]


def embed_sim_f1(reference: Sequence[str], hypothesis: Sequence[str], embedder: TokenEmbedder) -> float:
    """
    Greedy max-cosine token matching F1 (a BERTScore-style similarity).

    Identical tokens always count as similarity 1.
    """
    if not reference or not hypothesis:
        raise MetricError("similarity F1 needs non-empty texts")
    ref_vecs = _unit_rows(embedder(list(reference)))
    hyp_vecs = _unit_rows(embedder(list(hypothesis)))
    sims = ref_vecs @ hyp_vecs.T
    same = np.array([[r == h for h in hypothesis] for r in reference])
    sims = np.where(same, 1.0, np.clip(sims, -1.0, 1.0))
    recall = float(sims.max(axis=1).mean())
    precision = float(sims.max(axis=0).mean())
    if recall + precision <= 0:
        return 0.0
    f1 = 2 * precision * recall / (precision + recall)
    return float(min(100.0, max(0.0, 100.0 * f1)))


def _unit_rows(vectors: np.ndarray) -> np.ndarray:
    vectors = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    return vectors / np.maximum(norms, 1e-12)


class ModelTokenEmbedder:
    """
    Embeds a word as the mean of its subword rows in the model's token-embedding table.
    """

    def __init__(self, params: Parameters, vocab: Vocab):
        self.table = params.tensors["embed.token"]
        self.vocab = vocab
        self._cache: Dict[str, np.ndarray] = {}

    def vector(self, word: str) -> np.ndarray:
        vec = self._cache.get(word)
        if vec is None:
            ids = tokenizer.encode(word, self.vocab) or [self.vocab.unk_id]
            vec = self.table[ids].mean(axis=0)
            self._cache[word] = vec
        return vec

    def __call__(self, words: Sequence[str]) -> np.ndarray:
        return np.stack([self.vector(w) for w in words])


# ---------------------------------------------------------------------------
# Entity overlap
# ---------------------------------------------------------------------------

class Lexicon:
    """
    Entity phrases matched by longest-first scan over word tokens.
    """

    def __init__(self, phrases: Iterable[str]):
        entries = {tuple(tokenizer.words(p)) for p in phrases}
        entries.discard(())
        if not entries:
            raise MetricError("lexicon must contain at least one entity")
        self.entries = frozenset(entries)
        self.max_len = max(len(e) for e in entries)

    def __len__(self) -> int:
        return len(self.entries)

    def extract(self, tokens: Sequence[str]) -> frozenset:
        found = set()
        i = 0
        while i < len(tokens):
            for n in range(min(self.max_len, len(tokens) - i), 0, -1):
                candidate = tuple(tokens[i : i + n])
                if candidate in self.entries:
                    found.add(" ".join(candidate))
                    i += n
                    break
            else:
                i += 1
        return frozenset(found)


def build_lexicon(impressions: Iterable[str], top_n: int = 50, min_count: int = 2) -> Lexicon:
    """
    Top-frequency content words of the training impressions.
    """
    counts = Counter(
        w for text in impressions for w in tokenizer.words(text)
        if w.isalpha() and len(w) > 2 and w not in STOPWORDS
    )
    frequent = [w for w, c in counts.items() if c >= min_count] or list(counts)
    terms = sorted(frequent, key=lambda w: (-counts[w], w))[:top_n]
    return Lexicon(terms)


def load_lexicon(path: Path) -> Lexicon:
    """One phrase per line; blank lines and '#' comments are ignored."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return Lexicon(line.strip() for line in lines if line.strip() and not line.startswith("#"))


def entity_f1(reference: Sequence[str], hypothesis: Sequence[str], lexicon: Lexicon) -> float:
    """
    F1 over lexicon entity sets; two empty sets agree vacuously (100).
    """
    ref_entities = lexicon.extract(reference)
    hyp_entities = lexicon.extract(hypothesis)
    if not ref_entities and not hyp_entities:
        return 100.0
    overlap = len(ref_entities & hyp_entities)
    if overlap == 0:
        return 0.0
    precision = overlap / len(hyp_entities)
    recall = overlap / len(ref_entities)
    return 100.0 * 2 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# Reader study
# ---------------------------------------------------------------------------

def aggregate_reader_scores(responses: Iterable) -> Dict[int, float]:
    """
    Mean score per question across readers and examples.
    """
    seen = set()
    by_question: Dict[int, List[int]] = defaultdict(list)
    for raw in responses:
        try:
            response = raw if isinstance(raw, ReaderResponse) else ReaderResponse(**raw)
        except ValidationError as e:
            raise MetricError(f"invalid reader response {raw}: {e.errors()[0]['msg']}") from e
        key = (response.reader_id, response.question, response.example_id)
        if key in seen:
            raise MetricError(f"duplicate reader response {key}")
        seen.add(key)
        by_question[response.question].append(response.score)
    return {q: float(np.mean(scores)) for q, scores in sorted(by_question.items())}


def load_reader_responses(path: Path) -> List[dict]:
    frame = pd.read_csv(path, dtype={"reader_id": str, "example_id": str}, keep_default_na=False, na_values=[""])
    missing = {"reader_id", "example_id", "question", "score"} - set(frame.columns)
    if missing:
        raise MetricError(f"reader CSV {path} lacks columns {sorted(missing)}")
    return frame.to_dict(orient="records")


# ---------------------------------------------------------------------------
# Corpus evaluation
# ---------------------------------------------------------------------------

def _means(rows: Sequence[ExampleScores]) -> Dict[str, float]:
    # fixed summation order for reproducible floats
    return {m: float(math.fsum(getattr(r, m) for r in rows) / len(rows)) for m in METRIC_NAMES}


def corpus_evaluate(
    ids: Sequence[str],
    references: Sequence[str],
    hypotheses: Sequence[str],
    strata: Sequence[Tuple[str, str]],
    embedder: TokenEmbedder,
    lexicon: Lexicon,
) -> ScoreReport:
    """
    All four metrics per example, corpus means and per-(modality, anatomy) means.
    """
    if not references:
        raise MetricError("nothing to evaluate")
    if not (len(ids) == len(references) == len(hypotheses) == len(strata)):
        raise MetricError(
            f"mismatched lengths: {len(ids)} ids, {len(references)} references, "
            f"{len(hypotheses)} hypotheses, {len(strata)} strata"
        )
    rows = []
    for example_id, ref_text, hyp_text, (modality, anatomy) in zip(ids, references, hypotheses, strata):
        ref = tokenizer.words(ref_text)
        hyp = tokenizer.words(hyp_text)
        rows.append(
            ExampleScores(
                id=example_id,
                modality=modality,
                anatomy=anatomy,
                bleu=bleu(ref, hyp),
                rouge_l=rouge_l(ref, hyp),
                embed_sim_f1=embed_sim_f1(ref, hyp, embedder) if hyp else 0.0,
                entity_f1=entity_f1(ref, hyp, lexicon),
            )
        )
    groups: Dict[str, List[ExampleScores]] = defaultdict(list)
    for row in rows:
        groups[row.stratum].append(row)
    return ScoreReport(
        examples=rows,
        corpus_means=_means(rows),
        stratified={k: StratumScores(count=len(v), means=_means(v)) for k, v in sorted(groups.items())},
        metadata={"bleu": BLEU_CONFIG, "tokenization": "word pre-split", "lexicon_size": len(lexicon)},
    )


def write_score_report(report: ScoreReport, directory: Path, stamp: Optional[Dict[str, object]] = None) -> None:
    """
    `scores.csv` (one row per example) and `summary.json`.

    `stamp` (config hash, seed, system name) is added as constant CSV columns and
    to the summary metadata.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stamp = stamp or {}
    frame = pd.DataFrame([r.model_dump() for r in report.examples])
    for key, value in stamp.items():
        frame[key] = value
    frame.to_csv(directory / "scores.csv", index=False, float_format="%.6f")
    summary = report.model_dump(exclude={"examples"})
    summary["metadata"] = {**summary["metadata"], **stamp}
    write_json(directory / "summary.json", summary)
