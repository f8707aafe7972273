"""
Deterministic byte-pair-encoding tokenizer over lowercased, whitespace-normalized text.

Text is pre-split into pieces (letter runs, single digits, single other
characters). A piece that follows whitespace starts with the word-start symbol,
so decoding restores the normalized text exactly. Merges never involve digits.
"""
import logging
import re
from collections import Counter
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from app.core.exceptions import VocabularyError
from app.models.vocab import EOS, PAD, UNK, WORD_START, Vocab, sentinel

logger = logging.getLogger(__name__)

PIECE_RE = re.compile(r"[a-z]+|\d|[^\sa-z\d]")

VOCAB_FILE = "vocab.txt"
MERGES_FILE = "merges.txt"


def normalize(text: str) -> str:
    return " ".join(text.lower().split())


def words(text: str) -> List[str]:
    """
    Word-level pre-split (before BPE); also the tokenization used by the metrics.
    """
    return PIECE_RE.findall(normalize(text))


def _pieces(text: str) -> List[Tuple[str, ...]]:
    normalized = normalize(text)
    pieces = []
    for match in PIECE_RE.finditer(normalized):
        start = match.start()
        symbols = tuple(match.group())
        if start == 0 or normalized[start - 1] == " ":
            symbols = (WORD_START,) + symbols
        pieces.append(symbols)
    return pieces


def _has_digit(symbol: str) -> bool:
    return any(ch.isdigit() for ch in symbol)


def _merge_pair(symbols: Tuple[str, ...], pair: Tuple[str, str]) -> Tuple[str, ...]:
    merged = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == pair[0] and symbols[i + 1] == pair[1]:
            merged.append(pair[0] + pair[1])
            i += 2
        else:
            merged.append(symbols[i])
            i += 1
    return tuple(merged)


def build_vocab(corpus: Iterable[str], target_size: int, n_sentinels: int = 8) -> Vocab:
    """
    Learn a BPE vocabulary of exactly `target_size` entries.

    The most frequent adjacent pair is merged first; ties go to the
    lexicographically smallest merged token.
    """
    piece_counts: Counter = Counter()
    n_texts = 0
    for text in corpus:
        n_texts += 1
        piece_counts.update(_pieces(text))
    if n_texts == 0 or not piece_counts:
        raise VocabularyError("cannot build a vocabulary from an empty corpus")

    specials = [PAD, EOS, UNK] + [sentinel(i) for i in range(n_sentinels)]
    chars = sorted({ch for piece in piece_counts for ch in piece} - {WORD_START})
    tokens = specials + [WORD_START] + chars
    if target_size <= len(tokens):
        raise VocabularyError(
            f"target size {target_size} must exceed specials + base characters ({len(tokens)})"
        )

    known = set(tokens)
    merges: List[Tuple[str, str]] = []
    words_by_count: Dict[Tuple[str, ...], int] = dict(piece_counts)
    while len(tokens) < target_size:
        pair_counts: Counter = Counter()
        for symbols, count in words_by_count.items():
            for left, right in zip(symbols, symbols[1:]):
                if _has_digit(left) or _has_digit(right):
                    continue
                pair_counts[(left, right)] += count
        if not pair_counts:
            raise VocabularyError(
                f"corpus supports at most {len(tokens)} vocabulary entries, {target_size} requested"
            )
        best = min(pair_counts.items(), key=lambda item: (-item[1], item[0][0] + item[0][1], item[0]))[0]
        merges.append(best)
        merged = best[0] + best[1]
        if merged not in known:
            known.add(merged)
            tokens.append(merged)
        words_by_count = {_merge_pair(symbols, best): count for symbols, count in words_by_count.items()}

    logger.info(f"Built vocabulary of {len(tokens)} tokens with {len(merges)} merges")
    return Vocab(tokens=tuple(tokens), merges=tuple(merges), n_sentinels=n_sentinels)


def _apply_merges(symbols: Tuple[str, ...], vocab: Vocab) -> Tuple[str, ...]:
    ranks = vocab.merge_ranks
    while len(symbols) > 1:
        candidates = [
            (ranks[pair], pair) for pair in zip(symbols, symbols[1:]) if pair in ranks
        ]
        if not candidates:
            break
        symbols = _merge_pair(symbols, min(candidates)[1])
    return symbols


def encode(text: str, vocab: Vocab, add_eos: bool = False) -> List[int]:
    """
    Token ids of `text`. Characters never seen in training map to the unk id.
    """
    ids: List[int] = []
    cache = vocab.piece_cache
    for piece in _pieces(text):
        subwords = cache.get(piece)
        if subwords is None:
            subwords = _apply_merges(piece, vocab)
            cache[piece] = subwords
        ids.extend(vocab.token_to_id.get(s, vocab.unk_id) for s in subwords)
    if add_eos:
        ids.append(vocab.eos_id)
    return ids


def decode(ids: Sequence[int], vocab: Vocab, skip_special: bool = True) -> str:
    """
    Text of `ids`. Pad and eos (and sentinels when `skip_special`) are dropped.
    """
    parts = []
    n_special = 3 + vocab.n_sentinels
    for i in ids:
        i = int(i)
        if not 0 <= i < len(vocab):
            raise VocabularyError(f"token id {i} outside vocabulary of size {len(vocab)}")
        if i in (vocab.pad_id, vocab.eos_id):
            continue
        if i >= 3 and i < n_special:
            if skip_special:
                continue
            parts.append(f"{WORD_START}{vocab.tokens[i]}")
            continue
        parts.append(vocab.tokens[i])
    return "".join(parts).replace(WORD_START, " ").strip()


def save_vocab(vocab: Vocab, directory: Path) -> None:
    """
    Write `vocab.txt` (one token per line, line index = id) and `merges.txt`.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / VOCAB_FILE).write_text("\n".join(vocab.tokens) + "\n", encoding="utf-8")
    (directory / MERGES_FILE).write_text(
        "".join(f"{a} {b}\n" for a, b in vocab.merges), encoding="utf-8"
    )


def load_vocab(directory: Path) -> Vocab:
    directory = Path(directory)
    try:
        tokens = (directory / VOCAB_FILE).read_text(encoding="utf-8").split("\n")
        merge_lines = (directory / MERGES_FILE).read_text(encoding="utf-8").split("\n")
    except FileNotFoundError as e:
        raise VocabularyError(f"vocabulary files missing in {directory}") from e
    if tokens and tokens[-1] == "":
        tokens.pop()
    if tokens[:3] != [PAD, EOS, UNK]:
        raise VocabularyError(f"{directory / VOCAB_FILE} does not start with the special tokens")
    n_sentinels = 0
    while 3 + n_sentinels < len(tokens) and tokens[3 + n_sentinels] == sentinel(n_sentinels):
        n_sentinels += 1
    merges = tuple(tuple(line.split(" ")) for line in merge_lines if line)
    return Vocab(tokens=tuple(tokens), merges=merges, n_sentinels=n_sentinels)


def vocab_reference(vocab: Vocab, path: Optional[Path] = None) -> Dict[str, str]:
    ref = {"fingerprint": vocab.fingerprint(), "size": str(len(vocab))}
    if path is not None:
        ref["path"] = str(path)
    return ref
