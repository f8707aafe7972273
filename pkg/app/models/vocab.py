import hashlib
from dataclasses import dataclass, field
from typing import Dict, Tuple

PAD = "<pad>"
EOS = "</s>"
UNK = "<unk>"
WORD_START = "▁"


def sentinel(i: int) -> str:
    return f"<extra_id_{i}>"


@dataclass(frozen=True)
class Vocab:
    """
    Immutable subword vocabulary.

    `tokens[i]` is the string of id i. Specials occupy the lowest ids in the order
    pad, eos, unk, sentinels. `merges` lists the BPE merges in rank order.
    """
    tokens: Tuple[str, ...]
    merges: Tuple[Tuple[str, str], ...]
    n_sentinels: int
    token_to_id: Dict[str, int] = field(init=False, repr=False, compare=False)
    merge_ranks: Dict[Tuple[str, str], int] = field(init=False, repr=False, compare=False)
    # memo of piece -> subword strings; filled lazily by the tokenizer
    piece_cache: Dict[str, Tuple[str, ...]] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        mapping = {token: i for i, token in enumerate(self.tokens)}
        if len(mapping) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        object.__setattr__(self, "token_to_id", mapping)
        object.__setattr__(self, "merge_ranks", {pair: i for i, pair in enumerate(self.merges)})
        object.__setattr__(self, "piece_cache", {})

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def eos_id(self) -> int:
        return 1

    @property
    def unk_id(self) -> int:
        return 2

    def sentinel_id(self, i: int) -> int:
        if not 0 <= i < self.n_sentinels:
            raise IndexError(f"sentinel {i} out of range (vocab has {self.n_sentinels})")
        return 3 + i

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        digest.update("\n".join(self.tokens).encode())
        digest.update(b"\x00")
        digest.update("\n".join(f"{a} {b}" for a, b in self.merges).encode())
        return digest.hexdigest()
