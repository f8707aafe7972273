from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

UNIT_NORM_TOLERANCE = 1e-6


@dataclass(frozen=True)
class EmbeddingIndex:
    """
    Unit vectors of the training findings, one row per example id.
    """
    ids: Tuple[str, ...]
    vectors: np.ndarray
    split: Optional[str]
    embedder: str

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("index ids must be unique")
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise ValueError("one vector per id required")
        # retrieval scores cosine similarity as a plain dot product
        norms = np.linalg.norm(self.vectors, axis=1)
        if not np.allclose(norms, 1.0, atol=UNIT_NORM_TOLERANCE):
            worst = float(np.max(np.abs(norms - 1.0)))
            raise ValueError(f"index vectors must have unit norm (largest deviation {worst:.3g})")

    def __len__(self) -> int:
        return len(self.ids)
