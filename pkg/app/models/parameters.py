import hashlib
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, NamedTuple, Optional

import numpy as np

from app.schemas.adapter import AdapterConfig
from app.schemas.model import ModelConfig

# Name suffixes of tensors introduced by adapters
ADAPTER_SUFFIXES = (".lora_a", ".lora_b", ".prefix_k", ".prefix_v")


def is_adapter_tensor(name: str) -> bool:
    return name.endswith(ADAPTER_SUFFIXES)


class ParameterCounts(NamedTuple):
    total: int
    trainable: int


@dataclass
class Parameters:
    """
    Named tensors of one model plus the per-tensor trainable mask.

    `adapter` records the adapter attached to the tensors, if any.
    """
    config: ModelConfig
    tensors: Dict[str, np.ndarray]
    trainable: Dict[str, bool]
    adapter: Optional[AdapterConfig] = None
    metadata: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        missing = set(self.trainable) - set(self.tensors)
        if missing:
            raise ValueError(f"trainable mask names unknown tensors: {sorted(missing)}")
        for name in self.tensors:
            self.trainable.setdefault(name, False)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def copy(self) -> "Parameters":
        return Parameters(
            config=self.config,
            tensors={k: v.copy() for k, v in self.tensors.items()},
            trainable=dict(self.trainable),
            adapter=self.adapter,
            metadata=dict(self.metadata),
        )

    def trainable_names(self) -> List[str]:
        return sorted(name for name, flag in self.trainable.items() if flag)

    def freeze_all(self) -> None:
        for name in self.trainable:
            self.trainable[name] = False

    def set_trainable(self, names: Iterable[str], flag: bool = True) -> None:
        for name in names:
            if name not in self.tensors:
                raise KeyError(name)
            self.trainable[name] = flag

    def add(self, name: str, value: np.ndarray, trainable: bool) -> None:
        self.tensors[name] = value
        self.trainable[name] = trainable

    def remove(self, name: str) -> np.ndarray:
        self.trainable.pop(name, None)
        return self.tensors.pop(name)

    def counts(self) -> ParameterCounts:
        """
        Base-model total and trainable count, from the mask.
        """
        total = sum(v.size for k, v in self.tensors.items() if not is_adapter_tensor(k))
        trainable = sum(self.tensors[k].size for k in self.trainable_names())
        return ParameterCounts(total=int(total), trainable=int(trainable))

    def fingerprint(self, names: Optional[Iterable[str]] = None) -> str:
        """
        Content hash over the selected tensors (all by default).
        """
        digest = hashlib.sha256()
        for name in sorted(names if names is not None else self.tensors):
            array = np.ascontiguousarray(self.tensors[name])
            digest.update(name.encode())
            digest.update(str(array.shape).encode())
            digest.update(array.tobytes())
        return digest.hexdigest()
