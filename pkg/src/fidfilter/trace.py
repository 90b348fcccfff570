"""Cross-attention trace container shared by filtering and analysis."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import read_container, write_container


@dataclass
class CrossAttnTrace:
    """Post-softmax cross-attention rows keyed by (token index t, layer l).

    Each entry is ``[h, T]`` (already averaged over beams); ``t`` and ``l``
    are 1-based.
    """

    entries: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    token_to_passage: np.ndarray | None = None
    gold_rank: int | None = None

    def __getitem__(self, key: tuple[int, int]) -> np.ndarray:
        return self.entries[key]

    def __contains__(self, key) -> bool:
        return key in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def tokens(self) -> list[int]:
        return sorted({t for t, _ in self.entries})

    @property
    def layers(self) -> list[int]:
        return sorted({l for _, l in self.entries})

    @property
    def nbytes(self) -> int:
        return sum(a.nbytes for a in self.entries.values())

    def save(self, path: str | Path) -> None:
        tensors = {f"t{t}.l{l}": a for (t, l), a in self.entries.items()}
        if self.token_to_passage is not None:
            tensors["token_to_passage"] = np.asarray(self.token_to_passage, dtype=np.float32)
        write_container(path, tensors, metadata={"gold_rank": self.gold_rank})

    @classmethod
    def load(cls, path: str | Path) -> "CrossAttnTrace":
        tensors, meta = read_container(path)
        t2p = tensors.pop("token_to_passage", None)
        entries = {}
        for name, arr in tensors.items():
            t, l = name.split(".")
            entries[(int(t[1:]), int(l[1:]))] = arr
        return cls(entries=entries,
                   token_to_passage=None if t2p is None else t2p.astype(np.int64),
                   gold_rank=meta.get("gold_rank"))
