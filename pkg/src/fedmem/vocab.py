"""Word vocabulary with fixed special tokens."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

BOS = 0
EOS = 1
OOV = 2
SPECIAL_TOKENS = ("<bos>", "<eos>", "<oov>")
NUM_SPECIAL = len(SPECIAL_TOKENS)


@dataclass(frozen=True)
class Vocabulary:
    """Bijection between tokens and indices ``[0, size)``.

    Indices 0, 1, 2 are always ``<bos>``, ``<eos>`` and ``<oov>``; ordinary
    words follow in the order given (rank order for a frequency vocabulary).
    """

    words: tuple[str, ...]
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.words[:NUM_SPECIAL]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the special tokens")
        index = {w: i for i, w in enumerate(self.words)}
        if len(index) != len(self.words):
            raise ValueError("vocabulary tokens must be unique")
        object.__setattr__(self, "_index", index)

    @classmethod
    def from_words(cls, words: Iterable[str]) -> Vocabulary:
        """Build from ordinary words; special tokens are prepended."""
        ordinary = [w for w in words if w not in SPECIAL_TOKENS]
        return cls(SPECIAL_TOKENS + tuple(ordinary))

    @classmethod
    def synthetic(cls, size: int) -> Vocabulary:
        """Vocabulary of ``size`` tokens with placeholder words ``w3, w4, ...``."""
        if size <= NUM_SPECIAL:
            raise ValueError(f"vocabulary size must exceed {NUM_SPECIAL}")
        return cls(SPECIAL_TOKENS + tuple(f"w{i}" for i in range(NUM_SPECIAL, size)))

    @property
    def size(self) -> int:
        return len(self.words)

    def __len__(self) -> int:
        return len(self.words)

    @property
    def ordinary_ids(self) -> range:
        return range(NUM_SPECIAL, self.size)

    def index(self, word: str) -> int:
        return self._index.get(word, OOV)

    def encode(self, sentence: str | Sequence[str]) -> list[int]:
        tokens = sentence.split() if isinstance(sentence, str) else sentence
        return [self.index(w) for w in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.words[i] for i in ids]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.words) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> Vocabulary:
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        words = [w for w in lines if w]
        if tuple(words[:NUM_SPECIAL]) == SPECIAL_TOKENS:
            return cls(tuple(words))
        return cls.from_words(words)
