from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Union

import numpy as np

Key = Union[str, int]


@dataclass(frozen=True)
class RngState:
    """Состояние генератора Philox, адресуемое путём вывода от корневого сида.

    Вся случайность выводится из одного сида: ``RngState(seed).derive("flow", "train")``
    задаёт независимый поток, поэтому любой подэксперимент воспроизводится отдельно.
    """

    seed: int
    path: tuple[Key, ...] = field(default_factory=tuple)

    def derive(self, *keys: Key) -> "RngState":
        return RngState(self.seed, self.path + tuple(keys))

    @property
    def key(self) -> int:
        """128-битный ключ Philox: SHA-256 от сида и пути."""
        text = ":".join([str(self.seed), *(str(k) for k in self.path)])
        digest = hashlib.sha256(text.encode("utf-8")).digest()
        return int.from_bytes(digest[:16], "little")

    def generator(self) -> np.random.Generator:
        """Новый генератор с начала потока; повторный вызов даёт те же числа."""
        return np.random.Generator(np.random.Philox(key=self.key))
