from __future__ import annotations

import string
from dataclasses import dataclass

DEFAULT_CHARACTERS = string.ascii_lowercase + string.digits


@dataclass(frozen=True)
class Charset:
    """Ordered characters with two reserved ids appended: EOS then PAD."""

    characters: str = DEFAULT_CHARACTERS

    def __post_init__(self):
        if len(set(self.characters)) != len(self.characters):
            raise ValueError("charset has duplicate characters")
        if not self.characters:
            raise ValueError("charset is empty")

    @property
    def num_classes(self) -> int:
        return len(self.characters)

    @property
    def eos_id(self) -> int:
        return len(self.characters)

    @property
    def pad_id(self) -> int:
        return len(self.characters) + 1

    @property
    def num_logits(self) -> int:
        return len(self.characters) + 2

    def index(self, ch: str) -> int:
        i = self.characters.find(ch)
        if i < 0:
            raise ValueError(f"character {ch!r} is not in the charset")
        return i

    def can_encode(self, text: str) -> bool:
        return all(ch in self.characters for ch in text)


def encode_transcript(text: str, charset: Charset, max_len: int) -> list[int]:
    """Character ids, then EOS, then PAD up to ``max_len``."""
    if len(text) > max_len - 1:
        raise ValueError(f"transcript {text!r} has {len(text)} characters; at most {max_len - 1} fit")
    bad = sorted({ch for ch in text if ch not in charset.characters})
    if bad:
        raise ValueError(f"characters not in charset: {''.join(bad)!r}")
    ids = [charset.index(ch) for ch in text] + [charset.eos_id]
    return ids + [charset.pad_id] * (max_len - len(ids))


def decode_transcript(ids, charset: Charset) -> str:
    """Characters up to the first EOS (PAD also terminates)."""
    out = []
    for i in ids:
        i = int(i)
        if i >= charset.num_classes:
            break
        out.append(charset.characters[i])
    return "".join(out)
