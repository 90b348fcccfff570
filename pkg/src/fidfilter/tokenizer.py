"""Whitespace tokenizer with byte fallback over a fixed vocabulary file.

Ids 0..2 are ``<pad>``, ``</s>``, ``<unk>``; the next 256 are byte tokens
``<0xNN>``; the rest are whole lowercase words. Out-of-vocabulary words are
spelled as UTF-8 bytes, with a ``<0x20>`` between two consecutive spelled
words so decoding can recover the space.
"""
from __future__ import annotations

from importlib import resources
from pathlib import Path

PAD, EOS, UNK = "<pad>", "</s>", "<unk>"
N_SPECIAL = 3
BYTE_OFFSET = N_SPECIAL


class Tokenizer:
    def __init__(self, words: list[str]):
        specials = [PAD, EOS, UNK]
        byte_tokens = [f"<0x{b:02X}>" for b in range(256)]
        self.pieces = specials + byte_tokens + list(words)
        self.index = {p: i for i, p in enumerate(self.pieces)}
        if len(self.index) != len(self.pieces):
            raise ValueError("duplicate entries in vocabulary")

    @classmethod
    def from_file(cls, path: str | Path) -> "Tokenizer":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if lines[:N_SPECIAL + 256] != [PAD, EOS, UNK] + [f"<0x{b:02X}>" for b in range(256)]:
            raise ValueError(f"{path}: vocabulary must start with the special and byte tokens")
        return cls([ln for ln in lines[N_SPECIAL + 256 :] if ln])

    @classmethod
    def default(cls) -> "Tokenizer":
        ref = resources.files("fidfilter") / "data" / "vocab.txt"
        with resources.as_file(ref) as path:
            return cls.from_file(path)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.pieces) + "\n", encoding="utf-8")

    @property
    def vocab_size(self) -> int:
        return len(self.pieces)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def eos_id(self) -> int:
        return 1

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        prev_spelled = False
        for word in text.lower().split():
            wid = self.index.get(word)
            if wid is not None and wid >= BYTE_OFFSET + 256:
                ids.append(wid)
                prev_spelled = False
                continue
            if prev_spelled:
                ids.append(BYTE_OFFSET + 0x20)
            ids.extend(BYTE_OFFSET + b for b in word.encode("utf-8"))
            prev_spelled = True
        return ids

    def decode(self, ids) -> str:
        words: list[str] = []
        buf = bytearray()
        for i in ids:
            i = int(i)
            if BYTE_OFFSET <= i < BYTE_OFFSET + 256:
                buf.append(i - BYTE_OFFSET)
                continue
            if buf:
                words.append(buf.decode("utf-8", errors="replace"))
                buf.clear()
            if i < N_SPECIAL:
                continue
            words.append(self.pieces[i] if i < len(self.pieces) else UNK)
        if buf:
            words.append(buf.decode("utf-8", errors="replace"))
        return " ".join(words)
