"""Closed word-level tokenizer covering the system prompt and response format."""

from __future__ import annotations

import re
from importlib import resources

SPECIALS = ("<pad>", "<unk>", "<eos>", "<vid>", "<think>", "</think>", "<answer>", "</answer>")

# Words used by the gold reasoning spans of the supervised corpus.
THINK_WORDS = (
    "i", "see", "a", "the", "an", "object", "moves", "moving", "across", "scene",
    "frames", "watched", "looked", "at", "bright", "blob", "background", "dark",
    "over", "time", "through", "sequence", "check", "checked",
)

COMPACT_PROMPT = "Is there any anomaly in the video? Answer:"

_SPECIAL = r"<pad>|<unk>|<eos>|<vid>|</?think>|</?answer>"
_PIECE = re.compile(
    rf"{_SPECIAL}|\s(?={_SPECIAL})"
    r"| ?[A-Za-z]+| ?\d| ?[^\sA-Za-z\d]|\n|\s"
)


def system_prompt() -> str:
    """The canonical system prompt, verbatim."""
    return resources.files("copra").joinpath("assets/system_prompt.txt").read_text(encoding="utf-8")


def split_pieces(text: str) -> list[str]:
    pieces = _PIECE.findall(text)
    if "".join(pieces) != text:
        raise ValueError("text contains characters outside the tokenizer alphabet")
    return pieces


class Tokenizer:
    """Maps text to ids over a fixed vocabulary.

    Pieces are specials, words (with an optional leading space), single digits,
    single punctuation marks and whitespace characters. Anything outside the
    covered vocabulary encodes to ``<unk>``.
    """

    def __init__(self, extra_text: str = ""):
        pieces: set[str] = set()
        for text in (system_prompt(), COMPACT_PROMPT, extra_text):
            pieces.update(split_pieces(text))
        for w in THINK_WORDS:
            pieces.update((w, " " + w))
        for d in "0123456789":
            pieces.update((d, " " + d))
        for p in ".,:;?!'\"()[]{}*-_/":
            pieces.update((p, " " + p))
        pieces.update(("\n", " "))
        pieces.difference_update(SPECIALS)
        self.itos: list[str] = list(SPECIALS) + sorted(pieces)
        self.stoi: dict[str, int] = {s: i for i, s in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def vocab_size(self) -> int:
        return len(self.itos)

    def id(self, piece: str) -> int:
        return self.stoi[piece]

    def encode(self, text: str) -> list[int]:
        unk = self.stoi["<unk>"]
        return [self.stoi.get(p, unk) for p in split_pieces(text)]

    def decode(self, ids, stop_at_eos: bool = True) -> str:
        out = []
        eos = self.stoi["<eos>"]
        for i in ids:
            i = int(i)
            if stop_at_eos and i == eos:
                break
            out.append(self.itos[i])
        return "".join(out)

    def is_covered(self, text: str) -> bool:
        try:
            return all(p in self.stoi for p in split_pieces(text))
        except ValueError:
            return False
