"""Token vocabulary and the splitter shared by the decoder and the metrics.

`split_text` is the single source of truth for turning text into tokens:
mark templates ("<Region k>", "<Mark k>") are matched greedily as single
tokens, words and digit runs are kept whole, newlines survive as their own
token and any other non-space character stands alone. `detokenize` inverts
the split up to whitespace normalisation, and reproduces the canonical
answer grammar exactly (no space before ':', ',', ']' etc., none at all
inside coordinate brackets).
"""

from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Iterable, Sequence

MAX_MARKS = 32

BOS = "<bos>"
EOS = "<eos>"
SEP = "<sep>"
UNK = "<unk>"
IMG = "<img>"
VP = "<vp>"

RESERVED_TOKENS: tuple[str, ...] = (
    (BOS, EOS, SEP, UNK, IMG, VP)
    + tuple(f"<Region {k}>" for k in range(1, MAX_MARKS + 1))
    + tuple(f"<Mark {k}>" for k in range(1, MAX_MARKS + 1))
)

_TOKEN_RE = re.compile(
    r"<(?:Region|Mark) [0-9]+>|<(?:bos|eos|sep|unk|img|vp)>|[A-Za-z]+|[0-9]+|\n|[^\sA-Za-z0-9]"
)

_NO_SPACE_BEFORE = {":", ",", ".", ";", "!", "?", ")", "]", "[", "\n"}
_NO_SPACE_AFTER = {"[", "(", "\n"}


class VocabError(ValueError):
    pass


def split_text(text: str) -> list[str]:
    """Deterministic whitespace-and-punctuation split (see module docstring)."""
    return _TOKEN_RE.findall(text)


def detokenize(tokens: Sequence[str]) -> str:
    out: list[str] = []
    suppress_space = True  # no leading space
    quote_open = False
    bracket_depth = 0
    for tok in tokens:
        lead = not suppress_space
        if tok in _NO_SPACE_BEFORE or bracket_depth > 0:
            lead = False
        if tok == "'" and quote_open:
            lead = False
        if lead:
            out.append(" ")
        out.append(tok)
        suppress_space = tok in _NO_SPACE_AFTER
        if tok == "'":
            quote_open = not quote_open
            if quote_open:
                suppress_space = True
        elif tok == "[":
            bracket_depth += 1
        elif tok == "]":
            bracket_depth = max(0, bracket_depth - 1)
    return "".join(out)


class Vocab:
    """Contiguous token ids: the reserved block first, then corpus tokens."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[: len(RESERVED_TOKENS)]) != RESERVED_TOKENS:
            raise VocabError("vocab must start with the reserved token block")
        if len(set(tokens)) != len(tokens):
            raise VocabError("duplicate tokens in vocab")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    @classmethod
    def from_corpus(cls, texts: Iterable[str]) -> "Vocab":
        seen: set[str] = set()
        for text in texts:
            seen.update(split_text(text))
        extra = sorted(seen - set(RESERVED_TOKENS))
        return cls(list(RESERVED_TOKENS) + extra)

    def id(self, token: str) -> int:
        return self.index.get(token, self.index[UNK])

    def encode(self, text: str) -> list[int]:
        return [self.id(t) for t in split_text(text)]

    def decode(self, ids: Sequence[int]) -> str:
        bad = [i for i in ids if not 0 <= i < len(self.tokens)]
        if bad:
            raise VocabError(f"token ids out of range: {bad[:5]}")
        return detokenize([self.tokens[i] for i in ids])

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps({"version": 1, "tokens": self.tokens}, indent=0) + "\n"
        )

    @classmethod
    def from_json(cls, path: str | Path) -> "Vocab":
        payload = json.loads(Path(path).read_text())
        if payload.get("version") != 1:
            raise VocabError(f"{path}: unsupported vocab version {payload.get('version')}")
        return cls(payload["tokens"])
