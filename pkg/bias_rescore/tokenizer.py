# stdlib
import json
import logging
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

# 3p
from pydantic import BaseModel, ConfigDict, PrivateAttr, model_validator


log = logging.getLogger(__name__)


class SpecialToken(str, Enum):
    """Reserved tokens. The value is the canonical surface string."""

    BOS = "<s>"
    EOS = "</s>"
    PAD = "<pad>"
    OPEN_PER = "<PER>"
    CLOSE_PER = "</PER>"
    OPEN_LOC = "<LOC>"
    CLOSE_LOC = "</LOC>"
    OPEN_ORG = "<ORG>"
    CLOSE_ORG = "</ORG>"
    INPUT_MARK = " Input: "
    EXAMPLE_MARK = "<EX>"


SPECIAL_SURFACES: list[str] = [token.value for token in SpecialToken]

# Longest surface first so the scanner never stops at a shorter prefix.
_MATCH_ORDER = sorted(SpecialToken, key=lambda t: len(t.value), reverse=True)


class Vocab(BaseModel):
    """Character vocabulary with the special tokens in the lowest ids."""

    model_config = ConfigDict(frozen=True)

    specials: list[str]
    chars: list[str]

    _stoi: dict[str, int] = PrivateAttr(default_factory=dict)
    _itos: list[str] = PrivateAttr(default_factory=list)

    @model_validator(mode="after")
    def _check_layout(self) -> "Vocab":
        if self.specials != SPECIAL_SURFACES:
            raise ValueError("vocab specials do not match the reserved special tokens")
        for ch in self.chars:
            if len(ch) != 1:
                raise ValueError(f"vocab entry {ch!r} is not a single character")
        if self.chars != sorted(set(self.chars)):
            raise ValueError("vocab characters must be unique and in code-point order")
        return self

    def model_post_init(self, __context) -> None:
        self._itos = [*self.specials, *self.chars]
        self._stoi = {symbol: i for i, symbol in enumerate(self._itos)}

    @property
    def vocab_size(self) -> int:
        return len(self._itos)

    def special_id(self, token: SpecialToken) -> int:
        return self._stoi[token.value]

    def id(self, symbol: str) -> int:
        return self._stoi[symbol]

    def surface(self, token_id: int) -> str:
        if not 0 <= token_id < len(self._itos):
            raise ValueError(
                f"token id {token_id} out of range for vocab of size {len(self._itos)}"
            )
        return self._itos[token_id]

    def is_special(self, token_id: int) -> bool:
        return 0 <= token_id < len(self.specials)

    def to_json(self) -> str:
        return json.dumps({"specials": self.specials, "chars": self.chars})

    @classmethod
    def from_json(cls, data: str) -> "Vocab":
        return cls.model_validate(json.loads(data))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def build_vocab(corpus_texts: Iterable[str]) -> Vocab:
    chars: set[str] = set()
    for text in corpus_texts:
        chars.update(text)
    if not chars:
        raise ValueError("empty corpus")
    vocab = Vocab(specials=SPECIAL_SURFACES, chars=sorted(chars))
    log.info(f"Built vocab with {vocab.vocab_size} symbols ({len(chars)} characters)")
    return vocab


def encode(text: str, vocab: Vocab) -> list[int]:
    """Encode text; embedded special-token surfaces collapse to their single id."""
    ids: list[int] = []
    i = 0
    while i < len(text):
        for token in _MATCH_ORDER:
            if text.startswith(token.value, i):
                ids.append(vocab.special_id(token))
                i += len(token.value)
                break
        else:
            ch = text[i]
            try:
                ids.append(vocab.id(ch))
            except KeyError:
                raise ValueError(f"unknown character {ch!r} at position {i}") from None
            i += 1
    return ids


def decode(ids: Sequence[int], vocab: Vocab) -> str:
    return "".join(vocab.surface(int(i)) for i in ids)
