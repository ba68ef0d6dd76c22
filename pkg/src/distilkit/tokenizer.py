"""Wordpiece tokenization with [CLS]/[SEP] framing and ## continuations."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ContractError, FormatError

CLS = "[CLS]"
SEP = "[SEP]"
UNK = "[UNK]"
PAD = "[PAD]"
CONTINUATION = "##"

_SPECIALS = (CLS, SEP, UNK, PAD)


class Vocab:
    """Immutable token<->id mapping with dense 0-based ids.

    File format: UTF-8 text, one token per line, id = 0-based line index.
    """

    def __init__(self, tokens):
        tokens = list(tokens)
        self.id_to_token = tokens
        self.token_to_id = {}
        for i, tok in enumerate(tokens):
            if tok in self.token_to_id:
                raise FormatError(f"duplicate vocab token {tok!r} at id {i}")
            self.token_to_id[tok] = i
        for special in _SPECIALS:
            if special not in self.token_to_id:
                raise FormatError(f"vocab missing required special {special}")
        for tok in tokens:
            if tok.startswith(CONTINUATION) and len(tok) <= 2:
                raise FormatError(f"bare continuation marker {tok!r} in vocab")

    def __len__(self):
        return len(self.id_to_token)

    def __contains__(self, token):
        return token in self.token_to_id

    def id(self, token: str) -> int:
        return self.token_to_id[token]

    @property
    def cls_id(self):
        return self.token_to_id[CLS]

    @property
    def sep_id(self):
        return self.token_to_id[SEP]

    @property
    def unk_id(self):
        return self.token_to_id[UNK]

    @property
    def pad_id(self):
        return self.token_to_id[PAD]

    @classmethod
    def from_file(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            lines = f.read().split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)

    def to_file(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(self.id_to_token))
            f.write("\n")

    @classmethod
    def from_tokens(cls, tokens) -> "Vocab":
        """Build a vocab from an iterable of non-special tokens (order kept)."""
        seen = dict.fromkeys(tokens)
        for special in _SPECIALS:
            seen.pop(special, None)
        return cls(list(_SPECIALS) + list(seen))


@dataclass(frozen=True)
class Encoded:
    """One tokenized instance padded to max_len."""

    ids: tuple
    length: int  # real (non-pad) tokens, including [CLS]/[SEP]
    max_len: int


def basic_split(text: str):
    """Lowercase, split on whitespace, and break out punctuation.

    Every non-alphanumeric, non-space character becomes its own token, so
    "ms. jacobson" yields ["ms", ".", "jacobson"].
    """
    tokens = []
    buf = []
    for ch in text.lower():
        if ch.isalnum():
            buf.append(ch)
            continue
        if buf:
            tokens.append("".join(buf))
            buf = []
        if not ch.isspace():
            tokens.append(ch)
    if buf:
        tokens.append("".join(buf))
    return tokens


def wordpiece(word: str, vocab: Vocab):
    """Greedy longest-match-first segmentation of one lowercased word.

    Non-first pieces carry the ## marker.  If any position cannot be matched
    the whole word collapses to [UNK].
    """
    if not word:
        raise ContractError("wordpiece requires a non-empty word")
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        match = None
        while start < end:
            piece = word[start:end]
            if start > 0:
                piece = CONTINUATION + piece
            if piece in vocab:
                match = piece
                break
            end -= 1
        if match is None:
            return [UNK]
        pieces.append(match)
        start = end
    return pieces


def encode(text: str, vocab: Vocab, max_len: int = 128) -> Encoded:
    """[CLS] + pieces + [SEP], truncated to max_len and padded with [PAD]."""
    if max_len < 2:
        raise ContractError(f"max_len must be >= 2, got {max_len}")
    pieces = []
    for word in basic_split(text):
        pieces.extend(wordpiece(word, vocab))
    pieces = pieces[: max_len - 2]
    ids = [vocab.cls_id]
    ids.extend(vocab.token_to_id[p] for p in pieces)
    ids.append(vocab.sep_id)
    length = len(ids)
    ids.extend([vocab.pad_id] * (max_len - length))
    return Encoded(ids=tuple(ids), length=length, max_len=max_len)


def decode_pieces(encoded: Encoded, vocab: Vocab):
    """Token strings for the real (non-pad) positions of an Encoded."""
    return [vocab.id_to_token[i] for i in encoded.ids[: encoded.length]]
