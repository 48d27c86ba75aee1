"""Byte-level BPE tokenizer with the special tokens the ranking encoders need.

Training greedily merges the most frequent adjacent symbol pair, starting from
the 256 byte values, until the vocabulary budget is exhausted or no pair
repeats. Merges never cross whitespace-delimited piece boundaries; a single
leading space is kept attached to the following word so that encoding is
lossless and decode(encode(s)) == s for any UTF-8 string.
"""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, EmptyInputError, ParseError, ValidationError

PAD_ID = 0
CLS_ID = 1
SEP_ID = 2
MASK_ID = 3
UNK_ID = 4

SPECIAL_TOKENS = {"PAD": PAD_ID, "CLS": CLS_ID, "SEP": SEP_ID, "MASK": MASK_ID, "UNK": UNK_ID}
N_SPECIAL = len(SPECIAL_TOKENS)
N_BYTE_SYMBOLS = 256

# label value for positions mask_for_mlm left untouched
UNMASKED = -1

_PIECE_RE = re.compile(r" ?\S+|\s+")

_FILE_VERSION = 1


def _bytes_to_unicode() -> dict[int, str]:
    """Bijection byte value -> printable unicode char (GPT-2 convention)."""
    printable = (
        list(range(ord("!"), ord("~") + 1))
        + list(range(ord("\xa1"), ord("\xac") + 1))
        + list(range(ord("\xae"), ord("\xff") + 1))
    )
    chars = printable[:]
    n = 0
    for b in range(256):
        if b not in printable:
            printable.append(b)
            chars.append(256 + n)
            n += 1
    return dict(zip(printable, (chr(c) for c in chars)))


_BYTE_TO_CHAR = _bytes_to_unicode()
_CHAR_TO_BYTE = {c: b for b, c in _BYTE_TO_CHAR.items()}


def _text_to_symbols(piece: str) -> tuple[str, ...]:
    return tuple(_BYTE_TO_CHAR[b] for b in piece.encode("utf-8"))


@dataclass
class TokenSequence:
    """Token ids plus an aligned {0,1} attention mask."""

    ids: list[int]
    attention_mask: list[int]

    def __post_init__(self):
        if len(self.ids) != len(self.attention_mask):
            raise ValidationError(
                f"ids ({len(self.ids)}) and attention_mask ({len(self.attention_mask)}) differ in length"
            )

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class Tokenizer:
    """A trained byte-level BPE tokenizer.

    ``token_to_id`` maps text-token strings (in the byte-to-unicode alphabet)
    to ids; ids 0..4 are reserved for the special tokens and text tokens start
    at 5. ``merges`` is the ordered merge table learned during training.
    """

    token_to_id: dict[str, int]
    merges: list[tuple[str, str]]
    _merge_ranks: dict[tuple[str, str], int] = field(init=False, repr=False)
    _id_to_token: dict[int, str] = field(init=False, repr=False)
    _piece_cache: dict[str, tuple[int, ...]] = field(init=False, repr=False)

    def __post_init__(self):
        self._merge_ranks = {pair: rank for rank, pair in enumerate(self.merges)}
        self._id_to_token = {i: tok for tok, i in self.token_to_id.items()}
        self._piece_cache = {}

    @property
    def vocab_size(self) -> int:
        return N_SPECIAL + len(self.token_to_id)

    # -- encoding -----------------------------------------------------------

    def _bpe_piece(self, piece: str) -> tuple[int, ...]:
        cached = self._piece_cache.get(piece)
        if cached is not None:
            return cached
        symbols = list(_text_to_symbols(piece))
        while len(symbols) > 1:
            best_rank = None
            best_idx = -1
            for i in range(len(symbols) - 1):
                rank = self._merge_ranks.get((symbols[i], symbols[i + 1]))
                if rank is not None and (best_rank is None or rank < best_rank):
                    best_rank = rank
                    best_idx = i
            if best_rank is None:
                break
            merged = symbols[best_idx] + symbols[best_idx + 1]
            symbols[best_idx : best_idx + 2] = [merged]
        ids = tuple(self.token_to_id[s] for s in symbols)
        self._piece_cache[piece] = ids
        return ids

    def encode(self, text: str) -> TokenSequence:
        """Encode plain text; byte-level fallback means there is never an OOV."""
        ids: list[int] = []
        for piece in _PIECE_RE.findall(text):
            ids.extend(self._bpe_piece(piece))
        return TokenSequence(ids=ids, attention_mask=[1] * len(ids))

    def decode(self, seq: TokenSequence | list[int]) -> str:
        """Inverse of encode; special-token ids are skipped."""
        ids = seq.ids if isinstance(seq, TokenSequence) else seq
        data = bytearray()
        for i in ids:
            if i < N_SPECIAL:
                continue
            token = self._id_to_token.get(i)
            if token is None:
                raise ValidationError(f"unknown token id {i} (vocab size {self.vocab_size})")
            data.extend(_CHAR_TO_BYTE[c] for c in token)
        return data.decode("utf-8", errors="replace")

    def encode_pair(self, query: str, doc_text: str, max_len: int) -> TokenSequence:
        """[CLS] query-ids [SEP] doc-ids, truncated doc-first to max_len."""
        if max_len < 4:
            raise ConfigurationError(f"max_len must be >= 4 for pair encoding, got {max_len}")
        q_ids = self.encode(query).ids
        d_ids = self.encode(doc_text).ids
        budget = max_len - 2
        if len(q_ids) + len(d_ids) > budget:
            d_ids = d_ids[: max(0, budget - len(q_ids))]
        if len(q_ids) + len(d_ids) > budget:
            q_ids = q_ids[:budget]
        ids = [CLS_ID] + q_ids + [SEP_ID] + d_ids
        return TokenSequence(ids=ids, attention_mask=[1] * len(ids))

    def encode_single(self, text: str, max_len: int) -> TokenSequence:
        """[CLS] text-ids, truncated to max_len; the bi-encoder input layout."""
        if max_len < 1:
            raise ConfigurationError(f"max_len must be >= 1, got {max_len}")
        ids = [CLS_ID] + self.encode(text).ids[: max_len - 1]
        return TokenSequence(ids=ids, attention_mask=[1] * len(ids))

    # -- persistence --------------------------------------------------------

    def to_json_bytes(self) -> bytes:
        payload = {
            "version": _FILE_VERSION,
            "special_tokens": SPECIAL_TOKENS,
            "vocab": self.token_to_id,
            "merges": [list(pair) for pair in self.merges],
        }
        return (json.dumps(payload, ensure_ascii=True, separators=(",", ":")) + "\n").encode("ascii")

    def content_hash(self) -> str:
        return hashlib.blake2b(self.to_json_bytes(), digest_size=8).hexdigest()

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_json_bytes())


def load_tokenizer(path) -> Tokenizer:
    try:
        with open(path, "rb") as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"tokenizer file is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict) or "vocab" not in payload or "merges" not in payload:
        raise ParseError("tokenizer file missing 'vocab' or 'merges'")
    if payload.get("version") != _FILE_VERSION:
        raise ParseError(f"unsupported tokenizer file version {payload.get('version')!r}")
    if payload.get("special_tokens") != SPECIAL_TOKENS:
        raise ParseError("tokenizer file special_tokens table does not match this build")
    merges = [tuple(pair) for pair in payload["merges"]]
    return Tokenizer(token_to_id=dict(payload["vocab"]), merges=merges)


def train_bpe(corpus: list[str], vocab_size: int) -> Tokenizer:
    """Train a byte-level BPE tokenizer.

    Greedy most-frequent-pair merging over whitespace-delimited pieces;
    equal-frequency ties break to the lexicographically smallest pair so
    retraining is reproducible. Stops early once no adjacent pair occurs
    twice.
    """
    if not corpus:
        raise EmptyInputError("cannot train a tokenizer on an empty corpus")
    min_size = N_SPECIAL + N_BYTE_SYMBOLS
    if vocab_size <= min_size:
        raise ConfigurationError(
            f"vocab_size must exceed {min_size} (256 byte symbols + {N_SPECIAL} specials), got {vocab_size}"
        )

    token_to_id: dict[str, int] = {}
    for b in range(N_BYTE_SYMBOLS):
        token_to_id[_BYTE_TO_CHAR[b]] = N_SPECIAL + b

    piece_counts = Counter()
    for line in corpus:
        piece_counts.update(_PIECE_RE.findall(line))
    sequences: list[tuple[list[str], int]] = [
        (list(_text_to_symbols(piece)), count) for piece, count in sorted(piece_counts.items())
    ]

    merges: list[tuple[str, str]] = []
    while N_SPECIAL + len(token_to_id) < vocab_size:
        pair_counts = Counter()
        for symbols, count in sequences:
            for i in range(len(symbols) - 1):
                pair_counts[(symbols[i], symbols[i + 1])] += count
        if not pair_counts:
            break
        # lexicographically smallest among the most frequent pairs
        best_pair = min(pair_counts, key=lambda p: (-pair_counts[p], p))
        if pair_counts[best_pair] < 2:
            break
        left, right = best_pair
        merged = left + right
        merges.append(best_pair)
        token_to_id[merged] = N_SPECIAL + len(token_to_id)
        for symbols, _ in sequences:
            i = 0
            while i < len(symbols) - 1:
                if symbols[i] == left and symbols[i + 1] == right:
                    symbols[i : i + 2] = [merged]
                else:
                    i += 1
    return Tokenizer(token_to_id=token_to_id, merges=merges)


def mask_for_mlm(
    seq: TokenSequence, rate: float = 0.15, seed: int = 0
) -> tuple[TokenSequence, list[int]]:
    """Replace each non-special position by MASK independently with prob ``rate``.

    Returns the masked sequence and a label list carrying the original id at
    masked positions and ``UNMASKED`` (-1) elsewhere. Deterministic given seed.
    """
    if not 0.0 <= rate <= 1.0:
        raise ConfigurationError(f"mask rate must lie in [0, 1], got {rate}")
    rng = np.random.default_rng(seed)
    draws = rng.random(len(seq.ids))
    masked_ids = list(seq.ids)
    labels = [UNMASKED] * len(seq.ids)
    for pos, token_id in enumerate(seq.ids):
        if token_id < N_SPECIAL:
            continue
        if draws[pos] < rate:
            labels[pos] = token_id
            masked_ids[pos] = MASK_ID
    return TokenSequence(ids=masked_ids, attention_mask=list(seq.attention_mask)), labels
