"""Character-level BPE over raw SMILES with an atomic family of size-hinted
sentinel tokens.

Sentinel surface forms::

    [BOS] [EOS] [PAD]
    <mask_i:n>      mask i (1..n_max) whose span has n (1..l_max) characters
    <s2s_1_t:       opens the seq2seq construct with target length t
    >               closes the seq2seq construct

A seq2seq construct ``<s2s_1_2:Nc1cc>`` is therefore three pieces: the
opening sentinel, the ordinary BPE ids of ``Nc1cc`` and the closing
sentinel.  Sentinels occupy ids ``[0, n_sentinels)``; the fixed base
alphabet follows, then one id per merge in training order.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._util import sha256_bytes
from .validation import check_text_list

FORMAT_HEADER = "CMSVOCAB v1"

# printable ASCII without the sentinel delimiters '<' and '>'
BASE_ALPHABET = tuple(chr(c) for c in range(33, 127) if chr(c) not in "<>")


class TokenizerError(ValueError):
    pass


class EmptyCorpus(TokenizerError):
    pass


class MalformedSentinel(TokenizerError):
    pass


class UnknownId(TokenizerError):
    pass


class UnknownSymbol(TokenizerError):
    pass


class FormatVersionMismatch(TokenizerError):
    pass


class Sentinel(NamedTuple):
    kind: str  # BOS | EOS | PAD | MASK | S2S_OPEN | S2S_CLOSE
    index: int = 0
    size: int = 0

    @property
    def text(self) -> str:
        if self.kind in ("BOS", "EOS", "PAD"):
            return f"[{self.kind}]"
        if self.kind == "MASK":
            return f"<mask_{self.index}:{self.size}>"
        if self.kind == "S2S_OPEN":
            return f"<s2s_{self.index}_{self.size}:"
        return ">"


def mask_text(index: int, size: int) -> str:
    return f"<mask_{index}:{size}>"


def s2s_open_text(target: int, index: int = 1) -> str:
    return f"<s2s_{index}_{target}:"


S2S_CLOSE = ">"

_SENTINEL_RE = re.compile(
    r"\[BOS\]|\[EOS\]|\[PAD\]|<mask_(?P<mi>[1-9]\d*):(?P<mn>[1-9]\d*)>"
    r"|<s2s_(?P<si>[1-9]\d*)_(?P<st>[1-9]\d*):|>"
)


def sentinel_family(n_max: int = 2, l_max: int = 32, s_max: int = 1) -> list[Sentinel]:
    """All sentinels in id order."""
    fam = [Sentinel("PAD"), Sentinel("BOS"), Sentinel("EOS"), Sentinel("S2S_CLOSE")]
    fam += [Sentinel("MASK", i, n) for i in range(1, n_max + 1) for n in range(1, l_max + 1)]
    fam += [Sentinel("S2S_OPEN", i, t) for i in range(1, s_max + 1) for t in range(1, l_max + 1)]
    return fam


@dataclass(frozen=True)
class Vocabulary:
    merges: tuple[tuple[str, str], ...]
    n_max: int = 2
    l_max: int = 32
    s_max: int = 1
    token_to_id: dict[str, int] = field(init=False, repr=False, compare=False)
    id_to_token: tuple[str, ...] = field(init=False, repr=False, compare=False)
    sentinels: tuple[Sentinel, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        sentinels = tuple(sentinel_family(self.n_max, self.l_max, self.s_max))
        tokens = [s.text for s in sentinels] + list(BASE_ALPHABET)
        tokens += [a + b for a, b in self.merges]
        table: dict[str, int] = {}
        for i, tok in enumerate(tokens[: len(sentinels)]):
            table[tok] = i
        # merged strings may repeat through different merge paths; first id wins
        for i in range(len(sentinels), len(tokens)):
            table.setdefault(tokens[i], i)
        object.__setattr__(self, "sentinels", sentinels)
        object.__setattr__(self, "id_to_token", tuple(tokens))
        object.__setattr__(self, "token_to_id", table)
        object.__setattr__(self, "_ranks", {pair: r for r, pair in enumerate(self.merges)})
        object.__setattr__(self, "_cache", {})
        object.__setattr__(self, "_merge_ids", {pair: len(sentinels) + len(BASE_ALPHABET) + r
                                                for r, pair in enumerate(self.merges)})

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    @property
    def n_sentinels(self) -> int:
        return len(self.sentinels)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def bos_id(self) -> int:
        return 1

    @property
    def eos_id(self) -> int:
        return 2

    @property
    def s2s_close_id(self) -> int:
        return 3

    def mask_id(self, index: int, size: int) -> int:
        if not (1 <= index <= self.n_max and 1 <= size <= self.l_max):
            raise MalformedSentinel(f"mask sentinel out of range: index={index} size={size}")
        return 4 + (index - 1) * self.l_max + (size - 1)

    def s2s_open_id(self, target: int, index: int = 1) -> int:
        if not (1 <= index <= self.s_max and 1 <= target <= self.l_max):
            raise MalformedSentinel(f"s2s sentinel out of range: index={index} target={target}")
        return 4 + self.n_max * self.l_max + (index - 1) * self.l_max + (target - 1)

    def is_sentinel(self, token_id: int) -> bool:
        return 0 <= token_id < self.n_sentinels

    def sentinel(self, token_id: int) -> Sentinel:
        return self.sentinels[token_id]

    def token_text(self, token_id: int) -> str:
        if not 0 <= token_id < self.size:
            raise UnknownId(f"id {token_id} outside [0, {self.size})")
        return self.id_to_token[token_id]

    def serialize(self) -> bytes:
        lines = [FORMAT_HEADER]
        lines += [f"{a}\t{b}" for a, b in self.merges]
        lines.append(f"sentinels N_max={self.n_max} L_max={self.l_max}")
        return ("\n".join(lines) + "\n").encode("ascii")

    @property
    def sha256(self) -> str:
        return sha256_bytes(self.serialize())

    # -- encoding -----------------------------------------------------------

    def _bpe(self, segment: str) -> tuple[int, ...]:
        cache = self._cache
        out = cache.get(segment)
        if out is None:
            out = _bpe_ids(self, segment)
            if len(cache) < 500_000:
                cache[segment] = out
        return out

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        pos = 0
        for m in _SENTINEL_RE.finditer(text):
            if m.start() > pos:
                ids.extend(self._bpe(text[pos:m.start()]))
            ids.append(self._sentinel_id(m))
            pos = m.end()
        if pos < len(text):
            ids.extend(self._bpe(text[pos:]))
        return ids

    def _sentinel_id(self, m: re.Match) -> int:
        tok = m.group(0)
        if tok == "[PAD]":
            return self.pad_id
        if tok == "[BOS]":
            return self.bos_id
        if tok == "[EOS]":
            return self.eos_id
        if tok == ">":
            return self.s2s_close_id
        if m.group("mi") is not None:
            return self.mask_id(int(m.group("mi")), int(m.group("mn")))
        return self.s2s_open_id(int(m.group("st")), int(m.group("si")))

    def decode(self, ids: Iterable[int]) -> str:
        return "".join(self.token_text(int(i)) for i in ids)


def _bpe_ids(vocab: Vocabulary, segment: str) -> tuple[int, ...]:
    if "<" in segment:
        raise MalformedSentinel(f"malformed sentinel in {segment!r}")
    table = vocab.token_to_id
    syms: list[tuple[str, int]] = []
    for ch in segment:
        tid = table.get(ch)
        if tid is None or tid < vocab.n_sentinels:
            raise UnknownSymbol(f"character {ch!r} is not in the base alphabet")
        syms.append((ch, tid))
    ranks = vocab._ranks
    merge_ids = vocab._merge_ids
    # ids follow the merge that produced each symbol, so equal strings reached
    # through different merge paths keep their own ids
    while len(syms) > 1:
        best = None
        best_rank = None
        for (a, _), (b, _) in zip(syms, syms[1:]):
            r = ranks.get((a, b))
            if r is not None and (best_rank is None or r < best_rank):
                best, best_rank = (a, b), r
        if best is None:
            break
        new_id = merge_ids[best]
        merged = []
        i = 0
        while i < len(syms):
            if i + 1 < len(syms) and (syms[i][0], syms[i + 1][0]) == best:
                merged.append((best[0] + best[1], new_id))
                i += 2
            else:
                merged.append(syms[i])
                i += 1
        syms = merged
    return tuple(i for _, i in syms)


def _merge_pair(symbols: list[str], pair: tuple[str, str]) -> list[str]:
    out = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == pair[0] and symbols[i + 1] == pair[1]:
            out.append(pair[0] + pair[1])
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


def _pair_counts(symbols: list[str]) -> dict[tuple[str, str], int]:
    counts: dict[tuple[str, str], int] = {}
    for pair in zip(symbols, symbols[1:]):
        counts[pair] = counts.get(pair, 0) + 1
    return counts


def train_bpe(corpus: Iterable[str], target_vocab_size: int = 1024, *, n_max: int = 2,
              l_max: int = 32) -> Vocabulary:
    """Learn merges until the vocabulary reaches ``target_vocab_size`` or no
    adjacent pair occurs at least twice.

    Ties between equally frequent pairs go to the lexicographically smallest
    ``(left, right)`` tuple.
    """
    word_freq: dict[str, int] = {}
    for line in corpus:
        if line:
            word_freq[line] = word_freq.get(line, 0) + 1
    if not word_freq:
        raise EmptyCorpus("corpus contains no non-empty strings")
    n_fixed = len(sentinel_family(n_max, l_max)) + len(BASE_ALPHABET)
    if target_vocab_size <= n_fixed:
        raise ValueError(f"target_vocab_size must exceed {n_fixed} (alphabet + sentinels)")
    for word in word_freq:
        bad = set(word) - set(BASE_ALPHABET)
        if bad:
            raise UnknownSymbol(f"characters {sorted(bad)} are not in the base alphabet")

    words = [list(w) for w in sorted(word_freq)]
    freqs = [word_freq["".join(w)] for w in words]
    counts: dict[tuple[str, str], int] = {}
    where: dict[tuple[str, str], set[int]] = {}
    for wi, w in enumerate(words):
        for pair, c in _pair_counts(w).items():
            counts[pair] = counts.get(pair, 0) + c * freqs[wi]
            where.setdefault(pair, set()).add(wi)

    merges: list[tuple[str, str]] = []
    while n_fixed + len(merges) < target_vocab_size and counts:
        best = min(counts, key=lambda p: (-counts[p], p))
        if counts[best] < 2:
            break
        merges.append(best)
        for wi in sorted(where.get(best, ())):
            old = words[wi]
            for pair, c in _pair_counts(old).items():
                counts[pair] -= c * freqs[wi]
                if counts[pair] == 0:
                    del counts[pair]
                where[pair].discard(wi)
            new = _merge_pair(old, best)
            words[wi] = new
            for pair, c in _pair_counts(new).items():
                counts[pair] = counts.get(pair, 0) + c * freqs[wi]
                where.setdefault(pair, set()).add(wi)
    return Vocabulary(tuple(merges), n_max=n_max, l_max=l_max)


def encode(text: str, vocab: Vocabulary) -> list[int]:
    return vocab.encode(text)


def decode(ids: Iterable[int], vocab: Vocabulary) -> str:
    return vocab.decode(ids)


def save_vocab(vocab: Vocabulary, path) -> None:
    with open(path, "wb") as fh:
        fh.write(vocab.serialize())


def parse_vocab(data: bytes) -> Vocabulary:
    text = data.decode("ascii")
    lines = text.split("\n")
    if not lines or lines[0] != FORMAT_HEADER:
        raise FormatVersionMismatch(f"expected header {FORMAT_HEADER!r}, got {lines[0]!r}")
    if lines[-1] == "":
        lines = lines[:-1]
    m = re.fullmatch(r"sentinels N_max=(\d+) L_max=(\d+)", lines[-1])
    if not m:
        raise TokenizerError("missing sentinel-config line")
    merges = []
    for line in lines[1:-1]:
        left, sep, right = line.partition("\t")
        if not sep or not left or not right:
            raise TokenizerError(f"bad merge line {line!r}")
        merges.append((left, right))
    return Vocabulary(tuple(merges), n_max=int(m.group(1)), l_max=int(m.group(2)))


def load_vocab(path) -> Vocabulary:
    with open(path, "rb") as fh:
        return parse_vocab(fh.read())


class BPETokenizer(BaseEstimator, TransformerMixin):
    """Estimator wrapper: ``fit`` learns merges, ``transform`` encodes and
    ``inverse_transform`` decodes."""

    def __init__(self, target_vocab_size=1024, n_max=2, l_max=32):
        self.target_vocab_size = target_vocab_size
        self.n_max = n_max
        self.l_max = l_max

    def fit(self, X, y=None):
        X = check_text_list(X)
        self.vocab_ = train_bpe(X, self.target_vocab_size, n_max=self.n_max, l_max=self.l_max)
        return self

    def transform(self, X):
        check_is_fitted(self, "vocab_")
        return [self.vocab_.encode(x) for x in check_text_list(X, allow_empty_strings=True)]

    def inverse_transform(self, X):
        check_is_fitted(self, "vocab_")
        return [self.vocab_.decode(ids) for ids in X]
