"""Greedy longest-match subword tokenization and fixed-length input packing."""

from __future__ import annotations

import heapq
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .errors import ConfigViolation, EmptyCorpus

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
SPECIALS = (PAD, UNK, CLS, SEP)
CONT = "##"

CONTEXT, QUESTION = 0, 1
SIDE_NAMES = {"context": CONTEXT, "question": QUESTION}


def _lower(ch: str) -> str:
    # keep offsets 1:1 with the original text
    lo = ch.lower()
    return lo if len(lo) == 1 else ch


def split_words(text: str) -> list[tuple[str, int, int]]:
    """Runs of letters/digits are words; any other non-space char stands alone."""
    words = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
        elif ch.isalnum():
            j = i + 1
            while j < n and text[j].isalnum():
                j += 1
            words.append((text[i:j], i, j))
            i = j
        else:
            words.append((ch, i, i + 1))
            i += 1
    return words


class Vocab:
    def __init__(self, tokens: Iterable[str]):
        self.tokens = list(tokens)
        if tuple(self.tokens[:4]) != SPECIALS:
            raise ConfigViolation(f"vocab must start with {SPECIALS}")
        self.index = {}
        for i, t in enumerate(self.tokens):
            if t in self.index:
                raise ConfigViolation(f"duplicate vocab token {t!r}")
            self.index[t] = i
        self.pad_id, self.unk_id, self.cls_id, self.sep_id = 0, 1, 2, 3

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self.index.get(token, self.unk_id)

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        text = Path(path).read_text(encoding="utf-8")
        return cls(text.split("\n")[:-1] if text.endswith("\n") else text.split("\n"))


def _merge_word(pieces: tuple[str, ...], left: str, right: str, merged: str) -> tuple[str, ...]:
    out = []
    i = 0
    while i < len(pieces):
        if i + 1 < len(pieces) and pieces[i] == left and pieces[i + 1] == right:
            out.append(merged)
            i += 2
        else:
            out.append(pieces[i])
            i += 1
    return tuple(out)


def build_vocab(corpus: Iterable[str], target_size: int) -> Vocab:
    """Learn a subword vocabulary by frequency-ranked pair merges.

    The base alphabet is every character seen word-initially plus every
    character seen word-internally (as a ``##`` continuation). Merges are
    applied most-frequent first, ties broken by the lexicographically
    smallest (left, right) pair, until the vocabulary has ``target_size``
    entries or nothing is left to merge.
    """
    word_freq: Counter[str] = Counter()
    for text in corpus:
        for w, _, _ in split_words(text):
            word_freq["".join(_lower(c) for c in w)] += 1
    if not word_freq:
        raise EmptyCorpus("cannot build a vocabulary from an empty corpus")

    words = sorted(word_freq)
    freqs = [word_freq[w] for w in words]
    splits = [tuple([w[0]] + [CONT + c for c in w[1:]]) for w in words]
    alphabet = sorted({p for s in splits for p in s})
    if target_size < len(SPECIALS) + len(alphabet):
        raise ConfigViolation(
            f"target_size {target_size} is below specials + alphabet ({len(SPECIALS) + len(alphabet)})"
        )

    tokens = list(SPECIALS) + alphabet
    known = set(tokens)

    pair_count: Counter[tuple[str, str]] = Counter()
    where: dict[tuple[str, str], set[int]] = defaultdict(set)
    for wi, s in enumerate(splits):
        for a, b in zip(s, s[1:]):
            pair_count[(a, b)] += freqs[wi]
            where[(a, b)].add(wi)
    heap = [(-c, a, b) for (a, b), c in pair_count.items()]
    heapq.heapify(heap)

    while len(tokens) < target_size and heap:
        neg, a, b = heapq.heappop(heap)
        if pair_count.get((a, b), 0) != -neg or neg == 0:
            continue  # stale entry
        merged = a + b[len(CONT):]
        if merged not in known:
            known.add(merged)
            tokens.append(merged)
        touched: set[tuple[str, str]] = set()
        for wi in sorted(where.pop((a, b), ())):
            old = splits[wi]
            new = _merge_word(old, a, b, merged)
            f = freqs[wi]
            for p in zip(old, old[1:]):
                pair_count[p] -= f
                touched.add(p)
            for p in zip(new, new[1:]):
                pair_count[p] += f
                where[p].add(wi)
                touched.add(p)
            splits[wi] = new
        for p in touched:
            c = pair_count[p]
            if c <= 0:
                pair_count.pop(p, None)
            else:
                heapq.heappush(heap, (-c, p[0], p[1]))
    return Vocab(tokens)


class Subword(NamedTuple):
    id: int
    start: int
    end: int
    word_index: int


@dataclass(frozen=True)
class TokenizedText:
    text: str
    subwords: tuple[Subword, ...]
    words: tuple[tuple[str, int, int], ...]

    def __len__(self):
        return len(self.subwords)


def wordpiece(word: str, vocab: Vocab) -> list[tuple[int, int, int]]:
    """Greedy longest-match split of one (lowercased) word.

    Returns (token id, start, end) with offsets relative to the word.
    Once no prefix matches, the rest of the word becomes a single [UNK].
    """
    out = []
    start, n = 0, len(word)
    while start < n:
        end = n
        tok_id = None
        while end > start:
            piece = word[start:end] if start == 0 else CONT + word[start:end]
            if piece in vocab.index:
                tok_id = vocab.index[piece]
                break
            end -= 1
        if tok_id is None:
            out.append((vocab.unk_id, start, n))
            break
        out.append((tok_id, start, end))
        start = end
    return out


def tokenize(text: str, vocab: Vocab) -> TokenizedText:
    words = split_words(text)
    subwords = []
    for wi, (w, ws, _) in enumerate(words):
        lowered = "".join(_lower(c) for c in w)
        for tid, s, e in wordpiece(lowered, vocab):
            subwords.append(Subword(tid, ws + s, ws + e, wi))
    return TokenizedText(text, tuple(subwords), tuple(words))


@dataclass(frozen=True)
class PackConfig:
    max_seq_len: int = 384
    max_query_len: int = 64
    question_first: bool = False

    def __post_init__(self):
        if self.max_seq_len <= 0 or self.max_query_len <= 0:
            raise ConfigViolation("max_seq_len and max_query_len must be positive")
        if not self.max_query_len + 3 < self.max_seq_len:
            raise ConfigViolation(
                f"max_query_len + 3 must be < max_seq_len (got {self.max_query_len}, {self.max_seq_len})"
            )


@dataclass
class PackedInput:
    """One packed (context, question) pair.

    ``token_side``/``token_index`` give, for every position, which text the
    token came from and its subword index there (-1 on specials and
    padding). ``offsets`` holds the character span of that subword.
    """

    input_ids: np.ndarray
    segment_ids: np.ndarray
    mask: np.ndarray
    token_side: np.ndarray
    token_index: np.ndarray
    offsets: np.ndarray
    cls_position: int
    truncated_context: bool
    context_range: tuple[int, int]  # [first, last) packed positions of context subwords

    @property
    def max_seq_len(self) -> int:
        return len(self.input_ids)

    def position_of(self, side, index: int) -> int:
        side = SIDE_NAMES.get(side, side)
        hits = np.flatnonzero((self.token_side == side) & (self.token_index == index))
        if len(hits) == 0:
            raise KeyError((side, index))
        return int(hits[0])

    def live_positions(self) -> np.ndarray:
        return np.flatnonzero(self.token_index >= 0)


def pack(context: TokenizedText, question: TokenizedText, cfg: PackConfig, vocab: Vocab) -> PackedInput:
    if len(question) == 0:
        raise ConfigViolation("question has no tokens")
    q_sub = question.subwords[:cfg.max_query_len]
    budget = cfg.max_seq_len - len(q_sub) - 3
    if budget <= 0:
        raise ConfigViolation(f"no room for context (budget {budget})")
    c_sub = context.subwords[:budget]
    truncated = len(context.subwords) > budget

    L = cfg.max_seq_len
    ids = np.full(L, vocab.pad_id, dtype=np.int64)
    seg = np.zeros(L, dtype=np.int64)
    mask = np.zeros(L, dtype=np.int64)
    side = np.full(L, -1, dtype=np.int64)
    index = np.full(L, -1, dtype=np.int64)
    offsets = np.zeros((L, 2), dtype=np.int64)

    first, second = ((QUESTION, q_sub), (CONTEXT, c_sub)) if cfg.question_first else ((CONTEXT, c_sub), (QUESTION, q_sub))
    ids[0] = vocab.cls_id
    pos = 1
    ranges = {}
    for seg_id, (s, subs) in enumerate((first, second)):
        ranges[s] = (pos, pos + len(subs))
        for i, sw in enumerate(subs):
            ids[pos] = sw.id
            seg[pos] = seg_id
            side[pos] = s
            index[pos] = i
            offsets[pos] = (sw.start, sw.end)
            pos += 1
        ids[pos] = vocab.sep_id
        seg[pos] = seg_id
        pos += 1
    mask[:pos] = 1
    return PackedInput(
        input_ids=ids,
        segment_ids=seg,
        mask=mask,
        token_side=side,
        token_index=index,
        offsets=offsets,
        cls_position=0,
        truncated_context=truncated,
        context_range=ranges[CONTEXT],
    )


NO_ANSWER = None


def answer_token_span(packed: PackedInput, start_char: int, end_char: int):
    """Smallest context-position range covering [start_char, end_char).

    Surrounding whitespace of the answer is ignored. Returns None when the
    covered characters are not (fully) inside the packed context.
    """
    lo, hi = packed.context_range
    if hi <= lo:
        return None
    starts = packed.offsets[lo:hi, 0]
    ends = packed.offsets[lo:hi, 1]
    if end_char > ends[-1] or start_char >= end_char:
        return None
    # last subword starting at or before the answer start
    s = int(np.searchsorted(starts, start_char, side="right")) - 1
    # first subword ending at or after the answer end
    e = int(np.searchsorted(ends, end_char, side="left"))
    if s < 0:
        s = 0
    if ends[s] <= start_char:
        # start falls in a gap (whitespace) after subword s
        s += 1
    if e < len(starts) and starts[e] >= end_char:
        e -= 1
    if s > e:
        return None
    return lo + s, lo + e


def gold_token_span(example, packed: PackedInput, context: TokenizedText | None = None):
    """Training target for an example: (start_pos, end_pos).

    Unanswerable examples and answers lost to truncation map to the [CLS]
    position for both ends.
    """
    null = (packed.cls_position, packed.cls_position)
    if example.is_impossible or not example.gold_answers:
        return null
    ans = example.gold_answers[0]
    text = example.context
    a, b = ans.answer_start, ans.answer_end
    while a < b and text[a].isspace():
        a += 1
    while b > a and text[b - 1].isspace():
        b -= 1
    span = answer_token_span(packed, a, b)
    return null if span is None else span
