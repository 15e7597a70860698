"""Per-token linguistic features (NER, POS, DEP, STOP).

Features come either from a precomputed JSON-Lines sidecar file or from a
small rule-based tagger, and are copied onto every subword of their word.
"""

from __future__ import annotations

import json
import unicodedata
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .errors import CoverageGap, DuplicateLabel, EmptyFile, MalformedLine, UnknownKind
from .tokenizer import CONTEXT, QUESTION, PackedInput, split_words

KINDS = ("NER", "POS", "DEP")
NER, POS, DEP, STOP = range(4)


class LabelVocab:
    """String labels mapped to ids by file order; UNK and PAD come last."""

    def __init__(self, kind: str, labels: Iterable[str]):
        self.kind = kind
        self.labels = list(labels)
        if not self.labels:
            raise EmptyFile(f"{kind} label vocabulary is empty")
        self.index: dict[str, int] = {}
        for i, lab in enumerate(self.labels):
            if lab in self.index:
                raise DuplicateLabel(f"{kind} label {lab!r} listed twice")
            self.index[lab] = i
        self.unk_id = len(self.labels)
        self.pad_id = len(self.labels) + 1

    def __len__(self):
        """Number of ids including UNK and PAD."""
        return len(self.labels) + 2

    def id(self, label: str) -> int:
        return self.index.get(label, self.unk_id)


def load_label_vocab(path, kind: str) -> LabelVocab:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    lines = [ln.strip() for ln in lines if ln.strip()]
    if not lines:
        raise EmptyFile(f"{path}: no labels")
    return LabelVocab(kind, lines)


def _asset(name: str) -> str:
    return resources.files("featqa").joinpath("assets").joinpath(name).read_text(encoding="utf-8")


@dataclass(frozen=True)
class LabelSet:
    ner: LabelVocab
    pos: LabelVocab
    dep: LabelVocab

    @classmethod
    def default(cls) -> "LabelSet":
        return cls(*(LabelVocab(k, _asset(f"{k.lower()}.txt").split()) for k in KINDS))

    @classmethod
    def from_dir(cls, path) -> "LabelSet":
        path = Path(path)
        return cls(*(load_label_vocab(path / f"{k.lower()}.txt", k) for k in KINDS))

    def save(self, path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        for voc in (self.ner, self.pos, self.dep):
            (path / f"{voc.kind.lower()}.txt").write_text("\n".join(voc.labels) + "\n", encoding="utf-8")

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.ner), len(self.pos), len(self.dep)

    @property
    def pad_row(self) -> tuple[int, int, int, int]:
        return self.ner.pad_id, self.pos.pad_id, self.dep.pad_id, 0


class WordFeatures(NamedTuple):
    start: int
    end: int
    ner: int
    pos: int
    dep: int
    stop: int


# ---------------------------------------------------------------------------
# sidecar files

@dataclass
class Sidecar:
    contexts: dict[str, list[WordFeatures]]
    questions: dict[str, list[WordFeatures]]


def read_sidecar(path, labels: LabelSet) -> Sidecar:
    out = Sidecar({}, {})
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                kind, rid, words = rec["kind"], rec["id"], rec["words"]
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise MalformedLine(path, lineno, f"bad record: {e}") from e
            if kind == "context":
                target = out.contexts
            elif kind == "question":
                target = out.questions
            else:
                raise UnknownKind(f"{path}:{lineno}: unknown kind {kind!r}")
            feats = []
            for w in words:
                try:
                    text, start, stop = w["t"], w["s"], w["stop"]
                    if not isinstance(start, int) or stop not in (0, 1) or isinstance(stop, bool):
                        raise ValueError("'s' must be an int and 'stop' 0 or 1")
                    feats.append(WordFeatures(
                        start, start + len(text),
                        labels.ner.id(w["ner"]), labels.pos.id(w["pos"]), labels.dep.id(w["dep"]),
                        int(stop),
                    ))
                except (KeyError, TypeError, ValueError) as e:
                    raise MalformedLine(path, lineno, f"bad word entry {w!r}: {e}") from e
            target[str(rid)] = feats
    return out


def sidecar_record(kind: str, rid: str, words, tags) -> dict:
    return {
        "kind": kind,
        "id": rid,
        "words": [
            {"t": t, "s": s, "ner": ner, "pos": pos, "dep": dep, "stop": stop}
            for (t, s, _), (ner, pos, dep, stop) in zip(words, tags)
        ],
    }


def write_sidecar(path, dataset) -> int:
    """Tag every paragraph and question with the fallback tagger."""
    n = 0
    seen = set()
    with open(path, "w", encoding="utf-8") as f:
        for ex in dataset:
            if ex.context_key not in seen:
                seen.add(ex.context_key)
                words = split_words(ex.context)
                f.write(json.dumps(sidecar_record("context", ex.context_key, words, fallback_labels(words))) + "\n")
                n += 1
            words = split_words(ex.question)
            f.write(json.dumps(sidecar_record("question", ex.qid, words, fallback_labels(words))) + "\n")
            n += 1
    return n


# ---------------------------------------------------------------------------
# rule-based fallback tagger

STOP_WORDS = frozenset(_asset("stopwords.txt").split())

_CLOSED = {}
for _tag, _ws in {
    "DET": "the a an this that these those each every some any no all both either neither another",
    "PRON": "i me my mine he him his she her hers it its we us our ours they them their theirs you your yours "
            "who whom whose what which myself himself herself itself ourselves themselves yourself",
    "ADP": "of in on at by for with about against between into through during before after above below "
           "to from up down over under within without across along among around upon via",
    "CCONJ": "and or but nor yet",
    "SCONJ": "if because while although though since unless whether than until once",
    "AUX": "is am are was were be been being have has had do does did will would can could shall should "
           "may might must",
    "PART": "not",
    "ADV": "very too just also then there here now when where why how again only",
    "INTJ": "oh yes hello",
}.items():
    for _w in _ws.split():
        _CLOSED[_w] = _tag

SENTENCE_END = frozenset(".!?")


def _is_punct(word: str) -> bool:
    return len(word) == 1 and unicodedata.category(word).startswith("P")


def _pos(word: str, sentence_initial: bool) -> str:
    low = word.lower()
    if word.isdigit():
        return "NUM"
    if low in _CLOSED:
        return _CLOSED[low]
    if len(word) == 1 and not word.isalnum():
        return "PUNCT" if _is_punct(word) else "SYM"
    if low.endswith("ly"):
        return "ADV"
    if low.endswith("ing") or low.endswith("ed"):
        return "VERB"
    if word[0].isupper() and not sentence_initial:
        return "PROPN"
    return "NOUN"


def fallback_labels(words) -> list[tuple[str, str, str, int]]:
    """(ner, pos, dep, stop) string labels for (text, start, end) words."""
    texts = [w[0] for w in words]
    out = []
    prev = None
    for t in texts:
        initial = prev is None or prev in SENTENCE_END
        out.append(["O", _pos(t, initial), "punct" if _is_punct(t) else "[UNK]",
                    int(t.lower() in STOP_WORDS)])
        prev = t
    # capitalized runs are entities; stop words never join a run
    for i, t in enumerate(texts):
        if t[0].isupper() and t.lower() not in STOP_WORDS:
            out[i][0] = "ENT"
        elif len(t) == 4 and t.isdigit() and 1000 <= int(t) <= 2100:
            out[i][0] = "DATE"
    return [tuple(r) for r in out]


def fallback_tag(words, labels: LabelSet | None = None) -> list[WordFeatures]:
    labels = labels or LabelSet.default()
    return [
        WordFeatures(s, e, labels.ner.id(ner), labels.pos.id(pos), labels.dep.id(dep), stop)
        for (_, s, e), (ner, pos, dep, stop) in zip(words, fallback_labels(words))
    ]


# ---------------------------------------------------------------------------
# alignment

def _lookup(feats: list[WordFeatures], starts: np.ndarray, char: int):
    i = int(np.searchsorted(starts, char, side="right")) - 1
    if i >= 0 and feats[i].start <= char < feats[i].end:
        return feats[i]
    return None


def align(packed: PackedInput, ctx_feats, q_feats, labels: LabelSet | None = None,
          qid: str = "") -> np.ndarray:
    """Feature matrix of shape (max_seq_len, 4), columns (ner, pos, dep, stop).

    Each live subword takes its containing word's features; specials and
    padding get PAD ids with stop 0.
    """
    labels = labels or LabelSet.default()
    fm = np.tile(np.array(labels.pad_row, dtype=np.int64), (packed.max_seq_len, 1))
    sources = {}
    for side, feats in ((CONTEXT, ctx_feats), (QUESTION, q_feats)):
        feats = sorted(feats, key=lambda w: w.start)
        sources[side] = (feats, np.array([w.start for w in feats], dtype=np.int64))
    for p in packed.live_positions():
        side = int(packed.token_side[p])
        feats, starts = sources[side]
        w = _lookup(feats, starts, int(packed.offsets[p, 0]))
        if w is None:
            where = "context" if side == CONTEXT else "question"
            raise CoverageGap(
                f"qid {qid!r}: no {where} feature word covers char {int(packed.offsets[p, 0])}"
            )
        fm[p] = (w.ner, w.pos, w.dep, w.stop)
    return fm


def example_features(ex, labels: LabelSet, sidecar: Sidecar | None = None):
    """(context features, question features) for one example."""
    if sidecar is None:
        return (fallback_tag(split_words(ex.context), labels),
                fallback_tag(split_words(ex.question), labels))
    try:
        return sidecar.contexts[ex.context_key], sidecar.questions[ex.qid]
    except KeyError as e:
        raise CoverageGap(f"qid {ex.qid!r}: sidecar has no record {e.args[0]!r}") from None
