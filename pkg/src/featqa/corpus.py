"""SQuAD 1.1 / 2.0 JSON loading."""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path

from .errors import BadCount, MalformedJson, SchemaViolation, SpanMismatch

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GoldAnswer:
    text: str
    answer_start: int

    @property
    def answer_end(self) -> int:
        return self.answer_start + len(self.text)


@dataclass(frozen=True)
class QaExample:
    qid: str
    article_title: str
    paragraph_index: int
    context: str
    question: str
    gold_answers: tuple[GoldAnswer, ...]
    is_impossible: bool

    @property
    def context_key(self) -> str:
        """Key used by sidecar files for this example's paragraph."""
        return f"{self.article_title}#{self.paragraph_index}"

    @property
    def answer_texts(self) -> list[str]:
        return [a.text for a in self.gold_answers]


@dataclass
class Dataset:
    examples: list[QaExample]
    source_path: str = ""
    split_name: str = ""
    _by_qid: dict[str, QaExample] = field(default=None, init=False, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def __getitem__(self, qid: str) -> QaExample:
        if self._by_qid is None:
            self._by_qid = {ex.qid: ex for ex in self.examples}
        return self._by_qid[qid]

    @property
    def qids(self) -> list[str]:
        return [ex.qid for ex in self.examples]


def _require(obj, key, where):
    if not isinstance(obj, dict) or key not in obj:
        raise SchemaViolation(f"missing field {key!r} at {where}")
    return obj[key]


def parse_squad(raw: dict, source_path: str = "", split_name: str = "") -> Dataset:
    """Build a validated Dataset from an already-decoded SQuAD JSON object."""
    articles = _require(raw, "data", "<root>")
    if not isinstance(articles, list):
        raise SchemaViolation("'data' must be a list of articles")

    examples: list[QaExample] = []
    seen: set[str] = set()
    for a_idx, article in enumerate(articles):
        title = article.get("title", f"article{a_idx}") if isinstance(article, dict) else None
        paragraphs = _require(article, "paragraphs", f"data[{a_idx}]")
        for p_idx, para in enumerate(paragraphs):
            where = f"data[{a_idx}].paragraphs[{p_idx}]"
            context = _require(para, "context", where)
            if not isinstance(context, str):
                raise SchemaViolation(f"context at {where} is not a string")
            for q_idx, qa in enumerate(_require(para, "qas", where)):
                qwhere = f"{where}.qas[{q_idx}]"
                qid = _require(qa, "id", qwhere)
                qwhere = f"qid {qid!r} ({qwhere})"
                question = _require(qa, "question", qwhere)
                answers = _require(qa, "answers", qwhere)
                # 1.1-style files have no is_impossible key
                impossible = bool(qa.get("is_impossible", False))
                if qid in seen:
                    raise SchemaViolation(f"duplicate {qwhere}")
                seen.add(qid)

                golds = []
                if not impossible:
                    if not answers:
                        raise SchemaViolation(f"{qwhere}: answerable question has no answers")
                    for ans in answers:
                        text = _require(ans, "text", qwhere)
                        start = _require(ans, "answer_start", qwhere)
                        if not isinstance(text, str) or not text:
                            raise SchemaViolation(f"{qwhere}: answer text must be a non-empty string")
                        if not isinstance(start, int) or isinstance(start, bool):
                            raise SchemaViolation(f"{qwhere}: answer_start must be an integer")
                        if start < 0 or context[start:start + len(text)] != text:
                            raise SpanMismatch(
                                f"{qwhere}: answer {text!r} not found at offset {start}"
                            )
                        golds.append(GoldAnswer(text, start))

                examples.append(QaExample(
                    qid=qid,
                    article_title=title,
                    paragraph_index=p_idx,
                    context=context,
                    question=question,
                    gold_answers=tuple(golds),
                    is_impossible=impossible,
                ))
    return Dataset(examples, source_path=source_path, split_name=split_name)


def load_dataset(path, split_name: str | None = None) -> Dataset:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise MalformedJson(f"{path}: {e}") from e
    ds = parse_squad(raw, source_path=str(path), split_name=split_name or path.stem)
    n_imp = sum(ex.is_impossible for ex in ds)
    logger.info("loaded %d examples (%d unanswerable) from %s", len(ds), n_imp, path)
    return ds


def split_subset(ds: Dataset, n: int, seed: int) -> Dataset:
    """Deterministic pseudo-random subset of ``n`` examples."""
    if not 0 < n <= len(ds):
        raise BadCount(f"subset size {n} out of range (1..{len(ds)})")
    order = random.Random(seed).sample(range(len(ds)), n)
    return Dataset(
        [ds.examples[i] for i in order],
        source_path=ds.source_path,
        split_name=f"{ds.split_name}[n={n},seed={seed}]",
    )


def to_squad_json(ds: Dataset) -> dict:
    """Inverse of parse_squad: regroup examples into articles/paragraphs."""
    articles: dict[str, dict] = {}
    paragraphs: dict[tuple[str, int], dict] = {}
    for ex in ds:
        art = articles.setdefault(ex.article_title, {"title": ex.article_title, "paragraphs": []})
        key = (ex.article_title, ex.paragraph_index)
        if key not in paragraphs:
            paragraphs[key] = {"context": ex.context, "qas": []}
            art["paragraphs"].append(paragraphs[key])
        paragraphs[key]["qas"].append({
            "id": ex.qid,
            "question": ex.question,
            "answers": [{"text": a.text, "answer_start": a.answer_start} for a in ex.gold_answers],
            "is_impossible": ex.is_impossible,
        })
    return {"version": "v2.0", "data": list(articles.values())}
