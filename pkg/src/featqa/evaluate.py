"""SQuAD 2.0 scoring, answer/no-answer confusion matrix and error categories."""

from __future__ import annotations

import json
import logging
import re
import unicodedata
from collections import Counter
from dataclasses import asdict, dataclass, field

from .errors import MissingPrediction

logger = logging.getLogger(__name__)

_ARTICLES = re.compile(r"\b(a|an|the)\b", re.UNICODE)


def _strip_punct(text: str) -> str:
    return "".join(ch for ch in text if not unicodedata.category(ch).startswith("P"))


def normalize(s: str) -> str:
    """Lowercase, drop punctuation and articles, squeeze whitespace."""
    s = _strip_punct(s.lower())
    s = _ARTICLES.sub(" ", s)
    return " ".join(s.split())


def em_f1(pred: str, golds: list[str]) -> tuple[int, float]:
    pred_toks = normalize(pred).split()
    if not golds:
        ok = int(not pred_toks)
        return ok, float(ok)
    best_em, best_f1 = 0, 0.0
    for gold in golds:
        gold_toks = normalize(gold).split()
        best_em = max(best_em, int(pred_toks == gold_toks))
        if not gold_toks or not pred_toks:
            f1 = float(gold_toks == pred_toks)
        else:
            common = sum((Counter(pred_toks) & Counter(gold_toks)).values())
            if common == 0:
                f1 = 0.0
            else:
                p = common / len(pred_toks)
                r = common / len(gold_toks)
                f1 = 2 * p * r / (p + r)
        best_f1 = max(best_f1, f1)
    return best_em, best_f1


def is_null(pred: str) -> bool:
    return not pred.strip()


@dataclass
class ConfusionMatrix:
    """Rows: gold Answer / No Answer; columns: predicted Answer / No Answer."""

    aa: int = 0
    an: int = 0
    na: int = 0
    nn: int = 0

    @property
    def total(self) -> int:
        return self.aa + self.an + self.na + self.nn

    def as_rows(self) -> list[list[int]]:
        return [[self.aa, self.an], [self.na, self.nn]]

    def format(self) -> str:
        w = max(9, *(len(str(v)) for v in (self.aa, self.an, self.na, self.nn)))
        lines = [
            f"{'':>18}{'Predictions':^{2 * w + 3}}",
            f"{'':>18}{'Answer':>{w}} | {'No Answer':>{w}}",
            f"{'Label  Answer':>18}{self.aa:>{w}} | {self.an:>{w}}",
            f"{'       No Answer':>18}{self.na:>{w}} | {self.nn:>{w}}",
        ]
        return "\n".join(lines)


@dataclass
class Metrics:
    exact: float
    f1: float
    total: int
    has_answer_exact: float | None = None
    has_answer_f1: float | None = None
    has_answer_total: int = 0
    no_answer_exact: float | None = None
    no_answer_f1: float | None = None
    no_answer_total: int = 0
    confusion: ConfusionMatrix = field(default_factory=ConfusionMatrix)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confusion"] = asdict(self.confusion)
        return d


def score_examples(preds: dict[str, str], dataset) -> dict[str, tuple[int, float]]:
    return {ex.qid: em_f1(preds[ex.qid], ex.answer_texts) for ex in dataset}


def evaluate(preds: dict[str, str], dataset) -> Metrics:
    missing = [ex.qid for ex in dataset if ex.qid not in preds]
    if missing:
        raise MissingPrediction(missing)
    known = {ex.qid for ex in dataset}
    extra = [q for q in preds if q not in known]
    if extra:
        logger.warning("%d predictions for qids not in the dataset (ignored)", len(extra))

    scores = score_examples(preds, dataset)
    cm = ConfusionMatrix()
    has, no = [], []
    for ex in dataset:
        gold_ans = not ex.is_impossible
        pred_ans = not is_null(preds[ex.qid])
        if gold_ans:
            has.append(scores[ex.qid])
            if pred_ans:
                cm.aa += 1
            else:
                cm.an += 1
        else:
            no.append(scores[ex.qid])
            if pred_ans:
                cm.na += 1
            else:
                cm.nn += 1

    def pct(rows, i):
        return 100.0 * sum(r[i] for r in rows) / len(rows) if rows else None

    allrows = has + no
    return Metrics(
        exact=pct(allrows, 0) or 0.0,
        f1=pct(allrows, 1) or 0.0,
        total=len(allrows),
        has_answer_exact=pct(has, 0),
        has_answer_f1=pct(has, 1),
        has_answer_total=len(has),
        no_answer_exact=pct(no, 0),
        no_answer_f1=pct(no, 1),
        no_answer_total=len(no),
        confusion=cm,
    )


MISSED_ANSWER = "MISSED_ANSWER"
HALLUCINATED_ANSWER = "HALLUCINATED_ANSWER"
WRONG_SPAN = "WRONG_SPAN"


@dataclass
class ErrorRecord:
    qid: str
    category: str
    gold: list[str]
    pred: str
    f1: float
    partial: bool
    question: str = ""
    n_best: list[dict] = field(default_factory=list)


def error_report(preds: dict[str, str], dataset, nbest: dict | None = None):
    """Categorize every example that is not an exact match.

    Returns (records sorted by qid, per-category counts).
    """
    records = []
    for ex in dataset:
        pred = preds[ex.qid]
        em, f1 = em_f1(pred, ex.answer_texts)
        if em:
            continue
        if ex.is_impossible:
            cat = HALLUCINATED_ANSWER
        elif is_null(pred):
            cat = MISSED_ANSWER
        else:
            cat = WRONG_SPAN
        records.append(ErrorRecord(
            qid=ex.qid,
            category=cat,
            gold=ex.answer_texts,
            pred=pred,
            f1=f1,
            partial=0.0 < f1 < 1.0,
            question=ex.question,
            n_best=list((nbest or {}).get(ex.qid, [])),
        ))
    records.sort(key=lambda r: r.qid)
    summary = Counter(r.category for r in records)
    counts = {c: summary.get(c, 0) for c in (MISSED_ANSWER, HALLUCINATED_ANSWER, WRONG_SPAN)}
    counts["PARTIAL"] = sum(r.partial for r in records)
    counts["total_errors"] = len(records)
    counts["total"] = len(dataset)
    return records, counts


def write_metrics(metrics: Metrics, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(metrics.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def write_errors(records: list[ErrorRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(asdict(r), ensure_ascii=False, sort_keys=True) + "\n")
