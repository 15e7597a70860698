"""Training loop, span decoding and prediction files."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import DropoutRNG
from .errors import CheckpointMismatch, ConfigViolation, EmptyDataset, NonFiniteLoss
from .model import ModelConfig, QaModel, load_checkpoint, save_checkpoint
from .preprocess import EncodedDataset
from .tokenizer import PackedInput

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-5
    epochs: int = 4
    batch_size: int = 16
    grad_accum_steps: int = 1
    warmup_fraction: float = 0.1
    max_answer_len: int = 30
    seed: int = 0
    clip_norm: float = 1.0
    max_steps: int | None = None
    keep_checkpoints: int = 2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        for name in ("learning_rate", "epochs", "batch_size", "grad_accum_steps", "max_answer_len", "clip_norm"):
            if not getattr(self, name) > 0:
                raise ConfigViolation(f"{name} must be positive")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigViolation("warmup_fraction must lie in [0, 1)")
        if self.max_steps is not None and self.max_steps <= 0:
            raise ConfigViolation("max_steps must be positive")


class Adam:
    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p.data -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def lr_at(step: int, total: int, base: float, warmup_fraction: float) -> float:
    """Linear warmup to ``base`` then linear decay to 0; ``step`` counts from 1."""
    warm = int(warmup_fraction * total)
    if warm and step <= warm:
        return base * step / warm
    return base * max(0.0, (total - step + 1) / max(1, total - warm))


def clip_grad_norm(params: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params.values() if p.grad is not None))
    if total > max_norm:
        scale = max_norm / total
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return total


def step_groups(n: int, cfg: TrainConfig, rng: np.random.Generator):
    """One epoch: a list of optimizer steps, each a list of micro-batch index arrays."""
    order = rng.permutation(n)
    micro = [order[i:i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]
    k = cfg.grad_accum_steps
    return [micro[i:i + k] for i in range(0, len(micro), k)]


def accumulate_step(model: QaModel, data: EncodedDataset, group, train: bool, rng: DropoutRNG | None) -> float:
    """Backward every micro-batch of one step, weighted so grads equal the step-wide mean."""
    n = sum(len(idx) for idx in group)
    total = 0.0
    for idx in group:
        loss = model.loss(data.batch(idx), train=train, rng=rng)
        w = len(idx) / n
        ag.backward(loss * w)
        total += float(loss.data) * w
    return total


@dataclass
class TrainResult:
    checkpoint: Path | None
    losses: list[tuple[int, float]] = field(default_factory=list)
    model: QaModel | None = None


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, data: EncodedDataset,
          out_dir=None, model: QaModel | None = None) -> TrainResult:
    if len(data) == 0:
        raise EmptyDataset("no training examples")
    if model_cfg.max_seq_len != data.max_seq_len:
        raise CheckpointMismatch(
            f"model max_seq_len {model_cfg.max_seq_len} != data max_seq_len {data.max_seq_len}"
        )
    model = model or QaModel(model_cfg, seed=train_cfg.seed)
    opt = Adam(model.params, train_cfg.learning_rate, train_cfg.adam_beta1, train_cfg.adam_beta2, train_cfg.adam_eps)
    shuffle = np.random.default_rng(train_cfg.seed)
    drop_rng = DropoutRNG(train_cfg.seed)
    train_mode = model_cfg.dropout > 0

    n_micro = math.ceil(len(data) / train_cfg.batch_size)
    per_epoch = math.ceil(n_micro / train_cfg.grad_accum_steps)
    total = per_epoch * train_cfg.epochs
    if train_cfg.max_steps is not None:
        total = min(total, train_cfg.max_steps)

    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_dir = None
    if out_dir is not None:
        ckpt_dir = out_dir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    meta = {"train_config": asdict(train_cfg), "data": data.meta}

    losses: list[tuple[int, float]] = []
    step = 0
    saved: list[Path] = []
    epoch = 0
    while step < total:
        epoch += 1
        for group in step_groups(len(data), train_cfg, shuffle):
            if step >= total:
                break
            step += 1
            model.zero_grad()
            loss = accumulate_step(model, data, group, train_mode, drop_rng)
            if not math.isfinite(loss):
                raise NonFiniteLoss(step, loss)
            clip_grad_norm(model.params, train_cfg.clip_norm)
            opt.step(lr_at(step, total, train_cfg.learning_rate, train_cfg.warmup_fraction))
            losses.append((step, loss))
        if ckpt_dir is not None:
            path = save_checkpoint(model, ckpt_dir / f"epoch-{epoch:03d}.ckpt", dict(meta, epoch=epoch, step=step))
            saved.append(path)
            while len(saved) > train_cfg.keep_checkpoints:
                saved.pop(0).unlink()
        logger.info("epoch %d done (step %d/%d, last loss %.4f)", epoch, step, total, losses[-1][1])

    final = None
    if out_dir is not None:
        final = save_checkpoint(model, out_dir / "model.ckpt", dict(meta, epoch=epoch, step=step))
        write_loss_trace(losses, out_dir / "loss.csv")
    return TrainResult(final, losses, model)


def write_loss_trace(losses, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("step,loss\n")
        for step, loss in losses:
            f.write(f"{step},{loss!r}\n")


# ---------------------------------------------------------------------------
# decoding

@dataclass
class SpanPrediction:
    qid: str
    text: str
    start_char: int | None
    end_char: int | None
    score: float
    null_score: float
    n_best: list[tuple[str, float]]


def candidate_spans(start_logits, end_logits, packed: PackedInput, max_answer_len: int):
    """All valid (score, start, end) context spans, best first."""
    lo, hi = packed.context_range
    s_all, e_all, sc_all = [], [], []
    for k in range(min(max_answer_len, hi - lo)):
        s = np.arange(lo, hi - k)
        e = s + k
        live = (packed.mask[s] == 1) & (packed.mask[e] == 1)
        s, e = s[live], e[live]
        s_all.append(s)
        e_all.append(e)
        sc_all.append(start_logits[s] + end_logits[e])
    if not s_all:
        return np.empty(0), np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    s = np.concatenate(s_all)
    e = np.concatenate(e_all)
    sc = np.concatenate(sc_all)
    order = np.lexsort((e, s, -sc))
    return sc[order], s[order], e[order]


def decode(start_logits, end_logits, packed: PackedInput, context: str, max_answer_len: int = 30,
           null_threshold: float = 0.0, n_best_size: int = 20, qid: str = "") -> SpanPrediction:
    start_logits = np.asarray(start_logits, dtype=np.float64)
    end_logits = np.asarray(end_logits, dtype=np.float64)
    cls = packed.cls_position
    null_score = float(start_logits[cls] + end_logits[cls])
    scores, starts, ends = candidate_spans(start_logits, end_logits, packed, max_answer_len)

    def text_of(s, e):
        a, b = int(packed.offsets[s, 0]), int(packed.offsets[e, 1])
        return context[a:b], a, b

    n_best = [(text_of(s, e)[0], float(sc)) for sc, s, e in zip(scores[:n_best_size], starts, ends)]
    n_best.append(("", null_score))
    n_best.sort(key=lambda t: -t[1])
    n_best = n_best[:n_best_size]

    if len(scores) == 0 or null_score - float(scores[0]) > null_threshold:
        return SpanPrediction(qid, "", None, None, null_score, null_score, n_best)
    text, a, b = text_of(starts[0], ends[0])
    return SpanPrediction(qid, text, a, b, float(scores[0]), null_score, n_best)


def predict(model: QaModel, data: EncodedDataset, dataset, null_threshold: float = 0.0,
            max_answer_len: int = 30, batch_size: int = 32) -> dict[str, SpanPrediction]:
    out = {}
    for i in range(0, len(data), batch_size):
        idx = np.arange(i, min(i + batch_size, len(data)))
        s, e = model.forward(data.batch(idx))
        for row, j in enumerate(idx):
            qid = data.qids[j]
            out[qid] = decode(s.data[row], e.data[row], data.packed(j), dataset[qid].context,
                              max_answer_len, null_threshold, qid=qid)
    return out


def predict_file(checkpoint, dataset, data: EncodedDataset, null_threshold: float = 0.0,
                 out_dir=".", max_answer_len: int = 30) -> tuple[Path, Path]:
    expect = {
        "max_seq_len": data.max_seq_len,
        "vocab_size": data.meta["vocab_size"],
    }
    sizes = data.meta.get("label_sizes")
    if sizes:
        expect.update(ner_size=sizes[0], pos_size=sizes[1], dep_size=sizes[2])
    model, _ = load_checkpoint(checkpoint, expect=expect)
    if data.qids != dataset.qids:
        raise CheckpointMismatch("preprocessed cache does not match the dataset's qids")
    preds = predict(model, data, dataset, null_threshold, max_answer_len)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pred_path = out_dir / "predictions.json"
    nbest_path = out_dir / "nbest.json"
    write_json(pred_path, {q: p.text for q, p in preds.items()})
    write_json(nbest_path, {q: [{"text": t, "score": s} for t, s in p.n_best] for q, p in preds.items()})
    return pred_path, nbest_path


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, ensure_ascii=False, indent=2, sort_keys=True)
        f.write("\n")
