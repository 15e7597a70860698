"""Dataset -> packed model inputs + aligned feature matrices (and their cache)."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .corpus import Dataset
from .errors import CheckpointMismatch, DataError
from .features import LabelSet, Sidecar, align, example_features
from .model import Batch
from .tokenizer import PackConfig, PackedInput, Vocab, gold_token_span, pack, tokenize

logger = logging.getLogger(__name__)

CACHE_VERSION = 1


@dataclass
class EncodedDataset:
    qids: list[str]
    input_ids: np.ndarray      # (N, L)
    segment_ids: np.ndarray    # (N, L)
    mask: np.ndarray           # (N, L)
    token_side: np.ndarray     # (N, L)
    token_index: np.ndarray    # (N, L)
    offsets: np.ndarray        # (N, L, 2)
    context_range: np.ndarray  # (N, 2)
    truncated: np.ndarray      # (N,)
    features: np.ndarray       # (N, L, 4)
    spans: np.ndarray          # (N, 2) gold (start, end) positions
    meta: dict

    def __len__(self):
        return len(self.qids)

    @property
    def max_seq_len(self) -> int:
        return self.input_ids.shape[1]

    def packed(self, i: int) -> PackedInput:
        return PackedInput(
            input_ids=self.input_ids[i],
            segment_ids=self.segment_ids[i],
            mask=self.mask[i],
            token_side=self.token_side[i],
            token_index=self.token_index[i],
            offsets=self.offsets[i],
            cls_position=0,
            truncated_context=bool(self.truncated[i]),
            context_range=(int(self.context_range[i, 0]), int(self.context_range[i, 1])),
        )

    def batch(self, idx) -> Batch:
        idx = np.asarray(idx)
        return Batch(
            self.input_ids[idx], self.segment_ids[idx], self.mask[idx], self.features[idx],
            self.spans[idx, 0], self.spans[idx, 1],
        )


def encode_example(ex, vocab: Vocab, cfg: PackConfig, labels: LabelSet, sidecar: Sidecar | None = None):
    ctx = tokenize(ex.context, vocab)
    q = tokenize(ex.question, vocab)
    if len(q) == 0:
        raise DataError(f"qid {ex.qid!r}: question has no tokens")
    packed = pack(ctx, q, cfg, vocab)
    ctx_feats, q_feats = example_features(ex, labels, sidecar)
    fm = align(packed, ctx_feats, q_feats, labels, qid=ex.qid)
    span = gold_token_span(ex, packed, ctx)
    return packed, fm, span


def encode_dataset(ds: Dataset, vocab: Vocab, cfg: PackConfig, labels: LabelSet,
                   sidecar: Sidecar | None = None) -> EncodedDataset:
    rows = [encode_example(ex, vocab, cfg, labels, sidecar) for ex in ds]
    if not rows:
        raise DataError("dataset is empty")
    packed = [r[0] for r in rows]
    enc = EncodedDataset(
        qids=ds.qids,
        input_ids=np.stack([p.input_ids for p in packed]),
        segment_ids=np.stack([p.segment_ids for p in packed]),
        mask=np.stack([p.mask for p in packed]),
        token_side=np.stack([p.token_side for p in packed]),
        token_index=np.stack([p.token_index for p in packed]),
        offsets=np.stack([p.offsets for p in packed]),
        context_range=np.array([p.context_range for p in packed], dtype=np.int64),
        truncated=np.array([p.truncated_context for p in packed], dtype=bool),
        features=np.stack([r[1] for r in rows]),
        spans=np.array([r[2] for r in rows], dtype=np.int64),
        meta={
            "version": CACHE_VERSION,
            "pack_config": asdict(cfg),
            "vocab_size": len(vocab),
            "vocab_sha256": hashlib.sha256("\n".join(vocab.tokens).encode()).hexdigest(),
            "label_sizes": list(labels.sizes),
            "feature_source": "fallback" if sidecar is None else "sidecar",
        },
    )
    lost = sum(1 for ex, (s, _) in zip(ds, enc.spans) if not ex.is_impossible and s == 0)
    if lost:
        logger.info("%d answerable examples lost their answer to truncation", lost)
    return enc


def config_hash(meta: dict) -> str:
    return hashlib.sha256(json.dumps(meta, sort_keys=True).encode()).hexdigest()[:16]


_ARRAYS = ("input_ids", "segment_ids", "mask", "token_side", "token_index", "offsets",
           "context_range", "truncated", "features", "spans")


def save_cache(enc: EncodedDataset, path) -> Path:
    path = Path(path)
    meta = dict(enc.meta, config_hash=config_hash(enc.meta))
    with open(path, "wb") as f:
        np.savez(
            f,
            meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
            qids=np.frombuffer(json.dumps(enc.qids).encode(), dtype=np.uint8),
            **{k: getattr(enc, k) for k in _ARRAYS},
        )
    return path


def load_cache(path) -> EncodedDataset:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(z["meta"].tobytes())
        if meta.get("version") != CACHE_VERSION:
            raise CheckpointMismatch(f"{path}: cache version {meta.get('version')} != {CACHE_VERSION}")
        qids = json.loads(z["qids"].tobytes())
        arrays = {k: z[k] for k in _ARRAYS}
    return EncodedDataset(qids=qids, meta=meta, **arrays)
