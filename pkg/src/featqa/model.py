"""Span-prediction model with linguistic-feature fusion.

token + segment + position embeddings -> post-LN transformer encoder -> H
feature ids -> one-hot (or scaled index) -> linear -> ReLU -> F
concat(H, F) -> linear -> (start, end) logits
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import DropoutRNG, Tensor
from .errors import CheckpointMismatch, ConfigViolation, DeadTarget, LabelOutOfRange, ShapeMismatch

NEG_INF = -1e9
FEATURE_ENCODINGS = ("onehot", "index")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 384
    feature_encoding: str = "onehot"
    d_feat: int = 32
    dropout: float = 0.1
    precision: int = 64
    ner_size: int = 25
    pos_size: int = 18
    dep_size: int = 46
    init_std: float = 0.02

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigViolation(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.d_feat < 1:
            raise ConfigViolation("d_feat must be >= 1")
        if self.feature_encoding not in FEATURE_ENCODINGS:
            raise ConfigViolation(f"feature_encoding must be one of {FEATURE_ENCODINGS}")
        if self.precision not in ag.DTYPES:
            raise ConfigViolation("precision must be 32 or 64")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigViolation("dropout must lie in [0, 1)")

    @property
    def dtype(self):
        return ag.DTYPES[self.precision]

    @property
    def feature_width(self) -> int:
        if self.feature_encoding == "onehot":
            return self.ner_size + self.pos_size + self.dep_size + 1
        return 4

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class Batch:
    input_ids: np.ndarray    # (B, L)
    segment_ids: np.ndarray  # (B, L)
    mask: np.ndarray         # (B, L)
    features: np.ndarray     # (B, L, 4)
    start_positions: np.ndarray | None = None  # (B,)
    end_positions: np.ndarray | None = None

    def __len__(self):
        return len(self.input_ids)

    @classmethod
    def from_packed(cls, packed, features, spans=None) -> "Batch":
        """Stack PackedInputs and their feature matrices."""
        b = cls(
            np.stack([p.input_ids for p in packed]),
            np.stack([p.segment_ids for p in packed]),
            np.stack([p.mask for p in packed]),
            np.stack(features),
        )
        if spans is not None:
            b.start_positions = np.array([s for s, _ in spans], dtype=np.int64)
            b.end_positions = np.array([e for _, e in spans], dtype=np.int64)
        return b


def truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) resampled until every value lies within two std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


class QaModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        d, dt = cfg.d_model, cfg.dtype

        def weight(name, *shape):
            self.params[name] = Tensor(truncated_normal(rng, shape, cfg.init_std).astype(dt), requires_grad=True)

        def const(name, value, n):
            self.params[name] = Tensor(np.full(n, value, dtype=dt), requires_grad=True)

        weight("emb.token", cfg.vocab_size, d)
        weight("emb.segment", 2, d)
        weight("emb.position", cfg.max_seq_len, d)
        const("emb.ln.weight", 1.0, d)
        const("emb.ln.bias", 0.0, d)
        for i in range(cfg.n_layers):
            p = f"layer{i}."
            for proj in "qkvo":
                weight(p + f"attn.{proj}.weight", d, d)
                if proj != "k":
                    # a key bias shifts each score row by a constant: softmax ignores it
                    const(p + f"attn.{proj}.bias", 0.0, d)
            const(p + "attn_ln.weight", 1.0, d)
            const(p + "attn_ln.bias", 0.0, d)
            weight(p + "ffn.in.weight", d, cfg.d_ff)
            const(p + "ffn.in.bias", 0.0, cfg.d_ff)
            weight(p + "ffn.out.weight", cfg.d_ff, d)
            const(p + "ffn.out.bias", 0.0, d)
            const(p + "ffn_ln.weight", 1.0, d)
            if i < cfg.n_layers - 1:
                # on the last layer this bias only shifts all span logits equally
                const(p + "ffn_ln.bias", 0.0, d)
        weight("feat.weight", cfg.feature_width, cfg.d_feat)
        const("feat.bias", 0.0, cfg.d_feat)
        # no head bias: a per-column constant moves every live start (end) logit
        # together, which neither the span loss nor decoding can see
        weight("head.weight", d + cfg.d_feat, 2)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    # -- forward pieces ----------------------------------------------------

    def embed(self, input_ids, segment_ids, train: bool = False, rng: DropoutRNG | None = None) -> Tensor:
        input_ids = np.atleast_2d(input_ids)
        segment_ids = np.atleast_2d(segment_ids)
        L = input_ids.shape[1]
        if L > self.cfg.max_seq_len:
            raise ShapeMismatch(f"embed: sequence length {L} exceeds max_seq_len {self.cfg.max_seq_len}")
        x = ag.embedding(self["emb.token"], input_ids)
        x = x + ag.embedding(self["emb.segment"], segment_ids)
        x = x + ag.embedding(self["emb.position"], np.arange(L))
        x = ag.layer_norm(x, self["emb.ln.weight"], self["emb.ln.bias"])
        return ag.dropout(x, self.cfg.dropout, train, rng)

    def _linear(self, x: Tensor, prefix: str) -> Tensor:
        out = x @ self[prefix + ".weight"]
        bias = self.params.get(prefix + ".bias")
        return out if bias is None else out + bias

    def attention(self, h: Tensor, mask, layer: int) -> Tensor:
        B, L, d = h.shape
        nh = self.cfg.n_heads
        dh = d // nh
        p = f"layer{layer}.attn."

        def heads(x):
            return ag.transpose(ag.reshape(x, (B, L, nh, dh)), (0, 2, 1, 3))

        q = heads(self._linear(h, p + "q"))
        k = heads(self._linear(h, p + "k"))
        v = heads(self._linear(h, p + "v"))
        scores = (q @ ag.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
        key_bias = ((1 - np.asarray(mask)) * NEG_INF).astype(h.dtype)[:, None, None, :]
        probs = ag.softmax(scores + key_bias, axis=-1)
        ctx = ag.reshape(ag.transpose(probs @ v, (0, 2, 1, 3)), (B, L, d))
        return self._linear(ctx, p + "o")

    def encode(self, emb: Tensor, mask, train: bool = False, rng: DropoutRNG | None = None) -> Tensor:
        mask = np.atleast_2d(mask)
        if mask.shape != emb.shape[:2]:
            raise ShapeMismatch(f"encode: mask {mask.shape} vs embeddings {emb.shape}")
        h = emb
        drop = self.cfg.dropout
        for i in range(self.cfg.n_layers):
            p = f"layer{i}."
            a = ag.dropout(self.attention(h, mask, i), drop, train, rng)
            h = ag.layer_norm(h + a, self[p + "attn_ln.weight"], self[p + "attn_ln.bias"])
            f = ag.gelu(self._linear(h, p + "ffn.in"))
            f = ag.dropout(self._linear(f, p + "ffn.out"), drop, train, rng)
            h = ag.layer_norm(h + f, self[p + "ffn_ln.weight"], self.params.get(p + "ffn_ln.bias"))
        return h

    def encode_features(self, fm) -> np.ndarray:
        """Feature ids (..., 4) -> model input rows (..., feature_width)."""
        cfg = self.cfg
        fm = np.asarray(fm)
        sizes = (cfg.ner_size, cfg.pos_size, cfg.dep_size, 2)
        for col, n in enumerate(sizes):
            c = fm[..., col]
            if c.size and (c.min() < 0 or c.max() >= n):
                raise LabelOutOfRange(f"feature column {col} has ids outside [0, {n})")
        if cfg.feature_encoding == "index":
            scale = np.array([max(n - 1, 1) for n in sizes], dtype=cfg.dtype)
            return fm.astype(cfg.dtype) / scale
        out = np.zeros(fm.shape[:-1] + (cfg.feature_width,), dtype=cfg.dtype)
        offset = 0
        for col, n in enumerate(sizes[:3]):
            np.put_along_axis(out, fm[..., col:col + 1] + offset, 1.0, axis=-1)
            offset += n
        out[..., offset] = fm[..., 3]
        return out

    def feature_forward(self, fm) -> Tensor:
        x = Tensor(self.encode_features(fm))
        return ag.relu(self._linear(x, "feat"))

    def span_logits(self, h: Tensor, f: Tensor, mask) -> tuple[Tensor, Tensor]:
        if h.shape[:-1] != f.shape[:-1]:
            raise ShapeMismatch(f"span_logits: H {h.shape} and F {f.shape} differ in length")
        logits = self._linear(ag.concat([h, f], axis=-1), "head")
        return self._split_masked(logits, mask)

    def encoder_only_logits(self, h: Tensor, mask) -> tuple[Tensor, Tensor]:
        """Head applied to H alone, using only the H-block of the head weights."""
        w = Tensor(self["head.weight"].data[: self.cfg.d_model])
        logits = h @ w
        return self._split_masked(logits, mask)

    def _split_masked(self, logits: Tensor, mask):
        mask = np.atleast_2d(mask)
        logits = ag.masked_fill(logits, (mask == 0)[..., None], NEG_INF)
        return ag.take(logits, 0, axis=-1), ag.take(logits, 1, axis=-1)

    def forward(self, batch: Batch, train: bool = False, rng: DropoutRNG | None = None):
        emb = self.embed(batch.input_ids, batch.segment_ids, train, rng)
        h = self.encode(emb, batch.mask, train, rng)
        f = self.feature_forward(batch.features)
        return self.span_logits(h, f, batch.mask)

    def loss(self, batch: Batch, train: bool = False, rng: DropoutRNG | None = None) -> Tensor:
        s, e = self.forward(batch, train, rng)
        return qa_loss(s, e, batch.start_positions, batch.end_positions, batch.mask)

    # -- persistence -------------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = sorted(set(self.params) - set(state))
            extra = sorted(set(state) - set(self.params))
            raise CheckpointMismatch(f"parameter names differ (missing {missing}, unexpected {extra})")
        for k, arr in state.items():
            if arr.shape != self.params[k].shape:
                raise CheckpointMismatch(f"{k}: shape {arr.shape} != expected {self.params[k].shape}")
            self.params[k].data = np.ascontiguousarray(arr, dtype=self.cfg.dtype).copy()


def qa_loss(start_logits: Tensor, end_logits: Tensor, start_pos, end_pos, mask=None) -> Tensor:
    """Mean over the batch of (CE(start) + CE(end)) / 2."""
    start_pos = np.atleast_1d(np.asarray(start_pos, dtype=np.int64))
    end_pos = np.atleast_1d(np.asarray(end_pos, dtype=np.int64))
    if start_logits.data.ndim == 1:
        start_logits = ag.reshape(start_logits, (1, -1))
        end_logits = ag.reshape(end_logits, (1, -1))
    if mask is not None:
        mask = np.atleast_2d(mask)
        rows = np.arange(len(start_pos))
        dead = (mask[rows, start_pos] == 0) | (mask[rows, end_pos] == 0)
        if dead.any():
            raise DeadTarget(f"gold positions fall on masked positions in rows {np.flatnonzero(dead).tolist()}")
    ce = ag.cross_entropy(start_logits, start_pos) + ag.cross_entropy(end_logits, end_pos)
    return ag.mean(ce) * 0.5


# ---------------------------------------------------------------------------
# checkpoint file
#
# MAGIC | u32 header length | header JSON | u32 param count |
#   per param: u16 name length, name, u8 itemsize, u8 ndim, u32 dims..., raw little-endian values

MAGIC = b"FQACKPT1"
_DT = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def save_checkpoint(model: QaModel, path, meta: dict | None = None) -> Path:
    path = Path(path)
    header = json.dumps({"model_config": asdict(model.cfg), "meta": meta or {}}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", len(header)), header, struct.pack("<I", len(model.params))]
    for name, p in model.params.items():
        arr = np.ascontiguousarray(p.data, dtype=_DT[p.data.dtype.itemsize])
        nb = name.encode()
        parts.append(struct.pack("<HBB", len(nb), arr.dtype.itemsize, arr.ndim) + nb)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:len(MAGIC)] != MAGIC:
        raise CheckpointMismatch(f"{path}: not a checkpoint (bad magic)")
    off = len(MAGIC)
    (hlen,) = struct.unpack_from("<I", buf, off)
    off += 4
    header = json.loads(buf[off:off + hlen])
    off += hlen
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    state = {}
    for _ in range(n):
        nlen, itemsize, ndim = struct.unpack_from("<HBB", buf, off)
        off += 4
        name = buf[off:off + nlen].decode()
        off += nlen
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        dt = _DT[itemsize]
        count = int(np.prod(shape, dtype=np.int64))
        state[name] = np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(shape).copy()
        off += count * itemsize
    if off != len(buf):
        raise CheckpointMismatch(f"{path}: {len(buf) - off} trailing bytes")
    return header, state


def load_checkpoint(path, expect: dict | None = None) -> tuple[QaModel, dict]:
    """Rebuild a model from a checkpoint; ``expect`` pins config fields that must agree."""
    header, state = read_checkpoint(path)
    cfg = ModelConfig.from_dict(header["model_config"])
    for k, v in (expect or {}).items():
        if getattr(cfg, k) != v:
            raise CheckpointMismatch(f"{path}: checkpoint has {k}={getattr(cfg, k)!r}, expected {v!r}")
    model = QaModel(cfg)
    model.load_state(state)
    return model, header.get("meta", {})
