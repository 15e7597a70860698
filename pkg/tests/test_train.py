import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from featqa.errors import CheckpointMismatch, ConfigViolation, EmptyDataset, NonFiniteLoss
from featqa.model import ModelConfig, QaModel, read_checkpoint
from featqa.preprocess import encode_dataset
from featqa.tokenizer import SPECIALS, PackConfig, Vocab, pack, tokenize
from featqa.train import TrainConfig, decode, lr_at, predict_file, train

MODEL = dict(d_model=16, n_layers=1, n_heads=2, d_ff=32, d_feat=8, dropout=0.0)


@pytest.fixture(scope="module")
def enc(synth_ds, vocab, labels, small_pack):
    return encode_dataset(synth_ds, vocab, small_pack, labels)


def model_cfg(enc, **kw):
    return ModelConfig(vocab_size=enc.meta["vocab_size"], max_seq_len=enc.max_seq_len, **dict(MODEL, **kw))


V = Vocab(list(SPECIALS) + ["a", "b", "c", "d", "q"])


def toy_packed(ctx="a b c d", q="q", L=12):
    return pack(tokenize(ctx, V), tokenize(q, V), PackConfig(L, 4), V)


def test_decode_single_token():
    p = toy_packed("a")
    s = np.full(12, -5.0)
    e = np.full(12, -5.0)
    s[1] = e[1] = 10.0
    out = decode(s, e, p, "a")
    assert (out.text, out.start_char, out.end_char) == ("a", 0, 1)
    assert out.score == 20.0 and out.null_score == -10.0


def test_decode_all_too_long_is_null():
    p = toy_packed()
    s = np.zeros(12)
    e = np.zeros(12)
    # max_answer_len 0 rules out every span, even single tokens
    out = decode(s, e, p, "a b c d", max_answer_len=0, null_threshold=1e9)
    assert out.text == "" and out.n_best == [("", 0.0)]


def test_decode_respects_max_answer_len():
    p = toy_packed()
    s = np.full(12, -1.0)
    e = np.full(12, -1.0)
    s[1], e[4] = 5.0, 5.0
    assert decode(s, e, p, "a b c d", max_answer_len=4).text == "a b c d"
    # many length<=3 spans tie at 4.0; the earliest start and end wins
    assert decode(s, e, p, "a b c d", max_answer_len=3).text == "a"


def test_decode_threshold_and_empty_context():
    p = toy_packed()
    z = np.zeros(12)
    # null ties the best span: null - best = 0, which exceeds τ only when τ < 0
    assert decode(z, z, p, "a b c d", null_threshold=1.0).text != ""
    assert decode(z, z, p, "a b c d", null_threshold=-1.0).text == ""
    p0 = pack(tokenize("", V), tokenize("q", V), PackConfig(12, 4), V)
    out = decode(z, z, p0, "", null_threshold=1e9)
    assert out.text == "" and out.start_char is None


def brute_force(s, e, p, max_len):
    lo, hi = p.context_range
    best = None
    for i, j in itertools.product(range(lo, hi), repeat=2):
        if i <= j and j - i + 1 <= max_len:
            sc = s[i] + e[j]
            if best is None or sc > best[0]:
                best = (sc, i, j)
    return best


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=24, max_size=24), st.integers(1, 4))
def test_decode_matches_brute_force(vals, max_len):
    p = toy_packed()
    s, e = np.array(vals[:12]), np.array(vals[12:])
    out = decode(s, e, p, "a b c d", max_answer_len=max_len, null_threshold=1e18)
    sc, i, j = brute_force(s, e, p, max_len)
    assert out.score == sc
    ties = [(a, b) for a in range(1, 5) for b in range(a, 5) if b - a < max_len and s[a] + e[b] == sc]
    a, b = min(ties)  # ties go to the earliest start, then the earliest end
    assert (out.start_char, out.end_char) == (int(p.offsets[a, 0]), int(p.offsets[b, 1]))
    assert [x[1] for x in out.n_best] == sorted((x[1] for x in out.n_best), reverse=True)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=24, max_size=24))
def test_decode_stays_in_context(vals):
    p = toy_packed()
    s, e = np.array(vals[:12]), np.array(vals[12:])
    # make question and [SEP] positions very attractive
    s[5:] += 100
    e[5:] += 100
    out = decode(s, e, p, "a b c d", null_threshold=1e18)
    assert out.text in {"a b c d"[i:j] for i in range(8) for j in range(i + 1, 8)}
    assert 0 <= out.start_char < out.end_char <= 7


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=24, max_size=24),
       st.floats(-20, 20), st.floats(0, 20))
def test_raising_tau_never_empties_an_answer(vals, tau, raise_by):
    p = toy_packed()
    s, e = np.array(vals[:12]), np.array(vals[12:])
    lo = decode(s, e, p, "a b c d", null_threshold=tau)
    hi = decode(s, e, p, "a b c d", null_threshold=tau + raise_by)
    if lo.text:
        assert hi.text == lo.text


def test_lr_schedule():
    assert lr_at(1, 100, 1.0, 0.1) == pytest.approx(0.1)
    assert lr_at(10, 100, 1.0, 0.1) == pytest.approx(1.0)
    assert lr_at(100, 100, 1.0, 0.1) == pytest.approx(1 / 90)
    assert all(lr_at(k, 100, 1.0, 0.1) >= lr_at(k + 1, 100, 1.0, 0.1) for k in range(10, 100))
    assert lr_at(1, 10, 2.0, 0.0) == 2.0


def test_train_config_validation():
    with pytest.raises(ConfigViolation):
        TrainConfig(warmup_fraction=1.0)
    with pytest.raises(ConfigViolation):
        TrainConfig(batch_size=0)


def _params_after(enc, **tc):
    cfg = TrainConfig(**dict(dict(learning_rate=1e-3, epochs=1, max_steps=1, seed=4, warmup_fraction=0.0), **tc))
    res = train(model_cfg(enc), cfg, enc)
    return res.model.state()


def test_accumulation_equivalence(enc):
    a = _params_after(enc, batch_size=16)
    b = _params_after(enc, batch_size=8, grad_accum_steps=2)
    worst = max(np.abs(a[k] - b[k]).max() for k in a)
    assert worst <= 1e-9


def test_uneven_accumulation_weights(enc):
    # 30 examples, micro 8 x 4: last micro-batch has 6 rows
    from featqa.preprocess import EncodedDataset
    sub = EncodedDataset(enc.qids[:30], *(getattr(enc, k)[:30] for k in (
        "input_ids", "segment_ids", "mask", "token_side", "token_index", "offsets", "context_range", "truncated",
        "features", "spans")), meta=enc.meta)
    a = _params_after(sub, batch_size=30)
    b = _params_after(sub, batch_size=8, grad_accum_steps=4)
    assert max(np.abs(a[k] - b[k]).max() for k in a) <= 1e-9


def test_training_is_deterministic(enc, tmp_path):
    cfg = TrainConfig(learning_rate=1e-3, epochs=2, batch_size=8, seed=1)
    mc = model_cfg(enc, dropout=0.1)
    r1 = train(mc, cfg, enc, tmp_path / "a")
    r2 = train(mc, cfg, enc, tmp_path / "b")
    assert r1.checkpoint.read_bytes() == r2.checkpoint.read_bytes()
    assert (tmp_path / "a" / "loss.csv").read_text() == (tmp_path / "b" / "loss.csv").read_text()
    assert sorted(p.name for p in (tmp_path / "a" / "checkpoints").iterdir()) == ["epoch-001.ckpt", "epoch-002.ckpt"]
    r3 = train(mc, TrainConfig(learning_rate=1e-3, epochs=2, batch_size=8, seed=2), enc)
    assert r3.losses != r1.losses


def test_keeps_last_checkpoints(enc, tmp_path):
    train(model_cfg(enc), TrainConfig(learning_rate=1e-3, epochs=4, batch_size=32), enc, tmp_path)
    names = sorted(p.name for p in (tmp_path / "checkpoints").iterdir())
    assert names == ["epoch-003.ckpt", "epoch-004.ckpt"]
    header, _ = read_checkpoint(tmp_path / "model.ckpt")
    assert header["meta"]["step"] == 4


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # the run diverges on purpose
def test_train_errors(enc):
    with pytest.raises(CheckpointMismatch):
        train(ModelConfig(vocab_size=enc.meta["vocab_size"], max_seq_len=32, **MODEL), TrainConfig(), enc)
    empty = type(enc)(**{**enc.__dict__, "qids": []})
    with pytest.raises(EmptyDataset):
        train(model_cfg(enc), TrainConfig(), empty)
    with pytest.raises(NonFiniteLoss) as ei:
        train(model_cfg(enc), TrainConfig(learning_rate=1e300, max_steps=5, warmup_fraction=0.0,
                                          clip_norm=1e300), enc)
    assert ei.value.step >= 1


def test_loss_falls(enc):
    # the tenfold drop is checked on the full overfit run in the acceptance suite
    res = train(model_cfg(enc), TrainConfig(learning_rate=1e-3, epochs=50, batch_size=16, seed=0), enc)
    first = np.mean([x for _, x in res.losses[:10]])
    last = np.mean([x for _, x in res.losses[-10:]])
    assert last < 0.8 * first


def test_predict_file(enc, synth_ds, vocab, labels, small_pack, tmp_path):
    from featqa.corpus import Dataset
    from featqa.model import save_checkpoint
    ckpt = save_checkpoint(QaModel(model_cfg(enc), seed=0), tmp_path / "m.ckpt")
    three = Dataset(synth_ds.examples[:3])
    sub = encode_dataset(three, vocab, small_pack, labels)
    p1, n1 = predict_file(ckpt, three, sub, null_threshold=1e9, out_dir=tmp_path / "a")
    p2, n2 = predict_file(ckpt, three, sub, null_threshold=1e9, out_dir=tmp_path / "b")
    preds = json.loads(p1.read_text())
    assert sorted(preds) == sorted(three.qids) and all(preds.values())
    assert p1.read_bytes() == p2.read_bytes() and n1.read_bytes() == n2.read_bytes()
    nbest = json.loads(n1.read_text())
    assert all(len(v) <= 20 and {"text", "score"} == set(v[0]) for v in nbest.values())
    p3, _ = predict_file(ckpt, three, sub, null_threshold=-1e9, out_dir=tmp_path / "c")
    assert set(json.loads(p3.read_text()).values()) == {""}
    with pytest.raises(CheckpointMismatch):
        predict_file(ckpt, Dataset(synth_ds.examples[:2]), sub, out_dir=tmp_path / "d")
    with pytest.raises(CheckpointMismatch):
        predict_file(ckpt, three, encode_dataset(three, vocab, PackConfig(48, 16), labels), out_dir=tmp_path / "e")
