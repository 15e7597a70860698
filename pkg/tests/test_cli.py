import json

import pytest

from featqa.cli import main
from featqa.synthetic import make_corpus

FAST = ["--max-seq-len", "64", "--max-query-len", "16", "--vocab-size", "300"]
TINY_MODEL = ["--d-model", "16", "--n-layers", "1", "--n-heads", "2", "--d-ff", "32", "--d-feat", "8"]
TINY_TRAIN = TINY_MODEL + ["--lr", "1e-3", "--max-steps", "6", "--batch-size", "8"]


@pytest.fixture
def data(tmp_path):
    p = tmp_path / "data.json"
    p.write_text(json.dumps(make_corpus(16, seed=2)), encoding="utf-8")
    return p


def run(*argv):
    return main([str(a) for a in argv])


def test_evaluate_echo_gold(tmp_path, data):
    raw = json.loads(data.read_text())
    preds = {qa["id"]: (qa["answers"][0]["text"] if qa["answers"] else "")
             for a in raw["data"] for p in a["paragraphs"] for qa in p["qas"]}
    pred = tmp_path / "p.json"
    pred.write_text(json.dumps(preds))
    out = tmp_path / "ev"
    assert run("evaluate", "--pred", pred, "--data", data, "--out", out) == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["exact"] == 100.0 and metrics["f1"] == 100.0
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["inputs"]) == {str(pred), str(data)}
    assert json.loads((out / "config.json").read_text())["pred"] == str(pred)


def test_preprocess_fallback(tmp_path, data):
    out = tmp_path / "pre"
    assert run("preprocess", "--data", data, "--features", "fallback", "--out", out, *FAST) == 0
    info = json.loads((out / "preprocess.json").read_text())
    assert info["examples"] == 16 and (out / info["cache"]).exists()
    assert info["meta"]["feature_source"] == "fallback"


def test_preprocess_sidecar_required(tmp_path, data):
    assert run("preprocess", "--data", data, "--features", "sidecar", "--sidecar", tmp_path / "nope.jsonl",
               "--out", tmp_path / "x") == 2
    assert run("preprocess", "--data", data, "--features", "sidecar", "--out", tmp_path / "x") == 1


def test_exit_codes(tmp_path, data, capsys):
    with pytest.raises(SystemExit) as ei:
        main(["train", "--bogus"])
    assert ei.value.code == 1
    assert run("evaluate", "--pred", tmp_path / "missing.json", "--data", data, "--out", tmp_path / "o") == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"data": [{"title": "t", "paragraphs": [{"context": "abc", "qas": ['
                   '{"id": "q9", "question": "?", "answers": [{"text": "zz", "answer_start": 0}]}]}]}]}')
    assert run("preprocess", "--data", bad, "--out", tmp_path / "o") == 2
    assert "q9" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # the run diverges on purpose
def test_nonfinite_loss_exit_3(tmp_path, data):
    pre = tmp_path / "pre"
    run("preprocess", "--data", data, "--out", pre, *FAST)
    code = run("train", "--cache", pre, "--out", tmp_path / "tr", *TINY_MODEL,
               "--lr", "1e300", "--clip-norm", "1e300", "--warmup-fraction", "0", "--max-steps", "5")
    assert code == 3


def test_config_file_and_override(tmp_path, data):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"data": str(data), "n": 99, "seed": 5}))
    out = tmp_path / "s"
    assert run("synth", "--config", cfg, "--n", "7", "--out", out) == 0
    written = json.loads((out / "config.json").read_text())
    assert written["n"] == 7 and written["seed"] == 5
    raw = json.loads((out / "synthetic.json").read_text())
    assert sum(len(p["qas"]) for p in raw["data"][0]["paragraphs"]) == 7
    cfg.write_text(json.dumps({"nope": 1}))
    assert run("synth", "--config", cfg, "--out", out) == 1


def pipeline(root, data):
    pre, tr, pr, ev = (root / d for d in ("pre", "tr", "pr", "ev"))
    assert run("preprocess", "--data", data, "--out", pre, "--seed", 3, *FAST) == 0
    assert run("train", "--cache", pre, "--out", tr, "--seed", 3, *TINY_TRAIN) == 0
    assert run("predict", "--checkpoint", tr / "model.ckpt", "--cache", pre, "--data", data, "--out", pr) == 0
    assert run("evaluate", "--pred", pr / "predictions.json", "--data", data, "--out", ev) == 0
    assert run("analyze", "--pred", pr / "predictions.json", "--nbest", pr / "nbest.json", "--data", data,
               "--out", root / "an") == 0
    return (ev / "metrics.json").read_bytes()


def test_pipeline_twice_identical(tmp_path, data):
    assert pipeline(tmp_path / "a", data) == pipeline(tmp_path / "b", data)
    assert (tmp_path / "a" / "tr" / "model.ckpt").read_bytes() == (tmp_path / "b" / "tr" / "model.ckpt").read_bytes()


def test_outputs_stay_in_out_dir(tmp_path, data):
    before = set(tmp_path.iterdir())
    out = tmp_path / "only"
    run("tag", "--data", data, "--out", out)
    run("build-vocab", "--data", data, "--out", out, "--vocab-size", "200")
    assert set(tmp_path.iterdir()) - before == {out}
    assert {p.name for p in out.iterdir()} == {"sidecar.jsonl", "vocab.txt", "config.json", "manifest.json"}
