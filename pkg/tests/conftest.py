import json

import pytest

from featqa.corpus import parse_squad
from featqa.features import LabelSet
from featqa.synthetic import make_corpus
from featqa.tokenizer import PackConfig, build_vocab


@pytest.fixture(scope="session")
def synth_raw():
    return make_corpus(32, seed=0)


@pytest.fixture(scope="session")
def synth_ds(synth_raw):
    return parse_squad(synth_raw)


@pytest.fixture(scope="session")
def big_synth_ds():
    return parse_squad(make_corpus(200, seed=7))


@pytest.fixture(scope="session")
def vocab(synth_ds, big_synth_ds):
    texts = [ex.context for ex in big_synth_ds] + [ex.question for ex in big_synth_ds]
    texts += [ex.context for ex in synth_ds] + [ex.question for ex in synth_ds]
    return build_vocab(texts, 500)


@pytest.fixture(scope="session")
def labels():
    return LabelSet.default()


@pytest.fixture(scope="session")
def small_pack():
    return PackConfig(max_seq_len=64, max_query_len=16)


@pytest.fixture
def write_json(tmp_path):
    def _write(name, obj):
        p = tmp_path / name
        p.write_text(json.dumps(obj), encoding="utf-8")
        return p
    return _write
