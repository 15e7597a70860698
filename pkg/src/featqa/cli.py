"""Command-line entry point: ``featqa <subcommand> [--config run.json] [--flag=value ...]``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .corpus import load_dataset
from .errors import DataError, FeatQAError, NumericalError
from .evaluate import error_report, evaluate, write_errors, write_metrics
from .features import LabelSet, read_sidecar, write_sidecar
from .model import ModelConfig
from .preprocess import config_hash, encode_dataset, load_cache, save_cache
from .synthetic import make_corpus
from .tokenizer import PackConfig, Vocab, build_vocab
from .train import TrainConfig, predict_file, train, write_json

logger = logging.getLogger("featqa")


@dataclass
class RunConfig:
    out: str = "out"
    seed: int = 0
    # inputs
    data: str | None = None
    sidecar: str | None = None
    vocab: str | None = None
    labels: str | None = None
    cache: str | None = None
    checkpoint: str | None = None
    pred: str | None = None
    nbest: str | None = None
    # preprocessing
    features: str = "fallback"
    question_first: bool = False
    max_seq_len: int = 384
    max_query_len: int = 64
    vocab_size: int = 8000
    # model
    feature_encoding: str = "onehot"
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    d_feat: int = 32
    dropout: float = 0.1
    precision: int = 64
    # training / decoding
    lr: float = 3e-5
    epochs: int = 4
    batch_size: int = 16
    accum_steps: int = 1
    warmup_fraction: float = 0.1
    clip_norm: float = 1.0
    max_steps: int | None = None
    max_answer_len: int = 30
    null_threshold: float = 0.0
    # synth
    n: int = 32
    unanswerable_fraction: float = 0.25

    def pack_config(self) -> PackConfig:
        return PackConfig(self.max_seq_len, self.max_query_len, self.question_first)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.lr, epochs=self.epochs, batch_size=self.batch_size,
            grad_accum_steps=self.accum_steps, warmup_fraction=self.warmup_fraction,
            max_answer_len=self.max_answer_len, seed=self.seed, clip_norm=self.clip_norm,
            max_steps=self.max_steps,
        )

    def model_config(self, vocab_size: int, label_sizes, max_seq_len: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size, d_model=self.d_model, n_layers=self.n_layers, n_heads=self.n_heads,
            d_ff=self.d_ff, max_seq_len=max_seq_len, feature_encoding=self.feature_encoding,
            d_feat=self.d_feat, dropout=self.dropout, precision=self.precision,
            ner_size=label_sizes[0], pos_size=label_sizes[1], dep_size=label_sizes[2],
        )


_FIELDS = {f.name: f for f in fields(RunConfig)}


class UsageError(FeatQAError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with RunConfig keys; flags override it")
    for name, f in _FIELDS.items():
        flag = "--" + name.replace("_", "-")
        if f.type in ("bool", bool):
            p.add_argument(flag, dest=name, action="store_const", const=True, default=None)
            continue
        kind = {"int": int, "float": float, "int | None": int}.get(str(f.type), str)
        kw = {}
        if name == "features":
            kw["choices"] = ["sidecar", "fallback"]
        elif name == "feature_encoding":
            kw["choices"] = ["onehot", "index"]
        elif name == "precision":
            kw["choices"] = [32, 64]
        p.add_argument(flag, dest=name, type=kind, default=None, **kw)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise DataError(f"config file {args.config} not found") from None
        except json.JSONDecodeError as e:
            raise DataError(f"config file {args.config}: {e}") from None
        for k, v in raw.items():
            k = k.replace("-", "_")
            if k not in _FIELDS:
                raise UsageError(f"unknown config key {k!r} in {args.config}")
            setattr(cfg, k, v)
    for k in _FIELDS:
        v = getattr(args, k, None)
        if v is not None:
            setattr(cfg, k, v)
    return cfg


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _need(cfg: RunConfig, *names: str) -> None:
    for name in names:
        value = getattr(cfg, name)
        if value is None:
            raise UsageError(f"--{name.replace('_', '-')} is required for this command")
        if not Path(value).exists():
            raise DataError(f"--{name.replace('_', '-')}: {value} does not exist")


def _write_manifest(cfg: RunConfig, out: Path, command: str, inputs: list[str]) -> None:
    write_json(out / "config.json", asdict(cfg))
    manifest = {
        "command": command,
        "config": asdict(cfg),
        "inputs": {p: _sha256(p) for p in inputs if p and Path(p).is_file()},
        "versions": {
            "featqa": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
    }
    write_json(out / "manifest.json", manifest)


def _labels(cfg: RunConfig) -> LabelSet:
    return LabelSet.from_dir(cfg.labels) if cfg.labels else LabelSet.default()


def _cache_path(cfg: RunConfig) -> Path:
    p = Path(cfg.cache)
    if p.is_dir():
        info = json.loads((p / "preprocess.json").read_text(encoding="utf-8"))
        return p / info["cache"]
    return p


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(cfg: RunConfig, out: Path) -> list[str]:
    raw = make_corpus(cfg.n, cfg.unanswerable_fraction, cfg.seed)
    write_json(out / "synthetic.json", raw)
    print(f"wrote {cfg.n} synthetic questions to {out / 'synthetic.json'}")
    return []


def _corpus_texts(ds):
    seen = set()
    for ex in ds:
        if ex.context_key not in seen:
            seen.add(ex.context_key)
            yield ex.context
        yield ex.question


def cmd_build_vocab(cfg: RunConfig, out: Path) -> list[str]:
    _need(cfg, "data")
    ds = load_dataset(cfg.data)
    vocab = build_vocab(_corpus_texts(ds), cfg.vocab_size)
    vocab.save(out / "vocab.txt")
    print(f"vocabulary of {len(vocab)} tokens -> {out / 'vocab.txt'}")
    return [cfg.data]


def cmd_tag(cfg: RunConfig, out: Path) -> list[str]:
    _need(cfg, "data")
    ds = load_dataset(cfg.data)
    n = write_sidecar(out / "sidecar.jsonl", ds)
    print(f"{n} sidecar records -> {out / 'sidecar.jsonl'}")
    return [cfg.data]


def cmd_preprocess(cfg: RunConfig, out: Path) -> list[str]:
    _need(cfg, "data")
    if cfg.vocab:
        _need(cfg, "vocab")
    if cfg.features == "sidecar":
        _need(cfg, "sidecar")
    pack_cfg = cfg.pack_config()
    ds = load_dataset(cfg.data)
    labels = _labels(cfg)
    if cfg.vocab:
        vocab = Vocab.load(cfg.vocab)
    else:
        vocab = build_vocab(_corpus_texts(ds), cfg.vocab_size)
    vocab.save(out / "vocab.txt")
    labels.save(out / "labels")
    sidecar = read_sidecar(cfg.sidecar, labels) if cfg.features == "sidecar" else None
    enc = encode_dataset(ds, vocab, pack_cfg, labels, sidecar)
    name = f"cache-{config_hash(enc.meta)}.npz"
    save_cache(enc, out / name)
    write_json(out / "preprocess.json", {"cache": name, "examples": len(enc), "meta": enc.meta})
    print(f"{len(enc)} examples packed -> {out / name}")
    return [cfg.data, cfg.vocab, cfg.sidecar]


def cmd_train(cfg: RunConfig, out: Path) -> list[str]:
    _need(cfg, "cache")
    cache = _cache_path(cfg)
    enc = load_cache(cache)
    mcfg = cfg.model_config(enc.meta["vocab_size"], enc.meta["label_sizes"], enc.max_seq_len)
    res = train(mcfg, cfg.train_config(), enc, out_dir=out)
    print(f"trained {len(res.losses)} steps, final loss {res.losses[-1][1]:.6f} -> {res.checkpoint}")
    return [str(cache)]


def cmd_predict(cfg: RunConfig, out: Path) -> list[str]:
    _need(cfg, "checkpoint", "cache", "data")
    cache = _cache_path(cfg)
    ds = load_dataset(cfg.data)
    enc = load_cache(cache)
    pred_path, _ = predict_file(cfg.checkpoint, ds, enc, cfg.null_threshold, out, cfg.max_answer_len)
    print(f"predictions -> {pred_path}")
    return [cfg.checkpoint, str(cache), cfg.data]


def _load_preds(path) -> dict:
    try:
        preds = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: {e}") from None
    if not isinstance(preds, dict) or not all(isinstance(v, str) for v in preds.values()):
        raise DataError(f"{path}: expected a JSON object mapping qid -> answer string")
    return preds


def cmd_evaluate(cfg: RunConfig, out: Path) -> list[str]:
    _need(cfg, "pred", "data")
    ds = load_dataset(cfg.data)
    metrics = evaluate(_load_preds(cfg.pred), ds)
    write_metrics(metrics, out / "metrics.json")
    print(f"exact {metrics.exact:.2f}  f1 {metrics.f1:.2f}  total {metrics.total}")
    print(metrics.confusion.format())
    return [cfg.pred, cfg.data]


def cmd_analyze(cfg: RunConfig, out: Path) -> list[str]:
    _need(cfg, "pred", "data")
    if cfg.nbest:
        _need(cfg, "nbest")
    ds = load_dataset(cfg.data)
    preds = _load_preds(cfg.pred)
    evaluate(preds, ds)
    nbest = json.loads(Path(cfg.nbest).read_text(encoding="utf-8")) if cfg.nbest else None
    records, summary = error_report(preds, ds, nbest)
    write_errors(records, out / "errors.jsonl")
    write_json(out / "error_summary.json", summary)
    for k, v in summary.items():
        print(f"{k:>20}: {v}")
    return [cfg.pred, cfg.data, cfg.nbest]


def cmd_gradcheck(cfg: RunConfig, out: Path) -> list[str]:
    from .gradcheck import model_check, op_suite

    ops = op_suite(seed=cfg.seed)
    params = model_check(seed=cfg.seed)
    report = {"ops": ops, "model": params, "tolerance": 1e-4}
    report["passed"] = max(list(ops.values()) + list(params.values())) < 1e-4
    write_json(out / "gradcheck.json", report)
    for name, err in list(ops.items()) + list(params.items()):
        print(f"{'ok ' if err < 1e-4 else 'BAD'} {name:<28} {err:.3e}")
    if not report["passed"]:
        raise NumericalError("gradient check exceeded 1e-4")
    return []


COMMANDS = {
    "synth": (cmd_synth, "write a synthetic SQuAD 2.0 file"),
    "build-vocab": (cmd_build_vocab, "learn a subword vocabulary from a dataset"),
    "tag": (cmd_tag, "run the rule-based tagger and write a sidecar file"),
    "preprocess": (cmd_preprocess, "pack inputs and align features into a cache"),
    "train": (cmd_train, "train a model from a preprocess cache"),
    "predict": (cmd_predict, "write predictions.json and nbest.json"),
    "evaluate": (cmd_evaluate, "score predictions (EM/F1, confusion matrix)"),
    "analyze": (cmd_analyze, "categorize errors into errors.jsonl"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of every op and the model loss"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="featqa", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        _add_run_flags(sub.add_parser(name, help=help_text))
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        func, _ = COMMANDS[args.command]
        inputs = func(cfg, out)
        _write_manifest(cfg, out, args.command, [p for p in inputs if p])
    except UsageError as e:
        print(f"featqa: usage error: {e}", file=sys.stderr)
        return 1
    except NumericalError as e:
        print(f"featqa: numerical failure: {e}", file=sys.stderr)
        return 3
    except (DataError, FileNotFoundError, UnicodeDecodeError) as e:
        print(f"featqa: data error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
