"""Command-line entry point: ``mbc <command> [options]``.

Every command writes line-delimited JSON to stdout, followed by a short
human-readable summary on stderr. Nothing printed to stdout depends on the
wall clock, so identical invocations give identical output.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .adaptation import OnlineAdapter
from .codebook import codebook_perplexity
from .corpus import DataError, QACorpus, gen_synthetic, load_qa, save_corpus
from .membank import BankError, footprint_model, load_bank, save_bank
from .model import ModelConfig, param_report
from .training import CheckpointError, Trainer, TrainConfig, TrainingError, read_checkpoint

log = logging.getLogger("mbc")

# Desk-scale optimization settings used unless a config overrides them.
TOY_TRAIN = {"learning_rate": 3e-3, "backprop_dropout": 0.0}


class ConfigError(ValueError):
    pass


def _strict(section: str, cls, data: dict, base: dict | None = None):
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected an object")
    unknown = set(data) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"{section}: unknown keys {sorted(unknown)}")
    try:
        return cls(**{**(base or {}), **data})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


@dataclass(frozen=True)
class DataConfig:
    """``train``/``val`` JSONL paths; without them a synthetic corpus is generated."""

    train: str | None = None
    val: str | None = None
    synthetic_docs: int = 320

    def __post_init__(self):
        if self.synthetic_docs < 1:
            raise ValueError("synthetic_docs must be >= 1")


@dataclass(frozen=True)
class AdaptConfig:
    group_size: int = 64
    batch_size: int = 64

    def __post_init__(self):
        if self.group_size < 1 or self.batch_size < 1:
            raise ValueError("group_size and batch_size must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs. ``seed`` drives all randomness; ``train.seed`` is not accepted."""

    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(**TOY_TRAIN))
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    data: DataConfig = field(default_factory=DataConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}")
        if "seed" in d.get("train", {}):
            raise ConfigError("train.seed: set the top-level seed instead")
        seed = d.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ConfigError("seed must be an integer")
        return cls(
            seed=seed,
            model=_strict("model", ModelConfig, d.get("model", {})),
            train=_strict("train", TrainConfig, d.get("train", {}), {**TOY_TRAIN, "seed": seed}),
            adapt=_strict("adapt", AdaptConfig, d.get("adapt", {})),
            data=_strict("data", DataConfig, d.get("data", {})),
        )

    def to_dict(self) -> dict:
        train = asdict(self.train)
        del train["seed"]
        return {"seed": self.seed, "model": asdict(self.model), "train": train,
                "adapt": asdict(self.adapt), "data": asdict(self.data)}

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def resolve_config(args) -> RunConfig:
    raw: dict = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
    raw = json.loads(json.dumps(raw))
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.no_reset:
        raw.setdefault("train", {})["reset_codes"] = False
    if args.group_size is not None:
        raw.setdefault("model", {})["group_size"] = args.group_size
        raw.setdefault("adapt", {})["group_size"] = args.group_size
    return RunConfig.from_dict(raw)


def emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True), flush=True)


def say(fmt: str, *args) -> None:
    """Human-readable summary line (stderr, so stdout stays pure JSONL)."""
    print(fmt % args if args else fmt, file=sys.stderr, flush=True)


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_split(path: str | None) -> tuple[list, list]:
    return ([], []) if path is None else load_qa(path)


def load_corpus(cfg: RunConfig) -> QACorpus:
    if cfg.data.train is None:
        return gen_synthetic(cfg.data.synthetic_docs, seed=cfg.seed)
    docs, train = load_qa(cfg.data.train)
    vdocs, val = _load_split(cfg.data.val)
    documents = {d.doc_id: d for d in docs + vdocs}
    return QACorpus(documents, train, val, [])


def _records_and_docs(path: str):
    docs, records = load_qa(path)
    return {d.doc_id: d for d in docs}, records


# ---------------------------------------------------------------- commands


def cmd_gen_corpus(args, cfg: RunConfig) -> int:
    n = args.n_docs if args.n_docs is not None else cfg.data.synthetic_docs
    corpus = gen_synthetic(n, seed=cfg.seed)
    paths = save_corpus(corpus, _out_dir(args))
    emit({"event": "corpus", "docs": n, "seed": cfg.seed, "train": len(corpus.train),
          "val": len(corpus.val), "test": len(corpus.test),
          "files": {k: p.name for k, p in sorted(paths.items())}})
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    out = _out_dir(args)
    corpus = load_corpus(cfg)
    trainer = Trainer.from_corpus(cfg.model, cfg.train, corpus)
    (out / "config.json").write_text(cfg.canonical_json() + "\n", encoding="utf-8")
    base_hash = trainer.model.base_hash()
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as fh:
        def record(m):
            row = {"event": "epoch", **m.as_dict()}
            fh.write(json.dumps(row, sort_keys=True) + "\n")
            emit(row)
            say("epoch %d  L_QA %.4f  L_VQ %.4f  PPL %s  resets %d", m.epoch, m.loss_qa,
                     m.loss_vq, "n/a" if m.perplexity is None else f"{m.perplexity:.1f}", m.resets)
        trainer.fit(callback=record)
    trainer.save(out / "checkpoint.mbck")
    if trainer.state.best_arrays is not None:
        trainer.save(out / "best.mbck", trainer.state.best_arrays)
    if trainer.model.base_hash() != base_hash:
        raise TrainingError("frozen base weights changed during training")
    report = param_report(trainer.model)
    emit({"event": "done", "epochs": trainer.state.epoch, "steps": trainer.state.step,
          "checkpoint": "checkpoint.mbck", "best": trainer.state.best, "params": report.as_dict()})
    return 0


def _adapter(args, cfg: RunConfig) -> tuple[Trainer, OnlineAdapter]:
    trainer = Trainer.load(args.checkpoint)
    group = args.group_size if args.group_size is not None else cfg.adapt.group_size
    return trainer, trainer.adapter(group)


def _score(adapter: OnlineAdapter, records, use_memory: bool = True) -> dict:
    preds, em, f1 = adapter.evaluate(records, use_memory)
    return {"preds": preds, "em": em, "f1": f1}


def cmd_adapt(args, cfg: RunConfig) -> int:
    out = _out_dir(args)
    trainer, adapter = _adapter(args, cfg)
    before = trainer.model.param_hash()
    docs, _ = load_qa(args.stream)
    adapter.memorize_many(docs, batch_size=cfg.adapt.batch_size)
    save_bank(adapter.bank, trainer.model.codebook, out / "bank.mbcb")
    emit({"event": "memorized", "docs": len(adapter.bank), "bank": "bank.mbcb"})
    records = load_qa(args.qa)[1] if args.qa else []
    result = None
    if records:
        scored = _score(adapter, records)
        with open(out / "answers.jsonl", "w", encoding="utf-8") as fh:
            for r, p in zip(records, scored["preds"]):
                fh.write(json.dumps({"doc_id": r.doc_id, "question": r.question, "answer": r.answer,
                                     "prediction": p}, sort_keys=True) + "\n")
        result = {"em": scored["em"], "f1": scored["f1"]}
    if trainer.model.param_hash() != before:
        raise TrainingError("parameters changed during adaptation")
    if result is not None:
        say("EM %.4f  F1 %.4f over %d queries", result["em"], result["f1"], len(records))
        emit(result)
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    trainer, adapter = _adapter(args, cfg)
    documents, records = _records_and_docs(args.qa)
    if not records:
        raise DataError("no QA records to evaluate")
    adapter.memorize_many(list(documents.values()), batch_size=cfg.adapt.batch_size)
    with_mem = _score(adapter, records)
    without = _score(adapter, records, use_memory=False)
    row = {"event": "eval", "queries": len(records), "docs": len(adapter.bank),
           "em": with_mem["em"], "f1": with_mem["f1"],
           "em_no_memory": without["em"], "f1_no_memory": without["f1"]}
    say("EM %.4f (no memory %.4f)  F1 %.4f (no memory %.4f)", row["em"], row["em_no_memory"],
             row["f1"], row["f1_no_memory"])
    emit(row)
    return 0


def cmd_bench(args, cfg: RunConfig) -> int:
    milestones = list(range(args.step, args.max_docs + 1, args.step)) if args.max_docs > 0 else [0]
    rows = []
    for n in milestones:
        fp = footprint_model(n, args.num_codes, args.dim, args.tokens, args.element_bytes,
                             args.index_bytes)
        row = {"event": "footprint", "docs": n, **fp.as_dict()}
        rows.append(row)
        emit(row)
    say("%6s %10s %10s %10s", "docs", "MBC MB", "MAC MB", "reduct %")
    for r in rows:
        red = "n/a" if r["reduction_percent"] is None else f"{r['reduction_percent']:.2f}"
        say("%6d %10.4f %10.4f %10s", r["docs"], r["mbc_mb"], r["mac_mb"], red)
    return 0


def cmd_inspect_codebook(args, cfg: RunConfig) -> int:
    if bool(args.checkpoint) == bool(args.bank):
        raise ConfigError("give exactly one of --checkpoint or --bank")
    if args.checkpoint:
        meta, blocks = read_checkpoint(args.checkpoint)
        usage, source = blocks["codebook.usage"], "ema_usage"
        threshold = ModelConfig.from_dict(meta["model"]).reset_threshold
    else:
        bank, E = load_bank(args.bank)
        usage = np.bincount(np.concatenate(bank.codes).astype(np.int64) if len(bank) else
                            np.zeros(0, dtype=np.int64), minlength=bank.num_codes).astype(np.float64)
        source, threshold = "bank_counts", None
    ppl = codebook_perplexity(usage) if usage.sum() > 0 else None
    counts, edges = np.histogram(usage, bins=args.bins)
    row = {"event": "codebook", "source": source, "num_codes": int(usage.size),
           "perplexity": "undefined" if ppl is None else ppl,
           "dead_codes": int((usage < threshold).sum()) if threshold is not None else int((usage == 0).sum()),
           "histogram": {"counts": counts.tolist(), "edges": edges.tolist()}}
    say("PPL %s, %d dead of %d codes", row["perplexity"], row["dead_codes"], row["num_codes"])
    emit(row)
    return 0


COMMANDS = {
    "train": cmd_train,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "inspect-codebook": cmd_inspect_codebook,
    "gen-corpus": cmd_gen_corpus,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON (see README)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output directory (default: current)")
    common.add_argument("--no-reset", action="store_true", help="disable dead-code resetting")
    common.add_argument("--group-size", type=int, help="hierarchical aggregation group size")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mbc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train on a QA corpus")

    p = sub.add_parser("adapt", parents=[common], help="memorize a stream and answer queries")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--stream", required=True, help="JSONL whose documents are memorized")
    p.add_argument("--qa", help="JSONL of queries to answer")

    p = sub.add_parser("eval", parents=[common], help="EM/F1 with and without memory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--qa", required=True)

    p = sub.add_parser("bench", parents=[common], help="memory footprint per milestone")
    p.add_argument("--num-codes", type=int, default=512)
    p.add_argument("--dim", type=int, default=768)
    p.add_argument("--tokens", type=int, default=12)
    p.add_argument("--element-bytes", type=int, default=4)
    p.add_argument("--index-bytes", type=int, default=8)
    p.add_argument("--step", type=int, default=200)
    p.add_argument("--max-docs", type=int, default=1600)

    p = sub.add_parser("inspect-codebook", parents=[common], help="usage histogram and perplexity")
    p.add_argument("--checkpoint")
    p.add_argument("--bank")
    p.add_argument("--bins", type=int, default=10)

    p = sub.add_parser("gen-corpus", parents=[common], help="write a synthetic QA corpus")
    p.add_argument("--n-docs", type=int)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    log.debug("mbc %s started %s", args.command, time.strftime("%Y-%m-%dT%H:%M:%S"))
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, DataError, BankError, CheckpointError, TrainingError, ValueError,
            FileNotFoundError) as exc:
        print(f"mbc {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
