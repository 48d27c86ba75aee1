"""Command-line interface.

Every subcommand reads options from flags, an optional JSON config file
(``--config``), and built-in defaults, in that precedence order. Unknown or
mistyped config keys are rejected. The resolved configuration is echoed to
stderr before work starts, progress goes to stderr, and machine-readable
output (CSV) goes to stdout, so redirecting stdout captures exactly the
product of the run.

Exit codes: 0 on success, 1 for invalid input (bad flags, unreadable or
malformed files, contract violations), 2 for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import sys

from .dataset import (
    Dataset,
    SyntheticSpec,
    corpus_lines,
    dataset_stats,
    generate_synthetic,
    load_dataset,
    save_dataset,
)
from .encoder import EncoderConfig
from .errors import (
    CheckpointError,
    ConfigurationError,
    ContractError,
    EmptyInputError,
    ListRankError,
    MissingIdError,
    NonFiniteGradientError,
    ParseError,
    StoreError,
    ValidationError,
)
from .metrics import mean_ndcg, metrics_to_csv, MetricRow
from .serve import (
    benchmark_latency,
    load_store,
    precompute_embeddings,
    rank_with_student,
    rank_with_teacher,
    save_store,
)
from .tokenizer import Tokenizer, load_tokenizer, train_bpe
from .training import (
    Checkpoint,
    LOSS_NAMES,
    TrainConfig,
    distill,
    finetune_ltr,
    init_checkpoint,
    load_checkpoint,
    pretrain_mlm,
    save_checkpoint,
)

_INVALID_INPUT_ERRORS = (
    ConfigurationError,
    ValidationError,
    ParseError,
    MissingIdError,
    EmptyInputError,
    ContractError,
    CheckpointError,
    StoreError,
)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


class _Opt:
    """One resolvable option: flag, config-file key, type, default."""

    def __init__(self, name, kind, default=None, required=False, help="", choices=None, is_flag=False):
        self.name = name
        self.kind = kind
        self.default = default
        self.required = required
        self.help = help
        self.choices = choices
        self.is_flag = is_flag

    @property
    def flag(self):
        return "--" + self.name.replace("_", "-")


def _add_opts(parser, opts):
    for o in opts:
        if o.is_flag:
            parser.add_argument(o.flag, action="store_const", const=True, default=None, help=o.help)
        else:
            parser.add_argument(o.flag, type=o.kind, default=None, choices=o.choices, help=o.help)


def _config_value(key, value, kind):
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"config key {key!r} must be a boolean")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"config key {key!r} must be an integer")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"config key {key!r} must be a number")
        return float(value)
    if not isinstance(value, str):
        raise ConfigurationError(f"config key {key!r} must be a string")
    return value


def _resolve(args, opts):
    file_cfg = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except OSError as exc:
            raise ConfigurationError(f"cannot read config file: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigurationError("config file must hold a JSON object")
    known = {o.name: o for o in opts}
    unknown = sorted(set(file_cfg) - set(known))
    if unknown:
        raise ConfigurationError(f"unknown config keys: {unknown}")
    resolved = {}
    for o in opts:
        flag_value = getattr(args, o.name)
        if flag_value is not None:
            resolved[o.name] = flag_value
        elif o.name in file_cfg:
            value = _config_value(o.name, file_cfg[o.name], bool if o.is_flag else o.kind)
            if o.choices and value not in o.choices:
                raise ConfigurationError(f"config key {o.name!r} must be one of {list(o.choices)}")
            resolved[o.name] = value
        else:
            resolved[o.name] = o.default
        if o.required and resolved[o.name] is None:
            raise ConfigurationError(f"missing required option {o.flag}")
    return resolved


def _echo(cmd, resolved):
    print(f"[{cmd}] config {json.dumps(resolved, sort_keys=True)}", file=sys.stderr)


def _progress(cmd, message):
    print(f"[{cmd}] {message}", file=sys.stderr)


def _load_corpus(resolved):
    lines = []
    if resolved.get("data"):
        lines.extend(corpus_lines(load_dataset(resolved["data"])))
    if resolved.get("corpus"):
        try:
            with open(resolved["corpus"], "r", encoding="utf-8") as fh:
                lines.extend(line.strip() for line in fh if line.strip())
        except OSError as exc:
            raise ConfigurationError(f"cannot read corpus file: {exc}") from exc
    if not lines:
        raise ConfigurationError("provide --data and/or --corpus with at least one line")
    return lines


def _encoder_config(resolved, vocab_size):
    return EncoderConfig(
        n_layers=resolved["layers"],
        n_heads=resolved["heads"],
        model_dim=resolved["dim"],
        ffn_dim=resolved["ffn_dim"],
        vocab_size=vocab_size,
        max_len=resolved["max_len"],
        pooling=resolved["pooling"],
    )


_ENCODER_OPTS = [
    _Opt("layers", int, 2, help="number of residual blocks"),
    _Opt("heads", int, 4, help="attention heads"),
    _Opt("dim", int, 64, help="model width"),
    _Opt("ffn_dim", int, 256, help="feed-forward width"),
    _Opt("max_len", int, 64, help="maximum sequence length"),
    _Opt("pooling", str, "cls", choices=("cls", "mean"), help="embedding pooling"),
]


def _scorer_for(ckpt: Checkpoint, tokenizer: Tokenizer):
    from .training import make_bi_encoder_scorer, make_cross_encoder_scorer

    if ckpt.loss_name == "margin_mse":
        return make_bi_encoder_scorer(ckpt, tokenizer)
    return make_cross_encoder_scorer(ckpt, tokenizer)


# -- subcommands ------------------------------------------------------------


def _cmd_synth_data(args, opts):
    resolved = _resolve(args, opts)
    _echo("synth-data", resolved)
    spec = SyntheticSpec(
        n_queries=resolved["n_queries"],
        list_size=resolved["list_size"],
        attribute_vocab_size=resolved["attribute_vocab"],
        query_token_count=resolved["query_tokens"],
        noise_std=resolved["noise_std"],
        seed=resolved["seed"],
    )
    dataset = generate_synthetic(spec)
    save_dataset(dataset, resolved["out"])
    stats = dataset_stats(dataset)
    _progress(
        "synth-data",
        f"wrote {stats.group_count} queries to {resolved['out']} "
        f"(median list {stats.list_len_median}, median query tokens {stats.query_len_median})",
    )
    return 0


def _cmd_tokenize_train(args, opts):
    resolved = _resolve(args, opts)
    _echo("tokenize-train", resolved)
    lines = _load_corpus(resolved)
    tokenizer = train_bpe(lines, resolved["vocab_size"])
    tokenizer.save(resolved["out"])
    _progress(
        "tokenize-train",
        f"trained vocab of {tokenizer.vocab_size} tokens "
        f"({len(tokenizer.merges)} merges, hash {tokenizer.content_hash()}) to {resolved['out']}",
    )
    return 0


def _train_config(resolved, **overrides):
    base = dict(
        lr=resolved["lr"],
        epochs=resolved["epochs"],
        batch_size=resolved["batch_size"],
        seed=resolved["seed"],
    )
    base.update(overrides)
    return TrainConfig(**base)


def _cmd_pretrain(args, opts):
    resolved = _resolve(args, opts)
    _echo("pretrain", resolved)
    tokenizer = load_tokenizer(resolved["tokenizer"])
    lines = _load_corpus(resolved)
    config = _encoder_config(resolved, tokenizer.vocab_size)
    train_config = _train_config(
        resolved,
        mask_rate=resolved["mask_rate"],
        heldout_fraction=resolved["heldout_fraction"],
    )
    _progress("pretrain", f"corpus of {len(lines)} lines, {train_config.epochs} epochs")
    ckpt, history = pretrain_mlm(lines, tokenizer, config, train_config)
    save_checkpoint(ckpt, resolved["out"])
    _progress("pretrain", f"saved checkpoint to {resolved['out']}")
    sys.stdout.write(metrics_to_csv(history))
    return 0


def _cmd_train(args, opts):
    resolved = _resolve(args, opts)
    _echo("train", resolved)
    tokenizer = load_tokenizer(resolved["tokenizer"])
    dataset = load_dataset(resolved["data"])
    eval_dataset = load_dataset(resolved["eval_data"]) if resolved["eval_data"] else None
    if resolved["init"]:
        ckpt_in = load_checkpoint(resolved["init"])
    else:
        config = _encoder_config(resolved, tokenizer.vocab_size)
        ckpt_in = init_checkpoint(config, resolved["seed"], tokenizer.content_hash())
    train_config = _train_config(resolved, approx_alpha=resolved["alpha"])
    _progress(
        "train",
        f"{len(dataset.groups)} query groups, loss {resolved['loss']}, "
        f"{train_config.epochs} epochs",
    )
    ckpt, history = finetune_ltr(
        dataset, ckpt_in, resolved["loss"], train_config, tokenizer, eval_dataset
    )
    save_checkpoint(ckpt, resolved["out"])
    _progress("train", f"saved checkpoint to {resolved['out']}")
    sys.stdout.write(metrics_to_csv(history))
    return 0


def _cmd_eval(args, opts):
    resolved = _resolve(args, opts)
    _echo("eval", resolved)
    tokenizer = load_tokenizer(resolved["tokenizer"])
    ckpt = load_checkpoint(resolved["model"])
    dataset = load_dataset(resolved["data"])
    k = resolved["k"] if resolved["k"] else None
    ndcg = mean_ndcg(dataset, _scorer_for(ckpt, tokenizer), k=k)
    row = MetricRow(ckpt.epoch, "eval", ckpt.loss_name, None, ndcg)
    sys.stdout.write(metrics_to_csv([row]))
    return 0


def _cmd_distill(args, opts):
    resolved = _resolve(args, opts)
    _echo("distill", resolved)
    tokenizer = load_tokenizer(resolved["tokenizer"])
    teacher = load_checkpoint(resolved["teacher"])
    dataset = load_dataset(resolved["data"])
    eval_dataset = load_dataset(resolved["eval_data"]) if resolved["eval_data"] else None
    train_config = _train_config(
        resolved,
        distill_pair_cap=resolved["pair_cap"],
        init_from_teacher=not resolved["from_scratch"],
    )
    _progress("distill", f"{len(dataset.groups)} query groups, {train_config.epochs} epochs")
    student, history = distill(teacher, dataset, train_config, tokenizer, eval_dataset)
    save_checkpoint(student, resolved["out"])
    _progress("distill", f"saved student checkpoint to {resolved['out']}")
    if resolved["store_out"]:
        catalog = [doc for group in dataset.groups for doc in group.docs]
        store = precompute_embeddings(student, catalog, tokenizer)
        save_store(store, resolved["store_out"])
        _progress("distill", f"saved {len(store)} embeddings to {resolved['store_out']}")
    sys.stdout.write(metrics_to_csv(history))
    return 0


def _candidate_docs(dataset: Dataset, wanted):
    by_id = {}
    for group in dataset.groups:
        for doc in group.docs:
            by_id.setdefault(doc.doc_id, doc)
    if wanted is None:
        return list(by_id.values())
    missing = sorted(set(wanted) - set(by_id))
    if missing:
        raise MissingIdError(f"doc ids not in the dataset: {', '.join(missing)}", missing)
    return [by_id[d] for d in wanted]


def _cmd_rank(args, opts):
    resolved = _resolve(args, opts)
    _echo("rank", resolved)
    if bool(resolved["student"]) == bool(resolved["teacher"]):
        raise ConfigurationError("provide exactly one of --student or --teacher")
    tokenizer = load_tokenizer(resolved["tokenizer"])
    wanted = resolved["candidates"].split(",") if resolved["candidates"] else None
    if resolved["student"]:
        if not resolved["store"]:
            raise ConfigurationError("--student mode requires --store")
        student = load_checkpoint(resolved["student"])
        store = load_store(resolved["store"])
        candidate_ids = wanted if wanted is not None else list(store.doc_ids)
        result = rank_with_student(student, store, resolved["query"], candidate_ids, tokenizer)
    else:
        if not resolved["data"]:
            raise ConfigurationError("--teacher mode requires --data")
        teacher = load_checkpoint(resolved["teacher"])
        docs = _candidate_docs(load_dataset(resolved["data"]), wanted)
        result = rank_with_teacher(teacher, resolved["query"], docs, tokenizer)
    _progress("rank", f"ranked {len(result.ranking)} candidates in {result.latency_ms:.3f} ms")
    out = ["doc_id,score"]
    out.extend(f"{doc_id},{score:.6g}" for doc_id, score in result.ranking)
    sys.stdout.write("\n".join(out) + "\n")
    return 0


def _cmd_bench(args, opts):
    resolved = _resolve(args, opts)
    _echo("bench", resolved)
    tokenizer = load_tokenizer(resolved["tokenizer"])
    teacher = load_checkpoint(resolved["teacher"])
    student = load_checkpoint(resolved["student"])
    dataset = load_dataset(resolved["data"])
    if resolved["store"]:
        store = load_store(resolved["store"])
    else:
        catalog = [doc for group in dataset.groups for doc in group.docs]
        store = precompute_embeddings(student, catalog, tokenizer)
    report = benchmark_latency(
        teacher,
        student,
        store,
        dataset,
        tokenizer,
        n_queries=resolved["n_queries"],
        list_size=resolved["list_size"],
        seed=resolved["seed"],
        warmup=resolved["warmup"],
    )
    _progress("bench", f"speedup x{report.speedup:.2f} over {resolved['n_queries']} queries")
    sys.stdout.write(report.to_csv())
    return 0


# -- wiring -----------------------------------------------------------------


def _command_table():
    seed = _Opt("seed", int, 0, help="random seed")
    return {
        "synth-data": (
            _cmd_synth_data,
            "Generate a synthetic graded ranking dataset.",
            [
                _Opt("out", str, required=True, help="output dataset path (JSONL)"),
                _Opt("n_queries", int, required=True, help="number of query groups"),
                _Opt("list_size", int, 30, help="documents per query"),
                _Opt("attribute_vocab", int, 120, help="attribute vocabulary size"),
                _Opt("query_tokens", int, 4, help="attribute words per query"),
                _Opt("noise_std", float, 0.2, help="grade noise standard deviation"),
                seed,
            ],
        ),
        "tokenize-train": (
            _cmd_tokenize_train,
            "Learn a byte-level BPE vocabulary from text.",
            [
                _Opt("data", str, help="dataset (JSONL) whose text forms the corpus"),
                _Opt("corpus", str, help="plain text file, one line per document"),
                _Opt("vocab_size", int, 1200, help="total vocabulary size"),
                _Opt("out", str, required=True, help="output tokenizer path (JSON)"),
            ],
        ),
        "pretrain": (
            _cmd_pretrain,
            "Pre-train the encoder on masked-token prediction.",
            [
                _Opt("data", str, help="dataset (JSONL) whose text forms the corpus"),
                _Opt("corpus", str, help="plain text file, one line per document"),
                _Opt("tokenizer", str, required=True, help="tokenizer path"),
                _Opt("out", str, required=True, help="output checkpoint path"),
                _Opt("epochs", int, 4, help="training epochs"),
                _Opt("lr", float, 1e-3, help="learning rate"),
                _Opt("batch_size", int, 64, help="lines per optimizer step"),
                _Opt("mask_rate", float, 0.15, help="fraction of tokens masked"),
                _Opt("heldout_fraction", float, 0.1, help="corpus fraction held out"),
                seed,
            ]
            + _ENCODER_OPTS,
        ),
        "train": (
            _cmd_train,
            "Fine-tune the cross-encoder on graded lists.",
            [
                _Opt("data", str, required=True, help="training dataset (JSONL)"),
                _Opt("eval_data", str, help="evaluation dataset (JSONL)"),
                _Opt("tokenizer", str, required=True, help="tokenizer path"),
                _Opt("init", str, help="starting checkpoint (default: fresh init)"),
                _Opt("loss", str, "approxndcg", choices=LOSS_NAMES, help="surrogate loss"),
                _Opt("alpha", float, 1.0, help="smooth-rank sharpness (approxndcg)"),
                _Opt("out", str, required=True, help="output checkpoint path"),
                _Opt("epochs", int, 10, help="training epochs"),
                _Opt("lr", float, 3e-4, help="learning rate"),
                _Opt("batch_size", int, 8, help="query groups per optimizer step"),
                seed,
            ]
            + _ENCODER_OPTS,
        ),
        "eval": (
            _cmd_eval,
            "Report mean NDCG of a checkpoint on a dataset.",
            [
                _Opt("model", str, required=True, help="checkpoint path"),
                _Opt("tokenizer", str, required=True, help="tokenizer path"),
                _Opt("data", str, required=True, help="evaluation dataset (JSONL)"),
                _Opt("k", int, help="NDCG cutoff (default: full list)"),
            ],
        ),
        "distill": (
            _cmd_distill,
            "Distill the cross-encoder into a bi-encoder student.",
            [
                _Opt("teacher", str, required=True, help="teacher checkpoint path"),
                _Opt("data", str, required=True, help="training dataset (JSONL)"),
                _Opt("eval_data", str, help="evaluation dataset (JSONL)"),
                _Opt("tokenizer", str, required=True, help="tokenizer path"),
                _Opt("out", str, required=True, help="output student checkpoint path"),
                _Opt("store_out", str, help="also write an embedding store here"),
                _Opt("pair_cap", int, 50, help="max distillation pairs per query"),
                _Opt("from_scratch", bool, False, is_flag=True,
                     help="initialize the student fresh instead of from the teacher"),
                _Opt("epochs", int, 4, help="training epochs"),
                _Opt("lr", float, 3e-4, help="learning rate"),
                _Opt("batch_size", int, 8, help="query groups per optimizer step"),
                seed,
            ],
        ),
        "rank": (
            _cmd_rank,
            "Rank candidate documents for one query.",
            [
                _Opt("query", str, required=True, help="query text"),
                _Opt("tokenizer", str, required=True, help="tokenizer path"),
                _Opt("student", str, help="student checkpoint (needs --store)"),
                _Opt("store", str, help="embedding store path"),
                _Opt("teacher", str, help="teacher checkpoint (needs --data)"),
                _Opt("data", str, help="dataset holding the candidate documents"),
                _Opt("candidates", str, help="comma-separated doc ids (default: all)"),
            ],
        ),
        "bench": (
            _cmd_bench,
            "Compare serving latency of teacher and student.",
            [
                _Opt("teacher", str, required=True, help="teacher checkpoint path"),
                _Opt("student", str, required=True, help="student checkpoint path"),
                _Opt("tokenizer", str, required=True, help="tokenizer path"),
                _Opt("data", str, required=True, help="dataset providing the workload"),
                _Opt("store", str, help="embedding store (default: build from --data)"),
                _Opt("n_queries", int, 100, help="measured queries"),
                _Opt("list_size", int, 30, help="candidates per query"),
                _Opt("warmup", int, 10, help="untimed warmup queries"),
                seed,
            ],
        ),
    }


def build_parser():
    table = _command_table()
    parser = _Parser(prog="listrank", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for name, (func, help_text, opts) in table.items():
        p = sub.add_parser(name, help=help_text, description=help_text, parents=[])
        p.add_argument("--config", type=str, default=None, help="JSON config file")
        _add_opts(p, opts)
        p.set_defaults(_func=func, _opts=opts)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if not getattr(args, "command", None):
        parser.print_help(sys.stderr)
        return 1
    try:
        return args._func(args, args._opts)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return 1
    except _INVALID_INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NonFiniteGradientError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    except ListRankError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
