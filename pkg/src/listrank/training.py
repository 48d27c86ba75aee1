"""Optimization loops: masked-token pre-training, listwise fine-tuning of the
cross-encoder, and distillation of a dot-product bi-encoder student.

Everything is deterministic given (seed, config, data): shuffles, masking,
and tie-breaking all derive from ``numpy.random.default_rng`` seeded with
fixed lists, and reduction orders never depend on dict iteration or timing.
Checkpoints are written atomically (temp file + rename) in a self-describing
binary format with a content hash, so interrupted writes never leave a
half-written file behind and corruption is detected on load.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from . import encoder as enc
from .dataset import Dataset, QueryGroup
from .errors import (
    CheckpointHeaderError,
    CheckpointIntegrityError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigurationError,
    ContractError,
    EmptyInputError,
    NonFiniteGradientError,
    ValidationError,
)
from .losses import (
    ApproxConfig,
    ListTarget,
    approxndcg_loss,
    listmle_loss,
    listnet_loss,
    margin_mse_loss,
    mlm_cross_entropy,
    ranknet_loss,
)
from .metrics import MetricRow, mean_ndcg
from .tokenizer import MASK_ID, N_SPECIAL, Tokenizer, mask_for_mlm

LOSS_NAMES = ("ranknet", "listnet", "listmle", "approxndcg")

CKPT_MAGIC = b"LRCKPT01"
CKPT_VERSION = 1
_HASH_BYTES = 8


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters shared by all three training loops."""

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 10
    batch_size: int = 8
    seed: int = 0
    approx_alpha: float = 1.0
    mask_rate: float = 0.15
    heldout_fraction: float = 0.1
    distill_pair_cap: int = 50
    init_from_teacher: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigurationError("lr must be positive")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigurationError(f"{name} must lie in (0, 1)")
        if not self.adam_eps > 0:
            raise ConfigurationError("adam_eps must be positive")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not self.approx_alpha > 0:
            raise ConfigurationError("approx_alpha must be positive")
        if not 0.0 <= self.mask_rate <= 1.0:
            raise ConfigurationError("mask_rate must lie in [0, 1]")
        if not 0.0 < self.heldout_fraction < 1.0:
            raise ConfigurationError("heldout_fraction must lie in (0, 1)")
        if self.distill_pair_cap < 1:
            raise ConfigurationError("distill_pair_cap must be >= 1")


@dataclass
class AdamState:
    """First and second moment accumulators plus the shared step counter."""

    m: dict
    v: dict
    step: int = 0


def init_adam_state(params: enc.EncoderParams) -> AdamState:
    return AdamState(
        m={name: np.zeros_like(a) for name, a in params.named_arrays()},
        v={name: np.zeros_like(a) for name, a in params.named_arrays()},
        step=0,
    )


def adam_step(params: enc.EncoderParams, grads: enc.EncoderParams, state: AdamState, config: TrainConfig):
    """One in-place Adam update with bias correction.

    A non-finite gradient anywhere aborts the step and names the offending
    parameter; params and state are left untouched in that case.
    """
    named_grads = list(grads.named_arrays())
    for name, g in named_grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    state.step += 1
    t = state.step
    bc1 = 1.0 - config.beta1**t
    bc2 = 1.0 - config.beta2**t
    for (name, p), (_, g) in zip(params.named_arrays(), named_grads):
        m = state.m[name]
        v = state.v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * (g * g)
        p -= config.lr * (m / bc1) / (np.sqrt(v / bc2) + config.adam_eps)
    return params, state


# -- checkpoints ------------------------------------------------------------


@dataclass
class Checkpoint:
    """A full model snapshot: parameters plus everything needed to rebuild
    the exact training context (architecture, objective, seed, tokenizer)."""

    config: enc.EncoderConfig
    params: enc.EncoderParams
    loss_name: str
    seed: int
    epoch: int
    tokenizer_hash: str


def init_checkpoint(config: enc.EncoderConfig, seed: int, tokenizer_hash: str) -> Checkpoint:
    return Checkpoint(
        config=config,
        params=enc.init_params(config, seed),
        loss_name="init",
        seed=seed,
        epoch=0,
        tokenizer_hash=tokenizer_hash,
    )


def _payload_bytes(params: enc.EncoderParams):
    manifest = []
    chunks = []
    offset = 0
    for name, a in params.named_arrays():
        raw = np.ascontiguousarray(a, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(a.shape), "offset": offset, "size": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return manifest, b"".join(chunks)


def checkpoint_fingerprint(ckpt: Checkpoint) -> str:
    """Short content hash of the stored (float32) parameters; embedding
    stores carry this value so a store can be matched to its checkpoint."""
    _, payload = _payload_bytes(ckpt.params)
    return hashlib.blake2b(payload, digest_size=_HASH_BYTES).hexdigest()


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    """Write magic, version, JSON header, float32 payload, payload hash."""
    manifest, payload = _payload_bytes(ckpt.params)
    header = {
        "format_version": CKPT_VERSION,
        "encoder_config": ckpt.config.to_dict(),
        "loss_name": ckpt.loss_name,
        "seed": ckpt.seed,
        "epoch": ckpt.epoch,
        "tokenizer_hash": ckpt.tokenizer_hash,
        "manifest": manifest,
    }
    header_raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    digest = hashlib.blake2b(payload, digest_size=_HASH_BYTES).digest()
    blob = b"".join(
        [
            CKPT_MAGIC,
            struct.pack("<I", CKPT_VERSION),
            struct.pack("<I", len(header_raw)),
            header_raw,
            payload,
            digest,
        ]
    )
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str) -> Checkpoint:
    """Read a checkpoint, verifying magic, version, structure, and hash.

    Parameters come back as float64 copies of the stored float32 values.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(CKPT_MAGIC) + 8 or blob[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointHeaderError(f"{path}: not a checkpoint file (bad magic)")
    pos = len(CKPT_MAGIC)
    (version,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if version != CKPT_VERSION:
        raise CheckpointVersionError(
            f"{path}: unsupported checkpoint version {version} (reader supports {CKPT_VERSION})"
        )
    (header_len,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if len(blob) < pos + header_len:
        raise CheckpointTruncatedError(f"{path}: header truncated")
    try:
        header = json.loads(blob[pos : pos + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointHeaderError(f"{path}: header is not valid JSON ({exc})") from exc
    pos += header_len
    for key in ("encoder_config", "loss_name", "seed", "epoch", "tokenizer_hash", "manifest"):
        if key not in header:
            raise CheckpointHeaderError(f"{path}: header missing field {key!r}")
    try:
        config = enc.EncoderConfig(**header["encoder_config"])
    except (TypeError, ConfigurationError) as exc:
        raise CheckpointHeaderError(f"{path}: bad encoder config ({exc})") from exc

    manifest = header["manifest"]
    payload_len = sum(entry["size"] for entry in manifest)
    if len(blob) < pos + payload_len + _HASH_BYTES:
        raise CheckpointTruncatedError(f"{path}: parameter payload truncated")
    payload = blob[pos : pos + payload_len]
    stored_digest = blob[pos + payload_len : pos + payload_len + _HASH_BYTES]
    if hashlib.blake2b(payload, digest_size=_HASH_BYTES).digest() != stored_digest:
        raise CheckpointIntegrityError(f"{path}: content hash mismatch")

    params = enc.init_params(config, seed=0)
    expected = {name: a.shape for name, a in params.named_arrays()}
    seen = set()
    for entry in manifest:
        name = entry["name"]
        if name not in expected:
            raise CheckpointHeaderError(f"{path}: unexpected parameter {name!r}")
        shape = tuple(entry["shape"])
        if shape != expected[name]:
            raise CheckpointHeaderError(
                f"{path}: parameter {name!r} has shape {shape}, config implies {expected[name]}"
            )
        seen.add(name)
    if seen != set(expected):
        missing = sorted(set(expected) - seen)
        raise CheckpointHeaderError(f"{path}: parameters missing from manifest: {missing}")

    arrays = {}
    for entry in manifest:
        raw = payload[entry["offset"] : entry["offset"] + entry["size"]]
        arrays[entry["name"]] = (
            np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(entry["shape"])
        )
    for name, a in params.named_arrays():
        a[...] = arrays[name]
    return Checkpoint(
        config=config,
        params=params,
        loss_name=header["loss_name"],
        seed=header["seed"],
        epoch=header["epoch"],
        tokenizer_hash=header["tokenizer_hash"],
    )


# -- shared helpers ---------------------------------------------------------


_pad_rows = enc.pad_token_rows


def _encode_groups(dataset: Dataset, tokenizer: Tokenizer, max_len: int):
    """Tokenize every (query, document) pair once, grouped by query."""
    encoded = []
    for group in dataset.groups:
        seqs = [tokenizer.encode_pair(group.query_text, d.text, max_len) for d in group.docs]
        encoded.append([s.ids for s in seqs])
    return encoded


def make_loss_kernel(loss_name: str, train_config: TrainConfig):
    """Kernel(scores, target, tie_seed) for the configured objective."""
    if loss_name == "ranknet":
        return lambda scores, target, tie_seed: ranknet_loss(scores, target)
    if loss_name == "listnet":
        return lambda scores, target, tie_seed: listnet_loss(scores, target)
    if loss_name == "listmle":
        return lambda scores, target, tie_seed: listmle_loss(scores, target, tie_seed=tie_seed)
    if loss_name == "approxndcg":
        cfg = ApproxConfig(alpha=train_config.approx_alpha)
        return lambda scores, target, tie_seed: approxndcg_loss(scores, target, cfg)
    raise ConfigurationError(f"unknown loss {loss_name!r}; choose one of {LOSS_NAMES}")


def make_cross_encoder_scorer(ckpt: Checkpoint, tokenizer: Tokenizer):
    """Group scorer that runs the cross-encoder over every (query, doc) pair."""

    def scorer(group: QueryGroup) -> np.ndarray:
        rows = [
            tokenizer.encode_pair(group.query_text, d.text, ckpt.config.max_len).ids
            for d in group.docs
        ]
        ids, mask = _pad_rows(rows)
        scores, _ = enc.score_cls_batch(ckpt.params, ckpt.config, ids, mask)
        return scores

    return scorer


def make_bi_encoder_scorer(ckpt: Checkpoint, tokenizer: Tokenizer):
    """Group scorer that embeds query and documents separately and takes
    dot products, mirroring how the student serves."""

    def scorer(group: QueryGroup) -> np.ndarray:
        rows = [tokenizer.encode_single(group.query_text, ckpt.config.max_len).ids]
        rows += [tokenizer.encode_single(d.text, ckpt.config.max_len).ids for d in group.docs]
        ids, mask = _pad_rows(rows)
        emb, _ = enc.embed_batch(ckpt.params, ckpt.config, ids, mask)
        return emb[1:] @ emb[0]

    return scorer


def _batches(order: np.ndarray, batch_size: int):
    for start in range(0, order.size, batch_size):
        yield order[start : start + batch_size]


# -- masked-token pre-training ----------------------------------------------


def evaluate_mlm(params: enc.EncoderParams, config: enc.EncoderConfig, seqs, mask_rate: float, mask_seed_base: list) -> float:
    """Mean masked-token loss over ``seqs`` with deterministic per-line masks.

    Lines where the draw masks nothing are skipped; if that leaves nothing,
    the first maskable position of the first eligible line is masked instead,
    so the evaluation is never empty for a corpus with any real tokens.
    """
    batch_rows, batch_labels = [], []
    for li, seq in enumerate(seqs):
        masked, labels = mask_for_mlm(seq, rate=mask_rate, seed=mask_seed_base + [li])
        positions = [p for p, lab in enumerate(labels) if lab >= 0]
        if not positions:
            continue
        batch_rows.append((masked.ids, positions))
        batch_labels.extend(labels[p] for p in positions)
    if not batch_rows:
        for seq in seqs:
            maskable = [p for p, t in enumerate(seq.ids) if t >= N_SPECIAL]
            if maskable:
                forced = list(seq.ids)
                batch_labels.append(forced[maskable[0]])
                forced[maskable[0]] = MASK_ID
                batch_rows.append((forced, [maskable[0]]))
                break
    if not batch_rows:
        raise EmptyInputError("evaluation lines contain no maskable tokens")
    ids, mask = _pad_rows([r for r, _ in batch_rows])
    hidden, _ = enc.forward_batch(params, config, ids, mask)
    states = np.concatenate(
        [hidden[i, positions, :] for i, (_, positions) in enumerate(batch_rows)]
    )
    logits = enc.mlm_logits_batch(params, states)
    out = mlm_cross_entropy(logits, np.asarray(batch_labels, dtype=np.int64))
    return out.value


def pretrain_mlm(
    corpus,
    tokenizer: Tokenizer,
    encoder_config: enc.EncoderConfig,
    train_config: TrainConfig,
):
    """Train the encoder to predict masked tokens.

    A deterministic slice of the corpus is held out; history rows report the
    held-out loss at epoch 0 (before any update) and after every epoch, so
    the improvement over the untrained model can be read off directly.
    Returns ``(checkpoint, history)``.
    """
    corpus = list(corpus)
    if not corpus:
        raise EmptyInputError("pre-training corpus is empty")
    params = enc.init_params(encoder_config, train_config.seed)
    state = init_adam_state(params)

    seqs = [tokenizer.encode_single(line, encoder_config.max_len) for line in corpus]
    n = len(seqs)
    split_rng = np.random.default_rng([train_config.seed, 7201])
    perm = split_rng.permutation(n)
    n_heldout = max(1, int(round(train_config.heldout_fraction * n))) if n > 1 else 0
    heldout_idx = perm[:n_heldout]
    train_idx = perm[n_heldout:] if n_heldout else perm
    heldout_seqs = [seqs[i] for i in heldout_idx] if n_heldout else [seqs[i] for i in train_idx]

    eval_seed_base = [train_config.seed, 7202]
    history = [
        MetricRow(0, "heldout", "mlm",
                  evaluate_mlm(params, encoder_config, heldout_seqs, train_config.mask_rate, eval_seed_base),
                  None)
    ]

    shuffle_rng = np.random.default_rng([train_config.seed, 7203])
    for epoch in range(1, train_config.epochs + 1):
        order = train_idx[shuffle_rng.permutation(train_idx.size)]
        epoch_loss = 0.0
        epoch_weight = 0
        for batch in _batches(order, train_config.batch_size):
            rows, gathered_labels, gathered_positions = [], [], []
            for li in batch:
                masked, labels = mask_for_mlm(
                    seqs[li], rate=train_config.mask_rate, seed=[train_config.seed, 7204, epoch, int(li)]
                )
                positions = [p for p, lab in enumerate(labels) if lab >= 0]
                rows.append(masked.ids)
                gathered_positions.append(positions)
                gathered_labels.extend(labels[p] for p in positions)
            if not gathered_labels:
                continue
            ids, mask = _pad_rows(rows)
            hidden, trace = enc.forward_batch(params, encoder_config, ids, mask)
            states = np.concatenate(
                [hidden[i, pos, :] for i, pos in enumerate(gathered_positions) if pos]
            )
            labels_arr = np.asarray(gathered_labels, dtype=np.int64)
            logits = enc.mlm_logits_batch(params, states)
            out = mlm_cross_entropy(logits, labels_arr)

            d_states = out.grad @ params.tok_emb
            d_hidden = np.zeros_like(hidden)
            row_offset = 0
            for i, pos in enumerate(gathered_positions):
                if pos:
                    d_hidden[i, pos, :] = d_states[row_offset : row_offset + len(pos)]
                    row_offset += len(pos)
            grads = enc.backward_batch(params, encoder_config, trace, d_hidden)
            grads.tok_emb += out.grad.T @ states
            grads.mlm_bias += out.grad.sum(axis=0)
            adam_step(params, grads, state, train_config)
            epoch_loss += out.value * labels_arr.size
            epoch_weight += labels_arr.size
        mean_train = epoch_loss / epoch_weight if epoch_weight else 0.0
        history.append(MetricRow(epoch, "train", "mlm", mean_train, None))
        history.append(
            MetricRow(epoch, "heldout", "mlm",
                      evaluate_mlm(params, encoder_config, heldout_seqs, train_config.mask_rate, eval_seed_base),
                      None)
        )
    ckpt = Checkpoint(
        config=encoder_config,
        params=params,
        loss_name="mlm",
        seed=train_config.seed,
        epoch=train_config.epochs,
        tokenizer_hash=tokenizer.content_hash(),
    )
    return ckpt, history


# -- listwise fine-tuning ---------------------------------------------------


def finetune_ltr(
    dataset: Dataset,
    checkpoint_in: Checkpoint,
    loss_name: str,
    train_config: TrainConfig,
    tokenizer: Tokenizer,
    eval_dataset: Dataset = None,
):
    """Fine-tune the cross-encoder on graded lists with the chosen surrogate.

    Each step averages per-query gradients over a batch of query groups.
    History rows carry the mean training loss per epoch and, when an eval
    dataset is given, its mean NDCG per epoch. Returns ``(checkpoint, history)``.
    """
    if loss_name not in LOSS_NAMES:
        raise ConfigurationError(f"unknown loss {loss_name!r}; choose one of {LOSS_NAMES}")
    if not dataset.groups:
        raise EmptyInputError("training dataset has no query groups")
    if checkpoint_in.tokenizer_hash and checkpoint_in.tokenizer_hash != tokenizer.content_hash():
        raise ContractError("tokenizer does not match the one recorded in the checkpoint")

    config = checkpoint_in.config
    params = checkpoint_in.params.copy()
    state = init_adam_state(params)
    kernel = make_loss_kernel(loss_name, train_config)
    encoded = _encode_groups(dataset, tokenizer, config.max_len)
    targets = [ListTarget(np.asarray(g.grades, dtype=np.int64)) for g in dataset.groups]

    history = []
    shuffle_rng = np.random.default_rng([train_config.seed, 8101])
    n_groups = len(dataset.groups)
    for epoch in range(1, train_config.epochs + 1):
        order = shuffle_rng.permutation(n_groups)
        epoch_loss = 0.0
        for batch in _batches(order, train_config.batch_size):
            rows = [row for gi in batch for row in encoded[gi]]
            ids, mask = _pad_rows(rows)
            scores, trace = enc.score_cls_batch(params, config, ids, mask)
            d_scores = np.zeros_like(scores)
            offset = 0
            for gi in batch:
                size = len(encoded[gi])
                sl = slice(offset, offset + size)
                tie_seed = [train_config.seed, 8102, epoch, int(gi)]
                out = kernel(scores[sl], targets[gi], tie_seed)
                d_scores[sl] = out.grad / batch.size
                epoch_loss += out.value
                offset += size
            grads = enc.score_cls_backward(params, config, trace, d_scores)
            adam_step(params, grads, state, train_config)
        history.append(MetricRow(epoch, "train", loss_name, epoch_loss / n_groups, None))
        if eval_dataset is not None and eval_dataset.groups:
            snapshot = Checkpoint(config, params, loss_name, train_config.seed, epoch,
                                  checkpoint_in.tokenizer_hash)
            ndcg = mean_ndcg(eval_dataset, make_cross_encoder_scorer(snapshot, tokenizer))
            history.append(MetricRow(epoch, "eval", loss_name, None, ndcg))
    ckpt = Checkpoint(
        config=config,
        params=params,
        loss_name=loss_name,
        seed=train_config.seed,
        epoch=train_config.epochs,
        tokenizer_hash=checkpoint_in.tokenizer_hash,
    )
    return ckpt, history


# -- distillation -----------------------------------------------------------


def distill_pairs(group: QueryGroup, cap: int):
    """Document index pairs (higher grade, lower grade) for one query,
    ordered by descending grade gap with index tie-breaks, capped at ``cap``."""
    grades = group.grades
    pairs = [
        (i, j)
        for i in range(len(grades))
        for j in range(len(grades))
        if grades[i] > grades[j]
    ]
    pairs.sort(key=lambda p: (-(grades[p[0]] - grades[p[1]]), p[0], p[1]))
    return pairs[:cap]


def distill(
    teacher: Checkpoint,
    dataset: Dataset,
    train_config: TrainConfig,
    tokenizer: Tokenizer,
    eval_dataset: Dataset = None,
    teacher_scorer=None,
):
    """Train a bi-encoder student to reproduce the teacher's score margins.

    Teacher scores per group are computed once up front (or taken from
    ``teacher_scorer`` when given, which allows oracle-teacher control runs).
    The student starts from the teacher's weights unless
    ``train_config.init_from_teacher`` is false. Returns ``(checkpoint, history)``.
    """
    if not dataset.groups:
        raise EmptyInputError("distillation dataset has no query groups")
    if teacher.loss_name not in LOSS_NAMES and teacher_scorer is None:
        raise ValidationError(
            f"teacher checkpoint was not produced by list fine-tuning (loss {teacher.loss_name!r})"
        )
    if teacher.tokenizer_hash and teacher.tokenizer_hash != tokenizer.content_hash():
        raise ContractError("tokenizer does not match the one recorded in the teacher checkpoint")

    config = teacher.config
    if teacher_scorer is None:
        teacher_scorer = make_cross_encoder_scorer(teacher, tokenizer)
    teacher_scores = [np.asarray(teacher_scorer(g), dtype=np.float64) for g in dataset.groups]

    pair_sets = [distill_pairs(g, train_config.distill_pair_cap) for g in dataset.groups]
    usable = [gi for gi, pairs in enumerate(pair_sets) if pairs]
    if not usable:
        raise EmptyInputError("no query group has a pair of documents with different grades")

    if train_config.init_from_teacher:
        params = teacher.params.copy()
    else:
        params = enc.init_params(config, train_config.seed)
    state = init_adam_state(params)

    # Per usable group: rows = [query] + unique docs referenced by its pairs.
    encoded = []
    for gi in usable:
        group = dataset.groups[gi]
        doc_ids_used = sorted({i for pair in pair_sets[gi] for i in pair})
        rows = [tokenizer.encode_single(group.query_text, config.max_len).ids]
        rows += [
            tokenizer.encode_single(group.docs[i].text, config.max_len).ids
            for i in doc_ids_used
        ]
        local = {doc: r + 1 for r, doc in enumerate(doc_ids_used)}
        pos_rows = np.asarray([local[i] for i, _ in pair_sets[gi]], dtype=np.int64)
        neg_rows = np.asarray([local[j] for _, j in pair_sets[gi]], dtype=np.int64)
        t_pos = teacher_scores[gi][[i for i, _ in pair_sets[gi]]]
        t_neg = teacher_scores[gi][[j for _, j in pair_sets[gi]]]
        encoded.append({"rows": rows, "pos": pos_rows, "neg": neg_rows,
                        "t_pos": t_pos, "t_neg": t_neg})

    history = []
    shuffle_rng = np.random.default_rng([train_config.seed, 9101])
    for epoch in range(1, train_config.epochs + 1):
        order = shuffle_rng.permutation(len(usable))
        epoch_loss = 0.0
        for batch in _batches(order, train_config.batch_size):
            rows = [row for bi in batch for row in encoded[bi]["rows"]]
            ids, mask = _pad_rows(rows)
            emb, trace = enc.embed_batch(params, config, ids, mask)
            d_emb = np.zeros_like(emb)
            offset = 0
            for bi in batch:
                e = encoded[bi]
                n_rows = len(e["rows"])
                block = emb[offset : offset + n_rows]
                q = block[0]
                s_pos = block[e["pos"]] @ q
                s_neg = block[e["neg"]] @ q
                out = margin_mse_loss(e["t_pos"], e["t_neg"], s_pos, s_neg)
                d_pos, d_neg = out.grad[0] / batch.size, out.grad[1] / batch.size
                d_block = d_emb[offset : offset + n_rows]
                np.add.at(d_block, e["pos"], d_pos[:, None] * q[None, :])
                np.add.at(d_block, e["neg"], d_neg[:, None] * q[None, :])
                d_block[0] += d_pos @ block[e["pos"]] + d_neg @ block[e["neg"]]
                epoch_loss += out.value
                offset += n_rows
            grads = enc.embed_backward(params, config, trace, d_emb)
            adam_step(params, grads, state, train_config)
        history.append(MetricRow(epoch, "train", "margin_mse", epoch_loss / len(usable), None))
        if eval_dataset is not None and eval_dataset.groups:
            snapshot = Checkpoint(config, params, "margin_mse", train_config.seed, epoch,
                                  teacher.tokenizer_hash)
            ndcg = mean_ndcg(eval_dataset, make_bi_encoder_scorer(snapshot, tokenizer))
            history.append(MetricRow(epoch, "eval", "margin_mse", None, ndcg))
    ckpt = Checkpoint(
        config=config,
        params=params,
        loss_name="margin_mse",
        seed=train_config.seed,
        epoch=train_config.epochs,
        tokenizer_hash=teacher.tokenizer_hash,
    )
    return ckpt, history
