"""End-to-end training, inference, IOB span decoding, and model persistence.

Training is single-writer over the parameters: batches are featurized and
backpropagated against the current snapshot, then the optimizer step applies.
A loaded model is immutable and safe for concurrent inference.
"""
from __future__ import annotations

import json
import hashlib
import struct
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import metrics
from .chunking import ChunkConfig, PaddedChunk, chunk_sentence, merge_chunk_predictions
from .corpus import (
    LABELS,
    AnnotatedCorpus,
    AnnotatedSentence,
    Vocabulary,
    build_vocab,
    stratified_split,
)
from .features import CharCnnParams, EmbeddingTable, PosEmbedding
from .neural import (
    AdamState,
    DenseParams,
    GruDirectionParams,
    ModelDims,
    ModelParameters,
    NumericError,
    adam_step,
    backward_from_cache,
    batch_chunks,
    clip_gradients,
    forward_batch,
    init_parameters,
    make_dropout_plan,
    named_tensors,
)

ARCHIVE_MAGIC = b"CLSPANMD"
ARCHIVE_VERSION = 1
EVAL_BATCH = 256


class ArchiveError(ValueError):
    """Model archive cannot be read."""


class ArchiveVersionError(ArchiveError):
    pass


class ArchiveChecksumError(ArchiveError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    lr: float = 0.001
    clip_norm: float = 5.0
    dropout: float = 0.5
    batch_size: int = 32
    early_stop_patience: int = 3  # <= 0 disables early stopping
    seed: int = 42
    valid_fraction: float = 0.2
    window: int = 19
    overlap: int = 2
    pos_dim: int = 16
    char_dim: int = 24
    char_filters: int = 32
    char_widths: tuple[int, ...] = (3,)
    hidden: int = 128
    min_count: int = 1
    train_word_embeddings: bool = False

    @property
    def chunk_config(self) -> ChunkConfig:
        return ChunkConfig(window=self.window, overlap=self.overlap)


@dataclass(frozen=True)
class ConceptSpan:
    """Half-open token interval [start, end) within one sentence."""

    start: int
    end: int
    doc_id: str | None = None
    sent_index: int | None = None
    concept_id: str | None = None

    def __post_init__(self) -> None:
        if not 0 <= self.start < self.end:
            raise ValueError(f"invalid span [{self.start}, {self.end})")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    valid_loss: float
    valid_f1: float


@dataclass
class TrainHistory:
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0

    def final_train_loss(self) -> float:
        return self.epochs[-1].train_loss if self.epochs else float("nan")


def decode_iob(tags: Sequence[str]) -> list[ConceptSpan]:
    """Maximal B I* runs as half-open spans, with orphan-I repair.

    An I with no live span (sentence-initial or right after an O) is treated
    as a B and opens a span; O closes any open span.
    """
    spans: list[ConceptSpan] = []
    start: int | None = None
    for i, tag in enumerate(tags):
        if tag not in LABELS:
            raise ValueError(f"unknown tag {tag!r} at position {i}")
        if tag == "O":
            if start is not None:
                spans.append(ConceptSpan(start, i))
                start = None
        elif tag == "B":
            if start is not None:
                spans.append(ConceptSpan(start, i))
            start = i
        else:  # I continues a live span or is repaired into a B
            if start is None:
                start = i
    if start is not None:
        spans.append(ConceptSpan(start, len(tags)))
    return spans


def spans_to_iob(spans: Sequence[ConceptSpan], length: int) -> list[str]:
    """Inverse of decode_iob for non-overlapping span sets."""
    tags = ["O"] * length
    for span in sorted(spans, key=lambda s: s.start):
        if span.end > length:
            raise ValueError(f"span [{span.start}, {span.end}) exceeds length {length}")
        if any(t != "O" for t in tags[span.start : span.end]):
            raise ValueError("overlapping spans cannot be encoded")
        tags[span.start] = "B"
        for i in range(span.start + 1, span.end):
            tags[i] = "I"
    return tags


def gold_spans(sentence: AnnotatedSentence) -> list[ConceptSpan]:
    """Spans decoded from the gold labels, with concept ids passed through."""
    return [
        ConceptSpan(
            s.start,
            s.end,
            doc_id=sentence.doc_id,
            sent_index=sentence.sent_index,
            concept_id=sentence.tokens[s.start].concept_id,
        )
        for s in decode_iob(sentence.labels())
    ]


def _argmax_tags(probs: np.ndarray, mask: np.ndarray) -> list[list[str]]:
    """Per-chunk tag strings from probability rows; ties resolve B < I < O."""
    picks = np.argmax(probs, axis=-1)  # first max wins, i.e. B before I before O
    out = []
    for row, m in zip(picks, mask):
        out.append([LABELS[k] for k, real in zip(row, m) if real > 0])
    return out


def predict_corpus_labels(
    model: ModelParameters,
    vocab: Vocabulary,
    sentences: Sequence[AnnotatedSentence],
    config: ChunkConfig,
    batch_size: int = EVAL_BATCH,
) -> list[list[str]]:
    """Dropout-free predicted tag sequences, one per sentence."""
    all_chunks: list[PaddedChunk] = []
    owners: list[int] = []
    for i, sentence in enumerate(sentences):
        chunks = chunk_sentence(sentence, vocab, config)
        all_chunks.extend(chunks)
        owners.extend([i] * len(chunks))

    chunk_tags: list[list[str]] = []
    for lo in range(0, len(all_chunks), batch_size):
        batch = batch_chunks(all_chunks[lo : lo + batch_size])
        cache = forward_batch(model, batch)
        chunk_tags.extend(_argmax_tags(cache.probs, batch.mask))

    per_sentence: list[list[tuple[PaddedChunk, list[str]]]] = [[] for _ in sentences]
    for chunk, tags, owner in zip(all_chunks, chunk_tags, owners):
        per_sentence[owner].append((chunk, tags))
    return [merge_chunk_predictions(pairs) for pairs in per_sentence]


def annotate_sentence(
    model: ModelParameters,
    vocab: Vocabulary,
    sentence: AnnotatedSentence,
    config: ChunkConfig,
) -> list[ConceptSpan]:
    """Predict concept spans for one sentence (deterministic, dropout-free)."""
    tags = predict_corpus_labels(model, vocab, [sentence], config)[0]
    return [
        ConceptSpan(s.start, s.end, doc_id=sentence.doc_id, sent_index=sentence.sent_index)
        for s in decode_iob(tags)
    ]


def _corpus_loss(model: ModelParameters, chunks: list[PaddedChunk]) -> float:
    """Summed dropout-free cross-entropy over a chunk list."""
    total = 0.0
    for lo in range(0, len(chunks), EVAL_BATCH):
        batch = batch_chunks(chunks[lo : lo + EVAL_BATCH])
        total += float(forward_batch(model, batch).chunk_losses.sum())
    return total


def _span_f1(
    model: ModelParameters,
    vocab: Vocabulary,
    sentences: Sequence[AnnotatedSentence],
    config: ChunkConfig,
) -> float:
    predicted = predict_corpus_labels(model, vocab, sentences, config)
    gold = [[(s.start, s.end) for s in gold_spans(sent)] for sent in sentences]
    pred = [[(s.start, s.end) for s in decode_iob(tags)] for tags in predicted]
    counts = metrics.span_match_counts(gold, pred)
    _, _, f1 = metrics.prf(counts)
    return f1


def train(
    corpus: AnnotatedCorpus,
    embeddings: EmbeddingTable,
    config: TrainConfig,
    vocab: Vocabulary | None = None,
) -> tuple[ModelParameters, TrainHistory]:
    """Train with Adam, gradient clipping, dropout, and early stopping.

    Per epoch: shuffle training chunks, run batched forward/backward/clip/
    Adam, then record the dropout-free summed loss over the training and
    validation chunks plus validation span-F1.  The parameters returned come
    from the epoch with the lowest validation loss (checkpoint restore).
    """
    if len(corpus.sentences) == 0:
        raise ValueError("cannot train on an empty corpus")
    if vocab is None:
        vocab = build_vocab(corpus, config.min_count)
    if embeddings.matrix.shape[0] != vocab.word_size:
        raise ValueError(
            f"embedding table has {embeddings.matrix.shape[0]} rows but the "
            f"vocabulary holds {vocab.word_size} words"
        )

    chunk_config = config.chunk_config
    if len(corpus.sentences) >= 2:
        split = stratified_split(corpus, config.valid_fraction, config.seed)
        if not split.stratified:
            warnings.warn(
                "corpus has no concept spans; validation split is plain random",
                stacklevel=2,
            )
        train_sents, valid_sents = split.train.sentences, split.valid.sentences
    else:
        train_sents, valid_sents = corpus.sentences, ()

    rng = np.random.default_rng(config.seed)
    dims = ModelDims(
        word_dim=embeddings.dim,
        pos_dim=config.pos_dim,
        char_dim=config.char_dim,
        char_filters=config.char_filters,
        char_widths=tuple(config.char_widths),
        hidden=config.hidden,
        window=config.window,
        overlap=config.overlap,
    )
    word_table = EmbeddingTable(
        embeddings.matrix.astype(np.float64, copy=True),
        trainable=config.train_word_embeddings,
    )
    model = init_parameters(dims, vocab, word_table, rng)

    train_chunks = [
        c for s in train_sents for c in chunk_sentence(s, vocab, chunk_config)
    ]
    valid_chunks = [
        c for s in valid_sents for c in chunk_sentence(s, vocab, chunk_config)
    ]
    if all((c.labels < 0).all() or (c.labels[c.mask] == 2).all() for c in train_chunks):
        warnings.warn("training data contains no concept spans", stacklevel=2)

    state = AdamState.for_model(model)
    history = TrainHistory()
    best_loss = np.inf
    best_model: ModelParameters | None = None
    patience = config.early_stop_patience

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_chunks))
        for lo in range(0, len(order), config.batch_size):
            batch = batch_chunks([train_chunks[i] for i in order[lo : lo + config.batch_size]])
            plan = make_dropout_plan(
                rng, config.dropout, batch.size, config.window, dims.feature_dim, dims.hidden
            )
            cache = forward_batch(model, batch, plan)
            if not np.isfinite(cache.chunk_losses).all():
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, batch {lo // config.batch_size}"
                )
            grads = backward_from_cache(model, cache)
            clip_gradients(grads, config.clip_norm)
            adam_step(model, grads, state, config.lr)

        train_loss = _corpus_loss(model, train_chunks)
        if valid_sents:
            valid_loss = _corpus_loss(model, valid_chunks)
            valid_f1 = _span_f1(model, vocab, valid_sents, chunk_config)
        else:
            valid_loss, valid_f1 = train_loss, float("nan")
        history.epochs.append(EpochStats(epoch, train_loss, valid_loss, valid_f1))
        history.stopped_epoch = epoch
        if valid_loss < best_loss:
            best_loss = valid_loss
            history.best_epoch = epoch
            best_model = model.clone()
        if patience > 0 and epoch - history.best_epoch >= patience:
            break

    if best_model is not None:
        model = best_model
    return model, history


# ---------------------------------------------------------------------------
# Persistence
#
# Archive layout (all integers little-endian):
#   magic (8 bytes) | version (u32) | header_len (u64) | header JSON (UTF-8)
#   | tensor payload (concatenated float64 little-endian arrays)
#   | SHA-256 over everything before it (32 bytes)
# The header records dims, the vocabulary, the word-table trainable flag, and
# the tensor manifest (name, shape) in payload order.


def save_model(model: ModelParameters, vocab: Vocabulary, path: str) -> None:
    manifest = [(name, list(arr.shape)) for name, arr in named_tensors(model)]
    header = {
        "dims": {
            "word_dim": model.dims.word_dim,
            "pos_dim": model.dims.pos_dim,
            "char_dim": model.dims.char_dim,
            "char_filters": model.dims.char_filters,
            "char_widths": list(model.dims.char_widths),
            "hidden": model.dims.hidden,
            "window": model.dims.window,
            "overlap": model.dims.overlap,
        },
        "word_table_trainable": model.word_table.trainable,
        "vocab": {
            "word_to_index": vocab.word_to_index,
            "pos_to_index": vocab.pos_to_index,
            "char_to_index": vocab.char_to_index,
        },
        "tensors": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    blob = bytearray()
    blob += ARCHIVE_MAGIC
    blob += struct.pack("<I", ARCHIVE_VERSION)
    blob += struct.pack("<Q", len(header_bytes))
    blob += header_bytes
    for _, arr in named_tensors(model):
        blob += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    blob += hashlib.sha256(bytes(blob)).digest()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_model(path: str) -> tuple[ModelParameters, Vocabulary]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 + 4 + 8 + 32:
        raise ArchiveError("file too short to be a model archive")
    if blob[:8] != ARCHIVE_MAGIC:
        raise ArchiveError("bad magic: not a model archive")
    (version,) = struct.unpack("<I", blob[8:12])
    if version != ARCHIVE_VERSION:
        raise ArchiveVersionError(
            f"archive version {version} unsupported (expected {ARCHIVE_VERSION})"
        )
    digest = hashlib.sha256(blob[:-32]).digest()
    if digest != blob[-32:]:
        raise ArchiveChecksumError("archive checksum mismatch (truncated or corrupt)")

    (header_len,) = struct.unpack("<Q", blob[12:20])
    header_end = 20 + header_len
    header = json.loads(blob[20:header_end].decode("utf-8"))
    dims = ModelDims(
        word_dim=header["dims"]["word_dim"],
        pos_dim=header["dims"]["pos_dim"],
        char_dim=header["dims"]["char_dim"],
        char_filters=header["dims"]["char_filters"],
        char_widths=tuple(header["dims"]["char_widths"]),
        hidden=header["dims"]["hidden"],
        window=header["dims"]["window"],
        overlap=header["dims"]["overlap"],
    )
    vocab = Vocabulary(
        word_to_index=dict(header["vocab"]["word_to_index"]),
        pos_to_index=dict(header["vocab"]["pos_to_index"]),
        char_to_index=dict(header["vocab"]["char_to_index"]),
    )

    tensors: dict[str, np.ndarray] = {}
    cursor = header_end
    payload_end = len(blob) - 32
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if cursor + nbytes > payload_end:
            raise ArchiveError(f"payload truncated while reading tensor {name}")
        tensors[name] = (
            np.frombuffer(blob[cursor : cursor + nbytes], dtype="<f8")
            .reshape(shape)
            .astype(np.float64)
        )
        cursor += nbytes
    if cursor != payload_end:
        raise ArchiveError("trailing bytes after tensor payload")

    def gru(prefix: str) -> GruDirectionParams:
        return GruDirectionParams(
            *(tensors[f"{prefix}.{g}"] for g in GruDirectionParams.GATE_NAMES)
        )

    model = ModelParameters(
        word_table=EmbeddingTable(
            tensors["word_table"], trainable=header["word_table_trainable"]
        ),
        pos_table=PosEmbedding(tensors["pos_table"]),
        char_params=CharCnnParams(
            char_table=tensors["char_table"],
            widths=dims.char_widths,
            filters=[tensors[f"char_filters_w{k}"] for k in dims.char_widths],
            biases=[tensors[f"char_bias_w{k}"] for k in dims.char_widths],
        ),
        gru_fwd=gru("gru_fwd"),
        gru_bwd=gru("gru_bwd"),
        dense=DenseParams(w=tensors["dense.w"], b=tensors["dense.b"]),
        dims=dims,
    )
    _validate_shapes(model, vocab)
    return model, vocab


def _validate_shapes(model: ModelParameters, vocab: Vocabulary) -> None:
    d = model.dims
    expect = {
        "word_table": (vocab.word_size, d.word_dim),
        "pos_table": (vocab.pos_size, d.pos_dim),
        "char_table": (vocab.char_size, d.char_dim),
        "dense.w": (3, 2 * d.hidden),
        "dense.b": (3,),
    }
    for name, arr in named_tensors(model):
        if name in expect and arr.shape != expect[name]:
            raise ArchiveError(
                f"tensor {name} has shape {arr.shape}, expected {expect[name]}"
            )
        if not np.isfinite(arr).all():
            raise ArchiveError(f"tensor {name} contains non-finite values")


def format_history(history: TrainHistory) -> str:
    lines = ["# epoch train_loss valid_loss valid_f1"]
    for e in history.epochs:
        lines.append(f"{e.epoch} {e.train_loss:.10g} {e.valid_loss:.10g} {e.valid_f1:.10g}")
    lines.append(f"# best_epoch {history.best_epoch} stopped_epoch {history.stopped_epoch}")
    return "\n".join(lines) + "\n"
