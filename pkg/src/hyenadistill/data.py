"""Corpus ingestion, byte-level tokenization, window sampling with a held-out
validation tail, and per-layer teacher-activation datasets for distillation."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from ._container import (MAGIC_ACTIVATIONS, MAGIC_CORPUS, ContainerError,
                         read_header, write_header)
from .model import Model, forward, model_digest
from .tensor import no_grad

BOS = 256
EOS = 257
BYTE_VOCAB = 258


class ProvenanceError(Exception):
    """Stored teacher digest does not match the model presented."""


@dataclass
class TokenizedCorpus:
    tokens: np.ndarray
    vocab_size: int
    digest: str

    def __len__(self):
        return len(self.tokens)


def tokenize(text) -> TokenizedCorpus:
    """Byte-level tokenization: BOS, one token per byte, EOS. Lossless for
    arbitrary byte strings; vocab is 256 bytes plus the two specials."""
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    tokens = np.empty(len(raw) + 2, dtype=np.int32)
    tokens[0] = BOS
    tokens[1:-1] = np.frombuffer(raw, dtype=np.uint8)
    tokens[-1] = EOS
    return TokenizedCorpus(tokens=tokens, vocab_size=BYTE_VOCAB,
                           digest=hashlib.sha256(raw).hexdigest())


def detokenize(corpus) -> bytes:
    tokens = corpus.tokens if isinstance(corpus, TokenizedCorpus) else np.asarray(corpus)
    keep = tokens[(tokens != BOS) & (tokens != EOS)]
    if keep.size and keep.max() > 255:
        raise ValueError("token stream contains indices beyond the byte range")
    return keep.astype(np.uint8).tobytes()


def save_corpus(corpus: TokenizedCorpus, path) -> None:
    with open(path, "wb") as f:
        write_header(f, MAGIC_CORPUS, {"format": "corpus",
                                       "vocab_size": corpus.vocab_size,
                                       "digest": corpus.digest,
                                       "count": int(len(corpus.tokens))})
        f.write(corpus.tokens.astype("<i4", copy=False).tobytes())


def load_corpus(path) -> TokenizedCorpus:
    with open(path, "rb") as f:
        manifest = read_header(f, MAGIC_CORPUS)
        payload = f.read()
    tokens = np.frombuffer(payload, dtype="<i4").astype(np.int32)
    if len(tokens) != manifest["count"]:
        raise ContainerError(f"corpus holds {len(tokens)} tokens, manifest says "
                             f"{manifest['count']}")
    return TokenizedCorpus(tokens=tokens, vocab_size=manifest["vocab_size"],
                           digest=manifest["digest"])


# -- windows ---------------------------------------------------------------------


@dataclass
class WindowSet:
    windows: np.ndarray  # [n, context_len] int32
    starts: np.ndarray   # [n] start offsets into the source corpus
    split: str
    seed: int

    def __len__(self):
        return len(self.windows)

    @property
    def context_len(self) -> int:
        return self.windows.shape[1]

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.windows.astype("<i4", copy=False).tobytes()).hexdigest()


def sample_windows(corpus: TokenizedCorpus, context_len: int, n: int,
                   val_fraction: float = 0.001, seed: int = 0):
    """Seeded uniform random windows, with validation drawn from a held-out
    tail of the corpus so train and validation token ranges are disjoint.

    Returns (train, val); val gets floor(n * val_fraction) windows, minimum 1.
    """
    tokens = corpus.tokens
    if len(tokens) < context_len:
        raise ValueError(f"corpus has {len(tokens)} tokens, shorter than "
                         f"context_len {context_len}")
    n_val = max(1, int(n * val_fraction))
    n_train = n - n_val
    if n_train < 1:
        raise ValueError(f"n={n} leaves no training windows after the validation split")
    tail_len = max(context_len, int(round(len(tokens) * 0.01)))
    boundary = len(tokens) - tail_len
    if boundary < context_len:
        raise ValueError("corpus too short to carve a disjoint validation tail; "
                         f"need at least {context_len + tail_len} tokens")
    rng = np.random.default_rng(seed)
    train_starts = rng.integers(0, boundary - context_len + 1, size=n_train)
    val_starts = boundary + rng.integers(0, tail_len - context_len + 1, size=n_val)
    idx = np.arange(context_len)

    def gather(starts, split):
        return WindowSet(windows=tokens[starts[:, None] + idx].astype(np.int32),
                         starts=starts.astype(np.int64), split=split, seed=seed)

    return gather(train_starts, "train"), gather(val_starts, "val")


# -- activation datasets ------------------------------------------------------------


@dataclass
class ActivationInfo:
    layer_index: int
    count: int
    context_len: int
    d_model: int
    teacher_digest: str
    windows_digest: str
    precision: str = "f32"


class ActivationDataset:
    """Reader over one layer's (token window, teacher hidden state) records.

    Records live at fixed offsets, so iteration streams and random access
    seeks; loading everything is a convenience for desk-scale training.
    """

    def __init__(self, path, info: ActivationInfo):
        self.path = path
        self.info = info
        self._payload_offset = None
        ctx, d = info.context_len, info.d_model
        self._tok_bytes = ctx * 4
        self._act_bytes = ctx * d * 4
        self._rec_bytes = self._tok_bytes + self._act_bytes

    def __len__(self):
        return self.info.count

    def _offset(self):
        if self._payload_offset is None:
            with open(self.path, "rb") as f:
                read_header(f, MAGIC_ACTIVATIONS)
                self._payload_offset = f.tell()
        return self._payload_offset

    def record(self, i: int):
        if not 0 <= i < self.info.count:
            raise IndexError(f"record {i} out of range [0, {self.info.count})")
        with open(self.path, "rb") as f:
            f.seek(self._offset() + i * self._rec_bytes)
            blob = f.read(self._rec_bytes)
        if len(blob) != self._rec_bytes:
            raise ContainerError(f"activation payload truncated at record {i}")
        return self._decode(blob)

    def _decode(self, blob):
        ctx, d = self.info.context_len, self.info.d_model
        tokens = np.frombuffer(blob[: self._tok_bytes], dtype="<i4").astype(np.int32)
        y = np.frombuffer(blob[self._tok_bytes:], dtype="<f4").reshape(ctx, d)
        return tokens, y.astype(np.float32)

    def iterate(self):
        """Stream records in storage order with bounded memory."""
        with open(self.path, "rb") as f:
            f.seek(self._offset())
            for i in range(self.info.count):
                blob = f.read(self._rec_bytes)
                if len(blob) != self._rec_bytes:
                    raise ContainerError(f"activation payload truncated at record {i}")
                yield self._decode(blob)

    def load_all(self):
        """All records as two arrays: tokens [n, L] and activations [n, L, d]."""
        toks = np.empty((self.info.count, self.info.context_len), dtype=np.int32)
        ys = np.empty((self.info.count, self.info.context_len, self.info.d_model),
                      dtype=np.float32)
        for i, (t, y) in enumerate(self.iterate()):
            toks[i] = t
            ys[i] = y
        return toks, ys


def _info_manifest(info: ActivationInfo) -> dict:
    return {"format": "activations", **info.__dict__}


def build_activation_dataset(teacher: Model, windows: WindowSet, layer_index: int,
                             path, batch_size: int = 32) -> ActivationDataset:
    """Run the teacher over every window and stream layer ``layer_index``'s
    hidden states to disk as 32-bit records. Memory stays O(batch_size)."""
    datasets = build_activation_datasets(teacher, windows, {layer_index: path},
                                         batch_size=batch_size)
    return datasets[layer_index]


def build_activation_datasets(teacher: Model, windows: WindowSet,
                              paths: dict[int, object],
                              batch_size: int = 32) -> dict[int, ActivationDataset]:
    """Capture several layers in one teacher pass; ``paths`` maps layer index
    to output path."""
    n_layers = teacher.config.n_layers
    for layer in paths:
        if not 0 <= layer < n_layers:
            raise ValueError(f"layer {layer} out of range [0, {n_layers})")
    tdig = model_digest(teacher)
    wdig = windows.digest
    infos = {layer: ActivationInfo(layer_index=layer, count=len(windows),
                                   context_len=windows.context_len,
                                   d_model=teacher.config.d_model,
                                   teacher_digest=tdig, windows_digest=wdig)
             for layer in paths}
    files = {layer: open(p, "wb") for layer, p in paths.items()}
    try:
        for layer, f in files.items():
            write_header(f, MAGIC_ACTIVATIONS, _info_manifest(infos[layer]))
        with no_grad():
            for lo in range(0, len(windows), batch_size):
                batch = windows.windows[lo: lo + batch_size]
                trace = forward(teacher, batch, capture="all_layers",
                                up_to_layer=max(paths) + 1)
                for layer, f in files.items():
                    ys = trace.hidden[layer].data.astype("<f4")
                    for row_tokens, row_y in zip(batch, ys):
                        f.write(row_tokens.astype("<i4", copy=False).tobytes())
                        f.write(row_y.tobytes())
    finally:
        for f in files.values():
            f.close()
    return {layer: ActivationDataset(paths[layer], infos[layer]) for layer in paths}


class InMemoryActivationDataset:
    """On-the-fly fallback with the reader interface of
    :class:`ActivationDataset` but no file behind it; useful when the
    distillation corpus is small enough that storing activations offline
    buys nothing."""

    def __init__(self, info: ActivationInfo, tokens: np.ndarray, ys: np.ndarray):
        self.info = info
        self._tokens = tokens
        self._ys = ys

    def __len__(self):
        return self.info.count

    def record(self, i: int):
        if not 0 <= i < self.info.count:
            raise IndexError(f"record {i} out of range [0, {self.info.count})")
        return self._tokens[i], self._ys[i]

    def iterate(self):
        for i in range(self.info.count):
            yield self._tokens[i], self._ys[i]

    def load_all(self):
        return self._tokens, self._ys


def compute_activation_datasets(teacher: Model, windows: WindowSet,
                                layers, batch_size: int = 32):
    """Run the teacher once and keep the requested layers' activations in
    memory, as a dict of layer index to :class:`InMemoryActivationDataset`."""
    layers = sorted(set(layers))
    n_layers = teacher.config.n_layers
    for layer in layers:
        if not 0 <= layer < n_layers:
            raise ValueError(f"layer {layer} out of range [0, {n_layers})")
    tdig = model_digest(teacher)
    wdig = windows.digest
    ys = {layer: np.empty((len(windows), windows.context_len,
                           teacher.config.d_model), dtype=np.float32)
          for layer in layers}
    with no_grad():
        for lo in range(0, len(windows), batch_size):
            batch = windows.windows[lo: lo + batch_size]
            trace = forward(teacher, batch, capture="all_layers",
                            up_to_layer=max(layers) + 1)
            for layer in layers:
                ys[layer][lo: lo + len(batch)] = trace.hidden[layer].data
    out = {}
    for layer in layers:
        info = ActivationInfo(layer_index=layer, count=len(windows),
                              context_len=windows.context_len,
                              d_model=teacher.config.d_model,
                              teacher_digest=tdig, windows_digest=wdig)
        out[layer] = InMemoryActivationDataset(info, windows.windows, ys[layer])
    return out


def load_activation_dataset(path, teacher: Model | None = None) -> ActivationDataset:
    with open(path, "rb") as f:
        manifest = read_header(f, MAGIC_ACTIVATIONS)
    if manifest.get("format") != "activations":
        raise ContainerError("container does not hold an activation dataset")
    fields = {k: manifest[k] for k in ("layer_index", "count", "context_len",
                                       "d_model", "teacher_digest",
                                       "windows_digest", "precision")}
    info = ActivationInfo(**fields)
    if teacher is not None:
        actual = model_digest(teacher)
        if actual != info.teacher_digest:
            raise ProvenanceError(
                f"dataset was generated by teacher {info.teacher_digest[:12]}..., "
                f"but the presented model digests to {actual[:12]}...")
    return ActivationDataset(path, info)
