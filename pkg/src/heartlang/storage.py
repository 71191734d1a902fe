"""On-disk formats: sentence corpora, named-block checkpoints and cached targets."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import CheckpointError, DataError
from .tokenizer import EcgSentence

SENTENCES_FILE = "sentences.f32"
INDEX_FILE = "index.jsonl"
CORPUS_META = "corpus.json"
BLOCKS_FILE = "model.bin"
MANIFEST_FILE = "manifest.json"
_MAGIC = b"HLCK0001"


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_hash(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(x) for x in paths):
        h.update(p.name.encode())
        h.update(file_hash(p).encode())
    return h.hexdigest()


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, Path):
        return str(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serialisable: {type(o)}")


# -- sentence corpus ----------------------------------------------------------------

@dataclass
class SentenceCorpus:
    words: np.ndarray          # (n, l, t) float32
    spatial_ids: np.ndarray    # (n, l)
    temporal_ids: np.ndarray   # (n, l)
    pad_mask: np.ndarray       # (n, l) bool
    record_ids: list
    qrs_counts: np.ndarray
    labels: np.ndarray | None = None   # (n, L) {0,1}
    splits: np.ndarray | None = None   # (n,) str
    class_names: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.words.shape[0]

    @property
    def l(self) -> int:
        return self.words.shape[1]

    @property
    def t(self) -> int:
        return self.words.shape[2]

    def sentence(self, i) -> EcgSentence:
        return EcgSentence(np.asarray(self.words[i]), self.spatial_ids[i], self.temporal_ids[i],
                           self.pad_mask[i], self.record_ids[i], int(self.qrs_counts[i]))

    def subset(self, index) -> "SentenceCorpus":
        index = np.asarray(index, dtype=np.int64)
        return SentenceCorpus(
            np.asarray(self.words[index]), self.spatial_ids[index], self.temporal_ids[index],
            self.pad_mask[index], [self.record_ids[i] for i in index], self.qrs_counts[index],
            None if self.labels is None else self.labels[index],
            None if self.splits is None else self.splits[index],
            list(self.class_names), dict(self.meta))

    def split_indices(self, name: str) -> np.ndarray:
        if self.splits is None:
            raise DataError("corpus carries no split tags")
        return np.flatnonzero(self.splits == name)


def corpus_from_sentences(sentences, labels=None, splits=None, class_names=(), meta=None) -> SentenceCorpus:
    if not sentences:
        raise DataError("empty corpus")
    return SentenceCorpus(
        np.stack([s.words for s in sentences]).astype(np.float32),
        np.stack([s.spatial_ids for s in sentences]).astype(np.int64),
        np.stack([s.temporal_ids for s in sentences]).astype(np.int64),
        np.stack([s.pad_mask for s in sentences]).astype(bool),
        [s.source_record_id for s in sentences],
        np.asarray([s.qrs_count for s in sentences], dtype=np.int64),
        None if labels is None else np.asarray(labels, dtype=np.int64),
        None if splits is None else np.asarray(splits, dtype=object),
        list(class_names), dict(meta or {}))


def write_corpus(corpus: SentenceCorpus, directory) -> Path:
    """Packed little-endian float32 l x t blocks plus a JSON-lines sidecar index."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / SENTENCES_FILE, "wb") as fh:
        fh.write(np.ascontiguousarray(corpus.words, dtype="<f4").tobytes())
    with open(directory / INDEX_FILE, "w") as fh:
        for i in range(len(corpus)):
            row = {
                "record_id": corpus.record_ids[i],
                "spatial_ids": corpus.spatial_ids[i].tolist(),
                "temporal_ids": corpus.temporal_ids[i].tolist(),
                "pad_mask": [int(b) for b in corpus.pad_mask[i]],
                "qrs_count": int(corpus.qrs_counts[i]),
            }
            if corpus.labels is not None:
                row["labels"] = corpus.labels[i].tolist()
            if corpus.splits is not None:
                row["split"] = str(corpus.splits[i])
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")
    meta = dict(corpus.meta)
    meta.update({"n": len(corpus), "l": corpus.l, "t": corpus.t, "class_names": corpus.class_names})
    write_json(directory / CORPUS_META, meta)
    return directory


def read_corpus(directory) -> SentenceCorpus:
    directory = Path(directory)
    try:
        meta = json.loads((directory / CORPUS_META).read_text())
        rows = [json.loads(line) for line in (directory / INDEX_FILE).read_text().splitlines() if line]
        raw = np.fromfile(directory / SENTENCES_FILE, dtype="<f4")
    except FileNotFoundError as exc:
        raise DataError(f"{directory} is not a sentence corpus: {exc}") from exc
    n, l, t = meta["n"], meta["l"], meta["t"]
    if len(rows) != n or raw.size != n * l * t:
        raise DataError(f"{directory}: index/payload disagree with n={n}, l={l}, t={t}")
    has_labels = rows and "labels" in rows[0]
    has_split = rows and "split" in rows[0]
    return SentenceCorpus(
        raw.reshape(n, l, t).astype(np.float32),
        np.asarray([r["spatial_ids"] for r in rows], dtype=np.int64).reshape(n, l),
        np.asarray([r["temporal_ids"] for r in rows], dtype=np.int64).reshape(n, l),
        np.asarray([r["pad_mask"] for r in rows], dtype=bool).reshape(n, l),
        [r["record_id"] for r in rows],
        np.asarray([r["qrs_count"] for r in rows], dtype=np.int64),
        np.asarray([r["labels"] for r in rows], dtype=np.int64) if has_labels else None,
        np.asarray([r["split"] for r in rows], dtype=object) if has_split else None,
        list(meta.get("class_names", [])),
        {k: v for k, v in meta.items() if k not in ("n", "l", "t", "class_names")})


def corpus_hash(directory) -> str:
    directory = Path(directory)
    return tree_hash([directory / SENTENCES_FILE, directory / INDEX_FILE])


# -- named-block checkpoints ----------------------------------------------------------

def write_blocks(path, blocks: dict):
    """name, shape and little-endian float32 payload per block, in insertion order."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blocks)))
        for name, arr in blocks.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            encoded = name.encode()
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_blocks(path) -> dict:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint block file")
    pos = 8
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + n].decode()
            pos += n
            (ndim,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            out[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
            pos += 4 * size
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    return out


def save_checkpoint(directory, blocks: dict, manifest: dict) -> str:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_blocks(directory / BLOCKS_FILE, blocks)
    digest = file_hash(directory / BLOCKS_FILE)
    manifest = dict(manifest)
    manifest["blocks_sha256"] = digest
    write_json(directory / MANIFEST_FILE, manifest)
    return digest


def load_checkpoint(directory):
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST_FILE).read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"{directory}: no checkpoint manifest") from exc
    blocks = read_blocks(directory / BLOCKS_FILE)
    digest = file_hash(directory / BLOCKS_FILE)
    if manifest.get("blocks_sha256") not in (None, digest):
        raise CheckpointError(f"{directory}: block file does not match its manifest hash")
    return blocks, manifest


def checkpoint_hash(directory) -> str:
    path = Path(directory) / BLOCKS_FILE
    if not path.exists():
        raise CheckpointError(f"{directory}: no checkpoint blocks")
    return file_hash(path)


# -- cached pre-training targets -------------------------------------------------------

def write_targets(path, targets: np.ndarray, manifest: dict):
    """Per-sentence index lists as LEB128 varints (length prefix, then the indices)."""
    targets = np.asarray(targets, dtype=np.int64)
    chunks = []
    for row in targets:
        chunks.append(kernels.varint_encode(np.asarray([len(row)], dtype=np.int64)))
        chunks.append(kernels.varint_encode(np.ascontiguousarray(row)))
    Path(path).write_bytes(b"".join(chunks))
    manifest = dict(manifest)
    manifest["n_sentences"] = int(targets.shape[0])
    write_json(str(path) + ".json", manifest)


def read_targets(path):
    path = Path(path)
    manifest = json.loads(Path(str(path) + ".json").read_text())
    data = np.frombuffer(path.read_bytes(), dtype=np.uint8)
    rows, pos = [], 0
    for _ in range(manifest["n_sentences"]):
        (length,), used = kernels.varint_decode(data[pos:], 1)
        pos += used
        row, used = kernels.varint_decode(data[pos:], int(length))
        pos += used
        rows.append(row)
    return np.asarray(rows, dtype=np.int64), manifest
