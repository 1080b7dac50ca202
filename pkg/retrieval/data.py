"""
File ingestion and batch construction.

Binary feature container (also used for precomputed sentence vectors):
    b"VFEA" | uint32 version | uint32 n | uint32 d_v | n*d_v float32 | n * (uint32 len, utf-8 id)
all little-endian. A text fallback `id v1 v2 ...` per line is accepted on load.
"""

import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from dotenv import dotenv_values

from .encoders import EmbeddingTable, PrecomputedStore
from .errors import (BatchConstructionError, DataError, DimensionMismatchError, DuplicateIdError,
                     FormatError, MissingIdError, NonFiniteError)
from .metrics import Judgment, JudgmentPool
from .textproc import Sentence

logger = logging.getLogger(__name__)

MAGIC = b"VFEA"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIII")
_LEN = struct.Struct("<I")


class FeatureStore:
    """Ordered video ids with an n x d_v float32 matrix"""

    def __init__(self, ids: Sequence[str], matrix: np.ndarray):
        matrix = np.ascontiguousarray(matrix, dtype=np.float32)
        if matrix.ndim != 2 or matrix.shape[0] != len(ids):
            raise DimensionMismatchError(f"Feature store expects {len(ids)} rows, got shape {matrix.shape}")
        if not np.isfinite(matrix).all():
            bad = ids[int(np.argwhere(~np.isfinite(matrix))[0][0])]
            raise NonFiniteError(f"Feature vector of {bad!r} has non-finite values")
        index = {}
        for i, vid in enumerate(ids):
            if vid in index:
                raise DuplicateIdError(f"Duplicate video id {vid!r} in feature store")
            index[vid] = i
        self.ids = list(ids)
        self.matrix = matrix
        self._index = index

    @property
    def d_v(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, video_id: str) -> bool:
        return video_id in self._index

    def get(self, video_id: str) -> np.ndarray:
        idx = self._index.get(video_id)
        if idx is None:
            raise MissingIdError(f"Video id {video_id!r} is not in the feature store")
        return self.matrix[idx]

    def rows(self, video_ids: Sequence[str]) -> np.ndarray:
        return np.stack([self.get(v) for v in video_ids])


def _write_container(path, ids: Sequence[str], matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix, dtype="<f4")
    n, d = matrix.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, n, d))
        f.write(matrix.tobytes(order="C"))
        for vid in ids:
            raw = vid.encode("utf-8")
            f.write(_LEN.pack(len(raw)))
            f.write(raw)


def _read_container(path) -> Tuple[List[str], np.ndarray]:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header, expected {_HEADER.size} bytes, got {len(data)}")
    magic, version, n, d = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported container version {version}")
    offset = _HEADER.size
    expected = offset + 4 * n * d
    if len(data) < expected:
        raise FormatError(f"{path}: truncated matrix, expected at least {expected} bytes, got {len(data)}")
    matrix = np.frombuffer(data, dtype="<f4", count=n * d, offset=offset).reshape(n, d).astype(np.float32)
    offset = expected
    ids = []
    for _ in range(n):
        if offset + _LEN.size > len(data):
            raise FormatError(f"{path}: truncated id block, expected at least {offset + _LEN.size} bytes, "
                              f"got {len(data)}")
        (length,) = _LEN.unpack_from(data, offset)
        offset += _LEN.size
        if offset + length > len(data):
            raise FormatError(f"{path}: truncated id block, expected at least {offset + length} bytes, "
                              f"got {len(data)}")
        ids.append(data[offset:offset + length].decode("utf-8"))
        offset += length
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes after the id block")
    return ids, matrix


def _read_text_vectors(path) -> Tuple[List[str], np.ndarray]:
    ids, rows, dim = [], [], None
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 2:
                raise FormatError(f"{path}:{lineno}: expected an id followed by at least one value")
            if dim is None:
                dim = len(parts) - 1
            elif len(parts) - 1 != dim:
                raise DimensionMismatchError(f"{path}:{lineno}: {parts[0]!r} has {len(parts) - 1} values, "
                                             f"expected {dim}")
            try:
                rows.append([float(x) for x in parts[1:]])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric value for {parts[0]!r}")
            ids.append(parts[0])
    if not ids:
        raise FormatError(f"{path}: no vectors found")
    return ids, np.asarray(rows, dtype=np.float32)


def _read_vectors(path) -> Tuple[List[str], np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    with open(path, "rb") as f:
        head = f.read(len(MAGIC))
    if head == MAGIC:
        return _read_container(path)
    return _read_text_vectors(path)


def load_feature_store(path) -> FeatureStore:
    ids, matrix = _read_vectors(path)
    store = FeatureStore(ids, matrix)
    logger.info(f"Loaded {len(store)} video features of dim {store.d_v} from {path}")
    return store


def save_feature_store(store: FeatureStore, path) -> None:
    _write_container(path, store.ids, store.matrix)


def load_precomputed_store(path) -> PrecomputedStore:
    """Sentence vectors in the feature container; `<path>.meta` holds KEY=value metadata"""
    ids, matrix = _read_vectors(path)
    if not np.isfinite(matrix).all():
        raise NonFiniteError(f"{path}: precomputed vectors contain non-finite values")
    if len(set(ids)) != len(ids):
        raise DuplicateIdError(f"{path}: duplicate sentence id in precomputed store")
    meta_path = Path(str(path) + ".meta")
    metadata = dict(dotenv_values(meta_path)) if meta_path.exists() else {}
    return PrecomputedStore(ids, matrix, metadata)


def save_precomputed_store(store: PrecomputedStore, path) -> None:
    _write_container(path, store.ids, store.vectors)
    if store.metadata:
        with open(str(path) + ".meta", "w", encoding="utf-8", newline="\n") as f:
            for key, value in sorted(store.metadata.items()):
                f.write(f"{key}={value}\n")


@dataclass(frozen=True)
class Caption:
    sentence: Sentence
    video_id: str


class CaptionSet:
    """(sentence id, video id, text) records plus a video id -> sentence ids index"""

    def __init__(self, records: Iterable[Caption]):
        self.records: List[Caption] = []
        self.by_video: Dict[str, List[str]] = OrderedDict()
        seen = set()
        for rec in records:
            sid = rec.sentence.sentence_id
            if sid in seen:
                raise DuplicateIdError(f"Duplicate sentence id {sid!r}")
            seen.add(sid)
            self.records.append(rec)
            self.by_video.setdefault(rec.video_id, []).append(sid)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def sentences(self) -> List[Sentence]:
        return [r.sentence for r in self.records]

    def relevant_by_query(self) -> Dict[str, set]:
        return {r.sentence.sentence_id: {r.video_id} for r in self.records}

    def check_against(self, store: FeatureStore) -> None:
        missing = [v for v in self.by_video if v not in store]
        if missing:
            raise MissingIdError(f"{len(missing)} caption video ids have no feature vector, e.g. {missing[0]!r}")


def load_caption_set(path) -> CaptionSet:
    records, seen = [], {}
    with open(path, "r", encoding="utf-8", newline="") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t", 2)
            if len(parts) != 3 or not parts[0] or not parts[1]:
                raise FormatError(f"{path}:{lineno}: expected sentence_id<TAB>video_id<TAB>text")
            if parts[0] in seen:
                raise DuplicateIdError(
                    f"{path}:{lineno}: duplicate sentence id {parts[0]!r} (first seen at line {seen[parts[0]]})")
            seen[parts[0]] = lineno
            records.append(Caption(Sentence.from_text(parts[0], parts[2]), parts[1]))
    return CaptionSet(records)


def save_caption_set(captions: CaptionSet, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for rec in captions:
            f.write(f"{rec.sentence.sentence_id}\t{rec.video_id}\t{rec.sentence.text}\n")


def load_queries(path) -> List[Sentence]:
    """One sentence per line; ids are the 1-based line numbers"""
    with open(path, "r", encoding="utf-8") as f:
        lines = [line.rstrip("\r\n") for line in f]
    return [Sentence.from_text(str(i), text) for i, text in enumerate(lines, start=1) if text.strip()]


def load_embedding_table(path) -> EmbeddingTable:
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().split()
        if len(header) != 2:
            raise FormatError(f"{path}: first line must be `count dim`")
        try:
            count, dim = int(header[0]), int(header[1])
        except ValueError:
            raise FormatError(f"{path}: first line must be `count dim`, got {' '.join(header)!r}")
        words, rows = [], []
        for lineno, line in enumerate(f, start=2):
            parts = line.rstrip("\r\n").split(" ")
            if not parts or parts == [""]:
                continue
            if len(parts) != dim + 1:
                raise DimensionMismatchError(
                    f"{path}:{lineno}: word {parts[0]!r} has {len(parts) - 1} values, expected {dim}")
            try:
                rows.append([float(x) for x in parts[1:]])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric value for word {parts[0]!r}")
            words.append(parts[0])
    if len(words) != count:
        raise FormatError(f"{path}: header declares {count} words, found {len(words)}")
    vectors = np.asarray(rows, dtype=np.float32).reshape(len(words), dim)
    if not np.isfinite(vectors).all():
        raise NonFiniteError(f"{path}: embedding table contains non-finite values")
    return EmbeddingTable(words, vectors)


def save_embedding_table(table: EmbeddingTable, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"{table.size} {table.dim}\n")
        for word, vec in zip(table.words, table.vectors):
            f.write(word + " " + " ".join(repr(float(x)) for x in vec) + "\n")


def load_judgments(path) -> JudgmentPool:
    pool = JudgmentPool()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise FormatError(
                    f"{path}:{lineno}: expected query_id<TAB>stratum_id<TAB>video_id<TAB>relevance<TAB>sampling_rate")
            try:
                judgment = Judgment(parts[2], int(parts[3]), parts[1], float(parts[4]))
            except ValueError:
                raise FormatError(f"{path}:{lineno}: relevance must be 0/1 and sampling_rate a number")
            try:
                pool.add(parts[0], judgment)
            except DataError as e:
                raise type(e)(f"{path}:{lineno}: {e}")
    return pool


def save_judgments(pool: JudgmentPool, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for qid in pool.queries():
            for j in pool.judgments(qid).values():
                f.write(f"{qid}\t{j.stratum}\t{j.video_id}\t{j.relevance}\t{j.sampling_rate}\n")


@dataclass(frozen=True)
class Batch:
    """Ordered (sentence, positive video id) pairs; features are the positives' vectors, row-aligned"""

    sentences: Tuple[Sentence, ...]
    video_ids: Tuple[str, ...]
    features: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if len(self.sentences) != len(self.video_ids):
            raise BatchConstructionError("Batch sentences and video ids differ in length")
        if len(self.sentences) < 2:
            raise BatchConstructionError(f"A batch needs at least 2 pairs, got {len(self.sentences)}")
        if self.features is not None and len(self.features) != len(self.sentences):
            raise BatchConstructionError(
                f"Batch has {len(self.sentences)} pairs but {len(self.features)} feature rows")

    @classmethod
    def from_captions(cls, captions: Sequence[Caption], store: Optional[FeatureStore] = None) -> "Batch":
        batch = cls(tuple(c.sentence for c in captions), tuple(c.video_id for c in captions))
        return batch if store is None else batch.with_features(store)

    def with_features(self, store: FeatureStore) -> "Batch":
        return replace(self, features=resolve_batch_features(self, store))

    def __len__(self) -> int:
        return len(self.sentences)

    def negatives_mask(self) -> np.ndarray:
        """[B, B] bool, True where video j is a negative for sentence i"""
        ids = np.asarray(self.video_ids)
        return ids[:, None] != ids[None, :]


def make_batches(captions: CaptionSet, batch_size: int, seed: int, epoch: int,
                 store: Optional[FeatureStore] = None) -> List[Batch]:
    """
    Shuffle keyed by (seed, epoch), consecutive chunks; a final chunk of one pair is dropped.

    A chunk whose pairs all share one video has no negatives, so it is carried
    into the next chunk (or, at the end, into the last batch).
    """
    if batch_size < 2:
        raise BatchConstructionError(f"batch_size must be >= 2, got {batch_size}")
    if len(captions) < 2:
        raise BatchConstructionError(f"Need at least 2 caption pairs to build a batch, got {len(captions)}")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(captions))
    records = captions.records
    chunks: List[List[Caption]] = []
    carry: List[Caption] = []
    for start in range(0, len(order), batch_size):
        chunk = carry + [records[i] for i in order[start:start + batch_size]]
        if len({c.video_id for c in chunk}) < 2:
            carry = chunk
            continue
        chunks.append(chunk)
        carry = []
    if len(carry) >= 2:
        if not chunks:
            raise BatchConstructionError(
                f"Every caption pair belongs to video {carry[0].video_id}; no batch can have a negative")
        chunks[-1].extend(carry)
        logger.debug(f"epoch {epoch}: {len(carry)} single-video pairs merged into the last batch")
    return [Batch.from_captions(chunk, store) for chunk in chunks]


def resolve_batch_features(batch: Batch, store: FeatureStore) -> np.ndarray:
    """Positive video features of a batch, [B, d_v]"""
    return store.rows(batch.video_ids)
