"""
Sentence encoders e_t,i(s): BoW, mean-pooled word2vec, GRU, bi-GRU and
precomputed (BERT-role) sentence vectors.

BoW, w2v and precomputed vectors are frozen; the recurrent encoders own
trainable parameters.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .errors import (ConfigError, DimensionMismatchError, DivergenceError,
                     EmptySentenceError, MissingIdError)
from .textproc import Sentence, TokenSeq, Vocabulary, encode_bow

logger = logging.getLogger(__name__)

ENCODER_TAGS = ("bow", "w2v", "gru", "bigru", "bert")

W2V_DIM = 500
GRU_HIDDEN = 1024
BERT_DIM = 768


class EmbeddingTable:
    """Pretrained word vectors; absent words are a miss, never a zero vector"""

    def __init__(self, words: Sequence[str], vectors: np.ndarray):
        vectors = np.asarray(vectors, dtype=np.float32)
        if vectors.ndim != 2 or vectors.shape[0] != len(words):
            raise DimensionMismatchError(
                f"Embedding table expects {len(words)} rows, got shape {vectors.shape}")
        self.words = list(words)
        self.vectors = vectors
        self._index = {w: i for i, w in enumerate(self.words)}

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def size(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self._index

    def get(self, word: str) -> Optional[np.ndarray]:
        idx = self._index.get(word)
        return None if idx is None else self.vectors[idx]

    def __getitem__(self, word: str) -> np.ndarray:
        vec = self.get(word)
        if vec is None:
            raise MissingIdError(f"Word {word!r} is not in the embedding table")
        return vec


def encode_w2v(s: TokenSeq, table: EmbeddingTable) -> np.ndarray:
    """Mean of the table vectors of the in-table tokens of s"""
    rows = [table.get(tok) for tok in s]
    rows = [r for r in rows if r is not None]
    if not rows:
        logger.warning(f"No token of {s.joined()!r} is in the embedding table; using a zero vector")
        return np.zeros(table.dim, dtype=np.float32)
    return np.mean(np.stack(rows), axis=0, dtype=np.float64).astype(np.float32)


class PrecomputedStore:
    """Sentence-id -> vector map produced offline (e.g. BERT second-last block, mean pooled)"""

    def __init__(self, ids: Sequence[str], vectors: np.ndarray, metadata: Optional[Dict[str, str]] = None):
        vectors = np.asarray(vectors, dtype=np.float32)
        if vectors.ndim != 2 or vectors.shape[0] != len(ids):
            raise DimensionMismatchError(
                f"Precomputed store expects {len(ids)} rows, got shape {vectors.shape}")
        self.ids = list(ids)
        self.vectors = vectors
        self.metadata = dict(metadata or {})
        self._index = {sid: i for i, sid in enumerate(self.ids)}

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __contains__(self, sentence_id: str) -> bool:
        return sentence_id in self._index

    def get(self, sentence_id: str) -> np.ndarray:
        idx = self._index.get(sentence_id)
        if idx is None:
            raise MissingIdError(f"Sentence id {sentence_id!r} has no precomputed vector")
        return self.vectors[idx]


def encode_precomputed(sentence_id: str, store: PrecomputedStore) -> np.ndarray:
    return store.get(sentence_id)


class GruParams(nn.Module):
    """Word embedding E plus the gate, recurrence and bias parameters of one GRU direction"""

    def __init__(self, vocab_size: int, word_dim: int, hidden: int,
                 embedding: Optional[nn.Parameter] = None):
        super().__init__()
        self.word_dim = word_dim
        self.hidden = hidden
        if embedding is not None:
            if tuple(embedding.shape) != (vocab_size, word_dim):
                raise DimensionMismatchError(
                    f"Shared embedding has shape {tuple(embedding.shape)}, expected {(vocab_size, word_dim)}")
            self.E = embedding
        else:
            self.E = nn.Parameter(torch.zeros(vocab_size, word_dim))
        for gate in ("z", "r", "h"):
            self.register_parameter(f"W_{gate}", nn.Parameter(torch.zeros(word_dim, hidden)))
            self.register_parameter(f"U_{gate}", nn.Parameter(torch.zeros(hidden, hidden)))
            self.register_parameter(f"b_{gate}", nn.Parameter(torch.zeros(hidden)))

    def recurrent_parameters(self) -> List[nn.Parameter]:
        return [getattr(self, f"{kind}_{gate}") for kind in ("W", "U", "b") for gate in ("z", "r", "h")]

    def reset_parameters(self, generator: Optional[torch.Generator] = None) -> None:
        bound = 1.0 / math.sqrt(self.hidden)
        with torch.no_grad():
            for p in self.recurrent_parameters():
                p.uniform_(-bound, bound, generator=generator)

    def init_embedding(self, vocab: Vocabulary, table: Optional[EmbeddingTable] = None,
                       generator: Optional[torch.Generator] = None) -> int:
        """Rows copied from the w2v table where the word exists, else U(-0.1, 0.1); returns hits"""
        if table is not None and table.dim != self.word_dim:
            raise ConfigError(f"word_dim={self.word_dim} does not match the embedding table dim {table.dim}")
        hits = 0
        with torch.no_grad():
            self.E.uniform_(-0.1, 0.1, generator=generator)
            if table is not None:
                for idx, word in enumerate(vocab.words()):
                    vec = table.get(word)
                    if vec is not None:
                        self.E[idx] = torch.from_numpy(vec).to(self.E.dtype)
                        hits += 1
        return hits


def gru_step(x: torch.Tensor, h_prev: torch.Tensor, p: GruParams) -> torch.Tensor:
    """One GRU update, h = (1 - z) * h_prev + z * h_tilde"""
    if x.shape[-1] != p.word_dim or h_prev.shape[-1] != p.hidden:
        raise DimensionMismatchError(
            f"gru_step expects x[..., {p.word_dim}] and h[..., {p.hidden}], "
            f"got {tuple(x.shape)} and {tuple(h_prev.shape)}")
    z = torch.sigmoid(x @ p.W_z + h_prev @ p.U_z + p.b_z)
    r = torch.sigmoid(x @ p.W_r + h_prev @ p.U_r + p.b_r)
    h_tilde = torch.tanh(x @ p.W_h + (r * h_prev) @ p.U_h + p.b_h)
    h = (1 - z) * h_prev + z * h_tilde
    if not torch.isfinite(h).all():
        raise DivergenceError("GRU hidden state became non-finite")
    return h


def run_gru(id_lists: Sequence[Sequence[int]], p: GruParams, reverse: bool = False) -> torch.Tensor:
    """Mean-pooled hidden states for a batch of index sequences, shape [B, H]"""
    lengths = [len(ids) for ids in id_lists]
    if not lengths or min(lengths) == 0:
        raise EmptySentenceError("Sequential encoders require at least one token per sentence")
    batch, steps = len(lengths), max(lengths)
    idx = torch.zeros(batch, steps, dtype=torch.long)
    mask = torch.zeros(batch, steps, dtype=torch.bool)
    for i, ids in enumerate(id_lists):
        seq = list(ids)[::-1] if reverse else list(ids)
        idx[i, :len(seq)] = torch.tensor(seq, dtype=torch.long)
        mask[i, :len(seq)] = True

    x = p.E[idx]
    h = x.new_zeros(batch, p.hidden)
    total = x.new_zeros(batch, p.hidden)
    for t in range(steps):
        h_new = gru_step(x[:, t], h, p)
        m = mask[:, t].unsqueeze(1)
        h = torch.where(m, h_new, h)
        total = total + torch.where(m, h_new, torch.zeros_like(h_new))
    return total / torch.tensor(lengths, dtype=x.dtype).unsqueeze(1)


def encode_gru(s: TokenSeq, p: GruParams, vocab_seq: Vocabulary) -> torch.Tensor:
    return run_gru([vocab_seq.encode_ids(s)], p)[0]


def encode_bigru(s: TokenSeq, p_fwd: GruParams, p_bwd: GruParams, vocab_seq: Vocabulary) -> torch.Tensor:
    if p_fwd.hidden != p_bwd.hidden:
        raise DimensionMismatchError("Forward and backward GRU must share the hidden size")
    ids = [vocab_seq.encode_ids(s)]
    return torch.cat([run_gru(ids, p_fwd), run_gru(ids, p_bwd, reverse=True)], dim=1)[0]


class SentenceEncoder(nn.Module):
    """Maps a list of sentences to a [B, dim] tensor in the module's dtype"""

    tag = ""
    trainable = False

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.register_buffer("_dtype_anchor", torch.zeros(0), persistent=False)

    @property
    def dtype(self) -> torch.dtype:
        return self._dtype_anchor.dtype

    def _from_numpy(self, rows: List[np.ndarray]) -> torch.Tensor:
        return torch.from_numpy(np.stack(rows)).to(self.dtype)


class BowEncoder(SentenceEncoder):
    tag = "bow"

    def __init__(self, vocab: Vocabulary):
        super().__init__(vocab.size)
        self.vocab = vocab

    def forward(self, sentences: Sequence[Sentence]) -> torch.Tensor:
        return self._from_numpy([encode_bow(s.tokens, self.vocab).to_dense() for s in sentences])


class W2VEncoder(SentenceEncoder):
    tag = "w2v"

    def __init__(self, table: EmbeddingTable):
        super().__init__(table.dim)
        self.table = table

    def forward(self, sentences: Sequence[Sentence]) -> torch.Tensor:
        return self._from_numpy([encode_w2v(s.tokens, self.table) for s in sentences])


class PrecomputedEncoder(SentenceEncoder):
    tag = "bert"

    def __init__(self, store: PrecomputedStore):
        super().__init__(store.dim)
        self.store = store

    def forward(self, sentences: Sequence[Sentence]) -> torch.Tensor:
        return self._from_numpy([encode_precomputed(s.sentence_id, self.store) for s in sentences])


class GruEncoder(SentenceEncoder):
    tag = "gru"
    trainable = True

    def __init__(self, vocab_seq: Vocabulary, word_dim: int = W2V_DIM, hidden: int = GRU_HIDDEN):
        super().__init__(hidden)
        self.vocab = vocab_seq
        self.fwd = GruParams(vocab_seq.size, word_dim, hidden)

    def reset_parameters(self, table: Optional[EmbeddingTable] = None,
                         generator: Optional[torch.Generator] = None) -> None:
        self.fwd.init_embedding(self.vocab, table, generator)
        self.fwd.reset_parameters(generator)

    def forward(self, sentences: Sequence[Sentence]) -> torch.Tensor:
        return run_gru([self.vocab.encode_ids(s.tokens) for s in sentences], self.fwd)


class BiGruEncoder(GruEncoder):
    """Forward and backward GRUs share E; recurrent parameters are doubled"""

    tag = "bigru"

    def __init__(self, vocab_seq: Vocabulary, word_dim: int = W2V_DIM, hidden: int = GRU_HIDDEN):
        super().__init__(vocab_seq, word_dim, hidden)
        self.dim = 2 * hidden
        self.bwd = GruParams(vocab_seq.size, word_dim, hidden, embedding=self.fwd.E)

    def reset_parameters(self, table: Optional[EmbeddingTable] = None,
                         generator: Optional[torch.Generator] = None) -> None:
        super().reset_parameters(table, generator)
        self.bwd.reset_parameters(generator)

    def forward(self, sentences: Sequence[Sentence]) -> torch.Tensor:
        ids = [self.vocab.encode_ids(s.tokens) for s in sentences]
        return torch.cat([run_gru(ids, self.fwd), run_gru(ids, self.bwd, reverse=True)], dim=1)


@dataclass
class EncoderResources:
    """Files an encoder set is built from; paths are kept for checkpoint references"""

    bow_vocab: Optional[Vocabulary] = None
    seq_vocab: Optional[Vocabulary] = None
    table: Optional[EmbeddingTable] = None
    precomputed: Optional[PrecomputedStore] = None
    paths: Dict[str, str] = field(default_factory=dict)


def build_encoder(tag: str, resources: EncoderResources, word_dim: int = W2V_DIM,
                  gru_hidden: int = GRU_HIDDEN) -> SentenceEncoder:
    """Instantiate an encoder; trainable ones still need reset_parameters()"""
    def need(name):
        value = getattr(resources, name)
        if value is None:
            raise ConfigError(f"Encoder {tag!r} needs the {name} resource")
        return value

    if tag == "bow":
        return BowEncoder(need("bow_vocab"))
    if tag == "w2v":
        return W2VEncoder(need("table"))
    if tag == "bert":
        return PrecomputedEncoder(need("precomputed"))
    if tag == "gru":
        return GruEncoder(need("seq_vocab"), word_dim, gru_hidden)
    if tag == "bigru":
        return BiGruEncoder(need("seq_vocab"), word_dim, gru_hidden)
    raise ConfigError(f"Unknown encoder {tag!r}; expected one of {', '.join(ENCODER_TAGS)}")
