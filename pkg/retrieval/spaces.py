"""
Encoder-specific common spaces.

Each SubNetwork binds one sentence encoder to a text-side and a video-side
affine+tanh projection; the cross-modal similarity of a model is the
unweighted mean of the per-space cosine similarities. The W2VV++ style
baselines reuse the same SubNetwork with a concatenating encoder.
"""

import logging
import math
import time
from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .encoders import EmbeddingTable, SentenceEncoder
from .errors import (ConfigError, DegenerateEmbeddingError, DimensionMismatchError,
                     UsageError)
from .metrics import RankedList
from .textproc import Sentence

logger = logging.getLogger(__name__)

FUSION_MODES = ("sea", "concat", "transformed_concat", "model_average")
FUSION_ALIASES = {"transformed": "transformed_concat", "avg": "model_average"}
COMMON_DIM = 2048
TRANSFORM_DIM = 2048
SCORE_CHUNK = 8192


def normalize_fusion(mode: str) -> str:
    mode = FUSION_ALIASES.get(mode, mode)
    if mode not in FUSION_MODES:
        raise ConfigError(f"Unknown fusion mode {mode!r}; expected one of {', '.join(FUSION_MODES)}")
    return mode


@dataclass(frozen=True)
class VideoFeature:
    video_id: str
    vector: np.ndarray


class AffineProjection(nn.Module):
    """tanh(W^T x + b), W of shape [d_in, d_c]"""

    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        if d_in <= 0 or d_out <= 0:
            raise ConfigError(f"Projection dimensions must be positive, got {d_in}->{d_out}")
        self.d_in = d_in
        self.d_out = d_out
        self.W = nn.Parameter(torch.zeros(d_in, d_out))
        self.b = nn.Parameter(torch.zeros(d_out))

    def reset_parameters(self, generator: Optional[torch.Generator] = None) -> None:
        bound = 1.0 / math.sqrt(self.d_in)
        with torch.no_grad():
            self.W.uniform_(-bound, bound, generator=generator)
            self.b.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.d_in:
            raise DimensionMismatchError(f"Projection expects input dim {self.d_in}, got {x.shape[-1]}")
        return torch.tanh(x @ self.W + self.b)


def project(x: torch.Tensor, p: AffineProjection) -> torch.Tensor:
    return p(x)


def cosine_sim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise DimensionMismatchError(f"cosine_sim needs equal shapes, got {tuple(a.shape)} and {tuple(b.shape)}")
    na, nb = torch.linalg.vector_norm(a), torch.linalg.vector_norm(b)
    if na == 0 or nb == 0:
        raise DegenerateEmbeddingError("cosine similarity of a zero-norm embedding")
    return torch.dot(a, b) / (na * nb)


def cosine_matrix(texts: torch.Tensor, videos: torch.Tensor) -> torch.Tensor:
    """[B, d] x [N, d] -> [B, N]; a zero embedding scores 0 against everything"""
    return F.normalize(texts, dim=1) @ F.normalize(videos, dim=1).t()


class ConcatEncoder(SentenceEncoder):
    """Concatenation of several encoders, optionally each passed through its own affine+tanh first"""

    tag = "concat"

    def __init__(self, parts: Sequence[SentenceEncoder], transform_dim: Optional[int] = None):
        dims = [transform_dim] * len(parts) if transform_dim else [p.dim for p in parts]
        super().__init__(sum(dims))
        self.parts = nn.ModuleList(parts)
        self.transform_dim = transform_dim
        self.transforms = nn.ModuleList(
            [AffineProjection(p.dim, transform_dim) for p in parts] if transform_dim else [])

    @property
    def tags(self) -> List[str]:
        return [p.tag for p in self.parts]

    def forward(self, sentences: Sequence[Sentence]) -> torch.Tensor:
        outputs = [part(sentences) for part in self.parts]
        if self.transform_dim:
            outputs = [t(o) for t, o in zip(self.transforms, outputs)]
        return torch.cat(outputs, dim=1)


class SubNetwork(nn.Module):
    """One encoder and its own common space (FC_t, FC_v)"""

    def __init__(self, encoder: SentenceEncoder, video_dim: int, dc: int = COMMON_DIM):
        super().__init__()
        self.encoder = encoder
        self.text_proj = AffineProjection(encoder.dim, dc)
        self.video_proj = AffineProjection(video_dim, dc)

    @property
    def binding(self) -> str:
        if isinstance(self.encoder, ConcatEncoder):
            return "+".join(self.encoder.tags)
        return self.encoder.tag

    def reset_parameters(self, table: Optional[EmbeddingTable] = None,
                         generator: Optional[torch.Generator] = None) -> None:
        for module in _trainable_encoders(self.encoder):
            module.reset_parameters(table, generator)
        if isinstance(self.encoder, ConcatEncoder):
            for t in self.encoder.transforms:
                t.reset_parameters(generator)
        self.text_proj.reset_parameters(generator)
        self.video_proj.reset_parameters(generator)

    def embed_texts(self, sentences: Sequence[Sentence]) -> torch.Tensor:
        return self.text_proj(self.encoder(sentences))

    def embed_videos(self, features: torch.Tensor) -> torch.Tensor:
        return self.video_proj(features)


def _trainable_encoders(encoder: SentenceEncoder) -> List[SentenceEncoder]:
    if isinstance(encoder, ConcatEncoder):
        return [p for p in encoder.parts if p.trainable]
    return [encoder] if encoder.trainable else []


class MultiSpaceModel(nn.Module):
    """
    k subnetworks whose cosine similarities are averaged.

    sea and model_average keep one space per encoder; concat and
    transformed_concat keep a single space over the concatenated encoders.
    """

    def __init__(self, spaces: Sequence[SubNetwork], video_dim: int, fusion: str = "sea"):
        super().__init__()
        if not spaces:
            raise ConfigError("A model needs at least one subnetwork")
        fusion = normalize_fusion(fusion)
        if fusion in ("concat", "transformed_concat") and len(spaces) != 1:
            raise ConfigError(f"{fusion} uses exactly one common space, got {len(spaces)}")
        for sub in spaces:
            if sub.video_proj.d_in != video_dim:
                raise DimensionMismatchError(
                    f"Subnetwork {sub.binding} expects video dim {sub.video_proj.d_in}, model has {video_dim}")
        self.spaces = nn.ModuleList(spaces)
        self.video_dim = video_dim
        self.fusion = fusion

    @classmethod
    def build(cls, encoders: Sequence[SentenceEncoder], video_dim: int, dc: int = COMMON_DIM,
              fusion: str = "sea", transform_dim: int = TRANSFORM_DIM) -> "MultiSpaceModel":
        fusion = normalize_fusion(fusion)
        if not encoders:
            raise ConfigError("At least one sentence encoder is required")
        if fusion == "concat":
            spaces = [SubNetwork(ConcatEncoder(encoders), video_dim, dc)]
        elif fusion == "transformed_concat":
            spaces = [SubNetwork(ConcatEncoder(encoders, transform_dim), video_dim, dc)]
        else:
            spaces = [SubNetwork(enc, video_dim, dc) for enc in encoders]
        return cls(spaces, video_dim, fusion)

    @classmethod
    def assemble(cls, models: Sequence["MultiSpaceModel"]) -> "MultiSpaceModel":
        """Model averaging: independently trained single-space models under one roof"""
        spaces = [sub for m in models for sub in m.spaces]
        return cls(spaces, models[0].video_dim, "model_average")

    def reset_parameters(self, table: Optional[EmbeddingTable] = None,
                         generator: Optional[torch.Generator] = None) -> None:
        for sub in self.spaces:
            sub.reset_parameters(table, generator)

    @property
    def k(self) -> int:
        return len(self.spaces)

    @property
    def dc(self) -> int:
        return self.spaces[0].text_proj.d_out

    @property
    def dtype(self) -> torch.dtype:
        return self.spaces[0].video_proj.W.dtype

    @property
    def bindings(self) -> List[str]:
        return [sub.binding for sub in self.spaces]

    def video_tensor(self, features) -> torch.Tensor:
        features = torch.as_tensor(np.asarray(features)) if not torch.is_tensor(features) else features
        return features.to(self.dtype)

    def embed_texts(self, sentences: Sequence[Sentence]) -> List[torch.Tensor]:
        return [sub.embed_texts(sentences) for sub in self.spaces]

    def embed_videos(self, features) -> List[torch.Tensor]:
        x = self.video_tensor(features)
        return [sub.embed_videos(x) for sub in self.spaces]

    def space_similarities(self, sentences: Sequence[Sentence], features) -> torch.Tensor:
        """Per-space cosine similarities, shape [k, B, N]"""
        texts = self.embed_texts(sentences)
        videos = self.embed_videos(features)
        return torch.stack([cosine_matrix(t, v) for t, v in zip(texts, videos)])

    def similarity(self, sentences: Sequence[Sentence], features) -> torch.Tensor:
        """Combined similarity [B, N]: equal-weight mean over spaces"""
        return self.space_similarities(sentences, features).mean(dim=0)

    def score(self, s: Sentence, v: VideoFeature) -> torch.Tensor:
        return torch.stack([cms_space(s, v, sub) for sub in self.spaces]).mean()


def cms_space(s: Sentence, v: VideoFeature, sub: SubNetwork) -> torch.Tensor:
    dtype = sub.video_proj.W.dtype
    text = sub.embed_texts([s])[0]
    video = sub.embed_videos(torch.as_tensor(np.asarray(v.vector)).to(dtype).unsqueeze(0))[0]
    return cosine_sim(text, video)


def cms_combined(s: Sentence, v: VideoFeature, model: MultiSpaceModel) -> torch.Tensor:
    if model.fusion not in ("sea", "model_average"):
        raise UsageError(f"cms_combined needs a sea or model_average model, got {model.fusion}")
    return model.score(s, v)


def baseline_forward(s: Sentence, v: VideoFeature, model: MultiSpaceModel, mode: str) -> torch.Tensor:
    mode = normalize_fusion(mode)
    if mode not in ("concat", "transformed_concat") or model.fusion != mode:
        raise UsageError(f"baseline_forward({mode}) needs a model built with that mode, got {model.fusion}")
    return cms_space(s, v, model.spaces[0])


def model_average_sim(s: Sentence, v: VideoFeature, models: Sequence[MultiSpaceModel]) -> torch.Tensor:
    if not models:
        raise UsageError("model_average_sim needs at least one model")
    return torch.stack([m.score(s, v) for m in models]).mean()


def _as_models(model: Union[MultiSpaceModel, Sequence[MultiSpaceModel]]) -> List[MultiSpaceModel]:
    models = [model] if isinstance(model, MultiSpaceModel) else list(model)
    if not models:
        raise UsageError("Ranking needs at least one model")
    return models


def _order(scores: np.ndarray, id_order: np.ndarray) -> np.ndarray:
    """Descending score, ties by ascending id (id_order sorts the ids)"""
    return id_order[np.argsort(-scores[id_order], kind="stable")]


@torch.no_grad()
def score_matrix(sentences: Sequence[Sentence], collection, model) -> np.ndarray:
    """[B, N] similarities; a list of models is late-fused by averaging"""
    models = _as_models(model)
    total = None
    for m in models:
        texts = m.embed_texts(sentences)
        parts = []
        for start in range(0, len(collection.ids), SCORE_CHUNK):
            videos = m.embed_videos(collection.matrix[start:start + SCORE_CHUNK])
            parts.append(torch.stack([cosine_matrix(t, v) for t, v in zip(texts, videos)]).mean(dim=0))
        sims = torch.cat(parts, dim=1).double().numpy()
        total = sims if total is None else total + sims
    return total / len(models)


def rank_many(sentences: Sequence[Sentence], collection, model,
              top_n: Optional[int] = None) -> List[RankedList]:
    if len(collection.ids) == 0:
        raise UsageError("Cannot rank an empty collection")
    scores = score_matrix(sentences, collection, model)
    ids = np.asarray(collection.ids)
    id_order = np.argsort(ids, kind="stable")
    out = []
    for s, row in zip(sentences, scores):
        order = _order(row, id_order)[:top_n]
        out.append(RankedList(s.sentence_id, [collection.ids[i] for i in order], [float(row[i]) for i in order]))
    return out


def rank_collection(s: Sentence, collection, model, top_n: Optional[int] = None) -> RankedList:
    return rank_many([s], collection, model, top_n)[0]


@torch.no_grad()
def sentence_neighbors(query: Sentence, pool: Sequence[Sentence], model: MultiSpaceModel,
                       space_index: int = 0, top_n: int = 20) -> List[tuple]:
    """Sentence-to-sentence retrieval on the text side of one space"""
    if not 0 <= space_index < model.k:
        raise UsageError(f"space_index must be in [0, {model.k}), got {space_index}")
    sub = model.spaces[space_index]
    sims = cosine_matrix(sub.embed_texts([query]), sub.embed_texts(pool))[0].double().numpy()
    ids = np.asarray([s.sentence_id for s in pool])
    order = _order(sims, np.argsort(ids, kind="stable"))[:top_n]
    return [(pool[i].sentence_id, float(sims[i])) for i in order]


def count_parameters(model: Union[MultiSpaceModel, Sequence[MultiSpaceModel]]) -> int:
    return sum(p.numel() for m in _as_models(model) for p in m.parameters())


@dataclass
class ModelProfile:
    parameters_million: float
    query_embedding_ms: float
    ranking_ms: float
    queries: int
    collection_size: int


@torch.no_grad()
def profile_model(model, queries: Sequence[Sentence], collection) -> ModelProfile:
    """Wall-clock cost per query; values depend on the hardware"""
    models = _as_models(model)
    if not queries:
        raise UsageError("profile_model needs at least one query")
    video_embs = [m.embed_videos(collection.matrix) for m in models]
    embed_s = rank_s = 0.0
    for q in queries:
        t0 = time.perf_counter()
        texts = [m.embed_texts([q]) for m in models]
        t1 = time.perf_counter()
        total = None
        for txt, vids in zip(texts, video_embs):
            sims = torch.stack([cosine_matrix(t, v) for t, v in zip(txt, vids)]).mean(dim=0)
            total = sims if total is None else total + sims
        _order(total[0].double().numpy(), np.arange(len(collection.ids)))
        rank_s += time.perf_counter() - t1
        embed_s += t1 - t0
    n = len(queries)
    return ModelProfile(count_parameters(models) / 1e6, 1000 * embed_s / n, 1000 * rank_s / n,
                        n, len(collection.ids))
