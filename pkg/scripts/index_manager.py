import logging
from typing import List, Optional

import torch

from retrieval.checkpoint import load_checkpoint
from retrieval.data import FeatureStore, load_feature_store
from retrieval.errors import DimensionMismatchError, UsageError
from retrieval.metrics import RankedList
from retrieval.spaces import MultiSpaceModel, rank_collection
from retrieval.textproc import Sentence

from .config import Config

logger = logging.getLogger(__name__)


class IndexManager:
    """A loaded video collection plus one or more checkpoints (late-fused by averaging)"""

    def __init__(self, checkpoints: Optional[List[str]] = None, features: Optional[str] = None,
                 threads: Optional[int] = None):
        checkpoints = checkpoints if checkpoints is not None else Config.checkpoint_paths()
        features = features or Config.FEATURES
        if not checkpoints or not features:
            raise UsageError("IndexManager needs at least one checkpoint and a feature store")
        torch.set_num_threads(threads or Config.THREADS)

        self.models: List[MultiSpaceModel] = [load_checkpoint(path) for path in checkpoints]
        self.collection: FeatureStore = load_feature_store(features)
        for path, model in zip(checkpoints, self.models):
            if model.video_dim != self.collection.d_v:
                raise DimensionMismatchError(
                    f"Checkpoint {path} expects video dim {model.video_dim}, features have {self.collection.d_v}")
        self.checkpoints = list(checkpoints)
        logger.info(f"Index ready: {len(self.collection)} videos, {len(self.models)} model(s)")

    @classmethod
    def from_models(cls, models: List[MultiSpaceModel], collection: FeatureStore) -> "IndexManager":
        manager = cls.__new__(cls)
        manager.models = list(models)
        manager.collection = collection
        manager.checkpoints = []
        return manager

    @property
    def size(self) -> int:
        return len(self.collection)

    def search(self, query: str, top_n: int = 1000, query_id: str = "q") -> RankedList:
        sentence = Sentence.from_text(query_id, query)
        if sentence.tokens.length == 0:
            raise UsageError("Query has no tokens")
        model = self.models[0] if len(self.models) == 1 else self.models
        return rank_collection(sentence, self.collection, model, top_n)
