from faker import Faker
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List

import numpy as np

from retrieval.data import (Caption, CaptionSet, FeatureStore, save_caption_set, save_embedding_table,
                            save_feature_store, save_judgments, save_precomputed_store)
from retrieval.encoders import EmbeddingTable, PrecomputedStore
from retrieval.errors import DataError
from retrieval.metrics import Judgment, JudgmentPool
from retrieval.textproc import Sentence, load_stopwords, tokenize

logger = logging.getLogger(__name__)

FIXTURE_WORD_DIM = 16
FIXTURE_BERT_DIM = 12

# TrainConfig values for the memorization fixture
FIXTURE_CONFIG = {
    "MIN_COUNT": "1",
    "BATCH_SIZE": "8",
    "DC": "32",
    "WORD_DIM": str(FIXTURE_WORD_DIM),
    "GRU_HIDDEN": "16",
    "TRANSFORM_DIM": "32",
    "LR0": "1e-3",
    "MAX_EPOCHS": "200",
    "RESTARTS": "1",
    "ENCODERS": "bow,w2v",
}


@dataclass
class FixturePaths:
    root: Path
    features: Path
    captions: Path
    embeddings: Path
    precomputed: Path
    qrels: Path
    queries: Path
    config: Path


class CaptionFixtureGenerator:
    """Seeded synthetic video collection: one orthogonal feature vector and one caption per video"""

    def __init__(self, seed: int = 42):
        self.seed = seed
        self.fake = Faker()
        Faker.seed(seed)  # For reproducible results
        self.rng = np.random.default_rng(seed)
        self.stopwords = load_stopwords()

        self.templates = [
            "a video showing the {word} scene",
            "someone talks about {word} in this clip",
            "footage of people near the {word}",
            "a short film where a {word} appears",
        ]

    def distinctive_words(self, n: int) -> List[str]:
        """n distinct words, none a stopword and none shared with the templates"""
        reserved = {t for template in self.templates for t in tokenize(template.format(word=""))}
        words: List[str] = []
        seen = set()
        for attempt in range(50 * n):
            tokens = tokenize(self.fake.word()).tokens
            if len(tokens) != 1:
                continue
            word = tokens[0]
            if len(word) < 3 or word in self.stopwords or word in reserved:
                continue
            if word in seen:
                word = f"{word}{attempt}"
            seen.add(word)
            words.append(word)
            if len(words) == n:
                return words
        raise DataError(f"Could not draw {n} distinct words")

    def generate_features(self, n: int) -> np.ndarray:
        """Rows of a random orthogonal matrix"""
        q, _ = np.linalg.qr(self.rng.standard_normal((n, n)))
        return q.astype(np.float32)

    def generate_captions(self, words: List[str]) -> CaptionSet:
        records = []
        for i, word in enumerate(words):
            template = self.templates[int(self.rng.integers(len(self.templates)))]
            records.append(Caption(Sentence.from_text(f"s{i:03d}", template.format(word=word)), f"v{i:03d}"))
        return CaptionSet(records)

    def generate_table(self, captions: CaptionSet, dim: int = FIXTURE_WORD_DIM) -> EmbeddingTable:
        vocab = sorted({tok for s in captions.sentences for tok in s.tokens})
        return EmbeddingTable(vocab, self.rng.standard_normal((len(vocab), dim)).astype(np.float32))

    def generate_precomputed(self, captions: CaptionSet, dim: int = FIXTURE_BERT_DIM) -> PrecomputedStore:
        ids = [s.sentence_id for s in captions.sentences]
        vectors = self.rng.standard_normal((len(ids), dim)).astype(np.float32)
        return PrecomputedStore(ids, vectors, {"MODEL": "synthetic", "POOLING": "mean", "BLOCKS": "12"})

    def generate_judgments(self, captions: CaptionSet) -> JudgmentPool:
        pool = JudgmentPool()
        videos = list(captions.by_video)
        for rec in captions:
            for vid in videos:
                pool.add(rec.sentence.sentence_id, Judgment(vid, int(vid == rec.video_id), "all", 1.0))
        return pool


def make_fixture(out_dir, n_videos: int = 32, seed: int = 42) -> FixturePaths:
    if n_videos < 2:
        raise ValueError(f"A fixture needs at least 2 videos, got {n_videos}")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    paths = FixturePaths(root, root / "features.vfea", root / "captions.tsv", root / "embeddings.txt",
                         root / "bert.vfea", root / "qrels.tsv", root / "queries.txt", root / "fixture.env")

    generator = CaptionFixtureGenerator(seed)
    words = generator.distinctive_words(n_videos)
    captions = generator.generate_captions(words)
    store = FeatureStore([f"v{i:03d}" for i in range(n_videos)], generator.generate_features(n_videos))

    save_feature_store(store, paths.features)
    save_caption_set(captions, paths.captions)
    save_embedding_table(generator.generate_table(captions), paths.embeddings)
    save_precomputed_store(generator.generate_precomputed(captions), paths.precomputed)
    save_judgments(generator.generate_judgments(captions), paths.qrels)
    with open(paths.queries, "w", encoding="utf-8", newline="\n") as f:
        for s in captions.sentences:
            f.write(s.text + "\n")
    with open(paths.config, "w", encoding="utf-8", newline="\n") as f:
        for key, value in FIXTURE_CONFIG.items():
            f.write(f"{key}={value}\n")

    logger.info(f"Wrote a {n_videos}-video fixture to {root}")
    return paths


def fixture_summary(paths: FixturePaths) -> Dict[str, str]:
    return {k: str(v) for k, v in vars(paths).items()}
