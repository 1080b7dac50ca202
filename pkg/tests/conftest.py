import numpy as np
import pytest
import torch

from retrieval.data import Batch, Caption, CaptionSet, FeatureStore
from retrieval.encoders import EmbeddingTable, EncoderResources, PrecomputedStore, build_encoder
from retrieval.spaces import MultiSpaceModel
from retrieval.textproc import Sentence, build_vocab

TEXTS = [
    "a dog chases a ball",
    "a cat sleeps on the piano",
    "a man plays guitar",
    "a chef cooks soup",
    "a boat on the river",
    "a car drives through snow",
    "people dance in the snow",
    "a dog swims in the river",
]

VIDEO_DIM = 10
WORD_DIM = 6
GRU_HIDDEN = 5
BERT_DIM = 5


@pytest.fixture
def captions() -> CaptionSet:
    return CaptionSet(Caption(Sentence.from_text(f"s{i}", text), f"v{i}") for i, text in enumerate(TEXTS))


@pytest.fixture
def store() -> FeatureStore:
    rng = np.random.default_rng(0)
    return FeatureStore([f"v{i}" for i in range(len(TEXTS))],
                        rng.standard_normal((len(TEXTS), VIDEO_DIM)).astype(np.float32))


@pytest.fixture
def resources(captions) -> EncoderResources:
    rng = np.random.default_rng(1)
    corpus = [s.tokens for s in captions.sentences]
    bow = build_vocab(corpus, min_count=1)
    seq = build_vocab(corpus, min_count=1, for_sequential=True)
    words = sorted(bow.words())
    table = EmbeddingTable(words, rng.standard_normal((len(words), WORD_DIM)).astype(np.float32))
    ids = [s.sentence_id for s in captions.sentences]
    precomputed = PrecomputedStore(ids, rng.standard_normal((len(ids), BERT_DIM)).astype(np.float32))
    return EncoderResources(bow_vocab=bow, seq_vocab=seq, table=table, precomputed=precomputed)


@pytest.fixture
def make_model(resources):
    """Factory for tiny seeded models over the shared resources"""

    def _make(encoders=("bow", "w2v"), fusion="sea", dc=8, seed=0, transform_dim=7):
        built = [build_encoder(t, resources, WORD_DIM, GRU_HIDDEN) for t in encoders]
        model = MultiSpaceModel.build(built, VIDEO_DIM, dc, fusion, transform_dim)
        model.reset_parameters(resources.table, torch.Generator().manual_seed(seed))
        return model

    return _make


@pytest.fixture
def batch(captions, store) -> Batch:
    return Batch.from_captions(captions.records[:4], store)


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory):
    from scripts.data_generator import make_fixture

    return make_fixture(tmp_path_factory.mktemp("fixture"), n_videos=32, seed=42)


@pytest.fixture
def separated():
    """Four one-word captions whose positives beat every negative by far more than the margin"""
    words = ["alpha", "bravo", "charlie", "delta"]
    records = [Caption(Sentence.from_text(f"s{i}", w), f"v{i}") for i, w in enumerate(words)]
    vocab = build_vocab([r.sentence.tokens for r in records], min_count=1)
    model = MultiSpaceModel.build([build_encoder("bow", EncoderResources(bow_vocab=vocab))], 4, 4)
    offsets = torch.tensor([[(i + 2 * j) % 5 / 5 for j in range(4)] for i in range(4)])
    with torch.no_grad():
        sub = model.spaces[0]
        sub.text_proj.W.copy_(3 * torch.eye(4))
        sub.text_proj.b.zero_()
        sub.video_proj.W.copy_(3 * torch.eye(4) + 0.1 * offsets)
        sub.video_proj.b.zero_()
    features = FeatureStore([f"v{i}" for i in range(4)], np.eye(4, dtype=np.float32))
    return model, Batch.from_captions(records, features)
