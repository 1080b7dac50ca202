import math

import numpy as np
import pytest
import torch

from retrieval.data import FeatureStore
from retrieval.errors import ConfigError, DegenerateEmbeddingError, DimensionMismatchError, UsageError
from retrieval.spaces import (AffineProjection, MultiSpaceModel, SubNetwork, VideoFeature, baseline_forward,
                              cms_combined, cms_space, cosine_matrix, cosine_sim, count_parameters,
                              model_average_sim, normalize_fusion, profile_model, project, rank_collection,
                              rank_many, score_matrix, sentence_neighbors)
from retrieval.encoders import EncoderResources, PrecomputedStore, build_encoder
from retrieval.textproc import Sentence

from .conftest import VIDEO_DIM, WORD_DIM


def _video(store, vid):
    return VideoFeature(vid, store.get(vid))


def test_normalize_fusion_aliases():
    assert normalize_fusion("transformed") == "transformed_concat"
    assert normalize_fusion("avg") == "model_average"
    with pytest.raises(ConfigError):
        normalize_fusion("late")


def test_cosine_sim_rejects_zero_vectors():
    with pytest.raises(DegenerateEmbeddingError):
        cosine_sim(torch.zeros(3), torch.ones(3))
    with pytest.raises(DimensionMismatchError):
        cosine_sim(torch.ones(3), torch.ones(4))


def test_cosine_matrix_zero_row_scores_zero():
    texts = torch.tensor([[0.0, 0.0], [1.0, 0.0]])
    videos = torch.tensor([[1.0, 1.0], [2.0, 0.0]])
    sims = cosine_matrix(texts, videos)
    assert sims[0].tolist() == [0.0, 0.0]
    torch.testing.assert_close(sims[1], torch.tensor([2 ** -0.5, 1.0]))


def test_combined_score_is_mean_of_space_scores(make_model, captions, store):
    model = make_model()
    s, v = captions.sentences[2], _video(store, "v5")
    per_space = [cms_space(s, v, sub) for sub in model.spaces]
    torch.testing.assert_close(cms_combined(s, v, model), (per_space[0] + per_space[1]) / 2)
    assert -1.0 <= float(cms_combined(s, v, model)) <= 1.0


def test_batched_similarity_matches_pairwise_score(make_model, captions, store):
    model = make_model(encoders=("bow", "w2v", "bert"))
    sims = model.similarity(captions.sentences[:3], store.matrix)
    assert sims.shape == (3, len(store))
    for i in range(3):
        for j, vid in enumerate(store.ids):
            torch.testing.assert_close(sims[i, j], model.score(captions.sentences[i], _video(store, vid)))


def test_space_similarities_shape(make_model, captions, store):
    model = make_model()
    assert model.space_similarities(captions.sentences, store.matrix).shape == (2, len(captions), len(store))


def test_concat_has_one_space(make_model, resources):
    model = make_model(fusion="concat")
    assert model.k == 1
    assert model.bindings == ["bow+w2v"]
    bow_dim = resources.bow_vocab.size
    assert model.spaces[0].text_proj.d_in == bow_dim + WORD_DIM


def test_transformed_concat_projects_each_encoder(make_model):
    model = make_model(fusion="transformed_concat", transform_dim=7)
    assert model.spaces[0].text_proj.d_in == 14
    assert len(model.spaces[0].encoder.transforms) == 2


def test_single_encoder_sea_equals_concat(make_model, captions, store):
    sea = make_model(encoders=("bow",), fusion="sea", seed=3)
    concat = make_model(encoders=("bow",), fusion="concat", seed=3)
    assert torch.equal(sea.similarity(captions.sentences, store.matrix),
                       concat.similarity(captions.sentences, store.matrix))


def test_baseline_forward_checks_mode(make_model, captions, store):
    s, v = captions.sentences[0], _video(store, "v0")
    concat = make_model(fusion="concat")
    torch.testing.assert_close(baseline_forward(s, v, concat, "concat"), cms_space(s, v, concat.spaces[0]))
    with pytest.raises(UsageError):
        baseline_forward(s, v, concat, "transformed_concat")
    with pytest.raises(UsageError):
        cms_combined(s, v, concat)


def test_subnetwork_video_dim_must_match(resources):
    sub = SubNetwork(build_encoder("bow", resources), VIDEO_DIM + 1, 4)
    with pytest.raises(DimensionMismatchError):
        MultiSpaceModel([sub], VIDEO_DIM)


def test_model_average_of_single_space_models(make_model, captions, store):
    m1 = make_model(encoders=("bow",), seed=1)
    m2 = make_model(encoders=("w2v",), seed=2)
    s, v = captions.sentences[1], _video(store, "v1")
    torch.testing.assert_close(model_average_sim(s, v, [m1, m2]), (m1.score(s, v) + m2.score(s, v)) / 2)
    assembled = MultiSpaceModel.assemble([m1, m2])
    assert assembled.fusion == "model_average"
    np.testing.assert_allclose(score_matrix(captions.sentences, store, assembled),
                               score_matrix(captions.sentences, store, [m1, m2]), rtol=1e-6, atol=1e-7)


def test_rank_collection_is_sorted_permutation(make_model, captions, store):
    ranked = rank_collection(captions.sentences[0], store, make_model())
    assert sorted(ranked.video_ids) == sorted(store.ids)
    assert all(a >= b for a, b in zip(ranked.scores, ranked.scores[1:]))
    assert ranked.query_id == "s0"


def test_rank_ties_break_by_ascending_id(make_model, captions):
    row = np.linspace(-1, 1, VIDEO_DIM, dtype=np.float32)
    tied = FeatureStore(["v2", "v0", "v1"], np.stack([row, row, row]))
    ranked = rank_collection(captions.sentences[0], tied, make_model())
    assert ranked.video_ids == ["v0", "v1", "v2"]


def test_rank_many_truncates(make_model, captions, store):
    lists = rank_many(captions.sentences[:2], store, make_model(), top_n=3)
    assert [len(r.video_ids) for r in lists] == [3, 3]


def test_rank_empty_collection_is_usage_error(make_model, captions):
    with pytest.raises((UsageError, DimensionMismatchError)):
        rank_collection(captions.sentences[0], FeatureStore([], np.zeros((0, VIDEO_DIM), np.float32)), make_model())


def test_sentence_neighbors_finds_itself_first(make_model, captions):
    model = make_model()
    pool = captions.sentences
    neighbors = sentence_neighbors(pool[3], pool, model, space_index=1, top_n=4)
    assert neighbors[0][0] == "s3"
    assert neighbors[0][1] == pytest.approx(1.0, abs=1e-5)
    assert len(neighbors) == 4
    with pytest.raises(UsageError):
        sentence_neighbors(pool[3], pool, model, space_index=2)


def test_count_parameters(make_model, resources):
    dc = 8
    bow = resources.bow_vocab.size
    expected = (bow * dc + dc) + (WORD_DIM * dc + dc) + 2 * (VIDEO_DIM * dc + dc)
    assert count_parameters(make_model(dc=dc)) == expected


def test_profile_model_reports_sizes(make_model, captions, store):
    profile = profile_model(make_model(), captions.sentences[:2], store)
    assert profile.queries == 2
    assert profile.collection_size == len(store)
    assert profile.parameters_million > 0


def _precomputed_encoder(ids, dim, seed):
    rng = np.random.default_rng(seed)
    store = PrecomputedStore(ids, rng.standard_normal((len(ids), dim)).astype(np.float32))
    return build_encoder("bert", EncoderResources(precomputed=store))


def test_project_hand_values():
    p = AffineProjection(2, 2)
    assert torch.equal(project(torch.tensor([0.5, -0.5]), p), torch.zeros(2))
    with torch.no_grad():
        p.W.copy_(torch.eye(2))
    out = project(torch.tensor([0.5, -0.5]), p)
    assert out.tolist() == [pytest.approx(0.4621, abs=1e-4), pytest.approx(-0.4621, abs=1e-4)]
    with torch.no_grad():
        p.W.fill_(50.0)
    assert bool((project(torch.tensor([1.0, 2.0]), p).abs() <= 1.0).all())


def test_cosine_sim_hand_values():
    assert float(cosine_sim(torch.tensor([1.0, 0.0]), torch.tensor([1.0, 0.0]))) == 1.0
    assert float(cosine_sim(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0]))) == 0.0
    assert float(cosine_sim(torch.tensor([1.0, 2.0]), torch.tensor([2.0, 1.0]))) == pytest.approx(0.8)


def test_cms_space_matches_straight_line_computation():
    encoder = _precomputed_encoder(["q"], 3, seed=5)
    sub = SubNetwork(encoder, video_dim=4, dc=2)
    sub.reset_parameters(None, torch.Generator().manual_seed(5))
    with torch.no_grad():
        sub.text_proj.b.copy_(torch.tensor([0.1, -0.2]))
        sub.video_proj.b.copy_(torch.tensor([-0.3, 0.05]))
    video = np.array([0.3, -1.2, 0.7, 2.0], dtype=np.float32)

    e = encoder.store.get("q").astype(np.float64)
    wt, bt = sub.text_proj.W.detach().double().numpy(), sub.text_proj.b.detach().double().numpy()
    wv, bv = sub.video_proj.W.detach().double().numpy(), sub.video_proj.b.detach().double().numpy()
    t = [math.tanh(sum(e[i] * wt[i][j] for i in range(3)) + bt[j]) for j in range(2)]
    v = [math.tanh(sum(video[i] * wv[i][j] for i in range(4)) + bv[j]) for j in range(2)]
    expected = (t[0] * v[0] + t[1] * v[1]) / (math.hypot(*t) * math.hypot(*v))

    value = cms_space(Sentence.from_text("q", "query"), VideoFeature("v", video), sub)
    assert float(value) == pytest.approx(expected, abs=1e-5)


def test_combined_similarity_stays_in_range_on_random_inputs():
    ids = [f"q{i}" for i in range(100)]
    encoders = [_precomputed_encoder(ids, dim, seed) for dim, seed in ((3, 1), (5, 2), (7, 3))]
    model = MultiSpaceModel.build(encoders, VIDEO_DIM, dc=4)
    model.reset_parameters(None, torch.Generator().manual_seed(8))
    sentences = [Sentence.from_text(i, "random") for i in ids]
    features = np.random.default_rng(9).standard_normal((100, VIDEO_DIM)).astype(np.float32) * 10
    with torch.no_grad():
        sims = model.similarity(sentences, features)
    assert sims.shape == (100, 100)
    assert bool((sims.abs() <= 1.0).all())
    for i in range(0, 100, 10):
        value = float(cms_combined(sentences[i], VideoFeature("v", features[i]), model))
        assert -1.0 <= value <= 1.0
        assert value == pytest.approx(float(sims[i, i]), abs=1e-6)


@pytest.fixture
def collection():
    rng = np.random.default_rng(12)
    return FeatureStore([f"v{i:03d}" for i in range(100)],
                        rng.standard_normal((100, VIDEO_DIM)).astype(np.float32))


def test_ranking_ignores_positive_rescaling_of_each_space(make_model, captions, collection, monkeypatch):
    model = make_model(encoders=("bow", "w2v", "bert"), seed=6)
    before = rank_many(captions.sentences, collection, model)
    scores = score_matrix(captions.sentences, collection, model)

    embed_texts, embed_videos = MultiSpaceModel.embed_texts, MultiSpaceModel.embed_videos
    for text_scales, video_scales in (([2.0, 0.5, 4.0], [0.25, 8.0, 1.0]), ([3.1, 0.7, 12.5], [0.2, 5.3, 1.9])):
        monkeypatch.setattr(MultiSpaceModel, "embed_texts",
                            lambda self, s, a=text_scales: [t * c for t, c in zip(embed_texts(self, s), a)])
        monkeypatch.setattr(MultiSpaceModel, "embed_videos",
                            lambda self, f, a=video_scales: [v * c for v, c in zip(embed_videos(self, f), a)])
        np.testing.assert_allclose(score_matrix(captions.sentences, collection, model), scores, atol=1e-6)
    monkeypatch.setattr(MultiSpaceModel, "embed_texts",
                        lambda self, s: [t * c for t, c in zip(embed_texts(self, s), [2.0, 0.5, 4.0])])
    monkeypatch.setattr(MultiSpaceModel, "embed_videos",
                        lambda self, f: [v * c for v, c in zip(embed_videos(self, f), [0.25, 8.0, 1.0])])
    after = rank_many(captions.sentences, collection, model)
    assert [r.video_ids for r in after] == [r.video_ids for r in before]


def test_ranking_ignores_positive_affine_maps_of_scores(make_model, captions, collection, monkeypatch):
    from retrieval import spaces

    model = make_model(seed=7)
    before = rank_many(captions.sentences, collection, model)
    original = spaces.score_matrix
    for scale, shift in ((3.7, 0.25), (0.01, -5.0), (1e3, 1e3)):
        monkeypatch.setattr(spaces, "score_matrix",
                            lambda *args, a=scale, b=shift: a * original(*args) + b)
        after = rank_many(captions.sentences, collection, model)
        assert [r.video_ids for r in after] == [r.video_ids for r in before]
