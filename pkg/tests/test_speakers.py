import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from polyglot_tts import speakers as S


def test_identical_vectors():
    v = np.random.default_rng(0).standard_normal(128)
    g = S.fit_speaker_gaussian([v] * 5, "a")
    np.testing.assert_allclose(g.mean, v, rtol=0, atol=1e-15)
    assert np.all(g.var == S.VAR_FLOOR)
    np.testing.assert_array_equal(S.inference_embedding(g), g.mean)


def test_two_point_variance():
    g = S.fit_speaker_gaussian([np.zeros(128), np.full(128, 2.0)])
    assert np.all(g.mean == 1.0)
    assert np.all(g.var == 2.0)


def test_single_vector_uses_floor():
    g = S.fit_speaker_gaussian([np.ones(128)])
    assert np.all(g.var == S.VAR_FLOOR)


def test_dimension_errors():
    with pytest.raises(S.EmbeddingDimensionError):
        S.fit_speaker_gaussian([np.zeros(127)])
    with pytest.raises(S.EmbeddingDimensionError):
        S.fit_speaker_gaussian([np.zeros(128), np.zeros(129)])
    with pytest.raises(S.EmptyEmbeddingsError):
        S.fit_speaker_gaussian([])


def test_degenerate_draw_is_mean():
    g = S.fit_speaker_gaussian([np.arange(128.0)] * 3)
    s = S.draw_training_embedding(g, np.random.default_rng(1))
    assert np.max(np.abs(s - g.mean)) < 1e-3


def test_draw_reproducible():
    g = S.SpeakerGaussian("a", np.zeros(128), np.ones(128))
    a = S.draw_training_embedding(g, np.random.default_rng(5))
    b = S.draw_training_embedding(g, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)


def test_draws_match_gaussian_at_4_sigma():
    rng = np.random.default_rng(11)
    g = S.SpeakerGaussian("a", rng.standard_normal(128), rng.uniform(0.01, 2.0, 128))
    n = 100_000
    draws = np.stack([S.draw_training_embedding(g, rng) for _ in range(n)])
    z_mean = (draws.mean(0) - g.mean) / np.sqrt(g.var / n)
    assert np.max(np.abs(z_mean)) < 4
    # sample variance has standard error var * sqrt(2 / (n - 1)) under normality
    z_var = (draws.var(0, ddof=1) - g.var) / (g.var * np.sqrt(2 / (n - 1)))
    assert np.max(np.abs(z_var)) < 4


def test_inference_embedding_pure():
    g = S.fit_speaker_gaussian(np.random.default_rng(2).standard_normal((4, 128)))
    a = S.inference_embedding(g)
    a[0] = 99.0
    np.testing.assert_array_equal(S.inference_embedding(g), g.mean)
    assert g.mean[0] != 99.0


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 128), elements=st.floats(-1e3, 1e3)))
def test_var_floor_and_mean(x):
    g = S.fit_speaker_gaussian(list(x))
    assert np.all(g.var >= S.VAR_FLOOR)
    np.testing.assert_array_equal(g.mean, x.mean(axis=0))


def test_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    emb = {f"u{i}": rng.standard_normal(128) for i in range(5)}
    S.save_embeddings(tmp_path / "e.csv", emb)
    back = S.load_embeddings(tmp_path / "e.csv")
    assert back.keys() == emb.keys()
    for k in emb:
        np.testing.assert_array_equal(back[k], emb[k])


def test_csv_bad_width(tmp_path):
    (tmp_path / "e.csv").write_text("u1," + ",".join(["0"] * 127) + "\n")
    with pytest.raises(S.EmbeddingDimensionError):
        S.load_embeddings(tmp_path / "e.csv")


def test_synthetic_dvectors_cluster_by_speaker():
    speaker_of = {f"{s}_{i}": s for s in ("a", "b") for i in range(6)}
    vecs = S.synthetic_dvectors(speaker_of, seed=0)
    gs = S.fit_speaker_gaussians(vecs, speaker_of)
    assert set(gs) == {"a", "b"}
    assert abs(np.linalg.norm(gs["a"].mean) - 1) < 0.2
    # utterance vectors sit far closer to their own speaker's mean
    for utt, spk in speaker_of.items():
        other = "b" if spk == "a" else "a"
        assert np.linalg.norm(vecs[utt] - gs[spk].mean) < np.linalg.norm(vecs[utt] - gs[other].mean)
    assert S.synthetic_dvectors(speaker_of, seed=0)["a_0"].tolist() == vecs["a_0"].tolist()


def test_fit_subset_only():
    speaker_of = {"a_1": "a", "a_2": "a", "b_1": "b"}
    vecs = S.synthetic_dvectors(speaker_of)
    gs = S.fit_speaker_gaussians(vecs, speaker_of, utt_ids=["a_1", "a_2"])
    assert list(gs) == ["a"]
