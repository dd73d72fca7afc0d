import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import brute_force_avg_phone_dist
from polyglot_tts import analysis as A
from polyglot_tts.phones import default_rule_table, parse_unified

RULES = default_rule_table()


# -- phonetic distance -------------------------------------------------------


def test_orthogonal_pair():
    table = {"t": np.array([1.0, 0.0]), "s": np.array([0.0, 1.0])}
    assert A.avg_phone_dist({"t": 1.0}, {"s"}, table) == 1.0


def test_weighted_sum_example():
    # t2 sits at cosine distance 0.2 from s1: cos = 0.8
    table = {"t1": np.array([1.0, 0.0]), "t2": np.array([0.8, 0.6]), "s1": np.array([1.0, 0.0])}
    table["t1"] = table["s1"]
    got = A.avg_phone_dist({"s1": 0.5, "t2": 0.5}, {"s1"}, table)
    assert got == pytest.approx(0.1, abs=1e-15)


def test_subset_gives_zero():
    rng = np.random.default_rng(0)
    table = {s: rng.standard_normal(8) for s in "abcdef"}
    assert A.avg_phone_dist({"a": 0.3, "b": 0.7}, {"a", "b", "c"}, table) == 0.0


def test_missing_embedding():
    with pytest.raises(A.MissingEmbeddingError):
        A.avg_phone_dist({"a": 1.0}, {"b"}, {"a": np.ones(2)})


def test_empty_speaker_set():
    with pytest.raises(A.AnalysisError):
        A.avg_phone_dist({"a": 1.0}, set(), {"a": np.ones(2)})


def _random_instance(rng):
    symbols = [f"p{i}" for i in range(int(rng.integers(3, 12)))]
    dim = int(rng.integers(2, 9))
    table = {s: rng.standard_normal(dim) for s in symbols}
    k = int(rng.integers(1, len(symbols) + 1))
    test = list(rng.choice(symbols, size=k, replace=False))
    w = rng.random(k) + 0.01
    probs = {t: float(p) for t, p in zip(test, w / w.sum())}
    speaker = set(rng.choice(symbols, size=int(rng.integers(1, len(symbols) + 1)), replace=False))
    return probs, speaker, table


def test_matches_double_loop_oracle_exactly():
    rng = np.random.default_rng(1234)
    for _ in range(100):
        probs, speaker, table = _random_instance(rng)
        assert A.avg_phone_dist(probs, speaker, table) == brute_force_avg_phone_dist(
            probs, speaker, table)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_range_and_zero_iff_covered(seed):
    probs, speaker, table = _random_instance(np.random.default_rng(seed))
    d = A.avg_phone_dist(probs, speaker, table)
    assert 0.0 <= d <= 2.0
    if set(probs) <= speaker:
        assert d == 0.0


def test_phone_distribution_frequency_and_uniform():
    seqs = [parse_unified('"a b a .', RULES), parse_unified("b b", RULES)]
    assert A.phone_distribution(seqs, RULES) == {"a": 0.4, "b": 0.6}
    assert A.phone_distribution(seqs, RULES, uniform=True) == {"a": 0.5, "b": 0.5}
    assert A.speaker_phone_set(seqs, RULES) == {"a", "b"}


def test_embedding_table_csv(tmp_path):
    table = {"a": np.array([0.1, 2.0]), "b": np.array([-1.0, 3.5])}
    A.save_embedding_table(tmp_path / "t.csv", table)
    back = A.load_embedding_table(tmp_path / "t.csv")
    assert back.keys() == table.keys()
    for k in table:
        np.testing.assert_array_equal(back[k], table[k])


# -- MOS ---------------------------------------------------------------------


def _r(subject, score, system="s", voice="v", item="i"):
    return A.RatingRecord(subject, item, system, voice, score)


def test_zscore_example():
    out = A.zscore_by_subject([_r("x", 3), _r("x", 4), _r("x", 5)])
    assert [r.z for r in out] == [-1.0, 0.0, 1.0]


def test_zscore_constant_subject():
    out = A.zscore_by_subject([_r("x", 2), _r("x", 2), _r("y", 5)])
    assert [r.z for r in out] == [0.0, 0.0, 0.0]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("abc"), st.integers(1, 5)), min_size=1, max_size=60))
def test_zscore_properties(rows):
    out = A.zscore_by_subject([_r(s, v) for s, v in rows])
    for subject in {s for s, _ in rows}:
        zs = np.array([r.z for r in out if r.subject == subject])
        scores = np.array([r.score for r in out if r.subject == subject])
        assert abs(zs.mean()) < 1e-9
        if len(scores) > 1 and scores.std() > 0:
            assert abs(zs.std(ddof=1) - 1) < 1e-9
        # rank order within a subject is preserved
        order = np.argsort(scores, kind="stable")
        assert np.all(np.diff(zs[order]) >= 0)


def test_invalid_score():
    with pytest.raises(A.AnalysisError):
        _r("x", 6)


def test_bonferroni():
    assert A.bonferroni(0.01, 6) == pytest.approx(0.06)
    assert A.bonferroni(0.3, 6) == 1.0


def _zs(values, system):
    return [A.RatingRecord("s", str(i), system, "v", 3, z=float(v)) for i, v in enumerate(values)]


def test_identical_groups():
    vals = [0.1, -0.5, 1.2, 0.3]
    (c,) = A.pairwise_contrasts(_zs(vals, "a") + _zs(vals, "b"))
    assert c.mean_diff == 0.0
    assert c.p_adjusted == pytest.approx(1.0)
    assert not c.significant


def test_contrasts_symmetric():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=30), rng.normal(0.3, 1.5, size=25)
    (ab,) = A.pairwise_contrasts(_zs(x, "a") + _zs(y, "b"))
    (ba,) = A.pairwise_contrasts(_zs(x, "b") + _zs(y, "a"))
    assert ab.mean_diff == pytest.approx(-ba.mean_diff)
    assert ab.p_raw == pytest.approx(ba.p_raw)


def test_contrast_matches_welch_by_hand():
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=12), rng.normal(1.0, 2.0, size=9)
    (c,) = A.pairwise_contrasts(_zs(x, "a") + _zs(y, "b"))
    vx, vy = x.var(ddof=1) / len(x), y.var(ddof=1) / len(y)
    t = (x.mean() - y.mean()) / math.sqrt(vx + vy)
    df = (vx + vy) ** 2 / (vx ** 2 / (len(x) - 1) + vy ** 2 / (len(y) - 1))
    from scipy.stats import t as student

    assert c.t == pytest.approx(t)
    assert c.p_raw == pytest.approx(2 * student.sf(abs(t), df))


def test_contrast_errors():
    with pytest.raises(A.InsufficientDataError):
        A.pairwise_contrasts(_zs([0.0, 1.0], "a"))
    with pytest.raises(A.InsufficientDataError):
        A.pairwise_contrasts(_zs([0.0, 1.0], "a") + _zs([1.0], "b"))
    with pytest.raises(A.AnalysisError):
        A.pairwise_contrasts([_r("x", 3, "a"), _r("x", 4, "a"), _r("x", 3, "b"), _r("x", 1, "b")])


def test_adjusted_never_below_raw():
    rng = np.random.default_rng(5)
    recs = sum((_zs(rng.normal(0.2 * k, 1, 20), f"s{k}") for k in range(4)), [])
    for c in A.pairwise_contrasts(recs):
        assert c.p_raw <= c.p_adjusted <= 1.0


def test_power_with_injected_shift():
    rng = np.random.default_rng(7)
    recs = _zs(rng.normal(0.0, 1.0, 200), "base") + _zs(rng.normal(0.5, 1.0, 200), "shifted")
    (c,) = A.pairwise_contrasts(recs)
    assert c.significant and c.mean_diff < 0


def _voice_contrasts(effects, n=60, seed=0):
    """One reference and one test system per voice; ``effects`` is the test system's shift."""
    rng = np.random.default_rng(seed)
    out = {}
    for voice, shift in effects.items():
        recs = _zs(rng.normal(0, 1, n), "ref") + _zs(rng.normal(shift, 1, n), "new")
        out[voice] = A.pairwise_contrasts(recs)
    return out


def test_significance_summary_counts():
    effects = {"v1": 1.5, "v2": 1.5, "v3": 1.5, "v4": -1.5, "v5": 0.0, "v6": 0.0}
    summary = A.significance_summary(_voice_contrasts(effects), "ref")
    assert summary.counts["new"] == {"better": 3, "equal": 2, "worse": 1}
    assert summary.per_voice["v4"]["new"] == "worse"
    lines = summary.table().splitlines()
    assert [ln.split()[0] for ln in lines[1:]] == ["better", "equal", "worse"]


def test_significance_all_equal():
    summary = A.significance_summary(_voice_contrasts({"v1": 0.0, "v2": 0.0}), "ref")
    assert summary.counts["new"] == {"better": 0, "equal": 2, "worse": 0}


def test_shift_for_plot():
    rng = np.random.default_rng(0)
    g1, g2 = rng.normal(3.2, 0.3, 10), rng.normal(3.4, 0.3, 12)
    g1 += 3.2 - g1.mean()
    g2 += 3.4 - g2.mean()
    out = A.shift_mos_for_plot({"a": g1, "b": g2})
    assert abs(out["a"].mean() - out["b"].mean()) < 1e-9
    np.testing.assert_allclose(np.diff(out["a"]), np.diff(g1), rtol=0, atol=1e-12)
    single = A.shift_mos_for_plot({"a": g1})
    np.testing.assert_allclose(single["a"], g1, rtol=0, atol=1e-12)


def test_ratings_csv(tmp_path):
    recs = [_r("x", 3, "a"), _r("y", 5, "b", "w", "j")]
    A.save_ratings(tmp_path / "r.csv", recs)
    assert A.load_ratings(tmp_path / "r.csv") == recs
    (tmp_path / "bad.csv").write_text("subject,item,score\n")
    with pytest.raises(A.AnalysisError):
        A.load_ratings(tmp_path / "bad.csv")
