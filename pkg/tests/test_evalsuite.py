import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ortho_group, spearmanr

from ibkd.evalsuite import (MetricReport, RankedResult, alignment, correlation_from_covariance,
                            covariance_matrix, exact_retrieve, mrr_at_k, offdiag_mass, recall_at_k,
                            spearman, uniformity, write_rankings_tsv)
from ibkd.exceptions import ConfigError, DataError


def ranked(qid, docs):
    return RankedResult(qid, [(d, float(-i)) for i, d in enumerate(docs)])


def test_spearman_examples():
    a = [0.3, 1.2, -0.5, 4.0]
    assert spearman(a, a) == 1.0
    assert spearman(a, [-v for v in a]) == -1.0
    # 1 - 6 * 2 / (3 * 8) = 0.5
    assert spearman([1, 2, 3], [1, 3, 2]) == pytest.approx(0.5, abs=1e-15)


def test_spearman_ties_match_scipy(rng):
    a = rng.integers(0, 4, size=30).astype(float)
    b = a + rng.integers(0, 3, size=30)
    assert spearman(a, b) == pytest.approx(spearmanr(a, b).statistic, abs=1e-12)


def test_spearman_errors():
    with pytest.raises(DataError):
        spearman([1, 1, 1], [1, 2, 3])
    with pytest.raises(DataError):
        spearman([1], [1])
    with pytest.raises(DataError):
        spearman([1, 2], [1, 2, 3])


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(3, 40))
@settings(max_examples=50, deadline=None)
def test_spearman_monotone_invariance(seed, n):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=n), rng.normal(size=n)
    base = spearman(a, b)
    assert base == pytest.approx(spearmanr(a, b).statistic, abs=1e-12)
    assert spearman(np.exp(a), b ** 3) == pytest.approx(base, abs=1e-12)
    assert -1.0 <= base <= 1.0


def test_mrr_examples():
    rel = {"q": {"d3"}}
    assert mrr_at_k([ranked("q", ["d1", "d2", "d3"])], rel, 10) == pytest.approx(1 / 3)
    docs = [f"x{i}" for i in range(10)] + ["d3"]
    assert mrr_at_k([ranked("q", docs)], rel, 10) == 0.0
    two = [ranked("a", ["r", "x"]), ranked("b", ["x", "r"])]
    assert mrr_at_k(two, {"a": {"r"}, "b": {"r"}}, 10) == pytest.approx(0.75)


def test_recall_examples():
    res = [ranked("q", ["a", "b", "c", "d"])]
    assert recall_at_k(res, {"q": {"a", "c"}}, 3) == 1.0
    assert recall_at_k(res, {"q": {"z"}}, 3) == 0.0
    assert recall_at_k(res, {"q": {"a", "d"}}, 2) == 0.5


def test_metric_data_errors():
    with pytest.raises(DataError):
        mrr_at_k([ranked("q", ["a"])], {}, 10)
    with pytest.raises(DataError):
        recall_at_k([ranked("q", ["a"])], {"other": {"a"}}, 10)
    with pytest.raises(ConfigError):
        mrr_at_k([ranked("q", ["a"])], {"q": {"a"}}, 0)


@given(seed=st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_metrics_monotone_in_k(seed):
    rng = np.random.default_rng(seed)
    docs = [f"d{i}" for i in range(15)]
    results = [ranked(f"q{j}", list(rng.permutation(docs))) for j in range(4)]
    rel = {f"q{j}": set(rng.choice(docs, size=3, replace=False)) for j in range(4)}
    mrrs = [mrr_at_k(results, rel, k) for k in range(1, 16)]
    recalls = [recall_at_k(results, rel, k) for k in range(1, 16)]
    assert all(b >= a for a, b in zip(mrrs, mrrs[1:]))
    assert all(b >= a for a, b in zip(recalls, recalls[1:]))


def test_alignment_examples():
    x = np.array([[1.0, 2.0], [0.0, 0.0]])
    assert alignment(x, x) == 0.0
    assert alignment([[0.0, 0.0]], [[0.6, 0.8]]) == pytest.approx(1.0)
    assert alignment([[0.0, 0.0], [0.0, 0.0]], [[1.0, 0.0], [0.0, 2.0]]) == pytest.approx(2.5)
    with pytest.raises(DataError):
        alignment(np.zeros((0, 2)), np.zeros((0, 2)))


def test_uniformity_examples():
    assert uniformity(np.ones((4, 3))) == 0.0
    x = np.array([[0.6, 0.8]])
    assert uniformity(np.vstack([x, -x])) == pytest.approx(-8.0, abs=1e-12)
    with pytest.raises(DataError):
        uniformity(np.ones((1, 3)))


def test_uniformity_matches_pair_loop(rng):
    e = rng.normal(size=(7, 3))
    vals = [math.exp(-2 * np.sum((e[i] - e[j]) ** 2)) for i in range(7) for j in range(i + 1, 7)]
    assert uniformity(e) == pytest.approx(math.log(np.mean(vals)), rel=1e-12)


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 20), d=st.integers(2, 6))
@settings(max_examples=40, deadline=None)
def test_alignment_uniformity_rotation_invariant(seed, n, d):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    q = ortho_group.rvs(d, random_state=seed % (2**32 - 1))
    assert uniformity(x) <= 0.0
    assert alignment(x @ q, y @ q) == pytest.approx(alignment(x, y), rel=1e-9)
    assert uniformity(x @ q) == pytest.approx(uniformity(x), rel=1e-9, abs=1e-9)


def test_covariance_matches_numpy(rng):
    e = rng.normal(size=(50, 4))
    np.testing.assert_allclose(covariance_matrix(e), np.cov(e, rowvar=False), atol=1e-12)


def test_covariance_constant_and_duplicated():
    assert np.all(covariance_matrix(np.full((5, 3), 2.0)) == 0.0)
    corr, zero = correlation_from_covariance(covariance_matrix(np.full((5, 3), 2.0)))
    assert zero.all() and np.all(corr == 0.0)
    assert offdiag_mass(covariance_matrix(np.full((5, 3), 2.0))) == 0.0
    col = np.random.default_rng(0).normal(size=(30, 1))
    corr, _ = correlation_from_covariance(covariance_matrix(np.hstack([col, col])))
    assert corr[0, 1] == pytest.approx(1.0, abs=1e-12)
    assert offdiag_mass(covariance_matrix(np.hstack([col, col]))) == pytest.approx(1.0, abs=1e-12)


def test_offdiag_mass_independent_coordinates():
    e = np.random.default_rng(11).normal(size=(10000, 8))
    assert offdiag_mass(covariance_matrix(e)) < 0.05


def test_exact_retrieve_hand_scoring():
    res = exact_retrieve([[1.0, 0.0]], [[2.0, 1.0], [0.5, 3.0], [1.0, -1.0]], 3, "dot")
    assert res[0].doc_ids == ["0", "2", "1"]
    assert [s for _, s in res[0].hits] == [2.0, 1.0, 0.5]


def test_exact_retrieve_self_first_under_cosine(rng):
    corpus = rng.normal(size=(30, 5))
    res = exact_retrieve(corpus[[7]] * 3.0, corpus, 5, "cosine", doc_ids=[f"d{i}" for i in range(30)])
    assert res[0].doc_ids[0] == "d7"


def test_exact_retrieve_full_ranking_and_ties():
    res = exact_retrieve([[1.0]], [[1.0], [2.0], [1.0], [2.0]], 10)
    assert res[0].doc_ids == ["1", "3", "0", "2"]
    with pytest.raises(ConfigError):
        exact_retrieve([[1.0]], [[1.0]], 0)


def test_exact_retrieve_permutation_equivariant(rng):
    q, c = rng.normal(size=(6, 4)), rng.normal(size=(25, 4))
    ids = [f"d{i}" for i in range(25)]
    perm = rng.permutation(25)
    a = exact_retrieve(q, c, 25, doc_ids=ids)
    b = exact_retrieve(q, c[perm], 25, doc_ids=[ids[i] for i in perm])
    assert [r.doc_ids for r in a] == [r.doc_ids for r in b]


def test_exact_retrieve_matches_loop(rng):
    q, c = rng.normal(size=(4, 3)), rng.normal(size=(40, 3))
    res = exact_retrieve(q, c, 7, chunk_size=3)
    for qi, r in enumerate(res):
        scores = [(float(q[qi] @ c[j]), j) for j in range(40)]
        expect = [str(j) for _, j in sorted(scores, key=lambda t: (-t[0], t[1]))[:7]]
        assert r.doc_ids == expect


def test_report_json_and_rankings(tmp_path):
    rep = MetricReport("x", 4, {"mrr@10": 0.5})
    rep.to_json(tmp_path / "r.json")
    assert json.loads((tmp_path / "r.json").read_text())["metrics"] == {"mrr@10": 0.5}
    with pytest.raises(DataError):
        MetricReport("x", 4, {"bad": float("nan")})
    write_rankings_tsv([ranked("q", ["a", "b"])], tmp_path / "r.tsv")
    lines = (tmp_path / "r.tsv").read_text().splitlines()
    assert lines[0] == "query_id\tdoc_id\trank\tscore"
    assert lines[2].split("\t")[:3] == ["q", "b", "2"]
