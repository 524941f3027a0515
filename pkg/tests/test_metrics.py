"""Test retrieval metrics against hand-worked cases and a brute-force oracle."""
from fractions import Fraction
import math

from hypothesis import assume, given, settings, strategies as st
import numpy as np
import pytest

from reid_robustness.errors import (
    AllQueriesSkippedError,
    NonFiniteError,
    NoValidMatchError,
    UsageError,
    ZeroVarianceError,
)
from reid_robustness.metrics import (
    ImageMeta,
    evaluate,
    evaluate_query,
    pairwise_distances,
    pearson,
    valid_mask,
)


def oracle(dist, qmeta, gmeta, K, protocol="single"):
    """Straight loop implementation with exact fractions."""
    aps, inps, firsts = [], [], []
    for qi, q in enumerate(qmeta):
        order = sorted(range(len(gmeta)), key=lambda gi: (dist[qi][gi], gi))
        ranked = []
        for gi in order:
            g = gmeta[gi]
            if g.junk:
                continue
            if protocol == "single" and g.person_id == q.person_id and g.camera_id == q.camera_id:
                continue
            if protocol == "sysu" and q.camera_id == 3 and g.camera_id == 2:
                continue
            ranked.append(g.person_id == q.person_id)
        hits = [r + 1 for r, match in enumerate(ranked) if match]
        if not hits:
            continue
        aps.append(sum(Fraction(k + 1, r) for k, r in enumerate(hits)) / len(hits))
        inps.append(Fraction(len(hits), hits[-1]))
        firsts.append(hits[0])
    n = len(aps)
    if n == 0:
        return None
    cmc = [Fraction(sum(1 for f in firsts if f <= k), n) for k in range(1, K + 1)]
    return sum(aps) / n, sum(inps) / n, cmc, n


def test_single_query_by_hand():
    result = evaluate_query([0.1, 0.2, 0.3, 0.4], [False, True, False, True])
    assert result.ap == pytest.approx(0.5)
    assert result.inp == pytest.approx(0.5)
    assert result.first_match_rank == 2
    assert result.inp_exact == Fraction(1, 2)
    assert result.np_exact == Fraction(1, 2)
    assert result.negative_penalty == pytest.approx(0.5)


@pytest.mark.parametrize(
    "relevance, ap, inp",
    [
        ([True, False, True, False, False], 5 / 6, 2 / 3),
        ([False, False, False, True, True], 0.325, 0.4),
    ],
)
def test_two_match_rankings(relevance, ap, inp):
    result = evaluate_query([0.1, 0.2, 0.3, 0.4, 0.5], relevance)
    assert result.ap == pytest.approx(ap, abs=1e-12)
    assert result.inp == pytest.approx(inp, abs=1e-12)


def test_two_query_means():
    q = [ImageMeta(1, 0), ImageMeta(2, 0)]
    g = [ImageMeta(1, 1), ImageMeta(2, 1), ImageMeta(3, 1), ImageMeta(2, 1)]
    dist = np.array([[0.1, 0.2, 0.3, 0.4], [0.2, 0.1, 0.4, 0.3]])
    summary = evaluate(dist, q, g, K=3, protocol="regdb")
    assert [r.ap for r in summary.per_query] == pytest.approx([1.0, 5 / 6])
    assert summary.mAP == pytest.approx(11 / 12, abs=1e-12)
    assert summary.mINP == pytest.approx(5 / 6, abs=1e-12)
    assert summary.cmc == (1.0, 1.0, 1.0)


def test_perfect_ranking():
    result = evaluate_query([0.1, 0.2, 0.9], [True, True, False])
    assert result.ap == 1.0
    assert result.inp == 1.0
    assert result.negative_penalty == 0.0


def test_ties_keep_gallery_order():
    result = evaluate_query([0.5, 0.5, 0.5], [False, False, True])
    assert result.first_match_rank == 3
    assert result.ap == pytest.approx(1 / 3)


def test_invalid_entries_leave_the_ranking():
    result = evaluate_query(
        [0.1, 0.2, 0.3], [True, False, True], valid=[False, True, True]
    )
    assert result.n_matches == 1
    assert result.first_match_rank == 2
    assert result.hardest_rank == 2


def test_no_match():
    with pytest.raises(NoValidMatchError):
        evaluate_query([0.1, 0.2], [False, False])


def test_same_camera_matches_are_ignored():
    q = [ImageMeta(1, 0)]
    g = [ImageMeta(1, 0), ImageMeta(2, 1), ImageMeta(1, 1)]
    summary = evaluate(np.array([[0.0, 0.1, 0.2]]), q, g, K=3)
    assert summary.cmc == (0.0, 1.0, 1.0)
    assert summary.mAP == pytest.approx(0.5)
    assert summary.rank(2) == 1.0


def test_junk_is_dropped():
    q = [ImageMeta(1, 0)]
    g = [ImageMeta(3, 1, junk=True), ImageMeta(1, 1)]
    assert evaluate(np.array([[0.0, 0.1]]), q, g, K=1).mAP == 1.0


def test_regdb_keeps_same_camera():
    mask = valid_mask(ImageMeta(1, 0), [ImageMeta(1, 0), ImageMeta(2, 0)], "regdb")
    assert mask.tolist() == [True, True]


def test_sysu_indoor_rule():
    gallery = [ImageMeta(1, 1), ImageMeta(1, 2), ImageMeta(1, 4)]
    assert valid_mask(ImageMeta(1, 3), gallery, "sysu").tolist() == [True, False, True]
    assert valid_mask(ImageMeta(1, 6), gallery, "sysu").tolist() == [True, True, True]


def test_skipped_queries_are_reported():
    q = [ImageMeta(1, 0), ImageMeta(9, 0)]
    g = [ImageMeta(1, 1), ImageMeta(2, 1)]
    summary = evaluate(np.zeros((2, 2)), q, g, K=2)
    assert summary.skipped == (1,)
    assert summary.n_valid == 1


def test_all_queries_skipped():
    with pytest.raises(AllQueriesSkippedError):
        evaluate(np.zeros((1, 1)), [ImageMeta(1, 0)], [ImageMeta(2, 1)], K=1)


def test_bad_inputs():
    q = [ImageMeta(1, 0)]
    g = [ImageMeta(1, 1)]
    with pytest.raises(UsageError):
        evaluate(np.zeros((2, 1)), q, g)
    with pytest.raises(NonFiniteError):
        evaluate(np.array([[np.nan]]), q, g)
    with pytest.raises(UsageError):
        evaluate(np.zeros((1, 1)), q, g, K=0)
    with pytest.raises(UsageError):
        evaluate(np.zeros((1, 1)), q, g, protocol="market")
    with pytest.raises(UsageError):
        ImageMeta(-1, 0)


@st.composite
def retrieval_problems(draw):
    n_q = draw(st.integers(1, 8))
    n_g = draw(st.integers(1, 20))
    meta = st.builds(
        ImageMeta,
        person_id=st.integers(0, 2),
        camera_id=st.integers(0, 3),
        junk=st.booleans(),
    )
    qmeta = draw(st.lists(meta, min_size=n_q, max_size=n_q))
    gmeta = draw(st.lists(meta, min_size=n_g, max_size=n_g))
    # small integer distances give plenty of ties
    dist = draw(
        st.lists(
            st.lists(st.integers(0, 4), min_size=n_g, max_size=n_g),
            min_size=n_q,
            max_size=n_q,
        )
    )
    protocol = draw(st.sampled_from(["single", "regdb", "sysu"]))
    return np.array(dist, dtype=np.float64), qmeta, gmeta, protocol


@settings(max_examples=200, deadline=None)
@given(problem=retrieval_problems(), K=st.integers(1, 10))
def test_matches_oracle(problem, K):
    dist, qmeta, gmeta, protocol = problem
    expected = oracle(dist.tolist(), qmeta, gmeta, K, protocol)
    assume(expected is not None)
    expected_map, expected_minp, expected_cmc, n = expected
    summary = evaluate(dist, qmeta, gmeta, K, protocol=protocol)
    assert summary.n_valid == n
    assert summary.mAP == pytest.approx(float(expected_map), abs=1e-12)
    assert summary.mINP == pytest.approx(float(expected_minp), abs=1e-12)
    assert summary.cmc == pytest.approx([float(c) for c in expected_cmc], abs=1e-12)
    assert all(a <= b for a, b in zip(summary.cmc, summary.cmc[1:]))
    assert 0.0 < summary.mINP <= 1.0
    assert 0.0 < summary.mAP <= 1.0


@settings(max_examples=100, deadline=None)
@given(problem=retrieval_problems(), K=st.integers(1, 10))
def test_increasing_transform_keeps_metrics(problem, K):
    dist, qmeta, gmeta, protocol = problem
    assume(oracle(dist.tolist(), qmeta, gmeta, K, protocol) is not None)
    summary = evaluate(dist, qmeta, gmeta, K, protocol=protocol)
    assert evaluate(2 * dist**3 + 7, qmeta, gmeta, K, protocol=protocol) == summary


@st.composite
def untied_problems(draw):
    n_q = draw(st.integers(1, 6))
    n_g = draw(st.integers(2, 15))
    meta = st.builds(ImageMeta, person_id=st.integers(0, 2), camera_id=st.integers(0, 3))
    qmeta = draw(st.lists(meta, min_size=n_q, max_size=n_q))
    gmeta = draw(st.lists(meta, min_size=n_g, max_size=n_g))
    dist = [draw(st.permutations(range(n_g))) for _ in range(n_q)]
    order = draw(st.permutations(range(n_g)))
    return np.array(dist, dtype=np.float64), qmeta, gmeta, order


@settings(max_examples=100, deadline=None)
@given(problem=untied_problems(), K=st.integers(1, 10))
def test_gallery_order_does_not_matter_without_ties(problem, K):
    dist, qmeta, gmeta, order = problem
    assume(oracle(dist.tolist(), qmeta, gmeta, K) is not None)
    summary = evaluate(dist, qmeta, gmeta, K)
    shuffled = evaluate(dist[:, order], qmeta, [gmeta[i] for i in order], K)
    assert shuffled == summary


def test_workers_do_not_change_results():
    rng = np.random.default_rng(0)
    qmeta = [ImageMeta(i % 7, 0) for i in range(40)]
    gmeta = [ImageMeta(i % 7, 1 + i % 3) for i in range(120)]
    dist = rng.random((40, 120))
    single = evaluate(dist, qmeta, gmeta, workers=1)
    pooled = evaluate(dist, qmeta, gmeta, workers=4)
    assert single == pooled
    assert single.mAP == pooled.mAP


def test_pairwise_distances():
    q = np.array([[1.0, 0.0], [0.0, 2.0]])
    g = np.array([[3.0, 0.0], [1.0, 1.0]])
    cosine = pairwise_distances(q, g, "cosine")
    assert cosine[0, 0] == pytest.approx(0.0)
    assert cosine[0, 1] == pytest.approx(2 - math.sqrt(2))
    euclid = pairwise_distances(q, g, "euclidean")
    assert euclid[0, 0] == pytest.approx(2.0)
    assert euclid[1, 1] == pytest.approx(math.sqrt(2))
    with pytest.raises(UsageError):
        pairwise_distances(q, np.ones((2, 3)))
    with pytest.raises(UsageError):
        pairwise_distances(q, g, "manhattan")


def test_pearson():
    assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert pearson([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8)
    x, y = [1, 2, 3, 4], [1.1, 1.9, 3.2, 3.8]
    assert pearson(x, y) == pytest.approx(np.corrcoef(x, y)[0, 1], abs=1e-12)
    with pytest.raises(ZeroVarianceError):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(UsageError):
        pearson([1], [1])
