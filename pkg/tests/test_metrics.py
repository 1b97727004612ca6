import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from gradrel.dataset import FeatureTable, PairSet
from gradrel.metrics import (
    RankedList,
    UndefinedCorrelation,
    average_precision,
    average_ranks,
    evaluate_retrieval,
    mean_ap,
    pearson,
    rank_by_similarity,
    rank_queries,
    recall_at_k,
    spearman,
)
from gradrel.model import DualEncoder, ProjectionHead


def ranked(n, relevant_ranks, qid="q"):
    items = [f"i{k}" for k in range(1, n + 1)]
    return RankedList(qid, items, {f"i{r}" for r in relevant_ranks})


# --------------------------------------------------------------------------- AP / R@k


def test_average_precision_examples():
    assert average_precision(ranked(5, [1])) == 1.0
    assert average_precision(ranked(5, [3])) == pytest.approx(1 / 3, abs=1e-15)
    assert average_precision(ranked(5, [1, 2])) == 1.0
    with pytest.raises(ValueError):
        average_precision(ranked(5, []))


def test_mean_ap_examples():
    assert mean_ap([ranked(5, [1], "a"), ranked(5, [3], "b")]) == pytest.approx(2 / 3, abs=1e-15)
    assert mean_ap([ranked(4, [1], str(i)) for i in range(3)]) == 1.0
    assert mean_ap([ranked(5, [5], str(i)) for i in range(4)]) == pytest.approx(1 / 5, abs=1e-15)
    with pytest.raises(ValueError):
        mean_ap([])


def test_recall_examples():
    assert recall_at_k(ranked(20, [7]), 10) == 1.0
    assert recall_at_k(ranked(20, [11]), 10) == 0.0
    assert recall_at_k(ranked(20, [4, 12]), 10) == 0.5
    assert recall_at_k(ranked(5, [5]), 10) == 1.0
    with pytest.raises(ValueError):
        recall_at_k(ranked(5, [1]), 0)


def test_ranked_list_invariants():
    with pytest.raises(ValueError):
        RankedList("q", ["a", "a"], {"a"})
    with pytest.raises(ValueError):
        RankedList("q", ["a", "b"], {"c"})


@pytest.mark.parametrize("n", [1, 2, 3, 4, 5, 6])
def test_exhaustive_rankings_match_oracle(n):
    items = [f"i{k}" for k in range(n)]
    subsets = [set(c) for r in range(1, n + 1) for c in itertools.combinations(items, r)]
    for perm in itertools.permutations(items):
        for rel in subsets[:: max(1, len(subsets) // 7)]:
            rl = RankedList("q", perm, rel)
            assert average_precision(rl) == pytest.approx(oracles.average_precision(perm, rel), abs=1e-15)
            for k in range(1, n + 2):
                assert recall_at_k(rl, k) == pytest.approx(oracles.recall_at_k(perm, rel, k), abs=1e-15)


@settings(max_examples=100)
@given(st.integers(3, 12), st.data())
def test_ap_invariant_below_lowest_relevant_and_monotone(n, data):
    perm = data.draw(st.permutations([f"i{k}" for k in range(n)]))
    rel = set(data.draw(st.lists(st.sampled_from(perm), min_size=1, max_size=n - 1, unique=True)))
    rl = RankedList("q", perm, rel)
    ap, rk = average_precision(rl), recall_at_k(rl, 3)
    assert 0 <= ap <= 1 and 0 <= rk <= 1
    last = max(perm.index(r) for r in rel)
    tail = data.draw(st.permutations(perm[last + 1:]))
    shuffled = RankedList("q", list(perm[: last + 1]) + list(tail), rel)
    assert average_precision(shuffled) == ap and recall_at_k(shuffled, 3) == rk
    # moving a relevant item up one rank never lowers AP
    for i in range(1, n):
        if perm[i] in rel:
            moved = list(perm)
            moved[i - 1], moved[i] = moved[i], moved[i - 1]
            assert average_precision(RankedList("q", moved, rel)) >= ap - 1e-15


# --------------------------------------------------------------------------- correlation


def test_spearman_examples():
    assert spearman([1, 2, 3], [10, 20, 30]).coefficient == pytest.approx(1.0, abs=1e-15)
    assert spearman([1, 2, 3], [3, 2, 1]).coefficient == pytest.approx(-1.0, abs=1e-15)
    assert spearman([1, 2, 3], [10, 20, 30]).p_value == 0.0


def test_pearson_examples():
    x = np.arange(10.0)
    assert pearson(x, 2 * x + 3).coefficient == pytest.approx(1.0, abs=1e-15)
    assert pearson(x, -x).coefficient == pytest.approx(-1.0, abs=1e-15)


@pytest.mark.parametrize("f", [spearman, pearson])
def test_constant_input_rejected(f):
    with pytest.raises(UndefinedCorrelation):
        f([1, 1, 1, 1], [1, 2, 3, 4])
    with pytest.raises(ValueError):
        f([1, 2], [1, 2])


@pytest.mark.parametrize("n", [5, 20, 50, 300])
def test_coefficients_match_textbook_oracles(n):
    rng = np.random.default_rng(n)
    x = rng.standard_normal(n)
    y = 0.4 * x + rng.standard_normal(n)
    y[:3] = y[3]  # ties
    assert pearson(x, y).coefficient == pytest.approx(oracles.pearson_r(x.tolist(), y.tolist()), abs=1e-12)
    assert spearman(x, y).coefficient == pytest.approx(oracles.spearman_rho(x.tolist(), y.tolist()), abs=1e-12)
    np.testing.assert_allclose(average_ranks(y), oracles.average_ranks(y.tolist()), atol=0)


def test_p_value_matches_scipy_t_distribution():
    from scipy import stats

    rng = np.random.default_rng(0)
    for n in (3, 8, 40, 500):
        x = rng.standard_normal(n)
        y = 0.2 * x + rng.standard_normal(n)
        res = pearson(x, y)
        t = res.coefficient * math.sqrt((n - 2) / (1 - res.coefficient**2))
        assert res.p_value == pytest.approx(2 * stats.t.sf(abs(t), n - 2), rel=1e-10, abs=1e-15)


@settings(max_examples=50)
@given(st.integers(0, 2**31 - 1))
def test_rank_and_affine_invariance(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal(15), rng.standard_normal(15)
    s = spearman(x, y).coefficient
    assert spearman(np.exp(x), y**3).coefficient == pytest.approx(s, abs=1e-12)
    r = pearson(x, y).coefficient
    assert pearson(3 * x - 1, 0.5 * y + 7).coefficient == pytest.approx(r, abs=1e-12)
    assert abs(r) <= 1 and abs(s) <= 1


# --------------------------------------------------------------------------- retrieval


def one_hot_setup(m=12):
    ids = [f"a{i:02d}" for i in range(m)]
    audio = FeatureTable(m, ids, np.eye(m))
    captions = FeatureTable(m, [f"c{i:02d}" for i in range(m)], np.eye(m))
    pairs = PairSet((f"c{i:02d}", f"a{i:02d}") for i in range(m))
    enc = DualEncoder(ProjectionHead(np.eye(m), np.zeros(m)), ProjectionHead(np.eye(m), np.zeros(m)))
    return enc, audio, captions, pairs


def test_identity_encoder_perfect_retrieval():
    enc, audio, captions, pairs = one_hot_setup()
    assert evaluate_retrieval(enc, audio, captions, pairs, 10) == (1.0, 1.0)


def test_constant_encoder_falls_back_to_id_order():
    _, audio, captions, pairs = one_hot_setup()
    m = 12
    const = DualEncoder(ProjectionHead(np.zeros((m, 3)), np.ones(3)), ProjectionHead(np.zeros((m, 3)), np.ones(3)))
    ranked_lists = rank_queries(const, audio, captions, pairs)
    assert all(r.items == tuple(audio.ids) for r in ranked_lists)
    m_ap, rec = evaluate_retrieval(const, audio, captions, pairs, 10)
    # caption ci's positive sits at rank i + 1
    assert m_ap == pytest.approx(np.mean([1 / (i + 1) for i in range(m)]), abs=1e-15)
    assert rec == pytest.approx(10 / 12, abs=1e-15)


def test_rank_by_similarity_tie_rule():
    order = rank_by_similarity([0.5, 0.9, 0.5, 0.1], ["z", "y", "b", "a"])
    assert order.tolist() == [1, 2, 0, 3]


def test_k_beyond_pool_warns(caplog):
    enc, audio, captions, pairs = one_hot_setup(4)
    with caplog.at_level("WARNING"):
        assert evaluate_retrieval(enc, audio, captions, pairs, 10) == (1.0, 1.0)
    assert "exceeds the candidate pool" in caplog.text


def test_random_ranking_expectation_formula():
    # single relevant among M uniformly ranked items: E[AP] = H_M / M
    m = 6
    aps = [oracles.average_precision(p, {"i0"}) for p in itertools.permutations([f"i{k}" for k in range(m)])]
    assert np.mean(aps) == pytest.approx(sum(1 / k for k in range(1, m + 1)) / m, abs=1e-15)
