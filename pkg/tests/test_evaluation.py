import json

import numpy as np
import pytest

from solar.evaluation import (
    MetricsReport, aggregate, bootstrap_ci, evaluate_embeddings, precision, precision_indicators,
    recall_at_k,
)
from solar.numerics import pairwise_cosine
from solar.providers import BenchmarkTriplet


def ranking_oracle(Q, targets, P, pool_ids, ks):
    hits = {k: 0 for k in ks}
    for q, t in zip(Q, targets):
        sims = pairwise_cosine(q[None], P)[0]
        order = sorted(range(len(pool_ids)), key=lambda j: (-sims[j], j))
        rank = [pool_ids[j] for j in order].index(t)
        for k in ks:
            hits[k] += rank < k
    return {k: 100.0 * hits[k] / len(targets) for k in ks}


def test_recall_trivial(rng):
    q = rng.standard_normal((1, 4))
    assert recall_at_k(q, ["t"], q, ["t"])[1] == 100.0
    pool = np.eye(4)
    assert recall_at_k(pool[:1], ["p0"], pool, ["p0", "p1", "p2", "p3"]) == {1: 100.0, 5: 100.0, 10: 100.0}


@pytest.mark.parametrize("seed", range(3))
def test_recall_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    P = rng.standard_normal((300, 6))
    pool_ids = [f"p{i}" for i in range(300)]
    targets = [pool_ids[i] for i in rng.integers(0, 300, 100)]
    Q = np.stack([P[int(t[1:])] + 1.5 * rng.standard_normal(6) for t in targets])
    got = recall_at_k(Q, targets, P, pool_ids)
    assert got == ranking_oracle(Q, targets, P, pool_ids, (1, 5, 10))
    assert 0 < got[1] < got[10] < 100


def test_recall_ties_pessimistic():
    P = np.array([[1.0, 0], [1, 0], [0, 1]])
    assert recall_at_k(P[:1], ["b"], P, ["a", "b", "c"], ks=(1, 2)) == {1: 0.0, 2: 100.0}


def test_recall_missing_target(rng):
    with pytest.raises(KeyError):
        recall_at_k(rng.standard_normal((1, 2)), ["zz"], rng.standard_normal((2, 2)), ["a", "b"])


def _embeds(**pairs):
    return {k: np.asarray(v, dtype=float) for k, v in pairs.items()}


def _angle(c):
    return [c, np.sqrt(1 - c * c)]


def test_precision_rules():
    e = _embeds(f=[1, 0], pos=_angle(0.9), neg=_angle(0.5), tie_p=_angle(0.7), tie_n=_angle(0.7))
    T = BenchmarkTriplet
    assert precision_indicators([T("f", "pos", "neg")], e).tolist() == [1.0]
    assert precision_indicators([T("f", "tie_p", "tie_n")], e).tolist() == [0.0]
    e2 = _embeds(f=[1, 0, 0], fv=[0, 1, 0], pos=[0.6, 0, 0.8], neg=[0, 0.7, np.sqrt(0.51)])
    assert precision_indicators([T("f", "pos", "neg", "fv")], e2).tolist() == [0.0]
    # without the variant rule the same triplet would count
    assert precision_indicators([T("f", "pos", "neg")], e2).tolist() == [1.0]
    assert precision([T("f", "pos", "neg"), T("f", "tie_p", "tie_n")], e) == 50.0


def test_precision_matches_oracle(rng):
    ids = [f"s{i}" for i in range(60)]
    e = {i: rng.standard_normal(5) for i in ids}
    trips = [BenchmarkTriplet(*rng.choice(ids, 3, replace=False)) for _ in range(100)]
    cos = lambda a, b: float(e[a] @ e[b] / np.linalg.norm(e[a]) / np.linalg.norm(e[b]))
    want = [float(cos(t.positive, t.anchor) > cos(t.negative, t.anchor)) for t in trips]
    assert precision_indicators(trips, e).tolist() == want


def test_precision_missing_embedding():
    with pytest.raises(KeyError, match="'b'"):
        precision([BenchmarkTriplet("a", "b", "c")], {"a": np.ones(2)})


def test_aggregate_table_arithmetic():
    r = aggregate((77.57, 97.20, 97.66), 84.58)
    assert f"{r.mR:.2f}" == "90.81" and f"{r.avg:.2f}" == "87.69"
    assert "87.69" in r.to_table("SOLAR-C")
    assert aggregate({1: 100, 5: 100, 10: 100}, 100).avg == 100
    assert aggregate((0, 0, 0), 0).avg == 0


def test_report_serialisation():
    r = aggregate((10.0, 20.0, 30.0), 40.0, n_queries=5)
    d = json.loads(r.to_json())
    assert d["mR"] == 20.0 and d["avg"] == 30.0 and d["n_queries"] == 5
    assert MetricsReport(**d) == r
    lines = r.to_table("m").splitlines()
    assert lines[0].split() == ["Method", "R@1", "R@5", "R@10", "mR", "Prec.", "Avg."]


def test_bootstrap():
    assert bootstrap_ci(np.ones(30)) == (100.0, 100.0)
    rng = np.random.default_rng(0)
    for n in (5, 37, 200):
        x = (rng.random(n) < 0.7).astype(float)
        lo, hi = bootstrap_ci(x, seed=3)
        assert lo <= 100 * x.mean() <= hi
        assert (lo, hi) == bootstrap_ci(x, seed=3)
    with pytest.raises(ValueError):
        bootstrap_ci([1.0])


def test_evaluate_embeddings(rng):
    ids = [f"s{i}" for i in range(20)]
    e = {i: rng.standard_normal(4) for i in ids}
    trips = [BenchmarkTriplet(ids[i], ids[i + 10], ids[(i + 5) % 10]) for i in range(5)]
    rep, ind = evaluate_embeddings(e, trips, ids[5:], bootstrap_iters=200)
    assert rep.n_queries == 5 and rep.precision == 100 * ind.mean()
    assert rep.ci_lower <= rep.precision <= rep.ci_upper
