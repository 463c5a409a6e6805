import itertools

import numpy as np
import pytest
from sklearn.metrics import adjusted_rand_score

from solar.providers import SynthConfig, concept_dictionaries, synth_generate
from solar.segmentation import (
    AdaptiveSegmenter, MeanLinkageClustering, adaptive_segment, linkage_sequence,
    mean_linkage_cluster, score_segments, split_by_threshold,
)


def brute_force_mean_linkage(X, t):
    """Textbook agglomeration: recompute every cluster-pair mean distance each round."""
    X = np.asarray(X, dtype=float)
    U = X / np.linalg.norm(X, axis=1, keepdims=True)
    D = 1.0 - np.clip(U @ U.T, -1, 1)
    clusters = [[i] for i in range(len(X))]
    while len(clusters) > 1:
        best = None
        for a, b in itertools.combinations(range(len(clusters)), 2):
            d = np.mean([D[i, j] for i in clusters[a] for j in clusters[b]])
            key = (d, min(clusters[a]), min(clusters[b]))
            if best is None or key < best[0]:
                best = (key, a, b)
        (d, _, _), a, b = best
        if not d < t:
            break
        clusters[a] = sorted(clusters[a] + clusters[b])
        del clusters[b]
    owner = {i: min(c) for c in clusters for i in c}
    relabel = {}
    return np.array([relabel.setdefault(owner[i], len(relabel)) for i in range(len(X))])


def test_linkage_matches_brute_force_random():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 11))
        X = rng.standard_normal((n, 4))
        t = float(rng.uniform(0.1, 1.5))
        np.testing.assert_array_equal(mean_linkage_cluster(X, t), brute_force_mean_linkage(X, t), err_msg=f"seed {seed}")


def test_identical_patches_single_cluster():
    X = np.tile([1.0, 2.0, 3.0], (6, 1))
    for t in (1e-6, 0.1, 0.9):
        assert mean_linkage_cluster(X, t).max() == 0


def test_orthogonal_groups():
    X = np.array([[1, 0], [1, 0], [0, 1], [0, 1], [1, 0]], dtype=float)
    np.testing.assert_array_equal(mean_linkage_cluster(X, 0.5), [0, 0, 1, 1, 0])


def test_merge_distances_non_decreasing(rng):
    merges = linkage_sequence(rng.standard_normal((12, 5)))
    d = [m[2] for m in merges]
    assert all(b >= a - 1e-12 for a, b in zip(d, d[1:]))
    assert len(merges) == 11


def test_trace_uniform_image():
    seg = adaptive_segment(np.ones((16, 4)))
    ts = [round(r["t"], 10) for r in seg.trace]
    assert ts == [0.45, 0.4, 0.35, 0.3, 0.25]
    assert all(r["segments"] == 1 for r in seg.trace)
    assert seg.n_segments == 1 and seg.threshold_used == pytest.approx(0.25)


def _planted(sizes, noise, seed):
    rng = np.random.default_rng(seed)
    dirs = np.eye(8)
    X = np.concatenate([dirs[k] + noise * rng.standard_normal((s, 8)) for k, s in enumerate(sizes)])
    y = np.repeat(np.arange(len(sizes)), sizes)
    return X, y


def test_trace_planted_three_blocks():
    X, y = _planted([20, 24, 20], 0.02, 0)
    seg = adaptive_segment(X)
    assert len(seg.trace) == 1 and seg.n_segments == 3
    assert adjusted_rand_score(y, seg.labels) == 1.0


def test_trace_seven_clusters_raises_threshold():
    X, _ = _planted([3] * 7, 0.01, 1)
    seg = adaptive_segment(X)
    assert seg.trace[0]["segments"] == 7
    assert seg.trace[1]["t"] == pytest.approx(0.5)


def test_planted_blocks_ari():
    scores = []
    for seed in range(10):
        cfg = SynthConfig(shared_concepts_per_pair=2, unique_concepts_per_modality=1, noise_sigma=0.05, seed=seed)
        student, _ = concept_dictionaries(cfg)
        s = synth_generate(cfg, 1)[0]
        truth = np.argmax(np.abs(s.image.locals @ student.T), axis=1)
        scores.append(adjusted_rand_score(truth, adaptive_segment(s.image.locals).labels))
    assert min(scores) >= 0.9


def test_segments_partition(rng):
    seg = adaptive_segment(rng.standard_normal((30, 6)))
    idx = np.sort(np.concatenate(seg.segments))
    np.testing.assert_array_equal(idx, np.arange(30))
    assert all(len(s) for s in seg.segments)


def test_score_segments_and_split():
    X = np.array([[1, 0], [1, 0], [0, 1]], dtype=float)
    seg = adaptive_segment(X, r_max=1.0)
    assert score_segments(seg, [0.2, 0.4, 0.9]) == pytest.approx([0.3, 0.9])
    s = score_segments(seg, [0.25, 0.75, 0.9])
    np.testing.assert_array_equal(s, [0.5, 0.9])
    assert split_by_threshold(seg, 0.5) == ([1], [0])  # equality counts as difference
    assert split_by_threshold(seg, 0.1) == ([0, 1], [])
    perm = adaptive_segment(X[[1, 0, 2]], r_max=1.0)
    np.testing.assert_array_equal(score_segments(perm, [0.75, 0.25, 0.9]), s)


def test_split_needs_scores():
    seg = adaptive_segment(np.eye(3))
    with pytest.raises(ValueError):
        split_by_threshold(seg, 0.5)


def test_estimators():
    X, y = _planted([5, 5], 0.01, 3)
    m = MeanLinkageClustering(0.5).fit(X)
    assert m.n_clusters_ == 2
    np.testing.assert_array_equal(m.fit_predict(X), m.labels_)
    a = AdaptiveSegmenter().fit(X)
    assert adjusted_rand_score(y, a.labels_) == 1.0 and a.threshold_ == 0.45
