import functools

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import spearmanr

from ergoseg import metrics as M


# -- reference implementations -----------------------------------------------------------------
def ref_levenshtein(a, b):
    a, b = tuple(a), tuple(b)

    @functools.lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return d(len(a), len(b))


def runs(x):
    out, start = [], 0
    for t in range(1, len(x) + 1):
        if t == len(x) or x[t] != x[start]:
            out.append((int(x[start]), start, t))
            start = t
    return out


def ref_edit(pred, gt):
    a, b = [r[0] for r in runs(pred)], [r[0] for r in runs(gt)]
    return 100.0 * (1 - ref_levenshtein(a, b) / max(len(a), len(b)))


def ref_iou(p, g):
    inter = len(set(range(p[1], p[2])) & set(range(g[1], g[2])))
    union = len(set(range(p[1], p[2])) | set(range(g[1], g[2])))
    return inter / union


def ref_max_matching(pred, gt, thr):
    """Try every one-to-one assignment of predictions to ground-truth segments."""
    ps, gs = runs(pred), runs(gt)
    ok = [[p[0] == g[0] and ref_iou(p, g) >= thr for g in gs] for p in ps]

    @functools.lru_cache(maxsize=None)
    def best(i, used):
        if i == len(ps):
            return 0
        out = best(i + 1, used)
        for j in range(len(gs)):
            if ok[i][j] and not used >> j & 1:
                out = max(out, 1 + best(i + 1, used | 1 << j))
        return out

    tp = best(0, 0)
    return tp, len(ps) - tp, len(gs) - tp


def ref_ap(scores, positives):
    scores, positives = np.asarray(scores, float), np.asarray(positives, bool)
    total = 0.0
    prev_recall = 0.0
    for thr in sorted(set(scores.tolist()), reverse=True):
        sel = scores >= thr
        tp = np.sum(sel & positives)
        precision, recall = tp / np.sum(sel), tp / np.sum(positives)
        total += (recall - prev_recall) * precision
        prev_recall = recall
    return total


def ref_ranks(x):
    x = list(x)
    return np.array([1 + sum(y < v for y in x) + (sum(y == v for y in x) - 1) / 2 for v in x])


def ref_spearman(a, b):
    ra, rb = ref_ranks(a), ref_ranks(b)
    return float(np.corrcoef(ra, rb)[0, 1])


def random_labels(rng, T, classes, seg_max=6):
    out = []
    while len(out) < T:
        out += [int(rng.integers(classes))] * int(rng.integers(1, seg_max + 1))
    return np.array(out[:T])


# -- segment metrics ----------------------------------------------------------------------------
def test_segments_example():
    segs = M.labels_to_segments([0, 0, 1, 1, 1, 0])
    assert segs == [M.Segment(0, 0, 2), M.Segment(1, 2, 5), M.Segment(0, 5, 6)]
    assert M.labels_to_segments([]) == []


def test_edit_and_f1_match_references_on_random_cases():
    rng = np.random.default_rng(0)
    for _ in range(200):
        T = int(rng.integers(1, 40))
        classes = int(rng.integers(1, 5))
        gt = random_labels(rng, T, classes)
        pred = random_labels(rng, T, classes)
        assert M.levenshtein([s.label for s in M.labels_to_segments(pred)],
                             [s.label for s in M.labels_to_segments(gt)]) == ref_levenshtein(
            [r[0] for r in runs(pred)], [r[0] for r in runs(gt)])
        assert M.segmental_edit_score(pred, gt) == ref_edit(pred, gt)
        for thr in (0.1, 0.25, 0.5):
            assert M.f1_counts(pred, gt, thr) == ref_max_matching(pred, gt, thr)


def test_greedy_shortfall_case():
    # one prediction overlaps two same-label truths; greedy by IoU would take the wrong one
    gt = np.array([0] * 4 + [1] * 2 + [0] * 4 + [1] * 10)
    pred = np.array([0] * 10 + [1] * 10)
    assert M.f1_counts(pred, gt, 0.1) == ref_max_matching(pred, gt, 0.1)


@given(st.lists(st.integers(0, 3), min_size=1, max_size=30), st.data())
def test_f1_matches_exhaustive_property(gt, data):
    pred = data.draw(st.lists(st.integers(0, 3), min_size=len(gt), max_size=len(gt)))
    thr = data.draw(st.sampled_from([0.1, 0.25, 0.5, 0.75, 1.0]))
    assert M.f1_counts(pred, gt, thr) == ref_max_matching(np.array(pred), np.array(gt), thr)


def test_f1_counts_bookkeeping():
    tp, fp, fn = M.f1_counts([0, 0, 1, 1], [0, 0, 0, 1], 0.5)
    assert (tp, fp, fn) == (2, 0, 0)
    assert M.f1_from_counts(0, 0, 0) == 0.0
    assert M.f1_overlap([0, 1, 2], [0, 1, 2]) == 1.0


def test_f1_threshold_validation():
    with pytest.raises(ValueError):
        M.f1_counts([0], [0], 0.0)
    with pytest.raises(ValueError):
        M.f1_counts([0, 1], [0], 0.5)


def test_edit_examples():
    assert M.segmental_edit_score([0, 0, 1], [0, 0, 1]) == 100.0
    # segment strings "010" vs "01": one deletion over length 3
    assert M.segmental_edit_score([0, 1, 0], [0, 1, 1]) == pytest.approx(100 * (1 - 1 / 3))
    assert M.segmental_edit_score([], []) == 100.0


# -- frame metrics --------------------------------------------------------------------------------
def test_ap_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(200):
        n = int(rng.integers(1, 60))
        scores = rng.integers(0, 6, n) / 5.0 if rng.random() < 0.5 else rng.random(n)
        pos = rng.random(n) < 0.4
        if not pos.any():
            pos[0] = True
        assert M.average_precision(scores, pos) == pytest.approx(ref_ap(scores, pos), abs=1e-9)


def test_map_skips_absent_classes():
    probs = np.array([[0.9, 0.1, 0.0], [0.2, 0.8, 0.0], [0.6, 0.4, 0.0]])
    gt = np.array([0, 1, 0])
    assert M.mean_average_precision(probs, gt) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        M.average_precision([0.1, 0.2], [False, False])


def test_spearman_matches_references():
    rng = np.random.default_rng(2)
    for _ in range(200):
        n = int(rng.integers(2, 50))
        a = rng.integers(0, 8, n).astype(float)
        b = a + rng.normal(scale=3, size=n).round()
        if np.all(a == a[0]) or np.all(b == b[0]):
            assert M.spearman(a, b) is None
            continue
        np.testing.assert_allclose(M.midranks(a), ref_ranks(a))
        assert M.spearman(a, b) == pytest.approx(ref_spearman(a, b), abs=1e-9)
        assert M.spearman(a, b) == pytest.approx(spearmanr(a, b).statistic, abs=1e-9)


def test_spearman_edge_cases():
    assert M.spearman([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert M.spearman([1, 1, 1], [1, 2, 3]) is None
    with pytest.raises(ValueError):
        M.spearman([1.0], [2.0])


def test_confusion_matrix_counts():
    rng = np.random.default_rng(4)
    gt, pred = rng.integers(0, 4, 300), rng.integers(0, 4, 300)
    cm = M.confusion_matrix(pred, gt, 4)
    for i in range(4):
        for j in range(4):
            assert cm[i, j] == np.sum((gt == i) & (pred == j))
    rn = M.row_normalize(cm)
    np.testing.assert_allclose(rn.sum(1), 1.0)
    assert np.all(M.row_normalize(np.zeros((2, 2))) == 0)


def test_mse():
    assert M.mse([1, 2], [1, 4]) == 2.0


# -- reports --------------------------------------------------------------------------------------
def perfect_video(vid, T=40, classes=3, seed=0):
    rng = np.random.default_rng(seed)
    labels = random_labels(rng, T, classes)
    probs = np.eye(classes)[labels]
    target = rng.uniform(1, 15, T)
    return M.video_metrics(vid, labels=labels, probs=probs, target=target, risk=target.copy())


def test_perfect_predictions_score_perfectly():
    m = perfect_video("v")
    assert m.accuracy == 1.0 and m.edit == 100.0 and m.map == 1.0
    assert all(v == 1.0 for v in m.f1.values())
    assert m.mse == 0.0 and m.spearman == pytest.approx(1.0)


def test_report_round_trip():
    rep = M.MetricsReport("mtl-base", [perfect_video("a", seed=1), perfect_video("b", seed=2)])
    parsed = M.parse_report(rep.to_text())
    assert set(parsed) == {"a", "b", "mean", "std"}
    assert parsed["a"]["accuracy"] == 1.0
    assert parsed["mean"]["frames"] == 80
    for name, (mean, std) in rep.aggregate().items():
        assert parsed["mean"][name] == mean and parsed["std"][name] == std


def test_report_fields_per_variant():
    seg_only = M.video_metrics("v", labels=np.array([0, 1]), probs=np.eye(2))
    risk_only = M.video_metrics("v", target=np.array([1.0, 2.0]), risk=np.array([1.0, 3.0]))
    assert "mse" not in M.MetricsReport("stl-as", [seg_only]).fields()
    assert M.MetricsReport("stl-pa", [risk_only]).fields() == ["mse", "spearman"]
