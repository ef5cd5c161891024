import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from wspkit import metrics


def pairwise_auc(scores, labels):
    """O(n^2) oracle: fraction of (pos, neg) pairs ranked correctly, ties worth one half."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def test_auc_perfect_and_inverted():
    assert metrics.auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    assert metrics.auc([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0]) == 0.0
    assert metrics.auc([0.5] * 4, [1, 0, 1, 0]) == 0.5


def test_auc_needs_both_classes():
    with pytest.raises(ValueError):
        metrics.auc([0.1, 0.2], [1, 1])


def test_auc_matches_pairwise_oracle_on_random_instances():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 60))
        labels = rng.integers(0, 2, size=n)
        labels[0], labels[1] = 0, 1
        # coarse grid forces plenty of ties
        scores = np.round(rng.uniform(size=n), int(rng.integers(1, 4)))
        worst = max(worst, abs(metrics.auc(scores, labels) - pairwise_auc(scores, labels)))
    assert worst < 1e-12


def test_binary_metrics_confusion_counts():
    r = metrics.binary_metrics([0.9, 0.6, 0.4, 0.2, 0.5], [1, 0, 1, 0, 1])
    # threshold 0.5 is inclusive: predictions 1,1,0,0,1
    assert (r.tp, r.fp, r.tn, r.fn) == (2, 1, 1, 1)
    assert r.accuracy == pytest.approx(3 / 5)
    assert r.precision == pytest.approx(2 / 3)
    assert r.recall == pytest.approx(2 / 3)
    assert r.f1 == pytest.approx(2 / 3)


def test_binary_metrics_undefined_precision_reported_as_none():
    r = metrics.binary_metrics([0.1, 0.2], [1, 0])
    assert r.precision is None and r.f1 is None
    assert r.recall == 0.0
    r = metrics.binary_metrics([0.9, 0.8], [0, 0])
    assert r.recall is None and r.precision == 0.0


def test_evaluate_binary_skips_auc_for_single_class():
    assert metrics.evaluate_binary([0.7, 0.2], [1, 1]).auc is None
    assert metrics.evaluate_binary([0.7, 0.2], [1, 0]).auc == 1.0


# ---------------------------------------------------------------------------
# pose errors


def test_mpjpe_hand_fixture():
    gt = np.zeros((2, 3))
    pred = np.array([[3.0, 4.0, 0.0], [0.0, 0.0, -2.0]])
    m = metrics.mpjpe(pred, gt)
    assert m.total == 3.5  # (5 + 2) / 2
    assert (m.x, m.y, m.z) == (1.5, 2.0, 1.0)


def test_mpjpe_respects_validity():
    gt = np.zeros((1, 3, 3))
    pred = np.array([[[1.0, 0, 0], [0, 10.0, 0], [0, 0, 100.0]]])
    valid = np.array([[True, False, True]])
    m = metrics.mpjpe(pred, gt, valid)
    assert m.total == 50.5
    assert (m.x, m.y, m.z) == (0.5, 0.0, 50.0)
    with pytest.raises(ValueError):
        metrics.mpjpe(pred, gt, np.zeros((1, 3), bool))


def test_mpjpe_shape_mismatch():
    with pytest.raises(ValueError):
        metrics.mpjpe(np.zeros((3, 3)), np.zeros((4, 3)))


def _random_pose(rng, j=17):
    return rng.normal(0, 300, size=(j, 3))


def test_pa_mpjpe_zero_for_similarity_transforms():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(200):
        gt = _random_pose(rng)
        rot = Rotation.random(random_state=rng).as_matrix()
        pred = rng.uniform(0.3, 3.0) * gt @ rot.T + rng.normal(0, 1000, size=3)
        worst = max(worst, metrics.pa_mpjpe(pred, gt))
    assert worst < 1e-9


def test_pa_mpjpe_does_not_reflect():
    gt = _random_pose(np.random.default_rng(0))
    mirrored = gt * np.array([-1.0, 1.0, 1.0])
    # a reflection is not reachable by a proper rotation, so some error remains
    assert metrics.pa_mpjpe(mirrored, gt) > 1.0


def test_pa_mpjpe_below_mpjpe_near_alignment():
    rng = np.random.default_rng(11)
    for _ in range(200):
        gt = _random_pose(rng)
        pred = gt + rng.normal(0, rng.uniform(1, 80), size=gt.shape) + rng.normal(0, 200, size=3)
        assert metrics.pa_mpjpe(pred, gt) <= metrics.mpjpe(pred, gt).total + 1e-9


def test_pa_mpjpe_can_exceed_mpjpe():
    # Procrustes minimises squared error, not mean distance, so one large outlier can make the
    # aligned mean distance worse than the raw one.
    # (found by random search over single-outlier poses, then frozen)
    gt = np.array([[-101.0, 21, 120], [14, -23, 5], [-6, 262, -38], [71, -150, -191], [-219, -81, -161],
                   [30, 130, 48]])
    pred = gt.copy()
    pred[3] = [-170.0, 220, 263]
    assert metrics.mpjpe(pred, gt).total == pytest.approx(np.linalg.norm([241, 370, 454]) / 6)
    assert metrics.pa_mpjpe(pred, gt) > metrics.mpjpe(pred, gt).total + 50


def test_pa_mpjpe_degenerate():
    gt = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
    with pytest.raises(metrics.DegeneratePoseError):
        metrics.pa_mpjpe(gt, gt)


def test_pck3d_threshold_is_strict():
    gt = np.zeros((4, 3))
    pred = np.array([[99.0, 0, 0], [100.0, 0, 0], [0, 150.0, 0], [0, 0, 10.0]])
    assert metrics.pck3d(pred, gt, 100.0) == 50.0
    assert metrics.pck3d(pred, gt, 150.0) == 75.0


def test_evaluate_poses_table():
    rng = np.random.default_rng(0)
    gt = rng.normal(0, 200, size=(5, 17, 3))
    res = metrics.evaluate_poses(gt + 20.0, gt)
    assert res.mpjpe_total == pytest.approx(20 * np.sqrt(3))
    assert res.pa_mpjpe < 1e-9
    assert set(res.pck3d) == set(metrics.PCK_THRESHOLDS_MM)
    assert all(v == 100.0 for v in res.pck3d.values())
    text = res.format()
    assert "PA-MPJPE" in text and "150mm" in text
    assert res.to_record()["pck3d"]["100"] == 100.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=2, max_size=40))
def test_auc_property_matches_oracle(data):
    scores = [s for s, _ in data]
    labels = [y for _, y in data]
    if len(set(labels)) < 2:
        return
    assert abs(metrics.auc(scores, labels) - pairwise_auc(scores, labels)) < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_auc_complement_under_negation(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=30)
    labels[:2] = [0, 1]
    scores = rng.uniform(size=30)
    assert metrics.auc(-scores, labels) == pytest.approx(1 - metrics.auc(scores, labels), abs=1e-12)


# ---------------------------------------------------------------------------
# relative-depth report


def test_rd_protocol_report_buckets():
    scores = np.array([0.9, 0.2, 0.7, 0.4, 0.8, 0.3])
    labels = np.array([1, 0, 1, 0, 1, 0])
    ds = np.array([0.05, 0.05, 0.4, 0.4, 0.9, 0.9])
    masked = np.array([False, False, False, False, True, True])
    cells = metrics.rd_protocol_report(scores, labels, ds, masked)
    plain = {c.threshold: c for c in cells if c.protocol == "plain"}
    assert plain[1.0].n == 4 and plain[0.5].n == 4 and plain[0.3].n == 2 and plain[0.1].n == 2
    masked_cells = {c.threshold: c for c in cells if c.protocol == "ankle_masked"}
    assert masked_cells[1.0].n == 2 and masked_cells[0.5].result is None
    text = metrics.format_rd_report(cells)
    assert "n/a" in text
    recs = metrics.rd_report_records(cells)
    assert recs[0]["protocol"] == "plain" and recs[0]["auc"] == 1.0


# ---------------------------------------------------------------------------
# independent oracles


def test_mpjpe_matches_loop_oracle():
    rng = np.random.default_rng(21)
    gt, pred = rng.normal(0, 300, size=(17, 3)), rng.normal(0, 300, size=(17, 3))
    dists = [sum((pred[j, a] - gt[j, a]) ** 2 for a in range(3)) ** 0.5 for j in range(17)]
    m = metrics.mpjpe(pred, gt)
    assert m.total == pytest.approx(sum(dists) / 17, rel=1e-12)
    assert m.z == pytest.approx(sum(abs(pred[j, 2] - gt[j, 2]) for j in range(17)) / 17, rel=1e-12)


def test_mpjpe_uniform_offset():
    gt = np.random.default_rng(0).normal(size=(17, 3))
    m = metrics.mpjpe(gt + [3.0, 4.0, 0.0], gt)
    assert (m.total, m.x, m.y, m.z) == pytest.approx((5.0, 3.0, 4.0, 0.0))


def _brute_force_pa(pred, gt):
    """Search rotations directly: random starts plus local refinement; closed-form scale and translation."""
    from scipy.optimize import minimize

    p0, g0 = pred - pred.mean(0), gt - gt.mean(0)

    def sq_err(rotvec):
        pr = p0 @ Rotation.from_rotvec(rotvec).as_matrix().T
        s = max(0.0, (pr * g0).sum() / (p0 * p0).sum())
        return ((s * pr - g0) ** 2).sum(), s

    starts = Rotation.random(400, random_state=0).as_rotvec()
    best = min(starts, key=lambda r: sq_err(r)[0])
    res = minimize(lambda r: sq_err(r)[0], best, method="Nelder-Mead",
                   options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 20000})
    _, s = sq_err(res.x)
    aligned = s * p0 @ Rotation.from_rotvec(res.x).as_matrix().T + gt.mean(0)
    return np.linalg.norm(aligned - gt, axis=1).mean()


def test_pa_mpjpe_mirrored_matches_brute_force():
    gt = _random_pose(np.random.default_rng(5), j=8)
    mirrored = gt * np.array([-1.0, 1.0, 1.0])
    got = metrics.pa_mpjpe(mirrored, gt)
    assert got > 1.0
    assert got == pytest.approx(_brute_force_pa(mirrored, gt), rel=1e-4)


def test_pa_mpjpe_collinear_ground_truth_is_an_error():
    gt = np.array([[0.0, 0, 0], [1, 1, 1], [2, 2, 2], [3, 3, 3]])
    with pytest.raises(metrics.DegeneratePoseError):
        metrics.pa_mpjpe(np.random.default_rng(0).normal(size=(4, 3)), gt)
    with pytest.raises(metrics.DegeneratePoseError):
        metrics.pa_mpjpe(gt[:2], gt[:2])


def test_pa_mpjpe_scores_collapsed_prediction():
    gt = _random_pose(np.random.default_rng(6))
    collapsed = np.zeros_like(gt)
    # the best similarity fit of a single point is the ground-truth centroid
    want = np.linalg.norm(gt - gt.mean(0), axis=1).mean()
    assert metrics.pa_mpjpe(collapsed, gt) == pytest.approx(want)
