import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from satfuse.errors import DimensionError, FormatError
from satfuse.metrics import (
    IoUAccumulator,
    average_precision,
    chamfer_ap,
    chamfer_distance,
    connected_components,
    evaluate_dirs,
    extract_instances,
    iou,
    match_instances,
    miou,
    skeletonize,
    write_report,
)

# ---------------------------------------------------------------------- IoU


def test_iou_perfect_disjoint_and_third():
    a = np.array([[1, 1, 0, 0]])
    assert iou(a, a, 1) == 1.0
    assert iou(a, np.array([[0, 0, 1, 1]]), 1) == 0.0
    # one shared cell out of three in the union
    assert abs(iou(np.array([[1, 1, 0]]), np.array([[0, 1, 1]]), 1) - 1 / 3) < 1e-9


def test_iou_empty_both_is_one():
    z = np.zeros((3, 3), dtype=int)
    assert iou(z, z, 2) == 1.0


def test_iou_shape_mismatch():
    with pytest.raises(DimensionError):
        iou(np.zeros((2, 2)), np.zeros((2, 3)), 1)


def test_miou_averages_foreground_classes():
    gt = np.array([[1, 2, 3, 0]])
    pred = np.array([[1, 2, 0, 0]])
    r = miou(pred, gt)
    assert r.per_class == {"divider": 1.0, "crossing": 1.0, "boundary": 0.0}
    assert abs(r.miou - 2 / 3) < 1e-12
    assert r.to_table() == pytest.approx({"Divider": 100.0, "Crossing": 100.0, "Boundary": 0.0, "All": 200 / 3})


def test_accumulator_pools_counts():
    acc = IoUAccumulator(classes=(1,))
    acc.add(np.array([1, 1]), np.array([1, 0]))  # 1/2
    acc.add(np.array([0, 0]), np.array([1, 1]))  # 0/2
    r = acc.report()
    assert r.per_class["divider"] == 0.25
    assert r.n_samples == 2


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_iou_bounds_and_symmetry(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.integers(0, 4, size=(2, 6, 7))
    for k in (1, 2, 3):
        v = iou(a, b, k)
        assert 0.0 <= v <= 1.0
        assert v == iou(b, a, k)


# --------------------------------------------------------------- chamfer / AP


def test_chamfer_distance_fixtures():
    line = [[0, 0], [1, 0], [2, 0]]
    assert chamfer_distance(line, line) == 0.0
    assert chamfer_distance(line, [[0, 1], [1, 1], [2, 1]]) == 1.0
    # directed means 1.0 and 0.5
    assert chamfer_distance([[0, 0], [2, 0]], [[0, 1]]) == pytest.approx(0.5 * (((1 + 5**0.5) / 2) + 1.0))


def test_chamfer_rejects_bad_polylines():
    with pytest.raises(FormatError):
        chamfer_distance([], [[0, 0]])
    with pytest.raises(FormatError):
        chamfer_distance([[0, 0, 0]], [[0, 0]])


def test_matching_is_one_to_one():
    gt = [[[0, 0], [1, 0]]]
    pred = [[[0, 0.1], [1, 0.1]], [[0, 0.2], [1, 0.2]]]
    m = match_instances(pred, gt, 1.0)
    assert [(i, j) for i, j, _ in m] == [(0, 0)]


def test_ap_fixtures():
    a = [[0, 0], [5, 0]]
    b = [[0, 10], [5, 10]]
    c = [[0, 20], [5, 20]]
    assert average_precision([a], [a], 0.5) == 1.0
    assert average_precision([b], [a], 0.5) == 0.0
    # three predictions, one correct -> precision 1/3 at recall 1
    assert abs(average_precision([a, b, c], [a], 0.5) - 1 / 3) < 1e-9
    assert average_precision([], [], 0.5) is None
    assert average_precision([a], [], 0.5) == 0.0
    assert average_precision([], [a], 0.5) == 0.0


def test_ap_uses_scores_for_ranking():
    a = [[0, 0], [5, 0]]
    b = [[0, 10], [5, 10]]
    assert average_precision([a, b], [a], 0.5, scores=[0.9, 0.1]) == 1.0
    assert average_precision([a, b], [a], 0.5, scores=[0.1, 0.9]) == 0.5


def test_chamfer_ap_over_classes_and_thresholds():
    a = [[0, 0], [5, 0]]
    far = [[0, 1.2], [5, 1.2]]  # 1.2 m off: matches only at 1.5
    assert chamfer_ap({1: [a]}, {1: [a]}) == 1.0
    assert chamfer_ap({1: [far]}, {1: [a]}) == pytest.approx(1 / 3)
    assert chamfer_ap({1: [a], 2: []}, {1: [a], 2: [a]}) == 0.5
    assert chamfer_ap({}, {}) == 0.0


# ----------------------------------------------------- instance extraction


def test_connected_components_8_connectivity():
    m = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 0], [1, 1, 0]])
    labels, n = connected_components(m)
    assert n == 2
    assert labels[0, 0] == labels[1, 1] != labels[3, 0]


def test_skeleton_of_thick_bar_is_thin():
    m = np.zeros((7, 15), dtype=bool)
    m[2:5, 1:14] = True
    sk = skeletonize(m)
    assert sk.any() and (sk <= m).all()
    assert sk.sum(axis=0).max() == 1


def test_extract_instances_in_metres():
    r = np.zeros((6, 10), dtype=int)
    r[2, 1:9] = 1
    inst = extract_instances(r, (0.5, 0.5), classes=(1,))
    assert len(inst[1]) == 1
    pts = inst[1][0]
    np.testing.assert_allclose(pts[:, 1], 1.25)


# ------------------------------------------------------------------- files


def test_evaluate_dirs_and_report(tmp_path):
    gt = np.array([[1, 1, 0], [3, 3, 2]], dtype=np.uint8)
    (tmp_path / "p").mkdir()
    (tmp_path / "g").mkdir()
    Image.fromarray(gt).save(tmp_path / "p" / "a_pred.png")
    Image.fromarray(gt).save(tmp_path / "g" / "a_gt.png")
    r = evaluate_dirs(tmp_path / "p", tmp_path / "g")
    assert r.miou == 1.0
    write_report(tmp_path / "r.json", r, {"note": "x"})
    d = json.loads((tmp_path / "r.json").read_text())
    assert d["miou"] == 1.0 and d["note"] == "x" and d["table"]["All"] == 100.0


def test_evaluate_dirs_errors(tmp_path):
    with pytest.raises(FormatError):
        evaluate_dirs(tmp_path, tmp_path)
    Image.fromarray(np.zeros((2, 2), dtype=np.uint8)).save(tmp_path / "a_pred.png")
    with pytest.raises(FormatError):
        evaluate_dirs(tmp_path, tmp_path)
