import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from detection_eval import (COCO_IOU_THRESHOLDS, RECALL_LEVELS, DetectionBox, EvalReport, GroundTruthBox,
                            average_precision, coco_map, format_report_table, iou, match_detections,
                            precision_recall_curve, sort_by_score, write_pr_curves_csv)
from errors import ParameterError


def gt(image_id, category_id, bbox):
    return GroundTruthBox(image_id=image_id, category_id=category_id, bbox=bbox)


def det(image_id, category_id, bbox, score):
    return DetectionBox(image_id=image_id, category_id=category_id, bbox=bbox, score=score)


# ==================== Evaluador de referencia por fuerza bruta ====================

def brute_iou(a, b):
    x0, y0 = max(a[0], b[0]), max(a[1], b[1])
    x1, y1 = min(a[0] + a[2], b[0] + b[2]), min(a[1] + a[3], b[1] + b[3])
    inter = max(0.0, x1 - x0) * max(0.0, y1 - y0)
    return inter / (a[2] * a[3] + b[2] * b[3] - inter) if inter > 0 else 0.0


def brute_ap(dets, gts, category_id, threshold):
    records = []
    total_gt = 0
    for image_id in sorted({g.image_id for g in gts} | {d.image_id for d in dets}):
        image_gts = [g for g in gts if g.image_id == image_id and g.category_id == category_id]
        image_dets = sorted([d for d in dets if d.image_id == image_id and d.category_id == category_id],
                            key=lambda d: -d.score)[:100]
        total_gt += len(image_gts)
        taken = set()
        for d in image_dets:
            best, best_iou = None, threshold
            for index, g in enumerate(image_gts):
                if index in taken:
                    continue
                value = brute_iou(d.bbox, g.bbox)
                if value >= best_iou and (best is None or value > best_iou):
                    best, best_iou = index, value
            if best is not None:
                taken.add(best)
            records.append((d.score, best is not None))
    if total_gt == 0:
        return None
    records.sort(key=lambda r: -r[0])
    tp = fp = 0
    points = []
    for _, hit in records:
        tp += hit
        fp += not hit
        points.append((tp / total_gt, tp / (tp + fp)))
    total = 0.0
    for level in RECALL_LEVELS:
        candidates = [p for r, p in points if r >= level]
        total += max(candidates) if candidates else 0.0
    return total / len(RECALL_LEVELS)


def brute_map(dets, gts, threshold):
    aps = [brute_ap(dets, gts, c, threshold) for c in sorted({g.category_id for g in gts})]
    aps = [a for a in aps if a is not None]
    return sum(aps) / len(aps) if aps else 0.0


def random_instance(rng):
    gts, dets = [], []
    scores = iter(rng.permutation(1000)[:200] / 1000.0 + 0.0005)
    for image_id in range(1, rng.integers(2, 5)):
        for _ in range(rng.integers(0, 4)):
            x, y = rng.uniform(0, 50, size=2)
            w, h = rng.uniform(5, 20, size=2)
            category = int(rng.integers(1, 3))
            gts.append(gt(image_id, category, (x, y, w, h)))
            if rng.uniform() < 0.8:
                jitter = rng.uniform(-3, 3, size=4)
                dets.append(det(image_id, category, (x + jitter[0], y + jitter[1],
                                                     max(1.0, w + jitter[2]), max(1.0, h + jitter[3])),
                                float(next(scores))))
        for _ in range(rng.integers(0, 3)):
            x, y = rng.uniform(0, 50, size=2)
            dets.append(det(image_id, int(rng.integers(1, 3)), (x, y, 10.0, 10.0), float(next(scores))))
    return dets, gts


# ==================== Tests ====================

def test_iou_hand_cases():
    assert iou((0, 0, 10, 10), (5, 5, 10, 10)) == pytest.approx(1 / 7)
    assert iou((0, 0, 10, 10), (0, 0, 10, 10)) == 1.0
    assert iou((0, 0, 10, 10), (10, 0, 5, 5)) == 0.0
    assert iou((0, 0, 10, 10), (20, 20, 5, 5)) == 0.0


def test_degenerate_boxes_rejected():
    with pytest.raises(ParameterError):
        iou((0, 0, 0, 10), (0, 0, 5, 5))
    with pytest.raises(ParameterError):
        det(1, 1, (0, 0, 5, 5), 1.5)


boxes = st.tuples(st.floats(-100, 100), st.floats(-100, 100), st.floats(0.1, 100), st.floats(0.1, 100))


@given(boxes, boxes)
def test_iou_symmetric_and_bounded(a, b):
    value = iou(a, b)
    assert 0.0 <= value <= 1.0
    assert value == pytest.approx(iou(b, a))


def test_ap_hand_cases():
    assert average_precision([False, True], 1) == pytest.approx(0.5)
    assert average_precision([True], 1) == 1.0
    assert average_precision([True, False], 2) == pytest.approx(51 / 101)
    assert average_precision([], 3) == 0.0
    assert average_precision([], 0) is None
    assert average_precision([False], 0) == 0.0


def test_precision_recall_curve():
    recall, precision = precision_recall_curve([True, False, True], 4)
    np.testing.assert_allclose(recall, [0.25, 0.25, 0.5])
    np.testing.assert_allclose(precision, [1.0, 0.5, 2 / 3])


def test_sort_is_stable():
    a = det(1, 1, (0, 0, 1, 1), 0.5)
    b = det(1, 1, (1, 1, 1, 1), 0.5)
    c = det(1, 1, (2, 2, 1, 1), 0.9)
    assert sort_by_score([a, b, c]) == [c, a, b]


def test_greedy_matching_prefers_highest_iou():
    gts = [gt(1, 1, (0, 0, 10, 10)), gt(1, 1, (2, 0, 10, 10))]
    dets = [det(1, 1, (2, 0, 10, 10), 0.9), det(1, 1, (0, 0, 10, 10), 0.8)]
    assert match_detections(dets, gts, 0.5) == [True, True]
    duplicate = [det(1, 1, (0, 0, 10, 10), 0.9), det(1, 1, (0, 0, 10, 10), 0.8)]
    assert match_detections(duplicate, gts[:1], 0.5) == [True, False]


def test_perfect_detections_score_one():
    gts = [gt(1, 1, (0, 0, 10, 10)), gt(2, 2, (5, 5, 20, 10)), gt(2, 1, (30, 30, 8, 8))]
    dets = [det(g.image_id, g.category_id, g.bbox, 1.0) for g in gts]
    report = coco_map(dets, gts)
    assert (report.map, report.map50, report.map75) == (1.0, 1.0, 1.0)
    assert report.num_ground_truth == 3 and report.num_detections == 3


def test_no_detections_score_zero():
    report = coco_map([], [gt(1, 1, (0, 0, 10, 10))])
    assert report.map == 0.0


def test_matches_brute_force_evaluator(rng):
    for _ in range(100):
        dets, gts = random_instance(rng)
        report = coco_map(dets, gts)
        assert report.map50 == pytest.approx(brute_map(dets, gts, 0.5), abs=1e-9)
        assert report.map75 == pytest.approx(brute_map(dets, gts, 0.75), abs=1e-9)
        expected = np.mean([brute_map(dets, gts, t) for t in COCO_IOU_THRESHOLDS]) if gts else 0.0
        assert report.map == pytest.approx(expected, abs=1e-9)


def test_unknown_images_count_as_false_positives(capsys):
    gts = [gt(1, 1, (0, 0, 10, 10))]
    dets = [det(99, 1, (0, 0, 10, 10), 0.95), det(1, 1, (0, 0, 10, 10), 0.9)]
    report = coco_map(dets, gts)
    assert report.map50 == pytest.approx(0.5)
    assert 'no existen en el ground truth' in capsys.readouterr().out


def test_categories_without_ground_truth_excluded_from_mean(capsys):
    gts = [gt(1, 1, (0, 0, 10, 10))]
    dets = [det(1, 1, (0, 0, 10, 10), 0.9), det(1, 5, (40, 40, 10, 10), 0.8)]
    report = coco_map(dets, gts)
    assert report.map == 1.0
    assert report.per_category_ap[5][0] == 0.0
    assert 'Categorías sin ground truth' in capsys.readouterr().out


def test_detection_cap_per_image_and_category():
    gts = [gt(1, 1, (0, 0, 10, 10))]
    dets = [det(1, 1, (50 + i, 50, 5, 5), 0.99) for i in range(100)] + [det(1, 1, (0, 0, 10, 10), 0.5)]
    assert coco_map(dets, gts).map50 == 0.0
    assert coco_map(dets, gts, max_dets=101).map50 > 0.0


def test_report_dict_round_trip(tmp_path):
    gts = [gt(1, 1, (0, 0, 10, 10))]
    report = coco_map([det(1, 1, (0, 0, 10, 10), 0.9)], gts)
    data = report.to_dict()
    assert data['counts'] == {'images': 1, 'ground_truth': 1, 'detections': 1}
    assert len(data['iou_thresholds']) == 10
    restored = EvalReport.from_dict(data)
    assert restored.map == report.map and restored.per_category_ap == report.per_category_ap
    path = tmp_path / 'report.json'
    report.write_json(str(path))
    assert path.exists()


def test_report_table_layout():
    reports = {
        'Autoencoder': EvalReport(map=0.17, map50=0.308, map75=0.16),
        'Normal': EvalReport(map=0.289, map50=0.486, map75=0.3),
        'Adversarial': EvalReport(map=0.164, map50=0.278, map75=0.168),
    }
    lines = format_report_table(reports).splitlines()
    assert lines[0].split() == ['Condition', 'bbox', 'mAP', 'bbox', 'mAP@50', 'bbox', 'mAP@75']
    assert [line.split()[0] for line in lines[2:]] == ['Normal', 'Adversarial', 'Autoencoder']
    assert lines[2].split()[1:] == ['0.2890', '0.4860', '0.3000']
    assert len({len(line) for line in lines}) == 1


def test_pr_curve_dump(tmp_path):
    gts = [gt(1, 1, (0, 0, 10, 10)), gt(1, 1, (20, 20, 10, 10))]
    dets = [det(1, 1, (0, 0, 10, 10), 0.9), det(1, 1, (50, 50, 10, 10), 0.5)]
    path = tmp_path / 'pr.csv'
    write_pr_curves_csv(dets, gts, str(path))
    with open(path, newline='') as f:
        rows = list(csv.reader(f))
    assert rows[0] == ['category_id', 'rank', 'recall', 'precision']
    assert rows[1] == ['1', '1', '0.500000', '1.000000']
    assert rows[2] == ['1', '2', '0.500000', '0.500000']
