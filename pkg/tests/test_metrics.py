import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sr3d import metrics
from sr3d.assignment import GroundTruthObject
from sr3d.errors import EmptyEvaluationError
from sr3d.geometry import Box3
from sr3d.metrics import ConsistencyRecord, Detection, DetectionArrays, GroundTruthArrays

from oracles import brute_force_ap, brute_force_nms, greedy_flags

UNIT = Box3((0, 0, 0), (1, 1, 1))


def det(center, score, cls=0, size=(1, 1, 1)):
    return Detection(Box3(center, size), cls, score)


def gt(i, center, cls=0, size=(1, 1, 1)):
    return GroundTruthObject(i, Box3(center, size), cls)


def micro_instance(rng, n_det=10, n_gt=4, n_cls=2):
    gts = [(tuple(rng.uniform(0, 3, 3)), tuple(rng.uniform(0.5, 1.5, 3)), int(rng.integers(n_cls)))
           for _ in range(n_gt)]
    dets = []
    scores = rng.permutation(np.linspace(0.05, 0.95, n_det))  # distinct
    for i in range(n_det):
        if rng.random() < 0.6:
            c, s, k = gts[int(rng.integers(n_gt))]
            c = tuple(np.array(c) + rng.normal(0, 0.25, 3))
            s = tuple(np.array(s) * rng.uniform(0.8, 1.2, 3))
        else:
            c, s, k = tuple(rng.uniform(0, 3, 3)), tuple(rng.uniform(0.5, 1.5, 3)), int(rng.integers(n_cls))
        dets.append((c, s, k, float(scores[i])))
    return dets, gts


def to_objects(dets, gts):
    return ([Detection(Box3(c, s), k, p) for c, s, k, p in dets],
            [GroundTruthObject(j, Box3(c, s), k) for j, (c, s, k) in enumerate(gts)])


class TestNMS:
    def test_duplicate_suppressed(self):
        kept = metrics.nms([det((0, 0, 0), 0.8), det((0, 0, 0), 0.9)])
        assert [d.score for d in kept] == [0.9]

    def test_per_class(self):
        kept = metrics.nms([det((0, 0, 0), 0.8, 0), det((0, 0, 0), 0.9, 1)])
        assert len(kept) == 2

    def test_score_threshold(self):
        kept = metrics.nms([det((0, 0, 0), 0.005), det((5, 0, 0), 0.5)])
        assert [d.score for d in kept] == [0.5]

    def test_matches_reference(self, rng):
        for _ in range(100):
            dets, _ = micro_instance(rng)
            objs, _ = to_objects(dets, [])
            kept = metrics.nms_arrays(DetectionArrays.from_list(objs), 0.5, 0.01)
            assert sorted(kept.tolist()) == sorted(brute_force_nms(dets, 0.5, 0.01))

    def test_idempotent(self, rng):
        for _ in range(50):
            objs, _ = to_objects(*micro_instance(rng))
            once = metrics.nms(objs)
            assert metrics.nms(once) == once

    def test_shared_boxes_equals_flattened(self, rng):
        for _ in range(30):
            n, c = 25, 3
            centers = rng.uniform(0, 2, (n, 3))
            sizes = rng.uniform(0.4, 1.2, (n, 3))
            scores = rng.uniform(0, 1, (n, c))
            scores[rng.random((n, c)) < 0.3] = 0.001
            rows, cls = metrics.nms_shared_boxes(centers, sizes, scores)
            flat = DetectionArrays(np.repeat(centers, c, 0), np.repeat(sizes, c, 0), np.tile(np.arange(c), n),
                                   scores.ravel())
            kept = metrics.nms_arrays(flat)
            assert (rows * c + cls).tolist() == kept.tolist()

    def test_rejects_bad_threshold(self):
        with pytest.raises(Exception):
            metrics.nms([det((0, 0, 0), 0.5)], iou_threshold=1.5)


class TestAP:
    def test_perfect(self):
        assert metrics.average_precision([det((0, 0, 0), 0.9)], [gt(0, (0, 0, 0))])[1] == 1.0

    def test_no_detections(self):
        assert metrics.average_precision([], [gt(0, (0, 0, 0))])[1] == 0.0

    def test_hand_case(self):
        dets = [det((0, 0, 0), 0.9), det((9, 9, 9), 0.8), det((4, 0, 0), 0.7)]
        gts = [gt(0, (0, 0, 0)), gt(1, (4, 0, 0))]
        _, ap = metrics.average_precision(dets, gts, 0.5)
        assert ap == 5 / 6 or ap == pytest.approx(5 / 6, abs=1e-15)

    def test_no_gts(self):
        with pytest.raises(EmptyEvaluationError):
            metrics.average_precision([det((0, 0, 0), 0.9)], [])

    def test_matches_brute_force(self, rng):
        for _ in range(200):
            dets, gts = micro_instance(rng)
            objs, gobjs = to_objects(dets, gts)
            for thr in (0.25, 0.5):
                per_class, mean = metrics.average_precision(objs, gobjs, thr)
                for k, ap in per_class.items():
                    s, f, n = greedy_flags(dets, gts, thr, k)
                    assert ap == pytest.approx(brute_force_ap(s, f, n) if s else 0.0, abs=1e-12)
                assert mean == pytest.approx(np.mean(list(per_class.values())))

    def test_highest_iou_match(self):
        # the detection overlaps both gts; it must take the better one
        d = [det((0.1, 0, 0), 0.9)]
        g = [gt(0, (0.6, 0, 0)), gt(1, (0, 0, 0))]
        m = metrics.match_detections(DetectionArrays.from_list(d), GroundTruthArrays.from_list(g), 0.25)
        assert m[0][1].tolist() == [True]
        d2 = d + [det((0.55, 0, 0), 0.8)]
        m2 = metrics.match_detections(DetectionArrays.from_list(d2), GroundTruthArrays.from_list(g), 0.25)
        assert m2[0][1].tolist() == [True, True]

    @given(st.integers(0, 10_000))
    def test_adding_top_true_positive_never_hurts(self, seed):
        rng = np.random.default_rng(seed)
        dets, gts = micro_instance(rng, n_det=6, n_gt=3, n_cls=1)
        objs, gobjs = to_objects(dets, gts)
        base = metrics.average_precision(objs, gobjs, 0.5)[1]
        arr, garr = DetectionArrays.from_list(objs), GroundTruthArrays.from_list(gobjs)
        ov = metrics.geometry.iou(arr.centers[:, None], arr.sizes[:, None], garr.centers[None], garr.sizes[None])
        missed = [j for j in range(len(gobjs)) if np.all(ov[:, j] < 0.5)]
        if not missed:
            return
        extra = Detection(gobjs[missed[0]].box, 0, 0.999)
        assert metrics.average_precision([extra] + objs, gobjs, 0.5)[1] > base

    @given(st.integers(0, 10_000))
    def test_lowest_false_positive_leaves_ap(self, seed):
        rng = np.random.default_rng(seed)
        objs, gobjs = to_objects(*micro_instance(rng, n_det=6, n_gt=3, n_cls=1))
        base = metrics.average_precision(objs, gobjs, 0.5)[1]
        fp = Detection(Box3((50, 50, 50), (1, 1, 1)), 0, 0.001)
        assert metrics.average_precision(objs + [fp], gobjs, 0.5)[1] == pytest.approx(base, abs=1e-15)

    @given(st.integers(0, 10_000))
    def test_bounds(self, seed):
        rng = np.random.default_rng(seed)
        objs, gobjs = to_objects(*micro_instance(rng))
        per_class, mean = metrics.average_precision(objs, gobjs, 0.25)
        assert all(0 <= v <= 1 for v in per_class.values()) and 0 <= mean <= 1


class TestConsistency:
    def test_aic_cases(self):
        assert metrics.aic([ConsistencyRecord(0.4, 0.4)]) == 0.0
        assert metrics.aic([(0.9, 0.5), (0.3, 0.7)]) == pytest.approx(0.4)
        assert metrics.aic([(1.0, 0.0)] * 3) == 1.0
        with pytest.raises(EmptyEvaluationError):
            metrics.aic([])

    def test_pce_cases(self):
        g = [gt(0, (0, 0, 0), size=(1, 1, 1))]
        # shifted box with IoU 0.8 along x: overlap 1 - dx, iou = (1 - dx) / (1 + dx)
        dx = 1 / 9
        calibrated = det((dx, 0, 0), 0.8)
        assert metrics.pce([calibrated], g).errors[0] == pytest.approx(0.0, abs=1e-12)
        far = det((5, 5, 5), 0.3)
        assert metrics.pce([far], g).errors[0] == pytest.approx(0.3)
        dx = 3 / 7  # iou 0.4
        assert metrics.pce([det((dx, 0, 0), 0.95)], g).errors[0] == pytest.approx(0.55)

    def test_pce_top_k(self):
        g = [gt(0, (0, 0, 0))]
        dets = [det((5 + i, 0, 0), 0.01 * (i + 1)) for i in range(40)]
        r = metrics.pce(dets, g, top_k=30)
        assert len(r.errors) == 30
        assert min(r.pairs[:, 0]) == pytest.approx(0.11)

    def test_pce_other_class_is_unmatched(self):
        g = [gt(0, (0, 0, 0), cls=1)]
        assert metrics.pce([det((0, 0, 0), 0.6, cls=0)], g).errors[0] == pytest.approx(0.6)

    def test_substitution(self):
        g = [gt(0, (0, 0, 0))]
        out = metrics.gt_score_substitution([det((0, 0, 0), 0.2), det((9, 9, 9), 0.9)], g)
        assert out[0].score == pytest.approx(1.0) and out[1].score == 0.0
        assert metrics.nms(out) == [out[0]]

    @given(st.integers(0, 10_000))
    def test_pce_entries_in_unit_interval(self, seed):
        objs, gobjs = to_objects(*micro_instance(np.random.default_rng(seed)))
        e = metrics.pce(objs, gobjs).errors
        assert np.all((e >= 0) & (e <= 1))


def test_detection_score_validation():
    with pytest.raises(ValueError):
        Detection(UNIT, 0, 1.5)
