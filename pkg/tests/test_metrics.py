from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from noctis.core import DESK, LabelMap, ValidationError
from noctis.metrics import (EvalAccumulator, MetricReport, PredInstance, aggregate, confusion_matrix, delta_report,
                            evaluate_image, instance_ap, instances_from_labels, match_segments, panoptic_quality,
                            pq_from_counts, semantic_metrics)

from oracles import TINY, brute_match, pq_formula, random_map, semantic_oracle

ROAD, SKY, CAR, PERSON, GROUND = 0, 1, 2, 3, 4
VOID = TINY.void_id


def _lm(sem, inst=None):
    sem = np.asarray(sem)
    return LabelMap(sem, np.zeros_like(sem) if inst is None else np.asarray(inst))


def _car_pair():
    # gt: one 8-px car; pred: 8-px car overlapping it by 6 px
    gt = np.full((4, 6), ROAD)
    gt[0:2, 0:4] = CAR
    pred = np.full((4, 6), ROAD)
    pred[0:2, 1:4] = CAR
    pred[2, 0:2] = CAR
    gi = np.where(gt == CAR, 1, 0)
    pi = np.where(pred == CAR, 1, 0)
    return _lm(pred, pi), _lm(gt, gi)


def test_identity_match():
    rng = np.random.default_rng(3)
    gt = random_map(rng, (10, 10))
    m = match_segments(gt, gt, TINY)
    for cm in m.per_class.values():
        assert not cm.fp and not cm.fn and all(t[2] == 1 for t in cm.tp)


def test_partial_overlap_car():
    pred, gt = _car_pair()
    m = match_segments(pred, gt, TINY)
    assert [t[2] for t in m.per_class[CAR].tp] == [Fraction(6, 10)]
    per_class, _ = panoptic_quality(m, TINY)
    pq, sq, rq = per_class[CAR]
    assert (pq, sq, rq) == pytest.approx((60.0, 60.0, 100.0), abs=1e-12)


def test_empty_prediction_is_fn():
    gt = _lm([[ROAD, ROAD]])
    pred = _lm([[VOID, VOID]])
    cm = match_segments(pred, gt, TINY).per_class[ROAD]
    assert (len(cm.tp), len(cm.fp), len(cm.fn)) == (0, 0, 1)


def test_formula_values():
    assert pq_from_counts(Fraction(4, 5), 1, 1, 1) == pytest.approx((40.0, 80.0, 50.0))
    assert pq_from_counts(0, 0, 0, 0) is None
    assert pq_from_counts(0, 0, 2, 0) == (0.0, 0.0, 0.0)


def test_size_mismatch():
    with pytest.raises(ValidationError):
        match_segments(_lm([[ROAD]]), _lm([[ROAD, ROAD]]), TINY)


def test_prediction_mostly_on_void_is_ignored():
    gt = _lm([[VOID, VOID, VOID, ROAD]])
    pred = _lm([[SKY, SKY, SKY, SKY]])
    cm = match_segments(pred, gt, TINY)
    assert not cm.per_class[SKY].fp and len(cm.per_class[ROAD].fn) == 1
    # with half or less on void it counts as a false positive
    gt = _lm([[VOID, VOID, ROAD, ROAD]])
    assert len(match_segments(pred, gt, TINY).per_class[SKY].fp) == 1


def test_void_removed_from_union():
    gt = _lm([[GROUND, ROAD, ROAD, ROAD]])  # non-eval class acts as void
    pred = _lm([[ROAD, ROAD, ROAD, SKY]])
    [(_, _, iou)] = match_segments(pred, gt, TINY).per_class[ROAD].tp
    assert iou == Fraction(2, 3)


def test_match_against_brute_force():
    rng = np.random.default_rng(7)
    for _ in range(150):
        shape = (int(rng.integers(2, 16)), int(rng.integers(2, 16)))
        gt = random_map(rng, shape)
        pred = random_map(rng, shape, base=gt, n_rects=int(rng.integers(0, 4)))
        m = match_segments(pred, gt, TINY)
        ref = brute_match(pred, gt, TINY)
        per_class, _ = panoptic_quality(m, TINY)
        for c, (ious, fp, fn) in ref.items():
            cm = m.per_class[c]
            assert sorted(t[2] for t in cm.tp) == ious
            assert (len(cm.fp), len(cm.fn)) == (fp, fn)
            exp = pq_formula(ious, fp, fn)
            if exp is None:
                assert per_class[c] is None
            else:
                assert per_class[c] == tuple(float(v) * 100 for v in exp)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_unique_matching_and_pq_identity(seed):
    rng = np.random.default_rng(seed)
    gt = random_map(rng, (12, 12))
    pred = random_map(rng, (12, 12), base=gt, n_rects=3)
    m = match_segments(pred, gt, TINY)
    preds = [t[0] for cm in m.per_class.values() for t in cm.tp]
    gts = [t[1] for cm in m.per_class.values() for t in cm.tp]
    assert len(set(preds)) == len(preds) and len(set(gts)) == len(gts)
    assert all(t[2] > Fraction(1, 2) for cm in m.per_class.values() for t in cm.tp)
    for c, v in panoptic_quality(m, TINY)[0].items():
        if v is not None:
            assert abs(v[0] - v[1] * v[2] / 100) <= 1e-9


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    gt = random_map(rng, (9, 11))
    pred = random_map(rng, (9, 11), base=gt, n_rects=3)
    perm = rng.permutation(gt.sem.size)

    def shuffle(lm):
        return LabelMap(lm.sem.ravel()[perm].reshape(1, -1), lm.inst.ravel()[perm].reshape(1, -1))

    a = evaluate_image(pred, gt, TINY).report()
    b = evaluate_image(shuffle(pred), shuffle(gt), TINY).report()
    # AP is left out: equal scores are ranked by segment order, which a permutation changes
    assert (a.pq, a.sq, a.rq, a.per_class_pq) == (b.pq, b.sq, b.rq, b.per_class_pq)
    assert (a.miou, a.fwiou, a.macc, a.pacc) == (b.miou, b.fwiou, b.macc, b.pacc)


def test_semantic_hand_example():
    gt = np.array([[ROAD, ROAD, SKY, SKY]])
    pred = np.array([[ROAD, SKY, SKY, SKY]])
    miou, fwiou, macc, pacc = semantic_metrics(pred, gt, TINY)
    assert miou == pytest.approx((1 / 2 + 2 / 3) / 2 * 100)
    assert pacc == 75.0
    assert semantic_metrics(gt, gt, TINY) == (100.0, 100.0, 100.0, 100.0)
    assert semantic_metrics(np.full((1, 4), CAR), gt, TINY)[::3] == (0.0, 0.0)
    assert semantic_metrics(gt, np.full((1, 4), VOID), TINY) == (None, None, None, None)


def test_semantic_against_oracle():
    rng = np.random.default_rng(11)
    for _ in range(200):
        shape = (int(rng.integers(1, 12)), int(rng.integers(1, 12)))
        gt = random_map(rng, shape)
        pred = random_map(rng, shape, base=gt, n_rects=3)
        got = semantic_metrics(pred.sem, gt.sem, TINY)
        exp = semantic_oracle(pred.sem, gt.sem, TINY)
        assert got == tuple(None if e is None else float(e) * 100 for e in exp)


def test_confusion_layout():
    cm = confusion_matrix(np.array([[ROAD, VOID, GROUND]]), np.array([[ROAD, ROAD, SKY]]), TINY)
    assert cm.shape == (4, 5)
    assert cm[0, 0] == 1 and cm[0, 4] == 1 and cm[1, 4] == 1 and cm.sum() == 3


def _inst(mask, cls=CAR, score=0.9, seg_id=1):
    return PredInstance(np.asarray(mask, bool), cls, score, seg_id)


def test_ap_single_instance():
    gt = _lm([[CAR, CAR, ROAD]], [[1, 1, 0]])
    assert instance_ap([_inst([[1, 1, 0]])], gt, TINY) == (100.0, 100.0)
    assert instance_ap([], gt, TINY) == (0.0, 0.0)


def test_ap_iou_point_six():
    gt_mask = np.zeros((1, 10), bool)
    gt_mask[0, :6] = True
    pred_mask = np.zeros((1, 10), bool)
    pred_mask[0, :10] = True  # IoU = 6/10
    gt = _lm(np.where(gt_mask, CAR, ROAD), gt_mask.astype(int))
    ap, ap50 = instance_ap([_inst(pred_mask)], gt, TINY)
    assert ap50 == 100.0
    assert ap == pytest.approx(30.0, abs=1e-9)


def test_ap_ranking_and_ties():
    gt = _lm([[CAR, CAR, ROAD, CAR, CAR]], [[1, 1, 0, 2, 2]])
    good_a = _inst([[1, 1, 0, 0, 0]], score=0.5, seg_id=2)
    good_b = _inst([[0, 0, 0, 1, 1]], score=0.5, seg_id=3)
    bad = _inst([[0, 0, 1, 0, 0]], score=0.9, seg_id=1)
    # precision 0, 1/2, 2/3 at recalls 0, 0.5, 1 -> interpolated 2/3 at every recall point
    ap, ap50 = instance_ap([bad, good_a, good_b], gt, TINY)
    assert ap50 == pytest.approx(100 * 2 / 3)
    # a perfect detection outranking the bad one restores precision 1 up to recall 0.5
    best = _inst([[1, 1, 0, 0, 0]], score=0.95, seg_id=4)
    ap, ap50 = instance_ap([bad, best, good_b], gt, TINY)
    assert ap50 == pytest.approx(100 * (51 * 1.0 + 50 * 2 / 3) / 101)


def test_ap_classes_without_gt_are_skipped():
    gt = _lm([[CAR, ROAD]], [[1, 0]])
    person = _inst([[0, 1]], cls=PERSON)
    assert instance_ap([_inst([[1, 0]]), person], gt, TINY) == (100.0, 100.0)
    assert instance_ap([person], _lm([[ROAD, ROAD]]), TINY) == (None, None)


def test_perfect_report_is_100():
    sem = np.zeros((16, 16), dtype=np.int32)
    sem[:5] = SKY
    sem[2:6, 2:6] = CAR
    inst = np.zeros_like(sem)
    inst[2:6, 2:6] = 1
    gt = LabelMap(sem, inst)
    r = evaluate_image(gt, gt, TINY).report()
    assert all(v == 100.0 for v in r.row() if v is not None)
    assert r.ap == 100.0 and r.miou == 100.0


def _dataset(seed, n=6):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        gt = random_map(rng, (10, 10))
        out.append((random_map(rng, (10, 10), base=gt, n_rects=2), gt))
    return out


def _accs(pairs):
    return [evaluate_image(p, g, TINY, key=f"{i:04d}") for i, (p, g) in enumerate(pairs)]


def test_aggregate_single_and_duplicated():
    pairs = _dataset(1)
    accs = _accs(pairs)
    assert aggregate(accs[:1]) == accs[0].report()
    a = aggregate(accs)
    b = aggregate(_accs(pairs + pairs))
    assert (a.pq, a.sq, a.rq, a.per_class_pq, a.miou, a.fwiou, a.macc, a.pacc) == \
        (b.pq, b.sq, b.rq, b.per_class_pq, b.miou, b.fwiou, b.macc, b.pacc)


def test_aggregate_shards_bit_exact():
    accs = _accs(_dataset(2, n=12))
    whole = aggregate(accs)
    rng = np.random.default_rng(0)
    for _ in range(5):
        order = rng.permutation(len(accs))
        cut = sorted(rng.choice(np.arange(1, len(accs)), size=2, replace=False))
        shards = [aggregate_acc([accs[i] for i in part]) for part in np.split(order, cut)]
        merged = shards[2].merge(shards[0]).merge(shards[1])
        assert merged.report() == whole


def aggregate_acc(accs):
    total = accs[0]
    for a in accs[1:]:
        total = total.merge(a)
    return total


def test_aggregate_disjoint_classes_keep_their_pq():
    a_gt = _lm([[ROAD, ROAD, ROAD, ROAD]])
    a_pred = _lm([[ROAD, ROAD, ROAD, SKY]])
    b_gt = _lm([[CAR, CAR, PERSON, PERSON]], [[1, 1, 1, 1]])
    b_pred = _lm([[CAR, CAR, PERSON, ROAD]], [[1, 1, 1, 0]])
    ra = evaluate_image(a_pred, a_gt, TINY).report()
    rb = evaluate_image(b_pred, b_gt, TINY).report()
    both = aggregate([evaluate_image(a_pred, a_gt, TINY), evaluate_image(b_pred, b_gt, TINY, key="b")])
    assert both.per_class_pq["car"] == rb.per_class_pq["car"]
    assert both.per_class_pq["person"] == rb.per_class_pq["person"]
    assert both.per_class_pq["sky"] == ra.per_class_pq["sky"]


def test_aggregate_rejects_mixed_catalogs():
    with pytest.raises(ValidationError):
        EvalAccumulator(TINY).merge(EvalAccumulator(DESK))


def test_delta_report_values():
    a = MetricReport.from_columns({"pq_all": 34.65, "miou": 49.18})
    b = MetricReport.from_columns({"pq_all": 45.28, "miou": 63.61})
    d = delta_report(a, b)
    assert d.columns["pq_all"] == 10.63 and d.columns["miou"] == 14.43
    assert d.columns["sq_all"] is None
    same = delta_report(b, b)
    assert all(v in (0.0, None) for v in same.columns.values())


def test_report_dict_round_trip():
    r = aggregate(_accs(_dataset(4)))
    assert MetricReport.from_dict(r.to_dict()) == r
    assert list(MetricReport.from_dict(r.to_dict()).per_class_pq) == ["road", "sky", "car", "person"]


def test_instances_from_labels_scores():
    lm = _lm([[CAR, CAR, PERSON]], [[3, 3, 1]])
    got = instances_from_labels(lm, TINY, {(CAR, 3): 0.25})
    assert [(p.class_id, p.score, p.seg_id) for p in got] == [(CAR, 0.25, 1), (PERSON, 1.0, 2)]
