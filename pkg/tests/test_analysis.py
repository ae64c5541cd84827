import numpy as np
import pytest

from sparsepc.analysis import (
    OverlapReport,
    aggregate_overlap,
    critical_overlap,
    knn_sets,
    overlap_from_selection,
    transfer_eval,
)
from sparsepc.attack import AttackConfig, AttackResult, run_attack
from sparsepc.core import ContractViolation

from test_net import constant_classifier


def _fake_result(P, selected, mode="perturb"):
    a = np.zeros(len(P), dtype=np.int8)
    a[selected] = 1
    return AttackResult(P, a, False, len(selected), len(selected), 0.0, 0.0, 0, 0, 1, mode, len(P),
                        np.asarray(selected, dtype=np.intp))


def test_knn_sets_put_self_first():
    P = np.array([[0.0, 0, 0], [1, 0, 0], [3, 0, 0], [3, 0, 0]])
    nn = knn_sets(P, 2)
    assert nn[0].tolist() == [0, 1]
    assert nn[1].tolist() == [1, 0]
    # duplicates: self still wins the zero-distance tie
    assert nn[2].tolist() == [2, 3] and nn[3].tolist() == [3, 2]


def test_selection_inside_critical_set(small_clf, small_data):
    P = small_data.test[0].points
    crit = small_clf.critical_points(P)
    rep = critical_overlap(P, _fake_result(P, crit[:3]), small_clf)
    assert rep.identical_fraction == 1.0 and rep.near_fraction == 1.0
    assert rep.num_critical == len(crit)


def test_empty_selection_is_all_zero(small_clf, small_data):
    P = small_data.test[0].points
    rep = critical_overlap(P, _fake_result(P, []), small_clf)
    assert (rep.num_selected, rep.num_identical, rep.num_near) == (0, 0, 0)
    assert rep.identical_fraction == 0.0


def test_identical_never_exceeds_near(small_clf, correct_test_clouds):
    for cloud in correct_test_clouds[:4]:
        res = run_attack(cloud, small_clf, AttackConfig(iterations=20))
        rep = critical_overlap(cloud.points, res, small_clf)
        assert rep.num_identical <= rep.num_near <= rep.num_selected


def test_addition_results_rejected(small_clf, small_data):
    P = small_data.test[0].points
    with pytest.raises(ContractViolation):
        critical_overlap(P, _fake_result(P, [0], mode="add"), small_clf)
    with pytest.raises(ContractViolation):
        overlap_from_selection(P, [len(P)], small_clf)


def test_aggregate_per_cloud_and_pooled():
    reps = [OverlapReport(4, 10, 4, 4), OverlapReport(1, 10, 0, 1), OverlapReport(0, 10, 0, 0)]
    agg = aggregate_overlap(reps)
    assert agg["per_cloud_identical"] == pytest.approx(0.5)
    assert agg["pooled_identical"] == pytest.approx(0.8)
    assert agg["pooled_near"] == 1.0
    assert agg["n_clouds_with_selection"] == 2


def test_transfer_eval(small_clf, small_avg_clf, small_data):
    clouds = [c.points for c in small_data.test[:6]]
    labels = [c.label for c in small_data.test[:6]]
    wrong = [int(small_clf.predict_one(P) != y) for P, y in zip(clouds, labels)]
    assert transfer_eval(clouds, labels, small_avg_clf, small_clf) == pytest.approx(np.mean(wrong))
    assert 0.0 <= transfer_eval(clouds, labels, small_clf, small_avg_clf) <= 1.0
    with pytest.raises(ContractViolation):
        transfer_eval(clouds, labels, small_clf, constant_classifier([0.5, 0.5]))
    with pytest.raises(ContractViolation):
        transfer_eval(clouds, labels[:2], small_clf, small_avg_clf)
