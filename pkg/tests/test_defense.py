import math

import numpy as np
import pytest

from sparsepc.attack import AttackConfig, run_attack
from sparsepc.core import ContractViolation, PointCloud
from sparsepc.defense import (
    DefenseConfig,
    OutlierRemoval,
    SalientPointRemoval,
    apply_defense,
    defense_success_rate,
    outlier_removal,
    salient_removal,
)


def test_dense_cluster_survives_large_alpha():
    P = np.random.default_rng(0).random((200, 3))
    np.testing.assert_array_equal(outlier_removal(P, DefenseConfig(alpha=10.0)), P)


def test_far_point_is_removed():
    P = np.random.default_rng(1).random((100, 3))
    far = np.array([[0.5, 0.5, 5.5]])
    out = outlier_removal(np.vstack([P, far]), DefenseConfig(alpha=1.0))
    assert not np.any(np.all(out == far, axis=1))
    assert len(out) < 101


def test_outlier_keeps_container_type_and_never_empties():
    pc = PointCloud(np.random.default_rng(2).random((30, 3)), label=1, id="c")
    out = outlier_removal(pc, DefenseConfig(alpha=1e-9, k_neighbors=3))
    assert isinstance(out, PointCloud) and out.label == 1 and len(out) >= 1


def test_outlier_needs_more_points_than_neighbours():
    with pytest.raises(ContractViolation):
        outlier_removal(np.zeros((10, 3)), DefenseConfig(k_neighbors=10))


def test_salient_identity_and_count(small_clf, small_data):
    P = small_data.test[0].points
    same = salient_removal(P, small_clf, cfg=DefenseConfig("salient", remove_count=0))
    np.testing.assert_array_equal(same, P)
    out = salient_removal(P, small_clf, cfg=DefenseConfig("salient", remove_count=10))
    assert len(out) == len(P) - 10
    with pytest.raises(ContractViolation):
        salient_removal(P, small_clf, cfg=DefenseConfig("salient", remove_count=len(P)))


def test_salient_drops_the_highest_scores(small_clf, small_data):
    cloud = small_data.test[1]
    scores = small_clf.saliency_scores(cloud.points, cloud.label)
    out = salient_removal(cloud.points, small_clf, cloud.label, DefenseConfig("salient", remove_count=5))
    gone = np.setdiff1d(np.arange(len(cloud.points)), [np.flatnonzero(np.all(cloud.points == p, axis=1))[0] for p in out])
    assert scores[gone].min() >= np.delete(scores, gone).max()


def test_salient_hits_added_points(small_clf, correct_test_clouds):
    hits = 0
    tried = 0
    for cloud in correct_test_clouds[:6]:
        res = run_attack(cloud, small_clf, AttackConfig(mode="add", K=16, iterations=60))
        if not res.success or res.num_manipulated == 0:
            continue
        tried += 1
        X = res.adversarial
        cleaned = salient_removal(X, small_clf, None, DefenseConfig("salient", remove_count=res.num_manipulated))
        added = {tuple(p) for p in X[res.n_original:]}
        remaining = {tuple(p) for p in cleaned}
        hits += int(bool(added - remaining))
    assert tried > 0 and hits > 0


def test_noop_defense_on_clean_inputs(small_clf, correct_test_clouds):
    clouds = correct_test_clouds[:8]
    labels = [c.label for c in clouds]
    assert defense_success_rate(clouds, labels, small_clf, DefenseConfig(alpha=math.inf)) == 1.0
    assert defense_success_rate(clouds, labels, small_clf, DefenseConfig("salient", remove_count=0)) == 1.0


def test_defense_rate_contract(small_clf, small_data):
    clouds = small_data.test[:5]
    labels = [c.label for c in clouds]
    r1 = defense_success_rate(clouds, labels, small_clf, DefenseConfig())
    r2 = defense_success_rate(clouds, labels, small_clf, DefenseConfig())
    assert 0.0 <= r1 <= 1.0 and r1 == r2
    with pytest.raises(ContractViolation):
        defense_success_rate(clouds, labels[:-1], small_clf, DefenseConfig())
    with pytest.raises(ContractViolation):
        defense_success_rate([], [], small_clf, DefenseConfig())
    with pytest.raises(ContractViolation):
        apply_defense(clouds[0], DefenseConfig("salient"))


def test_config_serialization():
    cfg = DefenseConfig(alpha=math.inf, k_neighbors=4)
    assert '"inf"' in cfg.to_json()
    assert DefenseConfig.from_json(cfg.to_json()) == cfg
    with pytest.raises(ContractViolation):
        DefenseConfig.from_dict({"kind": "outlier", "k": 3})
    with pytest.raises(ContractViolation):
        DefenseConfig(kind="median")
    with pytest.raises(ContractViolation):
        DefenseConfig(alpha=0)


def test_transformers(small_clf, small_data):
    X = [c.points for c in small_data.test[:3]]
    out = OutlierRemoval(alpha=10.0).fit_transform(X)
    assert all(np.array_equal(a, b) for a, b in zip(out, X))
    trimmed = SalientPointRemoval(small_clf, remove_count=4).fit(X).transform(X)
    assert [len(p) for p in trimmed] == [len(p) - 4 for p in X]
    with pytest.raises(ContractViolation):
        SalientPointRemoval().fit(X)
