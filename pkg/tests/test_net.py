import json

import numpy as np
import pytest
from sklearn.base import clone

from sparsepc.core import ContractViolation
from sparsepc.data import gen_dataset
from sparsepc.net import (
    ConfigurationError,
    PointNetClassifier,
    TrainConfig,
    load_checkpoint,
    train,
)


def constant_classifier(probs):
    """A network whose output ignores the input: all weights zero, class biases = log-probs."""
    C = len(probs)
    clf = PointNetClassifier(point_widths=(4,), head_widths=())
    clf.point_params_ = [[np.zeros((3, 4)), np.zeros(4)]]
    clf.head_params_ = [[np.zeros((4, C)), np.log(np.asarray(probs, float))]]
    clf.n_classes_ = C
    clf.classes_ = np.arange(C)
    return clf


def test_forward_is_a_distribution(small_clf, rng):
    for n in (1, 5, 64, 4096):
        p = small_clf.forward(rng.random((n, 3)))
        assert p.shape == (small_clf.n_classes_,)
        assert np.all(p >= 0)
        assert abs(p.sum() - 1.0) < 1e-9


def test_forward_permutation_and_duplication_invariance(small_clf, small_data, rng):
    P = small_data.test[0].points
    p = small_clf.forward(P)
    np.testing.assert_array_equal(small_clf.forward(P[rng.permutation(len(P))]), p)
    np.testing.assert_array_equal(small_clf.forward(np.vstack([P, P])), p)


def test_avgpool_permutation_invariance_up_to_rounding(small_avg_clf, small_data, rng):
    P = small_data.test[3].points
    np.testing.assert_allclose(small_avg_clf.forward(P[rng.permutation(len(P))]), small_avg_clf.forward(P),
                               rtol=0, atol=1e-12)


def test_margin_hand_values():
    assert constant_classifier([0.9, 0.1]).margin(np.zeros((3, 3)), 0).value == pytest.approx(0.8)
    m = constant_classifier([0.9, 0.1]).margin(np.zeros((3, 3)), 1)
    assert m.value == 0.0 and m.runner_up == 0
    uniform = constant_classifier([0.25] * 4).margin(np.zeros((2, 3)), 2)
    assert uniform.value == 0.0 and uniform.runner_up == 0  # lowest-index runner-up on ties


def test_margin_rejects_bad_class():
    with pytest.raises(ContractViolation):
        constant_classifier([0.5, 0.5]).margin(np.zeros((1, 3)), 2)


def test_margin_gradient_zero_when_misclassified(small_clf, small_data):
    P = small_data.test[0].points
    wrong = (small_clf.predict_one(P) + 1) % small_clf.n_classes_
    assert not small_clf.margin_input_gradient(P, wrong).any()


def _fd_points(fn, P, h=1e-6):
    out = np.zeros_like(P)
    for i in range(len(P)):
        for k in range(3):
            d = np.zeros_like(P)
            d[i, k] = h
            out[i, k] = (fn(P + d) - fn(P - d)) / (2 * h)
    return out


def test_margin_gradient_matches_finite_differences(small_clf, small_data):
    gen = np.random.default_rng(5)
    checked = 0
    for cloud in small_data.test[:12]:
        P = cloud.points[gen.choice(len(cloud.points), 8, replace=False)]
        label = small_clf.predict_one(P)
        g = small_clf.margin_input_gradient(P, label)
        num = _fd_points(lambda X: small_clf.margin(X, label).value, P)
        rel = np.abs(g - num).max() / max(np.abs(num).max(), 1e-12)
        if rel < 1e-4:
            checked += 1
    assert checked >= 10


def test_saliency_matches_loss_gradient_norm(small_clf, small_data):
    P = small_data.test[1].points[:10]
    label = small_data.test[1].label

    def loss(X):
        return -np.log(small_clf.forward(X)[label])

    num = _fd_points(loss, P)
    np.testing.assert_allclose(small_clf.loss_input_gradient(P, label), num, rtol=1e-4, atol=1e-9)
    scores = small_clf.saliency_scores(P, label)
    assert np.all(scores >= 0)
    np.testing.assert_allclose(scores, np.linalg.norm(num, axis=1), rtol=1e-4, atol=1e-9)


def test_saliency_zero_off_the_critical_set(small_clf, small_data):
    P = small_data.test[2].points
    crit = set(small_clf.critical_points(P).tolist())
    scores = small_clf.saliency_scores(P, small_data.test[2].label)
    dead = [i for i in range(len(P)) if i not in crit]
    assert dead and np.all(scores[dead] == 0.0)
    g = small_clf.margin_input_gradient(P, small_data.test[2].label)
    assert not g[dead].any()


def test_saliency_depends_on_label(small_clf, small_data):
    P = small_data.test[2].points
    assert not np.array_equal(small_clf.saliency_scores(P, 0), small_clf.saliency_scores(P, 1))


def test_critical_points_examples(small_clf, small_data):
    assert small_clf.critical_points(np.array([[0.3, 0.2, 0.1]])).tolist() == [0]
    P = small_data.test[4].points
    crit = small_clf.critical_points(P)
    width = small_clf.point_params_[-1][0].shape[1]
    assert len(crit) <= min(len(P), width)
    doubled = small_clf.critical_points(np.vstack([P, P]))
    np.testing.assert_array_equal(np.unique(np.vstack([P, P])[doubled], axis=0), np.unique(P[crit], axis=0))


def test_avgpool_critical_set_is_everything(small_avg_clf):
    assert small_avg_clf.critical_points(np.random.default_rng(0).random((7, 3))).tolist() == list(range(7))


def test_training_is_deterministic_and_accurate(small_data, small_clf):
    again = train(small_data, TrainConfig(epochs=10, arch="maxpool_half", seed=0))
    for (W1, b1), (W2, b2) in zip(small_clf.point_params_ + small_clf.head_params_,
                                  again.point_params_ + again.head_params_):
        assert np.array_equal(W1, W2) and np.array_equal(b1, b2)
    assert small_clf.test_accuracy_ >= 0.75


def test_training_rejects_degenerate_label_sets():
    X = [np.random.default_rng(i).random((16, 3)) for i in range(4)]
    with pytest.raises(ConfigurationError):
        PointNetClassifier(epochs=1).fit(X, [0, 0, 0, 0])
    with pytest.raises(ConfigurationError):
        PointNetClassifier(epochs=1).fit(X, [0, 2, 0, 2])
    with pytest.raises(ConfigurationError):
        PointNetClassifier(arch="pointnet++", epochs=1).fit(X, [0, 1, 0, 1])


def test_checkpoint_round_trip(tmp_path, small_clf, small_data):
    path = tmp_path / "model.json"
    small_clf.save(path)
    loaded = load_checkpoint(path)
    P = small_data.test[0].points
    np.testing.assert_array_equal(loaded.forward(P), small_clf.forward(P))
    assert loaded.architecture_tag == "maxpool_half"
    doc = json.loads(path.read_text())
    doc["point_layers"][0]["W_shape"] = [3, 7]
    with pytest.raises(ContractViolation):
        PointNetClassifier.from_dict(doc)
    doc["format"] = "something-else"
    with pytest.raises(ContractViolation):
        PointNetClassifier.from_dict(doc)


def test_architectures_differ_in_shapes_not_interface(small_clf, small_avg_clf, small_data):
    shapes = lambda c: [W.shape for W, _ in c.point_params_]
    assert shapes(small_clf) != shapes(small_avg_clf)
    X, y = small_data.arrays("test")
    for clf in (small_clf, small_avg_clf):
        assert clf.predict(X).shape == y.shape
        assert clf.predict_proba(X).shape == (len(y), 8)


def test_sklearn_estimator_protocol():
    est = PointNetClassifier(arch="avgpool", epochs=3)
    assert clone(est).get_params()["arch"] == "avgpool"
    ds = gen_dataset(classes=("sphere", "cube"), per_class=4, n_points=16, seed=1)
    X, y = ds.arrays("train")
    fitted = PointNetClassifier(arch="maxpool_half", epochs=2).fit(X, y)
    assert 0.0 <= fitted.score(X, y) <= 1.0
