"""Vulnerability analysis: attack-selected points against critical points, and transferability."""

from dataclasses import asdict, dataclass

import numpy as np

from .core import ContractViolation, check_cloud
from .metrics import pairwise_distances

__all__ = [
    "OverlapReport",
    "critical_overlap",
    "overlap_from_selection",
    "aggregate_overlap",
    "knn_sets",
    "transfer_eval",
]

NEAR_K = 5


@dataclass(frozen=True)
class OverlapReport:
    """How many selected points coincide with, or sit next to, critical points."""

    num_selected: int
    num_critical: int
    num_identical: int
    num_near: int

    @property
    def identical_fraction(self):
        return self.num_identical / self.num_selected if self.num_selected else 0.0

    @property
    def near_fraction(self):
        return self.num_near / self.num_selected if self.num_selected else 0.0

    def record(self):
        out = asdict(self)
        out["identical_fraction"] = self.identical_fraction
        out["near_fraction"] = self.near_fraction
        return out


def knn_sets(P, k=NEAR_K):
    """Indices of the ``k`` nearest points of every point, itself included.

    Distance ties resolve to the lower index.
    """
    P = check_cloud(P)
    k = min(k, len(P))
    D = pairwise_distances(P, P)
    # a point is always its own nearest neighbour, even against exact duplicates
    np.fill_diagonal(D, -1.0)
    return np.argsort(D, axis=1, kind="stable")[:, :k]


def critical_overlap(P, result, clf, k=NEAR_K):
    """Compare the points a perturbation attack selected with the classifier's critical set.

    Parameters
    ----------
    P : PointCloud or array-like of shape (N, 3)
        The original cloud the attack ran on.
    result : AttackResult
        Must come from perturbation mode.
    clf : PointNetClassifier
    k : int
        Neighbourhood size for the "near" count.

    Returns
    -------
    OverlapReport
    """
    if result.mode != "perturb":
        raise ContractViolation(f"overlap analysis needs a perturbation result, got mode {result.mode!r}")
    if len(result.binary_a) != len(check_cloud(P)):
        raise ContractViolation("result does not belong to this cloud")
    return overlap_from_selection(P, np.flatnonzero(np.asarray(result.binary_a) == 1), clf, k)


def overlap_from_selection(P, selected, clf, k=NEAR_K):
    """Overlap report for an explicit list of selected point indices of ``P``."""
    X = check_cloud(P)
    selected = np.unique(np.asarray(selected, dtype=np.intp))
    if len(selected) and (selected[0] < 0 or selected[-1] >= len(X)):
        raise ContractViolation("selected indices fall outside the cloud")
    critical = np.asarray(clf.critical_points(X))
    near_set = np.unique(knn_sets(X, k)[critical].ravel()) if len(critical) else np.empty(0, int)
    return OverlapReport(
        num_selected=len(selected),
        num_critical=len(critical),
        num_identical=int(np.isin(selected, critical).sum()),
        num_near=int(np.isin(selected, near_set).sum()),
    )


def aggregate_overlap(reports):
    """Summarize many reports two ways: the mean of per-cloud fractions and pooled counts.

    Clouds with no selected points are left out of the per-cloud means.
    """
    reports = list(reports)
    used = [r for r in reports if r.num_selected > 0]
    sel = sum(r.num_selected for r in reports)
    return {
        "n_clouds": len(reports),
        "n_clouds_with_selection": len(used),
        "per_cloud_identical": float(np.mean([r.identical_fraction for r in used])) if used else 0.0,
        "per_cloud_near": float(np.mean([r.near_fraction for r in used])) if used else 0.0,
        "pooled_identical": sum(r.num_identical for r in reports) / sel if sel else 0.0,
        "pooled_near": sum(r.num_near for r in reports) / sel if sel else 0.0,
        "num_selected": sel,
    }


def transfer_eval(adv_set, labels, source, target):
    """Fraction of adversarial examples built against ``source`` that ``target`` misclassifies.

    Raises
    ------
    ContractViolation
        When the two classifiers disagree on the number of classes or the
        inputs are misaligned.
    """
    if source.n_classes_ != target.n_classes_:
        raise ContractViolation(
            f"class count mismatch: source has {source.n_classes_}, target {target.n_classes_}"
        )
    adv_set = list(adv_set)
    labels = list(labels)
    if len(adv_set) != len(labels):
        raise ContractViolation(f"{len(adv_set)} clouds but {len(labels)} labels")
    if not adv_set:
        raise ContractViolation("no adversarial examples given")
    wrong = sum(int(target.predict_one(P) != int(y)) for P, y in zip(adv_set, labels))
    return wrong / len(adv_set)
