"""Input-sanitization defenses: statistical outlier removal and salient point removal.

Both defenses only delete points, so every output is an order-preserving
subset of its input.
"""

import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, TransformerMixin

from .core import ContractViolation, PointCloud, check_cloud

__all__ = [
    "DefenseConfig",
    "outlier_removal",
    "salient_removal",
    "apply_defense",
    "defense_success_rate",
    "OutlierRemoval",
    "SalientPointRemoval",
]


@dataclass(frozen=True)
class DefenseConfig:
    """Parameters of one defense.

    Parameters
    ----------
    kind : {"outlier", "salient"}
    k_neighbors : int
        Neighbourhood size for the outlier statistic.
    alpha : float
        Standard-deviation multiplier; ``math.inf`` disables outlier removal.
    remove_count : int
        Number of most salient points dropped by the salient defense.
    """

    kind: str = "outlier"
    k_neighbors: int = 10
    alpha: float = 1.0
    remove_count: int = 100

    def __post_init__(self):
        if self.kind not in ("outlier", "salient"):
            raise ContractViolation(f"unknown defense kind {self.kind!r}")
        if int(self.k_neighbors) != self.k_neighbors or self.k_neighbors < 1:
            raise ContractViolation("k_neighbors must be a positive integer")
        if not self.alpha > 0:
            raise ContractViolation("alpha must be positive")
        if int(self.remove_count) != self.remove_count or self.remove_count < 0:
            raise ContractViolation("remove_count must be a non-negative integer")

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        doc = self.to_dict()
        # JSON has no infinity literal in strict mode
        if math.isinf(doc["alpha"]):
            doc["alpha"] = "inf"
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ContractViolation(f"unknown defense config fields: {sorted(unknown)}")
        doc = dict(doc)
        if "alpha" in doc:
            doc["alpha"] = float(doc["alpha"])
        return cls(**doc)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _rewrap(original, points):
    if isinstance(original, PointCloud):
        return original.with_points(points)
    return points


def outlier_removal(P, cfg=DefenseConfig()):
    """Drop points whose mean k-NN distance exceeds ``mu + alpha * sigma``.

    Parameters
    ----------
    P : PointCloud or array-like of shape (N, 3)
    cfg : DefenseConfig

    Returns
    -------
    PointCloud or ndarray
        Same container type as ``P``; never empty.

    Raises
    ------
    ContractViolation
        If ``N <= k_neighbors``.
    """
    X = check_cloud(P)
    k = int(cfg.k_neighbors)
    if len(X) <= k:
        raise ContractViolation(f"outlier removal needs more than {k} points, got {len(X)}")
    # the first neighbour returned is the point itself
    dist, _ = cKDTree(X).query(X, k=k + 1)
    d = dist[:, 1:].mean(axis=1)
    keep = d <= d.mean() + cfg.alpha * d.std()
    if not keep.any():
        keep[np.argmin(d)] = True
    return _rewrap(P, X[keep])


def salient_removal(P, clf, label=None, cfg=DefenseConfig(kind="salient")):
    """Drop the ``remove_count`` points with the largest loss-gradient norm.

    Ties go to the lowest index. When ``label`` is None the classifier's own
    prediction is used, which is all a deployed defense can know.
    """
    X = check_cloud(P)
    M = int(cfg.remove_count)
    if M >= len(X):
        raise ContractViolation(f"cannot remove {M} of {len(X)} points")
    if M == 0:
        return _rewrap(P, X.copy())
    if label is None:
        label = clf.predict_one(X)
    scores = clf.saliency_scores(X, label)
    # stable sort on -score puts equal scores in index order
    drop = np.argsort(-scores, kind="stable")[:M]
    keep = np.ones(len(X), dtype=bool)
    keep[drop] = False
    return _rewrap(P, X[keep])


def apply_defense(P, cfg, clf=None):
    if cfg.kind == "outlier":
        return outlier_removal(P, cfg)
    if clf is None:
        raise ContractViolation("salient removal needs a classifier")
    return salient_removal(P, clf, None, cfg)


def defense_success_rate(adv_set, labels, clf, cfg):
    """Fraction of inputs classified as their true class after the defense.

    Parameters
    ----------
    adv_set : sequence of PointCloud or (N_i, 3) arrays
    labels : sequence of int
        True classes.
    clf : PointNetClassifier
    cfg : DefenseConfig

    Returns
    -------
    float in [0, 1]
    """
    adv_set = list(adv_set)
    labels = list(labels)
    if len(adv_set) != len(labels):
        raise ContractViolation(f"{len(adv_set)} clouds but {len(labels)} labels")
    if not adv_set:
        raise ContractViolation("no adversarial examples given")
    hits = 0
    for P, y in zip(adv_set, labels):
        cleaned = check_cloud(apply_defense(P, cfg, clf))
        hits += int(clf.predict_one(cleaned) == int(y))
    return hits / len(adv_set)


class OutlierRemoval(TransformerMixin, BaseEstimator):
    """Transformer form of :func:`outlier_removal`; ``transform`` returns a list of clouds."""

    def __init__(self, k_neighbors=10, alpha=1.0):
        self.k_neighbors = k_neighbors
        self.alpha = alpha

    def fit(self, X=None, y=None):
        self.config_ = DefenseConfig("outlier", self.k_neighbors, self.alpha)
        return self

    def transform(self, X):
        cfg = DefenseConfig("outlier", self.k_neighbors, self.alpha)
        return [outlier_removal(P, cfg) for P in X]


class SalientPointRemoval(TransformerMixin, BaseEstimator):
    """Transformer form of :func:`salient_removal` around a fitted classifier."""

    def __init__(self, classifier=None, remove_count=100):
        self.classifier = classifier
        self.remove_count = remove_count

    def fit(self, X=None, y=None):
        if self.classifier is None:
            raise ContractViolation("a fitted classifier is required")
        self.config_ = DefenseConfig("salient", remove_count=self.remove_count)
        return self

    def transform(self, X):
        cfg = DefenseConfig("salient", remove_count=self.remove_count)
        return [salient_removal(P, self.classifier, None, cfg) for P in X]
