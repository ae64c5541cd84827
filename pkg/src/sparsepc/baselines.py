"""Point-removal attack baselines.

Points are removed in batches, chosen at random, from the critical set, or
by loss-gradient saliency, until the prediction flips or the removal budget
runs out.
"""

import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from .attack import AttackResult, _check_correct, _unpack, sample_rng
from .core import ContractViolation, PointCloud
from .metrics import chamfer_and_hausdorff

__all__ = ["RemovalStrategy", "removal_attack", "STRATEGIES"]

STRATEGIES = ("random", "critical", "saliency_high", "saliency_low")


@dataclass(frozen=True)
class RemovalStrategy:
    """How a removal baseline picks points.

    Parameters
    ----------
    kind : {"random", "critical", "saliency_high", "saliency_low"}
    batch_size : int
        Points removed per round.
    budget : int or None
        Maximum number of removed points; None means half the cloud.
    seed : int
        Only used by the random strategy.
    """

    kind: str = "saliency_high"
    batch_size: int = 16
    budget: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ContractViolation(f"unknown removal strategy {self.kind!r}")
        if self.batch_size < 1:
            raise ContractViolation("batch_size must be at least 1")
        if self.budget is not None and self.budget < 0:
            raise ContractViolation("budget must be non-negative")

    def budget_for(self, n_points):
        budget = n_points // 2 if self.budget is None else int(self.budget)
        if budget >= n_points:
            raise ContractViolation(f"budget {budget} must be below the cloud size {n_points}")
        return budget

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, doc):
        unknown = set(doc) - {f.name for f in fields(cls)}
        if unknown:
            raise ContractViolation(f"unknown strategy fields: {sorted(unknown)}")
        return cls(**doc)


def _critical_order(clf, X):
    """Critical points first, ranked by how many channels they win; the rest follow in index order."""
    feat = clf.pooled_features(X)
    if clf.pooling == "max":
        wins = (feat == feat.max(axis=0, keepdims=True)).sum(axis=1)
    else:
        wins = np.ones(len(X), dtype=int)
    return np.argsort(-wins, kind="stable")


def _pick(strategy, clf, X, label, count, rng):
    if strategy.kind == "random":
        return rng.choice(len(X), size=count, replace=False)
    if strategy.kind == "critical":
        return _critical_order(clf, X)[:count]
    scores = clf.saliency_scores(X, label)
    if strategy.kind == "saliency_high":
        scores = -scores
    return np.argsort(scores, kind="stable")[:count]


def removal_attack(P, clf, label=None, strategy=RemovalStrategy(), sample_id=""):
    """Remove points until the classifier changes its mind or the budget is spent.

    Returns
    -------
    AttackResult
        ``mode`` is ``"remove"``; ``binary_a`` marks removed points of ``P``
        and ``num_manipulated`` counts them.

    Raises
    ------
    NotAttackable
        If ``P`` is already misclassified.
    """
    if not sample_id and isinstance(P, PointCloud):
        sample_id = P.id
    P, label = _unpack(P, label)
    _check_correct(P, clf, label)
    N = len(P)
    budget = strategy.budget_for(N)
    rng = sample_rng(strategy.seed, sample_id)
    alive = np.arange(N)
    pred = label
    rounds = 0
    while N - len(alive) < budget and pred == label:
        count = min(strategy.batch_size, budget - (N - len(alive)))
        X = P[alive]
        drop = _pick(strategy, clf, X, label, count, rng)
        mask = np.ones(len(alive), dtype=bool)
        mask[drop] = False
        alive = alive[mask]
        pred = clf.predict_one(P[alive])
        rounds += 1
    removed = np.setdiff1d(np.arange(N), alive)
    binary = np.zeros(N, dtype=np.int8)
    binary[removed] = 1
    reduced = P[alive]
    ch, hd = chamfer_and_hausdorff(P, reduced)
    return AttackResult(
        adversarial=reduced,
        binary_a=binary,
        success=pred != label,
        num_manipulated=len(removed),
        num_displaced=len(removed),
        chamfer=float(ch),
        hausdorff=float(hd),
        predicted_class=int(pred),
        true_class=label,
        iterations_used=rounds,
        mode="remove",
        n_original=N,
        selected=removed,
    )
