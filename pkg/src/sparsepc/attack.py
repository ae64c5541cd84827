"""Sparse point perturbation / point addition attack.

The attack minimizes

    f = lambda1 * sum(a_hat) + lambda2 * D(P, P') + h(P')

over a relaxed selection vector ``a_hat`` in ``[0, 1]^M`` and per-point
offsets ``E``, where ``P' = P + a_hat * E`` and ``h`` is the probability
margin hinge of the true class. After the iteration budget the selection is
thresholded and success is judged on the binarized cloud only.
"""

import json
import zlib
from dataclasses import asdict, dataclass, fields, replace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .core import ContractViolation, PointCloud, apply_manipulation, check_cloud
from .metrics import DistanceKind, chamfer_and_hausdorff, distance, distance_gradient

__all__ = [
    "AttackConfig",
    "AttackState",
    "AttackResult",
    "NotAttackable",
    "NumericalFailure",
    "sample_rng",
    "init_perturbation",
    "init_addition",
    "init_state",
    "objective",
    "objective_gradient",
    "step",
    "binarize",
    "run_attack",
    "SparseAttack",
]

LOW, HIGH = 0.0001, 0.9999
E_INIT = 1e-3
DISPLACED_TOL = 1e-6
# short moment memories: long ones let the one large Hausdorff gradient freeze its point
ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.5, 0.5, 1e-12


class NotAttackable(ValueError):
    """The input is already misclassified, so there is nothing to attack."""


class NumericalFailure(ArithmeticError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    mode: str = "perturb"
    metric: str = "hausdorff"
    lambda1: float = 0.15
    lambda2: float = 50.0
    gamma: float = 0.01
    iterations: int = 250
    K: int = 128
    init: str = "random"
    binarize_threshold: float = 0.5
    seed: int = 0
    optimizer: str = "adam"
    keep_best: bool = True
    early_exit: bool = False

    def __post_init__(self):
        if self.mode not in ("perturb", "add"):
            raise ContractViolation(f"mode must be 'perturb' or 'add', got {self.mode!r}")
        object.__setattr__(self, "metric", DistanceKind.parse(self.metric).value)
        if self.optimizer not in ("adam", "gd", "sign"):
            raise ContractViolation(f"optimizer must be 'adam', 'sign' or 'gd', got {self.optimizer!r}")
        if self.init not in ("random", "critical", "all"):
            raise ContractViolation(f"unknown init strategy {self.init!r}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ContractViolation("lambda1 and lambda2 must be non-negative")
        if not self.gamma > 0:
            raise ContractViolation("gamma must be positive")
        if self.iterations < 1:
            raise ContractViolation("iterations must be >= 1")
        if not 0 <= self.binarize_threshold < 1:
            raise ContractViolation("binarize_threshold must lie in [0, 1)")
        if self.mode == "add" and self.K < 1:
            raise ContractViolation("K must be >= 1 in addition mode")
        if self.mode == "add" and self.metric == "euclidean":
            raise ContractViolation("euclidean perceptibility needs index correspondence; use chamfer or hausdorff")

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ContractViolation(f"unknown attack config fields: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def replace(self, **changes):
        return replace(self, **changes)


@dataclass(frozen=True)
class AttackState:
    """Optimizer variables over the working cloud ``base`` (P, or P followed by K duplicates)."""

    base: np.ndarray
    a_hat: np.ndarray
    E: np.ndarray
    frozen: np.ndarray
    n: int = 0
    # first/second moment estimates for the adaptive update, stacked as (M, 4): [a, ex, ey, ez]
    moments: tuple | None = None

    def manipulated(self):
        return apply_manipulation(self.base, self.a_hat, self.E)


@dataclass
class AttackResult:
    adversarial: np.ndarray
    binary_a: np.ndarray
    success: bool
    num_manipulated: int
    num_displaced: int
    chamfer: float
    hausdorff: float
    predicted_class: int
    true_class: int
    iterations_used: int
    mode: str
    n_original: int
    selected: np.ndarray
    originals_intact: bool = True
    numerical_failure: bool = False
    final_objective: float = float("nan")

    def record(self):
        return {
            "true_class": self.true_class,
            "predicted": self.predicted_class,
            "success": bool(self.success),
            "num_manipulated": int(self.num_manipulated),
            "num_displaced": int(self.num_displaced),
            "chamfer": float(self.chamfer),
            "hausdorff": float(self.hausdorff),
            "iterations": int(self.iterations_used),
            "originals_intact": bool(self.originals_intact),
            "numerical_failure": bool(self.numerical_failure),
        }


def sample_rng(seed, sample_id=""):
    """Per-sample generator derived from the master seed and a stable hash of the id."""
    return np.random.default_rng([int(seed), zlib.crc32(str(sample_id).encode())])


def _unpack(P, label):
    if isinstance(P, PointCloud):
        label = P.label if label is None else label
        P = P.points
    if label is None:
        raise ContractViolation("the true class label is required")
    return check_cloud(P), int(label)


def _check_correct(P, clf, label):
    pred = clf.predict_one(P)
    if pred != label:
        raise NotAttackable(f"input predicted as {pred}, true class {label}")


def init_perturbation(P, clf, cfg, label=None, rng=None):
    P, label = _unpack(P, label)
    _check_correct(P, clf, label)
    rng = sample_rng(cfg.seed) if rng is None else rng
    N = len(P)
    if cfg.init == "random":
        a = np.where(rng.random(N) < 0.5, LOW, HIGH)
    elif cfg.init == "all":
        a = np.full(N, HIGH)
    else:
        a = np.full(N, LOW)
        a[clf.critical_points(P)] = HIGH
    E = rng.uniform(-E_INIT, E_INIT, size=(N, 3))
    return AttackState(P.copy(), a, E, np.zeros(N, dtype=bool))


def init_addition(P, clf, cfg, label=None, rng=None):
    """Append ``K`` duplicates of random original points; the originals are frozen at zero."""
    P, label = _unpack(P, label)
    _check_correct(P, clf, label)
    rng = sample_rng(cfg.seed) if rng is None else rng
    N, K = len(P), cfg.K
    src = rng.integers(0, N, size=K)
    base = np.vstack([P, P[src]])
    if cfg.init == "random":
        a_add = np.where(rng.random(K) < 0.5, LOW, HIGH)
    elif cfg.init == "all":
        a_add = np.full(K, HIGH)
    else:
        crit = np.zeros(N, dtype=bool)
        crit[clf.critical_points(P)] = True
        a_add = np.where(crit[src], HIGH, LOW)
    a = np.concatenate([np.zeros(N), a_add])
    E = np.vstack([np.zeros((N, 3)), rng.uniform(-E_INIT, E_INIT, size=(K, 3))])
    frozen = np.arange(N + K) < N
    return AttackState(base, a, E, frozen)


def init_state(P, clf, cfg, label=None, rng=None):
    if cfg.mode == "add":
        return init_addition(P, clf, cfg, label, rng)
    return init_perturbation(P, clf, cfg, label, rng)


def objective(P, state, clf, cfg, label=None):
    """Value of the relaxed objective at ``state``."""
    P, label = _unpack(P, label)
    Pp = state.manipulated()
    D = distance(P, Pp, cfg.metric, state.a_hat, state.E)
    h = clf.margin(Pp, label).value
    return cfg.lambda1 * float(state.a_hat.sum()) + cfg.lambda2 * D + h


def objective_gradient(P, state, clf, cfg, label=None):
    """Return ``(f, df/da, df/dE)`` using the analytic distance and network gradients.

    Frozen entries get zero gradient.
    """
    P, label = _unpack(P, label)
    a, E = state.a_hat, state.E
    Pp = state.manipulated()
    dg = distance_gradient(P, Pp, a, E, cfg.metric)
    h, _, gh = clf._margin_and_grad(Pp, label)
    f = cfg.lambda1 * float(a.sum()) + cfg.lambda2 * dg.value + h
    d_a = cfg.lambda1 + cfg.lambda2 * dg.d_a + np.einsum("ij,ij->i", E, gh)
    d_e = cfg.lambda2 * dg.d_e + a[:, None] * gh
    d_a = np.where(state.frozen, 0.0, d_a)
    d_e = np.where(state.frozen[:, None], 0.0, d_e)
    return f, d_a, d_e


def step(P, state, clf, cfg, label=None):
    """One projected gradient-descent step; frozen entries are left untouched."""
    if state.n >= cfg.iterations:
        raise ContractViolation("iteration budget exhausted")
    _, d_a, d_e = objective_gradient(P, state, clf, cfg, label)
    if not (np.all(np.isfinite(d_a)) and np.all(np.isfinite(d_e))):
        raise NumericalFailure(f"non-finite gradient at step {state.n}")
    live = ~state.frozen
    a = state.a_hat.copy()
    E = state.E.copy()
    moments = None
    if cfg.optimizer == "gd":
        delta_a, delta_e = d_a, d_e
    elif cfg.optimizer == "sign":
        delta_a, delta_e = np.sign(d_a), np.sign(d_e)
    else:
        g = np.column_stack([d_a, d_e])
        m, v = state.moments if state.moments is not None else (np.zeros_like(g), np.zeros_like(g))
        t = state.n + 1
        m = ADAM_BETA1 * m + (1 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1 - ADAM_BETA2) * g * g
        upd = (m / (1 - ADAM_BETA1 ** t)) / (np.sqrt(v / (1 - ADAM_BETA2 ** t)) + ADAM_EPS)
        delta_a, delta_e = upd[:, 0], upd[:, 1:]
        moments = (m, v)
    a[live] = np.clip(a[live] - cfg.gamma * delta_a[live], 0.0, 1.0)
    E[live] = E[live] - cfg.gamma * delta_e[live]
    return AttackState(state.base, a, E, state.frozen, state.n + 1, moments)


def binarize(state, threshold):
    return ((state.a_hat > threshold) & ~state.frozen).astype(np.int8)


def _finish(P, state, clf, cfg, label, failure=False):
    N = len(P)
    a = binarize(state, cfg.binarize_threshold)
    moved = state.base + a[:, None] * state.E
    if cfg.mode == "add":
        keep = a[N:] == 1
        adversarial = np.vstack([P, moved[N:][keep]])
        selected = np.flatnonzero(keep) + N
        displaced = int(keep.sum())
        intact = bool(np.array_equal(adversarial[:N], P))
    else:
        adversarial = moved
        selected = np.flatnonzero(a)
        displaced = int((np.linalg.norm(adversarial - P, axis=1) > DISPLACED_TOL).sum())
        intact = True
    pred = clf.predict_one(adversarial)
    ch, hd = chamfer_and_hausdorff(P, adversarial)
    return AttackResult(
        adversarial=adversarial,
        binary_a=a,
        success=(pred != label) and not failure,
        num_manipulated=int(a.sum()),
        num_displaced=displaced,
        chamfer=float(ch),
        hausdorff=float(hd),
        predicted_class=pred,
        true_class=label,
        iterations_used=state.n,
        mode=cfg.mode,
        n_original=N,
        selected=selected,
        originals_intact=intact,
        numerical_failure=failure,
    )


def run_attack(P, clf, cfg=AttackConfig(), label=None, sample_id="", callback=None):
    """Run the full attack on one cloud.

    Parameters
    ----------
    P : PointCloud or array-like of shape (N, 3)
    clf : PointNetClassifier
    cfg : AttackConfig
    label : int, optional
        True class; taken from ``P.label`` when ``P`` is a PointCloud.
    sample_id : str
        Mixed into the RNG stream so results do not depend on processing order.
    callback : callable, optional
        Called with every intermediate ``AttackState``.

    Raises
    ------
    NotAttackable
        If the classifier already misclassifies ``P``.
    """
    if not sample_id and isinstance(P, PointCloud):
        sample_id = P.id
    P, label = _unpack(P, label)
    rng = sample_rng(cfg.seed, sample_id)
    state = init_state(P, clf, cfg, label, rng)
    best, best_cost = None, np.inf
    prev_f = np.inf
    for _ in range(cfg.iterations):
        try:
            state = step(P, state, clf, cfg, label)
        except NumericalFailure:
            return _finish(P, state, clf, cfg, label, failure=True)
        if callback is not None:
            callback(state)
        if not (cfg.keep_best or cfg.early_exit):
            continue
        done = _finish(P, state, clf, cfg, label)
        if done.success:
            cost = binary_cost(P, done, cfg)
            if cost <= best_cost:
                best, best_cost = done, cost
        if cfg.early_exit:
            f = objective(P, state, clf, cfg, label)
            if done.success and f >= prev_f:
                break
            prev_f = f
    result = _finish(P, state, clf, cfg, label)
    if cfg.keep_best and best is not None and not result.success:
        result = best
    elif cfg.keep_best and best is not None and binary_cost(P, result, cfg) > best_cost:
        result = best
    result.final_objective = objective(P, state, clf, cfg, label)
    return result


def binary_cost(P, result, cfg):
    """Sparsity plus perceptibility of a binarized result, used to rank successful iterates."""
    if cfg.metric == "chamfer":
        D = result.chamfer
    elif cfg.metric == "hausdorff":
        D = result.hausdorff
    else:
        E = result.adversarial - P
        D = float(np.linalg.norm(E, axis=1).mean())
    return cfg.lambda1 * result.num_manipulated + cfg.lambda2 * D


class SparseAttack(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``transform(X, y)`` returns adversarial clouds.

    Inputs the classifier already gets wrong are returned unchanged and
    flagged in ``results_`` as ``None``.
    """

    def __init__(self, classifier=None, mode="perturb", metric="hausdorff", lambda1=0.15,
                 lambda2=50.0, gamma=0.01, iterations=250, K=128, init="random",
                 binarize_threshold=0.5, seed=0, optimizer="adam", keep_best=True,
                 early_exit=False):
        self.classifier = classifier
        self.mode = mode
        self.metric = metric
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.gamma = gamma
        self.iterations = iterations
        self.K = K
        self.init = init
        self.binarize_threshold = binarize_threshold
        self.seed = seed
        self.optimizer = optimizer
        self.keep_best = keep_best
        self.early_exit = early_exit

    def config(self):
        params = self.get_params(deep=False)
        params.pop("classifier")
        return AttackConfig(**params)

    def fit(self, X=None, y=None):
        if self.classifier is None:
            raise ContractViolation("SparseAttack needs a fitted classifier")
        self.config_ = self.config()
        return self

    def transform(self, X, y=None, ids=None):
        if y is None:
            raise ContractViolation("transform needs the true labels")
        cfg = self.config()
        ids = ids if ids is not None else [str(i) for i in range(len(y))]
        out, self.results_ = [], []
        for P, label, sid in zip(X, y, ids):
            try:
                res = run_attack(P, self.classifier, cfg, int(label), sample_id=sid)
            except NotAttackable:
                out.append(check_cloud(P))
                self.results_.append(None)
                continue
            out.append(res.adversarial)
            self.results_.append(res)
        return out

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X, y).transform(X, y, **fit_params)
