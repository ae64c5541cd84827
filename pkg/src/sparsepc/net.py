"""A small point-set classifier written directly in numpy.

Every point goes through a shared MLP, features are pooled channel-wise over
the points (max or mean), and a dense head produces class logits. The
backward pass is written by hand so that exact gradients with respect to the
input coordinates are available to the attack.
"""

import json
import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .core import ConfigurationError, ContractViolation, check_cloud

__all__ = [
    "ARCHITECTURES",
    "ConfigurationError",
    "MarginValue",
    "PointNetClassifier",
    "TrainConfig",
    "train",
    "load_checkpoint",
]

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "sparsepc-classifier"
CHECKPOINT_VERSION = 1

# tag -> (pooling, per-point widths, head widths without the class layer)
ARCHITECTURES = {
    "maxpool": ("max", (64, 128, 256), (128,)),
    "maxpool_half": ("max", (32, 64, 128), (64,)),
    "avgpool": ("mean", (64, 128, 256), (128,)),
}


@dataclass(frozen=True)
class MarginValue:
    value: float
    true_class: int
    runner_up: int


def _as_clouds(X):
    if isinstance(X, np.ndarray) and X.ndim == 2:
        raise ContractViolation("expected a collection of clouds, got a single (N, 3) array")
    return [check_cloud(P) for P in X]


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


class PointNetClassifier(ClassifierMixin, BaseEstimator):
    """Shared per-point MLP, channel-wise pooling and a dense head.

    There are no transform sub-networks and no batch normalization; every
    layer is an affine map followed by ReLU, except the last per-point layer
    (linear, so pooled channels rarely tie) and the class layer.

    Parameters
    ----------
    arch : {"maxpool", "maxpool_half", "avgpool"}
        Architecture tag; selects pooling and default widths.
    point_widths, head_widths : tuple of int, optional
        Override the widths implied by ``arch``.
    epochs : int
    batch_size : int
    learning_rate : float
    optimizer : {"adam", "sgd"}
    jitter : float
        Std-dev of Gaussian noise added to training clouds.
    rotate_z : bool
        Randomly rotate training clouds about the z axis (around the cube center).
    label_smoothing : float
        Mass spread uniformly over all classes in the training targets. Keeps
        the softmax away from saturation, where probability gradients vanish.
    random_state : int
    """

    def __init__(
        self,
        arch="maxpool",
        point_widths=None,
        head_widths=None,
        epochs=20,
        batch_size=32,
        learning_rate=0.01,
        optimizer="adam",
        jitter=0.0,
        rotate_z=False,
        label_smoothing=0.1,
        random_state=0,
    ):
        self.arch = arch
        self.point_widths = point_widths
        self.head_widths = head_widths
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.jitter = jitter
        self.rotate_z = rotate_z
        self.label_smoothing = label_smoothing
        self.random_state = random_state

    # -- construction -------------------------------------------------------

    def _layout(self):
        if self.arch not in ARCHITECTURES:
            raise ConfigurationError(f"unknown architecture {self.arch!r}")
        pool, pw, hw = ARCHITECTURES[self.arch]
        pw = tuple(self.point_widths) if self.point_widths is not None else pw
        hw = tuple(self.head_widths) if self.head_widths is not None else hw
        return pool, pw, hw

    def _init_params(self, n_classes, rng):
        _, pw, hw = self._layout()
        dims = (3,) + pw
        point = []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            W = rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_in, d_out))
            point.append([W, np.zeros(d_out)])
        dims = (pw[-1],) + hw + (n_classes,)
        head = []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            W = rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_in, d_out))
            head.append([W, np.zeros(d_out)])
        return point, head

    @property
    def architecture_tag(self):
        return self.arch

    @property
    def pooling(self):
        return self._layout()[0]

    # -- forward / backward -------------------------------------------------

    def _forward(self, X):
        """X has shape (B, N, 3). Returns logits and a cache for backprop."""
        check_is_fitted(self, "point_params_")
        B, N, _ = X.shape
        h = X.reshape(B * N, 3)
        cache = {"shape": (B, N), "point": []}
        last = len(self.point_params_) - 1
        for i, (W, b) in enumerate(self.point_params_):
            z = h @ W + b
            cache["point"].append((h, z))
            h = z if i == last else np.maximum(z, 0.0)
        feat = h.reshape(B, N, -1)
        if self.pooling == "max":
            arg = np.argmax(feat, axis=1)  # lowest index on ties
            g = np.take_along_axis(feat, arg[:, None, :], axis=1)[:, 0, :]
            cache["arg"] = arg
        else:
            g = feat.mean(axis=1)
        cache["pooled_feat"] = feat
        cache["head"] = []
        h = g
        last = len(self.head_params_) - 1
        for i, (W, b) in enumerate(self.head_params_):
            z = h @ W + b
            cache["head"].append((h, z))
            h = z if i == last else np.maximum(z, 0.0)
        return h, cache

    def _backward(self, dlogits, cache, want_params=True):
        """Backpropagate ``dlogits`` (B, C). Returns dX (B, N, 3) and parameter grads."""
        B, N = cache["shape"]
        head_grads, point_grads = [], []
        d = dlogits
        last = len(self.head_params_) - 1
        for i in range(last, -1, -1):
            W, _ = self.head_params_[i]
            h_in, z = cache["head"][i]
            if i != last:
                d = d * (z > 0)
            if want_params:
                head_grads.append((h_in.T @ d, d.sum(axis=0)))
            d = d @ W.T
        F = d.shape[1]
        if self.pooling == "max":
            dfeat = np.zeros((B, N, F))
            np.put_along_axis(dfeat, cache["arg"][:, None, :], d[:, None, :], axis=1)
        else:
            dfeat = np.broadcast_to(d[:, None, :] / N, (B, N, F)).copy()
        d = dfeat.reshape(B * N, F)
        last = len(self.point_params_) - 1
        for i in range(last, -1, -1):
            W, _ = self.point_params_[i]
            h_in, z = cache["point"][i]
            if i != last:
                d = d * (z > 0)
            if want_params:
                point_grads.append((h_in.T @ d, d.sum(axis=0)))
            d = d @ W.T
        dX = d.reshape(B, N, 3)
        return dX, point_grads[::-1], head_grads[::-1]

    # -- training -----------------------------------------------------------

    def _augment(self, batch, rng):
        if self.rotate_z:
            theta = rng.uniform(0.0, 2.0 * np.pi, size=len(batch))
            c, s = np.cos(theta), np.sin(theta)
            R = np.zeros((len(batch), 3, 3))
            R[:, 0, 0], R[:, 0, 1], R[:, 1, 0], R[:, 1, 1] = c, -s, s, c
            R[:, 2, 2] = 1.0
            batch = np.einsum("bnk,bjk->bnj", batch - 0.5, R) + 0.5
        if self.jitter > 0:
            batch = batch + rng.normal(0.0, self.jitter, size=batch.shape)
        return batch

    def fit(self, X, y):
        """Train on a collection of clouds with integer labels ``0..C-1``.

        Clouds of different sizes are allowed; a mini-batch is split into
        groups of equal size for the forward pass.
        """
        clouds = _as_clouds(X)
        y = np.asarray(y, dtype=np.int64)
        if len(clouds) != len(y):
            raise ContractViolation("X and y have different lengths")
        if self.epochs < 1 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ConfigurationError("epochs and batch_size must be >= 1, learning_rate > 0")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigurationError("label_smoothing must lie in [0, 1)")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if y.min() < 0:
            raise ConfigurationError("labels must be non-negative class ids")
        n_classes = int(y.max()) + 1
        counts = np.bincount(y, minlength=n_classes)
        if n_classes < 2:
            raise ConfigurationError("training needs at least two classes")
        if np.any(counts == 0):
            missing = np.flatnonzero(counts == 0).tolist()
            raise ConfigurationError(f"classes without examples: {missing}")

        rng = np.random.default_rng(self.random_state)
        point, head = self._init_params(n_classes, rng)
        self.point_params_, self.head_params_ = point, head
        self.classes_ = np.arange(n_classes)
        self.n_classes_ = n_classes
        params = [p for layer in point + head for p in layer]
        m = [np.zeros_like(p) for p in params]
        v = [np.zeros_like(p) for p in params]
        b1, b2, eps = 0.9, 0.999, 1e-8
        t = 0
        self.loss_curve_ = []
        for epoch in range(self.epochs):
            order = rng.permutation(len(clouds))
            total = 0.0
            for start in range(0, len(order), self.batch_size):
                idx = order[start:start + self.batch_size]
                loss, grads = self._batch_grads([clouds[i] for i in idx], y[idx], rng)
                total += loss * len(idx)
                t += 1
                for k, (p, g) in enumerate(zip(params, grads)):
                    if self.optimizer == "sgd":
                        p -= self.learning_rate * g
                        continue
                    m[k] = b1 * m[k] + (1 - b1) * g
                    v[k] = b2 * v[k] + (1 - b2) * g * g
                    mhat = m[k] / (1 - b1 ** t)
                    vhat = v[k] / (1 - b2 ** t)
                    p -= self.learning_rate * mhat / (np.sqrt(vhat) + eps)
            self.loss_curve_.append(total / len(clouds))
            logger.info("epoch %d loss %.4f", epoch + 1, self.loss_curve_[-1])
        return self

    def _batch_grads(self, batch, labels, rng):
        sums = None
        loss = 0.0
        sizes = np.array([len(P) for P in batch])
        for n in np.unique(sizes):
            sel = np.flatnonzero(sizes == n)
            Xb = self._augment(np.stack([batch[i] for i in sel]), rng)
            logits, cache = self._forward(Xb)
            p = _softmax(logits)
            yb = labels[sel]
            target = np.full_like(p, self.label_smoothing / p.shape[1])
            target[np.arange(len(sel)), yb] += 1.0 - self.label_smoothing
            loss += -(target * np.log(p + 1e-300)).sum()
            dlogits = (p - target) / len(batch)
            _, pg, hg = self._backward(dlogits, cache)
            flat = [g for pair in pg + hg for g in pair]
            sums = flat if sums is None else [a + b for a, b in zip(sums, flat)]
        return loss / len(batch), sums

    # -- inference ----------------------------------------------------------

    def decision_function(self, X):
        return np.stack([self.logits(P) for P in _as_clouds(X)])

    def predict_proba(self, X):
        return np.stack([self.forward(P) for P in _as_clouds(X)])

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)

    def logits(self, P):
        P = check_cloud(P)
        return self._forward(P[None])[0][0]

    def forward(self, P):
        """Class probabilities for one cloud of any size."""
        return _softmax(self.logits(P))

    def predict_one(self, P):
        return int(np.argmax(self.forward(P)))

    def margin(self, P, true_class):
        """Hinge on the probability gap between the true class and the best other class."""
        value, runner, _ = self._margin_and_grad(P, true_class, want_grad=False)
        return MarginValue(value, int(true_class), runner)

    def margin_input_gradient(self, P, true_class):
        """Gradient of the margin hinge with respect to every input point.

        Zero everywhere when the hinge is inactive (cloud already
        misclassified or tied).
        """
        return self._margin_and_grad(P, true_class)[2]

    def _margin_and_grad(self, P, true_class, want_grad=True):
        P = check_cloud(P)
        check_is_fitted(self, "point_params_")
        t = int(true_class)
        if not 0 <= t < self.n_classes_:
            raise ContractViolation(f"class {t} out of range for {self.n_classes_} classes")
        logits, cache = self._forward(P[None])
        p = _softmax(logits)[0]
        others = p.copy()
        others[t] = -np.inf
        r = int(np.argmax(others))
        value = max(0.0, float(p[t] - p[r]))
        if not want_grad:
            return value, r, None
        if value == 0.0:
            return value, r, np.zeros_like(P)
        # d(p_t - p_r)/dz = p_t (e_t - p) - p_r (e_r - p)
        dz = -p * (p[t] - p[r])
        dz[t] += p[t]
        dz[r] -= p[r]
        dX = self._backward(dz[None], cache, want_params=False)[0][0]
        return value, r, dX

    def loss_input_gradient(self, P, label):
        """Gradient of the cross-entropy loss against ``label`` with respect to the points."""
        P = check_cloud(P)
        logits, cache = self._forward(P[None])
        p = _softmax(logits)[0]
        dz = p.copy()
        dz[int(label)] -= 1.0
        return self._backward(dz[None], cache, want_params=False)[0][0]

    def saliency_scores(self, P, label):
        return np.linalg.norm(self.loss_input_gradient(P, label), axis=1)

    def pooled_features(self, P):
        """Per-point features entering the pooling layer, shape (N, F)."""
        P = check_cloud(P)
        return self._forward(P[None])[1]["pooled_feat"][0]

    def critical_points(self, P):
        """Indices of points attaining the channel maximum in at least one pooled channel.

        With mean pooling every point feeds every channel, so all indices are returned.
        """
        feat = self.pooled_features(P)
        if self.pooling != "max":
            return np.arange(len(feat))
        hit = (feat == feat.max(axis=0, keepdims=True)).any(axis=1)
        return np.flatnonzero(hit)

    # -- persistence --------------------------------------------------------

    def to_dict(self):
        check_is_fitted(self, "point_params_")
        _, pw, hw = self._layout()

        def pack(layers):
            return [
                {"W_shape": list(W.shape), "W": W.ravel().tolist(), "b": b.tolist()}
                for W, b in layers
            ]

        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "architecture_tag": self.arch,
            "point_widths": list(pw),
            "head_widths": list(hw),
            "n_classes": int(self.n_classes_),
            "estimator_params": self.get_params(),
            "point_layers": pack(self.point_params_),
            "head_layers": pack(self.head_params_),
        }

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def from_dict(cls, doc):
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ContractViolation("not a classifier checkpoint")
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ContractViolation(f"unsupported checkpoint version {doc.get('version')}")
        params = dict(doc.get("estimator_params", {}))
        params.update(
            arch=doc["architecture_tag"],
            point_widths=tuple(doc["point_widths"]),
            head_widths=tuple(doc["head_widths"]),
        )
        clf = cls(**params)
        n_classes = int(doc["n_classes"])
        _, pw, hw = clf._layout()

        def unpack(layers, dims):
            if len(layers) != len(dims) - 1:
                raise ContractViolation("checkpoint layer count does not match widths")
            out = []
            for layer, d_in, d_out in zip(layers, dims[:-1], dims[1:]):
                W = np.asarray(layer["W"], dtype=np.float64)
                b = np.asarray(layer["b"], dtype=np.float64)
                if list(layer["W_shape"]) != [d_in, d_out] or W.size != d_in * d_out or b.shape != (d_out,):
                    raise ContractViolation(f"layer shape mismatch, expected ({d_in}, {d_out})")
                out.append([W.reshape(d_in, d_out), b])
            return out

        clf.point_params_ = unpack(doc["point_layers"], (3,) + pw)
        clf.head_params_ = unpack(doc["head_layers"], (pw[-1],) + hw + (n_classes,))
        clf.n_classes_ = n_classes
        clf.classes_ = np.arange(n_classes)
        return clf


def load_checkpoint(path):
    with open(path) as fh:
        return PointNetClassifier.from_dict(json.load(fh))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 0.01
    seed: int = 0
    optimizer: str = "adam"
    jitter: float = 0.0
    rotate_z: bool = False
    label_smoothing: float = 0.1
    arch: str = "maxpool"


def train(dataset, cfg=TrainConfig()):
    """Fit a classifier on ``dataset.train`` and record train/test accuracy on it."""
    clf = PointNetClassifier(
        arch=cfg.arch,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate,
        optimizer=cfg.optimizer,
        jitter=cfg.jitter,
        rotate_z=cfg.rotate_z,
        label_smoothing=cfg.label_smoothing,
        random_state=cfg.seed,
    )
    X_train, y_train = dataset.arrays("train")
    clf.fit(X_train, y_train)
    clf.train_accuracy_ = float(clf.score(X_train, y_train))
    X_test, y_test = dataset.arrays("test")
    clf.test_accuracy_ = float(clf.score(X_test, y_test)) if len(X_test) else float("nan")
    logger.info("train accuracy %.4f, test accuracy %.4f", clf.train_accuracy_, clf.test_accuracy_)
    return clf
