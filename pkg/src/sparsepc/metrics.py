"""Perceptibility distances between point clouds and their gradients.

Chamfer and Hausdorff are both taken as the max over the two directed
terms, with unsquared Euclidean norms. Gradients are computed with respect
to the relaxed indicator ``a`` and the perturbations ``E`` that produced the
manipulated cloud ``p'_i = p_i + a_i e_i``.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.spatial import cKDTree

from .core import ContractViolation, check_cloud, check_manipulation

__all__ = [
    "DistanceKind",
    "DistanceGradient",
    "pairwise_distances",
    "nearest_neighbors",
    "nearest_neighbor_index",
    "directed_chamfer",
    "directed_hausdorff",
    "chamfer",
    "hausdorff",
    "chamfer_and_hausdorff",
    "euclidean_perceptibility",
    "distance",
    "distance_gradient",
]

# above this many reference points a k-d tree replaces the brute-force scan
BRUTE_FORCE_LIMIT = 256
_CHUNK = 2048


class DistanceKind(str, Enum):
    EUCLIDEAN = "euclidean"
    CHAMFER = "chamfer"
    HAUSDORFF = "hausdorff"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ContractViolation(f"unknown distance kind {value!r}") from None


def pairwise_distances(A, B):
    """Exact Euclidean distance matrix of shape ``(len(A), len(B))``."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    diff = A[:, None, :] - B[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def nearest_neighbors(Q, P):
    """For every row of ``Q`` return the index of and distance to its nearest point in ``P``.

    Ties are broken towards the lowest index in ``P``.
    """
    Q = np.asarray(Q, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    if len(P) == 0:
        raise ContractViolation("reference cloud is empty")
    if len(P) <= BRUTE_FORCE_LIMIT:
        idx = np.empty(len(Q), dtype=np.intp)
        dist = np.empty(len(Q))
        for start in range(0, len(Q), _CHUNK):
            D = pairwise_distances(Q[start:start + _CHUNK], P)
            j = np.argmin(D, axis=1)
            idx[start:start + _CHUNK] = j
            dist[start:start + _CHUNK] = D[np.arange(len(j)), j]
        return idx, dist
    k = min(8, len(P))
    _, cand = cKDTree(P).query(Q, k=k)
    cand = cand.reshape(len(Q), k)
    # recompute exactly so ties resolve the same way as the brute-force path
    diff = Q[:, None, :] - P[cand]
    d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    best = d.min(axis=1, keepdims=True)
    masked = np.where(d == best, cand, np.iinfo(np.intp).max)
    idx = masked.min(axis=1)
    return idx, best[:, 0]


def nearest_neighbor_index(q, P):
    P = check_cloud(P)
    q = np.asarray(q, dtype=np.float64).reshape(1, 3)
    return int(nearest_neighbors(q, P)[0][0])


def _mean_capped(d):
    # a float mean of equal values can exceed their max by one ulp
    return min(float(d.mean()), float(d.max()))


def directed_chamfer(P, Q):
    """Mean over ``p`` in ``P`` of the distance to the nearest point of ``Q``."""
    return _mean_capped(nearest_neighbors(P, Q)[1])


def directed_hausdorff(P, Q):
    return float(nearest_neighbors(P, Q)[1].max())


def chamfer(P, Q):
    P = check_cloud(P, "P")
    Q = check_cloud(Q, "Q")
    return max(directed_chamfer(P, Q), directed_chamfer(Q, P))


def hausdorff(P, Q):
    P = check_cloud(P, "P")
    Q = check_cloud(Q, "Q")
    return max(directed_hausdorff(P, Q), directed_hausdorff(Q, P))


def chamfer_and_hausdorff(P, Q):
    """Both symmetric distances from a single nearest-neighbour pass in each direction."""
    P = check_cloud(P, "P")
    Q = check_cloud(Q, "Q")
    d_pq = nearest_neighbors(P, Q)[1]
    d_qp = nearest_neighbors(Q, P)[1]
    return max(_mean_capped(d_pq), _mean_capped(d_qp)), float(max(d_pq.max(), d_qp.max()))


def euclidean_perceptibility(a, E):
    """Mean of ``a_i * ||e_i||`` over all points."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    E = np.asarray(E, dtype=np.float64)
    if E.ndim != 2 or E.shape != (len(a), 3):
        raise ContractViolation(f"indicator of length {len(a)} does not match perturbations {E.shape}")
    return float(np.mean(a * np.linalg.norm(E, axis=1)))


def distance(P, Pprime, kind, a=None, E=None):
    """Evaluate the perceptibility term of the given kind.

    The Euclidean kind needs the indicator and perturbations; the other two
    only look at the clouds.
    """
    kind = DistanceKind.parse(kind)
    if kind is DistanceKind.CHAMFER:
        return chamfer(P, Pprime)
    if kind is DistanceKind.HAUSDORFF:
        return hausdorff(P, Pprime)
    if a is None or E is None:
        raise ContractViolation("euclidean perceptibility needs a and E")
    if len(check_cloud(P)) != len(check_cloud(Pprime)):
        raise ContractViolation("euclidean perceptibility needs index correspondence")
    return euclidean_perceptibility(a, E)


@dataclass(frozen=True)
class DistanceGradient:
    """Partial derivatives of a perceptibility term.

    Attributes
    ----------
    d_a : ndarray of shape (M,)
        Derivative with respect to each relaxed indicator entry.
    d_e : ndarray of shape (M, 3)
        Derivative with respect to each perturbation vector.
    active_branch : str
        ``"forward"`` (P -> P'), ``"backward"`` (P' -> P) or ``"pointwise"``
        for the Euclidean term.
    value : float
        The distance itself.
    """

    d_a: np.ndarray
    d_e: np.ndarray
    active_branch: str
    value: float


def _unit(diff, norm):
    out = np.zeros_like(diff)
    nz = norm > 0
    out[nz] = diff[nz] / norm[nz, None]
    return out


def _point_gradient(P, Pprime, kind):
    """Gradient of the set distance with respect to every point of ``Pprime``."""
    fwd_idx, fwd_d = nearest_neighbors(P, Pprime)    # for p_k, nearest p'_j
    bwd_idx, bwd_d = nearest_neighbors(Pprime, P)    # for p'_j, nearest p_k
    g = np.zeros_like(Pprime)
    if kind is DistanceKind.CHAMFER:
        fwd, bwd = _mean_capped(fwd_d), _mean_capped(bwd_d)
        if fwd >= bwd:
            diff = Pprime[fwd_idx] - P
            np.add.at(g, fwd_idx, _unit(diff, fwd_d) / len(P))
            return g, "forward", fwd
        diff = Pprime - P[bwd_idx]
        g += _unit(diff, bwd_d) / len(Pprime)
        return g, "backward", bwd
    fwd, bwd = fwd_d.max(), bwd_d.max()
    if fwd >= bwd:
        k = int(np.argmax(fwd_d))
        j = fwd_idx[k]
        g[j] = _unit((Pprime[j] - P[k])[None], fwd_d[k:k + 1])[0]
        return g, "forward", fwd
    j = int(np.argmax(bwd_d))
    k = bwd_idx[j]
    g[j] = _unit((Pprime[j] - P[k])[None], bwd_d[j:j + 1])[0]
    return g, "backward", bwd


def distance_gradient(P, Pprime, a, E, kind):
    """Analytic gradient of ``D(P, P')`` with respect to ``a`` and ``E``.

    Parameters
    ----------
    P : array-like of shape (N, 3)
        Reference (original) cloud.
    Pprime : array-like of shape (M, 3)
        Manipulated cloud, ``apply_manipulation(base, a, E)`` for some base
        cloud aligned with ``a`` and ``E``.
    a : array-like of shape (M,)
    E : array-like of shape (M, 3)
    kind : DistanceKind or str

    Returns
    -------
    DistanceGradient

    Notes
    -----
    Only the directed term attaining the outer max contributes; on a tie
    the ``P -> P'`` term is used. Nearest-neighbour pairs at zero distance
    get a zero subgradient.
    """
    kind = DistanceKind.parse(kind)
    P = check_cloud(P, "P")
    Pprime, a, E = check_manipulation(Pprime, a, E)
    if kind is DistanceKind.EUCLIDEAN:
        if len(P) != len(Pprime):
            raise ContractViolation("euclidean perceptibility needs index correspondence")
        n = len(a)
        norms = np.linalg.norm(E, axis=1)
        d_a = norms / n
        d_e = a[:, None] * _unit(E, norms) / n
        return DistanceGradient(d_a, d_e, "pointwise", float(np.mean(a * norms)))
    g, branch, value = _point_gradient(P, Pprime, kind)
    d_a = np.einsum("ij,ij->i", E, g)
    d_e = a[:, None] * g
    return DistanceGradient(d_a, d_e, branch, float(value))
