"""Point cloud containers, validation helpers and normalization."""

import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ConfigurationError",
    "ContractViolation",
    "DegenerateCloudWarning",
    "PointCloud",
    "check_cloud",
    "check_manipulation",
    "normalize_unit_cube",
    "normalize_mean_furthest",
    "apply_manipulation",
]


class ContractViolation(ValueError):
    """Raised when an input breaks a documented precondition."""


class ConfigurationError(ValueError):
    """Raised for invalid settings: unknown classes, degenerate label sets, bad architectures."""


class DegenerateCloudWarning(UserWarning):
    """Emitted when a cloud has no spatial extent to normalize."""


def check_cloud(points, name="points"):
    """Validate a point array and return it as a float64 ``(N, 3)`` array.

    Parameters
    ----------
    points : array-like of shape (n_points, 3)
    name : str
        Used in error messages.

    Returns
    -------
    points : ndarray of shape (n_points, 3)
    """
    if isinstance(points, PointCloud):
        points = points.points
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ContractViolation(f"{name} must have shape (N, 3), got {arr.shape}")
    if arr.shape[0] < 1:
        raise ContractViolation(f"{name} must contain at least one point")
    if not np.all(np.isfinite(arr)):
        raise ContractViolation(f"{name} contains non-finite coordinates")
    return arr


def check_manipulation(points, a, E):
    points = check_cloud(points)
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    E = np.asarray(E, dtype=np.float64)
    if E.ndim != 2 or E.shape[1] != 3:
        raise ContractViolation(f"perturbations must have shape (M, 3), got {E.shape}")
    if not (len(points) == len(a) == len(E)):
        raise ContractViolation(
            f"length mismatch: {len(points)} points, {len(a)} indicators, "
            f"{len(E)} perturbations"
        )
    return points, a, E


@dataclass(frozen=True)
class PointCloud:
    """An ordered set of 3D points with an optional class label.

    Points are kept in input order and never deduplicated.
    """

    points: np.ndarray
    label: int | None = None
    id: str = ""
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        arr = check_cloud(self.points)
        arr.flags.writeable = False
        object.__setattr__(self, "points", arr)

    def __len__(self):
        return len(self.points)

    def with_points(self, points):
        return PointCloud(np.array(points, dtype=np.float64), self.label, self.id, dict(self.meta))


def normalize_unit_cube(points):
    """Map a cloud into ``[0, 1]^3`` with one uniform scale factor.

    The min corner moves to the origin and every axis is divided by the
    largest extent, so shape ratios are preserved. A cloud with zero extent
    on all axes collapses to the origin and emits
    :class:`DegenerateCloudWarning`.
    """
    P = check_cloud(points)
    lo = P.min(axis=0)
    extent = float((P.max(axis=0) - lo).max())
    if extent == 0.0:
        warnings.warn("cloud has zero extent; mapped to the origin", DegenerateCloudWarning)
        return np.zeros_like(P)
    out = (P - lo) / extent
    # guard against 1 + ulp after division
    return np.clip(out, 0.0, 1.0)


def normalize_mean_furthest(points):
    """Center on the centroid, scale the furthest point to radius 0.5, shift to (0.5, 0.5, 0.5)."""
    P = check_cloud(points)
    centered = P - P.mean(axis=0)
    radius = float(np.sqrt((centered ** 2).sum(axis=1)).max())
    if radius == 0.0:
        warnings.warn("all points coincide; mapped to the cube center", DegenerateCloudWarning)
        return np.full_like(P, 0.5)
    return centered * (0.5 / radius) + 0.5


def apply_manipulation(points, a, E):
    """Return ``p_i + a_i * e_i`` for every point.

    ``a`` may be relaxed (values in ``[0, 1]``); the optimizer evaluates the
    adversarial cloud with the relaxed indicator during iterations.
    """
    P, a, E = check_manipulation(points, a, E)
    return P + a[:, None] * E
