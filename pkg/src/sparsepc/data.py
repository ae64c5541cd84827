"""Procedural shape corpus, mesh sampling and point-cloud file formats."""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .core import ConfigurationError, ContractViolation, PointCloud, check_cloud, normalize_unit_cube

__all__ = [
    "CLASSES",
    "ParseError",
    "ShapeSpec",
    "ShapeDataset",
    "sample_surface",
    "sample_triangles",
    "gen_shape",
    "gen_dataset",
    "save_xyz",
    "load_xyz",
    "load_off",
    "write_dataset",
    "read_manifest",
]

CLASSES = ("sphere", "cube", "cylinder", "cone", "torus", "plane", "pyramid", "helix")
MANIFEST_NAME = "manifest.json"


class ParseError(ValueError):
    def __init__(self, message, path=None, lineno=None):
        where = ""
        if path is not None:
            where += f"{path}"
        if lineno is not None:
            where += f":{lineno}"
        super().__init__(f"{where}: {message}" if where else message)
        self.path = path
        self.lineno = lineno


# -- surface samplers ---------------------------------------------------------


def sample_triangles(vertices, triangles, n, rng):
    """Sample ``n`` points uniformly by area over a triangle soup.

    Returns the points and the index of the triangle each one came from.
    """
    V = np.asarray(vertices, dtype=np.float64)
    T = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    a, b, c = V[T[:, 0]], V[T[:, 1]], V[T[:, 2]]
    area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    total = area.sum()
    if not total > 0:
        raise ContractViolation("mesh has zero surface area")
    tri = rng.choice(len(T), size=n, p=area / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    pts = (1 - r1)[:, None] * a[tri] + (r1 * (1 - r2))[:, None] * b[tri] + (r1 * r2)[:, None] * c[tri]
    return pts, tri


def _box_faces(sx, sy, sz):
    corners = np.array([[x, y, z] for x in (0, sx) for y in (0, sy) for z in (0, sz)], dtype=float)
    corners -= corners.mean(axis=0)
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    tris = [t for q in quads for t in ((q[0], q[1], q[2]), (q[0], q[2], q[3]))]
    return corners, np.array(tris)


def _sphere(n, rng, radius=1.0):
    v = rng.normal(size=(n, 3))
    return radius * v / np.linalg.norm(v, axis=1, keepdims=True)


def _box(n, rng, size=(1.0, 1.0, 1.0)):
    V, T = _box_faces(*size)
    return sample_triangles(V, T, n, rng)[0]


def _cylinder(n, rng, radius=0.5, height=1.0):
    side, cap = 2 * np.pi * radius * height, np.pi * radius ** 2
    part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0, 2 * np.pi, n)
    r = np.where(part == 0, radius, radius * np.sqrt(rng.random(n)))
    z = np.where(part == 0, rng.uniform(-height / 2, height / 2, n), np.where(part == 1, -height / 2, height / 2))
    return np.column_stack([r * np.cos(theta), r * np.sin(theta), z])


def _cone(n, rng, radius=0.5, height=1.0):
    slant = np.hypot(radius, height)
    side, base = np.pi * radius * slant, np.pi * radius ** 2
    on_side = rng.random(n) < side / (side + base)
    theta = rng.uniform(0, 2 * np.pi, n)
    s = np.sqrt(rng.random(n))  # area grows linearly with distance from apex / center
    r = radius * s
    z = np.where(on_side, height / 2 - height * s, -height / 2)
    return np.column_stack([r * np.cos(theta), r * np.sin(theta), z])


def _torus(n, rng, major=0.7, minor=0.25):
    out = np.empty((0, 3))
    while len(out) < n:
        m = 2 * (n - len(out)) + 16
        u = rng.uniform(0, 2 * np.pi, m)
        v = rng.uniform(0, 2 * np.pi, m)
        keep = rng.random(m) < (major + minor * np.cos(v)) / (major + minor)
        u, v = u[keep], v[keep]
        ring = major + minor * np.cos(v)
        out = np.vstack([out, np.column_stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)])])
    return out[:n]


def _plane(n, rng, size=(1.0, 1.0)):
    xy = rng.uniform(-0.5, 0.5, size=(n, 2)) * np.asarray(size)
    return np.column_stack([xy, np.zeros(n)])


def _pyramid(n, rng, base=1.0, height=1.0):
    h = base / 2
    V = np.array([[-h, -h, 0], [h, -h, 0], [h, h, 0], [-h, h, 0], [0, 0, height]], dtype=float)
    T = np.array([[0, 1, 2], [0, 2, 3], [0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]])
    return sample_triangles(V, T, n, rng)[0]


def _helix(n, rng, radius=0.5, pitch=0.35, turns=3.0, tube=0.06):
    t = rng.uniform(0, turns * 2 * np.pi, n)
    phi = rng.uniform(0, 2 * np.pi, n)
    center = np.column_stack([radius * np.cos(t), radius * np.sin(t), pitch * t / (2 * np.pi)])
    tangent = np.column_stack([-radius * np.sin(t), radius * np.cos(t), np.full(n, pitch / (2 * np.pi))])
    tangent /= np.linalg.norm(tangent, axis=1, keepdims=True)
    normal = np.column_stack([np.cos(t), np.sin(t), np.zeros(n)])
    binormal = np.cross(tangent, normal)
    return center + tube * (np.cos(phi)[:, None] * normal + np.sin(phi)[:, None] * binormal)


_SAMPLERS = {
    "sphere": _sphere,
    "cube": _box,
    "cylinder": _cylinder,
    "cone": _cone,
    "torus": _torus,
    "plane": _plane,
    "pyramid": _pyramid,
    "helix": _helix,
}


def sample_surface(name, n, rng, **params):
    """Raw (un-normalized) surface samples of a canonical shape."""
    if name not in _SAMPLERS:
        raise ConfigurationError(f"unknown shape class {name!r}")
    return _SAMPLERS[name](n, rng, **params)


def _random_params(name, rng):
    u = rng.uniform
    if name == "sphere":
        return {"radius": u(0.8, 1.2)}
    if name == "cube":
        return {"size": tuple(u(0.8, 1.2, 3))}
    if name == "cylinder":
        return {"radius": u(0.3, 0.5), "height": u(1.0, 1.6)}
    if name == "cone":
        return {"radius": u(0.4, 0.6), "height": u(0.8, 1.3)}
    if name == "torus":
        return {"major": u(0.6, 0.8), "minor": u(0.15, 0.3)}
    if name == "plane":
        return {"size": (u(0.8, 1.2), u(0.8, 1.2))}
    if name == "pyramid":
        return {"base": u(0.8, 1.2), "height": u(0.7, 1.2)}
    return {"radius": u(0.4, 0.6), "pitch": u(0.3, 0.45), "turns": u(2.5, 3.5)}


def _rotation_z(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class ShapeSpec:
    name: str
    n_points: int = 256
    jitter: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.name not in CLASSES:
            raise ConfigurationError(f"unknown shape class {self.name!r}")
        if self.n_points < 8:
            raise ContractViolation("a shape needs at least 8 points")
        if self.jitter < 0:
            raise ContractViolation("jitter must be non-negative")


def gen_shape(spec, sample_id=""):
    """Sample a randomly sized, randomly z-rotated shape and normalize it into the unit cube."""
    rng = np.random.default_rng(spec.seed)
    params = _random_params(spec.name, rng)
    pts = sample_surface(spec.name, spec.n_points, rng, **params)
    pts = pts @ _rotation_z(rng.uniform(0, 2 * np.pi)).T
    if spec.jitter > 0:
        pts = pts + rng.normal(0.0, spec.jitter, size=pts.shape)
    return PointCloud(normalize_unit_cube(pts), CLASSES.index(spec.name), sample_id)


# -- datasets -----------------------------------------------------------------


@dataclass
class ShapeDataset:
    clouds: list
    split: list
    classes: tuple = CLASSES
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def subset(self, which):
        return [c for c, s in zip(self.clouds, self.split) if s == which]

    @property
    def train(self):
        return self.subset("train")

    @property
    def test(self):
        return self.subset("test")

    def arrays(self, which):
        sub = self.subset(which)
        return [c.points for c in sub], np.array([c.label for c in sub], dtype=np.int64)


def gen_dataset(classes=CLASSES, per_class=200, n_points=256, jitter=0.0, seed=0, train_fraction=0.8):
    """Generate a balanced corpus with a per-class 80/20 train/test split.

    Every sample has its own RNG stream derived from ``(seed, class, index)``.
    """
    if per_class < 2:
        raise ContractViolation("per_class must be at least 2")
    classes = tuple(classes)
    n_train = min(max(1, int(round(train_fraction * per_class))), per_class - 1)
    clouds, split = [], []
    split_rng = np.random.default_rng([seed, 1])
    for name in classes:
        if name not in CLASSES:
            raise ConfigurationError(f"unknown shape class {name!r}")
        c = CLASSES.index(name)
        in_train = np.zeros(per_class, dtype=bool)
        in_train[split_rng.permutation(per_class)[:n_train]] = True
        for i in range(per_class):
            seed_i = int(np.random.SeedSequence([seed, c, i]).generate_state(1)[0])
            spec = ShapeSpec(name, n_points, jitter, seed_i)
            clouds.append(gen_shape(spec, f"{name}_{i:04d}"))
            split.append("train" if in_train[i] else "test")
    meta = {"per_class": per_class, "n_points": n_points, "jitter": jitter}
    return ShapeDataset(clouds, split, classes, seed, meta)


def write_dataset(dataset, out_dir):
    """Write every cloud as XYZ plus a JSON manifest; returns the manifest path."""
    os.makedirs(os.path.join(out_dir, "clouds"), exist_ok=True)
    samples = []
    for cloud, split in zip(dataset.clouds, dataset.split):
        rel = os.path.join("clouds", f"{cloud.id}.xyz")
        save_xyz(os.path.join(out_dir, rel), cloud.points)
        samples.append({"id": cloud.id, "path": rel, "label": int(cloud.label), "split": split})
    manifest = {
        "seed": dataset.seed,
        "classes": list(dataset.classes),
        **dataset.meta,
        "samples": samples,
    }
    path = os.path.join(out_dir, MANIFEST_NAME)
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1)
    return path


def read_manifest(path):
    if os.path.isdir(path):
        path = os.path.join(path, MANIFEST_NAME)
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    with open(path) as fh:
        manifest = json.load(fh)
    root = os.path.dirname(path)
    clouds, split = [], []
    for s in manifest["samples"]:
        pts = load_xyz(os.path.join(root, s["path"]))
        clouds.append(PointCloud(pts, int(s["label"]), s["id"]))
        split.append(s["split"])
    meta = {k: v for k, v in manifest.items() if k not in ("samples", "seed", "classes")}
    return ShapeDataset(clouds, split, tuple(manifest["classes"]), manifest["seed"], meta)


# -- file formats -------------------------------------------------------------


def save_xyz(path, points):
    P = check_cloud(points)
    np.savetxt(path, P, fmt="%.17g")


def load_xyz(path):
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) != 3:
                raise ParseError(f"expected 3 values, got {len(parts)}", path, lineno)
            try:
                rows.append([float(v) for v in parts])
            except ValueError:
                raise ParseError(f"non-numeric value in {text!r}", path, lineno) from None
    if not rows:
        raise ContractViolation(f"{path}: no points")
    return check_cloud(np.array(rows))


def _off_tokens(path):
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if text:
                yield lineno, text


def load_off(path, n_points=1024, seed=0, return_mesh=False):
    """Read an OFF mesh and sample ``n_points`` uniformly by triangle area.

    Polygonal faces are fan-triangulated. Some ModelNet files glue the
    counts onto the header line (``OFF490 518 0``); that form is accepted.
    """
    lines = _off_tokens(path)
    try:
        lineno, header = next(lines)
    except StopIteration:
        raise ParseError("empty file", path) from None
    if not header.startswith("OFF"):
        raise ParseError(f"expected 'OFF' header, got {header[:20]!r}", path, lineno)
    rest = header[3:].split()
    try:
        if not rest:
            lineno, counts = next(lines)
            rest = counts.split()
        n_verts, n_faces = int(rest[0]), int(rest[1])
    except (StopIteration, ValueError, IndexError):
        raise ParseError("malformed vertex/face counts", path, lineno) from None
    verts = []
    for _ in range(n_verts):
        try:
            lineno, text = next(lines)
            verts.append([float(v) for v in text.split()[:3]])
        except StopIteration:
            raise ParseError("unexpected end of file in vertex list", path) from None
        except ValueError:
            raise ParseError(f"bad vertex {text!r}", path, lineno) from None
        if len(verts[-1]) != 3:
            raise ParseError(f"bad vertex {text!r}", path, lineno)
    tris = []
    for _ in range(n_faces):
        try:
            lineno, text = next(lines)
            vals = [int(v) for v in text.split()]
        except StopIteration:
            raise ParseError("unexpected end of file in face list", path) from None
        except ValueError:
            raise ParseError(f"bad face {text!r}", path, lineno) from None
        k, idx = vals[0], vals[1:1 + vals[0]]
        if k < 3 or len(idx) != k or min(idx) < 0 or max(idx) >= n_verts:
            raise ParseError(f"bad face {text!r}", path, lineno)
        tris.extend((idx[0], idx[j], idx[j + 1]) for j in range(1, k - 1))
    if not tris:
        raise ContractViolation(f"{path}: mesh has no faces")
    V, T = np.array(verts), np.array(tris)
    rng = np.random.default_rng(seed)
    pts, _ = sample_triangles(V, T, n_points, rng)
    cloud = PointCloud(normalize_unit_cube(pts), None, os.path.splitext(os.path.basename(path))[0])
    if return_mesh:
        return cloud, V, T
    return cloud
