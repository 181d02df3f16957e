"""Dataset generation, image conversion, and point-cloud file I/O.

Synthetic analytic surfaces (sphere, cube, torus, cylinder) stand in for
large mesh benchmarks: clouds are uniformly surface-sampled, optionally
carry analytic normals as features and part labels, and are normalized to
the unit ball. The image task is a two-class 16x16 bar-orientation set used
to compare against a grid CNN of the same channel structure.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from pointconv.pointops import PointCloud

__all__ = [
    "SHAPE_NAMES",
    "SyntheticShapeSpec",
    "ImageCloudSpec",
    "DataError",
    "sample_shape",
    "generate_shapes",
    "classification_dataset",
    "segmentation_dataset",
    "bar_images",
    "image_to_pointcloud",
    "save_cloud",
    "load_cloud",
    "write_manifest",
    "load_manifest",
]

SHAPE_NAMES = ("sphere", "cube", "torus", "cylinder")

TORUS_MAJOR = 0.7
TORUS_MINOR = 0.3
CYLINDER_RADIUS = 0.5
CYLINDER_HEIGHT = 1.2


class DataError(ValueError):
    """Malformed dataset files or specs."""


@dataclass
class SyntheticShapeSpec:
    shape: str
    n_points: int = 512
    noise_sigma: float = 0.0
    seed: int = 0
    parts: bool = False          # per-point part labels where defined
    normals: bool = True         # analytic surface normals as features

    def __post_init__(self):
        if self.shape not in SHAPE_NAMES:
            raise DataError(f"unknown shape {self.shape!r}, expected one of {SHAPE_NAMES}")
        if self.n_points < 8:
            raise DataError(f"n_points must be >= 8, got {self.n_points}")


def _sphere(rng, n):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v, v.copy(), None


def _cube(rng, n):
    # six equal faces of a cube with half-edge 1
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-1, 1, (n, 2))
    pos = np.zeros((n, 3))
    normals = np.zeros((n, 3))
    axis, sign = face // 2, np.where(face % 2 == 0, 1.0, -1.0)
    for a in range(3):
        rest = [i for i in range(3) if i != a]
        m = axis == a
        pos[m, a] = sign[m]
        pos[np.ix_(m, rest)] = uv[m]
        normals[m, a] = sign[m]
    return pos, normals, None


def _torus(rng, n):
    # uniform over area: major angle uniform, minor angle by rejection with
    # density proportional to (R + r cos v)
    u = rng.uniform(0, 2 * np.pi, n)
    v = np.empty(n)
    filled = 0
    while filled < n:
        cand = rng.uniform(0, 2 * np.pi, 2 * (n - filled))
        accept = rng.uniform(0, 1, cand.size) < (TORUS_MAJOR + TORUS_MINOR * np.cos(cand)) / (TORUS_MAJOR + TORUS_MINOR)
        take = cand[accept][: n - filled]
        v[filled:filled + take.size] = take
        filled += take.size
    ring = TORUS_MAJOR + TORUS_MINOR * np.cos(v)
    pos = np.stack([ring * np.cos(u), ring * np.sin(u), TORUS_MINOR * np.sin(v)], axis=1)
    normals = np.stack([np.cos(v) * np.cos(u), np.cos(v) * np.sin(u), np.sin(v)], axis=1)
    # upper/lower halves: invariant to the rotation augmentation axis
    parts = (np.sin(v) < 0).astype(np.int64)
    return pos, normals, parts


def _cylinder(rng, n):
    r, h = CYLINDER_RADIUS, CYLINDER_HEIGHT
    side_area = 2 * np.pi * r * h
    cap_area = np.pi * r * r
    p_side = side_area / (side_area + 2 * cap_area)
    on_side = rng.uniform(0, 1, n) < p_side
    pos = np.zeros((n, 3))
    normals = np.zeros((n, 3))

    ns = int(on_side.sum())
    theta = rng.uniform(0, 2 * np.pi, ns)
    pos[on_side] = np.stack([r * np.cos(theta), r * np.sin(theta), rng.uniform(-h / 2, h / 2, ns)], axis=1)
    normals[on_side] = np.stack([np.cos(theta), np.sin(theta), np.zeros(ns)], axis=1)

    nc = n - ns
    rad = r * np.sqrt(rng.uniform(0, 1, nc))
    phi = rng.uniform(0, 2 * np.pi, nc)
    z = np.where(rng.uniform(0, 1, nc) < 0.5, h / 2, -h / 2)
    pos[~on_side] = np.stack([rad * np.cos(phi), rad * np.sin(phi), z], axis=1)
    normals[~on_side] = np.stack([np.zeros(nc), np.zeros(nc), np.sign(z)], axis=1)

    parts = (~on_side).astype(np.int64)  # side = 0, caps = 1
    return pos, normals, parts


_SAMPLERS = {"sphere": _sphere, "cube": _cube, "torus": _torus, "cylinder": _cylinder}


def sample_shape(spec: SyntheticShapeSpec) -> PointCloud:
    """Sample one cloud from an analytic surface, normalized to the unit ball."""
    rng = np.random.default_rng(spec.seed)
    pos, normals, parts = _SAMPLERS[spec.shape](rng, spec.n_points)
    if spec.noise_sigma > 0:
        pos = pos + rng.normal(0, spec.noise_sigma, pos.shape)
    pos = pos / np.linalg.norm(pos, axis=1).max()
    features = normals.astype(np.float32) if spec.normals else None
    labels = parts if (spec.parts and parts is not None) else None
    return PointCloud(pos, features=features, labels=labels, normalized=True,
                      has_normals=spec.normals)


def generate_shapes(specs, counts, seed) -> list[PointCloud]:
    """Labeled clouds: ``counts[i]`` draws of ``specs[i]`` with class label i.

    Per-cloud seeds derive from ``seed`` so generation is reproducible and
    clouds are independent.
    """
    root = np.random.default_rng(seed)
    out = []
    for label, (spec, count) in enumerate(zip(specs, counts)):
        if count < 1:
            raise DataError(f"count for class {label} must be >= 1")
        for _ in range(count):
            sub = SyntheticShapeSpec(
                shape=spec.shape, n_points=spec.n_points, noise_sigma=spec.noise_sigma,
                seed=int(root.integers(2**63)), parts=spec.parts, normals=spec.normals,
            )
            cloud = sample_shape(sub)
            if not sub.parts:
                cloud.labels = label
            out.append(cloud)
    return out


def classification_dataset(n_train, n_test, n_points=512, seed=0, noise_sigma=0.01, normals=True):
    """Four-class shape classification set; returns (train, test, class names)."""
    specs = [SyntheticShapeSpec(s, n_points=n_points, noise_sigma=noise_sigma, normals=normals)
             for s in SHAPE_NAMES]
    per_train = [n_train // len(specs)] * len(specs)
    per_test = [n_test // len(specs)] * len(specs)
    train = generate_shapes(specs, per_train, seed)
    test = generate_shapes(specs, per_test, seed + 1)
    return train, test, list(SHAPE_NAMES)


def segmentation_dataset(n_train, n_test, n_points=1024, seed=0, noise_sigma=0.01, normals=True):
    """Two-part segmentation set of torus halves and cylinder cap/side."""
    specs = [
        SyntheticShapeSpec("torus", n_points=n_points, noise_sigma=noise_sigma, parts=True, normals=normals),
        SyntheticShapeSpec("cylinder", n_points=n_points, noise_sigma=noise_sigma, parts=True, normals=normals),
    ]
    split = [(n_train + 1) // 2, n_train // 2]
    train = generate_shapes(specs, split, seed)
    test = generate_shapes(specs, [(n_test + 1) // 2, n_test // 2], seed + 1)
    return train, test, ["part0", "part1"]


# -- image task ----------------------------------------------------------------


@dataclass
class ImageCloudSpec:
    side: int = 16
    channels: int = 1
    scaling: bool = True  # normalize grid coordinates to the unit ball


def bar_images(n, side=16, seed=0, noise=0.1):
    """Two-class images: axis-aligned bar (0) vs diagonal bar (1)."""
    rng = np.random.default_rng(seed)
    images = np.zeros((n, side, side, 1), dtype=np.float32)
    labels = rng.integers(0, 2, size=n)
    ii, jj = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    for i in range(n):
        offset = int(rng.integers(2, side - 4))
        width = int(rng.integers(2, 4))
        if labels[i] == 0:
            mask = (ii >= offset) & (ii < offset + width)
            if rng.uniform() < 0.5:
                mask = mask.T
        else:
            diag = ii - jj if rng.uniform() < 0.5 else ii + jj - (side - 1)
            shift = int(rng.integers(-side // 4, side // 4 + 1))
            mask = np.abs(diag - shift) < width
        img = mask.astype(np.float32) + rng.normal(0, noise, (side, side)).astype(np.float32)
        images[i, :, :, 0] = np.clip(img, 0.0, 1.0)
    return images, labels


def image_to_pointcloud(image: np.ndarray, spec: ImageCloudSpec | None = None) -> PointCloud:
    """One 2-d point per pixel at centered grid coordinates, channels in [0, 1]."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[:, :, None]
    side = img.shape[0]
    if img.shape[1] != side:
        raise DataError(f"image must be square, got {img.shape[:2]}")
    spec = spec or ImageCloudSpec(side=side, channels=img.shape[2])
    coords = np.arange(side, dtype=np.float64) - (side - 1) / 2.0
    ii, jj = np.meshgrid(coords, coords, indexing="ij")
    pos = np.stack([ii.reshape(-1), jj.reshape(-1)], axis=1)
    if spec.scaling:
        pos /= np.linalg.norm(pos, axis=1).max()
    feats = img.reshape(side * side, -1).astype(np.float32)
    if feats.max() > 1.0:
        feats = feats / 255.0
    return PointCloud(pos, features=feats, normalized=spec.scaling)


def image_dataset(n_train=512, n_test=128, side=16, seed=0):
    """Bar-orientation clouds; returns (train, test, class names)."""
    imgs, labels = bar_images(n_train + n_test, side=side, seed=seed)
    clouds = []
    for img, lab in zip(imgs, labels):
        cloud = image_to_pointcloud(img)
        cloud.labels = int(lab)
        clouds.append(cloud)
    return clouds[:n_train], clouds[n_train:], ["axis", "diagonal"]


# -- file I/O ------------------------------------------------------------------

PCB_MAGIC = b"PCB1"


def save_cloud(cloud: PointCloud, path) -> None:
    path = str(path)
    if path.endswith(".xyz"):
        if cloud.dim != 3:
            raise DataError(f".xyz requires 3-d positions, cloud is {cloud.dim}-d")
        feats = cloud.features if cloud.features is not None else np.zeros((cloud.n, 0))
        np.savetxt(path, np.hstack([cloud.positions, feats]), fmt="%.8g")
    elif path.endswith(".pcb"):
        feats = cloud.features if cloud.features is not None else np.zeros((cloud.n, 0), dtype=np.float32)
        with open(path, "wb") as fh:
            fh.write(PCB_MAGIC)
            fh.write(struct.pack("<III", cloud.n, cloud.dim, feats.shape[1]))
            fh.write(cloud.positions.astype("<f4").tobytes())
            fh.write(np.ascontiguousarray(feats, dtype="<f4").tobytes())
            if cloud.labels is None:
                fh.write(struct.pack("<B", 0))
            elif np.isscalar(cloud.labels) or np.ndim(cloud.labels) == 0:
                fh.write(struct.pack("<B", 1))
                fh.write(struct.pack("<i", int(cloud.labels)))
            else:
                fh.write(struct.pack("<B", 2))
                fh.write(np.asarray(cloud.labels, dtype="<i4").tobytes())
    else:
        raise DataError(f"unsupported extension for {path!r} (use .xyz or .pcb)")


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise DataError(f"truncated .pcb: expected {n} bytes for {what}, got {len(data)}")
    return data


def load_cloud(path) -> PointCloud:
    path = str(path)
    if path.endswith(".xyz"):
        rows = np.loadtxt(path, ndmin=2)
        if rows.shape[1] < 3:
            raise DataError(f".xyz needs at least 3 columns, got {rows.shape[1]}")
        if not np.isfinite(rows[:, :3]).all():
            raise DataError("NaN coordinates in .xyz file")
        feats = rows[:, 3:].astype(np.float32) if rows.shape[1] > 3 else None
        return PointCloud(rows[:, :3], features=feats)
    if path.endswith(".pcb"):
        with open(path, "rb") as fh:
            if _read_exact(fh, 4, "magic") != PCB_MAGIC:
                raise DataError("bad magic: not a .pcb file")
            n, dim, c = struct.unpack("<III", _read_exact(fh, 12, "header"))
            pos = np.frombuffer(_read_exact(fh, 4 * n * dim, "positions"), dtype="<f4").reshape(n, dim)
            feats = None
            if c:
                feats = np.frombuffer(_read_exact(fh, 4 * n * c, "features"), dtype="<f4").reshape(n, c).copy()
            flag = struct.unpack("<B", _read_exact(fh, 1, "label flag"))[0]
            labels = None
            if flag == 1:
                labels = struct.unpack("<i", _read_exact(fh, 4, "label"))[0]
            elif flag == 2:
                labels = np.frombuffer(_read_exact(fh, 4 * n, "labels"), dtype="<i4").astype(np.int64)
            elif flag != 0:
                raise DataError(f"unknown label flag {flag}")
            if not np.isfinite(pos).all():
                raise DataError("NaN coordinates in .pcb file")
            return PointCloud(np.asarray(pos, dtype=np.float64), features=feats, labels=labels)
    raise DataError(f"unsupported extension for {path!r} (use .xyz or .pcb)")


def write_manifest(path, entries, class_names=None, task="classify") -> None:
    """JSON manifest: list of {path, label} plus dataset metadata."""
    doc = {"task": task, "class_names": class_names or [], "clouds": entries}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def load_manifest(path):
    import os

    with open(path) as fh:
        doc = json.load(fh)
    base = os.path.dirname(os.path.abspath(path))
    clouds = []
    for entry in doc["clouds"]:
        cloud_path = entry["path"]
        if not os.path.isabs(cloud_path):
            cloud_path = os.path.join(base, cloud_path)
        cloud = load_cloud(cloud_path)
        if "label" in entry and entry["label"] is not None:
            cloud.labels = entry["label"]
        if "has_normals" in entry:
            cloud.has_normals = bool(entry["has_normals"])
        clouds.append(cloud)
    return clouds, doc
