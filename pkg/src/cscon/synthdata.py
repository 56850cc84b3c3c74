"""ShapesMini: procedural shape datasets, augmentations and on-disk format.

Record format (little-endian), one file per sample::

    b"CSPC" | u32 point_count | i32 label | point_count * 3 float32

The manifest is a text file, one sample per line, tab-separated:
``split  class_id  relative_path``. Lines starting with ``#`` carry
``key=value`` metadata (seeds, counts, point count).
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import PointCloud, normalize_cloud

RECORD_MAGIC = b"CSPC"
_HEADER = struct.Struct("<4sIi")

SHAPE_CLASSES = ("sphere", "cube", "cylinder", "cone", "torus", "pyramid", "plane", "helix")
CLASS_IDS = {name: i for i, name in enumerate(SHAPE_CLASSES)}
SPLITS = ("train", "test")


class FormatError(ValueError):
    """A dataset file or manifest could not be parsed."""


class AugmentPolicy(str, enum.Enum):
    NONE = "none"
    JITTER = "jitter"
    SCALE = "scale"
    ROTATION = "rotation"
    SCALE_TRANSLATE = "scale_translate"
    SCALE_TRANSLATE_ROTATION = "scale_translate_rotation"
    ROTATION_SCALE_TRANSLATE = "rotation_scale_translate"


@dataclass
class AugmentParams:
    scale_low: float = 2.0 / 3.0
    scale_high: float = 1.5
    translate: float = 0.2
    jitter_sigma: float = 0.01
    jitter_clip: float = 0.05


# -- shape samplers ----------------------------------------------------------
# each returns (n, 3) surface points in a canonical, z-up frame


def _area_split(rng, n, areas):
    p = np.asarray(areas, dtype=np.float64)
    return rng.multinomial(n, p / p.sum())


def _sphere(rng, n):
    # antipodal pairs keep the centroid at the origin, so normalization
    # does not distort radii
    v = rng.normal(size=((n + 1) // 2, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return np.concatenate([v, -v])[:n]


def _box(rng, n):
    half = rng.uniform(0.5, 1.0, size=3)
    ax, ay, az = half
    # faces: +-x (ay*az), +-y (ax*az), +-z (ax*ay)
    counts = _area_split(rng, n, [ay * az] * 2 + [ax * az] * 2 + [ax * ay] * 2)
    parts = []
    for face, c in enumerate(counts):
        u = rng.uniform(-1, 1, size=(c, 3)) * half
        axis, sign = divmod(face, 2)
        u[:, axis] = half[axis] * (1 if sign == 0 else -1)
        parts.append(u)
    return np.concatenate(parts)


def _cylinder(rng, n):
    r = rng.uniform(0.3, 0.6)
    h = rng.uniform(0.8, 1.6)
    side, top, bottom = _area_split(rng, n, [2 * np.pi * r * h, np.pi * r * r, np.pi * r * r])
    th = rng.uniform(0, 2 * np.pi, side)
    pts = [np.stack([r * np.cos(th), r * np.sin(th), rng.uniform(-h / 2, h / 2, side)], 1)]
    for c, z in ((top, h / 2), (bottom, -h / 2)):
        rr = r * np.sqrt(rng.uniform(0, 1, c))
        t = rng.uniform(0, 2 * np.pi, c)
        pts.append(np.stack([rr * np.cos(t), rr * np.sin(t), np.full(c, z)], 1))
    return np.concatenate(pts)


def _cone(rng, n):
    r = rng.uniform(0.4, 0.8)
    h = rng.uniform(0.8, 1.6)
    slant = np.hypot(r, h)
    side, base = _area_split(rng, n, [np.pi * r * slant, np.pi * r * r])
    # lateral area density grows linearly with distance from the apex
    s = np.sqrt(rng.uniform(0, 1, side))
    th = rng.uniform(0, 2 * np.pi, side)
    lat = np.stack([s * r * np.cos(th), s * r * np.sin(th), h / 2 - s * h], 1)
    rr = r * np.sqrt(rng.uniform(0, 1, base))
    t = rng.uniform(0, 2 * np.pi, base)
    bot = np.stack([rr * np.cos(t), rr * np.sin(t), np.full(base, -h / 2)], 1)
    return np.concatenate([lat, bot])


def _torus(rng, n):
    big = rng.uniform(0.6, 0.8)
    small = rng.uniform(0.15, 0.35)
    out = np.empty((0, 3))
    # rejection sampling on the tube angle gives area-uniform points
    while len(out) < n:
        m = 2 * (n - len(out))
        u = rng.uniform(0, 2 * np.pi, m)
        v = rng.uniform(0, 2 * np.pi, m)
        keep = rng.uniform(0, 1, m) < (big + small * np.cos(v)) / (big + small)
        u, v = u[keep], v[keep]
        ring = big + small * np.cos(v)
        out = np.concatenate([out, np.stack([ring * np.cos(u), ring * np.sin(u), small * np.sin(v)], 1)])
    return out[:n]


def _pyramid(rng, n):
    b = rng.uniform(0.4, 0.8)
    h = rng.uniform(0.8, 1.6)
    apex = np.array([0.0, 0.0, h / 2])
    corners = np.array([[b, b], [-b, b], [-b, -b], [b, -b]], dtype=np.float64)
    tris = []
    for i in range(4):
        c0 = np.append(corners[i], -h / 2)
        c1 = np.append(corners[(i + 1) % 4], -h / 2)
        tris.append((apex, c0, c1))
    face_area = [0.5 * np.linalg.norm(np.cross(t[1] - t[0], t[2] - t[0])) for t in tris]
    counts = _area_split(rng, n, face_area + [4 * b * b])
    parts = []
    for (a, c0, c1), c in zip(tris, counts[:4]):
        u, v = rng.uniform(0, 1, (2, c))
        flip = u + v > 1
        u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
        parts.append(a + u[:, None] * (c0 - a) + v[:, None] * (c1 - a))
    c = counts[4]
    parts.append(np.stack([rng.uniform(-b, b, c), rng.uniform(-b, b, c), np.full(c, -h / 2)], 1))
    return np.concatenate(parts)


def _plane(rng, n):
    ax, ay = rng.uniform(0.7, 1.0, size=2)
    return np.stack([rng.uniform(-ax, ax, n), rng.uniform(-ay, ay, n), np.zeros(n)], 1)


def _helix(rng, n):
    radius = rng.uniform(0.4, 0.7)
    turns = rng.uniform(2.0, 4.0)
    height = rng.uniform(1.2, 2.0)
    tube = rng.uniform(0.04, 0.1)
    t = rng.uniform(0, 1, n)
    ang = 2 * np.pi * turns * t
    axis_pts = np.stack([radius * np.cos(ang), radius * np.sin(ang), height * (t - 0.5)], 1)
    off = rng.normal(size=(n, 3))
    off /= np.linalg.norm(off, axis=1, keepdims=True)
    return axis_pts + tube * off


_SAMPLERS = {
    "sphere": _sphere,
    "cube": _box,
    "cylinder": _cylinder,
    "cone": _cone,
    "torus": _torus,
    "pyramid": _pyramid,
    "plane": _plane,
    "helix": _helix,
}


def _bounded_noise(rng, n, level):
    if level <= 0:
        return np.zeros((n, 3))
    d = rng.normal(scale=level / 2, size=(n, 3))
    norm = np.linalg.norm(d, axis=1, keepdims=True)
    return d * np.minimum(1.0, level / np.maximum(norm, 1e-12))


POSES = ("random", "canonical")


def generate_shape(
    shape_class: str | int, n_points: int, seed: int, noise: float = 0.01, pose: str = "random"
) -> PointCloud:
    """Sample ``n_points`` from one shape's surface, perturb, pose and normalize.

    Noise displacements are Gaussian with their length clipped at ``noise``.
    The sphere and the plane are displaced only along their normal, with a
    peak-to-peak spread of ``noise``, so after normalization every point
    stays within ``noise`` of the ideal surface.

    ``pose="random"`` applies a uniform SO(3) rotation per sample, so class
    identity cannot be read off the canonical axes.
    """
    if isinstance(shape_class, (int, np.integer)):
        if not 0 <= shape_class < len(SHAPE_CLASSES):
            raise ValueError(f"unknown shape class id {shape_class}")
        name = SHAPE_CLASSES[shape_class]
    else:
        name = shape_class
        if name not in CLASS_IDS:
            raise ValueError(f"unknown shape class {name!r}; expected one of {SHAPE_CLASSES}")
    if n_points < 16:
        raise ValueError(f"n_points must be >= 16, got {n_points}")
    if pose not in POSES:
        raise ValueError(f"pose must be one of {POSES}, got {pose!r}")
    rng = np.random.default_rng(seed)
    pts = _SAMPLERS[name](rng, n_points)
    if name == "sphere":
        # one radial factor per antipodal pair keeps the centroid in place
        f = rng.uniform(-noise / 2, noise / 2, size=((n_points + 1) // 2, 1))
        pts = pts * (1.0 + np.concatenate([f, f])[:n_points])
    elif name == "plane":
        pts[:, 2] = rng.uniform(-noise / 2, noise / 2, size=n_points)
    else:
        pts = pts + _bounded_noise(rng, n_points, noise)
    pts = pts[rng.permutation(n_points)]
    if pose == "random":
        pts = pts @ random_rotation(rng).T
    return normalize_cloud(PointCloud(pts, label=CLASS_IDS[name]))


# -- augmentation ------------------------------------------------------------


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    return Rotation.random(random_state=rng).as_matrix()


def augment(
    cloud: PointCloud,
    policy: AugmentPolicy | str,
    rng: np.random.Generator,
    params: AugmentParams | None = None,
    info: dict | None = None,
) -> PointCloud:
    """Apply one augmentation policy. ``info``, if given, receives the drawn parameters."""
    policy = AugmentPolicy(policy)
    params = params or AugmentParams()
    pts = cloud.points.astype(np.float64)
    info = {} if info is None else info

    def scale_translate(x):
        s = rng.uniform(params.scale_low, params.scale_high)
        t = rng.uniform(-params.translate, params.translate, size=3)
        info["scale"], info["translate"] = s, t
        return x * s + t

    def rotate(x):
        r = random_rotation(rng)
        info["rotation"] = r
        return x @ r.T

    if policy is AugmentPolicy.NONE:
        return PointCloud(cloud.points.copy(), cloud.label)
    if policy is AugmentPolicy.JITTER:
        noise = np.clip(
            rng.normal(0.0, params.jitter_sigma, size=pts.shape), -params.jitter_clip, params.jitter_clip
        )
        info["jitter"] = noise
        pts = pts + noise
    elif policy is AugmentPolicy.SCALE:
        s = rng.uniform(params.scale_low, params.scale_high)
        info["scale"] = s
        pts = pts * s
    elif policy is AugmentPolicy.ROTATION:
        pts = rotate(pts)
    elif policy is AugmentPolicy.SCALE_TRANSLATE:
        pts = scale_translate(pts)
    elif policy is AugmentPolicy.SCALE_TRANSLATE_ROTATION:
        pts = rotate(scale_translate(pts))
    elif policy is AugmentPolicy.ROTATION_SCALE_TRANSLATE:
        pts = scale_translate(rotate(pts))
    return PointCloud(pts, cloud.label)


def augment_batch(points: np.ndarray, policy, rng, params: AugmentParams | None = None) -> np.ndarray:
    return np.stack([augment(PointCloud(p), policy, rng, params).points for p in points])


# -- datasets ----------------------------------------------------------------


@dataclass
class DataConfig:
    n_train_per_class: int = 200
    n_test_per_class: int = 50
    n_points: int = 1024
    seed: int = 0
    noise: float = 0.01
    classes: tuple[str, ...] = SHAPE_CLASSES
    pose: str = "random"

    def __post_init__(self):
        if self.n_points < 16:
            raise ValueError(f"n_points must be >= 16, got {self.n_points}")
        if self.n_train_per_class < 1 or self.n_test_per_class < 1:
            raise ValueError("n_train_per_class and n_test_per_class must be >= 1")
        if self.noise < 0:
            raise ValueError(f"noise must be >= 0, got {self.noise}")
        if self.pose not in POSES:
            raise ValueError(f"pose must be one of {POSES}, got {self.pose!r}")
        unknown = [c for c in self.classes if c not in CLASS_IDS]
        if unknown or not self.classes:
            raise ValueError(f"classes must be a non-empty subset of {list(CLASS_IDS)}, got {list(self.classes)}")

    def per_class(self, split: str) -> int:
        return {"train": self.n_train_per_class, "test": self.n_test_per_class}[split]


def split_seed(seed: int, split: str) -> int:
    return int(np.random.SeedSequence([seed, SPLITS.index(split)]).generate_state(1)[0])


def sample_seed(split_seed_: int, class_id: int, index: int) -> int:
    return int(np.random.SeedSequence([split_seed_, class_id, index]).generate_state(1)[0])


def generate_split(config: DataConfig, split: str) -> list[PointCloud]:
    base = split_seed(config.seed, split)
    out = []
    for name in config.classes:
        cid = CLASS_IDS[name]
        for i in range(config.per_class(split)):
            out.append(generate_shape(cid, config.n_points, sample_seed(base, cid, i), config.noise, config.pose))
    return out


@dataclass
class DatasetManifest:
    root: Path
    entries: list[tuple[str, int, str]] = field(default_factory=list)
    meta: dict[str, str] = field(default_factory=dict)

    @property
    def path(self) -> Path:
        return self.root / "manifest.tsv"

    def split(self, name: str) -> list[tuple[str, int, str]]:
        return [e for e in self.entries if e[0] == name]

    def counts(self) -> dict[str, int]:
        return {s: len(self.split(s)) for s in SPLITS}


def write_record(path: Path, cloud: PointCloud) -> None:
    pts = np.ascontiguousarray(cloud.points, dtype="<f4")
    label = -1 if cloud.label is None else int(cloud.label)
    Path(path).write_bytes(_HEADER.pack(RECORD_MAGIC, len(pts), label) + pts.tobytes())


def read_record(path: Path) -> PointCloud:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except FileNotFoundError:
        raise FormatError(f"{path}: missing file (byte offset 0)") from None
    if len(buf) < _HEADER.size:
        raise FormatError(f"{path}: truncated header at byte offset {len(buf)}")
    magic, count, label = _HEADER.unpack_from(buf, 0)
    if magic != RECORD_MAGIC:
        raise FormatError(f"{path}: bad magic at byte offset 0")
    need = _HEADER.size + 12 * count
    if len(buf) != need:
        off = min(len(buf), need)
        raise FormatError(f"{path}: expected {need} bytes, payload ends at byte offset {off}")
    if count < 1:
        raise FormatError(f"{path}: empty point record at byte offset 4")
    pts = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(count, 3).astype(np.float32)
    return PointCloud(pts, None if label < 0 else label)


def build_dataset(config: DataConfig, out_dir) -> DatasetManifest:
    root = Path(out_dir)
    manifest = DatasetManifest(root=root)
    manifest.meta = {
        "seed": str(config.seed),
        "n_points": str(config.n_points),
        "noise": repr(config.noise),
        "n_train_per_class": str(config.n_train_per_class),
        "n_test_per_class": str(config.n_test_per_class),
        "classes": ",".join(config.classes),
        "pose": config.pose,
    }
    for split in SPLITS:
        manifest.meta[f"seed.{split}"] = str(split_seed(config.seed, split))
        (root / split).mkdir(parents=True, exist_ok=True)
        for j, cloud in enumerate(generate_split(config, split)):
            rel = f"{split}/{j:05d}.pcr"
            write_record(root / rel, cloud)
            manifest.entries.append((split, int(cloud.label), rel))
    write_manifest(manifest)
    return manifest


def write_manifest(manifest: DatasetManifest) -> None:
    lines = [f"# {k}={v}" for k, v in manifest.meta.items()]
    lines += [f"{s}\t{c}\t{p}" for s, c, p in manifest.entries]
    manifest.root.mkdir(parents=True, exist_ok=True)
    manifest.path.write_text("\n".join(lines) + "\n")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.tsv"
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise FormatError(f"{path}: missing manifest (byte offset 0)") from None
    manifest = DatasetManifest(root=path.parent)
    offset = 0
    for line in text.splitlines(keepends=True):
        row = line.rstrip("\n")
        if row.startswith("#"):
            key, _, val = row[1:].strip().partition("=")
            manifest.meta[key] = val
        elif row:
            parts = row.split("\t")
            if len(parts) != 3 or not parts[1].lstrip("-").isdigit():
                raise FormatError(f"{path}: malformed manifest line at byte offset {offset}")
            manifest.entries.append((parts[0], int(parts[1]), parts[2]))
        offset += len(line.encode("utf-8"))
    return manifest


def load_dataset(manifest: DatasetManifest | str | Path, split: str | None = None) -> list[PointCloud]:
    if not isinstance(manifest, DatasetManifest):
        manifest = read_manifest(manifest)
    entries = manifest.entries if split is None else manifest.split(split)
    out = []
    for _, cid, rel in entries:
        cloud = read_record(manifest.root / rel)
        if cloud.label != cid:
            raise FormatError(f"{manifest.root / rel}: label {cloud.label} disagrees with manifest at byte offset 8")
        out.append(cloud)
    return out


def stack(clouds: Sequence[PointCloud]) -> tuple[np.ndarray, np.ndarray]:
    """Clouds of equal size -> (n, p, 3) points and (n,) labels."""
    pts = np.stack([c.points for c in clouds]).astype(np.float32)
    labels = np.array([-1 if c.label is None else c.label for c in clouds], dtype=np.int64)
    return pts, labels
