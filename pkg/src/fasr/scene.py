"""World model: Gaussian clouds, pinhole cameras, synthetic scenes, scene files.

Scenes are normalized to a unit bounding sphere so one set of perturbation
radii works across seeds.  Ground truth for the bundled benchmarks comes from
rendering a hidden "teacher" cloud; the trainee starts from a jittered copy of
the teacher plus extra random Gaussians.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

SCENE_MAGIC = "fasr-scene"
SCENE_VERSION = "v1"
FLOAT_DUMP_MAGIC = b"fasr-f32 v1"


class SceneFormatError(ValueError):
    """Raised when a scene or image file cannot be parsed."""


@dataclass
class Gaussian3D:
    """One anisotropic Gaussian primitive.

    ``rot`` is stored unnormalized and normalized at use sites; ``scale_log``
    holds the log of the per-axis standard deviation so the deviation itself
    is always positive.
    """

    mean: np.ndarray
    rot: np.ndarray
    scale_log: np.ndarray
    opacity_logit: float
    color_dc: np.ndarray
    color_ac: np.ndarray | None = None


class GaussianCloud:
    """Ordered collection of Gaussians stored as struct-of-arrays.

    Attribute arrays share the leading axis; ``color_ac`` is either an
    (n, 3, 3) array of degree-1 view-dependent coefficients for every
    Gaussian or ``None`` for the whole cloud.
    """

    def __init__(self, means, rots, scales_log, opacity_logit, color_dc,
                 color_ac=None, generation_counter=0):
        self.means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
        n = self.means.shape[0]
        self.rots = np.asarray(rots, dtype=np.float64).reshape(n, 4)
        self.scales_log = np.asarray(scales_log, dtype=np.float64).reshape(n, 3)
        self.opacity_logit = np.asarray(opacity_logit, dtype=np.float64).reshape(n)
        self.color_dc = np.asarray(color_dc, dtype=np.float64).reshape(n, 3)
        if color_ac is None:
            self.color_ac = None
        else:
            self.color_ac = np.asarray(color_ac, dtype=np.float64).reshape(n, 3, 3)
        self.generation_counter = int(generation_counter)

    @property
    def n(self) -> int:
        return self.means.shape[0]

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            self.means.copy(), self.rots.copy(), self.scales_log.copy(),
            self.opacity_logit.copy(), self.color_dc.copy(),
            None if self.color_ac is None else self.color_ac.copy(),
            self.generation_counter)

    def gaussian(self, i: int) -> Gaussian3D:
        return Gaussian3D(
            self.means[i].copy(), self.rots[i].copy(), self.scales_log[i].copy(),
            float(self.opacity_logit[i]), self.color_dc[i].copy(),
            None if self.color_ac is None else self.color_ac[i].copy())

    @classmethod
    def from_gaussians(cls, gaussians) -> "GaussianCloud":
        if not gaussians:
            raise ValueError("cloud must hold at least one Gaussian")
        has_ac = gaussians[0].color_ac is not None
        return cls(
            [g.mean for g in gaussians],
            [g.rot for g in gaussians],
            [g.scale_log for g in gaussians],
            [g.opacity_logit for g in gaussians],
            [g.color_dc for g in gaussians],
            [g.color_ac for g in gaussians] if has_ac else None)

    def allclose(self, other: "GaussianCloud", rtol=0.0, atol=0.0) -> bool:
        if self.n != other.n or (self.color_ac is None) != (other.color_ac is None):
            return False
        pairs = [(self.means, other.means), (self.rots, other.rots),
                 (self.scales_log, other.scales_log),
                 (self.opacity_logit, other.opacity_logit),
                 (self.color_dc, other.color_dc)]
        if self.color_ac is not None:
            pairs.append((self.color_ac, other.color_ac))
        return all(np.allclose(a, b, rtol=rtol, atol=atol) for a, b in pairs)


@dataclass
class Camera:
    """Pinhole view. ``rotation`` maps world to camera coordinates (x right,
    y down, z forward); pixel (ix, iy) has continuous center (ix, iy) and
    the principal point sits at ((width-1)/2, (height-1)/2)."""

    rotation: np.ndarray
    translation: np.ndarray
    focal: float
    width: int
    height: int
    id: str = ""

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.isfinite(self.rotation).all() or not np.isfinite(self.translation).all():
            raise ValueError(f"camera {self.id!r}: non-finite pose")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-6:
            raise ValueError(f"camera {self.id!r}: rotation not orthonormal (err {err:.2e})")
        if not self.focal > 0:
            raise ValueError(f"camera {self.id!r}: focal must be positive, got {self.focal}")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def principal_point(self) -> tuple[float, float]:
        return (self.width - 1) / 2.0, (self.height - 1) / 2.0


@dataclass
class ImageBuffer:
    """An H x W x 3 image. Values are raw render output (pre-clamp); clamping
    to [0, 1] happens on file-output paths only so loss gradients stay exact."""

    width: int
    height: int
    pixels: np.ndarray

    @classmethod
    def from_array(cls, pixels) -> "ImageBuffer":
        pixels = np.asarray(pixels, dtype=np.float64)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ValueError(f"expected HxWx3 array, got shape {pixels.shape}")
        return cls(width=pixels.shape[1], height=pixels.shape[0], pixels=pixels)

    def clamped(self) -> np.ndarray:
        return np.clip(self.pixels, 0.0, 1.0)


def look_at_camera(eye, target, focal, width, height, cam_id="",
                   up=(0.0, 0.0, 1.0)) -> Camera:
    """Build a camera at ``eye`` looking at ``target`` with image y pointing
    away from the world ``up`` direction."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    z = target - eye
    nz = np.linalg.norm(z)
    if nz < 1e-12:
        raise ValueError("camera eye coincides with target")
    z = z / nz
    x = np.cross(z, up)
    nx = np.linalg.norm(x)
    if nx < 1e-8:  # looking straight along up: pick an arbitrary stable axis
        x = np.cross(z, np.array([0.0, 1.0, 0.0]))
        nx = np.linalg.norm(x)
    x = x / nx
    y = np.cross(z, x)
    rotation = np.stack([x, y, z], axis=0)
    translation = -rotation @ eye
    return Camera(rotation, translation, float(focal), int(width), int(height), cam_id)


def _camera_eyes(seed, n_cameras, layout, radius=2.3, elevation=0.25):
    rng = np.random.default_rng(np.random.PCG64(seed + 0x5EED))
    eyes = []
    if layout == "ring":
        for k in range(n_cameras):
            az = 2.0 * math.pi * k / n_cameras
            eyes.append(radius * np.array([
                math.cos(az) * math.cos(elevation),
                math.sin(az) * math.cos(elevation),
                math.sin(elevation)]))
    elif layout == "arc":
        span = math.radians(100.0)
        for k in range(n_cameras):
            az = -span / 2 + span * (k / max(n_cameras - 1, 1))
            el = elevation + 0.1 * math.sin(3.1 * k)
            eyes.append(radius * np.array([
                math.cos(az) * math.cos(el),
                math.sin(az) * math.cos(el),
                math.sin(el)]))
    elif layout == "random":
        for _ in range(n_cameras):
            az = rng.uniform(0.0, 2.0 * math.pi)
            el = rng.uniform(-0.9, 0.9)
            r = rng.uniform(2.0, 2.6)
            eyes.append(r * np.array([
                math.cos(az) * math.cos(el),
                math.sin(az) * math.cos(el),
                math.sin(el)]))
    else:
        raise ValueError(f"unknown layout {layout!r}; expected ring, arc or random")
    return eyes


def gen_synthetic_scene(seed, n_gaussians, n_cameras, layout="ring",
                        width=64, height=64):
    """Generate a reproducible teacher cloud plus cameras looking at it.

    Gaussians are clustered so scenes mix fine detail with smooth background;
    positions are normalized into a 0.9-radius ball so every Gaussian lies in
    each camera frustum.
    """
    if n_gaussians < 1:
        raise ValueError("n_gaussians must be >= 1")
    if n_cameras < 2:
        raise ValueError("n_cameras must be >= 2 (train/test split needs both sides)")
    rng = np.random.default_rng(np.random.PCG64(seed))

    n_detail = max(1, int(round(0.6 * n_gaussians)))
    n_medium = int(round(0.25 * n_gaussians))
    n_back = n_gaussians - n_detail - n_medium
    if n_back < 0:
        n_medium += n_back
        n_back = 0

    n_clusters = int(rng.integers(3, 7))
    centers = rng.uniform(-0.7, 0.7, size=(n_clusters, 3))

    means, log_scales = [], []
    for _ in range(n_detail):
        c = centers[rng.integers(0, n_clusters)]
        means.append(c + rng.normal(0.0, 0.15, size=3))
        log_scales.append(np.log(rng.uniform(0.02, 0.06)))
    for _ in range(n_medium):
        c = centers[rng.integers(0, n_clusters)]
        means.append(c + rng.normal(0.0, 0.25, size=3))
        log_scales.append(np.log(rng.uniform(0.06, 0.15)))
    for _ in range(n_back):
        means.append(rng.uniform(-0.9, 0.9, size=3))
        log_scales.append(np.log(rng.uniform(0.15, 0.35)))

    means = np.asarray(means)
    r_max = np.linalg.norm(means, axis=1).max()
    if r_max > 1e-9:
        means *= 0.9 / max(r_max, 0.9)  # normalize into the unit bounding sphere

    base = np.asarray(log_scales)[:, None]
    scales_log = base + rng.uniform(-0.5, 0.5, size=(n_gaussians, 3))

    rots = rng.normal(size=(n_gaussians, 4))
    rots /= np.linalg.norm(rots, axis=1, keepdims=True)

    opacity_logit = np.concatenate([
        rng.uniform(1.0, 3.0, size=n_detail + n_medium),
        rng.uniform(0.5, 2.0, size=n_back)])
    color_dc = rng.uniform(0.1, 0.9, size=(n_gaussians, 3))
    color_ac = rng.uniform(-0.08, 0.08, size=(n_gaussians, 3, 3))

    cloud = GaussianCloud(means, rots, scales_log, opacity_logit, color_dc, color_ac)

    focal = 0.9 * width
    cameras = [
        look_at_camera(eye, np.zeros(3), focal, width, height, cam_id=f"cam{k:02d}")
        for k, eye in enumerate(_camera_eyes(seed, n_cameras, layout))
    ]
    return cloud, cameras


def init_trainee(teacher: GaussianCloud, seed, mean_noise=0.04,
                 extra_fraction=0.2) -> GaussianCloud:
    """Jitter the teacher into a nontrivial initialization and add a fraction
    of random extra Gaussians, mimicking an imperfect point-cloud seed."""
    rng = np.random.default_rng(np.random.PCG64(seed + 7717))
    n = teacher.n
    means = teacher.means + rng.normal(0.0, mean_noise, size=(n, 3))
    rots = teacher.rots + rng.normal(0.0, 0.1, size=(n, 4))
    scales_log = teacher.scales_log + rng.normal(0.0, 0.2, size=(n, 3))
    opacity_logit = np.full(n, _logit(0.25)) + rng.normal(0.0, 0.3, size=n)
    color_dc = np.clip(teacher.color_dc + rng.normal(0.0, 0.15, size=(n, 3)), 0.02, 0.98)
    color_ac = np.zeros((n, 3, 3))

    n_extra = int(round(extra_fraction * n))
    if n_extra:
        means = np.vstack([means, rng.uniform(-0.9, 0.9, size=(n_extra, 3))])
        extra_rots = rng.normal(size=(n_extra, 4))
        rots = np.vstack([rots, extra_rots])
        scales_log = np.vstack([scales_log,
                                np.log(rng.uniform(0.04, 0.15, size=(n_extra, 3)))])
        opacity_logit = np.concatenate([opacity_logit,
                                        np.full(n_extra, _logit(0.15))])
        color_dc = np.vstack([color_dc, rng.uniform(0.2, 0.8, size=(n_extra, 3))])
        color_ac = np.vstack([color_ac, np.zeros((n_extra, 3, 3))])
    return GaussianCloud(means, rots, scales_log, opacity_logit, color_dc, color_ac)


def _logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def split_views(cameras, n_train, seed=0):
    """Split cameras into train/test with training views maximally spread.

    Greedy farthest-point selection on camera centers: start from the camera
    farthest from the centroid of all centers, then repeatedly add the camera
    maximizing its minimum distance to the chosen set. Ties break toward the
    lower index, so the result is deterministic; ``seed`` is accepted for
    interface stability but unused by the deterministic rule.
    """
    if not 1 <= n_train < len(cameras):
        raise ValueError(f"n_train must satisfy 1 <= n_train < {len(cameras)}, got {n_train}")
    centers = np.stack([c.center for c in cameras])
    centroid = centers.mean(axis=0)
    chosen = [int(np.argmax(np.linalg.norm(centers - centroid, axis=1)))]
    while len(chosen) < n_train:
        dists = np.min(
            np.linalg.norm(centers[:, None, :] - centers[chosen][None, :, :], axis=2),
            axis=1)
        dists[chosen] = -1.0
        chosen.append(int(np.argmax(dists)))
    chosen_set = set(chosen)
    train = [cameras[i] for i in sorted(chosen)]
    test = [cameras[i] for i in range(len(cameras)) if i not in chosen_set]
    return train, test


# ---------------------------------------------------------------------------
# Scene files: textual, full-precision (repr round-trips doubles exactly).

def _fmt(x: float) -> str:
    return repr(float(x))


def save_scene(path, cloud: GaussianCloud, cameras) -> None:
    buf = io.StringIO()
    ac_terms = 0 if cloud.color_ac is None else 3
    buf.write(f"{SCENE_MAGIC} {SCENE_VERSION}\n")
    buf.write(f"gaussians {cloud.n} ac {ac_terms} generation {cloud.generation_counter}\n")
    for i in range(cloud.n):
        parts = (list(cloud.means[i]) + list(cloud.rots[i]) + list(cloud.scales_log[i])
                 + [cloud.opacity_logit[i]] + list(cloud.color_dc[i]))
        if ac_terms:
            parts += list(cloud.color_ac[i].reshape(-1))
        buf.write("g " + " ".join(_fmt(v) for v in parts) + "\n")
    buf.write(f"cameras {len(cameras)}\n")
    for cam in cameras:
        parts = list(cam.rotation.reshape(-1)) + list(cam.translation) + [cam.focal]
        buf.write(f"c {cam.id} " + " ".join(_fmt(v) for v in parts)
                  + f" {cam.width} {cam.height}\n")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(buf.getvalue())


def load_scene(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise SceneFormatError("line 1: empty scene file")
    header = lines[0].split()
    if len(header) != 2 or header[0] != SCENE_MAGIC:
        raise SceneFormatError(f"line 1: not a {SCENE_MAGIC} file")
    if header[1] != SCENE_VERSION:
        raise SceneFormatError(
            f"line 1: unsupported version {header[1]!r} (expected {SCENE_VERSION})")

    def parse_floats(tokens, count, lineno):
        if len(tokens) != count:
            raise SceneFormatError(f"line {lineno}: expected {count} values, got {len(tokens)}")
        try:
            return [float(t) for t in tokens]
        except ValueError as exc:
            raise SceneFormatError(f"line {lineno}: bad number ({exc})") from None

    idx = 1
    if idx >= len(lines):
        raise SceneFormatError(f"line {idx + 1}: missing gaussian header")
    gh = lines[idx].split()
    if len(gh) != 6 or gh[0] != "gaussians" or gh[2] != "ac" or gh[4] != "generation":
        raise SceneFormatError(f"line {idx + 1}: malformed gaussian header")
    n, ac_terms, generation = int(gh[1]), int(gh[3]), int(gh[5])
    idx += 1

    per_g = 3 + 4 + 3 + 1 + 3 + 3 * ac_terms
    gauss_rows = []
    for _ in range(n):
        if idx >= len(lines):
            raise SceneFormatError(f"line {idx + 1}: truncated file, expected gaussian record")
        tokens = lines[idx].split()
        if not tokens or tokens[0] != "g":
            raise SceneFormatError(f"line {idx + 1}: expected gaussian record")
        gauss_rows.append(parse_floats(tokens[1:], per_g, idx + 1))
        idx += 1
    rows = np.asarray(gauss_rows, dtype=np.float64).reshape(n, per_g)
    cloud = GaussianCloud(
        rows[:, 0:3], rows[:, 3:7], rows[:, 7:10], rows[:, 10], rows[:, 11:14],
        rows[:, 14:14 + 9].reshape(n, 3, 3) if ac_terms else None,
        generation_counter=generation)

    if idx >= len(lines):
        raise SceneFormatError(f"line {idx + 1}: missing camera header")
    ch = lines[idx].split()
    if len(ch) != 2 or ch[0] != "cameras":
        raise SceneFormatError(f"line {idx + 1}: malformed camera header")
    m = int(ch[1])
    idx += 1
    cameras = []
    for _ in range(m):
        if idx >= len(lines):
            raise SceneFormatError(f"line {idx + 1}: truncated file, expected camera record")
        tokens = lines[idx].split()
        if len(tokens) != 2 + 9 + 3 + 1 + 2 or tokens[0] != "c":
            raise SceneFormatError(f"line {idx + 1}: malformed camera record")
        cam_id = tokens[1]
        vals = parse_floats(tokens[2:15], 13, idx + 1)
        try:
            cameras.append(Camera(
                np.asarray(vals[0:9]).reshape(3, 3), np.asarray(vals[9:12]),
                vals[12], int(tokens[15]), int(tokens[16]), cam_id))
        except ValueError as exc:
            raise SceneFormatError(f"line {idx + 1}: {exc}") from None
        idx += 1
    return cloud, cameras


# ---------------------------------------------------------------------------
# Image files.

def write_ppm(path, pixels) -> None:
    """8-bit binary PPM; input clamped to [0, 1] before quantization."""
    arr = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P6":
        raise SceneFormatError("not a binary PPM (P6) file")
    w, h = (int(t) for t in parts[1].split())
    if parts[2] != b"255":
        raise SceneFormatError("unsupported PPM maxval")
    data = np.frombuffer(parts[3][:w * h * 3], dtype=np.uint8)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def write_pgm16(path, values) -> None:
    """16-bit binary PGM (big-endian per format spec) for index/heat maps."""
    arr = np.asarray(values)
    if arr.dtype.kind == "f":
        lo, hi = float(arr.min()), float(arr.max())
        scale = 65535.0 / (hi - lo) if hi > lo else 0.0
        arr = np.round((arr - lo) * scale)
    data = arr.astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n65535\n".encode("ascii"))
        fh.write(data.tobytes())


def write_float_dump(path, array) -> None:
    """Raw 32-bit float planar dump used for loss-exact image comparisons."""
    arr = np.asarray(array, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    with open(path, "wb") as fh:
        fh.write(FLOAT_DUMP_MAGIC + f" {h} {w} {c}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr.transpose(2, 0, 1)).astype("<f4").tobytes())


def read_float_dump(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline()
        if not header.startswith(FLOAT_DUMP_MAGIC):
            raise SceneFormatError("not a float dump file")
        h, w, c = (int(t) for t in header[len(FLOAT_DUMP_MAGIC):].split())
        data = np.frombuffer(fh.read(h * w * c * 4), dtype="<f4")
    arr = data.reshape(c, h, w).transpose(1, 2, 0).astype(np.float64)
    return arr[:, :, 0] if c == 1 else arr
