"""Synthetic multi-view dynamic scenes with analytic motion, and dataset I/O.

Dataset directory layout::

    cameras.json         intrinsics / extrinsics per camera, one entry per frame
    frames/00000.png     8-bit preview of each frame
    frames/00000.f64     raw little-endian float64 (H, W, 3) row-major pixels
    particles.bin        ground-truth particles at t = 0 (snapshot format)
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .autodiff import ContractError
from .gaussians import ParticleSet, axis_angle_to_quat, quat_multiply, save_snapshot, load_snapshot
from .render import Camera, look_at, render_particles

KINDS = ("rotation", "translation", "falling_ball", "compound")


@dataclass
class SceneSpec:
    kind: str = "rotation"
    angular_velocity: float = 1.5  # rad per unit time
    axis: tuple[float, float, float] = (0.0, 0.0, 1.0)
    velocity: tuple[float, float, float] = (0.6, 0.0, 0.0)
    gravity: float = 1.5
    initial_height: float = 0.5
    n_gaussians: int = 200
    n_cameras: int = 12
    n_timesteps: int = 21
    resolution: int = 64
    camera_distance: float = 3.0
    fov_degrees: float = 40.0
    gaussian_scale: float = 0.045

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown scene kind {self.kind!r}; expected one of {KINDS}")
        self.axis = tuple(float(a) for a in self.axis)
        self.velocity = tuple(float(v) for v in self.velocity)


class Trajectory:
    """Analytic rigid motion of the scene template, evaluable at any time."""

    def __init__(self, spec: SceneSpec):
        self.spec = spec
        self.axis = np.asarray(spec.axis, dtype=float) / np.linalg.norm(spec.axis)

    def angle(self, t: float) -> float:
        if self.spec.kind in ("rotation", "compound"):
            return self.spec.angular_velocity * t
        return 0.0

    def offset(self, t: float) -> np.ndarray:
        s = self.spec
        if s.kind in ("translation", "compound"):
            return np.asarray(s.velocity) * t
        if s.kind == "falling_ball":
            return np.array([0.0, 0.0, -0.5 * s.gravity * t * t])
        return np.zeros(3)

    def rotation(self, t: float) -> np.ndarray:
        a = self.angle(t)
        k = np.array([[0, -self.axis[2], self.axis[1]], [self.axis[2], 0, -self.axis[0]], [-self.axis[1], self.axis[0], 0]])
        return np.eye(3) + np.sin(a) * k + (1 - np.cos(a)) * k @ k

    def positions(self, x0, t: float) -> np.ndarray:
        """Where points that sat at ``x0`` at time 0 are at time ``t``."""
        return np.asarray(x0, dtype=float) @ self.rotation(t).T + self.offset(t)

    def particles(self, base: ParticleSet, t: float) -> ParticleSet:
        ps = base.copy()
        ps.mu = self.positions(base.mu, t)
        dq = axis_angle_to_quat(self.axis, self.angle(t))
        ps.rot = quat_multiply(np.broadcast_to(dq, base.rot.shape), base.unit_rot)
        return ps


def template_particles(spec: SceneSpec, rng: np.random.Generator) -> ParticleSet:
    """Colored template object at time 0 (a lopsided block, or a ball for ``falling_ball``)."""
    n = spec.n_gaussians
    if spec.kind == "falling_ball":
        d = rng.normal(size=(n, 3))
        pts = 0.35 * d / np.linalg.norm(d, axis=1, keepdims=True) * rng.uniform(0.6, 1.0, (n, 1)) ** (1 / 3)
        pts[:, 2] += spec.initial_height
    else:
        pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * np.array([0.6, 0.35, 0.25])
        # a bump on one end breaks the symmetry so rotations are visible
        bump = pts[:, 0] > 0.3
        pts[bump, 2] += 0.15
    c = (pts - pts.min(axis=0)) / np.maximum(np.ptp(pts, axis=0), 1e-9)
    colors = np.clip(np.stack([0.15 + 0.8 * c[:, 0], 0.2 + 0.6 * c[:, 1], 0.9 - 0.7 * c[:, 0]], axis=1), 0.0, 1.0)
    scale = spec.gaussian_scale * rng.uniform(0.7, 1.3, size=(n, 3))
    rot = rng.normal(size=(n, 4))
    return ParticleSet.from_kernels(pts, rot, scale, np.full(n, 0.9), colors)


def camera_rig(spec: SceneSpec, target=(0.0, 0.0, 0.0)) -> list[Camera]:
    """Cameras spread over a sphere around ``target`` (golden-angle spiral, above and below)."""
    res = spec.resolution
    f = 0.5 * res / np.tan(np.radians(spec.fov_degrees) / 2)
    cams = []
    n = spec.n_cameras
    for i in range(n):
        z = 0.75 - 1.2 * (i + 0.5) / n
        r = np.sqrt(1 - z * z)
        phi = i * np.pi * (3 - np.sqrt(5))
        eye = np.asarray(target) + spec.camera_distance * np.array([r * np.cos(phi), r * np.sin(phi), z])
        cams.append(Camera(look_at(eye, target), f, f, res / 2, res / 2, res, res))
    return cams


@dataclass
class Frame:
    camera: int
    t: float
    image: np.ndarray


@dataclass
class Dataset:
    cameras: list[Camera]
    frames: list[Frame]
    split_threshold: float = 0.75
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for fr in self.frames:
            if not 0.0 <= fr.t <= 1.0:
                raise ContractError(f"frame timestamp {fr.t} outside [0, 1]")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def timestamps(self) -> list[float]:
        return sorted({fr.t for fr in self.frames})

    def subset(self, frames: list[Frame]) -> "Dataset":
        return Dataset(self.cameras, frames, self.split_threshold, dict(self.meta))


def timestamps(n: int) -> np.ndarray:
    """``n`` evenly spaced times covering [0, 1]; computed as i / (n - 1) so grid values are exact."""
    return np.array([i / (n - 1) for i in range(n)]) if n > 1 else np.zeros(1)


def generate_scene(spec: SceneSpec, seed: int = 0) -> tuple[Dataset, ParticleSet, Trajectory]:
    """Render every (camera, time) view of the analytically moving template."""
    rng = np.random.default_rng(seed)
    base = template_particles(spec, rng)
    traj = Trajectory(spec)
    ts = timestamps(spec.n_timesteps)
    path = np.array([traj.offset(t) for t in ts]) + base.mu.mean(axis=0)
    target = 0.5 * (path.min(axis=0) + path.max(axis=0))
    cams = camera_rig(spec, target)
    frames = []
    for t in ts:
        ps = traj.particles(base, float(t))
        for ci, cam in enumerate(cams):
            frames.append(Frame(ci, float(t), render_particles(ps, cam)))
    meta = {"spec": asdict(spec), "seed": seed}
    return Dataset(cams, frames, meta=meta), base, traj


def split_dataset(ds: Dataset, threshold: float | None = None, inclusive: bool = False) -> tuple[Dataset, Dataset]:
    """Partition frames into (train, extrapolation) by timestamp.

    By default frames with ``t < threshold`` train and the threshold frame itself is
    held out; ``inclusive=True`` trains on ``t <= threshold`` instead.
    """
    threshold = ds.split_threshold if threshold is None else threshold
    if not 0.0 < threshold < 1.0:
        raise ContractError("split threshold must lie strictly between 0 and 1")
    if inclusive:
        train = [f for f in ds.frames if f.t <= threshold]
    else:
        train = [f for f in ds.frames if f.t < threshold]
    keep = {id(f) for f in train}
    extra = [f for f in ds.frames if id(f) not in keep]
    if not train or not extra:
        raise ContractError("split leaves one side empty")
    return ds.subset(train), ds.subset(extra)


def to_png(image: np.ndarray, path) -> None:
    Image.fromarray(np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)).save(path)


def write_image_f64(image: np.ndarray, path) -> None:
    Path(path).write_bytes(np.ascontiguousarray(image, dtype="<f8").tobytes())


def read_image_f64(path, height: int, width: int) -> np.ndarray:
    return np.frombuffer(Path(path).read_bytes(), dtype="<f8").reshape(height, width, 3).astype(float)


def save_dataset(ds: Dataset, root, particles: ParticleSet | None = None) -> None:
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, fr in enumerate(ds.frames):
        stem = f"{i:05d}"
        cam = ds.cameras[fr.camera]
        write_image_f64(fr.image, root / "frames" / f"{stem}.f64")
        to_png(fr.image, root / "frames" / f"{stem}.png")
        entries.append({"frame_id": i, "camera": fr.camera, "t": fr.t, "file": f"frames/{stem}", **cam.to_dict()})
    doc = {
        "version": 1,
        "split_threshold": ds.split_threshold,
        "n_cameras": len(ds.cameras),
        "cameras": [c.to_dict() for c in ds.cameras],
        "frames": entries,
        "meta": ds.meta,
    }
    (root / "cameras.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    if particles is not None:
        save_snapshot(particles, root / "particles.bin")


def load_dataset(root) -> Dataset:
    root = Path(root)
    doc = json.loads((root / "cameras.json").read_text())
    cams = [Camera.from_dict(c) for c in doc["cameras"]]
    frames = []
    for e in doc["frames"]:
        img = read_image_f64(root / (e["file"] + ".f64"), int(e["height"]), int(e["width"]))
        frames.append(Frame(int(e["camera"]), float(e["t"]), img))
    return Dataset(cams, frames, float(doc["split_threshold"]), doc.get("meta", {}))


def load_ground_truth(root) -> tuple[ParticleSet, Trajectory] | None:
    root = Path(root)
    if not (root / "particles.bin").exists():
        return None
    doc = json.loads((root / "cameras.json").read_text())
    spec = SceneSpec(**doc["meta"]["spec"])
    return load_snapshot(root / "particles.bin"), Trajectory(spec)
