"""Gaussian kernels, particle sets and covariance construction."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import ContractError, Var

PARAM_KEYS = ("mu", "rot", "log_scale", "opacity", "color")


def sigmoid(x):
    return 0.5 * (np.tanh(0.5 * np.asarray(x, dtype=float)) + 1.0)


def logit(p, eps: float = 1e-6):
    p = np.clip(np.asarray(p, dtype=float), eps, 1.0 - eps)
    return np.log(p) - np.log1p(-p)


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion ``(w, x, y, z)``; works on (..., 4) arrays."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return r.reshape(q.shape[:-1] + (3, 3))


def quat_multiply(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    w1, x1, y1, z1 = np.moveaxis(a, -1, 0)
    w2, x2, y2, z2 = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def axis_angle_to_quat(axis, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    h = 0.5 * angle
    return np.concatenate([[np.cos(h)], np.sin(h) * axis])


def build_covariance(rot, scale) -> np.ndarray:
    """Σ = R S Sᵀ Rᵀ for a unit quaternion and positive per-axis scales."""
    r = quat_to_matrix(rot)
    s = np.asarray(scale, dtype=float)
    m = r * s[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


def quat_to_matrix_var(q: Var) -> Var:
    """Differentiable version of :func:`quat_to_matrix` for (N, 4) inputs."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    entries = [
        1 - 2 * (yy + zz), 2 * (xy - wz), 2 * (xz + wy),
        2 * (xy + wz), 1 - 2 * (xx + zz), 2 * (yz - wx),
        2 * (xz - wy), 2 * (yz + wx), 1 - 2 * (xx + yy),
    ]
    return ad.stack(entries, axis=1).reshape(q.shape[0], 3, 3)


def covariance_var(unit_rot: Var, scale: Var) -> Var:
    r = quat_to_matrix_var(unit_rot)
    m = r * scale.reshape(scale.shape[0], 1, 3)
    return ad.matmul(m, ad.swapaxes(m, -1, -2))


@dataclass
class GaussianKernel:
    """One Gaussian in its public (constrained) form."""

    mu: np.ndarray
    rot: np.ndarray
    scale: np.ndarray
    opacity: float
    color: np.ndarray

    @property
    def covariance(self) -> np.ndarray:
        return build_covariance(self.rot, self.scale)


@dataclass
class RawKernel:
    """Unconstrained parameterization: any quaternion, log-scale, opacity logit."""

    mu: np.ndarray
    rot: np.ndarray
    log_scale: np.ndarray
    opacity: float
    color: np.ndarray


def normalize_kernel(raw: RawKernel) -> GaussianKernel:
    q = np.asarray(raw.rot, dtype=float)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ContractError("zero quaternion cannot be normalized")
    return GaussianKernel(
        mu=np.asarray(raw.mu, dtype=float),
        rot=q / n,
        scale=np.exp(np.asarray(raw.log_scale, dtype=float)),
        opacity=float(sigmoid(raw.opacity)),
        color=np.clip(np.asarray(raw.color, dtype=float), 0.0, 1.0),
    )


@dataclass
class ParticleSet:
    """Raw parameter arrays of N Gaussian particles plus their local latent rows.

    ``color`` is stored as a logit, like opacity, so that it stays in [0, 1].
    """

    mu: np.ndarray
    rot: np.ndarray
    log_scale: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    latent_local: np.ndarray | None = None

    def __len__(self) -> int:
        return self.mu.shape[0]

    @classmethod
    def from_kernels(cls, mu, rot, scale, opacity, color) -> "ParticleSet":
        rot = np.asarray(rot, dtype=float)
        rot = rot / np.linalg.norm(rot, axis=-1, keepdims=True)
        return cls(
            mu=np.array(mu, dtype=float),
            rot=rot,
            log_scale=np.log(np.asarray(scale, dtype=float)),
            opacity=logit(opacity),
            color=logit(color),
        )

    @classmethod
    def empty(cls) -> "ParticleSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)))

    def params(self) -> dict[str, np.ndarray]:
        return {f"gs.{k}": getattr(self, k) for k in PARAM_KEYS}

    def copy(self) -> "ParticleSet":
        ll = None if self.latent_local is None else self.latent_local.copy()
        return ParticleSet(*(getattr(self, k).copy() for k in PARAM_KEYS), latent_local=ll)

    def subset(self, idx) -> "ParticleSet":
        ll = None if self.latent_local is None else self.latent_local[idx]
        return ParticleSet(*(getattr(self, k)[idx] for k in PARAM_KEYS), latent_local=ll)

    def concatenate(self, other: "ParticleSet") -> "ParticleSet":
        arrs = [np.concatenate([getattr(self, k), getattr(other, k)]) for k in PARAM_KEYS]
        ll = None
        if self.latent_local is not None and other.latent_local is not None:
            ll = np.concatenate([self.latent_local, other.latent_local])
        return ParticleSet(*arrs, latent_local=ll)

    def kernel(self, i: int) -> GaussianKernel:
        return normalize_kernel(
            RawKernel(self.mu[i], self.rot[i], self.log_scale[i], self.opacity[i], sigmoid(self.color[i]))
        )

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity)

    @property
    def colors(self) -> np.ndarray:
        return sigmoid(self.color)

    @property
    def unit_rot(self) -> np.ndarray:
        return self.rot / np.linalg.norm(self.rot, axis=-1, keepdims=True)


def knn_scale(points: np.ndarray, k: int = 3, floor: float = 1e-4) -> np.ndarray:
    """Mean distance to the ``k`` nearest other points (initial isotropic scale)."""
    n = len(points)
    if n < 2:
        return np.full(n, 0.05)
    k = min(k, n - 1)
    d, _ = cKDTree(points).query(points, k=k + 1)
    return np.maximum(d[:, 1:].mean(axis=1), floor)


def init_particles(points, rng: np.random.Generator, colors=None, opacity: float = 0.1) -> ParticleSet:
    """Isotropic, identity-rotation particles at ``points`` sized by neighbor spacing."""
    points = np.asarray(points, dtype=float)
    n = len(points)
    s = knn_scale(points)
    if colors is None:
        colors = np.full((n, 3), 0.5)
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    return ParticleSet.from_kernels(points, rot, np.repeat(s[:, None], 3, axis=1), np.full(n, opacity), colors)


def init_unit_cube(count: int, rng: np.random.Generator) -> ParticleSet:
    return init_particles(rng.uniform(-0.5, 0.5, size=(count, 3)), rng)


# Particle-set snapshot: little-endian.
#   magic b"GPSN", u32 version=1, u64 count, u32 latent_dim,
#   then per particle: f64 mu[3], rot[4], scale[3], opacity, color[3], latent[latent_dim]
SNAPSHOT_MAGIC = b"GPSN"
SNAPSHOT_VERSION = 1


def save_snapshot(particles: ParticleSet, path) -> None:
    n = len(particles)
    lat = particles.latent_local if particles.latent_local is not None else np.zeros((n, 0))
    rec = np.concatenate(
        [
            particles.mu,
            particles.unit_rot,
            particles.scales,
            particles.opacities[:, None],
            particles.colors,
            lat,
        ],
        axis=1,
    )
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(struct.pack("<IQI", SNAPSHOT_VERSION, n, lat.shape[1]))
        fh.write(np.ascontiguousarray(rec, dtype="<f8").tobytes())


def load_snapshot(path) -> ParticleSet:
    data = Path(path).read_bytes()
    if data[:4] != SNAPSHOT_MAGIC:
        raise ContractError(f"{path}: not a particle snapshot")
    version, n, ld = struct.unpack_from("<IQI", data, 4)
    if version != SNAPSHOT_VERSION:
        raise ContractError(f"{path}: unsupported snapshot version {version}")
    rec = np.frombuffer(data, dtype="<f8", offset=20).reshape(n, 14 + ld).astype(float)
    ps = ParticleSet.from_kernels(rec[:, 0:3], rec[:, 3:7], rec[:, 7:10], rec[:, 10], rec[:, 11:14])
    ps.latent_local = rec[:, 14:] if ld else None
    return ps
