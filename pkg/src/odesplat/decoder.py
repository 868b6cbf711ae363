"""Latent state to per-particle deformation, and deformation application.

A deformation moves a Gaussian by ``mu' = mu + A mu + b`` and perturbs its
rotation, log-scale and color.  ``A`` and ``b`` are assembled from bounded
rotation / scaling / shear / velocity / nonlinear components, each given as a
unit direction times a tanh-limited magnitude.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Graph, NumericError, Var
from .gaussians import GaussianKernel, quat_multiply
from .nn import MLP

# layout of the motion head output
ROT_DIR, ROT_MAG = slice(0, 3), 3
SCL_DIR, SCL_MAG = slice(4, 7), 7
SHR_DIR, SHR_MAG = slice(8, 11), 11
VEL_DIR, VEL_MAG = slice(12, 15), 15
NLN_DIR, NLN_MAG = slice(16, 19), 19
AFFINE_RAW = 20
DIR_SLICES = (ROT_DIR, SCL_DIR, SHR_DIR, VEL_DIR, NLN_DIR)
MAG_COLUMNS = (ROT_MAG, SCL_MAG, SHR_MAG, VEL_MAG, NLN_MAG)
DIR_EPS = 1e-8


@dataclass
class Caps:
    rotation: float = 0.5
    scale: float = 0.2
    shear: float = 0.2
    translation: float = 0.5

    def spectral_bound(self) -> float:
        """Upper bound on the spectral norm of any composed ``A``."""
        return 2.0 * np.sin(min(self.rotation, np.pi) / 2.0) + self.scale + np.sqrt(2.0) * self.shear


@dataclass
class Deformation:
    """Per-particle transform; every field has a leading particle axis."""

    A: np.ndarray
    b: np.ndarray
    dR: np.ndarray
    dS: np.ndarray
    dC: np.ndarray

    @classmethod
    def identity(cls, n: int) -> "Deformation":
        return cls(np.zeros((n, 3, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros((n, 3)))

    def __getitem__(self, i) -> "Deformation":
        return Deformation(self.A[i], self.b[i], self.dR[i], self.dS[i], self.dC[i])


@dataclass
class DeformationVars:
    A: Var
    b: Var
    dR: Var
    dS: Var
    dC: Var | None = None

    @classmethod
    def zeros(cls, graph: Graph, n: int) -> "DeformationVars":
        c = graph.constant
        return cls(c(np.zeros((n, 3, 3))), c(np.zeros((n, 3))), c(np.zeros((n, 4))), c(np.zeros((n, 3))), c(np.zeros((n, 3))))

    def numpy(self) -> Deformation:
        n = self.b.shape[0]
        dc = np.zeros((n, 3)) if self.dC is None else self.dC.value
        return Deformation(self.A.value, self.b.value, self.dR.value, self.dS.value, dc)


def skew(v: Var) -> Var:
    """Cross-product matrices of (N, 3) vectors, shape (N, 3, 3)."""
    n = v.shape[0]
    x, y, z = v[:, 0], v[:, 1], v[:, 2]
    zero = v.graph.constant(np.zeros(n))
    return ad.stack([zero, -z, y, z, zero, -x, -y, x, zero], axis=1).reshape(n, 3, 3)


def _sym_offdiag(v: Var) -> Var:
    n = v.shape[0]
    xy, xz, yz = v[:, 0], v[:, 1], v[:, 2]
    zero = v.graph.constant(np.zeros(n))
    return ad.stack([zero, xy, xz, xy, zero, yz, xz, yz, zero], axis=1).reshape(n, 3, 3)


def _diag(v: Var) -> Var:
    n = v.shape[0]
    zero = v.graph.constant(np.zeros(n))
    return ad.stack([v[:, 0], zero, zero, zero, v[:, 1], zero, zero, zero, v[:, 2]], axis=1).reshape(n, 3, 3)


def compose_affine(raw: Var, caps: Caps = Caps()) -> tuple[Var, Var]:
    """Assemble ``(A, b)`` from (N, 20) raw motion outputs.

    ``A = (Rot(axis, angle) - I) + diag(scale) + Sym(shear)`` and
    ``b = velocity + nonlinear``; all-zero input gives ``A = 0, b = 0`` exactly.
    """
    n = raw.shape[0]

    def part(dsl, mag_col, cap):
        d = ad.normalize(raw[:, dsl], axis=-1, eps=DIR_EPS)
        m = ad.tanh(raw[:, mag_col : mag_col + 1]) * cap
        return d, m

    axis, angle = part(ROT_DIR, ROT_MAG, caps.rotation)
    k = skew(axis)
    kk = ad.matmul(k, k)
    s = ad.sin(angle).reshape(n, 1, 1)
    c1 = (1.0 - ad.cos(angle)).reshape(n, 1, 1)
    rot_minus_i = k * s + kk * c1
    sd, sm = part(SCL_DIR, SCL_MAG, caps.scale)
    hd, hm = part(SHR_DIR, SHR_MAG, caps.shear)
    a = rot_minus_i + _diag(sd * sm) + _sym_offdiag(hd * hm)
    vd, vm = part(VEL_DIR, VEL_MAG, caps.translation)
    nd, nm = part(NLN_DIR, NLN_MAG, caps.translation)
    b = vd * vm + nd * nm
    return a, b


def compose_affine_numpy(raw, caps: Caps = Caps()) -> tuple[np.ndarray, np.ndarray]:
    g = Graph()
    a, b = compose_affine(g.constant(np.atleast_2d(raw)), caps)
    return a.value, b.value


def apply_deformation_vars(
    mu: Var,
    unit_rot: Var,
    log_scale: Var,
    color: Var,
    d: DeformationVars,
    rotation_update: str = "add",
) -> tuple[Var, Var, Var, Var]:
    """Deform kernel parameters (N rows).  ``color`` is already in [0, 1]."""
    n = mu.shape[0]
    mu2 = mu + ad.matmul(d.A, mu.reshape(n, 3, 1)).reshape(n, 3) + d.b
    if rotation_update == "add":
        q = unit_rot + d.dR
    elif rotation_update == "multiply":
        ident = mu.graph.constant(np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)))
        q = _quat_mul_var(ad.normalize(ident + d.dR, axis=-1), unit_rot)
    else:
        raise ContractError(f"unknown rotation update {rotation_update!r}")
    if np.any(np.linalg.norm(q.value, axis=-1) < 1e-12):
        raise NumericError(q.id, "rotation", "forward")
    rot2 = ad.normalize(q, axis=-1)
    ls2 = log_scale + d.dS
    col2 = color if d.dC is None else ad.clamp(color + d.dC, 0.0, 1.0)
    return mu2, rot2, ls2, col2


def _quat_mul_var(a: Var, b: Var) -> Var:
    w1, x1, y1, z1 = a[:, 0], a[:, 1], a[:, 2], a[:, 3]
    w2, x2, y2, z2 = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    return ad.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=1,
    )


def apply_deformation(kernel: GaussianKernel, d: Deformation, rotation_update: str = "add") -> GaussianKernel:
    """Single-kernel deformation on plain arrays."""
    mu = kernel.mu + d.A @ kernel.mu + d.b
    if not np.any(d.dR):
        # kernel is normalized already; renormalizing would perturb the last bit
        q = np.asarray(kernel.rot, dtype=float)
    elif rotation_update == "add":
        q = kernel.rot + d.dR
    else:
        q = quat_multiply((np.array([1.0, 0, 0, 0]) + d.dR) / np.linalg.norm(np.array([1.0, 0, 0, 0]) + d.dR), kernel.rot)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise NumericError(-1, "rotation", "forward")
    return GaussianKernel(
        mu=mu,
        rot=q if not np.any(d.dR) else q / n,
        scale=kernel.scale * np.exp(d.dS),
        opacity=kernel.opacity,
        color=np.clip(kernel.color + d.dC, 0.0, 1.0),
    )


@dataclass
class DecoderConfig:
    width: int = 256
    motion_depth: int = 4
    appearance_depth: int = 5
    caps: Caps = field(default_factory=Caps)
    affine: bool = True
    appearance: bool = True
    rotation_update: str = "add"


class KernelDecoder:
    """Motion and appearance heads reading ``concat(g_t, l_row)`` per particle."""

    MOTION_OUT = AFFINE_RAW + 4 + 3

    def __init__(self, in_dim: int, config: DecoderConfig | None = None):
        self.config = config or DecoderConfig()
        c = self.config
        self.in_dim = in_dim
        self.motion = MLP("dec.motion", in_dim, c.width, self.MOTION_OUT, depth=c.motion_depth, zero_last=True)
        self.appearance = MLP("dec.appear", in_dim, c.width, 3, depth=c.appearance_depth, zero_last=True)

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        params = self.motion.init(rng)
        last = f"dec.motion.{len(self.motion.dims) - 2}.w"
        # direction rows start random so normalization has a well-defined gradient;
        # magnitudes and deltas start at exactly zero (identity deformation)
        w = params[last]
        for dsl in DIR_SLICES:
            w[:, dsl] = rng.normal(0.0, 1e-2, size=(w.shape[0], 3))
        if self.config.appearance:
            params.update(self.appearance.init(rng))
        return params

    def __call__(self, p: dict[str, Var], features: Var) -> DeformationVars:
        c = self.config
        raw = self.motion(p, features)
        n = raw.shape[0]
        if c.affine:
            a, b = compose_affine(raw[:, :AFFINE_RAW], c.caps)
        else:
            a = raw.graph.constant(np.zeros((n, 3, 3)))
            b = raw[:, 0:3]
        dr = raw[:, AFFINE_RAW : AFFINE_RAW + 4]
        ds = raw[:, AFFINE_RAW + 4 : AFFINE_RAW + 7]
        dc = self.appearance(p, features) if c.appearance else None
        return DeformationVars(a, b, dr, ds, dc)

    def decode_row(self, p: dict[str, np.ndarray], features: np.ndarray, index: int) -> Deformation:
        """Deformation of one particle from a (N, in_dim) feature matrix."""
        if not 0 <= index < features.shape[0]:
            raise ContractError(f"particle index {index} out of range [0, {features.shape[0]})")
        g = Graph()
        pv = {k: g.constant(v) for k, v in p.items()}
        d = self(pv, g.constant(features[index : index + 1]))
        return d.numpy()[0]
