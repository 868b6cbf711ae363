"""Differentiable point-based rendering of 3D Gaussians.

Gaussians are projected to screen space, sorted once per camera by depth and
alpha-composited front to back.  Two rasterization paths share the same
per-block kernel: ``"dense"`` evaluates every splat at every pixel, ``"tiled"``
restricts each pixel tile to the splats whose alpha can reach the skip
threshold there.  Both give the same image up to float rounding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Graph, Var
from .decoder import DeformationVars, apply_deformation_vars
from .gaussians import GaussianKernel, ParticleSet, covariance_var

DILATION = 0.3
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0


@dataclass
class Camera:
    """Pinhole camera; ``view`` maps world to camera space (x right, y down, z forward)."""

    view: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.01

    def __post_init__(self):
        self.view = np.asarray(self.view, dtype=float)
        r = self.view[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise ContractError("camera rotation block is not orthonormal")
        if self.near <= 0:
            raise ContractError("near plane must be positive")

    @property
    def position(self) -> np.ndarray:
        r, t = self.view[:3, :3], self.view[:3, 3]
        return -r.T @ t

    def to_dict(self) -> dict:
        return {
            "view": self.view.tolist(),
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "near": self.near,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(np.array(d["view"], dtype=float), d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]), d.get("near", 0.01))


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera matrix for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=float)
    fwd = np.asarray(target, dtype=float) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=float))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    r = np.stack([right, down, fwd])
    view = np.eye(4)
    view[:3, :3] = r
    view[:3, 3] = -r @ eye
    return view


def pixel_grid(width: int, height: int) -> np.ndarray:
    """(H*W, 2) pixel coordinates ``(x, y)`` in row-major order; pixel centers are integers."""
    ys, xs = np.mgrid[0:height, 0:width]
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(float)


# ----------------------------------------------------------------------------
# single-splat reference functions


@dataclass
class Splat2D:
    center: np.ndarray
    cov2d: np.ndarray
    depth: float
    opacity: float
    color: np.ndarray


def projection_jacobian(pc: np.ndarray, cam: Camera) -> np.ndarray:
    x, y, z = pc
    return np.array([[cam.fx / z, 0.0, -cam.fx * x / z**2], [0.0, cam.fy / z, -cam.fy * y / z**2]])


def project_gaussian(kernel: GaussianKernel, cam: Camera) -> Splat2D | None:
    """Screen-space splat of one kernel, or None when it is not in front of the near plane."""
    r, t = cam.view[:3, :3], cam.view[:3, 3]
    pc = r @ kernel.mu + t
    if pc[2] <= cam.near:
        return None
    center = np.array([cam.fx * pc[0] / pc[2] + cam.cx, cam.fy * pc[1] / pc[2] + cam.cy])
    m = projection_jacobian(pc, cam) @ r
    cov2d = m @ kernel.covariance @ m.T + DILATION * np.eye(2)
    return Splat2D(center, cov2d, float(pc[2]), float(kernel.opacity), np.asarray(kernel.color, dtype=float))


def evaluate_alpha(splat: Splat2D, p) -> float:
    d = np.asarray(p, dtype=float) - splat.center
    a = splat.opacity * np.exp(-0.5 * d @ np.linalg.solve(splat.cov2d, d))
    return float(min(a, ALPHA_MAX))


def composite_pixel(splats: list[Splat2D], p, background=(0.0, 0.0, 0.0), check_order: bool = True) -> np.ndarray:
    """Front-to-back compositing of depth-sorted splats at one pixel."""
    if check_order and any(a.depth > b.depth for a, b in zip(splats, splats[1:])):
        raise ContractError("splats must be sorted by ascending depth")
    color = np.zeros(3)
    trans = 1.0
    for s in splats:
        a = evaluate_alpha(s, p)
        if a < ALPHA_MIN:
            continue
        color += trans * a * s.color
        trans *= 1.0 - a
    return color + trans * np.asarray(background, dtype=float)


def transmittance(alphas) -> tuple[np.ndarray, float]:
    """Per-splat transmittance ``T_i`` and the final transmittance."""
    alphas = np.asarray(alphas, dtype=float)
    cp = np.cumprod(1.0 - alphas)
    t = np.concatenate([[1.0], cp[:-1]]) if len(alphas) else np.zeros(0)
    return t, float(cp[-1]) if len(alphas) else 1.0


# ----------------------------------------------------------------------------
# batched differentiable path


def project_vars(mu: Var, cov: Var, cam: Camera) -> tuple[Var, Var]:
    """Screen centers (N, 2) and dilated 2D covariances as ``(a, b, c)`` rows (N, 3)."""
    n = mu.shape[0]
    r, t = cam.view[:3, :3], cam.view[:3, 3]
    pc = ad.matmul(mu, r.T) + t
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    iz = 1.0 / z
    center = ad.stack([x * iz * cam.fx + cam.cx, y * iz * cam.fy + cam.cy], axis=1)
    j00 = iz * cam.fx
    j02 = -(x * iz * iz) * cam.fx
    j11 = iz * cam.fy
    j12 = -(y * iz * iz) * cam.fy
    m0 = j00.reshape(n, 1) * r[0] + j02.reshape(n, 1) * r[2]
    m1 = j11.reshape(n, 1) * r[1] + j12.reshape(n, 1) * r[2]
    m = ad.stack([m0, m1], axis=1)  # (n, 2, 3)
    c2 = ad.matmul(ad.matmul(m, cov), ad.swapaxes(m, -1, -2))
    abc = ad.stack([c2[:, 0, 0] + DILATION, c2[:, 0, 1], c2[:, 1, 1] + DILATION], axis=1)
    return center, abc


def _block_forward(px, mean2d, abc, opac, color, bg):
    dx = px[:, 0:1] - mean2d[None, :, 0]
    dy = px[:, 1:2] - mean2d[None, :, 1]
    a, b, c = abc[:, 0], abc[:, 1], abc[:, 2]
    det = a * c - b * b
    q = (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det
    gauss = np.exp(-0.5 * q)
    araw = opac * gauss
    live = (araw >= ALPHA_MIN) & (araw < ALPHA_MAX)
    alpha = np.where(araw < ALPHA_MIN, 0.0, np.minimum(araw, ALPHA_MAX))
    one_m = 1.0 - alpha
    cp = np.cumprod(one_m, axis=1)
    trans = np.empty_like(cp)
    trans[:, 0] = 1.0
    trans[:, 1:] = cp[:, :-1]
    tfinal = cp[:, -1]
    w = trans * alpha
    out = w @ color + tfinal[:, None] * bg
    cache = (dx, dy, det, q, gauss, araw, live, one_m, trans, tfinal, w)
    return out, cache


def _block_backward(gout, px, mean2d, abc, opac, color, bg, cache):
    dx, dy, det, q, gauss, araw, live, one_m, trans, tfinal, w = cache
    gcolor = w.T @ gout
    s = gout @ color.T
    ws = w * s
    suffix = np.cumsum(ws[:, ::-1], axis=1)[:, ::-1] - ws
    bgterm = tfinal * (gout @ bg)
    galpha = trans * s - (suffix + bgterm[:, None]) / one_m
    garaw = np.where(live, galpha, 0.0)
    gopac = (garaw * gauss).sum(axis=0)
    gq = garaw * (-0.5 * araw)
    a, b, c = abc[:, 0], abc[:, 1], abc[:, 2]
    gdx = gq * 2.0 * (c * dx - b * dy) / det
    gdy = gq * 2.0 * (a * dy - b * dx) / det
    gmean = np.stack([-gdx.sum(axis=0), -gdy.sum(axis=0)], axis=1)
    ga = (gq * (dy * dy - q * c) / det).sum(axis=0)
    gb = (gq * (2.0 * q * b - 2.0 * dx * dy) / det).sum(axis=0)
    gc = (gq * (dx * dx - q * a) / det).sum(axis=0)
    return gmean, np.stack([ga, gb, gc], axis=1), gopac, gcolor


def splat_radius(abc: np.ndarray, opac: np.ndarray) -> np.ndarray:
    """Distance beyond which a splat's alpha is certainly below the skip threshold.

    Splats that can never reach the threshold get radius -1.
    """
    a, b, c = abc[:, 0], abc[:, 1], abc[:, 2]
    lam_max = 0.5 * (a + c) + np.sqrt(0.25 * (a - c) ** 2 + b * b)
    k = 2.0 * np.log(np.maximum(opac, 1e-300) / ALPHA_MIN)
    r = np.sqrt(np.maximum(k, 0.0) * lam_max)
    return np.where(k < 0, -1.0, r * (1.0 + 1e-9) + 1e-9)


def tile_bins(mean2d, abc, opac, width, height, tile: int):
    """For each tile: (pixel indices, splat indices in depth order)."""
    radius = splat_radius(abc, opac)
    bins = []
    for y0 in range(0, height, tile):
        y1 = min(y0 + tile, height) - 1
        for x0 in range(0, width, tile):
            x1 = min(x0 + tile, width) - 1
            ddx = np.maximum(np.maximum(x0 - mean2d[:, 0], mean2d[:, 0] - x1), 0.0)
            ddy = np.maximum(np.maximum(y0 - mean2d[:, 1], mean2d[:, 1] - y1), 0.0)
            hit = np.nonzero((radius >= 0) & (ddx * ddx + ddy * ddy <= radius * radius))[0]
            ys, xs = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
            pix = (ys * width + xs).ravel()
            bins.append((pix, hit))
    return bins


def rasterize(
    mean2d: Var,
    abc: Var,
    opac: Var,
    color: Var,
    width: int,
    height: int,
    background=(0.0, 0.0, 0.0),
    mode: str = "tiled",
    tile: int = 16,
) -> Var:
    """Composite depth-sorted splats into an (H, W, 3) image."""
    graph = mean2d.graph
    bg = np.asarray(background, dtype=float)
    px = pixel_grid(width, height)
    npx = width * height
    if mode not in ("dense", "tiled"):
        raise ContractError(f"unknown rasterization mode {mode!r}")

    def fwd(m2, abc_, op, col):
        img = np.empty((npx, 3))
        if m2.shape[0] == 0:
            img[:] = bg
            return img.reshape(height, width, 3), []
        if mode == "dense":
            bins = [(np.arange(npx), np.arange(m2.shape[0]))]
        else:
            bins = tile_bins(m2, abc_, op, width, height, tile)
        caches = []
        for pix, idx in bins:
            if len(idx) == 0:
                img[pix] = bg
                caches.append(None)
                continue
            out, cache = _block_forward(px[pix], m2[idx], abc_[idx], op[idx], col[idx], bg)
            img[pix] = out
            caches.append((pix, idx, cache))
        return img.reshape(height, width, 3), caches

    def vjp(gimg, out, caches, m2, abc_, op, col):
        gflat = gimg.reshape(npx, 3)
        gm = np.zeros_like(m2)
        gabc = np.zeros_like(abc_)
        gop = np.zeros_like(op)
        gcol = np.zeros_like(col)
        for entry in caches:
            if entry is None:
                continue
            pix, idx, cache = entry
            r = _block_backward(gflat[pix], px[pix], m2[idx], abc_[idx], op[idx], col[idx], bg, cache)
            gm[idx] += r[0]
            gabc[idx] += r[1]
            gop[idx] += r[2]
            gcol[idx] += r[3]
        return gm, gabc, gop, gcol

    return graph.apply("rasterize", fwd, vjp, [mean2d, abc, opac, color], saves=True)


@dataclass
class KernelVars:
    """Raw particle parameters bound into a graph."""

    mu: Var
    rot: Var
    log_scale: Var
    opacity: Var
    color: Var

    @classmethod
    def from_params(cls, p: dict[str, Var]) -> "KernelVars":
        return cls(p["gs.mu"], p["gs.rot"], p["gs.log_scale"], p["gs.opacity"], p["gs.color"])

    @classmethod
    def from_particles(cls, graph: Graph, ps: ParticleSet, requires_grad: bool = False) -> "KernelVars":
        return cls(*(graph.leaf(getattr(ps, k), requires_grad=requires_grad) for k in ("mu", "rot", "log_scale", "opacity", "color")))

    def __len__(self) -> int:
        return self.mu.shape[0]


def deformed_kernels(kv: KernelVars, deformation: DeformationVars | None = None, rotation_update: str = "add"):
    """Apply a deformation (identity when None) and return constrained kernel values."""
    n = len(kv)
    if deformation is None:
        deformation = DeformationVars.zeros(kv.mu.graph, n)
    unit_rot = ad.normalize(kv.rot, axis=-1)
    color = ad.sigmoid(kv.color)
    mu, rot, ls, col = apply_deformation_vars(kv.mu, unit_rot, kv.log_scale, color, deformation, rotation_update)
    return mu, rot, ls, ad.sigmoid(kv.opacity), col


def render_image(
    kv: KernelVars,
    cam: Camera,
    deformation: DeformationVars | None = None,
    mode: str = "tiled",
    background=(0.0, 0.0, 0.0),
    rotation_update: str = "add",
    tile: int = 16,
    aux: dict | None = None,
) -> Var:
    """Render an (H, W, 3) image connected to the graph of ``kv``.

    Particles are globally sorted by camera depth; ties keep particle order.
    When ``aux`` is given it receives the projected centers (``"mean2d"``) and
    the particle index of each of their rows (``"order"``).
    """
    graph = kv.mu.graph
    if len(kv) == 0:
        return graph.constant(np.broadcast_to(np.asarray(background, float), (cam.height, cam.width, 3)).copy())
    mu, rot, ls, opac, col = deformed_kernels(kv, deformation, rotation_update)
    r, t = cam.view[:3, :3], cam.view[:3, 3]
    depth = mu.value @ r[2] + t[2]
    visible = np.nonzero(depth > cam.near)[0]
    if len(visible) == 0:
        return graph.constant(np.broadcast_to(np.asarray(background, float), (cam.height, cam.width, 3)).copy())
    order = visible[np.lexsort((visible, depth[visible]))]
    mu_s = ad.take(mu, order)
    cov = covariance_var(ad.take(rot, order), ad.exp(ad.take(ls, order)))
    center, abc = project_vars(mu_s, cov, cam)
    if aux is not None:
        aux["mean2d"], aux["order"] = center, order
    return rasterize(center, abc, ad.take(opac, order), ad.take(col, order), cam.width, cam.height, background, mode, tile)


def render_particles(ps: ParticleSet, cam: Camera, deformation=None, mode: str = "tiled", **kw) -> np.ndarray:
    """Plain-array convenience wrapper around :func:`render_image`."""
    g = Graph()
    kv = KernelVars.from_particles(g, ps)
    dv = None
    if deformation is not None:
        c = g.constant
        dv = DeformationVars(c(deformation.A), c(deformation.b), c(deformation.dR), c(deformation.dS), c(deformation.dC))
    return render_image(kv, cam, dv, mode=mode, **kw).value
