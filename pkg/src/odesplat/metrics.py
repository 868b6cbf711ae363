"""Image losses and quality metrics (L1, SSIM/D-SSIM, PSNR)."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Var

C1 = 0.01**2
C2 = 0.03**2
WINDOW = 11
SIGMA = 1.5
PSNR_CAP = 99.0


@lru_cache(maxsize=32)
def blur_matrix(n: int, window: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    """(n, n) matrix applying a 1-D normalized Gaussian filter with reflect padding."""
    half = window // 2
    k = np.exp(-0.5 * (np.arange(-half, half + 1) / sigma) ** 2)
    k /= k.sum()
    m = np.zeros((n, n))
    for i in range(n):
        for o, w in zip(range(-half, half + 1), k):
            j = i + o
            # reflect about the edge samples ("reflect" mode: a b c | c b a)
            while j < 0 or j >= n:
                j = -j - 1 if j < 0 else 2 * n - j - 1
            m[i, j] += w
    m.setflags(write=False)
    return m


def _check_pair(a, b):
    sa = a.shape if hasattr(a, "shape") else np.shape(a)
    sb = b.shape if hasattr(b, "shape") else np.shape(b)
    if tuple(sa) != tuple(sb):
        raise ContractError(f"image shapes differ: {sa} vs {sb}")


def ssim(img_a, img_b) -> float:
    """Mean SSIM over pixels and channels of two (H, W, C) images in [0, 1]."""
    a = np.asarray(img_a, dtype=float)
    b = np.asarray(img_b, dtype=float)
    _check_pair(a, b)
    h, w = a.shape[:2]
    bh, bw = blur_matrix(h), blur_matrix(w)

    def blur(x):
        xc = np.moveaxis(x, -1, 0)
        return np.moveaxis(bh @ xc @ bw.T, 0, -1)

    mu_a, mu_b = blur(a), blur(b)
    saa = blur(a * a) - mu_a**2
    sbb = blur(b * b) - mu_b**2
    sab = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + C1) * (2 * sab + C2)
    den = (mu_a**2 + mu_b**2 + C1) * (saa + sbb + C2)
    return float((num / den).mean())


def dssim(img_a, img_b) -> float:
    return (1.0 - ssim(img_a, img_b)) / 2.0


def psnr(img_a, img_b) -> float:
    a = np.asarray(img_a, dtype=float)
    b = np.asarray(img_b, dtype=float)
    _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def l1(img_a, img_b) -> float:
    a = np.asarray(img_a, dtype=float)
    b = np.asarray(img_b, dtype=float)
    _check_pair(a, b)
    return float(np.abs(a - b).mean())


def _blur_var(x: Var, bh: np.ndarray, bw: np.ndarray) -> Var:
    # (H, W, C) -> (C, H, W), blur rows and columns with matrix products
    xc = ad.transpose(x, (2, 0, 1))
    y = ad.matmul(ad.matmul(bh, xc), bw.T)
    return ad.transpose(y, (1, 2, 0))


def ssim_var(a: Var, b) -> Var:
    """Differentiable SSIM; ``b`` may be a constant array."""
    _check_pair(a, b)
    g = a.graph
    b = g.lift(b)
    h, w = a.shape[:2]
    bh, bw = blur_matrix(h), blur_matrix(w)
    mu_a, mu_b = _blur_var(a, bh, bw), _blur_var(b, bh, bw)
    maa, mbb, mab = mu_a * mu_a, mu_b * mu_b, mu_a * mu_b
    saa = _blur_var(a * a, bh, bw) - maa
    sbb = _blur_var(b * b, bh, bw) - mbb
    sab = _blur_var(a * b, bh, bw) - mab
    num = (mab * 2.0 + C1) * (sab * 2.0 + C2)
    den = (maa + mbb + C1) * (saa + sbb + C2)
    return (num / den).mean()


def dssim_var(a: Var, b) -> Var:
    return (1.0 - ssim_var(a, b)) * 0.5


def l1_var(a: Var, b) -> Var:
    _check_pair(a, b)
    return ad.vabs(a - b).mean()


def compute_loss(rendered, gt, lam: float = 0.2):
    """``(1 - lam) * L1 + lam * D-SSIM``; differentiable when ``rendered`` is a Var."""
    if not 0.0 <= lam <= 1.0:
        raise ContractError("lambda must lie in [0, 1]")
    if isinstance(rendered, Var):
        return l1_var(rendered, gt) * (1.0 - lam) + dssim_var(rendered, gt) * lam
    return (1.0 - lam) * l1(rendered, gt) + lam * dssim(rendered, gt)
