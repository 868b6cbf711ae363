"""Latent dynamics: a learned vector field integrated with fixed-step RK4.

Integration is unrolled inside the autodiff graph, so gradients are exact for
the discrete solver (no adjoint method).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, NumericError, Var
from .nn import MLP


@dataclass
class SolveConfig:
    step_count: int = 32  # steps per unit time
    method: str = "rk4"

    def __post_init__(self):
        if self.step_count < 1:
            raise ContractError("step_count must be >= 1")
        if self.method != "rk4":
            raise ContractError(f"unsupported integrator {self.method!r}")


@dataclass
class FieldConfig:
    width: int = 256
    depth: int = 1
    activation: str = "tanh"
    autonomous: bool = False
    init_scale: float = 0.1


class DynamicsField:
    """MLP mapping ``(g, tau)`` to ``dg/dtau``; ``autonomous=True`` drops the time input."""

    def __init__(self, dim: int, cfg: FieldConfig | None = None):
        self.cfg = cfg = cfg or FieldConfig()
        self.dim = dim
        in_dim = dim if cfg.autonomous else dim + 1
        self.net = MLP("ode.field", in_dim, cfg.width, dim, depth=cfg.depth, activation=cfg.activation)

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        p = self.net.init(rng)
        last = f"ode.field.{self.cfg.depth}.w"
        p[last] *= self.cfg.init_scale
        return p

    def bind(self, p: dict[str, Var]) -> Callable[[Var, float], Var]:
        def f(g: Var, tau: float) -> Var:
            x = g.reshape(1, self.dim)
            if not self.cfg.autonomous:
                x = ad.concat([x, g.graph.constant(np.array([[tau]]))], axis=1)
            return self.net(p, x).reshape(self.dim)

        return f


def _check(x, stage: str):
    v = x.value if isinstance(x, Var) else np.asarray(x)
    if not np.all(np.isfinite(v)):
        raise NumericError(x.id if isinstance(x, Var) else -1, f"rk4 {stage}", "forward")


def rk4_step(f: Callable, g, tau: float, h: float):
    """One classical Runge-Kutta step; ``g`` may be a Var or a plain array."""
    if h <= 0:
        raise ContractError("step size must be positive")
    k1 = f(g, tau)
    _check(k1, "k1")
    k2 = f(g + k1 * (h / 2), tau + h / 2)
    _check(k2, "k2")
    k3 = f(g + k2 * (h / 2), tau + h / 2)
    _check(k3, "k3")
    k4 = f(g + k3 * h, tau + h)
    _check(k4, "k4")
    return g + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)


def n_steps(t: float, cfg: SolveConfig) -> int:
    return max(1, math.ceil(round(abs(t) * cfg.step_count, 9)))


def ode_solve(f: Callable, g0, t: float, cfg: SolveConfig | None = None, t0: float = 0.0):
    """Integrate from ``t0`` to ``t`` with uniform steps ``h = (t - t0) / ceil((t - t0) * step_count)``.

    Returns ``g0`` itself when ``t == t0``.
    """
    cfg = cfg or SolveConfig()
    span = t - t0
    if span < 0:
        raise ContractError("integration runs forward in time only")
    if span == 0:
        return g0
    n = n_steps(span, cfg)
    h = span / n
    g = g0
    for i in range(n):
        g = rk4_step(f, g, t0 + i * h, h)
    return g
