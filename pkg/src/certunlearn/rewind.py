"""Reconstruct earlier GD iterates by solving backward-Euler steps.

Each backward step solves ``x = theta_next + eta * grad f(x)``. For
``eta < 1/L`` this is the first-order condition of the strongly convex
subproblem ``min_x -f(x) + ||x - theta_next||^2 / (2 eta)``, whose modulus is
``1/eta - L`` and smoothness ``1/eta + L``; it is solved by gradient descent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import Dataset, LossModel, as_params, empirical_grad, empirical_loss


class ProxConvexityError(ValueError):
    """Step size too large for the backward subproblem to be convex."""


class ProxConvergenceError(ArithmeticError):
    def __init__(self, msg, residual):
        super().__init__(msg)
        self.residual = residual


@dataclass(frozen=True)
class ProxConfig:
    """Inner solver settings.

    ``tol`` is an absolute residual bound; when ``None`` it defaults to
    ``1e-10 * (1 + ||theta_next||)``. After the bound is met the solver keeps
    iterating (at most ``refine_iters`` times) while the residual still
    improves, so the returned point sits at the rounding floor.
    """

    tol: float | None = None
    max_iter: int = 100_000
    step: float | None = None
    refine_iters: int = 200

    def __post_init__(self):
        if self.tol is not None and not self.tol > 0:
            raise ValueError("tolerance must be > 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass
class ProxStats:
    steps: int = 0
    inner_iterations: int = 0
    grad_calls: int = 0
    max_residual: float = 0.0


def default_tol(theta_next) -> float:
    return 1e-10 * (1.0 + float(np.linalg.norm(theta_next)))


def rewind_step(model: LossModel, data: Dataset, theta_next, eta: float, L: float,
                cfg: ProxConfig = ProxConfig(), stats: ProxStats | None = None) -> np.ndarray:
    """Return the unique ``x`` with ``x - eta grad f(x) = theta_next`` (to ``tol``)."""
    if not eta * L < 1.0:
        raise ProxConvexityError(f"subproblem not convex: eta*L = {eta * L!r} must be < 1")
    theta_next = as_params(theta_next)
    tol = cfg.tol if cfg.tol is not None else default_tol(theta_next)
    step = cfg.step if cfg.step is not None else 1.0 / (1.0 / eta + L)
    if step > 1.0 / (1.0 / eta + L):
        raise ValueError("inner step exceeds 1/(1/eta + L)")
    x = theta_next + eta * empirical_grad(model, data, theta_next)
    calls = 1
    it = 0
    best = math.inf
    extra = 0
    while True:
        g = empirical_grad(model, data, x)
        calls += 1
        resid_vec = x - theta_next - eta * g
        resid = float(np.linalg.norm(resid_vec))
        if resid <= tol:
            if resid >= best or extra >= cfg.refine_iters:
                break
            extra += 1
        best = min(best, resid)
        if it >= cfg.max_iter:
            raise ProxConvergenceError(
                f"inner solver hit {cfg.max_iter} iterations with residual {resid:.3e} > {tol:.3e}", resid
            )
        # Subproblem gradient: (x - theta_next)/eta - grad f(x) = resid_vec / eta.
        x = x - step * resid_vec / eta
        it += 1
    if stats is not None:
        stats.steps += 1
        stats.inner_iterations += it
        stats.grad_calls += calls
        stats.max_residual = max(stats.max_residual, resid)
    return as_params(x)


def rewind(model: LossModel, data: Dataset, theta_T, eta: float, K: int, L: float,
           cfg: ProxConfig = ProxConfig(), stats: ProxStats | None = None) -> np.ndarray:
    """Apply ``K`` backward steps starting from ``theta_T``."""
    if K < 0:
        raise ValueError("K must be >= 0")
    theta = as_params(theta_T)
    if K > 0 and not eta * L < 1.0:
        raise ProxConvexityError(f"subproblem not convex: eta*L = {eta * L!r} must be < 1")
    for _ in range(K):
        theta = rewind_step(model, data, theta, eta, L, cfg, stats)
    return theta


def prox_objective(model: LossModel, data: Dataset, x, theta_next, eta: float) -> float:
    diff = np.asarray(x) - np.asarray(theta_next)
    return -empirical_loss(model, data, x) + float(diff @ diff) / (2.0 * eta)


def roundtrip_tolerance(tol: float, eta: float, L: float, K: int) -> float:
    return 10.0 * tol * (1.0 + eta * L) ** K
