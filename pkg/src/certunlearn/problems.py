"""Built-in test problems and the oracles that certify their constants.

Every problem supplies hand-derived per-sample gradients, a seeded data
generator, and a way to obtain the smoothness constant ``L`` and gradient
bound ``G`` over a ball around the initial point. Analytic bounds are used
where they exist; ``tiny_mlp`` falls back to sampled estimates inflated by a
safety factor.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import minimize_scalar

from .model import (
    Dataset,
    EvaluationError,
    LossModel,
    as_params,
    empirical_grad,
    empirical_loss,
)

SLACK = 1.01


def make_rng(seed: int, stream: str) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, stream name)``.

    Different stream names give independent sequences for the same seed, so
    adding a new consumer never shifts the draws of an existing one.
    """
    tag = int.from_bytes(hashlib.blake2b(stream.encode(), digest_size=8).digest(), "little")
    key = (int(seed) & (2**64 - 1)) | (tag << 64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class Constants:
    """Smoothness ``L`` and per-sample gradient bound ``G`` over a region."""

    L: float
    G: float
    radius: float = math.inf

    def scaled(self, g_scale: float = 1.0, l_scale: float = 1.0) -> "Constants":
        return Constants(self.L * l_scale, self.G * g_scale, self.radius)


@dataclass(frozen=True)
class PLConstants:
    mu: float
    f_star: float


# ---------------------------------------------------------------------------
# Loss models


class QuadraticLoss(LossModel):
    """f_z(theta) = 0.5 * ||theta - z||^2, z stored as the feature row."""

    name = "scalar_quadratic"

    def __init__(self, dim: int):
        self.dim = dim

    def losses(self, theta, X, y):
        r = theta[None, :] - X
        return 0.5 * np.einsum("ij,ij->i", r, r)

    def grads(self, theta, X, y):
        return theta[None, :] - X


class LeastSquaresLoss(LossModel):
    name = "least_squares"

    def __init__(self, dim: int):
        self.dim = dim

    def losses(self, theta, X, y):
        r = X @ theta - y
        return 0.5 * r * r

    def grads(self, theta, X, y):
        return (X @ theta - y)[:, None] * X


class LogisticLoss(LossModel):
    """Binary cross-entropy with labels in {0, 1}."""

    name = "logistic"

    def __init__(self, dim: int):
        self.dim = dim

    def losses(self, theta, X, y):
        s = X @ theta
        return np.logaddexp(0.0, s) - y * s

    def grads(self, theta, X, y):
        s = X @ theta
        p = 0.5 * (1.0 + np.tanh(0.5 * s))
        return (p - y)[:, None] * X


class SinePLLoss(LossModel):
    """f_z(x) = sum_j (x_j - z_j)^2 + 3 sin^2(x_j - z_j).

    Nonconvex but PL on averages of shifted copies; each coordinate has second
    derivative 2 + 6 cos(2u) in [-4, 8], hence L = 8.
    """

    name = "sine_pl"

    def __init__(self, dim: int):
        self.dim = dim

    def losses(self, theta, X, y):
        u = theta[None, :] - X
        return np.sum(u * u + 3.0 * np.sin(u) ** 2, axis=1)

    def grads(self, theta, X, y):
        u = theta[None, :] - X
        return 2.0 * u + 3.0 * np.sin(2.0 * u)


class TinyMLPLoss(LossModel):
    """One tanh hidden layer, scalar output, squared error.

    Parameter layout: ``[W (hidden x inputs) row-major, b, v, c]`` where the
    prediction is ``v . tanh(W x + b) + c``.
    """

    name = "tiny_mlp"

    def __init__(self, n_inputs: int, hidden: int = 4):
        self.n_inputs = n_inputs
        self.hidden = hidden
        self.dim = hidden * (n_inputs + 2) + 1

    def unpack(self, theta):
        h, p = self.hidden, self.n_inputs
        W = theta[: h * p].reshape(h, p)
        b = theta[h * p : h * p + h]
        v = theta[h * p + h : h * p + 2 * h]
        c = theta[-1]
        return W, b, v, c

    def _forward(self, theta, X, y):
        W, b, v, c = self.unpack(theta)
        act = np.tanh(X @ W.T + b[None, :])
        resid = act @ v + c - y
        return act, resid, v

    def losses(self, theta, X, y):
        _, resid, _ = self._forward(theta, X, y)
        return 0.5 * resid * resid

    def grads(self, theta, X, y):
        act, resid, v = self._forward(theta, X, y)
        n = X.shape[0]
        delta = resid[:, None] * v[None, :] * (1.0 - act * act)
        gW = delta[:, :, None] * X[:, None, :]
        return np.concatenate(
            [gW.reshape(n, -1), delta, resid[:, None] * act, resid[:, None]], axis=1
        )


# ---------------------------------------------------------------------------
# Problem definitions


class Problem:
    """A named problem: model factory, data generator and constant oracles."""

    name: str = ""
    default_d: int = 1
    eta_fraction: float = 0.5
    convex: bool = True

    def model(self, d: int | None = None) -> LossModel:
        raise NotImplementedError

    def generate(self, n: int, d: int | None = None, seed: int = 0) -> Dataset:
        raise NotImplementedError

    def smoothness(self, model: LossModel, data: Dataset) -> float | None:
        """Global per-sample smoothness constant, if one is known analytically."""
        return None

    def region_constants(self, model, data, center, radius, rng=None) -> Constants:
        """(L, G) valid on the ball of ``radius`` around ``center``."""
        raise NotImplementedError

    def pl_constants(self, model, data) -> PLConstants | None:
        return None

    # Population access (only problems with a known sampling distribution).
    def sample_population(self, rng, size, d):
        raise NotImplementedError(f"{self.name}: population distribution unavailable")

    def population_risk(self, theta) -> float:
        raise NotImplementedError(f"{self.name}: population risk unavailable")

    def population_optimum(self, d) -> float:
        raise NotImplementedError(f"{self.name}: population optimum unavailable")

    @property
    def has_population(self) -> bool:
        return False

    def __repr__(self):
        return f"<Problem {self.name}>"


class ScalarQuadratic(Problem):
    name = "scalar_quadratic"
    default_d = 1

    def model(self, d=None):
        return QuadraticLoss(d or self.default_d)

    def generate(self, n, d=None, seed=0):
        d = d or self.default_d
        rng = make_rng(seed, f"data/{self.name}")
        return Dataset(rng.standard_normal((n, d)), np.zeros(n))

    def smoothness(self, model, data):
        return 1.0

    def region_constants(self, model, data, center, radius, rng=None):
        dist = np.linalg.norm(data.X - np.asarray(center)[None, :], axis=1)
        return Constants(L=1.0, G=float(dist.max() + radius), radius=radius)

    def pl_constants(self, model, data):
        zbar = np.cumsum(data.X, axis=0)[-1] / data.n
        return PLConstants(mu=1.0, f_star=empirical_loss(model, data, zbar))

    @property
    def has_population(self):
        return True

    def sample_population(self, rng, size, d):
        return Dataset(rng.standard_normal((size, d)), np.zeros(size))

    def population_risk(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        return 0.5 * float(theta @ theta) + 0.5 * theta.size

    def population_optimum(self, d):
        return 0.5 * d


class LeastSquares(Problem):
    name = "least_squares"
    default_d = 5

    def model(self, d=None):
        return LeastSquaresLoss(d or self.default_d)

    def generate(self, n, d=None, seed=0):
        d = d or self.default_d
        rng = make_rng(seed, f"data/{self.name}")
        w = rng.standard_normal(d) / math.sqrt(d)
        X = rng.standard_normal((n, d)) / math.sqrt(d)
        y = X @ w + 0.1 * rng.standard_normal(n)
        return Dataset(X, y)

    def smoothness(self, model, data):
        return float(np.max(np.einsum("ij,ij->i", data.X, data.X)))

    def region_constants(self, model, data, center, radius, rng=None):
        xn = np.linalg.norm(data.X, axis=1)
        resid = np.abs(data.X @ np.asarray(center) - data.y)
        G = float(np.max(xn * (resid + xn * radius)))
        return Constants(L=self.smoothness(model, data), G=G, radius=radius)


class Logistic(Problem):
    name = "logistic"
    default_d = 5

    def model(self, d=None):
        return LogisticLoss(d or self.default_d)

    def generate(self, n, d=None, seed=0):
        d = d or self.default_d
        rng = make_rng(seed, f"data/{self.name}")
        w = 2.0 * rng.standard_normal(d) / math.sqrt(d)
        X = rng.standard_normal((n, d))
        p = 1.0 / (1.0 + np.exp(-(X @ w)))
        y = (rng.random(n) < p).astype(np.float64)
        return Dataset(X, y)

    def smoothness(self, model, data):
        return float(np.max(np.einsum("ij,ij->i", data.X, data.X))) / 4.0

    def region_constants(self, model, data, center, radius, rng=None):
        # |sigmoid - y| < 1, so ||grad|| < ||x|| everywhere.
        G = float(np.max(np.linalg.norm(data.X, axis=1)))
        return Constants(L=self.smoothness(model, data), G=G, radius=radius)


class SinePL(Problem):
    name = "sine_pl"
    default_d = 1
    convex = False
    grid_step = 1e-3
    grid_margin = 10.0
    mu_safety = 0.9

    def model(self, d=None):
        return SinePLLoss(d or self.default_d)

    def generate(self, n, d=None, seed=0):
        d = d or self.default_d
        rng = make_rng(seed, f"data/{self.name}")
        return Dataset(0.5 * rng.standard_normal((n, d)), np.zeros(n))

    def smoothness(self, model, data):
        return 8.0

    def region_constants(self, model, data, center, radius, rng=None):
        # |2u + 3 sin 2u| <= 2|u| + 3 min(1, 2|u|) per coordinate.
        reach = np.linalg.norm(data.X - np.asarray(center)[None, :], axis=1) + radius
        d = data.n_features
        G = float(np.max(2.0 * reach + 3.0 * np.minimum(math.sqrt(d), 2.0 * reach)))
        return Constants(L=8.0, G=G, radius=radius)

    def coordinate_pl(self, z: np.ndarray) -> PLConstants:
        """Grid-certified PL constant and minimum of g(u) = mean (u-z)^2 + 3 sin^2(u-z)."""
        return grid_pl_certificate(
            lambda u: _sine_avg(u, z),
            lambda u: _sine_avg_grad(u, z),
            lo=float(z.min()) - self.grid_margin,
            hi=float(z.max()) + self.grid_margin,
            step=self.grid_step,
            safety=self.mu_safety,
            curvature=lambda u: _sine_avg_curv(u, z),
        )

    def pl_constants(self, model, data):
        parts = [self.coordinate_pl(data.X[:, j]) for j in range(data.n_features)]
        return PLConstants(mu=min(p.mu for p in parts), f_star=sum(p.f_star for p in parts))


def _sine_avg(u, z):
    w = np.subtract.outer(np.atleast_1d(u), z)
    return np.mean(w * w + 3.0 * np.sin(w) ** 2, axis=-1)


def _sine_avg_grad(u, z):
    w = np.subtract.outer(np.atleast_1d(u), z)
    return np.mean(2.0 * w + 3.0 * np.sin(2.0 * w), axis=-1)


def _sine_avg_curv(u, z):
    w = np.subtract.outer(np.atleast_1d(u), z)
    return np.mean(2.0 + 6.0 * np.cos(2.0 * w), axis=-1)


def grid_pl_certificate(f, fprime, lo, hi, step, safety=0.9, curvature=None, exclude=1e-8):
    """Certify a PL constant for a 1-D function by dense grid evaluation.

    The global minimum is located on the grid and refined with a bounded
    scalar search; the PL ratio ``0.5 f'(u)^2 / (f(u) - f*)`` is then minimised
    over grid points with ``f - f* > exclude``. Points closer to the minimiser
    are covered by the curvature limit of the ratio there.
    """
    grid = np.arange(lo, hi + step, step)
    vals = np.concatenate([f(chunk) for chunk in np.array_split(grid, max(1, grid.size // 2000))])
    i = int(np.argmin(vals))
    res = minimize_scalar(
        lambda u: float(f(u)[0]),
        bounds=(grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]),
        method="bounded",
        options={"xatol": 1e-12},
    )
    f_star = min(float(res.fun), float(vals[i]))
    u_star = float(res.x) if res.fun <= vals[i] else float(grid[i])
    gaps = vals - f_star
    keep = gaps > exclude
    grads = np.concatenate([fprime(chunk) for chunk in np.array_split(grid[keep], max(1, keep.sum() // 2000))])
    ratio = 0.5 * grads**2 / gaps[keep]
    mu = float(ratio.min())
    if curvature is not None:
        mu = min(mu, float(curvature(u_star)[0]))
    if not mu > 0:
        raise EvaluationError("grid found no positive PL constant")
    return PLConstants(mu=safety * mu, f_star=f_star)


class TinyMLP(Problem):
    name = "tiny_mlp"
    default_d = 2
    convex = False
    hidden = 4
    safety = 1.5
    probe_points = 64

    def model(self, d=None):
        m = TinyMLPLoss(d or self.default_d, self.hidden)
        if m.dim > 64:
            raise ValueError(f"tiny_mlp limited to 64 weights, got {m.dim}")
        return m

    def generate(self, n, d=None, seed=0):
        d = d or self.default_d
        rng = make_rng(seed, f"data/{self.name}")
        X = rng.standard_normal((n, d))
        y = np.sin(X[:, 0]) + 0.5 * X[:, -1] + 0.1 * rng.standard_normal(n)
        return Dataset(X, y)

    def region_constants(self, model, data, center, radius, rng=None):
        """(L, G) on the ball.

        L is the largest sampled per-sample Hessian norm inflated by
        ``safety``. G then follows from L by the Lipschitz extension
        ``||grad f_z(theta)|| <= ||grad f_z(center)|| + L radius``; sampled
        gradient norms alone can miss the maximum over the ball.
        """
        rng = rng if rng is not None else make_rng(0, f"constants/{self.name}")
        center = np.asarray(center, dtype=np.float64)
        pts = [center] + [sample_ball(rng, center, radius) for _ in range(self.probe_points - 1)]
        L = self.safety * max(max_hessian_norm(model, data, p) for p in pts)
        g0 = float(np.max(np.linalg.norm(model.grads(center, data.X, data.y), axis=1)))
        return Constants(L=L, G=g0 + L * radius, radius=radius)


def sample_ball(rng, center, radius):
    d = center.size
    u = rng.standard_normal(d)
    u /= np.linalg.norm(u)
    return center + radius * rng.random() ** (1.0 / d) * u


def max_hessian_norm(model, data, theta, h=1e-5) -> float:
    """Largest per-sample Hessian spectral norm, Hessians from central differences of gradients."""
    d = theta.size
    H = np.empty((data.n, d, d))
    for k in range(d):
        e = np.zeros(d)
        e[k] = h
        H[:, :, k] = (model.grads(theta + e, data.X, data.y) - model.grads(theta - e, data.X, data.y)) / (2 * h)
    H = 0.5 * (H + np.transpose(H, (0, 2, 1)))
    # Frobenius norm bounds the spectral norm, so only samples whose Frobenius
    # norm beats the best spectral norm so far need an eigendecomposition.
    frob = np.sqrt(np.einsum("kij,kij->k", H, H))
    best = 0.0
    for k in np.argsort(-frob):
        if frob[k] <= best:
            break
        best = max(best, float(np.max(np.abs(np.linalg.eigvalsh(H[k])))))
    return best


PROBLEMS: dict[str, Problem] = {
    p.name: p for p in (ScalarQuadratic(), LeastSquares(), Logistic(), SinePL(), TinyMLP())
}


def get_problem(name: str) -> Problem:
    try:
        return PROBLEMS[name]
    except KeyError:
        raise KeyError(f"unknown problem {name!r}; choose from {sorted(PROBLEMS)}") from None


def max_step_size(L: float, n: int, m: int) -> float:
    """Largest step allowed for learning: min(1/L, n / (2 (n - m) L))."""
    return min(1.0 / L, n / (2.0 * (n - m) * L))


# ---------------------------------------------------------------------------
# Oracles


def finite_diff_grad(model: LossModel, data: Dataset, theta, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the empirical loss."""
    if not h > 0:
        raise ValueError("finite-difference step h must be > 0")
    theta = as_params(theta)
    out = np.empty(theta.size)
    for i in range(theta.size):
        e = np.zeros(theta.size)
        e[i] = h
        out[i] = (empirical_loss(model, data, theta + e) - empirical_loss(model, data, theta - e)) / (2 * h)
    if not np.all(np.isfinite(out)):
        raise EvaluationError("non-finite finite-difference gradient")
    return out


def gradient_rel_error(model, data, theta, h=1e-5) -> float:
    g = empirical_grad(model, data, theta)
    fd = finite_diff_grad(model, data, theta, h)
    return float(np.linalg.norm(g - fd) / max(np.linalg.norm(g), np.linalg.norm(fd), 1e-12))


@dataclass(frozen=True)
class ConstantsReport:
    max_grad: float
    max_ratio: float
    G: float
    L: float
    trials: int

    @property
    def grad_ok(self) -> bool:
        return self.max_grad <= self.G * SLACK

    @property
    def smooth_ok(self) -> bool:
        return self.max_ratio <= self.L * SLACK

    @property
    def passed(self) -> bool:
        return self.grad_ok and self.smooth_ok


def verify_constants(
    model: LossModel,
    data: Dataset,
    constants: Constants,
    region_sampler: Callable[[np.random.Generator], np.ndarray],
    trials: int,
    rng: np.random.Generator,
    local_scale: float = 1e-3,
) -> ConstantsReport:
    """Sample the region and compare observed gradient norms / ratios with (G, L).

    Half of the pairs are independent draws from the region; the other half
    are a draw and a nearby point, which probes local curvature. The nearby
    point may leave the region, so it only enters the smoothness ratio.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    max_grad = 0.0
    max_ratio = 0.0
    for k in range(trials):
        a = region_sampler(rng)
        if k % 2:
            step = rng.standard_normal(a.size)
            b = a + local_scale * (1.0 + np.linalg.norm(a)) * step / np.linalg.norm(step)
        else:
            b = region_sampler(rng)
        ga = model.grads(a, data.X, data.y)
        gb = model.grads(b, data.X, data.y)
        max_grad = max(max_grad, float(np.max(np.linalg.norm(ga, axis=1))))
        if not k % 2:
            max_grad = max(max_grad, float(np.max(np.linalg.norm(gb, axis=1))))
        dist = float(np.linalg.norm(a - b))
        if dist > 0:
            max_ratio = max(max_ratio, float(np.max(np.linalg.norm(ga - gb, axis=1))) / dist)
    return ConstantsReport(max_grad, max_ratio, constants.G, constants.L, trials)


def ball_sampler(center, radius):
    center = np.asarray(center, dtype=np.float64)

    def draw(rng):
        return sample_ball(rng, center, radius)

    return draw


@dataclass(frozen=True)
class PLReport:
    min_slack: float
    worst_point: np.ndarray
    passed: bool


def pl_check(model, data, mu, f_star, points, tol=1e-12) -> PLReport:
    """Check 0.5 ||grad f(x)||^2 >= mu (f(x) - f*) at each point.

    ``tol`` absorbs rounding on points where the inequality is tight.
    """
    if not mu > 0:
        raise ValueError("mu must be > 0")
    worst = math.inf
    worst_pt = None
    ok = True
    for x in points:
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        g = empirical_grad(model, data, x)
        gap = empirical_loss(model, data, x) - f_star
        slack = 0.5 * float(g @ g) - mu * gap
        if slack < -tol * (1.0 + abs(mu * gap)):
            ok = False
        if slack < worst:
            worst, worst_pt = slack, x
    return PLReport(min_slack=worst, worst_point=worst_pt, passed=ok)


def midpoint_convexity_violation(model, data, a, b) -> float:
    """f((a+b)/2) - (f(a)+f(b))/2; positive means a convexity violation."""
    mid = 0.5 * (np.asarray(a) + np.asarray(b))
    return empirical_loss(model, data, mid) - 0.5 * (
        empirical_loss(model, data, a) + empirical_loss(model, data, b)
    )
