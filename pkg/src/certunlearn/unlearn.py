"""Noise calibration and rewind-based unlearning.

The calibration arithmetic is closed form: the amplification factor

    h(K) = ((1 + eta L n / (n - m))^(T - K) - 1) * (1 + eta L)^K

bounds the gap between the unlearned and retrained weights by
``B = 2 m G h(K) / (L n)``, and the Gaussian mechanism turns ``B`` into the
noise scale ``sigma = B sqrt(2 ln(1.25/delta)) / eps``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, fields

import numpy as np

from .model import Dataset, LossModel, SplitError, SplitSpec, as_params, split
from .train import Checkpoint, CheckpointError, gd_steps, perturb

# Beyond this exponent exp() overflows float64.
_LOG_OVERFLOW = 700.0


@dataclass(frozen=True)
class PrivacyBudget:
    eps: float
    delta: float

    def __post_init__(self):
        if not (self.eps > 0 and math.isfinite(self.eps)):
            raise ValueError(f"eps must be > 0, got {self.eps}")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")

    @property
    def mechanism_factor(self) -> float:
        """sqrt(2 ln(1.25/delta)) / eps."""
        return math.sqrt(2.0 * math.log(1.25 / self.delta)) / self.eps


def _check_hk_args(eta, L, n, m, T, K):
    if not (eta > 0 and L > 0):
        raise ValueError("eta and L must be > 0")
    if not 0 <= K <= T:
        raise ValueError(f"need 0 <= K <= T, got K={K}, T={T}")
    if not 0 <= m < n:
        raise SplitError(f"need 0 <= m < n, got m={m}, n={n}")


def log_h_of_K(eta: float, L: float, n: int, m: int, T: int, K: int) -> float:
    """Natural log of h(K); ``-inf`` when h(K) = 0. Never overflows."""
    _check_hk_args(eta, L, n, m, T, K)
    growth = (T - K) * math.log1p(eta * L * n / (n - m))
    if growth == 0.0:
        return -math.inf
    if growth > _LOG_OVERFLOW:
        first = growth + math.log1p(-math.exp(-growth))
    else:
        first = math.log(math.expm1(growth))
    return first + K * math.log1p(eta * L)


def h_of_K(eta: float, L: float, n: int, m: int, T: int, K: int) -> float:
    """h(K) in closed form; ``inf`` when it exceeds the float64 range."""
    _check_hk_args(eta, L, n, m, T, K)
    growth = (T - K) * math.log1p(eta * L * n / (n - m))
    tail = K * math.log1p(eta * L)
    if growth + tail <= _LOG_OVERFLOW:
        return math.expm1(growth) * math.exp(tail)
    lh = log_h_of_K(eta, L, n, m, T, K)
    return math.exp(lh) if lh < 709.0 else math.inf


def distance_bound(G: float, L: float, n: int, m: int, hK: float) -> float:
    """B = 2 m G h(K) / (L n)."""
    if m == 0 or hK == 0:
        return 0.0
    return 2.0 * m * G * hK / (L * n)


@dataclass(frozen=True)
class Certificate:
    eps: float
    delta: float
    sigma: float
    K: int
    T: int
    m: int
    n: int
    eta: float
    G: float
    L: float
    h: float
    bound: float
    vacuous: bool = False

    def check(self, rel: float = 1e-12) -> None:
        """Assert the stored fields are mutually consistent."""
        if not self.K <= self.T:
            raise ValueError("certificate has K > T")
        if not self.m < self.n:
            raise ValueError("certificate has m >= n")
        expected = self.bound * PrivacyBudget(self.eps, self.delta).mechanism_factor
        if math.isinf(expected) or math.isinf(self.sigma):
            if not (math.isinf(expected) and math.isinf(self.sigma)):
                raise ValueError("sigma / bound disagree on overflow")
            return
        if abs(self.sigma - expected) > rel * max(abs(expected), 1e-300):
            raise ValueError(f"sigma {self.sigma!r} inconsistent with bound ({expected!r})")

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = f"{v:.17g}"
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Certificate":
        kv = dict(line.split("=", 1) for line in text.splitlines() if line.strip())
        out = {}
        for f in fields(cls):
            raw = kv[f.name]
            if f.type in ("bool", bool):
                out[f.name] = raw == "true"
            elif f.type in ("int", int):
                out[f.name] = int(raw)
            else:
                out[f.name] = float(raw)
        return cls(**out)

    @staticmethod
    def csv_header() -> list[str]:
        return [f.name for f in fields(Certificate)]

    def csv_row(self) -> list[str]:
        row = []
        for k, v in asdict(self).items():
            row.append(f"{v:.17g}" if isinstance(v, float) else str(v).lower() if isinstance(v, bool) else str(v))
        return row


def calibrate_sigma(budget: PrivacyBudget, G: float, L: float, n: int, m: int,
                    eta: float, T: int, K: int) -> Certificate:
    """Noise scale that makes K-step unlearning (eps, delta)-indistinguishable from retraining."""
    if budget.eps > 1:
        warnings.warn(
            f"eps={budget.eps} > 1: the classical Gaussian-mechanism constant is only proven for eps <= 1",
            stacklevel=2,
        )
    hK = h_of_K(eta, L, n, m, T, K)
    B = distance_bound(G, L, n, m, hK)
    sigma = B * budget.mechanism_factor
    return Certificate(
        eps=budget.eps, delta=budget.delta, sigma=sigma, K=K, T=T, m=m, n=n,
        eta=eta, G=G, L=L, h=hK, bound=B, vacuous=math.isinf(B),
    )


def log_sigma(budget, G, L, n, m, eta, T, K) -> float:
    if m == 0:
        return -math.inf
    return (log_h_of_K(eta, L, n, m, T, K) + math.log(2.0 * m * G / (L * n))
            + math.log(budget.mechanism_factor))


def min_rewind_for_noise(sigma_max: float, budget: PrivacyBudget, G: float, L: float,
                         n: int, m: int, eta: float, T: int) -> int:
    """Smallest K in [0, T] whose calibrated sigma does not exceed ``sigma_max``.

    sigma(K) is strictly decreasing with sigma(T) = 0, so bisection applies.
    Comparisons are done in log space so overflowing sigmas still order correctly.
    """
    if not sigma_max >= 0:
        raise ValueError("sigma_max must be >= 0")
    target = math.log(sigma_max) if sigma_max > 0 else -math.inf

    def ok(K):
        return log_sigma(budget, G, L, n, m, eta, T, K) <= target

    if ok(0):
        return 0
    lo, hi = 0, T  # ok(lo) false, ok(hi) true
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi


def retain_for(data: Dataset, spec: SplitSpec, ckpt: Checkpoint) -> Dataset:
    """Retain set D' for a checkpoint trained on ``data``, with fingerprint check."""
    ckpt.check_dataset(data)
    retain, _ = split(data, spec)
    return retain


def unlearn(model: LossModel, retain: Dataset, ckpt: Checkpoint, K: int, sigma: float,
            rng: np.random.Generator, T: int | None = None):
    """K GD steps on the retain loss from the checkpoint, then Gaussian noise.

    The step size is the one stored in the checkpoint. Returns
    ``(theta_K, theta_noisy)``.
    """
    if K < 0:
        raise ValueError("K must be >= 0")
    if T is not None and ckpt.step_index + K != T:
        raise CheckpointError(
            f"checkpoint step {ckpt.step_index} + K={K} != T={T}: wrong checkpoint for this rewind depth"
        )
    theta_K = gd_steps(model, retain, ckpt.theta, ckpt.eta, K)
    return theta_K, perturb(theta_K, sigma, rng)


@dataclass(frozen=True)
class UnlearnConfig:
    T: int
    K: int
    G: float
    L: float


def sequential_unlearn(model: LossModel, data: Dataset, ckpt: Checkpoint, requests,
                       budget: PrivacyBudget, cfg: UnlearnConfig, rng: np.random.Generator,
                       current=None):
    """Serve deletion requests one after another from the same checkpoint.

    Each request adds indices (into the original ``data``) to the cumulative
    forget set; unlearning re-runs from the checkpoint on the shrunken retain
    set with sigma recalibrated for the cumulative ``m``. Returns the list of
    certificates and the final released weights (``current`` if there were
    no requests).
    """
    ckpt.check_dataset(data)
    forgotten: set[int] = set()
    certs = []
    released = None if current is None else as_params(current)
    for req in requests:
        new = set(req.forget_indices)
        if new & forgotten:
            raise SplitError(f"indices {sorted(new & forgotten)} were already unlearned")
        forgotten |= new
        spec = SplitSpec.of(forgotten)
        if spec.m >= data.n:
            raise SplitError("cumulative forget set would empty the retain set")
        retain = retain_for(data, spec, ckpt)
        cert = calibrate_sigma(budget, cfg.G, cfg.L, data.n, spec.m, ckpt.eta, cfg.T, cfg.K)
        _, released = unlearn(model, retain, ckpt, cfg.K, cert.sigma, rng, T=cfg.T)
        certs.append(cert)
    return certs, released
