"""Gradient-descent learning with checkpoint capture and output perturbation."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import Dataset, EvaluationError, LossModel, as_params, empirical_grad, empirical_loss
from .problems import Constants, Problem, make_rng, max_step_size

MAGIC = b"R2D\x00"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIQdQ")
FLAG_RECONSTRUCTED = 0x01


class StepSizeError(ValueError):
    """The step size violates the learning-rate constraint."""


class DivergenceError(ArithmeticError):
    """Gradient descent produced a non-finite iterate."""


class CheckpointError(ValueError):
    """Malformed checkpoint file or checkpoint/dataset mismatch."""


@dataclass(frozen=True)
class TrainConfig:
    eta: float
    T: int
    K: int = 0
    seed: int = 0
    record_stride: int = 1

    def __post_init__(self):
        if not (self.eta > 0 and math.isfinite(self.eta)):
            raise StepSizeError(f"step size must be positive and finite, got {self.eta}")
        if self.T < 0:
            raise ValueError("T must be >= 0")
        if not 0 <= self.K <= self.T:
            raise ValueError(f"rewind depth K={self.K} must satisfy 0 <= K <= T={self.T}")
        if self.record_stride < 1:
            raise ValueError("record_stride must be >= 1")

    def check_step_size(self, L: float, n: int, m: int) -> None:
        limit = max_step_size(L, n, m)
        if self.eta > limit:
            raise StepSizeError(
                f"step-size constraint violated: eta={self.eta!r} > min(1/L, n/(2(n-m)L))={limit!r}"
            )


@dataclass(frozen=True, eq=False)
class Checkpoint:
    theta: np.ndarray
    step_index: int
    eta: float
    fingerprint: int
    problem: str = ""
    reconstructed: bool = False
    version: int = FORMAT_VERSION

    def check_dataset(self, data: Dataset) -> None:
        if data.fingerprint() != self.fingerprint:
            raise CheckpointError("checkpoint/dataset mismatch: fingerprint differs")


@dataclass(eq=False)
class Trajectory:
    """Recorded iterates plus per-step loss and gradient-norm logs."""

    steps: list = field(default_factory=list)
    iterates: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)

    def at(self, step: int) -> np.ndarray:
        i = self.steps.index(step)
        return self.iterates[i]

    @property
    def final(self) -> np.ndarray:
        return self.iterates[-1]

    def as_array(self) -> np.ndarray:
        return np.vstack(self.iterates)

    def to_csv(self, path, with_theta: bool = True) -> None:
        """Columns ``step,loss,grad_norm[,theta_0..]`` for every recorded step."""
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            d = self.iterates[0].size
            w.writerow(["step", "loss", "grad_norm"] + ([f"theta_{j}" for j in range(d)] if with_theta else []))
            for s, th in zip(self.steps, self.iterates):
                row = [s, f"{self.losses[s]:.17g}", f"{self.grad_norms[s]:.17g}"]
                if with_theta:
                    row += [f"{v:.17g}" for v in th]
                w.writerow(row)


def init_theta(dim: int, seed: int) -> np.ndarray:
    """Seeded initial point with N(0, 1/d) entries."""
    rng = make_rng(seed, "theta0")
    return as_params(rng.standard_normal(dim) / math.sqrt(dim))


def descend(model: LossModel, data: Dataset, theta0, eta: float, steps: int, record_every: int = 1, keep=()):
    """Run ``steps`` plain GD iterations on the empirical loss of ``data``.

    Returns ``(final, Trajectory)``. Iterates are recorded at multiples of
    ``record_every``, at every index in ``keep``, and always at 0 and at the
    final step. Losses and gradient norms are logged for every step.
    """
    theta = np.array(as_params(theta0), dtype=np.float64)
    traj = Trajectory()
    keep = set(keep) | {0, steps}
    for t in range(steps + 1):
        try:
            g = empirical_grad(model, data, theta)
            loss = empirical_loss(model, data, theta)
        except EvaluationError as exc:
            raise DivergenceError(f"step {t}: {exc}") from exc
        traj.losses.append(loss)
        traj.grad_norms.append(float(np.linalg.norm(g)))
        if t % record_every == 0 or t in keep:
            traj.steps.append(t)
            traj.iterates.append(theta.copy())
        if t == steps:
            break
        theta = theta - eta * g
        if not np.all(np.isfinite(theta)):
            raise DivergenceError(f"non-finite iterate at step {t + 1}")
    return as_params(theta), traj


def gd_steps(model: LossModel, data: Dataset, theta0, eta: float, steps: int) -> np.ndarray:
    """GD without logging; one gradient evaluation per step."""
    theta = np.array(as_params(theta0), dtype=np.float64)
    for t in range(steps):
        theta = theta - eta * empirical_grad(model, data, theta)
        if not np.all(np.isfinite(theta)):
            raise DivergenceError(f"non-finite iterate at step {t + 1}")
    return as_params(theta)


def train(model: LossModel, data: Dataset, theta0, cfg: TrainConfig, L: float | None = None,
          problem: str = "", m: int = 0):
    """Run T GD steps on ``data`` and capture the checkpoint at step T - K.

    When ``L`` is given the step-size constraint is enforced for a forget set
    of size ``m``. The returned final weights are noise-free; see
    :func:`perturb`.
    """
    if L is not None:
        cfg.check_step_size(L, data.n, m)
    theta_T, traj = descend(model, data, theta0, cfg.eta, cfg.T, cfg.record_stride, keep=(cfg.T - cfg.K,))
    ckpt = Checkpoint(
        theta=traj.at(cfg.T - cfg.K).copy(),
        step_index=cfg.T - cfg.K,
        eta=cfg.eta,
        fingerprint=data.fingerprint(),
        problem=problem,
    )
    return theta_T, ckpt, traj


def perturb(theta, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Add i.i.d. N(0, sigma^2) noise to every coordinate."""
    if not sigma >= 0:
        raise ValueError(f"noise scale must be >= 0, got {sigma}")
    if math.isinf(sigma):
        raise ValueError("noise scale is infinite: the certificate is vacuous for this K")
    theta = as_params(theta)
    if sigma == 0:
        return theta
    return as_params(theta + sigma * rng.standard_normal(theta.size))


# ---------------------------------------------------------------------------
# Checkpoint files


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    theta = np.asarray(ckpt.theta, dtype="<f8")
    name = ckpt.problem.encode()
    flags = FLAG_RECONSTRUCTED if ckpt.reconstructed else 0
    blob = _HEADER.pack(MAGIC, ckpt.version, theta.size, ckpt.step_index, ckpt.eta, ckpt.fingerprint)
    blob += theta.tobytes()
    # Trailing extension: flags u8, name length u16, utf-8 problem name.
    blob += struct.pack("<BH", flags, len(name)) + name
    Path(path).write_bytes(blob)


def load_checkpoint(path, data: Dataset | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    magic, version, d, step, eta, fp = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    end = _HEADER.size + 8 * d
    if len(raw) < end:
        raise CheckpointError(f"{path}: truncated parameter block ({len(raw)} < {end} bytes)")
    theta = np.frombuffer(raw, dtype="<f8", count=d, offset=_HEADER.size).astype(np.float64)
    flags, problem = 0, ""
    if len(raw) > end:
        if len(raw) < end + 3:
            raise CheckpointError(f"{path}: truncated extension block")
        flags, nlen = struct.unpack_from("<BH", raw, end)
        if len(raw) != end + 3 + nlen:
            raise CheckpointError(f"{path}: extension length mismatch")
        problem = raw[end + 3 :].decode()
    ckpt = Checkpoint(
        theta=as_params(theta),
        step_index=step,
        eta=eta,
        fingerprint=fp,
        problem=problem,
        reconstructed=bool(flags & FLAG_RECONSTRUCTED),
        version=version,
    )
    if data is not None:
        ckpt.check_dataset(data)
    return ckpt


# ---------------------------------------------------------------------------
# Step size and training-tube constants


@dataclass(frozen=True)
class Setup:
    """Everything needed to run a certified experiment on one dataset."""

    problem: Problem
    model: LossModel
    data: Dataset
    theta0: np.ndarray
    eta: float
    T: int
    constants: Constants


def certify_setup(problem: Problem, data: Dataset, theta0, T: int, d: int | None = None,
                  eta: float | None = None, eta_fraction: float | None = None,
                  seed: int = 0, max_rounds: int = 6) -> Setup:
    """Pick the step size and certify (L, G) over the training tube.

    The tube is the ball of radius ``2 max_t ||theta_t - theta_0||`` around
    ``theta_0`` along a T-step run on ``data``. For problems whose smoothness
    is itself estimated on the tube, the step size is re-derived until the
    estimate stops growing.
    """
    model = problem.model(d)
    theta0 = as_params(theta0)
    frac = problem.eta_fraction if eta_fraction is None else eta_fraction
    rng = make_rng(seed, f"constants/{problem.name}")
    L = problem.smoothness(model, data)
    if L is None:
        L = problem.region_constants(model, data, theta0, 1.0, rng).L
    for _ in range(max_rounds):
        step = eta if eta is not None else frac / L
        _, traj = descend(model, data, theta0, step, T)
        radius = 2.0 * max(float(np.linalg.norm(th - theta0)) for th in traj.iterates)
        consts = problem.region_constants(model, data, theta0, radius, rng)
        if consts.L <= L or eta is not None:
            return Setup(problem, model, data, theta0, step, T, Constants(max(L, consts.L), consts.G, radius))
        L = consts.L
    raise EvaluationError(f"{problem.name}: smoothness estimate did not settle")
