"""Executable checks of the divergence, privacy and utility bounds.

A coupling run trains on D, retrains on D' from the same start, and unlearns
from the checkpoint, all noise-free; the measured distances are then compared
step by step with the analytic bounds. Noise enters only through the
Gaussian-mechanism arithmetic and the Monte-Carlo utility estimates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import Dataset, LossModel, SplitSpec, as_params, empirical_grad, empirical_loss, split
from .problems import Constants, PLConstants, Problem, make_rng
from .train import TrainConfig, certify_setup, descend, init_theta, perturb, train
from .unlearn import PrivacyBudget, calibrate_sigma, h_of_K

# Relative allowance for floating-point rounding in bound comparisons.
ROUNDING = 1e-12


def bound_learning_divergence(t: int, eta: float, L: float, G: float, n: int, m: int) -> float:
    """Bound on ||theta_t - theta'_t|| for GD on D vs D' from a shared start."""
    if not 0 <= m < n:
        raise ValueError(f"need 0 <= m < n, got m={m}, n={n}")
    if t < 0:
        raise ValueError("t must be >= 0")
    if m == 0 or t == 0:
        return 0.0
    growth = t * math.log1p(eta * L * n / (n - m))
    if growth > 700.0:
        return math.inf
    return 2.0 * G * m / (L * n) * math.expm1(growth)


def bound_unlearn_coupling(delta_start: float, eta: float, L: float, K: int) -> float:
    """Growth of an initial gap over K GD steps on the same L-smooth loss."""
    if delta_start < 0 or eta < 0 or L < 0 or K < 0:
        raise ValueError("inputs must be nonnegative")
    if delta_start == 0:
        return 0.0
    return delta_start * (1.0 + eta * L) ** K


def gaussian_sigma(delta: float, eps: float, dlt: float) -> float:
    """Noise scale making two Gaussians with means ``delta`` apart (eps, dlt)-indistinguishable."""
    if delta < 0:
        raise ValueError("sensitivity must be >= 0")
    return delta * PrivacyBudget(eps, dlt).mechanism_factor


def achieved_epsilon(delta_measured: float, sigma: float, dlt: float) -> float:
    """The eps certified for a measured gap at noise ``sigma``; inf if sigma = 0 < gap."""
    if delta_measured < 0:
        raise ValueError("distance must be >= 0")
    if delta_measured == 0:
        return 0.0
    if sigma == 0:
        return math.inf
    return delta_measured * math.sqrt(2.0 * math.log(1.25 / dlt)) / sigma


# ---------------------------------------------------------------------------
# Coupled trajectories


@dataclass(eq=False)
class CouplingRun:
    eta: float
    T: int
    K: int
    n: int
    m: int
    theta: np.ndarray        # (T+1, d) GD on D
    theta_retrain: np.ndarray  # (T+1, d) GD on D'
    theta_unlearn: np.ndarray  # (K+1, d) GD on D' from theta[T-K]
    theta0: np.ndarray = None

    @property
    def deltas(self) -> np.ndarray:
        return np.linalg.norm(self.theta - self.theta_retrain, axis=1)

    @property
    def deltas_unlearn(self) -> np.ndarray:
        return np.linalg.norm(self.theta_retrain[self.T - self.K:] - self.theta_unlearn, axis=1)

    @property
    def final_distance(self) -> float:
        return float(np.linalg.norm(self.theta_retrain[-1] - self.theta_unlearn[-1]))

    @property
    def theta_K(self) -> np.ndarray:
        return self.theta_unlearn[-1]


def couple(model: LossModel, data: Dataset, spec: SplitSpec, theta0, eta: float, T: int, Ks):
    """Coupling runs for several rewind depths sharing one D-run and one D'-run."""
    retain, _ = split(data, spec)
    _, tr = descend(model, data, theta0, eta, T)
    _, tr_re = descend(model, retain, theta0, eta, T)
    th, th_re = tr.as_array(), tr_re.as_array()
    runs = []
    for K in Ks:
        if not 0 <= K <= T:
            raise ValueError(f"K={K} outside [0, T={T}]")
        _, tr_un = descend(model, retain, th[T - K], eta, K)
        runs.append(CouplingRun(eta, T, K, data.n, spec.m, th, th_re, tr_un.as_array(), as_params(theta0)))
    return runs


def run_coupling(model: LossModel, data: Dataset, spec: SplitSpec, theta0, cfg: TrainConfig) -> CouplingRun:
    """Train on D, retrain on D', unlearn from the step T-K checkpoint (noise-free)."""
    retain, _ = split(data, spec)
    _, ckpt, tr = train(model, data, theta0, cfg)
    _, tr_re = descend(model, retain, theta0, cfg.eta, cfg.T)
    _, tr_un = descend(model, retain, ckpt.theta, ckpt.eta, cfg.K)
    full = tr.as_array() if cfg.record_stride == 1 else descend(model, data, theta0, cfg.eta, cfg.T)[1].as_array()
    return CouplingRun(cfg.eta, cfg.T, cfg.K, data.n, spec.m, full, tr_re.as_array(), tr_un.as_array(),
                       as_params(theta0))


@dataclass(frozen=True)
class CouplingCheck:
    learn_bounds: np.ndarray
    unlearn_bounds: np.ndarray
    final_bound: float
    learn_ok: bool
    unlearn_ok: bool
    final_ok: bool
    in_tube: bool
    worst_margin: float

    @property
    def passed(self) -> bool:
        return self.learn_ok and self.unlearn_ok and self.final_ok


def _leq(measured, bound):
    return np.all(np.asarray(measured) <= np.asarray(bound) * (1.0 + ROUNDING))


def check_coupling(run: CouplingRun, constants: Constants) -> CouplingCheck:
    """Compare every measured distance of ``run`` against its analytic bound."""
    L, G = constants.L, constants.G
    lb = np.array([bound_learning_divergence(t, run.eta, L, G, run.n, run.m) for t in range(run.T + 1)])
    d = run.deltas
    start = float(d[run.T - run.K])
    ub = np.array([bound_unlearn_coupling(start, run.eta, L, t) for t in range(run.K + 1)])
    hK = h_of_K(run.eta, L, run.n, run.m, run.T, run.K)
    fb = 0.0 if run.m == 0 or hK == 0 else 2.0 * run.m * G * hK / (L * run.n)
    in_tube = True
    if math.isfinite(constants.radius) and run.theta0 is not None:
        reach = max(
            float(np.max(np.linalg.norm(a - run.theta0, axis=1)))
            for a in (run.theta, run.theta_retrain, run.theta_unlearn)
        )
        in_tube = reach <= constants.radius * (1.0 + ROUNDING)
    with np.errstate(invalid="ignore"):
        margins = np.concatenate([lb - d, ub - run.deltas_unlearn, [fb - run.final_distance]])
    return CouplingCheck(
        learn_bounds=lb,
        unlearn_bounds=ub,
        final_bound=fb,
        learn_ok=bool(_leq(d, lb)),
        unlearn_ok=bool(_leq(run.deltas_unlearn, ub)),
        final_ok=bool(run.final_distance <= fb * (1.0 + ROUNDING)),
        in_tube=in_tube,
        worst_margin=float(np.nanmin(margins)),
    )


# ---------------------------------------------------------------------------
# Utility bounds


def _grad_sq_norms(model, data, thetas) -> np.ndarray:
    return np.array([float(np.sum(empirical_grad(model, data, th) ** 2)) for th in thetas])


def noisy_values(fn, center, sigma, draws, rng):
    """Evaluate ``fn`` at ``draws`` Gaussian perturbations of ``center``."""
    center = as_params(center)
    if sigma == 0:
        v = fn(center)
        return np.full(draws, v)
    pts = center[None, :] + sigma * rng.standard_normal((draws, center.size))
    with np.errstate(over="ignore", invalid="ignore"):
        return np.array([fn(p) for p in pts])


def _mean_se(values) -> tuple[float, float]:
    values = np.asarray(values, dtype=np.float64)
    if values.size and np.all(values == values[0]):
        # Constant samples (sigma = 0): return the value itself, not a rounded average.
        return float(values[0]), 0.0
    mean = float(np.mean(values))
    se = float(np.std(values, ddof=1) / math.sqrt(values.size)) if values.size > 1 else 0.0
    return mean, se


@dataclass(frozen=True)
class GradNormReport:
    lhs: float
    lhs_derivation: float
    lhs_noise_free: float
    rhs: float
    noisy_mean: float
    noisy_se: float
    draws: int
    passed: bool


def gradnorm_report(run: CouplingRun, model: LossModel, retain: Dataset, constants: Constants,
                    sigma: float, draws: int, rng: np.random.Generator) -> GradNormReport:
    """Average squared retain-gradient norm along learning + unlearning vs its bound.

    ``lhs`` follows the statement: T-K learning iterates, K unlearning iterates
    (t < K) and the expectation at the noisy output, divided by T.
    ``lhs_derivation`` is the tally used in the derivation: K+1 noise-free
    unlearning iterates and no noisy term. ``lhs_noise_free`` replaces the
    expectation by its sigma = 0 value.
    """
    if draws < 1:
        raise ValueError("draws must be >= 1")
    T, K, n, m, eta = run.T, run.K, run.n, run.m, run.eta
    if T < 1:
        raise ValueError("need T >= 1")
    L, G = constants.L, constants.G
    learn = _grad_sq_norms(model, retain, run.theta[: T - K])
    unl = _grad_sq_norms(model, retain, run.theta_unlearn)
    theta_K = run.theta_K
    vals = noisy_values(lambda p: float(np.sum(empirical_grad(model, retain, p) ** 2)),
                        theta_K, sigma, draws, rng)
    noisy_mean, noisy_se = _mean_se(vals)
    base = float(np.sum(learn)) + float(np.sum(unl[:K]))
    lhs = (base + noisy_mean) / T
    lhs_app = (float(np.sum(learn)) + float(np.sum(unl))) / T
    lhs_nf = (base + float(unl[K])) / T
    f0 = empirical_loss(model, retain, run.theta[0])
    fK = empirical_loss(model, retain, theta_K)
    rhs = (2.0 * n * (f0 - fK) / (T * eta * (n - m))
           + (T - K - 1) / T * (2.0 * G**2 * m / (n - m) + 2.0 * L * eta * G * m / (n - m)))
    tol = 3.0 * noisy_se / T + 1e-9 * abs(rhs)
    return GradNormReport(lhs, lhs_app, lhs_nf, rhs, noisy_mean, noisy_se, draws,
                          passed=bool(lhs <= rhs + tol))


def pl_bound(eta, mu, L, G, n, m, T, K, gap0, sigma, d) -> tuple[float, float]:
    """Return ``(noise_free_bound, full_bound)`` on the retain-loss suboptimality."""
    contraction = (1.0 - eta * mu * (n - m) / n) ** (T - K) * (1.0 - eta * mu) ** K
    floor = (1.0 - eta * mu) ** K * (G**2 * m + L * eta * G * m) / (mu * (n - m))
    noise_free = contraction * gap0 + floor
    return noise_free, L * math.sqrt(d) * sigma + noise_free


@dataclass(frozen=True)
class PLUtilityReport:
    bound: float
    noise_free_bound: float
    noise_term: float
    measured: float
    measured_se: float
    noise_free_gap: float
    passed: bool
    noise_free_passed: bool

    @property
    def fails_only_via_noise(self) -> bool:
        """Measured excess is above the full bound but the noise-free part holds."""
        return (not self.passed) and self.noise_free_passed


def pl_utility_report(run: CouplingRun, model: LossModel, retain: Dataset, constants: Constants,
                      pl: PLConstants | None, sigma: float, draws: int,
                      rng: np.random.Generator) -> PLUtilityReport:
    """Expected retain-loss suboptimality of the noisy output vs its PL bound."""
    if pl is None or pl.mu is None or pl.f_star is None:
        raise ValueError("not a PL problem: mu and f* are required")
    d = run.theta.shape[1]
    gap0 = empirical_loss(model, retain, run.theta[0]) - pl.f_star
    nf, full = pl_bound(run.eta, pl.mu, constants.L, constants.G, run.n, run.m, run.T, run.K, gap0, sigma, d)
    vals = noisy_values(lambda p: empirical_loss(model, retain, p), run.theta_K, sigma, draws, rng)
    mean, se = _mean_se(vals)
    measured = mean - pl.f_star
    nf_gap = empirical_loss(model, retain, run.theta_K) - pl.f_star
    slack = 1e-12 * (1.0 + abs(pl.f_star))
    return PLUtilityReport(
        bound=full,
        noise_free_bound=nf,
        noise_term=full - nf,
        measured=measured,
        measured_se=se,
        noise_free_gap=nf_gap,
        passed=bool(measured <= full + 3.0 * se + slack),
        noise_free_passed=bool(nf_gap <= nf + slack),
    )


@dataclass(frozen=True)
class GeneralizationReport:
    bound: float
    gap: float
    gap_se: float
    bounds: np.ndarray
    gaps: np.ndarray
    closed_form_gaps: np.ndarray
    passed: bool


def generalization_bound(eta, mu, L, G, n, m, T, K, gap0, sigma, d) -> float:
    nf, _ = pl_bound(eta, mu, L, G, n, m, T, K, gap0, sigma, d)
    return L * math.sqrt(d) * sigma + 2.0 * G**2 / ((n - m) * mu) + L / (2.0 * mu) * nf


def generalization_report(problem: Problem, n: int, m: int, T: int, K: int, budget: PrivacyBudget,
                          redraws: int = 20, draws: int = 200, fresh_samples: int = 2000,
                          d: int | None = None, seed: int = 0, eta_fraction: float | None = None
                          ) -> GeneralizationReport:
    """Population excess risk of the noisy unlearned output over dataset redraws.

    For each redraw the full pipeline runs (constants, training, unlearning);
    ``F(theta)`` is estimated by averaging the loss over fresh samples from the
    population and over noise draws.
    """
    if not problem.has_population:
        raise ValueError(f"{problem.name}: population distribution unavailable")
    d = d or problem.default_d
    bounds, gaps, exact = [], [], []
    for r in range(redraws):
        s = seed * 1_000_003 + r
        data = problem.generate(n, d, s)
        theta0 = init_theta(problem.model(d).dim, s)
        setup = certify_setup(problem, data, theta0, T, d=d, eta_fraction=eta_fraction, seed=s)
        spec = SplitSpec.last(n, m)
        retain, _ = split(data, spec)
        pl = problem.pl_constants(setup.model, retain)
        cert = calibrate_sigma(budget, setup.constants.G, setup.constants.L, n, m, setup.eta, T, K)
        (run,) = couple(setup.model, data, spec, theta0, setup.eta, T, [K])
        rng = make_rng(s, "generalization/noise")
        fresh = problem.sample_population(make_rng(s, "generalization/fresh"), fresh_samples, d)
        vals = noisy_values(lambda p: empirical_loss(setup.model, fresh, p), run.theta_K, cert.sigma, draws, rng)
        F_star = problem.population_optimum(d)
        gaps.append(float(np.mean(vals)) - F_star)
        exact.append(problem.population_risk(run.theta_K) + 0.5 * d * cert.sigma**2 - F_star
                     if problem.name == "scalar_quadratic" else math.nan)
        gap0 = empirical_loss(setup.model, retain, theta0) - pl.f_star
        bounds.append(generalization_bound(setup.eta, pl.mu, setup.constants.L, setup.constants.G,
                                           n, m, T, K, gap0, cert.sigma, d))
    gaps_a, bounds_a = np.array(gaps), np.array(bounds)
    gap, se = _mean_se(gaps_a)
    bound = float(np.mean(bounds_a))
    return GeneralizationReport(bound, gap, se, bounds_a, gaps_a, np.array(exact),
                                passed=bool(gap <= bound + 3.0 * se))


# ---------------------------------------------------------------------------
# One-configuration verification


@dataclass
class VerificationReport:
    problem: str
    n: int
    m: int
    T: int
    K: int
    seeds: list = field(default_factory=list)
    coupling: list = field(default_factory=list)
    certificates: list = field(default_factory=list)
    achieved_eps: list = field(default_factory=list)
    gradnorm: list = field(default_factory=list)
    pl_utility: list = field(default_factory=list)
    step_rows: list = field(default_factory=list)
    runtime: float = 0.0

    @property
    def coupling_ok(self) -> bool:
        return all(c.passed for c in self.coupling)

    @property
    def privacy_ok(self) -> bool:
        return all(e <= c.eps * (1.0 + ROUNDING) for e, c, k in
                   zip(self.achieved_eps, self.certificates, self.coupling) if k.passed)

    @property
    def gradnorm_ok(self) -> bool:
        return all(g.passed for g in self.gradnorm)

    @property
    def pl_ok(self):
        if not self.pl_utility:
            return None
        return all(p.passed and p.noise_free_passed for p in self.pl_utility)

    @property
    def passed(self) -> bool:
        return self.coupling_ok and self.privacy_ok and self.gradnorm_ok and self.pl_ok is not False


def verify_config(problem: Problem, n: int, m: int, T: int, K: int, seeds, budget: PrivacyBudget,
                  d: int | None = None, draws: int = 1000, g_scale: float = 1.0,
                  eta_fraction: float | None = None, pl_draws: int = 1000) -> VerificationReport:
    """Coupling, privacy and utility checks for one configuration over several seeds."""
    import time

    t0 = time.perf_counter()
    d = d or problem.default_d
    rep = VerificationReport(problem.name, n, m, T, K)
    for s in seeds:
        data = problem.generate(n, d, s)
        model = problem.model(d)
        theta0 = init_theta(model.dim, s)
        setup = certify_setup(problem, data, theta0, T, d=d, eta_fraction=eta_fraction, seed=s)
        consts = setup.constants.scaled(g_scale=g_scale)
        spec = SplitSpec.last(n, m)
        retain, _ = split(data, spec)
        (run,) = couple(setup.model, data, spec, theta0, setup.eta, T, [K])
        chk = check_coupling(run, consts)
        cert = calibrate_sigma(budget, consts.G, consts.L, n, m, setup.eta, T, K)
        rep.seeds.append(s)
        rep.coupling.append(chk)
        rep.certificates.append(cert)
        rep.achieved_eps.append(achieved_epsilon(run.final_distance, cert.sigma, budget.delta)
                                if cert.sigma > 0 or run.final_distance > 0 else 0.0)
        rep.gradnorm.append(gradnorm_report(run, setup.model, retain, consts, cert.sigma, draws,
                                            make_rng(s, "verify/gradnorm")))
        pl = problem.pl_constants(setup.model, retain)
        if pl is not None:
            rep.pl_utility.append(pl_utility_report(run, setup.model, retain, consts, pl, cert.sigma,
                                                    pl_draws, make_rng(s, "verify/pl")))
        for t, (meas, bnd) in enumerate(zip(run.deltas, chk.learn_bounds)):
            rep.step_rows.append((s, t, float(meas), float(bnd), float(bnd - meas)))
    rep.runtime = time.perf_counter() - t0
    return rep


# ---------------------------------------------------------------------------
# Grid sweeps


SUITE_NS = (50, 200)
SUITE_MS = (1, 5)
SUITE_TS = (50, 200)


def suite_depths(T: int) -> tuple[int, ...]:
    return (0, T // 4, T // 2, T)


@dataclass(frozen=True)
class SuiteRow:
    problem: str
    seed: int
    n: int
    m: int
    T: int
    K: int
    eta: float
    L: float
    G: float
    passed: bool
    in_tube: bool
    worst_margin: float
    final_distance: float
    final_bound: float
    sigma: float
    achieved_eps: float
    privacy_ok: bool
    gradnorm_lhs: float = math.nan
    gradnorm_rhs: float = math.nan
    gradnorm_ok: bool | None = None


@dataclass
class SuiteResult:
    rows: list = field(default_factory=list)
    runtime: float = 0.0

    @property
    def violations(self) -> int:
        return sum(not r.passed for r in self.rows)

    @property
    def tube_exits(self) -> int:
        return sum(not r.in_tube for r in self.rows)

    @property
    def privacy_violations(self) -> int:
        return sum(not r.privacy_ok for r in self.rows)

    @property
    def gradnorm_failures(self) -> int:
        return sum(r.gradnorm_ok is False for r in self.rows)

    @property
    def passed(self) -> bool:
        return self.violations == 0 and self.privacy_violations == 0 and self.gradnorm_failures == 0


def coupling_suite(problems, seeds, budget: PrivacyBudget, ns=SUITE_NS, ms=SUITE_MS, Ts=SUITE_TS,
                   depths=suite_depths, g_scale: float = 1.0, eta_fraction: float | None = None,
                   gradnorm_draws: int = 0) -> SuiteResult:
    """Coupling and privacy checks over a grid of problems, seeds, n, m, T and K.

    The D-run and D'-run are shared across rewind depths. Rows are produced in
    a fixed order, so the result depends only on the inputs. With
    ``gradnorm_draws > 0`` each row also carries the gradient-norm utility check.
    """
    import time

    t0 = time.perf_counter()
    out = SuiteResult()
    for problem in problems:
        d = problem.default_d
        for s in seeds:
            for n in ns:
                data = problem.generate(n, d, s)
                theta0 = init_theta(problem.model(d).dim, s)
                for T in Ts:
                    setup = certify_setup(problem, data, theta0, T, d=d, eta_fraction=eta_fraction, seed=s)
                    consts = setup.constants.scaled(g_scale=g_scale)
                    for m in ms:
                        spec = SplitSpec.last(n, m)
                        retain, _ = split(data, spec)
                        runs = couple(setup.model, data, spec, theta0, setup.eta, T, depths(T))
                        for run in runs:
                            chk = check_coupling(run, consts)
                            cert = calibrate_sigma(budget, consts.G, consts.L, n, m, setup.eta, T, run.K)
                            eps = (achieved_epsilon(run.final_distance, cert.sigma, budget.delta)
                                   if cert.sigma > 0 or run.final_distance > 0 else 0.0)
                            extra = {}
                            if gradnorm_draws > 0:
                                g = gradnorm_report(run, setup.model, retain, consts, cert.sigma, gradnorm_draws,
                                                    make_rng(s, f"suite/gradnorm/{n}/{m}/{T}/{run.K}"))
                                extra = dict(gradnorm_lhs=g.lhs, gradnorm_rhs=g.rhs, gradnorm_ok=g.passed)
                            out.rows.append(SuiteRow(
                                problem.name, s, n, m, T, run.K, setup.eta, consts.L, consts.G,
                                chk.passed, chk.in_tube, chk.worst_margin, run.final_distance,
                                chk.final_bound, cert.sigma, eps,
                                privacy_ok=(not chk.passed) or eps <= budget.eps * (1.0 + ROUNDING),
                                **extra,
                            ))
    out.runtime = time.perf_counter() - t0
    return out
