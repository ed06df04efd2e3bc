"""Command-line front end.

Every subcommand reads its settings from flags and, optionally, from a flat
``key=value`` config file given with ``--config``; flags win. Artifacts go to
the run directory ``--out``. Exit codes: 0 success, 1 runtime or
verification failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
import time
from pathlib import Path

import numpy as np

from .certify import (
    SUITE_MS,
    SUITE_NS,
    SUITE_TS,
    coupling_suite,
    verify_config,
)
from .model import CountingModel, Dataset, SplitSpec, split
from .problems import PROBLEMS, get_problem, make_rng
from .rewind import ProxConfig, ProxStats, rewind
from .train import (
    Checkpoint,
    TrainConfig,
    certify_setup,
    gd_steps,
    init_theta,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .unlearn import PrivacyBudget, calibrate_sigma, retain_for, unlearn

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

CHECKPOINT = "checkpoint.r2d"
FINAL = "final.r2d"
DATASET = "dataset.csv"
CONSTANTS = "constants.txt"


class UsageError(Exception):
    pass


def fmt(x) -> str:
    """17 significant digits for floats, plain text for everything else."""
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    if isinstance(x, bool):
        return "true" if x else "false"
    return str(x)


def parse_kv(text: str, source: str = "config") -> dict[str, str]:
    """Parse flat ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected key=value, got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def write_kv(path: Path, items) -> None:
    path.write_text("".join(f"{k}={fmt(v)}\n" for k, v in items))


def _int_list(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    return tuple(int(t) for t in text.split(","))


# ---------------------------------------------------------------------------
# Argument parsing


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value file; flags override its values")
    p.add_argument("--out", help="run directory (default: out)")


def _experiment(p: argparse.ArgumentParser) -> None:
    p.add_argument("--problem", choices=sorted(PROBLEMS))
    p.add_argument("--n", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--seed", type=int)


def _split(p: argparse.ArgumentParser) -> None:
    p.add_argument("--m", type=int, help="forget the last m samples")
    p.add_argument("--forget", type=_int_list, help="comma-separated indices to forget")


def _budget(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epsilon", type=float)
    p.add_argument("--delta", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="certunlearn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run GD on D and save the rewind checkpoint")
    _common(p)
    _experiment(p)
    _split(p)
    p.add_argument("--eta", type=float)
    p.add_argument("--T", type=int)
    p.add_argument("--K", type=int)
    p.add_argument("--record-stride", type=int)

    p = sub.add_parser("rewind", help="reconstruct the checkpoint from final weights")
    _common(p)
    p.add_argument("--weights", help="final-weights checkpoint file")
    p.add_argument("--data", help="full dataset CSV")
    p.add_argument("--K", type=int)
    p.add_argument("--L", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--tol", type=float)
    p.add_argument("--output", "--checkpoint-out", dest="output")

    p = sub.add_parser("unlearn", help="fine-tune on D' from the checkpoint and add noise")
    _common(p)
    _split(p)
    _budget(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--sigma", type=float)
    p.add_argument("--T", type=int)
    p.add_argument("--K", type=int)
    p.add_argument("--G", type=float)
    p.add_argument("--L", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--output")

    p = sub.add_parser("calibrate", help="noise scale and distance bound for every K")
    _common(p)
    _budget(p)
    p.add_argument("--n", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--T", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--G", type=float)
    p.add_argument("--L", type=float)
    p.add_argument("--output")

    p = sub.add_parser("verify", help="check the coupling, privacy and utility bounds")
    _common(p)
    _budget(p)
    p.add_argument("--suite", choices=("coupling", "utility"),
                   help="grid over all problems; default when --problem is absent")
    p.add_argument("--problem", choices=sorted(PROBLEMS))
    p.add_argument("--problems", help="comma-separated subset for --suite")
    p.add_argument("--n", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--T", type=int)
    p.add_argument("--K", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--seeds", type=int, help="number of seeds, 0..seeds-1")
    p.add_argument("--g-scale", type=float, help="multiply the certified G (fault injection)")
    p.add_argument("--eta-fraction", type=float, help="step size as a fraction of 1/L")
    p.add_argument("--draws", type=int)

    p = sub.add_parser("bench", help="gradient-evaluation counts and timing: unlearn vs retrain")
    _common(p)
    _experiment(p)
    _split(p)
    p.add_argument("--eta", type=float)
    p.add_argument("--T", type=int)
    p.add_argument("--K", type=int)
    return parser


DEFAULTS = {
    "out": "out",
    "seed": 0,
    "record_stride": 1,
    "delta": 1e-5,
    "seeds": 20,
    "g_scale": 1.0,
    "draws": 1000,
    "epsilon": 1.0,
}

# unlearn has no default budget: --sigma and --epsilon are mutually exclusive.
COMMAND_DEFAULTS = {"unlearn": {"epsilon": None}}


def _actions(parser: argparse.ArgumentParser, command: str) -> dict:
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    return {a.dest: a for a in sub.choices[command]._actions if a.dest not in ("help", "config")}


def resolve(parser: argparse.ArgumentParser, argv) -> tuple[str, dict]:
    """Merge defaults, config-file values and flags (in increasing priority)."""
    args = parser.parse_args(argv)
    command = args.command
    actions = _actions(parser, command)
    merged = dict(DEFAULTS)
    merged.update(COMMAND_DEFAULTS.get(command, {}))
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from None
        for key, raw in parse_kv(text, args.config).items():
            if key not in actions:
                raise UsageError(f"unknown config key {key!r} for '{command}'")
            act = actions[key]
            try:
                val = act.type(raw) if act.type else raw
            except ValueError:
                raise UsageError(f"bad value for {key}: {raw!r}") from None
            if act.choices is not None and val not in act.choices:
                raise UsageError(f"bad value for {key}: {raw!r}")
            merged[key] = val
    for key, val in vars(args).items():
        if key in ("command", "config"):
            continue
        if val is not None:
            merged[key] = val
    cfg = {k: merged.get(k) for k in actions}
    return command, cfg


def need(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def split_spec(cfg: dict, n: int) -> SplitSpec:
    if cfg.get("m") is not None and cfg.get("forget") is not None:
        raise UsageError("give either --m or --forget, not both")
    if cfg.get("forget") is not None:
        spec = SplitSpec.of(cfg["forget"])
    else:
        spec = SplitSpec.last(n, cfg.get("m") or 0)
    spec.validate(n)
    return spec


def echo_config(cfg: dict) -> list:
    return [(f"config.{k}", ",".join(map(str, v)) if isinstance(v, tuple) else v)
            for k, v in sorted(cfg.items()) if v is not None]


def _outdir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_constants(path: Path) -> dict[str, str]:
    return parse_kv(path.read_text(), str(path)) if path.exists() else {}


# ---------------------------------------------------------------------------
# Commands


def cmd_train(cfg: dict) -> int:
    need(cfg, "problem", "n", "eta", "T")
    K = cfg.get("K") or 0
    problem = get_problem(cfg["problem"])
    d = cfg.get("d") or problem.default_d
    seed = cfg["seed"]
    tc = TrainConfig(eta=cfg["eta"], T=cfg["T"], K=K, seed=seed, record_stride=cfg["record_stride"])
    data = problem.generate(cfg["n"], d, seed)
    spec = split_spec(cfg, data.n)
    model = problem.model(d)
    theta0 = init_theta(model.dim, seed)
    rng = make_rng(seed, f"constants/{problem.name}")
    L0 = problem.smoothness(model, data)
    if L0 is None:
        L0 = problem.region_constants(model, data, theta0, 1.0, rng).L
    tc.check_step_size(L0, data.n, spec.m)
    setup = certify_setup(problem, data, theta0, tc.T, d=d, eta=tc.eta, seed=seed)
    consts = setup.constants
    theta_T, ckpt, traj = train(model, data, theta0, tc, L=consts.L, problem=problem.name, m=spec.m)

    out = _outdir(cfg)
    data.to_csv(out / DATASET)
    save_checkpoint(out / CHECKPOINT, ckpt)
    save_checkpoint(out / FINAL, Checkpoint(theta_T, tc.T, tc.eta, ckpt.fingerprint, problem.name))
    traj.to_csv(out / "trajectory.csv")
    write_kv(out / CONSTANTS, [
        ("problem", problem.name), ("d", d), ("n", data.n), ("eta", tc.eta), ("T", tc.T), ("K", K),
        ("L", consts.L), ("G", consts.G), ("radius", consts.radius),
    ])
    final_loss = traj.losses[-1]
    write_kv(out / "summary.txt", echo_config(cfg) + [
        ("final_loss", final_loss), ("final_grad_norm", traj.grad_norms[-1]),
        ("checkpoint", out / CHECKPOINT), ("checkpoint_step", ckpt.step_index),
        ("fingerprint", f"{ckpt.fingerprint:016x}"), ("L", consts.L), ("G", consts.G),
        ("radius", consts.radius),
    ])
    print(f"final_loss={fmt(final_loss)}")
    print(f"checkpoint={out / CHECKPOINT} step={ckpt.step_index}")
    return EXIT_OK


def cmd_rewind(cfg: dict) -> int:
    need(cfg, "K")
    out = Path(cfg["out"])
    weights_path = Path(cfg.get("weights") or out / FINAL)
    data_path = Path(cfg.get("data") or out / DATASET)
    data = Dataset.from_csv(data_path)
    final = load_checkpoint(weights_path, data)
    consts = _read_constants(weights_path.parent / CONSTANTS)
    eta = cfg.get("eta") or final.eta
    L = cfg.get("L")
    if L is None:
        if "L" in consts:
            L = float(consts["L"])
        else:
            problem = get_problem(final.problem)
            L = problem.smoothness(problem.model(data.n_features), data)
    if L is None:
        raise UsageError("smoothness unknown: pass --L or keep constants.txt next to the weights")
    K = cfg["K"]
    if K > final.step_index:
        raise ValueError(f"cannot rewind K={K} steps from step {final.step_index}")
    model = get_problem(final.problem).model(data.n_features)
    stats = ProxStats()
    theta = rewind(model, data, final.theta, eta, K, L, ProxConfig(tol=cfg.get("tol")), stats)
    ckpt = Checkpoint(theta, final.step_index - K, eta, final.fingerprint, final.problem, reconstructed=True)
    path = Path(cfg.get("output") or out / "checkpoint_rewound.r2d")
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, ckpt)
    print(f"checkpoint={path} step={ckpt.step_index} reconstructed=true")
    print(f"max_residual={fmt(stats.max_residual)} inner_iterations={stats.inner_iterations}")
    return EXIT_OK


def cmd_unlearn(cfg: dict) -> int:
    if cfg.get("sigma") is not None and cfg.get("epsilon") is not None:
        raise UsageError("give either --sigma or --epsilon, not both")
    if cfg.get("sigma") is None and cfg.get("epsilon") is None:
        raise UsageError("need --epsilon (with --delta) or --sigma")
    out = Path(cfg["out"])
    ckpt_path = Path(cfg.get("checkpoint") or out / CHECKPOINT)
    data_path = Path(cfg.get("data") or out / DATASET)
    data = Dataset.from_csv(data_path)
    ckpt = load_checkpoint(ckpt_path, data)
    consts = _read_constants(ckpt_path.parent / CONSTANTS)

    def pick(key, cast):
        if cfg.get(key) is not None:
            return cfg[key]
        if key in consts:
            return cast(consts[key])
        return None

    T = pick("T", int)
    K = cfg.get("K")
    if T is None and K is None:
        raise UsageError("need --T or --K (or constants.txt next to the checkpoint)")
    if K is None:
        K = T - ckpt.step_index
    if T is None:
        T = ckpt.step_index + K
    spec = split_spec(cfg, data.n)
    retain = retain_for(data, spec, ckpt)
    model = get_problem(ckpt.problem).model(data.n_features)
    rng = make_rng(cfg["seed"], "unlearn/noise")
    if cfg.get("sigma") is not None:
        sigma = cfg["sigma"]
        report = [("sigma", sigma), ("K", K), ("T", T), ("m", spec.m), ("n", data.n), ("certified", False)]
    else:
        G, L = pick("G", float), pick("L", float)
        if G is None or L is None:
            raise UsageError("calibration needs G and L: pass --G/--L or keep constants.txt")
        cert = calibrate_sigma(PrivacyBudget(cfg["epsilon"], cfg["delta"]), G, L, data.n, spec.m,
                               ckpt.eta, T, K)
        if cert.vacuous:
            raise ValueError("calibrated noise scale overflows: the certificate is vacuous for this K")
        sigma = cert.sigma
        report = [(k, v) for k, v in zip(cert.csv_header(), (getattr(cert, f) for f in cert.csv_header()))]
    theta_K, noisy = unlearn(model, retain, ckpt, K, sigma, rng, T=T)
    path = Path(cfg.get("output") or out / "unlearned.r2d")
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, Checkpoint(noisy, T, ckpt.eta, retain.fingerprint(), ckpt.problem))
    write_kv(path.with_suffix(".certificate.txt"), report)
    print(f"weights={path}")
    print(f"sigma={fmt(sigma)} K={K} m={spec.m}")
    return EXIT_OK


def cmd_calibrate(cfg: dict) -> int:
    consts = _read_constants(Path(cfg["out"]) / CONSTANTS)
    for key, cast in (("n", int), ("T", int), ("eta", float), ("G", float), ("L", float)):
        if cfg.get(key) is None and key in consts:
            cfg[key] = cast(consts[key])
    need(cfg, "n", "T", "eta", "G", "L")
    m = cfg.get("m") or 0
    budget = PrivacyBudget(cfg["epsilon"], cfg["delta"])
    out = _outdir(cfg)
    path = Path(cfg.get("output") or out / "calibration.csv")
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["K", "h", "sigma", "bound"])
        for K in range(cfg["T"] + 1):
            c = calibrate_sigma(budget, cfg["G"], cfg["L"], cfg["n"], m, cfg["eta"], cfg["T"], K)
            w.writerow([K, fmt(c.h), fmt(c.sigma), fmt(c.bound)])
    print(f"calibration={path}")
    return EXIT_OK


def _verify_single(cfg: dict, budget: PrivacyBudget, out: Path) -> bool:
    need(cfg, "n", "T")
    problem = get_problem(cfg["problem"])
    T = cfg["T"]
    K = cfg["K"] if cfg.get("K") is not None else T // 2
    rep = verify_config(problem, cfg["n"], cfg.get("m") or 1, T, K, range(cfg["seeds"]), budget,
                        d=cfg.get("d"), draws=cfg["draws"], g_scale=cfg["g_scale"],
                        eta_fraction=cfg.get("eta_fraction"), pl_draws=cfg["draws"])
    with (out / "verify_steps.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "t", "delta_measured", "delta_bound", "margin"])
        for s, t, meas, bnd, margin in rep.step_rows:
            w.writerow([s, t, fmt(meas), fmt(bnd), fmt(margin)])
    lines = echo_config(cfg) + [
        ("coupling_ok", rep.coupling_ok), ("privacy_ok", rep.privacy_ok),
        ("gradnorm_ok", rep.gradnorm_ok), ("pl_ok", "n/a" if rep.pl_ok is None else rep.pl_ok),
    ]
    for s, c, cert, eps, g in zip(rep.seeds, rep.coupling, rep.certificates, rep.achieved_eps, rep.gradnorm):
        lines += [(f"seed{s}.coupling", c.passed), (f"seed{s}.worst_margin", c.worst_margin),
                  (f"seed{s}.sigma", cert.sigma), (f"seed{s}.achieved_eps", eps),
                  (f"seed{s}.gradnorm_lhs", g.lhs), (f"seed{s}.gradnorm_rhs", g.rhs)]
    for s, p in zip(rep.seeds, rep.pl_utility):
        lines += [(f"seed{s}.pl_measured", p.measured), (f"seed{s}.pl_bound", p.bound),
                  (f"seed{s}.pl_noise_free_gap", p.noise_free_gap),
                  (f"seed{s}.pl_noise_free_bound", p.noise_free_bound)]
    lines.append(("passed", rep.passed))
    write_kv(out / "verify_summary.txt", lines)
    write_kv(out / "verify_timing.txt", [("runtime_seconds", rep.runtime)])
    print(f"coupling_ok={fmt(rep.coupling_ok)} privacy_ok={fmt(rep.privacy_ok)} "
          f"gradnorm_ok={fmt(rep.gradnorm_ok)} pl_ok={'n/a' if rep.pl_ok is None else fmt(rep.pl_ok)}")
    return rep.passed


def _verify_suite(cfg: dict, budget: PrivacyBudget, out: Path) -> bool:
    names = cfg["problems"].split(",") if cfg.get("problems") else list(PROBLEMS)
    problems = [get_problem(nm.strip()) for nm in names]
    pick = lambda key, grid: (cfg[key],) if cfg.get(key) is not None else grid  # noqa: E731
    depths = (lambda T: (cfg["K"],)) if cfg.get("K") is not None else None
    kwargs = {} if depths is None else {"depths": depths}
    utility = cfg.get("suite") == "utility"
    res = coupling_suite(problems, range(cfg["seeds"]), budget, ns=pick("n", SUITE_NS), ms=pick("m", SUITE_MS),
                         Ts=pick("T", SUITE_TS), g_scale=cfg["g_scale"], eta_fraction=cfg.get("eta_fraction"),
                         gradnorm_draws=cfg["draws"] if utility else 0, **kwargs)
    cols = ["problem", "seed", "n", "m", "T", "K", "eta", "L", "G", "passed", "in_tube", "worst_margin",
            "final_distance", "final_bound", "sigma", "achieved_eps", "privacy_ok"]
    if utility:
        cols += ["gradnorm_lhs", "gradnorm_rhs", "gradnorm_ok"]
    with (out / "verify_runs.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in res.rows:
            w.writerow([fmt(getattr(r, c)) for c in cols])
    lines = echo_config(cfg) + [
        ("runs", len(res.rows)), ("coupling_violations", res.violations), ("tube_exits", res.tube_exits),
        ("privacy_violations", res.privacy_violations),
    ]
    if utility:
        lines.append(("gradnorm_failures", res.gradnorm_failures))
    lines.append(("passed", res.passed))
    write_kv(out / "verify_summary.txt", lines)
    write_kv(out / "verify_timing.txt", [("runtime_seconds", res.runtime)])
    print(f"runs={len(res.rows)} coupling_violations={res.violations} privacy_violations={res.privacy_violations}"
          + (f" gradnorm_failures={res.gradnorm_failures}" if utility else ""))
    return res.passed


def cmd_verify(cfg: dict) -> int:
    if cfg.get("problem") and cfg.get("suite"):
        raise UsageError("give either --problem or --suite, not both")
    budget = PrivacyBudget(cfg["epsilon"], cfg["delta"])
    out = _outdir(cfg)
    ok = _verify_single(cfg, budget, out) if cfg.get("problem") else _verify_suite(cfg, budget, out)
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_bench(cfg: dict) -> int:
    need(cfg, "problem", "n", "T", "K")
    problem = get_problem(cfg["problem"])
    d = cfg.get("d") or problem.default_d
    seed = cfg["seed"]
    T, K = cfg["T"], cfg["K"]
    if not 0 <= K <= T:
        raise ValueError(f"need 0 <= K <= T, got K={K}, T={T}")
    data = problem.generate(cfg["n"], d, seed)
    spec = split_spec(cfg, data.n)
    retain, _ = split(data, spec)
    theta0 = init_theta(problem.model(d).dim, seed)
    setup = certify_setup(problem, data, theta0, T, d=d, eta=cfg.get("eta"), seed=seed)
    eta, L = setup.eta, setup.constants.L
    model = CountingModel(setup.model)

    t0 = time.perf_counter()
    theta_T = gd_steps(model, data, theta0, eta, T)
    train_time, train_evals = time.perf_counter() - t0, model.grad_evals
    ckpt_theta = gd_steps(setup.model, data, theta0, eta, T - K)

    model.reset()
    t0 = time.perf_counter()
    gd_steps(model, retain, theta0, eta, T)
    retrain_time, retrain_evals = time.perf_counter() - t0, model.grad_evals

    model.reset()
    t0 = time.perf_counter()
    gd_steps(model, retain, ckpt_theta, eta, K)
    unlearn_time, unlearn_evals = time.perf_counter() - t0, model.grad_evals

    stats = ProxStats()
    t0 = time.perf_counter()
    if eta * L < 1:
        rewind(setup.model, data, theta_T, eta, K, L, ProxConfig(), stats)
    rewind_time = time.perf_counter() - t0

    ratio = unlearn_evals / retrain_evals if retrain_evals else math.nan
    lines = echo_config(cfg) + [
        ("eta", eta), ("n", data.n), ("m", spec.m), ("T", T), ("K", K),
        ("train_grad_evals", train_evals), ("retrain_grad_evals", retrain_evals),
        ("unlearn_grad_evals", unlearn_evals), ("expected_unlearn_grad_evals", K * (data.n - spec.m)),
        # Full-gradient evaluations, i.e. GD steps on the retain loss.
        ("unlearn_full_grads", unlearn_evals // retain.n if retain.n else 0),
        ("expected_train_grad_evals", T * data.n), ("compute_ratio", ratio), ("K_over_T", K / T if T else math.nan),
        ("rewind_inner_iterations", stats.inner_iterations), ("rewind_grad_calls", stats.grad_calls),
        ("rewind_per_sample_grad_evals", stats.grad_calls * data.n),
        ("train_seconds", train_time), ("retrain_seconds", retrain_time), ("unlearn_seconds", unlearn_time),
        ("rewind_seconds", rewind_time),
    ]
    out = _outdir(cfg)
    write_kv(out / "bench.txt", lines)
    for k, v in lines:
        if not k.startswith("config."):
            print(f"{k}={fmt(v)}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "rewind": cmd_rewind,
    "unlearn": cmd_unlearn,
    "calibrate": cmd_calibrate,
    "verify": cmd_verify,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        command, cfg = resolve(parser, argv)
        return COMMANDS[command](cfg)
    except SystemExit as exc:  # argparse reports usage errors this way
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, ArithmeticError, OSError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
