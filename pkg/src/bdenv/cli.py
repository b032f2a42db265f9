"""Command-line front end.

Subcommands:
  invariant   compute the invariant measure and write it as CSV
  simulate    run the joint simulation and write the occupancy table
  rates       compute a convergence-rate certificate
  verify      run the consistency checks and exit 0 iff all pass

Each run reads a TOML config (sections [model], [environment], [sim],
[analysis], [output]) and writes its outputs plus a manifest.json recording
the resolved configuration, the config file's sha256, the effective seed and
the library versions, so a run can be reproduced from the manifest alone.
Nothing in the manifest depends on the clock.

Flag precedence for the output directory and thread count:
command line > BDENV_OUT / BDENV_THREADS > config > default.
"""

from __future__ import annotations

import argparse
import csv
import functools
import hashlib
import json
import os
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from . import __version__
from .convergence import (
    bounds_profile,
    busy_period_mgf,
    check_exponential_condition,
    couple_exponential,
    fit_env_coupling,
    hitting_bound_check,
    lyapunov_certificate,
    tv_decay_polynomial,
)
from .diffusion import (
    ExponentialJumps,
    binned_joint_measure,
    compute_xi_diffusive,
    example_process,
    invariant_measure_diffusive,
)
from .errors import BdEnvError, BoundViolated, ConfigError
from .jointsim import SimConfig, default_bin_edges, simulate_joint_diffusive
from .jumpenv import (
    build_joint_generator,
    env_from_matrix,
    invariant_measure_jump,
    simulate_jump_joint,
    solve_common_v,
    verify_balance,
)
from .models import catalog, check_summability, normalized_weights
from .stats import survival_curve, tv_distance


def _load_config(path: str) -> tuple[dict, str]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {path!r} not found")
    raw = p.read_bytes()
    try:
        cfg = tomllib.loads(raw.decode("utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path!r} is not valid TOML: {exc}") from exc
    return cfg, hashlib.sha256(raw).hexdigest()


def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name)
    if sec is None:
        raise ConfigError(f"missing [{name}] section")
    if not isinstance(sec, dict):
        raise ConfigError(f"[{name}] must be a table")
    return sec


def _require_key(sec: dict, section: str, key: str):
    if key not in sec:
        raise ConfigError(f"missing {section}.{key}")
    return sec[key]


def _geometric_string(value):
    """Accept 'geometric:<base>' wherever a beta schedule is configured."""
    if isinstance(value, str):
        if not value.startswith("geometric:"):
            raise ConfigError("beta: string form must be 'geometric:<base>'")
        return ("geometric", float(value.split(":", 1)[1]))
    return value


def _build_model(cfg: dict):
    sec = _section(cfg, "model")
    name = _require_key(sec, "model", "name")
    params = dict(sec.get("params", {}))
    if "beta" in params:
        params["beta"] = _geometric_string(params["beta"])
    try:
        return catalog(name, params)
    except BdEnvError as exc:
        raise ConfigError(f"model.name/params: {exc}") from exc


def _build_environment(cfg: dict):
    """Returns (kind, payload): ("jump", EnvChainSpec), ("diffusive",
    (DiffusionSpec, StationaryLaw)), or ("none", z)."""
    sec = _section(cfg, "environment")
    kind = _require_key(sec, "environment", "kind")
    has_jump_keys = bool({"states", "T"} & sec.keys())
    has_diffusive_keys = "example" in sec
    if has_jump_keys and has_diffusive_keys:
        raise ConfigError(
            "environment: both jump keys (states/T) and the diffusive key "
            "(example) are present; give exactly one environment kind"
        )
    if kind == "jump":
        states = _require_key(sec, "environment", "states")
        T = _require_key(sec, "environment", "T")
        beta = _geometric_string(sec.get("beta"))
        try:
            return "jump", env_from_matrix(states, T, beta)
        except BdEnvError as exc:
            raise ConfigError(f"environment: {exc}") from exc
    if kind == "diffusive":
        example = _require_key(sec, "environment", "example")
        params = dict(sec.get("params", {}))
        if "jump_mean" in params:
            params["jump_law"] = ExponentialJumps(float(params.pop("jump_mean")))
        try:
            return "diffusive", example_process(example, params)
        except BdEnvError as exc:
            raise ConfigError(f"environment: {exc}") from exc
    if kind == "none":
        z = _require_key(sec, "environment", "z")
        return "none", float(z)
    raise ConfigError(f"environment.kind: unknown kind {kind!r}")


def _effective(args, cfg: dict):
    out_sec = cfg.get("output", {})
    out_dir = args.out or os.environ.get("BDENV_OUT") or out_sec.get("dir") or "out"
    threads = args.threads
    if threads is None:
        env_threads = os.environ.get("BDENV_THREADS")
        threads = int(env_threads) if env_threads else int(out_sec.get("threads", 1))
    sim_sec = cfg.get("sim", {})
    seed = args.seed if args.seed is not None else int(sim_sec.get("seed", 0))
    return Path(out_dir), threads, seed


def _write_manifest(out_dir: Path, command: str, cfg: dict, sha: str, seed: int,
                    threads: int, extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config_sha256": sha,
        "config": cfg,
        "seed": seed,
        "threads": threads,
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "package": __version__,
        },
    }
    if extra:
        manifest.update(extra)
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True, default=repr) + "\n"
    )


def _write_csv(path: Path, header: list, rows: list) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _analysis(cfg: dict) -> dict:
    return cfg.get("analysis", {})


# ---------------------------------------------------------------------------
# subcommands


def _trim_levels(level_mass) -> int:
    """Index one past the last level carrying mass (gated models produce
    exact zeros above their cap; those rows are dropped from the tables)."""
    nz = np.nonzero(np.asarray(level_mass) > 0.0)[0]
    return int(nz[-1]) + 1 if nz.size else 1


def _write_assumptions(out_dir: Path, checks: list) -> None:
    lines = [
        f"{'PASS' if ok else 'FAIL'}  {name}  ({detail})" for name, ok, detail in checks
    ]
    (out_dir / "assumptions.txt").write_text("\n".join(lines) + "\n")
    for line in lines:
        print(line)


def _cmd_invariant(args, cfg: dict, sha: str) -> int:
    model = _build_model(cfg)
    kind, payload = _build_environment(cfg)
    out_dir, threads, seed = _effective(args, cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    ana = _analysis(cfg)
    n_max = int(ana.get("n_max", 256))
    assumptions: list[tuple[str, bool, str]] = []

    if kind == "jump":
        env = payload
        for label in env.states:
            rep = check_summability(model, label, max(n_max, 256))
            assumptions.append(
                (f"summability at z={label!r}", rep.summable, f"status={rep.status}")
            )
        measure = invariant_measure_jump(model, env, n_max)
        assumptions.append(
            ("normalizer finite", True,
             f"log_Xi={measure.log_Xi!r}, tail bound {measure.tail_bound:.3e}")
        )
        level_mass = measure.weights.sum(axis=1)
        stop = _trim_levels(level_mass)
        rows = []
        for n in range(stop):
            for j, label in enumerate(env.states):
                rows.append((n, j, label, float(measure.weights[n, j])))
        _write_csv(out_dir / "invariant.csv", ["n", "state_index", "state", "mass"], rows)
        level_rows = [(n, float(level_mass[n])) for n in range(stop)]
        _write_csv(out_dir / "levels.csv", ["n", "mass"], level_rows)
        extra = {
            "log_Xi": measure.log_Xi,
            "tail_bound": measure.tail_bound,
            "v": measure.v.tolist(),
            "levels_written": stop,
        }
        print(f"log_Xi = {measure.log_Xi!r}")
        print(f"tail mass beyond n_max = {measure.tail_bound!r}")
    elif kind == "diffusive":
        _, law = payload
        measure = invariant_measure_diffusive(model, law, n_max)
        assumptions.append(
            ("normalizer finite", True,
             f"Xi={measure.Xi!r}, tail bound {measure.tail_bound:.3e}")
        )
        stop = _trim_levels(measure.weights)
        level_rows = [(n, float(measure.weights[n])) for n in range(stop)]
        _write_csv(out_dir / "levels.csv", ["n", "mass"], level_rows)
        extra = {
            "Xi": measure.Xi,
            "tail_bound": measure.tail_bound,
            "law": law.to_json_dict(),
            "levels_written": stop,
        }
        print(f"Xi = {measure.Xi!r}")
        print(f"tail mass beyond n_cut={measure.n_cut} = {measure.tail_bound!r}")
    else:
        z = payload
        rep = check_summability(model, z, max(n_max, 256))
        assumptions.append(
            (f"summability at z={z!r}", rep.summable, f"status={rep.status}")
        )
        weights = normalized_weights(model, z, n_max)
        stop = _trim_levels(weights.kappa)
        level_rows = [(n, float(weights.kappa[n])) for n in range(stop)]
        _write_csv(out_dir / "levels.csv", ["n", "mass"], level_rows)
        extra = {"z": z, "tail_bound": weights.tail_bound, "levels_written": stop}
        print(f"kappa_0 = {weights.kappa[0]!r}")

    _write_assumptions(out_dir, assumptions)
    _write_manifest(out_dir, "invariant", cfg, sha, seed, threads, extra)
    return 0 if all(ok for _, ok, _ in assumptions) else 1


def _cmd_simulate(args, cfg: dict, sha: str) -> int:
    model = _build_model(cfg)
    kind, payload = _build_environment(cfg)
    out_dir, threads, seed = _effective(args, cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    sim = cfg.get("sim", {})
    horizon = float(_require_key(sim, "sim", "horizon"))
    burn_in = float(sim.get("burn_in", 0.0))
    if horizon < burn_in:
        raise ConfigError(
            f"sim.horizon: horizon ({horizon!r}) must not be smaller than "
            f"burn_in ({burn_in!r})"
        )
    if int(sim.get("replicas", 1)) > 1 and args.seed is None and "seed" not in sim:
        raise ConfigError(
            "sim.seed: an explicit seed is required when sim.replicas > 1"
        )

    if kind == "jump":
        env = payload
        initial = sim.get("initial")
        if initial is None:
            initial = (0, env.states[0])
        else:
            initial = (int(initial[0]), initial[1])
        result = simulate_jump_joint(
            model, env, initial, horizon, seed,
            rate_cap=float(sim.get("rate_cap", 1e9)),
            record=sim.get("record", "occupancy"),
        )
        rows = sorted(
            ((c[0], c[1], float(m)) for c, m in result.occupancy.as_dict().items()),
            key=lambda r: (r[0], str(r[1])),
        )
        _write_csv(out_dir / "occupancy.csv", ["n", "state", "weight"], rows)
        if result.path is not None:
            path_rows = list(
                zip(
                    (float(x) for x in result.path["t"]),
                    (int(x) for x in result.path["n"]),
                    (int(x) for x in result.path["z_index"]),
                    (int(x) for x in result.path["kind"]),
                )
            )
            _write_csv(
                out_dir / "trajectory.csv", ["t", "n", "state_index", "kind"], path_rows
            )
        extra = {
            "n_events": result.n_events,
            "counts_by_kind": result.counts_by_kind,
            "final_state": list(result.final_state),
            "total_time": result.total_time,
        }
        print(f"events = {result.n_events}, final state = {result.final_state}")
    elif kind == "diffusive":
        spec, law = payload
        scfg = SimConfig(
            horizon=horizon,
            dt=float(sim.get("dt", 1e-3)),
            burn_in=burn_in,
            seed=seed,
            record=sim.get("record", "occupancy"),
            replicas=int(sim.get("replicas", 1)),
            max_env_step=float(sim.get("max_env_step", 0.05)),
            thin=int(sim.get("thin", 100)),
        )
        initial = sim.get("initial", [0, float(law.domain.lower)])
        n_rows = int(sim.get("n_rows", 32))
        n_bins = int(sim.get("n_bins", 64))
        if scfg.record == "path":
            result = simulate_joint_diffusive(
                model, spec, scfg, (int(initial[0]), float(initial[1])), law=law
            )
            path_rows = list(
                zip(
                    (float(x) for x in result.t),
                    (int(x) for x in result.n),
                    (float(x) for x in result.z),
                )
            )
            _write_csv(out_dir / "trajectory.csv", ["t", "n", "z"], path_rows)
            extra = {"points": len(path_rows), "thin": scfg.thin}
            print(f"trajectory points = {len(path_rows)}")
        else:
            edges = default_bin_edges(law, n_bins)
            result = simulate_joint_diffusive(
                model, spec, scfg, (int(initial[0]), float(initial[1])),
                law=law, bin_edges=edges, n_rows=n_rows,
            )
            rows = []
            for (n, b), m in result.measure.as_dict().items():
                lo = float(edges[b])
                hi = float(edges[b + 1])
                rows.append((n, b, lo, hi, float(m)))
            rows.sort(key=lambda r: (r[0], r[1]))
            _write_csv(
                out_dir / "occupancy.csv", ["n", "bin", "z_lo", "z_hi", "weight"], rows
            )
            analytic = binned_joint_measure(model, law, n_rows, edges)
            tv = tv_distance(result.measure, analytic)
            extra = {
                "steps_recorded": result.steps_recorded,
                "level_clips": result.level_clips,
                "replicas": scfg.replicas,
                "tv_vs_analytic": tv,
            }
            print(
                f"steps recorded = {result.steps_recorded} x {scfg.replicas} replicas"
            )
            print(f"TV vs analytic product form = {tv:.6f}")
    else:
        raise ConfigError("environment.kind: simulate needs 'jump' or 'diffusive'")

    _write_manifest(out_dir, "simulate", cfg, sha, seed, threads, extra)
    return 0


def _rate_probes(kind: str, payload, ana: dict):
    """Environment values over which the rate sups/infs are certified.

    A jump chain or a frozen environment is enumerated exactly; a diffusive
    environment is sampled on a user-supplied grid, so any certificate built
    from it is only probe-certified.
    """
    if kind == "jump":
        return tuple(payload.states), True
    if kind == "none":
        return (payload,), True
    probes = tuple(ana.get("z_probes", ()))
    if not probes:
        raise ConfigError(
            "analysis.z_probes: required for a diffusive environment"
        )
    return probes, False


def _cmd_rates(args, cfg: dict, sha: str) -> int:
    model = _build_model(cfg)
    kind, payload = _build_environment(cfg)
    out_dir, threads, seed = _effective(args, cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    ana = _analysis(cfg)
    route = ana.get("kind", "exponential")
    verdicts: list[str] = []
    all_ok = True

    def verdict(line: str, ok: bool = True) -> None:
        nonlocal all_ok
        all_ok = all_ok and ok
        verdicts.append(line)
        print(line)

    if route == "polynomial":
        probes, exhaustive = _rate_probes(kind, payload, ana)
        word = "certified" if exhaustive else "probe-certified"
        n_max = int(ana.get("n_max", 512))

        @functools.lru_cache(maxsize=None)
        def lam_fn(n: int) -> float:
            return max(float(model.birth_rate(n, z)) for z in probes)

        @functools.lru_cache(maxsize=None)
        def mu_fn(n: int) -> float:
            return min(float(model.death_rate(n, z)) for z in probes) if n else 0.0

        report: dict = {"kind": "polynomial", "probe_certified": not exhaustive}
        try:
            cert = lyapunov_certificate(lam_fn, mu_fn, lambda n: float(n), n_max)
        except NotLyapunov as exc:
            verdict(f"polynomial drift: failed ({exc})", ok=False)
            report["valid"] = False
            (out_dir / "rate_certificate.json").write_text(
                json.dumps(report, indent=2, sort_keys=True) + "\n"
            )
            (out_dir / "rate_certificate.txt").write_text("\n".join(verdicts) + "\n")
            _write_manifest(out_dir, "rates", cfg, sha, seed, threads, report)
            return 1
        report.update(
            C_V=cert.C_V, argmin_n=cert.argmin_n, n_max=cert.n_max,
            tail_monotone=cert.tail_monotone, valid=True,
        )
        verdict(
            f"polynomial drift: {word}: C_V = {cert.C_V!r} "
            f"(drift worst at n = {cert.argmin_n}, "
            f"tail monotone = {cert.tail_monotone})"
        )

        starts = ana.get("starts")
        if starts:
            try:
                rows = hitting_bound_check(
                    lam_fn, mu_fn, cert, [int(s) for s in starts],
                    replicas=int(ana.get("hitting_replicas", 2000)), seed=seed,
                )
                _write_csv(
                    out_dir / "bound_table.csv",
                    ["n", "mc_mean", "stderr", "bound", "ok"],
                    [(r["n"], r["mean"], r["stderr"], r["bound"], r["ok"])
                     for r in rows],
                )
                verdict(
                    f"hitting-time bounds: {word} at {len(rows)} starts "
                    f"(MC mean <= V(n)/C_V + 3 se)"
                )
                report["bound_table"] = rows
            except BoundViolated as exc:
                verdict(f"hitting-time bounds: failed with residual ({exc})",
                        ok=False)
                report["bound_table_error"] = str(exc)

        decay = ana.get("decay")
        if decay:
            t_grid = np.geomspace(
                float(decay.get("t_lo", 10.0)), float(decay.get("t_hi", 1000.0)),
                int(decay.get("points", 12)),
            )
            curve = tv_decay_polynomial(
                lam_fn, mu_fn, int(decay.get("start_n", 10)), t_grid,
                replicas=int(decay.get("replicas", 4000)), seed=seed, cert=cert,
            )
            curve.write_csv(out_dir / "decay_curve.csv")
            if curve.bound is not None:
                worst = float(np.max(curve.tv - curve.bound))
                ok = worst <= 3.0 * curve.noise_floor
                verdict(
                    f"polynomial TV bound: {'holds' if ok else 'violated'} on the "
                    f"grid (max excess {worst:.4g}, noise floor "
                    f"{curve.noise_floor:.4g})", ok=ok,
                )
            if curve.fit is not None:
                exponent = -curve.fit.slope
                verdict(f"polynomial decay: fitted exponent {exponent:.3f} "
                        f"over {int(np.sum(curve.tv > 3 * curve.noise_floor))} "
                        f"points above noise")
                report["fitted_exponent"] = exponent
            else:
                verdict("polynomial decay: curve below noise floor, no fit "
                        "(decay faster than resolvable)")
        (out_dir / "rate_certificate.json").write_text(
            json.dumps(report, indent=2, sort_keys=True, default=repr) + "\n"
        )
        (out_dir / "rate_certificate.txt").write_text("\n".join(verdicts) + "\n")
        _write_manifest(out_dir, "rates", cfg, sha, seed, threads, report)
        return 0 if all_ok else 1

    if route != "exponential":
        raise ConfigError(f"analysis.kind: unknown kind {route!r}")

    z_probes, exhaustive = _rate_probes(kind, payload, ana)
    word = "certified" if exhaustive else "probe-certified"
    profile = bounds_profile(model, z_probes, int(ana.get("n_max", 256)))

    alpha = ana.get("alpha")
    gamma = ana.get("gamma")
    fit_extra = {}
    if alpha is None or gamma is None:
        if kind != "jump":
            raise ConfigError(
                "analysis.alpha/gamma: must be given unless the environment is "
                "a jump chain (then they are fitted from meeting times)"
            )
        fit = fit_env_coupling(
            payload, replicas=int(ana.get("coupling_replicas", 4000)), seed=seed
        )
        alpha, gamma = fit.alpha, fit.gamma
        fit_extra = {"fitted_alpha": alpha, "fitted_gamma": gamma,
                     "fit_r_squared": fit.fit.r_squared}
        print(f"fitted environment tail: alpha = {alpha!r}, gamma = {gamma!r}")
        # a fitted tail is an estimate, never an exhaustive certificate
        word = "probe-certified"

    scenario = ana.get("scenario", "s1")
    if scenario in ("s1", "exponential_s1") and profile.p_bar >= 0.5:
        verdict(
            f"scenario 1 refused: p_bar = {profile.p_bar!r} >= 1/2 "
            f"(the dominating walk would not drift down); trying scenario 2"
        )
        scenario = "s2"
        if ana.get("mu_bar") is None:
            raise ConfigError(
                "analysis.mu_bar: scenario 1 is unavailable (p_bar >= 1/2) and "
                "scenario 2 needs the linear death-rate envelope mu_bar"
            )

    G_function = None
    busy_check = None
    if scenario in ("s2", "exponential_s2"):
        mu_bar = ana.get("mu_bar")
        if mu_bar is None:
            raise ConfigError("analysis.mu_bar: required for scenario s2")
        lam_bar = float(ana.get("lambda_bar", profile.lambda_bar))
        G_function = lambda u: busy_period_mgf(
            lam_bar, float(mu_bar), u, method="series"
        ).series

    u_cfg = ana.get("u")
    eps_cfg = ana.get("epsilon")
    cert = check_exponential_condition(
        profile, float(alpha), float(gamma), scenario=scenario,
        u=None if u_cfg is None else float(u_cfg),
        epsilon=None if eps_cfg is None else float(eps_cfg),
        G_function=G_function,
        u_points=int(ana.get("u_points", 64)),
        eps_points=int(ana.get("eps_points", 32)),
    )
    if G_function is not None and cert.valid:
        # cross-check the series value by MC at the certified u
        busy_check = busy_period_mgf(
            float(ana.get("lambda_bar", profile.lambda_bar)),
            float(ana["mu_bar"]), cert.u, seed=seed, method="both",
        )
        fit_extra["busy_mgf_mc"] = busy_check.mc.mean
        fit_extra["busy_mgf_series"] = busy_check.series
        fit_extra["busy_mgf_agree"] = busy_check.agree
        if not busy_check.agree:
            verdict(
                f"busy-period MGF cross-check: failed with residual "
                f"{busy_check.mc.mean - busy_check.series!r} "
                f"(MC vs series at u = {cert.u!r})", ok=False,
            )

    if cert.valid:
        verdict(
            f"exponential rate ({cert.scenario}): {word}: "
            f"kappa = {cert.kappa:.6g} at (u = {cert.u:.6g}, "
            f"eps = {cert.epsilon:.4g})"
        )
    else:
        res = cert.condition_residual
        detail = "no admissible (u, eps) pair" if res is None else f"residual {res!r}"
        verdict(f"exponential rate ({cert.scenario}): failed with {detail}",
                ok=False)

    coupling_extra = {}
    if ana.get("coupling", False) and cert.valid:
        if kind != "jump":
            raise ConfigError(
                "analysis.coupling: the coupling experiment needs a jump "
                "environment"
            )
        env = payload
        pair_cfg = ana.get("coupling_initial")
        if pair_cfg is None:
            n0 = int(ana.get("coupling_start", 10))
            initial_pair = ((0, env.states[0]), (n0, env.states[-1]))
        else:
            initial_pair = (
                (int(pair_cfg[0][0]), pair_cfg[0][1]),
                (int(pair_cfg[1][0]), pair_cfg[1][1]),
            )
        result = couple_exponential(
            model, env, initial_pair,
            horizon=float(ana.get("coupling_horizon", 500.0)),
            replicas=int(ana.get("coupling_samples", 10000)),
            seed=seed, certificate=cert,
        )
        t_sorted, surv = survival_curve(result.uncensored)
        _write_csv(
            out_dir / "coupling_tail.csv", ["t", "survival"],
            list(zip((float(x) for x in t_sorted), (float(x) for x in surv))),
        )
        verdict(
            f"coupling tail: slope = {result.slope:.6g} vs threshold "
            f"-0.9*kappa = {-0.9 * cert.kappa:.6g} over {result.uncensored.size} "
            f"samples ({result.censored} censored): "
            f"{'pass' if result.passed else 'fail'}", ok=bool(result.passed),
        )
        coupling_extra = {
            "coupling_slope": result.slope,
            "coupling_censored": result.censored,
            "coupling_passed": bool(result.passed),
        }

    (out_dir / "rate_certificate.txt").write_text(
        cert.to_text() + "\n".join(verdicts) + "\n"
    )
    report = {
        "kind": "exponential",
        "scenario": cert.scenario,
        "valid": cert.valid,
        "kappa": cert.kappa,
        "u": cert.u,
        "epsilon": cert.epsilon,
        "alpha": float(alpha),
        "gamma": float(gamma),
        "q_bar": profile.q_bar,
        "p_bar": profile.p_bar,
        "lambda_bar": profile.lambda_bar,
        "probe_certified": word == "probe-certified",
    }
    report.update(fit_extra)
    report.update(coupling_extra)
    (out_dir / "rate_certificate.json").write_text(
        json.dumps(report, indent=2, sort_keys=True, default=repr) + "\n"
    )
    _write_manifest(out_dir, "rates", cfg, sha, seed, threads, report)
    return 0 if (cert.valid and all_ok) else 1


def _cmd_verify(args, cfg: dict, sha: str) -> int:
    model = _build_model(cfg)
    kind, payload = _build_environment(cfg)
    out_dir, threads, seed = _effective(args, cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    ana = _analysis(cfg)
    n_max = int(ana.get("n_max", 128))
    tol = float(ana.get("balance_tol", 1e-8))
    checks: list[tuple[str, bool, str]] = []

    if kind == "jump":
        env = payload
        for label in env.states:
            rep = check_summability(model, label, max(n_max, 256))
            checks.append(
                (f"summability at z={label!r}", rep.summable,
                 f"status={rep.status}, ratio window={rep.ratio_window}")
            )
        try:
            v = solve_common_v(env)
            checks.append(("common stationary vector", True, f"v={v.tolist()}"))
            gen = build_joint_generator(model, env, n_max)
            residual = verify_balance(gen, v)
            checks.append(
                (f"stationarity residual <= {tol:g}", residual <= tol,
                 f"residual={residual:.3e}")
            )
        except BdEnvError as exc:
            checks.append(("common stationary vector", False, str(exc)))
    elif kind == "diffusive":
        spec, law = payload
        if law.dim == 1:
            from scipy import integrate as _integrate

            hi = law.quantile(1.0 - 1e-12)
            total, _ = _integrate.quad(
                law.density, law.domain.lower, law.domain.lower + 4 * (hi - law.domain.lower),
                limit=200,
            )
            checks.append(
                ("environment law normalization", abs(total - 1.0) < 1e-6,
                 f"integral={total!r}")
            )
            try:
                xi = compute_xi_diffusive(model, law, n_series=int(ana.get("n_series", 256)))
                checks.append(
                    ("Xi finite", True,
                     f"Xi={xi.value!r} (error bound {xi.error_bound:.2e})")
                )
            except BdEnvError as exc:
                checks.append(("Xi finite", False, str(exc)))
        else:
            checks.append(
                ("environment law normalization", True, "product form, exact")
            )
    else:
        z = payload
        rep = check_summability(model, z, max(n_max, 256))
        checks.append(
            (f"summability at z={z!r}", rep.summable, f"status={rep.status}")
        )

    lines = []
    all_ok = True
    for name, ok, detail in checks:
        all_ok = all_ok and ok
        line = f"{'PASS' if ok else 'FAIL'}  {name}  ({detail})"
        lines.append(line)
        print(line)
    (out_dir / "verify.txt").write_text("\n".join(lines) + "\n")
    _write_manifest(
        out_dir, "verify", cfg, sha, seed, threads,
        {"checks": [{"name": n, "ok": o, "detail": d} for n, o, d in checks]},
    )
    return 0 if all_ok else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bdenv",
        description="birth-death processes in interactive random environments",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("invariant", "compute the invariant measure"),
        ("simulate", "run the joint simulation"),
        ("rates", "compute a convergence-rate certificate"),
        ("verify", "run consistency checks (exit 0 iff all pass)"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="TOML config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override [sim].seed")
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads to record in the manifest "
                            "(BDENV_THREADS as fallback)")
        p.add_argument("--out", default=None,
                       help="output directory (BDENV_OUT as fallback)")
    return parser


_COMMANDS = {
    "invariant": _cmd_invariant,
    "simulate": _cmd_simulate,
    "rates": _cmd_rates,
    "verify": _cmd_verify,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg, sha = _load_config(args.config)
        return _COMMANDS[args.command](args, cfg, sha)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except BdEnvError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
