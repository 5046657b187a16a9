# mixlab/stages.py
"""
One `run_*` function per CLI command. Each builds its objects from the catalog,
runs the operations, writes CSVs under the output directory and returns a
report dict:

    {"stage": str, "files": [paths], "verdicts": {name: bool},
     "fits": {name: {...}}, "notes": {name: value}}

The orchestrator merges these into the run manifest.
"""
import math
from pathlib import Path
from typing import Any, Dict, List

import numpy as np
import pandas as pd

from mixlab.catalog import build_kernel, build_pushforward_case, build_stationary, build_system
from mixlab.dynamics import RdsSystem, check_controllability, validate_system
from mixlab.errors import CertificateFailure, ConfigError, TooFewPoints
from mixlab.markov_noise import MarkovKernel
from mixlab.measures import GridDensity, tv_distance
from mixlab.mixing import (
    certify_coupling,
    certify_recurrence,
    decay_curve,
    estimate_stationary,
    extended_ball_points,
    fit_rate,
    minorizing_measure,
    verify_minorization,
)
from mixlab.pushforward import estimate_image_lipschitz, pushforward_density
from mixlab.reduction import (
    ExtendedState,
    NoiseModel,
    StationaryNoiseModel,
    check_vec_surjectivity,
    law_equality_test,
    markov_property_test,
    param_kernel_of,
    regular_map_of,
    simulate_ensemble,
    truncation_bound,
    validate_noise_model,
)
from utils.config import RunConfig
from utils.logging_utils import get_logger
from utils.reporting import emit_plotdata, write_csv

logger = get_logger(__name__)

# ---- Config ----
SAMPLE_PATHS = 16              # trajectories written in full by `simulate`
PUSHFORWARD_TV_TOL = 2e-2
IMAGE_LIPSCHITZ_CELLS = 64


# ---------------- Wiring ---------------- #
def build_noise(config: RunConfig) -> NoiseModel:
    noise = config.noise
    if noise.kind == "markov":
        return build_kernel(noise.name, dict(noise.params))
    params = dict(noise.params, memory_m=noise.memory_m, iota=noise.iota, burn_in=noise.burn_in)
    return build_stationary(noise.name, params)


def build_objects(config: RunConfig):
    return build_system(config.system.name, dict(config.system.params)), build_noise(config)


def start_state(config: RunConfig, sys: RdsSystem) -> np.ndarray:
    """ensemble.u0, or the upper corner of X."""
    if config.ensemble.u0 is None:
        return sys.invariant_set.hi.copy()
    u0 = np.asarray(config.ensemble.u0, dtype=float)
    if u0.shape != (sys.dim_state,):
        raise ConfigError(f"ensemble.u0 must have {sys.dim_state} entries, got {u0.size}")
    if not sys.invariant_set.contains(u0[None, :])[0]:
        raise ConfigError(f"ensemble.u0 = {u0.tolist()} lies outside X")
    return u0


def _out_dir(config: RunConfig) -> Path:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _report(stage: str) -> Dict[str, Any]:
    return {"stage": stage, "files": [], "verdicts": {}, "fits": {}, "notes": {}}


def _state_columns(prefix: str, dim: int) -> List[str]:
    return [f"{prefix}{i}" for i in range(dim)]


# ---------------- simulate ---------------- #
def run_simulate(config: RunConfig) -> Dict[str, Any]:
    sys, noise = build_objects(config)
    ens = config.ensemble
    out = _out_dir(config)
    report = _report("simulate")

    check = validate_system(sys, seed=config.seed)
    ctrl = check_controllability(sys)
    report["verdicts"]["system_check"] = check.passed
    report["notes"].update({"invariance_worst": check.invariance_worst,
                            "derivative_rel_error": check.derivative_rel_error,
                            "sigma_min_noise": ctrl.sigma_min_noise})

    paths = simulate_ensemble(sys, noise, start_state(config, sys), ens.n, ens.horizon, config.seed,
                              threads=ens.threads, block_size=ens.block_size, stage="simulate")
    k = np.arange(ens.horizon + 1)
    cols: Dict[str, Any] = {"k": k}
    for i in range(sys.dim_state):
        cols[f"mean_v{i}"] = paths.states[:, :, i].mean(axis=0)
        cols[f"std_v{i}"] = paths.states[:, :, i].std(axis=0)
    norm = np.linalg.norm(paths.states, axis=-1)
    cols["q05_norm"] = np.quantile(norm, 0.05, axis=0)
    cols["q95_norm"] = np.quantile(norm, 0.95, axis=0)
    report["files"].append(write_csv(pd.DataFrame(cols), out / "simulate_summary.csv"))

    m = min(SAMPLE_PATHS, ens.n)
    sample = np.concatenate([paths.states[:m], paths.noises[:m]], axis=-1).reshape(m * (ens.horizon + 1), -1)
    frame = pd.DataFrame(sample, columns=_state_columns("v", sys.dim_state) + _state_columns("xi", paths.noises.shape[-1]))
    frame.insert(0, "k", np.tile(k, m))
    frame.insert(0, "path", np.repeat(np.arange(m), ens.horizon + 1))
    report["files"].append(write_csv(frame, out / "sample_paths.csv"))
    return report


# ---------------- reduce-check ---------------- #
def run_reduce_check(config: RunConfig) -> Dict[str, Any]:
    sys, noise = build_objects(config)
    ens = config.ensemble
    out = _out_dir(config)
    report = _report("reduce-check")
    u0 = start_state(config, sys)

    models: List[NoiseModel] = [noise]
    labels = [config.noise.kind]
    if isinstance(noise, MarkovKernel):
        models.append(StationaryNoiseModel.from_kernel(noise, memory_m=1))
        labels.append("stationary_m1")

    frames = []
    for label, model in zip(labels, models):
        law = law_equality_test(sys, model, u0, ens.law_k, ens.n, config.seed, cells=config.grid.joint_cells,
                                threads=ens.threads, block_size=ens.block_size)
        frame = law.to_frame()
        frame.insert(0, "model", label)
        frames.append(frame)
        report["verdicts"][f"law_equality_{label}"] = law.passed
        report["notes"][f"truncation_bound_{label}"] = law.truncation_bound
    report["files"].append(write_csv(pd.concat(frames, ignore_index=True), out / "law_equality.csv"))

    if isinstance(noise, MarkovKernel):
        mp = markov_property_test(sys, noise, ens.n, config.seed, threads=ens.threads, block_size=ens.block_size)
        report["verdicts"]["markov_property"] = mp.passed
        report["files"].append(write_csv(pd.DataFrame([{
            "statistic": mp.statistic, "dof": mp.dof, "p_value": mp.p_value, "level": mp.level,
            "verdict": "pass" if mp.passed else "fail"}]), out / "markov_property.csv"))
    else:
        check = validate_noise_model(noise, seed=config.seed)
        report["verdicts"]["noise_model_check"] = check.passed
        report["notes"].update({"normalization_defect": check.normalization_defect,
                                "lipschitz_ratio": check.lipschitz_ratio,
                                "truncation_bound": truncation_bound(noise.noise_support.diameter, noise.memory_m,
                                                                     noise.iota)})

    sigma = check_vec_surjectivity(sys, max(1, min(ens.law_k, 3)), seed=config.seed)
    report["notes"]["vec_surjectivity_sigma_min"] = sigma
    report["verdicts"]["vec_surjectivity"] = sigma > 1e-8
    return report


# ---------------- mixing ---------------- #
def run_mixing(config: RunConfig) -> Dict[str, Any]:
    sys, noise = build_objects(config)
    ens, mix = config.ensemble, config.mixing
    out = _out_dir(config)
    report = _report("mixing")

    mus = estimate_stationary(sys, noise, mix.burn_in, mix.stationary_n or ens.n, mix.segment_m, config.seed,
                              state_cells=config.grid.state_cells, threads=ens.threads, block_size=ens.block_size)
    for j, mu in enumerate(mus):
        report["files"].append(mu.to_csv(out / f"stationary_{j}.csv"))
    report["notes"]["decorrelation_lag"] = mus[0].diagnostics.get("lag")

    xi0 = noise.noise_support.hi if mix.past == "corner" else None
    curve = decay_curve(sys, noise, start_state(config, sys), mus[0], ens.horizon, ens.n, config.seed,
                        threads=ens.threads, block_size=ens.block_size, n_boot=mix.bootstrap, xi0=xi0)
    report["files"].append(write_csv(curve.to_frame(), out / "decay.csv"))
    report["notes"]["noise_floor"] = curve.noise_floor
    try:
        fit = fit_rate(curve, ceiling=mix.fit_ceiling)
    except TooFewPoints as exc:
        logger.warning("no rate fitted: %s", exc)
        fit = None
        report["notes"]["fit_error"] = str(exc)
    plot = emit_plotdata(curve, fit, out / "decay_plot.csv")
    report["files"].extend(plot["files"].values())
    report["notes"]["max_abs_residual"] = plot["max_abs_residual"]
    if fit is not None:
        report["fits"]["decay"] = fit.to_dict()
    report["verdicts"]["decay_rate_positive"] = fit is not None and fit.gamma_fit > 0
    return report


# ---------------- certify ---------------- #
def run_certify(config: RunConfig) -> Dict[str, Any]:
    sys, kernel = build_objects(config)
    ens, cert = config.ensemble, config.certify
    out = _out_dir(config)
    report = _report("certify")
    rows = []

    # the recurrence target and the coupling ball follow the minorization radius
    delta = cert.delta or cert.radius
    epsilon = 0.0
    try:
        measure = minorizing_measure(sys, kernel, delta, seed=config.seed)
        delta, epsilon = measure.delta, measure.mass
        points = extended_ball_points(sys, delta, cert.check_points, config.seed)
        dom = verify_minorization(sys, kernel, measure, points, cert.mc_n, config.seed,
                                  threads=ens.threads, block_size=ens.block_size)
        rows += [("minorization", "delta", measure.delta), ("minorization", "epsilon", measure.mass),
                 ("minorization", "gamma", measure.gamma), ("minorization", "worst_margin", dom.worst_margin)]
        report["verdicts"]["minorization"] = dom.passed and measure.mass > 0
        report["files"].append(measure.density.to_csv(out / "minorizing_measure.csv"))
    except CertificateFailure as exc:
        logger.warning("minorization: %s", exc)
        report["verdicts"]["minorization"] = False
        report["notes"]["minorization_error"] = f"{type(exc).__name__}: {exc}"

    origin = ExtendedState(np.zeros(sys.dim_state), np.zeros(sys.dim_noise))
    radius = delta if epsilon > 0 else cert.radius
    try:
        rec = certify_recurrence(sys, kernel, origin, radius, cert.budget, cert.mc_n, config.seed,
                                 threads=ens.threads, block_size=ens.block_size)
        rows += [("recurrence", "radius", radius), ("recurrence", "m_steps", rec.m_steps),
                 ("recurrence", "p_bound", rec.p_bound), ("recurrence", "delta", rec.delta),
                 ("recurrence", "p_stay", rec.p_stay), ("recurrence", "p_reach", rec.p_reach),
                 ("recurrence", "mc_frequency", rec.mc_frequency)]
        report["verdicts"]["recurrence"] = rec.p_bound > 0
    except CertificateFailure as exc:
        logger.warning("recurrence: %s", exc)
        report["verdicts"]["recurrence"] = False
        report["notes"]["recurrence_error"] = f"{type(exc).__name__}: {exc}"

    if epsilon > 0:
        try:
            coup = certify_coupling(sys, kernel, epsilon, cert.coupling_steps, delta, cert.mc_n, config.seed,
                                    pairs=cert.pairs, threads=ens.threads, block_size=ens.block_size)
            rows += [("coupling", "worst_pair_tv", coup.worst_pair_tv), ("coupling", "band", coup.band),
                     ("coupling", "bound", 1.0 - epsilon + coup.band)]
            report["notes"]["coupling_method"] = coup.method
            report["verdicts"]["coupling"] = coup.passed
        except CertificateFailure as exc:
            logger.warning("coupling: %s", exc)
            report["verdicts"]["coupling"] = False
            report["notes"]["coupling_error"] = f"{type(exc).__name__}: {exc}"

    frame = pd.DataFrame(rows, columns=["certificate", "quantity", "value"])
    report["files"].append(write_csv(frame, out / "certificates.csv"))
    return report


# ---------------- pushforward-check ---------------- #
def run_pushforward_check(config: RunConfig) -> Dict[str, Any]:
    out = _out_dir(config)
    report = _report("pushforward-check")
    rows = []
    for name in config.pushforward.cases:
        case = build_pushforward_case(name)
        options = dict(case.options)
        options.setdefault("quad_nodes", config.grid.quad_nodes)
        g = pushforward_density(case.F, case.lam, case.param, case.out_box, case.out_cells, **options)
        oracle = GridDensity.from_function(case.out_box, case.out_cells, case.oracle)
        tv = tv_distance(g, oracle)
        defect = g.diagnostics["mass_defect"]
        passed = tv <= PUSHFORWARD_TV_TOL and defect <= case.mass_tol
        rows.append({"case": name, "tv": tv, "mass_defect": defect,
                     "newton_skips": g.diagnostics["newton_skips"], "verdict": "pass" if passed else "fail"})
        report["verdicts"][f"pushforward_{name}"] = passed
        report["files"].append(g.to_csv(out / f"pushforward_{name}.csv"))
    report["files"].append(write_csv(pd.DataFrame(rows, columns=["case", "tv", "mass_defect", "newton_skips",
                                                                 "verdict"]), out / "pushforward.csv"))

    if config.pushforward.image_lipschitz:
        sys, noise = build_objects(config)
        if isinstance(noise, MarkovKernel) and sys.dim_state == sys.dim_noise:
            cells = config.grid.state_cells or IMAGE_LIPSCHITZ_CELLS
            est = estimate_image_lipschitz(regular_map_of(sys), param_kernel_of(sys, noise),
                                           sys.invariant_set.product(sys.noise_support),
                                           config.pushforward.trials, config.seed, sys.invariant_set, cells,
                                           quad_nodes=config.grid.quad_nodes)
            report["notes"]["image_lipschitz_max"] = est.ratio_max
            report["verdicts"]["image_lipschitz_finite"] = bool(math.isfinite(est.ratio_max) and est.trials_used > 0)
            report["files"].append(write_csv(pd.DataFrame({"trial": np.arange(est.ratios.size), "ratio": est.ratios}),
                                             out / "image_lipschitz.csv"))
        else:
            logger.info("image Lipschitz estimate needs a Markov kernel and dim E = dim H; skipped")
    return report


STAGES = {
    "simulate": run_simulate,
    "reduce-check": run_reduce_check,
    "mixing": run_mixing,
    "certify": run_certify,
    "pushforward-check": run_pushforward_check,
}


__all__ = [
    "STAGES",
    "build_noise",
    "build_objects",
    "start_state",
    "run_simulate",
    "run_reduce_check",
    "run_mixing",
    "run_certify",
    "run_pushforward_check",
]
