"""Config-driven experiment runner.

Thin orchestration over the library: resolve a model (gallery name plus
parameters, or a JSON model file), run one experiment, write plot-ready CSV
plus a JSON report, and echo the resolved configuration (including the
seed) as config.json so any run can be replayed byte for byte with
--config.  Verdicts are data: the exit code is nonzero only for I/O or
validation errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .gallery import GALLERY, gallery_build, markov_stationary
from .lindblad import OperatorModel, check_l_erg
from .measures import (
    EmpiricalMeasure,
    circle_w1,
    fit_rate,
    qubit_angles,
    sample_invariant,
    wasserstein1,
)
from .operators import fs_distance_vectors
from .purification import check_pur, purification_diagnostic
from .sim import (
    SimConfig,
    circle_uniform_sampler,
    coupling_distance,
    estimate_f,
    point_mass_sampler,
    simulate_sse_ensemble,
)

FORMAT_VERSION = 1

STOCHASTIC_COMMANDS = {"invariant", "mixing", "ftrace", "coupling", "purify"}


def _fmt(x) -> str:
    return repr(float(x))


def write_csv(path, header: list[str], rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _curve_rows(curve):
    return np.column_stack([curve.t, curve.mean, curve.stderr])


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="qtraj",
        description="quantum trajectory experiments: hypothesis checks, "
        "invariant measures, Wasserstein mixing, contraction diagnostics",
    )
    p.add_argument("--version", action="version", version=f"qtraj {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add_model_args(sp):
        sp.add_argument("--gallery", help=f"named model, one of {sorted(GALLERY)}")
        sp.add_argument("--model", help="path to a JSON model file")
        sp.add_argument("--gamma", type=float, help="gallery parameter")
        sp.add_argument("--a", type=float, help="gallery parameter")
        sp.add_argument("--b", type=float, help="gallery parameter")
        sp.add_argument("--rates", help="comma-separated cyclic chain rates")
        sp.add_argument("--config", help="JSON config file; flags override its values")
        sp.add_argument("--out", default=None, help="output directory")

    def add_run_args(sp, horizon):
        # defaults stay None here so --config values are not masked; the
        # real defaults are applied in _finalize_args after the merge
        sp.set_defaults(default_horizon=horizon)
        sp.add_argument("--dt", type=float, default=None)
        sp.add_argument("--horizon", type=float, default=None)
        sp.add_argument("--samples", type=int, default=None)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--threads", type=int, default=None)
        sp.add_argument("--t-step", type=float, default=None,
                        help="grid step for recorded curves")

    sp = sub.add_parser("check", help="ergodicity and purification hypotheses")
    add_model_args(sp)

    sp = sub.add_parser("invariant", help="sample the invariant measure and "
                        "compare with the analytic one when known")
    add_model_args(sp)
    add_run_args(sp, horizon=2000.0)
    sp.add_argument("--burn-in", type=float, default=None)
    sp.add_argument("--thin", type=float, default=None)

    sp = sub.add_parser("mixing", help="two-ensemble Wasserstein decay and rate")
    add_model_args(sp)
    add_run_args(sp, horizon=8.0)
    sp.add_argument("--burn-in", type=float, default=None)
    sp.add_argument("--thin", type=float, default=None)

    sp = sub.add_parser("ftrace", help="mean wedge-norm decay of the propagator")
    add_model_args(sp)
    add_run_args(sp, horizon=20.0)

    sp = sub.add_parser("coupling", help="trajectory vs record-only estimate")
    add_model_args(sp)
    add_run_args(sp, horizon=12.0)

    sp = sub.add_parser("purify", help="decay of E[1 - lambda_max(M_t)]")
    add_model_args(sp)
    add_run_args(sp, horizon=20.0)

    sp = sub.add_parser("gallery", help="list or run the named examples")
    gsub = sp.add_subparsers(dest="gallery_command", required=True)
    gsub.add_parser("list", help="print the gallery names")
    sp_run = gsub.add_parser("run", help="run checks for one example")
    sp_run.add_argument("name")
    sp_run.add_argument("--gamma", type=float)
    sp_run.add_argument("--a", type=float)
    sp_run.add_argument("--b", type=float)
    sp_run.add_argument("--rates")
    sp_run.add_argument("--out", default=None)
    return p


def _apply_config_file(args):
    """Fill unset arguments from an echoed config.json (flags win)."""
    if not getattr(args, "config", None):
        return args
    with open(args.config) as fh:
        stored = json.load(fh)
    source = stored.pop("source", {})
    if "gallery" in source and getattr(args, "gallery", None) is None \
            and getattr(args, "model", None) is None:
        args.gallery = source["gallery"]
        for key, val in source.get("params", {}).items():
            if key == "q":
                continue  # markov generators replay via --rates only
            attr = key if key != "rates" else "rates"
            if hasattr(args, attr) and getattr(args, attr) is None:
                setattr(args, attr, ",".join(map(str, val))
                        if key == "rates" else val)
    if "model_file" in source and getattr(args, "model", None) is None \
            and getattr(args, "gallery", None) is None:
        args.model = source["model_file"]
    for key, val in stored.items():
        attr = key.replace("-", "_")
        if hasattr(args, attr) and getattr(args, attr) is None:
            setattr(args, attr, val)
    return args


def _finalize_args(args):
    """Apply run-parameter defaults left unset by flags and config."""
    if not hasattr(args, "dt"):
        return args
    if args.dt is None:
        args.dt = 1e-3
    if args.horizon is None:
        args.horizon = getattr(args, "default_horizon", None)
    if args.samples is None:
        args.samples = 1000
    if args.threads is None:
        args.threads = os.cpu_count() or 1
    if getattr(args, "thin", None) is None and hasattr(args, "thin"):
        args.thin = 0.5
    return args


def _resolve_model(args):
    """Returns (model, example_or_None, source dict)."""
    if bool(getattr(args, "gallery", None)) == bool(getattr(args, "model", None)):
        raise SystemExit("exactly one of --gallery or --model is required")
    if args.model:
        model = OperatorModel.load(args.model)
        return model, None, {"model_file": args.model}
    params = {}
    for key in ("gamma", "a", "b"):
        if getattr(args, key, None) is not None:
            params[key] = getattr(args, key)
    if getattr(args, "rates", None):
        params["rates"] = tuple(float(r) for r in args.rates.split(","))
    example = gallery_build(args.gallery, **params)
    source = {"gallery": args.gallery, "params": params,
              "resolved_params": example.params}
    return example.model, example, source


def _out_dir(args, default_name: str) -> str:
    out = args.out or os.path.join("qtraj_out", default_name)
    os.makedirs(out, exist_ok=True)
    return out


def _echo_config(out, args, source, extra=None):
    cfg = {"command": args.command, "source": source,
           "format_version": FORMAT_VERSION, "qtraj_version": __version__}
    for key in ("dt", "horizon", "samples", "seed", "threads", "burn_in",
                "thin", "t_step"):
        if hasattr(args, key) and getattr(args, key) is not None:
            cfg[key] = getattr(args, key)
    if extra:
        cfg.update(extra)
    write_json(os.path.join(out, "config.json"), cfg)
    return cfg


def _require_seed(args):
    if args.seed is None:
        raise SystemExit(f"--seed is required for the stochastic command "
                         f"{args.command!r} (no silent nondeterminism)")


def _erg_gap_default(model) -> float:
    rep = check_l_erg(model)
    return rep.spectral_gap if rep.spectral_gap > 0 else 1.0


def cmd_check(args) -> int:
    model, example, source = _resolve_model(args)
    out = _out_dir(args, "check")
    _echo_config(args=args, out=out, source=source)
    erg = check_l_erg(model)
    pur = check_pur(model)
    report = {"erg": erg.to_json_dict(), "pur": pur.to_json_dict()}
    if example is not None:
        report["expected"] = {"erg_holds": example.erg_holds,
                              "pur_verdict": example.pur_verdict}
    write_json(os.path.join(out, "report.json"), report)
    print(f"erg holds: {erg.holds} (zero multiplicity {erg.zero_multiplicity}, "
          f"gap {erg.spectral_gap:.6g})")
    print(f"pur verdict: {pur.verdict} ({pur.certificate})")
    print(f"wrote {out}/report.json")
    return 0


def cmd_invariant(args) -> int:
    model, example, source = _resolve_model(args)
    _require_seed(args)
    out = _out_dir(args, "invariant")
    horizon = args.horizon
    burn = args.burn_in if args.burn_in is not None else 10.0 / _erg_gap_default(model)
    n_samples = args.samples
    thin = args.thin
    _echo_config(args=args, out=out, source=source,
                 extra={"horizon": horizon, "burn_in": burn})
    cfg = SimConfig(dt=args.dt, horizon=horizon, seed=args.seed)
    x0 = example.default_start if example is not None else None
    measure = sample_invariant(model, cfg, burn_in=burn, n_samples=n_samples,
                               thinning=thin, x0=x0)
    header = [f"{part}{i}" for i in range(model.dim) for part in ("re", "im")]
    write_csv(os.path.join(out, "samples.csv"), header + ["weight"],
              measure.to_rows())
    summary = {"n_atoms": measure.n_atoms, "burn_in": burn, "thinning": thin}
    if example is not None and example.density is not None:
        angles = qubit_angles(measure.points)
        summary["circle_w1"] = circle_w1(angles, example.density)
        summary["density_params"] = {k: float(v) for k, v in
                                     example.density.params.items()}
    elif example is not None and example.atoms is not None:
        weights, labels = [], []
        for point, expected_w in example.atoms:
            dists = np.array([fs_distance_vectors(p, point.vec)
                              for p in measure.points])
            w = float(np.mean(dists <= 1e-6))
            weights.append({"expected": float(expected_w), "empirical": w})
            labels.append(point.vec.tolist())
        summary["atom_weights"] = weights
        summary["atom_l1_error"] = float(
            sum(abs(w["expected"] - w["empirical"]) for w in weights))
        if example.markov_generator is not None:
            summary["markov_stationary"] = markov_stationary(
                example.markov_generator).tolist()
    write_json(os.path.join(out, "summary.json"), summary)
    print(f"sampled {measure.n_atoms} atoms; "
          + (f"circle W1 = {summary.get('circle_w1'):.5f}"
             if "circle_w1" in summary else
             f"atom L1 error = {summary.get('atom_l1_error', float('nan')):.5f}"
             if "atom_l1_error" in summary else "no analytic reference"))
    print(f"wrote {out}/samples.csv, {out}/summary.json")
    return 0


def cmd_mixing(args) -> int:
    model, example, source = _resolve_model(args)
    _require_seed(args)
    out = _out_dir(args, "mixing")
    _echo_config(args=args, out=out, source=source)
    t_step = args.t_step or args.horizon / 16.0
    t_grid = np.arange(0.0, args.horizon + 1e-9, t_step)
    cfg = SimConfig(dt=args.dt, horizon=args.horizon, seed=args.seed)
    n = args.samples
    # two ensembles from distinct initial laws share one noise stream (same
    # seed), a coupling that removes the independent-sample floor from the
    # empirical distance; W1 between the marginals is unchanged
    rng = np.random.default_rng(np.random.SeedSequence(entropy=args.seed,
                                                       spawn_key=(0xD157,)))
    if example is not None and example.default_start is not None:
        start_a = example.default_start
    else:
        from .operators import ProjectivePoint

        start_a = ProjectivePoint.basis(model.dim, 0)
    if model.dim == 2:
        starts_b = circle_uniform_sampler()(rng, n)
    else:
        from .sim import haar_sampler

        starts_b = haar_sampler(model.dim)(rng, n)
    recs_a = simulate_sse_ensemble(model, start_a, cfg, t_grid, n,
                                   threads=args.threads)
    recs_b = simulate_sse_ensemble(model, starts_b, cfg, t_grid, n,
                                   threads=args.threads)
    sub = min(n, 512)
    w1_pair = np.array([
        wasserstein1(EmpiricalMeasure(recs_a.states[i][:sub]),
                     EmpiricalMeasure(recs_b.states[i][:sub]))
        for i in range(len(t_grid))
    ])
    # reference: distance to an invariant sample (independent, floored at
    # the sampling resolution)
    inv_cfg = SimConfig(dt=args.dt, horizon=1.0, seed=args.seed + 1)
    burn = args.burn_in if args.burn_in is not None else 10.0 / _erg_gap_default(model)
    inv = sample_invariant(model, inv_cfg, burn_in=burn, n_samples=sub,
                           thinning=args.thin,
                           x0=example.default_start if example else None)
    w1_inv = np.array([
        wasserstein1(EmpiricalMeasure(recs_a.states[i][:sub]), inv)
        for i in range(len(t_grid))
    ])
    write_csv(os.path.join(out, "w1_curve.csv"), ["t", "w1_pair", "w1_invariant"],
              np.column_stack([t_grid, w1_pair, w1_inv]))
    # the theorem's bound applies from t = 0, so fit the whole window; the
    # tail alone sits on the coupling floor
    fit = fit_rate(t_grid, w1_pair, tail_fraction=1.0)
    fit_obj = {"prefactor": fit.prefactor, "rate": fit.rate,
               "r_squared": fit.r_squared, "decaying": fit.decaying}
    write_json(os.path.join(out, "fit.json"), fit_obj)
    print(f"W1 pair decay: rate {fit.rate:.4f}, r^2 {fit.r_squared:.4f}, "
          f"decaying: {fit.decaying}")
    print(f"wrote {out}/w1_curve.csv, {out}/fit.json")
    return 0


def cmd_ftrace(args) -> int:
    model, example, source = _resolve_model(args)
    _require_seed(args)
    out = _out_dir(args, "ftrace")
    _echo_config(args=args, out=out, source=source)
    t_step = args.t_step or max(args.horizon / 20.0, args.dt)
    t_grid = np.arange(0.0, args.horizon + 1e-9, t_step)
    cfg = SimConfig(dt=args.dt, horizon=args.horizon, seed=args.seed)
    res = estimate_f(model, t_grid, args.samples, cfg, threads=args.threads)
    write_csv(os.path.join(out, "f_curve.csv"), ["t", "mean", "stderr"],
              _curve_rows(res.curve))
    write_json(os.path.join(out, "fit.json"),
               {"prefactor": res.prefactor, "rate": res.rate,
                "r_squared": res.r_squared})
    print(f"wedge-norm decay: rate {res.rate:.4f}, r^2 {res.r_squared:.4f}")
    print(f"wrote {out}/f_curve.csv, {out}/fit.json")
    return 0


def cmd_coupling(args) -> int:
    model, example, source = _resolve_model(args)
    _require_seed(args)
    out = _out_dir(args, "coupling")
    _echo_config(args=args, out=out, source=source)
    t_step = args.t_step or max(args.horizon / 24.0, args.dt)
    t_grid = np.arange(0.0, args.horizon + 1e-9, t_step)
    cfg = SimConfig(dt=args.dt, horizon=args.horizon, seed=args.seed)
    if example is not None and example.default_start is not None:
        sampler = point_mass_sampler(example.default_start)
    else:
        from .operators import ProjectivePoint

        sampler = point_mass_sampler(ProjectivePoint.basis(model.dim, 0))
    res = coupling_distance(model, sampler, t_grid, args.samples, cfg,
                            threads=args.threads)
    rows = np.column_stack([res.curve.t, res.curve.mean, res.curve.stderr,
                            res.median])
    write_csv(os.path.join(out, "coupling_curve.csv"),
              ["t", "mean", "stderr", "median"], rows)
    write_json(os.path.join(out, "summary.json"),
               {"pathwise_violations": res.violations,
                "terminal_median": float(res.median[-1])})
    print(f"pathwise bound violations: {res.violations}; terminal median "
          f"distance {res.median[-1]:.3e}")
    print(f"wrote {out}/coupling_curve.csv, {out}/summary.json")
    return 0


def cmd_purify(args) -> int:
    model, example, source = _resolve_model(args)
    _require_seed(args)
    out = _out_dir(args, "purify")
    _echo_config(args=args, out=out, source=source)
    curve = purification_diagnostic(model, horizon=args.horizon,
                                    n_traj=args.samples, seed=args.seed,
                                    dt=args.dt, threads=args.threads)
    write_csv(os.path.join(out, "purify_curve.csv"), ["t", "mean", "stderr"],
              _curve_rows(curve))
    write_json(os.path.join(out, "summary.json"),
               {"terminal": float(curve.mean[-1])})
    print(f"terminal E[1 - lambda_max(M_t)] = {curve.mean[-1]:.3e}")
    print(f"wrote {out}/purify_curve.csv, {out}/summary.json")
    return 0


def cmd_gallery(args) -> int:
    if args.gallery_command == "list":
        for name in sorted(GALLERY):
            defaults = GALLERY[name]["defaults"]
            print(f"{name}: defaults {defaults}" if defaults else name)
        return 0
    params = {}
    for key in ("gamma", "a", "b"):
        if getattr(args, key, None) is not None:
            params[key] = getattr(args, key)
    if getattr(args, "rates", None):
        params["rates"] = tuple(float(r) for r in args.rates.split(","))
    example = gallery_build(args.name, **params)
    out = args.out or os.path.join("qtraj_out", f"gallery_{args.name}")
    os.makedirs(out, exist_ok=True)
    example.model.save(os.path.join(out, "model.json"))
    erg = check_l_erg(example.model)
    pur = check_pur(example.model)
    report = {
        "name": example.name,
        "params": example.params,
        "erg": erg.to_json_dict(),
        "pur": pur.to_json_dict(),
        "expected": {"erg_holds": example.erg_holds,
                     "pur_verdict": example.pur_verdict},
        "matches": (erg.holds == example.erg_holds
                    and (pur.verdict != "fails") == (example.pur_verdict == "holds")),
    }
    write_json(os.path.join(out, "report.json"), report)
    print(f"{example.name}: erg {erg.holds} (expected {example.erg_holds}), "
          f"pur {pur.verdict} (expected {example.pur_verdict}); "
          f"matches: {report['matches']}")
    print(f"wrote {out}/model.json, {out}/report.json")
    return 0


COMMANDS = {
    "check": cmd_check,
    "invariant": cmd_invariant,
    "mixing": cmd_mixing,
    "ftrace": cmd_ftrace,
    "coupling": cmd_coupling,
    "purify": cmd_purify,
    "gallery": cmd_gallery,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _apply_config_file(args)
    _finalize_args(args)
    try:
        return COMMANDS[args.command](args)
    except (ValueError, RuntimeError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
