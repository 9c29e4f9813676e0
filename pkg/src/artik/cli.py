"""``artik`` command line: generate, infer, fit-params, control and eval.

Every command writes JSON for structured results and CSV for time series
into ``--out``, plus PNG renderings of the CSV data.  Exit codes: 1 for
usage and configuration errors, 2 for unreadable or inconsistent input
files, 3 for numerical failures.
"""
from __future__ import annotations

import argparse
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ArtikError, ConfigError, DimensionMismatch, ParseError
from .io import (atomic_write_text, load_trajectory, read_json, save_trajectory, write_csv,
                 write_json)

log = logging.getLogger("artik")

EXIT_USAGE, EXIT_PARSE, EXIT_NUMERIC = 1, 2, 3
NOISY = (0.005, 0.01)  # position [m] and rotation [rad] noise of the noisy protocol arm


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _setup_logging():
    level = os.environ.get("ARTIK_LOG", "warn").lower()
    levels = {"debug": logging.DEBUG, "info": logging.INFO, "warn": logging.WARNING,
              "warning": logging.WARNING, "error": logging.ERROR}
    logging.basicConfig(level=levels.get(level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _set_threads(n):
    if n is None:
        return
    if n < 1:
        raise ConfigError("--threads must be >= 1")
    import numba
    numba.set_num_threads(min(int(n), numba.config.NUMBA_NUM_THREADS))


def _config(args) -> dict:
    skip = {"func", "out"}
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())
            if k not in skip}


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# generate


def _generate(scene_name, frames, dt, seed, noise_p, noise_r):
    from .dynamics import NoiseConfig
    from .presets import preset

    scene = preset(scene_name)
    if frames < 2:
        raise ConfigError("--frames must be >= 2")
    if not dt > 0:
        raise ConfigError("--dt must be > 0")
    res, obs = scene.simulate(frames, dt, seed, NoiseConfig(noise_p, noise_r, seed))
    truth = {
        "scene": scene.name,
        "mechanism": scene.mechanism.to_json(),
        "params": scene.params.to_json(),
        "theta": scene.params.ground_truth.tolist(),
        "dt": dt,
        "substeps": scene.substeps,
        "dof_names": scene.mechanism.dof_names(),
        "states": res.states.tolist(),
        "controls": res.controls.tolist(),
    }
    return scene, res, obs, truth


def cmd_generate(args):
    from .plotting import plot_joint_series

    out = _out(args)
    scene, res, obs, truth = _generate(args.scene, args.frames, args.dt, args.seed, args.noise_p,
                                       args.noise_r)
    truth["config"] = _config(args)
    save_trajectory(out / "trajectory.json", obs)
    write_json(out / "truth.json", truth)
    names = scene.mechanism.dof_names()
    header = ["t"] + [f"{n}" for n in names] + [f"{n}.vel" for n in names]
    write_csv(out / "states.csv", header,
              ([t * args.dt, *row] for t, row in enumerate(res.states)))
    plot_joint_series({n: res.q[:, k] for k, n in enumerate(names)}, args.dt, out / "states.png",
                      title=f"{scene.name} ground truth")
    print(f"wrote {out / 'trajectory.json'} ({obs.n_bodies} bodies, {obs.n_frames} frames)")
    return 0


# --------------------------------------------------------------------------
# infer


def _ransac_config(args):
    from .joints import RansacConfig

    kw = {"iterations": args.iterations, "seed": args.seed, "threads": args.threads or 1}
    if args.threshold is not None:
        kw["inlier_threshold"] = args.threshold
    if args.noise_p or args.noise_r:
        return RansacConfig.for_noise(args.noise_p, args.noise_r, **kw).validate()
    return RansacConfig(**kw).validate()


def cmd_infer(args):
    from .plotting import plot_joint_series
    from .topology import extract_joint_positions, infer_articulation

    out = _out(args)
    obs = load_trajectory(args.trajectory)
    cfg = _ransac_config(args)
    t0 = time.perf_counter()
    world = infer_articulation(obs, cfg)
    seconds = time.perf_counter() - t0
    q = extract_joint_positions(world, obs, cfg.rotation_weight)
    doc = world.to_json()
    doc["summary"] = world.summary()
    doc["config"] = _config(args)
    write_json(out / "world_model.json", doc)
    labels = list(q)
    write_csv(out / "joint_q.csv", ["t"] + labels,
              ([t * obs.dt, *(q[k][t] for k in labels)] for t in range(obs.n_frames)))
    atomic_write_text(out / "summary.txt", world.summary() + "\n")
    if labels:
        plot_joint_series(q, obs.dt, out / "joint_q.png", title="inferred joint coordinates")
    print(world.summary())
    log.info("articulation inferred in %.2f s", seconds)
    return 0


# --------------------------------------------------------------------------
# fit-params


def _load_truth(path):
    from .dynamics import Mechanism
    from .params import ParamSpec

    doc = read_json(path)
    try:
        mech = Mechanism.from_json(doc["mechanism"])
        spec = ParamSpec.from_json(doc["params"])
        theta = np.asarray(doc["theta"], dtype=float)
    except KeyError as exc:
        raise ParseError(f"{path}: missing field {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if theta.shape != (len(spec),):
        raise ParseError(f"{path}: field 'theta' has {theta.size} entries for {len(spec)} parameters")
    return doc, mech, spec, theta


def _fit_problem(obs, scene_name, model_path, truth_path):
    """Mechanism to fit, parameter spec and (optional) ground truth."""
    from .params import ParamEntry, ParamSpec
    from .presets import preset
    from .topology import WorldModel, skeleton_from_world

    name = scene_name or obs.scene
    if not name:
        raise ConfigError("the trajectory names no scene; pass --scene")
    scene = preset(name)
    mech = scene.mechanism
    if model_path is not None:
        try:
            world = WorldModel.from_json(read_json(model_path), obs)
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{model_path}: {exc}") from exc
        mech = skeleton_from_world(world, scene.mechanism)
    spec = scene.params.without_truth()
    truth = None
    if truth_path is not None:
        _, _, tspec, theta = _load_truth(truth_path)
        if tspec.names != spec.names:
            raise ParseError(f"{truth_path}: field 'params' names {tspec.names}, expected {spec.names}")
        truth = theta
        spec = ParamSpec([ParamEntry(e.name, e.lo, e.hi, float(v)) for e, v in zip(spec.entries, theta)])
    return scene, mech, spec, truth


def _identifiable(mech, spec, obs, theta, shooting):
    from .estimation import ShootingProblem

    infl = ShootingProblem(mech, spec, obs, shooting).parameter_influence(theta)
    return infl, infl > 1e-9 * max(1.0, float(np.max(infl)))


def _fit(obs, mech, spec, truth, method, particles, steps, seed, lr=None):
    from .estimation import EstimateConfig, estimate
    from .params import nmae

    cfg = EstimateConfig(method=method, particles=particles, steps=steps, seed=seed)
    if lr is not None:
        cfg.lr = lr
    res = estimate(obs, mech, spec, cfg)
    doc = res.to_json()
    doc.pop("seconds")
    influence, ident = _identifiable(mech, spec, obs, res.theta, cfg.shooting)
    doc["influence"] = influence.tolist()
    doc["identifiable"] = ident.tolist()
    doc["nmae_identifiable"] = None
    if truth is not None and ident.any():
        sub = type(spec)([e for e, k in zip(spec.entries, ident) if k])
        doc["nmae_identifiable"] = nmae(res.theta[ident], truth[ident], sub)
    return res, doc


def cmd_fit_params(args):
    from .plotting import plot_loss_trace, plot_parameters

    out = _out(args)
    obs = load_trajectory(args.trajectory)
    scene, mech, spec, truth = _fit_problem(obs, args.scene, args.model, args.truth)
    res, doc = _fit(obs, mech, spec, truth, args.method, args.particles, args.steps, args.seed, args.lr)
    doc["mechanism"] = mech.with_params(dict(zip(spec.names, res.theta))).to_json()
    doc["config"] = _config(args)
    write_json(out / "fit.json", doc)
    n = res.loss_trace.shape[1] if res.loss_trace.ndim == 2 else 1
    write_csv(out / "loss_trace.csv", ["step"] + [f"particle{k}" for k in range(n)],
              ([t, *np.atleast_1d(row)] for t, row in enumerate(res.loss_trace)))
    plot_loss_trace(res.loss_trace, out / "loss_trace.png", title=f"{args.method} loss")
    plot_parameters(spec.names, res.theta, truth, spec.lo, spec.hi, out / "params.png")
    for name, value in zip(spec.names, res.theta):
        print(f"{name} = {value:.6g}")
    print("nmae =", "null" if res.nmae is None else f"{res.nmae:.4g}")
    return 0


# --------------------------------------------------------------------------
# control


def _load_mechanism(path):
    from .dynamics import Mechanism

    doc = read_json(path)
    if "mechanism" in doc:
        doc = doc["mechanism"]
    try:
        return Mechanism.from_json(doc)
    except KeyError as exc:
        raise ParseError(f"{path}: missing field {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{path}: {exc}") from exc


def _load_params(path, mech) -> dict:
    """Named parameter values from a fit result, a truth sidecar or a flat mapping."""
    doc = read_json(path)
    if isinstance(doc, dict) and "theta" in doc:
        names = doc.get("names")
        if names is None and "params" in doc:
            names = [e["name"] for e in doc["params"]]
        if names is None:
            raise ParseError(f"{path}: field 'names' missing")
        theta = doc["theta"]
        if not isinstance(theta, list) or len(theta) != len(names):
            raise ParseError(f"{path}: field 'theta' has {len(theta) if isinstance(theta, list) else '?'} "
                             f"entries for {len(names)} names")
        values = dict(zip(names, theta))
    elif isinstance(doc, dict):
        values = doc
    else:
        raise ParseError(f"{path}: expected a JSON object")
    for name, v in values.items():
        try:
            mech.param_index(name)
        except (KeyError, ValueError):
            raise ParseError(f"{path}: field 'names' entry {name!r} does not match the model "
                             f"(links {[l.name for l in mech.links]})") from None
        if not isinstance(v, (int, float)) or not math.isfinite(v):
            raise ParseError(f"{path}: value of {name!r} must be a finite number")
    return {k: float(v) for k, v in values.items()}


def _control_config(args, seed):
    from .control import MppiConfig

    return MppiConfig(samples=args.samples, horizon=args.horizon, seed=seed).validate()


def _run_control(mech, params, true_mech, true_params, task_name, seeds, args):
    from .control import TASKS, upright_error

    if mech.n_dof != 2 or true_mech.n_dof != 2:
        raise DimensionMismatch(f"control expects a two-DoF cart-pole model, got {mech.n_dof} DoF")
    task = TASKS[task_name]()
    runs = []
    for seed in seeds:
        r = _timed_task(mech, params, task, _control_config(args, seed), true_mech, true_params)
        runs.append({"seed": int(seed), "mean_reward": r.mean_reward, "success": r.success(task),
                     "final_upright_error": float(upright_error(r.states[-1, task.pole_dof])),
                     "rewards": r.rewards, "states": r.states})
    return task, runs


def _timed_task(mech, params, task, cfg, true_mech, true_params):
    from .control import run_task

    t0 = time.perf_counter()
    r = run_task(mech, params, task, cfg, true_mech, true_params)
    log.info("%s seed %d: reward %.3f (%.1f s)", task.name, cfg.seed, r.mean_reward,
             time.perf_counter() - t0)
    return r


def _control_summary(runs):
    rewards = np.array([r["mean_reward"] for r in runs])
    return {"runs": len(runs), "successes": int(sum(r["success"] for r in runs)),
            "mean_reward": float(rewards.mean()), "std_reward": float(rewards.std()),
            "per_seed": [{k: r[k] for k in ("seed", "mean_reward", "success", "final_upright_error")}
                         for r in runs]}


def cmd_control(args):
    from .plotting import plot_rewards

    out = _out(args)
    mech = _load_mechanism(args.model)
    params = _load_params(args.params, mech) if args.params else None
    true_mech, true_params = mech, params
    if args.truth is not None:
        tdoc, true_mech, tspec, theta = _load_truth(args.truth)
        true_params = dict(zip(tspec.names, theta.tolist()))
    task, runs = _run_control(mech, params, true_mech, true_params, args.task,
                              range(args.seed, args.seed + args.seeds), args)
    summary = {"task": task.name, **_control_summary(runs), "config": _config(args)}
    write_json(out / "summary.json", summary)
    T = len(runs[0]["rewards"])
    write_csv(out / "rewards.csv", ["step"] + [f"seed{r['seed']}" for r in runs],
              ([t + 1, *(r["rewards"][t] for r in runs)] for t in range(T)))
    plot_rewards({f"seed {r['seed']}": r["rewards"] for r in runs}, out / "rewards.png",
                 title=f"{task.name} reward")
    print(f"{task.name}: {summary['successes']}/{summary['runs']} successful, "
          f"mean reward {summary['mean_reward']:.3f}")
    return 0


# --------------------------------------------------------------------------
# eval


def _need(n, fraction=0.8):
    return int(math.ceil(fraction * n - 1e-9))


def cmd_eval(args):
    from .plotting import plot_rewards
    from .presets import preset
    from .topology import compare_topology, infer_articulation, skeleton_from_world

    out = _out(args)
    seeds = list(range(args.seed, args.seed + args.seeds))
    scene = preset(args.scene)
    timings = {}
    summary = {"scene": scene.name, "seeds": seeds, "config": _config(args)}

    # topology from noiseless observations
    t0 = time.perf_counter()
    topo, worlds, data = [], {}, {}
    for seed in seeds:
        _, _, obs, truth = _generate(scene.name, args.frames, args.dt, seed, 0.0, 0.0)
        world = infer_articulation(obs)
        chk = compare_topology(world, scene.mechanism)
        ok = chk.exact and chk.max_axis_error < 1e-6
        topo.append({"seed": seed, "ok": ok, "summary": world.summary(), **chk.to_json()})
        worlds[seed], data[(seed, 0)] = world, obs
    timings["topology"] = time.perf_counter() - t0
    n_topo = sum(t["ok"] for t in topo)
    summary["topology"] = {"pass": n_topo == len(seeds), "exact": n_topo, "runs": len(seeds),
                           "runs_detail": topo}

    # parameter estimation on the inferred skeleton, noiseless and noisy
    t0 = time.perf_counter()
    arms = {"noiseless": (0.0, 0.0, 0.05), "noisy": (args.noise_p, args.noise_r, 0.161)}
    params_out = {}
    fitted = {}
    for arm, (sp, sr, bound) in arms.items():
        rows = []
        for seed in seeds:
            obs = data.get((seed, sp)) if sp == 0 and sr == 0 else None
            if obs is None:
                _, _, obs, _ = _generate(scene.name, args.frames, args.dt, seed, sp, sr)
            world = worlds[seed] if sp == 0 and sr == 0 else None
            if world is None:
                from .joints import RansacConfig
                world = infer_articulation(obs, RansacConfig.for_noise(sp, sr))
            chk = compare_topology(world, scene.mechanism)
            mech = skeleton_from_world(world, scene.mechanism) if chk.exact else scene.mechanism
            res, doc = _fit(obs, mech, scene.params, scene.params.ground_truth, args.method,
                            args.particles, args.steps, seed)
            rows.append({"seed": seed, "nmae": res.nmae, "nmae_identifiable": doc["nmae_identifiable"],
                         "theta": res.theta.tolist(), "identifiable": doc["identifiable"],
                         "steps_run": res.steps_run, "skeleton": chk.exact})
            fitted[(arm, seed)] = res.theta
            log.info("%s seed %d: nmae %.4f", arm, seed, res.nmae)
        nm = np.array([r["nmae"] for r in rows])
        passed = int(np.sum(nm < bound)) if arm == "noiseless" else int(np.sum(nm <= bound))
        params_out[arm] = {"bound": bound, "within_bound": passed, "runs": len(rows),
                           "pass": passed >= _need(len(rows)), "median_nmae": float(np.median(nm)),
                           "runs_detail": rows}
    unident = sorted({n for r in params_out["noiseless"]["runs_detail"]
                      for n, k in zip(scene.params.names, r["identifiable"]) if not k})
    summary["parameters"] = {"method": args.method, "names": scene.params.names,
                             "truth": scene.params.ground_truth.tolist(),
                             "unidentifiable": unident, **params_out,
                             "pass": all(a["pass"] for a in params_out.values())}
    timings["parameters"] = time.perf_counter() - t0

    # control planned on the noiseless estimate of the first seed, executed on the truth
    t0 = time.perf_counter()
    theta = fitted[("noiseless", seeds[0])]
    plan_params = dict(zip(scene.params.names, theta.tolist()))
    control = {"planning_params": plan_params}
    traces = {}
    for task_name in ("swing_up", "balance"):
        _, runs = _run_control(scene.mechanism, plan_params, scene.mechanism, None, task_name,
                               seeds, args)
        s = _control_summary(runs)
        s["pass"] = s["successes"] >= _need(len(runs))
        control[task_name] = s
        for r in runs:
            traces[(task_name, r["seed"])] = r["rewards"]
    control["pass"] = control["swing_up"]["pass"] and control["balance"]["pass"]
    summary["control"] = control
    timings["control"] = time.perf_counter() - t0

    summary["pass"] = summary["topology"]["pass"] and summary["parameters"]["pass"] and control["pass"]
    write_json(out / "summary.json", summary)
    write_json(out / "timings.json", timings)
    write_csv(out / "rewards.csv", ["step"] + [f"{k}_seed{s}" for k, s in traces],
              ([t + 1, *(v[t] for v in traces.values())] for t in range(len(next(iter(traces.values()))))))
    for task_name in ("swing_up", "balance"):
        plot_rewards({f"seed {s}": v for (k, s), v in traces.items() if k == task_name},
                     out / f"rewards_{task_name}.png", title=f"{task_name} reward (inferred parameters)")
    nm_rows = [(arm, r["seed"], r["nmae"], r["nmae_identifiable"])
               for arm in params_out for r in params_out[arm]["runs_detail"]]
    write_csv(out / "nmae.csv", ["arm", "seed", "nmae", "nmae_identifiable"], nm_rows)

    def line(name, ok, detail):
        print(f"{name:<13s} {'PASS' if ok else 'FAIL'}  {detail}")
    line("topology", summary["topology"]["pass"], f"{n_topo}/{len(seeds)} exact")
    for arm, a in params_out.items():
        ident = [r["nmae_identifiable"] for r in a["runs_detail"] if r["nmae_identifiable"] is not None]
        extra = f", identifiable-only median {np.median(ident):.4f}" if ident else ""
        line(f"nmae {arm}", a["pass"], f"{a['within_bound']}/{a['runs']} within {a['bound']} "
             f"(median {a['median_nmae']:.4f}{extra})")
    for task_name in ("swing_up", "balance"):
        c = control[task_name]
        line(task_name, c["pass"], f"{c['successes']}/{c['runs']} successful")
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="artik", description="Articulation and dynamics inference from body poses.")
    p.add_argument("--version", action="version", version=f"artik {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=0):
        sp.add_argument("--out", default=".", help="output directory")
        sp.add_argument("--seed", type=int, default=seed)
        sp.add_argument("--threads", type=int, default=None, help="worker thread cap")

    g = sub.add_parser("generate", help="simulate a preset and write pose observations")
    g.add_argument("--scene", default="cartpole")
    g.add_argument("--frames", type=int, default=200)
    g.add_argument("--dt", type=float, default=0.05)
    g.add_argument("--noise-p", type=float, default=0.0, help="position noise std [m]")
    g.add_argument("--noise-r", type=float, default=0.0, help="rotation noise std [rad]")
    common(g)
    g.set_defaults(func=cmd_generate)

    i = sub.add_parser("infer", help="infer the kinematic tree of a trajectory file")
    i.add_argument("trajectory", type=Path)
    i.add_argument("--iterations", type=int, default=200)
    i.add_argument("--threshold", type=float, default=None, help="RANSAC inlier threshold")
    i.add_argument("--noise-p", type=float, default=0.0, help="expected position noise [m]")
    i.add_argument("--noise-r", type=float, default=0.0, help="expected rotation noise [rad]")
    common(i)
    i.set_defaults(func=cmd_infer)

    f = sub.add_parser("fit-params", help="estimate dynamic parameters")
    f.add_argument("trajectory", type=Path)
    f.add_argument("--scene", default=None, help="template preset (default: from the file)")
    f.add_argument("--model", type=Path, default=None, help="world model JSON from infer")
    f.add_argument("--truth", type=Path, default=None, help="ground-truth sidecar for NMAE")
    f.add_argument("--method", choices=("adam", "svgd"), default="svgd")
    f.add_argument("--particles", type=int, default=16)
    f.add_argument("--steps", type=int, default=2000)
    f.add_argument("--lr", type=float, default=None)
    common(f)
    f.set_defaults(func=cmd_fit_params)

    c = sub.add_parser("control", help="closed-loop MPPI episodes")
    c.add_argument("--task", choices=("swing_up", "balance"), default="swing_up")
    c.add_argument("--model", type=Path, required=True, help="mechanism JSON (truth or fit result)")
    c.add_argument("--params", type=Path, default=None, help="parameter JSON for planning")
    c.add_argument("--truth", type=Path, default=None, help="sidecar of the executed system")
    c.add_argument("--seeds", type=int, default=10)
    c.add_argument("--samples", type=int, default=200)
    c.add_argument("--horizon", type=int, default=60)
    common(c)
    c.set_defaults(func=cmd_control)

    e = sub.add_parser("eval", help="run the full generate, infer, fit and control protocol")
    e.add_argument("--scene", default="cartpole")
    e.add_argument("--frames", type=int, default=200)
    e.add_argument("--dt", type=float, default=0.05)
    e.add_argument("--seeds", type=int, default=10)
    e.add_argument("--method", choices=("adam", "svgd"), default="svgd")
    e.add_argument("--particles", type=int, default=16)
    e.add_argument("--steps", type=int, default=2000)
    e.add_argument("--noise-p", type=float, default=NOISY[0])
    e.add_argument("--noise-r", type=float, default=NOISY[1])
    e.add_argument("--samples", type=int, default=200)
    e.add_argument("--horizon", type=int, default=60)
    common(e)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _set_threads(args.threads)
        return int(args.func(args) or 0)
    except (ParseError, DimensionMismatch) as exc:
        print(f"artik: input error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except ArithmeticError as exc:
        print(f"artik: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ArtikError, ValueError, KeyError) as exc:
        print(f"artik: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
