"""Command-line entry point: ``motiontransfer <command> [options]``.

Exit codes: 0 success, 2 bad input or config, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .amf import AMFError, extract_amf, flow_rows
from .config import ConfigError
from .experiments import convergence_study, roundtrip_study
from .guidance import GuidanceDivergenceError, GuidanceError
from .masks import MaskError, load as load_masks
from .metrics import MetricError
from .models import ModelError
from .pipeline import SceneError, make_provider, run_transfer, synthesize_scene
from .schedule import ScheduleError
from .solver import DivergenceError, SolverError, SolverOptions

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DIVERGED = 3

_INPUT_ERRORS = (ConfigError, MaskError, SceneError, ModelError, ScheduleError, GuidanceError, AMFError,
                 MetricError, OSError)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    _emit(path, buf.getvalue())


def _emit(path, text: str) -> None:
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8", newline="\n")


def _load(args, command: str) -> dict:
    if args.config is None:
        return cfgmod.default_config(command)
    return cfgmod.load_config(args.config, command)


def _solver_overrides(args, solvers: list) -> list:
    """``--solver/--order/--midpoint`` replace the configured list with one solver."""
    if args.solver is None and args.order is None and args.midpoint is None:
        return solvers
    base = dict(solvers[-1]) if solvers else {}
    base["solver"] = args.solver or base.get("solver", "rectpc")
    if args.order is not None:
        base["order"] = args.order
    if args.midpoint is not None:
        base["midpoint"] = args.midpoint == "on"
    return [base]


def cmd_converge(args) -> int:
    cfg = _load(args, "converge")
    seed = cfg["seed"] if args.seed is None else args.seed
    solvers = [cfgmod.build_solver(s) for s in _solver_overrides(args, cfg["solvers"])]
    steps = [int(s) for s in cfg["steps"]]
    if not steps:
        raise ConfigError("steps list is empty")
    cfgmod.build_model(cfg["model"], cfgmod.build_schedule({**cfg["schedule"], "T": steps[0]}))
    x_T = np.random.default_rng(seed).standard_normal((int(cfg["samples"]), len(cfg["model"].get("mean", [0, 0]))))
    rows = convergence_study(lambda sch: cfgmod.build_model(cfg["model"], sch),
                             lambda T: cfgmod.build_schedule(cfg["schedule"], T), x_T, steps, solvers)
    _write_csv(args.out, ["solver", "K", "midpoint", "steps", "terminal_error", "slope"],
               [(r.solver, r.K, r.midpoint, r.steps, r.terminal_error, r.slope) for r in rows])
    return EXIT_OK


def _invert_seed(payload):
    cfg, solvers, seed = payload
    sch = cfgmod.build_schedule(cfg["schedule"])
    model = cfgmod.build_model(cfg["model"], sch)
    curves = roundtrip_study(model, sch, [seed], [cfgmod.build_solver(s) for s in solvers])[seed]
    rows = []
    for k, (spec, curve) in enumerate(zip(solvers, curves)):
        label = cfgmod.build_solver(spec).label()
        for n, mse in enumerate(curve):
            idx = sch.T - n
            rows.append((seed, n, k, label, float(sch.times[idx]), float(mse)))
    return rows


def cmd_invert(args) -> int:
    cfg = _load(args, "invert")
    seeds = [int(s) for s in cfg["seeds"]] if args.seed is None else [args.seed]
    solvers = _solver_overrides(args, cfg["solvers"])
    for s in solvers:
        cfgmod.build_solver(s)
    cfgmod.build_model(cfg["model"], cfgmod.build_schedule(cfg["schedule"]))
    payloads = [(cfg, solvers, s) for s in seeds]
    if args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            chunks = list(pool.map(_invert_seed, payloads))
    else:
        chunks = [_invert_seed(p) for p in payloads]
    rows = sorted((r for c in chunks for r in c), key=lambda r: (r[0], r[1], r[2]))
    _write_csv(args.out, ["solver", "seed", "step", "t", "mse"],
               [(label, seed, n, t, mse) for seed, n, _, label, t, mse in rows])
    return EXIT_OK


def cmd_amf(args) -> int:
    cfg = _load(args, "amf")
    spec = cfgmod.build_scene(cfg["scene"])
    scene = synthesize_scene(spec)
    masks = scene.masks
    if args.masks is not None:
        masks = load_masks(args.masks)
        if masks and masks[0].masks.shape != scene.latent.shape[:3]:
            raise MaskError(f"mask grid {masks[0].masks.shape} does not match scene {scene.latent.shape[:3]}")
    settings = cfgmod.build_settings({**cfgmod.default_config("pipeline"), "provider": cfg["provider"]})
    provider = make_provider(spec, settings)
    header = ["object_id", "frame_i", "frame_j", "row", "col", "drow", "dcol", "valid"]
    if args.ground_truth:
        header.append("epe")
    rows = []
    for k, seq in enumerate(masks):
        flow = extract_amf(provider, scene.latent, masks, k, pairs=cfg["pairs"], same_frame=cfg["same_frame"],
                           post_softmax=cfg["post_softmax"])
        truth = scene.ground_truth.get(seq.object_id)
        for row in flow_rows(flow, seq):
            oid, i, j, r, c, dr, dc, valid = row
            out = [oid, i, j, r, c, int(dr), int(dc), valid]
            if args.ground_truth:
                ff = truth.pairs.get((i, j)) if truth is not None else None
                if ff is not None and valid and ff.valid[r, c]:
                    out.append(float(np.hypot(dr - ff.disp[r, c, 0], dc - ff.disp[r, c, 1])))
                else:
                    out.append(None)
            rows.append(out)
    _write_csv(args.out, header, rows)
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = _load(args, "pipeline")
    seed = cfg["seed"] if args.seed is None else args.seed
    spec = cfgmod.build_scene(cfg["scene"])
    solver_cfg = _solver_overrides(args, [cfg["solver"]])[0]
    opts = cfgmod.build_solver({**cfg["solver"], **solver_cfg})
    guidance = cfgmod.build_guidance(cfg["guidance"])
    if args.guidance == "off":
        guidance = None
    settings = cfgmod.build_settings(cfg)
    result = run_transfer(spec, opts, guidance, seed=seed, settings=settings)
    _emit(args.out, json.dumps(result.report, indent=2, sort_keys=True) + "\n")
    if args.loss_trace:
        _write_csv(args.loss_trace, ["step", "inner_iter", "L_obj", "L_bg", "L_multi"], result.loss_trace)
    if args.trajectory:
        ref = synthesize_scene(spec).latent.ravel()
        traj = result.trajectory
        sch = cfgmod.build_schedule(cfg["schedule"])
        rows = []
        for n, (idx, x) in enumerate(zip(traj.indices, traj.states)):
            d = x - ref
            rows.append((n, float(sch.times[idx]), float(sch.lambdas[idx]), float(np.mean(d * d)),
                         float(np.linalg.norm(x))))
        _write_csv(args.trajectory, ["step", "t", "lambda", "mse_vs_reference", "norm"], rows)
    return EXIT_OK


def cmd_init_config(args) -> int:
    _emit(args.out, cfgmod.dump_config(cfgmod.default_config(args.command_name)))
    return EXIT_OK


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="motiontransfer", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, solver_flags=True):
        sp.add_argument("--config", help="YAML run config (see init-config)")
        sp.add_argument("--seed", type=int, help="override the configured seed(s)")
        sp.add_argument("--out", help="output path (default: stdout)")
        sp.add_argument("--parallel", type=_positive, default=1, help="worker processes for independent seeds")
        if solver_flags:
            sp.add_argument("--solver", choices=("rectpc", "ddim"))
            sp.add_argument("--order", type=int, metavar="K")
            sp.add_argument("--midpoint", choices=("on", "off"))

    sp = sub.add_parser("converge", help="terminal error vs step count, with fitted order")
    common(sp)
    sp.set_defaults(func=cmd_converge)

    sp = sub.add_parser("invert", help="inversion/reconstruction per-step MSE curves")
    common(sp)
    sp.set_defaults(func=cmd_invert)

    sp = sub.add_parser("amf", help="per-object attention motion flow dump")
    common(sp, solver_flags=False)
    sp.add_argument("--masks", help="mask JSON file replacing the synthesized masks")
    sp.add_argument("--ground-truth", action="store_true", help="add an endpoint-error column")
    sp.set_defaults(func=cmd_amf)

    sp = sub.add_parser("pipeline", help="guided toy motion transfer, JSON report")
    common(sp)
    sp.add_argument("--guidance", choices=("on", "off"), help="override guidance.enabled")
    sp.add_argument("--loss-trace", help="write the per-iteration loss trace CSV here")
    sp.add_argument("--trajectory", help="write the per-step trajectory CSV here")
    sp.set_defaults(func=cmd_pipeline)

    sp = sub.add_parser("init-config", help="print the full default config for a command")
    sp.add_argument("command_name", choices=cfgmod.COMMANDS)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_init_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    try:
        return args.func(args)
    except (DivergenceError, GuidanceDivergenceError, FloatingPointError) as exc:
        step = getattr(exc, "step", None)
        where = f" (step {step})" if step is not None else ""
        print(f"error: numerical divergence{where}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except SolverError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
