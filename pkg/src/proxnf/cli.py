"""Command-line interface.

Subcommands cover the full desk pipeline: ``phantom`` renders the dynamic
object, ``simulate`` produces noisy rotating-aperture measurements,
``embed`` fits a neural field to a known stack, ``reconstruct-proxnf`` and
``reconstruct-nn`` solve the inverse problem, ``evaluate`` scores an
estimate against the truth, and ``sweep-reg`` runs the discrepancy-principle
sweep.  Every subcommand echoes its resolved configuration (and seed) as
JSON on stdout, writes only the documented file formats, and reports
failures as a JSON object on stderr with a nonzero exit status.  Flags can
also be supplied through ``--config file.json`` (flag values win).
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from proxnf import io as pio
from proxnf.baselines import FistaConfig, morozov_sweep, stirnn_reconstruct
from proxnf.crt import DynamicCRTOperator, SensorSchedule, add_noise, forward, make_radii
from proxnf.grid import SpacetimeGrid
from proxnf.metrics import evaluate_stacks
from proxnf.phantom import lesion_mask, phantom_from_dict, phantom_to_dict, render
from proxnf.pounet import AdamConfig, embed
from proxnf.solver import ProxNFConfig, run

TRACE_COLUMNS = ["iteration", "frames", "data_fidelity", "regularization", "prox_grad_norm"]
FISTA_TRACE_COLUMNS = ["iteration", "objective", "data_fidelity", "nuclear"]


class CLIUsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIUsageError(message)


SYSTEM_DEFAULTS = {
    "side_pixels": 64,
    "fov_side": 3.72,
    "frames": 128,
    "horizon": 648.0,
    "aperture_radius": 2.63,
    "sensor_groups": 2,
    "sensors_per_group": 5,
    "sensor_separation": 1.0,
    "rotation_angle": 5.0,
    "rings": 90,
}

SOLVER_DEFAULTS = {
    "step": "auto",
    "batch_frames": None,
    "max_iterations": 40,
    "stop_ratio": 0.1,
    "lam_s": 0.0,
    "lam_t": 0.0,
    "prox_rounds": 2,
    "adam_steps": 200,
    "adam_lr": 1e-3,
    "adam_batch": 100_000,
    "partitions": 10,
    "hidden": "140,140,140,140",
    "cg_tol": 1e-8,
    "cg_max_iter": 500,
    "sigma": None,
    "seed": 0,
    "paper_gradient_scale": False,
    "prox_sampled_only": False,
}


def _add_system_flags(p):
    p.add_argument("--side-pixels", type=int, help="pixels per FOV side M_s")
    p.add_argument("--fov-side", type=float, help="field-of-view side L (cm)")
    p.add_argument("--frames", type=int, help="number of frames K")
    p.add_argument("--horizon", type=float, help="acquisition time T (s)")
    p.add_argument("--aperture-radius", type=float, help="sensor circle radius R (cm)")
    p.add_argument("--sensor-groups", type=int, help="number of sensor groups")
    p.add_argument("--sensors-per-group", type=int, help="sensors per group")
    p.add_argument("--sensor-separation", type=float, help="in-group spacing (deg)")
    p.add_argument("--rotation-angle", type=float, help="rotation per frame (deg)")
    p.add_argument("--rings", type=int, help="integration radii per view I")


def _add_solver_flags(p):
    p.add_argument("--step", help='outer step size, "auto" or a float')
    p.add_argument("--batch-frames", type=int, help="sampled frames per iteration J")
    p.add_argument("--max-iterations", type=int)
    p.add_argument("--stop-ratio", type=float)
    p.add_argument("--lam-s", type=float, help="spatial-gradient penalty weight")
    p.add_argument("--lam-t", type=float, help="temporal-derivative penalty weight")
    p.add_argument("--prox-rounds", type=int)
    p.add_argument("--adam-steps", type=int)
    p.add_argument("--adam-lr", type=float)
    p.add_argument("--adam-batch", type=int, help="spatiotemporal points per Adam step")
    p.add_argument("--partitions", type=int)
    p.add_argument("--hidden", help="comma-separated hidden-layer widths")
    p.add_argument("--cg-tol", type=float)
    p.add_argument("--cg-max-iter", type=int)
    p.add_argument("--sigma", type=float, help="override the stored noise level")
    p.add_argument("--seed", type=int)
    p.add_argument("--paper-gradient-scale", action="store_const", const=True,
                   help="drop the K/J rescale of sampled gradients")
    p.add_argument("--prox-sampled-only", action="store_const", const=True,
                   help="constrain only sampled frames in the proximal embed")


def build_parser() -> _Parser:
    parser = _Parser(prog="proxnf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="render the dynamic phantom to a stack file")
    p.add_argument("--config", help="JSON phantom/grid description")
    p.add_argument("--out", required=True, help="output stack file")
    p.add_argument("--roi-out", help="output lesion ROI JSON")
    p.add_argument("--side-pixels", type=int)
    p.add_argument("--fov-side", type=float)
    p.add_argument("--frames", type=int)
    p.add_argument("--horizon", type=float)
    p.add_argument("--supersample", type=int)
    p.add_argument("--roi-dilate", type=int)
    p.add_argument("--breathing-amplitude", type=float)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("simulate", help="forward-project a stack and add noise")
    p.add_argument("--config")
    p.add_argument("--stack", required=True)
    p.add_argument("--out", required=True, help="output measurements file")
    _add_system_flags(p)
    p.add_argument("--rnl", type=float, help="relative noise level")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("embed", help="fit a neural field to a known stack")
    p.add_argument("--config")
    p.add_argument("--stack", required=True)
    p.add_argument("--out", required=True, help="output field checkpoint")
    p.add_argument("--metrics-out", help="per-round misfit CSV")
    p.add_argument("--rounds", type=int)
    p.add_argument("--lam-s", type=float)
    p.add_argument("--lam-t", type=float)
    p.add_argument("--adam-steps", type=int)
    p.add_argument("--adam-lr", type=float)
    p.add_argument("--adam-batch", type=int)
    p.add_argument("--partitions", type=int)
    p.add_argument("--hidden")
    p.add_argument("--cg-tol", type=float)
    p.add_argument("--cg-max-iter", type=int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("reconstruct-proxnf", help="neural-field reconstruction")
    p.add_argument("--config")
    p.add_argument("--measurements", required=True)
    p.add_argument("--out-field", required=True)
    p.add_argument("--out-stack", required=True)
    p.add_argument("--trace-out")
    p.add_argument("--metrics-out")
    _add_system_flags(p)
    _add_solver_flags(p)

    p = sub.add_parser("reconstruct-nn", help="nuclear-norm reconstruction (FISTA)")
    p.add_argument("--config")
    p.add_argument("--measurements", required=True)
    p.add_argument("--out-stack", required=True)
    p.add_argument("--trace-out")
    p.add_argument("--metrics-out")
    _add_system_flags(p)
    p.add_argument("--lam-nuc", type=float)
    p.add_argument("--max-iterations", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("evaluate", help="score an estimate against the truth")
    p.add_argument("--estimate", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--roi")
    p.add_argument("--out", required=True, help="metrics JSON")
    p.add_argument("--frame-csv", help="per-frame RRMSE CSV")

    p = sub.add_parser("sweep-reg", help="discrepancy-principle weight sweep")
    p.add_argument("--config")
    p.add_argument("--measurements", required=True)
    p.add_argument("--method", choices=["nn", "proxnf"], required=True)
    p.add_argument("--lambdas", required=True, help="comma-separated increasing weights")
    p.add_argument("--out", required=True, help="sweep report JSON")
    _add_system_flags(p)
    _add_solver_flags(p)
    p.add_argument("--lam-t-ratio", type=float, help="lam_t = ratio * lam_s (proxnf sweep)")
    p.add_argument("--max-iterations-nn", type=int, help="FISTA budget per sweep point")

    return parser


def _resolve(args, defaults: dict) -> dict:
    config = {}
    cfg_path = getattr(args, "config", None)
    if cfg_path:
        config = pio.read_json(cfg_path)
        if not isinstance(config, dict):
            raise CLIUsageError("--config must hold a JSON object")
    resolved = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
        elif key in config:
            resolved[key] = config[key]
        else:
            resolved[key] = default
    return resolved


def _echo(command: str, resolved: dict):
    print(json.dumps({"command": command, "config": resolved,
                      "seed": resolved.get("seed")}, sort_keys=True))


def _grid(resolved) -> SpacetimeGrid:
    return SpacetimeGrid(
        side_pixels=resolved["side_pixels"],
        fov_side=resolved["fov_side"],
        frames=resolved["frames"],
        horizon=resolved["horizon"],
    )


def _operators(resolved) -> DynamicCRTOperator:
    grid = _grid(resolved)
    schedule = SensorSchedule(
        aperture_radius=resolved["aperture_radius"],
        n_groups=resolved["sensor_groups"],
        sensors_per_group=resolved["sensors_per_group"],
        sensor_spacing=resolved["sensor_separation"],
        rotation_per_frame=resolved["rotation_angle"],
        frames=resolved["frames"],
    )
    radii = make_radii(grid, schedule, resolved["rings"])
    return DynamicCRTOperator(grid, schedule, radii)


def _check_measurements(meas, resolved):
    rows = resolved["sensor_groups"] * resolved["sensors_per_group"] * resolved["rings"]
    if meas.data.shape != (rows, resolved["frames"]):
        raise CLIUsageError(
            f"measurements shape {meas.data.shape} does not match system flags "
            f"({rows}, {resolved['frames']})"
        )


def _hidden_tuple(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _parse_step(value):
    if value in (None, "auto"):
        return "auto"
    return float(value)


def _proxnf_config(resolved) -> ProxNFConfig:
    return ProxNFConfig(
        step=_parse_step(resolved["step"]),
        batch_frames=resolved["batch_frames"],
        max_iterations=resolved["max_iterations"],
        stop_ratio=resolved["stop_ratio"],
        lam_s=resolved["lam_s"],
        lam_t=resolved["lam_t"],
        prox_rounds=resolved["prox_rounds"],
        adam=AdamConfig(
            learning_rate=resolved["adam_lr"],
            steps=resolved["adam_steps"],
            batch_points=resolved["adam_batch"],
        ),
        cg_tol=resolved["cg_tol"],
        cg_max_iter=resolved["cg_max_iter"],
        seed=resolved["seed"],
        sigma=resolved["sigma"],
        unbias=not resolved["paper_gradient_scale"],
        prox_all_frames=not resolved["prox_sampled_only"],
        hidden=_hidden_tuple(resolved["hidden"]),
        partitions=resolved["partitions"],
    )


def cmd_phantom(args) -> int:
    defaults = {
        "side_pixels": 64, "fov_side": 3.72, "frames": 128, "horizon": 648.0,
        "supersample": 4, "roi_dilate": 2, "breathing_amplitude": None, "seed": 0,
    }
    resolved = _resolve(args, defaults)
    phantom_cfg = pio.read_json(args.config) if args.config else {}
    if resolved["breathing_amplitude"] is not None:
        phantom_cfg["breathing_amplitude"] = resolved["breathing_amplitude"]
    if resolved["horizon"] is not None:
        phantom_cfg.setdefault("horizon", resolved["horizon"])
    phantom = phantom_from_dict(phantom_cfg)
    resolved["phantom"] = phantom_to_dict(phantom)
    _echo("phantom", resolved)
    grid = SpacetimeGrid(resolved["side_pixels"], resolved["fov_side"],
                         resolved["frames"], phantom.horizon)
    stack = render(phantom, grid, supersample=resolved["supersample"])
    pio.write_stack(args.out, stack)
    if args.roi_out:
        pio.write_roi(args.roi_out, lesion_mask(phantom, grid, dilate=resolved["roi_dilate"]))
    return 0


def cmd_simulate(args) -> int:
    defaults = dict(SYSTEM_DEFAULTS)
    defaults.update({"rnl": 0.04, "seed": 0})
    resolved = _resolve(args, defaults)
    stack = pio.read_stack(args.stack)
    resolved["side_pixels"] = stack.grid.side_pixels
    resolved["fov_side"] = stack.grid.fov_side
    resolved["frames"] = stack.grid.frames
    resolved["horizon"] = stack.grid.horizon
    _echo("simulate", resolved)
    ops = _operators(resolved)
    clean = forward(stack, ops)
    noisy = add_noise(clean, resolved["rnl"], resolved["seed"])
    pio.write_measurements(args.out, noisy)
    return 0


def cmd_embed(args) -> int:
    defaults = {
        "rounds": 3, "lam_s": 0.0, "lam_t": 0.0, "adam_steps": 10_000,
        "adam_lr": 1e-5, "adam_batch": 100_000, "partitions": 10,
        "hidden": "140,140,140,140", "cg_tol": 1e-8, "cg_max_iter": 500, "seed": 0,
    }
    resolved = _resolve(args, defaults)
    _echo("embed", resolved)
    stack = pio.read_stack(args.stack)
    field, records = embed(
        stack.grid, stack,
        lam_s=resolved["lam_s"], lam_t=resolved["lam_t"], rounds=resolved["rounds"],
        adam=AdamConfig(learning_rate=resolved["adam_lr"], steps=resolved["adam_steps"],
                        batch_points=resolved["adam_batch"]),
        hidden=_hidden_tuple(resolved["hidden"]), partitions=resolved["partitions"],
        seed=resolved["seed"], cg_tol=resolved["cg_tol"], cg_max_iter=resolved["cg_max_iter"],
    )
    pio.write_field(args.out, field, seeds={"embed": resolved["seed"]})
    if args.metrics_out:
        rows = [r for r in records if "misfit" in r]
        pio.write_trace_csv(args.metrics_out, rows, ["round", "stage", "misfit", "iterations"])
    return 0


def cmd_reconstruct_proxnf(args) -> int:
    defaults = dict(SYSTEM_DEFAULTS)
    defaults.update(SOLVER_DEFAULTS)
    resolved = _resolve(args, defaults)
    _echo("reconstruct-proxnf", resolved)
    meas = pio.read_measurements(args.measurements)
    resolved["frames"] = meas.frames
    _check_measurements(meas, resolved)
    ops = _operators(resolved)
    config = _proxnf_config(resolved)
    t0 = time.perf_counter()
    field, trace = run(config, meas, ops)
    elapsed = time.perf_counter() - t0
    pio.write_field(args.out_field, field, seeds={"solver": resolved["seed"]})
    pio.write_stack(args.out_stack, field.render())
    if args.trace_out:
        pio.write_trace_csv(args.trace_out, trace.records, TRACE_COLUMNS)
    if args.metrics_out:
        last = trace.records[-1] if trace.records else {}
        pio.write_json(args.metrics_out, {
            "command": "reconstruct-proxnf",
            "config": resolved,
            "iterations": len(trace),
            "final_data_fidelity": last.get("data_fidelity"),
            "final_regularization": last.get("regularization"),
            "final_prox_grad_norm": last.get("prox_grad_norm"),
            "wall_time_s": elapsed,
            "iteration_wall_times_s": [r["wall_time"] for r in trace.records],
        })
    return 0


def cmd_reconstruct_nn(args) -> int:
    defaults = dict(SYSTEM_DEFAULTS)
    defaults.update({"lam_nuc": 1e-2, "max_iterations": 2000, "tol": 1e-6,
                     "sigma": None, "seed": 0})
    resolved = _resolve(args, defaults)
    _echo("reconstruct-nn", resolved)
    meas = pio.read_measurements(args.measurements)
    resolved["frames"] = meas.frames
    _check_measurements(meas, resolved)
    ops = _operators(resolved)
    config = FistaConfig(lam_nuc=resolved["lam_nuc"], sigma=resolved["sigma"],
                         max_iterations=resolved["max_iterations"], tol=resolved["tol"])
    t0 = time.perf_counter()
    stack, trace = stirnn_reconstruct(meas, ops, config)
    elapsed = time.perf_counter() - t0
    pio.write_stack(args.out_stack, stack)
    if args.trace_out:
        pio.write_trace_csv(args.trace_out, trace.records, FISTA_TRACE_COLUMNS)
    if args.metrics_out:
        last = trace.records[-1] if trace.records else {}
        pio.write_json(args.metrics_out, {
            "command": "reconstruct-nn",
            "config": resolved,
            "iterations": len(trace),
            "final_objective": last.get("objective"),
            "wall_time_s": elapsed,
        })
    return 0


def cmd_evaluate(args) -> int:
    resolved = {"estimate": args.estimate, "truth": args.truth, "roi": args.roi, "seed": None}
    _echo("evaluate", resolved)
    est = pio.read_stack(args.estimate)
    truth = pio.read_stack(args.truth)
    roi = pio.read_roi(args.roi) if args.roi else None
    report = evaluate_stacks(est, truth, roi)
    pio.write_json(args.out, report.as_dict())
    if args.frame_csv:
        rows = [{"frame": k, "rrmse": v} for k, v in enumerate(report.frame_rrmse)]
        pio.write_trace_csv(args.frame_csv, rows, ["frame", "rrmse"])
    return 0


def cmd_sweep_reg(args) -> int:
    defaults = dict(SYSTEM_DEFAULTS)
    defaults.update(SOLVER_DEFAULTS)
    defaults.update({"lam_t_ratio": 1.0, "max_iterations_nn": 400})
    resolved = _resolve(args, defaults)
    lambdas = [float(v) for v in str(args.lambdas).split(",") if v.strip()]
    resolved["lambdas"] = lambdas
    resolved["method"] = args.method
    _echo("sweep-reg", resolved)
    meas = pio.read_measurements(args.measurements)
    resolved["frames"] = meas.frames
    _check_measurements(meas, resolved)
    ops = _operators(resolved)
    sigma = resolved["sigma"] if resolved["sigma"] is not None else meas.sigma

    if args.method == "nn":
        def solve(lam):
            cfg = FistaConfig(lam_nuc=lam, sigma=sigma,
                              max_iterations=resolved["max_iterations_nn"], tol=1e-6)
            return stirnn_reconstruct(meas, ops, cfg)[0]
    else:
        def solve(lam):
            cfg = _proxnf_config({**resolved, "lam_s": lam,
                                  "lam_t": lam * resolved["lam_t_ratio"]})
            return run(cfg, meas, ops)[0].render()

    result = morozov_sweep(solve, meas, ops, sigma, lambdas)
    pio.write_json(args.out, {
        "command": "sweep-reg",
        "method": args.method,
        "chosen_lambda": result.chosen,
        "bracketed": result.bracketed,
        "sigma": sigma,
        "table": list(result.table),
        "config": resolved,
    })
    return 0


_DISPATCH = {
    "phantom": cmd_phantom,
    "simulate": cmd_simulate,
    "embed": cmd_embed,
    "reconstruct-proxnf": cmd_reconstruct_proxnf,
    "reconstruct-nn": cmd_reconstruct_nn,
    "evaluate": cmd_evaluate,
    "sweep-reg": cmd_sweep_reg,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return _DISPATCH[args.command](args)
    except CLIUsageError as exc:
        print(json.dumps({"error": "usage", "message": str(exc)}), file=sys.stderr)
        return 2
    except pio.FileFormatError as exc:
        print(json.dumps({"error": "file-format", "message": str(exc),
                          "offset": exc.offset}), file=sys.stderr)
        return 1
    except Exception as exc:  # surfaced as machine-readable JSON per contract
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
