"""Command-line entry point: ``mapreg register|synth|evaluate|gradcheck|default-config``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import io
from .grid import LabelImage, TransformMap
from .pipeline import METHODS, PipelineError, RegistrationJob, evaluate_maps, run_job

log = logging.getLogger("mapreg")


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.replace(",", " ").split())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected numbers, got {text!r}") from exc


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.replace(",", " ").split())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected integers, got {text!r}") from exc


def _fit_iterations(iters, n):
    """Stretch a per-scale iteration tuple to ``n`` scales, keeping the finest count."""
    if iters is None or len(iters) == n:
        return iters
    return tuple([iters[0]] * (n - 1) + [iters[-1]])


def load_config(args) -> io.PipelineConfig:
    cfg = io.read_config(args.config) if args.config else io.PipelineConfig()
    if getattr(args, "scales", None):
        affine_iters = cfg.affine_iterations or cfg.affine().iters_per_scale
        cfg = replace(cfg, affine_scales=args.scales, vsvf_scales=args.scales,
                      affine_iterations=_fit_iterations(affine_iters, len(args.scales)),
                      vsvf_iterations=_fit_iterations(cfg.vsvf_iterations, len(args.scales)))
    if getattr(args, "lowres_factor", None) is not None:
        cfg = replace(cfg, lowres_factor=args.lowres_factor)
    if getattr(args, "steps", None) is not None:
        cfg = replace(cfg, vsvf_steps=args.steps)
    # validate the merged result
    io.parse_config(io.dump_config(cfg))
    return cfg


def cmd_register(args) -> int:
    if (args.labels_source is None) != (args.labels_target is None):
        raise SystemExit("--labels-source and --labels-target go together")
    job = RegistrationJob(source=Path(args.source), target=Path(args.target), out_dir=Path(args.out),
                          method=args.method,
                          labels_source=Path(args.labels_source) if args.labels_source else None,
                          labels_target=Path(args.labels_target) if args.labels_target else None,
                          config=load_config(args), record_timing=args.timing)
    report = run_job(job)
    print(report.to_json(), end="")
    return 0


def cmd_synth(args) -> int:
    from .synth import SynthSpec, make_pair

    spec = SynthSpec(dims=tuple(args.dims), seed=args.seed, amplitude=args.amplitude,
                     max_rotation_deg=args.rotation, scale_range=args.scale_range,
                     max_translation=args.translation, noise=args.noise)
    pair = make_pair(spec)
    out = Path(args.out)
    io.write_volume(pair.source, out / "source.vol")
    io.write_volume(pair.target, out / "target.vol")
    io.write_volume(pair.labels_source, out / "labels_source.vol")
    io.write_volume(pair.labels_target, out / "labels_target.vol")
    io.write_volume(pair.map, out / "true_map.vol")
    print(f"wrote synthetic pair (seed {args.seed}) to {out}")
    return 0


def cmd_evaluate(args) -> int:
    tmap = io.read_volume(args.map)
    tmap_ts = io.read_volume(args.map_ts) if args.map_ts else None
    for name, value in (("--map", tmap), ("--map-ts", tmap_ts)):
        if value is not None and not isinstance(value, TransformMap):
            raise SystemExit(f"{name} does not hold a map")
    lab0 = io.read_volume(args.labels_source) if args.labels_source else None
    lab1 = io.read_volume(args.labels_target) if args.labels_target else None
    for name, value in (("--labels-source", lab0), ("--labels-target", lab1)):
        if value is not None and not isinstance(value, LabelImage):
            raise SystemExit(f"{name} does not hold labels")
    report = evaluate_maps(tmap, tmap_ts, lab0, lab1)
    text = report.to_json()
    if args.out:
        io.atomic_write(Path(args.out), text.encode())
    print(text, end="")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all

    ok = True
    for check in run_all(args.seed):
        passed = check.passed(args.tol)
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {check.name}: {check.n_checked} coordinates, "
              f"max relative error {check.max_rel_error:.3e}")
    return 0 if ok else 1


def cmd_default_config(args) -> int:
    text = io.dump_config(io.PipelineConfig())
    if args.out:
        io.atomic_write(Path(args.out), text.encode())
    else:
        print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mapreg", description="Affine + vSVF image registration.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log optimizer progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("register", help="register a source volume to a target volume")
    p.add_argument("--method", choices=METHODS, default="avsm")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--labels-source")
    p.add_argument("--labels-target")
    p.add_argument("--config", help="key = value config file (see default-config)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="accepted for symmetry with synth; registration is deterministic")
    p.add_argument("--lowres-factor", type=float)
    p.add_argument("--steps", type=int, help="number of chained vSVF steps")
    p.add_argument("--scales", type=_float_list, help="e.g. '0.25 0.5 1.0'")
    p.add_argument("--timing", action="store_true",
                   help="record wall-clock seconds in metrics.json (makes it run-dependent)")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("synth", help="write a synthetic pair with known ground truth")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", type=_int_list, default=(64, 64, 64))
    p.add_argument("--amplitude", type=float, default=0.04)
    p.add_argument("--rotation", type=float, default=10.0, help="max rotation in degrees")
    p.add_argument("--scale-range", type=float, default=0.1)
    p.add_argument("--translation", type=float, default=0.05)
    p.add_argument("--noise", type=float, default=0.01)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("evaluate", help="metrics for an existing map")
    p.add_argument("--map", required=True)
    p.add_argument("--map-ts")
    p.add_argument("--labels-source")
    p.add_argument("--labels-target")
    p.add_argument("--out", help="write metrics JSON here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="compare loss gradients with finite differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-3)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("default-config", help="print or write the default config file")
    p.add_argument("--out")
    p.set_defaults(func=cmd_default_config)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (io.VolumeFormatError, io.ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
