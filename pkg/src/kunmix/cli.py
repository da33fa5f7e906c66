"""Command-line frontend.

Each subcommand is one pipeline stage (generation, selection, unmixing,
evaluation) so intermediate artifacts stay cacheable and inspectable; the
replicate-* commands are thin presets over evaluate. Progress goes to
stderr, machine-readable outputs only to files. Exit codes: 0 success,
1 runtime error, 2 configuration error. Every run writes its fully
resolved configuration next to its outputs, and output directories carry
an ``.incomplete`` marker until the command finishes.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluate as ev
from .bandselect import select_bands
from .errors import ParseError
from .kernels import KernelSpec
from .model import (
    BandSelection,
    load_endmembers_csv,
    load_scene,
    restrict_bands,
    restrict_scene,
    save_endmembers_csv,
    save_scene,
)
from .synth import (
    MixingModel,
    NoiseSpec,
    band_schedule,
    generate_scene,
    generate_synthetic_endmembers,
)
from .unmix import SkHypeConfig, unmix_scene

log = logging.getLogger("kunmix")

OUTPUT_ROOT_ENV = "KUNMIX_OUTPUT_ROOT"


class ConfigError(ValueError):
    """Bad command line or config file; maps to exit code 2."""


def _resolve_out(path):
    path = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


class _OutputDir:
    """Output directory with an .incomplete marker while work is running."""

    def __init__(self, path):
        self.path = _resolve_out(path)

    def __enter__(self):
        self.path.mkdir(parents=True, exist_ok=True)
        (self.path / ".incomplete").write_text("")
        return self.path

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            (self.path / ".incomplete").unlink(missing_ok=True)
        return False


def _kernel_from_args(args):
    if args.kernel == "gaussian":
        return KernelSpec.gaussian(args.sigma2)
    return KernelSpec.polynomial(args.degree, args.offset)


def _add_kernel_args(parser):
    parser.add_argument("--kernel", choices=["gaussian", "polynomial"], default="gaussian")
    parser.add_argument("--sigma2", type=float, default=0.3, help="Gaussian bandwidth")
    parser.add_argument("--degree", type=int, default=2, help="polynomial degree")
    parser.add_argument("--offset", type=float, default=0.0, help="polynomial offset")


def _schedule(arg, n_bands):
    try:
        start, step, plateau = arg.split(",")
        return band_schedule(n_bands, float(start), float(step), int(plateau))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad schedule {arg!r}, expected start,step,plateau_len") from exc


def _model_from_args(args, n_bands):
    if args.model == "lmm":
        return MixingModel.lmm()
    if args.model == "gbm":
        if args.delta_schedule:
            return MixingModel.gbm(_schedule(args.delta_schedule, n_bands))
        return MixingModel.gbm(args.delta)
    if args.xi_schedule:
        return MixingModel.pnmm(_schedule(args.xi_schedule, n_bands))
    return MixingModel.pnmm(args.xi)


def _cmd_gen_endmembers(args):
    m = generate_synthetic_endmembers(args.bands, args.endmembers, args.seed)
    out = _resolve_out(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_endmembers_csv(m, out)
    _write_json(out.with_suffix(".config.json"), {
        "command": "gen-endmembers", "bands": args.bands,
        "endmembers": args.endmembers, "seed": args.seed,
    })
    log.info("wrote %s (%dx%d)", out, m.n_bands, m.n_endmembers)
    return 0


def _cmd_gen_scene(args):
    m = load_endmembers_csv(args.endmembers)
    model = _model_from_args(args, m.n_bands)
    noise_seed = args.noise_seed if args.noise_seed is not None else args.seed + 1
    noise = NoiseSpec(float("inf") if args.noiseless else args.snr, noise_seed)
    scene = generate_scene(m, args.pixels, model, noise, args.seed)
    with _OutputDir(args.out) as out:
        save_scene(scene, out)
        _write_json(out / "resolved-config.json", {
            "command": "gen-scene", "endmembers": str(args.endmembers),
            "pixels": args.pixels, "seed": args.seed,
            "noise": {"snr_db": None if args.noiseless else args.snr, "seed": noise_seed},
            "model": model.describe(),
        })
    log.info("wrote scene %s (%d bands x %d pixels)", args.out, scene.n_bands, scene.n_pixels)
    return 0


def _cmd_select_bands(args):
    m = load_endmembers_csv(args.endmembers)
    kernel = _kernel_from_args(args)
    sel = select_bands(m, args.nb, kernel)
    out = _resolve_out(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    sel.to_json(out)
    _write_json(out.with_suffix(".config.json"), {
        "command": "select-bands", "endmembers": str(args.endmembers),
        "nb": args.nb, "kernel": kernel.to_config(),
    })
    log.info("selected %d bands, cluster error %.6g", sel.n_bands, sel.cluster_error)
    return 0


def _cmd_unmix(args):
    m = load_endmembers_csv(args.endmembers)
    scene = load_scene(args.scene)
    cfg = SkHypeConfig(
        kernel=_kernel_from_args(args), mu=args.mu, u_init=args.u_init,
        u_update=args.u_update,
    )
    selection = None
    if args.bands:
        selection = BandSelection.from_json(args.bands)
        scene_u = restrict_scene(scene, selection)
        m_u = restrict_bands(m, selection)
    else:
        scene_u, m_u = scene, m
    result = unmix_scene(scene_u, m_u, args.method, cfg, workers=args.workers)
    with _OutputDir(args.out) as out:
        np.savetxt(out / "abundances.csv", result.abundances, fmt="%.17g", delimiter=",")
        manifest = {
            "command": "unmix",
            "method": args.method,
            "scene": str(args.scene),
            "endmembers": str(args.endmembers),
            "bands": None if selection is None else [int(i) for i in selection.indices],
            "workers": args.workers,
            "skhype": cfg.to_dict(),
            "wall_time_s": result.wall_time,
            "fallback_pixels": (
                0 if result.fallback_mask is None else int(result.fallback_mask.sum())
            ),
        }
        if scene.abundances is not None:
            manifest["rmse"] = ev.rmse(scene.abundances, result.abundances)
        _write_json(out / "manifest.json", manifest)
        _write_json(out / "resolved-config.json", manifest)
    log.info("unmixed %d pixels with %s in %.2fs", scene.n_pixels, args.method, result.wall_time)
    return 0


def _apply_overrides(payload, overrides):
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = payload
        parts = key.split(".")
        for part in parts[:-1]:
            # missing intermediate tables are created; typos are still
            # caught by the unknown-key validation that follows
            nxt = node.setdefault(part, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"override path {key!r} crosses a non-table entry")
            node = nxt
        node[parts[-1]] = value
    return payload


def _log_row(row):
    if row.error:
        log.error("%s/%s failed: %s", row.scene, row.method, row.error)
    else:
        log.info(
            "%s/%-14s rmse=%.4f ret=%.1f (incl. selection %.1f)",
            row.scene, row.method, row.rmse, row.ret_unmix, row.ret_total,
        )


def _run_experiment_cmd(cfg, out_dir):
    with _OutputDir(out_dir) as out:
        cfg = ev.ExperimentConfig.from_dict({**cfg.to_dict(), "output_dir": str(out)})
        table = ev.run_experiment(cfg, log=_log_row)
    failures = [r for r in table.rows if r.error]
    if failures:
        log.error("%d of %d cells failed", len(failures), len(table.rows))
        return 1
    log.info("wrote %s", Path(out_dir) / "results.csv")
    return 0


def _cmd_evaluate(args):
    try:
        payload = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    payload = _apply_overrides(payload, args.set or [])
    try:
        cfg = ev.ExperimentConfig.from_dict(payload)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"bad experiment config: {exc}") from exc
    return _run_experiment_cmd(cfg, args.out)


def _cmd_replicate_table(args, builder):
    cfg = builder(seed=args.seed, n_pixels=args.pixels, n_bands=args.bands,
                  n_b_list=tuple(args.nb))
    return _run_experiment_cmd(cfg, args.out)


def _cmd_replicate_fig2(args):
    base = ev.table1_config(seed=args.seed, n_pixels=args.pixels, n_bands=args.bands)
    spec = base.scenes[0]  # the PNMM 5-endmember scene
    em, scene = spec.build()
    with _OutputDir(args.out) as out:
        _write_json(out / "resolved-config.json", {
            "command": "replicate-fig2", "seed": args.seed, "trials": args.trials,
            "nb": list(args.nb), "scene": spec.to_dict(), "kernel": base.kernel.to_config(),
        })
        for nb in args.nb:
            log.info("random-selection study at %d bands (%d trials)", nb, args.trials)
            study = ev.random_selection_study(
                scene, em, nb, args.trials, kernel=base.kernel,
                skhype=base.skhype, seed=args.seed,
            )
            _write_json(out / f"histogram-nb{nb}.json", study)
            with open(out / f"rmse-nb{nb}.csv", "w") as fh:
                fh.write("trial,rmse\n")
                fh.write(f"kkmbs,{study['kkmbs_rmse']:.6f}\n")
                for i, v in enumerate(study["random_rmses"]):
                    fh.write(f"{i},{v:.6f}\n")
            log.info("kkmbs rmse %.4f vs random median %.4f",
                     study["kkmbs_rmse"], float(np.median(study["random_rmses"])))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="kunmix",
        description="Nonlinear hyperspectral unmixing with kernel k-means band selection.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-endmembers", help="generate synthetic endmember spectra")
    p.add_argument("--bands", type=int, default=420)
    p.add_argument("--endmembers", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=_cmd_gen_endmembers)

    p = sub.add_parser("gen-scene", help="generate a mixed scene from endmembers")
    p.add_argument("--endmembers", required=True)
    p.add_argument("--model", choices=["lmm", "gbm", "pnmm"], required=True)
    p.add_argument("--delta", type=float, default=1.0)
    p.add_argument("--xi", type=float, default=0.7)
    p.add_argument("--delta-schedule", help="per-band gbm schedule: start,step,plateau_len")
    p.add_argument("--xi-schedule", help="per-band pnmm schedule: start,step,plateau_len")
    p.add_argument("--pixels", type=int, default=2000)
    p.add_argument("--snr", type=float, default=21.0)
    p.add_argument("--noiseless", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output scene directory")
    p.set_defaults(func=_cmd_gen_scene)

    p = sub.add_parser("select-bands", help="kernel k-means band selection")
    p.add_argument("--endmembers", required=True)
    p.add_argument("--nb", type=int, required=True)
    _add_kernel_args(p)
    p.add_argument("--out", required=True, help="output JSON path")
    p.set_defaults(func=_cmd_select_bands)

    p = sub.add_parser("unmix", help="unmix a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--endmembers", required=True)
    p.add_argument("--method", choices=["fcls", "skhype"], required=True)
    p.add_argument("--bands", help="band-selection JSON to restrict to")
    _add_kernel_args(p)
    p.add_argument("--mu", type=float, default=1e-2)
    p.add_argument("--u-init", type=float, default=0.5)
    p.add_argument("--u-update", choices=["reciprocal", "literal"], default="reciprocal")
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_unmix)

    p = sub.add_parser("evaluate", help="run an experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config entry (dotted paths allowed)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_evaluate)

    for name, builder in (("replicate-table1", ev.table1_config),
                          ("replicate-table2", ev.table2_config)):
        p = sub.add_parser(name, help=f"{name.replace('-', ' ')} benchmark preset")
        p.add_argument("--seed", type=int, default=42)
        p.add_argument("--pixels", type=int, default=2000)
        p.add_argument("--bands", type=int, default=420)
        p.add_argument("--nb", type=int, nargs="+", default=[10, 100, 300])
        p.add_argument("--out", required=True)
        p.set_defaults(func=lambda a, b=builder: _cmd_replicate_table(a, b))

    p = sub.add_parser("replicate-fig2", help="random vs kkmbs selection histograms")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--pixels", type=int, default=2000)
    p.add_argument("--bands", type=int, default=420)
    p.add_argument("--nb", type=int, nargs="+", default=[10, 100])
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_replicate_fig2)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except ParseError as exc:
        print(f"error: parse: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # single-line machine-parsable failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
