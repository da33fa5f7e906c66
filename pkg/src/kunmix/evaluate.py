"""Metrics and the experiment harness.

``run_experiment`` reproduces the benchmark protocol: generate synthetic
scenes, unmix each with a list of methods, and report per-cell RMSE plus
relative execution time (RET) normalized to the FCLS runtime on the same
scene. Reduced-band methods report both the unmix-only RET and the RET
including band-selection time. Timed sections always run single-worker so
the ratios are comparable.

RMSE convention: ||A - Ahat||_F / sqrt(N*R), the per-entry root mean
square error. A literal variant dividing by N*R is available behind a
flag; with 2000-pixel scenes it yields values three orders of magnitude
below the conventional scale, so the conventional form is the default and
the one whose magnitudes match the published operating points.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .bandselect import select_bands, select_bands_random
from .kernels import KernelSpec
from .model import restrict_bands, restrict_scene, save_endmembers_csv
from .synth import MixingModel, NoiseSpec, generate_scene, generate_synthetic_endmembers
from .unmix import SkHypeConfig, unmix_scene

__all__ = [
    "rmse",
    "relative_execution_time",
    "SceneSpec",
    "MethodSpec",
    "ExperimentConfig",
    "ResultRow",
    "ResultTable",
    "run_experiment",
    "random_selection_study",
    "table1_config",
    "table2_config",
]


def rmse(a_true, a_est, literal=False):
    """Frobenius-norm abundance error over a scene.

    Default: ||A - Ahat||_F / sqrt(N*R). ``literal=True`` divides by N*R
    instead.
    """
    a_true = np.asarray(a_true, dtype=float)
    a_est = np.asarray(a_est, dtype=float)
    if a_true.shape != a_est.shape:
        raise ValueError(f"shape mismatch: {a_true.shape} vs {a_est.shape}")
    norm = float(np.linalg.norm(a_true - a_est))
    denom = a_true.size if literal else np.sqrt(a_true.size)
    return norm / denom


def relative_execution_time(t_method, t_fcls):
    """RET: method wall time over FCLS wall time on the same scene."""
    if not t_fcls > 0:
        raise ValueError(f"FCLS reference time must be positive, got {t_fcls}")
    return float(t_method) / float(t_fcls)


@dataclass(frozen=True)
class SceneSpec:
    """Generation recipe for one synthetic scene."""

    name: str
    model: MixingModel
    n_endmembers: int
    n_bands: int = 420
    n_pixels: int = 2000
    snr_db: float = 21.0
    endmember_seed: int = 0
    abundance_seed: int = 0
    noise_seed: int = 0

    def to_dict(self):
        return {
            "name": self.name,
            "model": self.model.describe(),
            "n_endmembers": self.n_endmembers,
            "n_bands": self.n_bands,
            "n_pixels": self.n_pixels,
            "snr_db": self.snr_db,
            "endmember_seed": self.endmember_seed,
            "abundance_seed": self.abundance_seed,
            "noise_seed": self.noise_seed,
        }

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene spec keys: {sorted(unknown)}")
        kwargs = dict(d)
        kwargs["model"] = MixingModel.from_dict(kwargs["model"])
        return cls(**kwargs)

    def build(self):
        em = generate_synthetic_endmembers(
            self.n_bands, self.n_endmembers, self.endmember_seed
        )
        scene = generate_scene(
            em,
            self.n_pixels,
            self.model,
            NoiseSpec(self.snr_db, self.noise_seed),
            self.abundance_seed,
        )
        return em, scene


_METHOD_KINDS = ("fcls", "skhype", "skhype-reduced", "skhype-random")


@dataclass(frozen=True)
class MethodSpec:
    """One unmixing method cell: FCLS, full SK-Hype, SK-Hype on KKMBS-selected
    bands, or SK-Hype on randomly selected bands."""

    kind: str
    n_b: int | None = None
    selection_seed: int = 0

    def __post_init__(self):
        if self.kind not in _METHOD_KINDS:
            raise ValueError(f"unknown method kind {self.kind!r}")
        if self.kind in ("skhype-reduced", "skhype-random") and not self.n_b:
            raise ValueError(f"{self.kind} requires n_b")

    @property
    def label(self):
        if self.kind == "fcls":
            return "fcls"
        if self.kind == "skhype":
            return "skhype"
        tag = "rand" if self.kind == "skhype-random" else ""
        return f"skhype{tag}({self.n_b})"

    def to_dict(self):
        out = {"kind": self.kind}
        if self.n_b is not None:
            out["n_b"] = self.n_b
        if self.kind == "skhype-random":
            out["selection_seed"] = self.selection_seed
        return out

    @classmethod
    def from_dict(cls, d):
        known = {"kind", "n_b", "selection_seed"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown method spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class ExperimentConfig:
    scenes: tuple[SceneSpec, ...]
    methods: tuple[MethodSpec, ...]
    kernel: KernelSpec = field(default_factory=KernelSpec.gaussian)
    skhype: SkHypeConfig = field(default_factory=SkHypeConfig)
    output_dir: str | None = None
    save_abundances: bool = True
    rmse_literal: bool = False

    def __post_init__(self):
        object.__setattr__(self, "scenes", tuple(self.scenes))
        object.__setattr__(self, "methods", tuple(self.methods))
        if not self.scenes:
            raise ValueError("experiment needs at least one scene")
        if not self.methods:
            raise ValueError("experiment needs at least one method")
        if not any(m.kind == "fcls" for m in self.methods):
            raise ValueError("RET reporting requires the fcls method (the denominator)")
        # One SK-Hype kernel for everything: band selection and unmixing.
        object.__setattr__(self, "skhype", replace(self.skhype, kernel=self.kernel))

    def to_dict(self):
        return {
            "scenes": [s.to_dict() for s in self.scenes],
            "methods": [m.to_dict() for m in self.methods],
            "kernel": self.kernel.to_config(),
            "skhype": self.skhype.to_dict(),
            "output_dir": self.output_dir,
            "save_abundances": self.save_abundances,
            "rmse_literal": self.rmse_literal,
        }

    @classmethod
    def from_dict(cls, d):
        known = {
            "scenes", "methods", "kernel", "skhype", "output_dir",
            "save_abundances", "rmse_literal",
        }
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown experiment config keys: {sorted(unknown)}")
        kwargs = dict(d)
        kwargs["scenes"] = tuple(SceneSpec.from_dict(s) for s in d["scenes"])
        kwargs["methods"] = tuple(MethodSpec.from_dict(m) for m in d["methods"])
        if "kernel" in kwargs:
            kwargs["kernel"] = KernelSpec.from_config(kwargs["kernel"])
        if "skhype" in kwargs:
            kwargs["skhype"] = SkHypeConfig.from_dict(kwargs["skhype"])
        return cls(**kwargs)

    def config_hash(self):
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


@dataclass(frozen=True)
class ResultRow:
    scene: str
    method: str
    n_b: int | None
    rmse: float
    ret_unmix: float
    ret_total: float
    t_unmix: float
    t_select: float
    error: str | None = None

    def __post_init__(self):
        if self.error is None:
            if not self.rmse >= 0:
                raise ValueError(f"rmse must be >= 0, got {self.rmse}")
            if not (self.ret_unmix > 0 and self.ret_total > 0):
                raise ValueError("RET values must be positive")


@dataclass(frozen=True)
class ResultTable:
    rows: tuple[ResultRow, ...]

    _COLUMNS = (
        "scene", "method", "n_b", "rmse", "ret_unmix", "ret_total",
        "t_unmix", "t_select", "error",
    )

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self._COLUMNS)
            for row in self.rows:
                writer.writerow([
                    row.scene,
                    row.method,
                    "" if row.n_b is None else row.n_b,
                    f"{row.rmse:.6f}",
                    f"{row.ret_unmix:.4f}",
                    f"{row.ret_total:.4f}",
                    f"{row.t_unmix:.4f}",
                    f"{row.t_select:.4f}",
                    row.error or "",
                ])

    def find(self, scene, method):
        for row in self.rows:
            if row.scene == scene and row.method == method:
                return row
        raise KeyError(f"no row for scene={scene!r} method={method!r}")


def _run_cell(scene, em, spec, cfg):
    """Unmix one (scene, method) cell; returns (result, t_unmix, t_select, sel)."""
    if spec.kind == "fcls":
        res = unmix_scene(scene, em, "fcls", cfg.skhype, workers=1)
        return res, res.wall_time, 0.0, None
    if spec.kind == "skhype":
        res = unmix_scene(scene, em, "skhype", cfg.skhype, workers=1)
        return res, res.wall_time, 0.0, None
    if spec.kind == "skhype-reduced":
        t0 = time.perf_counter()
        sel = select_bands(em, spec.n_b, cfg.kernel)
        t_select = time.perf_counter() - t0
    else:  # skhype-random
        t0 = time.perf_counter()
        sel = select_bands_random(em.n_bands, spec.n_b, spec.selection_seed)
        t_select = time.perf_counter() - t0
    reduced_scene = restrict_scene(scene, sel)
    reduced_em = restrict_bands(em, sel)
    res = unmix_scene(reduced_scene, reduced_em, "skhype", cfg.skhype, workers=1)
    return res, res.wall_time, t_select, sel


def run_experiment(cfg, log=None):
    """Run every (scene x method) cell of the experiment.

    Writes results.csv, per-cell manifests, and abundance estimates under
    ``cfg.output_dir`` when set. Per-cell failures are recorded in the
    result row and do not abort the run. Returns the ResultTable.
    """
    out = Path(cfg.output_dir) if cfg.output_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    rows = []
    for sspec in cfg.scenes:
        em, scene = sspec.build()
        if out and cfg.save_abundances:
            save_endmembers_csv(em, out / f"{sspec.name}-endmembers.csv")
        # FCLS runs first: it is the RET denominator for every other method.
        ordered = sorted(cfg.methods, key=lambda msp: msp.kind != "fcls")
        t_fcls = None
        for mspec in ordered:
            cell = f"{sspec.name}/{mspec.label}"
            try:
                res, t_unmix, t_select, sel = _run_cell(scene, em, mspec, cfg)
                if mspec.kind == "fcls":
                    t_fcls = t_unmix
                value = rmse(scene.abundances, res.abundances, literal=cfg.rmse_literal)
                row = ResultRow(
                    scene=sspec.name,
                    method=mspec.label,
                    n_b=mspec.n_b,
                    rmse=value,
                    ret_unmix=relative_execution_time(t_unmix, t_fcls),
                    ret_total=relative_execution_time(t_unmix + t_select, t_fcls),
                    t_unmix=t_unmix,
                    t_select=t_select,
                )
                if out:
                    _write_cell(out, cell, cfg, sspec, mspec, row, res, sel)
            except Exception as exc:  # cell failures recorded, run continues
                row = ResultRow(
                    scene=sspec.name, method=mspec.label, n_b=mspec.n_b,
                    rmse=float("nan"), ret_unmix=float("nan"),
                    ret_total=float("nan"), t_unmix=float("nan"),
                    t_select=float("nan"), error=f"{type(exc).__name__}: {exc}",
                )
            rows.append(row)
            if log:
                log(row)
    table = ResultTable(rows=tuple(rows))
    if out:
        table.to_csv(out / "results.csv")
    return table


def _write_cell(out, cell, cfg, sspec, mspec, row, res, sel):
    cell_dir = out / cell.replace("/", "__")
    cell_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "scene": sspec.to_dict(),
        "method": mspec.to_dict(),
        "config_hash": cfg.config_hash(),
        "rmse": row.rmse,
        "ret_unmix": row.ret_unmix,
        "ret_total": row.ret_total,
        "wall_time_unmix_s": row.t_unmix,
        "wall_time_select_s": row.t_select,
        "fallback_pixels": (
            [] if res.fallback_mask is None
            else [int(j) for j in np.flatnonzero(res.fallback_mask)]
        ),
        "skhype": cfg.skhype.to_dict(),
    }
    (cell_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    if cfg.save_abundances:
        np.savetxt(cell_dir / "abundances.csv", res.abundances, fmt="%.17g", delimiter=",")
    if sel is not None:
        sel.to_json(cell_dir / "bands.json")


def random_selection_study(scene, em, n_b, trials, kernel=None, skhype=None, seed=0, bins=20):
    """Compare KKMBS band selection against random selections of the same size.

    Unmixes the scene once per random selection plus once for the KKMBS
    selection; returns the per-trial RMSEs, the KKMBS RMSE, and histogram
    data ready for plotting.
    """
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    kernel = kernel or KernelSpec.gaussian()
    skhype = replace(skhype or SkHypeConfig(), kernel=kernel)

    def unmix_with(sel):
        res = unmix_scene(
            restrict_scene(scene, sel), restrict_bands(em, sel), "skhype", skhype, workers=1
        )
        return rmse(scene.abundances, res.abundances)

    kkmbs_sel = select_bands(em, n_b, kernel)
    kkmbs_rmse = unmix_with(kkmbs_sel)
    trial_seeds = np.random.SeedSequence(seed).generate_state(trials, dtype=np.uint64)
    random_rmses = [
        unmix_with(select_bands_random(em.n_bands, n_b, int(s))) for s in trial_seeds
    ]
    counts, bin_edges = np.histogram(random_rmses, bins=bins)
    return {
        "n_b": int(n_b),
        "trials": int(trials),
        "kkmbs_rmse": float(kkmbs_rmse),
        "kkmbs_bands": [int(i) for i in kkmbs_sel.indices],
        "random_rmses": [float(v) for v in random_rmses],
        "bin_edges": [float(v) for v in bin_edges],
        "counts": [int(v) for v in counts],
    }


def _derive_scene_seeds(master_seed, n_scenes):
    state = np.random.SeedSequence(master_seed).generate_state(3 * n_scenes, dtype=np.uint64)
    return [tuple(int(v) for v in state[3 * i : 3 * i + 3]) for i in range(n_scenes)]


def _standard_methods(n_b_list):
    methods = [MethodSpec(kind="fcls"), MethodSpec(kind="skhype")]
    methods += [MethodSpec(kind="skhype-reduced", n_b=nb) for nb in n_b_list]
    return tuple(methods)


def table1_config(seed=42, output_dir=None, n_pixels=2000, n_bands=420,
                  n_b_list=(10, 100, 300), snr_db=21.0, **kwargs):
    """Scenes and methods for the fixed-nonlinearity benchmark: PNMM
    (xi=0.7) and GBM (delta=1) at 5 and 8 endmembers, 21 dB SNR."""
    recipes = [
        ("pnmm-r5", MixingModel.pnmm(0.7), 5),
        ("pnmm-r8", MixingModel.pnmm(0.7), 8),
        ("gbm-r5", MixingModel.gbm(1.0), 5),
        ("gbm-r8", MixingModel.gbm(1.0), 8),
    ]
    seeds = _derive_scene_seeds(seed, len(recipes))
    scenes = tuple(
        SceneSpec(
            name=name, model=model, n_endmembers=r, n_bands=n_bands,
            n_pixels=n_pixels, snr_db=snr_db,
            endmember_seed=s[0], abundance_seed=s[1], noise_seed=s[2],
        )
        for (name, model, r), s in zip(recipes, seeds)
    )
    return ExperimentConfig(
        scenes=scenes, methods=_standard_methods(n_b_list),
        output_dir=output_dir, **kwargs,
    )


def table2_config(seed=42, output_dir=None, n_pixels=2000, n_bands=420,
                  n_b_list=(10, 100, 300), snr_db=21.0, **kwargs):
    """Band-varying nonlinearity benchmark: delta sweeps 0.5..1 in steps of
    0.05 and xi sweeps 0.5..0.9 in steps of 0.04, constant over one-tenth
    of the spectrum at a time (42-band plateaus at 420 bands)."""
    from .synth import band_schedule

    plateau = max(1, n_bands // 10)
    delta = band_schedule(n_bands, 0.5, 0.05, plateau)
    xi = band_schedule(n_bands, 0.5, 0.04, plateau)
    recipes = [
        ("pnmm-sweep-r5", MixingModel.pnmm(xi), 5),
        ("pnmm-sweep-r8", MixingModel.pnmm(xi), 8),
        ("gbm-sweep-r5", MixingModel.gbm(delta), 5),
        ("gbm-sweep-r8", MixingModel.gbm(delta), 8),
    ]
    seeds = _derive_scene_seeds(seed + 1, len(recipes))
    scenes = tuple(
        SceneSpec(
            name=name, model=model, n_endmembers=r, n_bands=n_bands,
            n_pixels=n_pixels, snr_db=snr_db,
            endmember_seed=s[0], abundance_seed=s[1], noise_seed=s[2],
        )
        for (name, model, r), s in zip(recipes, seeds)
    )
    return ExperimentConfig(
        scenes=scenes, methods=_standard_methods(n_b_list),
        output_dir=output_dir, **kwargs,
    )
