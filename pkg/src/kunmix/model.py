"""Core data types for spectra, scenes, band selections, and unmixing results.

Conventions used throughout the package:

* an endmember matrix has shape (L, R): one row per spectral band, one
  column per material;
* a scene stores pixels as an (L, N) matrix and ground-truth abundances,
  when available, as an (R, N) matrix whose columns live on the unit
  simplex;
* all container types are immutable after construction (arrays are copied
  in and marked read-only), so they can be shared freely across workers.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidSelectionError, ParseError

__all__ = [
    "SIMPLEX_TOL_EXACT",
    "SIMPLEX_TOL_ESTIMATED",
    "EndmemberMatrix",
    "Scene",
    "BandSelection",
    "UnmixResult",
    "validate_simplex",
    "check_abundance_matrix",
    "load_endmembers_csv",
    "save_endmembers_csv",
    "load_scene",
    "save_scene",
    "restrict_bands",
    "restrict_scene",
]

# Constructed ground truth must sit on the simplex almost exactly; estimated
# abundances come out of a QP solver and only satisfy the constraints to the
# solver's KKT accuracy.
SIMPLEX_TOL_EXACT = 1e-9
SIMPLEX_TOL_ESTIMATED = 1e-6

# 17 significant digits round-trip any float64 exactly through decimal text.
_CSV_FMT = "%.17g"


def _frozen_array(x, dtype=float, ndim=None, name="array"):
    arr = np.array(x, dtype=dtype)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


def validate_simplex(v, tol):
    """True iff ``v`` is on the unit simplex: min(v) >= -tol and |sum(v)-1| <= tol.

    Raises ValueError on non-finite input.
    """
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError("simplex check received non-finite entries")
    return bool(v.min() >= -tol and abs(v.sum() - 1.0) <= tol)


def check_abundance_matrix(a, tol):
    """Validate every column of an (R, N) abundance matrix; raises on failure."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise ValueError(f"abundance matrix must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("abundance matrix has non-finite entries")
    col_min = a.min(axis=0)
    col_sum = a.sum(axis=0)
    bad = np.flatnonzero((col_min < -tol) | (np.abs(col_sum - 1.0) > tol))
    if bad.size:
        j = int(bad[0])
        raise ValueError(
            f"abundance column {j} violates simplex constraints "
            f"(min={col_min[j]:.3e}, sum={col_sum[j]:.17g}, tol={tol:g})"
        )


@dataclass(frozen=True)
class EndmemberMatrix:
    """(L, R) matrix of reflectance spectra, one column per material.

    ``wavelengths``, when present, is a strictly increasing length-L vector
    in micrometers; ``names`` labels the R columns.
    """

    data: np.ndarray
    wavelengths: np.ndarray | None = None
    names: tuple[str, ...] | None = None

    def __post_init__(self):
        data = _frozen_array(self.data, ndim=2, name="endmember matrix")
        object.__setattr__(self, "data", data)
        l, r = data.shape
        if l < 2 or r < 2:
            raise ValueError(f"need at least 2 bands and 2 endmembers, got {l}x{r}")
        if l < r:
            raise ValueError(f"more endmembers ({r}) than bands ({l})")
        if not np.all(np.isfinite(data)):
            raise ValueError("endmember matrix has non-finite entries")
        if self.wavelengths is not None:
            w = _frozen_array(self.wavelengths, ndim=1, name="wavelengths")
            if w.shape[0] != l:
                raise ValueError(f"wavelengths length {w.shape[0]} != bands {l}")
            if not np.all(np.diff(w) > 0):
                raise ValueError("wavelengths must be strictly increasing")
            object.__setattr__(self, "wavelengths", w)
        if self.names is not None:
            names = tuple(str(s) for s in self.names)
            if len(names) != r:
                raise ValueError(f"{len(names)} column names for {r} endmembers")
            object.__setattr__(self, "names", names)

    @property
    def n_bands(self):
        return self.data.shape[0]

    @property
    def n_endmembers(self):
        return self.data.shape[1]


@dataclass(frozen=True)
class Scene:
    """A set of N observed pixels with optional ground-truth abundances.

    ``meta`` records how the scene was generated (model name and parameters,
    SNR, RNG seeds); it is persisted verbatim to meta.json.
    """

    pixels: np.ndarray
    abundances: np.ndarray | None = None
    meta: dict | None = None

    def __post_init__(self):
        pixels = _frozen_array(self.pixels, ndim=2, name="pixels")
        if not np.all(np.isfinite(pixels)):
            raise ValueError("scene pixels have non-finite entries")
        object.__setattr__(self, "pixels", pixels)
        if self.abundances is not None:
            a = _frozen_array(self.abundances, ndim=2, name="abundances")
            if a.shape[1] != pixels.shape[1]:
                raise ValueError(
                    f"abundances have {a.shape[1]} columns, pixels have {pixels.shape[1]}"
                )
            check_abundance_matrix(a, SIMPLEX_TOL_EXACT)
            object.__setattr__(self, "abundances", a)
        object.__setattr__(self, "meta", dict(self.meta) if self.meta else {})

    @property
    def n_bands(self):
        return self.pixels.shape[0]

    @property
    def n_pixels(self):
        return self.pixels.shape[1]


@dataclass(frozen=True)
class BandSelection:
    """An ordered subset of band indices, with clustering diagnostics.

    Selections produced by kernel-k-means carry the per-band cluster
    assignment and the final clustering error; random selections leave both
    as None.
    """

    indices: np.ndarray
    clusters: np.ndarray | None = None
    cluster_error: float | None = None
    extra: dict | None = None

    def __post_init__(self):
        idx = _frozen_array(self.indices, dtype=np.intp, ndim=1, name="indices")
        if idx.size == 0:
            raise ValueError("band selection must contain at least one index")
        if np.any(idx < 0):
            raise ValueError("band indices must be nonnegative")
        if np.any(np.diff(idx) <= 0):
            raise ValueError("band indices must be strictly increasing")
        object.__setattr__(self, "indices", idx)
        if self.clusters is not None:
            cl = _frozen_array(self.clusters, dtype=np.intp, ndim=1, name="clusters")
            object.__setattr__(self, "clusters", cl)
            if self.cluster_error is None:
                raise ValueError("cluster assignment given without cluster_error")
        object.__setattr__(self, "extra", dict(self.extra) if self.extra else {})

    @property
    def n_bands(self):
        return self.indices.shape[0]

    def to_json(self, path):
        payload = {
            "indices": [int(i) for i in self.indices],
            "clusters": None if self.clusters is None else [int(c) for c in self.clusters],
            "cluster_error": self.cluster_error,
        }
        payload.update(self.extra)
        Path(path).write_text(json.dumps(payload, indent=2) + "\n")

    @classmethod
    def from_json(cls, path):
        try:
            payload = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid JSON: {exc}") from exc
        known = {"indices", "clusters", "cluster_error"}
        extra = {k: v for k, v in payload.items() if k not in known}
        return cls(
            indices=np.asarray(payload["indices"], dtype=np.intp),
            clusters=None if payload.get("clusters") is None else np.asarray(payload["clusters"], dtype=np.intp),
            cluster_error=payload.get("cluster_error"),
            extra=extra,
        )


@dataclass(frozen=True)
class UnmixResult:
    """Estimated abundances for a scene plus per-pixel diagnostics.

    ``u_values`` holds the final linear-mixing weight per pixel (NaN for
    purely linear methods and for fallback pixels); ``fallback_mask`` marks
    pixels where the nonlinear solve degenerated and the linear solution was
    substituted.
    """

    abundances: np.ndarray
    u_values: np.ndarray
    iterations: np.ndarray
    wall_time: float
    method: str = ""
    fallback_mask: np.ndarray | None = None

    def __post_init__(self):
        a = _frozen_array(self.abundances, ndim=2, name="abundances")
        object.__setattr__(self, "abundances", a)
        u = _frozen_array(self.u_values, ndim=1, name="u_values")
        if u.shape[0] != a.shape[1]:
            raise ValueError("u_values length must match pixel count")
        object.__setattr__(self, "u_values", u)
        it = _frozen_array(self.iterations, dtype=np.intp, ndim=1, name="iterations")
        if it.shape[0] != a.shape[1]:
            raise ValueError("iterations length must match pixel count")
        object.__setattr__(self, "iterations", it)
        if self.fallback_mask is not None:
            fm = _frozen_array(self.fallback_mask, dtype=bool, ndim=1, name="fallback_mask")
            if fm.shape[0] != a.shape[1]:
                raise ValueError("fallback_mask length must match pixel count")
            object.__setattr__(self, "fallback_mask", fm)

    @property
    def n_pixels(self):
        return self.abundances.shape[1]

    def validate(self, tol=SIMPLEX_TOL_ESTIMATED, u_bounds=None):
        """Check estimated-abundance simplex constraints and u bounds; raises."""
        check_abundance_matrix(self.abundances, tol)
        if u_bounds is not None:
            u = self.u_values[np.isfinite(self.u_values)]
            if u.size and (u.min() < u_bounds[0] or u.max() > u_bounds[1]):
                raise ValueError(
                    f"u values outside [{u_bounds[0]}, {u_bounds[1]}]: "
                    f"range [{u.min()}, {u.max()}]"
                )


def _read_csv_grid(path):
    """Read a CSV file into a list of string rows, enforcing rectangularity."""
    rows = []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue  # blank line
            if rows and len(row) != len(rows[0]):
                raise ParseError(
                    f"{path}: row {i + 1} has {len(row)} cells, expected {len(rows[0])}"
                )
            rows.append([cell.strip() for cell in row])
    if not rows:
        raise ParseError(f"{path}: file is empty")
    return rows


def _parse_float(cell, path, row, col):
    try:
        return float(cell)
    except ValueError:
        raise ParseError(
            f"{path}: non-numeric cell {cell!r} at row {row}, column {col}"
        ) from None


def load_endmembers_csv(path):
    """Load an endmember matrix from CSV.

    Two layouts are accepted: a headerless L x R numeric grid, or a grid with
    header row ``wavelength,name_1,...,name_R`` whose first column carries
    wavelengths in micrometers.
    """
    rows = _read_csv_grid(path)

    def _is_number(cell):
        try:
            float(cell)
            return True
        except ValueError:
            return False

    has_header = not all(_is_number(c) for c in rows[0])
    names = None
    wavelengths = None
    if has_header:
        header = rows[0]
        if header[0].lower() != "wavelength":
            raise ParseError(
                f"{path}: header row must start with 'wavelength', got {header[0]!r}"
            )
        names = tuple(header[1:])
        body = rows[1:]
        if not body:
            raise ParseError(f"{path}: no data rows after header")
        wavelengths = [
            _parse_float(r[0], path, i + 2, 1) for i, r in enumerate(body)
        ]
        data = [
            [_parse_float(c, path, i + 2, j + 2) for j, c in enumerate(r[1:])]
            for i, r in enumerate(body)
        ]
    else:
        data = [
            [_parse_float(c, path, i + 1, j + 1) for j, c in enumerate(r)]
            for i, r in enumerate(rows)
        ]
    try:
        return EndmemberMatrix(
            data=np.asarray(data, dtype=float),
            wavelengths=None if wavelengths is None else np.asarray(wavelengths),
            names=names,
        )
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def save_endmembers_csv(m, path):
    """Write an endmember matrix to CSV (header form iff wavelengths present)."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if m.wavelengths is not None:
            names = m.names or tuple(f"em_{j + 1}" for j in range(m.n_endmembers))
            writer.writerow(("wavelength",) + names)
            for i in range(m.n_bands):
                writer.writerow(
                    [_CSV_FMT % m.wavelengths[i]] + [_CSV_FMT % v for v in m.data[i]]
                )
        else:
            for i in range(m.n_bands):
                writer.writerow([_CSV_FMT % v for v in m.data[i]])


def save_scene(scene, directory):
    """Persist a scene as a directory: pixels.csv, abundances.csv, meta.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.savetxt(directory / "pixels.csv", scene.pixels, fmt=_CSV_FMT, delimiter=",")
    if scene.abundances is not None:
        np.savetxt(
            directory / "abundances.csv", scene.abundances, fmt=_CSV_FMT, delimiter=","
        )
    (directory / "meta.json").write_text(json.dumps(scene.meta, indent=2) + "\n")


def load_scene(directory):
    directory = Path(directory)
    pixels_path = directory / "pixels.csv"
    if not pixels_path.exists():
        raise ParseError(f"{directory}: missing pixels.csv")
    try:
        pixels = np.loadtxt(pixels_path, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise ParseError(f"{pixels_path}: {exc}") from exc
    abundances = None
    ab_path = directory / "abundances.csv"
    if ab_path.exists():
        try:
            abundances = np.loadtxt(ab_path, delimiter=",", ndmin=2)
        except ValueError as exc:
            raise ParseError(f"{ab_path}: {exc}") from exc
    meta = {}
    meta_path = directory / "meta.json"
    if meta_path.exists():
        try:
            meta = json.loads(meta_path.read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(f"{meta_path}: invalid JSON: {exc}") from exc
    return Scene(pixels=pixels, abundances=abundances, meta=meta)


def _check_selection(indices, n_bands, what):
    if indices[-1] >= n_bands:
        raise InvalidSelectionError(
            f"band index {int(indices[-1])} out of range for {what} with {n_bands} bands"
        )


def restrict_bands(m, sel):
    """Row-subset an endmember matrix to the selected bands, in index order."""
    _check_selection(sel.indices, m.n_bands, "endmember matrix")
    return EndmemberMatrix(
        data=m.data[sel.indices, :],
        wavelengths=None if m.wavelengths is None else m.wavelengths[sel.indices],
        names=m.names,
    )


def restrict_scene(s, sel):
    """Row-subset scene pixels to the selected bands; abundances unchanged."""
    _check_selection(sel.indices, s.n_bands, "scene")
    meta = dict(s.meta)
    meta["restricted_to_bands"] = [int(i) for i in sel.indices]
    return Scene(pixels=s.pixels[sel.indices, :], abundances=s.abundances, meta=meta)
