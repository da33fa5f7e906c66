"""Synthetic scene generation: endmembers, abundances, mixing, and noise.

Three mixing models are supported. With M the (L, R) endmember matrix and
``a`` an abundance vector on the unit simplex:

* linear:        r = M a
* bilinear:      r = M a + sum_{i<j} d * a_i a_j * (m_i ⊙ m_j), d in [0, 1]
* post-nonlinear: r = (M a)^xi elementwise, xi > 0

``d`` and ``xi`` may also be per-band schedules (one value per band),
which is how band-varying nonlinearity experiments are generated. Additive
noise is white Gaussian, calibrated so that mean(x^2) / sigma_n^2 matches
the requested SNR, with the signal power taken over the entire noiseless
matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateConfigurationError
from .model import EndmemberMatrix, Scene, validate_simplex

__all__ = [
    "MixingModel",
    "NoiseSpec",
    "band_schedule",
    "sample_abundances",
    "mix",
    "add_noise",
    "generate_scene",
    "generate_synthetic_endmembers",
]


@dataclass(frozen=True)
class MixingModel:
    """Mixing-model variant plus its nonlinearity parameter.

    ``delta`` (bilinear) and ``xi`` (post-nonlinear) are scalars or
    per-band arrays; per-band arrays must have exactly one entry per band
    of the matrix they are applied to.
    """

    name: str
    delta: float | np.ndarray | None = None
    xi: float | np.ndarray | None = None

    def __post_init__(self):
        if self.name not in ("lmm", "gbm", "pnmm"):
            raise ValueError(f"unknown mixing model {self.name!r}")
        if self.name == "gbm":
            d = self._coerce("delta", self.delta)
            if np.any(d < 0) or np.any(d > 1):
                raise ValueError("gbm delta must lie in [0, 1]")
        elif self.name == "pnmm":
            x = self._coerce("xi", self.xi)
            if np.any(x <= 0):
                raise ValueError("pnmm xi must be > 0")

    def _coerce(self, field_name, value):
        if value is None:
            raise ValueError(f"{self.name} model requires {field_name}")
        value = np.asarray(value, dtype=float)
        if value.ndim not in (0, 1):
            raise ValueError(f"{field_name} must be a scalar or 1-D schedule")
        if value.ndim == 1:
            value = value.copy()
            value.setflags(write=False)
        object.__setattr__(self, field_name, value if value.ndim else float(value))
        return value

    @classmethod
    def lmm(cls):
        return cls(name="lmm")

    @classmethod
    def gbm(cls, delta):
        return cls(name="gbm", delta=delta)

    @classmethod
    def pnmm(cls, xi):
        return cls(name="pnmm", xi=xi)

    def _param_per_band(self, n_bands):
        """Expand the nonlinearity parameter for broadcasting over (L, N)."""
        value = self.delta if self.name == "gbm" else self.xi
        value = np.asarray(value, dtype=float)
        if value.ndim == 1 and value.shape[0] != n_bands:
            raise ValueError(
                f"per-band schedule has {value.shape[0]} entries, expected {n_bands}"
            )
        return value if value.ndim == 0 else value[:, None]

    def describe(self):
        """JSON-friendly description for scene metadata."""
        out = {"name": self.name}
        if self.name == "gbm":
            d = np.asarray(self.delta)
            out["delta"] = float(d) if d.ndim == 0 else [float(v) for v in d]
        elif self.name == "pnmm":
            x = np.asarray(self.xi)
            out["xi"] = float(x) if x.ndim == 0 else [float(v) for v in x]
        return out

    @classmethod
    def from_dict(cls, d):
        name = d.get("name")
        if name == "lmm":
            return cls.lmm()
        if name == "gbm":
            return cls.gbm(d["delta"])
        if name == "pnmm":
            return cls.pnmm(d["xi"])
        raise ValueError(f"unknown mixing model description {d!r}")


@dataclass(frozen=True)
class NoiseSpec:
    """Additive white Gaussian noise at a target SNR; snr_db=inf is noiseless."""

    snr_db: float
    seed: int = 0

    def __post_init__(self):
        if math.isnan(self.snr_db):
            raise ValueError("snr_db must not be NaN")

    @property
    def noiseless(self):
        return math.isinf(self.snr_db) and self.snr_db > 0


def band_schedule(n_bands, start, step, plateau_len):
    """Piecewise-constant per-band schedule: ceil(n_bands / plateau_len)
    plateaus of width plateau_len, holding start, start+step, ...

    band_schedule(420, 0.5, 0.05, 42) gives ten 42-band plateaus covering
    0.50 .. 0.95.
    """
    if plateau_len < 1 or n_bands < 1:
        raise ValueError("plateau_len and n_bands must be >= 1")
    n_plateaus = -(-n_bands // plateau_len)
    values = start + step * np.arange(n_plateaus)
    return np.repeat(values, plateau_len)[:n_bands]


def sample_abundances(r, n, seed):
    """(r, n) matrix with columns drawn uniformly from the unit simplex.

    Uses the flat-Dirichlet construction: normalize i.i.d. standard
    exponentials.
    """
    if r < 2:
        raise ValueError(f"need at least 2 endmembers, got {r}")
    if n < 1:
        raise ValueError(f"need at least 1 pixel, got {n}")
    rng = np.random.default_rng(seed)
    g = rng.standard_exponential((r, n))
    return g / g.sum(axis=0)


def _mix_matrix(m_data, a, model):
    """Mix an (R, N) abundance matrix into an (L, N) noiseless pixel matrix."""
    lin = m_data @ a
    if model.name == "lmm":
        return lin
    param = model._param_per_band(m_data.shape[0])
    if model.name == "gbm":
        # sum_{i<j} a_i a_j m_i⊙m_j == ((M a)^2 - (M^2)(a^2)) / 2 per band
        cross = 0.5 * (lin**2 - (m_data**2) @ (a**2))
        return lin + param * cross
    if np.any(lin < 0):
        xi = np.asarray(param)
        if np.any(xi != np.round(xi)):
            raise ValueError(
                "post-nonlinear mixing with a negative linear part and "
                "non-integer exponent is undefined"
            )
    return lin**param


def mix(m, a, model):
    """Mix one abundance vector into a length-L spectrum under ``model``."""
    a = np.asarray(a, dtype=float)
    if a.shape != (m.n_endmembers,):
        raise ValueError(
            f"abundance vector shape {a.shape} does not match R={m.n_endmembers}"
        )
    if not validate_simplex(a, 1e-6):
        raise ValueError("abundance vector is not on the unit simplex")
    return _mix_matrix(m.data, a[:, None], model)[:, 0]


def add_noise(x, spec):
    """Add white Gaussian noise with sigma_n^2 = mean(x^2) * 10^(-snr_db/10).

    Deterministic for a fixed seed; the underlying standard-normal draw
    depends only on the seed and the matrix shape, so two signals of the
    same shape see the same noise realization up to the power scaling.
    """
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        raise ValueError("cannot add noise to an empty matrix")
    if not np.all(np.isfinite(x)):
        raise ValueError("noise input has non-finite entries")
    if spec.noiseless:
        return x.copy()
    sigma2 = float(np.mean(x**2)) * 10.0 ** (-spec.snr_db / 10.0)
    rng = np.random.default_rng(spec.seed)
    return x + math.sqrt(sigma2) * rng.standard_normal(x.shape)


def generate_scene(m, n_pixels, model, noise, seed):
    """Draw abundances, mix them through ``model``, and add noise.

    ``seed`` drives the abundance draw; the noise stream is governed by
    ``noise.seed`` so the same noise realization can be replayed across
    mixing models.
    """
    a = sample_abundances(m.n_endmembers, n_pixels, seed)
    clean = _mix_matrix(m.data, a, model)
    pixels = add_noise(clean, noise)
    meta = {
        "model": model.describe(),
        "snr_db": None if noise.noiseless else float(noise.snr_db),
        "noise_seed": int(noise.seed),
        "abundance_seed": int(seed),
        "n_bands": int(m.n_bands),
        "n_endmembers": int(m.n_endmembers),
        "n_pixels": int(n_pixels),
    }
    return Scene(pixels=pixels, abundances=a, meta=meta)


def _random_spectrum(x, rng):
    """One smooth nonnegative spectrum: Gaussian bumps over a gentle baseline.

    Broad bumps and a substantial baseline keep the mean reflectance high,
    like the bright broadband minerals these stand in for; that level is
    what gives the bilinear cross-terms their realistic weight.
    """
    n_bumps = int(rng.integers(3, 9))
    centers = rng.uniform(0.0, 1.0, n_bumps)
    widths = rng.uniform(0.05, 0.30, n_bumps)
    amps = rng.uniform(0.3, 1.0, n_bumps)
    bumps = (amps * np.exp(-((x[:, None] - centers) ** 2) / (2.0 * widths**2))).sum(axis=1)
    b0 = rng.uniform(0.10, 0.35)
    slope = rng.uniform(-0.5 * b0, 0.3)
    wobble = rng.uniform(0.0, 0.3 * b0) * np.sin(
        2.0 * np.pi * rng.uniform(0.5, 1.5) * x + rng.uniform(0.0, 2.0 * np.pi)
    )
    baseline = b0 + slope * x + wobble
    spectrum = bumps + baseline
    peak = rng.uniform(0.5, 1.0)
    return spectrum * (peak / spectrum.max())


def generate_synthetic_endmembers(l, r, seed, min_angle_deg=5.0, max_attempts=100):
    """Generate r smooth random reflectance spectra on l bands.

    Spectra are sums of 3-8 Gaussian bumps plus a slowly varying baseline,
    rescaled to peak in [0.4, 1.0]; the whole set is regenerated until every
    pair is at least ``min_angle_deg`` apart in spectral angle.
    """
    if r < 2:
        raise ValueError(f"need at least 2 endmembers, got {r}")
    if l < r:
        raise ValueError(f"need at least as many bands as endmembers ({l} < {r})")
    rng = np.random.default_rng(seed)
    x = np.linspace(0.0, 1.0, l)
    cos_max = math.cos(math.radians(min_angle_deg))
    for _ in range(max_attempts):
        data = np.column_stack([_random_spectrum(x, rng) for _ in range(r)])
        if np.any(data < 0.0) or np.any(data > 1.0):
            continue
        unit = data / np.linalg.norm(data, axis=0)
        cosines = unit.T @ unit
        np.fill_diagonal(cosines, 0.0)
        if cosines.max() <= cos_max:
            return EndmemberMatrix(data=data)
    raise DegenerateConfigurationError(
        f"could not generate {r} spectra with pairwise angle >= "
        f"{min_angle_deg} degrees in {max_attempts} attempts"
    )
