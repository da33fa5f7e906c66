"""Kernel functions and Gram matrices over per-band feature vectors.

The points being compared are the rows of the endmember matrix: band l is
represented by the length-R vector of all endmember reflectances at that
band. The default kernel is Gaussian with bandwidth sigma2 = 0.3 and the
exp(-||x-y||^2 / (2*sigma2)) convention; the denominator convention is
configurable because different sources absorb the factor of 2 differently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["KernelSpec", "kernel_eval", "gram_matrix"]


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family and parameters.

    variant: "gaussian" (param sigma2 > 0) or "polynomial" (integer
    degree >= 1, offset >= 0). ``two_sigma_denom`` selects between the
    exp(-d2/(2*sigma2)) and exp(-d2/sigma2) Gaussian conventions.
    """

    variant: str
    sigma2: float | None = None
    degree: int | None = None
    offset: float | None = None
    two_sigma_denom: bool = True

    def __post_init__(self):
        if self.variant == "gaussian":
            if self.sigma2 is None or not self.sigma2 > 0:
                raise ValueError(f"gaussian kernel needs sigma2 > 0, got {self.sigma2}")
        elif self.variant == "polynomial":
            if self.degree is None or int(self.degree) < 1:
                raise ValueError(f"polynomial kernel needs degree >= 1, got {self.degree}")
            object.__setattr__(self, "degree", int(self.degree))
            offset = 0.0 if self.offset is None else float(self.offset)
            if offset < 0:
                raise ValueError(f"polynomial kernel needs offset >= 0, got {offset}")
            object.__setattr__(self, "offset", offset)
        else:
            raise ValueError(f"unknown kernel variant {self.variant!r}")

    @classmethod
    def gaussian(cls, sigma2=0.3, two_sigma_denom=True):
        return cls(variant="gaussian", sigma2=float(sigma2), two_sigma_denom=two_sigma_denom)

    @classmethod
    def polynomial(cls, degree, offset=0.0):
        return cls(variant="polynomial", degree=degree, offset=offset)

    @classmethod
    def linear(cls):
        """Plain inner product: polynomial of degree 1 with zero offset."""
        return cls(variant="polynomial", degree=1, offset=0.0)

    @property
    def _denom(self):
        return (2.0 if self.two_sigma_denom else 1.0) * self.sigma2

    def to_config(self):
        if self.variant == "gaussian":
            cfg = {"kernel": "gaussian", "sigma2": self.sigma2}
            if not self.two_sigma_denom:
                cfg["convention"] = "sigma2"
            return cfg
        return {"kernel": "polynomial", "degree": self.degree, "offset": self.offset}

    @classmethod
    def from_config(cls, cfg):
        kind = cfg.get("kernel")
        if kind == "gaussian":
            return cls.gaussian(
                cfg.get("sigma2", 0.3),
                two_sigma_denom=cfg.get("convention", "2sigma2") != "sigma2",
            )
        if kind == "polynomial":
            return cls.polynomial(cfg["degree"], cfg.get("offset", 0.0))
        raise ValueError(f"unknown kernel config {cfg!r}")


def kernel_eval(spec, x, y):
    """Evaluate kappa(x, y) for a single pair of vectors."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    if spec.variant == "gaussian":
        d = x - y
        return float(np.exp(-(d @ d) / spec._denom))
    return float((x @ y + spec.offset) ** spec.degree)


def gram_matrix(spec, rows):
    """Pairwise kernel matrix over the rows of an (L, d) array.

    Gaussian Gram matrices have an exactly unit diagonal; all variants are
    symmetric by construction.
    """
    rows = np.asarray(rows, dtype=float)
    if rows.ndim != 2:
        raise ValueError(f"expected a 2-D row matrix, got shape {rows.shape}")
    inner = rows @ rows.T
    inner = 0.5 * (inner + inner.T)
    if spec.variant == "gaussian":
        sq = np.diag(inner).copy()
        d2 = sq[:, None] + sq[None, :] - 2.0 * inner
        np.clip(d2, 0.0, None, out=d2)
        np.fill_diagonal(d2, 0.0)
        return np.exp(-d2 / spec._denom)
    return (inner + spec.offset) ** spec.degree
