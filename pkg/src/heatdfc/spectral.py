"""Cosine-series expansion and heat-kernel smoothing on the unit interval.

A signal sampled on ``t_j = j / (T - 1)`` is expanded in the basis
``psi_0 = 1``, ``psi_l(t) = sqrt(2) cos(l pi t)``. Heat diffusion for time
``s`` multiplies coefficient ``l`` by ``exp(-l^2 pi^2 s)``. Because the basis
is even about t = 1, smoothing on the mirrored circle of circumference 2
reduces to smoothing on [0, 1].
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import linalg
from scipy.optimize import brentq

from heatdfc.errors import RankDeficient
from heatdfc.signal import time_grid

SQRT2 = math.sqrt(2.0)
# relative threshold on the diagonal of R below which the fit is refused
RANK_TOL = 1e-10


def _check_domain(t):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0.0) or np.any(t > 2.0) or not np.all(np.isfinite(t)):
        raise ValueError("cosine basis is defined on [0, 2] only")
    return t


def basis_eval(l, t):
    """Evaluate ``psi_l(t)``; points in [1, 2] use ``psi_l(2 - t)``."""
    if l < 0:
        raise ValueError("basis degree must be non-negative")
    t = _check_domain(t)
    t = np.where(t > 1.0, 2.0 - t, t)
    if l == 0:
        out = np.ones_like(t)
    else:
        out = SQRT2 * np.cos(l * np.pi * t)
    return out if out.ndim else float(out)


def basis_matrix(t, degree) -> np.ndarray:
    """Design matrix with ``out[j, l] = psi_l(t_j)`` for ``l = 0..degree``."""
    t = _check_domain(np.atleast_1d(t))
    t = np.where(t > 1.0, 2.0 - t, t)
    ls = np.arange(degree + 1)
    out = SQRT2 * np.cos(np.pi * np.outer(t, ls))
    out[:, 0] = 1.0
    return out


def heat_weight(l, s):
    """Spectral weight ``exp(-l^2 pi^2 s)`` of degree ``l`` at bandwidth ``s``."""
    l = np.asarray(l, dtype=float)
    if np.any(l < 0) or s < 0:
        raise ValueError("degree and bandwidth must be non-negative")
    out = np.exp(-(l ** 2) * np.pi ** 2 * s)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class SpectralModel:
    """Cosine coefficients of one or more signals.

    Attributes
    ----------
    coefficients : ndarray of shape (L + 1,) or (L + 1, n_signals)
    degree : int
        Highest basis index ``L``.
    bandwidth : float
        Diffusion time already applied to the coefficients.
    """

    coefficients: np.ndarray
    degree: int
    bandwidth: float = 0.0

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError("degree must be >= 0")
        if self.bandwidth < 0:
            raise ValueError("bandwidth must be >= 0")
        if np.shape(self.coefficients)[0] != self.degree + 1:
            raise ValueError("need one coefficient per basis degree")

    def smoothed(self, s) -> "SpectralModel":
        """Diffuse the coefficients for an additional time ``s``."""
        w = heat_weight(np.arange(self.degree + 1), s)
        coef = np.asarray(self.coefficients)
        coef = coef * (w if coef.ndim == 1 else w[:, None])
        return replace(self, coefficients=coef, bandwidth=self.bandwidth + s)

    def energy(self, s=0.0) -> float:
        w = heat_weight(np.arange(self.degree + 1), s)
        coef = np.asarray(self.coefficients)
        coef = coef * (w if coef.ndim == 1 else w[:, None])
        return float(np.sum(coef ** 2))


@lru_cache(maxsize=32)
def _qr_factors(n_time, degree):
    design = basis_matrix(time_grid(n_time), degree)
    q, r = linalg.qr(design, mode="economic")
    diag = np.abs(np.diag(r))
    if diag.min() <= RANK_TOL * diag.max():
        raise RankDeficient(
            f"cosine design matrix of degree {degree} on {n_time} points is singular"
        )
    q.setflags(write=False)
    r.setflags(write=False)
    return q, r


def default_degree(n_time: int) -> int:
    """Expansion degree matching the number of samples (indices 0..T-1)."""
    return n_time - 1


def fit_coefficients(samples, degree=None) -> SpectralModel:
    """Least-squares cosine coefficients of samples on the grid ``j/(T-1)``.

    Parameters
    ----------
    samples : array_like of shape (T,) or (T, n_signals)
    degree : int, optional
        Defaults to ``T - 1``, which interpolates the samples exactly.

    Raises
    ------
    RankDeficient
        If ``degree + 1 > T`` or the design matrix is numerically singular.
    """
    y = np.asarray(samples, dtype=float)
    n_time = y.shape[0]
    if degree is None:
        degree = default_degree(n_time)
    if degree < 0:
        raise ValueError("degree must be >= 0")
    if degree + 1 > n_time:
        raise RankDeficient(f"degree {degree} needs at least {degree + 1} samples")
    q, r = _qr_factors(n_time, degree)
    coef = linalg.solve_triangular(r, q.T @ y)
    return SpectralModel(coef, degree)


def smooth(model: SpectralModel, s, t) -> np.ndarray:
    """Weighted Fourier series ``sum_l exp(-l^2 pi^2 s) c_l psi_l(t)``."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError("evaluation points must lie in [0, 1]")
    w = heat_weight(np.arange(model.degree + 1), s)
    coef = np.asarray(model.coefficients)
    coef = coef * (w if coef.ndim == 1 else w[:, None])
    return basis_matrix(t, model.degree) @ coef


@lru_cache(maxsize=32)
def smoothing_matrix(n_time, s, degree=None) -> np.ndarray:
    """Linear operator taking T samples to their heat-smoothed values on the grid.

    Equivalent to ``smooth(fit_coefficients(y, degree), s, grid)`` for every
    column ``y``; cached so that many signals share one factorization.
    """
    if degree is None:
        degree = default_degree(n_time)
    q, r = _qr_factors(n_time, degree)
    fit = linalg.solve_triangular(r, q.T)  # coefficients = fit @ samples
    w = heat_weight(np.arange(degree + 1), s)
    out = basis_matrix(time_grid(n_time), degree) @ (w[:, None] * fit)
    out.setflags(write=False)
    return out


def kernel_eval(s, degree, t, t_prime):
    """Truncated heat kernel ``sum_{l<=L} exp(-l^2 pi^2 s) psi_l(t) psi_l(t')``.

    ``t`` and ``t_prime`` broadcast against each other; both may lie anywhere
    on the circle [0, 2].
    """
    tb, tpb = np.broadcast_arrays(np.asarray(t, float), np.asarray(t_prime, float))
    a = basis_matrix(tb.ravel(), degree)
    b = basis_matrix(tpb.ravel(), degree)
    w = heat_weight(np.arange(degree + 1), s)
    out = np.einsum("ij,j,ij->i", a, w, b).reshape(tb.shape)
    return out if out.ndim else float(out)


def kernel_matrix(s, degree, t, t_prime) -> np.ndarray:
    """Kernel values on the outer product grid ``len(t) x len(t_prime)``."""
    w = heat_weight(np.arange(degree + 1), s)
    return (basis_matrix(t, degree) * w) @ basis_matrix(t_prime, degree).T


# --------------------------------------------------------------------------
# Bandwidth and FWHM
# --------------------------------------------------------------------------

def fwhm_to_bandwidth(fwhm_tr, n_time) -> float:
    """Diffusion time whose kernel FWHM spans ``fwhm_tr`` of ``n_time`` samples.

    Uses the small-``s`` Gaussian limit, where the kernel has variance ``2s``
    and so ``FWHM = 2 sqrt(4 ln2 s)`` in unit-interval coordinates.
    """
    if fwhm_tr <= 0:
        raise ValueError("fwhm must be positive")
    if n_time < 2:
        raise ValueError("n_time must be >= 2")
    return (fwhm_tr / n_time) ** 2 / (16.0 * math.log(2.0))


def bandwidth_to_fwhm(s, n_time) -> float:
    """Inverse of :func:`fwhm_to_bandwidth`, in TR units."""
    return 4.0 * math.sqrt(math.log(2.0) * s) * n_time


def measure_fwhm(s, degree, t0=0.5) -> float:
    """Numerically measured full width at half maximum of ``K_s(t0, .)``.

    Returned in unit-interval coordinates. ``t0`` should sit far enough from
    the reflection points that the two half-maximum crossings are resolved.
    """
    peak = kernel_eval(s, degree, t0, t0)
    half = 0.5 * peak

    def f(tp):
        return kernel_eval(s, degree, t0, tp) - half

    # walk outward on a fine grid to bracket each crossing
    step = 1e-4
    offsets = np.arange(step, 1.0, step)
    right = t0 + offsets
    right = right[right <= 2.0]
    vals = kernel_eval(s, degree, t0, right) - half
    idx = np.argmax(vals < 0)
    if vals[idx] >= 0:
        raise ValueError("kernel never drops below half maximum; bandwidth too large")
    hi = brentq(f, right[idx - 1] if idx else t0, right[idx], xtol=1e-12)
    left = t0 - offsets
    left = np.where(left < 0, -left, left)  # reflect through 0 onto the circle
    vals = kernel_eval(s, degree, t0, left) - half
    idx = np.argmax(vals < 0)
    lo_pt = brentq(
        f,
        left[idx],
        left[idx - 1] if idx else t0,
        xtol=1e-12,
    )
    return hi - lo_pt


@dataclass(frozen=True)
class HeatKernelParams:
    """Bandwidth, degree and the matching FWHM for a series of ``n_time``."""

    bandwidth: float
    degree: int
    n_time: int

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ValueError("heat kernel bandwidth must be positive")
        if self.degree < 0:
            raise ValueError("degree must be >= 0")

    @property
    def fwhm_tr(self) -> float:
        return bandwidth_to_fwhm(self.bandwidth, self.n_time)

    @classmethod
    def from_fwhm(cls, fwhm_tr, n_time, degree=None):
        if degree is None:
            degree = default_degree(n_time)
        return cls(fwhm_to_bandwidth(fwhm_tr, n_time), degree, n_time)

    def to_dict(self):
        return {
            "bandwidth": self.bandwidth,
            "degree": self.degree,
            "n_time": self.n_time,
            "fwhm_tr": self.fwhm_tr,
        }


def kernel_table(s, degree, t0=0.0, n_points=1001):
    """``(t', K_s(t0, t'))`` on ``n_points`` evenly spaced over [0, 2]."""
    tp = np.linspace(0.0, 2.0, n_points)
    return np.column_stack([tp, kernel_eval(s, degree, np.full_like(tp, t0), tp)])


def write_kernel_csv(path, s, degree, t0=0.0, n_points=1001):
    table = kernel_table(s, degree, t0, n_points)
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t_prime", "kernel"])
        for tp, k in table:
            writer.writerow([format(tp, ".17g"), format(k, ".17g")])
