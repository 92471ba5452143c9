"""Dynamic correlation estimators: square window, tapered window, heat kernel.

All three are weighted-moment estimators. For time point ``i`` a set of
non-negative weights summing to one is laid over the (mirrored) series and
the weighted Pearson correlation is taken. The windowed methods use a finite
window on the circular series of length ``2T``; the heat kernel method smooths
the raw moments ``x, y, x^2, y^2, xy`` through the cosine series.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from heatdfc.errors import ZeroVariance
from heatdfc.signal import CircularSeries, RoiMatrix, mirror_reflect_matrix, time_grid
from heatdfc.spectral import (
    HeatKernelParams,
    fit_coefficients,
    smooth,
    smoothing_matrix,
)

METHODS = ("sw", "tsw", "heat")
VAR_GUARD = 1e-12


@dataclass(frozen=True)
class WindowSpec:
    """Sliding-window shape.

    ``kind`` is ``"square"`` or ``"tapered"``; ``size_m`` is the nominal size
    in TRs, read as the window's FWHM. Tapered windows are the square window
    convolved with a Gaussian of ``taper_bandwidth`` TRs.
    """

    kind: str
    size_m: int
    taper_bandwidth: float = 3.0

    def __post_init__(self):
        if self.kind not in ("square", "tapered"):
            raise ValueError(f"unknown window kind {self.kind!r}")
        if int(self.size_m) != self.size_m or self.size_m < 2:
            raise ValueError("window size must be an integer >= 2")
        if self.kind == "tapered" and not self.taper_bandwidth > 0:
            raise ValueError("taper bandwidth must be positive")

    def to_dict(self):
        return {
            "kind": self.kind,
            "size_m": int(self.size_m),
            "taper_bandwidth": self.taper_bandwidth,
        }


def gaussian_taper(bandwidth) -> np.ndarray:
    """Discrete Gaussian on ``-ceil(3 bw) .. ceil(3 bw)``, normalized to sum 1."""
    half = math.ceil(3 * bandwidth)
    k = np.arange(-half, half + 1)
    g = np.exp(-(k ** 2) / (2.0 * bandwidth ** 2))
    return g / g.sum()


def window_weights(spec: WindowSpec) -> np.ndarray:
    m = int(spec.size_m)
    square = np.full(m, 1.0 / m)
    if spec.kind == "square":
        return square
    w = np.convolve(square, gaussian_taper(spec.taper_bandwidth))
    return w / w.sum()


def window_offsets(length) -> np.ndarray:
    """Offsets of ``W_i = [floor(i - M/2 + 1), floor(i + M/2)]`` relative to ``i``."""
    return math.floor(-length / 2 + 1) + np.arange(length)


def windowed_corr(x: CircularSeries, y: CircularSeries, spec: WindowSpec, i) -> float:
    """Weighted Pearson correlation of the window centred at time ``i``.

    Indices wrap modulo ``2T`` so the estimator is defined for any integer
    ``i``.
    """
    if len(x) != len(y):
        raise ValueError("series lengths differ")
    w = window_weights(spec)
    idx = (i + window_offsets(w.size)) % len(x)
    xs, ys = x.values[idx], y.values[idx]
    xc = xs - np.dot(w, xs)
    yc = ys - np.dot(w, ys)
    sx = math.sqrt(np.dot(w, xc * xc))
    sy = math.sqrt(np.dot(w, yc * yc))
    if sx < VAR_GUARD or sy < VAR_GUARD:
        raise ZeroVariance(f"near-constant window at time {i}", where=i)
    return float(np.clip(np.dot(w, xc * yc) / (sx * sy), -1.0, 1.0))


def window_operator(spec: WindowSpec, n_time) -> np.ndarray:
    """``T x 2T`` matrix whose row ``i`` holds the window weights at time ``i``."""
    w = window_weights(spec)
    off = window_offsets(w.size)
    op = np.zeros((n_time, 2 * n_time))
    for i in range(n_time):
        np.add.at(op[i], (i + off) % (2 * n_time), w)
    return op


def _moment_correlation(op, data, edges, clamp=True):
    """Weighted correlations of column pairs given a moment operator.

    ``op @ f`` returns the local weighted mean of ``f`` at every evaluation
    time. Returns the correlation matrix (T x E) and the clamped fraction.
    """
    # centring is harmless (affine invariance) and limits cancellation
    data = data - data.mean(axis=0)
    ia, ib = edges[:, 0], edges[:, 1]
    mu = op @ data
    var = op @ (data * data) - mu * mu
    n_time = op.shape[0]
    bad = var < VAR_GUARD
    if np.any(bad):
        t_idx, col = np.argwhere(bad)[0]
        raise ZeroVariance(
            f"local variance below {VAR_GUARD:g} for region {col} at time {t_idx}",
            where=(int(t_idx), int(col)),
        )
    cov = op @ (data[:, ia] * data[:, ib]) - mu[:, ia] * mu[:, ib]
    rho = cov / np.sqrt(var[:, ia] * var[:, ib])
    clamped = np.abs(rho) > 1.0
    frac = float(clamped.mean()) if rho.size else 0.0
    if clamp:
        rho = np.clip(rho, -1.0, 1.0)
    assert rho.shape == (n_time, edges.shape[0])
    return rho, frac


def heat_dyncorr(x, y, params: HeatKernelParams, clamp=True) -> np.ndarray:
    """Heat-kernel dynamic correlation evaluated on the T sample points.

    The products ``xy, x^2, y^2`` and the signals themselves are expanded in
    the cosine basis, diffused for time ``s`` and combined into the local
    covariance over the product of local standard deviations.

    Raises
    ------
    ZeroVariance
        If the local variance of either signal drops below 1e-12; the
        offending grid index is stored in ``where``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D of equal length")
    n_time = x.size
    grid = time_grid(n_time)
    moments = np.column_stack([x, y, x * y, x * x, y * y])
    model = fit_coefficients(moments, params.degree)
    mx, my, mxy, mxx, myy = smooth(model, params.bandwidth, grid).T
    var_x = mxx - mx * mx
    var_y = myy - my * my
    low = (var_x < VAR_GUARD) | (var_y < VAR_GUARD)
    if np.any(low):
        j = int(np.argmax(low))
        raise ZeroVariance(f"local variance vanished at t={grid[j]:.6g}", where=j)
    rho = (mxy - mx * my) / np.sqrt(var_x * var_y)
    return np.clip(rho, -1.0, 1.0) if clamp else rho


def upper_edges(n_regions) -> np.ndarray:
    """Row-major upper-triangle index pairs ``(i, j)``, ``i < j``."""
    i, j = np.triu_indices(n_regions, k=1)
    return np.column_stack([i, j])


@dataclass
class DynCorrSeries:
    """Time-indexed correlation matrices of one subject, stored by edge."""

    subject_id: str
    times: np.ndarray
    edges: np.ndarray
    values: np.ndarray
    method: str
    params: dict = field(default_factory=dict)
    n_regions: int | None = None
    clamped_fraction: float = 0.0

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.values = np.asarray(self.values, dtype=float)
        if self.n_regions is None:
            self.n_regions = int(self.edges.max()) + 1 if self.edges.size else 0
        if self.values.shape != (len(self.times), self.edges.shape[0]):
            raise ValueError("values must be T x n_edges")

    @property
    def n_time(self):
        return self.values.shape[0]

    def matrix(self, j) -> np.ndarray:
        """Symmetric ``p x p`` correlation matrix at time index ``j``.

        Edges not in the series are NaN.
        """
        p = self.n_regions
        out = np.full((p, p), np.nan)
        np.fill_diagonal(out, 1.0)
        out[self.edges[:, 0], self.edges[:, 1]] = self.values[j]
        out[self.edges[:, 1], self.edges[:, 0]] = self.values[j]
        return out

    def edge_labels(self):
        return [f"e_{a + 1}_{b + 1}" for a, b in self.edges]

    def sidecar(self):
        return {
            "subject_id": self.subject_id,
            "T": int(self.n_time),
            "p": int(self.n_regions),
            "edges": [[int(a) + 1, int(b) + 1] for a, b in self.edges],
            "edge_order": "row-major upper triangle, 1-based region indices",
            "method": self.method,
            "params": self.params,
            "clamped_fraction": self.clamped_fraction,
        }

    def to_csv(self, path):
        path = Path(path)
        header = ",".join(["t"] + self.edge_labels())
        lines = [header]
        for t, row in zip(self.times, self.values):
            lines.append(",".join([format(t, ".17g")] + [format(v, ".17g") for v in row]))
        path.write_text("\n".join(lines) + "\n")
        Path(str(path) + ".json").write_text(json.dumps(self.sidecar(), indent=2) + "\n")

    def to_binary(self, path):
        """Packed little-endian float64 values (row-major T x E) plus JSON sidecar."""
        path = Path(path)
        path.write_bytes(np.ascontiguousarray(self.values, dtype="<f8").tobytes())
        Path(str(path) + ".json").write_text(json.dumps(self.sidecar(), indent=2) + "\n")

    @classmethod
    def load(cls, path):
        path = Path(path)
        meta = json.loads(Path(str(path) + ".json").read_text())
        edges = np.array(meta["edges"], dtype=np.int64).reshape(-1, 2) - 1
        n_time = meta["T"]
        if path.suffix == ".bin":
            values = np.frombuffer(path.read_bytes(), dtype="<f8").reshape(n_time, -1)
            times = time_grid(n_time)
        else:
            raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
            times, values = raw[:, 0], raw[:, 1:]
        return cls(
            meta["subject_id"],
            times,
            edges,
            values.copy(),
            meta["method"],
            meta.get("params", {}),
            meta["p"],
            meta.get("clamped_fraction", 0.0),
        )


def make_params(method, n_time, fwhm_tr=15.0, taper_bandwidth=3.0, degree=None):
    """Estimator parameters matched to a common FWHM in TRs."""
    if method == "sw":
        return WindowSpec("square", int(round(fwhm_tr)))
    if method == "tsw":
        return WindowSpec("tapered", int(round(fwhm_tr)), taper_bandwidth)
    if method == "heat":
        return HeatKernelParams.from_fwhm(fwhm_tr, n_time, degree)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def dyncorr_matrix(
    subject: RoiMatrix,
    method="heat",
    params=None,
    *,
    fwhm_tr=15.0,
    taper_bandwidth=3.0,
    degree=None,
    edges=None,
    clamp=True,
) -> DynCorrSeries:
    """Dynamic correlations of every region pair at the T original time points.

    Columns are rescaled to [0, 1] first. Windowed methods run on the mirrored
    ``2T`` series; the heat kernel method works on [0, 1] directly.

    Parameters
    ----------
    subject : RoiMatrix
    method : {"sw", "tsw", "heat"}
    params : WindowSpec or HeatKernelParams, optional
        Built from ``fwhm_tr`` when omitted.
    edges : array_like of shape (E, 2), optional
        Region pairs to estimate; defaults to the full upper triangle.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    data = subject.rescaled().values
    n_time, n_regions = data.shape
    if params is None:
        params = make_params(method, n_time, fwhm_tr, taper_bandwidth, degree)
    edges = upper_edges(n_regions) if edges is None else np.asarray(edges, np.int64).reshape(-1, 2)
    if np.any(edges[:, 0] == edges[:, 1]):
        raise ValueError("edges must join distinct regions")

    if method == "heat":
        op = smoothing_matrix(n_time, params.bandwidth, params.degree)
        support = data
    else:
        op = window_operator(params, n_time)
        support = mirror_reflect_matrix(data)
    try:
        rho, frac = _moment_correlation(op, support, edges, clamp)
    except ZeroVariance as exc:
        t_idx, region = exc.where
        bad = [f"{a + 1}-{b + 1}" for a, b in edges if region in (a, b)]
        raise ZeroVariance(
            f"subject {subject.subject_id}: {exc} (edges {', '.join(bad[:5])})",
            where={"time": t_idx, "region": region, "edges": bad},
        ) from None
    return DynCorrSeries(
        subject.subject_id,
        time_grid(n_time),
        edges,
        rho,
        method,
        params.to_dict(),
        n_regions,
        frac,
    )


def total_variation(values) -> np.ndarray:
    """Sum of absolute successive differences along time, per column."""
    return np.abs(np.diff(np.asarray(values), axis=0)).sum(axis=0)
