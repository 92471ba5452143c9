"""Twin correlations averaged over within-pair orderings, and Falconer HI maps.

The order of the two twins in a pair is arbitrary, so the cross-twin Pearson
correlation depends on an arbitrary choice among ``2^m`` orderings. Instead of
enumerating them, a random walk applies one transposition (swap inside one
pair) at a time and updates the running sums

    nu_k     = sum_r x_rk
    omega_kl = sum_r (x_rk - nu_k/m) (x_rl - nu_l/m)

in constant time, averaging the correlation ``omega_12 / sqrt(omega_11 omega_22)``
along the walk.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from heatdfc.errors import InsufficientPairs, StateNotVisited, ZeroVariance

LOGGER = logging.getLogger(__name__)

VAR_GUARD = 1e-12
MIN_PAIRS = 3


@dataclass
class TwinCohort:
    """Twin-pair values per feature.

    Attributes
    ----------
    mz : ndarray of shape (n_features, 2, m)
        Row 0 holds the first twin of every MZ pair, row 1 the second.
    dz : ndarray of shape (n_features, 2, n)
    mz_ids, dz_ids : list of str, optional
        Pair identifiers in column order.

    NaN marks a missing value; the whole pair is then dropped for that
    feature.
    """

    mz: np.ndarray
    dz: np.ndarray
    mz_ids: list | None = None
    dz_ids: list | None = None

    def __post_init__(self):
        self.mz = np.asarray(self.mz, dtype=float)
        self.dz = np.asarray(self.dz, dtype=float)
        if self.mz.ndim == 2:
            self.mz = self.mz[None]
        if self.dz.ndim == 2:
            self.dz = self.dz[None]
        if self.mz.shape[1] != 2 or self.dz.shape[1] != 2:
            raise ValueError("twin arrays must have shape (n_features, 2, n_pairs)")
        if self.mz.shape[0] != self.dz.shape[0]:
            raise ValueError("MZ and DZ arrays disagree on the number of features")
        if np.any(np.isinf(self.mz)) or np.any(np.isinf(self.dz)):
            raise ValueError("twin values must be finite (NaN marks missing)")

    @property
    def n_features(self):
        return self.mz.shape[0]

    @property
    def m(self):
        return self.mz.shape[2]

    @property
    def n(self):
        return self.dz.shape[2]


def complete_pairs(pairs) -> np.ndarray:
    """Drop pairs with a missing twin (listwise deletion)."""
    pairs = np.asarray(pairs, dtype=float)
    keep = np.all(np.isfinite(pairs), axis=0)
    return pairs[:, keep]


def pearson(a, b) -> float:
    """Sample Pearson correlation, two-pass."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("pearson needs two 1-D vectors of equal length")
    if a.size < 3:
        raise ValueError("pearson needs at least 3 observations")
    ac = a - a.mean()
    bc = b - b.mean()
    saa = np.dot(ac, ac)
    sbb = np.dot(bc, bc)
    if saa < VAR_GUARD or sbb < VAR_GUARD:
        raise ZeroVariance("constant input to pearson")
    return float(np.dot(ac, bc) / math.sqrt(saa * sbb))


@dataclass(frozen=True)
class RunningCorrState:
    """Running sums of the current pairing of ``m`` twin pairs."""

    nu_1: float
    nu_2: float
    omega_11: float
    omega_22: float
    omega_12: float
    m: int

    @classmethod
    def from_pairs(cls, x1, x2) -> "RunningCorrState":
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        m = x1.size
        nu_1, nu_2 = float(x1.sum()), float(x2.sum())
        c1 = x1 - nu_1 / m
        c2 = x2 - nu_2 / m
        return cls(nu_1, nu_2, float(c1 @ c1), float(c2 @ c2), float(c1 @ c2), m)

    @property
    def gamma(self) -> float:
        if self.omega_11 <= VAR_GUARD or self.omega_22 <= VAR_GUARD:
            raise ZeroVariance("twin values are constant under the current pairing")
        return self.omega_12 / math.sqrt(self.omega_11 * self.omega_22)

    def close_to(self, other, rtol=1e-9) -> bool:
        mine = (self.nu_1, self.nu_2, self.omega_11, self.omega_22, self.omega_12)
        theirs = (other.nu_1, other.nu_2, other.omega_11, other.omega_22, other.omega_12)
        scale = max(1.0, *(abs(v) for v in theirs))
        return all(abs(a - b) <= rtol * scale for a, b in zip(mine, theirs))


def transpose_update(state: RunningCorrState, pair_values, m=None) -> RunningCorrState:
    """Running sums after swapping the two twins of one pair.

    ``pair_values`` is ``(x_i1, x_i2)`` under the current ordering. The cross
    term follows ``omega_12 + d^2/m - d (nu_1 - nu_2)/m`` with
    ``d = x_i1 - x_i2``; the variance terms change by
    ``(x_il^2 - x_ik^2) + (2 nu_k d_k - d_k^2)/m`` with ``d_k = x_ik - x_il``.
    """
    a, b = pair_values
    m = state.m if m is None else m
    d = a - b
    if d == 0.0:
        return state
    nu_1, nu_2 = state.nu_1, state.nu_2
    return RunningCorrState(
        nu_1 - d,
        nu_2 + d,
        state.omega_11 + (b * b - a * a) + (2.0 * nu_1 * d - d * d) / m,
        state.omega_22 + (a * a - b * b) + (-2.0 * nu_2 * d - d * d) / m,
        state.omega_12 + d * d / m - d * (nu_1 - nu_2) / m,
        state.m,
    )


@numba.njit(cache=True, nogil=True)
def _walk_kernel(x1, x2, idx):
    """Average correlation along the transpositions ``idx``.

    Returns ``(mean, n_used, n_skipped)``. ``x1`` and ``x2`` are modified in
    place to the final pairing.
    """
    m = x1.size
    nu1 = 0.0
    nu2 = 0.0
    for r in range(m):
        nu1 += x1[r]
        nu2 += x2[r]
    w11 = 0.0
    w22 = 0.0
    w12 = 0.0
    for r in range(m):
        c1 = x1[r] - nu1 / m
        c2 = x2[r] - nu2 / m
        w11 += c1 * c1
        w22 += c2 * c2
        w12 += c1 * c2
    mean = 0.0
    used = 0
    skipped = 0
    for step in range(idx.size):
        i = idx[step]
        a = x1[i]
        b = x2[i]
        d = a - b
        if d != 0.0:
            w11 = w11 + (b * b - a * a) + (2.0 * nu1 * d - d * d) / m
            w22 = w22 + (a * a - b * b) + (-2.0 * nu2 * d - d * d) / m
            w12 = w12 + d * d / m - d * (nu1 - nu2) / m
            nu1 = nu1 - d
            nu2 = nu2 + d
            x1[i] = b
            x2[i] = a
        if w11 <= 1e-12 or w22 <= 1e-12:
            skipped += 1
            continue
        g = w12 / math.sqrt(w11 * w22)
        used += 1
        mean = (used - 1.0) / used * mean + g / used
    return mean, used, skipped


@numba.njit(cache=True, nogil=True)
def _walk_recompute_kernel(x1, x2, idx):
    """Same walk, recomputing the correlation from scratch at every step."""
    m = x1.size
    mean = 0.0
    used = 0
    for step in range(idx.size):
        i = idx[step]
        a = x1[i]
        x1[i] = x2[i]
        x2[i] = a
        s1 = 0.0
        s2 = 0.0
        for r in range(m):
            s1 += x1[r]
            s2 += x2[r]
        s1 /= m
        s2 /= m
        w11 = 0.0
        w22 = 0.0
        w12 = 0.0
        for r in range(m):
            c1 = x1[r] - s1
            c2 = x2[r] - s2
            w11 += c1 * c1
            w22 += c2 * c2
            w12 += c1 * c2
        if w11 <= 1e-12 or w22 <= 1e-12:
            continue
        used += 1
        mean = (used - 1.0) / used * mean + w12 / math.sqrt(w11 * w22) / used
    return mean, used


@numba.njit(cache=True, nogil=True)
def _walk_verify_kernel(x1, x2, idx):
    """Largest gap between incremental and from-scratch correlation over a walk."""
    m = x1.size
    nu1 = x1.sum()
    nu2 = x2.sum()
    c1 = x1 - nu1 / m
    c2 = x2 - nu2 / m
    w11 = (c1 * c1).sum()
    w22 = (c2 * c2).sum()
    w12 = (c1 * c2).sum()
    worst = 0.0
    for step in range(idx.size):
        i = idx[step]
        a = x1[i]
        b = x2[i]
        d = a - b
        w11 = w11 + (b * b - a * a) + (2.0 * nu1 * d - d * d) / m
        w22 = w22 + (a * a - b * b) + (-2.0 * nu2 * d - d * d) / m
        w12 = w12 + d * d / m - d * (nu1 - nu2) / m
        nu1 = nu1 - d
        nu2 = nu2 + d
        x1[i] = b
        x2[i] = a
        s1 = x1.sum() / m
        s2 = x2.sum() / m
        r11 = 0.0
        r22 = 0.0
        r12 = 0.0
        for r in range(m):
            u = x1[r] - s1
            v = x2[r] - s2
            r11 += u * u
            r22 += v * v
            r12 += u * v
        if r11 <= 1e-12 or r22 <= 1e-12 or w11 <= 1e-12 or w22 <= 1e-12:
            continue
        gap = abs(w12 / math.sqrt(w11 * w22) - r12 / math.sqrt(r11 * r22))
        if gap > worst:
            worst = gap
    return worst


def verify_walk(x1, x2, steps=100000, seed=0) -> float:
    """Worst per-step |incremental - from-scratch| correlation along one random walk."""
    x1 = np.array(x1, dtype=float)
    x2 = np.array(x2, dtype=float)
    idx = np.random.default_rng(_seed_seq(seed)).integers(0, x1.size, steps)
    return float(_walk_verify_kernel(x1, x2, idx))


@dataclass
class WalkResult:
    """Transposition-averaged correlation over ``repeats`` independent walks."""

    mean: float
    sd: float
    repeat_means: np.ndarray
    skipped: int
    steps: int


def _seed_seq(seed):
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


def transposition_walk(x1, x2, steps=50000, repeats=100, seed=0, verify=False) -> WalkResult:
    """Average twin correlation along random transposition sequences.

    Every repeat starts from the given pairing, applies ``steps`` random
    transpositions with pair indices drawn uniformly with replacement, and
    averages the correlation after each one. Repeat ``r`` uses child stream
    ``r`` of ``seed``.

    With ``verify=True`` each repeat is replayed against a from-scratch
    recompute and an AssertionError is raised if the running sums drift by
    more than 1e-10 in correlation.

    Returns
    -------
    WalkResult
        Mean and sample SD of the per-repeat averages.
    """
    x1 = np.ascontiguousarray(x1, dtype=float)
    x2 = np.ascontiguousarray(x2, dtype=float)
    if x1.shape != x2.shape or x1.ndim != 1:
        raise ValueError("twin vectors must be 1-D and of equal length")
    if x1.size < 2:
        raise ValueError("need at least 2 pairs")
    if steps < 1 or repeats < 1:
        raise ValueError("steps and repeats must be >= 1")
    streams = _seed_seq(seed).spawn(repeats)
    means = np.empty(repeats)
    skipped = 0
    for r, stream in enumerate(streams):
        idx = np.random.default_rng(stream).integers(0, x1.size, steps)
        mean, used, skip = _walk_kernel(x1.copy(), x2.copy(), idx)
        if verify:
            gap = _walk_verify_kernel(x1.copy(), x2.copy(), idx)
            assert gap <= 1e-10, f"incremental update drifted by {gap:.3g}"
        skipped += skip
        if used == 0:
            raise ZeroVariance("every step of the walk had zero variance", where=r)
        means[r] = mean
    if skipped:
        LOGGER.info("skipped %d zero-variance steps", skipped)
    sd = float(means.std(ddof=1)) if repeats > 1 else 0.0
    return WalkResult(float(means.mean()), sd, means, skipped, steps)


def falconer_hi(gamma_mz, gamma_dz, clamp=False):
    """Heritability index ``2 (gamma_mz - gamma_dz)``, optionally clamped to [0, 1]."""
    h = 2.0 * (np.asarray(gamma_mz, dtype=float) - np.asarray(gamma_dz, dtype=float))
    if clamp:
        h = np.clip(h, 0.0, 1.0)
    return h if h.ndim else float(h)


def state_average_map(values, assignment, state) -> np.ndarray:
    """Per-edge mean correlation over the time points spent in ``state``.

    Raises
    ------
    StateNotVisited
    """
    values = np.asarray(values, dtype=float)
    assignment = np.asarray(assignment)
    if assignment.shape[0] != values.shape[0]:
        raise ValueError("assignment length differs from the number of time points")
    mask = assignment == state
    if not mask.any():
        raise StateNotVisited(f"state {state} never visited")
    return values[mask].mean(axis=0)


def state_average_maps(values, assignment, k) -> np.ndarray:
    """``k x E`` state-average maps with NaN rows for unvisited states."""
    values = np.asarray(values, dtype=float)
    out = np.full((k, values.shape[1]), np.nan)
    for state in range(1, k + 1):
        try:
            out[state - 1] = state_average_map(values, assignment, state)
        except StateNotVisited:
            pass
    return out


@dataclass
class HeritabilityMap:
    """Per-state, per-edge twin correlations and heritability.

    All arrays have shape ``(n_states, n_edges)``; NaN marks an edge without
    enough complete pairs.
    """

    edges: np.ndarray
    gamma_mz: np.ndarray
    gamma_dz: np.ndarray
    sd_mz: np.ndarray
    sd_dz: np.ndarray
    n_mz: np.ndarray
    n_dz: np.ndarray
    clamp: bool = False
    params: dict = field(default_factory=dict)

    @property
    def hi(self):
        return falconer_hi(self.gamma_mz, self.gamma_dz)

    @property
    def sd_bound(self):
        return 2.0 * (self.sd_mz + self.sd_dz)

    @property
    def n_states(self):
        return self.gamma_mz.shape[0]

    def top(self, n=5):
        """Most heritable edges per state, sorted by decreasing HI."""
        out = {}
        hi, bound = self.hi, self.sd_bound
        for s in range(self.n_states):
            valid = np.flatnonzero(np.isfinite(hi[s]))
            order = valid[np.argsort(-hi[s, valid], kind="stable")][:n]
            rows = []
            for rank, e in enumerate(order, start=1):
                shown = min(max(hi[s, e], 0.0), 1.0) if self.clamp else hi[s, e]
                rows.append(
                    {
                        "rank": rank,
                        "edge": [int(self.edges[e, 0]) + 1, int(self.edges[e, 1]) + 1],
                        "hi": float(hi[s, e]),
                        "sd_bound": float(bound[s, e]),
                        "display": f"{shown:.2f} ± {bound[s, e]:.2f}",
                    }
                )
            out[s + 1] = rows
        return out

    def to_csv(self, path):
        hi, bound = self.hi, self.sd_bound
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["state", "edge_i", "edge_j", "gamma_mz", "gamma_dz", "hi", "sd_bound"])
            for s in range(self.n_states):
                for e, (i, j) in enumerate(self.edges):
                    writer.writerow(
                        [s + 1, int(i) + 1, int(j) + 1]
                        + [
                            format(v, ".17g")
                            for v in (
                                self.gamma_mz[s, e],
                                self.gamma_dz[s, e],
                                hi[s, e],
                                bound[s, e],
                            )
                        ]
                    )

    def write_top_json(self, path, n=5):
        payload = {
            "top_n": n,
            "clamped_display": self.clamp,
            "states": {str(s): rows for s, rows in self.top(n).items()},
        }
        Path(path).write_text(json.dumps(payload, indent=2, ensure_ascii=False) + "\n")


def _walk_stream(seed, state, edge, zygosity):
    return np.random.SeedSequence(
        _seed_seq(seed).entropy,
        spawn_key=_seed_seq(seed).spawn_key + (state, edge, zygosity),
    )


def hi_map(mz, dz, steps=50000, repeats=100, seed=0, edges=None, clamp=False) -> HeritabilityMap:
    """Transposition-averaged twin correlations and HI for every state and edge.

    Parameters
    ----------
    mz : ndarray of shape (n_states, n_edges, 2, m)
        State-average connectivity of the MZ pairs; NaN where a twin never
        visited the state.
    dz : ndarray of shape (n_states, n_edges, 2, n)
    edges : ndarray of shape (n_edges, 2), optional
        Region pairs for reporting.

    Each (state, edge, zygosity) walk draws from its own stream derived from
    ``seed``, so results do not depend on evaluation order. Edges with fewer
    than three complete pairs in either zygosity are left as NaN.
    """
    mz = np.asarray(mz, dtype=float)
    dz = np.asarray(dz, dtype=float)
    if mz.ndim == 3:
        mz, dz = mz[None], dz[None]
    n_states, n_edges = mz.shape[:2]
    if dz.shape[:2] != (n_states, n_edges):
        raise ValueError("MZ and DZ maps disagree on states or edges")
    if edges is None:
        edges = np.column_stack([np.arange(n_edges), np.arange(n_edges)])
    shape = (n_states, n_edges)
    g_mz, g_dz = np.full(shape, np.nan), np.full(shape, np.nan)
    s_mz, s_dz = np.full(shape, np.nan), np.full(shape, np.nan)
    n_mz, n_dz = np.zeros(shape, np.int64), np.zeros(shape, np.int64)
    missing = 0
    for s in range(n_states):
        for e in range(n_edges):
            px = complete_pairs(mz[s, e])
            py = complete_pairs(dz[s, e])
            n_mz[s, e], n_dz[s, e] = px.shape[1], py.shape[1]
            try:
                if px.shape[1] < MIN_PAIRS or py.shape[1] < MIN_PAIRS:
                    raise InsufficientPairs(
                        f"state {s + 1}, edge {e}: {px.shape[1]} MZ / {py.shape[1]} DZ pairs"
                    )
                wx = transposition_walk(px[0], px[1], steps, repeats, _walk_stream(seed, s, e, 0))
                wy = transposition_walk(py[0], py[1], steps, repeats, _walk_stream(seed, s, e, 1))
            except (InsufficientPairs, ZeroVariance) as exc:
                missing += 1
                LOGGER.debug("edge marked missing: %s", exc)
                continue
            g_mz[s, e], s_mz[s, e] = wx.mean, wx.sd
            g_dz[s, e], s_dz[s, e] = wy.mean, wy.sd
    if missing:
        LOGGER.warning("%d state/edge combinations lacked usable twin pairs", missing)
    params = {"steps": steps, "repeats": repeats}
    return HeritabilityMap(np.asarray(edges), g_mz, g_dz, s_mz, s_dz, n_mz, n_dz, clamp, params)


def cohort_hi_map(cohort: TwinCohort, steps=50000, repeats=100, seed=0, clamp=False) -> HeritabilityMap:
    """HI for every feature of a :class:`TwinCohort`, treated as a single state."""
    return hi_map(cohort.mz[None], cohort.dz[None], steps, repeats, seed, clamp=clamp)
