"""Connectivity states: k-means over vectorized correlation matrices.

State labels are 1-based throughout (``1..k``), matching how sequences are
reported.
"""

from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from heatdfc.errors import AsymmetricInput, EmptyInput, EmptyState, LabelOutOfRange

LOGGER = logging.getLogger(__name__)

MAX_ITER = 300
MOVE_TOL = 1e-6


def vectorize_upper(matrix, tol=1e-9) -> np.ndarray:
    """Upper-triangle entries ``(i, j), i < j`` in row-major order."""
    c = np.asarray(matrix, dtype=float)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError("expected a square matrix")
    if np.nanmax(np.abs(c - c.T), initial=0.0) > tol:
        raise AsymmetricInput("matrix is not symmetric within tolerance")
    return c[np.triu_indices(c.shape[0], k=1)]


def unvectorize_upper(vec, n_regions, diagonal=1.0) -> np.ndarray:
    out = np.zeros((n_regions, n_regions))
    iu = np.triu_indices(n_regions, k=1)
    out[iu] = vec
    out = out + out.T
    np.fill_diagonal(out, diagonal)
    return out


@dataclass
class KMeansResult:
    """Best-of-restarts Lloyd solution.

    ``labels`` are 1-based. ``sse_history`` is the within-cluster SSE after
    every assignment step of the winning restart.
    """

    k: int
    centroids: np.ndarray
    labels: np.ndarray
    sse_within: float
    sse_between: float
    sse_total: float
    n_iter: int
    best_restart: int
    sse_history: list = field(default_factory=list)

    @property
    def ratio(self):
        return self.sse_within / self.sse_between if self.sse_between > 0 else math.inf


def _sq_dist(points, sq_norms, centroids):
    d = sq_norms[:, None] - 2.0 * points @ centroids.T + np.sum(centroids ** 2, axis=1)
    return np.maximum(d, 0.0)


def _kmeans_pp(points, sq_norms, k, rng):
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    closest = _sq_dist(points, sq_norms, centroids[:1])[:, 0]
    for c in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centroids[c] = points[idx]
        closest = np.minimum(closest, _sq_dist(points, sq_norms, centroids[c : c + 1])[:, 0])
    return centroids


def _lloyd(points, sq_norms, k, rng):
    centroids = _kmeans_pp(points, sq_norms, k, rng)
    history = []
    labels = None
    for it in range(1, MAX_ITER + 1):
        dist = _sq_dist(points, sq_norms, centroids)
        labels = np.argmin(dist, axis=1)  # ties go to the lowest index
        point_sse = dist[np.arange(points.shape[0]), labels]
        sse = float(point_sse.sum())
        if history and sse > history[-1] * (1 + 1e-9) + 1e-9:
            raise AssertionError(f"k-means SSE increased: {history[-1]} -> {sse}")
        history.append(sse)
        counts = np.bincount(labels, minlength=k)
        for c in np.flatnonzero(counts == 0):
            # re-seed with the point farthest from its centroid, never
            # emptying the cluster it leaves
            for far in np.argsort(-point_sse, kind="stable"):
                if counts[labels[far]] > 1:
                    break
            counts[labels[far]] -= 1
            labels[far] = c
            counts[c] = 1
            point_sse[far] = 0.0
        onehot = np.zeros((points.shape[0], k))
        onehot[np.arange(points.shape[0]), labels] = 1.0
        new = (onehot.T @ points) / counts[:, None]
        move = np.sqrt(np.max(np.sum((new - centroids) ** 2, axis=1)))
        centroids = new
        if move < MOVE_TOL:
            break
    # final assignment against the converged centroids
    dist = _sq_dist(points, sq_norms, centroids)
    labels = np.argmin(dist, axis=1)
    sse = float(dist[np.arange(points.shape[0]), labels].sum())
    if sse <= history[-1] * (1 + 1e-9) + 1e-9:
        history.append(sse)
    return centroids, labels, history, it


def _decompose(points, labels, centroids):
    """Exact within/between/total sums of squares for a labelling."""
    grand = points.mean(axis=0)
    total = float(np.sum((points - grand) ** 2))
    within = float(np.sum((points - centroids[labels]) ** 2))
    counts = np.bincount(labels, minlength=centroids.shape[0])
    between = float(np.sum(counts * np.sum((centroids - grand) ** 2, axis=1)))
    return within, between, total


def kmeans(points, k, restarts=100, seed=0, n_jobs=1) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding, best of ``restarts`` by SSE.

    Each restart draws from its own child stream of ``seed``, and the winner
    is chosen by (SSE, restart index), so the result does not depend on
    ``n_jobs``.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[0] == 0:
        raise EmptyInput("k-means needs a non-empty 2-D array of points")
    n = points.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    if not np.all(np.isfinite(points)):
        raise ValueError("points contain non-finite values")
    sq_norms = np.sum(points ** 2, axis=1)
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    streams = root.spawn(restarts)

    def one(idx):
        rng = np.random.default_rng(streams[idx])
        centroids, labels, history, n_iter = _lloyd(points, sq_norms, k, rng)
        # centroids as exact means of the final labelling
        for c in range(k):
            members = labels == c
            if members.any():
                centroids[c] = points[members].mean(axis=0)
        within = float(np.sum((points - centroids[labels]) ** 2))
        return within, idx, centroids, labels, history, n_iter

    if n_jobs and n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            runs = list(pool.map(one, range(restarts)))
    else:
        runs = [one(i) for i in range(restarts)]
    within, idx, centroids, labels, history, n_iter = min(runs, key=lambda r: (r[0], r[1]))
    within, between, total = _decompose(points, labels, centroids)
    return KMeansResult(k, centroids, labels + 1, within, between, total, n_iter, idx, history)


@dataclass
class ElbowResult:
    k: int
    ks: list
    ratios: list
    second_diff: dict
    monotone: bool
    weak: bool
    fits: dict = field(default_factory=dict, repr=False)

    def to_dict(self):
        return {
            "chosen_k": self.k,
            "k": self.ks,
            "ratio": self.ratios,
            "second_difference": {str(k): v for k, v in self.second_diff.items()},
            "monotone": self.monotone,
            "weak_elbow": self.weak,
        }


def _child_seed(seed, k):
    # per-k stream so a fixed-k fit reproduces the matching elbow fit
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + (k,))
    return np.random.SeedSequence(seed, spawn_key=(k,))


def elbow_select(points, k_range=range(2, 9), restarts=100, seed=0, n_jobs=1) -> ElbowResult:
    """Choose k at the sharpest bend of the within/between SSE ratio curve.

    The chosen k maximizes ``r(k-1) - 2 r(k) + r(k+1)`` over interior k.
    ``monotone`` is False when restart noise made the curve increase
    somewhere. ``weak`` flags an elbow whose drop into the chosen k is less
    than 1.5 times the drop out of it, as happens for data without clusters.
    """
    ks = sorted(set(int(k) for k in k_range))
    if len(ks) < 3:
        raise ValueError("elbow selection needs at least three k values")
    if ks != list(range(ks[0], ks[-1] + 1)):
        raise ValueError("k_range must be contiguous")
    fits = {}
    for k in ks:
        fits[k] = kmeans(points, k, restarts, _child_seed(seed, k), n_jobs)
    ratios = [fits[k].ratio for k in ks]
    second = {
        ks[i]: ratios[i - 1] - 2 * ratios[i] + ratios[i + 1] for i in range(1, len(ks) - 1)
    }
    chosen = max(second, key=lambda k: (second[k], -k))
    monotone = all(b <= a * (1 + 1e-12) for a, b in zip(ratios, ratios[1:]))
    if not monotone:
        LOGGER.warning("within/between ratio is not monotone in k: %s", ratios)
    i = ks.index(chosen)
    drop_in = ratios[i - 1] / ratios[i] if ratios[i] > 0 else math.inf
    drop_out = ratios[i] / ratios[i + 1] if ratios[i + 1] > 0 else math.inf
    weak = not drop_in >= 1.5 * drop_out
    if weak:
        LOGGER.warning("no clear elbow; k=%d chosen by second difference only", chosen)
    return ElbowResult(chosen, ks, ratios, second, monotone, weak, fits)


def _check_labels(seq, k):
    seq = np.asarray(seq)
    if seq.size and (seq.min() < 1 or seq.max() > k):
        raise LabelOutOfRange(f"labels must lie in 1..{k}")
    return seq.astype(np.int64)


def transition_counts(seq, k) -> np.ndarray:
    seq = _check_labels(seq, k)
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (seq[:-1] - 1, seq[1:] - 1), 1)
    return counts


def transition_matrix(seq, k) -> np.ndarray:
    """Row-stochastic ``P[a, b] = P(s(t) = b + 1 | s(t-1) = a + 1)``.

    ``seq`` may be one label sequence or a list of them, in which case the
    step counts are pooled across sequences. Rows of states that are never
    left are uniform.
    """
    if len(seq) and np.ndim(seq[0]) > 0:
        counts = sum(transition_counts(s, k) for s in seq)
    else:
        if len(seq) < 2:
            raise ValueError("need a sequence of length >= 2")
        counts = transition_counts(seq, k)
    counts = np.asarray(counts, dtype=float)
    rows = counts.sum(axis=1, keepdims=True)
    probs = np.divide(counts, rows, out=np.full_like(counts, 1.0 / k), where=rows > 0)
    return probs


def occupancy(assignments, k) -> np.ndarray:
    """Fraction of all (subject, time) points spent in each state."""
    if len(assignments) and np.ndim(assignments[0]) > 0:
        seqs = list(assignments)
    else:
        seqs = [assignments]
    if not seqs:
        raise EmptyInput("no assignments")
    counts = np.zeros(k, dtype=np.int64)
    for s in seqs:
        counts += np.bincount(_check_labels(s, k) - 1, minlength=k)
    return counts / counts.sum()


def within_state_dispersion(series, assignments, k, ddof=1) -> np.ndarray:
    """Per-state mean over edges of the per-edge correlation SD.

    Parameters
    ----------
    series : list of (T, E) arrays
        Dynamic correlations per subject (``DynCorrSeries.values``).
    assignments : list of length-T label sequences
    """
    stacked = np.concatenate([np.asarray(v, dtype=float) for v in series], axis=0)
    labels = np.concatenate([_check_labels(a, k) for a in assignments])
    if labels.size != stacked.shape[0]:
        raise ValueError("assignments are not aligned with the series")
    out = np.empty(k)
    for state in range(1, k + 1):
        rows = stacked[labels == state]
        if rows.shape[0] < 2:
            raise EmptyState(f"state {state} has fewer than 2 assigned points")
        out[state - 1] = rows.std(axis=0, ddof=ddof).mean()
    return out


def best_permutation(pred, truth, k):
    """Label map maximizing agreement; returns ``(accuracy, mapping)``.

    ``mapping[a - 1]`` is the truth label matched to predicted label ``a``.
    """
    pred = _check_labels(pred, k) - 1
    truth = np.asarray(truth, dtype=np.int64) - 1
    kt = max(k, int(truth.max()) + 1)
    conf = np.zeros((k, kt), dtype=np.int64)
    np.add.at(conf, (pred, truth), 1)
    best, best_perm = -1, None
    for perm in itertools.permutations(range(kt), k):
        hits = conf[np.arange(k), perm].sum()
        if hits > best:
            best, best_perm = hits, perm
    return best / pred.size, [p + 1 for p in best_perm]


def assignment_accuracy(pred, truth, k) -> float:
    """Agreement with planted labels, maximized over label permutations."""
    return best_permutation(pred, truth, k)[0]


def align_centroids(reference, centroids):
    """Greedy matching of ``centroids`` onto ``reference`` rows.

    Returns ``perm`` with ``perm[a]`` the reference index matched to centroid
    ``a``; pairs are fixed in order of increasing Euclidean distance.
    """
    reference = np.asarray(reference, dtype=float)
    centroids = np.asarray(centroids, dtype=float)
    k = centroids.shape[0]
    dist = np.sqrt(((centroids[:, None, :] - reference[None, :, :]) ** 2).sum(axis=2))
    perm = [-1] * k
    used_r, used_c = set(), set()
    for flat in np.argsort(dist, axis=None, kind="stable"):
        c, r = divmod(int(flat), reference.shape[0])
        if c in used_c or r in used_r:
            continue
        perm[c] = r
        used_c.add(c)
        used_r.add(r)
        if len(used_c) == k:
            break
    return perm


def relabel(labels, perm):
    """Apply a 0-based centroid permutation to 1-based labels."""
    lut = np.asarray(perm, dtype=np.int64) + 1
    return lut[np.asarray(labels, dtype=np.int64) - 1]


def count_switches(seq) -> int:
    seq = np.asarray(seq)
    return int(np.count_nonzero(seq[1:] != seq[:-1]))


@dataclass
class StateModel:
    """Group-level state estimate and per-subject sequences."""

    k: int
    centroids: np.ndarray
    assignments: dict
    sse_within: float
    sse_between: float
    elbow: ElbowResult | None = None

    @classmethod
    def fit(cls, series, k="auto", restarts=100, seed=0, k_range=range(2, 9), n_jobs=1):
        """Cluster the stacked dynamic correlations of all subjects.

        Parameters
        ----------
        series : dict of subject_id -> (T, E) array
        """
        ids = list(series)
        blocks = [np.asarray(series[s], dtype=float) for s in ids]
        points = np.concatenate(blocks, axis=0)
        elbow = None
        if k == "auto":
            elbow = elbow_select(points, k_range, restarts, seed, n_jobs)
            fit = elbow.fits[elbow.k]
        else:
            fit = kmeans(points, int(k), restarts, _child_seed(seed, int(k)), n_jobs)
        bounds = np.cumsum([0] + [b.shape[0] for b in blocks])
        assignments = {s: fit.labels[bounds[i] : bounds[i + 1]] for i, s in enumerate(ids)}
        return cls(fit.k, fit.centroids, assignments, fit.sse_within, fit.sse_between, elbow)

    def relabeled(self, perm) -> "StateModel":
        """Reorder states so that centroid ``a`` becomes ``perm[a]``."""
        centroids = np.empty_like(self.centroids)
        centroids[np.asarray(perm)] = self.centroids
        assignments = {s: relabel(a, perm) for s, a in self.assignments.items()}
        return StateModel(self.k, centroids, assignments, self.sse_within, self.sse_between, self.elbow)
