"""Synthetic cohorts with planted ground truth.

Two generators:

* regime-switching multivariate series, where each segment is drawn with a
  fixed target correlation matrix (states are known per time point);
* ACE twin cohorts, where the cross-twin correlation of each feature is
  ``A + C`` for MZ and ``A/2 + C`` for DZ pairs.

Both are pure functions of their parameter object and seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from heatdfc.errors import NotPSD
from heatdfc.heritability import TwinCohort
from heatdfc.signal import RoiMatrix

PSD_TOL = 1e-10


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _logistic(x):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def correlation_sqrt(target) -> np.ndarray:
    """Symmetric square root of a correlation matrix.

    Raises
    ------
    NotPSD
        If an eigenvalue is below ``-1e-10``.
    """
    target = np.asarray(target, dtype=float)
    if not np.allclose(target, target.T, atol=1e-12):
        raise ValueError("target matrix is not symmetric")
    evals, evecs = np.linalg.eigh(target)
    if evals.min() < -PSD_TOL:
        raise NotPSD(f"target has negative eigenvalue {evals.min():.3g}")
    evals = np.clip(evals, 0.0, None)
    return (evecs * np.sqrt(evals)) @ evecs.T


def loadings_to_corr(loadings) -> np.ndarray:
    """Factor-model correlation ``L L^T`` with the diagonal reset to 1."""
    lam = np.atleast_2d(np.asarray(loadings, dtype=float))
    if lam.shape[0] == 1 and lam.ndim == 2 and lam.shape[1] > 1:
        lam = lam.T
    r = lam @ lam.T
    if np.any(np.diag(r) > 1 + 1e-12):
        raise ValueError("communalities exceed 1")
    np.fill_diagonal(r, 1.0)
    return r


def planted_loadings(n_regions) -> list[np.ndarray]:
    """Factor loadings of three well-separated connectivity states.

    The regions are split into two halves A and B.

    1. two independent blocks (A-A and B-B correlated, A-B uncorrelated);
    2. one global factor (everything positively correlated);
    3. one bipolar factor (A-B anticorrelated).
    """
    half = n_regions // 2
    a = np.zeros(n_regions, dtype=bool)
    a[:half] = True
    lam = 0.8
    s1 = np.zeros((n_regions, 2))
    s1[a, 0] = lam
    s1[~a, 1] = lam
    s2 = np.full((n_regions, 1), lam)
    s3 = np.where(a, lam, -lam)[:, None]
    return [s1, s2, s3]


@dataclass
class RegimeSchedule:
    """Piecewise-constant correlation regimes over ``[0, T)``.

    Attributes
    ----------
    segments : list of (start, end, target)
        Half-open index ranges with their ``p x p`` target correlations,
        contiguous and covering ``[0, T)``.
    noise_sd : float
        Scale of the generated samples.
    seed : int or None
    ramp_width : float
        Width in TRs of a logistic blend between neighbouring targets; 0 gives
        hard switches.
    labels : list of int, optional
        State label of each segment, kept for ground truth.
    """

    segments: list
    noise_sd: float = 1.0
    seed: int | None = 0
    ramp_width: float = 0.0
    labels: list | None = None

    def __post_init__(self):
        if not self.segments:
            raise ValueError("schedule needs at least one segment")
        pos = 0
        for start, end, target in self.segments:
            if start != pos or end <= start:
                raise ValueError("segments must partition [0, T) in order")
            target = np.asarray(target, dtype=float)
            if target.ndim != 2 or target.shape[0] != target.shape[1]:
                raise ValueError("targets must be square")
            if not np.allclose(np.diag(target), 1.0):
                raise ValueError("targets need a unit diagonal")
            pos = end
        if self.labels is not None and len(self.labels) != len(self.segments):
            raise ValueError("one label per segment")

    @property
    def n_time(self):
        return self.segments[-1][1]

    @property
    def n_regions(self):
        return np.asarray(self.segments[0][2]).shape[0]

    def truth(self) -> np.ndarray:
        """Per-time state labels (segment index + 1 when no labels are given)."""
        out = np.empty(self.n_time, dtype=np.int64)
        for idx, (start, end, _) in enumerate(self.segments):
            out[start:end] = self.labels[idx] if self.labels else idx + 1
        return out


def generate_subject(schedule: RegimeSchedule, subject_id="subject", tr_seconds=2.0) -> RoiMatrix:
    """Draw a ``T x p`` series whose segments follow the schedule's targets."""
    rng = _rng(schedule.seed)
    n_time, p = schedule.n_time, schedule.n_regions
    z = rng.standard_normal((n_time, p))
    roots = [correlation_sqrt(target) for _, _, target in schedule.segments]
    out = np.empty((n_time, p))
    if schedule.ramp_width <= 0:
        for (start, end, _), root in zip(schedule.segments, roots):
            out[start:end] = z[start:end] @ root
    else:
        targets = np.stack([np.asarray(tg, dtype=float) for _, _, tg in schedule.segments])
        t = np.arange(n_time)[:, None] + 0.5
        starts = np.array([s for s, _, _ in schedule.segments], dtype=float)
        ends = np.array([e for _, e, _ in schedule.segments], dtype=float)
        starts[0], ends[-1] = -np.inf, np.inf
        # logistic membership of each segment; a convex mix of correlation
        # matrices is again a correlation matrix
        member = _logistic((t - starts) / schedule.ramp_width) - _logistic(
            (t - ends) / schedule.ramp_width
        )
        member /= member.sum(axis=1, keepdims=True)
        for j in range(n_time):
            target = np.tensordot(member[j], targets, axes=1)
            out[j] = z[j] @ correlation_sqrt(target)
    return RoiMatrix(schedule.noise_sd * out, subject_id, tr_seconds)


def random_dwell_schedule(n_time, n_states, dwell, rng, start_state=None):
    """Random state sequence with segment lengths drawn from ``dwell = (lo, hi)``.

    Consecutive segments always differ in state. Returns ``(bounds, labels)``
    with labels in ``1..n_states``.
    """
    lo, hi = dwell
    if lo < 1 or hi < lo:
        raise ValueError("dwell range must satisfy 1 <= lo <= hi")
    bounds, labels = [], []
    pos = 0
    state = int(rng.integers(1, n_states + 1)) if start_state is None else start_state
    while pos < n_time:
        length = int(rng.integers(lo, hi + 1))
        end = min(n_time, pos + length)
        # never leave a stub shorter than the minimum dwell at the end
        if n_time - end < lo:
            end = n_time
        bounds.append((pos, end))
        labels.append(state)
        pos = end
        choices = [s for s in range(1, n_states + 1) if s != state]
        state = int(rng.choice(choices))
    return bounds, labels


@dataclass(frozen=True)
class AceSpec:
    """Per-feature additive-genetic (A) and common-environment (C) shares."""

    A: np.ndarray
    C: np.ndarray
    m: int
    n: int
    seed: int | None = 0

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.A, dtype=float))
        c = np.atleast_1d(np.asarray(self.C, dtype=float))
        a, c = np.broadcast_arrays(a, c)
        if np.any(a < 0) or np.any(a > 1) or np.any(c < 0) or np.any(c > 1):
            raise ValueError("A and C must lie in [0, 1]")
        if np.any(a + c > 1 + 1e-12):
            raise ValueError("A + C must not exceed 1")
        if self.m < 1 or self.n < 1:
            raise ValueError("need at least one pair per zygosity")
        object.__setattr__(self, "A", a.copy())
        object.__setattr__(self, "C", c.copy())

    @property
    def gamma_mz(self):
        return self.A + self.C

    @property
    def gamma_dz(self):
        return self.A / 2 + self.C


def ace_pair_values(a, c, n_pairs, zygosity, rng) -> np.ndarray:
    """``(n_features, 2, n_pairs)`` twin values with unit variance.

    Each value is ``sqrt(A) g + sqrt(C) c + sqrt(1 - A - C) e``. The genetic
    part ``g`` is identical within MZ pairs and ``(g_shared + g_own)/sqrt(2)``
    within DZ pairs, giving a cross-twin genetic correlation of exactly 1/2.
    """
    a = np.atleast_1d(a)[:, None, None]
    c = np.atleast_1d(c)[:, None, None]
    n_feat = a.shape[0]
    g_shared = rng.standard_normal((n_feat, 1, n_pairs))
    if zygosity == "MZ":
        g = np.broadcast_to(g_shared, (n_feat, 2, n_pairs))
    elif zygosity == "DZ":
        g = (g_shared + rng.standard_normal((n_feat, 2, n_pairs))) / np.sqrt(2.0)
    else:
        raise ValueError(f"unknown zygosity {zygosity!r}")
    common = rng.standard_normal((n_feat, 1, n_pairs))
    e = rng.standard_normal((n_feat, 2, n_pairs))
    resid = np.sqrt(np.clip(1.0 - a - c, 0.0, None))
    return np.sqrt(a) * g + np.sqrt(c) * common + resid * e


def generate_twin_cohort(spec: AceSpec, feature_count=None) -> TwinCohort:
    """Planted ACE cohort; ``feature_count`` broadcasts scalar A, C."""
    rng = _rng(spec.seed)
    a, c = spec.A, spec.C
    if feature_count is not None:
        if a.size == 1:
            a = np.full(feature_count, a[0])
            c = np.full(feature_count, c[0])
        elif a.size != feature_count:
            raise ValueError("feature_count disagrees with the per-feature A/C")
    mz = ace_pair_values(a, c, spec.m, "MZ", rng)
    dz = ace_pair_values(a, c, spec.n, "DZ", rng)
    return TwinCohort(mz, dz)


# --------------------------------------------------------------------------
# Whole cohorts for pipeline runs
# --------------------------------------------------------------------------

@dataclass
class CohortSpec:
    """Regime-switching twin cohort.

    Subjects switch between the three planted states with dwell times drawn
    from ``dwell``. Twin pairs share, through the ACE model, a per-region
    shift of their factor loadings, so state-average connectivity is
    heritable. States themselves are visited independently by each twin.
    """

    n_mz: int = 10
    n_dz: int = 10
    n_unpaired: int = 0
    n_time: int = 300
    n_regions: int = 10
    dwell: tuple = (40, 100)
    noise_sd: float = 1.0
    ace_a: float = 0.6
    ace_c: float = 0.2
    loading_sd: float = 0.08
    ramp_width: float = 0.0
    seed: int = 0
    tr_seconds: float = 2.0
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw):
        raw = dict(raw)
        if "dwell" in raw:
            raw["dwell"] = tuple(raw["dwell"])
        return cls(**raw)

    def to_dict(self):
        return {
            "n_mz": self.n_mz,
            "n_dz": self.n_dz,
            "n_unpaired": self.n_unpaired,
            "n_time": self.n_time,
            "n_regions": self.n_regions,
            "dwell": list(self.dwell),
            "noise_sd": self.noise_sd,
            "ace_a": self.ace_a,
            "ace_c": self.ace_c,
            "loading_sd": self.loading_sd,
            "ramp_width": self.ramp_width,
            "seed": self.seed,
            "tr_seconds": self.tr_seconds,
        }


@dataclass
class SimulatedSubject:
    roi: RoiMatrix
    truth: np.ndarray
    zygosity: str | None
    pair_id: str | None
    twin: int | None


def _shifted_loadings(base, shift):
    """Move each region's non-zero loadings away from or towards zero."""
    mag = np.clip(np.abs(base) + shift[:, None], 0.05, 0.95)
    return np.where(base != 0, np.sign(base) * mag, 0.0)


def simulate_cohort(spec: CohortSpec) -> list[SimulatedSubject]:
    """Generate every subject of a cohort, deterministically from ``spec.seed``.

    Each subject draws from its own child seed, so the output does not depend
    on generation order.
    """
    root = np.random.SeedSequence(spec.seed)
    ace_seq, subj_seq = root.spawn(2)
    ace_rng = np.random.default_rng(ace_seq)
    p = spec.n_regions
    base = planted_loadings(p)
    a = np.full(p, spec.ace_a)
    c = np.full(p, spec.ace_c)
    shifts_mz = spec.loading_sd * ace_pair_values(a, c, spec.n_mz, "MZ", ace_rng)
    shifts_dz = spec.loading_sd * ace_pair_values(a, c, spec.n_dz, "DZ", ace_rng)
    solo = spec.loading_sd * ace_rng.standard_normal((p, spec.n_unpaired))

    plan = []
    for i in range(spec.n_mz):
        for tw in (1, 2):
            plan.append((f"mz{i + 1:03d}_{tw}", "MZ", f"mz{i + 1:03d}", tw, shifts_mz[:, tw - 1, i]))
    for i in range(spec.n_dz):
        for tw in (1, 2):
            plan.append((f"dz{i + 1:03d}_{tw}", "DZ", f"dz{i + 1:03d}", tw, shifts_dz[:, tw - 1, i]))
    for i in range(spec.n_unpaired):
        plan.append((f"solo{i + 1:03d}", None, None, None, solo[:, i]))

    seeds = subj_seq.spawn(len(plan))
    out = []
    for (sid, zyg, pair, tw, shift), seq in zip(plan, seeds):
        rng = np.random.default_rng(seq)
        targets = [loadings_to_corr(_shifted_loadings(lam, shift)) for lam in base]
        bounds, labels = random_dwell_schedule(spec.n_time, len(base), spec.dwell, rng)
        schedule = RegimeSchedule(
            [(s, e, targets[lab - 1]) for (s, e), lab in zip(bounds, labels)],
            spec.noise_sd,
            rng,
            spec.ramp_width,
            labels,
        )
        roi = generate_subject(schedule, sid, spec.tr_seconds)
        out.append(SimulatedSubject(roi, schedule.truth(), zyg, pair, tw))
    return out
