import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heatdfc.errors import NotPSD
from heatdfc.synth import (
    AceSpec,
    CohortSpec,
    RegimeSchedule,
    correlation_sqrt,
    generate_subject,
    generate_twin_cohort,
    loadings_to_corr,
    planted_loadings,
    random_dwell_schedule,
    simulate_cohort,
)


def single_segment(target, n_time, seed=0):
    return RegimeSchedule([(0, n_time, np.asarray(target, dtype=float))], seed=seed)


def test_identity_target_uncorrelated():
    n_time = 2000
    roi = generate_subject(single_segment(np.eye(4), n_time))
    c = np.corrcoef(roi.values.T)
    off = c[~np.eye(4, dtype=bool)]
    assert np.abs(off).max() < 3 / np.sqrt(n_time)


def test_strong_target_recovered():
    target = [[1.0, 0.9], [0.9, 1.0]]
    roi = generate_subject(single_segment(target, 3000, seed=4))
    assert np.corrcoef(roi.values.T)[0, 1] == pytest.approx(0.9, abs=0.03)


def test_same_seed_bit_identical():
    target = loadings_to_corr(planted_loadings(6)[0])
    a = generate_subject(single_segment(target, 100, seed=11))
    b = generate_subject(single_segment(target, 100, seed=11))
    np.testing.assert_array_equal(a.values, b.values)


def test_not_psd_target():
    bad = np.array([[1.0, 0.9, -0.9], [0.9, 1.0, 0.9], [-0.9, 0.9, 1.0]])
    with pytest.raises(NotPSD):
        generate_subject(single_segment(bad, 10))


def test_correlation_sqrt_squares_back(rng):
    a = rng.normal(size=(5, 5))
    cov = a @ a.T
    d = np.sqrt(np.diag(cov))
    target = cov / np.outer(d, d)
    root = correlation_sqrt(target)
    np.testing.assert_allclose(root @ root, target, atol=1e-12)
    np.testing.assert_allclose(root, root.T, atol=1e-12)


def test_schedule_must_partition():
    eye = np.eye(2)
    with pytest.raises(ValueError):
        RegimeSchedule([(0, 5, eye), (6, 10, eye)])
    with pytest.raises(ValueError):
        RegimeSchedule([(0, 5, 2 * eye)])


def test_schedule_truth_labels():
    eye = np.eye(2)
    sched = RegimeSchedule([(0, 3, eye), (3, 5, eye)], labels=[2, 1])
    np.testing.assert_array_equal(sched.truth(), [2, 2, 2, 1, 1])


def test_ramp_blends_targets():
    p = 3
    a, b = np.eye(p), loadings_to_corr(np.full(p, 0.9))
    sched = RegimeSchedule([(0, 50, a), (50, 100, b)], seed=0, ramp_width=5.0)
    roi = generate_subject(sched)
    assert roi.values.shape == (100, p)
    assert np.all(np.isfinite(roi.values))


@pytest.mark.parametrize("p", [2, 5, 10, 116])
def test_planted_loadings_valid(p):
    for lam in planted_loadings(p):
        c = loadings_to_corr(lam)
        np.testing.assert_allclose(np.diag(c), 1.0)
        assert np.linalg.eigvalsh(c).min() > -1e-10


@settings(max_examples=40)
@given(st.integers(0, 2**32 - 1), st.integers(30, 400), st.integers(2, 5))
def test_dwell_schedule(seed, n_time, n_states):
    rng = np.random.default_rng(seed)
    bounds, labels = random_dwell_schedule(n_time, n_states, (10, 25), rng)
    assert bounds[0][0] == 0 and bounds[-1][1] == n_time
    assert all(a[1] == b[0] for a, b in zip(bounds, bounds[1:]))
    assert all(x != y for x, y in zip(labels, labels[1:]))
    assert all(1 <= s <= n_states for s in labels)
    # only the last segment may run long, and none is shorter than the minimum
    # unless the series itself is shorter
    assert all(e - s >= min(10, n_time) for s, e in bounds)


# ---- ACE -----------------------------------------------------------------


def test_ace_pure_additive_identical_mz():
    cohort = generate_twin_cohort(AceSpec(1.0, 0.0, 50, 50, seed=0))
    np.testing.assert_array_equal(cohort.mz[0, 0], cohort.mz[0, 1])
    assert np.corrcoef(cohort.mz[0])[0, 1] == pytest.approx(1.0, abs=1e-12)


def test_ace_null_cohort():
    m = 400
    cohort = generate_twin_cohort(AceSpec(0.0, 0.0, m, m, seed=1))
    assert abs(np.corrcoef(cohort.mz[0])[0, 1]) < 3 / np.sqrt(m)
    assert abs(np.corrcoef(cohort.dz[0])[0, 1]) < 3 / np.sqrt(m)


def test_ace_moments():
    spec = AceSpec(0.6, 0.2, 500, 500, seed=2)
    assert spec.gamma_mz[0] == pytest.approx(0.8)
    assert spec.gamma_dz[0] == pytest.approx(0.5)
    cohort = generate_twin_cohort(spec)
    assert np.corrcoef(cohort.mz[0])[0, 1] == pytest.approx(0.8, abs=0.05)
    assert np.corrcoef(cohort.dz[0])[0, 1] == pytest.approx(0.5, abs=0.05)


def test_ace_feature_broadcast_and_validation():
    cohort = generate_twin_cohort(AceSpec(0.3, 0.1, 20, 30, seed=0), feature_count=7)
    assert cohort.mz.shape == (7, 2, 20) and cohort.dz.shape == (7, 2, 30)
    with pytest.raises(ValueError):
        AceSpec(0.8, 0.4, 10, 10)
    with pytest.raises(ValueError):
        AceSpec(-0.1, 0.0, 10, 10)


# ---- cohorts -------------------------------------------------------------


def test_simulate_cohort_layout():
    spec = CohortSpec(n_mz=2, n_dz=1, n_unpaired=1, n_time=80, n_regions=4, dwell=(20, 30), seed=3)
    subjects = simulate_cohort(spec)
    ids = [s.roi.subject_id for s in subjects]
    assert ids == ["mz001_1", "mz001_2", "mz002_1", "mz002_2", "dz001_1", "dz001_2", "solo001"]
    assert subjects[-1].zygosity is None and subjects[0].zygosity == "MZ"
    for s in subjects:
        assert s.roi.values.shape == (80, 4)
        assert s.truth.shape == (80,)
        assert set(np.unique(s.truth)) <= {1, 2, 3}
    again = simulate_cohort(spec)
    for a, b in zip(subjects, again):
        np.testing.assert_array_equal(a.roi.values, b.roi.values)


def test_cohort_spec_dict_round_trip():
    spec = CohortSpec(n_mz=3, dwell=(30, 60), seed=9)
    assert CohortSpec.from_dict(spec.to_dict()) == spec
