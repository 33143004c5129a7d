import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit, logit

from helpers import random_cohort
from oracles import binom_pmf_direct, clopper_pearson_bisect, newton_logistic_oracle
from hprofile.classical import (
    FixedFit,
    binomial_point_and_tail,
    clopper_pearson,
    coefficient_table,
    expected_rate_fixed,
    fit_logistic_mle,
    newton_logistic,
    oe_standardized,
    variation_indices,
    write_table,
    z_outliers,
)
from hprofile.errors import DegenerateInput, InputError, RankDeficient, Separation, ZeroVariance
from hprofile.registry import (
    CalibrationTargets,
    Cohort,
    HospitalTarget,
    N_COVARIATES,
    load_coefficients,
    load_targets,
    massachusetts_cohort,
    synthesize_cohort,
)


def _fit_at(p, slopes=None):
    slopes = np.zeros(N_COVARIATES) if slopes is None else slopes
    return FixedFit(float(logit(p)), slopes, np.eye(N_COVARIATES + 1), True, 0, 0.0, np.ones(N_COVARIATES, bool))


def _flat_cohort(volumes, deaths):
    hosp = np.concatenate([np.full(n, i) for i, n in enumerate(volumes)])
    y = np.concatenate([np.r_[np.ones(d), np.zeros(n - d)] for n, d in zip(volumes, deaths)]).astype(np.int64)
    return Cohort(tuple(str(i + 1) for i in range(len(volumes))), hosp, y, np.zeros((len(y), N_COVARIATES)))


@pytest.fixture(scope="module")
def ma():
    return massachusetts_cohort(1).cohort


@pytest.fixture(scope="module")
def ma_fit(ma):
    return fit_logistic_mle(ma)


# ---------------------------------------------------------------- MLE


def test_mle_invariants(ma, ma_fit):
    assert ma_fit.converged and ma_fit.iterations <= 50
    A = np.column_stack([np.ones(ma.n_patients), ma.X[:, ma_fit.active]])
    grad = A.T @ (ma.death - expit(ma_fit.linear_predictor(ma.X)))
    assert np.max(np.abs(grad)) <= 1e-8
    C = ma_fit.covariance
    idx = np.concatenate([[0], 1 + np.flatnonzero(ma_fit.active)])
    sub = C[np.ix_(idx, idx)]
    assert np.allclose(C, C.T)
    assert np.all(np.linalg.eigvalsh(sub) > 0)


def test_mle_beats_intercept_only(ma, ma_fit):
    r = ma.pooled_rate()
    ll0 = ma.n_patients * (r * math.log(r) + (1 - r) * math.log(1 - r))
    assert ma_fit.loglik >= ll0


def test_expected_average_equals_pooled_rate(ma, ma_fit):
    exp = expected_rate_fixed(ma_fit, ma)
    assert abs(np.sum(exp * ma.volumes()) / ma.n_patients - ma.pooled_rate()) <= 1e-10


def test_intercept_only_closed_form():
    c = _flat_cohort([4603], [101])
    fit = fit_logistic_mle(c)
    assert fit.intercept == pytest.approx(math.log(101 / 4502), abs=1e-10)
    assert round(fit.intercept, 2) == -3.80
    assert not fit.active.any()
    np.testing.assert_allclose(expected_rate_fixed(fit, c), 101 / 4603)


def test_all_survivors_separation():
    with pytest.raises(Separation):
        fit_logistic_mle(_flat_cohort([20], [0]))


def test_rank_deficient():
    c = random_cohort(2, 50, seed=3)
    X = np.array(c.X)
    X[:, 2] = X[:, 1]
    with pytest.raises(RankDeficient):
        fit_logistic_mle(Cohort(c.hospital_ids, c.hospital, c.death, X))


def test_newton_matches_oracle():
    rng = np.random.default_rng(9)
    A = np.column_stack([np.ones(500), rng.normal(size=(500, 4))])
    y = (rng.random(500) < expit(A @ [-0.5, 1, -1, 0.3, 0.2])).astype(float)
    coef, *_ = newton_logistic(A, y)
    np.testing.assert_allclose(coef, newton_logistic_oracle(A, y), atol=1e-6)


def test_recovers_generator_slopes():
    t = load_targets()
    intercept, coef = load_coefficients()
    single = CalibrationTargets((HospitalTarget("1", 100_000, 2.3),), t.prevalence_pct)
    c = synthesize_cohort(single, intercept, coef, seed=11).cohort
    fit = fit_logistic_mle(c)
    se = fit.standard_errors()[1:]
    assert np.all(np.abs(fit.slopes - coef) <= 3 * se)


# ---------------------------------------------------------------- expected rate and z


def test_expected_single_patient_half():
    c = _flat_cohort([1], [1])
    assert expected_rate_fixed(_fit_at(0.5), c)[0] == 0.5


def test_z_hand_example():
    rep = z_outliers(_fit_at(0.02), _flat_cohort([100], [8]))
    assert rep.z[0] == pytest.approx((0.08 - 0.02) / math.sqrt(0.0196 / 100), rel=1e-9)
    assert round(rep.z[0], 2) == 4.29 and rep.flag[0]


def test_z_zero_when_observed_equals_expected():
    rep = z_outliers(_fit_at(0.05), _flat_cohort([100], [5]))
    assert abs(rep.z[0]) < 1e-9 and not rep.flag[0]


def test_z_antisymmetric():
    a = z_outliers(_fit_at(0.1), _flat_cohort([100], [14])).z[0]
    b = z_outliers(_fit_at(0.1), _flat_cohort([100], [6])).z[0]
    assert a == pytest.approx(-b, rel=1e-12)


def test_z_zero_variance():
    with pytest.raises(ZeroVariance):
        fit = FixedFit(-800.0, np.zeros(N_COVARIATES), np.eye(N_COVARIATES + 1), True, 0, 0.0, np.ones(N_COVARIATES, bool))
        z_outliers(fit, _flat_cohort([10], [0]))


def test_z_coefficient_uncertainty_widens(ma, ma_fit):
    plain = z_outliers(ma_fit, ma)
    full = z_outliers(ma_fit, ma, propagate_coef_uncertainty=True)
    assert np.all(np.abs(full.z) <= np.abs(plain.z) + 1e-12)


# ---------------------------------------------------------------- O/E


def test_oe_equal_gives_pooled(ma, ma_fit):
    c = _flat_cohort([50, 50], [2, 2])
    rep = oe_standardized(_fit_at(0.04), c)
    np.testing.assert_allclose(rep.rate_pct, rep.pooled_pct)


def test_oe_zero_deaths_small_hospital():
    c = _flat_cohort([26, 4577], [0, 101])
    rep = oe_standardized(_fit_at(101 / 4603), c, expected=[101 / 4603, 101 / 4603])
    lo, hi = clopper_pearson(0, 26)
    assert round(float(hi), 3) == 0.132
    assert rep.rate_pct[0] == 0.0
    assert rep.upper_pct[0] > 2.19 and not rep.flag[0]


def test_oe_doubling_expected_halves():
    c = _flat_cohort([80, 120], [3, 5])
    a = oe_standardized(_fit_at(0.03), c, expected=[0.03, 0.04])
    b = oe_standardized(_fit_at(0.03), c, expected=[0.06, 0.08])
    np.testing.assert_allclose(b.rate_pct, a.rate_pct / 2)


def test_oe_rejects_zero_expected():
    with pytest.raises(InputError):
        oe_standardized(_fit_at(0.03), _flat_cohort([5], [1]), expected=[0.0])


@pytest.mark.parametrize("k,n", [(0, 26), (1, 26), (5, 40), (40, 40), (15, 381)])
def test_clopper_pearson_matches_bisection(k, n):
    lo, hi = clopper_pearson(k, n)
    olo, ohi = clopper_pearson_bisect(k, n)
    assert float(lo) == pytest.approx(olo, abs=1e-9)
    assert float(hi) == pytest.approx(ohi, abs=1e-9)


def test_table_export(tmp_path, ma, ma_fit):
    path = tmp_path / "z.csv"
    write_table(z_outliers(ma_fit, ma), path)
    lines = path.read_text().splitlines()
    assert lines[0] == "hospital_id,n,observed,expected,statistic,lower,upper,flag"
    assert len(lines) == 14
    assert coefficient_table(ma_fit)[0]["term"] == "intercept"


# ---------------------------------------------------------------- variation


def test_variation_equal_rates():
    v = variation_indices([0.03, 0.03, 0.03], [100, 200, 300])
    assert (v.extremal_quotient, v.coefficient_of_variation, v.systematic_component) == (1.0, 0.0, 0.0)


def test_variation_two_rates():
    assert variation_indices([0.02, 0.04], [100, 100]).extremal_quotient == 2.0


def test_variation_errors():
    with pytest.raises(DegenerateInput):
        variation_indices([0.0, 0.0], [10, 10])
    with pytest.raises(InputError):
        variation_indices([0.1], [10])
    with pytest.raises(InputError):
        variation_indices([0.1, 0.2], [0, 10])


def test_scv_null_below_ninetieth_percentile():
    rng = np.random.default_rng(4)
    n = np.full(50, 90)

    def scv():
        return variation_indices(rng.binomial(n, 0.05) / n, n).systematic_component

    observed = scv()
    null = np.array([scv() for _ in range(2000)])
    assert observed <= np.quantile(null, 0.9)


# ---------------------------------------------------------------- binomial


def test_binomial_worked_examples():
    assert round(binomial_point_and_tail(26, 0.0219, 0).point, 2) == 0.56
    assert round(binomial_point_and_tail(80, 0.0219, 0).point, 2) == 0.17
    assert round(binomial_point_and_tail(381, 0.0219, 15).point, 2) == 0.01


@settings(max_examples=150, deadline=None)
@given(n=st.integers(0, 50), p=st.floats(0, 1), data=st.data())
def test_binomial_against_direct_sum(n, p, data):
    k = data.draw(st.integers(0, n))
    r = binomial_point_and_tail(n, p, k)
    assert r.point == pytest.approx(binom_pmf_direct(n, p, k), abs=1e-12)
    assert r.upper_tail == pytest.approx(sum(binom_pmf_direct(n, p, j) for j in range(k, n + 1)), abs=1e-12)
    assert r.lower_tail == pytest.approx(sum(binom_pmf_direct(n, p, j) for j in range(k + 1)), abs=1e-12)
    assert abs(r.upper_tail + r.lower_tail - r.point - 1) <= 1e-12


def test_binomial_input_checks():
    with pytest.raises(InputError):
        binomial_point_and_tail(5, 0.1, 6)
    with pytest.raises(InputError):
        binomial_point_and_tail(5, 1.1, 1)
