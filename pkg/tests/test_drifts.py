import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import constant_drift_rho_moment, gauss_hermite_expectation
from sdelab.drifts import (
    CATALOG_KINDS,
    DriftModel,
    RunningMoments,
    audit_hypotheses,
    catalog,
    ito_f,
    make_drift,
    stochastic_integral,
    tilde_b,
)
from sdelab.errors import DomainError, DriftEvaluationError, ValidationError
from sdelab.grid import LowerPath, RngStream, TimeGrid, sample_lower_paths


def test_catalog_contents():
    names = [m.name for m in catalog()]
    assert names == list(CATALOG_KINDS) == ["zero", "constant", "linear", "sign", "window"]


@pytest.mark.parametrize("kind", CATALOG_KINDS)
def test_make_drift_shapes(kind):
    model = make_drift(kind, d=2)
    y = np.random.default_rng(0).normal(size=(5, 7, 2))
    assert model(0.3, y).shape == y.shape


def test_make_drift_rejects_unknown():
    with pytest.raises(ValidationError):
        make_drift("cubic")
    with pytest.raises(ValidationError):
        make_drift("constant", c=1.0, bogus=2)


def test_sign_and_window_values():
    s = make_drift("sign", c=2.0)
    assert s(0.0, np.array([[-1.0], [0.0], [3.0]])).ravel().tolist() == [-2.0, 0.0, 2.0]
    w = make_drift("window", c=1.0, a1=-0.5, a2=0.5)
    assert w(0.0, np.array([[-0.6], [0.0], [0.5]])).ravel().tolist() == [0.0, 1.0, 1.0]


def test_f_by_hand():
    g = TimeGrid(2, 1)
    x = np.array([[1.0], [2.0]])
    lin = make_drift("linear", theta=1.0)
    # states at left points: 0, 1
    assert np.isclose(lin.f(x, g), 0 * 1 + 1 * 2 + 0.5 * 0.5 * (0 + 1))


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.integers(1, 32))
def test_constant_f_closed_form(c, m):
    g = TimeGrid(m, 1)
    x = np.random.default_rng(m).normal(size=(m, 1)) * np.sqrt(g.dt)
    model = make_drift("constant", c=c)
    assert np.isclose(model.f(x, g), c * x.sum() + 0.5 * c * c)


def test_tilde_b_and_integral():
    g = TimeGrid(4, 1)
    w = LowerPath(g, np.ones((4, 1)))
    b = tilde_b(make_drift("linear", theta=2.0), w)
    assert b.density.ravel().tolist() == [0.0, 2.0, 4.0, 6.0]
    assert np.isclose(stochastic_integral(b.density, w.increments), 12.0)


def test_ito_f_saturates():
    g = TimeGrid(1, 1)
    model = make_drift("constant", c=1.0)
    r = ito_f(model, LowerPath(g, np.array([[-1000.0]])))
    assert r.saturated and np.isfinite(r.rho)
    assert not ito_f(model, LowerPath.zero(g)).saturated


def test_non_finite_drift_reports_location():
    g = TimeGrid(4, 1)
    bad = DriftModel.from_callable(lambda t, y: np.where(t > 0.4, np.inf, 0.0) + 0 * y)
    with pytest.raises(DriftEvaluationError) as exc:
        bad.f(np.zeros((4, 1)), g)
    assert exc.value.t == 0.5


def test_running_moments_merge():
    a, b = np.arange(10.0), np.arange(5.0) ** 2
    m = RunningMoments().update(a).merge(RunningMoments().update(b))
    ref = np.concatenate([a, b])
    assert np.isclose(m.mean, ref.mean()) and np.isclose(m.variance, ref.var(ddof=1))


def test_constant_drift_mass_matches_quadrature():
    # f depends on W(1) only: E[e^{-f}] = E[exp(-c Z - c^2/2)] = 1, E[rho^2] = e^{c^2}
    c = 0.7
    assert np.isclose(gauss_hermite_expectation(lambda z: np.exp(-c * z - 0.5 * c * c)), 1.0)
    assert np.isclose(
        gauss_hermite_expectation(lambda z: np.exp(-2 * (c * z + 0.5 * c * c))), constant_drift_rho_moment(c, 1.0)
    )


@pytest.mark.parametrize("model", catalog(), ids=lambda m: m.name)
def test_audit_mass(model):
    st_ = audit_hypotheses(model, 1.0, 20_000, RngStream(1), TimeGrid(16, 1))
    assert st_.h1_consistent
    assert abs(st_.z_rho) <= 3.0


def test_audit_zero_drift_is_exact():
    st_ = audit_hypotheses(make_drift("zero"), 1.0, 200, RngStream(0), TimeGrid(4, 1))
    assert st_.mean_rho == 1.0 and st_.stderr_rho == 0.0 and st_.z_rho == 0.0


def test_audit_input_validation():
    with pytest.raises(DomainError):
        audit_hypotheses(make_drift("zero"), 1.0, 10, RngStream(0), TimeGrid(4, 1))
    with pytest.raises(DomainError):
        audit_hypotheses(make_drift("zero"), 0.0, 1000, RngStream(0), TimeGrid(4, 1))


def test_constant_integrability_moment():
    st_ = audit_hypotheses(make_drift("constant", c=1.0), 1.0, 50_000, RngStream(2), TimeGrid(8, 1))
    assert abs(st_.mean_rho_pow - np.e) <= 3 * st_.stderr_rho_pow


def test_f_is_batched():
    g = TimeGrid(8, 1)
    X = sample_lower_paths(g, 1.0, 6, RngStream(0))
    model = make_drift("sign")
    batched = model.f(X, g)
    assert np.allclose(batched, [model.f(x, g) for x in X])
