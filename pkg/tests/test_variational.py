import numpy as np
import pytest

from sdelab.drifts import catalog, make_drift
from sdelab.errors import ValidationError
from sdelab.grid import RngStream, TimeGrid, nodal_values, sample_sheet, sample_sheets
from sdelab.transport import AdaptedShift
from sdelab.variational import (
    FeedbackPolicy,
    K_direct,
    K_reduced,
    SPSAConfig,
    canonical_minimizer,
    check_causality,
    evaluate_K,
    ito_cross_term,
    minimize_K,
    write_trace_csv,
)


@pytest.fixture
def sheets():
    return sample_sheets(TimeGrid(8, 8), 400, RngStream(0))


def test_zero_shift_zero_drift_is_exactly_zero(sheets):
    rep = evaluate_K(FeedbackPolicy.constant(0.0), make_drift("zero"), sheets)
    assert rep.K_direct == 0.0 and rep.K_reduced == 0.0


def test_zero_shift_constant_drift(sheets):
    c = 1.0
    rep = evaluate_K(FeedbackPolicy.constant(0.0), make_drift("constant", c=c), sheets)
    assert abs(rep.K_direct - 0.5 * c * c) <= 3 * rep.K_direct_stderr
    # K_reduced(0) = c^2 exactly, twice K_direct(0) in expectation
    assert np.isclose(rep.K_reduced, c * c) and rep.K_reduced_stderr == 0.0


def test_split_accessors_agree(sheets):
    pol = FeedbackPolicy.feedback(0.1, -0.3)
    model = make_drift("sign")
    full = evaluate_K(pol, model, sheets)
    assert K_direct(pol, model, sheets).K_direct == full.K_direct
    assert K_reduced(pol, model, sheets).K_reduced == full.K_reduced


def test_K_reduced_is_samplewise_nonnegative(sheets):
    from sdelab.variational import _samples

    for model in catalog():
        shift = FeedbackPolicy.feedback(0.3, 0.7).shift(sheets)
        _, _, reduced, _ = _samples(shift, model, sheets)
        assert np.all(reduced >= 0.0)


def test_constant_family_closed_form_K():
    # u = theta constant: K = 1/2 theta^2 + E f(B + theta t) = 1/2 (theta + c)^2
    g = TimeGrid(8, 8)
    sh = sample_sheets(g, 2000, RngStream(1))
    c, theta = 1.0, -0.4
    rep = evaluate_K(FeedbackPolicy.constant(theta), make_drift("constant", c=c), sh)
    assert abs(rep.K_direct - 0.5 * (theta + c) ** 2) <= 3 * rep.K_direct_stderr
    assert np.isclose(rep.K_reduced, (theta + c) ** 2)


@pytest.mark.parametrize("family", ["constant", "feedback", "tabular"])
def test_policies_are_causal(family):
    g = TimeGrid(8, 8)
    pol = {
        "constant": FeedbackPolicy.constant(0.3),
        "feedback": FeedbackPolicy.feedback(0.2, -1.0),
        "tabular": FeedbackPolicy.tabular().with_theta(np.arange(16.0) / 10),
    }[family]
    sh = sample_sheet(g, RngStream(2))
    for i in range(g.n):
        assert check_causality(pol, sh, i, RngStream(3, 0, (i,)))


def test_non_causal_map_is_detected():
    class Peek(FeedbackPolicy):
        def shift(self, sheets):
            from sdelab.grid import as_batch

            batch, _ = as_batch(sheets)
            u = np.repeat(batch.terminal()[:, None], batch.grid.n, axis=1)
            return AdaptedShift(batch.grid, u)

    g = TimeGrid(4, 4)
    assert not check_causality(Peek("constant", 0.0), sample_sheet(g, RngStream(0)), 0, RngStream(1))


def test_policy_validation():
    with pytest.raises(ValidationError):
        FeedbackPolicy("spline", [0.0])
    with pytest.raises(ValidationError):
        FeedbackPolicy.tabular(edges=[0.0])
    assert FeedbackPolicy.tabular(4, 4).n_params == 16


def test_canonical_minimizer_trivial_and_constant():
    g = TimeGrid(8, 8)
    sh = sample_sheets(g, 5, RngStream(0))
    zero = canonical_minimizer(make_drift("zero"), sh, 10, RngStream(1))
    assert np.all(zero.shift.density == 0)
    c = 0.5
    cm = canonical_minimizer(make_drift("constant", c=c), sh, 10, RngStream(1), tau=1.0 - g.ds)
    J = g.n - 1
    assert np.allclose(cm.shift.density[:, :J], -c)
    expected_X = nodal_values(sh.terminal()) - c * J * g.ds * g.lower_times[None, :, None]
    assert np.allclose(cm.X, expected_X)


def test_canonical_residual_identity():
    # K_reduced per sample equals sum of squared slice-SDE residuals over dt
    g = TimeGrid(8, 8)
    sh = sample_sheets(g, 6, RngStream(0))
    model = make_drift("sign")
    cm = canonical_minimizer(model, sh, 300, RngStream(1), closed_form=False)
    from sdelab.variational import _samples

    _, _, reduced, _ = _samples(cm.shift, model, sh)
    ident = np.sum(cm.residual**2, axis=(1, 2)) / g.dt
    assert np.allclose(reduced, ident, rtol=0, atol=1e-12)
    assert cm.max_residual == np.abs(cm.residual).max()


def test_canonical_K_direct_near_zero_constant():
    g = TimeGrid(8, 8)
    sh = sample_sheets(g, 400, RngStream(4))
    model = make_drift("constant", c=1.0)
    cm = canonical_minimizer(model, sh, 10, RngStream(5))
    rep = evaluate_K(cm.shift, model, sh)
    assert abs(rep.K_direct) <= 3 * rep.K_direct_stderr


def test_spsa_recovers_constant_optimum(tmp_path):
    g = TimeGrid(8, 8)
    sh = sample_sheets(g, 200, RngStream(6))
    theta, trace = minimize_K(make_drift("constant", c=1.0), FeedbackPolicy.constant(0.0), SPSAConfig(), sh, RngStream(7))
    assert abs(theta[0] + 1.0) <= 0.1
    assert trace[-1]["K"] <= trace[0]["K"]
    again, _ = minimize_K(make_drift("constant", c=1.0), FeedbackPolicy.constant(0.0), SPSAConfig(), sh, RngStream(7))
    assert np.array_equal(theta, again)
    path = write_trace_csv(trace, tmp_path / "trace.csv")
    assert path.read_text().splitlines()[0] == "iteration,K,stderr,theta_norm"


def test_spsa_tabular_descends_for_linear_drift():
    g = TimeGrid(8, 8)
    sh = sample_sheets(g, 200, RngStream(8))
    model = make_drift("linear", theta=1.0)
    _, trace = minimize_K(model, FeedbackPolicy.tabular(), SPSAConfig(iterations=300), sh, RngStream(9))
    assert trace[-1]["K"] <= trace[0]["K"] / 10


@pytest.mark.parametrize("model", catalog(), ids=lambda m: m.name)
def test_ito_cross_term_mean_zero(model):
    g = TimeGrid(8, 8)
    sh = sample_sheets(g, 2000, RngStream(10))
    mean, se = ito_cross_term(model, FeedbackPolicy.feedback(0.2, -0.5), sh)
    assert abs(mean) <= 4 * se + 1e-15


def test_canonical_minimizer_full_horizon_constant_is_exact():
    g = TimeGrid(8, 8)
    sh = sample_sheets(g, 50, RngStream(0))
    model = make_drift("constant", c=0.7)
    cm = canonical_minimizer(model, sh, 10, RngStream(1))
    assert np.allclose(cm.shift.density, -0.7)
    assert cm.max_residual < 1e-12
    rep = evaluate_K(cm.shift, model, sh)
    assert abs(rep.K_direct_cv) < 1e-12 and rep.K_reduced < 1e-24
