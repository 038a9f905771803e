import csv

import numpy as np
import pytest

from sdelab.drifts import make_drift
from sdelab.errors import DomainError, ValidationError
from sdelab.grid import LowerPath, TimeGrid, sample_lower_paths
from sdelab.heat import PathFunctional, exp_neg_f
from sdelab.regularization import (
    ConditioningBasis,
    RegularizedFunctional,
    build_f_n,
    conditional_project,
    convergence_report,
    extract_lower_drift,
    extract_lower_drift_batch,
    haar_basis,
    ou_smooth,
    paired_scores,
)

from conftest import within
from oracles import constant_drift_f_n


def linear_functional(h):
    return PathFunctional(fn=lambda x: np.einsum("...kj,kj->...", x, h))


@pytest.mark.parametrize("q", [0, 1, 3, 8])
def test_haar_projector_is_orthogonal_projection(q):
    g = TimeGrid(8, 8)
    P = haar_basis(g, q).projector()
    assert np.allclose(P, P.T, atol=1e-14)
    assert np.allclose(P @ P, P, atol=1e-13)
    assert np.isclose(np.trace(P), q)


def test_haar_first_vector_is_constant_density():
    g = TimeGrid(8, 8, 2)
    b = haar_basis(g, 2)
    assert np.allclose(b.vectors[0, :, 0], 1.0)
    assert np.allclose(b.vectors[1, :, 1], 1.0)


def test_haar_needs_power_of_two():
    with pytest.raises(ValidationError):
        haar_basis(TimeGrid(6, 6), 2)


def test_haar_q_out_of_range():
    with pytest.raises(DomainError):
        haar_basis(TimeGrid(4, 4), 5)


def test_non_orthonormal_basis_rejected():
    g = TimeGrid(4, 4)
    with pytest.raises(ValidationError):
        ConditioningBasis(g, 2.0 * np.ones((1, 4, 1)))


def test_project_matches_projector_matrix(rng):
    g = TimeGrid(8, 8)
    b = haar_basis(g, 5)
    x = rng.normal((3, 8, 1))
    assert np.allclose(b.project(x).reshape(3, -1), x.reshape(3, -1) @ b.projector(), atol=1e-14)


def test_ou_smooth_at_zero_time_is_identity(rng):
    g = TimeGrid(4, 4)
    w = LowerPath(g, rng.normal(g.path_shape))
    F = exp_neg_f(make_drift("sign"), g)
    value, se = ou_smooth(F, 0.0, w, 100, rng)
    assert value == F(w) and se == 0.0


def test_ou_smooth_scales_first_chaos(rng):
    g = TimeGrid(8, 8)
    h = rng.normal(g.path_shape)
    w = LowerPath(g, rng.normal(g.path_shape))
    F = linear_functional(h)
    value, _ = ou_smooth(F, 0.3, w, 64, rng.child(1))
    assert np.isclose(value, np.exp(-0.3) * F(w), atol=1e-12)


def test_ou_smooth_rejects_negative_time(rng):
    g = TimeGrid(4, 4)
    with pytest.raises(DomainError):
        ou_smooth(linear_functional(np.ones(g.path_shape)), -0.1, LowerPath.zero(g), 10, rng)


def test_conditional_project_full_basis_exact(rng):
    g = TimeGrid(4, 4)
    w = LowerPath(g, rng.normal(g.path_shape))
    F = exp_neg_f(make_drift("window"), g)
    value, se = conditional_project(F, haar_basis(g, 4), w, 100, rng)
    assert value == F(w) and se == 0.0


def test_conditional_project_linear_functional(rng):
    g = TimeGrid(8, 8)
    b = haar_basis(g, 3)
    h = rng.normal(g.path_shape)
    w = LowerPath(g, rng.normal(g.path_shape))
    value, _ = conditional_project(linear_functional(h), b, w, 32, rng.child(1))
    expected = float(np.sum(b.project(w.increments) * h))
    assert np.isclose(value, expected, atol=1e-12)


def test_conditional_project_empty_basis_gives_mass_one(rng):
    g = TimeGrid(8, 8)
    F = exp_neg_f(make_drift("constant", c=0.7), g)
    value, se = conditional_project(F, haar_basis(g, 0), LowerPath.zero(g), 20000, rng)
    assert within(value, 1.0, se)


@pytest.mark.parametrize("n", [1, 4, 16])
def test_nested_matches_constant_drift_closed_form(n, rng):
    g = TimeGrid(8, 8)
    c = 0.8
    reg = RegularizedFunctional.build(make_drift("constant", c=c), g, n)
    W = sample_lower_paths(g, 1.0, 4, rng.child(0))
    value, se = reg.nested(W, rng.child(1))
    ref = np.exp(-np.array([constant_drift_f_n(c, W1, n) for W1 in W.sum(axis=(1, 2))]))
    assert np.all(np.abs(value - ref) <= 3.5 * se + 1e-12)


@pytest.mark.parametrize("n", [1, 4])
def test_collapsed_matches_constant_drift_closed_form(n, rng):
    g = TimeGrid(8, 8)
    c = -0.6
    reg = RegularizedFunctional.build(make_drift("constant", c=c), g, n)
    W = sample_lower_paths(g, 1.0, 4, rng.child(0))
    logv, rel = reg.collapsed(W, rng.child(1), n_draws=20000)
    ref = -np.array([constant_drift_f_n(c, W1, n) for W1 in W.sum(axis=(1, 2))])
    assert np.all(np.abs(np.exp(logv - ref) - 1.0) <= 3.5 * rel + 1e-12)


def test_nested_and_collapsed_agree_for_sign_drift(rng):
    g = TimeGrid(8, 8)
    reg = RegularizedFunctional.build(make_drift("sign"), g, 4, n_mid=512, n_inner=128)
    W = sample_lower_paths(g, 1.0, 3, rng.child(0))
    v_n, se_n = reg.nested(W, rng.child(1))
    logv, rel = reg.collapsed(W, rng.child(2), n_draws=40000)
    v_c = np.exp(logv)
    assert np.all(v_n > 0)
    assert np.all(np.abs(v_n - v_c) <= 4.0 * np.hypot(se_n, rel * v_c))


def test_build_f_n_reports_unit_mass(rng):
    g = TimeGrid(8, 8)
    w = LowerPath(g, rng.normal(g.path_shape) * np.sqrt(g.dt))
    fn, diag = build_f_n(make_drift("linear", theta=1.0), 4, w, rng.child(1), n_mid=128, n_inner=32, mass_draws=4000)
    assert np.isfinite(fn)
    assert diag["q"] == 4 and diag["smoothing_time"] == 0.25
    assert within(diag["mass"], 1.0, diag["mass_stderr"], k=3.5)


@pytest.mark.parametrize("k1", [0, 3, 7])
def test_extracted_drift_constant_closed_form(k1, rng):
    g = TimeGrid(8, 8)
    c, n = 0.9, 4
    reg = RegularizedFunctional.build(make_drift("constant", c=c), g, n)
    prefix = rng.normal((k1, 1)) * np.sqrt(g.dt)
    lam, se = extract_lower_drift(reg, prefix, 20000, rng.child(1))
    assert within(lam[0], np.exp(-1.0 / n) * c, se[0], k=3.5)


def test_extraction_rejects_full_prefix(rng):
    g = TimeGrid(4, 4)
    reg = RegularizedFunctional.build(make_drift("constant"), g, 2)
    with pytest.raises(DomainError):
        extract_lower_drift_batch(reg, np.zeros((1, 4, 1)), 100, rng)


def test_extraction_shared_and_independent_agree_in_law(rng):
    g = TimeGrid(4, 4)
    reg = RegularizedFunctional.build(make_drift("linear", theta=1.0), g, 4)
    prefixes = np.tile(np.array([[0.3], [-0.1]]), (64, 1, 1))
    lam_s, se_s = extract_lower_drift_batch(reg, prefixes, 2000, rng.child(0), shared=True)
    lam_i, _ = extract_lower_drift_batch(reg, prefixes, 2000, rng.child(1), shared=False)
    assert np.ptp(lam_s) == 0.0
    assert np.ptp(lam_i) > 0.0
    assert within(lam_i.mean(), lam_s[0, 0], se_s[0, 0], k=4.0)


def test_paired_scores_constant_drift_projection(rng):
    g = TimeGrid(8, 8)
    c, n = 0.5, 4
    reg = RegularizedFunctional.build(make_drift("constant", c=c), g, n)
    W = sample_lower_paths(g, 1.0, 3, rng.child(0))
    ps = paired_scores(reg, 0.5, W, 20000, rng.child(1))
    val, se = ps.vdot_n_along(np.ones(g.path_shape))
    assert np.all(np.abs(val - np.exp(-1.0 / n) * c) <= 3.5 * se)
    assert np.all(ps.distance >= 0.0)


def test_convergence_report_csv(tmp_path, rng):
    g = TimeGrid(8, 8)
    probes = sample_lower_paths(g, 0.5, 2, rng.child(0))
    rep = convergence_report(make_drift("sign"), [1, 4], probes, [0.25, 0.5], g, 2000, rng.child(1), lp_paths=200)
    assert rep.distances.shape == (2, 2)
    assert np.all(rep.lp_distance >= 0)
    path = rep.write_csv(tmp_path / "conv.csv")
    rows = list(csv.DictReader(path.open()))
    assert len(rows) == 4
    assert set(rows[0]) == {"n", "probe", "distance", "stderr"}


def test_build_rejects_nonpositive_n():
    with pytest.raises(DomainError):
        RegularizedFunctional.build(make_drift("constant"), TimeGrid(4, 4), 0)
