import json
import math
from fractions import Fraction

import numpy as np
import pytest

from aggdiff.diagnostics import (
    ResolutionError,
    classify,
    energy_audit,
    gn_check,
    gn_condition,
    gn_two_step,
    gn_two_step_ratios,
    gronwall_fit,
    hminus1_distance,
    iteration_exponents,
    iteration_recursion,
    measure_iteration_constants,
    moser_closed_form,
    moser_sequence,
    oscillation_decay,
    rescale_field,
    scaling_test,
    theta_limit,
)
from aggdiff.grid import Field, GridSpec, integrate
from aggdiff.initial import bump, gaussian
from aggdiff.selfcheck import random_smooth_field
from aggdiff.solver import Fixed, SolverConfig, run


def theta_at_start(d, m, s):
    # at n = 3 - m: l = 1, n + 1 - l = 3 - m, so theta = ((2-2s)/d + 3 - m) / (1/2 + 1/d)
    return ((2 - 2 * s) / d + 3 - m) / (Fraction(1, 2) + Fraction(1, d))


# --- regime -------------------------------------------------------------------


def test_classify_examples():
    r = classify(3, 2, 1)
    assert r.m_c == Fraction(4, 3) and r.subcritical and r.case_tag == "S_half_m_ge2"
    r = classify(3, 1.5, 1.5)
    assert r.m_c == 1 and r.subcritical and r.case_tag == "S_large"
    r = classify(3, 2.5, 0.3)
    assert r.case_tag == "Unsupported" and not r.supported
    assert classify(3, 1.5, 0.75).case_tag == "S_half_m_lt2"
    assert classify(2, 1.5, 0.4).case_tag == "S_small_m_lt2"
    assert classify(3, 1.2, 1).regime == "supercritical"
    assert classify(3, Fraction(4, 3), 1).regime == "critical"
    # a float typed for 4/3 still lands on the critical line
    assert classify(3, 4 / 3, 1.0).regime == "critical"
    assert classify(3, 4 / 3 + 1e-9, 1.0).regime == "subcritical"


@pytest.mark.parametrize("args", [(4, 2, 1), (3, 1, 1), (3, 2, 0), (3, 2, 1.6)])
def test_classify_rejects(args):
    with pytest.raises(ValueError):
        classify(*args)


def test_classify_json_round_trip():
    d = classify(3, 2, 1).to_dict()
    assert json.loads(json.dumps(d))["m_c_exact"] == "4/3"


# --- Moser sequence and exponents ------------------------------------------------


def test_moser_examples():
    assert moser_sequence(1.5, 1)[1] == 1.5
    assert moser_sequence(1.5, 3)[3] == 4.5
    assert moser_sequence(1.5, 0) == [1.0]
    for m in (Fraction(3, 2), Fraction(11, 10), Fraction(19, 10)):
        seq = moser_sequence(m, 20, exact=True)
        assert all(v == moser_closed_form(m, k) for k, v in enumerate(seq))
        assert all(b > a for a, b in zip(seq, seq[1:]))
    with pytest.raises(ValueError, match="dyadic"):
        moser_sequence(2.0, 3)


def test_iteration_exponents_start_value():
    e = iteration_exponents(3, Fraction(3, 2), Fraction(3, 2))
    assert e.p == Fraction(16, 5) and e.q == Fraction(16, 11)
    assert 1 / e.p + 1 / e.q == 1
    assert e.l == 1
    with pytest.raises(ValueError):
        iteration_exponents(3, 1.5, 1.4)


def test_pq_tend_to_two_monotonically():
    ns = [Fraction(3, 2) + k for k in range(0, 400, 7)]
    ps = [iteration_exponents(3, Fraction(3, 2), n).p for n in ns]
    qs = [iteration_exponents(3, Fraction(3, 2), n).q for n in ns]
    assert all(b < a for a, b in zip(ps, ps[1:])) and all(b > a for a, b in zip(qs, qs[1:]))
    assert abs(ps[-1] - 2) < 0.01 and abs(qs[-1] - 2) < 0.01


def test_theta_matches_closed_form_and_critical_line():
    rng = np.random.default_rng(7)
    for _ in range(50):
        d = int(rng.integers(1, 4))
        s = Fraction(int(rng.integers(1, 50 * d)), 100)
        m_c = 2 - 2 * s / d
        m = m_c + Fraction(int(rng.integers(-200, 201)), 1000)
        if not m > 1 or m >= 3:
            continue
        th = iteration_exponents(d, m, 3 - m, s).theta
        assert th == theta_at_start(d, m, s)
        assert (th < 2) == (m > m_c)


def test_theta_decreasing_to_limit():
    rng = np.random.default_rng(8)
    for _ in range(10):
        d = int(rng.integers(1, 4))
        s = Fraction(int(rng.integers(1, 50 * d)), 100)
        m = Fraction(int(rng.integers(101, 199)), 100)
        ns = [3 - m + k for k in range(0, 200, 5)]
        th = [iteration_exponents(d, m, n, s).theta for n in ns]
        assert all(b < a for a, b in zip(th, th[1:]))
        assert th[-1] > theta_limit(d, s)
        assert float(th[-1] - theta_limit(d, s)) < 0.05


# --- iteration recursion ---------------------------------------------------------


def test_recursion_without_coupling_decays():
    t = np.linspace(0, 3, 301)
    seq = moser_sequence(1.5, 5)
    rep = iteration_recursion(2.0, {"C0": 1.0, "C1": 0.0}, seq, t, B_init=2.0)
    for k in range(1, len(seq)):
        np.testing.assert_allclose(rep.B[k], 2.0 * np.exp(-t / seq[k]), rtol=1e-12)
    assert rep.certified


def test_recursion_constant_source_closed_form():
    t = np.linspace(0, 10, 2001)
    C0 = 4.0
    seq = moser_sequence(1.5, 12)
    rep = iteration_recursion(0.0, (C0, 1.0), seq, t)
    # A_1' + C0 A_1 = 1, A_1(0) = 0
    np.testing.assert_allclose(np.exp(rep.log_A[1, 1:]), -np.expm1(-C0 * t[1:]) / C0, rtol=1e-10)
    assert rep.sup_B[1] == pytest.approx((1 / C0) ** (1 / seq[1]), rel=1e-6)
    assert rep.certified and rep.sup_B[-1] < 1


def test_recursion_nonpositive_decay_is_not_certified():
    t = np.linspace(0, 5, 501)
    rep = iteration_recursion(1.0, (-0.5, 0.05), moser_sequence(1.5, 6), t)
    assert not rep.certified and "growing" in rep.reason


def test_recursion_rejects():
    with pytest.raises(ValueError):
        iteration_recursion(1.0, (1.0, -1.0), [1.0, 1.5], [0.0, 1.0])
    with pytest.raises(ValueError):
        iteration_recursion(1.0, (1.0, 1.0), [1.0, 1.5], [1.0, 0.0])


def test_measured_constant_is_feasible_and_minimal():
    t = np.linspace(0, 1, 50)
    seq = moser_sequence(1.5, 3)
    A = np.array([np.full_like(t, 1.0)] + [np.exp(0.3 * t) * (k + 1) for k in range(1, 4)])
    C1 = measure_iteration_constants(t, A, seq)
    assert C1 > 0
    assert measure_iteration_constants(t, np.ones((4, 50)) * np.exp(-2 * t), seq) == 0.0


# --- scaling ---------------------------------------------------------------------


def test_rescale_layouts():
    g = GridSpec(2, 32, 2.0)
    u = bump(g, 1.0, 0.8, 2)
    assert np.array_equal(rescale_field(u, 1).values, u.values)
    ur = rescale_field(u, 2)
    assert integrate(ur) == pytest.approx(integrate(u), rel=1e-13)
    nested = rescale_field(u, 2.0, "nested")
    assert nested.spec.L == 1.0 and integrate(nested) == pytest.approx(integrate(u), rel=1e-13)
    with pytest.raises(ValueError):
        rescale_field(u, 1.5)
    with pytest.raises(ValueError):
        rescale_field(u, 2, "other")


def test_scaling_identity_r1_and_rejects():
    g = GridSpec(1, 64, 2.0)
    reg = classify(1, Fraction(3, 2), Fraction(1, 4))
    rep = scaling_test(bump(g, 1.0, 0.6, 4), 1, reg, 0.01, 0.005)
    assert rep.discrepancy == 0.0
    with pytest.raises(ValueError):
        scaling_test(bump(g, 1.0, 0.6, 4), 2, classify(3, 2, 1), 0.01, 0.005)


# --- Gagliardo-Nirenberg -------------------------------------------------------------


def test_gn_identity_case():
    g = GridSpec(3, 16, 2.0)
    rng = np.random.default_rng(1)
    for _ in range(5):
        u = random_smooth_field(g, rng)
        assert gn_check(u, 0.0, 3.0, 2.0, 3.0, 0.0) == pytest.approx(1.0, rel=1e-13)


def test_gn_condition_sets_and_rejects():
    assert gn_condition(3, 0.5, 2.0, 2.0, 1.5, 2 / 3) == "standard"
    assert gn_condition(3, 0.5, 2.0, 2.0, 1.0, 0.8) == "q_one"
    assert gn_condition(3, 0.0, 3.0, 2.0, 3.0, 0.0) == "standard"
    assert gn_condition(3, 0.0, 1.0, 2.0, 1.0, 0.0) == "classical"
    with pytest.raises(ValueError):
        gn_condition(3, 0.5, 2.0, 2.0, 1.5, 0.7)
    with pytest.raises(ValueError):
        gn_two_step(3, 0.5, 2.0, 2.0, 2 / 3)


def test_gn_two_step_composition():
    g = GridSpec(3, 32, 4.0)
    ts = gn_two_step(3, 0.5, 2.0, 2.0, 0.8)
    assert ts.alpha1 + ts.beta - ts.alpha1 * ts.beta == pytest.approx(0.8, abs=1e-12)
    rows = np.array([gn_two_step_ratios(gaussian(g, mass, sig), ts)
                     for sig in (0.3, 0.5, 0.7, 0.9) for mass in (0.5, 4.0)])
    np.testing.assert_allclose(rows[:, 2], rows[:, 0] * rows[:, 1] ** (1 - ts.alpha1), rtol=1e-12)
    composed = rows[:, 0].max() * rows[:, 1].max() ** (1 - ts.alpha1)
    assert rows[:, 2].max() <= composed * (1 + 1e-12) and composed <= 3 * rows[:, 2].max()


def test_gn_ratio_dilation_invariant():
    g = GridSpec(3, 32, 4.0)
    ratios = [gn_check(gaussian(g, 1.0, sig), 0.5, 2.0, 2.0, 1.5, 2 / 3) for sig in (0.35, 0.5, 0.7)]
    assert max(ratios) / min(ratios) < 1.02


# --- H^-1 distance and Gronwall ------------------------------------------------------------


def test_hminus1_single_mode_closed_form():
    g = GridSpec(3, 16, math.pi)
    x, y, z = g.mesh()
    delta = 0.3
    base = Field(g, np.full(g.shape, 1.0))
    bumped = Field(g, 1.0 + delta * np.sin(x + 2 * z))
    eta = hminus1_distance(bumped, base)
    assert eta == pytest.approx(delta**2 * (2 * g.L) ** 3 / (2 * 5.0), rel=1e-12)
    assert hminus1_distance(base, base) == 0.0


def test_hminus1_metric_properties():
    g = GridSpec(2, 32, 2.0)
    rng = np.random.default_rng(4)
    for _ in range(10):
        fs = [random_smooth_field(g, rng) for _ in range(3)]
        fs = [f * (1.0 / integrate(f)) for f in fs]
        d = lambda a, b: math.sqrt(hminus1_distance(a, b))
        assert d(fs[0], fs[1]) == pytest.approx(d(fs[1], fs[0]), rel=1e-12)
        assert d(fs[0], fs[2]) <= d(fs[0], fs[1]) + d(fs[1], fs[2]) + 1e-10
    with pytest.raises(ValueError):
        hminus1_distance(fs[0], fs[1] * 2.0)


def test_gronwall_fit_exact_exponential():
    t = np.linspace(0, 1, 21)
    fit = gronwall_fit(t, 0.5 * np.exp(-0.7 * t))
    assert fit.C == pytest.approx(-0.7, rel=1e-10) and fit.max_deviation < 1e-12
    assert json.loads(fit.to_json())["n_points"] == 21
    with pytest.raises(ValueError):
        gronwall_fit(t, np.zeros_like(t))


# --- oscillation ----------------------------------------------------------------------------


def test_oscillation_constant_field_is_zero():
    g = GridSpec(3, 32, 2.0)
    c = Field(g, np.full(g.shape, 2.0))
    rep = oscillation_decay([(0.0, c)], (0, 0, 0), 0.5, 0.9, 1.0)
    assert all(o == 0 for o in rep.osc) and rep.exponent is None


def test_oscillation_recovers_synthetic_exponent():
    g = GridSpec(3, 64, 2.0)
    v = Field(g, g.radius() ** 0.5)
    rep = oscillation_decay([(0.0, v), (1.0, v)], (0, 0, 0), 0.7, 0.9, 1.6, K=4)
    assert rep.exponent == pytest.approx(0.5, abs=0.05)
    assert json.loads(rep.to_json())["k"] == [0, 1, 2, 3, 4]
    assert all(o <= e for o, e in zip(rep.osc, rep.osc_exact))


def test_oscillation_resolution_errors():
    g = GridSpec(3, 32, 2.0)
    v = Field(g, g.radius() ** 0.5)
    with pytest.raises(ResolutionError):
        oscillation_decay([(0.0, v)], (0, 0, 0), 0.5, 0.9, 1.0, K=4)
    with pytest.raises(ResolutionError):
        oscillation_decay([(0.0, v)], (0, 0, 0), 0.5, 0.9, 1.0, K=1, t0=5.0)


# --- energy audit -----------------------------------------------------------------------------------


@pytest.mark.parametrize("d,n", [(1, 128), (3, 32)])
def test_energy_audit_porous_medium_dissipates(d, n):
    g = GridSpec(d, n, 2.0)
    cfg = SolverConfig(m=2.0, t_end=0.2, dt_policy=Fixed(0.002), drift_enabled=False, epsilon=0.0,
                       energy_n=(2.0,), snapshot_every=5)
    _, series = run(bump(g, 1.0, 1.0, 2), cfg, None)
    audit = energy_audit(series, 2.0, method="interval")
    assert np.all(audit.rhs == 0)
    assert np.all(audit.residual <= 1e-12 * series["int_u2"].max()) and audit.ok
    centred = energy_audit(series, 2.0)
    centred.attach(series)
    assert "energy_lhs_2" in series.columns


def test_energy_audit_constant_state():
    g = GridSpec(2, 16, 1.0)
    cfg = SolverConfig(m=2.0, t_end=0.1, dt_policy=Fixed(0.01), drift_enabled=False, epsilon=0.0,
                       energy_n=(2.0,), snapshot_every=1, boundary_tol=None)
    _, series = run(Field(g, np.full(g.shape, 0.5)), cfg, None)
    for method in ("centered", "interval"):
        audit = energy_audit(series, 2.0, method=method)
        assert np.all(np.abs(audit.lhs) < 1e-12) and np.all(audit.rhs == 0)


def test_energy_audit_rejects():
    g = GridSpec(1, 32, 2.0)
    cfg = SolverConfig(m=2.0, t_end=0.01, dt_policy=Fixed(0.01), drift_enabled=False, epsilon=0.0)
    _, series = run(bump(g, 1.0, 0.5, 2), cfg, None)
    with pytest.raises(ValueError):
        energy_audit(series, 2.0)
    with pytest.raises(ValueError):
        energy_audit(series, 1.0, classify(1, 1.5, 0.25))
