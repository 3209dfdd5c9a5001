import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ddrom import mor_dt
from ddrom.dictionary import DictionarySpec
from ddrom.experiment import ExperimentConfig, collect_pair
from ddrom.plant import linear_in_dictionary
from ddrom.reduction import ReductionConfig, compute_psi, interface, rho_residual, sf_value


@pytest.fixture(scope="module")
def scalar_dt():
    spec = DictionarySpec.build(1)
    plant = linear_in_dictionary("discrete", [[0.5]], [[1.0]], spec)
    e, z = collect_pair(plant, spec, ExperimentConfig(T=6, seed=5))
    cfg = ReductionConfig(nhat=1, kappa=0.5, mu=1.0, fixed=[[0.5]], gamma=0.1)
    return plant, (e, z), mor_dt.reduce_dt(e, z, spec, cfg)


def test_scalar_hand_solution(scalar_dt):
    plant, _, red = scalar_dt
    # 0.5 R1 = R1 0.5 - Bdata Xi with Bdata = 1 forces Xi = 0
    np.testing.assert_allclose(red.Bdata, [[1.0]], atol=1e-9)
    assert abs(red.Xi[0, 0]) < 1e-9
    assert red.rho < 1e-12
    assert max(v for k, v in red.residuals.items() if k.startswith("eq:")) < 1e-9
    # successor of the coupled pair: 0.5 x + u
    x, xh, uh = np.array([[0.3]]), np.array([[-0.4]]), np.array([[0.9]])
    u = interface(red, x, xh, uh)
    np.testing.assert_allclose(mor_dt.successor(red, plant, x, xh, uh), 0.5 * x + u, atol=1e-12)
    np.testing.assert_allclose(mor_dt.successor(red, None, x, xh, uh), 0.5 * x + u, atol=1e-9)


def test_relation_cert_reference_values():
    c = mor_dt.relation_cert({"rho": 0.0022, "kappa": 0.5, "alpha": 0.3578}, 0.99, 36)
    assert c.epsilon == pytest.approx(0.6687, abs=5e-4)
    c = mor_dt.relation_cert({"rho": 0.00032, "kappa": 0.45, "alpha": 0.0056}, 0.99, 1)
    assert c.epsilon == pytest.approx(0.32395, abs=5e-5)
    assert mor_dt.relation_cert({"rho": 1.0, "kappa": 0.5, "alpha": 1.0}, 0.9, 0).epsilon == 0.0


def test_relation_cert_flags_inferred_nu():
    c = mor_dt.relation_cert({"rho": 0.0022, "kappa": 0.5, "alpha": 0.3578}, 0.99, 36, True)
    assert any("inferred" in line for line in c.lines())
    c = mor_dt.relation_cert({"rho": 0.0022, "kappa": 0.5, "alpha": 0.3578}, 0.99, 36)
    assert not any("inferred" in line for line in c.lines())


def test_relation_cert_argument_checks():
    p = {"rho": 0.1, "kappa": 0.5, "alpha": 1.0}
    for eta in (0.0, 1.0, 1.5):
        with pytest.raises(ValueError):
            mor_dt.relation_cert(p, eta, 1.0)
    with pytest.raises(ValueError):
        mor_dt.relation_cert(p, 0.9, -1.0)
    with pytest.raises(ValueError):
        mor_dt.relation_cert({"rho": 0.1, "kappa": 1.0, "alpha": 1.0}, 0.9, 1.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-6, 10), st.floats(0.01, 0.99), st.floats(1e-3, 10), st.floats(0.01, 0.99),
       st.floats(0, 100))
def test_epsilon_identity(rho, kappa, alpha, eta, nu):
    c = mor_dt.relation_cert({"rho": rho, "kappa": kappa, "alpha": alpha}, eta, nu)
    assert c.epsilon ** 2 * alpha == pytest.approx(c.rho_bar, rel=1e-12, abs=1e-300)
    assert c.rho_bar == pytest.approx(rho * nu / ((1 - kappa) * eta), rel=1e-12, abs=1e-300)


def test_nu_from_box():
    assert mor_dt.nu_from_box((-6, 6), 2) == 72.0
    assert mor_dt.nu_from_box(([-1, -6], [2, 1]), 2) == 40.0


@pytest.mark.parametrize("name", ["dt10", "pendulum_dt"])
def test_benchmark_reduction(built, name):
    b = built(name)
    red = b.red
    n, d = b.spec.state_dim, b.spec.size
    assert red.R1.shape == (n, 2) and red.R2.shape == (d - n, 2)
    assert red.alpha > 0 and red.rho > 0
    assert red.kappa == b.cfg.reduction.kappa
    for source in (None, b.plant):
        rep = mor_dt.verify_sf_dt(red, source, 10_000, 0, **b.boxes)
        assert rep.passed, rep.lines()
    bad = mor_dt.verify_sf_dt(red, b.plant, 10_000, 0, rho=0.01 * red.rho, **b.boxes)
    assert bad.violations_decrease > 0


@pytest.mark.parametrize("name", ["dt10", "pendulum_dt"])
def test_relation_invariance_and_falsification(built, name):
    b = built(name)
    nu, _ = b.cfg.nu()
    cert = mor_dt.relation_cert(b.red, b.cfg.reduction.eta, nu)
    rep = mor_dt.check_relation_invariance(b.red, cert, 10_000, 0, b.plant, b.cfg.verification.xhat_box)
    assert rep.passed, rep.lines()
    bad = mor_dt.check_relation_invariance(b.red, cert, 10_000, 0, b.plant,
                                           b.cfg.verification.xhat_box, rho_bar=cert.rho_bar / 2)
    assert bad.violations_invariance > 0


def test_zero_error_pairs_stay_below_rho_nu(built, rng):
    b = built("dt10")
    red = b.red
    Xh = rng.uniform(-10, 10, (2, 500))
    Uh = rng.uniform(-6, 6, (2, 500))
    Sn = sf_value(red, mor_dt.successor(red, b.plant, red.R1 @ Xh, Xh, Uh),
                  red.Ahat @ Xh + red.Bhat @ Uh)
    assert np.all(Sn <= red.rho * np.sum(Uh ** 2, axis=0) * (1 + 1e-6) + 1e-9)


def test_psi_minimal(built, rng):
    red = built("dt10").red
    base = rho_residual(red.P, red.Bdata, red.Psi, red.R1, red.Bhat)
    np.testing.assert_allclose(compute_psi(red.P, red.Bdata, red.R1, red.Bhat), red.Psi)
    for _ in range(100):
        d = rng.standard_normal(red.Psi.shape) * 10.0 ** rng.uniform(-4, 0)
        assert base <= rho_residual(red.P, red.Bdata, red.Psi + d, red.R1, red.Bhat) * (1 + 1e-12)


def test_simulate_pair_dt_matched_zero_input(built):
    b = built("dt10")
    _, X, Xh, _ = mor_dt.simulate_pair_dt(b.red, b.plant, [1.0, -2.0], lambda k, x, xh: np.zeros(2), 30)
    assert np.max(np.linalg.norm(X - b.red.R1 @ Xh, axis=0)) < 1e-6
    assert X.shape == (10, 31) and Xh.shape == (2, 31)


def test_reduce_dt_argument_checks(scalar_dt):
    _, (e, z), _ = scalar_dt
    spec = DictionarySpec.build(1)
    for cfg in (ReductionConfig(nhat=1, kappa=None), ReductionConfig(nhat=1, kappa=1.0),
                ReductionConfig(nhat=1, kappa=0.5, mu=0.0)):
        with pytest.raises(ValueError):
            mor_dt.reduce_dt(e, z, spec, cfg)


def test_certificate_recomputes_from_reduction(built):
    red = built("pendulum_dt").red
    c = mor_dt.relation_cert(red, 0.99, 1.0)
    assert c.rho_bar == pytest.approx(red.rho / ((1 - red.kappa) * 0.99))
    assert c.epsilon == pytest.approx(math.sqrt(c.rho_bar / red.alpha))
