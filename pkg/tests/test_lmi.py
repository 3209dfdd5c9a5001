import numpy as np
import pytest

from ddrom import lmi
from ddrom.dictionary import DictionarySpec
from ddrom.experiment import ExperimentConfig, collect
from ddrom.plant import benchmark, benchmark_dictionary, linear_in_dictionary


def scalar_batch(kind, a, T=6):
    spec = DictionarySpec.build(1)
    plant = linear_in_dictionary(kind, [[a]], [[0.0]], spec)
    return collect(plant, spec, ExperimentConfig(T=T, tau=0.1, seed=4, oracle_derivatives=True))


def test_coordinate_only_batch_has_no_q2():
    p = linear_in_dictionary("continuous", [[-1.0, 0.0], [0.3, -2.0]], [[1.0], [0.0]],
                             DictionarySpec.build(2))
    b = collect(p, DictionarySpec.build(2), ExperimentConfig(T=6, tau=0.1, seed=1,
                                                             oracle_derivatives=True))
    prob = lmi.assemble_ct(b, 1.0)
    assert [v.name for v in prob.variables] == ["H", "Phi"]
    assert [e.label for e in prob.equalities] == ["8c"]
    sol = lmi.solve(prob)
    assert sol.Q2 is None
    assert sol.max_equality_residual() < 1e-9
    assert sol.min_lmi_margin() >= -1e-7


@pytest.mark.parametrize("kappa_hat", [0.5, 1.0, 1.9, 2.0])
def test_scalar_decay_feasible_up_to_two(kappa_hat):
    b = scalar_batch("continuous", -1.0)
    sol = lmi.solve(lmi.assemble_ct(b, kappa_hat))
    assert sol.max_equality_residual() < 1e-9
    assert sol.min_lmi_margin() >= -1e-7
    # D H = Phi and X+ = -D, so the LMI value is (kappa_hat - 2) Phi
    Phi = sol.Phi[0, 0]
    np.testing.assert_allclose(b.D @ sol.H, [[Phi]], atol=1e-9)
    if kappa_hat == 2.0:
        assert sol.min_lmi_margin() < 1e-5


def test_scalar_decay_infeasible_at_ten():
    b = scalar_batch("continuous", -1.0)
    with pytest.raises(lmi.InfeasibleError) as info:
        lmi.solve(lmi.assemble_ct(b, 10.0))
    assert info.value.family == "8d"
    assert "8d" in str(info.value)


def test_scalar_half_dt_boundary():
    # x+ = 0.5 x: Schur form kappa Phi - (1 + mu) 0.25 Phi >= 0 is tight at kappa=0.5, mu=1
    b = scalar_batch("discrete", 0.5)
    sol = lmi.solve(lmi.assemble_dt(b, 0.5, 1.0))
    assert -1e-7 <= sol.min_lmi_margin() < 1e-5
    XpH = b.Xplus @ sol.H
    assert lmi.schur_margin_dt(XpH, sol.Phi, 0.5, 1.0) == pytest.approx(0.0, abs=1e-7)
    with pytest.raises(lmi.InfeasibleError):
        lmi.solve(lmi.assemble_dt(b, 0.4, 1.0))


def test_zero_successor_block_diagonal():
    b = scalar_batch("discrete", 0.0)
    assert not b.Xplus.any()
    sol = lmi.solve(lmi.assemble_dt(b, 0.1, 1.0))
    assert sol.min_lmi_margin() > 0


def test_empty_lmi_list_is_least_squares(rng):
    A = rng.standard_normal((4, 3))
    V0 = rng.standard_normal((3, 2))
    prob = lmi.FeasibilityProblem((lmi.Variable("V", (3, 2)),),
                                  (lmi.Equality("e", (lmi.Term("V", A),), A @ V0),), ())
    sol = lmi.solve(prob)
    np.testing.assert_allclose(sol.values["V"], V0, atol=1e-10)
    assert sol.max_equality_residual() < 1e-10


def test_inconsistent_equalities_name_the_condition():
    A = np.array([[1.0], [1.0]])
    prob = lmi.FeasibilityProblem((lmi.Variable("V", (1, 1)),),
                                  (lmi.Equality("bad", (lmi.Term("V", A),), np.array([[1.0], [2.0]])),),
                                  ())
    with pytest.raises(lmi.InfeasibleError, match="bad"):
        lmi.solve(prob)


def test_undeclared_variable_rejected():
    with pytest.raises(ValueError):
        lmi.FeasibilityProblem((lmi.Variable("V", (1, 1)),),
                               (lmi.Equality("e", (lmi.Term("W"),), np.zeros((1, 1))),), ())


def test_assembly_argument_checks():
    b = scalar_batch("continuous", -1.0)
    with pytest.raises(ValueError):
        lmi.assemble_ct(b, 0.0)
    with pytest.raises(ValueError):
        lmi.assemble_dt(b, 0.5, 1.0)
    bd = scalar_batch("discrete", 0.5)
    with pytest.raises(ValueError):
        lmi.assemble_dt(bd, 1.0, 1.0)
    with pytest.raises(ValueError):
        lmi.assemble_dt(bd, 0.5, 0.0)


def test_schur_equivalence_random(rng):
    b = collect(benchmark("pendulum_dt"), benchmark_dictionary("pendulum_dt"),
                ExperimentConfig(T=15, seed=2))
    checked = 0
    while checked < 100:
        n = 4
        L = rng.standard_normal((n, n))
        Phi = L @ L.T + 0.1 * np.eye(n)
        H = rng.standard_normal((b.T, n)) * rng.uniform(0.01, 1.0)
        kappa, mu = rng.uniform(0.05, 0.95), rng.uniform(0.1, 3.0)
        schur = lmi.schur_margin_dt(b.Xplus @ H, Phi, kappa, mu)
        if abs(schur) < 1e-6:
            continue
        prob = lmi.assemble_dt(b, kappa, mu)
        block = lmi.residuals(prob, {"Q2": np.zeros((b.T, 8)), "H": H, "Phi": Phi})["lmi:22d"]
        # independent block assembly
        Y = b.Xplus @ H
        M = np.block([[Phi / (1 + mu), Y], [Y.T, kappa * Phi]])
        assert block == pytest.approx(np.linalg.eigvalsh(M)[0], abs=1e-9)
        assert (schur >= 0) == (block >= 0)
        checked += 1


def test_residuals_of_planted_solution():
    b = scalar_batch("continuous", -1.0)
    prob = lmi.assemble_ct(b, 1.0)
    H = np.linalg.pinv(b.D) * 2.0
    res = lmi.residuals(prob, {"H": H, "Phi": np.array([[2.0]])})
    assert res["eq:8c"] < 1e-12
    assert res["lmi:8d"] == pytest.approx(2.0, rel=1e-9)  # -(kappa_hat - 2) Phi
    assert res["min_eig:Phi"] == 2.0


def test_dump_triplets_round_trip(tmp_path):
    b = scalar_batch("continuous", -1.0, T=4)
    prob = lmi.assemble_ct(b, 1.0)
    path = tmp_path / "prob.txt"
    lmi.dump_triplets(prob, path)
    layout = lmi._Layout(prob)
    A, rhs, _ = lmi._equality_system(prob, layout)
    A2, rhs2 = np.zeros_like(A), np.zeros_like(rhs)
    lmis = 0
    for line in path.read_text().splitlines():
        if line.startswith("#"):
            lmis += "lmi" in line and "label=" in line
            continue
        tag, *vals = line.split()
        if tag == "eq":
            A2[int(vals[0]), int(vals[1])] = float(vals[2])
        elif tag == "eqrhs":
            rhs2[int(vals[0])] = float(vals[1])
    np.testing.assert_array_equal(A2, A)
    np.testing.assert_array_equal(rhs2, rhs)
    assert lmis == 1


@pytest.mark.parametrize("name,prefix", [("ct10", "8"), ("dt10", "22"),
                                         ("pendulum_ct", "8"), ("pendulum_dt", "22")])
def test_benchmark_residuals(built, name, prefix):
    res = built(name).red.residuals
    eqs = {k: v for k, v in res.items() if k.startswith("eq:")}
    assert set(eqs) == {f"eq:{prefix}{c}" for c in "abce"}
    assert max(eqs.values()) <= 1e-6
    assert res[f"lmi:{prefix}d"] >= -1e-7
    assert res["min_eig:Phi"] > 0
