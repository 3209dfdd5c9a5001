import numpy as np
import pytest

from ddrom.dictionary import DictionarySpec, ct10_dictionary
from ddrom.experiment import (DataRichnessError, ExperimentConfig, TrajectoryBatch, collect,
                              collect_pair, default_sample_count, rank_report, read_batch,
                              right_pinv, solve_qbar, write_batch)
from ddrom.plant import benchmark, benchmark_dictionary, linear_in_dictionary


def row_reduction_rank(M, tol=1e-9):
    """Independent rank oracle: Gaussian elimination with partial pivoting."""
    A = np.array(M, dtype=float)
    r = 0
    for c in range(A.shape[1]):
        if r == A.shape[0]:
            break
        p = r + int(np.argmax(np.abs(A[r:, c])))
        if abs(A[p, c]) < tol:
            continue
        A[[r, p]] = A[[p, r]]
        A[r + 1:] -= np.outer(A[r + 1:, c] / A[r, c], A[r])
        r += 1
    return r


def linear_plant(kind="continuous"):
    spec = DictionarySpec.build(2)
    return linear_in_dictionary(kind, [[-1.0, 0.5], [0.0, -2.0]], [[1.0], [0.5]], spec), spec


def test_zero_input_batch():
    p, s = benchmark("dt10"), benchmark_dictionary("dt10")
    b = collect(p, s, ExperimentConfig(T=30, input_law="zero", seed=3))
    assert not b.U.any()
    assert b.excitation == "zero_input"
    assert b.derivatives == "exact" and b.tau is None


def test_collect_is_deterministic():
    p, s = benchmark("pendulum_ct"), benchmark_dictionary("pendulum_ct")
    cfg = ExperimentConfig(T=15, tau=0.05, seed=9)
    a, b = collect(p, s, cfg), collect(p, s, cfg)
    for name in ("U", "X", "Xplus", "D", "final_states"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    c = collect(p, s, ExperimentConfig(T=15, tau=0.05, seed=10))
    assert not np.array_equal(a.X, c.X)


def test_oracle_derivatives_equal_model():
    p, s = linear_plant()
    b = collect(p, s, ExperimentConfig(T=12, tau=0.1, seed=1, oracle_derivatives=True))
    np.testing.assert_allclose(b.Xplus, p.A @ b.D + p.B @ b.U, atol=1e-12)
    assert b.derivatives == "oracle"


def test_forward_difference_batch_is_close():
    p, s = linear_plant()
    b = collect(p, s, ExperimentConfig(T=50, tau=1e-3, seed=1))
    assert b.derivatives == "forward"
    assert np.max(np.abs(b.Xplus - (p.A @ b.D + p.B @ b.U))) < 1e-2


def test_segmented_collection():
    p, s = linear_plant("discrete")
    b = collect(p, s, ExperimentConfig(T=10, seed=1, segment_length=3))
    assert b.segments == (3, 3, 3, 1)
    assert b.final_states.shape == (2, 4)
    # successors inside a segment chain onto the next sample
    np.testing.assert_array_equal(b.Xplus[:, 0], b.X[:, 1])
    np.testing.assert_array_equal(b.Xplus[:, 2], b.final_states[:, 0])


def test_collect_pair_default_zero_input_segments():
    p, s = benchmark("ct10"), benchmark_dictionary("ct10")
    e, z = collect_pair(p, s, ExperimentConfig(T=59, tau=0.01, seed=1, oracle_derivatives=True))
    assert e.segments == (59,)
    assert set(z.segments) <= {3, 2} and sum(z.segments) == 59
    assert rank_report(z.D)["full_row_rank"]
    assert rank_report(e.D)["full_row_rank"]


def test_short_experiment_warns():
    p, s = benchmark("ct10"), benchmark_dictionary("ct10")
    with pytest.warns(UserWarning, match="d\\+1"):
        b = collect(p, s, ExperimentConfig(T=20, tau=0.01, seed=1))
    assert not rank_report(b.D)["full_row_rank"]
    assert default_sample_count(s) == 56


def test_rank_report_cases(rng):
    rep = rank_report(np.eye(4))
    assert rep["full_row_rank"] and rep["condition"] == pytest.approx(1.0)
    rep = rank_report(np.ones((4, 4)))
    assert rep["rank"] == 1 and not rep["full_row_rank"]
    for _ in range(20):
        M = rng.standard_normal((5, 20))
        assert rank_report(M)["rank"] == row_reduction_rank(M)
        L = rng.standard_normal((5, 2)) @ rng.standard_normal((2, 20))
        assert rank_report(L)["rank"] == row_reduction_rank(L) == 2


def test_right_pinv():
    np.testing.assert_allclose(right_pinv(np.eye(3)), np.eye(3), atol=1e-15)
    np.testing.assert_allclose(right_pinv([[3.0, 4.0]]), [[0.12], [0.16]], atol=1e-15)
    Qo, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((6, 3)))
    np.testing.assert_allclose(right_pinv(Qo.T), Qo, atol=1e-12)
    with pytest.raises(DataRichnessError, match="d\\+1"):
        right_pinv(np.ones((2, 5)))
    with pytest.raises(DataRichnessError):
        right_pinv(np.ones((3, 2)))


def test_solve_qbar():
    np.testing.assert_allclose(solve_qbar(np.eye(4)), np.eye(4), atol=1e-15)
    I = np.eye(3)
    np.testing.assert_allclose(solve_qbar(np.hstack([I, I])), np.vstack([I / 2, I / 2]), atol=1e-15)
    p, s = benchmark("ct10"), benchmark_dictionary("ct10")
    _, z = collect_pair(p, s, ExperimentConfig(T=59, tau=0.01, seed=1, oracle_derivatives=True))
    Qb = solve_qbar(z.D)
    assert np.max(np.abs(z.D @ Qb - np.eye(27))) < 1e-9


@pytest.mark.parametrize("name,cfg", [
    ("ct10", ExperimentConfig(T=59, tau=0.01, seed=1, oracle_derivatives=True)),
    ("pendulum_ct", ExperimentConfig(T=15, tau=0.05, seed=2)),
    ("dt10", ExperimentConfig(T=40, seed=3)),
])
def test_csv_round_trip(tmp_path, name, cfg):
    p, s = benchmark(name), benchmark_dictionary(name)
    for b in collect_pair(p, s, cfg):
        path = write_batch(tmp_path / "b.csv", b, s, seed=cfg.seed)
        back = read_batch(path, s)
        for f in ("U", "X", "Xplus", "D", "final_states"):
            np.testing.assert_array_equal(getattr(back, f), getattr(b, f))
        assert back.segments == b.segments
        assert back.derivatives == b.derivatives
        assert back.excitation == b.excitation


def test_csv_rejects_other_dictionary(tmp_path):
    p, s = benchmark("dt10"), benchmark_dictionary("dt10")
    b = collect(p, s, ExperimentConfig(T=30, seed=1))
    path = write_batch(tmp_path / "b.csv", b, s)
    with pytest.raises(ValueError, match="different dictionary"):
        read_batch(path, ct10_dictionary())


def test_csv_rejects_truncated_file(tmp_path):
    p, s = benchmark("dt10"), benchmark_dictionary("dt10")
    b = collect(p, s, ExperimentConfig(T=30, seed=1))
    path = write_batch(tmp_path / "b.csv", b, s)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-2]) + "\n")
    with pytest.raises(ValueError):
        read_batch(path, s)


def test_batch_validation():
    X = np.zeros((1, 3))
    with pytest.raises(ValueError):
        TrajectoryBatch("discrete", np.zeros((1, 2)), X, X, X, None, "excited", np.zeros((1, 1)))
    with pytest.raises(ValueError):
        TrajectoryBatch("discrete", np.ones((1, 3)), X, X, X, None, "zero_input", np.zeros((1, 1)))
    with pytest.raises(ValueError):
        TrajectoryBatch("discrete", np.zeros((1, 3)), X, X, X + 1, None, "excited", np.zeros((1, 1)))


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(T=0)
    with pytest.raises(ValueError):
        ExperimentConfig(T=5, tau=0)
    with pytest.raises(ValueError):
        ExperimentConfig(T=5, input_law="chirp")
    with pytest.raises(ValueError):
        ExperimentConfig(T=5, segment_length=0)
