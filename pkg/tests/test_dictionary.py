import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ddrom.dictionary import (BasisFunction, DictionaryError, DictionarySpec, build_data_matrix,
                              ct10_dictionary, dt10_dictionary, evaluate, pendulum_dictionary)


def test_ct10_at_origin_only_cosine_is_one():
    spec = ct10_dictionary()
    v = evaluate(spec, np.zeros(10))
    labels = [e.label() for e in spec.entries]
    k = labels.index("cosine_product(8,10)")
    expected = np.zeros(spec.size)
    expected[k] = 1.0
    np.testing.assert_array_equal(v, expected)
    assert spec.size == 27


def test_coordinate_only_spec_is_identity():
    spec = DictionarySpec.build(2)
    np.testing.assert_array_equal(evaluate(spec, [2.0, -3.0]), [2.0, -3.0])


def test_pendulum_hand_values():
    spec = pendulum_dictionary()
    x = np.array([math.pi / 2, 1.0, 0.0, 2.0])
    v = evaluate(spec, x)
    # x, then sin(x_i), then sin(x1 - x3) x_i^2
    expected = np.concatenate([x, [1.0, math.sin(1.0), 0.0, math.sin(2.0)],
                               [(math.pi / 2) ** 2, 1.0, 0.0, 4.0]])
    np.testing.assert_allclose(v, expected, atol=1e-15)


def test_dt10_sizes():
    assert dt10_dictionary().size == 26
    assert pendulum_dictionary().size == 12


def test_data_matrix_matches_columnwise_evaluation(rng):
    spec = DictionarySpec.build(3, [("sine", (1,)), ("rational", (2, 3))])
    X = rng.standard_normal((3, 7))
    D = build_data_matrix(spec, X)
    assert D.shape == (5, 7)
    for k in range(7):
        np.testing.assert_array_equal(D[:, k], evaluate(spec, X[:, k]))


def test_data_matrix_repeated_columns():
    spec = ct10_dictionary()
    x = np.linspace(-1, 1, 10)
    D = build_data_matrix(spec, np.column_stack([x, x]))
    np.testing.assert_array_equal(D[:, 0], D[:, 1])


@pytest.mark.parametrize("state", [np.zeros(3), np.zeros((2,)), np.zeros((4, 1))])
def test_evaluate_dimension_mismatch(state):
    with pytest.raises(DictionaryError):
        evaluate(pendulum_dictionary(), state)


def test_build_data_matrix_rejects_bad_shapes():
    spec = DictionarySpec.build(2)
    with pytest.raises(DictionaryError):
        build_data_matrix(spec, np.zeros((3, 4)))
    with pytest.raises(DictionaryError):
        build_data_matrix(spec, np.zeros((2, 0)))


def test_spec_validation():
    with pytest.raises(DictionaryError):
        BasisFunction("exp", (1,))
    with pytest.raises(DictionaryError):
        BasisFunction("product", (1,))
    with pytest.raises(DictionaryError):
        BasisFunction("sine", (0,))
    with pytest.raises(DictionaryError):
        DictionarySpec.build(2, [("sine", (3,))])
    with pytest.raises(DictionaryError):
        DictionarySpec.build(2, [("coordinate", (1,))])
    with pytest.raises(DictionaryError):
        # pendulum coupling reads x3
        DictionarySpec.build(2, [("pendulum_coupling", (1,))])


def test_records_round_trip():
    for spec in (ct10_dictionary(), dt10_dictionary(), pendulum_dictionary()):
        back = DictionarySpec.from_records(spec.state_dim, spec.to_records())
        assert back == spec
        assert back.digest() == spec.digest()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=10, max_size=10))
def test_prefix_is_state(xs):
    for spec in (ct10_dictionary(), dt10_dictionary()):
        v = evaluate(spec, np.array(xs))
        np.testing.assert_array_equal(v[:10], xs)
        assert np.all(np.isfinite(v))
