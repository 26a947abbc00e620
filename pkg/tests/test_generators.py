import numpy as np
import pytest

from qmmr import (
    FixtureShape, ValidationError, check_completeness, compute_feature_dynamics, exact_q,
    generate_mdp, realizability_residual, softmax_policy, uniform_policy,
)


def _shape(**kw):
    base = dict(horizon=3, states=4, actions=2, dim=3)
    base.update(kw)
    return FixtureShape(**base)


def test_random_tabular_is_complete():
    shape = _shape()
    mdp, feats = generate_mdp("random_tabular", shape, 0)
    pi = uniform_policy(shape.states_per_level, 2)
    assert max(check_completeness(mdp, pi, feats, h) for h in range(4)) == pytest.approx(0, abs=1e-12)
    assert feats.dim(1) == 8


@pytest.mark.parametrize("seed", range(3))
def test_linear_complete_q_lies_in_span(seed):
    shape = _shape(dim=3)
    mdp, feats = generate_mdp("linear_complete", shape, seed)
    pi = softmax_policy(shape.states_per_level, 2, 0.3, seed)   # any policy works here
    q = exact_q(mdp, pi)
    for h in range(1, 4):
        x = feats.flat(h)
        coef, *_ = np.linalg.lstsq(x, q[h].ravel(), rcond=None)
        assert np.abs(x @ coef - q[h].ravel()).max() <= 1e-10
    assert max(check_completeness(mdp, pi, feats, h) for h in range(1, 4)) <= 1e-10


@pytest.mark.parametrize("seed", range(3))
def test_misspecified_keeps_realizability_only(seed):
    shape = _shape(dim=4)
    pi = softmax_policy(shape.states_per_level, 2, 0.5, seed)
    mdp, feats = generate_mdp("misspecified_linear", shape, seed, pi)
    assert realizability_residual(mdp, pi, feats) <= 1e-10
    assert max(check_completeness(mdp, pi, feats, h) for h in range(1, 4)) > 1e-3
    diag = compute_feature_dynamics(mdp, pi, uniform_policy(shape.states_per_level, 2), feats)
    assert not any(diag.singular[1:])


def test_generation_is_deterministic():
    a, fa = generate_mdp("linear_complete", _shape(), 5)
    b, fb = generate_mdp("linear_complete", _shape(), 5)
    assert a.digest() == b.digest()
    for x, y in zip(fa.arrays, fb.arrays):
        np.testing.assert_array_equal(x, y)


def test_infeasible_requests():
    with pytest.raises(ValidationError):
        generate_mdp("linear_complete", _shape(states=2, dim=5), 0)
    with pytest.raises(ValidationError):
        generate_mdp("hexagonal", _shape(), 0)
    with pytest.raises(ValidationError):
        generate_mdp("misspecified_linear", _shape(horizon=1), 0)
    with pytest.raises(ValidationError):
        generate_mdp("misspecified_linear", _shape(states=4, dim=8), 0)   # full span at level 2
    with pytest.raises(ValidationError):
        FixtureShape(horizon=2, states=[3])


def test_shape_from_dict_and_per_level_states():
    shape = FixtureShape.from_dict({"horizon": 2, "states": [2, 5], "actions": 3,
                                    "noise": {"family": "bernoulli", "scale": 0.0}})
    assert shape.states_per_level == (1, 2, 5)
    mdp, _ = generate_mdp("random_tabular", shape, 1)
    assert mdp.states_per_level == (1, 2, 5) and mdp.noise.family == "bernoulli"
