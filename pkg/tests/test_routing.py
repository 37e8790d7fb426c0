import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose, assert_array_equal

from app.errors import ConfigurationError, DimensionError
from app.models.experiment import Aggregator, RoutingConfig
from app.nn import (
    CapsuleParams,
    aggregate_routing,
    build_input_capsules,
    compute_votes,
    em_e_step,
    em_m_step,
    em_routing,
    output_capsule,
    simple_routing,
    squash,
)
from app.numeric import Tensor
from tests.routing_oracles import e_step_oracle, em_routing_oracle, m_step_oracle, simple_routing_oracle

SIZES = st.sampled_from([1, 2, 4, 8])


def em_config(heads, capsules, iterations, **kwargs):
    return RoutingConfig(
        kind=Aggregator.EM, input_capsules=heads, output_capsules=capsules,
        iterations=iterations, d_model=8, **kwargs,
    )


def test_config_defaults_schedule_and_checks_divisibility():
    config = em_config(2, 4, 3)
    assert config.lambda_schedule == [1.0, 2.0, 3.0]
    assert (config.d_in, config.d_out) == (4, 2)
    with pytest.raises(ValueError):
        RoutingConfig(kind=Aggregator.EM, input_capsules=2, output_capsules=3, d_model=8)
    with pytest.raises(ValueError):
        em_config(2, 2, 2, lambda_schedule=[1.0])
    with pytest.raises(ValueError):
        em_config(2, 2, 2, lambda_schedule=[1.0, 0.0])
    with pytest.raises(ValueError):
        RoutingConfig(kind=Aggregator.EM, input_capsules=2, output_capsules=2, d_model=8, granularity="sequence")


def test_betas_exist_only_for_em():
    rng = np.random.default_rng(0)
    simple = RoutingConfig(kind=Aggregator.SIMPLE, input_capsules=2, output_capsules=2, d_model=8)
    assert CapsuleParams.initialize(simple, rng).beta_a is None
    em = CapsuleParams.initialize(em_config(2, 2, 3), rng)
    assert_array_equal(em.beta_a.data, [0.0, 0.0])
    assert set(em.named_parameters()) == {"w_f", "b_f", "w_vote", "beta_a", "beta_mu"}
    with pytest.raises(ConfigurationError):
        em.validate(simple)


def test_zero_head_outputs_with_zero_bias_give_zero_capsules():
    params = CapsuleParams.initialize(em_config(2, 2, 3), np.random.default_rng(1))
    capsules = build_input_capsules(Tensor(np.zeros((3, 8))), params)
    assert capsules.shape == (3, 2, 4)
    assert not capsules.data.any()


def test_input_capsules_match_per_head_evaluation():
    rng = np.random.default_rng(5)
    config = RoutingConfig(kind=Aggregator.SIMPLE, input_capsules=2, output_capsules=2, d_model=4)
    params = CapsuleParams.initialize(config, rng)
    params.b_f.data = rng.normal(size=(2, 2))
    o_hat = rng.normal(size=(3, 4))
    capsules = build_input_capsules(Tensor(o_hat), params).data
    for j in range(3):
        for h in range(2):
            expected = np.tanh(o_hat[j] @ params.w_f.data[h] + params.b_f.data[h])
            assert_allclose(capsules[j, h], expected, rtol=0, atol=1e-14)


def test_votes():
    rng = np.random.default_rng(6)
    config = RoutingConfig(kind=Aggregator.SIMPLE, input_capsules=2, output_capsules=4, d_model=8)
    params = CapsuleParams.initialize(config, rng)
    capsules = Tensor(rng.normal(size=(5, 2, 4)))
    votes = compute_votes(capsules, params).data
    assert votes.shape == (5, 2, 4, 2)
    for h in range(2):
        for n in range(4):
            assert_allclose(votes[:, h, n], capsules.data[:, h] @ params.w_vote.data[h, n], rtol=0, atol=1e-14)

    params.w_vote.data = np.zeros_like(params.w_vote.data)
    assert not compute_votes(capsules, params).data.any()

    single = RoutingConfig(kind=Aggregator.SIMPLE, input_capsules=1, output_capsules=1, d_model=3)
    identity = CapsuleParams.initialize(single, rng)
    identity.w_vote.data = np.eye(3)[None, None]
    capsule = Tensor(rng.normal(size=(1, 3)))
    assert_array_equal(compute_votes(capsule, identity).data[0, 0], capsule.data[0])
    with pytest.raises(DimensionError):
        compute_votes(Tensor(np.ones((5, 3, 4))), params)


def test_output_capsule_cases():
    rng = np.random.default_rng(7)
    votes = rng.normal(size=(3, 2, 4))
    uniform = output_capsule(Tensor(np.full((3, 2), 0.5)), Tensor(votes)).data
    assert_allclose(uniform, votes.mean(axis=0), rtol=0, atol=1e-14)

    concentrated = np.zeros((3, 2))
    concentrated[0] = 1.0
    assert_allclose(output_capsule(Tensor(concentrated), Tensor(votes)).data, votes[0], rtol=0, atol=0)

    weights = rng.uniform(0.1, 1.0, size=(3, 2))
    expected = (weights[..., None] * votes).sum(axis=0) / weights.sum(axis=0)[:, None]
    assert_allclose(output_capsule(Tensor(weights), Tensor(votes)).data, expected, rtol=0, atol=1e-14)


def test_output_capsule_is_scale_invariant_in_agreement():
    rng = np.random.default_rng(8)
    votes = Tensor(rng.normal(size=(4, 3, 2)))
    weights = rng.uniform(0.1, 1.0, size=(4, 3))
    base = output_capsule(Tensor(weights), votes).data
    for factor in (2.0, 0.5, 4.0, 0.25):
        assert_array_equal(output_capsule(Tensor(weights * factor), votes).data, base)


def test_squash_fixed_points():
    assert_array_equal(squash(Tensor(np.zeros(4))).data, np.zeros(4))
    unit = np.array([0.6, 0.8])
    assert_allclose(squash(Tensor(unit)).data, 0.5 * unit, rtol=0, atol=1e-15)
    assert np.linalg.norm(squash(Tensor([3.0, 0.0, 0.0])).data) == pytest.approx(0.9, abs=1e-15)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 50), st.integers(1, 8)),
              elements=st.floats(-100.0, 100.0, allow_nan=False, allow_infinity=False)))
def test_squash_norm_and_direction(s):
    out = squash(Tensor(s)).data
    squared = np.sum(s * s, axis=-1)
    assert_allclose(np.linalg.norm(out, axis=-1), squared / (1.0 + squared), rtol=0, atol=1e-12)
    nonzero = squared > 1e-100
    cosine = np.sum(out * s, axis=-1)[nonzero] / (np.linalg.norm(out, axis=-1) * np.sqrt(squared))[nonzero]
    assert_allclose(cosine, 1.0, rtol=0, atol=1e-12)


def test_squash_on_many_random_vectors():
    s = np.random.default_rng(9).normal(scale=2.0, size=(100_000, 4))
    out = squash(Tensor(s)).data
    squared = np.sum(s * s, axis=-1)
    assert_allclose(np.linalg.norm(out, axis=-1), squared / (1.0 + squared), rtol=0, atol=1e-12)
    assert np.all(np.linalg.norm(out, axis=-1) < 1.0)


def test_simple_routing_single_capsule():
    votes = np.random.default_rng(10).normal(size=(3, 1, 4))
    capsules, state = simple_routing(Tensor(votes), 3)
    assert all(np.all(c == 1.0) for c in state.agreement_history)
    assert_allclose(capsules.data[0], squash(Tensor(votes[:, 0].mean(axis=0))).data, rtol=0, atol=1e-14)


@settings(max_examples=100, deadline=None)
@given(heads=SIZES, capsules=SIZES, dims=st.sampled_from([2, 4, 8]), seed=st.integers(0, 2**16))
def test_simple_routing_one_iteration_is_squashed_mean(heads, capsules, dims, seed):
    votes = np.random.default_rng(seed).normal(size=(heads, capsules, dims))
    out, _ = simple_routing(Tensor(votes), 1)
    expected = squash(Tensor(votes.mean(axis=0))).data
    assert_allclose(out.data, expected, rtol=0, atol=1e-14)


@settings(max_examples=1000, deadline=None)
@given(
    heads=SIZES, capsules=SIZES, dims=st.sampled_from([2, 4, 8]),
    iterations=st.integers(1, 3), seed=st.integers(0, 2**16),
)
def test_agreement_rows_stay_on_the_simplex(heads, capsules, dims, iterations, seed):
    rng = np.random.default_rng(seed)
    votes = Tensor(rng.normal(size=(heads, capsules, dims)))
    out, state = simple_routing(votes, iterations)
    assert len(state.agreement_history) == iterations
    for agreement in state.agreement_history:
        assert_allclose(agreement.sum(axis=-1), 1.0, rtol=0, atol=1e-12)
    assert np.all(np.linalg.norm(out.data, axis=-1) < 1.0)

    config = em_config(heads, capsules, iterations)
    beta_a, beta_mu = Tensor(rng.normal(size=capsules)), Tensor(rng.normal(scale=0.1, size=capsules))
    _, activation, em_state = em_routing(votes, config, beta_a, beta_mu)
    assert len(em_state.agreement_history) == iterations
    for agreement in em_state.agreement_history:
        assert_allclose(agreement.sum(axis=-1), 1.0, rtol=0, atol=1e-12)
    assert activation.shape == (capsules,)
    assert np.all(em_state.sigma2 >= config.epsilon_var)


@settings(max_examples=200, deadline=None)
@given(heads=SIZES, capsules=SIZES, dims=st.sampled_from([2, 4, 8]), seed=st.integers(0, 2**16))
def test_unsaturated_activation_lies_strictly_between_zero_and_one(heads, capsules, dims, seed):
    rng = np.random.default_rng(seed)
    votes = Tensor(rng.normal(size=(heads, capsules, dims)))
    agreement = Tensor(np.full((heads, capsules), 1.0 / capsules))
    beta_a, beta_mu = Tensor(rng.normal(size=capsules)), Tensor(rng.normal(scale=0.1, size=capsules))
    _, _, cost, activation = em_m_step(votes, agreement, beta_a, beta_mu, 1.0)
    logit = beta_a.data - beta_mu.data * agreement.data.sum(axis=0) - cost.data
    unsaturated = np.abs(logit) < 30.0
    assert np.all(activation.data[unsaturated] > 0.0)
    assert np.all(activation.data[unsaturated] < 1.0)


def test_saturated_activation_rounds_to_exactly_zero_or_one():
    # one head: the variance sits at the floor and the cost is strongly negative
    votes = Tensor(np.ones((1, 2, 4)))
    agreement = Tensor(np.full((1, 2), 0.5))
    no_bias = Tensor(np.zeros(2))
    _, _, _, high = em_m_step(votes, agreement, no_bias, no_bias, 10.0)
    assert_array_equal(high.data, [1.0, 1.0])
    _, _, _, low = em_m_step(votes, agreement, Tensor([-200.0, -200.0]), no_bias, 10.0)
    assert_array_equal(low.data, [0.0, 0.0])


def test_simple_routing_matches_transcription_on_fixed_votes():
    votes = np.array([[[0.5, -1.0], [1.5, 0.25]], [[-0.75, 0.5], [1.0, 1.0]]])
    expected, history = simple_routing_oracle(votes, 3)
    out, state = simple_routing(Tensor(votes), 3)
    assert_allclose(out.data, expected, rtol=0, atol=1e-12)
    for ours, theirs in zip(state.agreement_history, history):
        assert_allclose(ours, theirs, rtol=0, atol=1e-12)


def test_em_routing_matches_transcription_on_fixed_votes():
    votes = np.array([[[0.5, -1.0], [1.5, 0.25]], [[-0.75, 0.5], [1.0, 1.0]]])
    beta_a, beta_mu = np.array([0.5, -0.25]), np.array([0.1, 0.2])
    config = RoutingConfig(kind=Aggregator.EM, input_capsules=2, output_capsules=2, iterations=2, d_model=4)
    expected, activation, _ = em_routing_oracle(votes, beta_a, beta_mu, [1.0, 2.0])
    out, ours, _ = em_routing(Tensor(votes), config, Tensor(beta_a), Tensor(beta_mu))
    assert_allclose(out.data, expected, rtol=0, atol=1e-10)
    assert_allclose(ours.data, activation, rtol=0, atol=1e-10)


@pytest.mark.parametrize("density", ["product", "sum"])
def test_routing_matches_transcriptions_on_random_instances(density):
    rng = np.random.default_rng(11)
    for _ in range(200):
        heads, capsules, dims = (int(v) for v in rng.choice([1, 2, 4], size=3))
        iterations = int(rng.integers(1, 4))
        votes = rng.normal(size=(heads, capsules, dims))
        beta_a, beta_mu = rng.normal(size=capsules), rng.normal(scale=0.1, size=capsules)

        expected, _ = simple_routing_oracle(votes, iterations)
        out, _ = simple_routing(Tensor(votes), iterations)
        assert_allclose(out.data, expected, rtol=0, atol=1e-10)

        config = em_config(heads, capsules, iterations, em_density=density)
        expected, activation, history = em_routing_oracle(votes, beta_a, beta_mu, config.lambda_schedule, density=density)
        out, ours, state = em_routing(Tensor(votes), config, Tensor(beta_a), Tensor(beta_mu))
        assert_allclose(out.data, expected, rtol=0, atol=1e-10)
        assert_allclose(ours.data, activation, rtol=0, atol=1e-10)
        assert_allclose(state.agreement, history[-1], rtol=0, atol=1e-10)


def test_em_single_capsule_is_activation_times_mean():
    rng = np.random.default_rng(12)
    votes = rng.normal(size=(3, 1, 2))
    config = em_config(1, 1, 3)
    out, activation, state = em_routing(Tensor(votes), config, Tensor([0.3]), Tensor([0.1]))
    assert all(np.all(c == 1.0) for c in state.agreement_history)
    assert_allclose(state.mu[0], votes[:, 0].mean(axis=0), rtol=0, atol=1e-14)
    assert_allclose(out.data, activation.data[:, None] * state.mu, rtol=0, atol=0)


def test_identical_votes_hit_the_variance_floor():
    votes = np.tile(np.array([0.5, -2.0]), (3, 2, 1))
    config = em_config(1, 2, 2)
    _, _, state = em_routing(Tensor(votes), config, Tensor([0.0, 0.0]), Tensor([0.0, 0.0]))
    assert_allclose(state.mu, np.tile([0.5, -2.0], (2, 1)), rtol=0, atol=1e-15)
    assert_array_equal(state.sigma2, np.full((2, 2), 1e-6))


def test_m_step_symmetric_votes():
    v = np.array([0.5, -1.5])
    votes = np.stack([np.stack([v, v]), np.stack([-v, -v])])
    mu, sigma2, cost, activation = em_m_step(
        Tensor(votes), Tensor(np.full((2, 2), 0.5)), Tensor([0.0, 0.0]), Tensor([0.0, 0.0]), 1.0
    )
    assert_allclose(mu.data, 0.0, rtol=0, atol=1e-15)
    assert_allclose(sigma2.data, np.tile(v * v, (2, 1)), rtol=0, atol=1e-15)


def test_m_step_cost_at_the_floor():
    votes = np.ones((2, 1, 3))
    _, sigma2, cost, _ = em_m_step(Tensor(votes), Tensor(np.ones((2, 1))), Tensor([0.0]), Tensor([0.0]), 1.0)
    assert_array_equal(sigma2.data, np.full((1, 3), 1e-6))
    expected = 3 * (0.5 * math.log(1e-6) + (1.0 + math.log(2.0 * math.pi)) / 2.0) * 2.0
    assert cost.data[0] == pytest.approx(expected, abs=1e-12)


def test_m_and_e_steps_match_transcription():
    rng = np.random.default_rng(13)
    votes = rng.normal(size=(3, 2, 4))
    agreement = rng.dirichlet(np.ones(2), size=3)
    beta_a, beta_mu = rng.normal(size=2), rng.normal(size=2)
    mu, sigma2, cost, activation = em_m_step(Tensor(votes), Tensor(agreement), Tensor(beta_a), Tensor(beta_mu), 2.0)
    expected = m_step_oracle(votes, agreement, beta_a, beta_mu, 2.0, 1e-6)
    for ours, theirs in zip((mu, sigma2, cost, activation), expected):
        assert_allclose(ours.data, theirs, rtol=0, atol=1e-12)

    for density in ("product", "sum"):
        c = em_e_step(Tensor(votes), mu, sigma2, activation, density).data
        assert_allclose(c, e_step_oracle(votes, mu.data, sigma2.data, activation.data, density), rtol=0, atol=1e-10)


def test_e_step_assigns_a_vote_to_its_own_tight_cluster():
    votes = np.array([[[1.0, 1.0], [1.0, 1.0]]])
    mu = np.array([[1.0, 1.0], [5.0, 5.0]])
    sigma2 = np.full((2, 2), 1e-4)
    c = em_e_step(Tensor(votes), Tensor(mu), Tensor(sigma2), Tensor([0.5, 0.5])).data
    assert c[0, 0] == pytest.approx(1.0)


def test_e_step_rejects_unknown_density():
    votes = Tensor(np.ones((1, 1, 2)))
    with pytest.raises(ConfigurationError):
        em_e_step(votes, Tensor(np.ones((1, 2))), Tensor(np.ones((1, 2))), Tensor([0.5]), "mixture")


@pytest.mark.parametrize("kind", [Aggregator.SIMPLE, Aggregator.EM])
def test_aggregate_routing_shape_and_position_independence(kind):
    rng = np.random.default_rng(14)
    config = RoutingConfig(kind=kind, input_capsules=4, output_capsules=2, iterations=3, d_model=8)
    params = CapsuleParams.initialize(config, rng)
    o_hat = rng.normal(size=(6, 8))
    out, state = aggregate_routing(Tensor(o_hat), params, config, with_state=True)
    assert out.shape == (6, 8)
    assert state.votes.shape == (6, 4, 2, 4)

    permutation = rng.permutation(6)
    permuted = aggregate_routing(Tensor(o_hat[permutation]), params, config).data
    assert_array_equal(permuted, out.data[permutation])


def test_single_output_capsule_fills_the_width():
    rng = np.random.default_rng(15)
    config = RoutingConfig(kind=Aggregator.SIMPLE, input_capsules=2, output_capsules=1, iterations=2, d_model=4)
    params = CapsuleParams.initialize(config, rng)
    o_hat = Tensor(rng.normal(size=(3, 4)))
    out, state = aggregate_routing(o_hat, params, config, with_state=True)
    votes = state.votes
    expected = squash(Tensor(votes[:, :, 0].mean(axis=1))).data
    assert_allclose(out.data, expected, rtol=0, atol=1e-14)
