import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from leadopt.credit import AdvantageInput, LengthMismatchError, gae, ppo_clip_term


def forward_gae(rewards, values, gamma, lam):
    """Test oracle: direct double-loop sum A_t = sum_k (gamma*lam)^k delta_{t+k}."""
    horizon = len(rewards)
    deltas = [
        rewards[t] + gamma * values[t + 1] - values[t] for t in range(horizon)
    ]
    out = []
    for t in range(horizon):
        acc = 0.0
        for k in range(horizon - t):
            acc += (gamma * lam) ** k * deltas[t + k]
        out.append(acc)
    return out


class TestGae:
    def test_single_step(self):
        for gamma, lam in [(0.99, 0.95), (1.0, 1.0), (0.5, 0.0)]:
            adv = gae(AdvantageInput((1.0,), (0.0, 0.0), gamma, lam))
            assert adv.tolist() == [1.0]

    def test_two_step_hand_value(self):
        adv = gae(AdvantageInput((0.0, 1.0), (0.0, 0.0, 0.0), 0.99, 0.95))
        assert adv[1] == pytest.approx(1.0, abs=0)
        assert adv[0] == pytest.approx(0.99 * 0.95 * 1.0, abs=1e-15)
        assert adv[0] == pytest.approx(0.9405, abs=1e-12)

    def test_matches_forward_sum_oracle(self):
        rng = random.Random(5)
        for _ in range(200):
            horizon = 20
            rewards = [rng.uniform(-1, 1) for _ in range(horizon)]
            values = [rng.uniform(-1, 1) for _ in range(horizon + 1)]
            gamma, lam = rng.uniform(0, 1), rng.uniform(0, 1)
            got = gae(AdvantageInput(tuple(rewards), tuple(values), gamma, lam))
            want = forward_gae(rewards, values, gamma, lam)
            assert np.allclose(got, want, atol=1e-12, rtol=0)

    def test_lambda_zero_reduces_to_td_errors(self):
        rng = random.Random(7)
        rewards = [rng.uniform(-1, 1) for _ in range(10)]
        values = [rng.uniform(-1, 1) for _ in range(11)]
        adv = gae(AdvantageInput(tuple(rewards), tuple(values), 0.9, 0.0))
        deltas = [rewards[t] + 0.9 * values[t + 1] - values[t] for t in range(10)]
        assert adv.tolist() == deltas

    def test_lambda_one_gamma_one_zero_values_is_reward_to_go(self):
        rewards = (1.0, 2.0, 3.0, 4.0)
        adv = gae(AdvantageInput(rewards, (0.0,) * 5, 1.0, 1.0))
        assert adv.tolist() == [10.0, 9.0, 7.0, 4.0]

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatchError):
            AdvantageInput((1.0, 2.0), (0.0, 0.0), 0.99, 0.95)

    def test_parameter_range(self):
        with pytest.raises(ValueError):
            AdvantageInput((1.0,), (0.0, 0.0), 1.5, 0.95)

    @given(
        st.lists(st.floats(-10, 10), min_size=1, max_size=30),
        st.floats(0, 1),
        st.floats(0, 1),
        st.integers(0, 10_000),
    )
    @settings(max_examples=60, deadline=None)
    def test_forward_backward_property(self, rewards, gamma, lam, seed):
        rng = random.Random(seed)
        values = [rng.uniform(-5, 5) for _ in range(len(rewards) + 1)]
        got = gae(AdvantageInput(tuple(rewards), tuple(values), gamma, lam))
        want = forward_gae(rewards, values, gamma, lam)
        assert np.allclose(got, want, atol=1e-9, rtol=1e-12)


class TestPpoClipTerm:
    def test_clip_above(self):
        assert ppo_clip_term(1.5, 1.0, 0.2) == 1.2

    def test_identity_ratio(self):
        for eps in (0.1, 0.2, 0.5):
            for adv in (-2.0, 0.0, 3.5):
                assert ppo_clip_term(1.0, adv, eps) == adv

    def test_negative_advantage_clip(self):
        assert ppo_clip_term(0.5, -1.0, 0.2) == min(-0.5, -0.8)
        assert ppo_clip_term(0.5, -1.0, 0.2) == -0.8

    def test_invalid_ratio(self):
        with pytest.raises(ValueError):
            ppo_clip_term(0.0, 1.0, 0.2)
        with pytest.raises(ValueError):
            ppo_clip_term(-1.0, 1.0, 0.2)

    @given(
        st.floats(0.01, 10.0),
        st.floats(-10, 10),
        st.floats(0.01, 0.9),
    )
    @settings(max_examples=100, deadline=None)
    def test_never_exceeds_unclipped(self, ratio, advantage, epsilon):
        term = ppo_clip_term(ratio, advantage, epsilon)
        assert term <= ratio * advantage + 1e-15
        # direct evaluation of the definition
        clipped = min(max(ratio, 1 - epsilon), 1 + epsilon)
        assert term == min(ratio * advantage, clipped * advantage)
