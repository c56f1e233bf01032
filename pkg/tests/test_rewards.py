import pytest
import torch

from app.schemas import RewardSign
from app.services.metrics import CallableOracle, DeskOracle
from app.services.rewards import (
    learned_metric_reward,
    policy_gradient_loss,
    self_critical_bleu_reward,
    style_reward,
)

from conftest import utt

X = utt("the cat sat on the mat")
SAMPLED = utt("the cat sat on a mat")
GREEDY = utt("a dog ran")


class TestStyleReward:
    @pytest.mark.parametrize(
        "p1,p2,lam,expected",
        [(0.2, 0.9, 1.0, 0.7), (0.9, 0.2, 1.0, -0.7), (0.5, 0.5, 3.0, 0.0), (0.0, 1.0, 0.5, 0.5)],
    )
    def test_values(self, p1, p2, lam, expected):
        assert style_reward(p1, p2, lam) == pytest.approx(expected)

    def test_probability_range(self):
        with pytest.raises(ValueError):
            style_reward(1.5, 0.2)


class TestSelfCriticalBleu:
    def test_sample_beats_greedy(self):
        assert self_critical_bleu_reward(GREEDY, SAMPLED, X) == pytest.approx((1 / 6) ** 0.25)

    def test_paper_sign_flips(self):
        reward = self_critical_bleu_reward(GREEDY, SAMPLED, X, convention="paper")
        assert reward == pytest.approx(-((1 / 6) ** 0.25))

    def test_literal_is_an_alias_of_paper(self):
        assert RewardSign("literal") is RewardSign.PAPER
        assert self_critical_bleu_reward(GREEDY, SAMPLED, X, convention="literal") == pytest.approx(
            -((1 / 6) ** 0.25)
        )

    def test_copying_the_input(self):
        # sampling x itself earns lambda * (1 - BLEU(greedy, x))
        assert self_critical_bleu_reward(GREEDY, X, X, lambda_bleu=2.0) == pytest.approx(2.0)
        assert self_critical_bleu_reward(GREEDY, X, X, 2.0, RewardSign.PAPER) == pytest.approx(-2.0)

    def test_equal_outputs(self):
        assert self_critical_bleu_reward(SAMPLED, SAMPLED, X) == 0.0

    def test_empty_anchor(self):
        with pytest.raises(ValueError):
            self_critical_bleu_reward(GREEDY, SAMPLED, utt(""))


class TestLearnedMetricReward:
    def test_scaled_oracle_score(self):
        assert learned_metric_reward(X, X, 0.5, DeskOracle()) == pytest.approx(0.5)

    def test_zero_weight_skips_oracle(self):
        def explode(c, a):
            raise AssertionError("oracle must not be called")

        assert learned_metric_reward(X, X, 0.0, CallableOracle(explode)) == 0.0


class TestPolicyGradientLoss:
    def test_value(self):
        loss = policy_gradient_loss(1.5, [-1.0, -0.5, -0.5])
        assert loss.item() == pytest.approx(3.0)

    def test_zero_reward(self):
        assert policy_gradient_loss(0.0, [-2.0, -1.0]).item() == 0.0

    def test_non_finite_logprobs(self):
        with pytest.raises(ValueError):
            policy_gradient_loss(1.0, [float("-inf")])

    def test_gradient_matches_finite_difference(self):
        logits = torch.tensor([0.3, -0.2, 1.1], dtype=torch.float64, requires_grad=True)
        reward = 0.8

        def loss_of(values):
            return policy_gradient_loss(reward, torch.log_softmax(values, dim=0)[:2])

        loss_of(logits).backward()
        eps = 1e-6
        for i in range(3):
            bump = torch.zeros(3, dtype=torch.float64)
            bump[i] = eps
            with torch.no_grad():
                numeric = (loss_of(logits + bump) - loss_of(logits - bump)).item() / (2 * eps)
            assert logits.grad[i].item() == pytest.approx(numeric, abs=1e-6)
