from typing import Sequence, Union

import torch

from app.schemas import RewardSign, Utterance
from app.services.metrics import LearnedMetricOracle, sentence_bleu


def style_reward(p1: float, p2: float, lambda_sc: float = 1.0) -> float:
    """lambda_sc * (p(target style) - p(source style))."""
    for value in (p1, p2):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"style probabilities must lie in [0, 1], got {value}")
    return lambda_sc * (p2 - p1)


def self_critical_bleu_reward(
    greedy: Utterance,
    sampled: Utterance,
    x: Utterance,
    lambda_bleu: float = 1.0,
    convention: Union[RewardSign, str] = RewardSign.SELF_CRITICAL,
) -> float:
    """Sentence-BLEU gap against the input x.

    `self_critical` rewards the sample over the greedy baseline;
    `paper` (alias `literal`) is the greedy-minus-sample form as written."""
    if not x.tokens:
        raise ValueError("the BLEU anchor must be non-empty")
    convention = RewardSign(convention)
    gap = sentence_bleu(sampled, x) - sentence_bleu(greedy, x)
    if convention == RewardSign.PAPER:
        gap = -gap
    return lambda_bleu * gap


def learned_metric_reward(
    sampled: Utterance,
    x: Utterance,
    lambda_learned: float,
    oracle: LearnedMetricOracle,
) -> float:
    if lambda_learned == 0:
        return 0.0
    return lambda_learned * oracle.score(sampled, x)


def policy_gradient_loss(reward: float, sampled_logprobs: Union[torch.Tensor, Sequence[float]]) -> torch.Tensor:
    """-reward * sum(log-probs): descending it ascends reward-weighted log-likelihood.

    Pass a tensor that carries gradients to train; a plain list gives the value only."""
    if not isinstance(sampled_logprobs, torch.Tensor):
        sampled_logprobs = torch.tensor(list(sampled_logprobs), dtype=torch.float64)
    if not torch.isfinite(sampled_logprobs).all():
        raise ValueError("log-probabilities must be finite")
    return -float(reward) * sampled_logprobs.sum()
