"""Score fusion, classification loss, delayed reward and the REINFORCE term."""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


def category_max_pool(scores):
    """Per-class max over all region score vectors.

    Args:
        scores: Tensor (..., n, C), or a list of such tensors concatenated
            along the region axis.

    Returns:
        Tensor (..., C).
    """
    if isinstance(scores, (list, tuple)):
        if not scores:
            raise ValueError("category_max_pool: no score vectors")
        scores = ad.concat(scores, axis=-2)
    scores = ad.tensor(scores)
    if scores.ndim < 2 or scores.shape[-2] == 0:
        raise ValueError(f"category_max_pool: no score vectors in shape {scores.shape}")
    return ad.max(scores, axis=-2)


def class_probabilities(a):
    return ad.softmax(a)


def target_distribution(y):
    y = np.asarray(y, dtype=np.float64)
    mass = y.sum(axis=-1, keepdims=True)
    if np.any(mass == 0):
        raise ValueError("classification_loss: label vector with no positives")
    return y / mass


def classification_loss(p, y):
    """Mean over the batch of the squared distance to y / |y|_1.

    Args:
        p: Tensor (B, C) or (C,) of probabilities.
        y: binary labels of matching shape.
    """
    p = ad.tensor(p)
    target = target_distribution(y)
    if target.shape != p.shape:
        raise ad.ShapeError(f"classification_loss: probabilities {p.shape} vs labels {target.shape}")
    diff = ad.sub(p, ad.constant(target))
    per_sample = ad.sum(ad.mul(diff, diff), axis=-1)
    return ad.mean(per_sample)


def top_n(scores, n):
    """Indices of the n largest scores; ties go to the lower index."""
    scores = np.asarray(scores)
    order = np.lexsort((np.arange(scores.shape[-1]), -scores))
    return order[:n]


def compute_reward(scores, truth, t, T):
    """Delayed reward: zero before the last iteration, then top-n recall.

    Args:
        scores: fused score vector (C,).
        truth: collection of ground-truth class indices (n = its size).
        t, T: current and final iteration.
    """
    g = set(int(c) for c in truth)
    n = len(g)
    scores = np.asarray(scores)
    if n < 1:
        raise ValueError("compute_reward: empty ground-truth set")
    if n > scores.shape[-1]:
        raise ValueError(f"compute_reward: {n} labels but only {scores.shape[-1]} classes")
    if t < T:
        return 0.0
    pred = set(int(c) for c in top_n(scores, n))
    return len(g & pred) / n


def batch_rewards(scores, labels):
    """Terminal rewards for (B, C) fused scores and (B, C) binary labels."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    return np.array([compute_reward(s, np.flatnonzero(y), 1, 1) for s, y in zip(scores, labels)])


def discounted_return(rewards, gamma=1.0):
    """sum_t gamma^(t-1) r_t for rewards r_1..r_T."""
    rewards = np.asarray(rewards, dtype=np.float64)
    return float(np.sum(rewards * gamma ** np.arange(len(rewards))))


@dataclass
class BaselineState:
    """Exponential running mean of returns."""

    value: float = 0.0
    momentum: float = 0.9

    def update(self, mean_return):
        self.value = self.momentum * self.value + (1.0 - self.momentum) * float(mean_return)
        return self.value


def reinforce_loss(log_prob_sum, returns, baseline, update=True):
    """Surrogate whose gradient is minus the baselined REINFORCE estimate.

    Args:
        log_prob_sum: Tensor (B,) of sum_t log pi(l_t) per episode.
        returns: (B,) terminal returns R.
        baseline: BaselineState; its value is read before the update.
        update: apply ``b <- m*b + (1-m)*mean(R)`` afterwards.

    Returns:
        scalar Tensor ``-mean((R - b) * sum_t log pi)`` with the advantage
        held constant.
    """
    if not np.all(np.isfinite(log_prob_sum.data)):
        raise FloatingPointError("reinforce_loss: non-finite log-probabilities")
    returns = np.asarray(returns, dtype=np.float64).reshape(log_prob_sum.shape)
    advantage = returns - baseline.value
    loss = ad.scale(ad.mean(ad.mul(log_prob_sum, ad.constant(advantage))), -1.0)
    if update:
        baseline.update(returns.mean())
    return loss


def hybrid_loss(cls, rl, lambda_rl=1.0):
    if rl is None or lambda_rl == 0:
        return cls
    return ad.add(cls, ad.scale(rl, lambda_rl))
