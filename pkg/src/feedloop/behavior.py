"""Per-agent behavioral rules: creation, similarity, satisfaction, following,
exploration sampling, sharing and virality.

Functions here are pure given their inputs and an explicit ``numpy`` Generator.
"""

from __future__ import annotations

import math

import numpy as np

from feedloop.config import BehaviorParams

CASUAL, ENTHUSIAST = 0, 1


def sigmoid(x):
    """Numerically stable logistic function for scalars and arrays."""
    if np.ndim(x) == 0:
        x = float(x)
        if x >= 0:
            return 1.0 / (1.0 + math.exp(-x))
        z = math.exp(x)
        return z / (1.0 + z)
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    z = np.exp(x[~pos])
    out[~pos] = z / (1.0 + z)
    return out


def normalize(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v)
    if norm == 0:
        raise ValueError("cannot normalize a zero vector")
    return v / norm


def creation_rate(user_type: int, params: BehaviorParams) -> float:
    return params.creation_rates[user_type]


def noisy_topic(preference: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Topic vector of a new item: elementwise multiplicative noise on the
    creator's preference, clamped at zero and renormalized."""
    if sigma == 0:
        return preference.copy()
    noise = rng.normal(0.0, sigma, size=preference.shape)
    topic = np.clip(preference * (1.0 + noise), 0.0, None)
    if not topic.any():
        return preference.copy()
    return topic / np.linalg.norm(topic)


def create_content(preference: np.ndarray, rate: float, params: BehaviorParams,
                   rng: np.random.Generator) -> np.ndarray | None:
    """Return a topic vector with probability ``rate``, else ``None``.

    The Bernoulli draw is always taken first so the stream layout does not
    depend on the outcome.
    """
    if rng.random() >= rate:
        return None
    return noisy_topic(preference, params.creation_noise_sigma, rng)


def cosine_similarity(p: np.ndarray, t: np.ndarray) -> float:
    np_ = np.linalg.norm(p)
    nt = np.linalg.norm(t)
    if np_ == 0 or nt == 0:
        raise ValueError("cosine similarity undefined for a zero vector (degenerate profile)")
    return float(np.dot(p, t) / (np_ * nt))


def satisfaction_delta(sim: float, user_type: int, xi: float, params: BehaviorParams) -> float:
    scale = 0.1 + 0.2 * xi
    tau = params.tau
    if sim < tau:
        return scale * (-params.beta_minus[user_type] * (tau - sim))
    return scale * (params.beta_plus[user_type] * (sim - tau))


def satisfaction_deltas(sims: np.ndarray, user_type: int, xis: np.ndarray,
                        params: BehaviorParams) -> np.ndarray:
    """Vectorized :func:`satisfaction_delta` over one agent's consumed items."""
    scale = 0.1 + 0.2 * xis
    gap = sims - params.tau
    coef = np.where(gap < 0, params.beta_minus[user_type], params.beta_plus[user_type])
    return scale * coef * gap


def update_satisfaction(s: float, delta: float) -> float:
    return min(1.0, max(0.0, s + delta))


def follow_probability(sim: float, engagement: float, params: BehaviorParams) -> float:
    g0, g1, g2 = params.gamma
    return sigmoid(g0 + g1 * sim + g2 * engagement)


def exploration_distribution(scores, r_explore: float) -> np.ndarray:
    """Softmax of ``scores`` at temperature ``1 / r_explore``."""
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        raise ValueError("exploration over an empty candidate set")
    if r_explore <= 0:
        raise ValueError("r_explore must be positive")
    z = scores * r_explore
    z = z - z.max()
    w = np.exp(z)
    return w / w.sum()


def sample_without_replacement(scores: np.ndarray, r_explore: float, size: int,
                               rng: np.random.Generator) -> np.ndarray:
    """Indices of ``size`` draws without replacement from the exploration
    softmax, in draw order.

    Uses Gumbel-top-k, which is distributed exactly as sequential softmax
    sampling with renormalization after each draw.
    """
    scores = np.asarray(scores, dtype=float)
    gumbel = rng.gumbel(size=scores.shape)
    keys = scores * r_explore + gumbel
    size = min(size, scores.size)
    # stable on ties: lower index first
    order = np.lexsort((np.arange(scores.size), -keys))
    return order[:size]


def share_probability(delta_s: float, params: BehaviorParams) -> float:
    return sigmoid(params.kappa * (delta_s - params.share_threshold))


def like_probability(sim, params: BehaviorParams):
    """Likes rise linearly from zero at ``like_threshold`` to one at a perfect match."""
    th = params.like_threshold
    return np.clip((np.asarray(sim, dtype=float) - th) / (1.0 - th), 0.0, 1.0)


def viral_coefficient(shares: int, views: int) -> float:
    if views <= 0:
        return 0.0
    return min(1.0, shares / views)


def engagement_frequency(count: int, window: int) -> float:
    """Windowed interaction frequency used as the follow-engagement term."""
    return min(1.0, count / window)
