"""ListNet, symmetric InfoNCE and joint objectives over cosine similarities.

Every loss returns its value together with the analytic gradient with
respect to the similarity input, so the encoder backward pass only needs
the chain rule through cosine and the affine heads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SIM_TOL = 1e-9


class UndefinedDistribution(ValueError):
    """All ratings are zero, so the top-one distribution has no mass."""


@dataclass(frozen=True)
class LossConfig:
    omega: float = 0.05
    tau: float = 0.07
    alpha: float = 0.5

    def __post_init__(self):
        if not self.omega > 0:
            raise ValueError(f"omega must be > 0, got {self.omega}")
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


@dataclass(frozen=True)
class LossValue:
    value: float
    grad: np.ndarray


@dataclass(frozen=True)
class JointLossValue:
    value: float
    infonce_grad: np.ndarray
    listnet_grad: np.ndarray


def _check_sims(sims, ndim=None):
    sims = np.asarray(sims, dtype=np.float64)
    if ndim is not None and sims.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d similarity array, got shape {sims.shape}")
    if sims.size == 0:
        raise ValueError("similarity input is empty")
    if not np.all(np.abs(sims) <= 1.0 + SIM_TOL):
        raise ValueError("similarities must lie in [-1, 1]")
    return sims


def rank_positions(ratings) -> np.ndarray:
    """Competition ranks in descending order: ``1 + #{j : s_j > s_i}``.

    Works row-wise on a 2-d array.
    """
    s = np.asarray(ratings, dtype=np.float64)
    greater = (s[..., None, :] > s[..., :, None]).sum(axis=-1)
    return greater + 1


def _phi(ratings):
    s = np.asarray(ratings, dtype=np.float64)
    return s / np.log2(rank_positions(s) + 1.0)


def top_one_p(ratings) -> np.ndarray:
    """Top-one probabilities from ratings in [0, 100] with a log2 rank discount.

    Row-wise on a 2-d array.
    """
    s = np.asarray(ratings, dtype=np.float64)
    if np.any(s < 0.0) or np.any(s > 100.0):
        raise ValueError("ratings must lie in [0, 100]")
    phi = _phi(s)
    total = phi.sum(axis=-1, keepdims=True)
    if np.any(total <= 0.0):
        raise UndefinedDistribution("all ratings are zero; top-one distribution undefined")
    return phi / total


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def top_one_q(sims, omega: float) -> np.ndarray:
    """Softmax of ``sims / omega`` (row-wise on a 2-d array)."""
    if not omega > 0:
        raise ValueError(f"omega must be > 0, got {omega}")
    sims = _check_sims(sims)
    z = sims / omega
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def listnet_loss(ratings, sims, omega: float) -> LossValue:
    """Cross entropy between rating- and similarity-based top-one distributions.

    With 2-d inputs each row is one list and the value is the mean over rows;
    the gradient is then that of the mean.
    """
    ratings = np.asarray(ratings, dtype=np.float64)
    sims = _check_sims(sims)
    if ratings.shape != sims.shape:
        raise ValueError(f"ratings shape {ratings.shape} != sims shape {sims.shape}")
    if ratings.ndim not in (1, 2):
        raise ValueError("listnet_loss takes one list or a 2-d batch of lists")
    if not omega > 0:
        raise ValueError(f"omega must be > 0, got {omega}")
    p = top_one_p(ratings)
    log_q = _log_softmax(sims / omega)
    per_list = -(p * log_q).sum(axis=-1)
    grad = (np.exp(log_q) - p) / omega
    if ratings.ndim == 2:
        n = ratings.shape[0]
        return LossValue(float(per_list.mean()), grad / n)
    return LossValue(float(per_list), grad)


def infonce_loss(sims, tau: float) -> LossValue:
    """Symmetric InfoNCE on a square matrix whose diagonal holds the positives.

    Entry ``(i, j)`` is the similarity of audio ``i`` with caption ``j``.
    Row-wise (audio to caption) and column-wise (caption to audio) cross
    entropies are each averaged over the batch, then summed.
    """
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    sims = _check_sims(sims, ndim=2)
    b, b2 = sims.shape
    if b != b2:
        raise ValueError(f"similarity matrix must be square, got {sims.shape}")
    z = sims / tau
    log_rows = _log_softmax(z)
    log_cols = _log_softmax(z.T).T
    value = -(np.trace(log_rows) + np.trace(log_cols)) / b
    grad = np.exp(log_rows) + np.exp(log_cols)
    grad.flat[:: b + 1] -= 2.0
    grad /= b * tau
    return LossValue(float(value), grad)


def joint_loss(infonce: LossValue, listnet: LossValue, alpha: float) -> JointLossValue:
    """``alpha * infonce + (1 - alpha) * listnet`` with per-branch gradients."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return JointLossValue(
        alpha * infonce.value + (1.0 - alpha) * listnet.value,
        alpha * np.asarray(infonce.grad),
        (1.0 - alpha) * np.asarray(listnet.grad),
    )
