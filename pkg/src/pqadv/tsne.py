"""Exact (quadratic-cost) t-SNE for a few thousand points."""

import numpy as np

from .errors import PerplexityTooLarge, TooFewPoints
from .rng import substream


def _sq_distances(X):
    sq = np.sum(X * X, axis=1)
    D = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.maximum(D, 0.0, out=D)
    np.fill_diagonal(D, 0.0)
    return D


def conditional_affinities(D, perplexity, tol=1e-5, max_steps=200):
    """Row-wise Gaussian affinities whose entropy matches log(perplexity).

    Bisection on the precision of each row. Raises PerplexityTooLarge when a
    row cannot reach the target, e.g. when all its distances are equal.
    """
    n = D.shape[0]
    target = np.log(perplexity)
    P = np.zeros((n, n))
    for i in range(n):
        d = np.delete(D[i], i)
        d = d - d.min()
        beta, lo, hi = 1.0, 0.0, np.inf
        for _ in range(max_steps):
            w = np.exp(-d * beta)
            s = w.sum()
            p = w / s
            H = np.log(s) + beta * np.sum(d * p)
            diff = H - target
            if abs(diff) < tol:
                break
            if diff > 0:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else (beta + hi) / 2.0
            else:
                hi = beta
                beta = (beta + lo) / 2.0
        if abs(diff) > 1e-3:
            raise PerplexityTooLarge(
                f"row {i}: cannot reach perplexity {perplexity} (entropy {H:.4f} vs {target:.4f})")
        P[i, np.arange(n) != i] = p
    return P


def tsne(X, perplexity=30.0, n_iter=1000, seed=0, learning_rate=200.0,
         exaggeration=12.0, exaggeration_iters=250, momentum=(0.5, 0.8), kl_every=1):
    """Project ``X`` to 2-D; returns ``(Y, kl_history)``.

    ``kl_history`` holds ``(iteration, KL(P || Q))`` pairs with the
    un-exaggerated P, recorded every ``kl_every`` iterations.
    """
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    if n < 4:
        raise TooFewPoints(f"t-SNE needs at least 4 points, got {n}")
    if n < 3 * perplexity:
        raise PerplexityTooLarge(f"perplexity {perplexity} needs at least {3 * perplexity:.0f} points")

    P = conditional_affinities(_sq_distances(X), perplexity)
    P = (P + P.T) / (2.0 * n)
    P = np.maximum(P, 1e-12)
    logP = np.log(P)

    rng = substream(seed, "tsne")
    Y = rng.normal(0.0, 1e-4, size=(n, 2))
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    history = []
    for it in range(n_iter):
        exag = exaggeration if it < exaggeration_iters else 1.0
        mom = momentum[0] if it < exaggeration_iters else momentum[1]
        num = 1.0 / (1.0 + _sq_distances(Y))
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / num.sum(), 1e-12)
        PQ = (exag * P - Q) * num
        grad = 4.0 * (np.sum(PQ, axis=1)[:, None] * Y - PQ @ Y)
        same = np.sign(grad) == np.sign(update)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        update = mom * update - learning_rate * gains * grad
        Y = Y + update
        Y = Y - Y.mean(axis=0)
        if kl_every and (it % kl_every == 0 or it == n_iter - 1):
            num = 1.0 / (1.0 + _sq_distances(Y))
            np.fill_diagonal(num, 0.0)
            Q = np.maximum(num / num.sum(), 1e-12)
            history.append((it, float(np.sum(P * (logP - np.log(Q))))))
    return Y, history
