"""Posterior of the per-partition success probability given a noisy count.

The model for a released count ``s_noisy`` from ``M`` partitions::

    s_noisy | S ~ Laplace(S, sensitivity / epsilon)
    S | r       ~ Binomial(M, r)
    r           ~ Beta(1, 1)

:func:`posterior_r` marginalizes ``S`` exactly over ``0..M`` and evaluates the
density of ``r`` on a fixed grid. Only public quantities enter; no dataset or
true count is needed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

GRID_POINTS = 4097


@dataclass(frozen=True)
class RPosterior:
    grid: np.ndarray
    density: np.ndarray  # normalized weights on ``grid``
    mode: float
    mean: float
    ci95: tuple[float, float]
    inputs: tuple[float, int, float]

    def mass_at_least(self, threshold: float) -> float:
        return float(self.density[self.grid >= threshold].sum())

    def quantile(self, q: float) -> float:
        cdf = np.cumsum(self.density)
        return float(self.grid[min(np.searchsorted(cdf, q), len(self.grid) - 1)])

    def to_json(self, full: bool = False) -> dict:
        s_noisy, M, epsilon = self.inputs
        out = {
            "mode": self.mode,
            "mean": self.mean,
            "ci95": list(self.ci95),
            "median": self.quantile(0.5),
            "grid_points": len(self.grid),
            "inputs": {"S_noisy": s_noisy, "M": M, "epsilon": epsilon},
        }
        if full:
            out["density"] = self.density.tolist()
        return out


def _log_binomial_matrix(M: int, grid: np.ndarray) -> np.ndarray:
    """log Binomial(S; M, r) for S = 0..M (rows) and r on ``grid`` (columns)."""
    S = np.arange(M + 1)[:, None]
    r = grid[None, :]
    log_choose = special.gammaln(M + 1) - special.gammaln(S + 1) - special.gammaln(M - S + 1)
    return log_choose + special.xlogy(S, r) + special.xlog1py(M - S, -r)


def posterior_r(s_noisy: float, M: int, epsilon: float, sensitivity: float = 1.0,
                grid_points: int = GRID_POINTS) -> RPosterior:
    """Grid posterior of ``r`` given a released count.

    ``s_noisy`` may lie anywhere on the real line; the Laplace likelihood
    handles values outside ``[0, M]``.
    """
    if M < 1:
        raise ValueError("M must be at least 1")
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    scale = sensitivity / epsilon
    grid = np.linspace(0.0, 1.0, grid_points)
    S = np.arange(M + 1)
    log_lik = -np.abs(s_noisy - S) / scale  # constant -log(2 scale) cancels
    log_post = special.logsumexp(log_lik[:, None] + _log_binomial_matrix(M, grid), axis=0)
    weights = np.exp(log_post - log_post.max())
    weights /= weights.sum()
    cdf = np.cumsum(weights)
    lo = float(grid[np.searchsorted(cdf, 0.025)])
    hi = float(grid[min(np.searchsorted(cdf, 0.975), grid_points - 1)])
    return RPosterior(
        grid=grid,
        density=weights,
        mode=float(grid[np.argmax(weights)]),
        mean=float(weights @ grid),
        ci95=(lo, hi),
        inputs=(float(s_noisy), int(M), float(epsilon)),
    )


def theta_decision(post: RPosterior, gamma1: float) -> int:
    """Client-side decision for the pseudo-parameter.

    Returns 1 when at least half of the posterior mass of ``r`` lies at or
    above ``gamma1``, i.e. when it is more likely than not that the
    partition-level estimator lands in the interval with probability at
    least ``gamma1``.
    """
    if not 0 < gamma1 < 1:
        raise ValueError("gamma1 must lie in (0, 1)")
    return int(post.mass_at_least(gamma1) >= 0.5)


def posterior_count(noisy: float, M: int, epsilon: float, sensitivity: float = 1.0) -> np.ndarray:
    """Posterior over an integer count in ``0..M`` under a uniform prior."""
    counts = np.arange(M + 1)
    log_w = -np.abs(noisy - counts) * epsilon / sensitivity
    w = np.exp(log_w - log_w.max())
    return w / w.sum()


def mcmc_r_oracle(s_noisy: float, M: int, epsilon: float, draws: int = 100_000,
                  sensitivity: float = 1.0, chains: int = 500, burn_in: int = 200,
                  seed=0) -> np.ndarray:
    """Sample ``r`` from the same hierarchy by Metropolis-within-Gibbs on ``(S, r)``.

    Test oracle only. ``r | S`` is drawn exactly from Beta(S+1, M-S+1). ``S``
    is updated by Metropolis steps, alternating an independence proposal
    from Binomial(M, r) with a +/-1 random walk, each accepted on the Laplace
    likelihood ratio. Many short chains run in lockstep.
    """
    if draws < 100_000:
        raise ValueError("the oracle needs at least 1e5 draws")
    rng = np.random.default_rng(seed)
    scale = sensitivity / epsilon
    steps = -(-draws // chains)
    S = np.full(chains, int(np.clip(round(s_noisy), 0, M)))
    out = np.empty((steps, chains))

    def loglik(s):
        return -np.abs(s_noisy - s) / scale

    for it in range(burn_in + steps):
        r = np.clip(rng.beta(S + 1, M - S + 1), 1e-300, 1 - 1e-16)
        # independence proposal from the prior conditional: the binomial
        # terms cancel, leaving the likelihood ratio
        prop = rng.binomial(M, r)
        accept = np.log(rng.random(chains)) < loglik(prop) - loglik(S)
        S = np.where(accept, prop, S)
        # random walk; target ratio includes the binomial prior term
        prop = S + rng.choice([-1, 1], size=chains)
        inside = (prop >= 0) & (prop <= M)
        prop_c = np.clip(prop, 0, M)
        log_prior = (
            special.gammaln(S + 1) + special.gammaln(M - S + 1)
            - special.gammaln(prop_c + 1) - special.gammaln(M - prop_c + 1)
            + (prop_c - S) * (np.log(r) - np.log1p(-r))
        )
        accept = inside & (np.log(rng.random(chains)) < loglik(prop_c) - loglik(S) + log_prior)
        S = np.where(accept, prop_c, S)
        if it >= burn_in:
            out[it - burn_in] = r
    return out.ravel()[:draws]
