"""Per-pair coefficient estimation with fixed operators.

For each patch pair, find the (mu, sigma) that minimize the full energy.
Optimizing over the smoothing width sigma together with mu lets the
search match coarse structure first and sharpen as it homes in, which is
what carries gradient descent past the local minima that plague a
direct (sigma = 0) coefficient search.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .energy import pair_energy
from .operator import Coefficients, OverflowGuardError
from .optimize import MinimizeSpec, NonFiniteObjective, minimize

__all__ = [
    "InferencePolicy",
    "InferResult",
    "AllRestartsFailed",
    "coarse_sigma",
    "infer",
    "infer_batch",
    "coefficient_recovery_stats",
    "RecoveryStats",
]

log = logging.getLogger(__name__)

_LOG_SIGMA_FLOOR = 1e-8  # sigma is optimized as exp(rho); floor keeps rho finite


class AllRestartsFailed(RuntimeError):
    """Every initialization hit a non-finite objective; sample skipped."""


@dataclass(frozen=True)
class InferencePolicy:
    """Initialization and search policy for coefficient estimation.

    init_sigma = None starts each operator at the width that attenuates
    its sharpest eigen-mode by e^-4, a genuinely coarse match.
    blur_mode "frozen_zero" pins sigma = 0 throughout, which reproduces
    the no-smoothing baseline. restarts adds extra random mu starts
    (seeded per pair id, deterministic).
    """

    init_mu: float | np.ndarray = 0.0
    init_sigma: float | np.ndarray | None = None
    restarts: int = 0
    blur_mode: str = "adaptive"
    restart_scale: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.blur_mode not in ("adaptive", "frozen_zero"):
            raise ValueError(f"unknown blur_mode {self.blur_mode!r}")
        if self.restarts < 0:
            raise ValueError("restarts must be >= 0")
        init_sigma = self.init_sigma
        if init_sigma is not None and np.any(np.asarray(init_sigma) < 0):
            raise ValueError("init_sigma must be non-negative")


@dataclass
class InferResult:
    coeffs: Coefficients
    energy: float
    converged: bool


def coarse_sigma(op, log_attenuation=4.0):
    """Smoothing width that damps the operator's sharpest mode by e^-log_attenuation."""
    m = float(np.max(np.abs(op.lam)))
    if m < 1e-12:
        return 1.0
    return float(np.sqrt(2.0 * log_attenuation) / m)


def _start_vectors(chain, policy):
    k = len(chain)
    mu0 = np.broadcast_to(np.asarray(policy.init_mu, dtype=np.float64), (k,)).copy()
    if policy.init_sigma is None:
        sig0 = np.array([coarse_sigma(op) for op in chain.ops])
    else:
        sig0 = np.broadcast_to(np.asarray(policy.init_sigma, dtype=np.float64), (k,)).copy()
    return mu0, sig0


def infer(chain, pair, config, policy=None, spec=None):
    """Best coefficients for one pair from the policy's initializations.

    Returns an InferResult with the lowest-energy solution across the
    base start and any restarts. Raises AllRestartsFailed when every
    start fails with a non-finite objective.
    """
    policy = policy or InferencePolicy()
    spec = spec or MinimizeSpec(max_iters=300)
    k = len(chain)
    adaptive = policy.blur_mode == "adaptive"
    mu0, sig0 = _start_vectors(chain, policy)

    def objective(theta):
        mu = theta[:k]
        if adaptive:
            rho = theta[k:]
            # reject absurd probe widths before exp can overflow
            if np.any(rho > 50.0):
                return np.inf, np.zeros_like(theta)
            sigma = np.exp(rho)
        else:
            sigma = np.zeros(k)
        try:
            total, g_mu, g_sigma = pair_energy(chain, Coefficients(mu, sigma), pair, config)
        except OverflowGuardError:
            return np.inf, np.zeros_like(theta)
        if adaptive:
            return total, np.concatenate([g_mu, g_sigma * sigma])
        return total, g_mu

    starts = [mu0]
    if policy.restarts:
        rng = np.random.default_rng([policy.seed, pair.id])
        for _ in range(policy.restarts):
            starts.append(rng.uniform(-policy.restart_scale, policy.restart_scale, k))

    best = None
    failures = 0
    for mu_start in starts:
        if adaptive:
            theta0 = np.concatenate([mu_start, np.log(np.maximum(sig0, _LOG_SIGMA_FLOOR))])
        else:
            theta0 = np.array(mu_start)
        try:
            res = minimize(objective, theta0, spec)
        except NonFiniteObjective:
            failures += 1
            continue
        if best is None or res.f < best.f:
            best = res
    if best is None:
        raise AllRestartsFailed(f"pair {pair.id}: all {failures} start(s) non-finite")

    mu = best.x[:k]
    sigma = np.exp(best.x[k:]) if adaptive else np.zeros(k)
    return InferResult(
        coeffs=Coefficients(mu, sigma),
        energy=best.f,
        converged=best.converged,
    )


def infer_batch(chain, pairs, config, policy=None, spec=None, threads=1):
    """Run infer over many pairs; results returned in pair order.

    Failed pairs (AllRestartsFailed) are logged and reported as None.
    """

    def one(pair):
        try:
            return infer(chain, pair, config, policy, spec)
        except AllRestartsFailed as exc:
            log.warning("skipping pair %s: %s", pair.id, exc)
            return None

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, pairs))
    return [one(p) for p in pairs]


@dataclass
class RecoveryStats:
    per_op: np.ndarray  # fraction recovered for each operator
    overall: float
    hits: np.ndarray  # (T, K) boolean

    def __str__(self):
        ops = " ".join(f"{f:.3f}" for f in self.per_op)
        return f"recovered per-op [{ops}] overall {self.overall:.3f}"


def coefficient_recovery_stats(truth, inferred, periods=None, rel_tol=0.01, abs_floor=0.01):
    """Fraction of coefficients recovered within a relative tolerance.

    truth and inferred are (T, K) arrays or sequences of Coefficients.
    A coefficient counts as recovered when |inferred - true| is within
    rel_tol * |true|, with abs_floor as the margin for near-zero truths.
    periods, when given, holds one period (or None) per operator;
    periodic coefficients are compared on the wrapped difference.
    """

    def to_mu(batch):
        if isinstance(batch, np.ndarray):
            return np.atleast_2d(np.asarray(batch, dtype=np.float64))
        return np.stack([np.asarray(c.mu, dtype=np.float64) for c in batch])

    t = to_mu(truth)
    e = to_mu(inferred)
    if t.shape != e.shape:
        raise ValueError(f"batch shapes differ: {t.shape} vs {e.shape}")
    diff = e - t
    if periods is not None:
        for k, period in enumerate(periods):
            if period is not None:
                diff[:, k] = (diff[:, k] + period / 2.0) % period - period / 2.0
    tol = np.maximum(rel_tol * np.abs(t), abs_floor)
    hits = np.abs(diff) <= tol
    return RecoveryStats(
        per_op=hits.mean(axis=0),
        overall=float(hits.mean()),
        hits=hits,
    )
