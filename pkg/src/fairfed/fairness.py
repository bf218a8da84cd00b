"""Merit functions, exposure-proportional policies and regret metrics.

Only the exponential merit family ``f(mu) = exp(steepness * mu)`` ships: it
is what the experiments use, and its lower bound ``gamma`` and Lipschitz
constant on an interval have exact closed forms, which keeps the policy-gap
bound computable rather than estimated.

Naming note: the context-norm bound and the merit Lipschitz constant are
distinct quantities here (``Instance.norm_cap`` vs ``MeritFn.lipschitz``);
each bound below uses the one it actually depends on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Largest exponent handed to exp(); beyond this a merit evaluation overflows
# float64 range and is rejected (policy construction saturates instead).
MERIT_EXP_CAP = 700.0


class MeritRangeError(ValueError):
    """Merit evaluation would overflow float64."""


@dataclass(frozen=True)
class MeritFn:
    """Exponential merit with constants certified on [mu_min, mu_max].

    ``gamma`` is a lower bound of f and ``lipschitz`` a Lipschitz constant,
    both valid on the stated interval and audited on a dense grid at
    construction time.
    """

    steepness: float
    mu_min: float
    mu_max: float
    gamma: float
    lipschitz: float
    kind: str = "exponential"


def audit_merit(f, mu_min: float, mu_max: float) -> tuple[float, float]:
    """Certified (gamma, L_f) for the exponential family on [mu_min, mu_max].

    Exact closed forms: the exponential is increasing, so the minimum sits at
    ``mu_min`` and the steepest slope at ``mu_max``.  ``f`` may be a MeritFn
    or a bare steepness.
    """
    if mu_min > mu_max:
        raise ValueError("mu_min must not exceed mu_max")
    cf = f.steepness if isinstance(f, MeritFn) else float(f)
    if cf <= 0:
        raise ValueError("steepness must be positive")
    if cf * mu_max > MERIT_EXP_CAP:
        raise MeritRangeError(f"steepness*mu_max = {cf * mu_max:g} exceeds {MERIT_EXP_CAP:g}")
    gamma = float(np.exp(cf * mu_min))
    lipschitz = float(cf * np.exp(cf * mu_max))
    return gamma, lipschitz


def exponential_merit(steepness: float, mu_min: float, mu_max: float, grid: int = 512) -> MeritFn:
    """Build a MeritFn and audit its constants on a dense grid."""
    gamma, lipschitz = audit_merit(steepness, mu_min, mu_max)
    mus = np.linspace(mu_min, mu_max, grid)
    vals = np.exp(steepness * mus)
    if not np.all(vals >= gamma * (1.0 - 1e-12)):
        raise AssertionError("grid audit: lower bound gamma violated")
    if grid > 1 and mu_max > mu_min:
        slopes = np.abs(np.diff(vals)) / np.diff(mus)
        if not np.all(slopes <= lipschitz * (1.0 + 1e-9)):
            raise AssertionError("grid audit: Lipschitz constant violated")
    return MeritFn(steepness=float(steepness), mu_min=float(mu_min), mu_max=float(mu_max),
                   gamma=gamma, lipschitz=lipschitz)


def merit(f: MeritFn, mu: float) -> float:
    """Evaluate ``exp(steepness * mu)``, rejecting exponents past the cap."""
    e = f.steepness * mu
    if e > MERIT_EXP_CAP:
        raise MeritRangeError(f"exponent {e:g} exceeds {MERIT_EXP_CAP:g}")
    return float(np.exp(e))


def _context_matrix(ctx) -> np.ndarray:
    return ctx.x if hasattr(ctx, "x") else np.asarray(ctx)


def construct_policy(theta: np.ndarray, ctx, f: MeritFn) -> np.ndarray:
    """Exposure-proportional policy: probs[a] proportional to f(theta . x(a)).

    Computed as a max-shifted softmax of ``steepness * score`` so no merit is
    ever exponentiated directly; exponents are saturated at the overflow cap
    first (only reachable with extreme optimistic parameters).
    """
    x = _context_matrix(ctx)
    z = f.steepness * (x @ theta)
    z = np.minimum(z, MERIT_EXP_CAP)
    p = np.exp(z - z.max())
    p /= p.sum()
    return p


def optimal_policy(inst, ctx, f: MeritFn) -> np.ndarray:
    """The merit-proportional policy under the true parameter."""
    return construct_policy(inst.theta_star, ctx, f)


def fairness_regret_instant(pi: np.ndarray, pi_star: np.ndarray) -> float:
    """L1 distance between the played and the fair-optimal policy, in [0, 2]."""
    if len(pi) != len(pi_star):
        raise ValueError("policies have different lengths")
    return float(np.abs(np.asarray(pi_star) - np.asarray(pi)).sum())


def reward_regret_instant(pi: np.ndarray, pi_star: np.ndarray, ctx, theta_star: np.ndarray) -> float:
    """Expected-reward gap of the fair-optimal policy over the played one.

    This is ``sum_a (pi*(a) - pi(a)) theta* . x(a)``; the externally defined
    reward regret is only cited by the source material, so this gap is the
    recorded approximation.
    """
    if len(pi) != len(pi_star):
        raise ValueError("policies have different lengths")
    scores = _context_matrix(ctx) @ theta_star
    return float((np.asarray(pi_star) - np.asarray(pi)) @ scores)


def policy_gap_bound(f: MeritFn, beta_t: float, expected_width: float) -> float:
    """High-probability per-round bound on the policy L1 gap.

    ``4 L_f sqrt(beta_t) / gamma`` times the policy-expected normalized width
    bounds the instantaneous fairness regret whenever the true parameter lies
    in the confidence region and the constants are certified on an interval
    covering the realized scores.
    """
    return 4.0 * f.lipschitz * float(np.sqrt(beta_t)) / f.gamma * expected_width
