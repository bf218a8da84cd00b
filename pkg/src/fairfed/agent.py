"""Single-agent fair LinUCB state machine.

One :class:`AgentState` holds the split sufficient statistics: the shared
pool ``(U, u)`` absorbed at the last synchronization (ridge term included)
and the local-since-sync increments ``(S, s)``.  The working statistics are
always ``V = U + S`` and ``b = u + s``.  The cumulative own-data totals
``(cum_S, cum_s)`` are what the agent contributes at a sync.

Used standalone (never synchronized) this is the non-communicating baseline;
inside the federation it is the per-agent core between barriers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numkit
from .fairness import MeritFn, construct_policy
from .optimizer import Ellipsoid, PgdConfig, maximize


@dataclass
class AgentState:
    agent_id: int
    lam: float
    U: np.ndarray          # shared Gram matrix, lambda-ridge included
    u: np.ndarray          # shared reward vector
    S: np.ndarray          # local Gram since last sync
    s: np.ndarray          # local reward vector since last sync
    cum_S: np.ndarray      # own outer-product total since round 1
    cum_s: np.ndarray      # own reward-vector total since round 1
    delta: int = 0         # rounds since last sync
    theta_hat: np.ndarray | None = None
    last_theta_opt: np.ndarray | None = None

    @property
    def V(self) -> np.ndarray:
        return self.U + self.S

    @property
    def b(self) -> np.ndarray:
        return self.u + self.s


def new_agent(agent_id: int, d: int, lam: float = 1.0) -> AgentState:
    """Fresh state: ``U = lam I``, everything else zero."""
    return AgentState(
        agent_id=agent_id,
        lam=float(lam),
        U=lam * np.eye(d),
        u=np.zeros(d),
        S=np.zeros((d, d)),
        s=np.zeros(d),
        cum_S=np.zeros((d, d)),
        cum_s=np.zeros(d),
    )


@dataclass(frozen=True)
class BetaSchedule:
    """Confidence-radius schedule; ``beta(t)`` is the squared radius.

    ``m`` is the number of agents whose observations can enter the Gram
    matrix (1 for a non-communicating agent).  Private mode additionally
    needs the accuracy triple ``(rho_bar, rho_underbar, z)`` from the
    privatizer calibration.
    """

    mode: str = "nonprivate"      # "nonprivate" | "private"
    sigma: float = 0.1
    alpha: float = 0.1
    lam: float = 1.0
    c: float = 1.0                # bound on ||theta_star||
    m: int = 1
    context_norm_cap: float = 1.0
    rho_bar: float | None = None
    rho_underbar: float | None = None
    z: float | None = None

    def beta(self, t: int, d: int) -> float:
        if self.mode == "private":
            return beta_private(self, t, d)
        return beta_nonprivate(self, t, d)


def beta_nonprivate(sched: BetaSchedule, t: int, d: int) -> float:
    """Self-normalized-bound radius, squared.

    ``sqrt(beta_t) = sigma sqrt(d ln((1 + m t L^2 / lam) / alpha))
    + sqrt(lam) c``.  Monotone in ``t``; with ``sigma = 0`` only the prior
    term survives.
    """
    if t < 1:
        raise ValueError("t must be >= 1")
    L2 = sched.context_norm_cap ** 2
    grow = (1.0 + sched.m * t * L2 / sched.lam) / sched.alpha
    root = sched.sigma * math.sqrt(d * math.log(grow)) + math.sqrt(sched.lam) * sched.c
    return root * root


def beta_private(sched: BetaSchedule, t: int, d: int) -> float:
    """Private radius from the accuracy triple, squared.

    ``sqrt(beta_t) = sigma sqrt(2 ln(2/alpha) + d ln(rho_bar/rho_underbar
    + t/(d rho_underbar))) + m c sqrt(rho_bar) + m z``.
    """
    if t < 1:
        raise ValueError("t must be >= 1")
    if sched.rho_bar is None or sched.rho_underbar is None or sched.z is None:
        raise ValueError("private schedule needs rho_bar, rho_underbar and z")
    inner = 2.0 * math.log(2.0 / sched.alpha) + d * math.log(
        sched.rho_bar / sched.rho_underbar + t / (d * sched.rho_underbar)
    )
    root = sched.sigma * math.sqrt(inner) + sched.m * sched.c * math.sqrt(sched.rho_bar) + sched.m * sched.z
    return root * root


@dataclass
class ActResult:
    action: int
    policy: np.ndarray
    theta_opt: np.ndarray
    theta_hat: np.ndarray
    chol: np.ndarray       # lower Cholesky factor of V, reusable by callers
    pgd_iters: int


def act(
    state: AgentState,
    ctx,
    beta_t: float,
    f: MeritFn,
    pgd_cfg: PgdConfig,
    action_rng: np.random.Generator,
    pgd_rng: np.random.Generator,
) -> ActResult:
    """One decision: estimate, optimism, policy, sampled action.

    The ridge estimate solves ``V theta = b``; the optimistic parameter
    maximizes the expected fair reward over the confidence ellipsoid
    (warm-started from the previous round's optimum); the action is drawn
    by inverse CDF from a dedicated stream.  Raises the solver error if
    ``V`` is not positive definite, which signals a missing PSD shift
    upstream.
    """
    V = state.V
    L = numkit.chol_spd(V)
    theta_hat = numkit.solve_spd(V, state.b, chol=L)
    ell = Ellipsoid(center=theta_hat, metric=V, radius=math.sqrt(max(beta_t, 0.0)))
    theta_opt, iters = maximize(
        ell, ctx, f, pgd_cfg, pgd_rng, warm_start=state.last_theta_opt, chol=L
    )
    policy = construct_policy(theta_opt, ctx, f)
    cdf = np.cumsum(policy)
    action = int(min(np.searchsorted(cdf, action_rng.random(), side="right"), len(policy) - 1))
    state.theta_hat = theta_hat
    state.last_theta_opt = theta_opt
    return ActResult(action=action, policy=policy, theta_opt=theta_opt,
                     theta_hat=theta_hat, chol=L, pgd_iters=iters)


def update(state: AgentState, x_chosen: np.ndarray, y: float) -> AgentState:
    """Absorb one observation into the local and cumulative statistics."""
    outer = np.outer(x_chosen, x_chosen)
    state.S += outer
    state.s += y * x_chosen
    state.cum_S += outer
    state.cum_s += y * x_chosen
    state.delta += 1
    return state
