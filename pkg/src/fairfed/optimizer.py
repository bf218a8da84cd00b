"""Optimistic parameter selection over the confidence ellipsoid.

The per-round subproblem maximizes the expected fair reward

    J(theta) = sum_a w_a(theta) * (theta . x(a)),
    w_a(theta) = f(theta . x(a)) / sum_a' f(theta . x(a'))

over the ellipsoid ``{theta : ||theta - center||_V <= radius}``.  The
objective is nonconvex, so projected gradient ascent is run from several
start points (the warm start or the center, plus points sampled on the
ellipsoid boundary) and the best feasible iterate wins.  Projection is
radial in the V-metric, which is closed form and keeps every iterate
exactly feasible.

All starts are advanced in lockstep as rows of one batch, with a per-row
backtracking step size: a row that fails to improve shrinks its step and
retries on the next sweep, a row that improves resets to ``step0``.  The
accepted objective value of every row is therefore nondecreasing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit
from .fairness import MERIT_EXP_CAP, MeritFn

# A row whose step size collapses below step0 * 2^-40 has converged as far
# as backtracking can resolve.
_STEP_FLOOR = 2.0 ** -40

# Armijo sufficient-increase fraction for accepting a projected step.
_ARMIJO = 1e-4


@dataclass(frozen=True)
class Ellipsoid:
    """Confidence region ``{theta : ||theta - center||_metric <= radius}``."""

    center: np.ndarray
    metric: np.ndarray
    radius: float

    def contains(self, theta: np.ndarray, slack: float = 1e-9) -> bool:
        return numkit.hnorm(theta - self.center, self.metric) <= self.radius * (1.0 + slack) + 1e-15


@dataclass(frozen=True)
class PgdConfig:
    max_iters: int = 50
    step0: float = 0.5
    backtrack: float = 0.5
    restarts: int = 3
    grad_tol: float = 1e-7

    def __post_init__(self):
        if min(self.max_iters, self.restarts) < 1 or min(self.step0, self.grad_tol) <= 0:
            raise ValueError("PGD parameters must be positive")
        if not 0.0 < self.backtrack < 1.0:
            raise ValueError("backtrack must lie in (0, 1)")


def _context_matrix(ctx) -> np.ndarray:
    return ctx.x if hasattr(ctx, "x") else np.asarray(ctx)


def _weights(scores: np.ndarray, steepness: float) -> np.ndarray:
    # scores: (n, K) batch; softmax rows of steepness*scores, saturated at the
    # overflow cap like policy construction.
    z = np.minimum(steepness * scores, MERIT_EXP_CAP)
    z -= z.max(axis=1, keepdims=True)
    w = np.exp(z)
    w /= w.sum(axis=1, keepdims=True)
    return w


def _objective_rows(Theta: np.ndarray, X_rows: np.ndarray, steepness: float) -> np.ndarray:
    # Theta: (n, d); X_rows: (n, K, d), one context matrix per row.
    scores = np.einsum("nkd,nd->nk", X_rows, Theta)
    w = _weights(scores, steepness)
    return (w * scores).sum(axis=1)


def _objective_gradient_rows(Theta, X_rows, steepness):
    scores = np.einsum("nkd,nd->nk", X_rows, Theta)
    w = _weights(scores, steepness)
    ws = w * scores
    J = ws.sum(axis=1)
    Ex = np.einsum("nk,nkd->nd", w, X_rows)
    Esx = np.einsum("nk,nkd->nd", ws, X_rows)
    G = Ex + steepness * (Esx - J[:, None] * Ex)
    return J, G


def _objective_batch(Theta: np.ndarray, X: np.ndarray, steepness: float) -> np.ndarray:
    # Shared-context convenience used by tests and single calls.
    X_rows = np.broadcast_to(X, (len(Theta), *X.shape))
    return _objective_rows(Theta, X_rows, steepness)


def objective(theta: np.ndarray, ctx, f: MeritFn) -> float:
    """Expected fair reward of the policy induced by ``theta``."""
    X = _context_matrix(ctx)
    return float(_objective_rows(theta[None, :], X[None, :, :], f.steepness)[0])


def gradient(theta: np.ndarray, ctx, f: MeritFn) -> np.ndarray:
    """Analytic gradient of the objective for the exponential merit family.

    Writing s_a = theta.x(a) and E_w for the policy-weighted mean, this is
    ``E_w[x] + steepness (E_w[s x] - E_w[s] E_w[x])``; agreement with central
    finite differences is covered by the test suite.
    """
    X = _context_matrix(ctx)
    _, G = _objective_gradient_rows(theta[None, :], X[None, :, :], f.steepness)
    return G[0]


def project(theta: np.ndarray, ell: Ellipsoid) -> np.ndarray:
    """Radial projection onto the ellipsoid in its own metric.

    Interior points are returned unchanged (bit for bit), so the projection
    is idempotent after the first application.
    """
    diff = theta - ell.center
    h = numkit.hnorm(diff, ell.metric)
    if h <= ell.radius:
        return theta
    if ell.radius == 0.0 or h == 0.0:
        return ell.center.copy()
    return ell.center + diff * (ell.radius / h)


def _project_batch(Theta, center, V, radius):
    # Multiplying interior rows by an exact 1.0 leaves them bit-identical,
    # so no branch is needed.
    D = Theta - center
    q = ((D @ V) * D).sum(axis=1)
    h = np.sqrt(np.maximum(q, 0.0))
    scale = np.where(h > radius, radius / np.maximum(h, 1e-300), 1.0)
    return center + D * scale[:, None]


def maximize_rows(
    centers: np.ndarray,
    chols: np.ndarray,
    radii: np.ndarray,
    X_agents: np.ndarray,
    f: MeritFn,
    cfg: PgdConfig,
    rngs: list[np.random.Generator],
    warm_starts: list[np.ndarray | None],
) -> tuple[np.ndarray, np.ndarray]:
    """Projected gradient ascent over several ellipsoids in one sweep loop.

    ``centers (m,d)``, ``chols (m,d,d)`` (lower factors of the metrics),
    ``radii (m,)`` and ``X_agents (m,K,d)`` describe one subproblem per
    agent; each gets ``cfg.restarts`` rows (its warm start or center plus
    boundary points drawn from its own generator).  Returns the per-agent
    maximizers ``(m,d)`` and the per-agent sweep counts.

    The ascent runs in ellipsoid-normalized coordinates ``phi = L'(theta -
    center) / radius``, where the feasible set is the unit ball: projection
    is a renormalization and the step scale is independent of how squashed
    the ellipsoid is.  Every per-row quantity depends only on that row's
    own history, so an agent's result is the same whether it is optimized
    alone or inside a larger batch.
    """
    m, d = centers.shape
    R = max(cfg.restarts, 1)
    n = m * R
    cf = f.steepness

    # theta = center + W phi with W = radius * L^{-T}; grad_phi = W' grad_theta.
    W = radii[:, None, None] * np.swapaxes(np.linalg.inv(chols), 1, 2)
    W_rows = np.repeat(W, R, axis=0)
    centers_rows = np.repeat(centers, R, axis=0)
    X_rows = np.repeat(X_agents, R, axis=0)

    Phi = np.zeros((n, d))
    degenerate = np.zeros(n, dtype=bool)
    for i in range(m):
        base = i * R
        if radii[i] == 0.0:
            degenerate[base:base + R] = True
            continue
        warm = warm_starts[i]
        if warm is not None:
            phi0 = (chols[i].T @ (warm - centers[i])) / radii[i]
            h = float(np.sqrt(phi0 @ phi0))
            Phi[base] = phi0 / h if h > 1.0 else phi0
        if R > 1:
            u = rngs[i].standard_normal((R - 1, d))
            u /= np.maximum(np.sqrt((u * u).sum(axis=1, keepdims=True)), 1e-300)
            Phi[base + 1:base + R] = u

    Theta = centers_rows + np.einsum("ned,nd->ne", W_rows, Phi)
    J, Gt = _objective_gradient_rows(Theta, X_rows, cf)
    G = np.einsum("ned,ne->nd", W_rows, Gt)
    eta = np.full(n, cfg.step0)
    alive = ~degenerate
    alive_sweeps = np.zeros(n, dtype=np.int64)
    sweeps = 0
    for _ in range(cfg.max_iters):
        alive &= (G * G).sum(axis=1) > cfg.grad_tol ** 2
        if not alive.any():
            break
        sweeps += 1
        alive_sweeps[alive] = sweeps
        cand = Phi + (eta * alive)[:, None] * G
        nrm = np.sqrt((cand * cand).sum(axis=1))
        cand /= np.maximum(nrm, 1.0)[:, None]
        Tc = centers_rows + np.einsum("ned,nd->ne", W_rows, cand)
        Jc, Gtc = _objective_gradient_rows(Tc, X_rows, cf)
        moved = (G * (cand - Phi)).sum(axis=1)
        ok = alive & (moved > 0.0) & (Jc >= J + _ARMIJO * moved)
        if ok.any():
            # Accepted rows whose gain is already negligible are converged.
            stalled = ok & (Jc - J <= 1e-11 * (1.0 + np.abs(J)))
            Gc = np.einsum("ned,ne->nd", W_rows, Gtc)
            Phi = np.where(ok[:, None], cand, Phi)
            Theta = np.where(ok[:, None], Tc, Theta)
            J = np.where(ok, Jc, J)
            G = np.where(ok[:, None], Gc, G)
            # The step persists and grows on success instead of resetting,
            # so a row settles at its own scale instead of re-halving from
            # step0 every time.
            eta = np.where(ok, np.minimum(eta * 2.0, 64.0 * cfg.step0), eta)
            alive &= ~stalled
        fail = alive & ~ok
        eta = np.where(fail, eta * cfg.backtrack, eta)
        alive &= eta >= cfg.step0 * _STEP_FLOOR

    # Never return anything worse than the ellipsoid center.
    j_center = _objective_rows(centers, X_agents, cf)
    J_per = J.reshape(m, R)
    best = J_per.argmax(axis=1)
    take = np.arange(m) * R + best
    thetas = Theta[take].copy()
    worse = (J_per[np.arange(m), best] < j_center - 1e-12) | (radii == 0.0)
    if worse.any():
        thetas[worse] = centers[worse]
    iters = alive_sweeps.reshape(m, R).max(axis=1)
    return thetas, iters


def maximize(
    ell: Ellipsoid,
    ctx,
    f: MeritFn,
    cfg: PgdConfig,
    rng: np.random.Generator,
    warm_start: np.ndarray | None = None,
    chol: np.ndarray | None = None,
) -> tuple[np.ndarray, int]:
    """Single-ellipsoid front end to :func:`maximize_rows`.

    Returns the best feasible parameter found and the sweep count.  The
    result is always feasible and its objective is never below the
    objective at the ellipsoid center.
    """
    X = _context_matrix(ctx)
    if ell.radius == 0.0:
        return ell.center.copy(), 0
    if chol is None:
        chol = numkit.chol_spd(ell.metric)
    thetas, iters = maximize_rows(
        ell.center[None, :], chol[None, :, :], np.array([ell.radius]),
        X[None, :, :], f, cfg, [rng], [warm_start],
    )
    return thetas[0], int(iters[0])


def optimistic_theta(
    ell: Ellipsoid,
    ctx,
    f: MeritFn,
    cfg: PgdConfig,
    rng: np.random.Generator,
    warm_start: np.ndarray | None = None,
) -> np.ndarray:
    """Best feasible parameter found for the expected-fair-reward objective."""
    theta, _ = maximize(ell, ctx, f, cfg, rng, warm_start=warm_start)
    return theta
