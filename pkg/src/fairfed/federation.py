"""Multi-agent orchestration: round loop, sync schedules, statistic pooling.

Round semantics: every agent observes contexts, acts and updates its local
statistics for round ``t``; only then does the scheduler decide whether a
synchronization fires at ``t``.  A sync is a barrier event at which each
agent contributes its cumulative statistics (through the privatizer in
private mode) to the shared pool and resets its local buffers, so the round
``t`` observations are included in the pooled statistics.

Agents interact only at syncs, and every random draw comes from a stream
keyed by (seed, purpose, round, agent), so the loop is deterministic
regardless of how the per-agent work would be scheduled across workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numkit
from .agent import AgentState, BetaSchedule, new_agent, update
from .environment import (
    ACTION_STREAM,
    PGD_STREAM,
    TREE_STREAM,
    Instance,
    borrow_stream,
    draw_contexts,
    reward_noise,
    stream,
)
from .fairness import (
    MeritFn,
    construct_policy,
    exponential_merit,
    fairness_regret_instant,
    optimal_policy,
    reward_regret_instant,
)
from .optimizer import PgdConfig, maximize_rows
from .privatizer import NoiseTree, PrivacyParams, calibrate, privatize

PROTOCOLS = ("proposed", "every_round", "fixed", "doubling", "det_trigger", "none")

# Wire size of one agent's sync payload: the d x (d+1) block at 8 bytes per
# entry.
def sync_payload_bytes(d: int) -> int:
    return d * (d + 1) * 8


def warmup_threshold(T: int, m: int, d: int) -> int:
    """``ceil(T / (m d^2 ln^2(1 + T/d)))``, the doubling-phase cutoff Q."""
    if min(T, m, d) < 1:
        raise ValueError("T, m, d must be positive")
    return max(1, math.ceil(T / (m * d * d * math.log(1.0 + T / d) ** 2)))


def sync_bound(T: int, m: int, d: int) -> int:
    """``ceil(2 m d^2 ln^2(1 + T/d))``, the ceiling on sync counts."""
    if min(T, m, d) < 1:
        raise ValueError("T, m, d must be positive")
    return math.ceil(2.0 * m * d * d * math.log(1.0 + T / d) ** 2)


@dataclass
class SyncSchedule:
    """Deterministic sync-time state for one run.

    ``proposed`` doubles ``tau`` while ``t < Q`` and then advances by ``Q``;
    ``every_round`` fires each round; ``fixed`` fires at multiples of ``q``;
    ``doubling`` doubles forever (gaps grow to order T, the unbounded-gap
    baseline); ``none`` never fires.  The data-driven trigger protocol is
    resolved by the run loop, not here.
    """

    protocol: str
    q: int = 1                       # warmup threshold or fixed interval
    tau: int = 1
    det_threshold: float = 1.0
    sync_count: int = 0
    sync_rounds: list[int] = field(default_factory=list)

    def record(self, t: int) -> None:
        self.sync_count += 1
        self.sync_rounds.append(t)


def advance_schedule(sched: SyncSchedule, t: int, T: int, m: int, d: int) -> bool:
    """Return whether a sync fires at ``t`` and advance the schedule state."""
    if sched.protocol == "every_round":
        sched.record(t)
        return True
    if sched.protocol == "none":
        return False
    if sched.protocol == "fixed":
        if t % sched.q == 0:
            sched.record(t)
            return True
        return False
    if sched.protocol in ("proposed", "doubling"):
        if t != sched.tau:
            return False
        sched.record(t)
        if sched.protocol == "doubling" or t < sched.q:
            sched.tau = 2 * sched.tau
        else:
            sched.tau = sched.tau + sched.q
        return True
    raise ValueError(f"schedule cannot advance protocol {sched.protocol!r}")


def make_schedule(protocol: str, T: int, m: int, d: int,
                  fixed_interval: int | None = None,
                  det_threshold: float = 1.0) -> SyncSchedule:
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}")
    q = warmup_threshold(T, m, d)
    if protocol == "fixed":
        if fixed_interval is None or fixed_interval < 1:
            raise ValueError("fixed protocol needs a positive interval")
        q = fixed_interval
    return SyncSchedule(protocol=protocol, q=q, det_threshold=det_threshold)


def planned_sync_rounds(protocol: str, T: int, m: int, d: int,
                        fixed_interval: int | None = None) -> list[int]:
    """Sync rounds of a deterministic protocol, simulated up front.

    The data-driven trigger protocol has no pre-run schedule; its tree
    capacity is bounded by T instead.
    """
    if protocol == "det_trigger":
        raise ValueError("det_trigger has no deterministic schedule")
    sched = make_schedule(protocol, T, m, d, fixed_interval=fixed_interval)
    for t in range(1, T + 1):
        advance_schedule(sched, t, T, m, d)
    return sched.sync_rounds


@dataclass
class SharedPool:
    """Post-sync shared statistics (sum of per-agent contributions)."""

    U: np.ndarray
    u: np.ndarray


def synchronize(
    agents: list[AgentState],
    pool: SharedPool,
    privatizers: dict[int, NoiseTree] | None = None,
    params: PrivacyParams | None = None,
) -> SharedPool:
    """Pool cumulative statistics and reset every agent's local buffers.

    Non-private: agent ``j`` contributes exactly ``(lam I + cum_S_j,
    cum_s_j)``.  Private: the since-sync increment goes through the agent's
    tree and the noisy cumulative release replaces the exact one, still with
    the agent's ``lam I`` added once.  Afterwards each agent's ``(U, u)`` is
    the pool, ``S = s = 0`` and ``delta = 0``.
    """
    d = agents[0].U.shape[0]
    U_total = np.zeros((d, d))
    u_total = np.zeros(d)
    for ag in agents:
        if privatizers is None:
            U_c = ag.lam * np.eye(d) + ag.cum_S
            u_c = ag.cum_s.copy()
        else:
            try:
                U_hat, u_hat = privatize(ag.S, ag.s, privatizers[ag.agent_id], params)
            except Exception as exc:
                raise RuntimeError(
                    f"privatizer failed for agent {ag.agent_id}: {exc}"
                ) from exc
            U_c = ag.lam * np.eye(d) + U_hat
            u_c = u_hat
        U_total += U_c
        u_total += u_c
    pool.U = U_total
    pool.u = u_total
    for ag in agents:
        ag.U = pool.U
        ag.u = pool.u
        ag.S = np.zeros((d, d))
        ag.s = np.zeros(d)
        ag.delta = 0
    return pool


@dataclass
class SyncEvent:
    t: int
    sync_index: int
    bytes_communicated: int


@dataclass(frozen=True)
class FederationConfig:
    """Everything run_federation needs beyond the instance."""

    protocol: str = "proposed"
    fixed_interval: int | None = None
    det_threshold: float = 1.0
    privacy: str = "none"             # "none" | "dp"
    epsilon: float = 2.0
    delta: float = 0.1
    budget_mode: str = "total"
    shift_mode: str = "repair"
    # Context-norm bound handed to the noise calibration.  None uses the
    # instance's actual bound; the experiment presets pass 1.0 (the theory's
    # normalization) since that is the scale the reference results exhibit.
    calibration_norm_cap: float | None = None
    alpha: float = 0.1
    lam: float = 1.0
    merit_steepness: float = 10.0
    beta_mode: str = "nonprivate"     # "nonprivate" | "private"
    beta_m: int | None = None         # agents counted in the radius; default below
    pgd: PgdConfig = PgdConfig()
    agent_ids: tuple[int, ...] | None = None  # subset of 1..m to simulate
    diagnostics: bool = False         # record widths, coverage, noise trace
    check_bounds: bool = False        # assert the per-round policy-gap bound
    run_id: str = "run"

    def resolved_agent_ids(self, inst: Instance) -> tuple[int, ...]:
        if self.agent_ids is not None:
            return tuple(self.agent_ids)
        return tuple(range(1, inst.m + 1))


@dataclass
class RunResult:
    """Columnar per-(round, agent) log plus run-level summaries."""

    inst: Instance
    cfg: FederationConfig
    n_agents: int
    # RoundLog columns, row order (t, agent):
    t: np.ndarray
    agent: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    fr_instant: np.ndarray
    rr_instant: np.ndarray
    fr_cum_mean: np.ndarray
    synced: np.ndarray
    beta_t: np.ndarray
    pgd_iters: np.ndarray
    # per-round curves (length T): Definition-style agent-mean cumulatives
    curve_fr: np.ndarray
    curve_rr: np.ndarray
    sync_events: list[SyncEvent]
    schedule: SyncSchedule
    privacy_params: PrivacyParams | None
    merit: MeritFn
    # diagnostics (None unless enabled)
    coverage: np.ndarray | None = None      # theta_star in CR, per row
    expected_width: np.ndarray | None = None
    chosen_width: np.ndarray | None = None
    eta: np.ndarray | None = None           # reward noise per row
    mu_lo: float = math.inf                 # realized score range across
    mu_hi: float = -math.inf                # theta_star/theta_hat/theta_opt
    per_agent_fr: np.ndarray | None = None  # cumulative FR per agent

    def roundlog_rows(self):
        """Yield RoundLog CSV rows in (t, agent) order."""
        seed, proto = self.inst.seed, self.cfg.protocol
        rid = self.cfg.run_id
        for j in range(len(self.t)):
            yield (
                rid, seed, proto, int(self.t[j]), int(self.agent[j]),
                int(self.action[j]), float(self.reward[j]),
                float(self.fr_instant[j]), float(self.rr_instant[j]),
                float(self.fr_cum_mean[j]), int(self.synced[j]),
                float(self.beta_t[j]), int(self.pgd_iters[j]),
            )


def default_merit_range(inst: Instance, cfg: FederationConfig, sched: BetaSchedule) -> tuple[float, float]:
    """Score interval certifiably covering every merit evaluation of a run.

    Any score is ``theta . x`` with ``||x|| <= norm_cap`` and ``theta``
    either the truth (``||theta|| <= c``) or a point of some confidence
    ellipsoid, whose Euclidean norm is at most ``||theta_hat|| +
    sqrt(beta_T / lam)``.  The estimate norm itself is unbounded in
    principle, so a generous slack multiple is used and the realized range
    is tracked at runtime; the bound checker insists the realized range
    stayed inside the audited one.
    """
    span = inst.norm_cap * (inst.c + 4.0 * math.sqrt(sched.beta(inst.horizon, inst.d) / cfg.lam) + 4.0)
    return -span, span


def run_federation(inst: Instance, cfg: FederationConfig) -> RunResult:
    """Simulate T rounds of the federated fair bandit under one config."""
    agent_ids = cfg.resolved_agent_ids(inst)
    n_ag = len(agent_ids)
    d, T = inst.d, inst.horizon
    if cfg.privacy not in ("none", "dp"):
        raise ValueError(f"unknown privacy mode {cfg.privacy!r}")

    beta_m = cfg.beta_m
    if beta_m is None:
        beta_m = 1 if cfg.protocol == "none" else n_ag

    privacy_params = None
    trees: dict[int, NoiseTree] | None = None
    if cfg.privacy == "dp":
        if cfg.protocol == "det_trigger":
            capacity = T
        else:
            capacity = max(1, len(planned_sync_rounds(
                cfg.protocol, T, n_ag, d, fixed_interval=cfg.fixed_interval)))
        calib_cap = cfg.calibration_norm_cap
        if calib_cap is None:
            calib_cap = inst.norm_cap
        privacy_params = calibrate(
            cfg.epsilon, cfg.delta, n_ag, d, capacity, calib_cap,
            cfg.alpha, lam=cfg.lam, budget_mode=cfg.budget_mode,
            shift_mode=cfg.shift_mode,
        )
        trees = {
            i: NoiseTree(capacity, (d, d + 1), params=privacy_params,
                         rng=stream(inst.seed, TREE_STREAM, agent=i))
            for i in agent_ids
        }

    sched_kwargs = dict(
        mode=cfg.beta_mode, sigma=inst.sigma, alpha=cfg.alpha, lam=cfg.lam,
        c=inst.c, m=beta_m, context_norm_cap=inst.norm_cap,
    )
    if cfg.beta_mode == "private":
        if privacy_params is None:
            raise ValueError("private beta schedule needs privacy='dp'")
        if cfg.shift_mode != "calibrated":
            raise ValueError("private beta schedule assumes the calibrated shift")
        sched_kwargs.update(
            rho_bar=privacy_params.rho_bar,
            rho_underbar=privacy_params.rho_underbar,
            z=privacy_params.z,
        )
    beta_sched = BetaSchedule(**sched_kwargs)

    mu_range = default_merit_range(inst, cfg, beta_sched)
    merit = exponential_merit(cfg.merit_steepness, *mu_range)

    agents = [new_agent(i, d, cfg.lam) for i in agent_ids]
    pool = SharedPool(U=cfg.lam * np.eye(d), u=np.zeros(d))
    schedule = make_schedule(cfg.protocol, T, n_ag, d,
                             fixed_interval=cfg.fixed_interval,
                             det_threshold=cfg.det_threshold)

    # det_trigger bookkeeping
    t_last_sync = 0
    logdet_last = {i: numkit.logdet(cfg.lam * np.eye(d)) for i in agent_ids}

    n_rows = T * n_ag
    col_t = np.zeros(n_rows, dtype=np.int64)
    col_agent = np.zeros(n_rows, dtype=np.int64)
    col_action = np.zeros(n_rows, dtype=np.int64)
    col_reward = np.zeros(n_rows)
    col_fr = np.zeros(n_rows)
    col_rr = np.zeros(n_rows)
    col_frcm = np.zeros(n_rows)
    col_synced = np.zeros(n_rows, dtype=np.int64)
    col_beta = np.zeros(n_rows)
    col_iters = np.zeros(n_rows, dtype=np.int64)
    curve_fr = np.zeros(T)
    curve_rr = np.zeros(T)
    diag = cfg.diagnostics
    cov = np.zeros(n_rows, dtype=bool) if diag else None
    ewidth = np.zeros(n_rows) if diag else None
    cwidth = np.zeros(n_rows) if diag else None
    etas = np.zeros(n_rows) if diag else None
    mu_lo, mu_hi = math.inf, -math.inf

    fr_total = np.zeros(n_ag)
    rr_total = 0.0
    sync_events: list[SyncEvent] = []
    theta_star = inst.theta_star

    row = 0
    for t in range(1, T + 1):
        beta_t = beta_sched.beta(t, d)
        sqrt_beta = math.sqrt(beta_t)
        round_start = row

        # Decision phase, batched across agents: estimates and optimistic
        # parameters come from one shared sweep loop.  Per-row updates in
        # the optimizer depend only on that row's history, so results match
        # running each agent alone.
        ctxs = [draw_contexts(inst, t, i) for i in agent_ids]
        Vs = [ag.V for ag in agents]
        chols = np.stack([numkit.chol_spd(V) for V in Vs])
        theta_hats = np.stack([
            numkit.solve_spd(Vs[j], agents[j].b, chol=chols[j]) for j in range(n_ag)
        ])
        thetas_opt, iters = maximize_rows(
            theta_hats, chols, np.full(n_ag, sqrt_beta),
            np.stack([c.x for c in ctxs]), merit, cfg.pgd,
            [stream(inst.seed, PGD_STREAM, t=t, agent=i) for i in agent_ids],
            [ag.last_theta_opt for ag in agents],
        )

        for idx, ag in enumerate(agents):
            i = ag.agent_id
            ctx = ctxs[idx]
            theta_hat, theta_opt = theta_hats[idx], thetas_opt[idx]
            ag.theta_hat = theta_hat
            ag.last_theta_opt = theta_opt
            policy = construct_policy(theta_opt, ctx, merit)
            cdf = np.cumsum(policy)
            u = borrow_stream(inst.seed, ACTION_STREAM, t=t, agent=i).random()
            action = int(min(np.searchsorted(cdf, u, side="right"), inst.k - 1))
            x_chosen = ctx.x[action]
            eta = reward_noise(inst, t, i)
            y = float(theta_star @ x_chosen) + eta
            pi_star = optimal_policy(inst, ctx, merit)
            fr = fairness_regret_instant(policy, pi_star)
            rr = reward_regret_instant(policy, pi_star, ctx, theta_star)
            update(ag, x_chosen, y)

            col_t[row] = t
            col_agent[row] = i
            col_action[row] = action
            col_reward[row] = y
            col_fr[row] = fr
            col_rr[row] = rr
            col_beta[row] = beta_t
            col_iters[row] = iters[idx]
            fr_total[idx] += fr
            rr_total += rr

            if diag:
                etas[row] = eta
                diff = theta_star - theta_hat
                covered = numkit.hnorm(diff, Vs[idx]) <= sqrt_beta * (1.0 + 1e-9)
                cov[row] = covered
                Y = numkit.cho_solve(chols[idx], ctx.x.T)
                w = np.sqrt(np.maximum(np.einsum("aj,ja->a", ctx.x, Y), 0.0))
                cwidth[row] = w[action]
                ew = float(policy @ w)
                ewidth[row] = ew
                scores = np.concatenate([
                    ctx.x @ theta_star, ctx.x @ theta_hat, ctx.x @ theta_opt,
                ])
                lo, hi = float(scores.min()), float(scores.max())
                mu_lo, mu_hi = min(mu_lo, lo), max(mu_hi, hi)
                if cfg.check_bounds and covered:
                    cf = merit.steepness
                    bound = 4.0 * cf * math.exp(cf * hi) * sqrt_beta / math.exp(cf * lo) * ew
                    if fr > bound * (1.0 + 1e-9) + 1e-12:
                        raise AssertionError(
                            f"policy-gap bound violated at t={t} agent={i}: "
                            f"{fr:.6g} > {bound:.6g}"
                        )
            row += 1

        # Sync decision happens after every agent finished round t.
        if schedule.protocol == "det_trigger":
            do_sync = False
            for ag in agents:
                gain = numkit.logdet(ag.V) - logdet_last[ag.agent_id]
                if (t - t_last_sync) * gain > schedule.det_threshold:
                    do_sync = True
                    break
            if do_sync:
                schedule.record(t)
        else:
            do_sync = advance_schedule(schedule, t, T, n_ag, d)
        if do_sync:
            synchronize(agents, pool, privatizers=trees, params=privacy_params)
            t_last_sync = t
            if schedule.protocol == "det_trigger":
                logdet_last = {ag.agent_id: numkit.logdet(ag.V) for ag in agents}
            sync_events.append(SyncEvent(
                t=t, sync_index=schedule.sync_count,
                bytes_communicated=n_ag * sync_payload_bytes(d),
            ))
            col_synced[round_start:row] = 1

        frcm = float(fr_total.sum()) / n_ag
        col_frcm[round_start:row] = frcm
        curve_fr[t - 1] = frcm
        curve_rr[t - 1] = rr_total / n_ag

    if schedule.protocol == "proposed":
        _assert_schedule_invariants(schedule, T, n_ag, d)

    return RunResult(
        inst=inst, cfg=cfg, n_agents=n_ag,
        t=col_t, agent=col_agent, action=col_action, reward=col_reward,
        fr_instant=col_fr, rr_instant=col_rr, fr_cum_mean=col_frcm,
        synced=col_synced, beta_t=col_beta, pgd_iters=col_iters,
        curve_fr=curve_fr, curve_rr=curve_rr,
        sync_events=sync_events, schedule=schedule,
        privacy_params=privacy_params, merit=merit,
        coverage=cov, expected_width=ewidth, chosen_width=cwidth, eta=etas,
        mu_lo=mu_lo, mu_hi=mu_hi, per_agent_fr=fr_total,
    )


def _assert_schedule_invariants(schedule: SyncSchedule, T: int, m: int, d: int) -> None:
    rounds = schedule.sync_rounds
    if not rounds:
        return
    q = warmup_threshold(T, m, d)
    gaps = np.diff(np.asarray(rounds))
    if gaps.size and int(gaps.max()) > q:
        raise AssertionError(f"sync gap {int(gaps.max())} exceeds warmup threshold {q}")
    if schedule.sync_count > sync_bound(T, m, d) + 1:
        raise AssertionError(
            f"sync count {schedule.sync_count} exceeds bound {sync_bound(T, m, d)} + 1"
        )
