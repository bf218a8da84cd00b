"""Synthetic problem instances, context sampling and the reward oracle.

Randomness discipline
---------------------
Every random draw in a simulation comes from a counter-based Philox stream
keyed by ``(master_seed, purpose)`` with the 256-bit counter carrying
``(block, arm, agent, round)``.  Streams are therefore pure functions of
their coordinates: re-running any subset of agents or rounds, in any order
or on any number of workers, reproduces the same draws bit for bit, and
removing an agent never perturbs another agent's stream.

Purposes split the keyspace between the hidden parameter, contexts, reward
noise, action sampling, the optimizer's restart draws and the privatizer's
tree noise.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1

# Stream purposes (second word of the Philox key).
THETA_STREAM = 0x01
CONTEXT_STREAM = 0x02
REWARD_STREAM = 0x03
ACTION_STREAM = 0x04
PGD_STREAM = 0x05
TREE_STREAM = 0x06


def stream(seed: int, purpose: int, t: int = 0, agent: int = 0, arm: int = 0) -> np.random.Generator:
    """Deterministic generator for coordinates ``(seed, purpose, t, agent, arm)``.

    The round/agent/arm indices occupy the high counter words; the low word
    is left free for block advancement, so a stream may emit up to 2^64
    blocks without colliding with a neighbouring stream.
    """
    key = np.array([int(seed) & _MASK64, purpose], dtype=np.uint64)
    counter = np.array([0, arm, agent, t], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


class _StreamPool(threading.local):
    """Per-thread rotating pool of reusable Philox engines.

    Resetting the counter of a cached bit generator is several times cheaper
    than constructing a fresh one, which matters in the round loop.  Borrowed
    generators are recycled round-robin, so at most ``SLOTS`` of them may be
    alive at once; anything that may hold a generator longer uses
    :func:`stream`.
    """

    SLOTS = 4

    def __init__(self):
        self._slots = []
        for _ in range(self.SLOTS):
            ph = np.random.Philox(key=np.zeros(2, dtype=np.uint64))
            self._slots.append((ph, np.random.Generator(ph), ph.state))
        self._next = 0

    def borrow(self, seed: int, purpose: int, t: int, agent: int, arm: int) -> np.random.Generator:
        ph, gen, st = self._slots[self._next]
        self._next = (self._next + 1) % self.SLOTS
        st["state"]["counter"][:] = (0, arm, agent, t)
        st["state"]["key"][:] = (int(seed) & _MASK64, purpose)
        st["buffer_pos"] = 4
        st["has_uint32"] = 0
        ph.state = st
        return gen


_POOL = _StreamPool()


def borrow_stream(seed: int, purpose: int, t: int = 0, agent: int = 0, arm: int = 0) -> np.random.Generator:
    """Pooled twin of :func:`stream`: identical draws, shorter lifetime.

    Valid only while fewer than ``_StreamPool.SLOTS`` newer borrows exist on
    the same thread; callers must consume it promptly and never store it.
    """
    return _POOL.borrow(seed, purpose, t, agent, arm)


@dataclass(frozen=True)
class Instance:
    """Ground truth of one simulation.

    ``horizon`` is the number of rounds T, ``k`` the number of actions,
    ``m`` the number of agents and ``c`` the recorded bound on
    ``||theta_star||_2``.  ``norm_mode`` is either ``"raw"`` (contexts
    uniform on [0,1]^d, norms up to sqrt(d)) or ``"cap_unit"`` (the same
    draws rescaled into the unit ball, matching the theory's norm bound).
    """

    d: int
    k: int
    m: int
    horizon: int
    sigma: float
    c: float
    seed: int
    norm_mode: str
    theta_star: np.ndarray

    @property
    def norm_cap(self) -> float:
        """Upper bound L_x on ||x||_2 under the instance's norm mode."""
        return 1.0 if self.norm_mode == "cap_unit" else float(np.sqrt(self.d))

    def to_json(self) -> dict:
        return {
            "d": self.d,
            "k": self.k,
            "m": self.m,
            "t": self.horizon,
            "sigma": self.sigma,
            "c": self.c,
            "seed": self.seed,
            "norm_mode": self.norm_mode,
            "theta_star": [float(v) for v in self.theta_star],
        }

    @staticmethod
    def from_json(doc: dict) -> "Instance":
        theta = np.asarray(doc["theta_star"], dtype=float)
        theta.setflags(write=False)
        return Instance(
            d=int(doc["d"]),
            k=int(doc["k"]),
            m=int(doc["m"]),
            horizon=int(doc["t"]),
            sigma=float(doc["sigma"]),
            c=float(doc["c"]),
            seed=int(doc["seed"]),
            norm_mode=str(doc["norm_mode"]),
            theta_star=theta,
        )


@dataclass(frozen=True)
class ContextSet:
    """The per-action context vectors one agent observes in one round."""

    x: np.ndarray  # shape (k, d)
    t: int
    agent: int


def gen_instance(
    d: int,
    k: int,
    m: int,
    horizon: int,
    sigma: float,
    seed: int,
    norm_mode: str = "raw",
    c: float = 1.0,
) -> Instance:
    """Draw a fresh instance: theta_star ~ U[0,1]^d rescaled into ||.|| <= c.

    The uniform-then-rescale choice for theta_star is a simulation decision
    (recorded in provenance); everything downstream only relies on the norm
    bound ``c``.
    """
    if min(d, k, m, horizon) < 1:
        raise ValueError("d, k, m and horizon must all be positive")
    if k < 2:
        raise ValueError("need at least two actions")
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if norm_mode not in ("raw", "cap_unit"):
        raise ValueError(f"unknown norm_mode {norm_mode!r}")
    theta = stream(seed, THETA_STREAM).uniform(0.0, 1.0, size=d)
    nrm = float(np.linalg.norm(theta))
    if nrm > c:
        theta = theta * (c / nrm)
    theta.setflags(write=False)
    return Instance(
        d=d, k=k, m=m, horizon=horizon, sigma=float(sigma), c=float(c),
        seed=int(seed), norm_mode=norm_mode, theta_star=theta,
    )


def draw_contexts(inst: Instance, t: int, i: int) -> ContextSet:
    """Contexts for agent ``i`` at round ``t`` (both 1-indexed).

    Entries are uniform on [0,1]; in ``cap_unit`` mode each action's vector
    is divided by ``max(1, ||x|| (1 + 1e-12))`` so that ``||x|| <= 1``
    strictly.
    """
    if not (1 <= t <= inst.horizon):
        raise ValueError(f"round {t} outside 1..{inst.horizon}")
    if not (1 <= i <= inst.m):
        raise ValueError(f"agent {i} outside 1..{inst.m}")
    x = borrow_stream(inst.seed, CONTEXT_STREAM, t=t, agent=i).uniform(0.0, 1.0, size=(inst.k, inst.d))
    if inst.norm_mode == "cap_unit":
        norms = np.linalg.norm(x, axis=1)
        x /= np.maximum(1.0, norms * (1.0 + 1e-12))[:, None]
    x.setflags(write=False)
    return ContextSet(x=x, t=t, agent=i)


def reward(inst: Instance, x: np.ndarray, rng: np.random.Generator) -> float:
    """Observed reward ``theta_star . x + eta`` with ``eta ~ N(0, sigma^2)``.

    With ``sigma == 0`` the generator is not consumed and the dot product is
    returned exactly.
    """
    mu = float(inst.theta_star @ x)
    if inst.sigma == 0.0:
        return mu
    return mu + inst.sigma * float(rng.standard_normal())


def reward_noise(inst: Instance, t: int, i: int) -> float:
    """The round's reward-noise draw, shared across algorithm variants.

    Noise is keyed by ``(t, agent)`` only, not by the chosen action, so runs
    of different algorithms on the same instance observe identical noise and
    comparisons between them are paired.
    """
    if inst.sigma == 0.0:
        return 0.0
    return inst.sigma * float(borrow_stream(inst.seed, REWARD_STREAM, t=t, agent=i).standard_normal())
