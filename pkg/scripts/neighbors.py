"""
Presumed neighbor trajectories.

At every trigger an agent reconstructs each neighbor's future states from
the neighbor's most recent broadcast. Three cases, by where the broadcast
plan ends (k_j + N_j) relative to now and now + N:

    expired   k_j + N_j <= now           local feedback from the plan's end
    partial   now < k_j + N_j <= now + N transmitted inputs, then feedback
    covering  k_j + N_j > now + N        transmitted inputs throughout

States are always generated through the neighbor's nominal dynamics, never
interpolated.
"""

import logging
from dataclasses import dataclass

import numpy as np

from model import AgentModel

logger = logging.getLogger(__name__)

CASE_EXPIRED = "expired"
CASE_PARTIAL = "partial"
CASE_COVERING = "covering"
CASE_CONSTANT = "constant"


class PackageStalenessError(Exception):
    """Raised when a package is from the future or missing."""

    pass


@dataclass(frozen=True, eq=False)
class BroadcastPackage:
    """Plan sent by an agent to its out-neighbors at a trigger instant."""

    sender: int
    trigger_instant: int
    horizon: int
    u_opt: np.ndarray
    x_opt: np.ndarray
    terminal_gain: np.ndarray

    def __post_init__(self):
        if self.u_opt.shape[0] != self.horizon:
            raise ValueError(f"package from {self.sender}: {self.u_opt.shape[0]} inputs for horizon {self.horizon}")
        if self.x_opt.shape[0] != self.horizon + 1:
            raise ValueError(f"package from {self.sender}: {self.x_opt.shape[0]} states for horizon {self.horizon}")

    @property
    def plan_end(self) -> int:
        """Absolute time of the last transmitted state."""
        return self.trigger_instant + self.horizon

    @classmethod
    def initial(cls, sender: int, x0: np.ndarray, terminal_gain: np.ndarray) -> "BroadcastPackage":
        """Package announcing only the initial state (published at k = 0)."""
        x0 = np.asarray(x0, dtype=float)
        return cls(
            sender=sender,
            trigger_instant=0,
            horizon=0,
            u_opt=np.zeros((0, terminal_gain.shape[0])),
            x_opt=x0[None, :].copy(),
            terminal_gain=terminal_gain,
        )


@dataclass(frozen=True, eq=False)
class PresumedTrajectory:
    """
    Reconstructed neighbor states for l in [0, N].

    switch_offset is the first step driven by local feedback (0 when
    expired, None when the transmitted inputs cover the whole horizon).
    """

    sender: int
    states: np.ndarray
    inputs: np.ndarray
    case_tag: str
    switch_offset: int | None


def initial_presumed(sender: int, x0: np.ndarray, horizon: int) -> PresumedTrajectory:
    """Constant trajectory at the neighbor's initial state, used on the first solve."""
    x0 = np.asarray(x0, dtype=float)
    return PresumedTrajectory(
        sender=sender,
        states=np.tile(x0, (horizon + 1, 1)),
        inputs=np.zeros((horizon, 0)),
        case_tag=CASE_CONSTANT,
        switch_offset=None,
    )


def assemble(
    package: BroadcastPackage,
    now: int,
    horizon_needed: int,
    model_j: AgentModel,
    literal_case23: bool = False,
) -> PresumedTrajectory:
    """
    Presumed trajectory of the package's sender over [now, now + horizon_needed].

    In the expired case the plan's last state is rolled under u = K_j x from
    its own absolute time, so assemblies at successive instants agree. In
    the partial and covering cases the trajectory is anchored at the plan
    state for `now` and replays the transmitted inputs at matching absolute
    times; with literal_case23 the input planned for `now` is held constant
    instead.

    Raises:
        PackageStalenessError: If the package was sent after `now`.
    """
    if package.trigger_instant > now:
        raise PackageStalenessError(
            f"package from agent {package.sender} sent at {package.trigger_instant}, read at {now}"
        )
    N = horizon_needed
    K = package.terminal_gain
    states = np.empty((N + 1, model_j.dim_x))
    inputs = np.empty((N, model_j.dim_u))

    if package.plan_end <= now:
        case_tag, switch_offset = CASE_EXPIRED, 0
        x = package.x_opt[-1]
        for _ in range(now - package.plan_end):
            x = model_j.step(x, K @ x)
        states[0] = x
    else:
        offset = now - package.trigger_instant
        states[0] = package.x_opt[offset]
        if package.plan_end <= now + N:
            case_tag, switch_offset = CASE_PARTIAL, package.plan_end - now
        else:
            case_tag, switch_offset = CASE_COVERING, None

    for l in range(N):
        if switch_offset is not None and l >= switch_offset:
            inputs[l] = K @ states[l]
        elif literal_case23:
            inputs[l] = package.u_opt[now - package.trigger_instant]
        else:
            inputs[l] = package.u_opt[now - package.trigger_instant + l]
        states[l + 1] = model_j.step(states[l], inputs[l])

    logger.debug("agent %s presumed at %d: case %s over %d steps", package.sender, now, case_tag, N)
    return PresumedTrajectory(
        sender=package.sender,
        states=states,
        inputs=inputs,
        case_tag=case_tag,
        switch_offset=switch_offset,
    )


class PackageStore:
    """
    Newest package per sender.

    Packages published during a step become visible only after commit(), so
    every agent solving at step k reads what was known at the end of k - 1.
    """

    def __init__(self):
        self._committed: dict[int, BroadcastPackage] = {}
        self._pending: dict[int, BroadcastPackage] = {}

    def publish(self, package: BroadcastPackage) -> None:
        self._pending[package.sender] = package

    def commit(self) -> None:
        for sender in sorted(self._pending):
            package = self._pending[sender]
            current = self._committed.get(sender)
            if current is None or package.trigger_instant >= current.trigger_instant:
                self._committed[sender] = package
        self._pending.clear()

    def latest(self, sender: int) -> BroadcastPackage:
        try:
            return self._committed[sender]
        except KeyError:
            raise PackageStalenessError(f"no package from agent {sender}") from None

    def __contains__(self, sender: int) -> bool:
        return sender in self._committed
