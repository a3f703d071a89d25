"""Scripted adversarial behaviour.

Every random draw comes from a fresh generator keyed by
``(run seed, script seed, t, stream, party)``, so attack streams do not depend
on the order in which agents are processed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .protocol import AssumedTrajectory

logger = logging.getLogger(__name__)

__all__ = [
    "AGENT_KINDS",
    "AttackScript",
    "inject_state",
    "is_active",
    "tamper_broadcast",
]

KINDS = ("link", "malicious-agent", "byzantine-agent", "state-injection")
AGENT_KINDS = ("malicious-agent", "byzantine-agent", "state-injection")

_STREAM_BROADCAST = 1
_STREAM_STATE = 2


@dataclass(frozen=True)
class AttackScript:
    """One scripted attack.

    ``target`` is an (i, j) edge for ``link`` scripts and an agent id
    otherwise. ``window`` is inclusive on both ends.
    """

    kind: str
    target: tuple | int
    window: tuple
    magnitude: tuple = (-2.0, 2.0)
    seed: int = 0
    per_receiver: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        start, end = (int(v) for v in self.window)
        if start < 1:
            raise ValueError("attacks cannot start before t = 1")
        if end < start:
            raise ValueError(f"empty attack window {self.window}")
        lo, hi = (float(v) for v in self.magnitude)
        if hi < lo:
            raise ValueError(f"bad magnitude interval {self.magnitude}")
        object.__setattr__(self, "window", (start, end))
        object.__setattr__(self, "magnitude", (lo, hi))
        if self.kind == "link":
            i, j = (int(v) for v in self.target)
            object.__setattr__(self, "target", (i, j))
        else:
            object.__setattr__(self, "target", int(np.ravel(self.target)[0]))
        if self.kind == "byzantine-agent":
            object.__setattr__(self, "per_receiver", True)
        elif self.per_receiver:
            raise ValueError("per_receiver only applies to byzantine-agent scripts")

    @property
    def is_agent_attack(self):
        return self.kind in AGENT_KINDS

    def hits_link(self, broadcaster, receiver):
        if self.kind == "link":
            return {broadcaster, receiver} == set(self.target)
        if self.kind in ("malicious-agent", "byzantine-agent"):
            return broadcaster == self.target
        return False


def is_active(script, t):
    return script.window[0] <= t <= script.window[1]


def _rng(run_seed, script, t, stream, party):
    return np.random.default_rng([int(run_seed), int(script.seed), int(t), stream, int(party) + 1])


def tamper_broadcast(script, original, broadcaster, receiver, t, run_seed=0):
    """Copy of ``original`` as the receiver sees it after the attack.

    Returns ``original`` itself when the script does not touch this link in
    round ``t``.
    """
    if not script.hits_link(broadcaster, receiver):
        return original
    if not is_active(script, t):
        logger.debug("attack %s inactive at t=%d", script.kind, t)
        return original
    lo, hi = script.magnitude
    if script.kind == "malicious-agent":
        party = broadcaster
    else:
        party = receiver
    noise = _rng(run_seed, script, t, _STREAM_BROADCAST, party).uniform(
        lo, hi, size=original.states.shape
    )
    return AssumedTrajectory(original.origin_time, original.states + noise)


def inject_state(script, state, t, run_seed=0):
    """State after an additive injection, identity outside the window."""
    state = np.asarray(state, dtype=float)
    if script.kind != "state-injection" or not is_active(script, t):
        return state
    lo, hi = script.magnitude
    return state + _rng(run_seed, script, t, _STREAM_STATE, script.target).uniform(
        lo, hi, size=state.shape
    )
