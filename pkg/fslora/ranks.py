from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Protocol

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from fslora.errors import RangeError
from fslora.numerics import RngStream

RankPolicyKind = Literal["uniform", "list", "normal", "heavy-tail", "tiers"]

# Capability tiers for time-varying ratios: low, medium, high.
TIER_RATIOS: tuple[tuple[float, float], ...] = ((0.125, 0.25), (0.25, 0.5), (0.5, 1.0))


class RankSchedule(Protocol):
    def __call__(self, round: int) -> int: ...


@dataclass(frozen=True)
class ConstantRank:
    k: int

    def __call__(self, round: int) -> int:
        return self.k


@dataclass(frozen=True)
class DynamicRank:
    """k redrawn every round, uniformly over ratios in [low, high] of r."""

    r: int
    low: float
    high: float
    stream: RngStream

    def __call__(self, round: int) -> int:
        lo = max(1, math.ceil(self.low * self.r))
        hi = max(lo, math.floor(self.high * self.r))
        gen = self.stream.child("round", round).generator()
        return int(gen.integers(lo, hi + 1))


class RankPolicy(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: RankPolicyKind = "uniform"
    ratio: float = Field(1.0, gt=0, le=1, description="sketching ratio k_i / r for the uniform policy")
    ranks: list[int] | None = Field(None, description="explicit k_i per client for the list policy")
    low: int | None = Field(None, ge=1, description="lower rank bound a for normal / heavy-tail")
    high: int | None = Field(None, ge=1, description="upper rank bound b for normal / heavy-tail")


def _clamp(k: float, r: int) -> int:
    return int(min(r, max(1, round(k))))


def assign_ranks(policy: RankPolicy, n_clients: int, r: int, rng: RngStream) -> list[RankSchedule]:
    if policy.kind == "uniform":
        return [ConstantRank(_clamp(policy.ratio * r, r)) for _ in range(n_clients)]

    if policy.kind == "list":
        ranks = list(policy.ranks or [])
        if len(ranks) != n_clients:
            raise RangeError(f"rank list has {len(ranks)} entries for {n_clients} clients")
        bad = [k for k in ranks if k < 1 or k > r]
        if bad:
            raise RangeError(f"ranks {bad} outside [1, {r}]")
        return [ConstantRank(int(k)) for k in ranks]

    if policy.kind == "tiers":
        return [
            DynamicRank(r=r, low=TIER_RATIOS[i % 3][0], high=TIER_RATIOS[i % 3][1], stream=rng.child("tier", i))
            for i in range(n_clients)
        ]

    a = policy.low if policy.low is not None else max(1, r // 16)
    b = policy.high if policy.high is not None else r
    if a > b or b > r:
        raise RangeError(f"rank range [{a}, {b}] must satisfy 1 <= a <= b <= r={r}")
    gen = rng.child("ranks", policy.kind).generator()
    if policy.kind == "normal":
        draws = gen.normal((a + b) / 2.0, (b - a) / 6.0, size=n_clients)
        return [ConstantRank(_clamp(min(b, max(a, d)), r)) for d in draws]

    # heavy-tail: inverse log-normal, min-max scaled into [a, b]
    x = gen.lognormal(np.log((a + b) / 4.0), 1.0, size=n_clients)
    inv = 1.0 / x
    span = float(inv.max() - inv.min())
    scaled = np.full(n_clients, float(a)) if span == 0 else a + (inv - inv.min()) / span * (b - a)
    return [ConstantRank(_clamp(k, r)) for k in scaled]
