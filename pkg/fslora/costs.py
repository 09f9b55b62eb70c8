from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from fslora.errors import RangeError

Method = Literal["fedlora", "heterolora", "flexlora", "flora", "fslora"]
METHODS: tuple[str, ...] = ("fedlora", "heterolora", "flexlora", "flora", "fslora")

WIRE_DTYPE = "<f4"
BYTES_PER_PARAM = 4


def encode_wire(*arrays: np.ndarray) -> bytes:
    """Serialize payload arrays as little-endian float32, back to back."""
    return b"".join(np.ascontiguousarray(a, dtype=WIRE_DTYPE).tobytes() for a in arrays)


def bitmap_bytes(bits: int) -> int:
    return (bits + 7) // 8


@dataclass(frozen=True)
class CostParams:
    m: int
    n: int
    r: int
    ks: tuple[int, ...]
    H: int = 1
    bytes_per_param: int = BYTES_PER_PARAM
    topk_ratio: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "ks", tuple(int(k) for k in self.ks))
        if self.m < 1 or self.n < 1 or self.r < 1:
            raise RangeError(f"cost shape must be positive, got m={self.m} n={self.n} r={self.r}")
        bad = [k for k in self.ks if k < 1 or k > self.r]
        if bad:
            raise RangeError(f"ranks {bad} outside [1, {self.r}]")
        if self.topk_ratio is not None and not (0 < self.topk_ratio <= 1):
            raise RangeError(f"top-k ratio must be in (0, 1], got {self.topk_ratio}")

    @property
    def N(self) -> int:
        return len(self.ks)

    @property
    def q(self) -> int:
        return self.bytes_per_param * self.r * (self.m + self.n)

    @property
    def P(self) -> int:
        return self.bytes_per_param * self.m * self.n

    def local_pair_bytes(self, k: int) -> int:
        # (k/r) * q, kept in integers
        return self.bytes_per_param * k * (self.m + self.n)


def _check_method(method: str) -> None:
    if method not in METHODS:
        raise RangeError(f"unknown method: {method}")


def topk_kept(payload: int, ratio: float) -> int:
    return min(payload, max(1, math.ceil(ratio * payload)))


def uplink_bytes(method: str, params: CostParams, i: int) -> int:
    _check_method(method)
    k = params.ks[i]
    if method == "fedlora":
        return params.q
    if method == "fslora" and params.topk_ratio is not None and params.topk_ratio < 1:
        payload = k * (params.m + params.n)
        return params.bytes_per_param * topk_kept(payload, params.topk_ratio) + bitmap_bytes(payload)
    return params.local_pair_bytes(k)


def downlink_bytes(method: str, params: CostParams, participants: Sequence[int] | None = None) -> int:
    """Per-round broadcast: the global pair (or stacked modules) plus any sketch indices."""
    _check_method(method)
    ids = range(params.N) if participants is None else participants
    if method == "flora":
        return sum(params.local_pair_bytes(params.ks[i]) for i in ids)
    if method == "fslora":
        return params.q + len(list(ids)) * bitmap_bytes(params.r)
    return params.q


@dataclass(frozen=True)
class ClientCost:
    memory_bytes: int
    flops: int


@dataclass(frozen=True)
class ServerCost:
    memory_bytes: int
    flops: int


def client_costs(method: str, params: CostParams, i: int) -> ClientCost:
    _check_method(method)
    m, n, H = params.m, params.n, params.H
    k = params.ks[i]
    if method == "fedlora":
        return ClientCost(memory_bytes=params.P + params.q, flops=H * params.r * (m + n))
    if method == "flora":
        stacked = sum(params.local_pair_bytes(kk) for kk in params.ks)
        merge = sum(params.ks) * m * n + m * n
        return ClientCost(memory_bytes=params.P + max(stacked, params.P), flops=H * k * (m + n) + merge)
    return ClientCost(memory_bytes=params.P + params.local_pair_bytes(k), flops=H * k * (m + n))


def server_costs(method: str, params: CostParams) -> ServerCost:
    _check_method(method)
    m, n, N, r = params.m, params.n, params.N, params.r
    received = sum(params.local_pair_bytes(k) for k in params.ks)
    if method == "fedlora":
        return ServerCost(memory_bytes=N * params.q, flops=N * (m + n) * r)
    if method == "flexlora":
        return ServerCost(
            memory_bytes=max(received, 2 * params.P),
            flops=sum(params.ks) * m * n + N * m * n + min(m, n) * m * n,
        )
    if method == "flora":
        return ServerCost(memory_bytes=received, flops=sum(params.ks) * (m + n))
    return ServerCost(memory_bytes=received, flops=N * (m + n) * r)


@dataclass
class CostLedger:
    """Measured wire bytes for one round, accumulated as payloads are encoded."""

    uplink: dict[int, int] = field(default_factory=dict)
    downlink: int = 0

    def add_uplink(self, client_id: int, nbytes: int) -> None:
        self.uplink[client_id] = self.uplink.get(client_id, 0) + int(nbytes)

    def add_downlink(self, nbytes: int) -> None:
        self.downlink += int(nbytes)

    @property
    def uplink_total(self) -> int:
        return sum(self.uplink.values())


@dataclass(frozen=True)
class ReconciliationRow:
    method: str
    client: int | None
    direction: str
    measured: int
    predicted: int

    @property
    def ok(self) -> bool:
        return self.measured == self.predicted


def reconcile(method: str, params: CostParams, ledger: CostLedger, participants: Sequence[int]) -> list[ReconciliationRow]:
    rows = [
        ReconciliationRow(method, i, "uplink", ledger.uplink.get(i, 0), uplink_bytes(method, params, i))
        for i in participants
    ]
    rows.append(ReconciliationRow(method, None, "downlink", ledger.downlink, downlink_bytes(method, params, participants)))
    return rows


def cost_table(params: CostParams) -> list[dict]:
    out: list[dict] = []
    for method in METHODS:
        for i in range(params.N):
            cc = client_costs(method, params, i)
            out.append(
                {
                    "method": method,
                    "client": i,
                    "k": params.ks[i],
                    "uplink_bytes": uplink_bytes(method, params, i),
                    "client_memory_bytes": cc.memory_bytes,
                    "client_flops": cc.flops,
                }
            )
        sc = server_costs(method, params)
        out.append(
            {
                "method": method,
                "client": None,
                "downlink_bytes": downlink_bytes(method, params),
                "server_memory_bytes": sc.memory_bytes,
                "server_flops": sc.flops,
            }
        )
    return out
