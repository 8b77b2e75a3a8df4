"""Analytical CPU-GPU transfer and compute timing for four execution styles.

Nothing here measures real hardware. Per-block load and compute times come
from byte and flop counts divided by configured bandwidths, and overlap is
max-algebra: under the prefetch styles, block i's load hides under block
i-1's compute and only the excess is exposed. Block 0's load is always
exposed.
"""

import json
from dataclasses import dataclass
from enum import Enum


class ExecutionStyle(str, Enum):
    FULL_GPU = "full_gpu"
    CPU_SERIAL = "cpu_serial"
    PREFETCH_ALL = "prefetch_all"
    SELECTIVE_PREFETCH = "selective_prefetch"


@dataclass(frozen=True)
class CostParams:
    pcie_bandwidth: float = 16e9  # bytes/s
    gpu_compute: float = 30e12  # flop/s
    gpu_mem_bandwidth: float = 700e9  # bytes/s
    kv_bytes_per_element: int = 2  # half-precision accounting

    def validate(self) -> None:
        if min(self.pcie_bandwidth, self.gpu_compute, self.gpu_mem_bandwidth) <= 0:
            raise ValueError("bandwidths and compute rate must be positive")
        if self.kv_bytes_per_element <= 0:
            raise ValueError("kv_bytes_per_element must be positive")

    @classmethod
    def from_file(cls, path: str) -> "CostParams":
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
        allowed = {"pcie_bandwidth", "gpu_compute", "gpu_mem_bandwidth",
                   "kv_bytes_per_element"}
        unknown = set(raw) - allowed
        if unknown:
            raise ValueError(f"unknown cost config keys: {sorted(unknown)}")
        params = cls(**raw)
        params.validate()
        return params


@dataclass(frozen=True)
class BlockCost:
    """One transformer block's workload within one iteration."""
    full_bytes: int
    selected_bytes: int
    attention_flops: float
    ffn_flops: float
    speculation_flops: float = 0.0  # charged to this block's compute window

    @property
    def compute_flops(self) -> float:
        return self.attention_flops + self.ffn_flops + self.speculation_flops


@dataclass
class BlockLatency:
    load_s: float
    attention_s: float
    ffn_s: float
    exposed_transfer_s: float


@dataclass
class LatencyBreakdown:
    style: ExecutionStyle
    blocks: list[list[BlockLatency]]  # [iteration][layer]
    iteration_totals: list[float]

    @property
    def total_s(self) -> float:
        return sum(self.iteration_totals)


def kv_bytes(layers: int, heads: int, head_dim: int, seq: int, batch: int,
             bytes_per_element: int) -> int:
    """Total KV cache bytes: 2 (K and V) x L x H x d x seq x batch x width."""
    if min(layers, heads, head_dim, seq, batch, bytes_per_element) < 0:
        raise ValueError("all size factors must be nonnegative")
    return 2 * layers * heads * head_dim * seq * batch * bytes_per_element


def transfer_time(nbytes: float, params: CostParams) -> float:
    if nbytes < 0:
        raise ValueError("bytes must be nonnegative")
    return nbytes / params.pcie_bandwidth


def compute_time(flops: float, params: CostParams) -> float:
    if flops < 0:
        raise ValueError("flops must be nonnegative")
    return flops / params.gpu_compute


def simulate_run(iterations: list[list[BlockCost]], style: ExecutionStyle,
                 params: CostParams) -> LatencyBreakdown:
    """Simulate every iteration's block stack under one execution style.

    FULL_GPU reads the cache at GPU memory bandwidth with no PCIe traffic;
    CPU_SERIAL loads each block's full bytes over PCIe strictly before its
    compute; PREFETCH_ALL overlaps block i's full-byte load with block i-1's
    compute; SELECTIVE_PREFETCH does the same with the selected bytes only.
    Flops are taken from the trace identically for every style.
    """
    style = ExecutionStyle(style)
    params.validate()
    all_blocks: list[list[BlockLatency]] = []
    totals: list[float] = []
    for blocks in iterations:
        lat: list[BlockLatency] = []
        total = 0.0
        prev_compute = 0.0
        for i, b in enumerate(blocks):
            if style is ExecutionStyle.FULL_GPU:
                load = b.full_bytes / params.gpu_mem_bandwidth
            elif style is ExecutionStyle.SELECTIVE_PREFETCH:
                load = transfer_time(b.selected_bytes, params)
            else:
                load = transfer_time(b.full_bytes, params)
            attn = compute_time(b.attention_flops, params)
            ffn = compute_time(b.ffn_flops + b.speculation_flops, params)
            compute = attn + ffn
            if style in (ExecutionStyle.PREFETCH_ALL, ExecutionStyle.SELECTIVE_PREFETCH):
                exposed = load if i == 0 else max(0.0, load - prev_compute)
            else:
                exposed = load
            lat.append(BlockLatency(load, attn, ffn, exposed))
            total += exposed + compute
            prev_compute = compute
        all_blocks.append(lat)
        totals.append(total)
    return LatencyBreakdown(style=style, blocks=all_blocks, iteration_totals=totals)


def attention_flops(selected_per_head: list[int], head_dim: int) -> float:
    """2*n*d for scores plus 2*n*d for the weighted sum, summed over heads."""
    return float(sum(4 * n * head_dim for n in selected_per_head))


def ffn_flops(model_dim: int, ffn_dim: int) -> float:
    """Two projections at 2 flops per multiply-accumulate."""
    return float(2 * model_dim * ffn_dim * 2)


def speculation_flops(model_dim: int, partial_cols: int, pool_rows: int,
                      heads: int) -> float:
    """Partial query projection plus partial score matmul, per head."""
    return float(heads * (2 * model_dim * partial_cols + 2 * partial_cols * pool_rows))
