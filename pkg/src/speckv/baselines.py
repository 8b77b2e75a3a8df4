"""Comparison schemes: fixed-budget heavy-hitter eviction, group-wise
asymmetric 4-bit quantization, and oracle top-n selection.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .linalg import FLOAT, topk_indices

QUANT_GROUP = 64
QUANT_LEVELS = 15  # 4-bit codes in [0, 15]


# ---------------------------------------------------------------------------
# Heavy-hitter eviction (fixed budget, accumulated attention weight).
# ---------------------------------------------------------------------------

@dataclass
class H2oState:
    """Per layer/head retained-token state for heavy-hitter eviction.

    ``retained`` holds global token ids in arrival order; ``accumulated``
    holds the running sum of attention weight each retained token has
    received. Evicted tokens never return.
    """
    budget: int
    recent_window: int
    retained: list[int] = field(default_factory=list)
    accumulated: list[float] = field(default_factory=list)
    evicted: set[int] = field(default_factory=set)

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        if not 0 <= self.recent_window < self.budget:
            raise ValueError("recent_window must be in [0, budget)")


def h2o_budget(fraction: float, prompt_len: int) -> int:
    """Retained-token budget as a fixed fraction of the prompt length."""
    if not 0 < fraction <= 1:
        raise ValueError("budget fraction must be in (0, 1]")
    return max(1, int(math.floor(fraction * prompt_len)))


def h2o_step(state: H2oState, new_token: int, weight_row: np.ndarray) -> int | None:
    """Admit one new token, accumulate this iteration's weights, maybe evict.

    ``weight_row`` must align with the retained tokens followed by the new
    token. If the retained count then exceeds the budget, the non-recent token
    with the smallest accumulated weight is permanently evicted. Returns the
    evicted token id, or None.
    """
    row = np.asarray(weight_row, dtype=np.float64).reshape(-1)
    if row.size != len(state.retained) + 1:
        raise ValueError(
            f"weight row length {row.size} != retained {len(state.retained)} + 1")
    for i in range(len(state.retained)):
        state.accumulated[i] += float(row[i])
    state.retained.append(new_token)
    state.accumulated.append(float(row[-1]))
    if len(state.retained) <= state.budget:
        return None
    return _evict_lowest(state)


def _evict_lowest(state: H2oState) -> int:
    # The trailing recent_window arrivals are protected.
    cutoff = len(state.retained) - state.recent_window
    candidates = range(cutoff)
    victim_pos = min(candidates, key=lambda i: (state.accumulated[i], i))
    token = state.retained.pop(victim_pos)
    state.accumulated.pop(victim_pos)
    state.evicted.add(token)
    return token


def h2o_prefill(state: H2oState, tokens: list[int], accumulated: np.ndarray) -> list[int]:
    """Seed the state from prompt attention and trim down to the budget."""
    acc = np.asarray(accumulated, dtype=np.float64).reshape(-1)
    if acc.size != len(tokens):
        raise ValueError("accumulated weights must align with tokens")
    state.retained = list(tokens)
    state.accumulated = [float(a) for a in acc]
    evicted = []
    while len(state.retained) > state.budget:
        evicted.append(_evict_lowest(state))
    return evicted


# ---------------------------------------------------------------------------
# Group-wise asymmetric 4-bit quantization.
# ---------------------------------------------------------------------------

@dataclass
class QuantGroup:
    codes: np.ndarray  # uint8 values in [0, 15]
    scale: float
    zero: float  # group minimum


def quantize_group(x: np.ndarray) -> QuantGroup:
    """Asymmetric 4-bit quantization of one group: codes in [0, 15]."""
    x = np.asarray(x, dtype=FLOAT).reshape(-1)
    if x.size == 0:
        raise ValueError("cannot quantize an empty group")
    lo = float(np.min(x))
    hi = float(np.max(x))
    scale = (hi - lo) / QUANT_LEVELS
    if scale == 0.0:
        codes = np.zeros(x.size, dtype=np.uint8)
    else:
        codes = np.clip(np.rint((x - lo) / scale), 0, QUANT_LEVELS).astype(np.uint8)
    return QuantGroup(codes=codes, scale=scale, zero=lo)


def dequantize_group(g: QuantGroup) -> np.ndarray:
    if g.scale == 0.0:
        return np.full(g.codes.size, FLOAT(g.zero), dtype=FLOAT)
    return (g.codes.astype(FLOAT) * FLOAT(g.scale) + FLOAT(g.zero)).astype(FLOAT)


def quantize_vector(x: np.ndarray, group_size: int = QUANT_GROUP) -> list[QuantGroup]:
    x = np.asarray(x, dtype=FLOAT).reshape(-1)
    return [quantize_group(x[i : i + group_size]) for i in range(0, x.size, group_size)]


def dequantize_vector(groups: list[QuantGroup]) -> np.ndarray:
    return np.concatenate([dequantize_group(g) for g in groups])


def quant_roundtrip(x: np.ndarray, group_size: int = QUANT_GROUP) -> np.ndarray:
    """Quantize-then-dequantize, the numeric effect the scheme sees."""
    return dequantize_vector(quantize_vector(x, group_size))


def quantized_bytes(elements: int, group_size: int = QUANT_GROUP) -> int:
    """ceil(n/2) payload bytes plus 8 bytes (scale + zero) per group."""
    if elements < 0:
        raise ValueError("element count must be nonnegative")
    groups = math.ceil(elements / group_size)
    return math.ceil(elements / 2) + 8 * groups


# ---------------------------------------------------------------------------
# Oracle selection: true top-n per head with the full pool retained.
# ---------------------------------------------------------------------------

def oracle_select(true_scores: list[np.ndarray], n: int) -> list[np.ndarray]:
    """Top-n indices by true attention score, per head (ties: lower index)."""
    picks = []
    for vec in true_scores:
        vec = np.asarray(vec).reshape(-1)
        if n > vec.size:
            raise ValueError(f"n={n} exceeds score count {vec.size}")
        picks.append(topk_indices(vec, n))
    return picks
