"""CPU-side KV cache pool with a capacity limit and pluggable victim selection.

One pool exists per layer, head, and sequence. Rows are append-only until the
limit is reached; after that each append overwrites a victim chosen by the
configured policy. Key and value rows for the same token always share a row
index. Fetches update per-row metadata: a last-fetch sequence number for LRU
and an 8-bit saturating counter for the counter policy ("hit 255, halve all").

Single-owner discipline per pool (one writer, one reader per decode step);
the counter policy needs no read-side locking beyond that.
"""

from enum import Enum

import numpy as np

from .linalg import FLOAT

COUNTER_MAX = 255


class EvictionPolicy(str, Enum):
    FIFO = "fifo"
    LRU = "lru"
    COUNTER = "counter"


class KvPool:
    def __init__(self, head_dim: int, limit: int | None = None,
                 policy: EvictionPolicy = EvictionPolicy.COUNTER,
                 on_overwrite=None):
        if limit is not None and limit < 1:
            raise ValueError("limit must be >= 1 when set")
        self.head_dim = head_dim
        self.limit = limit
        self.policy = EvictionPolicy(policy)
        self.keys = np.zeros((0, head_dim), dtype=FLOAT)
        self.values = np.zeros((0, head_dim), dtype=FLOAT)
        self.arrival_seq = np.zeros(0, dtype=np.int64)
        self.last_fetch_seq = np.zeros(0, dtype=np.int64)
        self.fetch_counter = np.zeros(0, dtype=np.uint8)
        self._seq = 0
        # Called with (victim_index, old_arrival_seq) just before an overwrite.
        self.on_overwrite = on_overwrite

    def __len__(self) -> int:
        return self.keys.shape[0]

    def _next_seq(self) -> int:
        self._seq += 1
        return self._seq

    def append(self, k_row: np.ndarray, v_row: np.ndarray) -> int:
        """Add one token's K/V. Returns the row position it landed at.

        Below the limit the row is appended at the end; at the limit the
        policy's victim is overwritten and its metadata reset.
        """
        k_row = np.asarray(k_row, dtype=FLOAT).reshape(-1)
        v_row = np.asarray(v_row, dtype=FLOAT).reshape(-1)
        if k_row.shape != (self.head_dim,) or v_row.shape != (self.head_dim,):
            raise ValueError(
                f"row dim mismatch: k={k_row.shape} v={v_row.shape}, "
                f"expected ({self.head_dim},)")
        seq = self._next_seq()
        if self.limit is None or len(self) < self.limit:
            self.keys = np.concatenate([self.keys, k_row[None, :]])
            self.values = np.concatenate([self.values, v_row[None, :]])
            self.arrival_seq = np.append(self.arrival_seq, seq)
            self.last_fetch_seq = np.append(self.last_fetch_seq, seq)
            self.fetch_counter = np.append(self.fetch_counter, np.uint8(0))
            return len(self) - 1
        victim = self.evict_select()
        if self.on_overwrite is not None:
            self.on_overwrite(victim, int(self.arrival_seq[victim]))
        self.keys[victim] = k_row
        self.values[victim] = v_row
        self.arrival_seq[victim] = seq
        self.last_fetch_seq[victim] = seq
        self.fetch_counter[victim] = 0
        return victim

    def fetch(self, indices) -> tuple[np.ndarray, np.ndarray]:
        """Gather rows in the given order, updating fetch metadata.

        Each fetched row's counter saturating-increments and its last-fetch
        sequence advances. If any counter reaches saturation, every counter in
        the pool is halved (integer division).
        """
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= len(self)):
            raise IndexError(f"fetch index out of range for pool of {len(self)} rows")
        seq = self._next_seq()
        self.last_fetch_seq[idx] = seq
        counters = self.fetch_counter[idx].astype(np.int64) + 1
        self.fetch_counter[idx] = np.minimum(counters, COUNTER_MAX).astype(np.uint8)
        if np.any(self.fetch_counter[idx] == COUNTER_MAX):
            self.fetch_counter //= 2
        return self.keys[idx].copy(), self.values[idx].copy()

    def evict_select(self) -> int:
        """Victim row per policy; all ties resolve to the lowest row index."""
        if len(self) == 0:
            raise ValueError("cannot select a victim from an empty pool")
        if self.policy is EvictionPolicy.FIFO:
            return int(np.argmin(self.arrival_seq))
        if self.policy is EvictionPolicy.LRU:
            return int(np.argmin(self.last_fetch_seq))
        return int(np.argmin(self.fetch_counter))

    def all_indices(self) -> np.ndarray:
        return np.arange(len(self), dtype=np.int64)
