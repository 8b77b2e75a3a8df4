"""Partial-weight generation (prefill) and attention-score speculation (decode).

During prefill, each layer past the first picks the head columns where the
skewed query and key matrices carry the most mass, and materializes a partial
query weight (D x k) plus a partial key cache (s x k) from those columns.
During decode, the previous layer's attention input is pushed through the
partial artifacts to guess the next layer's scores, and tokens within
``alpha`` of the per-head maximum are selected for prefetch.
"""

import math
from dataclasses import dataclass

import numpy as np

from .linalg import FLOAT, topk_indices


@dataclass(frozen=True)
class SpeculationConfig:
    partial_ratio: float = 0.3
    alpha: float = 4.0
    cap_ratio: float = 0.2
    min_select: int = 1

    def validate(self) -> None:
        if not 0 < self.partial_ratio <= 1:
            raise ValueError("partial_ratio must be in (0, 1]")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if not 0 < self.cap_ratio <= 1:
            raise ValueError("cap_ratio must be in (0, 1]")
        if self.min_select < 1:
            raise ValueError("min_select must be >= 1")


class ArtifactConsistencyError(RuntimeError):
    """Partial key cache fell out of lock-step with its KV pool."""


def build_partial(qt: np.ndarray, kt: np.ndarray, ratio: float) -> np.ndarray:
    """Pick the k = ceil(ratio * d) columns with the largest |q| + |k| mass.

    Element-wise absolute values of the skewed query and key matrices are
    summed, column totals taken, and the top-k column indices returned in
    ascending order. The abs-sum makes the choice immune to sign cancellation
    between the two matrices.
    """
    qt = np.asarray(qt, dtype=FLOAT)
    kt = np.asarray(kt, dtype=FLOAT)
    if qt.shape != kt.shape or qt.ndim != 2:
        raise ValueError(f"query/key shape mismatch: {qt.shape} vs {kt.shape}")
    if not 0 < ratio <= 1:
        raise ValueError("ratio must be in (0, 1]")
    d = qt.shape[1]
    k = int(math.ceil(ratio * d))
    colsums = np.sum(np.abs(qt) + np.abs(kt), axis=0)
    return np.sort(topk_indices(colsums, k))


@dataclass
class HeadArtifacts:
    column_indices: np.ndarray  # strictly increasing, length k
    partial_w_q: np.ndarray  # D x k
    partial_k: np.ndarray  # s x k, row-aligned with the pool


class PartialArtifacts:
    """Per-layer (>= 1), per-head partial artifacts for one sequence."""

    def __init__(self, layers: int, heads: int):
        self.layers = layers
        self.heads = heads
        self._slots: list[list[HeadArtifacts | None]] = [
            [None] * heads for _ in range(layers)
        ]

    def set_head(self, layer: int, head: int, artifacts: HeadArtifacts) -> None:
        if layer < 1:
            raise ValueError("layer 0 never speculates and has no artifacts")
        self._slots[layer][head] = artifacts

    def head(self, layer: int, head: int) -> HeadArtifacts:
        art = self._slots[layer][head]
        if art is None:
            raise ValueError(f"no artifacts built for layer {layer} head {head}")
        return art

    def has_layer(self, layer: int) -> bool:
        return 1 <= layer < self.layers and self._slots[layer][0] is not None

    def append_partial_key(self, layer: int, head: int, skewed_key_row: np.ndarray,
                           position: int, pool_rows: int) -> None:
        """Mirror a pool append/overwrite into the partial key cache.

        ``position`` is the index the pool reported; ``pool_rows`` is the pool
        length after the append. Appends must land at the current end, and
        overwrites must target an existing row, or the caches have diverged.
        """
        art = self.head(layer, head)
        row = np.asarray(skewed_key_row, dtype=FLOAT).reshape(-1)[art.column_indices]
        current = art.partial_k.shape[0]
        if position == current:
            art.partial_k = np.concatenate([art.partial_k, row[None, :]], axis=0)
        elif 0 <= position < current:
            art.partial_k[position] = row
        else:
            raise ArtifactConsistencyError(
                f"layer {layer} head {head}: pool append at {position} but "
                f"partial key cache has {current} rows")
        if art.partial_k.shape[0] != pool_rows:
            raise ArtifactConsistencyError(
                f"layer {layer} head {head}: partial key cache has "
                f"{art.partial_k.shape[0]} rows, pool has {pool_rows}")


def speculate_scores(x_a_prev: np.ndarray, artifacts: PartialArtifacts,
                     layer: int, head_dim: int) -> list[np.ndarray]:
    """Rehearse layer ``layer``'s attention with the previous layer's input.

    Per head: (x_a_prev . partial_w_q) . partial_k^T / sqrt(d). Returns one
    score vector per head, each of length equal to the pool row count.
    """
    if layer < 1:
        raise ValueError("speculation starts at layer 1")
    x = np.asarray(x_a_prev, dtype=FLOAT).reshape(-1)
    scale = FLOAT(1.0 / np.sqrt(head_dim))
    scores = []
    for h in range(artifacts.heads):
        art = artifacts.head(layer, h)
        if art.partial_k.shape[0] == 0:
            raise ValueError(f"layer {layer} head {h}: empty partial key cache")
        q_part = x @ art.partial_w_q
        scores.append((q_part @ art.partial_k.T) * scale)
    return scores


def select_tokens(scores: list[np.ndarray], cfg: SpeculationConfig
                  ) -> tuple[list[np.ndarray], int]:
    """Alpha-threshold selection with a shared per-layer count.

    Per head, count the tokens whose score exceeds (head max - alpha). The
    counts are averaged across heads (round half up) and clamped to
    [min_select, floor(cap_ratio * s)] with the cap never below min_select.
    Every head then returns its own top-n indices. Returns (per-head index
    arrays, n).
    """
    cfg.validate()
    if not scores or any(s.size == 0 for s in scores):
        raise ValueError("select_tokens needs nonempty score vectors")
    s = scores[0].size
    if any(vec.size != s for vec in scores):
        raise ValueError("all heads must score the same token count")
    counts = []
    for vec in scores:
        threshold = float(np.max(vec)) - cfg.alpha
        counts.append(int(np.sum(vec > threshold)))
    n = int(math.floor(sum(counts) / len(counts) + 0.5))
    cap = max(int(math.floor(cfg.cap_ratio * s)), cfg.min_select)
    n = min(max(n, cfg.min_select), cap)
    n = min(n, s)
    picks = [topk_indices(vec, n) for vec in scores]
    return picks, n


def selection_bytes(n: int, heads: int, head_dim: int, bytes_per_element: int) -> int:
    """Bytes to fetch n tokens' keys and values across all heads."""
    return heads * n * 2 * head_dim * bytes_per_element


def spectrum_energy_share(values: np.ndarray, k: int) -> float:
    """Fraction of total squared mass carried by the k largest values."""
    v = np.sort(np.asarray(values, dtype=np.float64))[::-1]
    total = float(np.sum(v * v))
    if total == 0:
        return 0.0
    return float(np.sum(v[:k] * v[:k]) / total)
