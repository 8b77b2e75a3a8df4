"""Shifting-attention stress workload.

Fixed-budget eviction assumes tokens unimportant today stay unimportant. This
generator builds a single-head query/key sequence that breaks the assumption
on purpose: one designated early key direction is only weakly aligned with
the queries for the first ``shift_iteration`` decode steps and strongly
aligned afterwards. Selection schemes that keep the whole pool can recover
the token when it matters; schemes that evicted it cannot.

The comparison below replays the same scored sequence under full attention,
true top-n selection over the full pool (with or without a capacity-limited
pool), speculative top-n selection from noisy scores, and heavy-hitter
eviction at the same budget.
"""

from dataclasses import dataclass

import numpy as np

from .baselines import H2oState, h2o_prefill, h2o_step, oracle_select
from .linalg import FLOAT, softmax_row, topk_indices
from .metrics import attention_cosine, embed_subset_weights
from .pool import EvictionPolicy, KvPool


@dataclass
class ShiftingWorkload:
    keys: np.ndarray  # (prompt + decode) x d, arrival order
    queries: np.ndarray  # decode x d
    prompt_len: int
    shift_iteration: int
    planted_index: int
    seed: int


def shifting_attention_workload(seed: int = 0, prompt_len: int = 64,
                                decode_len: int = 64, shift_iteration: int = 16,
                                dim: int = 32, weak_gain: float = 1.5,
                                strong_gain: float = 8.0) -> ShiftingWorkload:
    """Build the workload. The planted token sits early in the prompt.

    Queries drift slowly through key space; before the shift they carry a
    weak component along the planted key (enough to be selected now and
    then), after it a dominant one.
    """
    rng = np.random.default_rng(seed)
    planted_index = 2
    keys = rng.standard_normal((prompt_len + decode_len, dim)).astype(FLOAT)
    planted = rng.standard_normal(dim)
    planted /= np.linalg.norm(planted)
    keys[planted_index] = (planted * np.sqrt(dim)).astype(FLOAT)

    queries = np.zeros((decode_len, dim), dtype=FLOAT)
    drift = rng.standard_normal(dim)
    drift /= np.linalg.norm(drift)
    for t in range(decode_len):
        step = rng.standard_normal(dim) * 0.2
        drift = drift + step
        drift /= np.linalg.norm(drift)
        gain = weak_gain if t < shift_iteration else strong_gain
        q = drift * np.sqrt(dim) + gain * planted
        queries[t] = q.astype(FLOAT)
    return ShiftingWorkload(keys=keys, queries=queries, prompt_len=prompt_len,
                            shift_iteration=shift_iteration,
                            planted_index=planted_index, seed=seed)


def _true_scores(workload: ShiftingWorkload, t: int) -> np.ndarray:
    d = workload.keys.shape[1]
    s = workload.prompt_len + t  # keys visible before iteration t's own key
    return (workload.queries[t] @ workload.keys[:s].T) / FLOAT(np.sqrt(d))


def compare_selection_schemes(workload: ShiftingWorkload, budget: int,
                              spec_noise: float = 0.25,
                              spec_partial_ratio: float = 0.3) -> dict:
    """Per-iteration attention cosine vs full cache for each scheme.

    Returns {"full_top": [...], "speculative_top": [...], "h2o": [...]},
    one cosine per decode iteration. ``full_top`` is true top-n over the full
    pool; ``speculative_top`` ranks by scores recomputed from a perturbed
    query restricted to a high-mass column subset, mimicking one-layer-early
    speculation; ``h2o`` accumulates weights and evicts over budget.
    """
    rng = np.random.default_rng(workload.seed + 1)
    n_prompt = workload.prompt_len
    decode_len = workload.queries.shape[0]
    d = workload.keys.shape[1]

    k_cols = max(1, int(np.ceil(spec_partial_ratio * d)))
    col_mass = np.abs(workload.keys[:n_prompt]).sum(axis=0)
    partial_cols = np.sort(topk_indices(col_mass, k_cols))

    h2o_state = H2oState(budget=budget, recent_window=budget // 2)
    prompt_scores = (workload.keys[:n_prompt] @ workload.keys[:n_prompt].T
                     ) / FLOAT(np.sqrt(d))
    prompt_acc = np.zeros(n_prompt)
    for t in range(n_prompt):
        prompt_acc[: t + 1] += softmax_row(prompt_scores[t, : t + 1])
    h2o_prefill(h2o_state, list(range(n_prompt)), prompt_acc)

    out = {"full_top": [], "speculative_top": [], "h2o": []}
    for t in range(decode_len):
        scores = _true_scores(workload, t)
        s = scores.size
        full_row = softmax_row(scores).astype(np.float64)
        n = min(budget, s)

        top = oracle_select([scores], n)[0]
        out["full_top"].append(_subset_cosine(scores, top, full_row))

        noisy_q = workload.queries[t] + (rng.standard_normal(d) * spec_noise).astype(FLOAT)
        spec_scores = (noisy_q[partial_cols] @ workload.keys[:s, partial_cols].T
                       ) / FLOAT(np.sqrt(d))
        spec_top = topk_indices(spec_scores, n)
        out["speculative_top"].append(_subset_cosine(scores, spec_top, full_row))

        retained = np.asarray(h2o_state.retained, dtype=np.int64)
        h2o_row = softmax_row(scores[retained])
        out["h2o"].append(attention_cosine(
            embed_subset_weights(retained, h2o_row, s), full_row))
        h2o_step(h2o_state, s, np.append(h2o_row, 0.0))
    return out


def compare_pool_policies(workload: ShiftingWorkload, budget: int,
                          limit_fraction: float = 0.8,
                          policies=(EvictionPolicy.COUNTER, EvictionPolicy.FIFO),
                          ) -> dict:
    """Top-n selection cosine when the pool itself is capacity limited.

    The pool holds key rows (values unused here) under ``limit_fraction`` of
    the final token count; selection is true top-n over pool residents, and
    every selected row is fetched so counter metadata accrues. Returns per
    policy the list of per-iteration cosines against the full cache.
    """
    n_prompt = workload.prompt_len
    decode_len = workload.queries.shape[0]
    d = workload.keys.shape[1]
    limit = max(budget + 1, int(limit_fraction * (n_prompt + decode_len)))

    results = {}
    for policy in policies:
        pool = KvPool(d, limit=limit, policy=policy)
        # pool row -> global token id, maintained across overwrites
        row_tokens: list[int] = []
        for t in range(n_prompt):
            pos = pool.append(workload.keys[t], workload.keys[t])
            if pos == len(row_tokens):
                row_tokens.append(t)
            else:
                row_tokens[pos] = t
        cosines = []
        for t in range(decode_len):
            scores = _true_scores(workload, t)
            s = scores.size
            full_row = softmax_row(scores).astype(np.float64)
            resident = np.asarray(row_tokens, dtype=np.int64)
            pool_scores = (workload.queries[t] @ pool.keys.T) / FLOAT(np.sqrt(d))
            n = min(budget, len(pool))
            picks = topk_indices(pool_scores, n)
            pool.fetch(picks)
            sel_tokens = resident[picks]
            weights = softmax_row(scores[sel_tokens])
            cosines.append(attention_cosine(
                embed_subset_weights(sel_tokens, weights, s), full_row))
            pos = pool.append(workload.keys[n_prompt + t], workload.keys[n_prompt + t])
            if pos == len(row_tokens):
                row_tokens.append(n_prompt + t)
            else:
                row_tokens[pos] = n_prompt + t
        results[policy.value] = cosines
    return results


def _subset_cosine(scores: np.ndarray, picks: np.ndarray, full_row: np.ndarray
                   ) -> float:
    weights = softmax_row(scores[picks])
    return attention_cosine(
        embed_subset_weights(picks, weights, scores.size), full_row)
