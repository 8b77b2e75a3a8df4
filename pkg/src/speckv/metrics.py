"""Evaluation metrics over traces, plus CSV/JSON report emission.

All metrics are pure functions. ``attention_cosine`` compares a subset
softmax row (zeros at unselected positions) against the full-cache row, the
same per-row similarity the selection-quality experiments use.
"""

import csv
import json

import numpy as np


def attention_cosine(approx_weights: np.ndarray, full_weights: np.ndarray) -> float:
    """Cosine between an embedded approximate softmax row and the full row."""
    a = np.asarray(approx_weights, dtype=np.float64).reshape(-1)
    b = np.asarray(full_weights, dtype=np.float64).reshape(-1)
    if a.size != b.size:
        raise ValueError(f"weight rows must align: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def embed_subset_weights(indices: np.ndarray, weights: np.ndarray, length: int
                         ) -> np.ndarray:
    """Scatter a subset softmax row into a zero row of the full length."""
    out = np.zeros(length, dtype=np.float64)
    out[np.asarray(indices, dtype=np.int64)] = np.asarray(weights, dtype=np.float64)
    return out


def tokens_to_cumulative_mass(weights: np.ndarray, tau: float) -> int:
    """Smallest count of top-weighted tokens whose mass reaches tau."""
    if not 0 < tau <= 1:
        raise ValueError("tau must be in (0, 1]")
    w = np.sort(np.asarray(weights, dtype=np.float64))[::-1]
    cum = np.cumsum(w)
    hits = np.nonzero(cum >= tau - 1e-12)[0]
    if hits.size == 0:
        return int(w.size)
    return int(hits[0]) + 1


def recall_at_oracle(selected, oracle) -> float:
    """|selected intersect oracle| / |oracle|."""
    oracle_set = set(int(i) for i in oracle)
    if not oracle_set:
        raise ValueError("oracle set must be nonempty")
    selected_set = set(int(i) for i in selected)
    return len(selected_set & oracle_set) / len(oracle_set)


def trace_recall(trace, top_n: int | None = None) -> list[dict]:
    """Per (sequence, iteration, layer >= 1) speculation recall from a trace.

    Needs a trace recorded with scores and selection enabled. The oracle set
    is the true-score top-n per head with n equal to the recorded selection
    size (or ``top_n`` when given); per-head recalls are averaged.
    """
    from .linalg import topk_indices

    rows = []
    for si, seq in enumerate(trace.sequences):
        for it in seq.iterations:
            for rec in it:
                if rec.layer == 0 or rec.selected is None or rec.true_scores is None:
                    continue
                n = top_n if top_n is not None else rec.n_selected
                if n < 1:
                    continue
                per_head = []
                for sel, true in zip(rec.selected, rec.true_scores):
                    n_eff = min(n, len(true))
                    oracle = topk_indices(np.asarray(true), n_eff)
                    per_head.append(recall_at_oracle(sel, oracle))
                rows.append({
                    "sequence": si, "iteration": rec.iteration, "layer": rec.layer,
                    "n": n, "recall": float(np.mean(per_head)),
                })
    return rows


REPORT_COLUMNS = [
    "scheme", "sequence", "iteration", "layer", "bytes", "full_bytes",
    "n_selected", "cosine", "recall", "load_s", "attention_s", "ffn_s",
    "exposed_transfer_s",
]


def report_rows(traces, cost_params=None, style=None) -> list[dict]:
    """Flatten traces into deterministic report rows.

    When cost parameters and an execution style are given, each row carries
    that block's simulated latency breakdown; otherwise those columns are
    empty. Cosine/recall columns fill from recorded scores where available.
    """
    from . import costmodel

    rows = []
    for trace in traces:
        breakdown = None
        if cost_params is not None and style is not None:
            breakdown = costmodel.simulate_run(
                trace.cost_iterations(), style, cost_params)
        recalls = {}
        for r in trace_recall(trace):
            recalls[(r["sequence"], r["iteration"], r["layer"])] = r["recall"]
        for si, seq in enumerate(trace.sequences):
            for ti, it in enumerate(seq.iterations):
                for rec in it:
                    row = {
                        "scheme": trace.scheme,
                        "sequence": si,
                        "iteration": rec.iteration,
                        "layer": rec.layer,
                        "bytes": rec.bytes,
                        "full_bytes": rec.full_bytes,
                        "n_selected": rec.n_selected,
                        "cosine": "",
                        "recall": recalls.get((si, rec.iteration, rec.layer), ""),
                        "load_s": "",
                        "attention_s": "",
                        "ffn_s": "",
                        "exposed_transfer_s": "",
                    }
                    if breakdown is not None:
                        bl = breakdown.blocks[ti][rec.layer]
                        row.update({
                            "load_s": bl.load_s,
                            "attention_s": bl.attention_s,
                            "ffn_s": bl.ffn_s,
                            "exposed_transfer_s": bl.exposed_transfer_s,
                        })
                    rows.append(row)
    rows.sort(key=lambda r: (r["scheme"], r["sequence"], r["iteration"], r["layer"]))
    return rows


def write_report(rows: list[dict], csv_path: str | None = None,
                 json_path: str | None = None) -> None:
    if csv_path is not None:
        with open(csv_path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=REPORT_COLUMNS)
            writer.writeheader()
            for row in rows:
                writer.writerow(row)
    if json_path is not None:
        with open(json_path, "w", encoding="utf-8") as f:
            json.dump({"columns": REPORT_COLUMNS, "rows": rows}, f, indent=1)


def read_report_json(path: str) -> list[dict]:
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    return data["rows"]
