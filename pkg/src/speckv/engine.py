"""Inference controller: prefill and decode across cache-management schemes.

The engine runs continuous autoregression (the block-stack output row feeds
back as the next input; there is no vocabulary). Per decode iteration and
layer it records the selection, byte, and flop numbers that the metrics and
cost-model modules consume.

Scheme semantics:

* ``full``       - every layer attends over the whole pool.
* ``speculative``- layer 0 fetches everything; while layer i-1 runs, layer
                   i's scores are speculated from layer i-1's attention input
                   and the alpha rule picks the tokens to prefetch.
* ``oracle``     - per-iteration true top-n with the full pool retained.
* ``h2o``        - fixed-budget heavy-hitter eviction, per head.
* ``quant4``     - full attention over group-quantized K/V.

The KV rows produced for the current token are always attended (they are
GPU-resident) and never counted as transferred bytes.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import costmodel
from .baselines import (
    H2oState, h2o_budget, h2o_prefill, h2o_step, oracle_select, quant_roundtrip,
    quantized_bytes,
)
from .linalg import FLOAT, layernorm
from .model import Model, attention_head, forward_block, random_prompt
from .pool import EvictionPolicy, KvPool
from .speculation import (
    HeadArtifacts, PartialArtifacts, SpeculationConfig, build_partial,
    selection_bytes, speculate_scores, select_tokens,
)

TRACE_SCHEMA_VERSION = 1


class Scheme(str, Enum):
    FULL = "full"
    SPECULATIVE = "speculative"
    ORACLE = "oracle"
    H2O = "h2o"
    QUANT4 = "quant4"


@dataclass(frozen=True)
class RunConfig:
    scheme: Scheme = Scheme.FULL
    prompt_len: int = 32
    gen_len: int = 8
    batch: int = 1
    speculation: SpeculationConfig = field(default_factory=SpeculationConfig)
    pool_limit: int | None = None
    pool_policy: EvictionPolicy = EvictionPolicy.COUNTER
    h2o_budget_fraction: float = 0.2
    oracle_budget_fraction: float | None = None  # defaults to the h2o fraction
    prompt_seed: int = 0
    kv_bytes_per_element: int = 2
    record_scores: bool = False
    record_selection: bool = False

    def validate(self) -> None:
        if self.prompt_len < 1:
            raise ValueError("prompt_len must be >= 1")
        if self.gen_len < 0:
            raise ValueError("gen_len must be >= 0")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        self.speculation.validate()
        if self.pool_limit is not None and self.pool_limit < 1:
            raise ValueError("pool_limit must be >= 1 when set")
        if not 0 < self.h2o_budget_fraction <= 1:
            raise ValueError("h2o_budget_fraction must be in (0, 1]")
        if self.scheme is Scheme.H2O and self.pool_limit is not None:
            raise ValueError("h2o manages its own budget; pool_limit must be unset")


@dataclass
class LayerRecord:
    iteration: int
    layer: int
    n_selected: int  # pool rows fetched per head (current token excluded)
    bytes: int  # scheme bytes actually moved this layer
    full_bytes: int  # bytes a full fetch would have moved
    attention_flops: float
    ffn_flops: float
    speculation_flops: float
    selected: list[list[int]] | None = None  # per head, when recorded
    spec_scores: list[list[float]] | None = None
    true_scores: list[list[float]] | None = None
    pool_events: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        out = {
            "iteration": self.iteration,
            "layer": self.layer,
            "n_selected": self.n_selected,
            "bytes": self.bytes,
            "full_bytes": self.full_bytes,
            "attention_flops": self.attention_flops,
            "ffn_flops": self.ffn_flops,
            "speculation_flops": self.speculation_flops,
            "pool_events": self.pool_events,
        }
        if self.selected is not None:
            out["selected"] = self.selected
        if self.spec_scores is not None:
            out["spec_scores"] = self.spec_scores
        if self.true_scores is not None:
            out["true_scores"] = self.true_scores
        return out

    @classmethod
    def from_json(cls, d: dict) -> "LayerRecord":
        return cls(
            iteration=d["iteration"], layer=d["layer"], n_selected=d["n_selected"],
            bytes=d["bytes"], full_bytes=d["full_bytes"],
            attention_flops=d["attention_flops"], ffn_flops=d["ffn_flops"],
            speculation_flops=d["speculation_flops"],
            selected=d.get("selected"), spec_scores=d.get("spec_scores"),
            true_scores=d.get("true_scores"), pool_events=d.get("pool_events", []),
        )


@dataclass
class SequenceTrace:
    prefill: dict
    iterations: list[list[LayerRecord]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "prefill": self.prefill,
            "iterations": [[r.to_json() for r in it] for it in self.iterations],
        }


@dataclass
class Trace:
    version: int
    scheme: str
    layers: int
    heads: int
    head_dim: int
    config: dict
    sequences: list[SequenceTrace] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "scheme": self.scheme,
            "layers": self.layers,
            "heads": self.heads,
            "head_dim": self.head_dim,
            "config": self.config,
            "sequences": [s.to_json() for s in self.sequences],
        }

    @classmethod
    def from_json(cls, d: dict) -> "Trace":
        trace = cls(version=d["version"], scheme=d["scheme"], layers=d["layers"],
                    heads=d["heads"], head_dim=d["head_dim"], config=d["config"])
        for s in d["sequences"]:
            seq = SequenceTrace(prefill=s["prefill"])
            for it in s["iterations"]:
                seq.iterations.append([LayerRecord.from_json(r) for r in it])
            trace.sequences.append(seq)
        return trace

    def total_bytes(self) -> int:
        return sum(r.bytes for s in self.sequences for it in s.iterations for r in it)

    def cost_iterations(self) -> list[list[costmodel.BlockCost]]:
        """Aggregate per-(iteration, layer) workload over the batch."""
        if not self.sequences:
            return []
        n_iters = len(self.sequences[0].iterations)
        out = []
        for t in range(n_iters):
            blocks = []
            for layer in range(self.layers):
                full_b = sum(s.iterations[t][layer].full_bytes for s in self.sequences)
                sel_b = sum(s.iterations[t][layer].bytes for s in self.sequences)
                attn_f = sum(s.iterations[t][layer].attention_flops for s in self.sequences)
                ffn_f = sum(s.iterations[t][layer].ffn_flops for s in self.sequences)
                spec_f = sum(s.iterations[t][layer].speculation_flops for s in self.sequences)
                blocks.append(costmodel.BlockCost(
                    full_bytes=full_b, selected_bytes=sel_b,
                    attention_flops=attn_f, ffn_flops=ffn_f,
                    speculation_flops=spec_f))
            out.append(blocks)
        return out


class DecodeSession:
    """Prefill-then-decode state for one sequence."""

    def __init__(self, model: Model, config: RunConfig, prompt: np.ndarray):
        config.validate()
        if config.scheme is Scheme.SPECULATIVE and not model.skewed:
            raise ValueError("the speculative scheme requires a skewed model")
        self.model = model
        self.config = config
        self.spec = model.spec
        self.prompt = np.asarray(prompt, dtype=FLOAT)
        if self.prompt.shape != (config.prompt_len, self.spec.model_dim):
            raise ValueError(
                f"prompt shape {self.prompt.shape} != "
                f"({config.prompt_len}, {self.spec.model_dim})")
        self.iteration = 0
        self.x: np.ndarray | None = None  # 1 x D decode input
        self.artifacts: PartialArtifacts | None = None
        self.h2o: list[list[H2oState]] | None = None
        self._pool_events: list[dict] = []
        self.pools = self._make_pools()
        self.trace = SequenceTrace(prefill={})
        self._prefill()

    # -- setup ------------------------------------------------------------

    def _make_pools(self) -> list[list[KvPool]]:
        pools = []
        for layer in range(self.spec.layers):
            row = []
            for head in range(self.spec.heads):
                row.append(KvPool(
                    self.spec.head_dim, limit=self.config.pool_limit,
                    policy=self.config.pool_policy,
                    on_overwrite=self._overwrite_listener(layer, head)))
            pools.append(row)
        return pools

    def _overwrite_listener(self, layer: int, head: int):
        def listen(victim: int, old_arrival: int) -> None:
            self._pool_events.append({
                "layer": layer, "head": head, "victim": victim,
                "arrival_seq": old_arrival,
            })
        return listen

    def _prefill(self) -> None:
        cfg = self.config
        n = cfg.prompt_len
        x = self.prompt
        if cfg.scheme is Scheme.SPECULATIVE:
            self.artifacts = PartialArtifacts(self.spec.layers, self.spec.heads)
        if cfg.scheme is Scheme.H2O:
            budget = h2o_budget(cfg.h2o_budget_fraction, n)
            self.h2o = [
                [H2oState(budget=budget, recent_window=budget // 2)
                 for _ in range(self.spec.heads)]
                for _ in range(self.spec.layers)
            ]
        for li, layer in enumerate(self.model.layers):
            out, block = forward_block(x, layer, self.spec)
            for hi in range(self.spec.heads):
                store_k, store_v = block.k_heads[hi], block.v_heads[hi]
                if cfg.scheme is Scheme.QUANT4:
                    store_k = np.stack([quant_roundtrip(r) for r in store_k])
                    store_v = np.stack([quant_roundtrip(r) for r in store_v])
                for t in range(n):
                    self.pools[li][hi].append(store_k[t], store_v[t])
            if cfg.scheme is Scheme.SPECULATIVE and li >= 1:
                for hi in range(self.spec.heads):
                    cols = build_partial(block.q_heads[hi], block.k_heads[hi],
                                         cfg.speculation.partial_ratio)
                    partial_w_q = layer.head_slice("q", hi, self.spec.head_dim)[:, cols].copy()
                    partial_k = self.pools[li][hi].keys[:, cols].copy()
                    self.artifacts.set_head(li, hi, HeadArtifacts(
                        column_indices=cols, partial_w_q=partial_w_q,
                        partial_k=partial_k))
            if cfg.scheme is Scheme.H2O:
                for hi in range(self.spec.heads):
                    colsums = block.attn_weights[hi].sum(axis=0)
                    h2o_prefill(self.h2o[li][hi], list(range(n)), colsums)
            x = out
        self.x = x[-1:].copy()
        cols = None
        if self.artifacts is not None and self.spec.layers > 1:
            cols = int(self.artifacts.head(1, 0).column_indices.size)
        self.trace.prefill = {
            "prompt_len": n,
            "pool_rows": len(self.pools[0][0]),
            "partial_cols": cols,
            "pool_overwrites": len(self._pool_events),
        }
        self._pool_events = []

    # -- decode -----------------------------------------------------------

    def decode_step(self) -> np.ndarray:
        """Generate one token's worth of state; returns the output row."""
        if self.x is None:
            raise RuntimeError("prefill has not run")
        cfg = self.config
        spec = self.spec
        h, d = spec.heads, spec.head_dim
        scale = FLOAT(1.0 / np.sqrt(d))
        x = self.x
        records: list[LayerRecord] = []
        carry_sel: list[np.ndarray] | None = None
        carry_n = 0
        carry_scores: list[np.ndarray] | None = None

        for li, layer in enumerate(self.model.layers):
            self._pool_events = []
            x_a = layernorm(x, layer.ln1_gain, layer.ln1_bias, spec.ln_eps)

            # Speculate for the next layer while this one is "computing".
            next_sel, next_n, next_scores, spec_flops = None, 0, None, 0.0
            if cfg.scheme is Scheme.SPECULATIVE and li + 1 < spec.layers:
                scores = speculate_scores(x_a[0], self.artifacts, li + 1, d)
                next_sel, next_n = select_tokens(scores, cfg.speculation)
                next_scores = scores
                k_cols = self.artifacts.head(li + 1, 0).column_indices.size
                spec_flops = costmodel.speculation_flops(
                    spec.model_dim, k_cols, len(self.pools[li + 1][0]), h)

            q_rows, k_rows, v_rows = [], [], []
            for hi in range(h):
                q_rows.append((x_a @ layer.head_slice("q", hi, d))[0])
                k_rows.append((x_a @ layer.head_slice("k", hi, d))[0])
                v_rows.append((x_a @ layer.head_slice("v", hi, d))[0])

            s_before = len(self.pools[li][0])
            true_scores = None
            if cfg.record_scores or cfg.scheme is Scheme.ORACLE:
                true_scores = [
                    (q_rows[hi] @ self.pools[li][hi].keys[:s_before].T) * scale
                    for hi in range(h)
                ]

            positions = []
            for hi in range(h):
                store_k, store_v = k_rows[hi], v_rows[hi]
                if cfg.scheme is Scheme.QUANT4:
                    store_k = quant_roundtrip(store_k)
                    store_v = quant_roundtrip(store_v)
                pos = self.pools[li][hi].append(store_k, store_v)
                positions.append(pos)
                if cfg.scheme is Scheme.SPECULATIVE and li >= 1:
                    self.artifacts.append_partial_key(
                        li, hi, k_rows[hi], pos, len(self.pools[li][hi]))

            fetch_sets, n_sel = self._fetch_sets(
                li, s_before, positions, carry_sel, carry_n, true_scores)

            head_outs = []
            h2o_weight_rows = []
            for hi in range(h):
                idx = fetch_sets[hi]
                keys, values = self.pools[li][hi].fetch(idx)
                out_h, w = attention_head(q_rows[hi][None, :], keys, values)
                head_outs.append(out_h)
                h2o_weight_rows.append(w[0])
            attn_out = np.concatenate(head_outs, axis=1) @ layer.w_o
            x_mid = x + attn_out
            x_f = layernorm(x_mid, layer.ln2_gain, layer.ln2_bias, spec.ln_eps)
            hidden = np.maximum(x_f @ layer.ffn_in, FLOAT(0.0))
            x = x_mid + hidden @ layer.ffn_out

            if cfg.scheme is Scheme.H2O:
                new_token = s_before  # global index == pool row (no pool limit)
                for hi in range(h):
                    h2o_step(self.h2o[li][hi], new_token, h2o_weight_rows[hi])

            records.append(self._record(
                li, s_before, n_sel, fetch_sets, positions, spec_flops,
                carry_scores if cfg.scheme is Scheme.SPECULATIVE else None,
                true_scores))
            carry_sel, carry_n, carry_scores = next_sel, next_n, next_scores

        self.x = x
        self.iteration += 1
        self.trace.iterations.append(records)
        return x[0].copy()

    def _fetch_sets(self, li: int, s_before: int, positions: list[int],
                    carry_sel, carry_n: int, true_scores
                    ) -> tuple[list[np.ndarray], int]:
        """Per-head pool indices to attend over, and the per-head fetch count.

        The current token's position is always included; the fetch count n
        excludes it (those rows are the ones actually transferred).
        """
        cfg = self.config
        h = self.spec.heads
        scheme = cfg.scheme
        if scheme in (Scheme.FULL, Scheme.QUANT4) or (
                scheme is Scheme.SPECULATIVE and li == 0):
            sets = [self.pools[li][hi].all_indices() for hi in range(h)]
            return sets, s_before
        if scheme is Scheme.SPECULATIVE:
            if carry_sel is None:
                raise RuntimeError(f"layer {li}: missing carried selection")
            sets = [_with_position(carry_sel[hi], positions[hi])
                    for hi in range(h)]
            return sets, carry_n
        if scheme is Scheme.ORACLE:
            n = min(h2o_budget(cfg.oracle_budget_fraction
                               if cfg.oracle_budget_fraction is not None
                               else cfg.h2o_budget_fraction,
                               cfg.prompt_len), s_before)
            picks = oracle_select(true_scores, n)
            sets = [_with_position(picks[hi], positions[hi]) for hi in range(h)]
            return sets, n
        if scheme is Scheme.H2O:
            sets = []
            count = len(self.h2o[li][0].retained)
            for hi in range(h):
                retained = np.asarray(self.h2o[li][hi].retained, dtype=np.int64)
                sets.append(np.concatenate([retained, [positions[hi]]]))
            return sets, count
        raise ValueError(f"unknown scheme {scheme}")

    def _record(self, li: int, s_before: int, n_sel: int, fetch_sets,
                positions, spec_flops: float, spec_scores, true_scores
                ) -> LayerRecord:
        cfg = self.config
        h, d = self.spec.heads, self.spec.head_dim
        bpe = cfg.kv_bytes_per_element
        if cfg.scheme is Scheme.QUANT4:
            nbytes = h * n_sel * 2 * quantized_bytes(d)
        else:
            nbytes = selection_bytes(n_sel, h, d, bpe)
        rec = LayerRecord(
            iteration=self.iteration, layer=li, n_selected=n_sel, bytes=nbytes,
            full_bytes=selection_bytes(s_before, h, d, bpe),
            attention_flops=costmodel.attention_flops([n_sel] * h, d),
            ffn_flops=costmodel.ffn_flops(self.spec.model_dim, self.spec.ffn_dim),
            speculation_flops=spec_flops,
            pool_events=list(self._pool_events),
        )
        if cfg.record_selection:
            rec.selected = [[int(i) for i in fetch_sets[hi] if i != positions[hi]]
                            for hi in range(h)]
        if cfg.record_scores:
            if spec_scores is not None:
                rec.spec_scores = [[float(v) for v in s] for s in spec_scores]
            if true_scores is not None:
                rec.true_scores = [[float(v) for v in s] for s in true_scores]
        return rec


def _with_position(indices: np.ndarray, position: int) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64)
    if position in idx:
        return idx
    return np.concatenate([idx, [position]])


def run(model: Model, config: RunConfig) -> tuple[Trace, list[np.ndarray]]:
    """Prefill plus gen_len decode steps for each sequence in the batch.

    Deterministic for a fixed model and config: sequence b's prompt comes from
    prompt_seed + b. Returns the trace and each sequence's final output row.
    """
    config.validate()
    trace = Trace(
        version=TRACE_SCHEMA_VERSION, scheme=config.scheme.value,
        layers=model.spec.layers, heads=model.spec.heads,
        head_dim=model.spec.head_dim, config=_config_json(config))
    finals = []
    for b in range(config.batch):
        prompt = random_prompt(config.prompt_len, model.spec.model_dim,
                               config.prompt_seed + b)
        session = DecodeSession(model, config, prompt)
        out = session.x[0].copy()
        for _ in range(config.gen_len):
            out = session.decode_step()
        trace.sequences.append(session.trace)
        finals.append(out)
    return trace, finals


def _config_json(config: RunConfig) -> dict:
    return {
        "scheme": config.scheme.value,
        "prompt_len": config.prompt_len,
        "gen_len": config.gen_len,
        "batch": config.batch,
        "partial_ratio": config.speculation.partial_ratio,
        "alpha": config.speculation.alpha,
        "cap_ratio": config.speculation.cap_ratio,
        "min_select": config.speculation.min_select,
        "pool_limit": config.pool_limit,
        "pool_policy": config.pool_policy.value,
        "h2o_budget_fraction": config.h2o_budget_fraction,
        "oracle_budget_fraction": config.oracle_budget_fraction,
        "prompt_seed": config.prompt_seed,
        "kv_bytes_per_element": config.kv_bytes_per_element,
    }
