"""speckv: speculative KV-cache prefetching engine and benchmark harness.

A desk-scale transformer decoding stack (continuous inputs, no tokenizer)
with offline query/key skewing, prefill-time partial-weight generation,
decode-time attention-score speculation, a CPU-side KV pool with pluggable
eviction, baseline schemes (full cache, heavy-hitter eviction, 4-bit
quantization, oracle selection), and an analytical transfer cost model.
"""

__version__ = "0.1.0"
