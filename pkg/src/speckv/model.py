"""Transformer model definition, synthetic generation, forward pass, and file I/O.

Models here are pre-norm decoder stacks operating on continuous N x D inputs
(no tokenizer, no embedding). Synthetic generation plants a fixed set of
outlier channels: their layer-norm gains are multiplied by ``outlier_scale``
and, so the residual stream actually develops large fixed channels the way
trained models do, the FFN gets a small rectified write-back path into the
same channels. With ``outlier_scale == 1`` both effects vanish and the model
is plain iid noise.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from .linalg import FLOAT, layernorm, softmax_row

# Strength of the rectified FFN write-back into outlier channels, per unit of
# (outlier_scale - 1). Calibrated once on the synthetic sweep; see README.
OUTLIER_FEEDBACK = 1.5


class ModelFormatError(Exception):
    """Manifest is malformed or internally inconsistent."""


class PayloadSizeError(ModelFormatError):
    """Tensor payload does not match the sizes declared in the manifest."""


@dataclass(frozen=True)
class ModelSpec:
    layers: int
    model_dim: int
    heads: int
    ffn_dim: int
    ln_eps: float = 1e-5
    outlier_channels: int = 0
    outlier_scale: float = 1.0
    seed: int = 0

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    def validate(self) -> None:
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.heads < 1 or self.model_dim % self.heads != 0:
            raise ValueError("model_dim must be a positive multiple of heads")
        if self.ffn_dim < 1:
            raise ValueError("ffn_dim must be >= 1")
        if self.ln_eps <= 0:
            raise ValueError("ln_eps must be positive")
        if not 0 <= self.outlier_channels <= self.model_dim:
            raise ValueError("outlier_channels must be in [0, model_dim]")
        if self.outlier_scale < 1.0:
            raise ValueError("outlier_scale must be >= 1")


@dataclass
class LayerWeights:
    w_q: np.ndarray  # D x D
    w_k: np.ndarray  # D x D
    w_v: np.ndarray  # D x D
    w_o: np.ndarray  # D x D
    ffn_in: np.ndarray  # D x ffn_dim
    ffn_out: np.ndarray  # ffn_dim x D
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray

    def head_slice(self, which: str, head: int, head_dim: int) -> np.ndarray:
        """D x head_dim column block of a projection for one head."""
        w = {"q": self.w_q, "k": self.w_k, "v": self.w_v}[which]
        return w[:, head * head_dim : (head + 1) * head_dim]


@dataclass
class Model:
    spec: ModelSpec
    layers: list[LayerWeights]
    outlier_indices: np.ndarray
    skewed: bool = False
    # Per layer, per head orthogonal skew blocks (head_dim x head_dim),
    # present only when skewed.
    skew_matrices: list[list[np.ndarray]] | None = None

    def copy(self) -> "Model":
        new_layers = [
            LayerWeights(
                lw.w_q.copy(), lw.w_k.copy(), lw.w_v.copy(), lw.w_o.copy(),
                lw.ffn_in.copy(), lw.ffn_out.copy(),
                lw.ln1_gain.copy(), lw.ln1_bias.copy(),
                lw.ln2_gain.copy(), lw.ln2_bias.copy(),
            )
            for lw in self.layers
        ]
        skews = None
        if self.skew_matrices is not None:
            skews = [[a.copy() for a in layer] for layer in self.skew_matrices]
        return Model(self.spec, new_layers, self.outlier_indices.copy(), self.skewed, skews)


def generate_synthetic(spec: ModelSpec) -> Model:
    """Deterministically generate a model from a seed.

    Projection weights are iid normal scaled by 1/sqrt(fan_in); layer-norm
    gains sit near 1 with small jitter. A seed-derived set of outlier channel
    indices (shared by every layer) has both layer-norm gains multiplied by
    ``outlier_scale``, and receives the rectified FFN write-back described in
    the module docstring.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    d_model = spec.model_dim
    f = spec.ffn_dim

    outlier_idx = np.sort(rng.choice(d_model, size=spec.outlier_channels, replace=False))
    feedback = FLOAT(OUTLIER_FEEDBACK * (spec.outlier_scale - 1.0))

    layers = []
    for _ in range(spec.layers):
        w_q = (rng.standard_normal((d_model, d_model)) / np.sqrt(d_model)).astype(FLOAT)
        w_k = (rng.standard_normal((d_model, d_model)) / np.sqrt(d_model)).astype(FLOAT)
        w_v = (rng.standard_normal((d_model, d_model)) / np.sqrt(d_model)).astype(FLOAT)
        w_o = (rng.standard_normal((d_model, d_model)) / np.sqrt(d_model)).astype(FLOAT)
        ffn_in = (rng.standard_normal((d_model, f)) / np.sqrt(d_model)).astype(FLOAT)
        ffn_out = (rng.standard_normal((f, d_model)) / np.sqrt(f)).astype(FLOAT)
        ln1_gain = (1.0 + 0.02 * rng.standard_normal(d_model)).astype(FLOAT)
        ln1_bias = (0.02 * rng.standard_normal(d_model)).astype(FLOAT)
        ln2_gain = (1.0 + 0.02 * rng.standard_normal(d_model)).astype(FLOAT)
        ln2_bias = (0.02 * rng.standard_normal(d_model)).astype(FLOAT)

        ln1_gain[outlier_idx] *= FLOAT(spec.outlier_scale)
        ln2_gain[outlier_idx] *= FLOAT(spec.outlier_scale)
        if feedback > 0:
            # Channel j routes through hidden unit (j mod ffn_dim); the ReLU
            # between the two hops rectifies the loop so the planted channels
            # accumulate with a consistent sign across layers.
            for j in outlier_idx:
                h = int(j) % f
                ffn_in[j, h] += feedback
                ffn_out[h, j] += feedback

        layers.append(LayerWeights(
            w_q, w_k, w_v, w_o, ffn_in, ffn_out,
            ln1_gain, ln1_bias, ln2_gain, ln2_bias,
        ))
    return Model(spec=spec, layers=layers, outlier_indices=outlier_idx)


def attention_head(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                   causal: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """softmax(q k^T / sqrt(d)) v for one head.

    q is 1 x d (decode) or N x d (prefill, with causal=True and N == len(k)).
    Returns (output rows, attention weight rows). Weight rows carry zeros at
    masked positions so prefill rows align with the cache.
    """
    q = np.atleast_2d(np.asarray(q, dtype=FLOAT))
    k = np.asarray(k, dtype=FLOAT)
    v = np.asarray(v, dtype=FLOAT)
    if k.ndim != 2 or k.shape[0] == 0:
        raise ValueError("attention_head requires a nonempty key matrix")
    if k.shape != v.shape or q.shape[1] != k.shape[1]:
        raise ValueError(f"inconsistent attention shapes q={q.shape} k={k.shape} v={v.shape}")
    if causal and q.shape[0] != k.shape[0]:
        raise ValueError("causal attention requires len(q) == len(k)")
    d = q.shape[1]
    scores = (q @ k.T) / FLOAT(np.sqrt(d))
    n, s = scores.shape
    weights = np.zeros((n, s), dtype=FLOAT)
    for t in range(n):
        limit = t + 1 if causal else s
        weights[t, :limit] = softmax_row(scores[t, :limit])
    return weights @ v, weights


@dataclass
class BlockInternals:
    """Intermediates exposed by forward_block for tracing and speculation."""
    x_attn_in: np.ndarray  # LN1(x), N x D
    q_heads: list[np.ndarray]
    k_heads: list[np.ndarray]
    v_heads: list[np.ndarray]
    attn_weights: list[np.ndarray]
    attn_out: np.ndarray  # residual contribution of attention, N x D
    ffn_out: np.ndarray  # residual contribution of the FFN, N x D


def forward_block(x: np.ndarray, layer: LayerWeights, spec: ModelSpec,
                  kv: tuple[list[np.ndarray], list[np.ndarray]] | None = None,
                  ) -> tuple[np.ndarray, BlockInternals]:
    """One pre-norm residual block: x + Attn(LN1(x)) + FFN(LN2(x + Attn(LN1(x)))).

    ``kv`` is a per-head (keys, values) cache pair. Empty caches mean prefill
    (causal attention over x's rows); non-empty caches mean a decode step with
    a single new row. New K/V rows are appended to the caches in place.
    """
    x = np.atleast_2d(np.asarray(x, dtype=FLOAT))
    h, d = spec.heads, spec.head_dim
    if x.shape[1] != spec.model_dim:
        raise ValueError(f"input width {x.shape[1]} != model_dim {spec.model_dim}")
    if kv is None:
        kv = ([np.zeros((0, d), dtype=FLOAT) for _ in range(h)],
              [np.zeros((0, d), dtype=FLOAT) for _ in range(h)])
    k_cache, v_cache = kv
    if len(k_cache) != h or len(v_cache) != h:
        raise ValueError(f"cache must hold {h} heads")
    prefill = k_cache[0].shape[0] == 0
    if not prefill and x.shape[0] != 1:
        raise ValueError("decode step expects a single input row")

    x_a = layernorm(x, layer.ln1_gain, layer.ln1_bias, spec.ln_eps)
    q_heads, k_heads, v_heads, weights, head_outs = [], [], [], [], []
    for i in range(h):
        wq = layer.head_slice("q", i, d)
        wk = layer.head_slice("k", i, d)
        wv = layer.head_slice("v", i, d)
        q = x_a @ wq
        k_new = x_a @ wk
        v_new = x_a @ wv
        if k_cache[i].shape[1] != d:
            raise ValueError(f"cache head dim {k_cache[i].shape[1]} != {d}")
        k_cache[i] = np.concatenate([k_cache[i], k_new], axis=0)
        v_cache[i] = np.concatenate([v_cache[i], v_new], axis=0)
        out, w = attention_head(q, k_cache[i], v_cache[i], causal=prefill)
        q_heads.append(q)
        k_heads.append(k_new)
        v_heads.append(v_new)
        weights.append(w)
        head_outs.append(out)
    attn_out = np.concatenate(head_outs, axis=1) @ layer.w_o
    x_mid = x + attn_out
    x_f = layernorm(x_mid, layer.ln2_gain, layer.ln2_bias, spec.ln_eps)
    hidden = np.maximum(x_f @ layer.ffn_in, FLOAT(0.0))
    ffn_out = hidden @ layer.ffn_out
    out = x_mid + ffn_out
    internals = BlockInternals(x_a, q_heads, k_heads, v_heads, weights, attn_out, ffn_out)
    return out, internals


def forward(model: Model, x: np.ndarray,
            caches: list[tuple[list[np.ndarray], list[np.ndarray]]] | None = None,
            collect: bool = False):
    """Run the full block stack. Returns (output, per-layer internals or None).

    When ``caches`` is given it must hold one (keys, values) pair per layer and
    is updated in place, enabling prefill-then-decode usage.
    """
    if caches is None:
        caches = [None] * model.spec.layers
    internals = [] if collect else None
    out = x
    for idx, layer in enumerate(model.layers):
        out, block = forward_block(out, layer, model.spec, caches[idx])
        if collect:
            internals.append(block)
    return out, internals


def new_caches(model: Model) -> list[tuple[list[np.ndarray], list[np.ndarray]]]:
    h, d = model.spec.heads, model.spec.head_dim
    return [
        ([np.zeros((0, d), dtype=FLOAT) for _ in range(h)],
         [np.zeros((0, d), dtype=FLOAT) for _ in range(h)])
        for _ in range(model.spec.layers)
    ]


# ---------------------------------------------------------------------------
# Weight file I/O: JSON manifest + one raw little-endian float32 payload.
# ---------------------------------------------------------------------------

_TENSOR_FIELDS = ("w_q", "w_k", "w_v", "w_o", "ffn_in", "ffn_out",
                  "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias")
MANIFEST_VERSION = 1


def save_model(model: Model, path: str) -> None:
    """Write a JSON manifest at ``path`` and the raw payload beside it."""
    payload_name = os.path.basename(path) + ".bin"
    tensors = []
    chunks = []
    offset = 0

    def add(name, arr):
        nonlocal offset
        data = np.ascontiguousarray(arr, dtype="<f4")
        raw = data.tobytes()
        tensors.append({
            "name": name,
            "shape": list(data.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)

    for i, lw in enumerate(model.layers):
        for fname in _TENSOR_FIELDS:
            add(f"layer.{i}.{fname}", getattr(lw, fname))
    if model.skewed:
        for i, heads in enumerate(model.skew_matrices):
            for j, a in enumerate(heads):
                add(f"skew.{i}.{j}", a)
    add("outlier_indices", model.outlier_indices.astype(FLOAT))

    manifest = {
        "format_version": MANIFEST_VERSION,
        "payload": payload_name,
        "spec": {
            "layers": model.spec.layers,
            "model_dim": model.spec.model_dim,
            "heads": model.spec.heads,
            "ffn_dim": model.spec.ffn_dim,
            "ln_eps": model.spec.ln_eps,
            "outlier_channels": model.spec.outlier_channels,
            "outlier_scale": model.spec.outlier_scale,
            "seed": model.spec.seed,
        },
        "skewed": model.skewed,
        "tensors": tensors,
    }
    with open(os.path.join(os.path.dirname(path) or ".", payload_name), "wb") as f:
        f.write(b"".join(chunks))
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1)


def load_model(path: str) -> Model:
    """Load a model saved by :func:`save_model`; round-trip is byte-exact."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"manifest is not valid JSON: {e}") from e

    for key in ("format_version", "payload", "spec", "tensors"):
        if key not in manifest:
            raise ModelFormatError(f"manifest missing required key {key!r}")
    sp = manifest["spec"]
    try:
        spec = ModelSpec(
            layers=int(sp["layers"]),
            model_dim=int(sp["model_dim"]),
            heads=int(sp["heads"]),
            ffn_dim=int(sp["ffn_dim"]),
            ln_eps=float(sp["ln_eps"]),
            outlier_channels=int(sp["outlier_channels"]),
            outlier_scale=float(sp["outlier_scale"]),
            seed=int(sp["seed"]),
        )
        spec.validate()
    except (KeyError, TypeError, ValueError) as e:
        raise ModelFormatError(f"invalid spec in manifest: {e}") from e

    payload_path = os.path.join(os.path.dirname(path) or ".", manifest["payload"])
    with open(payload_path, "rb") as f:
        blob = f.read()

    table = {}
    for entry in manifest["tensors"]:
        start, nbytes = int(entry["offset"]), int(entry["nbytes"])
        shape = tuple(int(s) for s in entry["shape"])
        expected = int(np.prod(shape)) * 4 if shape else 4
        if nbytes != expected:
            raise ModelFormatError(
                f"tensor {entry['name']!r}: declared nbytes {nbytes} != shape {shape}")
        if start + nbytes > len(blob):
            raise PayloadSizeError(
                f"payload truncated: tensor {entry['name']!r} needs bytes "
                f"[{start}, {start + nbytes}) but payload has {len(blob)}")
        arr = np.frombuffer(blob[start : start + nbytes], dtype="<f4").reshape(shape)
        table[entry["name"]] = arr.astype(FLOAT)

    declared = sum(int(e["nbytes"]) for e in manifest["tensors"])
    if declared != len(blob):
        raise PayloadSizeError(
            f"payload size {len(blob)} != total declared tensor bytes {declared}")

    layers = []
    for i in range(spec.layers):
        try:
            fields = {fname: table[f"layer.{i}.{fname}"] for fname in _TENSOR_FIELDS}
        except KeyError as e:
            raise ModelFormatError(f"manifest missing tensor for layer {i}: {e}") from e
        layers.append(LayerWeights(**fields))
    _check_layer_shapes(layers[0], spec)

    skewed = bool(manifest.get("skewed", False))
    skews = None
    if skewed:
        d = spec.head_dim
        skews = []
        for i in range(spec.layers):
            heads = []
            for j in range(spec.heads):
                key = f"skew.{i}.{j}"
                if key not in table:
                    raise ModelFormatError(f"skewed model missing tensor {key!r}")
                heads.append(table[key].reshape(d, d))
            skews.append(heads)
    outliers = table.get("outlier_indices", np.zeros(0, dtype=FLOAT)).astype(np.int64)
    return Model(spec, layers, outliers, skewed, skews)


def _check_layer_shapes(lw: LayerWeights, spec: ModelSpec) -> None:
    dm, f = spec.model_dim, spec.ffn_dim
    expected = {
        "w_q": (dm, dm), "w_k": (dm, dm), "w_v": (dm, dm), "w_o": (dm, dm),
        "ffn_in": (dm, f), "ffn_out": (f, dm),
        "ln1_gain": (dm,), "ln1_bias": (dm,), "ln2_gain": (dm,), "ln2_bias": (dm,),
    }
    for name, shape in expected.items():
        actual = getattr(lw, name).shape
        if actual != shape:
            raise ModelFormatError(f"tensor {name} has shape {actual}, expected {shape}")


def consecutive_input_similarity(model: Model, prompt: np.ndarray) -> float:
    """Mean cosine between consecutive block inputs, averaged over tokens.

    This is the statistic used to pick the default outlier scale: per layer
    pair (i-1, i), the per-token cosine between the two block input rows is
    averaged, then the layer pairs are averaged.
    """
    inputs = [np.asarray(prompt, dtype=FLOAT)]
    out = inputs[0]
    for layer in model.layers:
        out, _ = forward_block(out, layer, model.spec)
        inputs.append(out)
    # inputs[i] is the input to block i for i < L.
    sims = []
    for i in range(1, model.spec.layers):
        sims.append(_mean_row_cosine(inputs[i], inputs[i - 1]))
    return float(np.mean(sims))


def _mean_row_cosine(a: np.ndarray, b: np.ndarray) -> float:
    a64 = a.astype(np.float64)
    b64 = b.astype(np.float64)
    num = np.sum(a64 * b64, axis=1)
    den = np.linalg.norm(a64, axis=1) * np.linalg.norm(b64, axis=1)
    den = np.where(den == 0, 1.0, den)
    return float(np.mean(num / den))


def random_prompt(n: int, model_dim: int, seed: int) -> np.ndarray:
    """Seeded standard-normal prompt matrix, the engine's input convention."""
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, model_dim)).astype(FLOAT)
