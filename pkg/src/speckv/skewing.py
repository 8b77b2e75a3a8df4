"""Offline skewing of query/key weights.

Calibration runs one forward pass over a sample prompt, takes the SVD of each
head's observed query matrix, and keeps the right singular basis as that
head's skew. Right-multiplying both the query and key head weights by the
same orthogonal block leaves every q k^T product unchanged while
concentrating the query energy into the leading columns (whose norms are
exactly the calibration singular values).
"""

from dataclasses import dataclass

import numpy as np

from .linalg import FLOAT, col_l2_norms, svd
from .model import Model, forward, random_prompt


@dataclass
class SkewSet:
    """Per layer, per head: orthogonal skew block and calibration spectrum."""
    matrices: list[list[np.ndarray]]  # [layer][head] -> d x d
    sigmas: list[list[np.ndarray]]  # [layer][head] -> length-d descending

    @property
    def layers(self) -> int:
        return len(self.matrices)


def calibrate_skew(model: Model, sample_input: np.ndarray) -> SkewSet:
    """Gather each head's query matrix on a sample prompt and SVD it.

    Returns the right singular bases (one d x d orthogonal block per
    layer/head) with a deterministic sign convention: the largest-magnitude
    entry of every basis column is made positive.
    """
    if model.skewed:
        raise ValueError("model is already skewed; calibrate on the plain model")
    sample_input = np.asarray(sample_input, dtype=FLOAT)
    if sample_input.ndim != 2 or sample_input.shape[0] < 2:
        raise ValueError("calibration needs a sample input with at least 2 rows")
    if sample_input.shape[1] != model.spec.model_dim:
        raise ValueError("calibration input width must equal model_dim")

    _, internals = forward(model, sample_input, collect=True)
    matrices, sigmas = [], []
    for block in internals:
        row_m, row_s = [], []
        for q in block.q_heads:
            u, sigma, v = svd(q)
            _fix_signs(u, v)
            row_m.append(v)
            row_s.append(sigma)
        matrices.append(row_m)
        sigmas.append(row_s)
    return SkewSet(matrices, sigmas)


def _fix_signs(u: np.ndarray, v: np.ndarray) -> None:
    # Flip paired U/V columns so each V column's max-|entry| is positive.
    for j in range(v.shape[1]):
        col = v[:, j]
        pivot = int(np.argmax(np.abs(col)))
        if col[pivot] < 0:
            v[:, j] = -col
            u[:, j] = -u[:, j]


def apply_skew(model: Model, skews: SkewSet) -> Model:
    """Fold the skew blocks into W_Q and W_K; returns a new skewed model.

    Each head's D x d slice of W_Q and W_K is right-multiplied by that head's
    orthogonal block, so the skewed model's forward pass matches the original
    (attention scores are mathematically invariant; W_V, W_O, FFN untouched).
    """
    if model.skewed:
        raise ValueError("model is already skewed")
    if skews.layers != model.spec.layers:
        raise ValueError(
            f"skew set covers {skews.layers} layers, model has {model.spec.layers}")
    d = model.spec.head_dim
    out = model.copy()
    for li, layer in enumerate(out.layers):
        if len(skews.matrices[li]) != model.spec.heads:
            raise ValueError(f"layer {li}: skew set head count mismatch")
        for hi in range(model.spec.heads):
            a = np.asarray(skews.matrices[li][hi], dtype=FLOAT)
            if a.shape != (d, d):
                raise ValueError(f"skew block shape {a.shape} != ({d}, {d})")
            sl = slice(hi * d, (hi + 1) * d)
            layer.w_q[:, sl] = layer.w_q[:, sl] @ a
            layer.w_k[:, sl] = layer.w_k[:, sl] @ a
    out.skewed = True
    out.skew_matrices = [[a.astype(FLOAT).copy() for a in row] for row in skews.matrices]
    return out


def skew_model(model: Model, calib_seed: int, calib_tokens: int | None = None
               ) -> tuple[Model, SkewSet]:
    """Calibrate on a seeded random prompt (default 4 * head_dim rows) and apply."""
    n = calib_tokens if calib_tokens is not None else 4 * model.spec.head_dim
    prompt = random_prompt(max(n, 2), model.spec.model_dim, calib_seed)
    skews = calibrate_skew(model, prompt)
    return apply_skew(model, skews), skews


def verification_report(plain: Model, skewed: Model, prompt: np.ndarray) -> dict:
    """Forward both models on a prompt and report the deviation and spectra."""
    out_plain, _ = forward(plain, prompt)
    out_skewed, _ = forward(skewed, prompt)
    max_abs = float(np.max(np.abs(out_plain - out_skewed)))
    sigma_decay = []
    if skewed.skew_matrices is not None:
        # Column norms of the skewed calibration queries equal the singular
        # values; report the per-layer mean top-30% energy share instead of
        # raw spectra to keep the report small.
        from .speculation import spectrum_energy_share

        _, internals = forward(skewed, prompt, collect=True)
        for block in internals:
            shares = []
            for q in block.q_heads:
                norms = col_l2_norms(q).astype(np.float64)
                k = int(np.ceil(0.3 * norms.size))
                shares.append(spectrum_energy_share(norms, k))
            sigma_decay.append(float(np.mean(shares)))
    return {
        "max_abs_forward_deviation": max_abs,
        "per_layer_top30_energy_share": sigma_decay,
    }
