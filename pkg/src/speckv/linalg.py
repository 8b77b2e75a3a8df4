"""Minimal dense linear algebra used by every other module.

All routines operate on row-major float32 ndarrays and are pure functions.
The SVD is a from-scratch one-sided Jacobi (column rotations driven by the
2x2 Gram subproblem), which is plenty accurate for the calibration-sized
matrices used here.
"""

import numpy as np

FLOAT = np.float32

# One-sided Jacobi convergence: stop when every pairwise rotation in a sweep
# has |sin| below this, or after MAX_SWEEPS sweeps.
JACOBI_SINE_TOL = 1e-10
JACOBI_MAX_SWEEPS = 30


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float32 array, rejecting non-finite input."""
    m = np.asarray(a, dtype=FLOAT)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite values")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Standard matrix product with explicit inner-dimension validation."""
    a = np.asarray(a, dtype=FLOAT)
    b = np.asarray(b, dtype=FLOAT)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def softmax_row(v: np.ndarray) -> np.ndarray:
    """Numerically stable softmax of a 1-D vector (max-subtraction)."""
    v = np.asarray(v, dtype=FLOAT)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("softmax_row expects a nonempty 1-D vector")
    shifted = v - np.max(v)
    e = np.exp(shifted)
    return (e / np.sum(e)).astype(FLOAT)


def layernorm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float) -> np.ndarray:
    """(x - mean) / sqrt(var + eps) * gain + bias, broadcast over rows.

    Accepts a single vector or an N x D matrix; normalization is per row.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=FLOAT)
    gain = np.asarray(gain, dtype=FLOAT)
    bias = np.asarray(bias, dtype=FLOAT)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(
            f"gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}"
        )
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    normed = centered / np.sqrt(var + FLOAT(eps))
    return (normed * gain + bias).astype(FLOAT)


def svd(m: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD via one-sided Jacobi: m = U @ diag(sigma) @ V.T.

    Returns (U: n x r, sigma: r descending >= 0, V: d x r) with r = min(n, d).
    Internal accumulation runs in float64; outputs are float32.
    """
    m = as_matrix(m, "svd input")
    n, d = m.shape
    if n == 0 or d == 0:
        raise ValueError("svd input must be nonempty")
    if n < d:
        # Work on the transpose so the rotation side is the short one.
        u, s, v = _jacobi_svd(m.T.astype(np.float64))
        return v.astype(FLOAT), s.astype(FLOAT), u.astype(FLOAT)
    u, s, v = _jacobi_svd(m.astype(np.float64))
    return u.astype(FLOAT), s.astype(FLOAT), v.astype(FLOAT)


def _round_robin_schedule(d: int) -> list[tuple[np.ndarray, np.ndarray]]:
    # Circle-method tournament: each round pairs every column exactly once,
    # so rounds can be applied with vectorized disjoint rotations.
    players = list(range(d))
    if d % 2 == 1:
        players.append(-1)  # bye
    m = len(players)
    rounds = []
    arr = players[:]
    for _ in range(m - 1):
        left = [arr[k] for k in range(m // 2)]
        right = [arr[m - 1 - k] for k in range(m // 2)]
        pairs = [(i, j) for i, j in zip(left, right) if i != -1 and j != -1]
        rounds.append((np.array([p[0] for p in pairs], dtype=np.intp),
                       np.array([p[1] for p in pairs], dtype=np.intp)))
        arr = [arr[0], arr[-1]] + arr[1:-1]
    return rounds


def _jacobi_svd(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # a is n x d with n >= d. Rotate column pairs until mutually orthogonal;
    # the rotation angle comes from the 2x2 Gram block [[cii, cij], [cij, cjj]].
    # Each round-robin round rotates d/2 disjoint pairs at once.
    n, d = a.shape
    work = a.copy()
    v = np.eye(d)
    rounds = _round_robin_schedule(d)
    for _ in range(JACOBI_MAX_SWEEPS):
        max_sine = 0.0
        for ii, jj in rounds:
            ci = work[:, ii]
            cj = work[:, jj]
            cij = np.einsum("ij,ij->j", ci, cj)
            cii = np.einsum("ij,ij->j", ci, ci)
            cjj = np.einsum("ij,ij->j", cj, cj)
            # Pairs already orthogonal to working precision stay untouched.
            active = np.abs(cij) > 1e-30 * np.maximum(np.sqrt(cii * cjj), 1e-300)
            if not np.any(active):
                continue
            # Inner rotation (|theta| <= pi/4): zeroes the off-diagonal Gram
            # entry with the minimal angle, which keeps parallel orderings
            # from cycling. Final ordering is handled by the sort below.
            cij_safe = np.where(active, cij, 1.0)
            tau = (cii - cjj) / (2.0 * cij_safe)
            t = np.sign(tau) / (np.abs(tau) + np.hypot(1.0, tau))
            t = np.where(tau == 0.0, 1.0, t)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = np.where(active, c * t, 0.0)
            c = np.where(active, c, 1.0)
            max_sine = max(max_sine, float(np.max(np.abs(s[active]))))
            work[:, ii] = ci * c + cj * s
            work[:, jj] = cj * c - ci * s
            vi = v[:, ii]
            vj = v[:, jj]
            v[:, ii] = vi * c + vj * s
            v[:, jj] = vj * c - vi * s
        if max_sine < JACOBI_SINE_TOL:
            break
    sigma = np.linalg.norm(work, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    work = work[:, order]
    v = v[:, order]
    u = np.zeros((n, d))
    # Columns with (near-)zero norm carry no reliable direction; replace them
    # with vectors orthogonal to the columns already placed.
    null_cut = sigma[0] * 1e-9 if d > 0 else 0.0
    for k in range(d):
        if sigma[k] > null_cut:
            u[:, k] = work[:, k] / sigma[k]
        else:
            u[:, k] = _fill_null_column(u, k, n)
    return u, sigma, v


def _fill_null_column(u: np.ndarray, k: int, n: int) -> np.ndarray:
    for basis in range(n):
        cand = np.zeros(n)
        cand[basis] = 1.0
        if k > 0:
            cand -= u[:, :k] @ (u[:, :k].T @ cand)
        norm = np.linalg.norm(cand)
        if norm > 1e-8:
            return cand / norm
    raise RuntimeError("could not complete orthonormal basis")


def topk_indices(v: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest values; ties broken by lower index first."""
    v = np.asarray(v)
    if v.ndim != 1:
        raise ValueError("topk_indices expects a 1-D vector")
    if k < 0 or k > v.size:
        raise ValueError(f"k={k} out of range for vector of length {v.size}")
    order = np.argsort(-v, kind="stable")
    return order[:k]


def col_l2_norms(m: np.ndarray) -> np.ndarray:
    """Per-column Euclidean norms."""
    m = np.asarray(m, dtype=FLOAT)
    if m.ndim != 2:
        raise ValueError("col_l2_norms expects a 2-D matrix")
    return np.linalg.norm(m.astype(np.float64), axis=0).astype(FLOAT)
