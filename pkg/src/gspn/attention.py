"""Single-head reference attention used as baselines and for the linear-attention reduction."""
import numpy as np


def _check(q, k, v):
    q, k, v = (np.asarray(a) for a in (q, k, v))
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ValueError("Q, K, V must be (N, d) arrays")
    if not (q.shape == k.shape and k.shape[0] == v.shape[0]):
        raise ValueError(f"shape mismatch: Q {q.shape}, K {k.shape}, V {v.shape}")
    return q, k, v


def softmax_attention(q, k, v, block: int | None = None):
    """``softmax(Q K^T / sqrt(d)) V`` with max subtraction.

    ``block`` processes that many query rows at a time, so peak memory is
    ``block * N`` scores instead of ``N * N``; the arithmetic is unchanged.
    """
    q, k, v = _check(q, k, v)
    n, d = q.shape
    scale = 1.0 / np.sqrt(d) if d else 1.0
    block = block or max(n, 1)
    out = np.empty((n, v.shape[1]), dtype=np.result_type(q, v))
    for s in range(0, n, block):
        scores = (q[s:s + block] @ k.T) * scale
        scores -= scores.max(axis=1, keepdims=True)
        np.exp(scores, out=scores)
        out[s:s + block] = (scores @ v) / scores.sum(axis=1, keepdims=True)
    return out


def softmax_weights(q, k):
    """The full attention matrix (rows sum to 1); for tests on small ``N``."""
    q = np.asarray(q)
    k = np.asarray(k)
    scores = q @ k.T / np.sqrt(q.shape[1])
    scores -= scores.max(axis=1, keepdims=True)
    e = np.exp(scores)
    return e / e.sum(axis=1, keepdims=True)


def linear_attention_causal(q, k, v):
    """Non-normalized causal linear attention ``y_i = Q_i (sum_{j<=i} K_j^T V_j)``.

    The running ``d x d_v`` state is a prefix sum of outer products, O(N d^2).
    """
    q, k, v = _check(q, k, v)
    if q.shape[0] == 0:
        return np.zeros((0, v.shape[1]), dtype=np.result_type(q, v))
    if q.shape[1] == 1 and v.shape[1] == 1:
        return q * np.cumsum(k * v, axis=0)
    state = np.cumsum(k[:, :, None] * v[:, None, :], axis=0)
    return np.einsum("nd,nde->ne", q, state)
