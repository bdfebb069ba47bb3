"""Brute-force dense realization of the line scan, and stochasticity checkers.

Everything here is deliberately naive: per-pixel loops for the gate
normalization, explicit matrix products for the line-to-line operators and
an ``N x N`` affinity matrix.  It shares no code path with the vectorized
scan in :mod:`gspn.propagation` beyond the direction/config types.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .propagation import DIRECTIONS, Direction, GateField, ScanConfig, group_bounds

MAX_ORACLE_PIXELS = 4096


class OracleScaleError(ValueError):
    pass


@dataclass
class TridiagonalLine:
    """Row ``r`` weights source ``r-1`` by ``sub[r]``, ``r`` by ``main[r]``, ``r+1`` by ``sup[r]``."""
    sub: np.ndarray
    main: np.ndarray
    sup: np.ndarray

    @property
    def n(self) -> int:
        return len(self.main)

    def dense(self) -> np.ndarray:
        n = self.n
        m = np.zeros((n, n))
        for r in range(n):
            if r > 0:
                m[r, r - 1] = self.sub[r]
            m[r, r] = self.main[r]
            if r < n - 1:
                m[r, r + 1] = self.sup[r]
        return m


@dataclass
class DenseAffinity:
    """Lower-triangular affinity in scan order: ``H_v = matrix @ X_v``.

    ``order[k]`` is the row-major pixel index (``h*W + w``) of scan-order slot ``k``.
    """
    matrix: np.ndarray
    order: np.ndarray
    n_lines: int
    line_len: int

    def block(self, i: int, j: int) -> np.ndarray:
        n = self.line_len
        return self.matrix[i * n:(i + 1) * n, j * n:(j + 1) * n]

    def canonical(self) -> np.ndarray:
        """The same operator with rows and columns in row-major pixel order."""
        out = np.empty_like(self.matrix)
        out[np.ix_(self.order, self.order)] = self.matrix
        return out


def _sigmoid(v: float) -> float:
    if v >= 0:
        return 1.0 / (1.0 + math.exp(-v))
    e = math.exp(v)
    return e / (1.0 + e)


def normalize_line(g1, g2, g3) -> TridiagonalLine:
    """Per-pixel sigmoid + renormalization over the neighbors that exist."""
    n = len(g2)
    sub, main, sup = np.zeros(n), np.zeros(n), np.zeros(n)
    for r in range(n):
        s = {0: _sigmoid(float(g2[r]))}
        if r > 0:
            s[-1] = _sigmoid(float(g1[r]))
        if r < n - 1:
            s[1] = _sigmoid(float(g3[r]))
        total = sum(s.values())
        main[r] = s[0] / total
        sub[r] = s.get(-1, 0.0) / total
        sup[r] = s.get(1, 0.0) / total
    return TridiagonalLine(sub, main, sup)


def build_line_matrix(w1, w2, w3) -> TridiagonalLine:
    """Wrap already-normalized weights of one line; absent end neighbors are zeroed."""
    sub = np.array(w1, dtype=np.float64, copy=True)
    main = np.array(w2, dtype=np.float64, copy=True)
    sup = np.array(w3, dtype=np.float64, copy=True)
    if len(main):
        sub[0] = 0.0
        sup[-1] = 0.0
    return TridiagonalLine(sub, main, sup)


def _line_pixels(direction: Direction, line: int, H: int, W: int):
    """(h, w) of every position along physical line ``line``."""
    if direction.vertical:
        return [(line, r) for r in range(W)]
    return [(r, line) for r in range(H)]


def _scan_lines(direction: Direction, H: int, W: int):
    length = H if direction.vertical else W
    lines = list(range(length))
    return lines[::-1] if direction.reversed else lines


def _line_gates(gates: GateField, direction, line, b, c):
    H, W = gates.shape[2:]
    pix = _line_pixels(direction, line, H, W)
    get = lambda a: np.array([a[b, c, h, w] for h, w in pix])  # noqa: E731
    return get(gates.g1), get(gates.g2), get(gates.g3), get(gates.lam)


def line_matrices(gates: GateField, direction: Direction, channel: int = 0, batch: int = 0):
    """Normalized tridiagonal operator of every line, in scan order."""
    H, W = gates.shape[2:]
    out = []
    for line in _scan_lines(direction, H, W):
        g1, g2, g3, _ = _line_gates(gates, direction, line, batch, channel)
        out.append(normalize_line(g1, g2, g3))
    return out


def expand_dense_G(gates: GateField, cfg: ScanConfig = ScanConfig(), channel: int = 0,
                   batch: int = 0) -> DenseAffinity:
    H, W = gates.shape[2:]
    if H * W > MAX_ORACLE_PIXELS:
        raise OracleScaleError(f"{H}x{W} grid exceeds the oracle limit of {MAX_ORACLE_PIXELS} pixels")
    d = cfg.direction
    lines = _scan_lines(d, H, W)
    n = W if d.vertical else H
    L = len(lines)
    N = n * L

    # group id of each scan-order line
    group_of = {}
    for k, (start, stop) in enumerate(group_bounds(L, cfg.groups) if L else []):
        for line in range(start, stop):
            group_of[line] = k
    first_in_group = set()
    for i, line in enumerate(lines):
        if i == 0 or group_of[line] != group_of[lines[i - 1]]:
            first_in_group.add(i)

    ops, lams = [], []
    for line in lines:
        g1, g2, g3, lam = _line_gates(gates, d, line, batch, channel)
        ops.append(normalize_line(g1, g2, g3).dense())
        lams.append(np.diag(lam))

    G = np.zeros((N, N))
    for i in range(L):
        for j in range(i, -1, -1):
            if j < i and (i in first_in_group or group_of[lines[j]] != group_of[lines[i]]):
                break
            lam_j = np.eye(n) if (cfg.identity_first and j in first_in_group) else lams[j]
            if j == i:
                prod = np.eye(n)
            else:
                # prod = w_i w_{i-1} ... w_{j+1}
                prod = prod @ ops[j + 1]
            G[i * n:(i + 1) * n, j * n:(j + 1) * n] = prod @ lam_j
            if j in first_in_group:
                break

    order = np.array([h * W + w for line in lines for h, w in _line_pixels(d, line, H, W)],
                     dtype=np.intp)
    return DenseAffinity(matrix=G, order=order, n_lines=L, line_len=n)


def chain_affinity(ops, lams) -> np.ndarray:
    """Single-group ``G`` from explicit line operators: block ``(i, j) = w_i ... w_{j+1} diag(lam_j)``.

    ``ops[0]`` is never used (the first line has no predecessor).
    """
    L = len(lams)
    n = len(lams[0]) if L else 0
    G = np.zeros((n * L, n * L))
    for i in range(L):
        prod = np.eye(n)
        for j in range(i, -1, -1):
            if j < i:
                prod = prod @ ops[j + 1]
            G[i * n:(i + 1) * n, j * n:(j + 1) * n] = prod @ np.diag(lams[j])
    return G


def identity_w_attention(q, k, v) -> np.ndarray:
    """Causal linear attention rebuilt from the scan with every ``w_i = I``.

    Tokens are scan lines of width 1; for each key feature ``a`` the scan runs
    with ``lam_j = K[j, a]`` over inputs ``x_j = V[j]``, and ``u_i = Q[i, a]``
    contracts the feature axis of the hidden state.
    """
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    N, d = q.shape
    eye = [np.eye(1)] * N
    y = np.zeros((N, v.shape[1]))
    for a in range(d):
        G = chain_affinity(eye, [k[j, a:a + 1] for j in range(N)])
        y += q[:, a:a + 1] * (G @ v)
    return y


def dense_scan(x, gates: GateField, cfg: ScanConfig = ScanConfig()) -> np.ndarray:
    """Hidden state ``h`` computed as ``G @ X_v`` for every batch item and channel."""
    x = np.asarray(x, dtype=np.float64)
    B, C, H, W = x.shape
    h = np.empty_like(x)
    for b in range(B):
        for c in range(C):
            aff = expand_dense_G(gates, cfg, channel=c, batch=b)
            xv = x[b, c].ravel()[aff.order]
            hv = np.empty(H * W)
            hv[aff.order] = aff.matrix @ xv
            h[b, c] = hv.reshape(H, W)
    return h


# -- stochasticity and stability ---------------------------------------------

@dataclass
class StochasticReport:
    ok: bool
    max_deviation: float
    min_entry: float
    failed_step: int | None
    product: np.ndarray | None


def check_row_stochastic_product(lines, tol: float = 1e-12) -> StochasticReport:
    """Multiply ``lines`` in scan order and check every partial product.

    Step ``k`` is ``w_k w_{k-1} ... w_0``.  Failure reports the first step whose
    product has a negative entry or a row sum off 1 by more than ``tol``.
    """
    prod = None
    worst = 0.0
    min_entry = math.inf
    for k, line in enumerate(lines):
        m = line.dense() if isinstance(line, TridiagonalLine) else np.asarray(line, dtype=np.float64)
        prod = m if prod is None else m @ prod
        dev = float(np.max(np.abs(prod.sum(axis=1) - 1.0))) if prod.size else 0.0
        low = float(prod.min()) if prod.size else 0.0
        worst = max(worst, dev)
        min_entry = min(min_entry, low)
        if dev > tol or low < 0.0:
            return StochasticReport(False, worst, min_entry, k, prod)
    return StochasticReport(True, worst, min_entry if prod is not None else 0.0, None, prod)


@dataclass
class SpectralReport:
    gershgorin_bound: float
    inf_norm: float
    spectral_radius: float | None
    sigma_max: float | None

    def eigenvalue_bound_holds(self, tol: float = 1e-10) -> bool:
        ok = self.gershgorin_bound <= 1.0 + tol
        return ok and (self.spectral_radius is None or self.spectral_radius <= 1.0 + tol)

    def singular_value_bound_holds(self, tol: float = 1e-10) -> bool:
        return self.sigma_max is None or self.sigma_max <= 1.0 + tol


def _power_iteration(apply, n: int, iters: int = 100, rtol: float = 1e-12) -> float:
    v = np.ones(n) / math.sqrt(n)
    est = 0.0
    for _ in range(iters):
        w = apply(v)
        norm = float(np.linalg.norm(w))
        if norm == 0.0:
            return 0.0
        v = w / norm
        if est and abs(norm - est) <= rtol * est:
            est = norm
            break
        est = norm
    return est


def check_spectral_stability(line, max_n: int = 64, iters: int = 100) -> SpectralReport:
    """Gershgorin bound plus power-iteration estimates of spectral radius and sigma_max.

    For a non-negative matrix the power method started from the all-ones vector
    converges to the Perron root, so ``spectral_radius`` is the eigenvalue the
    Gershgorin bound speaks about.  ``sigma_max`` comes from power iteration on
    ``W^T W``.  Both estimates are skipped (``None``) when ``n > max_n``.
    """
    m = line.dense() if isinstance(line, TridiagonalLine) else np.asarray(line, dtype=np.float64)
    n = m.shape[0]
    row_abs = np.abs(m).sum(axis=1)
    gersh = float(np.max(row_abs)) if n else 0.0
    rho = sigma = None
    if 0 < n <= max_n:
        rho = _power_iteration(lambda v: m @ v, n, iters)
        sigma = math.sqrt(_power_iteration(lambda v: m.T @ (m @ v), n, iters))
    return SpectralReport(gershgorin_bound=gersh, inf_norm=gersh, spectral_radius=rho, sigma_max=sigma)


# -- merged affinity and heatmaps --------------------------------------------

def output_affinity(gates: GateField, cfg: ScanConfig, channel: int = 0, batch: int = 0) -> np.ndarray:
    """``diag(u) G`` in row-major pixel order: maps ``x`` to the scan output ``y``."""
    G = expand_dense_G(gates, cfg, channel, batch).canonical()
    u = gates.u[batch, channel].ravel()
    return u[:, None] * G


def merged_affinity(gates, weights, channel: int = 0, batch: int = 0, groups: int = 1) -> np.ndarray:
    """Weighted sum of the four directional output affinities, row-major pixel order."""
    gates = list(gates)
    if len(gates) != 4 or len(weights) != 4:
        raise ValueError("expected four gate fields and four merge weights")
    total = None
    for d, g, m in zip(DIRECTIONS, gates, weights):
        if m == 0:
            continue
        a = m * output_affinity(g, ScanConfig(d, groups), channel, batch)
        total = a if total is None else total + a
    if total is None:
        H, W = gates[0].shape[2:]
        total = np.zeros((H * W, H * W))
    return total


def query_heatmap(affinity: np.ndarray, query, shape) -> np.ndarray:
    """Row of ``affinity`` for pixel ``query=(h, w)``, reshaped to ``(H, W)``."""
    H, W = shape
    h, w = query
    if not (0 <= h < H and 0 <= w < W):
        raise IndexError(f"query {query} outside the {H}x{W} grid")
    return affinity[h * W + w].reshape(H, W)
