"""Normalized 3-way gated 2D linear recurrence (the GSPN line scan).

Every direction is reduced to one canonical kernel that scans the rows of
a ``(B, C, H, W)`` array top to bottom, vectorized over batch, channels,
columns and groups:

    h[i] = w1[i] * h[i-1] shifted right + w2[i] * h[i-1] + w3[i] * h[i-1] shifted left
           + lam[i] * x[i]

with ``h[first line of a group] = lam * x``.  Gates live on the target pixel:
``g1`` weights the previous-line neighbor at the lower position index (the
top-left pixel for both top-to-bottom and left-to-right scans), ``g2`` the
aligned neighbor and ``g3`` the neighbor at the higher index.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, fields

import numpy as np
from scipy.special import log_expit

from . import tensor as T
from ._parallel import map_ordered, worker_count


class Direction(enum.Enum):
    LEFT_TO_RIGHT = "left-to-right"
    RIGHT_TO_LEFT = "right-to-left"
    TOP_TO_BOTTOM = "top-to-bottom"
    BOTTOM_TO_TOP = "bottom-to-top"

    @property
    def vertical(self) -> bool:
        """Lines are rows and propagation runs along H."""
        return self in (Direction.TOP_TO_BOTTOM, Direction.BOTTOM_TO_TOP)

    @property
    def reversed(self) -> bool:
        return self in (Direction.RIGHT_TO_LEFT, Direction.BOTTOM_TO_TOP)

    @property
    def scan_axis(self) -> int:
        return 2 if self.vertical else 3

    @property
    def position_axis(self) -> int:
        return 3 if self.vertical else 2


DIRECTIONS = tuple(Direction)


class ShapeError(ValueError):
    pass


@dataclass
class GateField:
    g1: np.ndarray
    g2: np.ndarray
    g3: np.ndarray
    lam: np.ndarray
    u: np.ndarray

    @property
    def shape(self):
        return self.g1.shape

    def check(self, shape) -> None:
        for f in fields(self):
            arr = getattr(self, f.name)
            if arr.shape != tuple(shape):
                raise ShapeError(f"gate tensor {f.name} has shape {arr.shape}, expected {tuple(shape)}")

    def map(self, fn) -> "GateField":
        return GateField(*(fn(getattr(self, f.name)) for f in fields(self)))


@dataclass(frozen=True)
class ScanConfig:
    direction: Direction = Direction.TOP_TO_BOTTOM
    groups: int = 1
    # lambda_0 = I on the first line of each group instead of a learned scale
    identity_first: bool = False


@dataclass
class ScanOutput:
    h: np.ndarray
    y: np.ndarray


@dataclass
class ScanGradients:
    dx: np.ndarray
    dlam: np.ndarray
    dg1: np.ndarray
    dg2: np.ndarray
    dg3: np.ndarray
    du: np.ndarray


def group_bounds(length: int, groups: int) -> list[tuple[int, int]]:
    """Contiguous ``(start, stop)`` groups along a scan axis; the last absorbs the remainder."""
    if groups < 1:
        raise ValueError("group count must be >= 1")
    if length == 0:
        return []
    if groups > length:
        raise ValueError(f"cannot split {length} lines into {groups} groups")
    base = length // groups
    bounds = [(k * base, (k + 1) * base) for k in range(groups - 1)]
    bounds.append(((groups - 1) * base, length))
    return bounds


def random_gates(shape, rng: np.random.Generator, scale: float = 1.0) -> GateField:
    """Gate field with normal pre-sigmoid gates and positive ``lam``/``u``, for tests and demos."""
    g = [scale * rng.standard_normal(shape) for _ in range(3)]
    lam = rng.uniform(0.5, 1.5, shape)
    u = rng.uniform(0.5, 1.5, shape)
    return GateField(*g, lam, u)


# -- normalization -----------------------------------------------------------

def sigmoid(a):
    """``1 / (1 + exp(-a))``; overflow of ``exp`` saturates cleanly to 0."""
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-a))


def _presence(n: int, ndim: int, axis: int, dtype=np.float64):
    """Masks of present up/down neighbors along ``axis`` (length ``n``)."""
    shape = [1] * ndim
    shape[axis] = n
    up = np.ones(n, dtype=dtype)
    down = np.ones(n, dtype=dtype)
    if n:
        up[0] = 0.0
        down[-1] = 0.0
    return up.reshape(shape), down.reshape(shape)


def _weights(g1, g2, g3, axis):
    """Normalized weights plus the presence masks.

    Plain sigmoids everywhere; pixels whose sigmoid sum underflows are redone
    in log space so saturated gates never produce 0/0.
    """
    up, down = _presence(g1.shape[axis], g1.ndim, axis, g1.dtype)
    s1 = sigmoid(g1) * up
    s2 = sigmoid(g2)
    s3 = sigmoid(g3) * down
    total = s1 + s2 + s3
    tiny = total < np.finfo(total.dtype).tiny / np.finfo(total.dtype).eps
    any_tiny = bool(tiny.any())
    inv = 1.0 / (np.where(tiny, 1, total) if any_tiny else total)
    w1, w2, w3 = s1 * inv, s2 * inv, s3 * inv
    if any_tiny:
        upb, downb = np.broadcast_to(up, g1.shape), np.broadcast_to(down, g1.shape)
        with np.errstate(divide="ignore"):
            l1 = log_expit(g1[tiny]) + np.log(upb[tiny])
            l3 = log_expit(g3[tiny]) + np.log(downb[tiny])
        l2 = log_expit(g2[tiny])
        top = np.maximum(np.maximum(l1, l2), l3)
        e1, e2, e3 = np.exp(l1 - top), np.exp(l2 - top), np.exp(l3 - top)
        t = e1 + e2 + e3
        w1[tiny], w2[tiny], w3[tiny] = e1 / t, e2 / t, e3 / t
    return w1, w2, w3, up, down


def normalize_gates(g1, g2, g3, direction: Direction = Direction.TOP_TO_BOTTOM):
    """Sigmoid then normalize the present neighbors of each target pixel to sum 1.

    Neighbors are taken along the line's position axis (W for vertical scans,
    H for horizontal ones); absent neighbors at the line ends get weight 0.
    """
    if not (g1.shape == g2.shape == g3.shape):
        raise ShapeError("gate tensors must share dims")
    w1, w2, w3, _, _ = _weights(g1, g2, g3, direction.position_axis)
    return w1, w2, w3


def _gate_grads(g1, g2, g3, dw1, dw2, dw3, axis):
    # d w_k / d g_k' = w_k (delta_kk' - w_k') (1 - sigmoid(g_k'))
    w1, w2, w3, up, down = _weights(g1, g2, g3, axis)
    mean = w1 * dw1 + w2 * dw2 + w3 * dw3
    dg1 = w1 * (dw1 - mean) * sigmoid(-g1) * up
    dg2 = w2 * (dw2 - mean) * sigmoid(-g2)
    dg3 = w3 * (dw3 - mean) * sigmoid(-g3) * down
    return dg1, dg2, dg3


# -- canonical frame ---------------------------------------------------------

def _reorient(t: np.ndarray, direction: Direction, inverse: bool) -> np.ndarray:
    # a composition of transpose_hw / flip_w as a strided view, no copy
    if direction is Direction.TOP_TO_BOTTOM:
        v = t
    elif direction is Direction.BOTTOM_TO_TOP:
        v = t[:, :, ::-1, :]
    elif direction is Direction.LEFT_TO_RIGHT:
        v = t.transpose(0, 1, 3, 2)
    elif inverse:
        v = t.transpose(0, 1, 3, 2)[..., ::-1]
    else:
        v = t[..., ::-1].transpose(0, 1, 3, 2)
    return v


def to_canonical(t: np.ndarray, direction: Direction) -> np.ndarray:
    """Reorient ``t`` so that ``direction`` becomes a top-to-bottom row scan.

    Left-to-right is ``transpose_hw``; right-to-left is ``transpose_hw(flip_w(t))``;
    bottom-to-top flips H, i.e. ``transpose_hw(flip_w(transpose_hw(t)))``.
    """
    return np.ascontiguousarray(_reorient(t, direction, inverse=False))


def from_canonical(t: np.ndarray, direction: Direction) -> np.ndarray:
    return np.ascontiguousarray(_reorient(t, direction, inverse=True))


def _canonical_groups(length: int, cfg: ScanConfig):
    bounds = group_bounds(length, cfg.groups)
    if cfg.direction.reversed:
        bounds = [(length - stop, length - start) for start, stop in reversed(bounds)]
    starts = np.array([b[0] for b in bounds], dtype=np.intp)
    lengths = np.array([b[1] - b[0] for b in bounds], dtype=np.intp)
    return starts, lengths


def _to_steps(a, starts, lengths):
    """Canonical ``(B, C, L, W)`` -> ``(n, B * C * G * (W + 1))``.

    Row ``t`` holds step ``t`` of every line side by side, each line followed
    by one zero pad so that neighbor shifts on the flat row never reach
    another line.  Shorter groups are zero padded at the end; a padded line
    has zero weights and input, so it neither changes nor receives anything.
    """
    B, C, _, W = a.shape
    n, G = int(lengths.max()), len(starts)
    out = np.zeros((n, B, C, G, W + 1), dtype=a.dtype)
    for g, (s, k) in enumerate(zip(starts, lengths)):
        out[:k, :, :, g, :W] = a[:, :, s:s + k].transpose(2, 0, 1, 3)
    return out.reshape(n, -1)


def _from_steps(steps, starts, lengths, dest) -> None:
    B, C, _, W = dest.shape
    steps = steps.reshape(steps.shape[0], B, C, len(starts), W + 1)
    for g, (s, k) in enumerate(zip(starts, lengths)):
        dest[:, :, s:s + k] = steps[:k, :, :, g, :W].transpose(1, 2, 0, 3)


def _forward_kernel(x, lam, w1, w2, w3, pads, identity_first):
    h = np.empty_like(x)
    lx = lam * x
    h[0] = x[0] if identity_first else lx[0]
    for t in range(1, x.shape[0]):
        p = h[t - 1]
        cur = w2[t] * p
        cur += lx[t]
        cur[1:] += w1[t, 1:] * p[:-1]
        cur[:-1] += w3[t, :-1] * p[1:]
        cur[pads] = 0.0
        h[t] = cur
    return h


def _backward_kernel(w1, w2, w3, h, dh_direct, pads):
    """Reverse sweep; returns total dL/dh plus the gradients of the normalized weights."""
    dh = np.empty_like(h)
    dw1 = np.zeros_like(h)
    dw2 = np.zeros_like(h)
    dw3 = np.zeros_like(h)
    carry = np.zeros_like(h[0])
    for t in range(h.shape[0] - 1, -1, -1):
        cur = dh_direct[t] + carry
        dh[t] = cur
        if t == 0:
            break
        hp = h[t - 1]
        dw2[t] = cur * hp
        dw1[t, 1:] = cur[1:] * hp[:-1]
        dw3[t, :-1] = cur[:-1] * hp[1:]
        carry = w2[t] * cur
        carry[:-1] += w1[t, 1:] * cur[1:]
        carry[1:] += w3[t, :-1] * cur[:-1]
        carry[pads] = 0.0
    return dh, dw1, dw2, dw3


def _channel_chunks(n_channels: int):
    k = min(worker_count(), max(n_channels, 1))
    edges = np.linspace(0, n_channels, k + 1).astype(int)
    return [slice(a, b) for a, b in zip(edges[:-1], edges[1:]) if b > a] or [slice(0, n_channels)]


def _prepare(x, gates: GateField, cfg: ScanConfig):
    x = T.as_tensor4(x)
    gates.check(x.shape)
    gates = gates.map(lambda a: np.asarray(a, dtype=x.dtype))
    if x.shape[cfg.direction.scan_axis] == 0:
        starts = lengths = np.zeros(0, dtype=np.intp)
    else:
        starts, lengths = _canonical_groups(x.shape[cfg.direction.scan_axis], cfg)
    return x, gates, starts, lengths


def _run_chunks(inputs, n_out, kernel, starts, lengths, direction, shape, dtype):
    """Apply ``kernel`` per channel chunk in the step layout; returns ``n_out`` arrays of ``shape``."""
    outs = [np.zeros(shape, dtype=dtype) for _ in range(n_out)]
    if not len(lengths) or 0 in shape:
        return outs
    views = [_reorient(o, direction, inverse=False) for o in outs]

    W = views[0].shape[3]
    pads = slice(W, None, W + 1)

    def run(sl):
        res = kernel(*(_to_steps(a[:, sl], starts, lengths) for a in inputs), pads)
        for r, v in zip(res if n_out > 1 else (res,), views):
            _from_steps(r, starts, lengths, v[:, sl])

    map_ordered(run, _channel_chunks(shape[1]))
    return outs


def scan_forward(x, gates: GateField, cfg: ScanConfig = ScanConfig()) -> ScanOutput:
    x, gates, starts, lengths = _prepare(x, gates, cfg)
    d = cfg.direction
    w1, w2, w3 = normalize_gates(gates.g1, gates.g2, gates.g3, d)
    canon = [_reorient(a, d, inverse=False) for a in (x, gates.lam, w1, w2, w3)]

    def kernel(*a):
        return _forward_kernel(*a, cfg.identity_first)

    (h,) = _run_chunks(canon, 1, kernel, starts, lengths, d, x.shape, x.dtype)
    return ScanOutput(h=h, y=gates.u * h)


def scan_backward(x, gates: GateField, cfg: ScanConfig, h, dy) -> ScanGradients:
    """Exact gradients of ``L`` given ``dL/dy = dy`` and the saved forward ``h``."""
    x, gates, starts, lengths = _prepare(x, gates, cfg)
    h = np.asarray(h, dtype=x.dtype)
    dy = np.asarray(dy, dtype=x.dtype)
    if h.shape != x.shape or dy.shape != x.shape:
        raise ShapeError(f"h {h.shape} and dy {dy.shape} must match x {x.shape}")
    d = cfg.direction
    w1, w2, w3 = normalize_gates(gates.g1, gates.g2, gates.g3, d)
    canon = [_reorient(a, d, inverse=False) for a in (w1, w2, w3, h, gates.u * dy)]
    dh, dw1, dw2, dw3 = _run_chunks(canon, 4, _backward_kernel, starts, lengths, d, x.shape, x.dtype)

    if cfg.identity_first and x.size:
        first = np.zeros(x.shape[d.scan_axis], dtype=bool)
        for start, stop in group_bounds(x.shape[d.scan_axis], cfg.groups):
            first[stop - 1 if d.reversed else start] = True
        shape = [1, 1, 1, 1]
        shape[d.scan_axis] = -1
        first = first.reshape(shape)
        dx = np.where(first, dh, gates.lam * dh)
        dlam = np.where(first, 0.0, x * dh)
    else:
        dx = gates.lam * dh
        dlam = x * dh
    dg1, dg2, dg3 = _gate_grads(gates.g1, gates.g2, gates.g3, dw1, dw2, dw3, d.position_axis)
    return ScanGradients(dx=dx, dlam=dlam, dg1=dg1, dg2=dg2, dg3=dg3, du=dy * h)


def scan_all_directions(x, gates, groups: int = 1, identity_first: bool = False) -> list[ScanOutput]:
    """One scan per :data:`DIRECTIONS` entry; ``gates`` is a sequence of four GateFields."""
    gates = list(gates)
    if len(gates) != 4:
        raise ValueError("expected one GateField per direction")
    return [scan_forward(x, g, ScanConfig(d, groups, identity_first))
            for d, g in zip(DIRECTIONS, gates)]
