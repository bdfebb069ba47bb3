"""The GSPN module: pointwise parameter generation, 4-direction scan, learnable merge.

Dataflow for an input ``x`` of shape ``(B, C, H, W)``::

    z      = reduce(x)                      C   -> C_r
    u, lam = proj_u(z), proj_lam(z)         C_r -> C
    gates  = proj_w(z)                      C_r -> 4 directions x 3 gates x C
    y_d    = u * scan_d(x; gates_d, lam)    per direction
    out    = merge(concat(y_1..y_4))        4C  -> C

All projections are 1x1 (per-pixel channel mixing); there is no positional term.
"""
from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .propagation import DIRECTIONS, GateField, ScanConfig, ShapeError, scan_backward, scan_forward

PROJECTIONS = ("reduce", "proj_u", "proj_lam", "proj_w", "merge")
# u multiplies each direction's hidden state before the merge, never after
MODULATE_BEFORE_MERGE = True


def reduced_channels(channels: int) -> int:
    return max(channels // 4, 1)


@dataclass
class GspnBlockParams:
    reduce_w: np.ndarray
    reduce_b: np.ndarray
    u_w: np.ndarray
    u_b: np.ndarray
    lam_w: np.ndarray
    lam_b: np.ndarray
    gate_w: np.ndarray
    gate_b: np.ndarray
    merge_w: np.ndarray
    merge_b: np.ndarray

    @property
    def channels(self) -> int:
        return self.reduce_w.shape[1]

    def items(self):
        return [(f.name, getattr(self, f.name)) for f in dataclasses.fields(self)]

    def map(self, fn) -> "GspnBlockParams":
        return GspnBlockParams(**{k: fn(v) for k, v in self.items()})

    def zeros_like(self) -> "GspnBlockParams":
        return self.map(np.zeros_like)

    def copy(self) -> "GspnBlockParams":
        return self.map(np.array)


def init_params(channels: int, rng: np.random.Generator, reduced: int | None = None) -> GspnBlockParams:
    """Fan-in uniform weights in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``, zero biases."""
    cr = reduced or reduced_channels(channels)

    def proj(n_out, n_in):
        bound = 1.0 / math.sqrt(n_in)
        return rng.uniform(-bound, bound, (n_out, n_in)), np.zeros(n_out)

    rw, rb = proj(cr, channels)
    uw, ub = proj(channels, cr)
    lw, lb = proj(channels, cr)
    gw, gb = proj(12 * channels, cr)
    mw, mb = proj(channels, 4 * channels)
    return GspnBlockParams(rw, rb, uw, ub, lw, lb, gw, gb, mw, mb)


def pointwise(w: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.einsum("oi,bihw->bohw", w, x) + b[None, :, None, None]


def _pointwise_grads(w, x, dout):
    dw = np.einsum("bohw,bihw->oi", dout, x)
    db = dout.sum(axis=(0, 2, 3))
    dx = np.einsum("oi,bohw->bihw", w, dout)
    return dw, db, dx


@dataclass
class BlockCache:
    x: np.ndarray
    z: np.ndarray
    u: np.ndarray
    lam: np.ndarray
    gates: list
    hs: list
    ys: np.ndarray
    groups: int


def direction_gates(gate_maps: np.ndarray, lam: np.ndarray, u: np.ndarray) -> list[GateField]:
    """Split the ``12C``-channel gate projection into one GateField per direction."""
    B, _, H, W = gate_maps.shape
    C = lam.shape[1]
    g = gate_maps.reshape(B, 4, 3, C, H, W)
    return [GateField(g[:, d, 0], g[:, d, 1], g[:, d, 2], lam, u) for d in range(4)]


def _project(x, params: GspnBlockParams):
    x = T.as_tensor4(x)
    if x.shape[1] != params.channels:
        raise ShapeError(f"input has {x.shape[1]} channels, block expects {params.channels}")
    z = pointwise(params.reduce_w, params.reduce_b, x)
    u = pointwise(params.u_w, params.u_b, z)
    lam = pointwise(params.lam_w, params.lam_b, z)
    return x, z, u, lam, direction_gates(pointwise(params.gate_w, params.gate_b, z), lam, u)


def block_gates(x, params: GspnBlockParams) -> list[GateField]:
    """The input-dependent gate fields the block feeds to each directional scan."""
    return _project(x, params)[4]


def merge_weights(params: GspnBlockParams, channel: int) -> np.ndarray:
    """Weights of the four directional outputs of ``channel`` in that channel's merged output."""
    C = params.channels
    return np.array([params.merge_w[channel, d * C + channel] for d in range(4)])


def block_forward(x, params: GspnBlockParams, groups: int = 1, return_cache: bool = False):
    x, z, u, lam, gates = _project(x, params)
    hs, ys = [], []
    for d, gf in zip(DIRECTIONS, gates):
        out = scan_forward(x, gf, ScanConfig(d, groups))
        hs.append(out.h)
        ys.append(out.y)
    ycat = np.concatenate(ys, axis=1)
    result = pointwise(params.merge_w, params.merge_b, ycat)
    if return_cache:
        return result, BlockCache(x, z, u, lam, gates, hs, ycat, groups)
    return result


def block_backward(cache: BlockCache, params: GspnBlockParams, dout):
    """Gradients of ``L`` w.r.t. the block input and every parameter, given ``dL/dout``."""
    dout = np.asarray(dout, dtype=cache.x.dtype)
    if dout.shape != cache.x.shape:
        raise ShapeError(f"dout {dout.shape} does not match block output {cache.x.shape}")
    C = params.channels
    grads = params.zeros_like()
    grads.merge_w, grads.merge_b, dycat = _pointwise_grads(params.merge_w, cache.ys, dout)

    dx = np.zeros_like(cache.x)
    du = np.zeros_like(cache.u)
    dlam = np.zeros_like(cache.lam)
    dgates = []
    for k, (d, gf) in enumerate(zip(DIRECTIONS, cache.gates)):
        sg = scan_backward(cache.x, gf, ScanConfig(d, cache.groups), cache.hs[k],
                           dycat[:, k * C:(k + 1) * C])
        dx += sg.dx
        du += sg.du
        dlam += sg.dlam
        dgates.append(np.stack([sg.dg1, sg.dg2, sg.dg3], axis=1))
    B, _, H, W = cache.x.shape
    dgate_maps = np.stack(dgates, axis=1).reshape(B, 12 * C, H, W)

    grads.u_w, grads.u_b, dz = _pointwise_grads(params.u_w, cache.z, du)
    grads.lam_w, grads.lam_b, dz_lam = _pointwise_grads(params.lam_w, cache.z, dlam)
    grads.gate_w, grads.gate_b, dz_gate = _pointwise_grads(params.gate_w, cache.z, dgate_maps)
    dz = dz + dz_lam + dz_gate
    grads.reduce_w, grads.reduce_b, dx_reduce = _pointwise_grads(params.reduce_w, cache.x, dz)
    return dx + dx_reduce, grads


# -- checkpoints -------------------------------------------------------------

_PROJ_FIELDS = {
    "reduce": ("reduce_w", "reduce_b"),
    "proj_u": ("u_w", "u_b"),
    "proj_lam": ("lam_w", "lam_b"),
    "proj_w": ("gate_w", "gate_b"),
    "merge": ("merge_w", "merge_b"),
}
MANIFEST = "manifest.txt"


def save_params(params: GspnBlockParams, directory) -> None:
    """One GSPN-T file per projection plus ``manifest.txt`` (name, dims, dtype per line).

    Each projection is stored as its affine matrix ``[W | b]`` with shape
    ``(out, in + 1, 1, 1)``, the layout of a 1x1 convolution kernel.
    """
    os.makedirs(directory, exist_ok=True)
    lines = []
    for name, (wf, bf) in _PROJ_FIELDS.items():
        w, b = getattr(params, wf), getattr(params, bf)
        packed = np.concatenate([w, b[:, None]], axis=1)[:, :, None, None]
        packed = np.ascontiguousarray(packed)
        T.save_file(packed, os.path.join(directory, f"{name}.gspnt"))
        dtype = T.DType.of(packed).name.lower()
        lines.append(f"{name} {','.join(str(s) for s in packed.shape)} {dtype}")
    with open(os.path.join(directory, MANIFEST), "w", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def load_params(directory) -> GspnBlockParams:
    values = {}
    with open(os.path.join(directory, MANIFEST)) as f:
        entries = [line.split() for line in f if line.strip()]
    for name, dims, dtype in entries:
        if name not in _PROJ_FIELDS:
            raise ValueError(f"unknown projection {name!r} in manifest")
        packed = T.load_file(os.path.join(directory, f"{name}.gspnt"))
        expected = tuple(int(s) for s in dims.split(","))
        if packed.shape != expected or T.DType.of(packed).name.lower() != dtype:
            raise ValueError(f"{name}: file holds {packed.shape} {packed.dtype}, manifest says {dims} {dtype}")
        wf, bf = _PROJ_FIELDS[name]
        values[wf] = np.array(packed[:, :-1, 0, 0])
        values[bf] = np.array(packed[:, -1, 0, 0])
    missing = set(f.name for f in dataclasses.fields(GspnBlockParams)) - set(values)
    if missing:
        raise ValueError(f"manifest is missing {sorted(missing)}")
    return GspnBlockParams(**values)


# -- toy training ------------------------------------------------------------

TOY_TASKS = ("identity", "fixed-blur")
# two-line groups on the 8x8 toy grid
TOY_GROUPS = 4
TOY_LR = 0.7
# the step size ramps linearly up to lr over this many updates
TOY_WARMUP = 150


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, trace: list[float]):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step
        self.trace = trace


def box_blur3(x: np.ndarray) -> np.ndarray:
    """3x3 mean filter with zero padding, applied per channel."""
    p = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    H, W = x.shape[2:]
    out = np.zeros_like(x)
    for dh in range(3):
        for dw in range(3):
            out += p[:, :, dh:dh + H, dw:dw + W]
    return out / 9.0


@dataclass
class ToyTask:
    kind: str = "identity"
    seed: int = 0
    batch: int = 8
    channels: int = 4
    height: int = 8
    width: int = 8

    def __post_init__(self):
        if self.kind not in TOY_TASKS:
            raise ValueError(f"unknown toy task {self.kind!r}; choose from {TOY_TASKS}")

    def inputs(self) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 1])
        return rng.standard_normal((self.batch, self.channels, self.height, self.width))

    def target(self, x: np.ndarray) -> np.ndarray:
        return x.copy() if self.kind == "identity" else box_blur3(x)


def mse(pred, target) -> float:
    return float(np.mean((pred - target) ** 2))


def step_size(lr: float, step: int, warmup: int = TOY_WARMUP) -> float:
    return lr * min(1.0, (step + 1) / warmup) if warmup > 0 else lr


def train_toy(task: ToyTask, steps: int, lr: float = TOY_LR, seed: int = 0, groups: int = TOY_GROUPS,
              warmup: int = TOY_WARMUP):
    """Full-batch gradient descent on MSE; returns ``(loss_trace, params)``.

    ``loss_trace[k]`` is the loss after ``k`` updates, so it has ``steps + 1`` entries.
    Update ``k`` moves along ``-grad`` by ``step_size(lr, k, warmup)``; there is no
    momentum or per-parameter scaling.
    """
    x = task.inputs()
    target = task.target(x)
    params = init_params(task.channels, np.random.default_rng([seed, 2]))
    trace = []
    for step in range(steps + 1):
        # a blow-up is reported as TrainingDiverged, not as float warnings
        with np.errstate(over="ignore", invalid="ignore"):
            out, cache = block_forward(x, params, groups, return_cache=True)
            loss = mse(out, target)
        trace.append(loss)
        if not math.isfinite(loss):
            raise TrainingDiverged(step, trace)
        if step == steps:
            break
        _, grads = block_backward(cache, params, 2.0 * (out - target) / out.size)
        eta = step_size(lr, step, warmup)
        for name, g in grads.items():
            getattr(params, name)[...] -= eta * g
    return trace, params
