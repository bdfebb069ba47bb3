import os

import numpy as np
import pytest

from gspn import tensor as T
from gspn._parallel import set_threads
from gspn.block import (MODULATE_BEFORE_MERGE, GspnBlockParams, ToyTask, TrainingDiverged, block_backward,
                        block_forward, block_gates, box_blur3, init_params, load_params, merge_weights,
                        reduced_channels, save_params, step_size, train_toy)
from gspn.propagation import DIRECTIONS, Direction, ScanConfig, ShapeError, scan_forward
from gspn.verify import rel_error


def fd(loss, arr, eps=1e-6):
    grad = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + eps
        up = loss()
        arr[idx] = old - eps
        grad[idx] = (up - loss()) / (2 * eps)
        arr[idx] = old
    return grad


def selector(params, k):
    """Merge that passes direction ``k`` through with an identity channel map."""
    C = params.channels
    params.merge_w[...] = 0.0
    params.merge_w[:, k * C:(k + 1) * C] = np.eye(C)
    params.merge_b[...] = 0.0
    return params


def test_reduced_channels():
    assert [reduced_channels(c) for c in (1, 3, 4, 8, 10)] == [1, 1, 1, 2, 2]


def test_init_ranges_and_shapes():
    p = init_params(8, np.random.default_rng(0))
    assert p.reduce_w.shape == (2, 8) and p.gate_w.shape == (96, 2) and p.merge_w.shape == (8, 32)
    assert np.abs(p.reduce_w).max() <= 1 / np.sqrt(8)
    assert np.abs(p.merge_w).max() <= 1 / np.sqrt(32)
    for name, v in p.items():
        if name.endswith("_b"):
            assert not v.any()


def test_zero_params_give_zero_output():
    x = np.random.default_rng(1).standard_normal((2, 4, 5, 5))
    p = init_params(4, np.random.default_rng(2)).zeros_like()
    assert not block_forward(x, p).any()


def test_merge_selector_returns_direction_output():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 4, 5, 6))
    p = init_params(4, rng)
    gates = block_gates(x, p)
    for k, d in enumerate(DIRECTIONS):
        out = block_forward(x, selector(p.copy(), k), groups=2)
        assert np.allclose(out, scan_forward(x, gates[k], ScanConfig(d, 2)).y, rtol=0, atol=1e-13)


def test_translation_window_top_to_bottom():
    # a horizontal shift moves the output with it wherever the scan cone avoids both edges
    rng = np.random.default_rng(4)
    H, W, s = 4, 14, 3
    x = rng.standard_normal((1, 4, H, W))
    p = selector(init_params(4, rng), DIRECTIONS.index(Direction.TOP_TO_BOTTOM))
    out = block_forward(x, p)
    shifted = block_forward(np.roll(x, s, axis=3), p)
    checked = 0
    for r in range(H):
        for w in range(W):
            if w - r >= 1 and w + r <= W - 2 - s:
                assert np.allclose(shifted[..., r, w + s], out[..., r, w], rtol=0, atol=1e-13)
                checked += 1
    assert checked > 10


def test_zero_input_gives_merge_bias_everywhere():
    # no positional term: with nothing to propagate the output is the same at every pixel
    rng = np.random.default_rng(5)
    p = init_params(4, rng)
    p = p.map(lambda a: a + rng.uniform(-1, 1, a.shape))
    out = block_forward(np.zeros((1, 4, 6, 7)), p)
    assert np.array_equal(out, np.broadcast_to(p.merge_b[None, :, None, None], out.shape))


def test_channel_mismatch():
    p = init_params(4, np.random.default_rng(6))
    with pytest.raises(ShapeError):
        block_forward(np.zeros((1, 3, 4, 4)), p)


def test_zero_dout_gives_zero_gradients():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((1, 4, 4, 4))
    p = init_params(4, rng)
    _, cache = block_forward(x, p, return_cache=True)
    dx, grads = block_backward(cache, p, np.zeros_like(x))
    assert not dx.any()
    for _, g in grads.items():
        assert not g.any()


def test_block_gradients_match_finite_differences():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((1, 4, 6, 6))
    p = init_params(4, rng, reduced=2)
    p = p.map(lambda a: a + 0.3 * rng.standard_normal(a.shape))
    dout = rng.standard_normal(x.shape)
    for groups in (1, 2):
        _, cache = block_forward(x, p, groups, return_cache=True)
        dx, grads = block_backward(cache, p, dout)

        def loss():
            return float(np.sum(block_forward(x, p, groups) * dout))

        assert rel_error(dx, fd(loss, x)) < 1e-5
        for name, arr in p.items():
            assert rel_error(getattr(grads, name), fd(loss, arr)) < 1e-5, (groups, name)


def test_merge_gradient_is_correlation_with_directions():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((2, 4, 4, 5))
    p = init_params(4, rng)
    dout = rng.standard_normal(x.shape)
    _, cache = block_forward(x, p, return_cache=True)
    _, grads = block_backward(cache, p, dout)
    assert np.allclose(grads.merge_w, np.einsum("bohw,bihw->oi", dout, cache.ys), atol=1e-12)
    assert np.allclose(grads.merge_b, dout.sum(axis=(0, 2, 3)), atol=1e-12)
    assert MODULATE_BEFORE_MERGE


def test_merge_weights_helper():
    p = init_params(4, np.random.default_rng(10))
    assert merge_weights(p, 2).tolist() == [p.merge_w[2, d * 4 + 2] for d in range(4)]


def test_checkpoint_roundtrip(tmp_path):
    p = init_params(8, np.random.default_rng(11))
    p = p.map(lambda a: a + 0.1)
    save_params(p, tmp_path)
    back = load_params(tmp_path)
    for name, v in p.items():
        assert np.array_equal(getattr(back, name), v)
    manifest = (tmp_path / "manifest.txt").read_text().splitlines()
    assert manifest[0] == "reduce 2,9,1,1 f64"
    assert manifest[-1] == "merge 8,33,1,1 f64"
    assert T.load_file(tmp_path / "proj_w.gspnt").shape == (96, 3, 1, 1)


def test_checkpoint_manifest_mismatch(tmp_path):
    save_params(init_params(4, np.random.default_rng(12)), tmp_path)
    path = tmp_path / "manifest.txt"
    path.write_text(path.read_text().replace("merge 4,17,1,1", "merge 4,18,1,1"))
    with pytest.raises(ValueError):
        load_params(tmp_path)
    os.remove(tmp_path / "merge.gspnt")
    with pytest.raises(OSError):
        load_params(tmp_path)


def test_box_blur():
    x = np.zeros((1, 1, 3, 3))
    x[0, 0, 1, 1] = 9.0
    assert np.array_equal(box_blur3(x)[0, 0], np.ones((3, 3)))
    corner = box_blur3(np.ones((1, 1, 3, 3)))[0, 0, 0, 0]
    assert np.isclose(corner, 4 / 9)


def test_toy_task_validation():
    with pytest.raises(ValueError):
        ToyTask("denoise")


def test_zero_steps_trace_has_initial_loss_only():
    trace, _ = train_toy(ToyTask("identity"), 0, 0.3)
    assert len(trace) == 1 and trace[0] > 0


def test_training_is_deterministic_and_decreasing():
    a, pa = train_toy(ToyTask("identity", seed=3), 20, 0.3, seed=3)
    b, pb = train_toy(ToyTask("identity", seed=3), 20, 0.3, seed=3)
    assert a == b
    for name, v in pa.items():
        assert np.array_equal(getattr(pb, name), v)
    assert a[-1] < a[0]


def test_training_trace_ignores_thread_count():
    traces = []
    for n in (1, 3):
        set_threads(n)
        try:
            traces.append(train_toy(ToyTask("fixed-blur", seed=1), 10, 0.3, seed=1)[0])
        finally:
            set_threads(None)
    assert traces[0] == traces[1]


def test_divergence_is_reported():
    with pytest.raises(TrainingDiverged) as info:
        train_toy(ToyTask("identity"), 50, 50.0, groups=1)
    assert info.value.step == len(info.value.trace) - 1
    assert not np.isfinite(info.value.trace[-1])


def test_params_dataclass_helpers():
    p = init_params(4, np.random.default_rng(13))
    q = p.copy()
    q.merge_b += 1.0
    assert not p.merge_b.any()
    assert isinstance(p.map(np.negative), GspnBlockParams)
    assert p.channels == 4


def test_step_size_warmup():
    assert np.isclose(step_size(0.7, 0, 150), 0.7 / 150)
    assert step_size(0.7, 149, 150) == 0.7
    assert step_size(0.7, 1000, 150) == 0.7
    assert step_size(0.5, 0, 0) == 0.5


def test_default_identity_run_converges():
    trace, _ = train_toy(ToyTask("identity", seed=1), 500)
    assert trace[-1] <= 0.1 * trace[0]
