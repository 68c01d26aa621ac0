import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tubekit import tensor as T
from tubekit.dsu import (
    INITIAL_OFFSETS,
    DsuConfig,
    DsuParams,
    bilinear_upsample2x,
    build_snake_paths_x,
    build_snake_paths_y,
    compress_to_scalar,
    count_params_flops,
    dsu_forward,
    dynamic_stride,
    initial_offsets,
    sample_and_aggregate,
    stride_mask,
    subpixel_centres,
    upsample,
)
from tubekit.errors import DimensionError, ParameterError, UnsupportedScaleError


def consts(tape, arrays):
    return {k: tape.constant(v) for k, v in arrays.items()}


def forward(x, arrays, cfg, **kw):
    tape = T.Tape()
    out, trace = dsu_forward(tape.constant(x), consts(tape, arrays), cfg, **kw)
    return out.value, trace


# --- config and stride head -------------------------------------------------------


@pytest.mark.parametrize(
    "kw",
    [dict(strides=(3, 5, 4)), dict(strides=(5, 3)), dict(strides=(1, 3)), dict(base_stride=4),
     dict(variant="diag"), dict(fixed_stride=11), dict(hidden=0)],
)
def test_config_validation(kw):
    with pytest.raises(ParameterError):
        DsuConfig(channels=2, **kw)


def test_compress_to_scalar_examples():
    tape = T.Tape()
    x = tape.constant(np.random.default_rng(0).standard_normal((2, 3, 4, 4)))
    assert np.all(compress_to_scalar(x, tape.constant(np.zeros((1, 3)))).value == 0)
    x1 = tape.constant(np.full((1, 1, 3, 3), 3.0))
    assert compress_to_scalar(x1, tape.constant([[1.0]])).value.tolist() == [3.0]
    x2 = np.empty((1, 2, 2, 2))
    x2[0, 0] = [[4, 6], [5, 5]]
    x2[0, 1] = [[1, 3], [2, 2]]
    assert compress_to_scalar(tape.constant(x2), tape.constant([[1.0, -1.0]])).value.item() == pytest.approx(3.0)
    with pytest.raises(DimensionError):
        compress_to_scalar(tape.constant(x2), tape.constant([[1.0]]))


def test_dynamic_stride_examples():
    cfg = DsuConfig(channels=2, hidden=3)
    tape = T.Tape()
    x = tape.constant(np.random.default_rng(1).standard_normal((2, 2, 4, 4)))
    p = consts(tape, {"W_c": np.ones((1, 2)), "W1": np.zeros((3, 1)), "W2": np.ones((1, 3))})
    d = dynamic_stride(x, p, cfg)
    assert d.l_dy.tolist() == [5.0, 5.0] and d.l_odd.tolist() == [5.0, 5.0]
    assert d.c.tolist() == [2, 2]
    # saturate tanh at +1: a constant input makes z = 1 so relu passes W1 through
    xs = tape.constant(np.ones((1, 2, 3, 3)))
    p = consts(tape, {"W_c": np.array([[0.5, 0.5]]), "W1": np.full((3, 1), 50.0), "W2": np.full((1, 3), 50.0)})
    d = dynamic_stride(xs, p, cfg)
    assert d.l_dy.item() == 7.5 and d.l_odd.item() == 7.0


def test_ste_gradient_reaches_l_dy_unchanged():
    cfg = DsuConfig(channels=2, hidden=3)
    tape = T.Tape()
    x = tape.constant(np.random.default_rng(2).standard_normal((3, 2, 4, 4)))
    rng = np.random.default_rng(3)
    p = {k: tape.leaf(rng.standard_normal(s)) for k, s in (("W_c", (1, 2)), ("W1", (3, 1)), ("W2", (1, 3)))}
    d = dynamic_stride(x, p, cfg)
    g = rng.standard_normal(3)
    tape.backward(d.l_odd_node, seed=g)
    assert np.array_equal(d.l_dy_node.grad, g)


@given(st.integers(0, 10**6))
def test_stride_domain_fuzz(seed):
    rng = np.random.default_rng(seed)
    base = int(rng.choice([3, 5, 7, 9]))
    cfg = DsuConfig(channels=3, hidden=4, base_stride=base)
    scale = 10 ** rng.uniform(-2, 2)
    tape = T.Tape()
    x = tape.constant(rng.standard_normal((2, 3, 4, 4)) * scale)
    p = consts(tape, {"W_c": rng.normal(0, scale, (1, 3)), "W1": rng.normal(0, scale, (4, 1)),
                      "W2": rng.normal(0, scale, (1, 4))})
    d = dynamic_stride(x, p, cfg)
    assert set(d.l_odd.tolist()) <= {3.0, 5.0, 7.0, 9.0}
    assert np.all(d.l_dy >= 0.5 * base) and np.all(d.l_dy <= 1.5 * base)


# --- offsets and paths ---------------------------------------------------------------


def test_initial_offsets():
    table = initial_offsets(2)
    assert list(table) == ["TL", "TR", "BL", "BR"]
    assert table["TL"] == (-0.25, -0.25) and table["BR"] == (0.25, 0.25)
    assert all(abs(dx) == abs(dy) == 0.25 for dx, dy in INITIAL_OFFSETS.values())
    with pytest.raises(UnsupportedScaleError):
        initial_offsets(3)


def test_subpixel_centres_follow_offset_table():
    c = subpixel_centres(2, 3)
    for (sy, sx), name in zip(((0, 0), (0, 1), (1, 0), (1, 1)), ("TL", "TR", "BL", "BR")):
        dx, dy = INITIAL_OFFSETS[name]
        assert tuple(c[2 + sy, 2 + sx]) == (1 + dx, 1 + dy)


def valid_points(path):
    return [tuple(p) for p in path.coords[path.valid]]


def test_x_path_examples():
    zero = np.zeros(8)
    p = build_snake_paths_x((4.0, 3.0), (0.0, 0.0), zero, 2)
    assert valid_points(p) == [(2, 3), (3, 3), (4, 3), (5, 3), (6, 3)]
    steps = np.zeros(8)
    steps[:4] = 0.5
    p = build_snake_paths_x((4.0, 3.0), (0.0, 0.0), steps, 2)
    pts = valid_points(p)
    assert pts[3] == (5, 3.5) and pts[4] == (6, 4.0)
    p = build_snake_paths_x((4.0, 3.0), (0.0, 0.0), zero, 1)
    assert p.valid.sum() == 3 and (~p.valid).sum() == 9 - 3


def test_y_path_examples():
    p = build_snake_paths_y((4.0, 3.0), (0.0, 0.0), np.zeros(8), 2)
    assert valid_points(p) == [(4, 1), (4, 2), (4, 3), (4, 4), (4, 5)]
    steps = np.zeros(8)
    steps[4:] = -0.25
    p = build_snake_paths_y((4.0, 3.0), (0.0, 0.0), steps, 1)
    assert valid_points(p)[0] == (3.75, 2)


def test_paths_reject_offsets_outside_open_interval():
    with pytest.raises(ParameterError):
        build_snake_paths_x((0.0, 0.0), (0.0, 0.0), np.full(8, 1.0), 2)


@given(st.integers(0, 10**6), st.integers(0, 4))
def test_path_continuity_and_swap_symmetry(seed, c):
    rng = np.random.default_rng(seed)
    centre = rng.uniform(0, 20, 2)
    c0 = rng.uniform(-0.99, 0.99, 2)
    steps = rng.uniform(-0.99, 0.99, 8)
    px = build_snake_paths_x(centre, c0, steps, c)
    pts = px.coords[px.valid]
    assert np.allclose(np.diff(pts[:, 0]), 1.0, rtol=0, atol=1e-12)
    assert np.all(np.abs(np.diff(pts[:, 1])) < 1)
    assert px.valid[4] and px.valid.sum() == 2 * c + 1
    py = build_snake_paths_y(centre[::-1], c0[::-1], steps, c)
    assert np.allclose(py.coords[..., ::-1], px.coords, rtol=0, atol=1e-12)


def test_stride_mask():
    m = stride_mask(np.array([3.0, 9.0]), 9)
    assert m[0].tolist() == [False] * 3 + [True] * 3 + [False] * 3
    assert m[1].all()


# --- sampling and aggregation -----------------------------------------------------------


def run_saa(x, coords, kernel, l_odd):
    tape = T.Tape()
    mask = stride_mask(np.asarray(l_odd, float), kernel.shape[1])
    out = sample_and_aggregate(tape.constant(x), tape.constant(coords), tape.constant(kernel), mask,
                               tape.constant(np.asarray(l_odd, float)))
    return out.value


def straight_coords(n, p, lmax, h, w, rng):
    centres = np.stack([rng.uniform(0, w - 1, (n, p)), rng.uniform(0, h - 1, (n, p))], -1)
    k = np.arange(lmax) - lmax // 2
    coords = np.repeat(centres[:, :, None, :], lmax, axis=2)
    coords[..., 0] += k
    return coords


def test_constant_input_uniform_kernel(rng):
    x = np.full((2, 3, 5, 5), 1.7)
    coords = straight_coords(2, 6, 9, 5, 5, rng)
    kernel = np.full((3, 9), 1 / 9)
    for l_odd in ([9, 9], [3, 5], [7, 3]):
        assert np.allclose(run_saa(x, coords, kernel, np.array(l_odd)), 1.7, rtol=0, atol=1e-14)


def test_rescale_makes_stride_invariant(rng):
    x = np.full((1, 2, 4, 4), -0.4)
    coords = straight_coords(1, 5, 9, 4, 4, rng)
    kernel = np.full((2, 9), 1 / 9)
    a = run_saa(x, coords, kernel, np.array([3]))
    b = run_saa(x, coords, kernel, np.array([5]))
    assert np.array_equal(a, b) or np.allclose(a, b, rtol=0, atol=1e-15)


def test_one_hot_centre_tap_is_bilinear_sample(rng):
    x = rng.standard_normal((1, 2, 5, 6))
    coords = straight_coords(1, 7, 9, 5, 6, rng)
    kernel = np.zeros((2, 9))
    kernel[:, 4] = 1.0
    out = run_saa(x, coords, kernel, np.array([9]))
    tape = T.Tape()
    ref = T.grid_sample_bilinear(tape.constant(x), tape.constant(coords[:, :, 4])).value
    assert np.allclose(out, ref, rtol=0, atol=1e-14)


def test_masked_taps_contribute_nothing(rng):
    x = rng.standard_normal((2, 2, 6, 6))
    coords = straight_coords(2, 5, 9, 6, 6, rng)
    kernel = rng.standard_normal((2, 9))
    l_odd = np.array([3, 5])
    base = run_saa(x, coords, kernel, l_odd)
    moved = coords.copy()
    moved[:, :, :2] = rng.uniform(0, 5, moved[:, :, :2].shape)
    moved[:, :, 7:] = rng.uniform(0, 5, moved[:, :, 7:].shape)
    moved[0, :, 2] = moved[0, :, 6] = 0.0  # masked for the stride-3 sample only
    kernel2 = kernel.copy()
    kernel2[:, [0, 1, 7, 8]] = 99.0
    assert np.array_equal(run_saa(x, moved, kernel2, l_odd)[0], base[0])


def test_kernel_shape_checked(rng):
    with pytest.raises(DimensionError):
        run_saa(np.ones((1, 2, 4, 4)), straight_coords(1, 2, 9, 4, 4, rng), np.ones((3, 9)), np.array([5]))


# --- full layer ---------------------------------------------------------------------


def test_output_shape_and_init_equals_bilinear(rng):
    cfg = DsuConfig(channels=4)
    params = DsuParams.init(cfg, rng)
    x = rng.standard_normal((2, 4, 8, 8))
    out, trace = forward(x, params.arrays, cfg)
    assert out.shape == (2, 4, 16, 16)
    assert np.all(trace.decision.l_odd == 5)
    tape = T.Tape()
    ref = bilinear_upsample2x(tape.constant(x)).value
    assert np.allclose(out, ref, rtol=0, atol=1e-13)
    assert np.allclose(upsample(x, params), ref, rtol=0, atol=1e-13)


@pytest.mark.parametrize("variant", ["x-only", "y-only", "both"])
def test_constant_preserved_with_any_offsets(rng, variant):
    cfg = DsuConfig(channels=3, variant=variant)
    params = DsuParams.init(cfg, rng, offset_scale=2.0)
    arrays = dict(params.arrays)
    arrays["W2"] = rng.standard_normal(arrays["W2"].shape)
    for b in cfg.branches:
        arrays[f"agg_{b}"] = np.full((3, 9), 1 / 9)
    x = np.full((2, 3, 5, 6), 2.25)
    x[1] = -0.5
    out, _ = forward(x, arrays, cfg)
    assert np.allclose(out[0], 2.25, rtol=0, atol=1e-13)
    assert np.allclose(out[1], -0.5, rtol=0, atol=1e-13)


def test_horizontal_flip_equivariance(rng):
    cfg = DsuConfig(channels=3)
    arrays = dict(DsuParams.init(cfg, rng).arrays)
    arrays["agg_x"] = rng.standard_normal((3, 9))
    arrays["agg_y"] = rng.standard_normal((3, 9))
    arrays["W2"] = rng.standard_normal(arrays["W2"].shape)
    mirrored = dict(arrays, agg_x=arrays["agg_x"][:, ::-1].copy())
    x = rng.standard_normal((2, 3, 6, 7))
    a, _ = forward(x[..., ::-1].copy(), mirrored, cfg)
    b, _ = forward(x, arrays, cfg)
    assert np.allclose(a, b[..., ::-1], rtol=0, atol=1e-12)


def test_dsu_input_checks(rng):
    cfg = DsuConfig(channels=3)
    arrays = DsuParams.init(cfg, rng).arrays
    with pytest.raises(DimensionError):
        forward(np.ones((1, 2, 4, 4)), arrays, cfg)
    with pytest.raises(DimensionError):
        forward(np.ones((1, 3, 1, 4)), arrays, cfg)


def test_fixed_stride_config_uses_that_stride(rng):
    cfg = DsuConfig(channels=2, fixed_stride=9)
    _, trace = forward(rng.standard_normal((2, 2, 4, 4)), DsuParams.init(cfg, rng).arrays, cfg)
    assert trace.decision.l_odd.tolist() == [9.0, 9.0]
    assert trace.mask.all()


def test_layer_gradcheck_with_frozen_stride(rng):
    cfg = DsuConfig(channels=4, hidden=4)
    arrays = dict(DsuParams.init(cfg, rng, offset_scale=0.3).arrays)
    arrays["W2"] = rng.normal(0, 0.5, arrays["W2"].shape)
    arrays["agg_x"] = arrays["agg_x"] + rng.normal(0, 0.1, (4, 9))
    x = rng.standard_normal((2, 4, 8, 8))
    _, trace = forward(x, arrays, cfg)
    shift = trace.decision.l_odd - trace.decision.l_dy
    names = list(arrays)

    def fn(xn, *pn):
        out, _ = dsu_forward(xn, dict(zip(names, pn)), cfg, stride_shift=shift)
        return T.sum(T.mul(out, out))

    assert T.gradcheck(fn, [x] + [arrays[k] for k in names], probes=6) < 1e-5


def test_frozen_shift_matches_rounded_forward(rng):
    cfg = DsuConfig(channels=2)
    arrays = dict(DsuParams.init(cfg, rng, offset_scale=0.5).arrays)
    arrays["W2"] = rng.standard_normal(arrays["W2"].shape)
    x = rng.standard_normal((3, 2, 4, 5))
    a, trace = forward(x, arrays, cfg)
    b, _ = forward(x, arrays, cfg, stride_shift=trace.decision.l_odd - trace.decision.l_dy)
    assert np.allclose(a, b, rtol=0, atol=1e-12)


# --- accounting ----------------------------------------------------------------------


def test_cost_hand_count():
    cfg = DsuConfig(channels=1, hidden=1, base_stride=3, strides=(3,), variant="x-only")
    rep = count_params_flops(1, cfg)
    # W_c 1, W1 1, W2 1; offsets: 4 subpixels x (2 + 2) = 16 channels x 1 x 3 x 3 + 16 bias; aggregation 3
    assert rep.params == 1 + 1 + 1 + 16 * 9 + 16 + 3
    assert rep.params == sum(DsuParams.init(cfg).arrays[k].size for k in DsuParams.init(cfg).arrays)
    assert "params" in rep.formula


def test_cost_scaling():
    cfg1, cfg2 = DsuConfig(channels=4), DsuConfig(channels=8)
    assert count_params_flops(8, cfg2).param_breakdown["aggregation"] == 2 * count_params_flops(4, cfg1).param_breakdown["aggregation"]
    rep = count_params_flops(4, cfg1)
    assert rep.macs(16, 16) == 4 * rep.macs(8, 8)
