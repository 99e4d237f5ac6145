"""Receptive-field algebra, kernel decoupling, and the fusion block."""

import numpy as np
import pytest

import voxelflow.autodiff as ad
from conftest import make_sparse
from oracles import dense_dffm
from voxelflow.dffm import (
    DffmParams,
    channel_pool,
    decouple_kernel,
    dffm_forward,
    dffm_nodes,
    dffm_param_arrays,
    impulse_support_radius,
    init_dffm,
    receptive_field,
)
from voxelflow.convs import ConvParams, init_conv
from voxelflow.errors import (
    EmptySpecError,
    InvalidReceptiveFieldError,
    NonSubmanifoldStageError,
    ShapeMismatchError,
)
from voxelflow.sparse import SparseTensor, build_rulebook, to_dense


def test_receptive_field_frozen_values():
    assert receptive_field([(5, 1, 1)]) == 5
    assert receptive_field([(3, 1, 1), (3, 1, 1)]) == 5
    assert receptive_field([(3, 1, 1)]) == 3
    assert receptive_field([(3, 1, 1)] * 3) == 7
    assert receptive_field([(3, 1, 1), (3, 2, 1)]) == 7  # dilation doubles the growth
    assert receptive_field([(3, 1, 1), (3, 1, 2)]) == 7  # so does stride
    assert receptive_field([(1, 1, 1)]) == 1


def test_receptive_field_errors():
    with pytest.raises(EmptySpecError):
        receptive_field([])
    for bad in [(0, 1, 1), (3, 0, 1), (3, 1, 0)]:
        with pytest.raises(InvalidReceptiveFieldError):
            receptive_field([bad])


def test_decouple_kernel():
    assert decouple_kernel(3) == [(3, 1, 1)]
    assert decouple_kernel(5) == [(3, 1, 1), (3, 1, 1)]
    assert decouple_kernel(7) == [(3, 1, 1)] * 3
    for target in (3, 5, 7, 9, 11):
        assert receptive_field(decouple_kernel(target)) == target
    for bad in (1, 2, 4, -3):
        with pytest.raises(InvalidReceptiveFieldError):
            decouple_kernel(bad)


def test_channel_pool():
    t = SparseTensor.create(
        (2, 2, 2), np.array([[0, 0, 0], [1, 1, 1]]), np.array([[1.0, 3.0], [-2.0, 0.0]])
    )
    mean, mx = channel_pool(t)
    np.testing.assert_array_equal(mean, [2.0, -1.0])
    np.testing.assert_array_equal(mx, [3.0, 0.0])
    empty_mean, empty_max = channel_pool(SparseTensor.empty((2, 2, 2), 3))
    assert empty_mean.shape == (0,)
    assert empty_max.shape == (0,)
    with pytest.raises(ShapeMismatchError):
        channel_pool(SparseTensor.empty((2, 2, 2), 0))


def _valid_params(channels=3, target_rf=5, seed=0):
    return init_dffm(np.random.default_rng(seed), channels, target_rf)


def test_params_validate_accepts_init_output():
    params = _valid_params()
    params.validate(3)
    assert params.num_stages == 2
    assert params.channels == 3


def test_params_validate_rejects_bad_shapes():
    rng = np.random.default_rng(1)
    params = _valid_params()
    with pytest.raises(NonSubmanifoldStageError):
        broken = _valid_params()
        broken.stage_convs[0] = init_conv(rng, 3, 3, 3, stride=2, mode="strided")
        broken.validate(3)
    with pytest.raises(NonSubmanifoldStageError):
        broken = _valid_params()
        broken.attention_conv = init_conv(rng, 3, 2, 2, bias=True, mode="strided", stride=2)
        broken.validate(3)
    with pytest.raises(ShapeMismatchError):
        params.validate(4)  # stage convs are 3->3
    with pytest.raises(ShapeMismatchError):
        broken = _valid_params()
        broken.attention_conv = init_conv(rng, 3, 3, 2, bias=True)
        broken.validate(3)
    with pytest.raises(ShapeMismatchError):
        broken = _valid_params()
        broken.out_conv = init_conv(rng, 3, 3, 3, bias=True)
        broken.validate(3)
    with pytest.raises(ShapeMismatchError):
        broken = _valid_params()
        broken.attention_conv.bias = None
        broken.validate(3)
    with pytest.raises(EmptySpecError):
        DffmParams([], params.attention_conv, params.out_conv).validate(3)


def test_forward_matches_dense_oracle():
    rng = np.random.default_rng(2)
    for trial in range(10):
        dims = tuple(int(d) for d in rng.integers(3, 7, size=3))
        channels = int(rng.integers(2, 5))
        target_rf = int(rng.choice([3, 5, 7]))
        t = make_sparse(rng, dims, channels, density=0.35)
        params = init_dffm(rng, channels, target_rf)
        # Random biases so gating and projection both matter.
        params.attention_conv.bias[:] = rng.standard_normal(params.num_stages) * 0.3
        params.out_conv.bias[:] = rng.standard_normal(channels) * 0.3
        out = dffm_forward(t, params)
        np.testing.assert_array_equal(out.coords, t.coords)

        dense = to_dense(t)
        mask = np.zeros(dims, dtype=bool)
        mask[t.coords[:, 0], t.coords[:, 1], t.coords[:, 2]] = True
        ref = dense_dffm(dense, mask, params)
        np.testing.assert_allclose(to_dense(out), ref, atol=1e-12)


def test_forward_preserves_active_set_and_empty_passthrough():
    rng = np.random.default_rng(3)
    t = make_sparse(rng, (5, 5, 5), 2)
    params = init_dffm(rng, 2, 5)
    out = dffm_forward(t, params)
    assert out.grid_dims == t.grid_dims
    np.testing.assert_array_equal(out.coords, t.coords)

    empty = SparseTensor.empty((4, 4, 4), 2)
    out_empty = dffm_forward(empty, params)
    assert out_empty.num_active == 0
    assert out_empty.features is not empty.features


def test_zero_projection_reduces_to_identity():
    # With the output conv zeroed the residual path is all that remains.
    rng = np.random.default_rng(4)
    t = make_sparse(rng, (5, 5, 5), 3)
    params = init_dffm(rng, 3, 5)
    params.out_conv.weights[:] = 0.0
    params.out_conv.bias[:] = 0.0
    out = dffm_forward(t, params)
    np.testing.assert_array_equal(out.features, t.features)


def test_param_arrays_share_storage():
    params = _valid_params(channels=2)
    arrays = dffm_param_arrays(params)
    assert set(arrays) == {
        "dffm.stage0.w",
        "dffm.stage1.w",
        "dffm.attn.w",
        "dffm.attn.b",
        "dffm.out.w",
        "dffm.out.b",
    }
    assert arrays["dffm.stage0.w"] is params.stage_convs[0].weights
    assert arrays["dffm.out.b"] is params.out_conv.bias
    prefixed = dffm_param_arrays(params, prefix="stage2.fusion")
    assert "stage2.fusion.attn.w" in prefixed


def test_nodes_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    t = make_sparse(rng, (4, 4, 3), 2, density=0.4)
    params = init_dffm(rng, 2, 5)
    rulebook = build_rulebook(t, 3)
    arrays = dict(dffm_param_arrays(params))
    arrays["x"] = t.features

    def params_from(work):
        stages = [
            ConvParams(3, work[f"dffm.stage{i}.w"]) for i in range(params.num_stages)
        ]
        attn = ConvParams(3, work["dffm.attn.w"], work["dffm.attn.b"])
        out = ConvParams(1, work["dffm.out.w"], work["dffm.out.b"])
        return DffmParams(stages, attn, out, params.activation)

    def run(work):
        tape = ad.Tape()
        feats = tape.param("x", work["x"])
        return tape, dffm_nodes(tape, feats, rulebook, params_from(work))

    tape, out = run(arrays)
    grads = tape.backward(ad.sum_all(ad.powc(out, 2.0)))

    def f(work):
        _, o2 = run(work)
        return float(np.sum(o2.value**2))

    fd = ad.finite_diff(f, arrays)
    for name in arrays:
        np.testing.assert_allclose(grads[name], fd[name], rtol=2e-5, atol=1e-6, err_msg=name)


@pytest.mark.parametrize("num_stages", [1, 2])
def test_impulse_support_radius_attains_stage_count(num_stages):
    rng = np.random.default_rng(6)
    assert impulse_support_radius(num_stages, rng) == num_stages
