import numpy as np
import pytest
from scipy.special import expit

from gradcheck import network_gradcheck
from sartol.autonet.model import (
    LayerSpec,
    ModelSpec,
    ShapeError,
    _Builder,
    backward,
    forward,
    init_params,
    mini_fcn,
    mini_res_unet,
    param_shapes,
    preset,
)
from sartol.errors import NumericError


@pytest.mark.parametrize("name", ["MiniFCN", "MiniResUNet"])
def test_output_shape_matches_input(name):
    spec = preset(name)
    params = init_params(spec, 0)
    x = np.random.default_rng(0).normal(size=(2, 1, 32, 48)).astype(np.float32)
    pred, _ = forward(spec, params, x)
    assert pred.shape == x.shape
    assert pred.min() > 0 and pred.max() < 1


def test_fresh_minifcn_on_zeros_gives_half():
    spec = mini_fcn()
    params = init_params(spec, 3)
    for mode in ("train", "infer"):
        pred, _ = forward(spec, params, np.zeros((1, 1, 32, 32), np.float32), mode)
        assert (pred == 0.5).all()


def test_indivisible_input_rejected():
    spec = mini_fcn()
    with pytest.raises(ShapeError, match="divisible"):
        forward(spec, init_params(spec, 0), np.zeros((1, 1, 20, 16)))
    with pytest.raises(ShapeError):
        forward(spec, init_params(spec, 0), np.zeros((1, 2, 16, 16)))


def test_spec_validation():
    with pytest.raises(ValueError, match="not defined"):
        ModelSpec("m", (LayerSpec("a", "relu", ("b",)), LayerSpec("h", "sigmoid_head", ("a",))))
    with pytest.raises(ValueError, match="sigmoid_head"):
        ModelSpec("m", (LayerSpec("a", "relu", ("input",)),))
    bad = (
        LayerSpec("p", "maxpool", ("input",)),
        LayerSpec("j", "add", ("p", "input")),
        LayerSpec("h", "sigmoid_head", ("j",)),
    )
    with pytest.raises(ShapeError, match="resolutions"):
        ModelSpec("m", bad).trace()


def test_spec_roundtrip():
    for spec in (mini_fcn(), mini_res_unet()):
        assert ModelSpec.from_dict(spec.to_dict()) == spec


def test_minifcn_structure():
    spec = mini_fcn()
    kinds = [l.kind for l in spec.layers]
    assert kinds.count("transposed_conv") == 3
    fuses = [l for l in spec.layers if l.kind == "skip_fuse"]
    assert [f.inputs[1] for f in fuses] == ["pool2", "pool1"]
    assert all(f.attrs["mode"] == "add_after_1x1" for f in fuses)
    assert spec.downsampling == 8


def test_res_unet_structure():
    spec = mini_res_unet()
    assert sum(l.kind == "add" for l in spec.layers) == 5
    assert sum(l.kind == "skip_fuse" and l.attrs["mode"] == "concat" for l in spec.layers) == 2
    assert spec.downsampling == 4


def test_init_is_seeded_and_bounded():
    spec = mini_fcn()
    a, b, c = init_params(spec, 1), init_params(spec, 1), init_params(spec, 2)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["enc1a.weight"], c["enc1a.weight"])
    for name, shape in param_shapes(spec).items():
        assert a[name].shape == shape
        if name.endswith(".weight") and not name.startswith("up"):
            assert np.abs(a[name]).max() <= np.sqrt(6 / np.prod(shape[:3]))
        if name.endswith(".bias") or name.endswith(".beta") or name.endswith(".running_mean"):
            assert not a[name].any()


def test_tconv_init_is_bilinear():
    w = init_params(mini_fcn(), 0)["up1.weight"]
    assert w[1, 1, 0, 0] == np.float32(9 / 16)
    assert w[:, :, 0, 1].sum() == 0


def test_zero_weight_residual_unit_is_identity():
    b = _Builder()
    b.add("c", "conv", "input", k=3, out_ch=4, stride=1)
    b.residual_unit("r", "c")
    b.add("head", "sigmoid_head", "r")
    spec = ModelSpec("res", tuple(b.layers))
    rs = np.random.default_rng(0)
    params = init_params(spec, 0, np.float64)
    for k in ("r_conv1", "r_conv2"):
        params[f"{k}.weight"][:] = 0
        params[f"{k}.bias"][:] = 0
    x = rs.normal(size=(2, 1, 8, 8))
    _, cache = forward(spec, params, x)
    # the identity is checked through the head: sigmoid of a 1x1 projection of conv c
    ref, _ = forward(ModelSpec("plain", (spec.layers[0], LayerSpec("head", "sigmoid_head", ("c",)))), params, x)
    pred, _ = forward(spec, params, x)
    assert np.abs(pred - ref).max() < 1e-15


def test_running_stats_update():
    spec = mini_fcn()
    params = init_params(spec, 0)
    x = np.random.default_rng(1).normal(2.0, 1.0, size=(2, 1, 16, 16)).astype(np.float32)
    forward(spec, params, x, update_stats=False)
    assert not params["enc1a_bn.running_mean"].any()
    forward(spec, params, x)
    assert params["enc1a_bn.running_mean"].any()
    assert np.all(params["enc1a_bn.running_var"] != 1)


def test_backward_requires_train_cache():
    spec = mini_fcn()
    params = init_params(spec, 0)
    pred, cache = forward(spec, params, np.zeros((1, 1, 16, 16), np.float32), "infer")
    with pytest.raises(ValueError):
        backward(spec, params, cache, np.zeros_like(pred))


def test_non_finite_input_is_numeric_error():
    spec = mini_fcn()
    x = np.zeros((1, 1, 16, 16), np.float32)
    x[0, 0, 3, 3] = np.nan
    with pytest.raises(NumericError, match="enc1a"):
        forward(spec, init_params(spec, 0), x)


@pytest.mark.parametrize("build", [mini_fcn, mini_res_unet])
def test_network_gradients(build):
    assert network_gradcheck(build(), seed=0) < 1e-4


def test_head_output_is_sigmoid_of_projection():
    spec = ModelSpec("lin", (LayerSpec("head", "sigmoid_head", ("input",)),))
    params = {"head.weight": np.full((1, 1, 1, 1), 2.0), "head.bias": np.array([0.5])}
    x = np.linspace(-3, 3, 16).reshape(1, 1, 4, 4)
    pred, _ = forward(spec, params, x)
    assert np.allclose(pred, expit(2 * x + 0.5), rtol=0, atol=1e-15)
