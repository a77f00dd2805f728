"""nn-layers: init scheme, apply, ParamStore collect/load."""

import numpy as np
import pytest

from stsc import model as M
from stsc import tensor as T
from stsc.layers import ParamLoadError, ParamStore, init_conv
from stsc.tensor import Tensor


def test_same_seed_same_layer():
    a = init_conv(3, 8, 3, rng=np.random.default_rng(9))
    b = init_conv(3, 8, 3, rng=np.random.default_rng(9))
    assert np.array_equal(a.weight.data, b.weight.data)
    assert np.array_equal(a.bias.data, b.bias.data)


def test_bias_starts_zero():
    layer = init_conv(4, 4, 3, rng=np.random.default_rng(0))
    assert not layer.bias.data.any()


def test_weight_variance_matches_uniform_moment():
    # bound^2 / 3 is the variance of U(-bound, bound)
    rng = np.random.default_rng(5)
    layer = init_conv(16, 64, 3, rng=rng, dtype=np.float64)
    bound = np.sqrt(6.0 / (16 * 9))
    var = layer.weight.data.var()
    assert abs(var - bound ** 2 / 3) / (bound ** 2 / 3) < 0.10
    assert layer.weight.size >= 9000  # enough draws for the moment check


def test_apply_identity_layer():
    layer = init_conv(1, 1, 1, act=None, rng=np.random.default_rng(0))
    layer.weight.data[...] = 1.0
    x = Tensor(np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4))
    np.testing.assert_allclose(layer(x).data, x.data)


def test_apply_relu_clamps_negative():
    layer = init_conv(1, 1, 1, act="relu", rng=np.random.default_rng(0))
    layer.weight.data[...] = -1.0
    x = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
    assert not layer(x).data.any()


def test_stride2_shape():
    layer = init_conv(4, 6, 3, stride=2, rng=np.random.default_rng(0))
    x = Tensor(np.zeros((1, 4, 16, 16), dtype=np.float32))
    assert layer(x).shape == (1, 6, 8, 8)


def test_stride1_preserves_spatial_any_even_size():
    rng = np.random.default_rng(3)
    for k in (1, 3, 5, 7):
        layer = init_conv(2, 2, k, rng=rng)
        for hw in (8, 10, 24):
            x = Tensor(rng.uniform(0, 1, (1, 2, hw, hw)).astype(np.float32))
            assert layer(x).shape == x.shape


def _desk_model():
    rng = np.random.default_rng(11)
    vgg = M.random_vgg_store(rng)
    return M.STSCModel(M.ModelConfig(base_channels=4, sem_channels=8), rng, vgg)


def test_collect_load_roundtrip_preserves_outputs():
    model = _desk_model()
    x = Tensor(np.random.default_rng(2).uniform(0, 1, (1, 3, 32, 32)).astype(np.float32))
    before = model.forward(x).data.copy()
    snapshot = M.collect_params(model).copy()
    for name in model.params.trainable_names():
        model.params[name].data += 0.05
    M.load_params(model, snapshot)
    after = model.forward(x).data
    assert np.array_equal(before, after)


def test_load_with_renamed_key_names_offender():
    model = _desk_model()
    store = M.collect_params(model).copy()
    renamed = ParamStore()
    for name, t in store.items():
        key = "bogus.key" if name == "encoder.scale1.conv.weight" else name
        renamed.add(key, t)
    with pytest.raises(ParamLoadError, match="encoder.scale1.conv.weight"):
        model.params.load(renamed)


def test_load_shape_mismatch_rejected():
    model = _desk_model()
    store = M.collect_params(model).copy()
    store["encoder.scale1.conv.bias"].data = np.zeros(1, dtype=np.float32)
    # rebuild so the stored tensor object has the wrong shape
    bad = ParamStore()
    for name, t in store.items():
        bad.add(name, Tensor(np.zeros(1, dtype=np.float32)) if name == "encoder.scale1.conv.bias" else t)
    with pytest.raises(ParamLoadError, match="shape mismatch"):
        model.params.load(bad)


def conv_params(ci, co, k):
    return co * ci * k * k + co


def expected_param_count(c0=4, sem=8):
    """Closed form from the architecture table (full config, shared CFRM)."""
    ch = [c0, 2 * c0, 4 * c0, 8 * c0]
    bottom = 16 * c0
    seq = [(3, ch[0], 3), (ch[0], ch[1], 3),          # scale1 conv, down
           (ch[1], ch[1], 3), (ch[1], ch[2], 3),      # scale2
           (ch[2], ch[2], 3), (ch[2], ch[3], 3),      # scale3
           (ch[3], ch[3], 3), (ch[3], bottom, 3),     # scale4
           (bottom, bottom, 3)]                       # bottom plain conv
    # pcb
    seq += [(bottom, bottom // 4, 1)] * 3 + [(bottom + 3 * (bottom // 4), bottom, 1)]
    # branches
    seq += [(4 * 64 + 128, sem, 1), (4 * 256 + 512, sem, 1)]
    # shared cfrm
    seq += [(sem, sem, 3), (sem, sem, 5), (sem, sem, 7), (3 * sem, sem, 1)]
    # aggregate
    seq += [(2 * sem, sem, 1)]
    # fdnet ctl per scale
    for c in ch:
        seq += [(sem, c, 1), (c, max(c // 4, 1), 1), (max(c // 4, 1), c, 1)]
    # decoder
    ups = [bottom, ch[3], ch[2], ch[1]]
    for step, i in enumerate(range(4, 0, -1)):
        seq += [(ups[step] + ch[i - 1] + ch[i - 1], ch[i - 1], 3)]
    seq += [(ch[0], 3, 3)]
    trainable = sum(conv_params(ci, co, k) for ci, co, k in seq)
    vgg = sum(co * ci * 9 + co for _, ci, co in M.VGG_CONVS) + 6
    return trainable, trainable + vgg


def test_param_count_matches_closed_form():
    model = _desk_model()
    trainable, total = expected_param_count()
    assert sum(model.params[n].size for n in model.params.trainable_names()) == trainable
    assert model.params.total_count() == total


def test_frozen_set_is_exactly_vgg():
    model = _desk_model()
    assert model.params.frozen == {n for n in model.params.names() if n.startswith("vgg.")}
