"""Backbone stage contract: resolutions, dilation, parameters, gradient flow."""

import numpy as np
import pytest

from fbnet import tensor as T
from fbnet.backbone import Backbone, BackboneConfig, STAGE_DILATIONS, STAGE_STRIDES
from fbnet.errors import ConfigError
from fbnet.nn import Ctx
from fbnet.tensor import Tensor


def toy_backbone(seed=0, dtype=np.float32, channels=(16, 32, 64, 128), blocks=(1, 1, 1, 1)):
    return Backbone(BackboneConfig(channels, blocks), np.random.default_rng(seed), dtype=dtype)


# analytic count: k^2*Cin*Cout + Cout per conv, plus 2*C per norm
def conv_params(cin, cout, k):
    return k * k * cin * cout + cout


def block_params(cin, cout, has_skip):
    n = conv_params(cin, cout, 3) + 2 * cout
    n += conv_params(cout, cout, 3) + 2 * cout
    if has_skip:
        n += conv_params(cin, cout, 1) + 2 * cout
    return n


def expected_backbone_params(channels, blocks):
    c0 = channels[0]
    total = conv_params(3, c0, 3) + 2 * c0 + conv_params(c0, c0, 3) + 2 * c0
    cin = c0
    for cout, nblocks, stride in zip(channels, blocks, STAGE_STRIDES):
        for b in range(nblocks):
            s = stride if b == 0 else 1
            total += block_params(cin, cout, has_skip=(cin != cout or s != 1))
            cin = cout
    return total


def test_stage_extents_64():
    bb = toy_backbone()
    outs = bb.forward(Tensor(np.random.default_rng(0).random((2, 3, 64, 64)), dtype=np.float32))
    assert [o.shape for o in outs] == [(2, 16, 16, 16), (2, 32, 8, 8), (2, 64, 8, 8), (2, 128, 8, 8)]


@pytest.mark.parametrize("hw", [(32, 32), (48, 80), (64, 40)])
def test_stage_extents_generic(hw):
    h, w = hw
    bb = toy_backbone()
    outs = bb.forward(Tensor(np.zeros((1, 3, h, w)), dtype=np.float32))
    assert outs[0].shape[2:] == (h // 4, w // 4)
    for o in outs[1:]:
        assert o.shape[2:] == (h // 8, w // 8)


def test_indivisible_extent_rejected():
    bb = toy_backbone()
    with pytest.raises(ConfigError, match="divisible by 8"):
        bb.forward(Tensor(np.zeros((1, 3, 60, 64)), dtype=np.float32))


def test_fixed_stage_schedule():
    assert STAGE_STRIDES == (1, 2, 1, 1)
    assert STAGE_DILATIONS == (1, 1, 2, 4)


def test_dilation_widens_receptive_field():
    # a single-pixel perturbation must reach a wider neighborhood in the
    # dilation-4 stage than in the dilation-2 stage
    bb = toy_backbone(seed=4)
    rng = np.random.default_rng(1)
    img = rng.random((1, 3, 64, 64)).astype(np.float32)
    base = bb.forward(Tensor(img, dtype=np.float32))
    img2 = img.copy()
    img2[0, :, 32, 32] += 10.0
    bumped = bb.forward(Tensor(img2, dtype=np.float32))
    changed3 = np.any(base[2].data != bumped[2].data, axis=1).sum()
    changed4 = np.any(base[3].data != bumped[3].data, axis=1).sum()
    assert changed4 > changed3 > 0


def test_parameter_count_matches_closed_form():
    channels, blocks = (16, 32, 64, 128), (1, 2, 1, 1)
    bb = toy_backbone(channels=channels, blocks=blocks)
    assert bb.param_count() == expected_backbone_params(channels, blocks)


def test_gradient_reaches_stem(rng):
    bb = toy_backbone(dtype=np.float64)
    img = Tensor(rng.random((2, 3, 16, 16)), dtype=np.float64)
    outs = bb.forward(img, Ctx(training=True))
    loss = T.tsum(outs[3])
    T.backward(loss)
    g = bb.stem1.conv.weight.grad
    assert g is not None and np.abs(g).max() > 0


def test_config_validation():
    with pytest.raises(ConfigError):
        BackboneConfig((1, 2, 3), (1, 1, 1, 1))
    with pytest.raises(ConfigError):
        BackboneConfig((1, 2, 3, 4), (0, 1, 1, 1))
