import numpy as np
import pytest

from dcap import numkit as nk
from dcap.backbone import CONV4_VARIANTS, Backbone, BackboneConfig, ConfigError, FeatureMap, build_backbone
from dcap.numkit import ShapeError


def conv4_param_count(filters, cin=1):
    # closed form: per block 3x3 conv weights + conv bias + BN gamma/beta
    total = 0
    for f in filters:
        total += 9 * cin * f + f + 2 * f
        cin = f
    return total


@pytest.mark.parametrize("name", sorted(CONV4_VARIANTS))
def test_param_count_matches_closed_form(name):
    filters = CONV4_VARIANTS[name]
    net = build_backbone(BackboneConfig(filters=filters, input_size=32, channels_in=3))
    assert net.num_parameters() == conv4_param_count(filters, cin=3)


def test_table1_variant_rows():
    assert CONV4_VARIANTS["conv4-128"] == (64, 64, 128, 128)
    assert CONV4_VARIANTS["conv4-64"] == (64, 64, 64, 64)


def test_84px_conv4_64_gives_5x5x64():
    cfg = BackboneConfig(filters=(64, 64, 64, 64), input_size=84, channels_in=3)
    net = build_backbone(cfg)
    with nk.no_grad():
        out = net.embed(np.zeros((1, 84, 84, 3), dtype=np.float32), "eval")
    assert out.shape == (1, 5, 5, 64)
    assert cfg.map_size == 5


def test_desk_default_gives_4x4x32():
    cfg = BackboneConfig()
    net = build_backbone(cfg)
    with nk.no_grad():
        out = net.embed(np.zeros((2, 64, 64, 1), dtype=np.float32), "eval")
    assert out.shape == (2, 4, 4, 32)
    assert FeatureMap(out.data[0]).r == 16


def test_resnet_family_extent():
    cfg = BackboneConfig(family="resnet", filters=(8, 8, 16, 16), input_size=32, channels_in=1)
    net = build_backbone(cfg, 3)
    with nk.no_grad():
        out = net.embed(np.random.default_rng(0).random((2, 32, 32, 1)), "train")
    assert out.shape == (2, 2, 2, 16)
    assert np.all(np.isfinite(out.data))


def test_config_errors():
    with pytest.raises(ConfigError):
        BackboneConfig(input_size=8)
    with pytest.raises(ConfigError):
        BackboneConfig(filters=(32, 0, 32, 32))
    with pytest.raises(ConfigError):
        BackboneConfig(family="vgg")


def test_init_is_deterministic_per_seed():
    a = build_backbone(BackboneConfig(), 7)
    b = build_backbone(BackboneConfig(), 7)
    c = build_backbone(BackboneConfig(), 8)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    assert not np.array_equal(a.params["block0.conv.weight"].data, c.params["block0.conv.weight"].data)
    assert all(not a.params[k].data.any() for k in a.params if k.endswith("conv.bias"))


def test_zero_image_zero_bias_identity_bn_gives_zero_map():
    net = build_backbone(BackboneConfig(input_size=32))
    with nk.no_grad():
        out = net.embed(np.zeros((1, 32, 32, 1)), "eval")
    # BN eval with running (0, 1) and gamma=1, beta=0 is identity up to eps scaling
    assert np.array_equal(out.data, np.zeros_like(out.data))


def test_identical_images_identical_maps_and_eval_purity():
    net = build_backbone(BackboneConfig(input_size=32))
    img = np.random.default_rng(0).random((1, 32, 32, 1))
    batch = np.repeat(img, 3, axis=0)
    with nk.no_grad():
        out = net.embed(batch, "eval").data
        again = net.embed(batch, "eval").data
    assert np.array_equal(out[0], out[1]) and np.array_equal(out[1], out[2])
    assert out.tobytes() == again.tobytes()
    assert np.all(np.isfinite(out))


def test_wrong_input_shape_rejected():
    net = build_backbone(BackboneConfig(input_size=32))
    with pytest.raises(ShapeError, match="embed"):
        net.embed(np.zeros((1, 32, 32, 3)), "eval")
    with pytest.raises(ShapeError):
        net.embed(np.zeros((1, 48, 48, 1)), "eval")
    with pytest.raises(ValueError):
        net.embed(np.zeros((1, 32, 32, 1)), "test")


def test_feature_map_descriptor_order():
    v = np.arange(2 * 3 * 4).reshape(2, 3, 4)
    fm = FeatureMap(v)
    assert (fm.h, fm.w, fm.d, fm.r) == (2, 3, 4, 6)
    assert np.array_equal(fm.descriptors()[4], v[1, 1])


def test_train_mode_updates_running_stats_only_in_train():
    net = Backbone.build(BackboneConfig(input_size=32))
    before = {k: v.copy() for k, v in net.buffers.items()}
    x = np.random.default_rng(1).random((4, 32, 32, 1))
    with nk.no_grad():
        net.embed(x, "eval")
    assert all(np.array_equal(before[k], net.buffers[k]) for k in before)
    with nk.no_grad():
        net.embed(x, "train")
    assert not np.array_equal(before["block0.bn.running_mean"], net.buffers["block0.bn.running_mean"])
