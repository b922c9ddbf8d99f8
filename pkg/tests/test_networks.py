import pytest
import torch
import torch.nn.functional as F

from errors import ConfigError, ShapeError
from networks import (
    ClassifierConfig, SegmenterConfig, build_classifier, build_network, build_segmenter, load_checkpoint,
    network_from_checkpoint, save_checkpoint, window_partition, window_reverse,
)


@pytest.mark.parametrize("arch", ["unet3d", "swin_unetr"])
def test_segmenter_output_shape(arch):
    model = build_segmenter(SegmenterConfig(architecture=arch, in_channels=2, out_classes=4, base_width=8, depth=3))
    out = model(torch.rand(2, 2, 16, 16, 16))
    assert out.shape == (2, 4, 16, 16, 16)
    assert model.in_channels == 2 and model.out_classes == 4 and model.required_divisor == 4


@pytest.mark.parametrize("arch", ["unet3d", "swin_unetr"])
def test_segmenter_rejects_indivisible_grid(arch):
    model = build_segmenter(SegmenterConfig(architecture=arch, base_width=4, depth=3))
    with pytest.raises(ShapeError):
        model(torch.rand(1, 1, 16, 16, 15))


def test_swin_handles_grid_smaller_than_window():
    model = build_segmenter(SegmenterConfig(architecture="swin_unetr", base_width=8, depth=3, window_size=4))
    assert model(torch.rand(1, 1, 8, 8, 8)).shape == (1, 4, 8, 8, 8)


def test_window_partition_inverts():
    x = torch.rand(2, 8, 4, 8, 3)
    windows = window_partition(x, (4, 2, 4))
    assert windows.shape == (2 * 2 * 2 * 2, 4 * 2 * 4, 3)
    assert torch.equal(window_reverse(windows, (4, 2, 4), 2, 8, 4, 8), x)


def test_seed_fixes_initial_weights():
    cfg = SegmenterConfig(base_width=4, depth=2, seed=5)
    a, b = build_segmenter(cfg), build_segmenter(cfg)
    c = build_segmenter(SegmenterConfig(base_width=4, depth=2, seed=6))
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
    assert any(not torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters()))


def test_building_does_not_touch_global_rng():
    torch.manual_seed(0)
    expected = torch.rand(3)
    torch.manual_seed(0)
    build_segmenter(SegmenterConfig(base_width=4, depth=2))
    assert torch.equal(torch.rand(3), expected)


def test_classifier_returns_one_logit_per_volume():
    model = build_classifier(ClassifierConfig(block_config=(2, 2), init_features=8, growth_rate=4))
    model.eval()
    with torch.no_grad():
        out = model(torch.rand(2, 1, 32, 32, 32))
    assert out.shape == (2,)


def test_classifier_presets():
    assert ClassifierConfig("densenet_small").block_config == (6, 12, 24, 16)
    assert ClassifierConfig("densenet_large").block_config == (6, 12, 64, 48)


def test_config_validation():
    with pytest.raises(ConfigError):
        SegmenterConfig(architecture="vnet")
    with pytest.raises(ConfigError):
        SegmenterConfig(out_classes=1)
    with pytest.raises(ConfigError):
        SegmenterConfig(depth=1)
    with pytest.raises(ConfigError):
        ClassifierConfig(architecture="resnet")


def test_checkpoint_roundtrip(tmp_path):
    cfg = SegmenterConfig(architecture="unet3d", base_width=4, depth=2, seed=1)
    model = build_network(cfg)
    opt = torch.optim.AdamW(model.parameters(), lr=1e-3)
    path = save_checkpoint(tmp_path / "3.ckpt", model, epoch=3, optimizer=opt, history=[{"epoch": 3}])
    assert not path.with_suffix(".ckpt.tmp").exists()

    payload = load_checkpoint(path)
    assert payload["epoch"] == 3 and payload["kind"] == "segmenter"
    assert payload["history"] == [{"epoch": 3}]

    restored = network_from_checkpoint(path)
    x = torch.rand(1, 1, 8, 8, 8)
    model.eval()
    with torch.no_grad():
        assert torch.allclose(restored(x), model(x))
    assert restored.config == cfg


def test_classifier_checkpoint_roundtrip(tmp_path):
    cfg = ClassifierConfig(block_config=(2, 2), init_features=8, growth_rate=4)
    path = save_checkpoint(tmp_path / "0.ckpt", build_network(cfg), epoch=0)
    assert network_from_checkpoint(path).config == cfg


def test_checkpoint_format_checked(tmp_path):
    path = tmp_path / "bad.ckpt"
    torch.save({"format_version": 99}, path)
    with pytest.raises(ConfigError):
        load_checkpoint(path)


def _one_sgd_step(model, x, loss_fn):
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    opt = torch.optim.SGD(model.parameters(), lr=0.1)
    model.train()
    opt.zero_grad()
    loss_fn(model(x)).backward()
    opt.step()
    return [n for n, p in model.named_parameters() if torch.equal(before[n], p.detach())]


@pytest.mark.parametrize("arch", ["unet3d", "swin_unetr"])
def test_every_segmenter_parameter_is_trained(arch):
    model = build_segmenter(SegmenterConfig(architecture=arch, base_width=8, depth=3, window_size=2))
    x = torch.rand(1, 1, 8, 8, 8, generator=torch.Generator().manual_seed(0))
    target = torch.randint(0, 4, (1, 8, 8, 8), generator=torch.Generator().manual_seed(1))
    frozen = _one_sgd_step(model, x, lambda logits: F.cross_entropy(logits, target))
    assert frozen == []


def test_every_classifier_parameter_is_trained():
    model = build_classifier(ClassifierConfig(block_config=(2, 2), init_features=8, growth_rate=4))
    x = torch.rand(2, 1, 16, 16, 16, generator=torch.Generator().manual_seed(0))
    flags = torch.tensor([1.0, 0.0])
    frozen = _one_sgd_step(model, x, lambda logits: F.binary_cross_entropy_with_logits(logits, flags))
    assert frozen == []


@pytest.mark.parametrize("arch", ["unet3d", "swin_unetr"])
def test_segmenter_logits_are_finite(arch):
    model = build_segmenter(SegmenterConfig(architecture=arch, base_width=4, depth=3))
    model.eval()
    with torch.no_grad():
        out = model(torch.rand(1, 1, 16, 16, 16))
    assert torch.isfinite(out).all()


def test_classifier_is_deterministic_on_a_fixed_volume():
    cfg = ClassifierConfig(block_config=(2, 2), init_features=8, growth_rate=4, seed=2)
    x = torch.rand(1, 1, 16, 16, 16, generator=torch.Generator().manual_seed(3))
    outputs = []
    for model in (build_classifier(cfg), build_classifier(cfg)):
        model.eval()
        with torch.no_grad():
            outputs.append(model(x))
            outputs.append(model(x))
    assert all(torch.equal(outputs[0], o) for o in outputs[1:])
    assert torch.isfinite(outputs[0]).all()
