from dataclasses import replace

import numpy as np
import pytest
import torch.nn as nn

from conftest import Exploding, FixedLogits, Recorder, blocky_case
from errors import ConfigError, ContractError
from imaging_io import LabelMap, Volume
from networks import ClassifierConfig, SegmenterConfig, build_network
from pipelines import (
    MultitaskOptions, PipelineConfig, ProbabilityMap, SegmentationPipeline, StageSpec, derive_aorta_label,
    fusion_inputs, oracle_channel, predict_probs, run_ensemble, run_multitask, run_sequential, run_single_step,
    stage_target,
)

TINY = SegmenterConfig(base_width=4, depth=2)


def _softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def _volume(shape=(6, 6, 6), value=0.5) -> Volume:
    return Volume.from_array(np.full(shape, value, dtype=np.float32), id="v")


def test_ensemble_mean_matches_brute_force(rng):
    image = _volume()
    logits = [rng.normal(size=(4, 6, 6, 6)) * 3 for _ in range(3)]
    members = [FixedLogits(lg) for lg in logits]
    label, pm = run_ensemble(image, members)

    expected = np.zeros((4, 6, 6, 6))
    for lg in logits:
        expected += _softmax(lg)
    expected /= len(logits)
    assert np.max(np.abs(pm.probs - expected)) < 1e-12
    assert np.array_equal(label.data, np.argmax(expected, axis=0))

    reordered, _ = run_ensemble(image, members[::-1])
    assert np.array_equal(reordered.data, label.data)


def test_ensemble_of_identical_members_is_the_member(rng):
    image = _volume()
    lg = rng.normal(size=(4, 6, 6, 6))
    single, pm_single = run_ensemble(image, [FixedLogits(lg)])
    triple, pm_triple = run_ensemble(image, [FixedLogits(lg) for _ in range(3)])
    assert np.array_equal(single.data, triple.data)
    assert np.allclose(pm_single.probs, pm_triple.probs, atol=1e-12)


def test_ensemble_needs_agreeing_members(rng):
    image = _volume()
    with pytest.raises(ContractError):
        run_ensemble(image, [])
    with pytest.raises(ContractError):
        run_ensemble(image, [FixedLogits(rng.normal(size=(4, 6, 6, 6))), FixedLogits(rng.normal(size=(3, 6, 6, 6)))])


def test_probability_map_checks_and_ties():
    image = _volume((2, 2, 2))
    tied = ProbabilityMap(np.full((4, 2, 2, 2), 0.25), image)
    assert not tied.argmax().data.any()
    probs = np.zeros((4, 2, 2, 2))
    probs[1] = probs[2] = 0.4
    probs[3] = 0.2
    assert np.all(ProbabilityMap(probs, image).argmax().data == 1)
    with pytest.raises(ContractError):
        ProbabilityMap(np.full((4, 2, 2, 2), 0.3), image)
    with pytest.raises(ContractError):
        ProbabilityMap(np.full((4, 2, 2, 3), 0.25), image)


def test_stage_targets():
    label = np.array([0, 1, 2, 3])
    assert stage_target(label, "aorta").tolist() == [0, 1, 1, 1]
    assert stage_target(label, "flt").tolist() == [0, 0, 0, 1]
    assert stage_target(label, "tlfl").tolist() == [0, 1, 2, 2]
    assert stage_target(label, "full").tolist() == [0, 1, 2, 3]
    with pytest.raises(ContractError):
        stage_target(label, "presence")


def test_aorta_label_keeps_the_grid():
    data = np.zeros((4, 4, 4), dtype=np.uint8)
    data[0, 0, :] = [0, 1, 2, 3]
    label = LabelMap.from_array(data, spacing=(1.5, 1.0, 1.0), id="x")
    aorta = derive_aorta_label(label)
    assert aorta.data.sum() == 3 and aorta.spacing == label.spacing and aorta.id == "x"


@pytest.mark.parametrize("shape", [(10, 10, 10), (5, 7, 9)])
def test_sliding_window_matches_whole_volume_for_pointwise_model(rng, shape):
    model = nn.Conv3d(1, 4, kernel_size=1)
    array = rng.random((1, *shape)).astype(np.float32)
    whole = predict_probs(array, model)
    windowed = predict_probs(array, model, patch_size=(4, 4, 4), overlap=0.5)
    assert windowed.shape == (4, *shape)
    assert np.allclose(whole, windowed, atol=1e-6)


@pytest.mark.parametrize("overlap", [0.25, 0.5])
def test_sliding_window_output_is_a_distribution(rng, overlap):
    array = rng.random((1, 10, 9, 11)).astype(np.float32)
    probs = predict_probs(array, build_network(TINY), patch_size=(4, 4, 4), overlap=overlap)
    assert probs.shape == (4, 10, 9, 11)
    assert np.isfinite(probs).all()
    assert probs.min() >= 0.0 and probs.max() <= 1.0 + 1e-6
    assert np.allclose(probs.sum(axis=0), 1.0, atol=1e-6)


def test_single_step_windows_larger_than_the_volume(rng):
    model = nn.Conv3d(1, 4, kernel_size=1)
    image = Volume.from_array(rng.random((5, 6, 7)).astype(np.float32), spacing=(0.8, 0.8, 1.5), id="s")
    label, pm = run_single_step(image, model, patch_size=(8, 8, 8))
    assert pm.probs.shape == (4, 5, 6, 7)
    assert np.allclose(pm.probs, predict_probs(image.data[None], model), atol=1e-6)
    assert label.shape == image.shape and label.spacing == image.spacing and label.id == "s"
    assert np.array_equal(label.data, pm.probs.argmax(axis=0))


def test_predict_probs_rejects_bad_arguments(rng):
    array = rng.random((2, 4, 4, 4)).astype(np.float32)
    with pytest.raises(ContractError):
        predict_probs(array, build_network(TINY))
    with pytest.raises(ContractError):
        predict_probs(array[:1], Recorder(), overlap=1.0)


def test_predict_probs_pads_to_the_network_divisor(rng):
    model = build_network(SegmenterConfig(base_width=4, depth=3))
    probs = predict_probs(rng.random((1, 6, 7, 9)).astype(np.float32), model)
    assert probs.shape == (4, 6, 7, 9)
    assert np.allclose(probs.sum(axis=0), 1.0)


def test_sequential_feeds_aorta_probability():
    image = _volume()
    refine = Recorder(4)
    run_sequential(image, Recorder(2), refine)
    assert refine.last_input.shape == (1, 2, 6, 6, 6)
    assert np.allclose(refine.last_input[0, 0].numpy(), 0.5)
    assert np.allclose(refine.last_input[0, 1].numpy(), 0.5)
    with pytest.raises(ContractError):
        run_sequential(image, Recorder(3), Recorder(4))


def test_multitask_gated_classifier_zeroes_flt_branch():
    image = _volume()
    fusion = Recorder(4)
    label, _ = run_multitask(image, FixedLogits(np.array([-3.0])), Exploding(), Recorder(3), fusion,
                             MultitaskOptions(bypass_classifier=False))
    channels = fusion.last_input[0].numpy()
    assert channels.shape == (3, 6, 6, 6)
    assert not channels[1].any()
    assert np.allclose(channels[2], 2.0 / 3.0)
    assert not label.data.any()


def test_multitask_bypass_never_calls_classifier():
    image = _volume()
    fusion = Recorder(4)
    run_multitask(image, Exploding(), Recorder(2), Recorder(3), fusion, MultitaskOptions(bypass_classifier=True))
    assert np.allclose(fusion.last_input[0, 1].numpy(), 0.5)


def test_multitask_confident_classifier_runs_flt_branch():
    fusion = Recorder(4)
    run_multitask(_volume(), FixedLogits(np.array([3.0])), Recorder(2), Recorder(3), fusion,
                  MultitaskOptions(bypass_classifier=False))
    assert np.allclose(fusion.last_input[0, 1].numpy(), 0.5)


def test_multitask_full_fusion_channels():
    fusion = Recorder(4)
    run_multitask(_volume(), None, Recorder(2), Recorder(3), fusion, MultitaskOptions(fusion_channels="full"))
    channels = fusion.last_input[0].numpy()
    assert channels.shape == (5, 6, 6, 6)
    assert np.allclose(channels[2:], 1.0 / 3.0)


def test_multitask_requires_classifier_unless_bypassed():
    with pytest.raises(ContractError):
        run_multitask(_volume(), None, Recorder(2), Recorder(3), Recorder(4), MultitaskOptions(bypass_classifier=False))


def test_fusion_inputs_layouts(rng):
    image = _volume((2, 2, 2))
    flt = rng.random((2, 2, 2))
    tlfl = _softmax(rng.normal(size=(3, 2, 2, 2)))
    fg = fusion_inputs(image, flt, tlfl)
    assert fg.shape == (3, 2, 2, 2)
    assert np.allclose(fg[2], 1.0 - tlfl[0])
    assert fusion_inputs(image, flt, tlfl, "full").shape == (5, 2, 2, 2)
    with pytest.raises(ContractError):
        fusion_inputs(image, flt, tlfl, "mean")


def test_oracle_channels():
    label = np.array([[[0, 1], [2, 3]]])
    assert oracle_channel("aorta", label).tolist() == [[[0.0, 1.0], [1.0, 1.0]]]
    tlfl = oracle_channel("tlfl", label)
    assert tlfl.shape == (3, 1, 2, 2)
    assert np.array_equal(tlfl.argmax(axis=0), stage_target(label, "tlfl"))
    with pytest.raises(ContractError):
        oracle_channel("fusion", label)


def _models(cfg: PipelineConfig) -> dict[str, nn.Module]:
    return {name: build_network(spec.network) for name, spec in cfg.stages.items()}


@pytest.mark.parametrize("kind", ["single_step", "sequential", "multitask", "ensemble"])
def test_pipeline_predicts_on_image_grid(kind):
    image, _ = blocky_case("p")
    cfg = PipelineConfig.standard(kind, TINY)
    prediction = SegmentationPipeline(cfg, _models(cfg)).predict(image)
    assert prediction.label.shape == image.shape
    assert prediction.probs.num_classes == 4
    assert np.allclose(prediction.probs.probs.sum(axis=0), 1.0)
    assert prediction.flt_probability is None
    assert prediction.seconds >= 0.0


def test_pipeline_reports_classifier_probability():
    image, _ = blocky_case("p")
    classifier = ClassifierConfig(block_config=(2, 2), init_features=8, growth_rate=4)
    cfg = PipelineConfig.standard("multitask", TINY, classifier=classifier, bypass_classifier=False)
    prediction = SegmentationPipeline(cfg, _models(cfg)).predict(image)
    assert 0.0 <= prediction.flt_probability <= 1.0


def test_pipeline_with_oracle_inputs_reads_truth():
    image, label = blocky_case("p")
    base = PipelineConfig.standard("sequential", TINY)
    stages = dict(base.stages)
    stages["refine"] = replace(stages["refine"], oracle_inputs=("aorta",))
    cfg = replace(base, stages=stages)
    refine = Recorder(4)
    pipeline = SegmentationPipeline(cfg, {"aorta": Exploding(), "refine": refine})
    with pytest.raises(ContractError):
        pipeline.predict(image)
    pipeline.predict(image, truth=label)
    assert np.array_equal(refine.last_input[0, 1].numpy(), (label.data > 0).astype(np.float32))


def test_pipeline_needs_every_stage_model():
    cfg = PipelineConfig.standard("sequential", TINY)
    with pytest.raises(ContractError):
        SegmentationPipeline(cfg, {"aorta": Recorder(2)})


def test_bypassed_classifier_needs_no_model():
    classifier = ClassifierConfig(block_config=(2, 2))
    cfg = PipelineConfig.standard("multitask", TINY, classifier=classifier)
    models = _models(cfg)
    del models["classifier"]
    SegmentationPipeline(cfg, models)


def test_standard_stage_sets():
    assert list(PipelineConfig.standard("ensemble", TINY).stages) == ["unet3d_0", "swin_unetr_1"]
    full = PipelineConfig.standard("multitask", TINY, fusion_channels="full")
    assert full.stages["fusion"].network.in_channels == 5
    seq = PipelineConfig.standard("sequential", TINY)
    assert seq.stages["refine"].network.seed != seq.stages["aorta"].network.seed


def test_training_order_puts_upstream_first():
    cfg = PipelineConfig.standard("multitask", TINY, classifier=ClassifierConfig())
    assert [s.name for s in cfg.training_order()] == ["classifier", "flt", "tlfl", "fusion"]
    seq = PipelineConfig.standard("sequential", TINY)
    assert [s.name for s in seq.training_order()] == ["aorta", "refine"]


def test_pipeline_config_validation():
    with pytest.raises(ConfigError):
        PipelineConfig(kind="cascade")
    with pytest.raises(ConfigError):
        PipelineConfig(kind="sequential", stages={})
    with pytest.raises(ConfigError):
        PipelineConfig.standard("ensemble", TINY, members=[TINY])
    with pytest.raises(ConfigError):
        PipelineConfig.standard("multitask", TINY, bypass_classifier=False)
    with pytest.raises(ConfigError):
        PipelineConfig.standard("single_step", TINY, overlap=1.0)
    wrong = StageSpec(name="segmenter", network=replace(TINY, out_classes=3))
    with pytest.raises(ConfigError):
        PipelineConfig(kind="single_step", stages={"segmenter": wrong})
    with pytest.raises(ConfigError):
        StageSpec(name="x", network=TINY, target="presence")
    with pytest.raises(ConfigError):
        StageSpec(name="x", network=TINY, oracle_inputs=("aorta",))
