"""Evaluation harness: metric oracles, ranking properties, attention export,
and side-effect freedom."""

import numpy as np
import pytest

from volalign import evaluate
from volalign.corpus import World, WorldConfig
from volalign.encoders import (AlignmentModel, TextEncoderConfig,
                               VisionEncoderConfig, downsample_mask)
from volalign.errors import CheckpointFormatError, EmptyRegionError


def pairwise_auc(scores, labels):
    """Brute-force oracle: fraction of pos/neg pairs ordered correctly."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pos = scores[labels]
    neg = scores[~labels]
    total = correct = 0.0
    for p in pos:
        for q in neg:
            total += 1
            if p > q:
                correct += 1
            elif p == q:
                correct += 0.5
    return correct / total


def test_auc_matches_pairwise_oracle():
    rng = np.random.default_rng(0)
    for n in (5, 20, 100, 200):
        scores = np.round(rng.standard_normal(n), 1)  # force ties
        labels = rng.random(n) < 0.4
        if labels.all() or not labels.any():
            labels[0] = ~labels[0]
        got = evaluate.auc_score(scores, labels)
        assert got == pytest.approx(pairwise_auc(scores, labels), abs=1e-9)


def test_auc_trivial_and_degenerate():
    assert evaluate.auc_score([0, 0, 1, 1], [0, 0, 1, 1]) == 1.0
    assert evaluate.auc_score([0.5] * 4, [0, 1, 0, 1]) == 0.5
    assert np.isnan(evaluate.auc_score([1, 2, 3], [1, 1, 1]))


def test_confusion_metrics_enumerated_case():
    # preds: [1,1,0,0], labels: [1,0,1,0] -> tp=1 fp=1 fn=1 tn=1
    bal, prec, f1 = evaluate.confusion_metrics([1, 1, 0, 0], [1, 0, 1, 0])
    assert bal == pytest.approx(0.5)
    assert prec == pytest.approx(0.5)
    assert f1 == pytest.approx(0.5)
    bal, prec, f1 = evaluate.confusion_metrics([1, 0, 1, 0], [1, 0, 1, 0])
    assert bal == 1.0 and prec == 1.0 and f1 == 1.0


def test_auc_rescaling_invariance():
    rng = np.random.default_rng(1)
    scores = rng.standard_normal(50)
    labels = rng.random(50) < 0.5
    a = evaluate.auc_score(scores, labels)
    b = evaluate.auc_score(scores * 17.0, labels)
    assert a == pytest.approx(b, abs=1e-12)


@pytest.fixture(scope="module")
def setup():
    world = World(WorldConfig(rng_seed=11))
    _, test = world.build_splits(2, 30)
    model = AlignmentModel(
        VisionEncoderConfig(volume_shape=tuple(world.cfg.volume_shape)),
        TextEncoderConfig(vocab_size=len(world.vocab)),
        np.random.default_rng(0))
    return world, test, model


def test_zero_shot_global_report_fields(setup):
    world, test, model = setup
    rep = evaluate.zero_shot_global(model, world, test)
    assert rep.task == "zero_shot_global"
    assert rep.sample_count == len(test)
    assert set(rep.per_disease_auc) == set(world.cfg.anomaly_types)
    for v in (rep.balanced_accuracy, rep.precision, rep.weighted_f1):
        assert 0.0 <= v <= 1.0


def test_zero_shot_local_full_masks_match_global_scoring(setup):
    """Every region mask downsampled covers its cells; no skips expected."""
    world, test, model = setup
    rep = evaluate.zero_shot_local(model, world, test)
    assert "skipped_regions" not in rep.extra
    assert rep.sample_count == len(test) * world.cfg.regions


def test_zero_shot_local_crop_emulation_runs(setup):
    world, test, model = setup
    rep = evaluate.zero_shot_local(model, world, test[:8],
                                   use_crop_emulation=True)
    assert rep.sample_count == 8 * world.cfg.regions


def test_report_retrieval_monotone_and_bounds(setup):
    world, test, model = setup
    rep = evaluate.report_retrieval(model, world, test, ks=(5, 10, 30))
    assert 0.0 <= rep.recall_at[5] <= rep.recall_at[10] <= rep.recall_at[30]
    assert rep.recall_at[30] == 1.0  # pool size == 30


def test_retrieval_tie_break_by_index():
    sims = np.zeros((6, 6))  # all ties -> stable order = index order
    ranks = evaluate._rank_of_truth(sims)
    np.testing.assert_array_equal(ranks, np.arange(6))


def test_region_grounding_monotone(setup):
    world, test, model = setup
    rep = evaluate.region_grounding(model, world, test, ks=(10, 50))
    assert rep.extra["top10_accuracy"] <= rep.extra["top50_accuracy"]
    small = evaluate.region_grounding(model, world, test[:2], ks=(10,))
    assert small.extra["top10_accuracy"] == 1.0  # pool of 8 <= 10


def test_attention_grid_contracts(setup):
    world, test, model = setup
    sample = test[0]
    grid = evaluate.attention_grid(model, sample.volume)
    assert grid.shape == model.vision.cfg.grid
    assert 0.0 < grid.sum() <= 1.0 + 1e-6  # CLS-to-CLS mass excluded
    masked = evaluate.attention_grid(model, sample.volume, sample.masks[0])
    active = downsample_mask(sample.masks[0], model.vision.cfg)
    assert np.all(masked[~active] == 0.0)
    assert masked[active].sum() > 0.0
    with pytest.raises(EmptyRegionError):
        evaluate.attention_grid(model, sample.volume,
                                np.zeros_like(sample.masks[0]))


def test_attention_file_roundtrip(tmp_path, setup):
    world, test, model = setup
    grid = evaluate.attention_grid(model, test[0].volume)
    path = tmp_path / "a.mv3a"
    evaluate.write_attention_file(path, grid)
    back = evaluate.read_attention_file(path)
    np.testing.assert_array_equal(back, grid.astype(np.float32))
    bad = tmp_path / "bad.mv3a"
    bad.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(CheckpointFormatError):
        evaluate.read_attention_file(bad)


def test_crop_to_mask_preserves_content(setup):
    world, test, model = setup
    s = test[0]
    out = evaluate.crop_to_mask(s.volume, s.masks[0])
    assert out.shape == s.volume.shape
    assert out.sum() != 0.0
    with pytest.raises(EmptyRegionError):
        evaluate.crop_to_mask(s.volume, np.zeros_like(s.masks[0]))


def test_evaluation_side_effect_free(setup):
    world, test, model = setup
    before = {k: v.data.copy() for k, v in model.named_params().items()}
    evaluate.zero_shot_global(model, world, test[:5])
    evaluate.zero_shot_local(model, world, test[:5])
    evaluate.report_retrieval(model, world, test[:5])
    evaluate.region_grounding(model, world, test[:5])
    evaluate.attention_grid(model, test[0].volume)
    for k, v in model.named_params().items():
        assert np.array_equal(v.data, before[k]), k
