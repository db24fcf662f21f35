"""Synthetic corpus: determinism, canonicalizer round trips, signal validity,
label statistics, and the binary split-file format."""

import numpy as np
import pytest

from volalign.corpus import (World, WorldConfig, canonical_absent,
                             canonical_present)
from volalign.dataio import read_split, write_split
from volalign.errors import (CheckpointFormatError, ConfigError,
                             UnmappableTextError)


def test_generation_deterministic_bitwise(small_world):
    a_train, a_test = small_world.build_splits(5, 3)
    b_train, b_test = small_world.build_splits(5, 3)
    for a, b in zip(a_train + a_test, b_train + b_test):
        assert np.array_equal(a.volume, b.volume)
        assert np.array_equal(a.masks, b.masks)
        assert a.report == b.report
        assert a.region_texts == b.region_texts
        assert a.enriched_report == b.enriched_report
        assert np.array_equal(a.labels, b.labels)


def test_train_test_streams_disjoint(small_world):
    train, test = small_world.build_splits(5, 5)
    for a in train:
        for b in test:
            assert not np.array_equal(a.volume, b.volume)


def test_masks_partition_the_volume(small_world, small_splits):
    sample = small_splits[0][0]
    total = sample.masks.sum(axis=0)
    assert np.all(total == 1)  # every voxel in exactly one region


def test_planted_signal_raises_region_mean(small_world):
    """Within a sample, anomalous regions are brighter than clean ones.

    Compared within samples so the per-sample intensity gain/offset
    nuisance cancels out.
    """
    train, _ = small_world.build_splits(40, 1)
    diffs = []
    for s in train:
        means = [s.volume[s.masks[r]].mean()
                 for r in range(small_world.cfg.regions)]
        pos = [m for r, m in enumerate(means) if s.labels[r].any()]
        neg = [m for r, m in enumerate(means) if not s.labels[r].any()]
        if pos and neg:
            diffs.append(np.mean(pos) - np.mean(neg))
    assert len(diffs) > 10
    assert np.mean(diffs) > 0.01


def test_label_rate_matches_config():
    """P(region has any anomaly) is anomaly_prob within binomial slack."""
    world = World(WorldConfig(rng_seed=3))
    train, _ = world.build_splits(400, 1)
    rate = np.mean([s.labels[r].any() for s in train
                    for r in range(world.cfg.regions)])
    p = world.cfg.anomaly_prob
    sigma = np.sqrt(p * (1 - p) / (400 * world.cfg.regions))
    assert abs(rate - p) < 5 * sigma


def test_report_canonicalizes_to_enriched_report(small_world, small_splits):
    vocab = small_world.vocab
    for s in small_splits[0]:
        got = small_world.canonicalize(vocab.detokenize(s.report))
        assert got == vocab.detokenize(s.enriched_report)


def test_canonicalizer_idempotent(small_world, small_splits):
    vocab = small_world.vocab
    for s in small_splits[0][:5]:
        canon = vocab.detokenize(s.enriched_report)
        assert small_world.canonicalize(canon) == canon


def test_canonicalize_every_template_sentence(small_world):
    """Exhaustive: every noisy template maps to its canonical statement."""
    cfg = small_world.cfg
    for r in range(cfg.regions):
        for disease in cfg.anomaly_types:
            for s in small_world.present_sentences[(r, disease)]:
                out = small_world.canonicalize(s)
                assert canonical_present(r, disease) in out
            for s in small_world.absent_sentences[(r, disease)]:
                out = small_world.canonicalize(s)
                assert canonical_absent(r, disease) in out
        for s in small_world.normal_sentences[r]:
            out = small_world.canonicalize(s)
            for disease in cfg.anomaly_types:
                assert canonical_absent(r, disease) in out


def test_fillers_dropped(small_world):
    text = (small_world.cfg.filler_sentences[0] + " "
            + small_world.present_sentences[(0, "nodule")][0])
    out = small_world.canonicalize(text)
    assert "comparison" not in out
    assert canonical_present(0, "nodule") in out


def test_unmappable_text_raises(small_world):
    with pytest.raises(UnmappableTextError):
        small_world.canonicalize("completely unknown sentence .")
    with pytest.raises(UnmappableTextError):
        small_world.canonicalize("no trailing period")


def test_external_rewriter_hook():
    calls = []

    def rewriter(text):
        calls.append(text)
        return "small nodule detected in region 0 ."

    world = World(WorldConfig(), external_rewriter=rewriter)
    out = world.canonicalize("anything")
    assert calls == ["anything"]
    assert canonical_present(0, "nodule") in out


def test_vocabulary_roundtrip_and_oov(small_world):
    vocab = small_world.vocab
    ids = vocab.tokenize("region 0 : nodule present .")
    assert vocab.detokenize(ids) == "region 0 : nodule present ."
    with pytest.raises(ConfigError):
        vocab.tokenize("zebra .")
    assert vocab.words[0] == "[CLS]" and vocab.words[1] == "[PAD]"


def test_prompt_pairs_in_vocabulary(small_world):
    for pair in small_world.global_prompt_pairs():
        assert pair.present and pair.absent
    for r in range(small_world.cfg.regions):
        for pair in small_world.region_prompt_pairs(r):
            assert pair.present != pair.absent


def test_config_validation():
    with pytest.raises(ConfigError):
        # blob support too wide for the region boxes
        World(WorldConfig(blob_params={"opacity": (2.5, 9.0),
                                       "nodule": (4.0, 1.4),
                                       "effusion": (1.8, 2.3)}))
    with pytest.raises(ConfigError):
        # depth 10 cannot contain the widest blob's support
        World(WorldConfig(volume_shape=(10, 30, 30)))
    with pytest.raises(ConfigError):
        # 3 regions force a 1x3 grid that does not divide the 32-wide plane
        World(WorldConfig(regions=3, volume_shape=(16, 32, 32)))


def test_split_file_roundtrip(tmp_path, small_world, small_splits):
    train, _ = small_splits
    path = tmp_path / "train.mv3c"
    write_split(path, small_world, train)
    world2, samples2 = read_split(path)
    assert world2.vocab.words == small_world.vocab.words
    for a, b in zip(train, samples2):
        assert np.array_equal(a.volume, b.volume)
        assert np.array_equal(a.masks, b.masks)
        assert a.report == b.report
        assert a.enriched_region_texts == b.enriched_region_texts
        assert np.array_equal(a.labels, b.labels)
    # identical bytes when written again from the reread samples
    path2 = tmp_path / "again.mv3c"
    write_split(path2, world2, samples2)
    assert path.read_bytes() == path2.read_bytes()


def test_split_file_corruption_detected(tmp_path, small_world, small_splits):
    path = tmp_path / "x.mv3c"
    write_split(path, small_world, small_splits[0][:2])
    raw = path.read_bytes()
    bad_magic = tmp_path / "bad.mv3c"
    bad_magic.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointFormatError):
        read_split(bad_magic)
    truncated = tmp_path / "trunc.mv3c"
    truncated.write_bytes(raw[:-10])
    with pytest.raises(CheckpointFormatError):
        read_split(truncated)
    trailing = tmp_path / "trail.mv3c"
    trailing.write_bytes(raw + b"\x00")
    with pytest.raises(CheckpointFormatError):
        read_split(trailing)
