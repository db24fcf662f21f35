"""Binary split files for the synthetic corpus.

Layout (all integers little-endian, see FORMATS.md):

    magic "MV3C" | u32 version | u32 header_len | header JSON (utf-8)
    then per sample:
        volume   raw float32, D*H*W values
        masks    bit-packed bools, R*D*H*W bits (numpy packbits order)
        texts    2R + 2 sequences, each u32 length + u32 ids
                 (R region, report, R enriched region, enriched report)
        labels   R*K uint8

The header echoes the world config and the vocabulary so a split file is
self-describing and replayable.
"""

from __future__ import annotations

import dataclasses
import json
import struct

import numpy as np

from .corpus import PairedSample, World, WorldConfig
from .errors import CheckpointFormatError

MAGIC = b"MV3C"
VERSION = 1


def world_config_to_dict(cfg: WorldConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["volume_shape"] = list(cfg.volume_shape)
    d["anomaly_types"] = list(cfg.anomaly_types)
    d["blob_params"] = {k: list(v) for k, v in cfg.blob_params.items()}
    d["normal_templates"] = list(cfg.normal_templates)
    d["filler_sentences"] = list(cfg.filler_sentences)
    return d


def world_config_from_dict(d: dict) -> WorldConfig:
    d = dict(d)
    d["volume_shape"] = tuple(d["volume_shape"])
    d["anomaly_types"] = tuple(d["anomaly_types"])
    d["blob_params"] = {k: tuple(v) for k, v in d["blob_params"].items()}
    d["normal_templates"] = tuple(d["normal_templates"])
    d["filler_sentences"] = tuple(d["filler_sentences"])
    return WorldConfig(**d)


def _write_seq(f, ids):
    f.write(struct.pack("<I", len(ids)))
    f.write(np.asarray(ids, dtype="<u4").tobytes())


def _read_seq(f):
    (n,) = struct.unpack("<I", _read_exact(f, 4))
    return list(np.frombuffer(_read_exact(f, 4 * n), dtype="<u4").astype(int))


def _read_exact(f, n):
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointFormatError(
            f"truncated split file at offset {f.tell()} (wanted {n} bytes)"
        )
    return buf


def write_split(path, world: World, samples):
    cfg = world.cfg
    header = {
        "config": world_config_to_dict(cfg),
        "vocab": world.vocab.words,
        "n_samples": len(samples),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for s in samples:
            f.write(s.volume.astype("<f4").tobytes())
            f.write(np.packbits(s.masks.reshape(-1)).tobytes())
            for seq in s.region_texts:
                _write_seq(f, seq)
            _write_seq(f, s.report)
            for seq in s.enriched_region_texts:
                _write_seq(f, seq)
            _write_seq(f, s.enriched_report)
            f.write(s.labels.astype(np.uint8).tobytes())


def read_split(path):
    """Returns (world, samples). The world is rebuilt from the header echo."""
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise CheckpointFormatError(f"{path}: bad magic (offset 0)")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != VERSION:
            raise CheckpointFormatError(f"{path}: unsupported version {version}")
        (hlen,) = struct.unpack("<I", _read_exact(f, 4))
        header = json.loads(_read_exact(f, hlen))
        cfg = world_config_from_dict(header["config"])
        world = World(cfg)
        if world.vocab.words != header["vocab"]:
            raise CheckpointFormatError(f"{path}: vocabulary does not match config")
        D, H, W = cfg.volume_shape
        R, K = cfg.regions, len(cfg.anomaly_types)
        nvox = D * H * W
        nbits = R * nvox
        samples = []
        for _ in range(header["n_samples"]):
            volume = np.frombuffer(_read_exact(f, 4 * nvox), dtype="<f4").reshape(
                D, H, W
            ).copy()
            packed = np.frombuffer(
                _read_exact(f, (nbits + 7) // 8), dtype=np.uint8
            )
            masks = np.unpackbits(packed, count=nbits).reshape(R, D, H, W).astype(bool)
            region_texts = [_read_seq(f) for _ in range(R)]
            report = _read_seq(f)
            enriched_region = [_read_seq(f) for _ in range(R)]
            enriched_report = _read_seq(f)
            labels = np.frombuffer(_read_exact(f, R * K), dtype=np.uint8).reshape(
                R, K
            ).astype(np.int8)
            samples.append(PairedSample(volume, masks, region_texts, report,
                                        enriched_region, enriched_report, labels))
        if f.read(1):
            raise CheckpointFormatError(f"{path}: trailing bytes after last record")
    return world, samples
