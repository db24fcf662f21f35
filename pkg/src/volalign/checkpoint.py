"""Checkpoint serialization.

Layout (little-endian, see FORMATS.md):

    magic "MV3D" | u32 version
    u32 json_len | config JSON (train/vision/text/world configs + step)
    u32 n_tensors | per tensor: u16 name_len | name | u8 rank | u32 extents
                    | float32 payload
    bank block: u32 capacity | u32 dim | u32 ptr | u32 filled | float32 store
    rng block:  u32 len | bit-generator state JSON

Tensors cover model parameters and both Adam moment sets; save -> load ->
save round-trips to identical bytes and resumed training is bitwise
identical to an uninterrupted run.
"""

from __future__ import annotations

import dataclasses
import json
import struct

import numpy as np

from .corpus import World
from .dataio import world_config_from_dict, world_config_to_dict
from .encoders import TextEncoderConfig, VisionEncoderConfig
from .errors import CheckpointFormatError
from .trainer import TrainConfig, Trainer

MAGIC = b"MV3D"
VERSION = 1


def _read_exact(f, n):
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointFormatError(
            f"truncated checkpoint at offset {f.tell()} (wanted {n} bytes)"
        )
    return buf


def _write_tensor(f, name: str, arr: np.ndarray):
    nb = name.encode()
    f.write(struct.pack("<H", len(nb)))
    f.write(nb)
    f.write(struct.pack("<B", arr.ndim))
    for e in arr.shape:
        f.write(struct.pack("<I", e))
    f.write(arr.astype("<f4").tobytes())


def _read_tensor(f):
    (nlen,) = struct.unpack("<H", _read_exact(f, 2))
    name = _read_exact(f, nlen).decode()
    (rank,) = struct.unpack("<B", _read_exact(f, 1))
    shape = tuple(
        struct.unpack("<I", _read_exact(f, 4))[0] for _ in range(rank)
    )
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(_read_exact(f, 4 * count), dtype="<f4").reshape(shape)
    return name, data.copy()


def _cfg_dicts(trainer: Trainer) -> dict:
    return {
        "train": dataclasses.asdict(trainer.cfg),
        "vision": dataclasses.asdict(trainer.vision_cfg),
        "text": dataclasses.asdict(trainer.text_cfg),
        "world": world_config_to_dict(trainer.world.cfg),
        "step": trainer.step_count,
    }


def save_checkpoint(path, trainer: Trainer):
    tensors = {}
    for k, p in trainer.model.named_params().items():
        tensors[f"param.{k}"] = p.data
    for k, m in trainer.moments_m.items():
        tensors[f"adam_m.{k}"] = m
    for k, v in trainer.moments_v.items():
        tensors[f"adam_v.{k}"] = v
    blob = json.dumps(_cfg_dicts(trainer), sort_keys=True).encode()
    rng_blob = json.dumps(trainer.rng.bit_generator.state, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            _write_tensor(f, name, tensors[name])
        bank = trainer.bank
        f.write(struct.pack("<IIII", bank.capacity, bank.dim, bank.ptr, bank.filled))
        f.write(bank.store.astype("<f4").tobytes())
        f.write(struct.pack("<I", len(rng_blob)))
        f.write(rng_blob)


def load_checkpoint(path) -> Trainer:
    with open(path, "rb") as f:
        if _read_exact(f, 4) != MAGIC:
            raise CheckpointFormatError(f"{path}: bad magic (offset 0)")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != VERSION:
            raise CheckpointFormatError(
                f"{path}: unsupported checkpoint version {version}"
            )
        (jlen,) = struct.unpack("<I", _read_exact(f, 4))
        cfg = json.loads(_read_exact(f, jlen))
        world = World(world_config_from_dict(cfg["world"]))
        train_cfg = TrainConfig(**{**cfg["train"],
                                   "betas": tuple(cfg["train"]["betas"])})
        vision_cfg = VisionEncoderConfig(**{
            **cfg["vision"],
            "volume_shape": tuple(cfg["vision"]["volume_shape"]),
            "patch_size": tuple(cfg["vision"]["patch_size"]),
        })
        text_cfg = TextEncoderConfig(**cfg["text"])
        trainer = Trainer(world, train_cfg, vision_cfg, text_cfg)
        trainer.step_count = int(cfg["step"])

        (n_tensors,) = struct.unpack("<I", _read_exact(f, 4))
        params = trainer.model.named_params()
        for _ in range(n_tensors):
            name, data = _read_tensor(f)
            kind, key = name.split(".", 1)
            if kind == "param":
                if key not in params:
                    raise CheckpointFormatError(f"unknown parameter {key!r}")
                if params[key].shape != data.shape:
                    raise CheckpointFormatError(
                        f"parameter {key!r} shape {data.shape} != model {params[key].shape}"
                    )
                params[key].data = data.astype(params[key].dtype)
            elif kind == "adam_m":
                trainer.moments_m[key] = data
            elif kind == "adam_v":
                trainer.moments_v[key] = data
            else:
                raise CheckpointFormatError(f"unknown tensor kind {kind!r}")

        cap, dim, ptr, filled = struct.unpack("<IIII", _read_exact(f, 16))
        if cap != trainer.bank.capacity or dim != trainer.bank.dim:
            raise CheckpointFormatError("bank geometry does not match config")
        store = np.frombuffer(_read_exact(f, 4 * cap * dim), dtype="<f4")
        trainer.bank.store = store.reshape(cap, dim).copy()
        trainer.bank.ptr = ptr
        trainer.bank.filled = filled

        (rlen,) = struct.unpack("<I", _read_exact(f, 4))
        trainer.rng.bit_generator.state = json.loads(_read_exact(f, rlen))
        if f.read(1):
            raise CheckpointFormatError(f"{path}: trailing bytes")
    return trainer
