"""Dual-pathway vision encoder and token-sequence text encoder.

The vision encoder turns a volume into non-overlapping patch tokens, runs them
through ``depth - 1`` transformer blocks to get latent tokens, then a shared
final block over either all tokens (global pathway) or the mask-selected
subset (region pathway). In both pathways a learned [CLS] token is prepended
right before the final block, so a full-volume mask reproduces the global
embedding exactly.

Text: [CLS]-prefixed transformer over token ids, [CLS] output projected into
the shared space. All emitted embeddings are unit L2 norm.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .errors import ConfigError, EmptyRegionError, ShapeMismatchError

CLS_ID = 0
PAD_ID = 1


@dataclass
class VisionEncoderConfig:
    volume_shape: tuple = (16, 32, 32)
    patch_size: tuple = (8, 8, 8)
    embed_dim: int = 48
    depth: int = 3
    heads: int = 2
    proj_dim: int = 32

    def __post_init__(self):
        for v, p in zip(self.volume_shape, self.patch_size):
            if v % p != 0:
                raise ConfigError(
                    f"volume shape {self.volume_shape} not divisible by patch {self.patch_size}"
                )
        if self.depth < 2:
            raise ConfigError("vision encoder needs depth >= 2 (shared final block)")
        if self.embed_dim % self.heads != 0:
            raise ConfigError("embed_dim must be divisible by heads")

    @property
    def grid(self):
        return tuple(v // p for v, p in zip(self.volume_shape, self.patch_size))

    @property
    def num_tokens(self):
        d, h, w = self.grid
        return d * h * w


@dataclass
class TextEncoderConfig:
    vocab_size: int = 64
    max_len: int = 96
    embed_dim: int = 48
    depth: int = 2
    heads: int = 2
    proj_dim: int = 32

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ConfigError("embed_dim must be divisible by heads")


def downsample_mask(mask: np.ndarray, cfg: VisionEncoderConfig) -> np.ndarray:
    """Voxel mask -> patch-grid cells whose mask fraction is >= 0.5 (inclusive)."""
    if mask.shape != tuple(cfg.volume_shape):
        raise ShapeMismatchError(
            f"mask shape {mask.shape} does not match volume {cfg.volume_shape}"
        )
    (D, H, W), (pd, ph, pw) = cfg.volume_shape, cfg.patch_size
    frac = (
        mask.reshape(D // pd, pd, H // ph, ph, W // pw, pw)
        .mean(axis=(1, 3, 5))
    )
    return frac >= 0.5


class VisionEncoder:
    def __init__(self, cfg: VisionEncoderConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        pd, ph, pw = cfg.patch_size
        e = cfg.embed_dim
        p = {}
        nn.init_linear(p, rng, "patch", pd * ph * pw, e, dtype)
        p["pos"] = Tensor(rng.standard_normal((cfg.num_tokens, e)) * 0.02,
                          requires_grad=True, dtype=dtype)
        p["cls"] = Tensor(rng.standard_normal(e) * 0.02, requires_grad=True, dtype=dtype)
        for i in range(cfg.depth):
            nn.init_block(p, rng, f"block{i}", e, dtype=dtype)
        nn.init_layer_norm(p, "final_ln", e, dtype)
        p["proj.w"] = Tensor(rng.standard_normal((e, cfg.proj_dim)) / np.sqrt(e),
                             requires_grad=True, dtype=dtype)
        self.params = p

    # -- patch tokens -------------------------------------------------------

    def patch_embed(self, volumes: np.ndarray) -> Tensor:
        """[B, D, H, W] volumes -> [B, T, E] tokens with positions added."""
        cfg = self.cfg
        if volumes.shape[1:] != tuple(cfg.volume_shape):
            raise ShapeMismatchError(
                f"volume shape {volumes.shape[1:]} does not match config {cfg.volume_shape}"
            )
        b = volumes.shape[0]
        (D, H, W), (pd, ph, pw) = cfg.volume_shape, cfg.patch_size
        d, h, w = cfg.grid
        patches = (
            volumes.reshape(b, d, pd, h, ph, w, pw)
            .transpose(0, 1, 3, 5, 2, 4, 6)
            .reshape(b, cfg.num_tokens, pd * ph * pw)
        ).astype(self.dtype)
        tokens = nn.linear(Tensor(patches, dtype=self.dtype), self.params, "patch")
        return ad.add(tokens, self.params["pos"])

    def latent(self, volumes: np.ndarray) -> Tensor:
        """Patch tokens refined by blocks 0..depth-2 (no [CLS] yet)."""
        x = self.patch_embed(volumes)
        for i in range(self.cfg.depth - 1):
            x = nn.transformer_block(x, self.params, f"block{i}", self.cfg.heads)
        return x

    # -- shared final-block head -------------------------------------------

    def _head(self, tokens: Tensor, key_mask=None, capture=None) -> Tensor:
        """Prepend [CLS], run the shared final block, project + normalize."""
        b, t, e = tokens.shape
        cls = ad.reshape(self.params["cls"], (1, 1, e))
        cls = ad.mul(Tensor(np.ones((b, 1, 1), dtype=self.dtype)), cls)
        x = ad.concat([cls, tokens], axis=1)
        if key_mask is not None:
            key_mask = np.concatenate(
                [np.ones((b, 1), dtype=bool), key_mask], axis=1
            )
        x = nn.transformer_block(x, self.params, f"block{self.cfg.depth - 1}",
                                 self.cfg.heads, key_mask, capture)
        x = nn.layer_norm(x, self.params, "final_ln")
        cls_out = ad.gather_rows(ad.transpose(x, (1, 0, 2)), np.array(0))
        return ad.l2_normalize(ad.matmul(cls_out, self.params["proj.w"]))

    def encode_global(self, volumes: np.ndarray, capture=None) -> Tensor:
        """[B, D, H, W] -> unit-norm [B, proj_dim]."""
        return self._head(self.latent(volumes), capture=capture)

    def encode_regions(self, latent: Tensor, batch_index: np.ndarray,
                       active: np.ndarray, capture=None) -> Tensor:
        """Batched region pathway.

        latent: [B, T, E]; batch_index: int [M]; active: bool [M, T] where row
        m selects active grid cells for one (sample, region) pair. Rows with
        zero active cells raise EmptyRegionError. Returns unit-norm [M, proj].
        """
        b, t, e = latent.shape
        m = active.shape[0]
        counts = active.sum(axis=1)
        if np.any(counts == 0):
            bad = int(np.argmax(counts == 0))
            raise EmptyRegionError(f"region entry {bad} selects zero grid cells")
        max_a = int(counts.max())
        # flat indices into [B*T]; padding points at token 0 and is masked out
        idx = np.zeros((m, max_a), dtype=np.int64)
        mask = np.zeros((m, max_a), dtype=bool)
        for j in range(m):
            cells = np.flatnonzero(active[j])
            idx[j, : cells.size] = batch_index[j] * t + cells
            mask[j, : cells.size] = True
        flat = ad.reshape(latent, (b * t, e))
        selected = ad.gather_rows(flat, idx)  # [M, max_a, E]
        return self._head(selected, key_mask=mask, capture=capture)

    def encode_region(self, volume: np.ndarray, mask: np.ndarray, capture=None) -> Tensor:
        """Single-volume convenience: voxel mask -> unit-norm [proj_dim]."""
        grid = downsample_mask(mask, self.cfg)
        latent = self.latent(volume[None])
        emb = self.encode_regions(latent, np.array([0]),
                                  grid.reshape(1, -1), capture=capture)
        return ad.gather_rows(emb, np.array(0))


class TextEncoder:
    def __init__(self, cfg: TextEncoderConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        e = cfg.embed_dim
        p = {}
        p["tok"] = Tensor(rng.standard_normal((cfg.vocab_size, e)) * 0.02,
                          requires_grad=True, dtype=dtype)
        p["pos"] = Tensor(rng.standard_normal((cfg.max_len + 1, e)) * 0.02,
                          requires_grad=True, dtype=dtype)
        for i in range(cfg.depth):
            nn.init_block(p, rng, f"block{i}", e, dtype=dtype)
        nn.init_layer_norm(p, "final_ln", e, dtype)
        p["proj.w"] = Tensor(rng.standard_normal((e, cfg.proj_dim)) / np.sqrt(e),
                             requires_grad=True, dtype=dtype)
        self.params = p

    def pad_batch(self, sequences):
        """Token id lists -> ([B, L+1] ids with [CLS] prefix, bool key mask)."""
        cfg = self.cfg
        seqs = [list(s)[: cfg.max_len] for s in sequences]
        for s in seqs:
            for tok in s:
                if not 0 <= tok < cfg.vocab_size:
                    raise ConfigError(f"token id {tok} out of vocabulary")
        width = 1 + max((len(s) for s in seqs), default=0)
        ids = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
        mask = np.zeros((len(seqs), width), dtype=bool)
        ids[:, 0] = CLS_ID
        mask[:, 0] = True
        for j, s in enumerate(seqs):
            ids[j, 1 : 1 + len(s)] = s
            mask[j, 1 : 1 + len(s)] = True
        return ids, mask

    def encode(self, sequences) -> Tensor:
        """List of token-id sequences -> unit-norm [B, proj_dim]."""
        ids, mask = self.pad_batch(sequences)
        x = ad.gather_rows(self.params["tok"], ids)
        pos = self.params["pos"]
        x = ad.add(x, ad.gather_rows(pos, np.arange(ids.shape[1])))
        for i in range(self.cfg.depth):
            x = nn.transformer_block(x, self.params, f"block{i}", self.cfg.heads, mask)
        x = nn.layer_norm(x, self.params, "final_ln")
        cls_out = ad.gather_rows(ad.transpose(x, (1, 0, 2)), np.array(0))
        return ad.l2_normalize(ad.matmul(cls_out, self.params["proj.w"]))


class AlignmentModel:
    """Vision + text encoders plus the shared learnable temperature."""

    def __init__(self, vision_cfg: VisionEncoderConfig, text_cfg: TextEncoderConfig,
                 rng: np.random.Generator, init_tau: float = 0.07, dtype=np.float32):
        if vision_cfg.proj_dim != text_cfg.proj_dim:
            raise ConfigError("vision and text proj_dim must match")
        self.vision = VisionEncoder(vision_cfg, rng, dtype)
        self.text = TextEncoder(text_cfg, rng, dtype)
        self.tau_logit = Tensor(np.log(init_tau), requires_grad=True, dtype=dtype)

    def named_params(self):
        out = {}
        for k, v in self.vision.params.items():
            out[f"vision.{k}"] = v
        for k, v in self.text.params.items():
            out[f"text.{k}"] = v
        out["temp.logit"] = self.tau_logit
        return out
