"""Training loop: encode, query the bank, compute losses, update, enqueue.

Step ordering mirrors the pretraining pseudo-code: bank retrieval happens
before the parameter update and the enqueue of the current batch strictly
after it, so retrieval at step t only ever sees embeddings from steps < t.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import losses
from .autodiff import Tape, Tensor
from .bank import SemanticBank
from .corpus import PairedSample, World
from .encoders import (AlignmentModel, TextEncoderConfig, VisionEncoderConfig,
                       downsample_mask)
from .errors import ConfigError, ContractError, EmptyBatchError
from .losses import LossBundle, Temperature

LOSS_MODES = ("global_only", "local_only", "multiscale", "multiscale_semantic")


@dataclass
class TrainConfig:
    batch_size: int = 16
    steps: int = 2000
    lr: float = 1e-4
    warmup_steps: int = 200
    weight_decay: float = 1e-5
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    loss_mode: str = "multiscale_semantic"
    bank_capacity: int = 4096
    seed: int = 0
    init_tau: float = 0.07
    freeze_text: bool = False
    symmetric_semantic: bool = False
    cross_region_negatives: bool = False
    full_wrap: bool = False
    # Scale on the two semantic terms. With a 1000-sample corpus the
    # nearest-neighbor targets are noisy enough that full weight 1.0
    # destabilizes late training; 1/3 keeps both alignment and retrieval
    # quality.
    semantic_weight: float = 1.0 / 3.0

    def __post_init__(self):
        if self.warmup_steps >= self.steps:
            raise ConfigError("warmup_steps must be < steps")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to cfg.lr, then cosine decay to zero."""
    if step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.steps - cfg.warmup_steps)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def adamw_step(params: dict, moments_m: dict, moments_v: dict, t: int,
               lr: float, cfg: TrainConfig, skip=()):
    """Decoupled-weight-decay Adam update over a named parameter dict."""
    b1, b2 = cfg.betas
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        if name in skip:
            p.zero_grad()
            continue
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise ContractError(f"non-finite gradient on parameter {name!r}")
        m = moments_m[name]
        v = moments_v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
        p.data -= np.asarray(lr, dtype=p.dtype) * update
        if cfg.weight_decay:
            p.data -= np.asarray(lr * cfg.weight_decay, dtype=p.dtype) * p.data
        p.zero_grad()


class Trainer:
    def __init__(self, world: World, cfg: TrainConfig,
                 vision_cfg: Optional[VisionEncoderConfig] = None,
                 text_cfg: Optional[TextEncoderConfig] = None):
        self.world = world
        self.cfg = cfg
        self.vision_cfg = vision_cfg or VisionEncoderConfig(
            volume_shape=tuple(world.cfg.volume_shape)
        )
        self.text_cfg = text_cfg or TextEncoderConfig(vocab_size=len(world.vocab))
        if self.text_cfg.vocab_size != len(world.vocab):
            raise ConfigError("text encoder vocab_size does not match world vocabulary")
        root = np.random.SeedSequence(cfg.seed)
        init_ss, batch_ss = root.spawn(2)
        self.model = AlignmentModel(self.vision_cfg, self.text_cfg,
                                    np.random.Generator(np.random.PCG64(init_ss)),
                                    init_tau=cfg.init_tau)
        self.temp = Temperature(self.model.tau_logit)
        self.bank = SemanticBank(cfg.bank_capacity, self.vision_cfg.proj_dim,
                                 full_wrap=cfg.full_wrap)
        params = self.model.named_params()
        self.moments_m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.moments_v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.rng = np.random.Generator(np.random.PCG64(batch_ss))
        self.step_count = 0

    # -- batch plumbing -----------------------------------------------------

    def _region_stacks(self, batch: List[PairedSample]):
        """Active grid cells and validity for every (region, sample) pair."""
        n = len(batch)
        r_count = self.world.cfg.regions
        t = self.vision_cfg.num_tokens
        valid = np.zeros((r_count, n), dtype=bool)
        rows, batch_index = [], []
        slot = np.full((r_count, n), -1, dtype=np.int64)
        for r in range(r_count):
            for i, s in enumerate(batch):
                grid = downsample_mask(s.masks[r], self.vision_cfg)
                if grid.any():
                    valid[r, i] = True
                    slot[r, i] = len(rows)
                    rows.append(grid.reshape(-1))
                    batch_index.append(i)
        if not rows:
            raise EmptyBatchError("no valid regions in batch")
        return (valid, np.array(batch_index), np.array(rows), slot)

    def _scatter_regions(self, flat: Tensor, slot: np.ndarray) -> Tensor:
        """[M, P] valid-region rows -> [R, N, P], dummy unit rows when invalid."""
        from . import autodiff as ad
        r, n = slot.shape
        p = flat.shape[1]
        dummy = np.zeros((1, p), dtype=flat.dtype)
        dummy[0, 0] = 1.0
        ext = ad.concat([flat, Tensor(dummy, dtype=flat.dtype)], axis=0)
        idx = np.where(slot >= 0, slot, flat.shape[0]).reshape(-1)
        return ad.reshape(ad.gather_rows(ext, idx), (r, n, p))

    # -- one optimization step ---------------------------------------------

    def train_step(self, batch: List[PairedSample]) -> LossBundle:
        if not batch:
            raise EmptyBatchError("empty training batch")
        cfg = self.cfg
        mode = cfg.loss_mode
        n = len(batch)
        r_count = self.world.cfg.regions
        volumes = np.stack([s.volume for s in batch])
        semantic = mode == "multiscale_semantic"
        need_local = mode in ("local_only", "multiscale", "multiscale_semantic")
        need_global = mode in ("global_only", "multiscale", "multiscale_semantic")

        bundle = LossBundle()
        from . import autodiff as ad
        with Tape() as tape:
            latent = self.model.vision.latent(volumes)
            v_g = None
            if need_global or semantic:
                v_g = self.model.vision._head(latent)
            v_r = valid = None
            if need_local or semantic:
                valid, batch_index, rows, slot = self._region_stacks(batch)
                flat = self.model.vision.encode_regions(latent, batch_index, rows)
                v_r = self._scatter_regions(flat, slot)

            # one padded text-encoder call per width class: noisy + enriched
            # region sentences together, reports + enriched reports together
            t_g = t_r = t_hat_g = t_hat_r = t_gnn = t_rnn = None
            region_seqs = []
            if need_local:
                region_seqs += [batch[i].region_texts[r]
                                for r in range(r_count) for i in range(n)]
            if semantic:
                region_seqs += [batch[i].enriched_region_texts[r]
                                for r in range(r_count) for i in range(n)]
            if region_seqs:
                enc = self.model.text.encode(region_seqs)
                p = enc.shape[1]
                if need_local and semantic:
                    enc = ad.reshape(enc, (2, r_count, n, p))
                    t_r = ad.gather_rows(enc, np.array(0))
                    t_hat_r = ad.gather_rows(enc, np.array(1))
                elif need_local:
                    t_r = ad.reshape(enc, (r_count, n, p))
                else:
                    t_hat_r = ad.reshape(enc, (r_count, n, p))
            report_seqs = []
            if need_global:
                report_seqs += [s.report for s in batch]
            if semantic:
                report_seqs += [s.enriched_report for s in batch]
            if report_seqs:
                enc = self.model.text.encode(report_seqs)
                if need_global and semantic:
                    t_g = ad.gather_rows(enc, np.arange(n))
                    t_hat_g = ad.gather_rows(enc, np.arange(n, 2 * n))
                elif need_global:
                    t_g = enc
                else:
                    t_hat_g = enc

            if semantic:
                # retrieval before this batch is enqueued; cold bank -> self
                if self.bank.filled == 0:
                    t_gnn = Tensor(t_hat_g.data.copy())
                    t_rnn = Tensor(t_hat_r.data.copy())
                else:
                    t_gnn = Tensor(self.bank.query_batch_top1(t_hat_g.data))
                    nn_flat = self.bank.query_batch_top1(
                        t_hat_r.data.reshape(r_count * n, -1)
                    )
                    t_rnn = Tensor(nn_flat.reshape(t_hat_r.shape))

            if mode == "global_only":
                total = losses.global_loss(v_g, t_g, self.temp)
                bundle.global_align = total.item()
            elif mode == "local_only":
                total = losses.local_loss(v_r, t_r, valid, self.temp,
                                          cfg.cross_region_negatives)
                bundle.local_align = total.item()
            elif mode == "multiscale":
                lg = losses.global_loss(v_g, t_g, self.temp)
                ll = losses.local_loss(v_r, t_r, valid, self.temp,
                                       cfg.cross_region_negatives)
                total = losses.multiscale_loss(lg, ll)
                bundle.global_align = lg.item()
                bundle.local_align = ll.item()
                bundle.multiscale = total.item()
            else:
                lg = losses.global_loss(v_g, t_g, self.temp)
                ll = losses.local_loss(v_r, t_r, valid, self.temp,
                                       cfg.cross_region_negatives)
                lms = losses.multiscale_loss(lg, ll)
                lgs = losses.global_semantic_loss(v_g, t_gnn, self.temp,
                                                  cfg.symmetric_semantic)
                lls = losses.local_semantic_loss(v_r, t_rnn, valid, self.temp,
                                                 cfg.symmetric_semantic,
                                                 cfg.cross_region_negatives)
                sem = ad.add(lgs, lls)
                if cfg.semantic_weight != 1.0:
                    sem = ad.scale(sem, cfg.semantic_weight)
                total = ad.add(lms, sem)
                bundle.global_align = lg.item()
                bundle.local_align = ll.item()
                bundle.multiscale = lms.item()
                bundle.global_semantic = lgs.item()
                bundle.local_semantic = lls.item()
            bundle.total = total.item()
            bundle.total_tensor = total
            tape.backward(total)

        lr = lr_at(self.step_count, cfg)
        skip = tuple(k for k in self.model.named_params()
                     if cfg.freeze_text and k.startswith("text."))
        adamw_step(self.model.named_params(), self.moments_m, self.moments_v,
                   self.step_count + 1, lr, cfg, skip=skip)
        self.temp.clamp()

        if semantic:
            self.bank.enqueue(t_hat_g.data.copy())
            self.bank.enqueue(t_hat_r.data.reshape(r_count * n, -1).copy())
        self.step_count += 1
        return bundle

    def sample_batch(self, samples: List[PairedSample]) -> List[PairedSample]:
        idx = self.rng.integers(0, len(samples), size=self.cfg.batch_size)
        return [samples[i] for i in idx]

    def run(self, samples: List[PairedSample], steps: Optional[int] = None,
            on_step=None) -> List[LossBundle]:
        """Train for ``steps`` more steps (default: up to cfg.steps)."""
        target = self.cfg.steps if steps is None else self.step_count + steps
        history = []
        while self.step_count < target:
            bundle = self.train_step(self.sample_batch(samples))
            history.append(bundle)
            if on_step is not None:
                on_step(self, bundle)
        return history
