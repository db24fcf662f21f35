"""Contrastive alignment objectives.

Five terms: global, local (per-region negatives), their multi-scale average,
and the two nearest-neighbor semantic terms which are summed without the 1/2
factor the plain terms carry. Similarity is the dot product of unit-norm
embeddings; one shared learnable temperature divides every similarity.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, EmptyBatchError
from .nn import MASK_BIAS

TAU_MIN = 0.01
TAU_MAX = 1.0


class Temperature:
    """Learnable temperature, parameterized as tau = exp(logit)."""

    def __init__(self, logit: Tensor):
        self.logit = logit

    @classmethod
    def fixed(cls, tau: float, dtype=np.float32) -> "Temperature":
        return cls(Tensor(np.log(tau), requires_grad=False, dtype=dtype))

    @property
    def tau(self) -> float:
        return float(np.exp(self.logit.data))

    def inv(self) -> Tensor:
        """1/tau as a tensor on the tape (gradient flows to the logit)."""
        return ad.exp(ad.neg(self.logit))

    def clamp(self):
        self.logit.data = np.clip(
            self.logit.data, np.log(TAU_MIN), np.log(TAU_MAX)
        ).astype(self.logit.dtype)


def _check_unit(x: Tensor, name: str):
    norms = np.sqrt((x.data ** 2).sum(axis=-1))
    if np.any(np.abs(norms - 1.0) > 1e-3):
        worst = float(np.abs(norms - 1.0).max())
        raise ContractError(f"{name} rows must be unit-norm (worst deviation {worst:.2e})")


def info_nce(img: Tensor, txt: Tensor, temp: Temperature) -> Tensor:
    """-1/N sum_i log softmax_j(<img_i, txt_j>/tau)[i]."""
    if img.shape[0] == 0:
        raise EmptyBatchError("info_nce on an empty batch")
    if img.shape != txt.shape:
        raise ContractError(f"info_nce: shape mismatch {img.shape} vs {txt.shape}")
    _check_unit(img, "image embeddings")
    _check_unit(txt, "text embeddings")
    n = img.shape[0]
    logits = ad.mul(ad.matmul(img, ad.transpose(txt, (1, 0))), temp.inv())
    lsm = ad.log_softmax(logits, axis=1)
    eye = Tensor(np.eye(n), dtype=img.dtype)
    return ad.scale(ad.sum_(ad.mul(lsm, eye)), -1.0 / n)


def global_loss(v_g: Tensor, t_g: Tensor, temp: Temperature) -> Tensor:
    """Symmetric average of both InfoNCE directions.

    Implemented as the R=1 case of the local machinery so the reduction
    identity (local with one region == global) holds bitwise.
    """
    n, d = v_g.shape
    return local_loss(ad.reshape(v_g, (1, n, d)), ad.reshape(t_g, (1, n, d)),
                      np.ones((1, n), dtype=bool), temp)


def _masked_info_nce(query: Tensor, keys: Tensor, valid: np.ndarray,
                     temp: Temperature, cross_region: bool) -> Tensor:
    """Per-region InfoNCE over [R, N, d] stacks with a validity mask.

    Invalid entries are dropped from numerators and masked out of every
    softmax denominator; the sum is divided by the valid-entry count.
    """
    r, n, d = query.shape
    valid = np.asarray(valid, dtype=bool)
    count = int(valid.sum())
    if count == 0:
        raise EmptyBatchError("local loss with no valid (region, sample) entries")
    if cross_region:
        q = ad.reshape(query, (r * n, d))
        k = ad.reshape(keys, (r * n, d))
        flat_valid = valid.reshape(r * n)
        logits = ad.mul(ad.matmul(q, ad.transpose(k, (1, 0))), temp.inv())
        bias = np.where(flat_valid, 0.0, MASK_BIAS).astype(query.dtype)
        logits = ad.add(logits, Tensor(bias[None, :], dtype=query.dtype))
        lsm = ad.log_softmax(logits, axis=1)
        w = np.eye(r * n) * flat_valid[:, None]
    else:
        logits = ad.mul(ad.matmul(query, ad.transpose(keys, (0, 2, 1))), temp.inv())
        bias = np.where(valid, 0.0, MASK_BIAS).astype(query.dtype)
        logits = ad.add(logits, Tensor(bias[:, None, :], dtype=query.dtype))
        lsm = ad.log_softmax(logits, axis=2)
        w = np.eye(n)[None, :, :] * valid[:, :, None]
    w_t = Tensor(w, dtype=query.dtype)
    return ad.scale(ad.sum_(ad.mul(lsm, w_t)), -1.0 / count)


def local_loss(v_r: Tensor, t_r: Tensor, valid: np.ndarray, temp: Temperature,
               cross_region: bool = False) -> Tensor:
    """Symmetric per-region contrastive loss over [R, N, d] stacks."""
    _check_unit_valid(v_r, t_r, valid)
    fwd = _masked_info_nce(v_r, t_r, valid, temp, cross_region)
    bwd = _masked_info_nce(t_r, v_r, valid, temp, cross_region)
    return ad.scale(ad.add(fwd, bwd), 0.5)


def _check_unit_valid(v_r: Tensor, t_r: Tensor, valid: np.ndarray):
    valid = np.asarray(valid, dtype=bool)
    for x, name in ((v_r, "region image embeddings"), (t_r, "region text embeddings")):
        norms = np.sqrt((x.data ** 2).sum(axis=-1))
        if np.any(np.abs(norms[valid] - 1.0) > 1e-3):
            raise ContractError(f"{name} must be unit-norm on valid entries")


def global_semantic_loss(v_g: Tensor, t_nn: Tensor, temp: Temperature,
                         symmetric: bool = False) -> Tensor:
    """Sum (not half-sum) of both directions against retrieved neighbors."""
    out = ad.add(info_nce(v_g, t_nn, temp), info_nce(t_nn, v_g, temp))
    return ad.scale(out, 0.5) if symmetric else out


def local_semantic_loss(v_r: Tensor, t_nn: Tensor, valid: np.ndarray,
                        temp: Temperature, symmetric: bool = False,
                        cross_region: bool = False) -> Tensor:
    _check_unit_valid(v_r, t_nn, valid)
    fwd = _masked_info_nce(v_r, t_nn, valid, temp, cross_region)
    bwd = _masked_info_nce(t_nn, v_r, valid, temp, cross_region)
    out = ad.add(fwd, bwd)
    return ad.scale(out, 0.5) if symmetric else out


def multiscale_loss(global_term: Tensor, local_term: Tensor) -> Tensor:
    return ad.scale(ad.add(global_term, local_term), 0.5)


@dataclass
class LossBundle:
    """Named scalar losses for one step; ``total_tensor`` drives backward."""

    global_align: float = 0.0
    local_align: float = 0.0
    multiscale: float = 0.0
    global_semantic: float = 0.0
    local_semantic: float = 0.0
    total: float = 0.0
    total_tensor: Optional[Tensor] = None

    FIELDS = ("global", "local", "multiscale", "global_semantic",
              "local_semantic", "total")

    def as_dict(self):
        return {
            "global": self.global_align,
            "local": self.local_align,
            "multiscale": self.multiscale,
            "global_semantic": self.global_semantic,
            "local_semantic": self.local_semantic,
            "total": self.total,
        }


def combined_loss(v_g, t_g, v_r, t_r, valid, t_gnn, t_rnn, temp,
                  symmetric_semantic: bool = False,
                  cross_region: bool = False) -> LossBundle:
    """Full objective: multiscale average plus both semantic sums."""
    lg = global_loss(v_g, t_g, temp)
    ll = local_loss(v_r, t_r, valid, temp, cross_region)
    lms = multiscale_loss(lg, ll)
    lgs = global_semantic_loss(v_g, t_gnn, temp, symmetric_semantic)
    lls = local_semantic_loss(v_r, t_rnn, valid, temp, symmetric_semantic, cross_region)
    total = ad.add(lms, ad.add(lgs, lls))
    return LossBundle(
        global_align=lg.item(), local_align=ll.item(), multiscale=lms.item(),
        global_semantic=lgs.item(), local_semantic=lls.item(),
        total=total.item(), total_tensor=total,
    )
