"""Brute-force mutual information on small discrete joints.

Used to verify two claims the contrastive objective rests on: the InfoNCE
lower bound (log N minus the loss never exceeds the true MI, and a trained
critic approaches it) and the chain-rule inequality for the unified
global+local variables. All values are in nats.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ContractError
from .losses import Temperature, info_nce

_MASS_TOL = 1e-12


def _validate(table: np.ndarray) -> np.ndarray:
    table = np.asarray(table, dtype=np.float64)
    if np.any(table < 0):
        raise ContractError("joint table has negative entries")
    if abs(table.sum() - 1.0) > _MASS_TOL:
        raise ContractError(f"joint table mass {table.sum()!r} != 1")
    return table


def brute_force_mi(table: np.ndarray) -> float:
    """I(A;B) = sum p(a,b) log(p(a,b)/(p(a)p(b))), 0 log 0 = 0, in nats."""
    table = _validate(table)
    if table.ndim != 2:
        raise ContractError(f"brute_force_mi expects a 2-d joint, got {table.ndim}-d")
    pa = table.sum(axis=1, keepdims=True)
    pb = table.sum(axis=0, keepdims=True)
    nz = table > 0
    return float((table[nz] * np.log(table[nz] / (pa * pb)[nz])).sum())


# -- joint constructors -----------------------------------------------------


def independent_joint(px, py) -> np.ndarray:
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    return _validate(np.outer(px / px.sum(), py / py.sum()))


def diagonal_joint(k: int) -> np.ndarray:
    """Uniform perfectly-dependent joint: I = log k."""
    return np.eye(k) / k


def random_joint(rng: np.random.Generator, shape, alpha: float = 1.0) -> np.ndarray:
    flat = rng.gamma(alpha, size=int(np.prod(shape)))
    return (flat / flat.sum()).reshape(shape)


def merge_symbols(table: np.ndarray, axis: int, mapping) -> np.ndarray:
    """Coarsen one marginal by mapping old symbols to new ones (data processing)."""
    table = _validate(table)
    mapping = np.asarray(mapping)
    out_shape = list(table.shape)
    out_shape[axis] = int(mapping.max()) + 1
    out = np.zeros(out_shape, dtype=np.float64)
    for old, new in enumerate(mapping):
        idx_src = [slice(None)] * table.ndim
        idx_src[axis] = old
        idx_dst = [slice(None)] * table.ndim
        idx_dst[axis] = int(new)
        out[tuple(idx_dst)] += table[tuple(idx_src)]
    return out


# -- chain-rule inequality --------------------------------------------------


@dataclass
class ChainRuleResult:
    i_unified: float
    i_global: float
    i_local: float
    margin: float
    holds: bool


def chain_rule_check(table: np.ndarray, tol: float = 1e-9) -> ChainRuleResult:
    """Joint over (X_G, X_L, Y_G, Y_L): I((X_G,X_L);(Y_G,Y_L)) >= max(I_G, I_L)."""
    table = _validate(table)
    if table.ndim != 4:
        raise ContractError(f"chain_rule_check expects a 4-d joint, got {table.ndim}-d")
    a, b, c, d = table.shape
    unified = table.transpose(0, 1, 2, 3).reshape(a * b, c * d)
    i_unified = brute_force_mi(unified)
    i_global = brute_force_mi(table.sum(axis=(1, 3)))
    i_local = brute_force_mi(table.sum(axis=(0, 2)))
    margin = i_unified - max(i_global, i_local)
    return ChainRuleResult(i_unified, i_global, i_local, margin, margin >= -tol)


# -- InfoNCE bound check ----------------------------------------------------


@dataclass
class BoundResult:
    bound: float            # -mean(loss) + log N on held-out batches
    true_mi: float
    slack: float            # true_mi - bound
    log_n: float
    n: int
    history: List[float] = field(default_factory=list)

    @property
    def within(self) -> bool:
        return self.bound <= self.true_mi + 0.05 and self.bound <= self.log_n + 1e-6


def sample_pairs(table: np.ndarray, n: int, rng: np.random.Generator):
    """Draw N (x, y) pairs from a 2-d joint.

    When N is at most the x-alphabet size, x symbols are drawn without
    replacement (weighted by the marginal) and y from p(y|x); duplicate
    x rows would otherwise cap the achievable bound below log N even for
    a perfectly dependent joint. Larger N falls back to iid draws.
    """
    kx, ky = table.shape
    px = table.sum(axis=1)
    if n <= kx and np.count_nonzero(px) >= n:
        xs = rng.choice(kx, size=n, replace=False, p=px)
    else:
        xs = rng.choice(kx, size=n, replace=True, p=px)
    ys = np.array([rng.choice(ky, p=table[x] / px[x]) for x in xs])
    return xs, ys


class _SymbolCritic:
    """Inner-product critic: one learnable embedding table per alphabet plus
    a learnable temperature — the same functional family as the main model."""

    def __init__(self, kx: int, ky: int, dim: int, rng: np.random.Generator,
                 init_tau: float = 0.1):
        self.ex = Tensor(rng.standard_normal((kx, dim)) * 0.5,
                         requires_grad=True, dtype=np.float64)
        self.ey = Tensor(rng.standard_normal((ky, dim)) * 0.5,
                         requires_grad=True, dtype=np.float64)
        self.logit = Tensor(np.log(init_tau), requires_grad=True, dtype=np.float64)
        self.temp = Temperature(self.logit)

    def params(self):
        return [self.ex, self.ey, self.logit]

    def loss(self, xs, ys) -> Tensor:
        vx = ad.l2_normalize(ad.gather_rows(self.ex, xs))
        vy = ad.l2_normalize(ad.gather_rows(self.ey, ys))
        return info_nce(vx, vy, self.temp)


def _adam_update(params, moments, t, lr, betas=(0.9, 0.999), eps=1e-8):
    b1, b2 = betas
    for p, (m, v) in zip(params, moments):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        p.zero_grad()


def infonce_bound_check(table: np.ndarray, n: int, n_batches: int = 2000,
                        dim: int = 16, lr: float = 0.05, seed: int = 0,
                        eval_batches: int = 200,
                        eval_every: Optional[int] = None) -> BoundResult:
    """Train symbol embeddings with InfoNCE and report (-loss + log N)."""
    table = _validate(table)
    if table.ndim != 2:
        raise ContractError("infonce_bound_check expects a 2-d joint")
    if n < 2:
        raise ContractError("batch size N must be >= 2")
    rng = np.random.default_rng(seed)
    critic = _SymbolCritic(table.shape[0], table.shape[1], dim, rng)
    moments = [(np.zeros_like(p.data), np.zeros_like(p.data))
               for p in critic.params()]
    eval_every = eval_every or max(1, n_batches // 10)
    history = []

    def estimate(k: int) -> float:
        total = 0.0
        for _ in range(k):
            xs, ys = sample_pairs(table, n, rng)
            total += critic.loss(xs, ys).item()
        return float(np.log(n) - total / k)

    for t in range(1, n_batches + 1):
        xs, ys = sample_pairs(table, n, rng)
        with Tape() as tape:
            loss = critic.loss(xs, ys)
            tape.backward(loss)
        _adam_update(critic.params(), moments, t, lr)
        critic.temp.clamp()
        if t % eval_every == 0:
            history.append(estimate(max(10, eval_batches // 10)))

    bound = estimate(eval_batches)
    true_mi = brute_force_mi(table)
    return BoundResult(bound=bound, true_mi=true_mi, slack=true_mi - bound,
                       log_n=float(np.log(n)), n=n, history=history)
