"""Fixed-capacity FIFO bank of text embeddings with cosine top-k retrieval.

The enqueue rule follows the queue-update pseudo-code verbatim: when a batch
would run past the end of the store, only the rows that fit are written, the
pointer resets to zero, and the remainder of the batch is discarded. The
optional ``full_wrap`` flag wraps the remainder to the front instead.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, EmptyBankError


class SemanticBank:
    def __init__(self, capacity: int, dim: int, full_wrap: bool = False,
                 dtype=np.float32):
        if capacity < 1 or dim < 1:
            raise ContractError("bank capacity and dim must be positive")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self.full_wrap = bool(full_wrap)
        self.store = np.zeros((capacity, dim), dtype=dtype)
        self.ptr = 0
        self.filled = 0

    def __len__(self):
        return self.filled

    def enqueue(self, batch: np.ndarray):
        """Write a [B, dim] batch of unit-norm rows at the pointer."""
        batch = np.asarray(batch, dtype=self.store.dtype)
        if batch.ndim != 2 or batch.shape[1] != self.dim or batch.shape[0] < 1:
            raise ContractError(
                f"enqueue expects [B, {self.dim}] with B >= 1, got {batch.shape}"
            )
        norms = np.sqrt((batch ** 2).sum(axis=1))
        if np.any(np.abs(norms - 1.0) > 1e-3):
            raise ContractError("enqueued rows must be unit-norm")
        s, b, ptr = self.capacity, batch.shape[0], self.ptr
        if ptr + b >= s:
            fit = s - ptr
            self.store[ptr:s] = batch[:fit]
            self.ptr = 0
            self.filled = s
            if self.full_wrap and b > fit:
                # wrap the remainder to the front instead of dropping it
                rest = batch[fit:][: s]
                self.store[: rest.shape[0]] = rest
                self.ptr = rest.shape[0] % s
        else:
            self.store[ptr : ptr + b] = batch
            self.ptr = ptr + b
            self.filled = min(s, max(self.filled, ptr + b))

    def _similarities(self, query: np.ndarray) -> np.ndarray:
        if self.filled == 0:
            raise EmptyBankError("retrieval from an empty bank")
        query = np.asarray(query, dtype=self.store.dtype)
        if query.shape != (self.dim,):
            raise ContractError(f"query must have shape ({self.dim},), got {query.shape}")
        return self.store[: self.filled] @ query

    def query_top1(self, query: np.ndarray):
        """Return (embedding copy, index, similarity); ties -> lowest index."""
        sims = self._similarities(query)
        idx = int(np.argmax(sims))
        return self.store[idx].copy(), idx, float(sims[idx])

    def query_topk(self, query: np.ndarray, k: int):
        """Top-min(k, filled) rows by similarity, descending, stable ties."""
        if k < 1:
            raise ContractError("k must be >= 1")
        sims = self._similarities(query)
        order = np.argsort(-sims, kind="stable")[: min(k, self.filled)]
        return [(self.store[i].copy(), int(i), float(sims[i])) for i in order]

    def query_batch_top1(self, queries: np.ndarray) -> np.ndarray:
        """Vectorized top-1 over a [B, dim] query batch -> [B, dim] copies."""
        if self.filled == 0:
            raise EmptyBankError("retrieval from an empty bank")
        sims = np.asarray(queries, dtype=self.store.dtype) @ self.store[: self.filled].T
        idx = sims.argmax(axis=1)
        return self.store[idx].copy()

    def state(self):
        return {
            "capacity": self.capacity,
            "dim": self.dim,
            "full_wrap": self.full_wrap,
            "store": self.store.copy(),
            "ptr": self.ptr,
            "filled": self.filled,
        }

    @classmethod
    def from_state(cls, state) -> "SemanticBank":
        bank = cls(state["capacity"], state["dim"], state.get("full_wrap", False))
        bank.store = np.asarray(state["store"], dtype=bank.store.dtype).copy()
        bank.ptr = int(state["ptr"])
        bank.filled = int(state["filled"])
        return bank
