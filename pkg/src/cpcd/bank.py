"""Memory bank of per-sample moving-average contrastive embeddings.

Rows live on the unit sphere and are updated once per epoch by averaging
with the sample's freshest embedding and renormalizing. Lookups always
return detached copies; no gradient ever reaches the bank.
"""

from __future__ import annotations

import numpy as np

EMA_COEFFICIENT = 0.5


class MemoryBank:
    def __init__(self, size: int, dim: int, seed: int = 0):
        if size < 1:
            raise ValueError("memory bank needs at least one row")
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBA2C]))
        rows = rng.standard_normal((size, dim))
        self.rows = rows / np.linalg.norm(rows, axis=1, keepdims=True)
        self.initialized = np.ones(size, dtype=bool)
        self.ema_coefficient = EMA_COEFFICIENT

    @property
    def size(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def _check_id(self, sample_id: int) -> None:
        if not 0 <= sample_id < self.size:
            raise IndexError(f"sample id {sample_id} outside bank range 0..{self.size - 1}")

    def lookup_positive(self, sample_id: int) -> np.ndarray:
        self._check_id(sample_id)
        return self.rows[sample_id].copy()

    def sample_negatives(self, sample_id: int, n_neg: int,
                         rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Uniform draw without replacement from every row except the anchor's."""
        self._check_id(sample_id)
        if n_neg > self.size - 1:
            raise ValueError(f"cannot draw {n_neg} negatives from {self.size - 1} other rows")
        pool = np.concatenate([np.arange(sample_id), np.arange(sample_id + 1, self.size)])
        ids = rng.choice(pool, size=n_neg, replace=False)
        return ids, self.rows[ids].copy()

    def update_epoch(self, fresh: dict[int, np.ndarray]) -> list[int]:
        """Blend fresh embeddings into their rows and renormalize.

        Non-finite fresh rows are skipped; the skipped ids are returned so
        the caller can report them.
        """
        skipped: list[int] = []
        for sample_id, vec in fresh.items():
            self._check_id(sample_id)
            vec = np.asarray(vec, dtype=np.float64)
            if vec.shape != (self.dim,):
                raise ValueError(f"fresh row for id {sample_id} has shape {vec.shape}, expected ({self.dim},)")
            if not np.all(np.isfinite(vec)):
                skipped.append(sample_id)
                continue
            blended = self.ema_coefficient * self.rows[sample_id] + (1.0 - self.ema_coefficient) * vec
            norm = np.linalg.norm(blended)
            if norm < 1e-12:
                skipped.append(sample_id)
                continue
            self.rows[sample_id] = blended / norm
            self.initialized[sample_id] = True
        return skipped
