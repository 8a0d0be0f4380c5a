"""Trajectory container: one problem instance as an ordered list of step records."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError


@dataclass
class Trajectory:
    """Step embeddings plus optional per-step correctness, answer ids and token counts.

    ``embeddings`` has shape ``(T, d)``. Optional fields are either absent
    (``None``) or arrays of length ``T``.
    """

    embeddings: np.ndarray
    correct: Optional[np.ndarray] = None
    answer_ids: Optional[np.ndarray] = None
    tokens: Optional[np.ndarray] = None
    id: int = 0
    meta: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self) -> None:
        emb = np.asarray(self.embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] < 1:
            raise ContractError(f"embeddings must be a non-empty (T, d) array, got shape {emb.shape}")
        self.embeddings = emb
        T = emb.shape[0]
        if self.correct is not None:
            self.correct = _check_field("correct", self.correct, T, np.int8)
            if np.any((self.correct != 0) & (self.correct != 1)):
                raise ContractError("correctness bits must be 0 or 1")
        if self.answer_ids is not None:
            self.answer_ids = _check_field("answer_ids", self.answer_ids, T, np.int64)
        if self.tokens is not None:
            self.tokens = _check_field("tokens", self.tokens, T, np.int64)

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.id == other.id
            and self.embeddings.shape == other.embeddings.shape
            and np.array_equal(self.embeddings, other.embeddings)
            and _opt_equal(self.correct, other.correct)
            and _opt_equal(self.answer_ids, other.answer_ids)
            and _opt_equal(self.tokens, other.tokens)
        )


def _check_field(name: str, values: Sequence, T: int, dtype) -> np.ndarray:
    arr = np.asarray(values)
    if arr.shape != (T,):
        raise ContractError(f"{name} must have length {T}, got shape {arr.shape}")
    return arr.astype(dtype)


def _opt_equal(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return np.array_equal(a, b)


def pad_embeddings(trajs: Sequence[Trajectory], budget: Optional[int] = None):
    """Stack trajectories into a zero-padded ``(N, T_max, d)`` array.

    Returns ``(phi, lengths)``; lengths are truncated at ``budget`` when given.
    """
    if not trajs:
        raise ContractError("empty trajectory set")
    d = trajs[0].dim
    lengths = np.array([len(t) for t in trajs], dtype=np.int64)
    if budget is not None:
        lengths = np.minimum(lengths, budget)
    T = int(lengths.max())
    phi = np.zeros((len(trajs), T, d))
    for i, t in enumerate(trajs):
        if t.dim != d:
            raise ContractError(f"trajectory {t.id} has dim {t.dim}, expected {d}")
        phi[i, : lengths[i]] = t.embeddings[: lengths[i]]
    return phi, lengths
