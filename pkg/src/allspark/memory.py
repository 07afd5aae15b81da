"""Class-wise FIFO memory of unlabeled feature channels, and the grouping rule
that decides which class slot each channel goes to."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError, StateError
from .tensor import Tensor


@dataclass
class ProbabilityToken:
    values: np.ndarray  # (d, K)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ShapeError(f"probability token must be d x K, got {self.values.shape}")
        if np.abs(self.values.sum(axis=1) - 1).max(initial=0.0) > 1e-4:
            raise ContractError("probability token rows must sum to 1 within 1e-4")


@dataclass
class ChannelAssignment:
    classes: np.ndarray  # (C,) class index per channel
    num_classes: int
    groups: list = field(init=False)

    def __post_init__(self):
        self.classes = np.asarray(self.classes, dtype=np.int64)
        self.groups = [np.flatnonzero(self.classes == k) for k in range(self.num_classes)]


def _raw(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    if isinstance(x, ProbabilityToken):
        return x.values
    return np.asarray(x)


def channel_class_similarity(feat, ptoken, normalize: bool = False) -> np.ndarray:
    """K x C inner products between probability-token columns and feature channels.

    With `normalize`, each class row is instance-normalised across channels.
    """
    h = _raw(feat)
    p = _raw(ptoken)
    if h.ndim != 2 or p.ndim != 2 or h.shape[0] != p.shape[0]:
        raise ShapeError(f"similarity needs matching token length: feat {h.shape}, token {p.shape}")
    sim = p.T @ h
    if normalize:
        with T.no_grad():
            sim = T.instance_norm_rows(Tensor(sim, dtype=sim.dtype)).data
    return sim


def group_channels(sim) -> ChannelAssignment:
    sim = np.asarray(sim)
    # np.argmax returns the first maximum, i.e. ties go to the lowest class
    return ChannelAssignment(np.argmax(sim, axis=0), sim.shape[0])


class SemanticMemory:
    """K class slots, each a FIFO of at most `capacity` channels of length d.

    Args:
        num_classes: K, background included.
        capacity: channels per slot.
        token_length: d.
        warmup_threshold: below this many stored channels in total,
            `flatten_bank` hands back the fallback tokens instead.
        max_bank_width: optional cap on the flattened bank; exceeded banks are
            uniformly subsampled without replacement.
    """

    def __init__(
        self,
        num_classes: int,
        capacity: int,
        token_length: int,
        warmup_threshold: Optional[int] = None,
        max_bank_width: Optional[int] = None,
        seed: int = 0,
    ):
        if num_classes < 1 or capacity < 1 or token_length < 1:
            raise ContractError("num_classes, capacity and token_length must be positive")
        self.num_classes = num_classes
        self.capacity = capacity
        self.token_length = token_length
        self.warmup_threshold = capacity if warmup_threshold is None else warmup_threshold
        self.max_bank_width = max_bank_width
        self.rng = np.random.default_rng(seed)
        self.clear()

    def clear(self) -> None:
        self.slots = [deque(maxlen=self.capacity) for _ in range(self.num_classes)]
        self.inserted = np.zeros(self.num_classes, dtype=np.int64)

    def __len__(self):
        return int(np.sum(self.occupancy()))

    def occupancy(self) -> list[int]:
        return [len(s) for s in self.slots]

    def enqueue(self, cls: int, channels: np.ndarray) -> None:
        """Append the columns of a (d, n) array to slot `cls`, oldest evicted first."""
        channels = np.asarray(channels)
        if channels.ndim == 1:
            channels = channels[:, None]
        if channels.shape[0] != self.token_length:
            raise ShapeError(f"channels have length {channels.shape[0]}, memory stores {self.token_length}")
        slot = self.slots[cls]
        for j in range(channels.shape[1]):
            slot.append(np.array(channels[:, j], copy=True))
        self.inserted[cls] += channels.shape[1]

    def dequeue(self, cls: int, n: int = 1) -> list[np.ndarray]:
        slot = self.slots[cls]
        return [slot.popleft() for _ in range(min(n, len(slot)))]

    def slot_array(self, cls: int) -> np.ndarray:
        slot = self.slots[cls]
        if not slot:
            return np.zeros((self.token_length, 0))
        return np.stack(slot, axis=1)

    def enqueue_grouped(self, feat, assignment: ChannelAssignment) -> None:
        if isinstance(feat, Tensor):
            if feat.requires_grad:
                raise ContractError("memory stores constants; detach the feature before enqueueing")
            feat = feat.data
        feat = np.asarray(feat)
        if feat.ndim != 2:
            raise ShapeError(f"expected a d x C feature, got {feat.shape}")
        if feat.shape[0] != self.token_length:
            # crop size changed: stored channels no longer comparable
            self.token_length = feat.shape[0]
            self.clear()
        for cls, idx in enumerate(assignment.groups):
            if idx.size:
                self.enqueue(cls, feat[:, idx])

    def flatten_bank(self, fallback: Optional[Tensor] = None) -> Tensor:
        """All stored channels as a d x total constant, class-major then FIFO order."""
        total = len(self)
        if total < self.warmup_threshold or total == 0:
            if fallback is None:
                raise StateError(f"memory holds {total} < {self.warmup_threshold} channels and no fallback given")
            return fallback
        bank = np.concatenate([self.slot_array(k) for k in range(self.num_classes) if self.slots[k]], axis=1)
        if self.max_bank_width is not None and total > self.max_bank_width:
            keep = np.sort(self.rng.choice(total, size=self.max_bank_width, replace=False))
            bank = bank[:, keep]
        return Tensor(bank)

    def snapshot(self) -> list[np.ndarray]:
        return [self.slot_array(k) for k in range(self.num_classes)]


def csg_update(memory: SemanticMemory, feats, ptokens, normalize: bool = False) -> list[ChannelAssignment]:
    """Group each unlabeled feature's channels and enqueue them, in batch order.

    feats: (B, d, C) or (d, C); ptokens: matching (B, d, K) or (d, K).
    """
    h = _raw(feats)
    p = _raw(ptokens)
    if h.ndim == 2:
        h, p = h[None], p[None]
    out = []
    for hb, pb in zip(h, p):
        a = group_channels(channel_class_similarity(hb, pb, normalize))
        memory.enqueue_grouped(hb, a)
        out.append(a)
    return out
