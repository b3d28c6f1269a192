"""Seed derivation so every Monte-Carlo cell owns an independent stream."""
from __future__ import annotations

from typing import Sequence, Union

import numpy as np
import torch

Rng = Union[torch.Generator, Sequence[torch.Generator]]


def derive_seed(master: int, *keys: int) -> int:
    ss = np.random.SeedSequence(entropy=int(master), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def generator(master: int, *keys: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(master, *keys))
    return g


def generators(master: int, prefix: Sequence[int], n: int) -> list[torch.Generator]:
    """One generator per batch row: keys ``(*prefix, row)``."""
    return [generator(master, *prefix, i) for i in range(n)]


def standard_normal(shape: Sequence[int], rng: Rng, dtype=torch.float32) -> torch.Tensor:
    """Standard normal draws; a list of generators gives one per leading row."""
    if isinstance(rng, torch.Generator):
        return torch.randn(tuple(shape), generator=rng, dtype=dtype)
    if len(rng) != shape[0]:
        raise ValueError(f"{len(rng)} generators for a batch of {shape[0]}")
    return torch.stack([torch.randn(tuple(shape[1:]), generator=g, dtype=dtype) for g in rng])
