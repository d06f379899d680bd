"""Prompt-guided grouping of instances into pathological components.

Each component prompt ranks all instances by cosine similarity; the top
``k = max(1, floor(n * beta))`` instances (capped at n) form its group.
Groups may share instances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DataError
from .kernels import top_k as top_k_select  # noqa: F401  (public re-export)


@dataclass
class ComponentGroup:
    component_index: int
    member_indices: np.ndarray
    features: np.ndarray
    scores: np.ndarray


def cosine_similarity(instances, prompts) -> np.ndarray:
    """Similarity matrix W with W[j, i] = cos(instance j, prompt i)."""
    return kernels.cosine_similarity(instances, prompts)


def group_size(n: int, beta: float) -> int:
    if not 0 < beta <= 1:
        raise DataError(f"beta must lie in (0, 1], got {beta}")
    if n < 1:
        raise DataError("cannot group an empty bag")
    # tiny epsilon keeps exact products like 10 * 0.3 from flooring to 2
    return min(n, max(1, math.floor(n * beta + 1e-9)))


def group_indices(sim: np.ndarray, beta: float) -> list[np.ndarray]:
    """Member indices per component column of a similarity matrix."""
    k = group_size(sim.shape[0], beta)
    return [kernels.top_k(np.ascontiguousarray(sim[:, i]), k) for i in range(sim.shape[1])]


def group(instances, prompts, beta: float) -> list[ComponentGroup]:
    x = np.asarray(instances)
    sim = cosine_similarity(x, prompts)
    groups = []
    for i, members in enumerate(group_indices(sim, beta)):
        groups.append(ComponentGroup(i, members, x[members], sim[members, i]))
    return groups
