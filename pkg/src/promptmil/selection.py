"""Zero-shot tissue classification of instances and stroma retention."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DimensionMismatch, IndexOutOfRange
from .store import Bag, PromptSet

log = logging.getLogger(__name__)


@dataclass
class SelectionResult:
    kept_indices: np.ndarray  # sorted, strictly increasing
    per_instance_class: np.ndarray
    per_instance_score: np.ndarray

    def to_json(self) -> dict:
        return {
            "kept_indices": self.kept_indices.tolist(),
            "per_instance_class": self.per_instance_class.tolist(),
            "per_instance_score": [float(s) for s in self.per_instance_score],
        }


def zero_shot_classify(instances, tissue_prompts: PromptSet, stroma: str | int) -> SelectionResult:
    """Assign each instance to its most similar tissue prompt; keep the stroma ones.

    ``instances`` are the text-aligned embeddings (n x d_t). Ties go to the
    lowest prompt index.
    """
    x = np.asarray(instances, dtype=np.float64)
    t = tissue_prompts.matrix()
    if x.ndim != 2 or x.shape[1] != t.shape[1]:
        raise DimensionMismatch(f"instances {x.shape} do not match prompt length {t.shape[1]}")
    stroma_idx = stroma if isinstance(stroma, int) else tissue_prompts.index(stroma)
    sim = kernels.cosine_similarity(x, t)
    cls = np.argmax(sim, axis=1)  # first maximum
    score = sim[np.arange(len(x)), cls]
    kept = np.flatnonzero(cls == stroma_idx)
    return SelectionResult(kept.astype(np.int64), cls.astype(np.int64), score)


def apply_selection(bag: Bag, result: SelectionResult) -> Bag:
    kept = np.asarray(result.kept_indices, dtype=np.int64)
    if kept.size and (kept.min() < 0 or kept.max() >= bag.n):
        raise IndexOutOfRange(f"bag {bag.bag_id}: selection index outside [0, {bag.n})")
    if kept.size == 0:
        log.warning("bag %s: no stroma instances selected; keeping the whole bag", bag.bag_id)
        out = bag.subset(np.arange(bag.n))
        out.selection_fallback = True
        return out
    return bag.subset(kept)


def select_bag(bag: Bag, tissue_prompts: PromptSet, stroma: str | int) -> tuple[Bag, SelectionResult]:
    if bag.text is None:
        raise DimensionMismatch(f"bag {bag.bag_id} has no text-aligned channel for tissue selection")
    result = zero_shot_classify(bag.text, tissue_prompts, stroma)
    return apply_selection(bag, result), result
