"""Test-set evaluation, attention heatmaps, bag representations and beta sweeps."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import kernels
from . import model as M
from .errors import DataError
from .kernels import auc  # noqa: F401  (public re-export)
from .store import Bag, DatasetManifest, PromptSet
from .trainer import (
    PreparedBag,
    TrainConfig,
    bag_forward,
    component_matrix,
    prepare_bag,
    prepare_split,
    thread_limits,
    train,
)


@dataclass
class EvalReport:
    auc: float
    bags: list[tuple[str, int, float]]  # (bag_id, label, P(positive))
    n_pos: int
    n_neg: int
    split: str = "test"

    def to_json(self) -> dict:
        return {
            "split": self.split,
            "auc": self.auc,
            "n_pos": self.n_pos,
            "n_neg": self.n_neg,
            "bags": [{"bag_id": b, "label": y, "score": s} for b, y, s in self.bags],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))


@dataclass
class LoadedModel:
    params: dict[str, np.ndarray]
    config: TrainConfig
    model_config: M.ModelConfig
    component_names: list[str] = field(default_factory=list)

    def options(self, beta: float | None = None) -> M.PipelineOptions:
        cfg = self.config if beta is None else replace(self.config, beta=beta)
        return cfg.pipeline_options()


def load_model(checkpoint) -> LoadedModel:
    params, doc = M.load_checkpoint(checkpoint)
    if "train" not in doc or "model" not in doc:
        raise DataError(f"{checkpoint}: checkpoint sidecar lacks train/model config")
    return LoadedModel(params, TrainConfig.from_dict(doc["train"]), M.ModelConfig(**doc["model"]),
                       doc.get("components", []))


def score_bags(bags: list[PreparedBag], model: LoadedModel, prompts: PromptSet,
               beta: float | None = None) -> list[M.ForwardTrace]:
    comps = component_matrix(prompts)
    opts = model.options(beta)
    with thread_limits(model.config):
        return [bag_forward(b, comps, model.params, model.model_config.heads, opts) for b in bags]


def evaluate(manifest: DatasetManifest, split: str, checkpoint, prompts: PromptSet,
             beta: float | None = None) -> EvalReport:
    model = checkpoint if isinstance(checkpoint, LoadedModel) else load_model(checkpoint)
    cfg = model.config if beta is None else replace(model.config, beta=beta)
    bags = prepare_split(manifest, split, prompts, cfg)
    traces = score_bags(bags, model, prompts, beta)
    return report_from(bags, traces, split)


def report_from(bags: list[PreparedBag], traces: list[M.ForwardTrace], split: str = "test") -> EvalReport:
    scores = [float(t.probs[1]) for t in traces]
    labels = [b.label for b in bags]
    value = kernels.auc(scores, labels)
    n_pos = int(sum(labels))
    return EvalReport(value, [(b.bag_id, b.label, s) for b, s in zip(bags, scores)], n_pos, len(labels) - n_pos, split)


# -- heatmaps -----------------------------------------------------------------

@dataclass
class HeatmapRecord:
    index: int
    coords: tuple[int, int] | None
    patch_score: float
    similarity: list[float]
    mask: list[int]


@dataclass
class HeatmapExport:
    bag_id: str
    records: list[HeatmapRecord]

    def scores(self) -> np.ndarray:
        return np.array([r.patch_score for r in self.records])

    def write_csv(self, path) -> None:
        n_comp = len(self.records[0].similarity) if self.records else 4
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "x", "y", "patch_score"] + [f"sim{i + 1}" for i in range(n_comp)] + ["mask"])
            for r in self.records:
                x, y = r.coords if r.coords is not None else ("", "")
                w.writerow([r.index, x, y, repr(r.patch_score)] + [repr(s) for s in r.similarity]
                           + ["".join(str(m) for m in r.mask)])


def patch_scores(trace: M.ForwardTrace, n: int) -> np.ndarray:
    """Per-instance share of the class token's attention.

    score(j) = sum_i a_cls(i) * r_i(j): a_cls(i) is the head-averaged attention
    from the class token to component i, r_i(j) the head-averaged attention
    instance j receives inside group i, averaged over the group's queries (so it
    sums to one over the group). Without the transformers the pooling weights
    (1/G per group, 1/k per member) take their place.
    """
    out = np.zeros(n, dtype=np.float64)
    groups = trace.groups
    if trace.inter_attention is not None:
        a_cls = trace.cls_attention.astype(np.float64)
        received = [att.astype(np.float64).mean(axis=0).mean(axis=0) for att in trace.intra_attention]
    else:
        a_cls = np.full(len(groups), 1.0 / len(groups))
        received = [np.full(len(g.member_indices), 1.0 / len(g.member_indices)) for g in groups]
    for g, a, r in zip(groups, a_cls, received):
        np.add.at(out, g.member_indices, a * r)
    return out


def export_heatmap(bag: Bag, model: LoadedModel, prompts: PromptSet, beta: float | None = None) -> HeatmapExport:
    cfg = model.config if beta is None else replace(model.config, beta=beta)
    prepared = prepare_bag(bag, prompts, cfg)
    comps = component_matrix(prompts)
    with thread_limits(model.config):
        trace = bag_forward(prepared, comps, model.params, model.model_config.heads, model.options(beta))
    return heatmap_from_trace(bag, prepared, trace, model.params, comps)


def heatmap_from_trace(bag: Bag, prepared: PreparedBag, trace: M.ForwardTrace, params, comps) -> HeatmapExport:
    kept = prepared.kept_indices
    n_comp = comps.shape[0]
    sel_scores = patch_scores(trace, len(kept))
    sims = np.zeros((bag.n, n_comp))
    if trace.similarity is not None:
        sims[kept] = trace.similarity
    else:
        sims[kept] = kernels.cosine_similarity(trace.projected, comps.astype(trace.projected.dtype))
    dropped = np.setdiff1d(np.arange(bag.n), kept)
    if dropped.size:
        h = M.project(bag.instances[dropped], params)
        sims[dropped] = kernels.cosine_similarity(h, comps.astype(h.dtype))
    masks = np.zeros((bag.n, n_comp), dtype=int)
    if trace.similarity is not None:
        for g in trace.groups:
            masks[kept[g.member_indices], g.component_index] = 1
    scores = np.zeros(bag.n)
    scores[kept] = sel_scores
    records = [
        HeatmapRecord(
            int(j),
            None if bag.coords is None else (int(bag.coords[j][0]), int(bag.coords[j][1])),
            float(scores[j]),
            [float(s) for s in sims[j]],
            masks[j].tolist(),
        )
        for j in range(bag.n)
    ]
    return HeatmapExport(bag.bag_id, records)


def dump_trace(trace: M.ForwardTrace, path) -> None:
    """Save the attention tensors and group memberships of a trace (.npz)."""
    arrays = {"n_groups": np.array(len(trace.groups))}
    for i, g in enumerate(trace.groups):
        arrays[f"members{i}"] = g.member_indices
        if trace.intra_attention:
            arrays[f"intra{i}"] = trace.intra_attention[i]
    if trace.inter_attention is not None:
        arrays["inter"] = trace.inter_attention
    np.savez(path, **arrays)


# -- representations & sweeps -------------------------------------------------

def export_representations(manifest: DatasetManifest, split: str, model: LoadedModel, prompts: PromptSet,
                           path, beta: float | None = None) -> None:
    cfg = model.config if beta is None else replace(model.config, beta=beta)
    bags = prepare_split(manifest, split, prompts, cfg)
    traces = score_bags(bags, model, prompts, beta)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        d = traces[0].representation.shape[0]
        w.writerow(["bag_id", "label"] + [f"f{i}" for i in range(d)])
        for b, t in zip(bags, traces):
            w.writerow([b.bag_id, b.label] + [repr(float(v)) for v in t.representation])


def beta_sweep(manifest: DatasetManifest, prompts: PromptSet, config: TrainConfig, betas,
               out_dir=None) -> list[tuple[float, float]]:
    """Train and test once per beta (same seed); returns [(beta, test AUC)]."""
    rows = []
    for beta in betas:
        cfg = replace(config, beta=float(beta))
        run_dir = None if out_dir is None else Path(out_dir) / f"beta_{beta:g}"
        run = train(manifest, prompts, cfg, run_dir)
        model = LoadedModel(run.best_params, cfg, run.model_config, run.component_names)
        rows.append((float(beta), evaluate(manifest, "test", model, prompts).auc))
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        with open(Path(out_dir) / "sweep.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["beta", "test_auc"])
            for beta, value in rows:
                w.writerow([beta, repr(value)])
    return rows
