"""Training loop: Adam with learning-rate annealing, per-epoch validation AUC,
best-on-validation checkpointing and the ablation switches."""

from __future__ import annotations

import csv
import json
import logging
import math
import zlib
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import kernels
from . import model as M
from .errors import DataError, EmptySplit, InvalidConfig, InvalidProbability, ShapeMismatch, UnknownSchedule
from .selection import select_bag
from .store import Bag, DatasetManifest, PromptSet

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
DEFAULT_STROMA = "cancer-associated stroma"


@dataclass
class Ablation:
    disable_selection: bool = False
    disable_grouping: bool = False
    kmeans_grouping: bool = False
    disable_interaction: bool = False


@dataclass
class TrainConfig:
    lr: float = 5e-5
    max_epochs: int = 32
    beta: float = 0.3
    seed: int = 0
    schedule: str = "cosine"
    ablation: Ablation = field(default_factory=Ablation)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float | None = None
    # model shape; d=None takes the component prompt length
    d: int | None = None
    heads: int = 4
    ff_mult: int = 4
    stroma_name: str = DEFAULT_STROMA
    # "aligned": least-squares map onto the text-aligned channel plus random
    # init outside the prompt span; "random": plain Glorot init
    projection_init: str = "aligned"
    kmeans_iters: int = 50
    deterministic: bool = True
    threads: int = 1

    def __post_init__(self):
        if isinstance(self.ablation, dict):
            self.ablation = Ablation(**self.ablation)
        self.validate()

    def validate(self) -> None:
        if not self.lr > 0:
            raise InvalidConfig(f"lr must be positive, got {self.lr}")
        if not 0 < self.beta <= 1:
            raise InvalidConfig(f"beta must lie in (0, 1], got {self.beta}")
        if self.max_epochs < 1:
            raise InvalidConfig(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.schedule not in ("cosine", "constant"):
            raise UnknownSchedule(f"unknown schedule {self.schedule!r}")
        if self.projection_init not in ("aligned", "random"):
            raise InvalidConfig(f"unknown projection_init {self.projection_init!r}")
        if self.threads < 1:
            raise InvalidConfig("threads must be >= 1")
        a = self.ablation
        if a.kmeans_grouping and a.disable_grouping:
            raise InvalidConfig("kmeans_grouping and disable_grouping are mutually exclusive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise InvalidConfig(f"unknown train config keys: {sorted(unknown)}")
        return cls(**doc)

    def pipeline_options(self) -> M.PipelineOptions:
        a = self.ablation
        grouping = "kmeans" if a.kmeans_grouping else "none" if a.disable_grouping else "prompt"
        return M.PipelineOptions(beta=self.beta, grouping=grouping, interaction=not a.disable_interaction,
                                 kmeans_iters=self.kmeans_iters, kmeans_seed=self.seed)


# -- loss, optimiser, schedule ------------------------------------------------

def bce_loss(p, label: int) -> float:
    """Negative log-likelihood of ``label`` under the two-class distribution ``p``."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (2,) or np.any(p < 0) or not np.all(np.isfinite(p)) or abs(p.sum() - 1.0) > 1e-6:
        raise InvalidProbability(f"not a probability pair: {p}")
    if label not in (0, 1):
        raise InvalidProbability(f"label must be 0 or 1, got {label}")
    return -math.log(max(float(p[label]), PROB_FLOOR))


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()})


def adam_step(params, grads, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place Adam update with the bias correction folded into the step size."""
    if set(grads) != set(params):
        raise ShapeMismatch(f"gradient keys differ from parameter keys: {sorted(set(grads) ^ set(params))}")
    state.t += 1
    t = state.t
    step = lr * math.sqrt(1.0 - beta2 ** t) / (1.0 - beta1 ** t)
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: gradient shape {g.shape} vs parameter {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= (step * m / (np.sqrt(v) + eps)).astype(p.dtype)


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    if not 0 <= epoch < config.max_epochs:
        raise DataError(f"epoch {epoch} outside [0, {config.max_epochs})")
    if config.schedule == "constant":
        return config.lr
    if config.schedule == "cosine":
        return config.lr * (1.0 + math.cos(math.pi * epoch / config.max_epochs)) / 2.0
    raise UnknownSchedule(f"unknown schedule {config.schedule!r}")


# -- data preparation ---------------------------------------------------------

@dataclass
class PreparedBag:
    bag_id: str
    label: int
    features: np.ndarray  # selected d0 rows
    text: np.ndarray | None
    kept_indices: np.ndarray  # rows of the original bag
    coords: np.ndarray | None = None


def prepare_bag(bag: Bag, prompts: PromptSet, config: TrainConfig) -> PreparedBag:
    if config.ablation.disable_selection:
        kept = np.arange(bag.n, dtype=np.int64)
        sub = bag
    else:
        sub, result = select_bag(bag, prompts.by_role("tissue"), config.stroma_name)
        kept = np.arange(bag.n, dtype=np.int64) if sub.selection_fallback else result.kept_indices
    return PreparedBag(bag.bag_id, bag.label, sub.instances, sub.text, kept, sub.coords)


def prepare_split(manifest: DatasetManifest, split: str, prompts: PromptSet, config: TrainConfig) -> list[PreparedBag]:
    entries = manifest.entries(split)
    if not entries:
        raise EmptySplit(f"split {split!r} is empty")
    return [prepare_bag(manifest.load(e), prompts, config) for e in entries]


def bag_rng(seed: int, bag_id: str) -> np.random.Generator:
    """Per-bag generator so k-means grouping is a pure function of (seed, bag)."""
    return np.random.default_rng([seed, zlib.crc32(bag_id.encode())])


def component_matrix(prompts: PromptSet) -> np.ndarray:
    return prompts.by_role("component").matrix()


def align_projection(params, bags: list[PreparedBag], component_prompts: np.ndarray,
                     rng: np.random.Generator, ridge: float = 1e-3) -> bool:
    """Initialise the projection so projected features live in the prompt space.

    Least squares from classifier features onto the text-aligned channel,
    plus the random initial weights restricted to the orthogonal complement of
    the component prompts (keeps information the text channel lacks without
    disturbing cosine numerators). Returns False if no text channel exists.
    """
    if any(b.text is None for b in bags):
        return False
    x = np.concatenate([b.features for b in bags]).astype(np.float64)
    e = np.concatenate([b.text for b in bags]).astype(np.float64)
    if e.shape[1] != params["proj.w"].shape[1]:
        return False
    gram = x.T @ x
    lam = ridge * np.trace(gram) / gram.shape[0]
    w_ls = np.linalg.solve(gram + lam * np.eye(gram.shape[0]), x.T @ e)
    q, _ = np.linalg.qr(np.asarray(component_prompts, dtype=np.float64).T)
    complement = np.eye(q.shape[0]) - q @ q.T
    d0, d = params["proj.w"].shape
    limit = math.sqrt(6.0 / (d0 + d))
    w_rand = rng.uniform(-limit, limit, size=(d0, d)) @ complement
    params["proj.w"] = (w_ls + w_rand).astype(params["proj.w"].dtype)
    params["proj.b"] = np.zeros_like(params["proj.b"])
    return True


# -- prediction ---------------------------------------------------------------

def bag_forward(bag: PreparedBag, components: np.ndarray, params, heads: int,
                opts: M.PipelineOptions) -> M.ForwardTrace:
    return M.forward(bag.features, components, params, heads, opts, rng=bag_rng(opts.kmeans_seed, bag.bag_id))


def predict(bags: list[PreparedBag], components, params, heads: int, opts: M.PipelineOptions) -> np.ndarray:
    """Positive-class probability per bag."""
    return np.array([float(bag_forward(b, components, params, heads, opts).probs[1]) for b in bags])


# -- training -----------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_auc: float
    lr: float


@dataclass
class TrainRun:
    config: TrainConfig
    model_config: M.ModelConfig
    records: list[EpochRecord]
    best_epoch: int
    best_val_auc: float
    best_params: dict[str, np.ndarray] = field(repr=False)
    checkpoint_path: Path | None = None
    component_names: list[str] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]


def checkpoint_config(run_cfg: TrainConfig, model_cfg: M.ModelConfig, component_names) -> dict:
    return {"train": run_cfg.to_dict(), "model": M.config_dict(model_cfg), "components": list(component_names)}


def thread_limits(config: TrainConfig):
    if config.deterministic:
        return threadpool_limits(limits=1)
    return threadpool_limits(limits=config.threads) if config.threads else nullcontext()


def train(manifest: DatasetManifest, prompts: PromptSet, config: TrainConfig | None = None,
          out_dir: str | Path | None = None) -> TrainRun:
    config = config or TrainConfig()
    with thread_limits(config):
        return _train(manifest, prompts, config, Path(out_dir) if out_dir is not None else None)


def _train(manifest, prompts, config: TrainConfig, out_dir: Path | None) -> TrainRun:
    comp = prompts.by_role("component")
    components = comp.matrix()
    train_bags = prepare_split(manifest, "train", prompts, config)
    val_bags = prepare_split(manifest, "val", prompts, config)
    if len({b.label for b in val_bags}) < 2:
        raise EmptySplit("validation split needs both labels")

    d = config.d or components.shape[1]
    model_cfg = M.ModelConfig(d0=manifest.d0, d=d, heads=config.heads, ff_mult=config.ff_mult)
    rng = np.random.default_rng(config.seed)
    params = M.init_params(model_cfg, rng, np.float32)
    if config.projection_init == "aligned":
        if not align_projection(params, train_bags, components, rng):
            log.warning("no usable text-aligned channel; projection keeps its random init")
    opts = config.pipeline_options()
    state = AdamState.zeros_like(params)
    shuffle_rng = np.random.default_rng([config.seed, 1])

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=1))
    ckpt_path = out_dir / "checkpoint.pbck" if out_dir is not None else None

    records: list[EpochRecord] = []
    best_auc, best_epoch, best_params = -1.0, -1, None
    for epoch in range(config.max_epochs):
        lr = lr_schedule(epoch, config)
        total = 0.0
        for i in shuffle_rng.permutation(len(train_bags)):
            bag = train_bags[i]
            trace = bag_forward(bag, components, params, model_cfg.heads, opts)
            total += bce_loss(trace.probs.astype(np.float64), bag.label)
            grads, _ = M.backward(trace, params, M.cross_entropy_grad(trace.probs, bag.label))
            if config.weight_decay:
                for k in grads:
                    grads[k] += config.weight_decay * params[k]
            if config.grad_clip:
                norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
                if norm > config.grad_clip:
                    for k in grads:
                        grads[k] *= config.grad_clip / norm
            adam_step(params, grads, state, lr, config.adam_beta1, config.adam_beta2, config.adam_eps)
        scores = predict(val_bags, components, params, model_cfg.heads, opts)
        val_auc = kernels.auc(scores, [b.label for b in val_bags])
        rec = EpochRecord(epoch, total / len(train_bags), val_auc, lr)
        records.append(rec)
        log.info("epoch", extra={"fields": asdict(rec)})
        if val_auc > best_auc:
            best_auc, best_epoch = val_auc, epoch
            best_params = {k: v.copy() for k, v in params.items()}
            if ckpt_path is not None:
                M.save_checkpoint(best_params, ckpt_path, checkpoint_config(config, model_cfg, comp.names))

    if out_dir is not None:
        with open(out_dir / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "val_auc", "lr"])
            for r in records:
                w.writerow([r.epoch, repr(r.loss), repr(r.val_auc), repr(r.lr)])
    return TrainRun(config, model_cfg, records, best_epoch, best_auc, best_params, ckpt_path, comp.names)
