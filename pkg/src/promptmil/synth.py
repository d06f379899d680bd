"""Deterministic synthetic bags with a planted, prompt-correlated signal.

Recipe (all directions orthonormal unless stated):

Text space (d_t): component axes u_0..u_3, a stroma axis s and eight other
tissue axes. The nine tissue prompts are s and the eight others; the four
component prompts are t_c = (s + u_c) / sqrt(2).

Instance kinds, as unit semantic vectors in text space:

* ``planted``    t_c for a component c (cycled so each component gets a quarter)
* ``background`` normalise(s + 0.2 * sum_c z_c u_c), z ~ N(0, 1)
* ``tissue``     one of the eight non-stroma tissue axes (removed by selection)

Every bag has the same kind proportions: ``signal_fraction`` planted,
``tissue_fraction`` tissue, background the rest. All semantic vectors of a bag
then receive one shared offset ``batch_shift * sum_c z_c u_c``, z ~ N(0, 1),
standing in for slide-level staining/scanner drift: it moves every instance of
the bag along the component axes, so absolute similarity levels vary from bag
to bag while the ranking of instances within a bag is nearly preserved.

Text channel = semantic vector + N(0, sigma^2 / d_t) per coordinate.

Classifier channel (d0) = isometric embedding of (semantic vector + an
independent draw of the same noise) + ``subtype_scale`` * one of
``subtype_count`` nuisance axes (uniform per instance) + a marker coordinate
``A * r + marker_noise * N(0, 1)`` along a marker axis, r = +-1 uniformly,
+ N(0, sigma^2 / d0) per coordinate. Nuisance and marker axes are orthogonal
to the embedded text space.

The marker amplitude A is zero outside planted instances. For planted
instances it depends on the component: in positive bags component 0 gets
``marker_high`` and component 1 ``marker_low``, in negative bags the other way
round; components 2 and 3 draw A ~ U(marker_low, marker_high) per bag. Kind
counts, total marker energy and the marker mean (zero, by the random sign)
are therefore label-independent; the label is only visible when instances
resembling component 0 are kept apart from those resembling component 1. The
Bayes-style oracle takes, per component, the instances ranked highest by
text-channel similarity (as many as were planted) and compares the mean
squared marker coordinate of the component 0 and component 1 sets.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import InvalidConfig
from .store import (
    Bag,
    BagEntry,
    DatasetManifest,
    PromptEntry,
    PromptSet,
    save_manifest,
    save_prompts,
    split_dataset,
    write_bag,
)

TISSUE_CLASSES = [
    "adipose",
    "background",
    "debris",
    "lymphocytes",
    "mucus",
    "smooth muscle",
    "normal colon mucosa",
    "cancer-associated stroma",
    "colorectal adenocarcinoma epithelium",
]
STROMA_INDEX = 7

COMPONENTS = [
    ("lymphocyte infiltration",
     "Dense infiltrates of small lymphocytes scattered throughout the desmoplastic stroma."),
    ("inflammatory reaction",
     "Stroma with neutrophils and mixed inflammatory cells indicating an active inflammatory response."),
    ("irregular tumor infiltration border",
     "An irregular, pushing-to-infiltrative interface between tumor glands and surrounding stroma."),
    ("atypical lymphocyte infiltration",
     "Lymphocytes with atypical morphology infiltrating stromal areas adjacent to tumor nests."),
]

KIND_CODES = {"planted": 0, "background": 2, "tissue": 3}


@dataclass
class SynthConfig:
    n_bags: int = 200
    instances_min: int = 64
    instances_max: int = 128
    d0: int = 128
    dt: int = 64
    signal_fraction: float = 0.25
    noise_sigma: float = 0.5
    seed: int = 0
    positive_rate: float = 0.5
    tissue_fraction: float = 0.3
    subtype_count: int = 4
    subtype_scale: float = 3.0
    marker_high: float = 3.0
    marker_low: float = 0.5
    marker_noise: float = 0.5
    batch_shift: float = 0.4
    tile_size: int = 512

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.n_bags < 6:
            raise InvalidConfig("n_bags must be at least 6 (three per label)")
        if not 1 <= self.instances_min <= self.instances_max:
            raise InvalidConfig("need 1 <= instances_min <= instances_max")
        if not 0 < self.signal_fraction <= 1:
            raise InvalidConfig(f"signal_fraction must lie in (0, 1], got {self.signal_fraction}")
        if self.batch_shift < 0:
            raise InvalidConfig("batch_shift must be non-negative")
        if not 0 <= self.marker_low <= self.marker_high:
            raise InvalidConfig("need 0 <= marker_low <= marker_high")
        if self.noise_sigma < 0 or self.marker_noise < 0:
            raise InvalidConfig("noise levels must be non-negative")
        if not 0 < self.positive_rate < 1:
            raise InvalidConfig("positive_rate must lie strictly between 0 and 1")
        if not 0 <= self.tissue_fraction < 1:
            raise InvalidConfig("tissue_fraction must lie in [0, 1)")
        if self.dt < 13:
            raise InvalidConfig("dt must be at least 13 (4 component + 9 tissue axes)")
        if self.d0 < self.dt + self.subtype_count + 1:
            raise InvalidConfig("d0 must be at least dt + subtype_count + 1")

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise InvalidConfig(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class SynthDataset:
    manifest: DatasetManifest
    bags: list[Bag]
    prompts: PromptSet
    truth: dict


def _orthonormal(rng, dim):
    q, r = np.linalg.qr(rng.normal(size=(dim, dim)))
    return q * np.sign(np.diag(r))


def _counts(n: int, cfg: SynthConfig) -> dict[str, int]:
    planted = min(n, round(cfg.signal_fraction * n))
    tissue = min(round(cfg.tissue_fraction * n), n - planted)
    return {"planted": planted, "tissue": tissue, "background": n - planted - tissue}


def generate(cfg: SynthConfig | None = None) -> SynthDataset:
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(cfg.seed)
    dt, d0 = cfg.dt, cfg.d0

    basis = _orthonormal(rng, dt)
    comp_axes = basis[:, :4].T
    stroma = basis[:, 4]
    tissue_axes = np.empty((9, dt))
    others = iter(basis[:, 5:13].T)
    for i in range(9):
        tissue_axes[i] = stroma if i == STROMA_INDEX else next(others)
    non_stroma = np.delete(tissue_axes, STROMA_INDEX, axis=0)
    comp_prompts = (stroma[None] + comp_axes) / math.sqrt(2.0)

    embed = _orthonormal(rng, d0)
    text_embed = embed[:, :dt]
    subtype_axes = embed[:, dt:dt + cfg.subtype_count].T
    marker_axis = embed[:, dt + cfg.subtype_count]

    n_pos = round(cfg.positive_rate * cfg.n_bags)
    labels = rng.permutation(np.r_[np.ones(n_pos, int), np.zeros(cfg.n_bags - n_pos, int)])

    bags: list[Bag] = []
    truth_bags = []
    width = len(str(cfg.n_bags - 1))
    for b in range(cfg.n_bags):
        label = int(labels[b])
        n = int(rng.integers(cfg.instances_min, cfg.instances_max + 1))
        counts = _counts(n, cfg)
        sem = []
        kinds = []
        comp_of = []
        for c_i in range(counts["planted"]):
            c = c_i % 4
            sem.append(comp_prompts[c])
            kinds.append("planted")
            comp_of.append(c)
        for _ in range(counts["background"]):
            v = stroma + 0.2 * rng.normal(size=4) @ comp_axes
            sem.append(v / np.linalg.norm(v))
            kinds.append("background")
            comp_of.append(-1)
        for _ in range(counts["tissue"]):
            sem.append(non_stroma[rng.integers(len(non_stroma))])
            kinds.append("tissue")
            comp_of.append(-1)
        sem = np.asarray(sem)
        shift = cfg.batch_shift * rng.normal(size=4) if cfg.batch_shift else np.zeros(4)
        # slide-level offset shared by every instance of the bag
        sem = sem + shift @ comp_axes
        kinds = np.asarray(kinds)
        comp_of = np.asarray(comp_of)

        noise_scale = cfg.noise_sigma / math.sqrt(dt)
        text = sem + noise_scale * rng.normal(size=(n, dt))
        feat_sem = sem + noise_scale * rng.normal(size=(n, dt))
        amp = np.empty(4)
        amp[:2] = (cfg.marker_high, cfg.marker_low) if label == 1 else (cfg.marker_low, cfg.marker_high)
        amp[2:] = rng.uniform(cfg.marker_low, cfg.marker_high, size=2)
        amplitude = np.where(comp_of >= 0, amp[np.maximum(comp_of, 0)], 0.0)
        signs = rng.choice([-1.0, 1.0], size=n)
        marker = amplitude * signs + cfg.marker_noise * rng.normal(size=n)
        subtype = rng.integers(cfg.subtype_count, size=n) if cfg.subtype_count else np.zeros(n, int)
        feats = feat_sem @ text_embed.T + marker[:, None] * marker_axis[None]
        if cfg.subtype_count:
            feats += cfg.subtype_scale * subtype_axes[subtype]
        feats += (cfg.noise_sigma / math.sqrt(d0)) * rng.normal(size=(n, d0))

        order = rng.permutation(n)
        side = math.ceil(math.sqrt(n * 1.5))
        cells = rng.choice(side * side, size=n, replace=False)
        coords = np.stack([cells % side, cells // side], axis=1) * cfg.tile_size

        bag_id = f"bag{b:0{width}d}"
        bags.append(Bag(bag_id, label, feats[order].astype(np.float32), coords,
                        text[order].astype(np.float32)))
        truth_bags.append({
            "bag_id": bag_id,
            "label": label,
            "kind": [KIND_CODES[k] for k in kinds[order]],
            "component": comp_of[order].tolist(),
            "amplitudes": amp.tolist(),
            "shift": shift.tolist(),
        })

    prompts = PromptSet(
        [PromptEntry(name, f"an H&E image of {name}", tissue_axes[i], "tissue")
         for i, name in enumerate(TISSUE_CLASSES)]
        + [PromptEntry(name, desc, comp_prompts[i], "component") for i, (name, desc) in enumerate(COMPONENTS)]
    )
    entries = [BagEntry(bag.bag_id, bag.label, f"bags/{bag.bag_id}.pbem", bag.n) for bag in bags]
    manifest = DatasetManifest(f"synth-seed{cfg.seed}", d0, dt, entries)
    manifest = split_dataset(manifest, cfg.seed)
    truth = {
        "config": asdict(cfg),
        "marker_axis": marker_axis.tolist(),
        "marker_noise": cfg.marker_noise,
        "bags": truth_bags,
    }
    return SynthDataset(manifest, bags, prompts, truth)


def write_dataset(ds: SynthDataset, out_dir: str | Path) -> Path:
    """Write bags, manifest.json, prompts.json and truth.json; returns the manifest path."""
    out = Path(out_dir)
    (out / "bags").mkdir(parents=True, exist_ok=True)
    for bag, entry in zip(ds.bags, ds.manifest.bags):
        write_bag(bag, out / entry.path)
    save_manifest(ds.manifest, out / "manifest.json")
    save_prompts(ds.prompts, out / "prompts.json")
    (out / "truth.json").write_text(json.dumps(ds.truth))
    ds.manifest.root = out
    return out / "manifest.json"
