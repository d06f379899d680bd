"""On-disk dataset: bag embedding files, manifests, prompt sets and splits.

A bag lives in up to three files sharing a stem::

    <stem>.pbem        classifier features, n x d0
    <stem>.text.pbem   text-aligned (vision-language) embeddings, n x d_t
    <stem>.meta.json   bag_id, label and optional patch coordinates

``.pbem`` layout (little-endian): magic ``b"PBEM"``, version u32, n u64,
d u64, then n*d IEEE-754 binary32 values in row-major order.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    DataError,
    DimensionMismatch,
    IoFailure,
    MalformedHeader,
    NonFiniteValue,
    TooFewBags,
)

MAGIC = b"PBEM"
VERSION = 1
_HEADER = struct.Struct("<4sIQQ")
HEADER_SIZE = _HEADER.size  # 24 bytes

MANIFEST_FORMAT = "promptmil-manifest"
PROMPTS_FORMAT = "promptmil-prompts"
FORMAT_VERSION = 1

SPLITS = ("train", "val", "test")


@dataclass
class Bag:
    bag_id: str
    label: int
    instances: np.ndarray
    coords: np.ndarray | None = None
    text: np.ndarray | None = None
    # set by apply_selection when nothing matched and the whole bag was kept
    selection_fallback: bool = False

    def __post_init__(self):
        self.instances = np.asarray(self.instances)
        if self.instances.ndim != 2:
            raise DimensionMismatch(f"bag {self.bag_id}: instances must be 2-D, got shape {self.instances.shape}")
        if self.label not in (0, 1):
            raise DataError(f"bag {self.bag_id}: label must be 0 or 1, got {self.label!r}")
        if self.coords is not None:
            self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
            if len(self.coords) != self.n:
                raise DimensionMismatch(f"bag {self.bag_id}: {len(self.coords)} coords for {self.n} instances")
        if self.text is not None:
            self.text = np.asarray(self.text)
            if self.text.ndim != 2 or self.text.shape[0] != self.n:
                raise DimensionMismatch(
                    f"bag {self.bag_id}: text channel shape {self.text.shape} does not match n={self.n}")

    @property
    def n(self) -> int:
        return self.instances.shape[0]

    @property
    def d0(self) -> int:
        return self.instances.shape[1]

    def validate(self) -> None:
        if self.n < 1:
            raise DimensionMismatch(f"bag {self.bag_id}: empty bag")
        for name, mat in (("instances", self.instances), ("text", self.text)):
            if mat is None:
                continue
            bad = ~np.isfinite(mat)
            if bad.any():
                row = int(np.argwhere(bad)[0][0])
                raise NonFiniteValue(f"bag {self.bag_id}: non-finite value in {name} row {row}")

    def subset(self, rows) -> "Bag":
        rows = np.asarray(rows, dtype=np.int64)
        return replace(
            self,
            instances=self.instances[rows],
            coords=None if self.coords is None else self.coords[rows],
            text=None if self.text is None else self.text[rows],
        )


# -- matrix files -----------------------------------------------------------

def write_matrix(mat: np.ndarray, path: str | os.PathLike) -> None:
    mat = np.asarray(mat)
    if mat.ndim != 2:
        raise DimensionMismatch(f"expected a 2-D matrix, got shape {mat.shape}")
    bad = ~np.isfinite(mat)
    if bad.any():
        raise NonFiniteValue(f"{path}: non-finite value in row {int(np.argwhere(bad)[0][0])}")
    n, d = mat.shape
    payload = np.ascontiguousarray(mat, dtype="<f4").tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, VERSION, n, d))
            fh.write(payload)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_matrix(path: str | os.PathLike) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if len(raw) < HEADER_SIZE:
        raise MalformedHeader(f"{path}: file is {len(raw)} bytes, header needs {HEADER_SIZE} (offset 0)")
    magic, version, n, d = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise MalformedHeader(f"{path}: bad magic {magic!r} at offset 0")
    if version != VERSION:
        raise MalformedHeader(f"{path}: unsupported version {version} at offset 4")
    if d == 0:
        raise MalformedHeader(f"{path}: zero feature dimension at offset 16")
    expected = n * d * 4
    got = len(raw) - HEADER_SIZE
    if got != expected:
        raise DimensionMismatch(
            f"{path}: header says n={n}, d={d} ({n * d} values) but payload holds "
            f"{got / 4:g} values (byte offset {HEADER_SIZE})")
    mat = np.frombuffer(raw, dtype="<f4", count=n * d, offset=HEADER_SIZE).reshape(n, d).astype(np.float32)
    bad = ~np.isfinite(mat)
    if bad.any():
        row = int(np.argwhere(bad)[0][0])
        raise NonFiniteValue(f"{path}: non-finite value in row {row} (byte offset {HEADER_SIZE + row * d * 4})")
    return mat


def _sidecar(path: Path, suffix: str) -> Path:
    name = path.name
    stem = name[:-5] if name.endswith(".pbem") else name
    return path.with_name(stem + suffix)


def write_bag(bag: Bag, path: str | os.PathLike) -> None:
    """Write ``bag`` to ``path`` (plus sidecars). Nothing is written if the bag is invalid."""
    bag.validate()
    path = Path(path)
    write_matrix(bag.instances, path)
    if bag.text is not None:
        write_matrix(bag.text, _sidecar(path, ".text.pbem"))
    meta = {"bag_id": bag.bag_id, "label": int(bag.label)}
    if bag.coords is not None:
        meta["coords"] = bag.coords.tolist()
    try:
        _sidecar(path, ".meta.json").write_text(json.dumps(meta))
    except OSError as exc:
        raise IoFailure(f"cannot write metadata for {path}: {exc}") from exc


def load_bag(path: str | os.PathLike, *, bag_id: str | None = None, label: int | None = None) -> Bag:
    path = Path(path)
    instances = read_matrix(path)
    meta = {}
    meta_path = _sidecar(path, ".meta.json")
    if meta_path.exists():
        try:
            meta = json.loads(meta_path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{meta_path}: {exc}") from exc
    text_path = _sidecar(path, ".text.pbem")
    text = read_matrix(text_path) if text_path.exists() else None
    bag = Bag(
        bag_id=bag_id if bag_id is not None else meta.get("bag_id", path.name.removesuffix(".pbem")),
        label=int(label if label is not None else meta.get("label", 0)),
        instances=instances,
        coords=meta.get("coords"),
        text=text,
    )
    bag.validate()
    return bag


# -- prompts ------------------------------------------------------------------

@dataclass
class PromptEntry:
    name: str
    description: str
    embedding: np.ndarray
    role: str | None = None  # "tissue" or "component"


@dataclass
class PromptSet:
    entries: list[PromptEntry]

    def __post_init__(self):
        if not self.entries:
            raise DataError("prompt set is empty")
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise DataError(f"duplicate prompt names: {names}")
        dims = {len(e.embedding) for e in self.entries}
        if len(dims) != 1:
            raise DimensionMismatch(f"prompt embeddings have differing lengths {sorted(dims)}")
        for e in self.entries:
            e.embedding = np.asarray(e.embedding, dtype=np.float64)
            if not np.all(np.isfinite(e.embedding)):
                raise NonFiniteValue(f"prompt {e.name!r} has a non-finite embedding")
            if not np.linalg.norm(e.embedding) > 0:
                raise DataError(f"prompt {e.name!r} has a zero-norm embedding")

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    @property
    def dim(self) -> int:
        return len(self.entries[0].embedding)

    def matrix(self) -> np.ndarray:
        return np.stack([e.embedding for e in self.entries])

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise DataError(f"no prompt named {name!r}; have {self.names}") from None

    def by_role(self, role: str) -> "PromptSet":
        """Entries tagged with ``role``; untagged sets are returned whole."""
        if all(e.role is None for e in self.entries):
            return self
        picked = [e for e in self.entries if e.role == role]
        if not picked:
            raise DataError(f"prompt set has no entries with role {role!r}")
        return PromptSet(picked)


def save_prompts(prompts: PromptSet, path: str | os.PathLike) -> None:
    doc = {
        "format": PROMPTS_FORMAT,
        "version": FORMAT_VERSION,
        "entries": [
            {k: v for k, v in {
                "name": e.name,
                "description": e.description,
                "role": e.role,
                "embedding": [float(x) for x in e.embedding],
            }.items() if v is not None}
            for e in prompts.entries
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_prompts(path: str | os.PathLike) -> PromptSet:
    path = Path(path)
    doc = _read_json(path)
    if isinstance(doc, list):
        entries = doc
    else:
        if doc.get("version", FORMAT_VERSION) != FORMAT_VERSION:
            raise DataError(f"{path}: unsupported prompts version {doc.get('version')}")
        entries = doc.get("entries")
    if not isinstance(entries, list):
        raise DataError(f"{path}: expected an 'entries' list")
    try:
        return PromptSet([
            PromptEntry(
                name=str(e["name"]),
                description=str(e.get("description", "")),
                embedding=np.asarray(e["embedding"], dtype=np.float64),
                role=e.get("role"),
            )
            for e in entries
        ])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: malformed prompt entry ({exc})") from exc


# -- manifest -----------------------------------------------------------------

@dataclass
class BagEntry:
    bag_id: str
    label: int
    path: str
    n: int


@dataclass
class DatasetManifest:
    name: str
    d0: int
    dt: int
    bags: list[BagEntry]
    splits: dict[str, str] = field(default_factory=dict)
    root: Path = field(default=Path("."), compare=False)

    def entries(self, split: str | None = None) -> list[BagEntry]:
        if split is None:
            return list(self.bags)
        return [b for b in self.bags if self.splits.get(b.bag_id) == split]

    def bag_path(self, entry: BagEntry) -> Path:
        return self.root / entry.path

    def load(self, entry: BagEntry) -> Bag:
        bag = load_bag(self.bag_path(entry), bag_id=entry.bag_id, label=entry.label)
        if bag.n != entry.n:
            raise DimensionMismatch(f"{entry.path}: manifest says n={entry.n}, file has {bag.n} rows")
        if bag.d0 != self.d0:
            raise DimensionMismatch(f"{entry.path}: manifest says d0={self.d0}, file has {bag.d0} columns")
        if bag.text is not None and bag.text.shape[1] != self.dt:
            raise DimensionMismatch(f"{entry.path}: manifest says d_t={self.dt}, text channel has {bag.text.shape[1]}")
        return bag

    def load_split(self, split: str) -> list[Bag]:
        return [self.load(e) for e in self.entries(split)]

    def validate(self) -> None:
        ids = [b.bag_id for b in self.bags]
        if len(set(ids)) != len(ids):
            raise DataError("manifest contains duplicate bag ids")
        for entry in self.bags:
            self.load(entry)
        for bag_id, split in self.splits.items():
            if split not in SPLITS:
                raise DataError(f"bag {bag_id}: unknown split {split!r}")


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    doc = {
        "format": MANIFEST_FORMAT,
        "version": FORMAT_VERSION,
        "name": manifest.name,
        "d0": manifest.d0,
        "dt": manifest.dt,
        "bags": [{"bag_id": b.bag_id, "label": b.label, "path": b.path, "n": b.n} for b in manifest.bags],
        "splits": manifest.splits,
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    path = Path(path)
    doc = _read_json(path)
    if doc.get("version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported manifest version {doc.get('version')}")
    try:
        manifest = DatasetManifest(
            name=str(doc["name"]),
            d0=int(doc["d0"]),
            dt=int(doc["dt"]),
            bags=[BagEntry(str(b["bag_id"]), int(b["label"]), str(b["path"]), int(b["n"])) for b in doc["bags"]],
            splits={str(k): str(v) for k, v in doc.get("splits", {}).items()},
            root=path.parent,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: malformed manifest ({exc})") from exc
    if manifest.d0 < 1 or manifest.dt < 1:
        raise DataError(f"{path}: d0 and dt must be positive")
    return manifest


def _read_json(path: Path):
    if not path.exists():
        raise IoFailure(f"{path}: no such file")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc


# -- splitting ----------------------------------------------------------------

def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_counts(n: int) -> tuple[int, int, int]:
    """(train, val, test) sizes for one label stratum of ``n`` bags.

    Test takes a quarter, validation a tenth of the remainder; each split keeps
    at least one bag.
    """
    if n < 3:
        raise TooFewBags(f"need at least 3 bags per label, got {n}")
    test = min(max(1, _round_half_up(0.25 * n)), n - 2)
    val = min(max(1, _round_half_up(0.1 * (n - test))), n - test - 1)
    return n - test - val, val, test


def split_dataset(manifest: DatasetManifest, seed: int) -> DatasetManifest:
    """Stratified train/val/test assignment, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    splits: dict[str, str] = {}
    for label in (0, 1):
        ids = sorted(b.bag_id for b in manifest.bags if b.label == label)
        n_train, n_val, _ = split_counts(len(ids))
        order = rng.permutation(len(ids))
        for rank, i in enumerate(order):
            split = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
            splits[ids[i]] = split
    return replace(manifest, splits=splits)
