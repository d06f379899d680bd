"""Macenko stain estimation and normalization for 8-bit RGB patches."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, InsufficientTissue, IoFailure

log = logging.getLogger(__name__)

I0 = 255.0
OD_THRESHOLD = 0.15
ALPHA = 1.0  # percentile for the extreme angles
MIN_TISSUE_PIXELS = 100
PATCH_SUFFIXES = (".png", ".ppm")


@dataclass
class RgbPatch:
    pixels: np.ndarray  # (height, width, 3) uint8

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise DataError(f"RGB patch must have shape (height, width, 3), got {px.shape}")
        if px.dtype != np.uint8:
            raise DataError(f"RGB patch must be uint8, got {px.dtype}")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @classmethod
    def from_bytes(cls, width: int, height: int, data: bytes) -> "RgbPatch":
        if len(data) != width * height * 3:
            raise DataError(f"expected {width * height * 3} bytes for {width}x{height} RGB, got {len(data)}")
        return cls(np.frombuffer(data, dtype=np.uint8).reshape(height, width, 3).copy())


@dataclass
class StainProfile:
    stain_matrix: np.ndarray  # (3, 2): hematoxylin, eosin OD directions
    max_concentrations: np.ndarray  # (2,)

    def __post_init__(self):
        self.stain_matrix = np.asarray(self.stain_matrix, dtype=np.float64)
        self.max_concentrations = np.asarray(self.max_concentrations, dtype=np.float64)
        self.validate()

    def validate(self) -> None:
        if self.stain_matrix.shape != (3, 2) or self.max_concentrations.shape != (2,):
            raise DataError("stain profile needs a 3x2 stain_matrix and 2 max_concentrations")
        if not (np.isfinite(self.stain_matrix).all() and np.isfinite(self.max_concentrations).all()):
            raise DataError("stain profile contains non-finite values")
        norms = np.linalg.norm(self.stain_matrix, axis=0)
        if np.any(np.abs(norms - 1) > 1e-6):
            raise DataError(f"stain columns must be unit length, got norms {norms.tolist()}")
        if np.any(self.stain_matrix < 0):
            raise DataError("stain columns must be non-negative")
        if np.any(self.max_concentrations <= 0):
            raise DataError("max_concentrations must be positive")

    def to_json(self) -> dict:
        return {"stain_matrix": self.stain_matrix.tolist(),
                "max_concentrations": self.max_concentrations.tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> "StainProfile":
        try:
            return cls(doc["stain_matrix"], doc["max_concentrations"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"bad stain profile: {exc}") from None


def _unit(v):
    return v / np.linalg.norm(v)


# Widely used reference profile for H&E (columns H, E); used when no target is given.
DEFAULT_TARGET = StainProfile(
    np.stack([_unit(np.array([0.5626, 0.7201, 0.4062])), _unit(np.array([0.2159, 0.8012, 0.5581]))], axis=1),
    np.array([1.9705, 1.0308]),
)


def rgb_to_od(patch: RgbPatch | np.ndarray) -> np.ndarray:
    """Per-pixel optical density, shape (height*width, 3)."""
    px = patch.pixels if isinstance(patch, RgbPatch) else np.asarray(patch)
    v = px.reshape(-1, 3).astype(np.float64)
    return -np.log10((v + 1.0) / I0)


def od_to_rgb(od: np.ndarray, height: int, width: int) -> RgbPatch:
    v = I0 * np.power(10.0, -np.asarray(od, dtype=np.float64)) - 1.0
    return RgbPatch(np.clip(np.rint(v), 0, 255).astype(np.uint8).reshape(height, width, 3))


def estimate_stain_profile(patch: RgbPatch) -> StainProfile:
    od = rgb_to_od(patch)
    tissue = od[np.linalg.norm(od, axis=1) > OD_THRESHOLD]
    if len(tissue) < MIN_TISSUE_PIXELS:
        raise InsufficientTissue(
            f"only {len(tissue)} pixels have OD magnitude above {OD_THRESHOLD}; need {MIN_TISSUE_PIXELS}")

    # the stain plane passes through the origin, so use the uncentred second moment
    _, vecs = np.linalg.eigh(tissue.T @ tissue / len(tissue))
    plane = vecs[:, [2, 1]]
    if plane[:, 0].sum() < 0:
        plane[:, 0] *= -1
    proj = tissue @ plane
    phi = np.arctan2(proj[:, 1], proj[:, 0])
    lo, hi = np.percentile(phi, [ALPHA, 100 - ALPHA])
    cols = [plane @ np.array([np.cos(a), np.sin(a)]) for a in (lo, hi)]
    cols = [_nonneg_unit(c) for c in cols]
    # hematoxylin absorbs more red than eosin does
    if cols[0][0] < cols[1][0]:
        cols.reverse()
    he = np.stack(cols, axis=1)

    conc = _concentrations(od, he)
    max_c = np.percentile(conc, 100 - ALPHA, axis=0)
    max_c = np.maximum(max_c, 1e-6)
    return StainProfile(he, max_c)


def _nonneg_unit(v: np.ndarray) -> np.ndarray:
    if v.sum() < 0:
        v = -v
    return _unit(np.clip(v, 0.0, None))


def _concentrations(od: np.ndarray, he: np.ndarray) -> np.ndarray:
    """Least-squares stain concentrations per pixel, shape (pixels, 2)."""
    return np.linalg.lstsq(he, od.T, rcond=None)[0].T


def normalize(patch: RgbPatch, source: StainProfile, target: StainProfile) -> RgbPatch:
    """Re-express the patch's stains in the target profile.

    The part of each pixel's OD outside the source stain plane is carried
    over unchanged, so target == source is the identity up to rounding.
    """
    od = rgb_to_od(patch)
    conc = _concentrations(od, source.stain_matrix)
    residual = od - conc @ source.stain_matrix.T
    conc = conc * (target.max_concentrations / source.max_concentrations)
    out = conc @ target.stain_matrix.T + residual
    return od_to_rgb(out, patch.height, patch.width)


# -- I/O ----------------------------------------------------------------------

def read_patch(path) -> RgbPatch:
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            rgb = im.convert("RGB")
    except FileNotFoundError:
        raise IoFailure(f"{path}: no such file") from None
    except OSError as exc:
        raise DataError(f"{path}: cannot decode image ({exc})") from None
    return RgbPatch(np.asarray(rgb, dtype=np.uint8).copy())


def write_patch(patch: RgbPatch, path) -> None:
    path = Path(path)
    fmt = {".png": "PNG", ".ppm": "PPM"}.get(path.suffix.lower())
    if fmt is None:
        raise DataError(f"{path}: only .png and .ppm are supported")
    try:
        Image.fromarray(patch.pixels, "RGB").save(path, format=fmt)
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from None


def save_profile(profile: StainProfile, path) -> None:
    Path(path).write_text(json.dumps(profile.to_json(), indent=1))


def load_profile(path) -> StainProfile:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise IoFailure(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    return StainProfile.from_json(doc)


def normalize_directory(in_dir, out_dir, target: StainProfile | None = None) -> dict[str, str]:
    """Normalize every .png/.ppm patch in in_dir into out_dir (same file names).

    Patches without enough tissue are copied unchanged. Returns {name: status}.
    """
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    if not in_dir.is_dir():
        raise IoFailure(f"{in_dir}: not a directory")
    target = target or DEFAULT_TARGET
    out_dir.mkdir(parents=True, exist_ok=True)
    status = {}
    for path in sorted(p for p in in_dir.iterdir() if p.suffix.lower() in PATCH_SUFFIXES):
        patch = read_patch(path)
        try:
            out = normalize(patch, estimate_stain_profile(patch), target)
            status[path.name] = "normalized"
        except InsufficientTissue as exc:
            log.warning("copied unchanged", extra={"fields": {"file": str(path), "reason": str(exc)}})
            out = patch
            status[path.name] = "copied"
        write_patch(out, out_dir / path.name)
    return status
