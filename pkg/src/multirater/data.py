"""Synthetic multi-rater data, manifest I/O and annotation shuffling.

Each synthetic case is a union of random filled ellipses. Raters are
simulated by applying erosion, dilation or identity with a disc structuring
element to that base mask, so rater ``r`` is the same operation in every
case ("aligned" annotations). :func:`shuffle_annotations` breaks that
correspondence per case.

On disk a dataset is a directory of 16-bit grayscale PNG images, 8-bit
{0, 255} PNG masks and a ``manifest.json``::

    {"version": 1, "raters": [...], "se_radius": int, "seed": int,
     "cases": [{"id": str, "image": str, "masks": [str, ...], "split": str}]}
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from . import kernels

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"
RATER_OPS = ("erode", "dilate", "identity")
SPLITS = ("train", "val", "test")
# affine image normalisation lands in [-1 + NORM_EPS, 1 - NORM_EPS]
NORM_EPS = 1e-3
# raw intensity layout: background <= BG_MAX, foreground >= FG_MIN (before noise)
BG_MAX = 0.2
FG_MIN = 0.6
FG_THRESHOLD = 0.5 * (BG_MAX + FG_MIN)
MAX_ATTEMPTS = 100


class GenerationError(RuntimeError):
    pass


class ManifestError(ValueError):
    pass


@dataclass
class MultiRaterCase:
    image: np.ndarray  # (H, W) float32 in (-1, 1)
    rater_masks: np.ndarray  # (m, H, W) uint8 {0, 1}
    case_id: str
    rater_ids: list[str] | None = None
    split: str = "train"

    def __post_init__(self):
        masks = np.asarray(self.rater_masks)
        if masks.ndim != 3 or masks.shape[0] < 1:
            raise ValueError(f"case {self.case_id}: expected (m, H, W) masks, got {masks.shape}")
        if masks.shape[1:] != np.shape(self.image):
            raise ValueError(f"case {self.case_id}: mask shape {masks.shape[1:]} != image shape {np.shape(self.image)}")

    @property
    def num_raters(self) -> int:
        return len(self.rater_masks)


@dataclass(frozen=True)
class GenConfig:
    num_cases: int = 50
    image_size: int = 64
    num_shapes: int = 2
    se_radius: int = 2
    noise_std: float = 0.05
    rater_ops: tuple[str, ...] = ("erode", "identity", "dilate")
    seed: int = 0
    test_fraction: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "rater_ops", tuple(self.rater_ops))
        if self.num_cases < 1:
            raise ValueError("num_cases must be >= 1")
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")
        if self.num_shapes < 1:
            raise ValueError("num_shapes must be >= 1")
        if self.se_radius < 1:
            raise ValueError("se_radius must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if not self.rater_ops:
            raise ValueError("rater_ops must not be empty")
        for op in self.rater_ops:
            if op not in RATER_OPS:
                raise ValueError(f"unknown rater op {op!r}; expected one of {RATER_OPS}")
        if not 0 <= self.test_fraction < 1:
            raise ValueError("test_fraction must be in [0, 1)")


def erode(mask, se_radius: int) -> np.ndarray:
    return kernels.erode(np.asarray(mask, dtype=np.uint8), int(se_radius))


def dilate(mask, se_radius: int) -> np.ndarray:
    return kernels.dilate(np.asarray(mask, dtype=np.uint8), int(se_radius))


def simulate_raters(base_mask, rater_ops, se_radius: int) -> list[np.ndarray]:
    base = (np.asarray(base_mask) != 0).astype(np.uint8)
    out = []
    for op in rater_ops:
        if op == "erode":
            out.append(erode(base, se_radius))
        elif op == "dilate":
            out.append(dilate(base, se_radius))
        elif op == "identity":
            out.append(base.copy())
        else:
            raise ValueError(f"unknown rater op {op!r}; expected one of {RATER_OPS}")
    return out


def rater_ids_for(ops) -> list[str]:
    ids = []
    for i, op in enumerate(ops):
        ids.append(op if list(ops).count(op) == 1 else f"{op}_{i}")
    return ids


def _ellipse(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = rng.uniform(0.25, 0.75, size=2) * size
    a, b = rng.uniform(0.08, 0.2, size=2) * size
    theta = rng.uniform(0, math.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    return ((u / a) ** 2 + (v / b) ** 2 <= 1.0).astype(np.uint8)


def _smooth_field(size: int, sigma: float, rng: np.random.Generator) -> np.ndarray:
    f = gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    lo, hi = f.min(), f.max()
    return (f - lo) / (hi - lo) if hi > lo else np.zeros_like(f)


def render_base_mask(config: GenConfig, rng: np.random.Generator) -> np.ndarray:
    """Random union of filled ellipses whose erosion stays non-empty."""
    size = config.image_size
    for _ in range(MAX_ATTEMPTS):
        n = int(rng.integers(1, config.num_shapes + 1))
        mask = np.zeros((size, size), dtype=np.uint8)
        for _ in range(n):
            mask |= _ellipse(size, rng)
        if erode(mask, config.se_radius).any() and not dilate(mask, config.se_radius).all():
            return mask
    raise GenerationError(f"no usable shape after {MAX_ATTEMPTS} attempts (image_size={size}, se_radius={config.se_radius})")


def render_image(base_mask: np.ndarray, noise_std: float, rng: np.random.Generator) -> np.ndarray:
    """Raw intensities in [0, 1]: shaded foreground above FG_MIN, textured background below BG_MAX."""
    size = base_mask.shape[0]
    shade = _smooth_field(size, size / 8.0, rng)
    texture = _smooth_field(size, size / 16.0, rng)
    fg = FG_MIN + 0.2 * shade
    bg = BG_MAX * texture
    raw = np.where(base_mask != 0, fg, bg)
    if noise_std > 0:
        raw = raw + rng.normal(0.0, noise_std, raw.shape)
    return np.clip(raw, 0.0, 1.0)


def generate_case(config: GenConfig, index: int):
    """Return ``(raw_image, rater_masks)`` for case ``index``; keyed on (seed, index)."""
    rng = np.random.default_rng([config.seed, index])
    base = render_base_mask(config, rng)
    raw = render_image(base, config.noise_std, rng)
    return raw, simulate_raters(base, config.rater_ops, config.se_radius)


def _write_png(path: Path, arr: np.ndarray) -> None:
    Image.fromarray(arr).save(path, format="PNG")


def _assign_splits(config: GenConfig) -> list[str]:
    n_test = int(round(config.num_cases * config.test_fraction))
    order = np.random.default_rng([config.seed, 2**31 - 1]).permutation(config.num_cases)
    splits = ["train"] * config.num_cases
    for i in order[:n_test]:
        splits[int(i)] = "test"
    return splits


def generate_dataset(config: GenConfig, output_dir) -> dict:
    """Write images, masks and ``manifest.json`` under ``output_dir``; return the manifest."""
    out = Path(output_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    raters = rater_ids_for(config.rater_ops)
    splits = _assign_splits(config)
    cases = []
    for i in range(config.num_cases):
        case_id = f"case_{i:04d}"
        raw, masks = generate_case(config, i)
        image_rel = f"images/{case_id}.png"
        _write_png(out / image_rel, np.round(raw * 65535).astype(np.uint16))
        mask_rels = []
        for rid, m in zip(raters, masks):
            rel = f"masks/{case_id}_{rid}.png"
            _write_png(out / rel, (m * 255).astype(np.uint8))
            mask_rels.append(rel)
        cases.append({"id": case_id, "image": image_rel, "masks": mask_rels, "split": splits[i]})
    manifest = {
        "version": MANIFEST_VERSION,
        "raters": raters,
        "se_radius": config.se_radius,
        "seed": config.seed,
        "generation": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(config).items()},
        "cases": cases,
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(path) -> tuple[dict, Path]:
    """Load and validate a manifest; ``path`` may be the file or its directory."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from exc
    if manifest.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"{path}: unsupported manifest version {manifest.get('version')!r}")
    raters = manifest.get("raters")
    if not raters:
        raise ManifestError(f"{path}: no raters listed")
    for entry in manifest.get("cases", []):
        if len(entry.get("masks", [])) != len(raters):
            raise ManifestError(f"{path}: case {entry.get('id')} has {len(entry.get('masks', []))} masks, expected {len(raters)}")
        if entry.get("split", "train") not in SPLITS:
            raise ManifestError(f"{path}: case {entry.get('id')} has unknown split {entry.get('split')!r}")
    return manifest, path.parent


def normalize_image(img: np.ndarray) -> np.ndarray:
    """Affine map of [min, max] onto [-1 + NORM_EPS, 1 - NORM_EPS]; constant images map to 0."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi = img.min(), img.max()
    if hi <= lo:
        return np.zeros(img.shape, dtype=np.float32)
    unit = (img - lo) / (hi - lo)
    return ((2.0 * unit - 1.0) * (1.0 - NORM_EPS)).astype(np.float32)


def center_crop(arr: np.ndarray, size: int) -> np.ndarray:
    h, w = arr.shape[-2:]
    if size > min(h, w):
        raise ValueError(f"crop {size} larger than image {h}x{w}")
    top, left = (h - size) // 2, (w - size) // 2
    return arr[..., top : top + size, left : left + size]


def _read_png(path: Path) -> np.ndarray:
    if not path.exists():
        raise FileNotFoundError(f"missing file: {path}")
    try:
        with Image.open(path) as im:
            return np.array(im)
    except OSError as exc:
        raise ManifestError(f"cannot read image {path}: {exc}") from exc


def load_case(entry: dict, root, rater_ids: list[str] | None = None, crop: int | None = None) -> MultiRaterCase:
    root = Path(root)
    image = _read_png(root / entry["image"])
    if image.ndim != 2:
        raise ManifestError(f"{entry['image']}: expected a single-channel image")
    masks = []
    for rel in entry["masks"]:
        m = _read_png(root / rel)
        if m.shape != image.shape:
            raise ManifestError(f"{rel}: mask shape {m.shape} != image shape {image.shape}")
        masks.append((m.astype(np.float64) / 255.0 >= 0.5).astype(np.uint8))
    masks = np.stack(masks)
    if crop is not None:
        image = center_crop(image, crop)
        masks = center_crop(masks, crop)
    return MultiRaterCase(
        image=normalize_image(image),
        rater_masks=np.ascontiguousarray(masks),
        case_id=entry["id"],
        rater_ids=list(rater_ids) if rater_ids else None,
        split=entry.get("split", "train"),
    )


def load_dataset(manifest_path, split: str | None = None, crop: int | None = None) -> list[MultiRaterCase]:
    manifest, root = read_manifest(manifest_path)
    return [
        load_case(e, root, manifest["raters"], crop)
        for e in manifest["cases"]
        if split is None or e.get("split", "train") == split
    ]


def shuffle_annotations(cases: list[MultiRaterCase], seed: int) -> list[MultiRaterCase]:
    """Per-case random permutation of rater order; the mask set of each case is unchanged."""
    out = []
    for i, case in enumerate(cases):
        perm = np.random.default_rng([seed, i]).permutation(case.num_raters)
        ids = [case.rater_ids[j] for j in perm] if case.rater_ids else None
        out.append(replace(case, rater_masks=case.rater_masks[perm], rater_ids=ids))
    return out


def rater_subset(cases: list[MultiRaterCase], r: int) -> list[MultiRaterCase]:
    """Single-rater view holding only mask ``r`` of every case."""
    return [
        replace(c, rater_masks=c.rater_masks[r : r + 1], rater_ids=[c.rater_ids[r]] if c.rater_ids else None)
        for c in cases
    ]
