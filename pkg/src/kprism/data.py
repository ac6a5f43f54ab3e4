"""Synthetic-shapes dataset generation and PNG/manifest ingestion.

Images are 8-bit RGB PNGs, masks are single-channel 8-bit PNGs with integer
class labels (0 = background), and the manifest is a JSON document with paths
relative to its own directory. Class identity is carried jointly by shape
archetype (disk / rectangle / ring, cycling) and a per-class intensity band,
so segmentation cannot be solved by a constant intensity lookup.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .configs import SynthConfig
from .errors import ConfigError, IngestionError

MANIFEST_VERSION = 1
SHAPE_KINDS = ("disk", "rectangle", "ring")
NOISE_SIGMA = 0.05


@dataclass
class Sample:
    """One image/mask pair, intensities in [0,1], labels in 0..n_cls."""

    image: np.ndarray  # (H, W, 3) float32
    mask: np.ndarray  # (H, W) int64
    class_ids: set[int]
    source_id: str


@dataclass
class ManifestEntry:
    image_path: str
    mask_path: str
    split: str


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry]
    class_names: dict[int, str]
    n_cls: int

    def indices(self, split: str | None = None) -> list[int]:
        if split is None:
            return list(range(len(self.entries)))
        return [i for i, e in enumerate(self.entries) if e.split == split]

    def save(self, path: str | Path | None = None) -> Path:
        path = Path(path) if path is not None else self.root / "manifest.json"
        doc = {
            "version": MANIFEST_VERSION,
            "n_cls": self.n_cls,
            "class_names": {str(k): v for k, v in self.class_names.items()},
            "entries": [
                {"image": e.image_path, "mask": e.mask_path, "split": e.split}
                for e in self.entries
            ],
        }
        path.write_text(json.dumps(doc, indent=1))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        if not path.exists():
            raise IngestionError(f"manifest not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise IngestionError(f"manifest does not parse: {path}: {exc}") from exc
        names = {int(k): v for k, v in doc["class_names"].items()}
        n_cls = int(doc["n_cls"])
        if sorted(names) != list(range(1, n_cls + 1)):
            raise IngestionError(f"class ids must be contiguous 1..{n_cls}: {sorted(names)}")
        entries = [ManifestEntry(e["image"], e["mask"], e["split"]) for e in doc["entries"]]
        manifest = cls(root=path.parent, entries=entries, class_names=names, n_cls=n_cls)
        return manifest

    def validate_files(self) -> None:
        for e in self.entries:
            for rel in (e.image_path, e.mask_path):
                if not (self.root / rel).exists():
                    raise IngestionError(f"referenced file missing: {self.root / rel}")


BACKGROUND_RANGE = (0.05, 0.30)
FOREGROUND_RANGE = (0.40, 0.95)  # disjoint from the background gradient
BAND_WIDTH_FACTOR = 1.15  # adjacent class bands overlap, so shape carries class identity too


def _class_intensity_band(class_id: int, n_classes: int) -> tuple[float, float]:
    lo_all, hi_all = FOREGROUND_RANGE
    span = hi_all - lo_all
    width = min(BAND_WIDTH_FACTOR * span / n_classes, span)
    if n_classes == 1:
        return lo_all, hi_all
    start = lo_all + (span - width) * (class_id - 1) / (n_classes - 1)
    return start, start + width


def _shape_footprint(
    kind: str, h: int, w: int, rng: np.random.Generator, small: bool = False
) -> np.ndarray | None:
    """Random footprint of the given kind, fully inside the canvas.

    Primary instances are kept large relative to the encoder's coarsest
    stride so that shapes survive stride-16 mask downsampling (masked pooling
    needs at least one grid cell with majority coverage); secondary instances
    of the same class may be smaller, which keeps single-click predictions
    underdetermined and interactive refinement informative.
    """
    if small:
        size = rng.uniform(min(h, w) / 7.2, min(h, w) / 5.2)
    else:
        size = rng.uniform(min(h, w) / 4.9, min(h, w) / 4.1)
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "disk":
        r = size
        cy = rng.uniform(r + 1, h - r - 1)
        cx = rng.uniform(r + 1, w - r - 1)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r**2
    if kind == "rectangle":
        rh = size * rng.uniform(0.55, 0.85)
        rw = size * rng.uniform(1.05, 1.45)
        cy = rng.uniform(rh + 1, h - rh - 1)
        cx = rng.uniform(rw + 1, w - rw - 1)
        return (np.abs(yy - cy) <= rh) & (np.abs(xx - cx) <= rw)
    if kind == "ring":
        r_out = max(size * 1.3, 5.0)
        if 2 * (r_out + 1) >= min(h, w):
            r_out = min(h, w) / 2.0 - 2.0
        r_in = r_out * rng.uniform(0.25, 0.38)
        cy = rng.uniform(r_out + 1, h - r_out - 1)
        cx = rng.uniform(r_out + 1, w - r_out - 1)
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        return (d2 <= r_out**2) & (d2 >= r_in**2)
    raise ConfigError(f"unknown shape kind {kind!r}")


def class_shape_kind(class_id: int) -> str:
    return SHAPE_KINDS[(class_id - 1) % len(SHAPE_KINDS)]


def _render_sample(cfg: SynthConfig, index: int, rng: np.random.Generator):
    h, w = cfg.height, cfg.width
    # background: random linear gradient, disjoint from the class bands
    a, b = rng.uniform(*BACKGROUND_RANGE, size=2)
    theta = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    t = (np.cos(theta) * xx / max(w - 1, 1)) + (np.sin(theta) * yy / max(h - 1, 1))
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    gray = a + (b - a) * t
    mask = np.zeros((h, w), dtype=np.uint8)

    mandatory = (index % cfg.n_classes) + 1
    present = [mandatory] + [
        c for c in range(1, cfg.n_classes + 1) if c != mandatory and rng.random() < 0.75
    ]
    # primaries first (kept large enough to survive stride-16 mask pooling),
    # then the smaller secondary instances while canvas space lasts
    plan = [(class_id, int(rng.choice([1, 2, 3], p=[0.2, 0.45, 0.35]))) for class_id in present]
    placements = [(class_id, 0) for class_id, _ in plan]
    placements += [(class_id, i) for class_id, n in plan for i in range(1, n)]
    placed_primary: set[int] = set()
    for class_id, inst in placements:
        if inst > 0 and class_id not in placed_primary:
            continue  # primary did not fit; drop the class rather than leave only slivers
        kind = class_shape_kind(class_id)
        lo, hi = _class_intensity_band(class_id, cfg.n_classes)
        for _attempt in range(150):
            fp = _shape_footprint(kind, h, w, rng, small=inst > 0)
            if fp is not None and not (mask[fp] != 0).any():
                mask[fp] = class_id
                gray[fp] = rng.uniform(lo, hi)
                if inst == 0:
                    placed_primary.add(class_id)
                break

    gray = gray + rng.normal(0.0, NOISE_SIGMA, size=(h, w))
    tint = rng.uniform(-0.02, 0.02, size=3)
    image = np.clip(gray[:, :, None] + tint[None, None, :], 0.0, 1.0)
    image8 = np.round(image * 255.0).astype(np.uint8)
    return image8, mask


def generate_synthetic(cfg: SynthConfig, out_dir: str | Path) -> DatasetManifest:
    """Write a deterministic synthetic dataset and its manifest under out_dir."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)

    n_train = cfg.n_samples - cfg.n_val - cfg.n_test
    entries: list[ManifestEntry] = []
    for i in range(cfg.n_samples):
        image8, mask = _render_sample(cfg, i, rng)
        img_rel = f"images/sample_{i:05d}.png"
        mask_rel = f"masks/sample_{i:05d}.png"
        Image.fromarray(image8, mode="RGB").save(out / img_rel)
        Image.fromarray(mask, mode="L").save(out / mask_rel)
        split = "train" if i < n_train else ("val" if i < n_train + cfg.n_val else "test")
        entries.append(ManifestEntry(img_rel, mask_rel, split))

    class_names = {c: f"class{c}_{class_shape_kind(c)}" for c in range(1, cfg.n_classes + 1)}
    manifest = DatasetManifest(root=out, entries=entries, class_names=class_names, n_cls=cfg.n_classes)
    manifest.save()
    return manifest


def _resize_long_side(image: Image.Image, target: int, resample) -> Image.Image:
    w, h = image.size
    long_side = max(w, h)
    if long_side == target:
        return image
    scale = target / long_side
    new_w = target if w >= h else max(1, round(w * scale))
    new_h = target if h >= w else max(1, round(h * scale))
    return image.resize((new_w, new_h), resample=resample)


def load_sample(manifest: DatasetManifest, index: int, input_size: int | None = None) -> Sample:
    """Load one entry; optionally resize so the long side equals input_size.

    Images use bilinear resampling; masks use nearest-neighbor only, so the
    label set is preserved exactly.
    """
    if not 0 <= index < len(manifest.entries):
        raise IngestionError(f"index {index} out of range for manifest of {len(manifest.entries)}")
    entry = manifest.entries[index]
    img_path = manifest.root / entry.image_path
    mask_path = manifest.root / entry.mask_path
    try:
        img = Image.open(img_path).convert("RGB")
    except (FileNotFoundError, OSError) as exc:
        raise IngestionError(f"cannot read image {img_path}: {exc}") from exc
    try:
        msk = Image.open(mask_path).convert("L")
    except (FileNotFoundError, OSError) as exc:
        raise IngestionError(f"cannot read mask {mask_path}: {exc}") from exc
    if img.size != msk.size:
        raise IngestionError(f"image/mask size mismatch for {img_path} vs {mask_path}")
    if input_size is not None:
        img = _resize_long_side(img, input_size, Image.BILINEAR)
        msk = _resize_long_side(msk, input_size, Image.NEAREST)
    image = np.asarray(img, dtype=np.float32) / 255.0
    mask = np.asarray(msk, dtype=np.int64)
    labels = set(np.unique(mask).tolist())
    bad = labels - set(range(0, manifest.n_cls + 1))
    if bad:
        raise IngestionError(f"mask {mask_path} carries labels {sorted(bad)} outside 0..{manifest.n_cls}")
    return Sample(
        image=image,
        mask=mask,
        class_ids={int(v) for v in labels if v > 0},
        source_id=Path(entry.image_path).stem,
    )


def binarize(mask: np.ndarray, class_id: int) -> np.ndarray:
    """Per-class binary target: 1 exactly where mask == class_id."""
    if class_id < 1:
        raise ConfigError(f"class_id must be >= 1, got {class_id}")
    return (mask == class_id).astype(np.uint8)


def class_presence_counts(manifest: DatasetManifest) -> dict[int, int]:
    """Number of samples in which each class appears (scans mask files)."""
    counts = {c: 0 for c in range(1, manifest.n_cls + 1)}
    for i in range(len(manifest.entries)):
        sample = load_sample(manifest, i)
        for c in sample.class_ids:
            counts[c] += 1
    return counts
