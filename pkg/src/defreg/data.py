"""Dataset ingestion, preprocessing, and synthetic data generation.

On-disk layout (layout_version 1):
    root/{train,val,test}/pair_%04d/
        source.png, target.png          16-bit grayscale, [-1,1] quantized
        source_mask.png, target_mask.png  16-bit label maps (optional)
        meta.json                       modality tags, spacing, layout_version
        gt_field.npy                    2xHxW float32 (synthetic data only)

The synthetic second modality follows: foreground intensity remap
cos(I*pi/255) on the 8-bit scale, 3x3 binomial blur, random elastic
deformation, then min-max renormalization to [-1,1].
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import correlate1d, gaussian_filter, map_coordinates

from .grids import DeformationField, ImageGrid, MaskGrid, warp

LAYOUT_VERSION = 1
SPLITS = ("train", "val", "test")


@dataclass
class PairRecord:
    source: ImageGrid
    target: ImageGrid
    source_mask: MaskGrid | None = None
    target_mask: MaskGrid | None = None
    gt_field: DeformationField | None = None
    meta: dict = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        if self.source.data.shape != self.target.data.shape:
            raise ValueError(f"pair {self.name!r}: source/target shape mismatch "
                             f"{self.source.data.shape} vs {self.target.data.shape}")
        for mask, which in ((self.source_mask, "source"), (self.target_mask, "target")):
            if mask is not None and mask.labels.shape != self.source.data.shape:
                raise ValueError(f"pair {self.name!r}: {which} mask shape {mask.labels.shape} "
                                 f"does not match image {self.source.data.shape}")


@dataclass
class PairedDataset:
    records: list
    split: str = "train"
    direction: str = ""

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i) -> PairRecord:
        return self.records[i]

    def __iter__(self):
        return iter(self.records)


@dataclass
class ElasticDeformConfig:
    control_grid_spacing: float = 16.0
    max_displacement: float = 6.0
    smoothing_sigma: float = 2.0
    seed: int | None = None

    def __post_init__(self):
        if self.control_grid_spacing <= 0:
            raise ValueError("control_grid_spacing must be positive")
        if self.max_displacement < 0:
            raise ValueError("max_displacement must be non-negative")
        if self.max_displacement >= self.control_grid_spacing:
            raise ValueError("max_displacement must stay below control_grid_spacing "
                             "to keep the ground truth fold-free")


def save_png16(path, values: np.ndarray):
    """Lossless 16-bit grayscale PNG from a uint16 array."""
    arr = np.asarray(values)
    if arr.dtype != np.uint16:
        raise ValueError(f"expected uint16, got {arr.dtype}")
    Image.fromarray(arr).save(path)


def load_png16(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.uint16)


def _image_to_u16(data: np.ndarray) -> np.ndarray:
    return np.round((np.clip(data, -1.0, 1.0) + 1.0) / 2.0 * 65535.0).astype(np.uint16)


def _u16_to_image(arr: np.ndarray) -> np.ndarray:
    return (arr.astype(np.float32) / 65535.0) * 2.0 - 1.0


def save_dataset(dataset: PairedDataset, root) -> Path:
    """Write one split of a dataset in the layout_version-1 directory format."""
    root = Path(root)
    split_dir = root / dataset.split
    split_dir.mkdir(parents=True, exist_ok=True)
    for i, rec in enumerate(dataset.records):
        pair_dir = split_dir / f"pair_{i:04d}"
        pair_dir.mkdir(parents=True, exist_ok=True)
        save_png16(pair_dir / "source.png", _image_to_u16(rec.source.data))
        save_png16(pair_dir / "target.png", _image_to_u16(rec.target.data))
        if rec.source_mask is not None:
            save_png16(pair_dir / "source_mask.png", rec.source_mask.labels.astype(np.uint16))
        if rec.target_mask is not None:
            save_png16(pair_dir / "target_mask.png", rec.target_mask.labels.astype(np.uint16))
        if rec.gt_field is not None:
            np.save(pair_dir / "gt_field.npy", rec.gt_field.displacements.astype(np.float32))
        meta = {
            "modality_source": rec.source.modality_tag or "unknown",
            "modality_target": rec.target.modality_tag or "unknown",
            "spacing_mm": rec.meta.get("spacing_mm", 1.0),
            "layout_version": LAYOUT_VERSION,
        }
        (pair_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return split_dir


def load_dataset(root_path, split: str = "train", layout_version: int = LAYOUT_VERSION) -> PairedDataset:
    """Load one split; deterministic pair ordering by directory name."""
    if layout_version != LAYOUT_VERSION:
        raise ValueError(f"unknown layout version {layout_version}")
    split_dir = Path(root_path) / split
    if not split_dir.is_dir():
        raise FileNotFoundError(f"missing split directory {split_dir}")
    records = []
    for pair_dir in sorted(split_dir.glob("pair_*")):
        name = pair_dir.name
        for required in ("source.png", "target.png", "meta.json"):
            if not (pair_dir / required).exists():
                raise FileNotFoundError(f"pair {name}: missing {required}")
        meta = json.loads((pair_dir / "meta.json").read_text())
        if meta.get("layout_version") != LAYOUT_VERSION:
            raise ValueError(f"pair {name}: unsupported layout_version {meta.get('layout_version')}")
        source = ImageGrid(_u16_to_image(load_png16(pair_dir / "source.png")),
                           modality_tag=meta.get("modality_source", ""))
        target = ImageGrid(_u16_to_image(load_png16(pair_dir / "target.png")),
                           modality_tag=meta.get("modality_target", ""))
        masks = {}
        for key in ("source_mask", "target_mask"):
            p = pair_dir / f"{key}.png"
            masks[key] = MaskGrid(load_png16(p).astype(np.int32)) if p.exists() else None
        gt = None
        gt_path = pair_dir / "gt_field.npy"
        if gt_path.exists():
            gt = DeformationField(np.load(gt_path))
        try:
            rec = PairRecord(source, target, masks["source_mask"], masks["target_mask"],
                             gt_field=gt, meta=meta, name=name)
        except ValueError as e:
            raise ValueError(f"invalid pair in {pair_dir}: {e}") from e
        records.append(rec)
    return PairedDataset(records, split=split)


def dataset_checksum(root_path) -> str:
    """Stable content hash over every file of a dataset directory tree."""
    import hashlib

    h = hashlib.sha256()
    root = Path(root_path)
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def preprocess_slice(raw, target_size: int = 256) -> ImageGrid:
    """Pad to square, resize, min-max normalize to [-1,1]."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.size == 0:
        raise ValueError(f"expected non-empty 2D slice, got shape {raw.shape}")
    if not np.all(np.isfinite(raw)):
        raise ValueError("slice contains non-finite values")
    h, w = raw.shape
    side = max(h, w)
    padded = np.full((side, side), raw.min(), dtype=np.float64)
    r0 = (side - h) // 2
    c0 = (side - w) // 2
    padded[r0:r0 + h, c0:c0 + w] = raw
    if side != target_size:
        img = Image.fromarray(padded.astype(np.float32), mode="F")
        padded = np.asarray(img.resize((target_size, target_size), Image.BILINEAR), dtype=np.float64)
    lo, hi = padded.min(), padded.max()
    if hi == lo:
        warnings.warn("constant slice: normalizing to all -1")
        return ImageGrid(np.full((target_size, target_size), -1.0, dtype=np.float32))
    out = (2.0 * (padded - lo) / (hi - lo) - 1.0).astype(np.float32)
    return ImageGrid(out)


def otsu_threshold(data: np.ndarray) -> float:
    """Classic between-class-variance-maximizing global threshold."""
    lo, hi = float(data.min()), float(data.max())
    if hi == lo:
        return lo
    hist, edges = np.histogram(data, bins=256, range=(lo, hi))
    centers = (edges[:-1] + edges[1:]) / 2
    weights = hist.astype(np.float64) / hist.sum()
    cum_w = np.cumsum(weights)
    cum_mu = np.cumsum(weights * centers)
    mu_total = cum_mu[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mu_total * cum_w - cum_mu) ** 2 / (cum_w * (1.0 - cum_w))
    between[~np.isfinite(between)] = -1.0
    return float(centers[int(np.argmax(between))])


def remap_intensity(data: np.ndarray, fg_mask: MaskGrid | None) -> np.ndarray:
    """cos(I*pi/255) on foreground pixels of an 8-bit-scale image; background untouched."""
    data = np.asarray(data, dtype=np.float64)
    if fg_mask is not None:
        fg = fg_mask.labels > 0
        if fg.shape != data.shape:
            raise ValueError(f"mask shape {fg.shape} does not match image {data.shape}")
    else:
        fg = data > otsu_threshold(data)
    out = data.copy()
    out[fg] = np.cos(data[fg] * np.pi / 255.0)
    return out


def binomial_blur3(data: np.ndarray) -> np.ndarray:
    """Separable 3x3 blur with the [1,2,1]/4 kernel per axis, reflect borders."""
    kernel = np.array([1.0, 2.0, 1.0]) / 4.0
    out = correlate1d(np.asarray(data, dtype=np.float64), kernel, axis=0, mode="reflect")
    return correlate1d(out, kernel, axis=1, mode="reflect")


def random_elastic_field(cfg: ElasticDeformConfig, shape,
                         rng: np.random.Generator | None = None) -> DeformationField:
    """Control-grid elastic displacement: uniform coarse samples, Gaussian-smoothed,
    bilinearly upsampled. Component magnitudes never exceed max_displacement."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    h, w = int(shape[0]), int(shape[1])
    s = float(cfg.control_grid_spacing)
    gh = int(np.ceil((h - 1) / s)) + 1
    gw = int(np.ceil((w - 1) / s)) + 1
    coarse = rng.uniform(-cfg.max_displacement, cfg.max_displacement, size=(2, gh, gw))
    if cfg.smoothing_sigma > 0 and cfg.max_displacement > 0:
        sigma = cfg.smoothing_sigma / s
        coarse = np.stack([gaussian_filter(c, sigma=sigma, mode="reflect") for c in coarse])
    rows = np.arange(h, dtype=np.float64) / s
    cols = np.arange(w, dtype=np.float64) / s
    grid_r, grid_c = np.meshgrid(rows, cols, indexing="ij")
    full = np.stack([
        map_coordinates(coarse[k], [grid_r, grid_c], order=1, mode="nearest")
        for k in range(2)
    ])
    return DeformationField(full.astype(np.float32))


def _renormalize(data: np.ndarray) -> np.ndarray:
    lo, hi = float(data.min()), float(data.max())
    if hi == lo:
        warnings.warn("constant image: normalizing to all -1")
        return np.full_like(data, -1.0, dtype=np.float32)
    return (2.0 * (data - lo) / (hi - lo) - 1.0).astype(np.float32)


def synthesize_modality(img: ImageGrid, fg_mask: MaskGrid | None, blur_kernel: int = 3,
                        elastic: ElasticDeformConfig | None = None,
                        deformation: DeformationField | None = None) -> ImageGrid:
    """Simulated second modality from an 8-bit-scale image.

    Foreground remap -> 3x3 blur -> elastic deformation -> renormalize to [-1,1].
    Pass `deformation` to reuse a known field instead of sampling from `elastic`.
    """
    if blur_kernel != 3:
        raise ValueError("only the 3x3 blur kernel is supported")
    if elastic is not None and deformation is not None:
        raise ValueError("pass either elastic config or an explicit deformation, not both")
    out = remap_intensity(img.data, fg_mask)
    out = binomial_blur3(out)
    if deformation is None and elastic is not None:
        deformation = random_elastic_field(elastic, out.shape)
    if deformation is not None:
        out = warp(ImageGrid(out), deformation, interpolation="bilinear").data
    return ImageGrid(_renormalize(out), modality_tag=(img.modality_tag + "-synth").lstrip("-"))


def _random_shapes_image(size: int, rng: np.random.Generator):
    """Textured random ellipses/rectangles on a zero background, 8-bit scale."""
    img = np.zeros((size, size), dtype=np.float64)
    labels = np.zeros((size, size), dtype=np.int32)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    n_shapes = int(rng.integers(2, 4))
    for k in range(n_shapes):
        cy, cx = rng.uniform(0.3, 0.7, size=2) * size
        ay, ax = rng.uniform(0.10, 0.24, size=2) * size
        theta = rng.uniform(0.0, np.pi)
        u = (yy - cy) * np.cos(theta) + (xx - cx) * np.sin(theta)
        v = -(yy - cy) * np.sin(theta) + (xx - cx) * np.cos(theta)
        if rng.integers(0, 2) == 0:
            inside = (u / ay) ** 2 + (v / ax) ** 2 <= 1.0
        else:
            inside = (np.abs(u) <= ay) & (np.abs(v) <= ax)
        base = rng.uniform(90.0, 220.0)
        fy, fx = rng.uniform(2.0, 5.0, size=2) / size
        phase = rng.uniform(0.0, 2.0 * np.pi)
        texture = base + 35.0 * np.sin(2.0 * np.pi * (fy * yy + fx * xx) + phase)
        img[inside] = texture[inside]
        labels[inside] = k + 1
    return np.clip(img, 0.0, 255.0), labels


def default_elastic_config(size: int, seed: int | None = None) -> ElasticDeformConfig:
    """Defaults tuned at 256 squared, scaled proportionally for other sizes."""
    scale = size / 256.0
    return ElasticDeformConfig(control_grid_spacing=16.0 * scale,
                               max_displacement=6.0 * scale,
                               smoothing_sigma=2.0 * scale,
                               seed=seed)


def generate_shapes_dataset(n_pairs: int, size: int = 64,
                            elastic: ElasticDeformConfig | None = None,
                            seed: int = 0, split: str = "train") -> PairedDataset:
    """Self-contained random-shapes pairs with known ground-truth deformations.

    The target is the source pushed through the synthetic-modality pipeline with
    a freshly sampled elastic field; masks and the field ride along as ground
    truth. Fully deterministic in (seed, split, pair index).
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}")
    if elastic is None:
        elastic = default_elastic_config(size)
    split_idx = SPLITS.index(split)
    records = []
    for i in range(n_pairs):
        rng = np.random.default_rng(np.random.SeedSequence((seed, split_idx, i)))
        raw, labels = _random_shapes_image(size, rng)
        source_mask = MaskGrid(labels)
        gt = random_elastic_field(elastic, (size, size), rng=rng)
        target = synthesize_modality(ImageGrid(raw, modality_tag="shapes"), source_mask,
                                     deformation=gt)
        target_mask = warp(source_mask, gt, interpolation="nearest")
        source = ImageGrid((raw / 127.5 - 1.0).astype(np.float32), modality_tag="shapes")
        records.append(PairRecord(source, target, source_mask, target_mask,
                                  gt_field=gt, meta={"spacing_mm": 1.0},
                                  name=f"pair_{i:04d}"))
    return PairedDataset(records, split=split, direction="shapes->shapes-synth")
