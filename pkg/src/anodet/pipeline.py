"""Patch extraction pipeline.

Converts large source images (plus optional lesion annotations) into a
manifest of fixed-size patches with tissue/lesion coverage fractions, and
assigns healthy training patches to the two translation domains X and Y.

The manifest is the dataset contract between all downstream modules: a CSV
file with one row per patch, with the patch pixel data stored as individual
PNG files named ``<patch_id>.png`` beside it.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from anodet import images
from anodet.errors import BoundsError, InsufficientDataError

LABEL_HEALTHY = "healthy"
LABEL_ANOMALOUS = "anomalous"
LABEL_AMBIGUOUS = "ambiguous"

DOMAIN_NONE = "none"
DOMAINS = ("X", "Y")

MANIFEST_NAME = "manifest.csv"
MANIFEST_META_NAME = "manifest.meta.json"
_MANIFEST_HEADER = [
    "patch_id", "slide_id", "row", "col", "size",
    "tissue_coverage", "lesion_coverage", "label", "domain", "split",
]

_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp"}


@dataclass(frozen=True)
class FilterParams:
    """Tissue filter settings: HSV thresholds plus morphological cleanup radii."""

    saturation_threshold: float = 0.08
    value_threshold: float = 0.82
    closing_radius: int = 4
    min_object_px: int = 64


@dataclass(frozen=True)
class ThresholdConfig:
    """Coverage thresholds that decide the patch label."""

    tissue_high: float = 0.90
    lesion_low: float = 0.0
    lesion_high: float = 0.90


@dataclass(frozen=True)
class ExtractConfig:
    """Settings for grid patch extraction from one slide."""

    patch_size: int = 512
    keep_ambiguous: bool = False
    thresholds: ThresholdConfig = field(default_factory=ThresholdConfig)
    split: str = "train"

    def __post_init__(self):
        if self.patch_size < 1:
            raise ValueError(f"patch_size must be >= 1, got {self.patch_size}")
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")


@dataclass
class SlideImage:
    """One source image: an RGB raster plus an optional binary lesion mask."""

    id: str
    pixels: np.ndarray
    lesion_mask: np.ndarray | None = None

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"pixels must be (H, W, 3), got {self.pixels.shape}")
        if self.lesion_mask is not None:
            if self.lesion_mask.shape != self.pixels.shape[:2]:
                raise ValueError(
                    f"lesion mask shape {self.lesion_mask.shape} does not match "
                    f"raster {self.pixels.shape[:2]}"
                )
            self.lesion_mask = self.lesion_mask.astype(bool)


@dataclass
class PatchRecord:
    """Provenance, coverages, label, and domain assignment of one patch."""

    patch_id: str
    slide_id: str
    row: int
    col: int
    size: int
    tissue_coverage: float
    lesion_coverage: float
    label: str
    domain: str = DOMAIN_NONE
    split: str = "train"


@dataclass
class Manifest:
    """All patch records of a dataset plus the config fingerprint that produced them."""

    records: list[PatchRecord]
    fingerprint: dict

    def validate(self) -> None:
        ids = [r.patch_id for r in self.records]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate patch ids in manifest")
        thr = self.thresholds()
        for r in self.records:
            if not (0.0 <= r.tissue_coverage <= 1.0 and 0.0 <= r.lesion_coverage <= 1.0):
                raise ValueError(f"{r.patch_id}: coverage outside [0, 1]")
            if thr is not None:
                expected = classify_patch(r.tissue_coverage, r.lesion_coverage, thr)
                if r.label != expected:
                    raise ValueError(
                        f"{r.patch_id}: label {r.label!r} inconsistent with "
                        f"fingerprint thresholds (expected {expected!r})"
                    )
            if r.domain != DOMAIN_NONE and not (r.label == LABEL_HEALTHY and r.split == "train"):
                raise ValueError(f"{r.patch_id}: domain set on a non-healthy or test record")

    def thresholds(self) -> ThresholdConfig | None:
        t = self.fingerprint.get("thresholds")
        return None if t is None else ThresholdConfig(**t)

    def subset(self, *, split: str | None = None, label: str | None = None,
               domain: str | None = None) -> list[PatchRecord]:
        out = self.records
        if split is not None:
            out = [r for r in out if r.split == split]
        if label is not None:
            out = [r for r in out if r.label == label]
        if domain is not None:
            out = [r for r in out if r.domain == domain]
        return out


def _saturation_value(pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """HSV saturation and value channels of an (H, W, 3) uint8 raster."""
    arr = pixels.astype(np.float64) / 255.0
    mx = arr.max(axis=2)
    mn = arr.min(axis=2)
    sat = np.zeros_like(mx)
    nonzero = mx > 0
    sat[nonzero] = (mx[nonzero] - mn[nonzero]) / mx[nonzero]
    return sat, mx


def _disk(radius: int) -> np.ndarray:
    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    return (yy * yy + xx * xx) <= radius * radius


def compute_tissue_mask(slide: SlideImage, params: FilterParams | None = None) -> np.ndarray:
    """Binary tissue mask of a slide: color-space thresholding plus morphological cleanup.

    Background is near-white, low-saturation pixels; the rest is tissue.
    A closing with a disk of ``closing_radius`` fills small holes, then
    connected components below ``min_object_px`` are dropped.
    """
    params = params or FilterParams()
    if slide.pixels.size == 0:
        raise ValueError(f"slide {slide.id!r} has an empty raster")
    sat, val = _saturation_value(slide.pixels)
    background = (sat < params.saturation_threshold) & (val > params.value_threshold)
    mask = ~background

    r = params.closing_radius
    if r > 0:
        # Edge-replicated padding keeps closing from eroding the image border.
        padded = np.pad(mask, r, mode="edge")
        padded = ndimage.binary_closing(padded, structure=_disk(r))
        mask = padded[r:-r, r:-r]

    if params.min_object_px > 1:
        labeled, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
        if n:
            sizes = np.bincount(labeled.ravel())
            keep = sizes >= params.min_object_px
            keep[0] = False
            mask = keep[labeled]
    return mask.astype(bool)


def coverage_fraction(mask: np.ndarray, window: tuple[int, int, int]) -> float:
    """Fraction of true pixels inside the square window (row, col, size)."""
    row, col, size = window
    h, w = mask.shape[:2]
    if row < 0 or col < 0 or row + size > h or col + size > w:
        raise BoundsError(f"window {window} outside mask of shape {(h, w)}")
    count = int(np.count_nonzero(mask[row:row + size, col:col + size]))
    return count / (size * size)


def classify_patch(tissue_cov: float, lesion_cov: float,
                   thresholds: ThresholdConfig | None = None) -> str:
    """Label a patch from its tissue and lesion coverage fractions.

    Healthy needs high tissue coverage and lesion coverage at or below the
    low band; anomalous needs high coverage of both; everything in between
    is ambiguous and gets dropped from the train/test pools.
    """
    thresholds = thresholds or ThresholdConfig()
    if not (0.0 <= tissue_cov <= 1.0) or not (0.0 <= lesion_cov <= 1.0):
        raise ValueError(f"coverages must be in [0, 1], got {(tissue_cov, lesion_cov)}")
    if tissue_cov >= thresholds.tissue_high:
        if lesion_cov >= thresholds.lesion_high:
            return LABEL_ANOMALOUS
        if lesion_cov <= thresholds.lesion_low:
            return LABEL_HEALTHY
    return LABEL_AMBIGUOUS


def extract_patches(slide: SlideImage, mask: np.ndarray,
                    cfg: ExtractConfig | None = None) -> list[PatchRecord]:
    """Tile a slide into non-overlapping patches and label each one.

    The grid strides by the patch size; windows that do not fit are dropped,
    so a slide smaller than one patch yields an empty list.
    """
    cfg = cfg or ExtractConfig()
    h, w = slide.pixels.shape[:2]
    if mask.shape != (h, w):
        raise ValueError(f"mask shape {mask.shape} does not match slide {(h, w)}")
    s = cfg.patch_size
    records = []
    for row in range(0, h - s + 1, s):
        for col in range(0, w - s + 1, s):
            tissue = coverage_fraction(mask, (row, col, s))
            if slide.lesion_mask is not None:
                lesion = coverage_fraction(slide.lesion_mask, (row, col, s))
            else:
                lesion = 0.0
            label = classify_patch(tissue, lesion, cfg.thresholds)
            if label == LABEL_AMBIGUOUS and not cfg.keep_ambiguous:
                continue
            records.append(PatchRecord(
                patch_id=f"{slide.id}_r{row:06d}_c{col:06d}",
                slide_id=slide.id,
                row=row, col=col, size=s,
                tissue_coverage=tissue,
                lesion_coverage=lesion,
                label=label,
                split=cfg.split,
            ))
    return records


def split_domains(manifest: Manifest, seed: int) -> Manifest:
    """Assign every healthy training record to domain X or Y.

    The split is a seeded uniform random partition into disjoint halves, so
    both domains share content and style statistics; counts differ by at
    most one. Non-healthy and test records keep ``domain = none``.
    """
    healthy = [i for i, r in enumerate(manifest.records)
               if r.label == LABEL_HEALTHY and r.split == "train"]
    if len(healthy) < 2:
        raise InsufficientDataError(
            f"need at least 2 healthy train records to split, got {len(healthy)}"
        )
    perm = np.random.default_rng(seed).permutation(len(healthy))
    records = [dataclasses.replace(r) for r in manifest.records]
    for rank, pos in enumerate(perm):
        records[healthy[pos]].domain = DOMAINS[rank % 2]
    fingerprint = dict(manifest.fingerprint)
    fingerprint["domain_seed"] = int(seed)
    out = Manifest(records=records, fingerprint=fingerprint)
    out.validate()
    return out


def sample_records(records: list[PatchRecord], count: int, seed: int) -> list[PatchRecord]:
    """Uniformly subsample ``count`` records without replacement, keeping order."""
    if count >= len(records):
        return list(records)
    rng = np.random.default_rng(seed)
    keep = sorted(rng.choice(len(records), size=count, replace=False).tolist())
    return [records[i] for i in keep]


def write_manifest(manifest: Manifest, out_dir: str | os.PathLike) -> Path:
    """Write manifest.csv (plus a fingerprint sidecar) into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest.validate()
    path = out / MANIFEST_NAME
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_MANIFEST_HEADER)
        for r in manifest.records:
            writer.writerow([
                r.patch_id, r.slide_id, r.row, r.col, r.size,
                f"{r.tissue_coverage:.6f}", f"{r.lesion_coverage:.6f}",
                r.label, r.domain, r.split,
            ])
    with open(out / MANIFEST_META_NAME, "w") as fh:
        json.dump({"fingerprint": manifest.fingerprint}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def read_manifest(data_dir: str | os.PathLike) -> Manifest:
    """Read a manifest directory written by :func:`write_manifest`."""
    data = Path(data_dir)
    path = data / MANIFEST_NAME if data.is_dir() else data
    if not path.is_file():
        raise FileNotFoundError(f"no manifest at {path}")
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != _MANIFEST_HEADER:
            raise ValueError(f"unexpected manifest header: {reader.fieldnames}")
        for row in reader:
            records.append(PatchRecord(
                patch_id=row["patch_id"],
                slide_id=row["slide_id"],
                row=int(row["row"]), col=int(row["col"]), size=int(row["size"]),
                tissue_coverage=float(row["tissue_coverage"]),
                lesion_coverage=float(row["lesion_coverage"]),
                label=row["label"], domain=row["domain"], split=row["split"],
            ))
    meta_path = path.parent / MANIFEST_META_NAME
    fingerprint = {}
    if meta_path.is_file():
        with open(meta_path) as fh:
            fingerprint = json.load(fh).get("fingerprint", {})
    manifest = Manifest(records=records, fingerprint=fingerprint)
    manifest.validate()
    return manifest


def _load_slide(path: Path, masks_dir: Path | None) -> SlideImage:
    pixels = images.load_rgb(path)
    lesion = None
    if masks_dir is not None:
        mask_path = masks_dir / f"{path.stem}.png"
        if mask_path.is_file():
            lesion = images.load_rgb(mask_path).max(axis=2) > 0
    return SlideImage(id=path.stem, pixels=pixels, lesion_mask=lesion)


def preprocess_directory(input_dir: str | os.PathLike, out_dir: str | os.PathLike, *,
                         masks_dir: str | os.PathLike | None = None,
                         filter_params: FilterParams | None = None,
                         extract_cfg: ExtractConfig | None = None,
                         seed: int = 0,
                         sample_count: int | None = None,
                         jobs: int = 1) -> Manifest:
    """Extract patches from every image in a directory and write the manifest.

    Slides are processed independently (optionally in parallel) and merged in
    sorted filename order, so the resulting manifest is deterministic. When
    ``sample_count`` is set, the healthy training pool is subsampled to that
    many records (uniformly, without replacement, driven by ``seed``).
    """
    filter_params = filter_params or FilterParams()
    extract_cfg = extract_cfg or ExtractConfig()
    input_dir = Path(input_dir)
    masks = Path(masks_dir) if masks_dir else None
    slide_paths = sorted(p for p in input_dir.iterdir()
                         if p.is_file() and p.suffix.lower() in _IMAGE_SUFFIXES)
    if not slide_paths:
        raise FileNotFoundError(f"no input images found in {input_dir}")

    def process(path: Path) -> tuple[SlideImage, list[PatchRecord]]:
        slide = _load_slide(path, masks)
        mask = compute_tissue_mask(slide, filter_params)
        return slide, extract_patches(slide, mask, extract_cfg)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(process, slide_paths))
    else:
        results = [process(p) for p in slide_paths]

    records: list[PatchRecord] = []
    for slide, recs in results:
        records.extend(recs)

    if sample_count is not None:
        healthy = [r for r in records if r.label == LABEL_HEALTHY and r.split == "train"]
        kept = set(id(r) for r in sample_records(healthy, sample_count, seed))
        records = [r for r in records
                   if id(r) in kept or not (r.label == LABEL_HEALTHY and r.split == "train")]

    fingerprint = {
        "kind": "pipeline",
        "filter": dataclasses.asdict(filter_params),
        "thresholds": dataclasses.asdict(extract_cfg.thresholds),
        "patch_size": extract_cfg.patch_size,
        "keep_ambiguous": extract_cfg.keep_ambiguous,
        "split": extract_cfg.split,
        "seed": int(seed),
        "sample_count": sample_count,
    }
    manifest = Manifest(records=records, fingerprint=fingerprint)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    by_slide: dict[str, list[PatchRecord]] = {}
    for r in records:
        by_slide.setdefault(r.slide_id, []).append(r)
    for slide, _ in results:
        for r in by_slide.get(slide.id, ()):
            tile = slide.pixels[r.row:r.row + r.size, r.col:r.col + r.size]
            images.save_raster(out / f"{r.patch_id}.png", tile)
    write_manifest(manifest, out)
    return manifest
