"""Synthetic two-domain texture benchmark.

Generates deterministic value-noise textures in two slightly tinted cohorts
with continuous per-image brightness/contrast/color jitter (standing in for
stain variation between scanners or labs), plus anomalous variants with a
contrasting-texture blob of known area. The generated dataset uses the same
manifest/patch layout as the real pipeline, so training, scoring, and
evaluation run on it unchanged.

Every image is a pure function of (seed, index): no generator state is
shared between patches, so regeneration is bit-identical and parallel-safe.
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass

import numpy as np

from anodet import images, pipeline
from anodet.pipeline import Manifest, PatchRecord, ThresholdConfig

# rng stream tags, one per independent random quantity
_S_HEALTHY = 0
_S_BLOB_FIELD = 1
_S_BLOB_AREA = 2
_S_ANOM_TEX = 3
_S_STYLE = 4

Palette = tuple[tuple[float, float, float], tuple[float, float, float]]

HEALTHY_PALETTE: Palette = ((0.88, 0.72, 0.80), (0.68, 0.42, 0.58))
ANOMALY_PALETTE: Palette = ((0.32, 0.22, 0.48), (0.10, 0.08, 0.26))


@dataclass(frozen=True)
class SynthConfig:
    """Settings for the synthetic dataset generator."""

    seed: int = 0
    n_train: int = 2000         # healthy training patches per domain
    n_test: int = 200           # test patches per class
    size: int = 64
    area_lo: float = 0.10       # anomalous blob area fraction range
    area_hi: float = 0.35
    base_freq: int = 4          # texture lattice cells at the first octave
    octaves: int = 2
    tint: float = 0.08          # total palette shift between the two cohorts
    style_jitter: float = 0.10  # per-image brightness/contrast/color spread
    healthy_palette: Palette = HEALTHY_PALETTE
    anomaly_palette: Palette = ANOMALY_PALETTE

    def __post_init__(self):
        if not (0.0 < self.area_lo <= self.area_hi < 1.0):
            raise ValueError(f"need 0 < area_lo <= area_hi < 1, got "
                             f"({self.area_lo}, {self.area_hi})")
        if self.size < 32:
            raise ValueError(f"size must be >= 32, got {self.size}")
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("n_train and n_test must be >= 1")
        if self.base_freq < 1 or self.octaves < 1:
            raise ValueError("base_freq and octaves must be >= 1")
        if not (0.0 <= self.style_jitter < 0.5):
            raise ValueError(f"style_jitter must be in [0, 0.5), got {self.style_jitter}")


def _lattice_field(size: int, nodes: int, rng: np.random.Generator) -> np.ndarray:
    """One octave of value noise: a random lattice smoothly interpolated to size²."""
    lattice = rng.random((nodes + 1, nodes + 1))
    pos = np.arange(size) * (nodes / size)
    i0 = pos.astype(np.intp)
    t = pos - i0
    t = t * t * (3.0 - 2.0 * t)
    wx = t[None, :]
    wy = t[:, None]
    top = lattice[np.ix_(i0, i0)] * (1 - wx) + lattice[np.ix_(i0, i0 + 1)] * wx
    bot = lattice[np.ix_(i0 + 1, i0)] * (1 - wx) + lattice[np.ix_(i0 + 1, i0 + 1)] * wx
    return top * (1 - wy) + bot * wy


def texture_field(size: int, base_freq: int, octaves: int,
                  rng: np.random.Generator) -> np.ndarray:
    """Multi-octave value noise in [0, 1], frequency doubling and amplitude halving."""
    total = np.zeros((size, size))
    weight = 0.0
    for o in range(octaves):
        amp = 0.5 ** o
        nodes = min(base_freq * 2 ** o, size)
        total += amp * _lattice_field(size, nodes, rng)
        weight += amp
    return total / weight


def _colorize(field: np.ndarray, palette: Palette, shift: float = 0.0) -> np.ndarray:
    """Map a scalar field through a two-color palette; returns (3, H, W) in [0, 1]."""
    c0 = np.asarray(palette[0])[:, None, None]
    c1 = np.asarray(palette[1])[:, None, None]
    rgb = c0 + field[None] * (c1 - c0)
    if shift:
        rgb = rgb + shift
    return np.clip(rgb, 0.0, 1.0)


def _cohort_shift(cfg: SynthConfig, index: int) -> float:
    # Alternating indices belong to alternating cohorts; the tint splits
    # symmetrically so both stay centered on the shared palette.
    return cfg.tint / 2 if index % 2 == 0 else -cfg.tint / 2


def _style_transform(rgb01: np.ndarray, cfg: SynthConfig, index: int) -> np.ndarray:
    """Per-image brightness/contrast/color jitter, applied to the whole patch.

    Stands in for stain and scanner variation: a scalar contrast gain around
    mid-gray plus an independent offset per channel, all drawn from one rng
    stream per index. Without this spread the appearance of a cohort would be
    a single point and a trained style encoder would have nothing to carry.
    """
    if cfg.style_jitter == 0.0:
        return rgb01
    rng = np.random.default_rng([cfg.seed, _S_STYLE, index])
    gain = 1.0 + rng.uniform(-cfg.style_jitter, cfg.style_jitter)
    offset = rng.uniform(-cfg.style_jitter, cfg.style_jitter, size=(3, 1, 1))
    return np.clip(0.5 + (rgb01 - 0.5) * gain + offset, 0.0, 1.0)


def _healthy01(cfg: SynthConfig, index: int) -> np.ndarray:
    # Base appearance before the per-image jitter; gen_anomalous blends on
    # top of this and applies the jitter to the composite, so off-blob pixels
    # match gen_healthy exactly.
    rng = np.random.default_rng([cfg.seed, _S_HEALTHY, index])
    field = texture_field(cfg.size, cfg.base_freq, cfg.octaves, rng)
    return _colorize(field, cfg.healthy_palette, _cohort_shift(cfg, index))


def _to_image(rgb01: np.ndarray) -> np.ndarray:
    return (rgb01 * 2.0 - 1.0).astype(np.float32)


def gen_healthy(cfg: SynthConfig, index: int) -> np.ndarray:
    """Healthy texture patch as a (3, H, W) float32 image in [-1, 1]."""
    return _to_image(_style_transform(_healthy01(cfg, index), cfg, index))


def gen_anomalous(cfg: SynthConfig, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Healthy patch with a contrasting blob blended in; returns (image, mask).

    The blob is the k smallest pixels of a smooth random field, with k drawn
    inside [area_lo*N, area_hi*N], so the mask area fraction is guaranteed to
    land in the configured range. Blending weight falls to zero at the blob
    boundary and is exactly zero outside it, so the image matches
    :func:`gen_healthy` for the same index everywhere off the mask.
    """
    n = cfg.size * cfg.size
    k_lo = math.ceil(cfg.area_lo * n)
    k_hi = math.floor(cfg.area_hi * n)
    if k_lo > k_hi:
        raise ValueError(
            f"area range ({cfg.area_lo}, {cfg.area_hi}) admits no pixel count at size {cfg.size}"
        )

    rng_field = np.random.default_rng([cfg.seed, _S_BLOB_FIELD, index])
    phi = texture_field(cfg.size, max(1, cfg.base_freq // 2), 1, rng_field)

    rng_area = np.random.default_rng([cfg.seed, _S_BLOB_AREA, index])
    k = k_lo + int(rng_area.integers(0, k_hi - k_lo + 1))

    flat = phi.ravel()
    order = np.argsort(flat, kind="stable")
    tau = flat[order[k - 1]]
    mask = np.zeros(n, dtype=bool)
    mask[order[:k]] = True
    mask = mask.reshape(cfg.size, cfg.size)

    band = max(0.5 * (tau - flat[order[0]]), 1e-6)
    alpha = np.clip((tau - phi) / band, 0.0, 1.0) * mask

    rng_tex = np.random.default_rng([cfg.seed, _S_ANOM_TEX, index])
    tex = texture_field(cfg.size, cfg.base_freq * 2, cfg.octaves, rng_tex)
    anomaly01 = _colorize(tex, cfg.anomaly_palette)

    blended = (1.0 - alpha[None]) * _healthy01(cfg, index) + alpha[None] * anomaly01
    return _to_image(_style_transform(blended, cfg, index)), mask


def build_dataset(cfg: SynthConfig, out_dir: str | os.PathLike) -> Manifest:
    """Generate the full dataset on disk: patches plus manifest.

    Layout: 2*n_train healthy training patches alternating between domains X
    and Y (matching their cohort tints), n_test healthy and n_test anomalous
    test patches. Lesion coverage in the manifest is the exact blob fraction.
    """
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records: list[PatchRecord] = []
    n = cfg.size * cfg.size

    def record(patch_id: str, label: str, domain: str, split: str,
               lesion: float) -> PatchRecord:
        return PatchRecord(
            patch_id=patch_id, slide_id="synth", row=0, col=0, size=cfg.size,
            tissue_coverage=1.0, lesion_coverage=lesion,
            label=label, domain=domain, split=split,
        )

    n_healthy = 2 * cfg.n_train + cfg.n_test
    for index in range(n_healthy):
        patch_id = f"synth_h{index:06d}"
        img = gen_healthy(cfg, index)
        images.save_patch(out / f"{patch_id}.png", img)
        if index < 2 * cfg.n_train:
            domain = pipeline.DOMAINS[index % 2]
            records.append(record(patch_id, pipeline.LABEL_HEALTHY, domain, "train", 0.0))
        else:
            records.append(record(patch_id, pipeline.LABEL_HEALTHY,
                                  pipeline.DOMAIN_NONE, "test", 0.0))

    for index in range(cfg.n_test):
        patch_id = f"synth_a{index:06d}"
        img, mask = gen_anomalous(cfg, index)
        images.save_patch(out / f"{patch_id}.png", img)
        records.append(record(patch_id, pipeline.LABEL_ANOMALOUS,
                              pipeline.DOMAIN_NONE, "test",
                              int(np.count_nonzero(mask)) / n))

    # The label check at read time compares 6-decimal coverages against these
    # thresholds, so the anomalous bound sits just under the configured range.
    thresholds = ThresholdConfig(
        tissue_high=0.9, lesion_low=0.0,
        lesion_high=max(cfg.area_lo - 1e-4, 1e-6),
    )
    fingerprint = {
        "kind": "synth",
        "config": dataclasses.asdict(cfg),
        "thresholds": dataclasses.asdict(thresholds),
    }
    manifest = Manifest(records=records, fingerprint=fingerprint)
    pipeline.write_manifest(manifest, out)
    return manifest
