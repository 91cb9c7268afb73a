"""Anomaly scoring by reconstruction dissimilarity.

A query patch is re-rendered through the trained translator in one pass:
content encoded in the source domain, style taken from the query itself
with the target domain's style encoder. Because the model only ever
learned healthy appearance, anomalous structure comes back altered, and
the distance between query and reconstruction serves as the anomaly
score. No sampling happens at inference, so scores are reproducible.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from anodet import images
from anodet.errors import DegenerateInputError, ShapeError
from anodet.pipeline import Manifest
from anodet.translator import TranslatorModel

SCORES_NAME = "scores.csv"
_SCORE_HEADER = ["patch_id", "true_label", "metric", "score"]

METRIC_SSIM = "ssim"
METRIC_PERCEPTUAL = "perceptual"


def _gaussian_kernel(window: int, sigma: float) -> np.ndarray:
    half = (window - 1) / 2.0
    x = np.arange(window) - half
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def _window_means(channel: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(channel, kernel.shape)
    return np.einsum("hwij,ij->hw", win, kernel)


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5,
         value_range: float = 2.0, k1: float = 0.01, k2: float = 0.03) -> float:
    """Structural similarity between two images, averaged over windows and channels.

    Gaussian-weighted sliding windows compare local luminance, contrast, and
    structure. The luminance cross term is floored at zero, so two constant
    images of opposite sign score near zero instead of -1; identical images
    score exactly 1. Inputs are (H, W) or (C, H, W) arrays on any fixed
    value range (default 2, for data in [-1, 1]).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[None]
        b = b[None]
    if a.ndim != 3:
        raise ShapeError(f"expected (H, W) or (C, H, W), got {a.shape}")
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd and positive, got {window}")
    if window > min(a.shape[1], a.shape[2]):
        raise DegenerateInputError(
            f"window {window} exceeds image size {a.shape[1:]}"
        )
    c1 = (k1 * value_range) ** 2
    c2 = (k2 * value_range) ** 2
    kernel = _gaussian_kernel(window, sigma)

    values = []
    for ca, cb in zip(a, b):
        mu_a = _window_means(ca, kernel)
        mu_b = _window_means(cb, kernel)
        var_a = _window_means(ca * ca, kernel) - mu_a * mu_a
        var_b = _window_means(cb * cb, kernel) - mu_b * mu_b
        cov = _window_means(ca * cb, kernel) - mu_a * mu_b
        lum = (2.0 * np.maximum(mu_a * mu_b, 0.0) + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
        cs = (2.0 * cov + c2) / (var_a + var_b + c2)
        values.append(np.mean(lum * cs))
    return float(np.mean(values))


class FeaturePyramid(torch.nn.Module):
    """Fixed random convolutional pyramid used by the perceptual distance.

    Weights are drawn once from a seeded generator and never trained, which
    keeps the metric self-contained and reproducible. Pretrained weights can
    be substituted by loading a state dict with the same layout.
    """

    def __init__(self, widths=(16, 32, 64, 128, 256), seed: int = 17):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        in_ch = 3
        for w in widths:
            conv = torch.nn.Conv2d(in_ch, w, 3, stride=2, padding=1)
            fan_in = in_ch * 9
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen)
                                  * (2.0 / fan_in) ** 0.5)
                conv.bias.zero_()
            layers.append(conv)
            in_ch = w
        self.convs = torch.nn.ModuleList(layers)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        feats = []
        h = x
        for conv in self.convs:
            h = F.relu(conv(h))
            feats.append(h)
        return feats


_default_extractor = None


def default_extractor() -> FeaturePyramid:
    global _default_extractor
    if _default_extractor is None:
        _default_extractor = FeaturePyramid()
    return _default_extractor


def perceptual_distance(a: np.ndarray, b: np.ndarray,
                        extractor: FeaturePyramid | None = None) -> float:
    """Distance between unit-normalized feature maps of a fixed conv pyramid.

    Per layer, feature vectors are normalized to unit length at every
    spatial position; the squared differences are averaged over channels
    and positions, then summed across layers.
    """
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 3 or a.shape[0] != 3:
        raise ShapeError(f"expected (3, H, W), got {a.shape}")
    extractor = extractor or default_extractor()
    with torch.no_grad():
        feats_a = extractor(torch.from_numpy(a).unsqueeze(0))
        feats_b = extractor(torch.from_numpy(b).unsqueeze(0))
        total = 0.0
        for fa, fb in zip(feats_a, feats_b):
            na = fa / torch.sqrt((fa * fa).sum(dim=1, keepdim=True) + 1e-10)
            nb = fb / torch.sqrt((fb * fb).sum(dim=1, keepdim=True) + 1e-10)
            total += float(((na - nb) ** 2).mean())
    return total


@dataclass
class Reconstruction:
    """A scored query: input, its re-rendering, and the distance between them."""

    query: np.ndarray
    output: np.ndarray
    metric: str
    score: float


@dataclass
class ScoreRecord:
    patch_id: str
    true_label: str
    metric: str
    score: float


def reconstruct(x: np.ndarray, model: TranslatorModel, source: str = "X",
                target: str = "Y") -> np.ndarray:
    """Single-pass re-rendering of a query patch; no cycle, no sampling."""
    t = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))
    with torch.no_grad():
        out = model.translate(t, source, target)
    return out.numpy()


def anomaly_score(x: np.ndarray, model: TranslatorModel, metric: str = METRIC_SSIM,
                  extractor: FeaturePyramid | None = None,
                  source: str = "X", target: str = "Y") -> Reconstruction:
    """Score one patch: higher means more anomalous."""
    out = reconstruct(x, model, source, target)
    if metric == METRIC_SSIM:
        score = 1.0 - ssim(x, out)
    elif metric == METRIC_PERCEPTUAL:
        score = perceptual_distance(x, out, extractor)
    else:
        raise ValueError(f"unknown metric {metric!r}")
    return Reconstruction(query=x, output=out, metric=metric, score=score)


def score_manifest(manifest: Manifest, data_dir: str | os.PathLike,
                   model: TranslatorModel, metric: str = METRIC_SSIM,
                   jobs: int = 1, dump_dir: str | os.PathLike | None = None,
                   source: str = "X", target: str = "Y"):
    """Score every test patch in the manifest.

    Returns (records, errors): records in manifest order regardless of the
    worker count; a missing or unreadable patch file becomes an error entry
    instead of aborting the run. Patches are scored one at a time so the
    numbers cannot depend on batch composition.
    """
    data = Path(data_dir)
    test = manifest.subset(split="test")
    model.eval()
    extractor = default_extractor() if metric == METRIC_PERCEPTUAL else None
    dump = Path(dump_dir) if dump_dir else None
    if dump:
        dump.mkdir(parents=True, exist_ok=True)

    def score_one(record):
        path = data / f"{record.patch_id}.png"
        try:
            x = images.load_patch(path)
            rec = anomaly_score(x, model, metric, extractor, source, target)
        except Exception as exc:
            return None, (record.patch_id, str(exc))
        if dump:
            pair = images.side_by_side(x, rec.output)
            images.save_raster(dump / f"{record.patch_id}.png", pair)
        return ScoreRecord(record.patch_id, record.label, metric, rec.score), None

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(score_one, test))
    else:
        results = [score_one(r) for r in test]

    records = [r for r, _ in results if r is not None]
    errors = [e for _, e in results if e is not None]
    return records, errors


def write_scores(path: str | os.PathLike, records) -> Path:
    """Write score records as CSV with 8 significant digits."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_SCORE_HEADER)
        for r in records:
            writer.writerow([r.patch_id, r.true_label, r.metric, f"{r.score:.8g}"])
    return path


def read_scores(path: str | os.PathLike) -> list[ScoreRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != _SCORE_HEADER:
            raise ValueError(f"unexpected score header: {reader.fieldnames}")
        return [ScoreRecord(row["patch_id"], row["true_label"], row["metric"],
                            float(row["score"])) for row in reader]
