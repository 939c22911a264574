"""
Reconstruction metrics, a connected-component stand-in for downstream vision
analysis, and the rate/analysis sweep over channel counts.
"""
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from app.config import PSNR_IDENTICAL_DB, VISION_MIN_AREA, VISION_THRESHOLD
from app.errors import EvaluationError, GscError, InvalidArgumentError
from app.services.analysis_codec import CodecBundle
from app.services.channel_select import RdWeights, choose_channel_count, rd_objective, ssim
from app.services.flow_model import SamplerConfig
from app.services.pipeline import decode_stream, encode_image
from app.services.registry import ModelRegistry
from app.services.scene_corpus import CorpusRecord, caption_of
from app.utils.files import to_grayscale

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = ["image", "C", "bpp", "psnr_db", "ssim", "v_distance", "objective"]


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise InvalidArgumentError(f"psnr shape mismatch: {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL_DB
    return 10.0 * math.log10(1.0 / mse)


@dataclass
class VisionDescriptor:
    count: int
    centroids: List[Tuple[float, float]] = field(default_factory=list)  # (x, y), pixel-center coordinates
    areas: List[int] = field(default_factory=list)


def vision_analyze(x: np.ndarray, threshold: float = VISION_THRESHOLD, min_area: int = VISION_MIN_AREA) -> VisionDescriptor:
    """4-connected components of the thresholded image, small specks dropped"""
    mask = to_grayscale(x) > threshold
    labels, found = ndimage.label(mask)  # default structure is 4-connected in 2-D
    centroids, areas = [], []
    for lab in range(1, found + 1):
        component = labels == lab
        area = int(component.sum())
        if area < min_area:
            continue
        rows, cols = np.nonzero(component)
        centroids.append((float(cols.mean()) + 0.5, float(rows.mean()) + 0.5))
        areas.append(area)
    return VisionDescriptor(len(areas), centroids, areas)


def v_distance(va: VisionDescriptor, vb: VisionDescriptor, canvas_diag: float) -> float:
    """
    |count difference| + mean greedy-matched centroid distance / diag
    + 1 per unmatched component.
    """
    pairs = sorted(
        (math.dist(ca, cb), i, j)
        for i, ca in enumerate(va.centroids)
        for j, cb in enumerate(vb.centroids)
    )
    used_a, used_b, dists = set(), set(), []
    for d, i, j in pairs:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        dists.append(d)
    unmatched = (va.count - len(dists)) + (vb.count - len(dists))
    matched_term = (sum(dists) / len(dists)) / canvas_diag if dists else 0.0
    return abs(va.count - vb.count) + matched_term + unmatched


@dataclass
class SweepRow:
    image: str
    C: int
    bpp: float
    psnr_db: float
    ssim: float
    v_distance: float
    objective: float

    def as_csv(self) -> List[str]:
        return [
            self.image, str(self.C), f"{self.bpp:.10f}", f"{self.psnr_db:.6f}",
            f"{self.ssim:.10f}", f"{self.v_distance:.10f}", f"{self.objective:.10f}",
        ]


def evaluate_one(
    record: CorpusRecord,
    caption: str,
    C: int,
    bundle: CodecBundle,
    registry: ModelRegistry,
    sampler: SamplerConfig,
    weights: RdWeights,
    threshold: float = VISION_THRESHOLD,
) -> Tuple[float, float, float, float, float]:
    """(bpp, psnr, ssim, v_distance, objective) for one image at one C"""
    enc = encode_image(record.image, caption, bundle, C)
    rec = decode_stream(enc.data, registry, sampler)
    original = to_grayscale(record.image)
    height, width = original.shape
    v = v_distance(vision_analyze(original, threshold), vision_analyze(rec.image, threshold), math.hypot(width, height))
    return (
        enc.bpp,
        psnr(original, rec.image),
        ssim(original, rec.image),
        v,
        rd_objective(v, enc.total_bits, weights),
    )


def mean_rows(rows: Sequence[SweepRow]) -> List[SweepRow]:
    by_c: Dict[int, List[SweepRow]] = {}
    for row in rows:
        by_c.setdefault(row.C, []).append(row)
    return [
        SweepRow(
            "mean", c,
            float(np.mean([r.bpp for r in group])),
            float(np.mean([r.psnr_db for r in group])),
            float(np.mean([r.ssim for r in group])),
            float(np.mean([r.v_distance for r in group])),
            float(np.mean([r.objective for r in group])),
        )
        for c, group in sorted(by_c.items())
    ]


def rd_sweep(
    records: Sequence[CorpusRecord],
    bundle: CodecBundle,
    registry: ModelRegistry,
    channel_counts: Sequence[int],
    weights: RdWeights,
    sampler: SamplerConfig,
    threshold: float = VISION_THRESHOLD,
) -> List[SweepRow]:
    """Per-image rows for every C, followed by per-C mean rows"""
    counts = sorted(set(channel_counts))
    for c in counts:
        registry.flow_for(bundle.digest, c)  # missing models fail before any work

    rows: List[SweepRow] = []
    for idx, record in enumerate(records):
        for c in counts:
            try:
                metrics = evaluate_one(record, record.caption, c, bundle, registry, sampler, weights, threshold)
            except GscError as exc:
                raise EvaluationError(f"image {idx}, C={c}: {exc.detail}", c) from exc
            rows.append(SweepRow(str(idx), c, *metrics))
        logger.debug(f"[SWEEP] image {idx + 1}/{len(records)} done")
    means = mean_rows(rows)
    for m in means:
        logger.info(f"[SWEEP] C={m.C} bpp={m.bpp:.5f} psnr={m.psnr_db:.2f} v={m.v_distance:.4f}")
    return rows + means


def best_channel_count(rows: Sequence[SweepRow], weights: RdWeights, pixels: int) -> Tuple[int, List[Dict[str, float]]]:
    """Pick C from the sweep's mean rows; bits are recovered as bpp * pixels"""
    means = {r.C: r for r in rows if r.image == "mean"} or {r.C: r for r in mean_rows(rows)}
    return choose_channel_count(
        sorted(means), lambda c: (means[c].bpp * pixels, means[c].v_distance), weights,
    )


def write_sweep_csv(rows: Sequence[SweepRow], path: Union[str, Path]) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_COLUMNS)
        for row in rows:
            writer.writerow(row.as_csv())
    return p


@dataclass
class AblationRow:
    detail: str
    bpp: float
    v_distance: float


def prompt_ablation(
    records: Sequence[CorpusRecord],
    bundle: CodecBundle,
    registry: ModelRegistry,
    C: int,
    details: Sequence[str],
    sampler: SamplerConfig,
    weights: Optional[RdWeights] = None,
    threshold: float = VISION_THRESHOLD,
) -> List[AblationRow]:
    """Mean bpp and v_distance when the caption carries less detail"""
    weights = weights or RdWeights(1.0, 0.0)
    out = []
    for detail in details:
        bpps, dists = [], []
        for record in records:
            caption = caption_of(record.scene, detail)
            rate, _, _, v, _ = evaluate_one(record, caption, C, bundle, registry, sampler, weights, threshold)
            bpps.append(rate)
            dists.append(v)
        out.append(AblationRow(detail, float(np.mean(bpps)), float(np.mean(dists))))
        logger.info(f"[SWEEP] prompt detail={detail} bpp={out[-1].bpp:.5f} v={out[-1].v_distance:.4f}")
    return out
