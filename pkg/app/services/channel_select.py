"""
SSIM ranking of latent channels against a downscaled reference, and the
rate/analysis trade-off used to pick the channel count.
"""
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Sequence, Tuple, Union

import numpy as np

from app.errors import EvaluationError, GscError, InvalidArgumentError
from app.services.analysis_codec import Latent, normalize_map
from app.utils.files import to_grayscale

logger = logging.getLogger(__name__)

SSIM_K1 = 0.01
SSIM_K2 = 0.03
RANGE_TOLERANCE = 1e-9


@dataclass
class SelectionResult:
    indices: List[int]
    scores: List[float]  # aligned with indices
    all_scores: List[float] = field(default_factory=list, repr=False)

    @property
    def C(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class RdWeights:
    alpha: float
    beta: float

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise InvalidArgumentError("rate-distortion weights must be non-negative")
        if self.alpha == 0 and self.beta == 0:
            raise InvalidArgumentError("alpha and beta cannot both be zero")


def empty_selection() -> SelectionResult:
    return SelectionResult([], [], [])


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Single-window SSIM over the whole map (L = 1)"""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise InvalidArgumentError(f"ssim shape mismatch: {x.shape} vs {y.shape}")
    for arr in (x, y):
        if arr.min() < -RANGE_TOLERANCE or arr.max() > 1.0 + RANGE_TOLERANCE:
            raise InvalidArgumentError("ssim inputs must lie in [0, 1]")
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    mx, my = x.mean(), y.mean()
    vx = ((x - mx) ** 2).mean()
    vy = ((y - my) ** 2).mean()
    cov = ((x - mx) * (y - my)).mean()
    return float(((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))


def downscale_reference(reference: np.ndarray, spatial: Tuple[int, int]) -> np.ndarray:
    """Grayscale, then area-average to the latent grid"""
    gray = to_grayscale(reference)
    hp, wp = spatial
    if gray.shape[0] % hp or gray.shape[1] % wp:
        raise InvalidArgumentError(f"reference {gray.shape} does not tile onto latent grid {spatial}")
    fy, fx = gray.shape[0] // hp, gray.shape[1] // wp
    return gray.reshape(hp, fy, wp, fx).mean(axis=(1, 3))


def channel_scores(latent: Latent, reference: np.ndarray) -> List[float]:
    ref = downscale_reference(reference, latent.spatial)
    return [ssim(normalize_map(latent.symbols[i]), ref) for i in range(latent.n)]


def rank_channels(scores: Sequence[float], count: int) -> SelectionResult:
    """Top-`count` by score, ties to the lower index; indices returned ascending"""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    chosen = sorted(order[:count])
    return SelectionResult(chosen, [float(scores[i]) for i in chosen], [float(s) for s in scores])


def select_top_c(latent: Latent, reference: np.ndarray, C: int) -> SelectionResult:
    if not 1 <= C <= latent.n:
        raise InvalidArgumentError(f"C={C} outside [1, {latent.n}]")
    return rank_channels(channel_scores(latent, reference), C)


def rd_objective(v_dist: float, bits: float, w: RdWeights) -> float:
    if v_dist < 0 or bits < 0:
        raise InvalidArgumentError("v_dist and bits must be non-negative")
    return w.alpha * v_dist + w.beta * bits


def choose_channel_count(
    candidates: Sequence[int],
    eval_fn: Callable[[int], Tuple[float, float]],
    w: RdWeights,
) -> Tuple[int, List[Dict[str, float]]]:
    """
    eval_fn(C) -> (bits, v_dist). Returns the argmin C (ties to the smaller C)
    and the full table sorted by C.
    """
    if not candidates:
        raise InvalidArgumentError("need at least one candidate channel count")
    table = []
    for c in sorted(set(candidates)):
        try:
            bits, v_dist = eval_fn(c)
        except GscError as exc:
            raise EvaluationError(f"evaluation failed at C={c}: {exc.detail}", c) from exc
        row = {"C": c, "bits": float(bits), "v_distance": float(v_dist), "objective": rd_objective(v_dist, bits, w)}
        table.append(row)
        logger.debug(f"[SWEEP] C={c} bits={bits:.1f} v={v_dist:.4f} objective={row['objective']:.4f}")
    best = min(table, key=lambda r: (r["objective"], r["C"]))
    return int(best["C"]), table


def write_selection_csv(result: SelectionResult, path: Union[str, Path]) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    chosen = set(result.indices)
    with p.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["channel", "ssim", "selected"])
        for i, score in enumerate(result.all_scores):
            writer.writerow([i, f"{score:.10f}", int(i in chosen)])
    return p
