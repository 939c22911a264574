"""
Importance-weighted pixel entropy, the constrained rate/analysis objective,
its Lagrangian, and a discrete stationarity report over a channel-count sweep.
"""
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from app.config import IMPORTANCE_EPS
from app.errors import InvalidArgumentError
from app.utils.files import to_grayscale, validate_image

logger = logging.getLogger(__name__)

IMPORTANCE_MODES = ("uniform", "gradient")
NORMALIZATION_TOLERANCE = 1e-9


def importance(x: np.ndarray, mode: str = "gradient") -> np.ndarray:
    """Per-pixel information weight: ones, or Sobel gradient magnitude plus eps"""
    if mode not in IMPORTANCE_MODES:
        raise InvalidArgumentError(f"importance mode must be one of {IMPORTANCE_MODES}, got {mode!r}")
    gray = to_grayscale(validate_image(x))
    if mode == "uniform":
        return np.ones_like(gray)
    gx = ndimage.sobel(gray, axis=1, mode="nearest")
    gy = ndimage.sobel(gray, axis=0, mode="nearest")
    return np.hypot(gx, gy) + IMPORTANCE_EPS


def pixel_distribution(U: np.ndarray) -> np.ndarray:
    u = np.asarray(U, dtype=np.float64)
    if np.any(u < 0):
        raise InvalidArgumentError("importance values must be non-negative")
    total = u.sum()
    if total <= 0:
        raise InvalidArgumentError("importance map is all zero")
    return u / total


def entropy(P: np.ndarray) -> float:
    """Base-2 entropy with 0 log 0 = 0"""
    p = np.asarray(P, dtype=np.float64).ravel()
    if np.any(p < 0) or abs(p.sum() - 1.0) > NORMALIZATION_TOLERANCE:
        raise InvalidArgumentError(f"not a probability distribution (sum={p.sum()})")
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum())


def image_entropy(x: np.ndarray, mode: str = "gradient") -> float:
    return entropy(pixel_distribution(importance(x, mode)))


def rd_objective_theory(Hx: float, Hx_hat: float, B: float, alpha: float, beta: float) -> float:
    return alpha * (Hx - Hx_hat) + beta * B


def lagrangian(Hx: float, Hx_hat: float, B: float, R: float, alpha: float, beta: float, lam: float) -> float:
    return rd_objective_theory(Hx, Hx_hat, B, alpha, beta) + lam * (Hx_hat - R)


@dataclass
class TheoryRow:
    C: int
    Hx: float
    Hx_hat: float
    bits: float
    objective: float = 0.0
    lagrangian: float = 0.0
    slack: float = 0.0  # R - H(x_hat)
    feasible: bool = True
    gradient: float = float("nan")  # central difference of L over C, interior rows only


@dataclass
class TheoryReport:
    rows: List[TheoryRow]
    argmin_C: int
    residual: float
    alpha: float
    beta: float
    lam: float
    R: float
    infeasible: List[int] = field(default_factory=list)


def stationarity_report(
    rows: Sequence[Tuple[int, float, float, float]],
    alpha: float,
    beta: float,
    lam: float,
    R: float,
) -> TheoryReport:
    """
    rows: (C, H(x), H(x_hat), bits). Needs at least three distinct C.
    The residual is the smallest |dL/dC| over interior grid points.
    """
    by_c = sorted(rows, key=lambda r: r[0])
    cs = [int(r[0]) for r in by_c]
    if len(set(cs)) != len(cs):
        raise InvalidArgumentError("sweep rows must have distinct C")
    if len(cs) < 3:
        raise InvalidArgumentError(f"stationarity needs at least 3 rows, got {len(cs)}")

    out = []
    for C, Hx, Hx_hat, bits in by_c:
        slack = R - Hx_hat
        out.append(TheoryRow(
            C=int(C), Hx=float(Hx), Hx_hat=float(Hx_hat), bits=float(bits),
            objective=rd_objective_theory(Hx, Hx_hat, bits, alpha, beta),
            lagrangian=lagrangian(Hx, Hx_hat, bits, R, alpha, beta, lam),
            slack=slack,
            feasible=slack >= 0,
        ))
    for i in range(1, len(out) - 1):
        out[i].gradient = (out[i + 1].lagrangian - out[i - 1].lagrangian) / (out[i + 1].C - out[i - 1].C)
    residual = min(abs(r.gradient) for r in out[1:-1])
    best = min(out, key=lambda r: (r.lagrangian, r.C))
    infeasible = [r.C for r in out if not r.feasible]
    if infeasible:
        logger.warning(f"[THEORY] rows violate R >= H(x_hat) at C={infeasible}")
    return TheoryReport(out, best.C, float(residual), alpha, beta, lam, R, infeasible)


def write_theory_report(report: TheoryReport, csv_path: Union[str, Path], text_path: Union[str, Path]) -> Tuple[Path, Path]:
    cp, tp = Path(csv_path), Path(text_path)
    cp.parent.mkdir(parents=True, exist_ok=True)
    tp.parent.mkdir(parents=True, exist_ok=True)
    with cp.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["C", "H_x", "H_x_hat", "bits", "objective", "lagrangian", "slack", "feasible", "dL_dC"])
        for r in report.rows:
            writer.writerow([
                r.C, f"{r.Hx:.10f}", f"{r.Hx_hat:.10f}", f"{r.bits:.3f}", f"{r.objective:.10f}",
                f"{r.lagrangian:.10f}", f"{r.slack:.10f}", int(r.feasible),
                "" if np.isnan(r.gradient) else f"{r.gradient:.10f}",
            ])
    lines = [
        f"alpha={report.alpha} beta={report.beta} lambda={report.lam} R={report.R}",
        f"argmin C = {report.argmin_C}",
        f"stationarity residual min|dL/dC| = {report.residual:.6g}",
        "infeasible C (R < H(x_hat)): " + (", ".join(map(str, report.infeasible)) or "none"),
    ]
    tp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"[THEORY] wrote {cp} and {tp}")
    return cp, tp
