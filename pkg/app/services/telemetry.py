"""
Telemetry service for training runs
"""
import logging
from typing import Dict, List, Optional

from sqlalchemy import func
from sqlalchemy.orm import Session

from app.models.telemetry import TrainingRun

logger = logging.getLogger(__name__)


def record_training_run(
    db: Session,
    kind: str,
    steps: int,
    seed: int,
    loss_history: List[float],
    wall_time_seconds: float,
    channel_count: Optional[int] = None,
    artifact_path: Optional[str] = None,
) -> Optional[int]:
    """Record one training run; failures are logged and swallowed"""
    try:
        run = TrainingRun(
            kind=kind,
            channel_count=channel_count,
            steps=steps,
            seed=seed,
            final_loss=float(loss_history[-1]) if loss_history else None,
            loss_history=[float(v) for v in loss_history],
            wall_time_seconds=wall_time_seconds,
            artifact_path=artifact_path,
        )
        db.add(run)
        db.commit()
        logger.info(f"[TELEMETRY] recorded {kind} run: steps={steps}, final_loss={run.final_loss}")
        return run.id
    except Exception as e:
        logger.error(f"[TELEMETRY ERROR] failed to record training run: {e}")
        db.rollback()
        return None


def get_training_stats(db: Session) -> Dict:
    """Run counts and mean final loss per kind"""
    try:
        rows = db.query(
            TrainingRun.kind,
            func.count(TrainingRun.id).label("count"),
            func.avg(TrainingRun.final_loss).label("avg_loss"),
            func.sum(TrainingRun.wall_time_seconds).label("total_time"),
        ).group_by(TrainingRun.kind).all()
        return {
            "total_runs": sum(r.count for r in rows),
            "by_kind": {
                r.kind: {
                    "count": r.count,
                    "avg_final_loss": round(float(r.avg_loss), 6) if r.avg_loss is not None else None,
                    "total_seconds": round(float(r.total_time or 0.0), 1),
                }
                for r in rows
            },
        }
    except Exception as e:
        logger.error(f"[TELEMETRY ERROR] failed to get stats: {e}")
        return {"error": str(e)}
