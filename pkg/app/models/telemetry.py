"""
Telemetry model for training runs
"""
from datetime import datetime

from sqlalchemy import JSON, Column, DateTime, Float, Integer, String

from app.models import Base


class TrainingRun(Base):
    """One codec or flow training invocation"""
    __tablename__ = "training_runs"

    id = Column(Integer, primary_key=True, index=True)
    kind = Column(String, index=True)  # codec / flow_base / flow_control
    channel_count = Column(Integer, nullable=True)  # C for control runs
    steps = Column(Integer)
    seed = Column(Integer)
    final_loss = Column(Float, nullable=True)
    loss_history = Column(JSON)
    wall_time_seconds = Column(Float)
    artifact_path = Column(String, nullable=True)

    created_at = Column(DateTime, default=datetime.utcnow)
