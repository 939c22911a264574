"""
Artifact registry model
"""
from datetime import datetime

from sqlalchemy import Column, DateTime, Integer, String

from app.models import Base


class ModelArtifact(Base):
    __tablename__ = "model_artifacts"

    id = Column(Integer, primary_key=True, index=True)
    kind = Column(String, index=True)  # codec / flow
    digest = Column(String, index=True)  # codec: entropy digest hex; flow: trunk digest
    codec_digest = Column(String, index=True, nullable=True)  # flows: codec they were trained against
    channel_count = Column(Integer, nullable=True)  # flows: C (0 = caption only)
    path = Column(String)
    parameter_count = Column(Integer)

    created_at = Column(DateTime, default=datetime.utcnow)
