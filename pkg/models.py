from datetime import datetime
from typing import Optional

from sqlalchemy import Boolean, DateTime, Float, ForeignKey, Integer, String, Text
from sqlalchemy.orm import Mapped, mapped_column, relationship

from app import Base


class StageRun(Base):
    __tablename__ = 'stage_runs'

    id: Mapped[int] = mapped_column(Integer, primary_key=True, autoincrement=True)
    stage: Mapped[str] = mapped_column(String(32), nullable=False)
    seed: Mapped[int] = mapped_column(Integer, nullable=False)
    status: Mapped[str] = mapped_column(String(16), default='running')
    message: Mapped[Optional[str]] = mapped_column(Text, nullable=True)
    output_dir: Mapped[Optional[str]] = mapped_column(Text, nullable=True)
    started_at: Mapped[datetime] = mapped_column(DateTime, default=datetime.utcnow)
    finished_at: Mapped[Optional[datetime]] = mapped_column(DateTime, nullable=True)

    metrics = relationship('AttributeMetric', back_populates='stage_run', cascade='all, delete-orphan')
    acreage = relationship('HabitatAcreage', back_populates='stage_run', cascade='all, delete-orphan')

    def __repr__(self):
        return f'<StageRun {self.stage} {self.status}>'

    def duration_seconds(self):
        if self.finished_at is None or self.started_at is None:
            return None
        return round((self.finished_at - self.started_at).total_seconds(), 3)


class AttributeMetric(Base):
    __tablename__ = 'attribute_metrics'

    id: Mapped[int] = mapped_column(Integer, primary_key=True, autoincrement=True)
    stage_run_id: Mapped[int] = mapped_column(ForeignKey('stage_runs.id'), nullable=False)
    attribute: Mapped[str] = mapped_column(String(32), nullable=False)
    best_lambda: Mapped[float] = mapped_column(Float, nullable=False)
    best_alpha: Mapped[float] = mapped_column(Float, nullable=False)
    cv_rmse: Mapped[float] = mapped_column(Float, nullable=False)
    cv_r2: Mapped[float] = mapped_column(Float, nullable=False)
    n_plots: Mapped[int] = mapped_column(Integer, nullable=False)
    n_features: Mapped[int] = mapped_column(Integer, nullable=False)
    converged: Mapped[bool] = mapped_column(Boolean, default=True)

    stage_run = relationship('StageRun', back_populates='metrics')

    def __repr__(self):
        return f'<AttributeMetric {self.attribute} r2={self.cv_r2:.3f}>'


class HabitatAcreage(Base):
    __tablename__ = 'habitat_acreage'

    id: Mapped[int] = mapped_column(Integer, primary_key=True, autoincrement=True)
    stage_run_id: Mapped[int] = mapped_column(ForeignKey('stage_runs.id'), nullable=False)
    species: Mapped[str] = mapped_column(String(16), nullable=False)
    habitat_class: Mapped[str] = mapped_column(String(16), nullable=False)
    acres: Mapped[float] = mapped_column(Float, nullable=False)
    unit_count: Mapped[int] = mapped_column(Integer, nullable=False)

    stage_run = relationship('StageRun', back_populates='acreage')

    def __repr__(self):
        return f'<HabitatAcreage {self.species} {self.habitat_class} {self.acres:.1f} ac>'
