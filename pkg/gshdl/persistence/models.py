"""SQLAlchemy models of the experiment-run registry."""

from datetime import datetime
from typing import Any, Dict

from sqlalchemy import JSON, BigInteger, Column, DateTime, Float, ForeignKey, Integer, String, UniqueConstraint
from sqlalchemy.orm import declarative_base, relationship
from sqlalchemy.schema import MetaData

# Create a metadata object with naming conventions for constraints
metadata = MetaData(naming_convention={
    "ix": "ix_%(column_0_label)s",
    "uq": "uq_%(table_name)s_%(column_0_name)s",
    "ck": "ck_%(table_name)s_%(constraint_name)s",
    "fk": "fk_%(table_name)s_%(column_0_name)s_%(referred_table_name)s",
    "pk": "pk_%(table_name)s"
})

Base = declarative_base(metadata=metadata)


class ExperimentRun(Base):
    """One CLI run that produced an experiment report."""

    __tablename__ = "experiment_runs"

    id = Column(Integer, primary_key=True)
    command = Column(String(32), nullable=False)
    seed = Column(BigInteger, nullable=False)
    profile = Column(String(16), nullable=False)
    mean_pa = Column(Float)
    class_names = Column(JSON, default=list, nullable=False)
    config = Column(JSON, default=dict, nullable=False)
    extras = Column(JSON, default=dict, nullable=False)
    created_at = Column(DateTime, default=datetime.utcnow, nullable=False)

    folds = relationship("FoldResult", back_populates="run", cascade="all, delete-orphan",
                         order_by="FoldResult.fold")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.id,
            "command": self.command,
            "seed": self.seed,
            "profile": self.profile,
            "mean_pa": self.mean_pa,
            "class_names": self.class_names,
            "config": self.config,
            "extras": self.extras,
            "created_at": self.created_at.isoformat(),
            "folds": [fold.to_dict() for fold in self.folds],
        }


class FoldResult(Base):
    """Test accuracy of one fold of a run."""

    __tablename__ = "fold_results"
    __table_args__ = (
        UniqueConstraint("run_id", "fold", name="uq_fold_results_run_fold"),
    )

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey("experiment_runs.id"), nullable=False)
    fold = Column(Integer, nullable=False)
    train_size = Column(Integer, nullable=False)
    test_size = Column(Integer, nullable=False)
    pa = Column(Float)
    l2 = Column(Float, nullable=False)
    per_class = Column(JSON, default=list, nullable=False)

    run = relationship("ExperimentRun", back_populates="folds")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "fold": self.fold,
            "train_size": self.train_size,
            "test_size": self.test_size,
            "pa": self.pa,
            "l2": self.l2,
            "per_class": self.per_class,
        }
