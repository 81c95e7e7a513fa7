from sqlalchemy import JSON, Column, DateTime, Integer, String, Text, func

from .database import Base


class SemanticUnitRecord(Base):
    __tablename__ = "semantic_units"

    id = Column(Integer, primary_key=True, index=True)
    symptom = Column(Text, nullable=False)
    diagnosis = Column(String, nullable=False)
    organ = Column(String, index=True, nullable=False)  # one of the organ whitelist keys
    anatomy = Column(JSON, nullable=False, default=list)  # anatomy-level locations within the organ
    basis = Column(Text, default="")
    created_at = Column(DateTime(timezone=True), server_default=func.now())
