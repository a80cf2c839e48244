from sqlalchemy import Column, DateTime, ForeignKey, Integer, String, Text
from sqlalchemy import Enum as SQLEnum
from sqlalchemy.sql import func

from app.database import Base


class Run(Base):
    __tablename__ = "runs"

    id = Column(String(64), primary_key=True)
    algorithm = Column(String, nullable=False)
    environment = Column(String, nullable=False)
    kind = Column(String, nullable=False, default='seed')
    seed = Column(Integer, nullable=True)
    status = Column(SQLEnum('running', 'completed', 'failed', name='run_status'), nullable=False, default='running')
    detail = Column(Text, nullable=True)
    code_hash = Column(String(64), nullable=False)
    config = Column(Text, nullable=False)
    manifest_path = Column(String, nullable=False)
    created_at = Column(DateTime(timezone=True), server_default=func.now())
    updated_at = Column(DateTime(timezone=True), server_default=func.now(), onupdate=func.now())


# Every artifact file belongs to exactly one run or command record
class Artifact(Base):
    __tablename__ = "artifacts"

    id = Column(Integer, primary_key=True, autoincrement=True)
    run_id = Column(String(64), ForeignKey("runs.id"), nullable=False, index=True)
    kind = Column(String, nullable=False)
    path = Column(String, unique=True, nullable=False)
    created_at = Column(DateTime(timezone=True), server_default=func.now())
