"""
Request and response models of the HTTP service
"""
from typing import List, Optional

from pydantic import BaseModel, Field, model_validator

from core.schemas.schemas import AcquisitionSpec


class TrajectoryPayload(BaseModel):
    """
    Evaluated points sent by the client; objectives are raw and normalized server-side
    """
    x: List[List[float]] = Field(..., min_length=1, description="Decision vectors in the unit cube")
    y: List[List[float]] = Field(..., min_length=1, description="Raw objective vectors, minimized")

    @model_validator(mode="after")
    def check_lengths(self) -> "TrajectoryPayload":
        if len(self.x) != len(self.y):
            raise ValueError(f"trajectory has {len(self.x)} inputs but {len(self.y)} observations")
        if len({len(row) for row in self.x}) != 1 or len({len(row) for row in self.y}) != 1:
            raise ValueError("every trajectory row must have the same length")
        return self


class PosteriorRequest(BaseModel):
    """
    Aggregation posterior for query points under one preference
    """
    trajectory: TrajectoryPayload = Field(..., description="In-context evidence")
    query_x: List[List[float]] = Field(..., min_length=1, description="Query decision vectors in the unit cube")
    preference: List[float] = Field(..., description="Preference weights; projected onto the simplex")
    beta: float = Field(1.0, ge=0, description="UCB exploration weight")


class PosteriorResponse(BaseModel):
    """
    Per-query summaries of the predicted aggregation distribution
    """
    mean: List[float] = Field(..., description="Posterior mean of g per query")
    std: List[float] = Field(..., description="Posterior standard deviation per query")
    ucb: List[float] = Field(..., description="mean + beta * std per query")
    preference: List[float] = Field(..., description="Preference actually used (floored simplex point)")


class ProposeRequest(BaseModel):
    """
    Candidate generation for a trajectory
    """
    trajectory: TrajectoryPayload = Field(..., description="In-context evidence")
    acquisition: AcquisitionSpec = Field(default_factory=AcquisitionSpec, description="Acquisition settings")
    seed: int = Field(0, ge=0, description="Seed of this proposal round")


class Candidate(BaseModel):
    x: List[float] = Field(..., description="Proposed decision vector in the unit cube")
    utility: float = Field(..., description="Acquisition value at the candidate")
    preference: Optional[List[float]] = Field(None, description="Preference used (EI / UCB only)")


class ProposeResponse(BaseModel):
    """
    Candidates of one proposal round
    """
    candidates: List[Candidate] = Field(..., description="q proposed points")
    wall_ms: int = Field(..., ge=0, description="Candidate-generation time")


class HealthResponse(BaseModel):
    status: str = Field(..., description="ok or degraded")
    checkpoint_loaded: bool = Field(..., description="Whether a model is available")
    checkpoint: Optional[str] = Field(None, description="Path of the loaded checkpoint")
