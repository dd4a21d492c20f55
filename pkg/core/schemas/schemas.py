"""
Pydantic schemas for configuration files, run records and manifests
"""
from typing import List, Dict, Optional, Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator


class PriorLimits(BaseModel):
    """
    Bounds of the task shapes the synthetic prior samples from
    """
    model_config = ConfigDict(extra="forbid")

    max_features: int = Field(8, ge=1, description="Largest feature dimension d (D_max)")
    max_objectives: int = Field(3, ge=1, description="Largest objective dimension m (M_max)")
    sample_length: int = Field(64, ge=2, description="Total sample length N (trajectory + queries)")


class PriorConfig(BaseModel):
    """
    Hyperparameters of the GP prior used to synthesize training tasks
    """
    model_config = ConfigDict(extra="forbid")

    limits: PriorLimits = Field(default_factory=PriorLimits, description="Task shape bounds")
    lengthscale_shape: float = Field(3.0, gt=0, description="Gamma shape (alpha) of the lengthscale prior")
    lengthscale_rate: float = Field(6.0, gt=0, description="Gamma rate (beta) of the lengthscale prior")
    output_scale: float = Field(1.0, gt=0, description="Kernel output scale sigma")
    noise_variance: float = Field(1e-4, gt=0, description="Variance of the additive observation noise")
    max_resample: int = Field(8, ge=1, description="Attempts per task before a factorization failure is fatal")


class ModelConfig(BaseModel):
    """
    Shape of the in-context transformer
    """
    model_config = ConfigDict(extra="forbid")

    embed_dim: int = Field(128, ge=1, description="Token embedding width")
    ff_hidden_dim: int = Field(256, ge=1, description="Feed-forward hidden width")
    n_heads: int = Field(4, ge=1, description="Attention heads per layer")
    n_layers: int = Field(4, ge=1, description="Transformer blocks")
    n_bins: int = Field(256, ge=2, description="Bins B of the Riemann head")
    max_features: int = Field(8, ge=1, description="Padded feature dimension K_x")
    max_objectives: int = Field(3, ge=1, description="Padded objective dimension K_y")
    max_sample_length: int = Field(64, ge=2, description="Largest token count N_max")

    @model_validator(mode="after")
    def check_heads(self) -> "ModelConfig":
        if self.embed_dim % self.n_heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by n_heads {self.n_heads}")
        return self


class TrainConfig(BaseModel):
    """
    Pre-training schedule and data settings
    """
    model_config = ConfigDict(extra="forbid")

    batch_size: int = Field(64, ge=1, description="Tasks per optimizer step")
    steps_per_epoch: int = Field(256, ge=0, description="Optimizer steps per epoch")
    epochs: int = Field(50, ge=1, description="Number of epochs")
    warmup_epochs: int = Field(2, ge=0, description="Epochs of linear learning-rate warmup")
    peak_lr: float = Field(1e-4, gt=0, description="Learning rate at the end of warmup")
    seed: int = Field(0, ge=0, description="Master seed of the batch stream")
    eval_interval: int = Field(5, ge=1, description="Epochs between checkpoints")
    heldout_tasks: int = Field(512, ge=1, description="Seed-pinned prior tasks used for held-out NLL")
    support_samples: int = Field(100_000, ge=1000, description="Prior targets used to place the Riemann bins")
    grad_clip: float = Field(1.0, gt=0, description="Global L2 norm for gradient clipping")
    prefetch: int = Field(4, ge=0, description="Bounded queue size of the batch producer (0 = inline)")
    prior: PriorConfig = Field(default_factory=PriorConfig, description="Synthetic prior")

    @model_validator(mode="after")
    def check_warmup(self) -> "TrainConfig":
        if self.warmup_epochs >= self.epochs:
            raise ValueError(f"warmup_epochs ({self.warmup_epochs}) must be smaller than epochs ({self.epochs})")
        return self


class TrainRunConfig(BaseModel):
    """
    Root of a training configuration file
    """
    model_config = ConfigDict(extra="forbid")

    schema_version: Literal[1] = Field(..., alias="schema", description="Config schema version")
    model: ModelConfig = Field(default_factory=ModelConfig, description="Model architecture")
    train: TrainConfig = Field(default_factory=TrainConfig, description="Training schedule")

    @model_validator(mode="after")
    def check_prior_fits_model(self) -> "TrainRunConfig":
        limits = self.train.prior.limits
        if limits.max_features > self.model.max_features:
            raise ValueError("train.prior.limits.max_features exceeds model.max_features")
        if limits.max_objectives > self.model.max_objectives:
            raise ValueError("train.prior.limits.max_objectives exceeds model.max_objectives")
        if limits.sample_length > self.model.max_sample_length:
            raise ValueError("train.prior.limits.sample_length exceeds model.max_sample_length")
        return self


class AcquisitionSpec(BaseModel):
    """
    Acquisition function and optimizer settings for one proposal round
    """
    model_config = ConfigDict(extra="forbid")

    kind: Literal["ei", "ucb", "uhvi"] = Field("ucb", description="Acquisition function")
    beta: float = Field(1.0, ge=0, description="UCB exploration weight")
    n_pref_samples: int = Field(32, ge=1, description="Preferences per UHVI expectation")
    q: int = Field(1, ge=1, description="Candidates per proposal round")
    candidate_pool: int = Field(1024, ge=1, description="Low-discrepancy pool scored before refinement")
    restarts: int = Field(20, ge=1, description="Best pool points refined by local search")
    refine_steps: int = Field(50, ge=0, description="Local search steps per restart")


class RunRecord(BaseModel):
    """
    One evaluated point of an optimization run (one JSONL line)
    """
    iter: int = Field(..., ge=0, description="Iteration index; all init points share iteration 0")
    phase: Literal["init", "opt"] = Field(..., description="Initial design or optimization step")
    x: List[float] = Field(..., description="Decision vector in the unit cube")
    y: List[float] = Field(..., description="Raw objective vector")
    acq: str = Field(..., description="ei | ucb | uhvi | sobol | gp-parego")
    preference: Optional[List[float]] = Field(None, description="Preference used to generate the point")
    utility: Optional[float] = Field(None, description="Acquisition value at the returned candidate")
    seed: int = Field(..., ge=0, description="Seed of the step that produced the point")
    wall_ms: int = Field(..., ge=0, description="Candidate-generation wall time in milliseconds")


class CellStatus(BaseModel):
    """
    Completion state of one bench cell
    """
    config_hash: str = Field(..., description="Hash of the cell's settings")
    status: Literal["done", "failed"] = Field(..., description="Outcome")
    run_file: Optional[str] = Field(None, description="Run JSONL file relative to the output directory")
    error: Optional[str] = Field(None, description="Failure message")


class RunManifest(BaseModel):
    """
    Provenance of one output directory
    """
    tool_version: str = Field(..., description="Package version")
    command_line: List[str] = Field(..., description="argv of the invocation")
    config_hash: str = Field(..., description="Hash of the effective configuration")
    master_seed: int = Field(..., ge=0, description="Seed given on the command line")
    derived_seeds: Dict[str, int] = Field(default_factory=dict, description="Per-run seeds keyed by run name")
    started_at: str = Field(..., description="ISO timestamp")
    finished_at: Optional[str] = Field(None, description="ISO timestamp")
    checkpoint_id: Optional[str] = Field(None, description="Hash of the checkpoint used")
    artifacts: List[str] = Field(default_factory=list, description="Files written, relative to the directory")
    cells: Dict[str, CellStatus] = Field(default_factory=dict, description="Bench cells by key")


class MetricConfig(BaseModel):
    """
    Normalization bounds and reference point for hypervolume reporting
    """
    reference_point: List[float] = Field(..., description="Reference point r in normalized space")
    ideal: List[float] = Field(..., description="Ideal point of the reference front")
    nadir: List[float] = Field(..., description="Nadir point of the reference front")

    @model_validator(mode="after")
    def check_bounds(self) -> "MetricConfig":
        if not (len(self.reference_point) == len(self.ideal) == len(self.nadir)):
            raise ValueError("reference_point, ideal and nadir must share a dimension")
        if any(lo >= hi for lo, hi in zip(self.ideal, self.nadir)):
            raise ValueError("ideal must be componentwise smaller than nadir")
        return self
