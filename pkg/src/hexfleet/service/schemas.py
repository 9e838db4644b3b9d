"""Request/response models for the dispatch service."""

from __future__ import annotations

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    version: str


class GeoEncodeRequest(BaseModel):
    lat: float
    lon: float
    precision: int = 8


class GeoEncodeResponse(BaseModel):
    code: str
    precision: int


class GeoDecodeRequest(BaseModel):
    code: str


class GeoDecodeResponse(BaseModel):
    lat: float
    lon: float
    lat_err: float
    lon_err: float


class JobRequest(BaseModel):
    """Common shape for pipeline jobs; paths are server-local."""

    out_dir: str
    config_path: str | None = None
    overrides: dict[str, bool | int | float | str] = Field(default_factory=dict)
    seed: int | None = None


class GenDataRequest(JobRequest):
    pass


class PretrainRequest(JobRequest):
    data_dir: str


class TrainRequest(JobRequest):
    data_dir: str
    checkpoint: str | None = None
    stage2_only: bool = False


class EvalRequest(JobRequest):
    checkpoint: str


class SimulateRequest(JobRequest):
    pass


class SweepRatioRequest(JobRequest):
    ratios: list[float] | None = None
    target_orders: int = 60


class SweepAlphaRequest(JobRequest):
    data_dir: str
    alphas: list[float] | None = None
    checkpoint: str | None = None


class JobResponse(BaseModel):
    command: str
    out_dir: str
    summary: dict


class SweepResponse(BaseModel):
    command: str
    out_dir: str
    rows: list[dict]


class GradCheckRequest(BaseModel):
    seed: int = 0


class GradCheckResponse(BaseModel):
    results: dict[str, float]
    max_error: float
    tolerance: float
    passed: bool


class EpisodeStep(BaseModel):
    reward: float
    state: list[float]


class PredictRequest(BaseModel):
    """Replay an episode's (reward, state) stream and return the next action."""

    checkpoint: str
    steps: list[EpisodeStep]
    context_mode: str = "sequence"
    r_max_km: float = 5.0


class PredictResponse(BaseModel):
    dis_norm: float
    deg: float
    dis_km: float
    steps_consumed: int
