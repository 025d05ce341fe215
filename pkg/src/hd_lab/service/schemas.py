"""Request and response bodies of the HTTP service."""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field

from ..harness.data import PROBE_SIZE


class Weights(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dmd: float = Field(1.0, ge=0)
    adv_g: float = Field(0.05, ge=0)
    adv_d: float = Field(0.01, ge=0)


class Config(BaseModel):
    """Mirror of the experiment configuration; omitted fields take defaults."""

    model_config = ConfigDict(extra="forbid")

    size: str = "XL"
    seed: int = 0
    teacher_fm: bool = True
    td: bool = True
    dmd: bool = False
    adversarial: Literal["off", "gap", "awd"] = "off"
    teacher_iters: int = Field(50_000, ge=0)
    td_iters: int = Field(20_000, ge=0)
    stage2_iters: int = Field(10_000, ge=0)
    batch_size: int = Field(128, ge=1)
    weights: Weights = Weights()
    sampler_steps: int = Field(50, ge=1)
    cfg_scale: float = Field(0.0, ge=0)
    n_classes: int = 0
    r_neq_t_ratio: float = Field(1.0, ge=0, le=1)
    fake_steps: int = Field(1, ge=1)
    fake_lr_ratio: float = Field(10.0, gt=0)
    disc_lr_ratio: float = Field(5.0, gt=0)
    probe_size: int = Field(PROBE_SIZE, ge=1)
    eval_every: int = Field(0, ge=0)
    ema_decay: Optional[float] = Field(0.99, ge=0, lt=1)
    teacher_path: Optional[str] = None
    student_path: Optional[str] = None


class RunRequest(BaseModel):
    config: Config = Config()
    out: Optional[str] = None


class RunResponse(BaseModel):
    run_id: str
    out_dir: Optional[str]
    summary: dict
    checkpoints: dict[str, str]


class SweepRequest(BaseModel):
    sizes: list[str] = ["S", "B", "L", "XL", "XXL", "XXXL"]
    seeds: list[int] = [0, 1, 2, 3, 4]
    base: Config = Config()
    out: Optional[str] = None


class SweepResponse(BaseModel):
    rows: list[dict]
    medians: dict[str, dict[str, float]]
    out_dir: Optional[str]


class AblateRequest(BaseModel):
    seeds: list[int] = [0, 1, 2, 3, 4]
    arms: Optional[list[str]] = None
    base: Config = Config(dmd=True)
    out: Optional[str] = None


class AblateResponse(BaseModel):
    rows: list[dict]
    medians: dict[str, float]
    ordering: list[dict]
    out_dir: Optional[str]


class TheoryCheck(BaseModel):
    name: str
    ok: bool
    detail: str


class TheoryResponse(BaseModel):
    ok: bool
    checks: list[TheoryCheck]
    table: str


class EvalRequest(BaseModel):
    checkpoint: str
    mode: Literal["auto", "one-step", "euler"] = "auto"
    steps: int = Field(50, ge=1)
    probe_size: int = Field(PROBE_SIZE, ge=1)
    cfg_scale: float = Field(0.0, ge=0)
    label: Optional[int] = None


class EvalResponse(BaseModel):
    checkpoint: str
    mode: str
    steps: int
    n: int
    circle_distance: float


class ExportRequest(BaseModel):
    checkpoint: str
    out: str
    mode: Literal["auto", "one-step", "euler"] = "auto"
    steps: int = Field(50, ge=1)
    n: int = Field(1024, ge=1)
    format: Literal["csv", "json", "both"] = "both"
    trajectory: bool = False
    run: Optional[str] = None


class ExportResponse(BaseModel):
    files: list[str]
    n: int
    circle_distance: float
