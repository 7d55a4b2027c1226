"""Request/response models for the service API."""
from __future__ import annotations

from typing import Any, Literal

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str = "ok"
    version: str


class FaultSpec(BaseModel):
    step: int
    kind: Literal["crash", "nan-grad", "scaler-reset", "grad-bomb"]
    factor: float = 1e6


class TrainRequest(BaseModel):
    run_dir: str
    config_path: str | None = None
    config: dict[str, Any] | None = None  # inline config body (same schema as the file)
    resume_from: str | None = None
    faults: list[FaultSpec] | None = None


class TrainStarted(BaseModel):
    run_id: str


class StepSummary(BaseModel):
    step: int
    loss: float
    lr: float
    scale: float
    grad_norm: float | None = None
    act_norm: float | None = None
    val_loss: float | None = None
    skipped: bool = False


class RunStatus(BaseModel):
    run_id: str
    state: Literal["running", "completed", "stopped", "diverged-unrecoverable", "failed"]
    step: int
    total_steps: int
    tokens_seen: int
    restarts: int
    last_step: StepSummary | None = None
    error: str | None = None
    exit_code: int = 0


class RunList(BaseModel):
    runs: list[RunStatus]


class LogbookResponse(BaseModel):
    events: list[dict[str, Any]]


class ControlRequest(BaseModel):
    command: Literal["set-lr-factor", "set-clip", "reset-scaler", "checkpoint-now", "stop"]
    factor: float | None = None
    max_norm: float | None = None


class ControlAck(BaseModel):
    run_id: str
    command: str
    queued: bool = True


class DedupRequest(BaseModel):
    manifest_path: str
    output_path: str | None = None  # kept documents, length-prefixed
    report_path: str | None = None  # one JSON removal record per line
    jaccard_threshold: float = 0.95
    shingle_width: int = 5
    num_hashes: int = 128
    bands: int = 16
    seed: int = 0
    exact_verify: bool = False


class DedupResponse(BaseModel):
    documents: int
    kept: int
    removed: int
    short: int
    removals: list[dict[str, Any]]


class FlattenRequest(BaseModel):
    input_path: str  # JSON list of {nodes: [{id, parent_id, timestamp, text}]}
    output_path: str  # JSONL documents


class FlattenResponse(BaseModel):
    threads: int
    documents: int
    input_comments: int
    kept_comments: int


class TrainBpeRequest(BaseModel):
    vocab_size: int
    output_path: str
    manifest_path: str | None = None
    input_path: str | None = None


class TrainBpeResponse(BaseModel):
    vocab_size: int
    merges: int
    output_path: str


class TokenizeRequest(BaseModel):
    vocab_path: str
    output_path: str  # .npy uint32 stream, documents separated by end-of-text
    manifest_path: str | None = None
    input_path: str | None = None


class TokenizeResponse(BaseModel):
    documents: int
    tokens: int
    output_path: str


class EvalRequest(BaseModel):
    task_path: str
    checkpoint_path: str
    vocab_path: str
    shots: int = 0
    seed: int = 0
    compute_f1: bool = False


class MetricReportResponse(BaseModel):
    task: str
    metrics: dict[str, Any]
    config: dict[str, Any]


class DialogueEvalRequest(BaseModel):
    episodes_path: str  # JSON list of turn lists
    checkpoint_path: str
    vocab_path: str
    reference_vocab_path: str | None = None  # defaults to the model vocab
    max_new_tokens: int = 32


class DialogueEvalResponse(BaseModel):
    episodes: int
    normalized_ppl: float
    native_ppl: float
    uf1: float


class ClassifierSpec(BaseModel):
    kind: Literal["http", "command", "constant"]
    url: str | None = None
    argv: list[str] | None = None
    value: float | None = None  # constant classifier (testing aid)


class ToxicityEvalRequest(BaseModel):
    prompts_path: str  # JSON list of [text, prompt_toxicity]
    checkpoint_path: str
    vocab_path: str
    classifier: ClassifierSpec
    generations_per_prompt: int = 25
    tokens_per_generation: int = 20
    nucleus_p: float = 0.9
    bucket_edges: list[float] = Field(default_factory=lambda: [0.25, 0.5, 0.75])
    seed: int = 0


class ToxicityEvalResponse(BaseModel):
    bucket_means: dict[int, float]
    bucket_counts: dict[int, int]
    generations_per_prompt: int
    tokens_per_generation: int
    nucleus_p: float
    seed: int


class AccountingRequest(BaseModel):
    param_count: float
    training_tokens: float
    device_count: int = 992
    throughput_flops: float = 147e12
    device_power_w: float = 400.0
    pue: float = 1.1
    grid_intensity_kg_per_kwh: float = 0.4
    overhead_multiplier: float = 1.0


class AccountingResponse(BaseModel):
    inputs: dict[str, Any]
    total_flops: float
    ideal_device_days: float
    energy_kwh: float
    co2_tons: float
    notes: list[str]
    reference_footprints_tons: dict[str, float]


class ErrorBody(BaseModel):
    error: str
    exit_code: int
