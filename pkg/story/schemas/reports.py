"""Structured records written to run directories as JSON or JSON lines."""

from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field


class LossPoint(BaseModel):
    stage: str
    step: int
    loss: float


class LogitSummary(BaseModel):
    mean: float
    max: float


class SalienceRecord(BaseModel):
    """One line of ``salience.jsonl``: the history choice behind a generated frame."""

    story_id: int
    frame: int
    chosen_index: int
    scores: List[float]
    logit_summaries: List[LogitSummary]
    seed: int
    lam: float
    history_mode: str
    conditioning: str
    sampler: Dict[str, Any]


class StoryMetrics(BaseModel):
    story_id: int
    frames: int
    tifa_analog: float
    clip_t_analog: float
    clip_i_analog: Optional[float] = None


class MetricReport(BaseModel):
    tifa_analog: float = Field(ge=0.0, le=1.0)
    clip_t_analog: float = Field(ge=-1.0 - 1e-6, le=1.0 + 1e-6)
    clip_i_analog: Optional[float] = Field(None, ge=-1.0 - 1e-6, le=1.0 + 1e-6)
    fid: Optional[float] = Field(None, ge=-1e-6)
    fid_regularized: bool = False
    frames: int
    questions: int
    per_story: List[StoryMetrics] = Field(default_factory=list)
    config: Dict[str, Any] = Field(default_factory=dict)
    corpus_hash: Optional[str] = None


class SignTestResult(BaseModel):
    metric: str
    wins: int
    losses: int
    ties: int
    mean_difference: float
    p_value: float


class AblationVariant(BaseModel):
    name: str
    conditioning: str
    history_mode: str
    lam: float
    report: MetricReport


class AblationReport(BaseModel):
    baseline: str
    variants: List[AblationVariant]
    comparisons: Dict[str, List[SignTestResult]] = Field(default_factory=dict)
    salience_relevance: Optional[float] = None
    config: Dict[str, Any] = Field(default_factory=dict)
