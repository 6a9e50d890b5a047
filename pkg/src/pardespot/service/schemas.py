"""Request and response models of the planning service."""
from __future__ import annotations

from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator

from pardespot.harness.episode import VARIANTS
from pardespot.tree import SearchConfig


class SearchSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    K: int = Field(500, ge=1)
    gamma: float | None = Field(None, gt=0, lt=1)
    xi: float = Field(0.95, gt=0, lt=1)
    c_a: float = Field(1.0, ge=0)
    c_o: float = Field(0.1, ge=0)
    max_depth: int | None = Field(None, ge=1)
    time_budget: float | None = 1.0
    max_trials: int | None = Field(None, ge=0)
    workers: int = Field(1, ge=1)
    seed: int = Field(0, ge=0)
    backend: Literal["serial", "parallel"] = "serial"
    eps_target: float = Field(0.0, ge=0)
    clamp: bool = True
    record_bounds: bool = False
    trace: bool = False
    audit: bool = False

    def to_config(self) -> SearchConfig:
        return SearchConfig(**self.model_dump())


class DomainSpec(BaseModel):
    domain: str = "navigation"
    domain_params: dict[str, Any] = Field(default_factory=dict)


class PlanRequest(DomainSpec):
    search: SearchSettings = Field(default_factory=SearchSettings)
    particles: int = Field(10_000, ge=1)
    belief_seed: int = 0
    belief: dict | None = None  # particle belief as produced by ParticleBelief.to_json
    include_tree: bool = False


class PlanResponse(BaseModel):
    action: int | None
    stats: dict
    tree: dict | None = None


class EpisodeRequest(DomainSpec):
    search: SearchSettings = Field(default_factory=SearchSettings)
    variant: str = "hybrid"
    particles: int = Field(10_000, ge=1)
    step_limit: int | None = Field(None, ge=0)
    seed: int = Field(0, ge=0)

    @field_validator("variant")
    @classmethod
    def _known_variant(cls, v):
        if v not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        return v


class EpisodeResponse(BaseModel):
    record: dict
    aborted: bool


class ExperimentRequest(DomainSpec):
    search: SearchSettings = Field(default_factory=SearchSettings)
    episodes: int = Field(10, ge=1)
    variants: list[str] = Field(default_factory=lambda: ["serial", "hybrid"])
    particles: int = Field(10_000, ge=1)
    step_limit: int | None = Field(None, ge=0)
    seed: int = Field(0, ge=0)
    output: str | None = None
    write: bool = True

    @field_validator("variants")
    @classmethod
    def _known_variants(cls, vs):
        bad = [v for v in vs if v not in VARIANTS]
        if bad or not vs:
            raise ValueError(f"variants must be drawn from {VARIANTS}")
        return vs


class ExperimentResponse(BaseModel):
    summary: dict
    aborted: int
    files: dict[str, str] = Field(default_factory=dict)


class SweepRequest(ExperimentRequest):
    param: str
    values: list[Any]
    mode: Literal["plan", "experiment"] = "plan"
    runs: int | None = Field(None, ge=1)


class SweepResponse(BaseModel):
    result: dict
    aborted: int = 0
    files: dict[str, str] = Field(default_factory=dict)
