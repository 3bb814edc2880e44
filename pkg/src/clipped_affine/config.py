"""Experiment configuration: a YAML document validated against a strict schema."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import List, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .core import DomainError, mcr
from .rl import SCHEMES, AgentConfig
from .sim import EvalPlan, Schedule

PRESETS = {
    "desk": {"nsnrs_db": [0.0, 10.0, 20.0, 30.0], "episodes": 50, "steps": 5000},
    "paper": {"nsnrs_db": [0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0],
              "episodes": 1000, "steps": 10000},
}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class AgentSettings(_Strict):
    alpha1: float = Field(1e-3, gt=0)
    alpha2: float = Field(1e-3, gt=0)
    alpha3: float = Field(1e-3, gt=0)
    memory_capacity: int = Field(128, ge=1)
    minibatch: int = Field(64, ge=1)
    adam_beta1: float = Field(0.0, ge=0, lt=1)
    adam_beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    q_init: float = Field(0.5, gt=0, lt=1)
    gamma_hat_init: float = Field(1.0, gt=0)
    slope_init: float = Field(0.01, gt=0)
    g_init: float = Field(0.0, ge=0)
    warm_start: bool = True

    def to_agent_config(self) -> AgentConfig:
        return AgentConfig(**self.model_dump())


class ScheduleSettings(_Strict):
    first_alpha: float = Field(1e-3, gt=0)
    first_epsilon: float = Field(0.02, ge=0, lt=1)
    later_alpha: float = Field(1e-4, gt=0)
    later_epsilon: float = Field(0.0, ge=0, lt=1)


class ExperimentConfig(_Strict):
    preset: Literal["desk", "paper"] = "desk"
    families: List[Literal["bernoulli", "exponential", "uniform"]] = [
        "bernoulli", "exponential", "uniform"]
    nmcrs: List[float] = [0.1, 0.5, 0.9]
    nsnrs_db: Optional[List[float]] = None
    schemes: List[str] = list(SCHEMES)
    episodes: Optional[int] = Field(None, ge=1)
    steps: Optional[int] = Field(None, ge=1)
    seed: int = 0
    agent: AgentSettings = AgentSettings()
    schedule: ScheduleSettings = ScheduleSettings()
    solver_tol: float = Field(1e-9, gt=0)
    output_dir: str = "results"
    cache_dir: Optional[str] = None

    @field_validator("schemes")
    @classmethod
    def _known_schemes(cls, v):
        if not v:
            raise ValueError("scheme list is empty")
        bad = [s for s in v if s not in SCHEMES]
        if bad:
            raise ValueError(f"unknown schemes {bad}; choose from {list(SCHEMES)}")
        return v

    @model_validator(mode="after")
    def _nmcr_domain(self):
        for fam in self.families:
            for n in self.nmcrs:
                try:
                    mcr(fam, n)
                except DomainError as exc:
                    raise ValueError(f"nmcrs: {exc}") from None
        return self

    def resolved(self) -> "ExperimentConfig":
        """Copy with preset-dependent fields filled in."""
        pre = PRESETS[self.preset]
        return self.model_copy(update={
            "nsnrs_db": self.nsnrs_db if self.nsnrs_db is not None else pre["nsnrs_db"],
            "episodes": self.episodes or pre["episodes"],
            "steps": self.steps or pre["steps"],
        })

    def plan(self) -> EvalPlan:
        r = self.resolved()
        return EvalPlan(
            families=tuple(r.families), nmcrs=tuple(r.nmcrs), nsnrs_db=tuple(r.nsnrs_db),
            schemes=tuple(r.schemes), episodes=r.episodes, steps=r.steps, seed=r.seed,
            grid_preset=r.preset, agent=r.agent.to_agent_config(),
            schedule=Schedule(**r.schedule.model_dump()), solver_tol=r.solver_tol)

    def digest(self) -> str:
        """Hash of the resolved experiment; output/cache paths excluded."""
        doc = self.resolved().model_dump(exclude={"output_dir", "cache_dir"})
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def load_config(path: Optional[Path], **overrides) -> ExperimentConfig:
    """Read a YAML config (or defaults) and apply non-``None`` overrides.

    Raises ``pydantic.ValidationError`` for schema violations.
    """
    doc = {}
    if path is not None:
        doc = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(doc, dict):
            raise ValueError(f"{path}: top level must be a mapping")
    doc.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.model_validate(doc)
