"""Declarative experiment configuration (JSON documents, unknown keys rejected)."""
from __future__ import annotations

import json
from pathlib import Path
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import MtlbError

FINITE_ALGOS = ("mlin_greedy", "independent_greedy")
INFINITE_ALGOS = ("e2tc", "pege")
# treatment first, baseline second
ALGO_PAIRS = {"finite": FINITE_ALGOS, "mnist": FINITE_ALGOS, "infinite": INFINITE_ALGOS}


class ConfigError(MtlbError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class E2tcParams(_Strict):
    c1: float = Field(1.0, gt=0)
    c2: float = Field(1.0, gt=0)
    exponent_c: Optional[float] = None


class MnistParams(_Strict):
    images: str
    labels: str
    digits: List[int] = Field(default_factory=lambda: list(range(10)))
    pca_dim: Optional[int] = Field(None, ge=1)


class AlsParams(_Strict):
    max_iters: int = Field(200, ge=1)
    tol: float = Field(1e-9, ge=0)
    restarts: int = Field(4, ge=1)


class ExperimentConfig(_Strict):
    setting: Literal["finite", "infinite", "mnist"]
    algo: Literal["mlin_greedy", "independent_greedy", "e2tc", "pege"]
    N: int = Field(ge=4)
    k: int = Field(ge=1)
    d: Optional[int] = Field(None, ge=1)
    T: Optional[int] = Field(None, ge=1)
    K: int = Field(5, ge=2)
    seeds: List[int] = Field(min_length=1)
    e2tc: E2tcParams = E2tcParams()
    mnist: Optional[MnistParams] = None
    als: AlsParams = AlsParams()
    out_path: Optional[str] = None

    @model_validator(mode="after")
    def _check(self):
        if self.algo not in ALGO_PAIRS[self.setting]:
            raise ValueError(f"algo {self.algo!r} does not apply to the {self.setting} setting")
        if self.setting == "mnist":
            if self.mnist is None:
                raise ValueError("mnist setting requires an 'mnist' section")
            if len(set(self.mnist.digits)) < 2 or not set(self.mnist.digits) <= set(range(10)):
                raise ValueError("mnist.digits must hold at least two digits from 0-9")
        else:
            if self.d is None or self.T is None:
                raise ValueError(f"{self.setting} setting requires d and T")
            if self.k > self.d:
                raise ValueError(f"k={self.k} exceeds d={self.d}")
        for s in self.seeds:
            if not 0 <= s < 2**64:
                raise ValueError(f"seed {s} is not a 64-bit unsigned integer")
        return self


def parse_config(text: str) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(json.loads(text))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
