# utils/config.py
"""
Run configuration.

Config files are TOML with nested sections. Every section is a frozen pydantic
model that rejects unknown keys, so a typo fails loudly (ConfigError, exit 3)
instead of silently running with defaults.
"""
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from mixlab.catalog import KERNELS, PUSHFORWARD_CASES, STATIONARY_MODELS, SYSTEMS
from mixlab.errors import ConfigError

Command = Literal["simulate", "reduce-check", "mixing", "certify", "pushforward-check"]
ParamValue = Union[int, float, str, bool]
MAX_SEED = 2 ** 64 - 1


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SystemSection(Section):
    name: str
    params: Dict[str, ParamValue] = Field(default_factory=dict)


class NoiseSection(Section):
    name: str
    kind: Literal["markov", "stationary"] = "markov"
    params: Dict[str, ParamValue] = Field(default_factory=dict)
    memory_m: int = Field(16, ge=1)
    iota: float = Field(2.0, gt=1.0)
    burn_in: int = Field(10_000, ge=0)


class GridSection(Section):
    state_cells: Optional[int] = Field(None, ge=2)
    noise_cells: Optional[int] = Field(None, ge=2)
    joint_cells: int = Field(40, ge=2)
    quad_nodes: int = Field(32, ge=1)


class EnsembleSection(Section):
    n: int = Field(100_000, ge=1)
    horizon: int = Field(30, ge=1)
    threads: int = Field(1, ge=1)
    block_size: int = Field(4096, ge=1)
    law_k: int = Field(2, ge=1, le=3)      # segment length of the law-equality check
    u0: Optional[List[float]] = None        # default: the upper corner of X


class CertifySection(Section):
    radius: float = Field(0.5, gt=0)
    delta: Optional[float] = Field(None, gt=0)   # minorization / coupling ball; defaults to radius
    budget: int = Field(50, ge=1)
    pairs: int = Field(50, ge=1)
    coupling_steps: int = Field(2, ge=1)
    check_points: int = Field(20, ge=1)
    mc_n: int = Field(20_000, ge=1)


class MixingSection(Section):
    burn_in: int = Field(500, ge=0)
    segment_m: int = Field(0, ge=0, le=3)
    bootstrap: int = Field(200, ge=1)
    stationary_n: Optional[int] = Field(None, ge=1)   # defaults to ensemble.n
    past: Literal["corner", "stationary"] = "corner"  # corner: every past noise at the top of K
    fit_ceiling: Optional[float] = Field(0.8, gt=0, le=1)


class PushforwardSection(Section):
    cases: List[str] = Field(default_factory=lambda: sorted(PUSHFORWARD_CASES))
    trials: int = Field(50, ge=1)
    image_lipschitz: bool = True


class RunConfig(Section):
    command: Command
    seed: int = Field(..., ge=0, le=MAX_SEED)
    output_dir: str = "out"
    system: SystemSection
    noise: NoiseSection
    grid: GridSection = Field(default_factory=GridSection)
    ensemble: EnsembleSection = Field(default_factory=EnsembleSection)
    certify: CertifySection = Field(default_factory=CertifySection)
    mixing: MixingSection = Field(default_factory=MixingSection)
    pushforward: PushforwardSection = Field(default_factory=PushforwardSection)

    @model_validator(mode="after")
    def _check_catalog(self) -> "RunConfig":
        if self.system.name not in SYSTEMS:
            raise ValueError(f"unknown system {self.system.name!r}; known: {sorted(SYSTEMS)}")
        table = KERNELS if self.noise.kind == "markov" else STATIONARY_MODELS
        if self.noise.name not in table:
            raise ValueError(f"unknown {self.noise.kind} noise {self.noise.name!r}; known: {sorted(table)}")
        if self.command == "certify" and self.noise.kind != "markov":
            raise ValueError("certify needs a Markov kernel (noise.kind = 'markov')")
        unknown = [c for c in self.pushforward.cases if c not in PUSHFORWARD_CASES]
        if unknown:
            raise ValueError(f"unknown pushforward cases {unknown}; known: {sorted(PUSHFORWARD_CASES)}")
        return self


def parse_config(data: Dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"invalid config:\n{exc}") from exc


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(data)


def apply_overrides(config: RunConfig, seed: Optional[int] = None, output_dir: Optional[str] = None,
                    threads: Optional[int] = None) -> RunConfig:
    """CLI flags win over the file; the result is re-validated."""
    data = config.model_dump(mode="json")
    if seed is not None:
        data["seed"] = seed
    if output_dir is not None:
        data["output_dir"] = str(output_dir)
    if threads is not None:
        data["ensemble"]["threads"] = threads
    return parse_config(data)


__all__ = [
    "RunConfig",
    "SystemSection",
    "NoiseSection",
    "GridSection",
    "EnsembleSection",
    "CertifySection",
    "MixingSection",
    "PushforwardSection",
    "parse_config",
    "load_config",
    "apply_overrides",
]
