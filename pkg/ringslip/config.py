"""
Case configuration: a validated model plus a small `key = value` file format.
"""

from enum import Enum
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError


class CaseKind(str, Enum):
    COUETTE = "couette"
    PACKAGING = "packaging"
    CUSTOM = "custom"


DEFAULT_DT = {CaseKind.COUETTE: 0.2, CaseKind.PACKAGING: 2e-3, CaseKind.CUSTOM: 1e-2}


class CaseConfig(BaseModel):
    """Everything a run needs besides the solver tolerances."""

    model_config = ConfigDict(extra="forbid")

    case: CaseKind = Field(description="Which case to build")
    dt: float | None = Field(None, gt=0, description="Slab length (s); case default if unset")
    steps: int = Field(8, ge=0, description="Number of time steps")
    scale: float = Field(0.05, gt=0, le=1, description="Packaging mesh refinement")
    rho: float | None = Field(None, gt=0, description="Density override (kg/m^3)")
    mu: float | None = Field(None, gt=0, description="Dynamic viscosity override (Pa s)")
    delta: float | None = Field(None, gt=0, description="Shift offset override (m)")
    speed: float | None = Field(None, description="Constant ring speed override (m/s)")
    stroke_times: list[float] = Field(default_factory=list, description="Stroke program breakpoints (s)")
    stroke_speeds: list[float] = Field(default_factory=list, description="Stroke program speeds (m/s)")
    stroke_period: float | None = Field(None, gt=0, description="Stroke repetition period (s)")
    mesh: Path | None = Field(None, description="Mesh file for the custom case")
    noslip: list[str] = Field(default_factory=list, description="Custom case: no-slip markers")
    moving_walls: list[str] = Field(default_factory=list, description="Custom case: markers moving with the ring")
    out: Path = Field(Path("ringslip-out"), description="Output directory")
    write_every: int = Field(1, ge=0, description="Snapshot cadence in steps; 0 disables snapshots")
    check_invariants: bool = Field(False, description="Assert ring invariants every step")
    deterministic: bool = Field(True, description="Fixed-order assembly")
    linear_solver: Literal["direct", "iterative"] = "direct"

    @field_validator("stroke_times", "stroke_speeds", "noslip", "moving_walls", mode="before")
    @classmethod
    def _split_list(cls, value):
        if isinstance(value, str):
            return [v.strip() for v in value.split(",") if v.strip()]
        return value

    @model_validator(mode="after")
    def _check_stroke(self):
        if len(self.stroke_times) != len(self.stroke_speeds):
            raise ValueError("stroke_times and stroke_speeds must have the same length")
        return self

    @property
    def resolved_dt(self) -> float:
        return self.dt if self.dt is not None else DEFAULT_DT[self.case]


def read_config_file(path: Path) -> dict[str, str]:
    """
    Parse `key = value` lines; `#` starts a comment.

    Raises:
        ConfigError: malformed line or unknown key
    """
    values: dict[str, str] = {}
    valid = sorted(CaseConfig.model_fields)
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CaseConfig.model_fields:
            raise ConfigError(f"{path}:{lineno}: unknown key '{key}'; valid keys: {', '.join(valid)}")
        values[key] = value
    return values


def parse_config(path: Path | None = None, overrides: dict | None = None) -> CaseConfig:
    """
    Build a CaseConfig from an optional file and explicit overrides.

    Overrides that are None are ignored, so CLI options left unset keep file values.

    Raises:
        ConfigError: unknown key, missing case, or a value failing validation
    """
    values: dict = read_config_file(path) if path is not None else {}
    for key, value in (overrides or {}).items():
        if key not in CaseConfig.model_fields:
            raise ConfigError(f"unknown key '{key}'; valid keys: {', '.join(sorted(CaseConfig.model_fields))}")
        if value is not None:
            values[key] = value
    if "case" not in values:
        raise ConfigError("no case given; choose one of: " + ", ".join(k.value for k in CaseKind))
    try:
        return CaseConfig(**values)
    except ValidationError as e:
        problems = "; ".join(f"{'.'.join(map(str, err['loc']))}: {err['msg']}" for err in e.errors())
        raise ConfigError(problems) from e
