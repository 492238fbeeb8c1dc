from enum import Enum
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


# Schema for one cable (i, j); bus i is the one closer to the substation.
# Positivity of r and x is reported by grid_model.validate_topology rather than
# rejected here, so malformed files can still be loaded and diagnosed.
class Cable(BaseModel):
    """Per-unit series impedance between two adjacent buses."""
    from_bus: int = Field(..., ge=0, description="Upstream bus (closer to bus 0)")
    to_bus: int = Field(..., ge=0, description="Downstream bus")
    resistance: float = Field(..., description="r_ij in pu")
    reactance: float = Field(..., description="x_ij in pu")

    model_config = ConfigDict(frozen=True)


# Schema for the controllable DER attached to a non-slack bus
class DerSpec(BaseModel):
    """Reactive power capability and cost of the inverter at one bus."""
    bus: int = Field(..., ge=1)
    q_min: float = Field(0.0, le=0.0, description="Lower reactive limit in pu")
    q_max: float = Field(0.0, ge=0.0, description="Upper reactive limit in pu")
    cost: float = Field(1.0, gt=0.0, description="Quadratic cost coefficient c_i")
    p_rated: float = Field(0.0, ge=0.0, description="Rated PV active power in pu")

    model_config = ConfigDict(frozen=True)


class RadialNetwork(BaseModel):
    """Balanced radial feeder in per-unit. Bus 0 is the slack (substation) bus."""
    buses: List[int] = Field(..., min_length=1)
    cables: List[Cable] = Field(default_factory=list)
    ders: Dict[int, DerSpec] = Field(default_factory=dict)
    v0: float = Field(1.0, gt=0.0, description="Slack voltage magnitude (pu)")
    v_min: float = Field(0.95, gt=0.0)
    v_max: float = Field(1.05, gt=0.0)
    s_base: float = Field(100.0, gt=0.0, description="Power base in kVA")
    v_base: float = Field(0.4, gt=0.0, description="Voltage base in kV")

    model_config = ConfigDict(
        frozen=True,
        json_schema_extra={
            "example": {
                "buses": [0, 1, 2],
                "cables": [
                    {"from_bus": 0, "to_bus": 1, "resistance": 0.01, "reactance": 0.1},
                    {"from_bus": 1, "to_bus": 2, "resistance": 0.02, "reactance": 0.2},
                ],
                "ders": {
                    "1": {"bus": 1, "q_min": -0.1, "q_max": 0.1, "cost": 1.0},
                    "2": {"bus": 2, "q_min": -0.1, "q_max": 0.1, "cost": 1.0},
                },
                "v0": 1.0,
                "v_min": 0.95,
                "v_max": 1.05,
            }
        },
    )

    @model_validator(mode="after")
    def _limits_ordered(self):
        if self.v_min >= self.v_max:
            raise ValueError(f"v_min ({self.v_min}) must be below v_max ({self.v_max})")
        return self

    @property
    def n(self) -> int:
        """Number of non-slack buses N."""
        return len(self.buses) - 1


class ControllerKind(str, Enum):
    NONE = "none"
    CENTRALIZED = "centralized"
    NESTED = "nested"
    TWO_METRIC = "two-metric"
    TRUNCATED = "truncated"
    DROOP = "droop"


class DroopCurve(BaseModel):
    """Volt-VAR curve: q_max below v1, ramp to 0 on [v1, v2], deadband, ramp to q_min on [v3, v4]."""
    v1: float = 0.95
    v2: float = 0.98
    v3: float = 1.02
    v4: float = 1.05

    model_config = ConfigDict(frozen=True)

    @model_validator(mode="after")
    def _breakpoints_ordered(self):
        if not (self.v1 <= self.v2 <= self.v3 <= self.v4):
            raise ValueError(
                f"droop breakpoints must satisfy v1 <= v2 <= v3 <= v4, got "
                f"({self.v1}, {self.v2}, {self.v3}, {self.v4})"
            )
        return self


class ControllerConfig(BaseModel):
    """
    Step sizes, regularization and limits shared by all feedback controllers.

    ``alpha``, ``alpha_d`` and ``alpha_u`` left as None are derived from the
    network's sensitivity spectrum (see controllers.resolve_step_sizes).
    ``v_min`` and ``v_max`` apply only when set explicitly; otherwise the
    controller takes the limits of the network it regulates.
    """
    alpha: Optional[float] = Field(None, gt=0.0, description="Primal step size")
    alpha_d: Optional[float] = Field(None, gt=0.0, description="Dual step size")
    alpha_u: Optional[float] = Field(None, gt=0.0, description="Inner-loop step size")
    r_p: float = Field(1e-4, ge=0.0, description="Primal regularization")
    r_d: float = Field(1e-4, ge=0.0, description="Dual regularization")
    epsilon: float = Field(1e-5, gt=0.0, le=0.1, description="Exploration parameter")
    inner_iterations: int = Field(4, ge=1, alias="T", description="Inner iterations per outer step")
    v_min: float = Field(0.95, gt=0.0)
    v_max: float = Field(1.05, gt=0.0)
    u0_policy: Literal["previous", "zero"] = "previous"
    deflation: float = Field(0.0, ge=0.0, lt=0.5, description="Fractional box shrink")
    capability: Literal["static", "headroom"] = "static"
    droop: DroopCurve = Field(default_factory=DroopCurve)

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    @model_validator(mode="after")
    def _limits_ordered(self):
        if self.v_min >= self.v_max:
            raise ValueError(f"v_min ({self.v_min}) must be below v_max ({self.v_max})")
        return self


# Published step sizes, meaningful only for networks stored in kW/kVar
PHYSICAL_UNIT_DEFAULTS = {
    "alpha": 5e-4,
    "alpha_d": 1e6,
    "alpha_u": 1e2,
    "epsilon": 1e-5,
    "r_p": 1e-4,
    "r_d": 1e-4,
    "T": 4,
}


class RunConfig(BaseModel):
    """Everything needed to reproduce one plant/controller run."""
    controller: ControllerKind = ControllerKind.NESTED
    controller_config: ControllerConfig = Field(default_factory=ControllerConfig)
    plant_tol: float = Field(1e-8, gt=0.0)
    plant_max_iter: int = Field(100, ge=1)
    seed: int = 0
    noise_std: float = Field(0.0, ge=0.0)
    max_outer: int = Field(500, ge=1)
    static_tol: float = Field(1e-6, gt=0.0)
    setpoints_per_sample: int = Field(6, ge=1, description="Implemented setpoints per profile sample")
    use_agents: bool = False

    model_config = ConfigDict(frozen=True)


class Metrics(BaseModel):
    """Summary of one run."""
    avv_per_bus: List[float]
    avv_worst_bus: float = Field(..., ge=0.0)
    worst_bus: int
    max_violation: float = Field(..., ge=0.0)
    mean_setpoint_deviation_vs_reference: Optional[float] = None
    mean_iter_time: float = Field(0.0, ge=0.0, description="Milliseconds per instant, controller only")
    max_capacity_violation: float = Field(0.0, ge=0.0, description="Relative box excursion")

    class Config:
        json_schema_extra = {
            "example": {
                "avv_per_bus": [0.0, 0.0001],
                "avv_worst_bus": 0.0001,
                "worst_bus": 2,
                "max_violation": 0.004,
                "mean_setpoint_deviation_vs_reference": None,
                "mean_iter_time": 0.3,
                "max_capacity_violation": 0.002,
            }
        }
