from datetime import datetime, timezone
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field

from ..core.config import settings
from .config import FusionMode, PerturbationKind


class AlignmentStrengths(BaseModel):
    """Alignment strengths of the output queries and the resulting DSSI weight."""
    lambda_p: float = Field(..., description="Log of total prompt-block attention mass, clamped")
    lambda_s: float = Field(..., description="Log of total style-block attention mass, clamped")
    gamma: float = Field(..., ge=0, description="lambda_p / lambda_s")
    lambda_star: float = Field(..., ge=0, le=1, description="gamma / (1 + gamma)")


class BranchStats(BaseModel):
    """Branch-wise logit statistics for the winner-takes-all estimate."""
    N_p: int = Field(..., ge=1)
    N_s: int = Field(..., ge=1)
    N_o: int = Field(..., ge=1)
    mu_p: float = 0.0
    mu_s: float = 0.0
    mu_o: float = 0.0
    sigma: float = Field(0.0, ge=0, description="Logit noise standard deviation")


class PerturbationSpec(BaseModel):
    """An infinity-norm bounded logit perturbation."""
    delta: float = Field(..., ge=0)
    distribution: PerturbationKind = PerturbationKind.UNIFORM_PM_DELTA


class MonteCarloEstimate(BaseModel):
    """Monte-Carlo mean and its standard error."""
    mean: float
    std_err: float = Field(..., ge=0)


class Prop2Bound(BaseModel):
    """Closed-form softmax perturbation bounds for one delta."""
    tv_bound: float
    l1_bound: float
    small_delta_asymptote: float


class PerturbationTerms(BaseModel):
    """Row-wise maxima of the three DSSI perturbation terms."""
    term1: float = Field(..., ge=0)
    term2: float = Field(..., ge=0)
    term3: float = Field(..., ge=0)
    total_bound: float = Field(..., ge=0)
    ratio: float = Field(..., ge=0, description="term2 / (term1 + term3)")


class BoundReport(BaseModel):
    """Outcome of checking an empirical quantity against its bound."""
    check_name: str = ""
    parameter: Optional[float] = Field(None, description="delta or sigma the check ran at")
    empirical: float
    bound: float
    satisfied: bool
    slack: float
    trials: int = 0
    seed: int = 0
    detail: str = ""

    @classmethod
    def evaluate(
        cls,
        check_name: str,
        empirical: float,
        bound: float,
        parameter: Optional[float] = None,
        trials: int = 0,
        seed: int = 0,
        detail: str = "",
        tolerance: Optional[float] = None,
    ) -> "BoundReport":
        """Build a report, deriving ``satisfied`` and ``slack`` from the two values."""
        tolerance = settings.BOUND_TOLERANCE if tolerance is None else tolerance
        return cls(
            check_name=check_name,
            parameter=parameter,
            empirical=float(empirical),
            bound=float(bound),
            satisfied=bool(empirical <= bound + tolerance),
            slack=float(bound - empirical),
            trials=trials,
            seed=seed,
            detail=detail,
        )


class LayerMae(BaseModel):
    """MAE of one layer between a masked run and the clean run."""
    layer: int
    mae_logits: float = Field(..., ge=0)
    mae_alpha: float = Field(..., ge=0)
    mae_output: float = Field(..., ge=0)


class MaskNoiseCell(BaseModel):
    """Layer-averaged MAE for one (mask fraction, mode) cell."""
    mask_fraction: float = Field(..., ge=0, le=1)
    mode: FusionMode
    kappa: float
    mae_logits: float = Field(..., ge=0)
    mae_alpha: float = Field(..., ge=0)
    mae_output: float = Field(..., ge=0)
    seeds: List[int] = Field(default_factory=list)
    per_layer: List[LayerMae] = Field(default_factory=list)


class KappaCell(BaseModel):
    """Layer-averaged branch contributions at one kappa."""
    kappa: float = Field(..., gt=0)
    style_contribution: float = Field(..., ge=0)
    prompt_contribution: float = Field(..., ge=0)
    # kappa * max(lambda, 1 - lambda), worst layer and seed; at or below 1 no branch is amplified
    branch_gain: float = Field(0.0, ge=0)
    seeds: List[int] = Field(default_factory=list)


class ExperimentReport(BaseModel):
    """Curves keyed by mask fraction, kappa or fusion mode."""
    experiment: str
    cells: List[MaskNoiseCell] = Field(default_factory=list)
    kappa_cells: List[KappaCell] = Field(default_factory=list)
    metadata: Dict[str, Any] = Field(default_factory=dict, description="Config echo and seed")

    def curve(self, mode: FusionMode, metric: str) -> List[float]:
        """Metric values for one mode, ordered by mask fraction."""
        rows = sorted((c for c in self.cells if c.mode == mode), key=lambda c: c.mask_fraction)
        return [getattr(c, metric) for c in rows]


class RunManifest(BaseModel):
    """Provenance written next to every report."""
    command: str
    version: str
    config_sha256: str
    seed: int
    threads: int
    wall_time_s: float
    outputs: List[str] = Field(default_factory=list)
    timestamp: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))
