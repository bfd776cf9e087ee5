from enum import Enum
from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class FusionMode(str, Enum):
    """How the output-query attention combines the prompt and style branches."""
    VANILLA = "vanilla"
    FSSI = "fssi"
    DSSI = "dssi"


class AlignmentNormalization(str, Enum):
    """Which softmax the alignment strengths are summed over."""
    FULL = "full"
    BLOCK_LOCAL = "block_local"


class PerturbationKind(str, Enum):
    """Logit perturbation families used by the bound checks."""
    UNIFORM_PM_DELTA = "uniform_pm_delta"
    SIGN_DELTA = "sign_delta"
    ADVERSARIAL_ROWMAX = "adversarial_rowmax"


class CommandName(str, Enum):
    """Supported command-line commands."""
    VERIFY_PROPOSITIONS = "verify-propositions"
    MASK_EXPERIMENT = "mask-experiment"
    KAPPA_SWEEP = "kappa-sweep"
    MODE_ABLATION = "mode-ablation"
    REFLOW_CHECK = "reflow-check"
    EMIT_CONFIG_TEMPLATE = "emit-config-template"


class OutputFormat(str, Enum):
    """Report formats written by the CLI."""
    CSV = "csv"
    JSON = "json"
    BOTH = "both"


class StrictModel(BaseModel):
    """Base for config documents: unknown fields are rejected."""
    model_config = ConfigDict(extra="forbid", use_enum_values=False)


class DssiConfig(StrictModel):
    """Fusion settings for the output-query attention."""
    kappa: float = Field(2.3, gt=0, description="Prior-strength scale on the prompt and style branches")
    mode: FusionMode = Field(FusionMode.DSSI, description="Fusion rule for output queries")
    lambda_floor: float = Field(1e-6, gt=0, description="Lower clamp for the alignment strengths")
    fixed_lambda: float = Field(0.5, ge=0, le=1, description="Prompt-branch weight in fssi mode")
    alignment_normalization: AlignmentNormalization = Field(
        AlignmentNormalization.FULL,
        description="Sum alignment mass over the full key axis or a block-local softmax",
    )


class PipelineConfig(StrictModel):
    """Shape and schedule of the in-context inpainting stack."""
    d: int = Field(64, ge=1, description="Embedding width")
    N_p: int = Field(8, ge=1, description="Prompt tokens")
    N_s: int = Field(32, ge=1, description="Style tokens")
    N_o: int = Field(64, ge=1, description="Output tokens")
    layers: int = Field(4, ge=0, description="DiT blocks in the stack")
    sample_steps: int = Field(1, ge=1, description="Stack passes per run")
    seed: int = Field(..., ge=0, lt=2**64, description="Base seed for every random draw")
    mask_fractions: List[float] = Field(default_factory=lambda: [0.25, 0.5, 0.75, 0.99])
    dssi: DssiConfig = Field(default_factory=DssiConfig)
    fusion_layers: Optional[List[int]] = Field(None, description="Layers that apply the fusion rule; null = all")
    repeats: int = Field(1, ge=1, description="Seeds averaged per experiment cell")
    kappas: List[float] = Field(default_factory=lambda: [1.0, 1.5, 2.0, 2.3, 2.5, 3.0])
    prompt_bias: float = Field(0.0, description="Target first-layer mean-logit gap of prompt over style")
    symmetric_branches: bool = Field(False, description="Mirror the style block into the prompt block")
    reflow_time_loop: bool = Field(False, description="Euler-advance the output block between stack passes")

    @field_validator("mask_fractions")
    @classmethod
    def validate_mask_fractions(cls, v):
        if not v:
            raise ValueError("at least one mask fraction is required")
        if any(f < 0 or f > 1 for f in v):
            raise ValueError("mask fractions must lie in [0, 1]")
        if any(b < a for a, b in zip(v, v[1:])):
            raise ValueError("mask fractions must be sorted ascending")
        return v

    @field_validator("kappas")
    @classmethod
    def validate_kappas(cls, v):
        if not v or any(k <= 0 for k in v):
            raise ValueError("kappas must be a non-empty list of positive values")
        return v

    @field_validator("fusion_layers")
    @classmethod
    def validate_fusion_layers(cls, v):
        if v is not None and any(layer < 0 for layer in v):
            raise ValueError("layer indices must be >= 0")
        return v

    @model_validator(mode="after")
    def validate_symmetric_branches(self):
        if self.symmetric_branches and self.N_p != self.N_s:
            raise ValueError("symmetric_branches requires N_p == N_s")
        return self


class VerificationConfig(StrictModel):
    """Trial budgets for verify-propositions."""
    prop1_trials: int = Field(10_000, ge=1)
    prop1_sigmas: List[float] = Field(default_factory=lambda: [0.05, 0.1, 0.2])
    prop1_means: List[float] = Field(default_factory=lambda: [-3.0, 0.0, 3.0])
    prop1_counts: List[int] = Field(default_factory=lambda: [4, 16, 64])
    prop2_trials: int = Field(100_000, ge=1)
    prop2_deltas: List[float] = Field(default_factory=lambda: [0.01, 0.1, 0.3, 1.0, 2.0])
    prop2_widths: List[int] = Field(default_factory=lambda: [2, 8, 64, 512])
    prop3_samples: int = Field(10_000, ge=1)
    alignment_trials: int = Field(10_000, ge=1)
    alignment_deltas: List[float] = Field(default_factory=lambda: [0.05, 0.1, 0.3])
    output_bound_trials: int = Field(10_000, ge=1)
    output_bound_delta: float = Field(0.1, ge=0)
    lambda_draws: int = Field(1000, ge=1)
    lambda_grid_step: float = Field(1e-3, gt=0, lt=1)


class ReflowConfig(StrictModel):
    """Gaussian endpoints and budgets for reflow-check."""
    mu0: List[float] = Field(default_factory=lambda: [0.0, 0.0])
    mu1: List[float] = Field(default_factory=lambda: [3.0, -1.0])
    var0: List[float] = Field(default_factory=lambda: [1.0, 1.0])
    var1: List[float] = Field(default_factory=lambda: [0.25, 2.0])
    trajectories: int = Field(10_000, ge=2)
    steps: int = Field(100, ge=1)
    loss_trials: int = Field(100_000, ge=1)
    convergence_steps: List[int] = Field(default_factory=lambda: [2, 4, 8, 16, 32, 64, 128, 256])

    @model_validator(mode="after")
    def validate_endpoints(self):
        if not (len(self.mu0) == len(self.mu1) == len(self.var0) == len(self.var1)) or not self.mu0:
            raise ValueError("mu0, mu1, var0 and var1 must share one non-zero length")
        if any(v <= 0 for v in self.var0 + self.var1):
            raise ValueError("variances must be > 0")
        return self


class ExperimentConfig(PipelineConfig):
    """Top-level JSON experiment document."""
    verification: VerificationConfig = Field(default_factory=VerificationConfig)
    reflow: ReflowConfig = Field(default_factory=ReflowConfig)


class Command(StrictModel):
    """A parsed command-line invocation."""
    name: CommandName
    config_path: Optional[str] = None
    out_dir: str = "results"
    overrides: List[str] = Field(default_factory=list)
    threads: int = Field(0, ge=0)
    format: OutputFormat = OutputFormat.BOTH

    @model_validator(mode="after")
    def validate_config_requirement(self):
        if self.name != CommandName.EMIT_CONFIG_TEMPLATE and not self.config_path:
            raise ValueError(f"--config is required for {self.name.value}")
        return self
