"""Token-scale in-context inpainting and the mask-noise, kappa and mode experiments."""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..core.exceptions import raise_invalid_input_error, raise_shape_error
from ..models.config import FusionMode, PipelineConfig
from ..models.reports import ExperimentReport, KappaCell, LayerMae, MaskNoiseCell
from ..models.tensors import DitBlockWeights, GaussianEndpoints, LayerTrace, ReferenceTokens, StackResult, TokenBlocks
from ..utils.linalg import Matrix, as_matrix, gaussian_matrix, make_rng, stable_sum
from .attention import DitBlock, init_dit_weights, project_qkv
from .reflow import bridge_velocity

logger = logging.getLogger(__name__)

# Child-stream keys under the cell seed
_TARGET_STREAM = 101
_STYLE_STREAM = 102
_PROMPT_STREAM = 103
_PATTERN_STREAM = 104

# sinusoid amplitude; puts the first-layer logit spread near 2
_TOKEN_AMPLITUDE = 2.0
_PROMPT_STD = _TOKEN_AMPLITUDE / math.sqrt(2.0)


def multi_style_concat(styles: Sequence[Matrix]) -> Matrix:
    """Row-wise concatenation of style exemplars, order preserved."""
    if not styles:
        raise_shape_error("styles", "at least one style block", 0)
    blocks = [as_matrix(s, f"styles[{k}]") for k, s in enumerate(styles)]
    widths = {b.shape[1] for b in blocks}
    if len(widths) != 1:
        raise_shape_error("style widths", "one shared width", sorted(widths))
    return np.concatenate(blocks, axis=0)


def synthesize_reference(cfg: PipelineConfig, seed: Optional[int] = None) -> ReferenceTokens:
    """A sinusoidal token grid plus Gaussian texture; the style block samples the same pattern."""
    seed = cfg.seed if seed is None else seed
    pattern = make_rng(seed, _PATTERN_STREAM)
    frequencies = pattern.uniform(0.5, 3.0, size=cfg.d)
    phases = pattern.uniform(0.0, 2.0 * math.pi, size=cfg.d)

    def render(n: int, stream: int) -> Matrix:
        positions = (np.arange(n) / n)[:, None]
        texture = gaussian_matrix(n, cfg.d, 0.0, 0.1, make_rng(seed, stream))
        return _TOKEN_AMPLITUDE * np.sin(2.0 * math.pi * positions * frequencies + phases) + texture

    return ReferenceTokens(target=render(cfg.N_o, _TARGET_STREAM), style=render(cfg.N_s, _STYLE_STREAM))


def masked_rows(mask_fraction: float, n_o: int) -> int:
    # guard against 0.07 * 100 = 7.000000000000001
    return min(n_o, int(math.ceil(mask_fraction * n_o - 1e-9)))


def build_incontext_input(reference: ReferenceTokens, cfg: PipelineConfig, mask_fraction: float) -> TokenBlocks:
    """[prompt; style; masked target] with the first ceil(fraction * N_o) output rows zeroed."""
    if not 0.0 <= mask_fraction <= 1.0:
        raise_invalid_input_error("mask_fraction", f"must lie in [0, 1], got {mask_fraction}")
    if reference.target.shape != (cfg.N_o, cfg.d):
        raise_shape_error("reference target", (cfg.N_o, cfg.d), reference.target.shape)
    if reference.style.shape != (cfg.N_s, cfg.d):
        raise_shape_error("reference style", (cfg.N_s, cfg.d), reference.style.shape)

    n_masked = masked_rows(mask_fraction, cfg.N_o)
    x_o = reference.target.copy()
    x_o[:n_masked] = 0.0
    mask = np.zeros(cfg.N_o, dtype=np.int8)
    mask[:n_masked] = 1

    if cfg.symmetric_branches:
        x_p = reference.style.copy()
    else:
        x_p = gaussian_matrix(cfg.N_p, cfg.d, 0.0, _PROMPT_STD, make_rng(cfg.seed, _PROMPT_STREAM))
    return TokenBlocks(x_p=x_p, x_s=(reference.style,), x_o=x_o, mask_o=mask)


def calibrate_prompt_offset(blocks: TokenBlocks, w: DitBlockWeights, gap: float) -> np.ndarray:
    """Shift added to every prompt token so the first-layer mean prompt logit exceeds the style one by ``gap``."""
    qkv = project_qkv(blocks, w.proj)
    d = blocks.d
    q_mean = qkv.Q_o.mean(axis=0)
    current = float(q_mean @ (qkv.K_p.mean(axis=0) - qkv.K_s.mean(axis=0))) / math.sqrt(d)
    direction = w.proj.W_k @ q_mean
    norm_sq = float(direction @ direction)
    if norm_sq == 0.0:
        return np.zeros(d)
    return (gap - current) * math.sqrt(d) / norm_sq * direction


def _reflow_nudge(x_o: Matrix, t: float, dt: float) -> Matrix:
    ep = GaussianEndpoints(
        mu0=np.zeros(x_o.shape[1]),
        mu1=x_o.mean(axis=0),
        var0=np.ones(x_o.shape[1]),
        var1=x_o.var(axis=0) + 1e-6,
    )
    return x_o + dt * bridge_velocity(x_o, t, ep)


def _layer_mae(clean: Sequence[LayerTrace], masked: Sequence[LayerTrace]) -> List[LayerMae]:
    return [
        LayerMae(
            layer=c.layer,
            mae_logits=float(np.mean(np.abs(m.logits_Z - c.logits_Z))),
            mae_alpha=float(np.mean(np.abs(m.alpha - c.alpha))),
            mae_output=float(np.mean(np.abs(m.h_o - c.h_o))),
        )
        for c, m in zip(clean, masked)
    ]


def _shifted(blocks: TokenBlocks, offset: np.ndarray) -> TokenBlocks:
    if not np.any(offset):
        return blocks
    return TokenBlocks(x_p=blocks.x_p + offset, x_s=blocks.x_s, x_o=blocks.x_o, mask_o=blocks.mask_o)


def _run_units(fn, units, threads: int):
    if threads == 1 or len(units) <= 1:
        return [fn(*u) for u in units]
    with ThreadPoolExecutor(max_workers=threads or None) as pool:
        return list(pool.map(lambda u: fn(*u), units))


def _mean(values: Sequence[float]) -> float:
    return stable_sum(values) / len(values)


def _average_layers(per_seed: List[List[LayerMae]]) -> List[LayerMae]:
    layers = len(per_seed[0]) if per_seed else 0
    averaged = []
    for k in range(layers):
        rows = [s[k] for s in per_seed]
        averaged.append(LayerMae(
            layer=rows[0].layer,
            mae_logits=_mean([r.mae_logits for r in rows]),
            mae_alpha=_mean([r.mae_alpha for r in rows]),
            mae_output=_mean([r.mae_output for r in rows]),
        ))
    return averaged


def _layer_mean(per_layer: List[LayerMae], metric: str) -> float:
    return _mean([getattr(r, metric) for r in per_layer]) if per_layer else 0.0


class InpaintingPipeline:
    """Service for token-scale in-context inpainting runs under one PipelineConfig."""

    def __init__(self, config: PipelineConfig, threads: int = 1):
        self.config = config
        self.threads = threads

    def with_dssi(self, **update) -> "InpaintingPipeline":
        """Same pipeline with some DssiConfig fields replaced."""
        cfg = self.config
        return InpaintingPipeline(cfg.model_copy(update={"dssi": cfg.dssi.model_copy(update=update)}), self.threads)

    def reference(self, seed: Optional[int] = None) -> ReferenceTokens:
        return synthesize_reference(self.config, seed)

    def incontext_input(self, reference: ReferenceTokens, mask_fraction: float) -> TokenBlocks:
        return build_incontext_input(reference, self.config, mask_fraction)

    def run(self, blocks: TokenBlocks, weights: Sequence[DitBlockWeights]) -> StackResult:
        """Apply the layer stack ``sample_steps`` times, keeping every layer's trace."""
        cfg = self.config
        if len(weights) != cfg.layers:
            raise_shape_error("weights", f"{cfg.layers} layers", len(weights))
        stack = [DitBlock(w, cfg.dssi) for w in weights]
        fusion_layers = None if cfg.fusion_layers is None else set(cfg.fusion_layers)
        trace: List[LayerTrace] = []
        current = blocks
        for step in range(cfg.sample_steps):
            for layer, block in enumerate(stack):
                apply_fusion = fusion_layers is None or layer in fusion_layers
                current, record = block.forward(current, layer=step * cfg.layers + layer, apply_fusion=apply_fusion)
                trace.append(record)
            if cfg.reflow_time_loop and step < cfg.sample_steps - 1:
                dt = 1.0 / cfg.sample_steps
                nudged = _reflow_nudge(current.x_o, step * dt, dt)
                current = TokenBlocks(x_p=current.x_p, x_s=current.x_s, x_o=nudged, mask_o=current.mask_o)
        return StackResult(output=current, trace=trace)

    def seeds(self) -> List[int]:
        return [self.config.seed + r for r in range(self.config.repeats)]

    def cell(self, seed: int) -> Tuple["InpaintingPipeline", List[DitBlockWeights], ReferenceTokens, np.ndarray]:
        """Pipeline, weights, reference and prompt offset for one seed."""
        cfg = self.config
        seeded = InpaintingPipeline(cfg.model_copy(update={"seed": seed}))
        weights = init_dit_weights(cfg.d, cfg.layers, seed)
        reference = seeded.reference()
        offset = np.zeros(cfg.d)
        if cfg.prompt_bias != 0.0 and weights:
            clean = seeded.incontext_input(reference, 0.0)
            offset = calibrate_prompt_offset(clean, weights[0], cfg.prompt_bias)
        return seeded, weights, reference, offset

    def mask_noise(
        self,
        modes: Sequence[FusionMode] = (FusionMode.VANILLA, FusionMode.DSSI),
        experiment: str = "mask-experiment",
    ) -> ExperimentReport:
        """Per-layer MAE of logits, attention and output between masked and clean runs."""
        cfg = self.config
        seeds = self.seeds()
        units = [(self, seed, mode) for mode in modes for seed in seeds]
        outputs = _run_units(_mask_noise_unit, units, self.threads)
        by_key = {(u[2], u[1]): out for u, out in zip(units, outputs)}

        cells = []
        for mode in sorted(modes, key=lambda m: m.value):
            for fraction in cfg.mask_fractions:
                per_layer = _average_layers([by_key[(mode, seed)][fraction] for seed in seeds])
                cells.append(MaskNoiseCell(
                    mask_fraction=fraction,
                    mode=mode,
                    kappa=cfg.dssi.kappa,
                    mae_logits=_layer_mean(per_layer, "mae_logits"),
                    mae_alpha=_layer_mean(per_layer, "mae_alpha"),
                    mae_output=_layer_mean(per_layer, "mae_output"),
                    seeds=seeds,
                    per_layer=per_layer,
                ))
        logger.info("%s: %d cells over %d seeds", experiment, len(cells), len(seeds))
        return ExperimentReport(
            experiment=experiment,
            cells=cells,
            metadata={"config": cfg.model_dump(mode="json"), "seed": cfg.seed, "modes": [m.value for m in modes]},
        )

    def kappa_sweep(self, kappas: Optional[Sequence[float]] = None) -> ExperimentReport:
        """Layer-averaged ||kappa lambda alpha_s V_s||_F and ||kappa (1 - lambda) alpha_p V_p||_F per kappa."""
        cfg = self.config
        kappas = list(cfg.kappas if kappas is None else kappas)
        if not kappas or any(k <= 0 for k in kappas):
            raise_invalid_input_error("kappas", "must be a non-empty list of positive values")
        seeds = self.seeds()
        units = [(self, seed, kappa) for kappa in kappas for seed in seeds]
        outputs = _run_units(_kappa_unit, units, self.threads)
        cells = []
        for kappa in kappas:
            rows = [out for u, out in zip(units, outputs) if u[2] == kappa]
            cells.append(KappaCell(
                kappa=kappa,
                style_contribution=_mean([r[0] for r in rows]),
                prompt_contribution=_mean([r[1] for r in rows]),
                branch_gain=max(r[2] for r in rows),
                seeds=seeds,
            ))
        return ExperimentReport(
            experiment="kappa-sweep",
            kappa_cells=cells,
            metadata={"config": cfg.model_dump(mode="json"), "seed": cfg.seed, "kappas": kappas},
        )

    def mode_ablation(self) -> ExperimentReport:
        """The mask-noise experiment under vanilla, fixed-weight and dynamic fusion with shared seeds."""
        return self.mask_noise(
            modes=(FusionMode.VANILLA, FusionMode.FSSI, FusionMode.DSSI),
            experiment="mode-ablation",
        )


def _mask_noise_unit(pipeline: InpaintingPipeline, seed: int, mode: FusionMode) -> Dict[float, List[LayerMae]]:
    seeded, weights, reference, offset = pipeline.cell(seed)
    runner = seeded.with_dssi(mode=mode)
    clean = runner.run(_shifted(runner.incontext_input(reference, 0.0), offset), weights)
    results = {}
    for fraction in pipeline.config.mask_fractions:
        masked = runner.run(_shifted(runner.incontext_input(reference, fraction), offset), weights)
        results[fraction] = _layer_mae(clean.trace, masked.trace)
    logger.debug("mask-noise unit seed=%d mode=%s done", seed, mode.value)
    return results


def _kappa_unit(pipeline: InpaintingPipeline, seed: int, kappa: float) -> Tuple[float, float, float]:
    seeded, weights, reference, offset = pipeline.cell(seed)
    runner = seeded.with_dssi(kappa=kappa, mode=FusionMode.DSSI)
    result = runner.run(_shifted(runner.incontext_input(reference, 0.0), offset), weights)
    style, prompt = [], []
    gain = 0.0
    for record in result.trace:
        lam = 0.0 if record.lam is None else record.lam
        style.append(float(np.linalg.norm(kappa * lam * record.style_branch)))
        prompt.append(float(np.linalg.norm(kappa * (1.0 - lam) * record.prompt_branch)))
        gain = max(gain, kappa * max(lam, 1.0 - lam))
    if not style:
        return 0.0, 0.0, 0.0
    return _mean(style), _mean(prompt), gain


def run_stack(blocks: TokenBlocks, weights: Sequence[DitBlockWeights], cfg: PipelineConfig) -> StackResult:
    """Apply the layer stack ``sample_steps`` times, keeping every layer's trace."""
    return InpaintingPipeline(cfg).run(blocks, weights)


def mask_noise_experiment(
    cfg: PipelineConfig,
    modes: Sequence[FusionMode] = (FusionMode.VANILLA, FusionMode.DSSI),
    threads: int = 1,
    experiment: str = "mask-experiment",
) -> ExperimentReport:
    return InpaintingPipeline(cfg, threads).mask_noise(modes, experiment)


def kappa_sweep(cfg: PipelineConfig, kappas: Optional[Sequence[float]] = None, threads: int = 1) -> ExperimentReport:
    return InpaintingPipeline(cfg, threads).kappa_sweep(kappas)


def mode_ablation(cfg: PipelineConfig, threads: int = 1) -> ExperimentReport:
    return InpaintingPipeline(cfg, threads).mode_ablation()
