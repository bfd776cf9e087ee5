"""Dynamic semantic-style integration: alignment strengths, the closed-form weight and fused outputs."""
import math
from typing import NamedTuple, Optional, Tuple

import numpy as np

from ..core.exceptions import raise_invalid_input_error, raise_shape_error
from ..models.config import AlignmentNormalization, DssiConfig, FusionMode
from ..models.reports import AlignmentStrengths
from ..models.tensors import BlockAttention, QkvBlocks
from ..utils.linalg import Matrix, as_matrix, row_softmax


class ReferenceOutputs(NamedTuple):
    """Semantic-guided (s) and style-guided (t) reference outputs."""
    s: Matrix
    t: Matrix


def _clamped_log(mass: float, floor: float) -> float:
    if mass <= 0:
        return floor
    return max(math.log(mass), floor)


def _block_masses(attn: BlockAttention, cfg: DssiConfig) -> Tuple[float, float]:
    if cfg.alignment_normalization == AlignmentNormalization.BLOCK_LOCAL:
        n_p = attn.alpha_p.shape[1]
        n_s = attn.alpha_s.shape[1]
        local_p = row_softmax(attn.logits_Z[:, :n_p])
        local_s = row_softmax(attn.logits_Z[:, n_p:n_p + n_s])
        return float(local_p.sum()), float(local_s.sum())
    return float(attn.alpha_p.sum()), float(attn.alpha_s.sum())


def lambda_star(gamma: float) -> float:
    """Minimiser gamma / (1 + gamma) of the DSSI loss."""
    if gamma < 0 or math.isnan(gamma):
        raise_invalid_input_error("gamma", f"must be >= 0, got {gamma}")
    if math.isinf(gamma):
        return 1.0
    return gamma / (1.0 + gamma)


def alignment_strengths(attn: BlockAttention, cfg: DssiConfig) -> AlignmentStrengths:
    """lambda_b = log of the total attention mass the output queries put on block b.

    Masses are summed over the full-axis softmax unless the config asks for
    the block-local reading. Both logs are clamped below at ``lambda_floor``,
    so gamma is finite and lambda_star stays inside (0, 1).
    """
    mass_p, mass_s = _block_masses(attn, cfg)
    lambda_p = _clamped_log(mass_p, cfg.lambda_floor)
    lambda_s = _clamped_log(mass_s, cfg.lambda_floor)
    gamma = lambda_p / lambda_s
    return AlignmentStrengths(
        lambda_p=lambda_p,
        lambda_s=lambda_s,
        gamma=gamma,
        lambda_star=lambda_star(gamma),
    )


def _branch_products(attn: BlockAttention, qkv: QkvBlocks) -> Tuple[Matrix, Matrix, Matrix]:
    pairs = ((attn.alpha_p, qkv.V_p, "alpha_p/V_p"), (attn.alpha_s, qkv.V_s, "alpha_s/V_s"), (attn.alpha_o, qkv.V_o, "alpha_o/V_o"))
    for alpha, values, name in pairs:
        if alpha.shape[1] != values.shape[0]:
            raise_shape_error(name, f"{alpha.shape[1]} value rows", values.shape[0])
    return attn.alpha_p @ qkv.V_p, attn.alpha_s @ qkv.V_s, attn.alpha_o @ qkv.V_o


def _weighted_output(qkv: QkvBlocks, attn: BlockAttention, kappa: float, prompt_weight: float, style_weight: float) -> Matrix:
    prompt, style, output = _branch_products(attn, qkv)
    return kappa * (prompt_weight * prompt + style_weight * style) + output


def reference_outputs(attn: BlockAttention, qkv: QkvBlocks, cfg: DssiConfig) -> ReferenceOutputs:
    """s = kappa * alpha_p V_p + alpha_o V_o; t = kappa * alpha_s V_s + alpha_o V_o."""
    prompt, style, output = _branch_products(attn, qkv)
    return ReferenceOutputs(s=cfg.kappa * prompt + output, t=cfg.kappa * style + output)


def dssi_loss(lam: float, s: Matrix, t: Matrix, gamma: float) -> float:
    """||h(lam) - s||_F^2 + gamma ||h(lam) - t||_F^2, with h(lam) = (1 - lam) s + lam t."""
    if not 0.0 <= lam <= 1.0:
        raise_invalid_input_error("lambda", f"must lie in [0, 1], got {lam}")
    if gamma < 0:
        raise_invalid_input_error("gamma", f"must be >= 0, got {gamma}")
    s = as_matrix(s, "s")
    t = as_matrix(t, "t")
    if s.shape != t.shape:
        raise_shape_error("s and t", s.shape, t.shape)
    # h - s = lam (t - s) and h - t = (1 - lam)(s - t); s = t gives exactly 0
    return float(np.sum((lam * (t - s)) ** 2) + gamma * np.sum(((1.0 - lam) * (s - t)) ** 2))


def loss_grid_search(s: Matrix, t: Matrix, gamma: float, step: float = 1e-3) -> Tuple[float, float]:
    """Brute-force (argmin, min) of the loss over an evenly spaced lambda grid."""
    s = as_matrix(s, "s")
    t = as_matrix(t, "t")
    if s.shape != t.shape:
        raise_shape_error("s and t", s.shape, t.shape)
    grid = np.linspace(0.0, 1.0, int(round(1.0 / step)) + 1)
    towards_t = grid[:, None, None] * (t - s)
    towards_s = (1.0 - grid)[:, None, None] * (s - t)
    losses = np.sum(towards_t ** 2, axis=(1, 2)) + gamma * np.sum(towards_s ** 2, axis=(1, 2))
    best = int(np.argmin(losses))
    return float(grid[best]), float(losses[best])


def loss_second_difference(lam: float, s: Matrix, t: Matrix, gamma: float, h: float = 1e-3) -> float:
    """Central second difference of the loss at ``lam``."""
    return (dssi_loss(lam + h, s, t, gamma) - 2.0 * dssi_loss(lam, s, t, gamma) + dssi_loss(lam - h, s, t, gamma)) / (h * h)


def dssi_output(qkv: QkvBlocks, attn: BlockAttention, cfg: DssiConfig) -> Matrix:
    """kappa * ((1 - lambda) alpha_p V_p + lambda alpha_s V_s) + alpha_o V_o."""
    lam = alignment_strengths(attn, cfg).lambda_star
    return _weighted_output(qkv, attn, cfg.kappa, 1.0 - lam, lam)


def fssi_output(qkv: QkvBlocks, attn: BlockAttention, cfg: DssiConfig) -> Matrix:
    """Static weights: ``fixed_lambda`` on the prompt branch, the rest on style."""
    w = cfg.fixed_lambda
    return _weighted_output(qkv, attn, cfg.kappa, w, 1.0 - w)


class DssiFuser:
    """Service for fusing the output-query branches under one DssiConfig."""

    def __init__(self, config: Optional[DssiConfig] = None):
        self.config = config or DssiConfig()

    def with_mode(self, mode: FusionMode) -> "DssiFuser":
        """Same kappa and floors, another fusion mode."""
        if mode == self.config.mode:
            return self
        return DssiFuser(self.config.model_copy(update={"mode": mode}))

    def strengths(self, attn: BlockAttention) -> AlignmentStrengths:
        return alignment_strengths(attn, self.config)

    def references(self, attn: BlockAttention, qkv: QkvBlocks) -> ReferenceOutputs:
        return reference_outputs(attn, qkv, self.config)

    def fuse(self, qkv: QkvBlocks, attn: BlockAttention) -> Tuple[Matrix, Optional[float]]:
        """Output-query attention under the configured mode and the style-branch weight it used."""
        cfg = self.config
        if cfg.mode == FusionMode.DSSI:
            lam = self.strengths(attn).lambda_star
            return _weighted_output(qkv, attn, cfg.kappa, 1.0 - lam, lam), lam
        if cfg.mode == FusionMode.FSSI:
            w = cfg.fixed_lambda
            return _weighted_output(qkv, attn, cfg.kappa, w, 1.0 - w), 1.0 - w
        prompt, style, output = _branch_products(attn, qkv)
        return prompt + style + output, None


def fused_output(qkv: QkvBlocks, attn: BlockAttention, cfg: DssiConfig) -> Tuple[Matrix, Optional[float]]:
    """Output-query attention under ``cfg.mode`` and the style-branch weight it used."""
    return DssiFuser(cfg).fuse(qkv, attn)
