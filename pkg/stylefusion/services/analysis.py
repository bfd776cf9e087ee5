"""Numerical checks of the branch-dominance estimate and the softmax perturbation bounds."""
import itertools
import logging
import math
from typing import List, NamedTuple, Optional

import numpy as np

from ..core.exceptions import raise_invalid_input_error, raise_shape_error
from ..models.config import DssiConfig, FusionMode, PerturbationKind
from ..models.reports import (
    BoundReport, BranchStats, MonteCarloEstimate, PerturbationSpec, PerturbationTerms, Prop2Bound,
)
from ..models.tensors import BlockAttention, QkvBlocks
from ..utils.linalg import Matrix, Rng, as_matrix, max_row_norm, row_softmax
from . import dssi
from .attention import output_block_attention, split_output_attention

logger = logging.getLogger(__name__)

# Largest number of logits materialised per Monte-Carlo batch
_BATCH_ENTRIES = 2_000_000
_STOCHASTIC_TOL = 1e-9


class DssiState(NamedTuple):
    """Attention blocks and the DSSI weight computed from them."""
    attn: BlockAttention
    lam: float


def _batches(trials: int, per_trial: int):
    size = max(1, _BATCH_ENTRIES // max(per_trial, 1))
    done = 0
    while done < trials:
        count = min(size, trials - done)
        yield count
        done += count


# ---------------------------------------------------------------------------
# Branch dominance
# ---------------------------------------------------------------------------

def prop1_predicted_mass(stats: BranchStats) -> float:
    """N_s e^mu_s / (N_p e^mu_p + N_s e^mu_s + N_o e^mu_o), evaluated without overflow."""
    top = max(stats.mu_p, stats.mu_s, stats.mu_o)
    weights = {
        "p": stats.N_p * math.exp(stats.mu_p - top),
        "s": stats.N_s * math.exp(stats.mu_s - top),
        "o": stats.N_o * math.exp(stats.mu_o - top),
    }
    return weights["s"] / (weights["p"] + weights["s"] + weights["o"])


def prop1_empirical_mass(stats: BranchStats, trials: int, rng: Rng, rows: Optional[int] = None) -> MonteCarloEstimate:
    """Monte-Carlo mean row mass of the style block under Z = mu_b + Normal(0, sigma^2).

    Each trial draws a ``rows`` x (N_p + N_s + N_o) logit matrix (``rows``
    defaults to N_o) and contributes its mean style-row mass.
    """
    if trials < 1:
        raise_invalid_input_error("trials", "must be >= 1")
    rows = stats.N_o if rows is None else rows
    width = stats.N_p + stats.N_s + stats.N_o
    means = np.concatenate([
        np.full(stats.N_p, stats.mu_p), np.full(stats.N_s, stats.mu_s), np.full(stats.N_o, stats.mu_o),
    ])
    per_trial = []
    for count in _batches(trials, rows * width):
        z = means + stats.sigma * rng.standard_normal((count, rows, width))
        z -= z.max(axis=2, keepdims=True)
        weights = np.exp(z)
        style = weights[:, :, stats.N_p:stats.N_p + stats.N_s].sum(axis=2) / weights.sum(axis=2)
        per_trial.append(style.mean(axis=1))
    values = np.concatenate(per_trial)
    std_err = float(values.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
    return MonteCarloEstimate(mean=float(values.mean()), std_err=std_err)


def check_prop1(stats: BranchStats, trials: int, rng: Rng, rows: Optional[int] = None, seed: int = 0) -> BoundReport:
    """|empirical - predicted| <= max(10 sigma^3, 5 std_err)."""
    estimate = prop1_empirical_mass(stats, trials, rng, rows=rows)
    predicted = prop1_predicted_mass(stats)
    return BoundReport.evaluate(
        "prop1_branch_mass",
        abs(estimate.mean - predicted),
        max(10.0 * stats.sigma ** 3, 5.0 * estimate.std_err),
        parameter=stats.sigma,
        trials=trials,
        seed=seed,
        detail=f"N=({stats.N_p},{stats.N_s},{stats.N_o}) mu=({stats.mu_p},{stats.mu_s},{stats.mu_o}) predicted={predicted:.6g}",
    )


# ---------------------------------------------------------------------------
# Softmax perturbation
# ---------------------------------------------------------------------------

def _perturbation(shape, spec: PerturbationSpec, rng: Rng, z: np.ndarray) -> np.ndarray:
    delta = spec.delta
    if spec.distribution == PerturbationKind.UNIFORM_PM_DELTA:
        return rng.uniform(-delta, delta, size=shape)
    if spec.distribution == PerturbationKind.SIGN_DELTA:
        return delta * np.where(rng.random(size=shape) < 0.5, -1.0, 1.0)
    eps = np.full(shape, -delta)
    winners = np.argmax(z, axis=-1)
    np.put_along_axis(eps, winners[..., None], delta, axis=-1)
    return eps


def perturb_logits(Z, spec: PerturbationSpec, rng: Rng) -> Matrix:
    """Z + eps with ||eps||_inf <= delta, drawn from ``spec.distribution``."""
    z = as_matrix(Z, "Z")
    eps = _perturbation(z.shape, spec, rng, z)
    return z + np.clip(eps, -spec.delta, spec.delta)


def _check_stochastic(m: np.ndarray, name: str) -> None:
    if np.any(m < -_STOCHASTIC_TOL) or np.any(np.abs(m.sum(axis=-1) - 1.0) > _STOCHASTIC_TOL):
        raise_invalid_input_error(name, "rows must be probability vectors")


def tv_distance(a, b) -> np.ndarray:
    """Per-row total variation distance 0.5 * ||a_i - b_i||_1."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape != b.shape:
        raise_shape_error("tv_distance", a.shape, b.shape)
    _check_stochastic(a, "a")
    _check_stochastic(b, "b")
    return 0.5 * np.abs(a - b).sum(axis=1)


def prop2_bound(delta: float) -> Prop2Bound:
    if delta < 0:
        raise_invalid_input_error("delta", f"must be >= 0, got {delta}")
    tv = -math.expm1(-2.0 * delta)
    return Prop2Bound(tv_bound=tv, l1_bound=2.0 * tv, small_delta_asymptote=4.0 * delta)


def worst_case_tv_two_point(delta: float, span: float = 10.0, points: int = 2001) -> float:
    """Largest TV over 2-logit rows (0, x) under every +-delta corner perturbation."""
    x = np.linspace(-span, span, points)
    worst = 0.0
    for e0, e1 in itertools.product((-delta, delta), repeat=2):
        p = 1.0 / (1.0 + np.exp(x))
        p_tilde = 1.0 / (1.0 + np.exp(x + e1 - e0))
        worst = max(worst, float(np.max(np.abs(p_tilde - p))))
    return worst


def _batch_softmax(batch: np.ndarray) -> np.ndarray:
    shifted = np.exp(batch - batch.max(axis=2, keepdims=True))
    return shifted / shifted.sum(axis=2, keepdims=True)


def _worst_tv(batch: np.ndarray, clean: np.ndarray, spec: PerturbationSpec, rng: Rng) -> float:
    eps = np.clip(_perturbation(batch.shape, spec, rng, batch), -spec.delta, spec.delta)
    noisy = _batch_softmax(batch + eps)
    return float((0.5 * np.abs(noisy - clean).sum(axis=2)).max())


def check_prop2(Z, spec: PerturbationSpec, trials: int, rng: Rng, seed: int = 0) -> BoundReport:
    """Max per-row TV(softmax(Z + eps), softmax(Z)) over all trials against 1 - e^{-2 delta}."""
    z = as_matrix(Z, "Z")
    clean = row_softmax(z)
    worst = 0.0
    for count in _batches(trials, z.size):
        batch = np.broadcast_to(z, (count, *z.shape))
        worst = max(worst, _worst_tv(batch, clean, spec, rng))
    return BoundReport.evaluate(
        "prop2_tv",
        worst,
        prop2_bound(spec.delta).tv_bound,
        parameter=spec.delta,
        trials=trials,
        seed=seed,
        detail=f"{spec.distribution.value} shape={z.shape[0]}x{z.shape[1]}",
    )


def check_prop2_fresh(
    rows: int, width: int, spec: PerturbationSpec, trials: int, rng: Rng, scale: float = 2.0, seed: int = 0,
) -> BoundReport:
    """As check_prop2, but every trial draws its own logits Z ~ scale * N(0, 1)."""
    if rows < 1 or width < 1:
        raise_invalid_input_error("logit shape", f"needs rows, width >= 1, got {rows}x{width}")
    worst = 0.0
    for count in _batches(trials, rows * width):
        batch = scale * rng.standard_normal((count, rows, width))
        worst = max(worst, _worst_tv(batch, _batch_softmax(batch), spec, rng))
    return BoundReport.evaluate(
        "prop2_tv",
        worst,
        prop2_bound(spec.delta).tv_bound,
        parameter=spec.delta,
        trials=trials,
        seed=seed,
        detail=f"{spec.distribution.value} shape={rows}x{width} fresh Z",
    )


# ---------------------------------------------------------------------------
# Output perturbation
# ---------------------------------------------------------------------------

def _value_norms(qkv: QkvBlocks):
    return max_row_norm(qkv.V_p), max_row_norm(qkv.V_s), max_row_norm(qkv.V_o)


def output_perturbation_bound(qkv: QkvBlocks, delta: float) -> float:
    """2 (1 - e^{-2 delta}) (||V_p|| + ||V_s|| + ||V_o||), ||V_b|| the max row l2 norm."""
    return prop2_bound(delta).l1_bound * sum(_value_norms(qkv))


def _noisy_attention(attn: BlockAttention, spec: PerturbationSpec, rng: Rng) -> BlockAttention:
    logits = perturb_logits(attn.logits_Z, spec, rng)
    counts = (attn.alpha_p.shape[1], attn.alpha_s.shape[1], attn.alpha_o.shape[1])
    return split_output_attention(logits, counts)


def _vanilla_h(attn: BlockAttention, qkv: QkvBlocks) -> Matrix:
    return attn.alpha_p @ qkv.V_p + attn.alpha_s @ qkv.V_s + attn.alpha_o @ qkv.V_o


def check_output_bound(
    qkv: QkvBlocks,
    delta: float,
    trials: int,
    rng: Rng,
    distribution: PerturbationKind = PerturbationKind.UNIFORM_PM_DELTA,
    seed: int = 0,
) -> BoundReport:
    """Row-wise ||h~_o - h_o||_2 of vanilla attention against the output bound."""
    attn = output_block_attention(qkv, qkv.d)
    clean = _vanilla_h(attn, qkv)
    spec = PerturbationSpec(delta=delta, distribution=distribution)
    worst = 0.0
    for _ in range(trials):
        noisy = _vanilla_h(_noisy_attention(attn, spec, rng), qkv)
        worst = max(worst, float(np.sqrt(((noisy - clean) ** 2).sum(axis=1)).max()))
    return BoundReport.evaluate(
        "output_perturbation", worst, output_perturbation_bound(qkv, delta),
        parameter=delta, trials=trials, seed=seed, detail=distribution.value,
    )


def _row_terms(clean: DssiState, noisy: DssiState, qkv: QkvBlocks, kappa: float):
    if clean.attn.logits_Z.shape != noisy.attn.logits_Z.shape:
        raise_shape_error("clean/noisy attention", clean.attn.logits_Z.shape, noisy.attn.logits_Z.shape)
    v_p, v_s, v_o = _value_norms(qkv)
    lam, lam_tilde = clean.lam, noisy.lam
    d_p = np.abs(noisy.attn.alpha_p - clean.attn.alpha_p).sum(axis=1)
    d_s = np.abs(noisy.attn.alpha_s - clean.attn.alpha_s).sum(axis=1)
    d_o = np.abs(noisy.attn.alpha_o - clean.attn.alpha_o).sum(axis=1)
    term1 = kappa * ((1.0 - lam) * d_p * v_p + lam * d_s * v_s)
    term2 = kappa * abs(lam_tilde - lam) * (
        np.abs(noisy.attn.alpha_p).sum(axis=1) * v_p + np.abs(noisy.attn.alpha_s).sum(axis=1) * v_s
    )
    term3 = d_o * v_o
    return term1, term2, term3


def dssi_perturbation_terms(clean: DssiState, noisy: DssiState, qkv: QkvBlocks, kappa: float = 1.0) -> PerturbationTerms:
    """Row-wise maxima of the three terms bounding ||h~_o - h_o||_2 under DSSI.

    Alpha differences and masses are measured in l1 and ||V_b|| is the max
    row l2 norm, so term1 + term2 + term3 bounds every row.
    """
    term1, term2, term3 = _row_terms(clean, noisy, qkv, kappa)
    t1, t2, t3 = float(term1.max()), float(term2.max()), float(term3.max())
    denominator = t1 + t3
    return PerturbationTerms(
        term1=t1,
        term2=t2,
        term3=t3,
        total_bound=float((term1 + term2 + term3).max()),
        ratio=t2 / denominator if denominator > 0 else 0.0,
    )


class PerturbationAnalyzer:
    """Service for logit-perturbation checks of the vanilla and DSSI outputs under one DssiConfig."""

    def __init__(self, config: Optional[DssiConfig] = None, seed: int = 0):
        self.fuser = dssi.DssiFuser(config)
        self.seed = seed

    def output_bound(
        self,
        qkv: QkvBlocks,
        delta: float,
        trials: int,
        rng: Rng,
        distribution: PerturbationKind = PerturbationKind.UNIFORM_PM_DELTA,
    ) -> BoundReport:
        return check_output_bound(qkv, delta, trials, rng, distribution=distribution, seed=self.seed)

    def alignment_noise(
        self,
        qkv: QkvBlocks,
        delta: float,
        trials: int,
        rng: Rng,
        distribution: PerturbationKind = PerturbationKind.UNIFORM_PM_DELTA,
    ) -> BoundReport:
        return check_alignment_noise(
            qkv, delta, trials, rng, cfg=self.fuser.config, distribution=distribution, seed=self.seed,
        )

    def dssi_bound(self, qkv: QkvBlocks, delta: float, trials: int, rng: Rng) -> List[BoundReport]:
        """Three-term bound at the configured kappa.

        Tightness against the vanilla bound and the term-II ratio compare like with
        like only at kappa 1, so they are reported for that kappa alone.
        """
        fuser = self.fuser.with_mode(FusionMode.DSSI)
        kappa = fuser.config.kappa
        seed = self.seed
        spec = PerturbationSpec(delta=delta)
        attn = output_block_attention(qkv, qkv.d)
        strengths = fuser.strengths(attn)
        clean = DssiState(attn=attn, lam=strengths.lambda_star)
        h_clean, _ = fuser.fuse(qkv, attn)
        vanilla_bound = output_perturbation_bound(qkv, delta)

        excess = -math.inf
        worst_total = 0.0
        worst_ratio = 0.0
        for _ in range(trials):
            noisy_attn = _noisy_attention(attn, spec, rng)
            noisy = DssiState(attn=noisy_attn, lam=fuser.strengths(noisy_attn).lambda_star)
            h_noisy, _ = fuser.fuse(qkv, noisy_attn)
            term1, term2, term3 = _row_terms(clean, noisy, qkv, kappa)
            row_diff = np.sqrt(((h_noisy - h_clean) ** 2).sum(axis=1))
            excess = max(excess, float((row_diff - (term1 + term2 + term3)).max()))
            terms = dssi_perturbation_terms(clean, noisy, qkv, kappa)
            worst_total = max(worst_total, terms.total_bound)
            worst_ratio = max(worst_ratio, terms.ratio)

        lam = strengths.lambda_star
        reports = [
            BoundReport.evaluate(
                "dssi_three_term", excess, 0.0, parameter=delta, trials=trials, seed=seed,
                detail=f"kappa={kappa:.6g}; max row (||h~-h|| - (I + II + III))",
            ),
        ]
        if kappa != 1.0:
            return reports
        if 0.05 < lam < 0.95:
            reports.append(BoundReport.evaluate(
                "dssi_vs_vanilla_bound", worst_total, vanilla_bound, parameter=delta, trials=trials, seed=seed,
                detail=f"lambda={lam:.6g}",
            ))
        ratio_of_strengths = strengths.lambda_p / strengths.lambda_s
        if 0.5 <= ratio_of_strengths <= 2.0:
            reports.append(BoundReport.evaluate(
                "dssi_term2_ratio", worst_ratio, 0.05, parameter=delta, trials=trials, seed=seed,
                detail=f"lambda_p/lambda_s={ratio_of_strengths:.6g}",
            ))
        return reports


def check_dssi_bound(
    qkv: QkvBlocks,
    delta: float,
    trials: int,
    rng: Rng,
    cfg: Optional[DssiConfig] = None,
    seed: int = 0,
) -> List[BoundReport]:
    """Three-term bound at ``cfg.kappa``; kappa-1 comparisons only when kappa is 1."""
    return PerturbationAnalyzer(cfg, seed).dssi_bound(qkv, delta, trials, rng)


# ---------------------------------------------------------------------------
# Weight sensitivity
# ---------------------------------------------------------------------------

def prop3_bound(lambda_p: float, lambda_s: float, eps_p: float, eps_s: float) -> float:
    """max(eps_p, eps_s) / (lambda_p + lambda_s)."""
    if lambda_p + lambda_s <= 0:
        raise_invalid_input_error("alignment strengths", "lambda_p + lambda_s must be > 0")
    if eps_p < 0 or eps_s < 0:
        raise_invalid_input_error("eps", "must be >= 0")
    return max(eps_p, eps_s) / (lambda_p + lambda_s)


def _weight(lambda_p, lambda_s):
    return lambda_p / (lambda_p + lambda_s)


def check_prop3(
    lambda_p: float,
    lambda_s: float,
    eps_p: float,
    eps_s: float,
    samples: int,
    rng: Rng,
    seed: int = 0,
) -> BoundReport:
    """|lambda~ - lambda| over the +-eps corners and ``samples`` uniform interior points."""
    bound = prop3_bound(lambda_p, lambda_s, eps_p, eps_s)
    lam = _weight(lambda_p, lambda_s)
    corners = np.array(list(itertools.product((-eps_p, 0.0, eps_p), (-eps_s, 0.0, eps_s))))
    interior = np.column_stack([
        rng.uniform(-eps_p, eps_p, size=samples),
        rng.uniform(-eps_s, eps_s, size=samples),
    ])
    deltas = np.vstack([corners, interior])
    tilde = _weight(lambda_p + deltas[:, 0], lambda_s + deltas[:, 1])
    worst = float(np.abs(tilde - lam).max())
    return BoundReport.evaluate(
        "prop3_weight", worst, bound, parameter=max(eps_p, eps_s), trials=len(deltas), seed=seed,
        detail=f"lambda_p={lambda_p:.6g} lambda_s={lambda_s:.6g}",
    )


def check_alignment_noise(
    qkv: QkvBlocks,
    delta: float,
    trials: int,
    rng: Rng,
    cfg: Optional[DssiConfig] = None,
    distribution: PerturbationKind = PerturbationKind.UNIFORM_PM_DELTA,
    seed: int = 0,
) -> BoundReport:
    """Measured max(eps_p, eps_s) of the alignment strengths against 2 delta."""
    cfg = cfg or DssiConfig()
    spec = PerturbationSpec(delta=delta, distribution=distribution)
    attn = output_block_attention(qkv, qkv.d)
    clean = dssi.alignment_strengths(attn, cfg)
    worst = 0.0
    for _ in range(trials):
        noisy = dssi.alignment_strengths(_noisy_attention(attn, spec, rng), cfg)
        worst = max(worst, abs(noisy.lambda_p - clean.lambda_p), abs(noisy.lambda_s - clean.lambda_s))
    return BoundReport.evaluate(
        "alignment_noise", worst, 2.0 * delta, parameter=delta, trials=trials, seed=seed, detail=distribution.value,
    )
