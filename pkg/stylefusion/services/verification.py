"""Proposition suite: every numerical claim about branch dominance, perturbation and the DSSI weight."""
import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Tuple

import numpy as np

from ..models.config import DssiConfig, PerturbationKind, VerificationConfig
from ..models.reports import BoundReport, BranchStats, PerturbationSpec
from ..models.tensors import QkvBlocks
from ..utils.linalg import Rng, make_rng
from . import analysis, dssi

logger = logging.getLogger(__name__)

Cell = Callable[[Rng], List[BoundReport]]

_PROP2_ROWS = 8
_PROP3_PAIRS = 10
_SMALL_COUNTS = (8, 16, 16)
_BALANCED_COUNTS = (64, 64, 64)
_QKV_WIDTH = 16


def random_qkv(counts: Tuple[int, int, int], d: int, rng: Rng) -> QkvBlocks:
    """Standard-normal queries, keys and values for a (N_p, N_s, N_o) instance."""
    n_p, n_s, n_o = counts

    def draw(n: int) -> np.ndarray:
        return rng.standard_normal((n, d))

    return QkvBlocks(
        Q_p=draw(n_p), Q_s=draw(n_s), Q_o=draw(n_o),
        K_p=draw(n_p), K_s=draw(n_s), K_o=draw(n_o),
        V_p=draw(n_p), V_s=draw(n_s), V_o=draw(n_o),
    )


class PropositionSuite:
    """Runs every bound check as an independent cell with its own child stream.

    Cell ``k`` draws from ``make_rng(seed, k)`` so reports are identical for
    any thread count.
    """

    def __init__(self, config: VerificationConfig, seed: int, threads: int = 1):
        self.config = config
        self.seed = seed
        self.threads = threads

    def _prop1_cells(self) -> List[Cell]:
        cfg = self.config
        cells = []
        for sigma, mu_p, mu_s, n in itertools.product(cfg.prop1_sigmas, cfg.prop1_means, cfg.prop1_means, cfg.prop1_counts):
            stats = BranchStats(N_p=n, N_s=n, N_o=n, mu_p=mu_p, mu_s=mu_s, mu_o=0.0, sigma=sigma)
            cells.append(lambda rng, stats=stats: [
                analysis.check_prop1(stats, cfg.prop1_trials, rng, rows=1, seed=self.seed),
            ])
        return cells

    def _prop2_cells(self) -> List[Cell]:
        cfg = self.config
        grid = list(itertools.product(cfg.prop2_deltas, cfg.prop2_widths, PerturbationKind))
        trials = max(1, cfg.prop2_trials // max(len(grid), 1))
        cells = []
        for delta, width, kind in grid:
            def cell(rng, delta=delta, width=width, kind=kind):
                spec = PerturbationSpec(delta=delta, distribution=kind)
                return [analysis.check_prop2_fresh(_PROP2_ROWS, width, spec, trials, rng, seed=self.seed)]
            cells.append(cell)
        for delta in cfg.prop2_deltas:
            cells.append(lambda rng, delta=delta: [BoundReport.evaluate(
                "prop2_two_point", analysis.worst_case_tv_two_point(delta), analysis.prop2_bound(delta).tv_bound,
                parameter=delta, seed=self.seed, detail="sup over logit gaps in [-10, 10]",
            )])
        return cells

    def _prop3_cells(self) -> List[Cell]:
        def cell(rng):
            lambda_p, lambda_s = rng.uniform(0.5, 5.0, size=2)
            eps = 0.5 * min(lambda_p, lambda_s)
            return [analysis.check_prop3(
                float(lambda_p), float(lambda_s), eps, eps, self.config.prop3_samples, rng, seed=self.seed,
            )]
        return [cell] * _PROP3_PAIRS

    def _alignment_cells(self) -> List[Cell]:
        cfg = self.config
        cells = []
        for delta, kind in itertools.product(cfg.alignment_deltas, PerturbationKind):
            cells.append(lambda rng, delta=delta, kind=kind: [analysis.PerturbationAnalyzer(seed=self.seed).alignment_noise(
                random_qkv(_SMALL_COUNTS, _QKV_WIDTH, rng), delta, cfg.alignment_trials, rng, distribution=kind,
            )])
        return cells

    def _output_cells(self) -> List[Cell]:
        cfg = self.config
        cells = []
        for kind in PerturbationKind:
            cells.append(lambda rng, kind=kind: [analysis.PerturbationAnalyzer(seed=self.seed).output_bound(
                random_qkv(_SMALL_COUNTS, _QKV_WIDTH, rng), cfg.output_bound_delta, cfg.output_bound_trials, rng,
                distribution=kind,
            )])
        # vanilla-bound comparisons only exist at kappa 1
        for kappa in (1.0, DssiConfig().kappa):
            cells.append(lambda rng, kappa=kappa: analysis.PerturbationAnalyzer(DssiConfig(kappa=kappa), self.seed).dssi_bound(
                random_qkv(_BALANCED_COUNTS, _QKV_WIDTH, rng), cfg.output_bound_delta, cfg.output_bound_trials, rng,
            ))
        return cells

    def _lambda_cells(self) -> List[Cell]:
        return [self._lambda_optimality]

    def _lambda_optimality(self, rng: Rng) -> List[BoundReport]:
        cfg = self.config
        step = cfg.lambda_grid_step
        h = 1e-3
        worst_gap = 0.0
        worst_argmin = 0.0
        worst_curvature = 0.0
        for _ in range(cfg.lambda_draws):
            s = rng.standard_normal((4, 3))
            t = rng.standard_normal((4, 3))
            gamma = float(rng.uniform(0.0, 10.0))
            distance = float(np.sum((s - t) ** 2))
            lam = dssi.lambda_star(gamma)
            grid_lam, grid_min = dssi.loss_grid_search(s, t, gamma, step)
            worst_gap = max(worst_gap, (dssi.dssi_loss(lam, s, t, gamma) - grid_min) / distance)
            worst_argmin = max(worst_argmin, abs(lam - grid_lam))
            at = min(max(lam, h), 1.0 - h)
            expected = 2.0 * distance * (1.0 + gamma)
            curvature = dssi.loss_second_difference(at, s, t, gamma, h)
            worst_curvature = max(worst_curvature, abs(curvature - expected) / expected)
        draws = cfg.lambda_draws
        return [
            BoundReport.evaluate(
                "lambda_star_optimality", worst_gap, 1e-9, trials=draws, seed=self.seed,
                detail="(L(lambda*) - grid min) / ||s - t||^2",
            ),
            BoundReport.evaluate(
                "lambda_star_argmin", worst_argmin, step, parameter=step, trials=draws, seed=self.seed,
                detail="|lambda* - grid argmin|",
            ),
            BoundReport.evaluate(
                "loss_convexity", worst_curvature, 1e-6, trials=draws, seed=self.seed,
                detail="relative error of the second difference against 2 D (1 + gamma)",
            ),
        ]

    def cells(self) -> List[Cell]:
        return (
            self._prop1_cells()
            + self._prop2_cells()
            + self._prop3_cells()
            + self._alignment_cells()
            + self._output_cells()
            + self._lambda_cells()
        )

    def run(self) -> List[BoundReport]:
        cells = self.cells()
        jobs = [(cell, make_rng(self.seed, k)) for k, cell in enumerate(cells)]
        if self.threads == 1:
            results = [cell(rng) for cell, rng in jobs]
        else:
            with ThreadPoolExecutor(max_workers=self.threads or None) as pool:
                results = list(pool.map(lambda job: job[0](job[1]), jobs))
        reports = [report for batch in results for report in batch]
        failed = [r.check_name for r in reports if not r.satisfied]
        logger.info("verify-propositions: %d checks, %d violated", len(reports), len(failed))
        if failed:
            logger.warning("violated checks: %s", sorted(set(failed)))
        return reports
