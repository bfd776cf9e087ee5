import math

import numpy as np
import pytest

from stylefusion.core.exceptions import InvalidInputError, ShapeError
from stylefusion.models.config import DssiConfig, FusionMode, PerturbationKind
from stylefusion.models.reports import BoundReport, BranchStats, PerturbationSpec
from stylefusion.models.tensors import QkvBlocks
from stylefusion.services import dssi
from stylefusion.services.analysis import (
    DssiState, PerturbationAnalyzer, check_alignment_noise, check_dssi_bound, check_output_bound, check_prop1,
    check_prop2, check_prop2_fresh, check_prop3, dssi_perturbation_terms, output_perturbation_bound, perturb_logits,
    prop1_empirical_mass, prop1_predicted_mass, prop2_bound, prop3_bound, tv_distance, worst_case_tv_two_point,
)
from stylefusion.services.attention import output_block_attention, split_output_attention
from stylefusion.services.verification import random_qkv
from stylefusion.utils.linalg import make_rng


def test_predicted_mass_examples():
    """Symmetric 1/3, ln 2 shift gives 1/2, a +10 gap exceeds 0.9999."""
    assert prop1_predicted_mass(BranchStats(N_p=4, N_s=4, N_o=4)) == pytest.approx(1 / 3)
    assert prop1_predicted_mass(BranchStats(N_p=4, N_s=4, N_o=4, mu_s=math.log(2.0))) == pytest.approx(0.5)
    assert prop1_predicted_mass(BranchStats(N_p=4, N_s=4, N_o=4, mu_s=10.0)) > 0.9999


def test_predicted_mass_survives_large_means():
    """Means of 1000 do not overflow."""
    assert prop1_predicted_mass(BranchStats(N_p=1, N_s=1, N_o=2, mu_p=1000, mu_s=1000, mu_o=1000)) == pytest.approx(0.25)


def test_noise_free_empirical_equals_predicted(rng):
    """sigma 0 makes every trial identical to the formula."""
    stats = BranchStats(N_p=3, N_s=5, N_o=2, mu_p=0.3, mu_s=-0.2, mu_o=1.0, sigma=0.0)
    estimate = prop1_empirical_mass(stats, 10, rng)
    assert estimate.mean == pytest.approx(prop1_predicted_mass(stats), abs=1e-14)
    assert estimate.std_err == pytest.approx(0.0, abs=1e-15)


def test_empirical_mass_close_at_small_sigma():
    """sigma 0.1 on 16 tokens per branch agrees within 3e-3."""
    stats = BranchStats(N_p=16, N_s=16, N_o=16, mu_s=1.0, sigma=0.1)
    estimate = prop1_empirical_mass(stats, 10_000, make_rng(11), rows=1)
    assert abs(estimate.mean - prop1_predicted_mass(stats)) < 3e-3


def test_check_prop1_passes_on_grid_corner():
    """A Proposition 1 cell at sigma 0.2 is satisfied."""
    stats = BranchStats(N_p=4, N_s=4, N_o=4, mu_p=3.0, mu_s=-3.0, sigma=0.2)
    report = check_prop1(stats, 2_000, make_rng(5), rows=1)
    assert report.satisfied
    assert report.check_name == "prop1_branch_mass"


def test_perturbation_contracts(rng):
    """delta 0 is the identity, uniform stays in the box, sign gives two values on constant rows."""
    z = rng.standard_normal((4, 6))
    assert np.array_equal(perturb_logits(z, PerturbationSpec(delta=0.0), rng), z)
    noisy = perturb_logits(z, PerturbationSpec(delta=0.5), rng)
    assert np.abs(noisy - z).max() <= 0.5
    signed = perturb_logits(np.zeros((3, 5)), PerturbationSpec(delta=0.2, distribution=PerturbationKind.SIGN_DELTA), rng)
    assert set(np.unique(signed)) <= {-0.2, 0.2}
    assert len(np.unique(signed)) == 2


def test_adversarial_push_targets_row_max(rng):
    """The argmax gains delta and every other logit loses delta."""
    z = np.array([[0.0, 2.0, 1.0]])
    pushed = perturb_logits(z, PerturbationSpec(delta=0.3, distribution=PerturbationKind.ADVERSARIAL_ROWMAX), rng)
    assert np.allclose(pushed, [[-0.3, 2.3, 0.7]])


def test_tv_distance_examples():
    """Equal rows 0, disjoint rows 1, hand value 0.25."""
    assert tv_distance([[0.5, 0.5]], [[0.5, 0.5]])[0] == 0.0
    assert tv_distance([[1.0, 0.0]], [[0.0, 1.0]])[0] == 1.0
    assert tv_distance([[0.5, 0.5]], [[0.75, 0.25]])[0] == pytest.approx(0.25)


def test_tv_distance_rejects_bad_rows():
    """Rows that do not sum to 1 and mismatched shapes are rejected."""
    with pytest.raises(InvalidInputError):
        tv_distance([[0.5, 0.6]], [[0.5, 0.5]])
    with pytest.raises(ShapeError):
        tv_distance([[1.0, 0.0]], [[1.0, 0.0, 0.0]])


def test_prop2_bound_values():
    """Zero at delta 0, 1 - e^-0.2 at 0.1, near 4 delta at 0.01."""
    zero = prop2_bound(0.0)
    assert zero.tv_bound == zero.l1_bound == zero.small_delta_asymptote == 0.0
    assert prop2_bound(0.1).tv_bound == pytest.approx(0.181269, abs=1e-6)
    small = prop2_bound(0.01)
    assert abs(small.l1_bound - 0.04) / 0.04 < 0.01
    with pytest.raises(InvalidInputError):
        prop2_bound(-1.0)


@pytest.mark.parametrize("delta", [0.01, 0.1, 0.3, 1.0, 2.0])
def test_two_point_search_stays_under_bound(delta):
    """The worst 2-logit TV found by search never beats the closed form."""
    assert worst_case_tv_two_point(delta) <= prop2_bound(delta).tv_bound


def test_check_prop2_zero_delta(rng):
    """delta 0 reports zero change."""
    report = check_prop2(rng.standard_normal((3, 4)), PerturbationSpec(delta=0.0), 50, rng)
    assert report.empirical == pytest.approx(0.0, abs=1e-15) and report.satisfied


def test_check_prop2_uniform_has_slack():
    """64x64 Gaussian logits at delta 0.3 stay strictly under the bound."""
    rng = make_rng(21)
    report = check_prop2(rng.standard_normal((64, 64)), PerturbationSpec(delta=0.3), 500, rng)
    assert report.satisfied and report.slack > 0


def test_adversarial_two_column_case(rng):
    """[0, 0] pushed by delta 2 moves TV to tanh(2) / 2, under 1 - e^-4."""
    spec = PerturbationSpec(delta=2.0, distribution=PerturbationKind.ADVERSARIAL_ROWMAX)
    report = check_prop2(np.zeros((1, 2)), spec, 3, rng)
    assert report.empirical == pytest.approx(math.tanh(2.0) / 2.0, abs=1e-12)
    assert report.bound == pytest.approx(1.0 - math.exp(-4.0))
    assert report.satisfied


@pytest.mark.parametrize("kind", list(PerturbationKind))
def test_prop2_holds_across_widths(kind):
    """No distribution breaks the TV bound on widths 2 to 512."""
    rng = make_rng(99)
    for width in (2, 8, 64, 512):
        z = 2.0 * rng.standard_normal((4, width))
        assert check_prop2(z, PerturbationSpec(delta=1.0, distribution=kind), 20, rng).satisfied


@pytest.mark.parametrize("kind", list(PerturbationKind))
def test_prop2_fresh_logits_hold_and_vary(kind):
    """Each trial draws new logits; the bound holds and the worst case differs from any single Z."""
    spec = PerturbationSpec(delta=1.0, distribution=kind)
    fresh = check_prop2_fresh(8, 8, spec, 200, make_rng(31))
    assert fresh.satisfied and fresh.trials == 200
    assert "fresh Z" in fresh.detail
    assert fresh.empirical == check_prop2_fresh(8, 8, spec, 200, make_rng(31)).empirical
    fixed_rng = make_rng(31)
    fixed = check_prop2(2.0 * fixed_rng.standard_normal((8, 8)), spec, 200, fixed_rng)
    assert fresh.empirical != fixed.empirical


def test_prop2_fresh_zero_scale_matches_fixed_zero_logits(rng):
    """scale 0 draws all-zero logits, the two-column adversarial case."""
    spec = PerturbationSpec(delta=2.0, distribution=PerturbationKind.ADVERSARIAL_ROWMAX)
    report = check_prop2_fresh(1, 2, spec, 5, rng, scale=0.0)
    assert report.empirical == pytest.approx(math.tanh(2.0) / 2.0, abs=1e-12)
    with pytest.raises(InvalidInputError):
        check_prop2_fresh(0, 2, spec, 5, rng)


def test_output_bound_examples():
    """delta 0 gives 0; unit rows at delta 0.1 give 6 (1 - e^-0.2)."""
    unit = np.eye(3)[:2]
    qkv = QkvBlocks(Q_p=unit, Q_s=unit, Q_o=unit, K_p=unit, K_s=unit, K_o=unit, V_p=unit, V_s=unit, V_o=unit)
    assert output_perturbation_bound(qkv, 0.0) == 0.0
    assert output_perturbation_bound(qkv, 0.1) == pytest.approx(6.0 * (1.0 - math.exp(-0.2)))
    assert output_perturbation_bound(qkv, 0.1) == pytest.approx(1.0876, abs=1e-4)


@pytest.mark.parametrize("kind", list(PerturbationKind))
def test_check_output_bound(kind, small_qkv):
    """Row-wise output changes stay under the bound."""
    report = check_output_bound(small_qkv, 0.1, 300, make_rng(4), distribution=kind)
    assert report.satisfied


def _state(attn, cfg):
    return DssiState(attn=attn, lam=dssi.alignment_strengths(attn, cfg).lambda_star)


def test_zero_perturbation_terms_vanish(small_qkv):
    """Identical clean and noisy attention give zero terms."""
    cfg = DssiConfig()
    state = _state(output_block_attention(small_qkv, small_qkv.d), cfg)
    terms = dssi_perturbation_terms(state, state, small_qkv)
    assert terms.term1 == terms.term2 == terms.term3 == terms.total_bound == 0.0


def test_terms_reject_shape_mismatch(small_qkv):
    """Clean and noisy attention must share a shape."""
    cfg = DssiConfig()
    clean = _state(output_block_attention(small_qkv, small_qkv.d), cfg)
    other_qkv = random_qkv((4, 6, 3), small_qkv.d, make_rng(0))
    other = _state(output_block_attention(other_qkv, other_qkv.d), cfg)
    with pytest.raises(ShapeError):
        dssi_perturbation_terms(clean, other, small_qkv)


def test_balanced_dssi_bound_reports():
    """On a balanced instance at kappa 1 all three DSSI reports hold."""
    qkv = random_qkv((64, 64, 64), 16, make_rng(17))
    reports = check_dssi_bound(qkv, 0.1, 200, make_rng(18), cfg=DssiConfig(kappa=1.0))
    names = {r.check_name for r in reports}
    assert names == {"dssi_three_term", "dssi_vs_vanilla_bound", "dssi_term2_ratio"}
    assert all(r.satisfied for r in reports)


@pytest.mark.parametrize("kappa", [0.5, 2.3, 3.0])
def test_dssi_bound_uses_configured_kappa(kappa):
    """The three-term bound holds at the configured kappa; kappa-1 comparisons are skipped."""
    qkv = random_qkv((64, 64, 64), 16, make_rng(17))
    reports = check_dssi_bound(qkv, 0.1, 100, make_rng(18), cfg=DssiConfig(kappa=kappa))
    assert [r.check_name for r in reports] == ["dssi_three_term"]
    assert reports[0].satisfied
    assert reports[0].detail.startswith(f"kappa={kappa:.6g};")


def test_dssi_bound_terms_scale_with_kappa():
    """Terms I and II scale linearly in kappa, term III does not."""
    qkv = random_qkv((16, 16, 16), 8, make_rng(4))
    attn = output_block_attention(qkv, qkv.d)
    cfg = DssiConfig()
    noisy_logits = perturb_logits(attn.logits_Z, PerturbationSpec(delta=0.2), make_rng(5))
    clean, noisy = _state(attn, cfg), _state(split_output_attention(noisy_logits, (16, 16, 16)), cfg)
    one = dssi_perturbation_terms(clean, noisy, qkv, 1.0)
    two = dssi_perturbation_terms(clean, noisy, qkv, 2.0)
    assert two.term1 == pytest.approx(2.0 * one.term1)
    assert two.term2 == pytest.approx(2.0 * one.term2)
    assert two.term3 == one.term3 > 0.0


def test_prop3_examples():
    """Zero eps gives 0; lambda 1, 1 at eps 0.1 is tight at 0.05."""
    assert prop3_bound(1.0, 2.0, 0.0, 0.0) == 0.0
    assert prop3_bound(1.0, 1.0, 0.1, 0.1) == pytest.approx(0.05)
    report = check_prop3(1.0, 1.0, 0.1, 0.1, 1_000, make_rng(1))
    assert report.empirical == pytest.approx(0.05, abs=1e-12)
    assert report.satisfied
    with pytest.raises(InvalidInputError):
        prop3_bound(0.0, 0.0, 0.1, 0.1)


def test_prop3_random_strengths():
    """Random strengths with eps half the smaller one stay within the bound."""
    rng = make_rng(8)
    for _ in range(20):
        lambda_p, lambda_s = rng.uniform(0.5, 5.0, size=2)
        eps = 0.5 * min(lambda_p, lambda_s)
        assert check_prop3(lambda_p, lambda_s, eps, eps, 500, rng).satisfied


@pytest.mark.parametrize("delta", [0.05, 0.1, 0.3])
def test_alignment_noise_within_two_delta(delta, small_qkv):
    """Logit noise moves each alignment strength by at most 2 delta."""
    for kind in PerturbationKind:
        report = check_alignment_noise(small_qkv, delta, 200, make_rng(6), distribution=kind)
        assert report.satisfied
        assert report.bound == pytest.approx(2.0 * delta)


def test_bound_report_evaluate():
    """satisfied and slack follow from the two values with tolerance."""
    report = BoundReport.evaluate("x", 1.0 + 1e-13, 1.0)
    assert report.satisfied and report.slack == pytest.approx(-1e-13, abs=1e-15)
    assert not BoundReport.evaluate("x", 1.1, 1.0).satisfied


def test_analyzer_matches_module_checks():
    qkv = random_qkv((8, 8, 8), 4, make_rng(21))
    analyzer = PerturbationAnalyzer(DssiConfig(kappa=1.0), seed=4)
    ours = analyzer.dssi_bound(qkv, 0.2, 30, make_rng(22))
    theirs = check_dssi_bound(qkv, 0.2, 30, make_rng(22), cfg=DssiConfig(kappa=1.0), seed=4)
    assert [r.model_dump() for r in ours] == [r.model_dump() for r in theirs]
    assert analyzer.output_bound(qkv, 0.2, 30, make_rng(23)).model_dump() == \
        check_output_bound(qkv, 0.2, 30, make_rng(23), seed=4).model_dump()


def test_analyzer_forces_dynamic_fusion_for_the_dssi_bound():
    """A vanilla-configured analyzer still bounds the dynamic output."""
    qkv = random_qkv((8, 8, 8), 4, make_rng(21))
    vanilla = PerturbationAnalyzer(DssiConfig(kappa=1.0, mode=FusionMode.VANILLA))
    dynamic = PerturbationAnalyzer(DssiConfig(kappa=1.0))
    assert [r.model_dump() for r in vanilla.dssi_bound(qkv, 0.2, 30, make_rng(22))] == \
        [r.model_dump() for r in dynamic.dssi_bound(qkv, 0.2, 30, make_rng(22))]
