import pytest
from hypothesis import assume, given, strategies as st

from marsrank.errors import IdentifiabilityError, NumericRangeError, UsageError
from marsrank.laws import CoefficientSet, LawCCoefficients, LawPCoefficients, predict_convergence, predict_loss
from marsrank.search import (
    Candidate,
    SearchConfig,
    SearchResult,
    balanced_ve_rank,
    cost_report,
    generate_candidates,
    mars_search,
    naive_search,
    round_rank,
    search_with_coefficients,
    select_best,
)
from marsrank.simulator import Simulator, oracle_grid, rank_grid, scenario_s1
from marsrank.telemetry import CalibrationDataset, ConvObs, PerfObs, RankPair

from oracles import bisect_balanced_rank, round_half_up_clamp

S1 = scenario_s1()


def law_c_st(module):
    return st.builds(
        lambda k, g, d, E: LawCCoefficients(module, k, g, d, E),
        st.floats(1, 1e4),
        st.floats(-2, -0.05),
        st.floats(0.05, 1.5),
        st.floats(0, 1e3),
    )


# --- balanced rank -------------------------------------------------------------


def test_symmetric_modules_balance_at_identity():
    c = LawCCoefficients("ve", 900, -0.5, 0.5, 60)
    c_llm = LawCCoefficients("llm", 900, -0.5, 0.5, 60)
    for r in (1, 8, 16, 64, 256):
        assert balanced_ve_rank(c, c_llm, r, 4096) == float(r)


def test_huge_offset_falls_back():
    c_ve = LawCCoefficients("ve", 500, -0.6, 0.45, 1e12)
    c_llm = LawCCoefficients("llm", 2000, -0.4, 0.55, 100)
    assert balanced_ve_rank(c_ve, c_llm, 16, 2048) is None


def test_balanced_rank_worked_example():
    c_ve = LawCCoefficients("ve", 500, -0.6, 0.45, 50)
    c_llm = LawCCoefficients("llm", 2000, -0.4, 0.55, 100)
    r = balanced_ve_rank(c_ve, c_llm, 16, 2048)
    t_llm = predict_convergence(c_llm, 16, 2048)
    assert abs(predict_convergence(c_ve, r, 2048) - t_llm) <= 1e-10 * t_llm
    assert r == pytest.approx(bisect_balanced_rank(c_ve, c_llm, 16, 2048), rel=1e-10)


@given(law_c_st("ve"), law_c_st("llm"), st.integers(1, 256), st.floats(64, 1e5))
def test_balance_exactness(c_ve, c_llm, r_llm, d):
    try:
        r = balanced_ve_rank(c_ve, c_llm, r_llm, d)
    except NumericRangeError:
        assume(False)
    oracle = bisect_balanced_rank(c_ve, c_llm, r_llm, d)
    if r is None:
        assert oracle is None
        assert predict_convergence(c_llm, r_llm, d) - c_ve.E <= 0
        return
    t_llm = predict_convergence(c_llm, r_llm, d)
    assert abs(predict_convergence(c_ve, r, d) - t_llm) <= 1e-9 * t_llm
    assert r == pytest.approx(oracle, rel=1e-8)


def test_round_rank_rules():
    assert round_rank(2.5, 1, 256) == (3, False)
    assert round_rank(2.4999, 1, 256) == (2, False)
    assert round_rank(0.3, 1, 256) == (1, True)
    assert round_rank(0.7, 1, 256) == (1, True)
    assert round_rank(300.0, 1, 256) == (256, True)
    assert round_rank(256.0, 1, 256) == (256, False)
    assert round_rank(255.7, 1, 256) == (256, False)


@given(st.floats(1e-3, 1e4), st.integers(1, 16), st.integers(16, 512))
def test_round_rank_matches_oracle(r, r_min, r_max):
    rank, clamped = round_rank(r, r_min, r_max)
    assert rank == round_half_up_clamp(r, r_min, r_max)
    assert clamped == (r < r_min or r > r_max)


# --- candidates ----------------------------------------------------------------


def symmetric_pair():
    return LawCCoefficients("ve", 900, -0.5, 0.5, 60), LawCCoefficients("llm", 900, -0.5, 0.5, 60)


def test_symmetric_candidates_are_diagonal():
    c_ve, c_llm = symmetric_pair()
    cands = generate_candidates(c_ve, c_llm, SearchConfig())
    assert [c.ranks for c in cands] == [RankPair(r, r) for r in (8, 16, 32, 64)]
    assert not any(c.fallback_used for c in cands)


def test_all_fallback():
    c_ve = LawCCoefficients("ve", 500, -0.6, 0.45, 1e12)
    c_llm = LawCCoefficients("llm", 2000, -0.4, 0.55, 100)
    cands = generate_candidates(c_ve, c_llm, SearchConfig())
    assert all(c.fallback_used and c.ranks.r_ve == c.ranks.r_llm for c in cands)
    res = select_best(cands, S1.true_law_p, 8192)
    assert res.fallback_rate == 1.0


def test_s1_candidates_match_bisection_oracle():
    config = SearchConfig()
    cands = generate_candidates(S1.true_law_c_ve, S1.true_law_c_llm, config)
    assert len(cands) == len(config.r_options)
    for c, r_llm in zip(cands, config.r_options):
        r_star = bisect_balanced_rank(S1.true_law_c_ve, S1.true_law_c_llm, r_llm, config.d_target)
        assert c.ranks.r_llm == r_llm
        assert c.r_ve_continuous == pytest.approx(r_star, rel=1e-8)
        assert c.ranks.r_ve == round_half_up_clamp(r_star, config.r_min, config.r_max)
        assert c.predicted_t_llm == pytest.approx(predict_convergence(S1.true_law_c_llm, r_llm, 8192))


@given(law_c_st("ve"), law_c_st("llm"), st.floats(64, 1e5))
def test_rounding_gap_within_lipschitz_bound(c_ve, c_llm, d):
    try:
        cands = generate_candidates(c_ve, c_llm, SearchConfig(d_target=d))
    except NumericRangeError:
        assume(False)
    for c in cands:
        if c.fallback_used or c.clamped:
            continue
        r = c.r_ve_continuous
        # |dt/dr| = k |g| r^(g-1) D^d is largest at the left end of the interval
        left = max(r - 0.5, 1e-12)
        lip = c_ve.k * abs(c_ve.gamma) * left ** (c_ve.gamma - 1) * d**c_ve.delta
        t_star = predict_convergence(c_ve, r, d)
        assert abs(c.predicted_t_ve - t_star) <= lip * abs(c.ranks.r_ve - r) * (1 + 1e-9) + 1e-9 * t_star


@given(law_c_st("ve"), law_c_st("llm"))
def test_fallback_closure(c_ve, c_llm):
    try:
        cands = generate_candidates(c_ve, c_llm, SearchConfig())
    except NumericRangeError:
        assume(False)
    for c in cands:
        if c.fallback_used:
            assert c.ranks.r_ve == c.ranks.r_llm and c.r_ve_continuous is None


def test_r_options_generality_grid():
    cands = generate_candidates(S1.true_law_c_ve, S1.true_law_c_llm, SearchConfig(r_options=(32, 48, 64)))
    assert [c.ranks.r_llm for c in cands] == [32, 48, 64]


def test_search_config_validation():
    with pytest.raises(UsageError):
        SearchConfig(r_options=())
    with pytest.raises(UsageError):
        SearchConfig(r_options=(16, 8))
    with pytest.raises(UsageError):
        SearchConfig(r_options=(8, 512))
    with pytest.raises(UsageError):
        SearchConfig(d_target=0)


# --- selection -----------------------------------------------------------------


def diag_candidates():
    return [Candidate(RankPair(r, r), float(r), False, 100.0, 100.0) for r in (8, 16, 32, 64)]


def test_select_best_worked_example():
    c_p = LawPCoefficients(10, 0.2, 0.2, 0.3, 1.5)
    res = select_best(diag_candidates(), c_p, 8192)
    losses = {c.ranks: 10 / (c.ranks.r_ve**0.2 * c.ranks.r_llm**0.2 * 8192**0.3) + 1.5 for c in res.candidates}
    assert res.chosen == min(losses, key=losses.get) == RankPair(64, 64)
    assert res.chosen_predicted_loss == pytest.approx(losses[RankPair(64, 64)], rel=1e-12)


def test_select_best_singleton():
    cand = [Candidate(RankPair(3, 8), 3.2, False, 10.0, 10.0)]
    assert select_best(cand, S1.true_law_p, 1024).chosen == RankPair(3, 8)


def test_select_best_ties_prefer_cheaper():
    flat = LawPCoefficients(2, 0, 0, 0, 1)
    cands = [Candidate(RankPair(r_ve, r_llm), None, False, 1.0, 1.0) for r_llm, r_ve in [(32, 4), (16, 9), (16, 2)]]
    assert select_best(cands, flat, 1024).chosen == RankPair(2, 16)


@given(st.floats(0, 50), st.floats(0.01, 100))
def test_selection_invariant_under_increasing_transforms(shift, scale):
    base = LawPCoefficients(12, 0.08, 0.22, 0.28, 1.6)
    # scaling A and E together by c, then adding a shift, is an increasing map of the loss
    moved = LawPCoefficients(12 * scale, 0.08, 0.22, 0.28, 1.6 * scale + shift)
    cands = generate_candidates(S1.true_law_c_ve, S1.true_law_c_llm, SearchConfig())
    assert select_best(cands, base, 8192).chosen == select_best(cands, moved, 8192).chosen


def test_search_result_round_trip():
    res = search_with_coefficients(
        CoefficientSet(S1.true_law_p, S1.true_law_c_ve, S1.true_law_c_llm), SearchConfig()
    )
    back = SearchResult.from_json(res.to_json())
    assert back == res
    assert back.cost == res.cost
    assert res.cost["mars_candidates"] == 4 and res.cost["naive_runs"] == 16


# --- end to end ----------------------------------------------------------------


def law_dataset(c_p, c_ve, c_llm, ranks=(8, 16, 32, 64), sizes=(512, 1024, 2048, 4096)):
    perf = tuple(
        PerfObs(RankPair(rv, rl), d, predict_loss(c_p, RankPair(rv, rl), d)) for rv in ranks for rl in ranks for d in sizes
    )
    conv = {
        m: tuple(ConvObs(r, d, predict_convergence(c, r, d)) for r in ranks for d in sizes)
        for m, c in (("ve", c_ve), ("llm", c_llm))
    }
    return CalibrationDataset(perf, conv["ve"], conv["llm"])


def test_mars_symmetric_dataset_gives_diagonal_choice():
    c_ve, c_llm = symmetric_pair()
    res, reports = mars_search(law_dataset(S1.true_law_p, c_ve, c_llm))
    assert res.chosen.r_ve == res.chosen.r_llm
    assert set(reports) == {"law_c_ve", "law_c_llm", "law_p"}


def test_mars_s1_noiseless_matches_truth_search():
    res, _ = mars_search(law_dataset(S1.true_law_p, S1.true_law_c_ve, S1.true_law_c_llm))
    truth = search_with_coefficients(CoefficientSet(S1.true_law_p, S1.true_law_c_ve, S1.true_law_c_llm), SearchConfig())
    assert res.chosen == truth.chosen
    _, table = oracle_grid(S1, rank_grid((8, 16, 32, 64)), 8192)
    oracle_best = min(r.true_perplexity for r in table)
    assert Simulator(S1).true_perplexity(res.chosen, 8192) <= 1.02 * oracle_best


def test_mars_identifiability_is_staged():
    ds = law_dataset(S1.true_law_p, S1.true_law_c_ve, S1.true_law_c_llm)
    single = CalibrationDataset(tuple(o for o in ds.perf_obs if o.ranks.r_llm == 16), ds.conv_obs_ve, ds.conv_obs_llm)
    with pytest.raises(IdentifiabilityError, match=r"\[law_p\]"):
        mars_search(single)


def test_naive_search_singleton_and_full_grid():
    sim = Simulator(S1)
    best, cost = naive_search(sim, [RankPair(8, 8)], 1024)
    assert best == RankPair(8, 8)
    assert cost == {"naive_runs": 1, "naive_steps": float(sim.run(RankPair(8, 8), 1024).steps_run)}
    grid = rank_grid((8, 16, 32, 64))
    best, cost = naive_search(sim, grid, 8192)
    assert cost["naive_runs"] == 16
    assert cost["naive_steps"] == sum(sim.run(p, 8192).steps_run for p in grid)
    assert best == oracle_grid(S1, grid, 8192)[0]


# --- cost ----------------------------------------------------------------------


def test_cost_arithmetic():
    r = cost_report(16.0, [1.0, 1.0, 1.0, 1.0], 1.0)
    assert r.mars_calibration_steps == 4.0 and r.speedup == pytest.approx(3.2)
    r = cost_report(16.0, [1.0, 1.0, 1.0, 1.0], 1.0, shared_backbone=True, parallel_heads=4)
    assert r.mars_calibration_steps == 1.0 and r.speedup == pytest.approx(8.0)
    assert r.shared_backbone_mode


@given(st.floats(1, 1e9), st.lists(st.floats(1, 1e7), min_size=1, max_size=10), st.floats(1, 1e7), st.booleans(),
       st.integers(1, 8))
def test_cost_invariant(naive, plan, final, shared, heads):
    r = cost_report(naive, plan, final, shared_backbone=shared, parallel_heads=heads)
    assert r.speedup == pytest.approx(r.naive_steps / (r.mars_calibration_steps + r.mars_final_steps))
    assert r.speedup > 0


def test_cost_rejects_non_positive_steps():
    with pytest.raises(ValueError):
        cost_report(0.0, [1.0], 1.0)
    with pytest.raises(ValueError):
        cost_report(1.0, [1.0], 0.0)
