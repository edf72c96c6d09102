"""Survival math against independent brute-force oracles."""

import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from knowsurv.survival import (
    BinScheme,
    HazardCurve,
    SurvivalLabel,
    UndefinedMetricError,
    bin_times,
    concordance_index,
    kaplan_meier,
    log_rank_test,
    nll_surv_loss,
    nll_surv_loss_and_grad,
    risk_score,
    sigmoid,
    survival_from_hazard,
)
from conftest import assert_grads_close, fd_gradient, random_labels


# ---------------------------------------------------------------- oracles


def loop_survival(hazards):
    out = []
    acc = 1.0
    for h in hazards:
        acc = acc * (1.0 - h)
        out.append(acc)
    return np.array(out)


def formula_nll(logit_rows, labels, clamp=1e-7):
    """Term-by-term scalar evaluation of the loss formula."""
    total = 0.0
    for logits, lab in zip(logit_rows, labels):
        h = [1.0 / (1.0 + math.exp(-z)) for z in logits]
        s = loop_survival(h)
        t, c = lab.event_bin, lab.censorship
        s_prev = 1.0 if t == 0 else s[t - 1]
        if c == 1:
            total -= math.log(max(s[t], clamp))
        else:
            total -= math.log(max(s_prev, clamp)) + math.log(max(h[t], clamp))
    return total


def pairwise_cindex(risks, labels):
    """O(N^2) enumeration with the documented admissibility/tie rules."""
    num = 0.0
    pairs = 0
    n = len(risks)
    for i in range(n):
        for j in range(n):
            if labels[i].censorship == 0 and labels[i].raw_time < labels[j].raw_time:
                pairs += 1
                if risks[i] > risks[j]:
                    num += 1.0
                elif risks[i] == risks[j]:
                    num += 0.5
    if pairs == 0:
        raise ZeroDivisionError
    return num / pairs


def event_table_logrank(labels_a, labels_b):
    """Observed/expected/variance accumulation over pooled event times."""
    times_a = [(l.raw_time, l.censorship == 0) for l in labels_a]
    times_b = [(l.raw_time, l.censorship == 0) for l in labels_b]
    event_times = sorted({t for t, e in times_a + times_b if e})
    o_minus_e = 0.0
    var = 0.0
    for tau in event_times:
        n_a = sum(1 for t, _ in times_a if t >= tau)
        n_b = sum(1 for t, _ in times_b if t >= tau)
        d_a = sum(1 for t, e in times_a if e and t == tau)
        d_b = sum(1 for t, e in times_b if e and t == tau)
        n, d = n_a + n_b, d_a + d_b
        o_minus_e += d_a - d * n_a / n
        if n > 1:
            var += d * (n_a / n) * (n_b / n) * (n - d) / (n - 1)
    chi2 = o_minus_e**2 / var
    return chi2, math.erfc(math.sqrt(chi2 / 2.0))


# ------------------------------------------------------ survival_from_hazard


def test_zero_hazard_certain_survival():
    assert np.allclose(survival_from_hazard([0, 0, 0, 0]), [1, 1, 1, 1])


def test_direct_product():
    assert np.allclose(survival_from_hazard([0.5, 0.5]), [0.5, 0.25])


def test_survival_matches_loop_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        h = rng.random(8)
        assert np.max(np.abs(survival_from_hazard(h) - loop_survival(h))) < 1e-12


def test_survival_rejects_bad_input():
    with pytest.raises(ValueError):
        survival_from_hazard([])
    with pytest.raises(ValueError):
        survival_from_hazard([0.5, 1.2])
    with pytest.raises(ValueError):
        survival_from_hazard([-0.1])


@given(st.lists(st.floats(0, 1), min_size=1, max_size=16))
def test_survival_monotone_bounded(h):
    s = survival_from_hazard(h)
    assert np.all(s >= 0) and np.all(s <= 1)
    assert np.all(np.diff(s) <= 1e-15)


# ------------------------------------------------------------- nll_surv_loss


def test_censored_zero_hazard_zero_loss():
    logits = np.full((1, 4), -40.0)  # hazards ~ 0
    lab = SurvivalLabel(event_bin=2, censorship=1, raw_time=1.0)
    assert nll_surv_loss(logits, [lab]) < 1e-12


def test_uncensored_certain_event_zero_loss():
    # h(t) = 1 at the event bin, 0 before: logits +/- large
    logits = np.array([[-40.0, -40.0, 40.0, -40.0]])
    lab = SurvivalLabel(event_bin=2, censorship=0, raw_time=1.0)
    assert nll_surv_loss(logits, [lab]) < 1e-12


def test_nll_matches_formula_oracle():
    rng = np.random.default_rng(2)
    for _ in range(20):
        logits = rng.standard_normal((10, 4)) * 2
        labels = random_labels(rng, 10, T=4)
        ours = nll_surv_loss(logits, labels)
        ref = formula_nll(logits, labels)
        assert abs(ours - ref) < 1e-6


def test_nll_batch_permutation_invariant():
    rng = np.random.default_rng(3)
    logits = rng.standard_normal((8, 4))
    labels = random_labels(rng, 8)
    perm = rng.permutation(8)
    a = nll_surv_loss(logits, labels)
    b = nll_surv_loss(logits[perm], [labels[i] for i in perm])
    assert abs(a - b) < 1e-12


def test_nll_gradient_matches_fd():
    rng = np.random.default_rng(4)
    for trial in range(25):
        logits = rng.standard_normal((3, 5)) * 2
        labels = random_labels(rng, 3, T=5)
        _, grad = nll_surv_loss_and_grad(logits, labels)
        fd = fd_gradient(lambda: nll_surv_loss_and_grad(logits, labels)[0], logits)
        assert_grads_close(grad, fd, context=f"nll trial {trial}")


def test_nll_rejects_bad_batches():
    lab = SurvivalLabel(event_bin=5, censorship=0, raw_time=1.0)
    with pytest.raises(ValueError):
        nll_surv_loss(np.zeros((1, 4)), [lab])  # event_bin out of range
    with pytest.raises(ValueError):
        nll_surv_loss(np.zeros((0, 4)), [])
    with pytest.raises(ValueError):
        nll_surv_loss(np.zeros((2, 4)), [lab])  # size mismatch


# ---------------------------------------------------------------- risk_score


def test_risk_extremes():
    sure = HazardCurve.from_hazards([0.0] * 4)
    doomed = HazardCurve.from_hazards([1.0] * 4)
    assert risk_score(sure) == -4.0
    assert risk_score(doomed) == 0.0


def test_risk_monotone_in_dominance():
    rng = np.random.default_rng(5)
    for _ in range(50):
        a = HazardCurve.from_hazards(rng.random(6))
        # strictly dominate a's survival by lowering every hazard
        b = HazardCurve.from_hazards(a.hazards * rng.uniform(0.1, 0.9))
        assert np.all(b.survival >= a.survival)
        assert risk_score(b) < risk_score(a)


def test_hazard_curve_invariants():
    with pytest.raises(ValueError):
        HazardCurve(hazards=np.array([0.5]), survival=np.array([0.7]))
    c = HazardCurve.from_logits(np.array([0.3, -0.2, 1.0]))
    assert np.allclose(c.hazards, sigmoid(np.array([0.3, -0.2, 1.0])))


# ---------------------------------------------------------- concordance_index


def _labels(times, censors):
    return [
        SurvivalLabel(event_bin=0, censorship=c, raw_time=t)
        for t, c in zip(times, censors)
    ]


def test_cindex_perfect_anticoncordance():
    times = [1.0, 2.0, 3.0, 4.0]
    labels = _labels(times, [0, 0, 0, 0])
    risks = [4.0, 3.0, 2.0, 1.0]  # earlier death = higher risk
    assert concordance_index(risks, labels) == 1.0


def test_cindex_negation_antisymmetry():
    rng = np.random.default_rng(6)
    labels = random_labels(rng, 25)
    risks = rng.standard_normal(25)  # continuous, no ties
    c = concordance_index(risks, labels)
    assert abs(concordance_index(-risks, labels) - (1.0 - c)) < 1e-12


def test_cindex_matches_pairwise_oracle():
    rng = np.random.default_rng(7)
    for _ in range(100):
        n = 30
        labels = random_labels(rng, n)
        risks = np.round(rng.standard_normal(n), 1)  # induce some ties
        assert concordance_index(risks, labels) == pairwise_cindex(risks, labels)


def test_cindex_undefined_cases():
    labels = _labels([1.0, 2.0], [1, 1])  # all censored
    with pytest.raises(UndefinedMetricError):
        concordance_index([0.1, 0.2], labels)
    with pytest.raises(UndefinedMetricError):
        concordance_index([0.1], [_labels([1.0], [0])[0]])
    # equal observed times, both events: inadmissible
    labels = _labels([2.0, 2.0], [0, 0])
    with pytest.raises(UndefinedMetricError):
        concordance_index([0.5, 0.4], labels)


# --------------------------------------------------------------- kaplan_meier


def test_km_all_censored_is_one():
    labels = _labels([1.0, 2.0, 3.0], [1, 1, 1])
    times, surv = kaplan_meier(labels)
    assert times.size == 0 and surv.size == 0  # constant 1, no steps


def test_km_single_event_step():
    n = 7
    labels = _labels([3.0] + [5.0] * (n - 1), [0] + [1] * (n - 1))
    times, surv = kaplan_meier(labels)
    assert np.allclose(times, [3.0])
    assert np.allclose(surv, [(n - 1) / n])


def test_km_matches_hand_table():
    # 12 subjects; (time, censorship)
    data = [(1, 0), (2, 1), (3, 0), (3, 0), (4, 1), (5, 0), (6, 1), (7, 0),
            (8, 1), (9, 1), (10, 0), (12, 1)]
    labels = [SurvivalLabel(0, c, float(t)) for t, c in data]
    times, surv = kaplan_meier(labels)
    # hand risk-set table: (tau, at-risk, deaths)
    table = [(1, 12, 1), (3, 10, 2), (5, 7, 1), (7, 5, 1), (10, 2, 1)]
    expect = []
    s = Fraction(1)
    for _, n, d in table:
        s *= Fraction(n - d, n)
        expect.append(float(s))
    assert np.allclose(times, [row[0] for row in table])
    assert np.allclose(surv, expect, atol=1e-12)


def test_km_censor_after_last_event_adds_no_step():
    labels = _labels([1.0, 2.0, 3.0], [0, 0, 1])
    t0, s0 = kaplan_meier(labels)
    labels2 = labels + _labels([9.0], [1])
    t1, s1 = kaplan_meier(labels2)
    assert np.array_equal(t0 != 9.0, np.ones_like(t0, dtype=bool))
    assert t1.size == t0.size  # no new step; curve stays flat afterwards


def test_km_empty_cohort():
    with pytest.raises(ValueError):
        kaplan_meier([])


# -------------------------------------------------------------- log_rank_test


def test_logrank_identical_groups():
    rng = np.random.default_rng(8)
    labels = random_labels(rng, 20)
    chi2, p = log_rank_test(labels, list(labels))
    assert chi2 < 1e-12
    assert p > 0.999


def test_logrank_symmetric_in_groups():
    rng = np.random.default_rng(9)
    a, b = random_labels(rng, 15), random_labels(rng, 12)
    assert log_rank_test(a, b) == log_rank_test(b, a)


def test_logrank_matches_event_table_oracle():
    rng = np.random.default_rng(10)
    for _ in range(50):
        a, b = random_labels(rng, 14), random_labels(rng, 11)
        chi2, p = log_rank_test(a, b)
        ref_chi2, ref_p = event_table_logrank(a, b)
        assert abs(chi2 - ref_chi2) < 1e-9
        assert abs(p - ref_p) < 1e-9
        assert chi2 >= 0 and 0 < p <= 1


def test_logrank_undefined_without_events():
    a = _labels([1.0, 2.0], [1, 1])
    b = _labels([1.5, 2.5], [1, 1])
    with pytest.raises(UndefinedMetricError):
        log_rank_test(a, b)
    with pytest.raises(ValueError):
        log_rank_test([], a)


# ------------------------------------------------------------------ bin_times


def test_bin_times_uniform_quartiles():
    times = np.arange(1.0, 9.0)
    scheme = bin_times(times, np.zeros(8, dtype=int), 4)
    assert len(scheme.edges) == 3
    bins = scheme.assign(times)
    assert [int(np.sum(bins == b)) for b in range(4)] == [2, 2, 2, 2]


def test_bin_times_single_bin():
    scheme = bin_times([1.0, 2.0], [0, 0], 1)
    assert scheme.edges == ()
    assert scheme.assign(5.0) == 0


def test_bin_times_counting_oracle():
    rng = np.random.default_rng(11)
    for _ in range(20):
        n = int(rng.integers(40, 200))
        times = rng.exponential(2.0, n)
        cens = (rng.random(n) < 0.3).astype(int)
        T = int(rng.integers(2, 6))
        scheme = bin_times(times, cens, T)
        unc = times[cens == 0]
        counts = np.bincount(scheme.assign(unc), minlength=T)
        assert np.all(np.abs(counts - len(unc) / T) <= 1.0)


def test_bin_times_too_few_uncensored():
    with pytest.raises(ValueError):
        bin_times([1.0, 2.0, 3.0], [0, 0, 1], 4)


def test_bin_scheme_rejects_unsorted_edges():
    with pytest.raises(ValueError):
        BinScheme(edges=(2.0, 1.0))
