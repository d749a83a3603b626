"""Metrics against brute-force recount oracles and algebraic properties."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from debiaslab import metrics


# -- independent oracles -------------------------------------------------------

def recount_group_accs(preds, targets, bias):
    groups = {}
    for t in sorted(set(targets)):
        for b in sorted(set(bias)):
            hits, total = 0, 0
            for p_i, t_i, b_i in zip(preds, targets, bias):
                if t_i == t and b_i == b:
                    total += 1
                    hits += int(p_i == t_i)
            if total == 0:
                return None
            groups[(t, b)] = hits / total
    return sum(groups.values()) / len(groups), groups


def ap_bruteforce(scores, flags):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    n_pos = sum(flags)
    tp, ap, prev_recall = 0, 0.0, 0.0
    for rank, i in enumerate(order, start=1):
        if flags[i]:
            tp += 1
            recall = tp / n_pos
            ap += (recall - prev_recall) * (tp / rank)
            prev_recall = recall
    return ap


def random_instance(seed, n=None, n_cls=4):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(20, 200))
    targets = rng.integers(0, n_cls, size=n)
    bias = rng.integers(0, n_cls, size=n)
    preds = rng.integers(0, n_cls, size=n)
    return rng, preds, targets, bias


# -- unbiased accuracy ---------------------------------------------------------

def test_unbiased_trivial_cases():
    preds = np.array([0, 0, 1, 0])
    targets = np.array([0, 0, 1, 1])
    bias = np.array([0, 0, 1, 1])
    # groups: (0,0) acc 1.0, (1,1) acc 0.5 ... but (0,1)/(1,0) empty
    with pytest.raises(metrics.EmptyGroupError) as exc:
        metrics.unbiased_accuracy(preds, targets, bias)
    assert exc.value.group == (0, 1)

    overall, groups = metrics.unbiased_accuracy(
        np.array([0, 1, 0, 1]), np.array([0, 0, 1, 1]), np.array([0, 1, 0, 1]))
    assert groups[(0, 0)] == 1.0 and groups[(1, 1)] == 1.0
    assert groups[(0, 1)] == 0.0 and groups[(1, 0)] == 0.0
    assert overall == 0.5

    preds = np.array([2, 0, 1, 2, 0, 1])
    overall, _ = metrics.unbiased_accuracy(preds, preds, np.array([0, 1, 0, 1, 0, 1]))
    assert overall == 1.0


def test_unbiased_matches_recount_oracle():
    for seed in range(40):
        _, preds, targets, bias = random_instance(seed)
        oracle = recount_group_accs(preds.tolist(), targets.tolist(), bias.tolist())
        if oracle is None:
            with pytest.raises(metrics.EmptyGroupError):
                metrics.unbiased_accuracy(preds, targets, bias)
            continue
        overall, groups = metrics.unbiased_accuracy(preds, targets, bias)
        assert abs(overall - oracle[0]) < 1e-12
        assert groups.keys() == oracle[1].keys()
        for k in groups:
            assert abs(groups[k] - oracle[1][k]) < 1e-12


def test_unbiased_relabel_invariance():
    _, preds, targets, bias = random_instance(99, n=400)
    overall, _ = metrics.unbiased_accuracy(preds, targets, bias)
    perm = np.array([2, 3, 1, 0])  # relabel bias values only
    overall2, _ = metrics.unbiased_accuracy(preds, targets, perm[bias])
    assert abs(overall - overall2) < 1e-12


def test_unbiased_equals_plain_accuracy_when_uniform():
    # every group exactly 50% correct -> mean equals plain accuracy
    targets = np.repeat([0, 0, 1, 1], 4)
    bias = np.tile([0, 0, 1, 1], 4)
    preds = targets.copy()
    # flip exactly half of each (t, b) cell
    for t in (0, 1):
        for b in (0, 1):
            idx = np.flatnonzero((targets == t) & (bias == b))
            preds[idx[: len(idx) // 2]] = 1 - targets[idx[: len(idx) // 2]]
    overall, _ = metrics.unbiased_accuracy(preds, targets, bias)
    assert abs(overall - (preds == targets).mean()) < 1e-12


# -- split accuracy ------------------------------------------------------------

def test_split_accuracy_basics_and_absent():
    preds = np.array([1, 0, 2, 2])
    targets = np.array([1, 1, 2, 0])
    flags = np.array([True, True, False, False])
    aligned, conf = metrics.split_accuracy(preds, targets, flags)
    assert aligned == 0.5 and conf == 0.5
    aligned, conf = metrics.split_accuracy(preds, targets, np.ones(4, bool))
    assert aligned == 0.5 and conf is None
    aligned, conf = metrics.split_accuracy(targets, targets, flags)
    assert aligned == 1.0 and conf == 1.0


def test_split_accuracy_recount():
    for seed in range(20):
        rng, preds, targets, _ = random_instance(seed)
        flags = rng.random(len(preds)) < 0.5
        aligned, conf = metrics.split_accuracy(preds, targets, flags)
        a_hits = [int(p == t) for p, t, f in zip(preds, targets, flags) if f]
        c_hits = [int(p == t) for p, t, f in zip(preds, targets, flags) if not f]
        if a_hits:
            assert abs(aligned - sum(a_hits) / len(a_hits)) < 1e-12
        else:
            assert aligned is None
        if c_hits:
            assert abs(conf - sum(c_hits) / len(c_hits)) < 1e-12
        else:
            assert conf is None


# -- average precision ----------------------------------------------------------

def test_ap_hand_enumerated():
    ap, _ = metrics.average_precision(np.array([0.9, 0.8, 0.1]), np.array([1, 1, 0]))
    assert abs(ap - 1.0) < 1e-15
    ap, curve = metrics.average_precision(np.array([0.9, 0.8, 0.1]), np.array([0, 1, 1]))
    # ranks: (0.9, neg), (0.8, pos, P=1/2), (0.1, pos, P=2/3)
    assert abs(ap - (0.5 * 0.5 + 0.5 * (2 / 3))) < 1e-15
    assert curve[0] == (0.0, 0.0)
    assert curve[1] == (0.5, 0.5)
    assert curve[2] == (1.0, 2 / 3)
    with pytest.raises(ValueError):
        metrics.average_precision(np.array([0.5, 0.2]), np.array([0, 0]))


def test_ap_matches_bruteforce():
    for seed in range(40):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(5, 120))
        scores = rng.choice([0.1, 0.25, 0.5, 0.5, 0.9], size=n)  # force ties
        flags = rng.random(n) < 0.4
        if not flags.any():
            flags[0] = True
        ap, _ = metrics.average_precision(scores, flags)
        assert abs(ap - ap_bruteforce(scores.tolist(), flags.tolist())) < 1e-12


def test_ap_stable_tie_break():
    # identical scores: earlier index ranks first, so flag order matters
    scores = np.array([0.5, 0.5])
    ap_first, _ = metrics.average_precision(scores, np.array([1, 0]))
    ap_second, _ = metrics.average_precision(scores, np.array([0, 1]))
    assert ap_first == 1.0 and ap_second == 0.5


@given(st.lists(st.tuples(st.integers(0, 30), st.booleans()), min_size=2, max_size=80))
@settings(max_examples=80, deadline=None)
def test_ap_monotone_invariance(pairs):
    scores = np.array([s for s, _ in pairs], dtype=float)
    flags = np.array([f for _, f in pairs])
    if not flags.any():
        flags[0] = True
    ap1, _ = metrics.average_precision(scores, flags)
    ap2, _ = metrics.average_precision(3.0 * scores + 7.0, flags)
    assert ap1 == ap2


# -- precision / recall at tau ---------------------------------------------------

def test_pr_at_tau_edges():
    scores = np.array([0.9, 0.6, 0.3])
    flags = np.array([1, 0, 1])
    p, r = metrics.precision_recall_at(scores, flags, 0.0)
    assert r == 1.0 and abs(p - 2 / 3) < 1e-15  # base rate
    p, r = metrics.precision_recall_at(scores, flags, 0.95)
    assert p is None and r == 0.0
    p, r = metrics.precision_recall_at(scores, np.zeros(3), 0.5)
    assert r is None
    # threshold inclusive: score == tau is retrieved
    p, r = metrics.precision_recall_at(scores, flags, 0.9)
    assert p == 1.0 and r == 0.5


def test_pr_at_tau_consistent_with_curve():
    rng = np.random.default_rng(5)
    scores = rng.random(60)
    flags = rng.random(60) < 0.3
    flags[0] = True
    _, curve = metrics.average_precision(scores, flags)
    for tau in [0.1, 0.35, 0.5, 0.82]:
        k = int((scores >= tau).sum())
        p, r = metrics.precision_recall_at(scores, flags, tau)
        assert (r, p) == curve[k - 1]


# -- fairness ---------------------------------------------------------------------

def test_fairness_definition_arithmetic():
    # p(y'=1|b=1) = 0.8 (4/5), p(y'=1|b=0) = 0.6 (3/5) -> DP = 0.8
    bias = np.array([1] * 5 + [0] * 5)
    preds = np.array([1, 1, 1, 1, 0, 1, 1, 1, 0, 0])
    targets = np.array([1, 1, 0, 0, 1, 1, 1, 0, 0, 0])
    dp, eqopp0, eqopp1, eqodd = metrics.fairness_binary(preds, targets, bias)
    assert abs(dp - 0.8) < 1e-12
    # recount the conditional rates by hand
    r10 = preds[(targets == 1) & (bias == 0)].mean()
    r11 = preds[(targets == 1) & (bias == 1)].mean()
    r00 = preds[(targets == 0) & (bias == 0)].mean()
    r01 = preds[(targets == 0) & (bias == 1)].mean()
    assert abs(eqopp1 - (1 - abs(r10 - r11))) < 1e-12
    assert abs(eqopp0 - (1 - abs(r00 - r01))) < 1e-12
    assert abs(eqodd - 0.5 * (eqopp0 + eqopp1)) < 1e-12


def test_fairness_perfect_classifier():
    rng = np.random.default_rng(11)
    targets = rng.integers(0, 2, size=200)
    bias = rng.integers(0, 2, size=200)
    dp, eqopp0, eqopp1, eqodd = metrics.fairness_binary(targets, targets, bias)
    assert eqopp0 == 1.0 and eqopp1 == 1.0 and eqodd == 1.0


def test_fairness_random_predictor_dp_near_one():
    rng = np.random.default_rng(13)
    n = 200000
    targets = rng.integers(0, 2, size=n)
    bias = rng.integers(0, 2, size=n)
    preds = rng.integers(0, 2, size=n)  # ignores bias entirely
    dp, _, _, _ = metrics.fairness_binary(preds, targets, bias)
    assert dp > 0.99


def test_fairness_absent_cells_and_validation():
    preds = np.array([1, 0, 1, 0])
    targets = np.array([1, 1, 0, 0])
    bias = np.zeros(4, dtype=int)  # b=1 side empty
    dp, eqopp0, eqopp1, eqodd = metrics.fairness_binary(preds, targets, bias)
    assert dp is None and eqopp0 is None and eqopp1 is None and eqodd is None
    with pytest.raises(ValueError, match="binary"):
        metrics.fairness_binary(np.array([0, 2]), np.array([0, 1]), np.array([0, 1]))


# -- serialization ----------------------------------------------------------------

def test_report_text_and_csv():
    report = metrics.MetricsReport(unbiased_acc=0.75, aligned_acc=0.9,
                                   conflicting_acc=None, ap=0.5,
                                   group_accs={(0, 0): 1.0, (0, 1): 0.5},
                                   pr_curve=[(0.0, 0.0), (1.0, 0.5)], tau=0.8)
    text = metrics.report_to_text(report)
    assert "unbiased_acc: 0.75" in text
    assert "conflicting_acc: absent" in text
    assert "pr_curve: 2 points" in text
    assert "  (0, 1): 0.5" in text
    row = metrics.report_csv_row(report)
    cells = row.split(",")
    assert cells[0] == "0.75" and cells[2] == ""
    assert len(cells) == len(metrics.CSV_FIELDS)
    # identical report -> identical bytes
    assert metrics.report_csv_row(report) == row
