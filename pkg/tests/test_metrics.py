import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resflow.metrics import (
    EvalReport,
    auroc,
    aupr_in,
    aupr_out,
    detection_accuracy,
    evaluate_detection,
    parse_report,
    report_lines,
    roc_curve,
    tnr_at_tpr,
)

# ---------------------------------------------------------------------------
# brute-force oracles: plain python loops over every pair / every threshold


def brute_auroc(ins, outs):
    total = math.fsum(
        1.0 if a > b else (0.5 if a == b else 0.0) for a in ins for b in outs
    )
    return total / (len(ins) * len(outs))


def brute_tnr_at_tpr(ins, outs, target):
    if target <= 0:
        return 1.0
    threshold = None
    for t in sorted(set(ins), reverse=True):
        count = sum(1 for a in ins if a >= t)
        if count >= target * len(ins) - 1e-9:
            threshold = t
            break
    return sum(1 for b in outs if b < threshold) / len(outs)


def brute_average_precision(pos, neg):
    terms = []
    r_prev = 0.0
    for t in sorted(set(pos) | set(neg), reverse=True):
        tp = sum(1 for a in pos if a >= t)
        fp = sum(1 for b in neg if b >= t)
        precision = tp / (tp + fp)
        recall = tp / len(pos)
        terms.append((recall - r_prev) * precision)
        r_prev = recall
    return math.fsum(terms)


def brute_detection_accuracy(ins, outs):
    best = 0.5
    for t in sorted(set(ins) | set(outs)):
        tpr = sum(1 for a in ins if a >= t) / len(ins)
        tnr = sum(1 for b in outs if b < t) / len(outs)
        best = max(best, 0.5 * (tpr + tnr))
    return best


def random_instance(rng, max_n=200):
    # half-integer scores force plenty of ties across the two sets
    n_in = int(rng.integers(1, max_n + 1))
    n_out = int(rng.integers(1, max_n + 1))
    ins = rng.integers(0, 12, size=n_in) * 0.5
    outs = rng.integers(0, 12, size=n_out) * 0.5
    return list(ins), list(outs)


# ---------------------------------------------------------------------------


def test_auroc_trivial_cases():
    assert auroc([2.0, 3.0], [0.0, 1.0]) == 1.0
    assert auroc([0.0, 1.0], [2.0, 3.0]) == 0.0
    assert auroc([1.0, 1.0], [1.0, 1.0]) == 0.5


def test_auroc_matches_brute_force_exactly():
    rng = np.random.default_rng(1)
    for _ in range(100):
        ins, outs = random_instance(rng)
        assert auroc(ins, outs) == brute_auroc(ins, outs)


def test_tnr_matches_brute_force_exactly():
    rng = np.random.default_rng(2)
    for _ in range(100):
        ins, outs = random_instance(rng)
        for target in (0.5, 0.8, 0.95, 1.0):
            assert tnr_at_tpr(ins, outs, target) == brute_tnr_at_tpr(
                ins, outs, target
            )


def test_aupr_matches_brute_force_exactly():
    rng = np.random.default_rng(3)
    for _ in range(100):
        ins, outs = random_instance(rng)
        assert aupr_in(ins, outs) == brute_average_precision(ins, outs)
        assert aupr_out(ins, outs) == brute_average_precision(
            [-b for b in outs], [-a for a in ins]
        )


def test_detection_accuracy_matches_brute_force_exactly():
    rng = np.random.default_rng(4)
    for _ in range(100):
        ins, outs = random_instance(rng)
        assert detection_accuracy(ins, outs) == brute_detection_accuracy(ins, outs)


def test_tnr_small_example():
    # 2 in-scores, target 0.95 -> both must clear the threshold
    assert tnr_at_tpr([2.0, 3.0], [0.0, 1.0], 0.95) == 1.0
    # exact boundary: 0.95 * 20 = 19, the 19th largest decides
    ins = list(np.arange(20, dtype=float))
    assert tnr_at_tpr(ins, [0.5], 0.95) == brute_tnr_at_tpr(ins, [0.5], 0.95)


def test_tnr_identical_distributions_near_five_percent():
    rng = np.random.default_rng(5)
    ins = rng.normal(size=1000)
    outs = rng.normal(size=1000)
    assert tnr_at_tpr(ins, outs, 0.95) == pytest.approx(0.05, abs=0.02)


def test_tnr_zero_target():
    assert tnr_at_tpr([1.0], [5.0], 0.0) == 1.0


def test_tnr_rejects_bad_target():
    with pytest.raises(ValueError):
        tnr_at_tpr([1.0], [0.0], 1.5)


def test_detection_accuracy_hand_example():
    # best threshold sits between 1 and 2: half the ins kept, all outs below
    assert detection_accuracy([0.0, 2.0], [1.0]) == 0.75


def test_detection_accuracy_identical_distributions():
    rng = np.random.default_rng(6)
    ins = rng.normal(size=2000)
    outs = rng.normal(size=2000)
    assert detection_accuracy(ins, outs) == pytest.approx(0.5, abs=0.03)


def test_aupr_perfect_single_positive():
    assert aupr_in([2.0], [0.0, 1.0]) == 1.0


def test_roc_curve_shape_and_monotonicity():
    rng = np.random.default_rng(7)
    ins, outs = random_instance(rng, max_n=60)
    fpr, tpr, ts = roc_curve(ins, outs)
    assert (fpr[0], tpr[0]) == (0.0, 0.0)
    assert ts[0] == np.inf
    assert (fpr[-1], tpr[-1]) == (1.0, 1.0)
    assert np.all(np.diff(fpr) >= 0)
    assert np.all(np.diff(tpr) >= 0)
    assert np.all(np.diff(ts) < 0)


def test_roc_identical_sets_is_diagonal():
    scores = [0.0, 1.0, 2.0]
    fpr, tpr, _ = roc_curve(scores, scores)
    np.testing.assert_array_equal(fpr, tpr)


def test_auroc_equals_roc_trapezoid():
    rng = np.random.default_rng(8)
    for _ in range(25):
        ins, outs = random_instance(rng, max_n=80)
        fpr, tpr, _ = roc_curve(ins, outs)
        area = np.trapezoid(tpr, fpr)
        assert auroc(ins, outs) == pytest.approx(area, abs=1e-12)


# quarter-integer scores: the affine map below is exact on them, so tie
# structure is preserved (tiny floats would collapse into 1.0 and create
# new ties, which is a property of float arithmetic, not of the metric)
_grid_scores = st.lists(
    st.integers(-1000, 1000).map(lambda k: 0.25 * k), min_size=1, max_size=40
)


@given(ins=_grid_scores, outs=_grid_scores)
@settings(max_examples=60, deadline=None)
def test_auroc_invariant_under_increasing_affine_map(ins, outs):
    direct = auroc(ins, outs)
    mapped = auroc([2.0 * a + 1.0 for a in ins], [2.0 * b + 1.0 for b in outs])
    assert mapped == pytest.approx(direct, abs=1e-12)


@given(
    ins=st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=40),
    outs=st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=40),
)
@settings(max_examples=60, deadline=None)
def test_auroc_role_swap_symmetry(ins, outs):
    assert auroc(ins, outs) == pytest.approx(1.0 - auroc(outs, ins), abs=1e-12)


def test_tnr_monotone_in_target():
    rng = np.random.default_rng(9)
    ins, outs = random_instance(rng)
    targets = np.linspace(0.05, 1.0, 20)
    values = [tnr_at_tpr(ins, outs, t) for t in targets]
    assert np.all(np.diff(values) <= 1e-12)


def test_empty_inputs_rejected():
    with pytest.raises(ValueError):
        auroc([], [1.0])
    with pytest.raises(ValueError):
        detection_accuracy([1.0], [])


def test_evaluate_detection_report_round_trip():
    rng = np.random.default_rng(10)
    ins, outs = random_instance(rng)
    report = evaluate_detection(ins, outs)
    assert isinstance(report, EvalReport)
    text = "\n".join(report_lines(report))
    back = parse_report(text)
    assert back == report  # repr round-trip keeps floats bit-exact
    row = report.row()
    assert len(row.split()) == 5


def test_report_row_column_order():
    report = EvalReport(
        n_in=1,
        n_out=1,
        tnr_at_tpr95=0.1,
        auroc=0.2,
        detection_accuracy=0.3,
        aupr_in=0.4,
        aupr_out=0.5,
    )
    assert report.row() == "0.1000 0.2000 0.3000 0.4000 0.5000"
