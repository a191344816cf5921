import math
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oat.datasets import GridLayout, Trial
from oat.metrics import (
    BehaviorStats,
    UndefinedMetricError,
    aggregate,
    behavior_stats,
    classify_saccades,
    fed,
    format_table,
    multimatch,
    overall_difference,
    reports_csv,
    sequence_score,
    stats_from_percentages,
)

seqs = st.lists(st.integers(0, 19), max_size=10)


def levenshtein_recursive(a, b):
    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(a):
            return len(b) - j
        if j == len(b):
            return len(a) - i
        return min(go(i + 1, j) + 1, go(i, j + 1) + 1, go(i + 1, j + 1) + (a[i] != b[j]))

    return go(0, 0)


def lcs_brute(a, b):
    # longest common subsequence by enumerating subsequences of the shorter input
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    best = 0
    for mask in range(1 << len(short)):
        sub = [short[i] for i in range(len(short)) if mask >> i & 1]
        it = iter(long_)
        if all(any(x == y for y in it) for x in sub):
            best = max(best, len(sub))
    return best


# -- FED and SS ------------------------------------------------------------------


def test_fed_examples():
    assert fed([1, 2, 3], [1, 2, 3]) == 0
    assert fed([3, 5, 7], [3, 5, 9]) == 1
    assert fed([], [1, 2]) == 2


def test_fed_matches_exhaustive_recursion_on_200_pairs():
    rng = np.random.default_rng(0)
    for _ in range(200):
        a = rng.integers(0, 20, rng.integers(0, 11)).tolist()
        b = rng.integers(0, 20, rng.integers(0, 11)).tolist()
        assert fed(a, b) == levenshtein_recursive(tuple(a), tuple(b))


def test_sequence_score_examples():
    assert sequence_score([4, 5], [4, 5]) == 1.0
    assert sequence_score(["A", "B", "C"], ["A", "C"]) == pytest.approx(0.8)
    assert sequence_score([1, 2], [3, 4]) == 0.0
    assert sequence_score([], []) == 1.0


def test_sequence_score_matches_brute_force_lcs():
    rng = np.random.default_rng(1)
    for _ in range(200):
        a = rng.integers(0, 6, rng.integers(0, 9)).tolist()
        b = rng.integers(0, 6, rng.integers(0, 9)).tolist()
        expected = 1.0 if not a and not b else 2 * lcs_brute(a, b) / (len(a) + len(b))
        assert sequence_score(a, b) == pytest.approx(expected, abs=1e-15)


@settings(max_examples=300, deadline=None)
@given(seqs, seqs, seqs)
def test_fed_is_a_metric(a, b, c):
    assert fed(a, b) == fed(b, a)
    assert (fed(a, b) == 0) == (a == b)
    assert fed(a, c) <= fed(a, b) + fed(b, c)


@settings(max_examples=300, deadline=None)
@given(seqs, seqs)
def test_sequence_score_symmetric_in_range(a, b):
    s = sequence_score(a, b)
    assert s == sequence_score(b, a)
    assert 0.0 <= s <= 1.0
    assert sequence_score(a, a) == 1.0


# -- behaviour ---------------------------------------------------------------------


def test_classify_saccades_examples():
    A, B, T = 1, 2, 9
    assert classify_saccades([A, B, B, A, T], T) == (2, 1, 1, 1, 5)
    assert classify_saccades([A], T) == (0, 0, 0, 0, 1)
    assert classify_saccades([A], A)[3] == 1
    assert classify_saccades([A, A, A], T)[:3] == (0, 0, 2)
    with pytest.raises(UndefinedMetricError):
        classify_saccades([], T)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=2, max_size=15))
def test_saccade_totals(path):
    a, b, c, _, n = classify_saccades(path, 1)
    assert a + b + c == n - 1
    s = behavior_stats([path], 1)
    assert s.search + s.revisit + s.refix == pytest.approx(1.0, abs=1e-9)


def test_empty_scanpath_is_miss_with_length_zero():
    s = behavior_stats([[], [1, 2]], [2, 2])
    assert s.accuracy == 0.5
    assert s.avg_length == 1.0
    assert s.search == 1.0


HUMAN = stats_from_percentages(85.8, 2.3, 11.9, 91.7, 8.4)


def test_overall_matches_reported_rows():
    oat_row = stats_from_percentages(85.3, 3.0, 11.7, 89.4, 8.5)
    random_row = stats_from_percentages(95.5, 3.6, 0.9, 1.1, 8.8)
    assert overall_difference(oat_row, HUMAN) == pytest.approx(0.0728, abs=5e-4)
    assert overall_difference(oat_row, HUMAN) == pytest.approx(0.074, abs=0.005)
    assert overall_difference(random_row, HUMAN) == pytest.approx(0.530, abs=0.01)
    center_row = stats_from_percentages(86.5, 10.3, 3.2, 1.3, 8.9)
    assert overall_difference(center_row, HUMAN) == pytest.approx(1.053, abs=0.005)
    assert overall_difference(HUMAN, HUMAN) == 0.0


def test_overall_zero_reference_field_is_named():
    ref = BehaviorStats(0.5, 0.0, 0.5, 1.0, 4.0)
    with pytest.raises(UndefinedMetricError, match="revisit"):
        overall_difference(ref, ref)


def test_overall_zero_iff_all_match():
    other = stats_from_percentages(85.8, 2.3, 11.9, 91.7, 8.5)
    assert overall_difference(other, HUMAN) > 0


# -- MultiMatch --------------------------------------------------------------------


def test_multimatch_identical_is_one():
    path = [(10, 10), (100, 50), (40, 200)]
    mm = multimatch(path, path, 500.0)
    assert (mm.vector, mm.direction, mm.length, mm.position) == (1.0, 1.0, 1.0, 1.0)


def test_multimatch_right_angle_direction():
    mm = multimatch([(0, 0), (1, 0)], [(0, 0), (0, 1)], 100.0)
    assert mm.direction == pytest.approx(0.5)


def test_multimatch_equal_amplitude_length():
    mm = multimatch([(0, 0), (100, 0)], [(0, 0), (0, -100)], 1000.0)
    assert mm.length == pytest.approx(1.0)


def test_multimatch_undefined_for_single_fixation():
    assert multimatch([(1, 1)], [(1, 1), (2, 2)], 10.0) is None


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.tuples(st.integers(0, 300), st.integers(0, 300)), min_size=2, max_size=8),
    st.lists(st.tuples(st.integers(0, 300), st.integers(0, 300)), min_size=2, max_size=8),
)
def test_multimatch_range_and_symmetry(a, b):
    diag = math.hypot(300, 300)
    ab, ba = multimatch(a, b, diag), multimatch(b, a, diag)
    for x, y in zip((ab.vector, ab.direction, ab.length, ab.position), (ba.vector, ba.direction, ba.length, ba.position)):
        assert 0.0 <= x <= 1.0
        assert x == pytest.approx(y, abs=1e-12)


# -- aggregation -------------------------------------------------------------------


def _trials():
    layout = GridLayout.regular(2, 3)
    return [
        Trial("a", layout, 3, [[1, 2, 1, 3]]),
        Trial("b", layout, 5, [[4, 5], [4, 4, 5]]),
    ]


def test_aggregate_identical_replicates():
    trials = _trials()
    refs = {"a": [[1, 2, 1, 1, 3]], "b": [[4, 5]]}
    preds = {k: [list(p) for p in v] for k, v in refs.items()}
    report = aggregate(trials, preds, refs)
    assert report.SS == 1.0 and report.FED == 0.0 and report.Overall == 0.0
    assert report.multimatch["average"] == 1.0


def test_aggregate_permutation_invariant_and_skips_missing():
    trials = _trials() + [Trial("c", GridLayout.regular(2, 3), 1, [])]
    preds = {"a": [[1, 3], [2, 3]], "b": [[4, 5, 6]], "c": [[1]]}
    r1 = aggregate(trials, preds)
    r2 = aggregate(list(reversed(trials)), preds)
    assert r1.SS == pytest.approx(r2.SS) and r1.FED == pytest.approx(r2.FED)
    assert r1.Overall == pytest.approx(r2.Overall)
    assert r1.skipped == ["c"]
    assert 0 <= r1.SS <= 1 and r1.FED >= 0


def test_report_outputs():
    trials = _trials()
    rep = aggregate(trials, {"a": [[1, 3]], "b": [[4, 5]]}, name="oat")
    csv_text = reports_csv([rep], rep.reference)
    assert csv_text.splitlines()[0].startswith("name,search")
    assert len(csv_text.splitlines()) == 3
    table = format_table([rep], rep.reference)
    assert "oat" in table and "Overall" in table
