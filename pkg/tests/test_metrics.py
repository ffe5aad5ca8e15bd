import math
from types import SimpleNamespace

import mpmath
import pytest
from hypothesis import given
from hypothesis import strategies as st

from viflab.errors import ValidationError
from viflab.metrics import (
    HSRecord,
    allocation_decay,
    hs_score,
    hs_weight,
    peak_salience,
    percent,
    propagation_distances,
    trace_hs,
)


def fake_trace(severities, inbound):
    logs = [SimpleNamespace(turn=i + 1, severity=h, inbound_turns=tuple(src))
            for i, (h, src) in enumerate(zip(severities, inbound))]
    return SimpleNamespace(logs=logs)


def chain(severities):
    return fake_trace(severities, [()] + [(i,) for i in range(1, len(severities))])


class TestHS:
    def test_zero(self):
        assert hs_score(HSRecord((0.0, 0.0, 0.0), (0, 1, 2), 2)) == 0.0

    def test_half_weight(self):
        assert hs_score(HSRecord((50.0,), (2,), 4)) == 25.0

    def test_extended_precision(self):
        mpmath.mp.dps = 40
        ref = 100 / (1 + mpmath.exp(mpmath.mpf(10) / 2 - 10))
        got = hs_score(HSRecord((100.0,), (10,), 10))
        assert abs(got - float(ref)) < 1e-12
        assert abs(got - 99.3307149075715) < 1e-12
        assert round(got, 3) == 99.331

    def test_mean_over_n(self):
        rec = HSRecord((40.0, 80.0), (1, 3), 4)
        expect = (40 / (1 + math.exp(1)) + 80 / (1 + math.exp(-1))) / 2
        assert hs_score(rec) == pytest.approx(expect, rel=1e-15)

    def test_weight_monotone_in_d(self):
        ws = [hs_weight(d, 6) for d in range(7)]
        assert all(a < b for a, b in zip(ws, ws[1:]))

    # subnormal products lose bits, so severities stay in the normal range
    @given(st.lists(st.tuples(st.one_of(st.just(0.0), st.floats(1e-6, 50)), st.integers(0, 8)),
                    min_size=1, max_size=20))
    def test_linearity(self, pairs):
        h, d = zip(*pairs)
        one = hs_score(HSRecord(h, d, 8))
        two = hs_score(HSRecord(tuple(2 * x for x in h), d, 8))
        assert two == 2 * one

    def test_empty(self):
        with pytest.raises(ValidationError):
            hs_score(HSRecord((), (), 1))

    @pytest.mark.parametrize("args", [((1.0,), (0, 1), 2), ((101.0,), (0,), 2),
                                      ((1.0,), (3,), 2), ((1.0,), (0,), 0)])
    def test_record_invalid(self, args):
        with pytest.raises(ValidationError):
            HSRecord(*args)


class TestPropagation:
    def test_linear_five(self):
        d, D = propagation_distances(chain([30, 10, 10, 10, 10]))
        assert d == [0, 1, 2, 3, 4] and D == 4

    def test_no_onset(self):
        tr = chain([5, 5, 5])
        d, D = propagation_distances(tr)
        assert d == [0, 0, 0] and D == 2
        assert trace_hs(tr) == pytest.approx(5 / (1 + math.exp(1)))

    def test_onset_at_last(self):
        d, _ = propagation_distances(chain([5, 5, 5, 25]))
        assert d == [0, 0, 0, 0]

    def test_onset_midway(self):
        d, D = propagation_distances(chain([5, 25, 5, 5]))
        assert d == [0, 0, 1, 2] and D == 3

    def test_branching_shortest(self):
        # 1 -> 2, 1 -> 3, 2 -> 4, 3 -> 4: distance to 4 is 2
        tr = fake_trace([50, 1, 1, 1], [(), (1,), (1,), (2, 3)])
        assert propagation_distances(tr) == ([0, 1, 1, 2], 2)

    def test_unreachable_gets_zero(self):
        tr = fake_trace([1, 50, 1, 1], [(), (), (1,), (2,)])
        d, D = propagation_distances(tr)
        assert d == [0, 0, 0, 1] and D == 1

    def test_single_activation(self):
        assert propagation_distances(chain([50])) == ([0], 1)

    def test_onset_threshold_parameter(self):
        d, _ = propagation_distances(chain([15, 5]), onset=10)
        assert d == [0, 1]


class TestDecay:
    def test_values(self):
        assert allocation_decay([0.2, 0.15, 0.1]) == ([0.2, 0.15, 0.1], 0.5)
        assert allocation_decay([0.1, 0.1]) == ([0.1, 0.1], 0.0)
        assert allocation_decay([0.0, 0.1]) == ([0.0, 0.1], 0.0)
        assert allocation_decay([0.1, 0.2])[1] == -1.0

    def test_empty(self):
        with pytest.raises(ValidationError):
            allocation_decay([])


class TestPercent:
    @pytest.mark.parametrize(
        "x,expect", [(0.0122, 1.2), (0.001, 0.1), (0.00125, 0.1), (0.0125, 1.3), (0.5, 50.0), (1 / 3, 33.3)]
    )
    def test_round_half_up(self, x, expect):
        assert percent(x) == expect


def test_decay_reference_series():
    _, frac = allocation_decay([0.165, 0.12, 0.099, 0.08, 0.063])
    assert percent(frac) == 61.8
    assert round(percent(frac)) == 62


class TestSalienceSummary:
    def test_examples(self):
        assert peak_salience([0.02, 0.30, 0.03]) == pytest.approx(0.9)
        assert peak_salience([0.1, 0.2, 0.3]) == 0.0
        assert peak_salience([0.0, 0.0, 0.0]) == 0.0

    @given(st.lists(st.floats(1e-3, 1), min_size=3, max_size=10), st.floats(1e-2, 1e2))
    def test_scale_invariant(self, v, c):
        assert peak_salience([c * x for x in v]) == pytest.approx(peak_salience(v), abs=1e-12)


@given(st.lists(st.tuples(st.floats(0, 90), st.integers(0, 5)), min_size=1, max_size=10),
       st.integers(0, 9), st.floats(0, 10))
def test_hs_monotone(pairs, which, bump):
    h, d = map(list, zip(*pairs))
    i = which % len(h)
    base = hs_score(HSRecord(tuple(h), tuple(d), 6))
    h2 = list(h)
    h2[i] += bump
    assert hs_score(HSRecord(tuple(h2), tuple(d), 6)) >= base
    d2 = list(d)
    d2[i] += 1
    assert hs_score(HSRecord(tuple(h), tuple(d2), 6)) >= base
