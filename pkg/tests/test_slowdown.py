from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from sbchain.core import BadInput
from sbchain.sim.slowdown import slowdown_model


def test_measured_inputs():
    s = slowdown_model(0.61, 5.66, 4)
    assert s.beta == pytest.approx(5.05)
    assert s.delta_evm == pytest.approx(2.44)
    assert s.Delta_evm == pytest.approx(7.49)
    assert round(s.S * 100) == 32 and round(s.S_limit * 100) == 48


def test_no_validation_time_means_no_slowdown():
    s = slowdown_model(0, 3.0, 10)
    assert s.S == 0 and s.S_limit == 0


@pytest.mark.parametrize("args", [(1.0, 1.0, 4), (2.0, 1.0, 4), (0.1, 1.0, 0), (-0.1, 1.0, 4)])
def test_degenerate_inputs(args):
    with pytest.raises(BadInput):
        slowdown_model(*args)


@given(
    st.fractions(min_value=0, max_value=10, max_denominator=1000),
    st.fractions(min_value=Fraction(1, 100), max_value=50, max_denominator=1000),
    st.integers(1, 500),
)
def test_matches_closed_form(delta, extra, n):
    # Oracle: only the extra (n - 1) validations are added to the end-to-end time.
    Delta = delta + extra
    s = slowdown_model(float(delta), float(Delta), n)
    assert s.S == pytest.approx(float((n - 1) * delta / Delta), rel=1e-12, abs=1e-12)
    assert s.S_limit == pytest.approx(float(n * delta / extra), rel=1e-12, abs=1e-12)
