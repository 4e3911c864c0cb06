import math

import numpy as np
import pytest

from rheston.config import ModelParams
from rheston.errors import ConfigError, InversionError
from rheston.kernel import preset
from rheston.pricing import (
    FeatureBasis,
    SmileRequest,
    estimate_from_samples,
    feature_count,
    implied_vol,
    price_bermudan_put,
    price_european,
    price_geometric_asian,
    price_surface,
    record_steps_for,
)
from rheston.randstream import StreamSpec
from rheston.reference import black_scholes_price

PARAMS = ModelParams()
KERNEL = preset(0.1, "T1", 2)
STREAM = StreamSpec("sobol", 1, shifts=8, points_per_shift=512, seed=4)

FEATURE_TABLE = {
    1: [1, 3, 5, 8, 11, 15, 19, 24, 29, 35],
    2: [1, 3, 6, 10, 15, 22, 30, 40, 52, 66],
    3: [1, 3, 7, 12, 19, 30, 43, 60, 83, 110],
}


def test_feature_count_table():
    for N, row in FEATURE_TABLE.items():
        assert [feature_count(N, d) for d in range(1, 11)] == row


def test_feature_basis_design_matrix():
    k = preset(0.1, "T1", 3)
    basis = FeatureBasis(3, 3)
    S = np.array([100.0, 110.0])
    V = np.tile(k.v0split, (2, 1))
    z = basis.variables(S, V, 100.0, k)
    assert z.shape == (2, 4)
    assert np.allclose(z[:, 0], [0.0, 0.1])
    assert np.allclose(z[:, 1:], 0.0)
    X = basis.evaluate(S, V, 100.0, k)
    assert X.shape == (2, 1 + len(basis))
    assert np.allclose(X[:, 0], 1.0)


def test_estimate_from_replicates():
    est = estimate_from_samples([1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2)
    assert est.value == pytest.approx(3.5)
    assert est.std_error == pytest.approx(1.5)
    assert est.half_width == pytest.approx(12.7062047 * 1.5, rel=1e-6)
    single = estimate_from_samples([1.0, 3.0], 1)
    assert single.replicates == 1
    assert single.half_width == pytest.approx(1.959964 * 1.0, rel=1e-6)


def test_implied_vol_at_the_money():
    assert implied_vol(0.0796557, 1.0, 1.0, 1.0) == pytest.approx(0.2, abs=1e-6)


@pytest.mark.parametrize("sigma", [0.05, 0.2, 0.7, 2.0])
@pytest.mark.parametrize("strike", [0.9, 1.0, 1.1])
def test_implied_vol_round_trip(sigma, strike):
    for side in ("call", "put"):
        price = black_scholes_price(1.0, strike, 1.0, sigma, side)
        assert implied_vol(price, 1.0, strike, 1.0, side) == pytest.approx(sigma, abs=1e-8)


def test_implied_vol_low_vol_at_the_money():
    price = black_scholes_price(1.0, 1.0, 1.0, 0.01)
    assert implied_vol(price, 1.0, 1.0, 1.0) == pytest.approx(0.01, abs=1e-8)


def test_implied_vol_near_intrinsic_is_small():
    assert implied_vol(0.2 + 1e-12, 1.2, 1.0, 1.0) < 0.05


def test_implied_vol_outside_band():
    with pytest.raises(InversionError) as info:
        implied_vol(1.5, 1.0, 1.0, 1.0)
    assert info.value.band == (0.0, 1.0)
    with pytest.raises(InversionError):
        implied_vol(0.1, 1.2, 1.0, 1.0)


def _smile(side, ks, scheme="weak"):
    req = SmileRequest(1.0, tuple(ks), side, scheme, 8, STREAM)
    return price_european(req, PARAMS, KERNEL)


def test_european_limits():
    deep_itm, deep_otm = _smile("call", [-20.0, 5.0])
    assert abs(deep_itm.value - 1.0) < 4 * deep_itm.std_error + 1e-3
    assert deep_otm.low <= 0.0 <= deep_otm.high


def test_put_call_parity():
    ks = [-0.1, 0.0, 0.05]
    calls = _smile("call", ks)
    puts = _smile("put", ks)
    for k, c, p in zip(ks, calls, puts):
        assert c.value - p.value == pytest.approx(1.0 - math.exp(k), abs=4 * (c.std_error + p.std_error) + 1e-4)


def test_single_maturity_surface_equals_smile():
    ks = [-0.05, 0.0, 0.05]
    smile = _smile("call", ks)
    (row,) = price_surface([1.0], [ks], PARAMS, KERNEL, "weak", 8, STREAM)
    assert [e.value for e in row] == [e.value for e in smile]


def test_record_steps_alignment():
    maturities = [i / 16 for i in range(1, 17)]
    assert record_steps_for(maturities, 1.0, 64) == list(range(4, 65, 4))
    with pytest.raises(ConfigError):
        record_steps_for([0.3], 1.0, 4)


def test_surface_rows_follow_input_order():
    rows = price_surface([1.0, 0.5], [[0.0], [0.0]], PARAMS, KERNEL, "weak", 8, STREAM)
    assert rows[0][0].value > rows[1][0].value


def test_geometric_asian_below_european():
    (asian,) = price_geometric_asian([1.0], PARAMS, KERNEL, "weak", 8, STREAM)
    (euro,) = _smile("call", [0.0])
    assert asian.value <= euro.value + 3 * (asian.std_error + euro.std_error)
    assert asian.value > 0


BERMUDAN = ModelParams(S0=100.0, r=0.06)
BERMUDAN_STREAM = StreamSpec("sobol", 1, shifts=4, points_per_shift=1024, seed=2)


def test_single_date_bermudan_is_european():
    res = price_bermudan_put(105.0, 1, BERMUDAN, KERNEL, "weak", 8, 3, BERMUDAN_STREAM)
    assert res.price.value == res.european.value


def test_bermudan_dominates_european():
    res = price_bermudan_put(105.0, 4, BERMUDAN, KERNEL, "weak", 8, 3, BERMUDAN_STREAM)
    assert res.price.value >= res.european.value - 3 * (res.price.std_error + res.european.std_error)
    assert res.exercise_times == (0.25, 0.5, 0.75, 1.0)


def test_more_exercise_dates_are_worth_more():
    stream = StreamSpec("sobol", 1, shifts=8, points_per_shift=2048, seed=5)
    b4 = price_bermudan_put(105.0, 4, BERMUDAN, KERNEL, "weak", 16, 3, stream)
    b16 = price_bermudan_put(105.0, 16, BERMUDAN, KERNEL, "weak", 16, 3, stream)
    se4, se16 = b4.price.std_error, b16.price.std_error
    assert b16.price.value >= b4.price.value - 3 * (se4 + se16)
    assert b4.price.value >= b4.european.value - 3 * (se4 + b4.european.std_error)
    for res in (b4, b16):
        assert res.price.value <= res.in_sample.value + 3 * (res.price.std_error + res.in_sample.std_error)


def test_worthless_bermudan():
    res = price_bermudan_put(1e-6, 4, BERMUDAN, KERNEL, "weak", 8, 3, BERMUDAN_STREAM)
    assert res.price.value == 0.0


def test_bermudan_grid_must_align():
    with pytest.raises(ConfigError):
        price_bermudan_put(105.0, 3, BERMUDAN, KERNEL, "weak", 8, 3, BERMUDAN_STREAM)
