import math

import numpy as np
import pytest

from rheston.config import load_config
from rheston.errors import ConfigError
from rheston.experiments import (
    estimate_rate,
    iv_with_ci,
    max_relative_error,
    run_experiment,
)
from rheston.pricing import EstimateWithCI
from rheston.reference import black_scholes_price

SMALL_RUN = (
    "PRESET=H0.1/T1/N1\nRNG=pseudo\nSHIFTS=2\nPOINTS_PER_SHIFT=64\nBATCH_SIZE=32\n"
    "LOG_MONEYNESS=-0.1,0,0.05\n"
)


def _config(tmp_path, experiment, extra=""):
    path = tmp_path / f"{experiment}.env"
    path.write_text(f"EXPERIMENT={experiment}\n{SMALL_RUN}{extra}")
    return load_config(str(path))


def test_rate_of_halving_errors_is_one():
    rates = estimate_rate({8: 0.4, 16: 0.2, 32: 0.1})
    assert [(r.M_from, r.M_to) for r in rates] == [(8, 16), (16, 32)]
    assert all(r.rate == pytest.approx(1.0) for r in rates)


def test_rate_of_quartering_errors_is_two():
    (rate,) = estimate_rate({4: 0.08, 8: 0.02})
    assert rate.rate == pytest.approx(2.0)
    assert rate.half_width == 0.0


def test_rate_from_tabulated_errors():
    (rate,) = estimate_rate({8: 2.397, 16: 0.666})
    assert rate.rate == pytest.approx(1.848, abs=1e-3)


def test_rate_interval_widens_with_error_intervals():
    (rate,) = estimate_rate({8: (0.4, 0.04), 16: EstimateWithCI(0.1, 0.01, 5)})
    assert rate.rate == pytest.approx(2.0)
    assert rate.half_width == pytest.approx(0.2 / math.log(2.0))


def test_rate_needs_a_doubling_grid():
    with pytest.raises(ConfigError):
        estimate_rate({8: 0.4, 24: 0.1})
    with pytest.raises(ConfigError):
        estimate_rate({8: 0.4})


def test_zero_error_gives_nan_rate():
    (rate,) = estimate_rate({8: 0.0, 16: 0.1})
    assert math.isnan(rate.rate)


def test_max_relative_error_skips_missing_points():
    values = [(1.1, 0.01), (float("nan"), float("nan")), (2.0, 0.02)]
    reference = [(1.0, 0.0), (1.0, 0.0), (2.0, 0.0)]
    err, hw = max_relative_error(values, reference)
    assert err == pytest.approx(0.1)
    assert hw == pytest.approx(0.01)


def test_iv_with_ci_recovers_flat_vol():
    price = black_scholes_price(1.0, 1.05, 0.5, 0.25, "call")
    sigma, hw = iv_with_ci(EstimateWithCI(price, 1e-4, 8), 1.0, 1.05, 0.5, 0.0, "call")
    assert sigma == pytest.approx(0.25, abs=1e-10)
    assert 0 < hw < 1e-2


def test_iv_with_ci_outside_band_is_nan():
    sigma, hw = iv_with_ci(EstimateWithCI(2.0, 0.0, 1), 1.0, 1.0, 1.0, 0.0, "call")
    assert math.isnan(sigma) and math.isnan(hw)


def test_kernel_error_of_exact_representation_is_zero(tmp_path):
    path = tmp_path / "k.env"
    path.write_text("EXPERIMENT=kernel-error\nNODES=0\nWEIGHTS=1\nHURST=0.5\nHORIZONS=1,4\n")
    result = run_experiment(load_config(str(path)))
    assert result.columns == (
        "kernel", "scheme", "N", "M", "seed", "H", "horizon", "l1_error", "l1_error_ci",
    )
    assert [row[6] for row in result.rows] == [1.0, 4.0]
    assert all(row[7] == pytest.approx(0.0, abs=1e-10) for row in result.rows)
    assert all(row[1] == row[3] == "n/a" and row[8] == 0.0 for row in result.rows)


def test_kernel_error_over_presets_decreases_with_N(tmp_path):
    path = tmp_path / "k.env"
    path.write_text("EXPERIMENT=kernel-error\nPRESETS=H0.1/T1/N1,H0.1/T1/N2,H0.1/T1/N3\n")
    result = run_experiment(load_config(str(path)))
    errors = [row[7] for row in result.rows]
    assert [row[2] for row in result.rows] == [1, 2, 3]
    assert errors[0] > errors[1] > errors[2] > 0


def test_smile_has_one_row_per_step_and_strike(tmp_path):
    result = run_experiment(_config(tmp_path, "smile", "STEPS=1,2,4\n"))
    assert len(result.rows) == 9
    assert [row[2] for row in result.rows] == [1] * 3 + [2] * 3 + [4] * 3
    assert set(result.wall_times) == {1, 2, 4}
    strikes = [row[6] for row in result.rows[:3]]
    assert np.allclose(strikes, np.exp([-0.1, 0.0, 0.05]))
    assert all(row[7] >= 0 for row in result.rows)


def test_surface_strikes_scale_with_maturity(tmp_path):
    result = run_experiment(_config(tmp_path, "surface", "STEPS=4\nMATURITIES=0.25,1\n"))
    assert len(result.rows) == 6
    short = [row for row in result.rows if row[4] == 0.25]
    assert short[0][5] == pytest.approx(-0.05)


def test_asian_prices_fall_with_strike(tmp_path):
    result = run_experiment(_config(tmp_path, "asian", "STEPS=4\n"))
    prices = [row[7] for row in result.rows]
    assert prices == sorted(prices, reverse=True)


def test_convergence_against_self_reference(tmp_path):
    cfg = _config(tmp_path, "convergence", "STEPS=2,4\nREFERENCE=self\nREFERENCE_STEPS=8\n")
    result = run_experiment(cfg)
    assert [row[3] for row in result.rows] == [2, 4]
    assert result.notes["reference"] == "self@M=8"
    assert math.isnan(result.rows[0][8])


def test_fourier_reference_rejects_asian(tmp_path):
    cfg = _config(tmp_path, "convergence", "STEPS=2,4\nREFERENCE=fourier\nPRODUCT=asian\n")
    with pytest.raises(ConfigError):
        run_experiment(cfg)
