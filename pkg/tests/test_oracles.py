import math

import numpy as np
import pytest

from follmer_kit.oracles import gaussian_moment_mc, heat_kernel_transport, random_sign_series_moment


class TestOracles:
    def test_heat_kernel_gaussian(self):
        x = np.linspace(-3, 3, 13)
        sigma, c, t, s = 0.5, 0.5, 0.3, 0.4
        got = heat_kernel_transport(lambda y: np.exp(-(y**2) / (2 * sigma**2)), x, t, c, s)
        var = sigma**2 + 2 * c * t
        ref = sigma / math.sqrt(var) * np.exp(-((x + s) ** 2) / (2 * var))
        np.testing.assert_allclose(got, ref, atol=1e-10)

    def test_sign_series_second_moment(self):
        # E|sum 2^{-n/2} Y_n|^2 = sum 2^{-n} = 2
        assert random_sign_series_moment(0.5, 2, draws=200_000) == pytest.approx(2.0, rel=0.01)

    def test_sign_series_rejects_bad_hurst(self):
        with pytest.raises(ValueError):
            random_sign_series_moment(1.0, 4)

    def test_gaussian_second_moment(self):
        assert gaussian_moment_mc(2, draws=10**6) == pytest.approx(1.0, rel=0.01)
