import math

import numpy as np
import pytest

from pullsdf import diffcore as dc
from pullsdf import fftnet


def tiny_stack(n_layers, m, taps, **params):
    cfg = fftnet.StackConfig(n_layers=n_layers, width=m, taps=taps)
    return fftnet.FilterStack(cfg, {k: np.asarray(v, dtype=np.float64) for k, v in params.items()})


class TestSchedule:
    def test_symmetry(self):
        psi = fftnet.psi_schedule(9, 3.0)
        for i in range(1, 9):
            assert psi[i] == pytest.approx(psi[9 - i], rel=1e-15)

    def test_midpoint_unit(self):
        assert fftnet.psi_schedule(8, 1.0)[4] == 1.0

    def test_eta_scaling(self):
        a, b = fftnet.psi_schedule(9, 2.0), fftnet.psi_schedule(9, 8.0)
        np.testing.assert_allclose(b[1:], 2.0 * a[1:], rtol=1e-15)


class TestInit:
    def test_weight_std_matches_uniform(self):
        stack = fftnet.init_stack(fftnet.StackConfig(width=256, eta=3.0))
        psi = fftnet.psi_schedule(9, 3.0)
        for i in range(1, 9):
            expect = psi[i] / math.sqrt(256) / math.sqrt(3)
            for role in ("z", "y"):
                w = stack.params[f"fft.w{role}.{i}"]
                assert np.std(w) == pytest.approx(expect, rel=0.05)
                assert np.abs(w).max() <= psi[i] / 16

    def test_shapes_and_ranges(self):
        stack = fftnet.init_stack(fftnet.StackConfig(width=16, omega_bound=5.0, omega_bound_first=7.0))
        assert stack.params["fft.omega.0"].shape == (16, 3)
        assert np.abs(stack.params["fft.omega.0"]).max() <= 7.0
        assert np.abs(stack.params["fft.omega.3"]).max() <= 5.0
        assert np.abs(stack.params["fft.phi.2"]).max() <= np.pi
        assert stack.params["fft.wz.1"].shape == (16, 16)
        assert "fft.wz.0" not in stack.params

    def test_deterministic(self):
        a = fftnet.init_stack(fftnet.StackConfig(width=8, seed=3))
        b = fftnet.init_stack(fftnet.StackConfig(width=8, seed=3))
        c = fftnet.init_stack(fftnet.StackConfig(width=8, seed=4))
        assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
        assert any(a.params[k].tobytes() != c.params[k].tobytes() for k in a.params)

    @pytest.mark.parametrize(
        "kwargs",
        [dict(taps=(4, 4)), dict(taps=(6, 4)), dict(taps=(0,)), dict(taps=(9,)), dict(init="xavier"), dict(width=0)],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            fftnet.init_stack(fftnet.StackConfig(**kwargs))

    def test_schemes_differ(self):
        base = fftnet.StackConfig(width=64)
        std = {s: np.std(fftnet.init_stack(base, init=s).params["fft.wz.4"]) for s in fftnet.INIT_SCHEMES}
        assert std["random-uniform"] == pytest.approx(1 / 8, rel=0.05)
        assert std["bacon-style"] == pytest.approx(1 / 8 / math.sqrt(3), rel=0.05)


class TestEncode:
    def test_single_layer_zero(self):
        stack = tiny_stack(2, 1, (1,), **{
            "fft.omega.0": [[1.0, 0, 0]], "fft.phi.0": [0.0],
            "fft.omega.1": [[0.0, 0, 0]], "fft.phi.1": [0.0],
            "fft.wz.1": [[1.0]], "fft.bz.1": [0.0], "fft.wy.1": [[1.0]], "fft.by.1": [0.0],
        })
        node = dc.points("p")
        z0 = dc.sin(dc.affine(node, dc.parameter("fft.omega.0"), dc.parameter("fft.phi.0")))
        assert dc.Evaluation({"p": np.zeros((1, 3)), **stack.params}).value(z0)[0, 0] == 0.0

    def test_two_layer_hand_evaluation(self):
        phi0 = 0.3
        stack = tiny_stack(2, 1, (1,), **{
            "fft.omega.0": [[0.0, 2.0, 0]], "fft.phi.0": [phi0],
            "fft.omega.1": [[1.0, 0, 0]], "fft.phi.1": [np.pi / 2],
            "fft.wz.1": [[1.0]], "fft.bz.1": [0.0], "fft.wy.1": [[1.0]], "fft.by.1": [0.0],
        })
        y = fftnet.encode(stack, np.zeros((1, 3)))[1]
        assert y[0, 0] == pytest.approx(math.sin(phi0), abs=1e-15)

    def test_matches_numpy_recurrence(self, rng):
        stack = fftnet.init_stack(fftnet.StackConfig(width=12, omega_bound=3.0, omega_bound_first=3.0))
        p = rng.uniform(-1, 1, (30, 3))
        P = stack.params
        h = lambda i: np.sin(p @ P[f"fft.omega.{i}"].T + P[f"fft.phi.{i}"])
        z = h(0)
        expect = {}
        for i in range(1, 9):
            z = h(i) * (z @ P[f"fft.wz.{i}"].T + P[f"fft.bz.{i}"])
            expect[i] = z @ P[f"fft.wy.{i}"].T + P[f"fft.by.{i}"]
        got = fftnet.encode(stack, p)
        for t in (4, 6, 8):
            np.testing.assert_allclose(got[t], expect[t], rtol=1e-12, atol=1e-14)

    def test_hadamard_expansion_inside_encoder(self, rng):
        stack = fftnet.init_stack(fftnet.StackConfig(width=6, omega_bound=3.0, omega_bound_first=3.0))
        p = rng.uniform(-1, 1, (40, 3))
        P = stack.params
        # z_1 = h_1 * (Wz z_0 + b): with z_0 = sin(a) and zero mixing the product is sin(a) sin(b)
        a = p @ P["fft.omega.0"].T + P["fft.phi.0"]
        b = p @ P["fft.omega.1"].T + P["fft.phi.1"]
        direct = np.sin(a) * np.sin(b)
        expanded = 0.5 * (np.sin(a + b - np.pi / 2) + np.sin(a - b + np.pi / 2))
        assert np.max(np.abs(direct - expanded)) <= 1e-10

    def test_non_finite_input(self):
        stack = fftnet.init_stack(fftnet.StackConfig(width=4))
        with pytest.raises(ValueError):
            fftnet.encode(stack, np.array([[np.nan, 0, 0]]))

    def test_bounded_by_weights(self, rng):
        stack = fftnet.init_stack(fftnet.StackConfig(width=16))
        p = rng.uniform(-3, 3, (200, 3))
        out = fftnet.encode(stack, p, levels=range(1, 9))
        P = stack.params
        bound = 1.0
        for i in range(1, 9):
            z_bound = np.abs(P[f"fft.wz.{i}"]).sum(1).max() * bound + np.abs(P[f"fft.bz.{i}"]).max()
            y_bound = np.abs(P[f"fft.wy.{i}"]).sum(1).max() * z_bound + np.abs(P[f"fft.by.{i}"]).max()
            assert np.abs(out[i]).max() <= y_bound
            bound = z_bound

    def test_feature_gradient_matches_fd(self, rng):
        stack = fftnet.init_stack(fftnet.StackConfig(width=8, omega_bound=3.0, omega_bound_first=3.0))
        p = dc.points("p")
        feat = fftnet.encode_nodes(stack.config, p, [6], fftnet.LeafCache())[6]
        f = dc.sum(feat * feat, axis=-1)
        g = dc.ExprGraph({"f": f})
        pts = rng.uniform(-1, 1, (100, 3))
        jac = dc.point_gradient(g, {"p": pts, **stack.params}).point_jacobian
        fd = np.zeros_like(jac)
        for k in range(3):
            e = np.zeros(3)
            e[k] = 1e-5
            fp = dc.evaluate(g, {"p": pts + e, **stack.params})["f"]
            fm = dc.evaluate(g, {"p": pts - e, **stack.params})["f"]
            fd[:, k] = (fp - fm) / 2e-5
        assert np.max(np.abs(jac - fd) / (np.abs(jac) + 1e-6)) <= 1e-6

    def test_linear_encoder(self, rng):
        stack = fftnet.init_stack(fftnet.StackConfig(width=5, encoder="linear"))
        p = rng.normal(size=(4, 3))
        out = fftnet.encode(stack, p, levels=(4, 8))
        np.testing.assert_allclose(out[4], p @ stack.params["lin.w"].T + stack.params["lin.b"])
        assert out[4] is out[8] or np.array_equal(out[4], out[8])


class TestSpectrum:
    def _unit_stack(self, rng, m=4):
        """Every layer has unit angular frequency along x only."""
        stack = fftnet.init_stack(fftnet.StackConfig(width=m, taps=(4, 8)))
        for i in range(9):
            om = np.zeros((m, 3))
            om[:, 0] = 1.0
            stack.params[f"fft.omega.{i}"] = om
        return stack

    def test_depth_limits_bandwidth(self, rng):
        stack = self._unit_stack(rng)
        # on [-pi, pi) integer angular frequencies fall exactly on DFT bins
        rep = fftnet.spectral_report(stack, axis=0, samples=256, extent=np.pi)
        for level in (4, 8):
            freqs, amps = rep[level]
            omega = 2 * np.pi * freqs
            energy_above = np.sum(amps[omega > level + 1.5] ** 2)
            assert energy_above <= 1e-20 * np.sum(amps**2)
        bw4 = fftnet.occupied_bandwidth(*rep[4], fraction=0.9999)
        bw8 = fftnet.occupied_bandwidth(*rep[8], fraction=0.9999)
        assert bw4 < bw8

    def test_constant_feature(self):
        stack = fftnet.init_stack(fftnet.StackConfig(width=4, omega_bound=0.0, omega_bound_first=0.0))
        freqs, amps = fftnet.spectral_report(stack, samples=64)[8]
        assert np.all(amps[1:] <= 1e-12 * amps[0])

    def test_single_tone(self):
        stack = tiny_stack(2, 1, (1,), **{
            "fft.omega.0": [[0.0, 0, 0]], "fft.phi.0": [np.pi / 2],
            "fft.omega.1": [[6.0, 0, 0]], "fft.phi.1": [0.0],
            "fft.wz.1": [[1.0]], "fft.bz.1": [0.0], "fft.wy.1": [[1.0]], "fft.by.1": [0.0],
        })
        freqs, amps = fftnet.spectral_report(stack, samples=128, extent=np.pi)[1]
        assert 2 * np.pi * freqs[np.argmax(amps)] == pytest.approx(6.0)
