import numpy as np
import pytest

from maclookup.autograd import Tensor, precision
from maclookup.lut import (LutConfig, LutConfigError, LutNetwork, export_cube, fit_lut, lattice_pairs,
                           lipschitz_probe, lut_apply_image, lut_forward, parse_cube, sample_lattice,
                           trilinear_lookup)


@pytest.fixture
def net():
    return LutNetwork(LutConfig(), np.random.default_rng(0))


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


class TestNetwork:
    def test_layer_widths_chain(self):
        n = LutNetwork(LutConfig(hidden=(16, 8), cond_dim=3))
        assert n.widths == [6, 16, 8, 3]

    def test_zero_network_is_mid_grey(self, net, rng):
        net.zero_()
        out = lut_forward(net, rng.uniform(size=(10, 3)))
        np.testing.assert_array_equal(out.data, 0.5)

    def test_range_and_count(self, net, rng):
        out = lut_forward(net, rng.uniform(size=(257, 3)))
        assert out.shape == (257, 3)
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0

    def test_hand_evaluation(self):
        with precision("float64"):
            n = LutNetwork(LutConfig(hidden=(2,), activation="relu"))
            n.weights[0].data = np.array([[1.0, -2.0], [0.5, 0.0], [0.0, 1.0]])
            n.biases[0].data = np.array([0.1, 0.3])
            n.weights[1].data = np.array([[1.0, 0.0, -1.0], [2.0, 1.0, 0.5]])
            n.biases[1].data = np.array([0.0, -0.5, 0.2])
            out = lut_forward(n, np.array([[1.0, 0.0, 0.0]])).data[0]
        h = np.maximum(np.array([1.0 * 1 + 0.1, -2.0 * 1 + 0.3]), 0.0)
        ref = sigmoid(np.array([h[0] + 2 * h[1], h[1] - 0.5, -h[0] + 0.5 * h[1] + 0.2]))
        np.testing.assert_allclose(out, ref, atol=1e-6)

    def test_condition_arity(self, rng):
        n = LutNetwork(LutConfig(hidden=(4,), cond_dim=3))
        with pytest.raises(LutConfigError):
            lut_forward(n, rng.uniform(size=(2, 3)))
        with pytest.raises(LutConfigError):
            lut_forward(n, rng.uniform(size=(2, 3)), cond=[0.1, 0.2])
        assert lut_forward(n, rng.uniform(size=(2, 3)), cond=[0.1, 0.2, 0.3]).shape == (2, 3)

    def test_unconditional_rejects_condition(self, net, rng):
        with pytest.raises(LutConfigError):
            lut_forward(net, rng.uniform(size=(2, 3)), cond=[0.5])

    def test_unknown_activation(self):
        with pytest.raises(LutConfigError):
            LutNetwork(LutConfig(activation="tanh"))

    def test_per_pixel_independence(self, net, rng):
        x = rng.uniform(size=(50, 3)).astype(np.float32)
        perm = rng.permutation(50)
        a = lut_forward(net, x).data
        b = lut_forward(net, x[perm]).data
        np.testing.assert_array_equal(a[perm], b)

    def test_image_application_matches_flat(self, net, rng):
        img = rng.uniform(size=(3, 4, 5)).astype(np.float32)
        out = lut_apply_image(net, Tensor(img)).data
        flat = lut_forward(net, img.reshape(3, -1).T).data
        np.testing.assert_array_equal(out, flat.T.reshape(3, 4, 5))

    def test_continuity_probe_is_finite(self, net):
        assert np.isfinite(lipschitz_probe(net, density=9))


class TestLattice:
    def test_corners(self):
        lat = sample_lattice(2)
        assert lat.samples.shape == (8, 3)
        assert {tuple(p) for p in lat.samples} == {(r, g, b) for r in (0, 1) for g in (0, 1) for b in (0, 1)}

    def test_midpoint(self):
        lat = sample_lattice(3)
        assert len(lat.samples) == 27
        assert any(np.array_equal(p, [0.5, 0.5, 0.5]) for p in lat.samples)

    def test_density_17(self):
        s = sample_lattice(17).samples
        assert len(s) == 4913 and s.min() == 0.0 and s.max() == 1.0
        np.testing.assert_allclose(np.diff(np.unique(s[:, 0])), 1 / 16)

    def test_red_fastest(self):
        s = sample_lattice(3).samples
        np.testing.assert_array_equal(s[:3, 0], [0, 0.5, 1])
        np.testing.assert_array_equal(s[:3, 1:], 0)

    def test_too_sparse(self):
        with pytest.raises(LutConfigError):
            sample_lattice(1)


class TestFit:
    def test_zero_steps(self, net):
        x = sample_lattice(3).samples
        before = net.state_dict()
        trace = fit_lut(net, x, x, steps=0)
        assert len(trace) == 1
        for k, v in net.state_dict().items():
            np.testing.assert_array_equal(v, before[k])

    def test_identity_9(self, net):
        x, t = lattice_pairs(sample_lattice(9), lambda c: c)
        trace = fit_lut(net, x, t, steps=2000)
        assert len(trace) == 2001
        assert trace[-1] <= 0.01
        assert trace[-1] < trace[0]

    def test_channel_swap_9(self, net):
        x, t = lattice_pairs(sample_lattice(9), lambda c: c[:, [2, 0, 1]])
        trace = fit_lut(net, x, t, steps=5000)
        assert trace[-1] <= 0.02

    def test_mismatched_shapes(self, net):
        with pytest.raises(ValueError):
            fit_lut(net, np.zeros((4, 3)), np.zeros((5, 3)), steps=1)


class TestCube:
    def test_constant_net(self):
        n = LutNetwork(LutConfig()).zero_()
        text = export_cube(n, 2).decode()
        lines = text.strip().split("\n")
        assert lines[0] == "LUT_3D_SIZE 2"
        assert lines[1:] == ["0.5 0.5 0.5"] * 8

    def test_header(self, net):
        assert export_cube(net, 5).decode().split("\n")[0] == "LUT_3D_SIZE 5"

    def test_file_written(self, net, tmp_path):
        path = tmp_path / "a.cube"
        data = export_cube(net, 3, path=path, title="demo")
        assert path.read_bytes() == data
        assert parse_cube(data).shape == (3, 3, 3, 3)

    def test_trilinear_matches_forward(self, net, rng):
        x, t = lattice_pairs(sample_lattice(9), lambda c: c)
        fit_lut(net, x, t, steps=300)
        table = parse_cube(export_cube(net, 33))
        colors = rng.uniform(size=(100, 3))
        direct = lut_forward(net, colors.astype(np.float32)).data
        assert np.abs(trilinear_lookup(table, colors) - direct).max() <= 0.02

    def test_trilinear_exact_on_nodes(self, net):
        table = parse_cube(export_cube(net, 5))
        nodes = sample_lattice(5).samples
        np.testing.assert_allclose(trilinear_lookup(table, nodes), table.reshape(-1, 3), atol=1e-12)

    def test_bad_size(self, net):
        with pytest.raises(LutConfigError):
            export_cube(net, 1)
