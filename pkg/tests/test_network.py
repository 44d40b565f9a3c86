import time

import numpy as np
import pytest

from semgcnn.nn import (
    Linear,
    NetworkSpec,
    ShapeError,
    build_network,
    grad_check,
    load_checkpoint,
    save_checkpoint,
)
from semgcnn.nn.layers import BatchNorm
from semgcnn.nn.network import Block, Network

from oracles import N_PARAMETERS, shape_walk_parameter_count


class TestArchitecture:
    def test_shape_chain(self):
        net = build_network()
        shapes = dict(net.shape_chain())
        assert shapes["input"] == (4, 75)
        assert shapes["conv1"] == (64, 73)
        assert shapes["conv2"] == (64, 71)
        assert shapes["lc1"] == shapes["lc2"] == (64, 71)
        assert shapes["fc1_flatten"] == (4544,)
        assert [shapes[n] for n in ("fc1", "fc2", "fc3", "fc_out")] == [(512,), (512,), (128,), (6,)]

    def test_layer_table_names(self):
        assert build_network().layer_names == ["Conv1", "Conv2", "LC1", "LC2", "FC1", "FC2", "FC3",
                                               "6-Way FC", "SoftMax"]

    def test_parameter_count_pinned(self):
        assert build_network().n_parameters() == N_PARAMETERS

    def test_parameter_count_by_shape_walk(self):
        assert shape_walk_parameter_count() == N_PARAMETERS

    def test_dropout_sits_before_first_two_fc(self):
        names = [layer.name for layer in build_network().layers]
        assert names.index("fc1_dropout") == names.index("fc1") - 1
        assert names.index("fc2_dropout") == names.index("fc2") - 1
        assert "fc3_dropout" not in names

    def test_init_ranges(self):
        net = build_network(seed=3)
        for name, p in net.named_params():
            if name.endswith("gamma"):
                assert np.all(p.value == 1)
            elif name.endswith("beta"):
                assert np.all(p.value == 0)
        w = dict(net.named_params())["fc1.weight"].value
        assert np.abs(w).max() <= 1 / np.sqrt(4544)

    def test_wrong_input_shape(self):
        with pytest.raises(ShapeError):
            build_network().forward(np.zeros((2, 4, 74)))

    def test_window_too_short_for_spec(self):
        with pytest.raises(ShapeError):
            NetworkSpec(window_length=4)

    def test_predict_proba_rows_sum_to_one(self):
        net = build_network(seed=0)
        rng = np.random.default_rng(0)
        net.forward(rng.standard_normal((8, 4, 75)), train=True)
        p = net.predict_proba(rng.standard_normal((5, 4, 75)))
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_dropout_makes_train_mode_stochastic(self):
        net = build_network(seed=0)
        x = np.random.default_rng(0).standard_normal((6, 4, 75))
        a = net.forward(x, train=True)
        b = net.forward(x, train=True)
        assert not np.allclose(a, b)
        assert np.array_equal(net.forward(x, train=False), net.forward(x, train=False))


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        net = build_network(seed=11, dtype=np.float32)
        net.forward(np.random.default_rng(0).standard_normal((4, 4, 75)), train=True)
        save_checkpoint(net, tmp_path / "m.npz")
        back = load_checkpoint(tmp_path / "m.npz")
        a, b = net.state_dict(), back.state_dict()
        assert a.keys() == b.keys()
        for k in a:
            assert a[k].dtype == b[k].dtype
            assert np.array_equal(a[k], b[k]), k
        x = np.random.default_rng(1).standard_normal((3, 4, 75))
        assert np.array_equal(net.forward(x), back.forward(x))

    def test_spec_survives(self, tmp_path):
        spec = NetworkSpec(fc_units=(32, 16, 8), conv_channels=8)
        save_checkpoint(build_network(spec), tmp_path / "m.npz")
        assert load_checkpoint(tmp_path / "m.npz").spec == spec


class TestGradCheck:
    def test_full_network_with_fixed_dropout_masks(self):
        net = build_network(seed=0, dtype=np.float64)
        rng = np.random.default_rng(0)
        x = rng.standard_normal((4, 4, 75))
        y = np.array([0, 3, 5, 1])
        t = time.perf_counter()
        res = grad_check(net, x, y)
        assert time.perf_counter() - t < 120
        assert res.max_rel_error < 1e-4, res.errors
        assert res.passed()
        assert set(res.structural_zero) == {"conv1.bias", "conv2.bias", "fc1.bias", "fc2.bias", "fc3.bias"}

    def test_linear_toy_network(self):
        rng = np.random.default_rng(1)
        net = Network(None, [Block("a", [Linear(5, 4, rng, name="a")]), Block("b", [Linear(4, 3, rng, name="b")])])
        res = grad_check(net, rng.standard_normal((6, 5)), rng.integers(0, 3, 6), samples_per_tensor=50)
        assert res.max_rel_error < 1e-7

    def test_eval_mode_check(self):
        net = build_network(seed=2, spec=NetworkSpec(fc_units=(16, 16, 8), conv_channels=4))
        rng = np.random.default_rng(2)
        net.forward(rng.standard_normal((8, 4, 75)), train=True)
        res = grad_check(net, rng.standard_normal((3, 4, 75)), np.array([0, 1, 2]), train=False)
        assert res.max_rel_error < 1e-4

    def test_state_restored(self):
        net = build_network(seed=0, spec=NetworkSpec(fc_units=(16, 16, 8), conv_channels=4))
        bn = net.batchnorms()[0]
        before = bn.running_mean.copy()
        grad_check(net, np.random.default_rng(0).standard_normal((4, 4, 75)), np.zeros(4, dtype=int),
                   samples_per_tensor=2)
        assert np.array_equal(before, bn.running_mean)
        assert all(d.fixed_mask is None for d in net.dropouts())

    def test_detects_corrupted_backward(self, monkeypatch):
        net = build_network(seed=0, spec=NetworkSpec(fc_units=(16, 16, 8), conv_channels=4))
        original = BatchNorm.backward

        def broken(self, g):
            return 1.5 * original(self, g)

        monkeypatch.setattr(BatchNorm, "backward", broken)
        res = grad_check(net, np.random.default_rng(0).standard_normal((4, 4, 75)), np.array([0, 1, 2, 3]),
                         samples_per_tensor=3)
        assert not res.passed()

    def test_requires_double_precision(self):
        with pytest.raises(TypeError):
            grad_check(build_network(dtype=np.float32), np.zeros((2, 4, 75)), np.zeros(2, dtype=int))
