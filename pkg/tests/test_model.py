import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ccmtad.clustering import ClusterAssignment
from ccmtad.errors import ContractViolation, InfeasibleAllocation, TrainingDiverged
from ccmtad.model import (
    Adam,
    BatchNorm,
    CausalMixerNet,
    ModelConfig,
    allocate_embedding_dims,
    causal_mask,
    fit,
    input_gradient_map,
    load_checkpoint,
    loss_mse,
    reconstruct_series,
    reconstruct_windows,
    save_checkpoint,
)
from conftest import make_tiny_net
from oracles import analytic_parameter_gradients, fd_input_gradient, fd_parameter_gradients, relative_error


class TestMask:
    def test_causal_mask_values(self):
        g = causal_mask(3, "causal")
        np.testing.assert_allclose(g, [[1, 1 / 2, 1 / 3], [0, 1 / 2, 1 / 3], [0, 0, 1 / 3]])

    def test_unit_and_dense(self):
        assert np.array_equal(causal_mask(3, "unit"), np.triu(np.ones((3, 3))))
        assert np.array_equal(causal_mask(3, "dense"), np.ones((3, 3)))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            causal_mask(3, "bogus")

    def test_masked_weights_stay_zero(self, tiny_net):
        w = tiny_net.params["block0.t1.weight"]
        assert np.all(w[np.tril_indices(4, -1)] == 0)


class TestAllocation:
    def test_worked_example(self):
        assert allocate_embedding_dims([5, 3, 2], 128).tolist() == [64, 38, 26]

    def test_zero_allocation_bumped(self):
        dims = allocate_embedding_dims([10, 1], 4)
        assert dims.sum() == 4 and dims.min() >= 1

    def test_infeasible(self):
        with pytest.raises(InfeasibleAllocation):
            allocate_embedding_dims([1, 1, 1], 2)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(1, 50), min_size=1, max_size=8), st.integers(0, 300))
    def test_properties(self, sizes, extra):
        d = len(sizes) + extra
        dims = allocate_embedding_dims(sizes, d)
        assert dims.sum() == d and dims.min() >= 1


class TestBatchNorm:
    def test_train_mode_normalizes(self, rng):
        bn = BatchNorm("b")
        x = rng.standard_normal((8, 5, 3)) * 4 + 2
        params = {"b.gamma": np.ones(3), "b.beta": np.zeros(3)}
        state = {"b.running_mean": np.zeros(3), "b.running_var": np.ones(3)}
        y, _ = bn.forward(x, params, state, train=True)
        flat = y.reshape(-1, 3)
        np.testing.assert_allclose(flat.mean(axis=0), 0, atol=1e-12)
        np.testing.assert_allclose(flat.var(axis=0), 1, atol=1e-5)
        np.testing.assert_allclose(state["b.running_mean"], 0.1 * x.reshape(-1, 3).mean(axis=0))
        np.testing.assert_allclose(
            state["b.running_var"], 0.9 + 0.1 * x.reshape(-1, 3).var(axis=0, ddof=1)
        )

    def test_eval_mode_uses_running_stats(self, rng):
        bn = BatchNorm("b")
        params = {"b.gamma": np.full(2, 2.0), "b.beta": np.full(2, 1.0)}
        state = {"b.running_mean": np.array([1.0, -1.0]), "b.running_var": np.array([4.0, 1.0])}
        x = rng.standard_normal((3, 2))
        y, _ = bn.forward(x, params, state, train=False)
        want = 2.0 * (x - state["b.running_mean"]) / np.sqrt(state["b.running_var"] + 1e-5) + 1.0
        np.testing.assert_allclose(y, want, rtol=1e-14)


class TestGradients:
    @pytest.mark.parametrize("mixer", ["causal", "dense"])
    def test_parameter_gradients_match_finite_differences(self, rng, mixer):
        net = make_tiny_net(mixer)
        x = rng.uniform(0, 1, (5, 4, 3))
        analytic = analytic_parameter_gradients(net, x)
        numeric = fd_parameter_gradients(net, x)
        assert set(analytic) == set(net.params)
        for name in net.params:
            assert relative_error(analytic[name], numeric[name]) < 1e-4, name

    def test_input_gradient_map_matches_finite_differences(self, rng, tiny_net):
        window = rng.uniform(0, 1, (4, 3))
        got = input_gradient_map(tiny_net, window, 2, 1)
        want = np.abs(fd_input_gradient(tiny_net, window, 2, 1))
        assert relative_error(got, want) < 1e-5

    def test_input_gradient_map_bounds(self, tiny_net):
        with pytest.raises(ValueError):
            input_gradient_map(tiny_net, np.zeros((4, 3)), 4, 0)
        with pytest.raises(ValueError):
            input_gradient_map(tiny_net, np.zeros((3, 3)), 0, 0)


class TestCausality:
    def test_future_inputs_do_not_affect_past_outputs(self, rng):
        net = make_tiny_net(L=8)
        x = rng.uniform(0, 1, (4, 8, 3))
        y = x.copy()
        y[:, 5:, :] += rng.standard_normal((4, 3, 3))
        a, _ = net.forward(x, train=False)
        b, _ = net.forward(y, train=False)
        assert np.array_equal(a[:, :5], b[:, :5])
        assert not np.allclose(a[:, 5:], b[:, 5:])

    def test_dense_mixer_leaks_future(self, rng):
        net = make_tiny_net("dense", L=8)
        x = rng.uniform(0, 1, (2, 8, 3))
        y = x.copy()
        y[:, 7] += 1.0
        a, _ = net.forward(x, train=False)
        b, _ = net.forward(y, train=False)
        assert np.abs(a[:, 0] - b[:, 0]).max() > 1e-6

    def test_eval_mode_batch_invariant(self, rng, tiny_net):
        x = rng.uniform(0, 1, (6, 4, 3))
        full, _ = tiny_net.forward(x, train=False)
        part, _ = tiny_net.forward(x[2:3], train=False)
        np.testing.assert_allclose(full[2:3], part, rtol=1e-12, atol=1e-14)

    def test_chunked_scoring_is_prefix_exact(self, rng):
        net = make_tiny_net(L=4)
        series = rng.uniform(0, 1, (700, 3))
        full = reconstruct_series(net, series)
        cut = reconstruct_series(net, series[:333])
        assert full[: cut.size].tobytes() == cut.tobytes()


class TestStructure:
    def test_count_parameters(self):
        a = ClusterAssignment(np.repeat([0, 1], [6, 2]), 2)
        net = CausalMixerNet(8, a, ModelConfig(L=5, d=8, d_f=2, n_blocks=1))
        c = net.count_parameters()
        dims = net.dims.tolist()
        assert dims == [6, 2]
        assert c["embedding_weights"] == 6 * 6 + 2 * 2
        assert c["temporal_mixer"] == 2 * (25 + 5)
        assert c["embedding_mixer"] == 8 * 16 + 16 + 16 * 8 + 8
        assert c["head"] == 8 * 8 + 8
        assert c["total"] == sum(int(np.prod(v.shape)) for v in net.params.values())

    def test_assignment_size_mismatch(self):
        with pytest.raises(ContractViolation):
            CausalMixerNet(4, ClusterAssignment(np.array([0, 1, 1]), 2), ModelConfig(d=4))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ModelConfig(temporal_mixer="rnn")
        with pytest.raises(ValueError):
            ModelConfig(L=1)

    def test_copy_is_independent(self, tiny_net):
        other = tiny_net.copy()
        other.params["head.bias"][:] = 5.0
        assert not np.array_equal(other.params["head.bias"], tiny_net.params["head.bias"])


class TestLoss:
    def test_only_last_step_counts(self, rng):
        target = rng.normal(size=(4, 5, 3))
        recon = target.copy()
        recon[:, :-1, :] += 100.0
        assert loss_mse(recon, target) == 0.0
        recon[:, -1, :] += 2.0
        assert loss_mse(recon, target) == pytest.approx(4.0)


class TestTraining:
    def test_adam_first_step(self):
        params = {"w": np.array([1.0, -1.0])}
        opt = Adam(params, lr=0.1)
        opt.step(params, {"w": np.array([0.5, -2.0])})
        # the bias-corrected first step moves each coordinate by lr * sign(grad)
        np.testing.assert_allclose(params["w"], [0.9, -0.9], rtol=1e-6)

    def test_fit_reduces_validation_loss_and_keeps_mask(self, two_block_dataset):
        values = two_block_dataset.values[:1000]
        values = (values - values.min(0)) / np.ptp(values, axis=0)
        a = ClusterAssignment(np.repeat([0, 1], 3), 2)
        cfg = ModelConfig(L=8, d=8, epochs=4, batch_size=64, learning_rate=3e-3)
        net = CausalMixerNet(6, a, cfg)
        report = fit(net, values[:800], values[800:])
        assert report.val_loss[-1] < 0.5 * report.initial_val_loss
        assert len(report.train_loss) == 4
        for name in net.temporal_weight_names():
            assert np.all(net.params[name][net.masked] == 0)

    def test_fit_is_deterministic(self, rng):
        x = rng.uniform(0, 1, (200, 3))
        nets = [make_tiny_net() for _ in range(2)]
        for n in nets:
            fit(n, x, config=ModelConfig(L=4, d=6, epochs=2, batch_size=16))
        for k in nets[0].params:
            assert nets[0].params[k].tobytes() == nets[1].params[k].tobytes()

    def test_zero_epochs_leaves_weights(self, rng, tiny_net):
        before = {k: v.copy() for k, v in tiny_net.params.items()}
        fit(tiny_net, rng.uniform(0, 1, (50, 3)), config=ModelConfig(L=4, d=6, epochs=0))
        assert all(np.array_equal(before[k], tiny_net.params[k]) for k in before)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_raises(self, rng, tiny_net):
        x = rng.uniform(0, 1, (50, 3))
        x[10, 1] = np.inf
        with pytest.raises(TrainingDiverged):
            fit(tiny_net, x, config=ModelConfig(L=4, d=6, epochs=1))


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, rng, tiny_net):
        x = rng.uniform(0, 1, (40, 3))
        fit(tiny_net, x, config=ModelConfig(L=4, d=6, epochs=1, batch_size=8))
        save_checkpoint(tiny_net, tmp_path / "ck", extra={"note": "x"})
        net2, extra = load_checkpoint(tmp_path / "ck")
        assert extra == {"note": "x"}
        for k in tiny_net.params:
            assert tiny_net.params[k].tobytes() == net2.params[k].tobytes()
        for k in tiny_net.state:
            assert tiny_net.state[k].tobytes() == net2.state[k].tobytes()
        windows = np.stack([x[i : i + 4] for i in range(30)])
        assert reconstruct_windows(tiny_net, windows).tobytes() == reconstruct_windows(net2, windows).tobytes()

    def test_manifest_contents(self, tmp_path, tiny_net):
        save_checkpoint(tiny_net, tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["config"]["L"] == 4
        assert manifest["cluster_assignment"]["labels"] == [0, 0, 1]
        total = sum(e["count"] for e in manifest["tensors"])
        assert (tmp_path / "tensors.f64").stat().st_size == 8 * total
