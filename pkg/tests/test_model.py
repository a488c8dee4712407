"""Model assembly: field wiring, rollout contracts, EOL, checkpoints."""

import numpy as np
import pytest

from sohode.autodiff import Tape, Tensor
from sohode.common import NOT_REACHED, CycleMap
from sohode.layers import (AttentionSpec, apply_attention, attention_scores,
                           attention_weights, conv1d, linear, lstm_forward)
from sohode.model import (ModelConfig, ModelField, SolverConfig, augment,
                          config_from_dict, config_to_dict, init_params,
                          load_checkpoint, predict_eol, rollout,
                          save_checkpoint)


def tiny_config(variant="acla", **kw):
    att = AttentionSpec.for_mode("start", 5) if variant == "acla" else AttentionSpec()
    defaults = dict(n_v=5, aug_dim=4, variant=variant, attention=att,
                    conv_filters=(6, 5), lstm_hidden=4,
                    solver=SolverConfig(method="rk4", substeps=2))
    defaults.update(kw)
    return ModelConfig(**defaults)


F0 = np.array([1.0, 0.0, 0.2, 0.5, 0.8, 1.0])


class TestConfigValidation:
    def test_node_must_be_unaugmented(self):
        with pytest.raises(ValueError, match="aug_dim"):
            tiny_config("node").validate()
        tiny_config("node", aug_dim=0).validate()

    def test_acla_needs_window(self):
        with pytest.raises(ValueError, match="m > 0"):
            tiny_config("acla", attention=AttentionSpec()).validate()

    def test_acl_must_not_carry_attention(self):
        with pytest.raises(ValueError, match="attention"):
            tiny_config("acl", attention=AttentionSpec("start", 1, 3)).validate()

    def test_unknown_variant(self):
        with pytest.raises(ValueError, match="variant"):
            tiny_config("mlp").validate()

    def test_state_dim(self):
        assert tiny_config().state_dim == 10


class TestAugment:
    def test_default_width_augmentation(self):
        state = augment(np.ones(22), 20)
        assert state.size == 42
        np.testing.assert_array_equal(state[22:], 0.0)

    def test_zero_aug_identity(self):
        np.testing.assert_array_equal(augment(F0, 0), F0)

    def test_small_example(self):
        np.testing.assert_array_equal(augment([1.0, 0.5], 2), [1.0, 0.5, 0.0, 0.0])

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            augment(F0, -1)


class TestVectorField:
    def test_zero_params_zero_derivative(self):
        cfg = tiny_config()
        params = init_params(cfg, seed=0)
        for t in params.tensors():
            t.values.fill(0.0)
        field = ModelField(cfg, params)
        np.testing.assert_array_equal(field(np.linspace(0.1, 1, cfg.state_dim)),
                                      np.zeros(cfg.state_dim))

    def test_matches_manual_layer_composition(self):
        cfg = tiny_config()
        params = init_params(cfg, seed=5)
        field = ModelField(cfg, params)
        y = np.linspace(-0.4, 1.0, cfg.state_dim)

        t = Tape()
        row = Tensor(y[None, :])
        feats = t.slice(row, 0, cfg.n_v + 1, axis=1)
        alpha = attention_weights(
            t, attention_scores(t, feats, params["att_w"], params["att_b"]))
        attended = apply_attention(t, row, alpha, cfg.attention)
        seq = t.reshape(attended, (cfg.state_dim, 1))
        seq = conv1d(t, seq, params["conv1_w"], params["conv1_b"])
        seq = conv1d(t, seq, params["conv2_w"], params["conv2_b"])
        hs = lstm_forward(t, seq, params["lstm_wx"], params["lstm_wh"],
                          params["lstm_b"])
        manual = linear(t, hs[-1], params["head_w"], params["head_b"]).values[0]

        np.testing.assert_allclose(field(y), manual, atol=1e-12)

    def test_mlp_variant_matches_manual(self):
        cfg = tiny_config("anode")
        params = init_params(cfg, seed=2)
        field = ModelField(cfg, params)
        y = np.linspace(0.0, 1.0, cfg.state_dim)
        manual = np.tanh(y @ params["mlp_w1"].values + params["mlp_b1"].values) \
            @ params["mlp_w2"].values + params["mlp_b2"].values
        np.testing.assert_allclose(field(y), manual, atol=1e-12)


class TestRollout:
    def test_zero_params_constant_trajectory(self):
        cfg = tiny_config()
        params = init_params(cfg, seed=0)
        for t in params.tensors():
            t.values.fill(0.0)
        out = rollout(cfg, params, F0, np.linspace(0, 1, 4))
        for row in out:
            np.testing.assert_array_equal(row, F0)

    def test_single_time_returns_initial(self):
        cfg = tiny_config()
        params = init_params(cfg, seed=1)
        out = rollout(cfg, params, F0, np.array([0.0]))
        np.testing.assert_array_equal(out, F0[None, :])

    def test_initial_row_fidelity_and_determinism(self):
        cfg = tiny_config()
        params = init_params(cfg, seed=3)
        grid = np.linspace(0, 1, 6)
        a = rollout(cfg, params, F0, grid)
        b = rollout(cfg, params, F0, grid)
        np.testing.assert_array_equal(a[0], F0)
        assert np.array_equal(a, b)

    def test_calibrated_linear_decay(self):
        # node field with zero hidden weights and bias slope -0.1 on soh
        cfg = ModelConfig(n_v=5, aug_dim=0, variant="node",
                          solver=SolverConfig(method="rk4", substeps=4))
        params = init_params(cfg, seed=0)
        for t in params.tensors():
            t.values.fill(0.0)
        params["mlp_b2"].values[0] = -0.1
        out = rollout(cfg, params, F0, np.array([0.0, 1.0]))
        assert abs(out[-1, 0] - (F0[0] - 0.1)) < 1e-6

    def test_grid_must_start_at_zero(self):
        cfg = tiny_config()
        params = init_params(cfg, seed=0)
        with pytest.raises(ValueError, match="start at 0"):
            rollout(cfg, params, F0, np.array([0.5, 1.0]))

    def test_acl_equals_acla_with_empty_window(self):
        cfg_acl = tiny_config("acl")
        cfg_acla0 = tiny_config("acla", attention=AttentionSpec())  # m = 0
        params = init_params(cfg_acl, seed=9)
        grid = np.linspace(0, 1, 5)
        a = rollout(cfg_acl, params, F0, grid)
        b = rollout(cfg_acla0, params, F0, grid)
        assert np.array_equal(a, b)


class TestPredictEol:
    def _flat_model(self, slope):
        cfg = ModelConfig(n_v=2, aug_dim=0, variant="node",
                          solver=SolverConfig(method="rk4", substeps=1))
        params = init_params(cfg, seed=0)
        for t in params.tensors():
            t.values.fill(0.0)
        params["mlp_b2"].values[0] = slope
        return cfg, params

    def test_constant_trajectory_not_reached(self):
        cfg, params = self._flat_model(0.0)
        f0 = np.array([0.9, 0.0, 1.0])
        out = predict_eol(cfg, params, f0, CycleMap(0.0, 100.0))
        assert out is NOT_REACHED

    def test_linear_crossing_at_midpoint(self):
        # soh falls 1.0 -> 0.6 over cycles 0..1000: crossing 0.8 at 500
        cfg, params = self._flat_model(-0.4)
        f0 = np.array([1.0, 0.0, 1.0])
        cmap = CycleMap(0.0, 1000.0)
        eol = predict_eol(cfg, params, f0, cmap, horizon_cycles=1000.0)
        assert abs(eol - 500.0) < 1e-6

    def test_bracketing_invariant(self):
        cfg, params = self._flat_model(-0.35)
        f0 = np.array([1.0, 0.0, 1.0])
        cmap = CycleMap(0.0, 800.0)
        eol = predict_eol(cfg, params, f0, cmap, fine_steps=400)
        grid = np.linspace(0.0, 3.0, 401)
        soh = rollout(cfg, params, f0, grid)[:, 0]
        cycles = cmap.cycle_at(grid)
        i = int(np.argmax(soh < 0.8))
        assert cycles[i - 1] <= eol <= cycles[i]

    def test_threshold_validation(self):
        cfg, params = self._flat_model(-0.4)
        with pytest.raises(ValueError):
            predict_eol(cfg, params, np.array([1.0, 0.0, 1.0]),
                        CycleMap(0.0, 10.0), threshold=1.5)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        cfg = tiny_config()
        params = init_params(cfg, seed=11)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, cfg, params)
        cfg2, params2 = load_checkpoint(path)
        assert config_to_dict(cfg2) == config_to_dict(cfg)
        assert params2.names() == params.names()
        for name in params.names():
            assert np.array_equal(params2[name].values, params[name].values)

    def test_rollouts_agree_after_reload(self, tmp_path):
        cfg = tiny_config()
        params = init_params(cfg, seed=11)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, cfg, params)
        cfg2, params2 = load_checkpoint(path)
        grid = np.linspace(0, 1, 4)
        assert np.array_equal(rollout(cfg, params, F0, grid),
                              rollout(cfg2, params2, F0, grid))

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 64)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)

    def test_tampered_config_rejected(self, tmp_path):
        cfg = tiny_config()
        params = init_params(cfg, seed=1)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, cfg, params)
        raw = bytearray(path.read_bytes())
        idx = raw.find(b'"acla"')
        raw[idx:idx + 6] = b'"aclb"'
        path.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="digest|variant"):
            load_checkpoint(path)


def test_config_dict_round_trip():
    cfg = tiny_config()
    assert config_to_dict(config_from_dict(config_to_dict(cfg))) == config_to_dict(cfg)
