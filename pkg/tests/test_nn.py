import json

import numpy as np
import pytest

from curvesig.errors import DataError, NumericalError
from curvesig.nn import (AdamHyper, AdamState, MlpCheckpoint, ModelConfig, adam_step, backward, forward,
                         init_parameters, load_checkpoint, save_checkpoint)

TOY = ModelConfig(input_dim=6, first_block_width=4, layers_per_block=1, num_blocks=2)


def rel_err(a, b, floor=1e-7):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numeric_grad(f, arr, step=1e-4):
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + step
        up = f()
        arr[i] = old - step
        down = f()
        arr[i] = old
        g[i] = (up - down) / (2 * step)
    return g


def _check_all_grads(config, params, x, groups, seed=0):
    proj = np.random.default_rng(seed).normal(size=(len(x), 2))

    def loss():
        out, _ = forward(params, config, x, "train", groups=groups, update_running=False)
        return float((out * proj).sum())

    _, cache = forward(params, config, x, "train", groups=groups, update_running=False)
    grads = backward(params, config, cache, proj)
    worst = 0.0
    for name, arr in params.trainable().items():
        worst = max(worst, rel_err(grads[name], numeric_grad(loss, arr)).max())
    return worst


class TestConfig:
    def test_default_widths(self):
        cfg = ModelConfig()
        assert cfg.widths == [128] * 3 + [64] * 3 + [32] * 3 + [16] * 3

    def test_invalid(self):
        with pytest.raises(ValueError):
            ModelConfig(num_blocks=0)
        with pytest.raises(ValueError):
            ModelConfig(output_dim=3)
        with pytest.raises(ValueError):
            ModelConfig(first_block_width=4, num_blocks=4)


class TestForward:
    def test_shapes(self, rng):
        cfg = ModelConfig()
        params = init_parameters(cfg, rng)
        out, cache = forward(params, cfg, rng.normal(size=(10, 34)), "train")
        assert out.shape == (10, 2) and cache is not None
        out, cache = forward(params, cfg, rng.normal(size=(1, 34)), "eval")
        assert out.shape == (1, 2) and cache is None

    def test_eval_row_determinism(self, rng):
        params = init_parameters(TOY, rng)
        row = rng.normal(size=(1, 6))
        out, _ = forward(params, TOY, np.vstack([row, row]), "eval")
        np.testing.assert_array_equal(out[0], out[1])

    def test_eval_permutation_equivariance(self, rng):
        params = init_parameters(TOY, rng)
        x = rng.normal(size=(9, 6))
        perm = rng.permutation(9)
        a, _ = forward(params, TOY, x, "eval")
        b, _ = forward(params, TOY, x[perm], "eval")
        np.testing.assert_array_equal(a[perm], b)

    def test_zero_head(self, rng):
        params = init_parameters(TOY, rng)
        params.weights[-1][:] = 0
        out, _ = forward(params, TOY, rng.normal(size=(5, 6)), "eval")
        np.testing.assert_array_equal(out, 0.0)

    def test_batchnorm_statistics(self, rng):
        params = init_parameters(TOY, rng)
        _, cache = forward(params, TOY, rng.normal(size=(16, 6)) * 3 + 1, "train", groups=2)
        for zhat in cache.normalized:
            np.testing.assert_allclose(zhat.mean(axis=1), 0.0, atol=1e-12)
            np.testing.assert_allclose(zhat.var(axis=1), 1.0, atol=1e-4)

    def test_batchnorm_variance_without_epsilon(self, rng):
        cfg = ModelConfig(input_dim=6, first_block_width=4, layers_per_block=1, num_blocks=2, batchnorm_epsilon=0.0)
        params = init_parameters(cfg, rng)
        _, cache = forward(params, cfg, rng.normal(size=(16, 6)), "train")
        for zhat in cache.normalized:
            np.testing.assert_allclose(zhat.var(axis=1), 1.0, atol=1e-6)

    def test_rejections(self, rng):
        params = init_parameters(TOY, rng)
        with pytest.raises(DataError):
            forward(params, TOY, rng.normal(size=(1, 6)), "train")
        bad = rng.normal(size=(4, 6))
        bad[1, 2] = np.nan
        with pytest.raises(NumericalError):
            forward(params, TOY, bad, "eval")
        with pytest.raises(DataError):
            forward(params, TOY, rng.normal(size=(4, 5)), "eval")

    def test_running_statistics_converge(self, rng):
        params = init_parameters(TOY, rng)
        x = rng.normal(size=(12, 6)) * 2 + 0.5
        _, cache = forward(params, TOY, x, "train", update_running=False)
        target_mean = cache.batch_mean[0][0, 0]
        gaps = []
        for _ in range(30):
            forward(params, TOY, x, "train")
            gaps.append(np.abs(params.running_mean[0] - target_mean).max())
        ratios = np.array(gaps[1:]) / np.array(gaps[:-1])
        np.testing.assert_allclose(ratios, 1 - TOY.batchnorm_momentum, rtol=1e-6)
        np.testing.assert_allclose(params.running_var[0], cache.batch_var[0][0, 0], rtol=0.05)


class TestBackward:
    def test_zero_output_gradient(self, rng):
        params = init_parameters(TOY, rng)
        _, cache = forward(params, TOY, rng.normal(size=(8, 6)), "train")
        for g in backward(params, TOY, cache, np.zeros((8, 2))).values():
            np.testing.assert_array_equal(g, 0.0)

    def test_finite_differences_toy(self, rng):
        params = init_parameters(TOY, rng)
        assert _check_all_grads(TOY, params, rng.normal(size=(8, 6)), groups=2) < 1e-4

    @pytest.mark.parametrize("config", [
        ModelConfig(input_dim=4, first_block_width=3, layers_per_block=1, num_blocks=1),   # linear + bn + sine
        ModelConfig(input_dim=5, first_block_width=8, layers_per_block=3, num_blocks=2),
    ])
    def test_finite_differences_configs(self, rng, config):
        params = init_parameters(config, rng)
        params.gammas[0][:] = rng.uniform(0.5, 2.0, size=params.gammas[0].shape)
        params.betas[0][:] = rng.normal(size=params.betas[0].shape)
        assert _check_all_grads(config, params, rng.normal(size=(6, config.input_dim)), groups=1) < 1e-4

    def test_linearity(self, rng):
        params = init_parameters(TOY, rng)
        _, cache = forward(params, TOY, rng.normal(size=(8, 6)), "train")
        g1, g2 = rng.normal(size=(8, 2)), rng.normal(size=(8, 2))
        a = backward(params, TOY, cache, g1)
        b = backward(params, TOY, cache, g2)
        c = backward(params, TOY, cache, g1 + g2)
        for k in a:
            np.testing.assert_allclose(c[k], a[k] + b[k], atol=1e-10)

    def test_requires_cache(self, rng):
        params = init_parameters(TOY, rng)
        with pytest.raises(ValueError):
            backward(params, TOY, None, np.zeros((3, 2)))
        _, cache = forward(params, TOY, rng.normal(size=(8, 6)), "train")
        with pytest.raises(DataError):
            backward(params, TOY, cache, np.zeros((7, 2)))


class TestAdam:
    def test_zero_gradient(self, rng):
        params = init_parameters(TOY, rng)
        zeros = {k: np.zeros_like(v) for k, v in params.trainable().items()}
        new, state = adam_step(params, zeros, AdamState())
        assert state.step == 1
        for k, v in params.trainable().items():
            np.testing.assert_array_equal(new.trainable()[k], v)

    def test_first_step_magnitude(self, rng):
        # m1 = 0.1 g, v1 = 0.001 g^2 -> bias-corrected update = lr * g / (|g| + eps')
        params = init_parameters(TOY, rng)
        grads = {k: np.full_like(v, 0.37) for k, v in params.trainable().items()}
        new, _ = adam_step(params, grads, AdamState(), AdamHyper(lr=1e-3))
        for k, v in params.trainable().items():
            np.testing.assert_allclose(v - new.trainable()[k], 1e-3 * 0.37 / (0.37 + 1e-8), rtol=1e-9)

    def test_inputs_untouched(self, rng):
        params = init_parameters(TOY, rng)
        before = {k: v.copy() for k, v in params.trainable().items()}
        grads = {k: rng.normal(size=v.shape) for k, v in before.items()}
        adam_step(params, grads, AdamState())
        for k, v in params.trainable().items():
            np.testing.assert_array_equal(v, before[k])

    def test_non_finite(self, rng):
        params = init_parameters(TOY, rng)
        grads = {k: np.zeros_like(v) for k, v in params.trainable().items()}
        grads["W0"][0, 0] = np.inf
        with pytest.raises(NumericalError, match="W0"):
            adam_step(params, grads, AdamState())

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(5)
            params = init_parameters(TOY, rng)
            state = AdamState()
            for _ in range(5):
                x = rng.normal(size=(8, 6))
                _, cache = forward(params, TOY, x, "train")
                grads = backward(params, TOY, cache, rng.normal(size=(8, 2)))
                params, state = adam_step(params, grads, state)
            return params

        a, b = run(), run()
        for k, v in a.arrays().items():
            np.testing.assert_array_equal(v, b.arrays()[k])


class TestCheckpoint:
    def _ckpt(self, rng):
        params = init_parameters(TOY, rng)
        _, cache = forward(params, TOY, rng.normal(size=(8, 6)), "train")
        params, state = adam_step(params, backward(params, TOY, cache, rng.normal(size=(8, 2))), AdamState())
        return MlpCheckpoint(TOY, params, state, {"seed": 3, "epoch": 1, "loss_history_tail": [0.5, 0.25]})

    def test_round_trip(self, rng, tmp_path):
        ckpt = self._ckpt(rng)
        save_checkpoint(ckpt, tmp_path / "m.json")
        loaded = load_checkpoint(tmp_path / "m.json")
        assert loaded == ckpt
        for k, v in ckpt.parameters.arrays().items():
            assert loaded.parameters.arrays()[k].tobytes() == v.tobytes()
        x = rng.normal(size=(4, 6))
        np.testing.assert_array_equal(forward(loaded.parameters, TOY, x)[0], forward(ckpt.parameters, TOY, x)[0])

    def test_tampered(self, rng, tmp_path):
        path = tmp_path / "m.json"
        save_checkpoint(self._ckpt(rng), path)
        doc = json.loads(path.read_text())
        doc["payload"]["metadata"]["epoch"] = 99
        path.write_text(json.dumps(doc))
        with pytest.raises(DataError, match="checksum"):
            load_checkpoint(path)

    def test_truncated(self, rng, tmp_path):
        path = tmp_path / "m.json"
        save_checkpoint(self._ckpt(rng), path)
        path.write_text(path.read_text()[:100])
        with pytest.raises(DataError, match="corrupted"):
            load_checkpoint(path)

    def test_version_mismatch(self, rng, tmp_path):
        path = tmp_path / "m.json"
        save_checkpoint(self._ckpt(rng), path)
        doc = json.loads(path.read_text())
        doc["version"] = 2
        path.write_text(json.dumps(doc))
        with pytest.raises(DataError, match="version"):
            load_checkpoint(path)
