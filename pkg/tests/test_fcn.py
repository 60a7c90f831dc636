"""Classifier architecture, gradient, and training-loop tests."""

import math

import numpy as np
import pytest

from beardiag import fcn, nn_core as nn
from beardiag.errors import ConfigError, LabelError
from gradcheck import max_rel_error, numeric_grad

TINY = fcn.FcnConfig(
    n_f=64,
    stem_kernel=8,
    stem_stride=2,
    stem_channels=2,
    branch_kernels=(3, 5),
    block_widths=(4, 6),
    cam_reduction=2,
    pool_width=2,
    head_pool_width=2,
    hidden_units=8,
    n_classes=3,
)


def rng(seed=0):
    return np.random.default_rng(seed)


class TestFaultLabels:
    def test_layout(self):
        assert fcn.fault_location(0) is None
        assert fcn.fault_location(1) == "inner ring"
        assert fcn.fault_severity(3) == "severe"
        assert fcn.fault_location(5) == "ball"
        assert fcn.fault_location(9) == "outer ring"
        assert fcn.fault_severity(7) == "minor"

    def test_descriptions(self):
        assert fcn.fault_description(0) == "normal bearing condition"
        assert fcn.fault_description(9) == "severe fault of bearing outer ring"
        assert len(fcn.all_fault_descriptions()) == 10

    def test_out_of_range(self):
        with pytest.raises(LabelError):
            fcn.fault_location(10)
        with pytest.raises(LabelError):
            fcn.fault_severity(-1)


class TestConfig:
    def test_default_parameter_count_in_window(self):
        count = fcn.FcnConfig(n_f=24000).parameter_count()
        assert 500_000 <= count <= 1_500_000

    def test_parameter_count_monotone_in_n_f(self):
        counts = [fcn.FcnConfig(n_f=n).parameter_count() for n in (6000, 12000, 24000, 48000)]
        assert counts == sorted(counts)
        assert len(set(counts)) == len(counts)

    def test_analytic_count_matches_built_model(self):
        model = fcn.FcnModel(TINY, seed=0)
        assert model.parameter_count() == TINY.parameter_count()

    def test_even_branch_kernel_rejected(self):
        with pytest.raises(ConfigError):
            fcn.FcnConfig(branch_kernels=(2, 4))

    def test_excessive_reduction_rejected(self):
        with pytest.raises(ConfigError):
            fcn.FcnConfig(n_f=64, stem_kernel=8, stem_stride=2, block_widths=(2, 2, 2),
                          branch_kernels=(3,), cam_reduction=64)


class TestChannelAttention:
    def test_zero_mlp_gives_half_gate(self):
        cam = fcn.ChannelAttention("cam", 4, 2, rng(0))
        for p in cam.params():
            p.value[...] = 0.0
        x = rng(1).normal(size=(2, 4, 6))
        np.testing.assert_allclose(cam.forward(x), 0.5 * x, atol=1e-15)

    def test_matches_direct_formula_tiny_case(self):
        cam = fcn.ChannelAttention("cam", 2, 1, rng(2))
        x = rng(3).normal(size=(1, 2, 2))
        out = cam.forward(x)
        # direct evaluation of the published gating formula
        avg = x.mean(axis=2)
        mx = x.max(axis=2)
        w1, b1 = cam.w1.value, cam.b1.value
        w2, b2 = cam.w2.value, cam.b2.value

        def mlp(v):
            return np.maximum(v @ w1.T + b1, 0) @ w2.T + b2

        gate = 1.0 / (1.0 + np.exp(-(mlp(avg) + mlp(mx))))
        np.testing.assert_allclose(out, x * gate[:, :, None], atol=1e-12)

    def test_gates_strictly_inside_unit_interval(self):
        cam = fcn.ChannelAttention("cam", 6, 3, rng(4))
        x = rng(5).normal(size=(3, 6, 10))
        out = cam.forward(x)
        valid = np.abs(x) >= 1e-9
        gates = out[valid] / x[valid]
        assert np.all(gates > 0)
        assert np.all(gates < 1)

    def test_reduction_larger_than_channels_rejected(self):
        with pytest.raises(ConfigError):
            fcn.ChannelAttention("cam", 4, 8, rng(0))

    def test_gradient(self):
        cam = fcn.ChannelAttention("cam", 4, 2, rng(6))
        x = rng(7).normal(size=(2, 4, 5))
        dy = rng(8).normal(size=(2, 4, 5))
        cam.forward(x)
        dx = cam.backward(dy)
        num = numeric_grad(lambda v: float((cam.forward(v) * dy).sum()), x)
        assert max_rel_error(dx, num) < 1e-4
        for p in cam.params():
            analytic = p.grad.copy()

            def loss_wrt_param(v, p=p):
                old = p.value
                p.value = v
                out = float((cam.forward(x) * dy).sum())
                p.value = old
                return out

            assert max_rel_error(analytic, numeric_grad(loss_wrt_param, p.value.copy())) < 1e-4


class TestMultiscaleBlock:
    def test_concat_width_and_pooling(self):
        block = fcn.MultiscaleBlock("b", 4, 8, (3, 5, 7), 4, 2, True, rng(9))
        x = rng(10).normal(size=(2, 4, 12))
        out = block.forward(x, train=True)
        assert out.shape == (2, 8, 6)

    def test_matches_composition_of_primitives(self):
        block = fcn.MultiscaleBlock("b", 3, 4, (3, 5), 2, 2, False, rng(11))
        x = rng(12).normal(size=(2, 3, 10))
        out = block.forward(x)
        # recompose from the primitive ops with the block's own weights
        parts = [
            nn.conv1d_forward(x, conv.w.value, conv.b.value, 1, conv.padding)[0]
            for conv in block.branches
        ]
        cat = np.concatenate(parts, axis=1)
        att = block.cam.forward(cat)
        fused = nn.conv1d_forward(att, block.fuse.w.value, block.fuse.b.value, 1, 0)[0]
        act = np.maximum(fused, 0)
        expected = nn.windowed_max_pool_forward(act, 2)[0]
        np.testing.assert_allclose(out, expected, atol=1e-12)


class TestModelShapes:
    def test_default_encode_shape(self):
        cfg = fcn.FcnConfig(n_f=24000)
        model = fcn.FcnModel(cfg, seed=0)
        x = rng(13).normal(size=(2, 3, 24000)) * 0.01
        feats = model.encode(x)
        # stem: 2993, blocks: 748/187/46, head pool: 23 -> 128 * 23 features
        assert feats.shape == (2, cfg.feature_width)
        assert cfg.feature_width == 128 * 23

    def test_logits_shape_and_argmax(self):
        model = fcn.FcnModel(TINY, seed=1)
        x = rng(14).normal(size=(4, 3, 64))
        logits = model.classify(x)
        assert logits.shape == (4, 3)
        assert logits.argmax(axis=1).shape == (4,)

    def test_zero_aux_channels_still_finite(self):
        model = fcn.FcnModel(TINY, seed=2)
        x = rng(15).normal(size=(2, 3, 64))
        x[:, 1:, :] = 0.0
        assert np.all(np.isfinite(model.classify(x)))

    def test_batch_permutation_equivariance(self):
        model = fcn.FcnModel(TINY, seed=3)
        x = rng(16).normal(size=(5, 3, 64))
        perm = np.array([3, 0, 4, 1, 2])
        out = model.classify(x, train=False)
        out_perm = model.classify(x[perm], train=False)
        np.testing.assert_allclose(out_perm, out[perm], atol=1e-12)

    def test_deterministic_forward(self):
        model = fcn.FcnModel(TINY, seed=4)
        x = rng(17).normal(size=(3, 3, 64))
        np.testing.assert_array_equal(model.classify(x), model.classify(x))

    def test_input_scaling_changes_logits(self):
        model = fcn.FcnModel(TINY, seed=5)
        x = rng(18).normal(size=(2, 3, 64))
        assert not np.allclose(model.classify(x), model.classify(3.0 * x))

    def test_stems_share_no_parameters(self):
        model = fcn.FcnModel(TINY, seed=6)
        w0 = model.stems[0].w.value
        w1 = model.stems[1].w.value
        assert w0 is not w1
        assert not np.array_equal(w0, w1)


class TestEndToEndGradient:
    def test_full_model_gradient_matches_finite_differences(self):
        model = fcn.FcnModel(TINY, seed=7)
        g = rng(19)
        x = g.normal(size=(2, 3, 64))
        labels = np.array([0, 2])

        def loss_fn():
            logits = model.classify(x, train=True)
            return nn.softmax_cross_entropy(logits, labels)

        loss, dlogits = loss_fn()
        for p in model.params():
            p.grad[...] = 0.0
        model.backward(dlogits)

        checked = 0
        for p in model.params():
            if not p.trainable:
                continue
            flat = p.value.reshape(-1)
            gflat = p.grad.reshape(-1)
            probe = rng(checked).choice(flat.size, size=min(6, flat.size), replace=False)
            for i in probe:
                orig = flat[i]
                h = 1e-5
                flat[i] = orig + h
                fp = loss_fn()[0]
                flat[i] = orig - h
                fm = loss_fn()[0]
                flat[i] = orig
                numeric = (fp - fm) / (2 * h)
                denom = max(abs(numeric), abs(gflat[i]), 1e-3)
                assert abs(numeric - gflat[i]) / denom < 1e-3, (
                    f"{p.name}[{i}]: analytic {gflat[i]:.3e} vs numeric {numeric:.3e}"
                )
                checked += 1
        assert checked > 50


class TestCheckpointRoundTrip:
    def test_save_load_preserves_behavior(self, tmp_path):
        model = fcn.FcnModel(TINY, seed=8)
        x = rng(20).normal(size=(2, 3, 64))
        expected = model.classify(x)
        path = tmp_path / "model.ckpt"
        fcn.save_model(path, model, {"dcn_beta": 0.01})
        model2, extras = fcn.load_model(path)
        assert extras == {"dcn_beta": 0.01}
        np.testing.assert_array_equal(model2.classify(x), expected)
        assert model2.config == TINY


def _separable_toy_batches(n_per_class=40, n_f=96, n_classes=3, seed=0):
    """Three synthetic spectral classes: energy parked in distinct bands."""
    g = rng(seed)
    xs, ys = [], []
    for cls in range(n_classes):
        base = g.normal(scale=0.02, size=(n_per_class, 3, n_f))
        lo = 10 + 25 * cls
        base[:, 0, lo : lo + 12] += 1.0
        base[:, 2, lo : lo + 12] += 1.0
        xs.append(base)
        ys.append(np.full(n_per_class, cls))
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    order = g.permutation(len(x))
    return x[order], y[order]


class TestPretrain:
    CFG = fcn.FcnConfig(
        n_f=96, stem_kernel=8, stem_stride=2, stem_channels=4,
        branch_kernels=(3, 5), block_widths=(8, 12), cam_reduction=2,
        pool_width=2, head_pool_width=2, hidden_units=16, n_classes=3,
    )

    def test_initial_loss_near_log_gamma(self):
        x, y = _separable_toy_batches(n_per_class=10)
        model = fcn.FcnModel(self.CFG, seed=9)
        logits = model.classify(x, train=True)
        loss, _ = nn.softmax_cross_entropy(logits, y)
        assert abs(loss - math.log(3)) < 0.35

    def test_learns_separable_task(self):
        x, y = _separable_toy_batches(n_per_class=40)
        split = int(0.8 * len(x))
        model = fcn.FcnModel(self.CFG, seed=10)
        log = fcn.pretrain(
            model, (x[:split], y[:split]), (x[split:], y[split:]),
            epochs=50, batch_size=32, lr=3e-3, weight_decay=0.0, seed=1,
            stop_at_val_accuracy=0.999,
        )
        train_acc = fcn.accuracy(model, x[:split], y[:split])
        assert train_acc >= 0.99, f"train accuracy {train_acc} after {len(log.epochs)} epochs"

    def test_fixed_seed_reproduces_weights(self):
        x, y = _separable_toy_batches(n_per_class=8)
        states = []
        for _ in range(2):
            model = fcn.FcnModel(self.CFG, seed=11)
            fcn.pretrain(model, (x, y), (x, y), epochs=2, batch_size=16,
                         lr=1e-3, seed=7)
            states.append(model.state_dict())
        for name in states[0]:
            assert np.array_equal(states[0][name], states[1][name]), name

    def test_best_validation_weights_retained(self):
        x, y = _separable_toy_batches(n_per_class=20)
        model = fcn.FcnModel(self.CFG, seed=12)
        log = fcn.pretrain(model, (x, y), (x, y), epochs=6, batch_size=32,
                           lr=3e-3, seed=3)
        final_acc = fcn.accuracy(model, x, y)
        assert final_acc == pytest.approx(log.best_val_accuracy, abs=1e-9)

    def test_empty_dataset_rejected(self):
        model = fcn.FcnModel(self.CFG, seed=13)
        empty = (np.zeros((0, 3, 96)), np.zeros(0, dtype=int))
        with pytest.raises(Exception) as err:
            fcn.pretrain(model, empty, empty, epochs=1)
        assert "non-empty" in str(err.value)
