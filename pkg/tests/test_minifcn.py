import math

import numpy as np
import pytest

from cfcn.minifcn import (NetConfig, backward, class_weights, forward, init_net, layer_specs, loss, loss_and_grad,
                          predict, slice_weights)
from cfcn.minifcn import layers as L
from cfcn.minifcn.optim import adam_step, sgd_step
from cfcn.minifcn.train import (SliceSet, TrainConfig, TrainingCurve, load_checkpoint, pooled_dice,
                                save_checkpoint, train)
from oracles import conv_direct, fd_gradient, rel_error


def _batch(rng, n=2, hw=8, frac=0.3):
    x = rng.normal(size=(n, hw, hw))
    t = (rng.random((n, hw, hw)) < frac).astype(np.float64)
    return x, t


class TestLayers:
    def test_conv_matches_direct_sum(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 5, 6, 3))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        out, _ = L.conv_forward(x, w, b)
        np.testing.assert_allclose(out, conv_direct(x, w, b), atol=1e-12)

    def test_maxpool_matches_window_max(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 6, 4, 3))
        out, _ = L.maxpool_forward(x)
        for i in range(3):
            for j in range(2):
                np.testing.assert_array_equal(out[:, i, j], x[:, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max(axis=(1, 2)))

    def test_maxpool_tie_goes_to_first(self):
        x = np.ones((1, 2, 2, 1))
        _, (arg, _) = L.maxpool_forward(x)
        dx = L.maxpool_backward(np.ones((1, 1, 1, 1)), (arg, x.shape))
        assert dx[0, 0, 0, 0] == 1 and dx.sum() == 1

    def test_upsample_and_adjoint(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 3, 2, 2))
        up, shape = L.upsample_forward(x)
        assert np.all(up[0, 5, 3] == x[0, 2, 1])
        d = rng.normal(size=up.shape)
        # <up(x), d> == <x, up^T(d)>
        assert np.sum(up * d) == pytest.approx(np.sum(x * L.upsample_backward(d, shape)))

    def test_sigmoid_stable(self):
        z = np.array([-1000.0, -1.0, 0.0, 1.0, 1000.0])
        s = L.sigmoid(z)
        assert np.all(np.isfinite(s)) and s[2] == 0.5
        np.testing.assert_allclose(s[1:4], 1 / (1 + np.exp(-z[1:4])))


class TestForward:
    def test_zero_net_gives_half(self):
        net = init_net(NetConfig(), zero=True)
        assert np.all(forward(net, np.random.default_rng(0).normal(size=(2, 16, 16))) == 0.5)

    def test_shape_and_purity(self):
        rng = np.random.default_rng(1)
        net = init_net(NetConfig(depth=2), seed=3)
        x = rng.normal(size=(1, 64, 64)).astype(np.float32)
        x2 = np.concatenate([x, x])
        before = {k: v.copy() for k, v in net.params.items()}
        out = forward(net, x2)
        assert out.shape == (2, 64, 64)
        np.testing.assert_array_equal(out[0], out[1])
        np.testing.assert_array_equal(forward(net, x2), out)
        assert all(np.array_equal(before[k], net.params[k]) for k in before)

    def test_indivisible_input(self):
        with pytest.raises(ValueError):
            forward(init_net(NetConfig(depth=2)), np.zeros((1, 6, 8)))

    def test_predict_is_slice_independent(self):
        rng = np.random.default_rng(2)
        net = init_net(NetConfig(depth=1, base_channels=4), seed=0)
        x = rng.normal(size=(7, 8, 8)).astype(np.float32)
        out = predict(net, x)
        perm = rng.permutation(7)
        np.testing.assert_array_equal(predict(net, x[perm]), out[perm])
        # other chunkings agree up to float32 rounding
        np.testing.assert_allclose(predict(net, x, batch_size=3), forward(net, x), atol=1e-6)

    def test_layer_specs_channels_chain(self):
        specs = layer_specs(NetConfig(depth=2, base_channels=8))
        assert specs[0] == ("enc0a", 1, 8, 3) and specs[-1] == ("head", 8, 1, 1)
        assert ("dec1a", 32, 16, 3) in specs


class TestLoss:
    def test_worked_value(self):
        assert loss(np.array([0.5, 0.5]), np.array([1, 0]), np.array([1.0, 1.0])) == pytest.approx(math.log(2),
                                                                                                  abs=1e-12)

    def test_perfect_prediction_and_linearity(self):
        t = np.array([1, 0, 1, 0])
        for eps in (1e-2, 1e-4, 1e-6):
            assert loss(np.where(t == 1, 1 - eps, eps), t, np.ones(4)) < 2 * eps
        rng = np.random.default_rng(0)
        P, w = rng.uniform(0.1, 0.9, 4), rng.uniform(0.5, 2, 4)
        assert loss(P, t, 2 * w) == pytest.approx(2 * loss(P, t, w), rel=1e-14)

    def test_batch_convention_sum_of_slice_means(self):
        rng = np.random.default_rng(1)
        P = rng.uniform(0.05, 0.95, (3, 4, 4))
        t = (rng.random((3, 4, 4)) < 0.5).astype(float)
        w = np.ones_like(P)
        assert loss(P, t, w) == pytest.approx(sum(loss(P[i], t[i], w[i]) for i in range(3)), rel=1e-14)

    def test_clamp_keeps_loss_finite(self):
        assert np.isfinite(loss(np.array([0.0, 1.0]), np.array([1, 0]), np.ones(2)))

    def test_class_weights(self):
        np.testing.assert_array_equal(class_weights(np.array([1, 0, 0, 0])), [3, 1, 1, 1])
        np.testing.assert_array_equal(class_weights(np.array([1, 1, 0, 0])), [1, 1, 1, 1])
        with pytest.raises(ValueError, match="degenerate balance"):
            class_weights(np.ones(4))
        with pytest.raises(ValueError, match="degenerate balance"):
            class_weights(np.zeros(4))

    def test_balanced_populations_have_equal_weight(self):
        rng = np.random.default_rng(2)
        t = (rng.random((3, 8, 8)) < 0.1).astype(np.uint8)
        t[:, 0, 0] = 1
        w = slice_weights(t, True)
        for i in range(3):
            assert w[i][t[i] == 1].sum() == pytest.approx(w[i][t[i] == 0].sum(), rel=1e-12)

    def test_slice_weights_fall_back_when_degenerate(self):
        t = np.zeros((2, 4, 4))
        t[1, 0, 0] = 1
        w = slice_weights(t, True)
        assert np.all(w[0] == 1) and w[1, 0, 0] == 15
        assert np.all(slice_weights(t, False) == 1)


class TestGradients:
    @pytest.mark.parametrize("balanced", [False, True])
    def test_matches_finite_differences(self, balanced):
        rng = np.random.default_rng(3 + balanced)
        net = init_net(NetConfig(depth=1, base_channels=4), seed=11, dtype=np.float64)
        x, t = _batch(rng)
        w = slice_weights(t, balanced)
        grads = backward(net, x, t, w)
        num = fd_gradient(net, x, t, w)
        for k in net.params:
            assert rel_error(grads[k], num[k]) < 1e-4, k

    def test_zero_weight_pixels_have_no_effect(self):
        rng = np.random.default_rng(5)
        net = init_net(NetConfig(depth=1, base_channels=4), seed=1, dtype=np.float64)
        x, t = _batch(rng, n=1)
        w = rng.uniform(0.5, 2.0, t.shape)
        w[0, :4] = 0.0
        t2 = t.copy()
        t2[0, :4] = 1 - t2[0, :4]
        g1, g2 = backward(net, x, t, w), backward(net, x, t2, w)
        for k in g1:
            np.testing.assert_allclose(g1[k], g2[k], atol=1e-14)

    def test_duplicated_batch_doubles_gradient(self):
        rng = np.random.default_rng(6)
        net = init_net(NetConfig(depth=1, base_channels=4), seed=2, dtype=np.float64)
        x, t = _batch(rng, n=1)
        w = np.ones_like(t)
        g1 = backward(net, x, t, w)
        g2 = backward(net, np.concatenate([x, x]), np.concatenate([t, t]), np.concatenate([w, w]))
        for k in g1:
            np.testing.assert_allclose(g2[k], 2 * g1[k], rtol=1e-12, atol=1e-15)


class TestOptimizers:
    def test_sgd_rules(self):
        p = {"a": np.array([1.0, -2.0])}
        g = {"a": np.array([0.5, 0.25])}
        sgd_step(p, g, {}, lr=0.1)
        np.testing.assert_allclose(p["a"], [0.95, -2.025])
        p = {"a": np.array([1.0])}
        state = {"velocity": {"a": np.array([1.0])}}
        sgd_step(p, {"a": np.zeros(1)}, state, lr=0.1, momentum=0.8)
        np.testing.assert_allclose(p["a"], [1.8])
        p = {"a": np.array([2.0])}
        sgd_step(p, {"a": np.zeros(1)}, {}, lr=0.1, weight_decay=0.5)
        np.testing.assert_allclose(p["a"], [2.0 * (1 - 0.05)])

    @pytest.mark.parametrize("c", [3.0, -0.2])
    def test_adam_first_step(self, c):
        lr, eps = 0.01, 0.1
        p = {"a": np.array([1.0])}
        adam_step(p, {"a": np.array([c])}, {}, lr, eps)
        # bias correction makes the first moments exactly c and c^2
        np.testing.assert_allclose(p["a"], 1.0 - lr * c / (abs(c) + eps), rtol=1e-14)

    def test_adam_zero_gradient_and_elementwise(self):
        p = {"a": np.array([1.0, 1.0, 5.0])}
        state = {}
        rng = np.random.default_rng(0)
        for _ in range(5):
            g = rng.normal()
            adam_step(p, {"a": np.array([g, g, 0.0])}, state, 0.01)
        assert p["a"][0] == p["a"][1] and p["a"][2] == 5.0
        assert state["t"] == 5


def _tiny_sets(seed=0, n=12, hw=8):
    rng = np.random.default_rng(seed)
    truth = np.zeros((n, hw, hw), np.uint8)
    for i in range(n):
        r, c = rng.integers(1, hw - 3, 2)
        truth[i, r:r + 3, c:c + 3] = 1
    images = truth * 1.0 + rng.normal(0, 0.3, truth.shape)
    return SliceSet(images[:8], truth[:8]), SliceSet(images[8:], truth[8:])


class TestTraining:
    def test_lr_zero_keeps_init(self):
        tr, te = _tiny_sets()
        cfg = TrainConfig(lr=0.0, iterations=5, eval_every=5)
        net, _ = train(tr, te, NetConfig(depth=1, base_channels=2), cfg)
        ref = init_net(NetConfig(depth=1, base_channels=2), seed=cfg.seed)
        assert all(np.array_equal(net.params[k], ref.params[k]) for k in ref.params)

    def test_same_seed_same_params_and_curve(self):
        from cfcn.preprocess import AugmentParams
        tr, te = _tiny_sets()
        cfg = TrainConfig(optimizer="adam", adam_eps=1e-8, lr=1e-2, iterations=12, eval_every=5, seed=4)
        aug = AugmentParams(seed=2, max_rotation_deg=10, noise_scale=0.1)
        a, ca = train(tr, te, NetConfig(depth=1, base_channels=2), cfg, aug)
        b, cb = train(tr, te, NetConfig(depth=1, base_channels=2), cfg, aug)
        assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
        assert ca == cb and ca.iteration == [5, 10, 12]

    def test_learns_an_easy_task(self):
        tr, te = _tiny_sets(n=40)
        cfg = TrainConfig(optimizer="adam", adam_eps=1e-8, lr=1e-2, iterations=150, eval_every=150,
                          weight_decay=0.0)
        net, curve = train(tr, te, NetConfig(depth=1, base_channels=4), cfg)
        assert curve.test_dice[-1] > 0.8

    def test_lr_schedule(self):
        cfg = TrainConfig(lr=1.0, lr_decay_every=10, lr_decay=0.5)
        assert [cfg.lr_at(i) for i in (1, 10, 11, 21)] == [1.0, 1.0, 0.5, 0.25]

    def test_empty_set_rejected(self):
        with pytest.raises(ValueError):
            train(SliceSet(np.zeros((0, 8, 8)), np.zeros((0, 8, 8))), None, NetConfig(depth=1), TrainConfig())

    def test_curve_csv(self, tmp_path):
        c = TrainingCurve()
        c.append(10, 0.5, 0.25, 0.125)
        with pytest.raises(ValueError):
            c.append(10, 0, 0, 0)
        c.write_csv(tmp_path / "c.csv")
        assert (tmp_path / "c.csv").read_text().splitlines() == ["iteration,loss,train_dice,test_dice",
                                                                 "10,0.5,0.25,0.125"]

    def test_pooled_dice(self):
        a = np.array([[1, 1, 0, 0]])
        b = np.array([[1, 0, 1, 0]])
        assert pooled_dice(a, b) == 0.5 and pooled_dice(a * 0, b * 0) == 1.0


class TestCheckpoint:
    def test_round_trip_forward_identical(self, tmp_path):
        net = init_net(NetConfig(depth=2, base_channels=4), seed=7)
        save_checkpoint(net, tmp_path / "ck.json")
        back = load_checkpoint(tmp_path / "ck.json", NetConfig(depth=2, base_channels=4))
        assert all(net.params[k].tobytes() == back.params[k].tobytes() for k in net.params)
        x = np.random.default_rng(0).normal(size=(2, 16, 16)).astype(np.float32)
        np.testing.assert_array_equal(forward(net, x), forward(back, x))

    def test_config_mismatch(self, tmp_path):
        save_checkpoint(init_net(NetConfig(depth=2, base_channels=4)), tmp_path / "ck.json")
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "ck.json", NetConfig(depth=1, base_channels=4))

    def test_fine_tune_zero_iterations(self, tmp_path):
        tr, te = _tiny_sets()
        init = init_net(NetConfig(depth=1, base_channels=2), seed=3)
        save_checkpoint(init, tmp_path / "ck.json")
        net, _ = train(tr, te, NetConfig(depth=1, base_channels=2), TrainConfig(iterations=0),
                       init=load_checkpoint(tmp_path / "ck.json"))
        assert all(net.params[k].tobytes() == init.params[k].tobytes() for k in init.params)
