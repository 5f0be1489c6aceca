import numpy as np
import pytest

from bimac.errors import ConfigError, DimensionError
from bimac.gradcheck import L1Objective, gradcheck
from bimac.lowrank import assemble
from bimac.mabic import (BiMACLayer, ModulationWeights, bias_block, bimac_forward, compact_weights,
                         focused_weights, modulate_kernel)
from bimac.tensor import conv2d

import oracles
from conftest import naive_conv


def _layer(rng, c_in=4, c_out=8, **kw):
    return BiMACLayer(c_in, c_out, 3, rng=rng, **kw)


class TestHeads:
    def test_zero_compact_heads_give_half(self, rng):
        p = BiMACLayer(3, 5)
        m = compact_weights(rng.normal(size=3), p)
        for w in (m.w_ci, m.w_co, m.w_kk):
            np.testing.assert_array_equal(w, 0.5)
        assert m.w_kk.shape == (3, 3)

    def test_zero_input_gives_sigmoid_of_bias(self, rng):
        p = _layer(rng, 3, 5)
        m = compact_weights(np.zeros(3), p)
        np.testing.assert_allclose(m.w_co, oracles.sig(p.f_co.b.value), atol=1e-15)

    def test_compact_oracle(self, rng):
        p = _layer(rng, 3, 5)
        v = rng.normal(size=3)
        m = compact_weights(v, p)
        assert np.max(np.abs(m.w_ci - oracles.sig(oracles.lin(p.f_ci, v)))) < 1e-12
        assert np.max(np.abs(m.w_kk.ravel() - oracles.sig(oracles.lin(p.f_kk, v)))) < 1e-12

    def test_focused_zero_params(self, rng):
        m = focused_weights(rng.normal(size=4), BiMACLayer(4, 4))
        np.testing.assert_array_equal(m.w_co, 0.5)

    def test_focused_identity_embed_constant_heads(self, rng):
        p = BiMACLayer(8, 4)          # hidden width is max(8 // 2, 8) == 8 == C_in
        p.fc1.W.value[...] = np.eye(8)
        p.fc2.W.value[...] = np.eye(8)
        beta = 0.7
        for head in (p.g_ci, p.g_co, p.g_kk):
            head.b.value[...] = beta
        for _ in range(3):
            m = focused_weights(rng.normal(size=8), p)
            np.testing.assert_allclose(m.w_ci, oracles.sig(beta), atol=1e-15)

    def test_focused_oracle(self, rng):
        p = _layer(rng, 4, 6)
        c = rng.normal(size=4)
        e = np.maximum(oracles.lin(p.fc2, np.maximum(oracles.lin(p.fc1, c), 0)), 0)
        m = focused_weights(c, p)
        assert np.max(np.abs(m.w_co - oracles.sig(oracles.lin(p.g_co, e)))) < 1e-12


class TestModulateKernel:
    def test_identity_modulation(self, rng):
        W = rng.normal(size=(3, 2, 3, 3))
        m = ModulationWeights(np.ones(2), np.ones(3), np.ones((3, 3)))
        np.testing.assert_array_equal(modulate_kernel(W, m), W)

    def test_zero_output_channel(self, rng):
        W = rng.normal(size=(3, 2, 3, 3))
        w_co = np.ones(3)
        w_co[1] = 0.0
        out = modulate_kernel(W, ModulationWeights(np.ones(2), w_co, np.ones((3, 3))))
        np.testing.assert_array_equal(out[1], 0.0)

    def test_broadcast_oracle(self, rng):
        W = rng.normal(size=(3, 2, 3, 3))
        m = ModulationWeights(rng.random(2), rng.random(3), rng.random((3, 3)))
        out = modulate_kernel(W, m)
        for o, i, u, v in np.ndindex(W.shape):
            ref = W[o, i, u, v] * m.w_co[o] * m.w_ci[i] * m.w_kk[u, v]
            assert abs(out[o, i, u, v] - ref) < 1e-15

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            modulate_kernel(np.zeros((3, 2, 3, 3)), ModulationWeights(np.ones(3), np.ones(3), np.ones((3, 3))))


class TestBiasBlock:
    def test_zero(self, rng):
        np.testing.assert_array_equal(bias_block(rng.normal(size=(4, 5, 5)), BiMACLayer(4, 4)), 0.0)

    def test_delta_chain_is_relu(self, rng):
        p = BiMACLayer(8, 8)
        for conv in (p.bias1, p.bias2, p.bias3):
            for c in range(8):
                conv.w.value[c, c, 1, 1] = 1.0
        x = rng.normal(size=(8, 5, 5))
        np.testing.assert_array_equal(bias_block(x, p), np.maximum(x, 0))

    def test_loop_oracle(self, rng):
        p = _layer(rng, 3, 4)
        x = rng.normal(size=(3, 6, 6))
        assert np.max(np.abs(bias_block(x, p) - oracles.bias_block(p, x))) < 1e-12


class TestBimacForward:
    def test_all_compact_is_one_dense_conv(self, rng):
        p = _layer(rng)
        x = rng.normal(size=(4, 8, 8))
        hm = np.zeros((8, 8), dtype=bool)
        y, _ = bimac_forward(x, p, hm=hm)
        assert np.max(np.abs(y - oracles.compact_oracle(p, x, hm))) < 1e-10

    def test_all_focused_matches_per_pixel_oracle(self, rng):
        p = _layer(rng, alpha=-100.0)
        x = rng.normal(size=(4, 8, 8))
        y, mask = bimac_forward(x, p)
        assert mask.HM.all()
        for i in range(8):
            for j in range(8):
                assert np.max(np.abs(y[:, i, j] - oracles.focused_oracle(p, x, i, j))) < 1e-10

    def test_mixed_mask_per_branch(self, rng):
        p = _layer(rng)
        x = rng.normal(size=(4, 8, 8))
        hm = rng.random((8, 8)) < 0.3
        err0, err1 = oracles.branch_errors(p, x, hm)
        assert err0 < 1e-10 and err1 < 1e-10

    def test_learned_mask_partition(self, rng):
        p = _layer(rng, alpha=0.0)
        x = rng.normal(size=(4, 8, 8))
        _, mask = bimac_forward(x, p)
        hm = mask.HM[0]
        assert 0 < hm.sum() < 64
        err0, err1 = oracles.branch_errors(p, x, hm)
        assert err0 < 1e-10 and err1 < 1e-10

    def test_branch_isolation(self, rng):
        p = _layer(rng)
        x = rng.normal(size=(4, 8, 8))
        hm = rng.random((8, 8)) < 0.4
        y0, _ = bimac_forward(x, p, hm=hm)
        p.kernel1.nav1.value += rng.normal(size=p.kernel1.nav1.value.shape)
        p.kernel1.bias.value += 1.0
        y1, _ = bimac_forward(x, p, hm=hm)
        np.testing.assert_array_equal(y0[:, ~hm], y1[:, ~hm])
        assert np.all(np.any(y0[:, hm] != y1[:, hm], axis=0))

    def test_saturated_heads_reduce_to_plain_conv(self, rng):
        p = _layer(rng, alpha=1e6)
        for head in (p.f_ci, p.f_co, p.f_kk):
            head.b.value[...] = 20.0
        x = rng.normal(size=(4, 8, 8))
        y, mask = bimac_forward(x, p)
        assert not mask.HM.any()
        W = assemble(p.kernel0)
        ref = conv2d(mask.X_mod, W, p.kernel0.bias.value, 1) + bias_block(x, p)
        assert np.max(np.abs(y - ref)) < 1e-6

    def test_bias_block_reads_raw_input(self, rng):
        p = _layer(rng)
        x = rng.normal(size=(4, 6, 6))
        hm = np.zeros((6, 6), dtype=bool)
        y, mask = bimac_forward(x, p, hm=hm)
        # zero the branch kernels: what is left is the bias block of the unmodulated x
        for kern in (p.kernel0, p.kernel1):
            for prm in kern.parameters().values():
                prm.value[...] = 0.0
        y, _ = bimac_forward(x, p, hm=hm)
        np.testing.assert_allclose(y, oracles.bias_block(p, x), atol=1e-12)

    def test_batch_equals_per_image(self, rng):
        p = _layer(rng, alpha=0.5)
        x = rng.normal(size=(3, 4, 6, 6))
        y = p.forward(x)
        hm = p.last_mask.HM
        for n in range(3):
            yn, mn = bimac_forward(x[n], p)
            np.testing.assert_array_equal(mn.HM, hm[n])
            np.testing.assert_allclose(yn, y[n], atol=1e-13)

    def test_bad_channels(self, rng):
        with pytest.raises(DimensionError):
            bimac_forward(rng.normal(size=(3, 4, 4)), _layer(rng))

    def test_even_kernel(self):
        with pytest.raises(ConfigError):
            BiMACLayer(2, 2, 4)

    def test_kernels_are_independent_by_default(self, rng):
        p = _layer(rng)
        assert p.kernel0 is not p.kernel1
        assert p.kernel0.nav1.value is not p.kernel1.nav1.value

    def test_random_route_has_fifteen_percent(self, rng):
        p = _layer(rng, route="random", mask_seed=3)
        _, mask = bimac_forward(rng.normal(size=(4, 20, 20)), p)
        assert mask.HM.sum() == 60


class TestGradients:
    @pytest.mark.parametrize("kw", [{}, {"kernel": "dense"}, {"shared": True}, {"route": "random"},
                                    {"route": "focused"}, {"route": "compact"}])
    def test_single_layer_finite_differences(self, rng, kw):
        p = BiMACLayer(4, 4, 3, alpha=0.3, rng=rng, **kw)
        x = rng.normal(size=(2, 4, 6, 6))
        target = rng.normal(size=(2, 4, 6, 6))
        rep = gradcheck(L1Objective(p, (x,), target), per_group=10, seed=1)
        assert rep.passed, rep.lines()

    def test_backward_without_forward(self):
        from bimac.errors import StateError
        with pytest.raises(StateError):
            BiMACLayer(2, 2).backward(np.zeros((1, 2, 3, 3)))

    def test_masks_receive_no_gradient_through_routing(self, rng):
        """With the soft mask frozen at zero-conv, CAMG conv grads come only via X'."""
        p = _layer(rng, 4, 4, alpha=0.3)
        x = rng.normal(size=(1, 4, 6, 6))
        y = p.forward(x)
        p.zero_grad()
        p.backward(np.ones_like(y))
        assert np.all(np.isfinite(p.camg.conv.w.grad))
        assert np.any(p.camg.conv.w.grad != 0)


def test_oracle_helper_matches_naive_conv(rng):
    x, w, b = rng.normal(size=(2, 4, 4)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    np.testing.assert_allclose(naive_conv(x, w, b), conv2d(x, w, b, 1), atol=1e-12)
