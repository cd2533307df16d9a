import math

import numpy as np
import pytest

from vistafuse import ndcore as nd
from vistafuse.ndcore import DimensionError, Tensor, grad_check
from vistafuse.projection import BEV, RV, ViewMap
from vistafuse.vista import (
    VistaWeights,
    branch,
    cross_attention,
    ffn,
    project_qkv,
    vista_forward,
)


def view(rng, view_name, c, s1, s2, kernel=(1, 1)):
    return ViewMap(view_name, Tensor(rng.normal(size=(c, s1, s2))), 3 if view_name == BEV else 2, (c, 1), kernel)


def maps(rng, d_f=6, bev=(8, 8), rv=(8, 4)):
    return view(rng, BEV, d_f, *bev), view(rng, RV, d_f, *rv)


def weights(rng, d_f, d_q=4):
    return VistaWeights.init(rng, d_f, d_q=d_q, d_v=d_f)


def identity_affine(aff):
    aff.weight.data[:] = np.eye(aff.weight.shape[0])
    aff.bias.data[:] = 0.0


class TestProjection:
    def test_identity_centre_kernel_passes_features(self):
        rng = np.random.default_rng(0)
        bev, rv = maps(rng, d_f=6)
        w = VistaWeights.init(rng, 6, d_q=4, d_v=6)
        w.conv_q.weight.data[:] = 0.0
        for o in range(4):
            w.conv_q.weight.data[o, o, 1, 1] = 1.0
        w.conv_q.bias.data[:] = 0.0
        q, k, v = project_qkv(bev, rv, w)
        np.testing.assert_array_equal(q.data, bev.features.data[:4].reshape(4, -1).T)
        assert k.shape == (32, 4) and v.shape == (32, 6)

    def test_channel_mismatch(self):
        rng = np.random.default_rng(1)
        bev, rv = maps(rng, d_f=5)
        with pytest.raises(DimensionError):
            project_qkv(bev, rv, weights(rng, 6))

    def test_conv_q_gradient(self):
        rng = np.random.default_rng(2)
        bev, rv = maps(rng, d_f=3, bev=(4, 4), rv=(4, 2))
        w = VistaWeights.init(rng, 3, d_q=4, d_v=3)
        r = rng.normal(size=(16, 4))

        def f(_):
            q, _, _ = project_qkv(bev, rv, w)
            return nd.sum_all(nd.mul(q, Tensor(r)))

        assert grad_check(f, w.conv_q.weight).max_rel_error < 1e-5


class TestBranch:
    def test_identity_branch(self):
        rng = np.random.default_rng(3)
        w = VistaWeights.init(rng, 4, d_q=4, d_v=4)
        identity_affine(w.branch_q_sem)
        identity_affine(w.branch_k_sem)
        q, k = Tensor(rng.normal(size=(10, 4))), Tensor(rng.normal(size=(7, 4)))
        qi, ki = branch(q, k, w, "sem")
        np.testing.assert_allclose(qi.data, q.data, atol=1e-15)
        np.testing.assert_allclose(ki.data, k.data, atol=1e-15)

    def test_zero_branch_weights_give_uniform_rows(self):
        rng = np.random.default_rng(4)
        w = VistaWeights.init(rng, 4, d_q=4, d_v=4)
        w.branch_q_geo.weight.data[:] = 0.0
        qi, ki = branch(Tensor(rng.normal(size=(10, 4))), Tensor(rng.normal(size=(7, 4))), w, "geo")
        a, _ = cross_attention(qi, ki, Tensor(rng.normal(size=(7, 4))))
        np.testing.assert_allclose(a.data, 1.0 / 7, atol=1e-15)

    def test_branches_differ(self):
        rng = np.random.default_rng(5)
        bev, rv = maps(rng)
        _, _, bundle = vista_forward(bev, rv, weights(rng, 6), bev_kernel=(2, 2), rv_kernel=(2, 1))
        assert np.abs(bundle.A_sem.data - bundle.A_geo.data).mean() > 1e-3

    def test_unknown_branch(self):
        rng = np.random.default_rng(6)
        with pytest.raises(ValueError):
            branch(Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 4))), VistaWeights.init(rng, 4, 4, 4), "depth")


class TestCrossAttention:
    def test_single_key(self):
        rng = np.random.default_rng(7)
        v = rng.normal(size=(1, 3))
        a, f = cross_attention(Tensor(rng.normal(size=(5, 2))), Tensor(rng.normal(size=(1, 2))), Tensor(v))
        np.testing.assert_array_equal(a.data, np.ones((5, 1)))
        np.testing.assert_allclose(f.data, np.repeat(v, 5, axis=0), atol=1e-15)

    def test_orthonormal_rows_give_identity(self):
        rng = np.random.default_rng(8)
        basis, _ = np.linalg.qr(rng.normal(size=(6, 6)))
        q = Tensor(50.0 * basis)
        v = rng.normal(size=(6, 3))
        a, f = cross_attention(q, Tensor(basis), Tensor(v))
        # logits are 50/sqrt(6) on the diagonal, 0 elsewhere
        off = math.exp(-50.0 / math.sqrt(6))
        np.testing.assert_allclose(a.data, np.eye(6), atol=6 * off)
        np.testing.assert_allclose(f.data, v, atol=1e-7)

    def test_zero_logits_average_values(self):
        rng = np.random.default_rng(9)
        v = rng.normal(size=(4, 3))
        a, f = cross_attention(Tensor(np.zeros((5, 2))), Tensor(rng.normal(size=(4, 2))), Tensor(v))
        np.testing.assert_allclose(f.data, np.tile(v.mean(axis=0), (5, 1)), atol=1e-15)

    def test_scaling_by_sqrt_dq(self):
        rng = np.random.default_rng(10)
        q, k = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
        a, _ = cross_attention(Tensor(q), Tensor(k), Tensor(np.zeros((5, 2))))
        logits = q @ k.T / 2.0
        ref = np.exp(logits - logits.max(axis=1, keepdims=True))
        np.testing.assert_allclose(a.data, ref / ref.sum(axis=1, keepdims=True), atol=1e-15)

    def test_multi_head_average(self):
        rng = np.random.default_rng(11)
        q, k, v = Tensor(rng.normal(size=(4, 4))), Tensor(rng.normal(size=(6, 4))), Tensor(rng.normal(size=(6, 4)))
        a, f = cross_attention(q, k, v, heads=2)
        np.testing.assert_allclose(a.data.sum(axis=1), 1.0, atol=1e-12)
        assert f.shape == (4, 4)
        with pytest.raises(DimensionError):
            cross_attention(q, k, v, heads=3)

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            cross_attention(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 1))))


class TestFFN:
    def test_zero_weights_is_layer_norm(self):
        rng = np.random.default_rng(12)
        w = VistaWeights.init(rng, 4, d_q=4, d_v=5)
        for aff in (w.ffn_sem.expand, w.ffn_sem.contract):
            aff.weight.data[:] = 0.0
            aff.bias.data[:] = 0.0
        x = rng.normal(size=(7, 5))
        out = ffn(Tensor(x), w, "sem").data
        ref = (x - x.mean(axis=1, keepdims=True)) / np.sqrt(x.var(axis=1, keepdims=True) + 1e-5)
        np.testing.assert_allclose(out, ref, atol=1e-12)

    @pytest.mark.parametrize("n", [1, 3, 17])
    def test_shape(self, n):
        rng = np.random.default_rng(13)
        w = VistaWeights.init(rng, 4, d_q=4, d_v=6)
        assert ffn(Tensor(rng.normal(size=(n, 6))), w, "geo").shape == (n, 6)

    def test_gradient(self):
        rng = np.random.default_rng(14)
        w = VistaWeights.init(rng, 3, d_q=3, d_v=3)
        x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        r = Tensor(rng.normal(size=(4, 3)))
        assert grad_check(lambda t: nd.sum_all(nd.mul(ffn(t, w, "sem"), r)), x).max_rel_error < 1e-5


class TestForward:
    def test_desk_attention_shape(self):
        rng = np.random.default_rng(15)
        bev, rv = view(rng, BEV, 32, 64, 64), view(rng, RV, 32, 64, 16)
        _, _, bundle = vista_forward(bev, rv, VistaWeights.init(rng, 32), rv_kernel=(4, 4))
        assert bundle.A_sem.shape == (256, 64)
        assert bundle.source_shape == (16, 4)

    def test_gap_equals_forced_uniform(self):
        rng = np.random.default_rng(16)
        bev, rv = maps(rng)
        w = weights(rng, 6)
        kw = dict(bev_kernel=(2, 2), rv_kernel=(2, 2))
        gap_sem, gap_geo, _ = vista_forward(bev, rv, w, mode="gap", **kw)
        uni_sem, uni_geo, bundle = vista_forward(bev, rv, w, mode="conv", force_uniform=True, **kw)
        np.testing.assert_allclose(gap_sem.features.data, uni_sem.features.data, rtol=0, atol=1e-9)
        np.testing.assert_allclose(gap_geo.features.data, uni_geo.features.data, rtol=0, atol=1e-9)
        np.testing.assert_array_equal(bundle.A_sem.data, 1.0 / bundle.A_sem.shape[1])

    def test_decouple_off_shares_branch(self):
        rng = np.random.default_rng(17)
        bev, rv = maps(rng)
        s, g, bundle = vista_forward(bev, rv, weights(rng, 6), decouple=False, bev_kernel=(2, 2))
        assert bundle.A_sem is bundle.A_geo or np.array_equal(bundle.A_sem.data, bundle.A_geo.data)
        np.testing.assert_array_equal(bundle.F_sem.data, bundle.F_geo.data)
        np.testing.assert_array_equal(s.features.data, g.features.data)

    def test_unknown_mode(self):
        rng = np.random.default_rng(18)
        bev, rv = maps(rng)
        with pytest.raises(ValueError):
            vista_forward(bev, rv, weights(rng, 6), mode="sparse")

    @pytest.mark.parametrize("mode", ["conv", "linear"])
    def test_rows_normalized_over_random_configs(self, mode):
        rng = np.random.default_rng(19)
        for _ in range(25):
            d_f = int(rng.integers(1, 6))
            bev = view(rng, BEV, d_f, int(rng.integers(2, 9)), int(rng.integers(2, 9)))
            rv = view(rng, RV, d_f, int(rng.integers(2, 9)), int(rng.integers(1, 5)))
            w = VistaWeights.init(rng, d_f, d_q=int(rng.integers(1, 6)), d_v=d_f)
            bev.features.data *= rng.uniform(0.1, 20.0)
            _, _, b = vista_forward(bev, rv, w, mode=mode, bev_kernel=(2, 2), rv_kernel=(2, 1))
            for a in (b.A_sem.data, b.A_geo.data):
                assert np.all((a >= 0) & (a <= 1))
                np.testing.assert_allclose(a.sum(axis=1), 1.0, rtol=0, atol=1e-9)

    def test_linear_mode_permutation_invariance(self):
        rng = np.random.default_rng(20)
        bev, rv = maps(rng, rv=(4, 4))
        w = weights(rng, 6)
        q, k, v = project_qkv(bev, rv, w, mode="linear")
        qi, ki = branch(q, k, w, "sem")
        _, f = cross_attention(qi, ki, v)
        perm = rng.permutation(16)
        _, fp = cross_attention(qi, Tensor(ki.data[perm]), Tensor(v.data[perm]))
        np.testing.assert_allclose(f.data, fp.data, atol=1e-9)

    def test_conv_mode_rotation_equivariance(self):
        rng = np.random.default_rng(21)
        bev, rv = maps(rng, rv=(4, 4))
        w = weights(rng, 6)
        kw = dict(bev_kernel=(1, 1), rv_kernel=(1, 1))
        _, _, base = vista_forward(bev, rv, w, **kw)
        rotated = ViewMap(RV, Tensor(np.rot90(rv.features.data, 2, axes=(1, 2)).copy()), 2, rv.channel_layout)
        for aff in (w.conv_k, w.conv_v):
            aff.weight.data[:] = np.rot90(aff.weight.data, 2, axes=(2, 3))
        _, _, rot = vista_forward(bev, rotated, w, **kw)
        # rotating the source map by 180 degrees reverses the order of its cells
        np.testing.assert_allclose(rot.F_sem.data, base.F_sem.data, atol=1e-9)
        np.testing.assert_allclose(rot.A_sem.data[:, ::-1], base.A_sem.data, atol=1e-12)

    def test_gap_invariant_to_source_permutation(self):
        rng = np.random.default_rng(22)
        bev, rv = maps(rng, rv=(4, 4))
        w = weights(rng, 6)
        w.conv_v.weight.data[:, :, [0, 0, 0, 2, 2, 2], [0, 1, 2, 0, 1, 2]] = 0.0
        w.conv_v.weight.data[:, :, 1, [0, 2]] = 0.0
        s, _, _ = vista_forward(bev, rv, w, mode="gap", rv_kernel=(1, 1))
        flat = rv.features.data.reshape(6, -1)[:, rng.permutation(16)].reshape(6, 4, 4)
        sp, _, _ = vista_forward(bev, ViewMap(RV, Tensor(flat), 2, rv.channel_layout), w, mode="gap", rv_kernel=(1, 1))
        np.testing.assert_allclose(s.features.data, sp.features.data, atol=1e-12)
