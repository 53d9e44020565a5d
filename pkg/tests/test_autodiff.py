import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from srl import autodiff as ad
from srl.autodiff import Tensor

from conftest import grad_check


class TestElementwise:
    def test_add(self):
        np.testing.assert_array_equal(ad.elementwise("add", Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4, 6])

    def test_log_exp_inverse(self):
        x = np.array([0.5, -1.3])
        np.testing.assert_allclose(ad.log(ad.exp(Tensor(x))).data, x, atol=1e-15)

    def test_product_rule(self):
        x, y = ad.parameter(2.0), ad.parameter(3.0)
        ad.backward(x * y)
        assert x.grad == 3.0 and y.grad == 2.0

    def test_scale_and_neg(self):
        x = Tensor([1.0, -2.0])
        np.testing.assert_array_equal(ad.elementwise("scale", x, 3.0).data, [3, -6])
        np.testing.assert_array_equal(ad.elementwise("neg", x).data, [-1, 2])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(4,\)"):
            ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(4)))

    def test_trailing_broadcast(self):
        out = ad.add(Tensor(np.zeros((2, 3))), Tensor([1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(out.data[1], [1, 2, 3])

    def test_strict_log_rejects_zero(self):
        with pytest.raises(ad.DomainError):
            ad.log(Tensor([0.0, 1.0]))
        with pytest.raises(ad.DomainError):
            ad.div(Tensor([1.0]), Tensor([0.0]))

    def test_training_mode_clamps(self):
        with ad.training_mode():
            assert ad.log(Tensor([0.0])).data[0] == pytest.approx(np.log(1e-12))
            assert ad.div(Tensor([1.0]), Tensor([0.0])).data[0] == pytest.approx(1e12)

    def test_unknown_op_kind(self):
        with pytest.raises(ValueError):
            ad.elementwise("pow", Tensor(1.0), Tensor(2.0))

    @pytest.mark.parametrize("kind", ["add", "sub", "mul", "div"])
    def test_binary_grads(self, rng, kind):
        a = rng.normal(size=(3, 4))
        b = rng.uniform(0.5, 2.0, size=(4,))
        w = rng.normal(size=(3, 4))
        assert grad_check(lambda t: ad.tsum(ad.elementwise(kind, t[0], t[1]) * w), [a, b]) < 1e-6

    @pytest.mark.parametrize("fn", [ad.exp, ad.tanh, ad.sigmoid, ad.sqrt, ad.log, ad.sin])
    def test_unary_grads(self, rng, fn):
        x = rng.uniform(0.3, 2.0, size=(5,))
        w = rng.normal(size=5)
        assert grad_check(lambda t: ad.tsum(fn(t[0]) * w), [x]) < 1e-6


class TestMatmul:
    def test_identity(self, rng):
        m = rng.normal(size=(2, 2))
        np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(2)), Tensor(m)).data, m)

    def test_arithmetic(self):
        assert ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]

    def test_inner_mismatch(self):
        with pytest.raises(ad.ShapeError, match="inner"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_grad(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        w = rng.normal(size=(3, 2))
        assert grad_check(lambda t: ad.tsum(ad.matmul(t[0], t[1]) * w), [a, b]) < 1e-6

    def test_batched_broadcast_grad(self, rng):
        a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
        w = rng.normal(size=(2, 3, 5))
        assert grad_check(lambda t: ad.tsum(ad.matmul(t[0], t[1]) * w), [a, b]) < 1e-6


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)

    def test_shift_invariance(self, rng):
        x = rng.normal(size=6)
        np.testing.assert_allclose(ad.softmax(Tensor(x + 1000.0)).data, ad.softmax(Tensor(x)).data, atol=1e-12)

    def test_grad(self, rng):
        x, w = rng.normal(size=7), rng.normal(size=7)
        assert grad_check(lambda t: ad.tsum(ad.softmax(t[0]) * w), [x]) < 1e-6

    def test_bad_axis(self):
        with pytest.raises(ad.ShapeError):
            ad.softmax(Tensor(np.zeros((2, 3))), axis=2)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (4, 5), elements=st.floats(-1e3, 1e3)), st.sampled_from([0, 1, -1]))
    def test_sums_to_one(self, x, axis):
        out = ad.softmax(Tensor(x), axis=axis).data
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=axis), 1.0, atol=1e-6)


class TestLayerNorm:
    def test_constant_input_gives_bias(self):
        bias = np.array([0.5, -1.0, 2.0])
        out = ad.layer_norm(Tensor(np.full((2, 3), 7.0)), Tensor(np.ones(3)), Tensor(bias))
        np.testing.assert_allclose(out.data, np.broadcast_to(bias, (2, 3)))

    def test_statistics(self, rng):
        x = rng.normal(3.0, 5.0, size=(4, 512))
        out = ad.layer_norm(Tensor(x), Tensor(np.full(512, 2.0)), Tensor(np.full(512, 0.25))).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.25, atol=1e-9)
        np.testing.assert_allclose(out.std(axis=-1), 2.0, rtol=1e-5)

    def test_grad(self, rng):
        x, g, b = rng.normal(size=(3, 6)), rng.normal(size=6), rng.normal(size=6)
        w = rng.normal(size=(3, 6))
        assert grad_check(lambda t: ad.tsum(ad.layer_norm(t[0], t[1], t[2]) * w), [x, g, b]) < 1e-6

    def test_non_last_axis(self, rng):
        x = rng.normal(size=(5, 3))
        out = ad.layer_norm(Tensor(x), Tensor(np.ones(5)), Tensor(np.zeros(5)), axis=0).data
        np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-12)


class TestGRU:
    @staticmethod
    def params(rng, d_in, hid):
        return {
            "w_ih": ad.parameter(rng.normal(0, 0.5, (d_in, 3 * hid))),
            "w_hh": ad.parameter(rng.normal(0, 0.5, (hid, 3 * hid))),
            "b_ih": ad.parameter(rng.normal(0, 0.5, 3 * hid)),
            "b_hh": ad.parameter(rng.normal(0, 0.5, 3 * hid)),
        }

    def test_update_gate_open_gives_candidate(self, rng):
        p = self.params(rng, 5, 5)
        p["b_ih"].data[5:10] = 1e3
        x, h = rng.normal(size=(2, 5)), rng.normal(size=(2, 5))
        gi = x @ p["w_ih"].data + p["b_ih"].data
        gh = h @ p["w_hh"].data + p["b_hh"].data
        r = 1 / (1 + np.exp(-(gi[:, :5] + gh[:, :5])))
        cand = np.tanh(gi[:, 10:] + r * gh[:, 10:])
        np.testing.assert_allclose(ad.gru_cell(Tensor(x), Tensor(h), p).data, cand, atol=1e-12)

    def test_update_gate_closed_gives_hidden(self, rng):
        p = self.params(rng, 5, 5)
        p["b_ih"].data[5:10] = -1e3
        h = rng.normal(size=(2, 5))
        np.testing.assert_allclose(ad.gru_cell(Tensor(rng.normal(size=(2, 5))), Tensor(h), p).data, h, atol=1e-12)

    def test_grad(self, rng):
        p = self.params(rng, 5, 5)
        names = list(p)
        x, h = rng.normal(size=(2, 5)), rng.normal(size=(2, 5))
        w = rng.normal(size=(2, 5))

        def build(t):
            params = dict(zip(names, t[2:]))
            return ad.tsum(ad.gru_cell(t[0], t[1], params) * w)

        assert grad_check(build, [x, h] + [p[n].data for n in names]) < 1e-6

    def test_shape_mismatch(self, rng):
        with pytest.raises(ad.ShapeError):
            ad.gru_cell(Tensor(np.zeros((2, 5))), Tensor(np.zeros((3, 5))), self.params(rng, 5, 5))


class TestCosine:
    def test_self(self, rng):
        x = rng.normal(size=9)
        assert ad.cosine_similarity(Tensor(x), Tensor(x)).item() == pytest.approx(1.0)

    def test_orthogonal(self):
        assert ad.cosine_similarity(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == 0.0

    def test_scale_invariant(self):
        assert ad.cosine_similarity(Tensor([1.0, 1.0]), Tensor([2.0, 2.0])).item() == pytest.approx(1.0)

    def test_zero_vector(self):
        assert ad.cosine_similarity(Tensor([0.0, 0.0]), Tensor([1.0, 2.0])).item() == 0.0

    def test_grad(self, rng):
        a, b = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
        w = rng.normal(size=4)
        assert grad_check(lambda t: ad.tsum(ad.cosine_similarity(t[0], t[1]) * w), [a, b]) < 1e-6

    def test_matrix_matches_pairwise(self, rng):
        a, b = rng.normal(size=(3, 5)), rng.normal(size=(4, 5))
        m = ad.cosine_matrix(Tensor(a), Tensor(b)).data
        for i in range(3):
            for j in range(4):
                assert m[i, j] == pytest.approx(a[i] @ b[j] / np.linalg.norm(a[i]) / np.linalg.norm(b[j]))


class TestLogSumExp:
    def test_masked_value(self, rng):
        x = rng.normal(size=(3, 5))
        mask = rng.random((3, 5)) > 0.4
        mask[0] = False
        out = ad.logsumexp(Tensor(x), axis=1, mask=mask).data
        assert out[0] == 0.0
        for r in (1, 2):
            if mask[r].any():
                assert out[r] == pytest.approx(np.log(np.exp(x[r][mask[r]]).sum()))

    def test_grad(self, rng):
        x = rng.normal(size=(3, 5))
        mask = rng.random((3, 5)) > 0.3
        w = rng.normal(size=3)
        assert grad_check(lambda t: ad.tsum(ad.logsumexp(t[0], 1, mask) * w), [x]) < 1e-6


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = ad.parameter(rng.normal(size=(2, 3)))
        ad.backward(ad.tsum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square(self, rng):
        v = rng.normal(size=4)
        x = ad.parameter(v)
        ad.backward(ad.tsum(x * x))
        np.testing.assert_allclose(x.grad, 2 * v)

    def test_non_scalar_rejected(self):
        with pytest.raises(ad.ShapeError):
            ad.backward(ad.parameter(np.zeros(3)) * 2.0)

    def test_unreachable_leaf_zero(self, rng):
        x, y = ad.parameter(rng.normal(size=3)), ad.parameter(rng.normal(size=3))
        ad.backward(ad.tsum(x))
        np.testing.assert_array_equal(y.grad, 0.0)

    def test_loss_grad_wrt_itself_is_one(self, rng):
        loss = ad.tsum(ad.parameter(rng.normal(size=3)) * 2.0)
        ad.backward(loss)
        assert loss.grad == 1.0

    def test_reverse_execution_order(self, rng):
        x = ad.parameter(rng.normal(size=3))
        y = ad.exp(x)
        z = ad.tsum(y * x)
        tape = ad.Tape.from_output(z)
        seqs = [t._seq for t in tape.nodes]
        assert seqs == sorted(seqs)
        assert tape.nodes[-1] is z

    def test_deterministic_replay(self, rng):
        x = ad.parameter(rng.normal(size=(4, 4)))
        loss = ad.tsum(ad.softmax(ad.matmul(x, x)) * ad.tanh(x))
        tape = ad.backward(loss)
        first = x.grad.copy()
        tape.backward(np.ones(()))
        assert np.array_equal(first, x.grad)

    def test_composite_grad(self, rng):
        w1, w2 = rng.normal(size=(4, 6)), rng.normal(size=(6, 3))
        x = rng.normal(size=(5, 4))

        def build(t):
            h = ad.layer_norm(ad.relu(ad.matmul(t[0], t[1]) + 0.1), ad.Tensor(np.ones(6)), ad.Tensor(np.zeros(6)))
            return ad.mean(ad.log(ad.tsum(ad.exp(ad.matmul(h, t[2])), axis=-1)))

        assert grad_check(build, [x, w1, w2]) < 1e-4


class TestFiniteDiff:
    def test_sum(self, rng):
        x = rng.normal(size=5)
        np.testing.assert_allclose(ad.finite_diff_grad(lambda v: v.sum(), x), 1.0, atol=1e-9)

    def test_sin(self, rng):
        x = rng.normal(size=5)
        np.testing.assert_allclose(ad.finite_diff_grad(lambda v: np.sin(v).sum(), x), np.cos(x), atol=1e-8)
