import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sarcmtl import autodiff as ad
from sarcmtl.autodiff import Tape, Tensor, backward, finite_diff_check


def loop_matmul(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        x = Tensor([[1, 2], [3, 4]])
        assert ad.matmul(Tensor(np.eye(2)), x).value.tolist() == [[1, 2], [3, 4]]

    def test_row_times_column(self):
        assert ad.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).value.tolist() == [[11]]

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        got = ad.matmul(Tensor(a), Tensor(b)).value
        np.testing.assert_allclose(got, loop_matmul(a, b), rtol=0, atol=1e-12)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ad.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


class TestSoftmaxMasked:
    def test_uniform(self):
        p = ad.softmax_masked(Tensor([[0.0, 0.0, 0.0]]), [True, True, True]).value[0]
        np.testing.assert_allclose(p, [1 / 3] * 3, atol=1e-15)

    def test_single_unmasked(self):
        p = ad.softmax_masked(Tensor([[5.0, -2.0, 7.0]]), [True, False, False]).value[0]
        assert p.tolist() == [1.0, 0.0, 0.0]

    def test_two_logits(self):
        p = ad.softmax_masked(Tensor([[1.0, 2.0]]), [True, True]).value[0]
        e = math.e
        np.testing.assert_allclose(p, [1 / (1 + e), e / (1 + e)], atol=1e-15)
        np.testing.assert_allclose(p, [0.26894, 0.73106], atol=5e-6)

    def test_all_masked_rejected(self):
        with pytest.raises(ad.InvalidMaskError):
            ad.softmax_masked(Tensor([[1.0, 2.0]]), [False, False])

    def test_large_logits_stable(self):
        p = ad.softmax_masked(Tensor([[1000.0, 999.0, -1000.0]]), [True, True, True]).value
        assert np.all(np.isfinite(p))

    def test_random_draws_are_probability_vectors(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            n = int(rng.integers(1, 12))
            mask = rng.random(n) < 0.6
            mask[rng.integers(n)] = True
            logits = rng.normal(scale=rng.choice([0.1, 1.0, 30.0]), size=(1, n))
            p = ad.softmax_masked(Tensor(logits), mask).value[0]
            assert np.all((p >= 0) & (p <= 1))
            assert np.all(p[~mask] == 0.0)
            assert abs(p[mask].sum() - 1.0) <= 1e-12


class TestElementwise:
    def test_values(self):
        assert ad.elementwise("sigmoid", Tensor(0.0)).item() == 0.5
        assert ad.elementwise("tanh", Tensor(0.0)).item() == 0.0
        assert ad.elementwise("sigmoid", Tensor(math.log(3))).item() == pytest.approx(0.75, abs=1e-15)
        assert ad.elementwise("relu", Tensor([[-1.0, 2.0]])).value.tolist() == [[0.0, 2.0]]

    def test_sigmoid_extreme_inputs_finite(self):
        y = ad.sigmoid(Tensor([[-800.0, 800.0]])).value
        assert y.tolist() == [[0.0, 1.0]]

    def test_shape_mismatch(self):
        with pytest.raises(ad.DimensionError):
            ad.elementwise("mul", Tensor(np.zeros((1, 2))), Tensor(np.zeros((2, 1))))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            ad.elementwise("softplus", Tensor(0.0))


class TestBackward:
    def test_sum(self):
        W = Tensor.param(np.arange(4.0).reshape(2, 2))
        with Tape() as tape:
            loss = ad.total(W)
        assert backward(tape, loss)[W].tolist() == [[1, 1], [1, 1]]

    def test_sum_of_squares(self):
        W = Tensor.param([[1.0, 2.0], [3.0, 4.0]])
        with Tape() as tape:
            loss = ad.total(ad.mul(W, W))
        assert backward(tape, loss)[W].tolist() == [[2, 4], [6, 8]]

    def test_non_scalar_loss_rejected(self):
        W = Tensor.param(np.ones((2, 2)))
        with Tape() as tape:
            out = ad.mul(W, W)
        with pytest.raises(ad.DimensionError):
            backward(tape, out)

    def test_no_recording_outside_tape(self):
        W = Tensor.param(np.ones((2, 2)))
        assert not ad.mul(W, W).requires_grad

    def test_accumulates_across_tapes(self):
        W = Tensor.param([[2.0]])
        for _ in range(3):
            with Tape() as tape:
                loss = ad.mul(W, W)
            backward(tape, loss, weight=0.5)
        assert W.grad.tolist() == [[6.0]]

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        A = Tensor.param(rng.normal(size=(4, 5)))
        B = Tensor.param(rng.normal(size=(5, 3)))

        def run():
            A.zero_grad()
            B.zero_grad()
            with Tape() as tape:
                loss = ad.total(ad.tanh(ad.matmul(A, B)))
            g = backward(tape, loss)
            return g[A].tobytes() + g[B].tobytes()

        assert run() == run()

    def test_linearity(self):
        rng = np.random.default_rng(4)
        W = Tensor.param(rng.normal(size=(3, 3)))
        x = Tensor(rng.normal(size=(1, 3)))

        def grad_of(build):
            W.zero_grad()
            with Tape() as tape:
                loss = build()
            return backward(tape, loss)[W]

        l1 = lambda: ad.total(ad.sigmoid(ad.matmul(x, W)))
        l2 = lambda: ad.total(ad.mul(W, W))
        a, b = 0.7, -2.3
        combo = grad_of(lambda: ad.add(ad.scale(l1(), a), ad.scale(l2(), b)))
        np.testing.assert_allclose(combo, a * grad_of(l1) + b * grad_of(l2), rtol=0, atol=1e-10)


PRIMITIVES = {
    "matmul": lambda P, c: ad.matmul(P["a"], P["b"]),
    "add": lambda P, c: ad.add(P["a"], c["a2"]),
    "sub": lambda P, c: ad.sub(P["a"], c["a2"]),
    "mul": lambda P, c: ad.mul(P["a"], c["a2"]),
    "scale": lambda P, c: ad.scale(P["a"], -1.7),
    "add_row": lambda P, c: ad.add_row(P["a"], P["row"]),
    "mul_col": lambda P, c: ad.mul_col(P["a"], P["col"]),
    "tanh": lambda P, c: ad.tanh(P["a"]),
    "sigmoid": lambda P, c: ad.sigmoid(P["a"]),
    "relu": lambda P, c: ad.relu(P["a"]),
    "gelu": lambda P, c: ad.gelu(P["a"]),
    "transpose": lambda P, c: ad.transpose(P["a"]),
    "take": lambda P, c: ad.take(P["a"], slice(0, 2), slice(1, 3)),
    "gather_rows": lambda P, c: ad.gather_rows(P["a"], [2, 0, 2]),
    "concat_cols": lambda P, c: ad.concat_cols([P["a"], P["col"]]),
    "softmax_masked": lambda P, c: ad.softmax_masked(P["a"], [True, False, True, True]),
    "layer_norm": lambda P, c: ad.layer_norm(P["a"], P["row"], P["row2"]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    rng = np.random.default_rng(sorted(PRIMITIVES).index(name))
    P = {"a": Tensor.param(rng.normal(size=(3, 4))),
         "b": Tensor.param(rng.normal(size=(4, 2))),
         "row": Tensor.param(rng.normal(size=(1, 4))),
         "row2": Tensor.param(rng.normal(size=(1, 4))),
         "col": Tensor.param(rng.normal(size=(3, 1)))}
    if name == "relu":
        # keep away from the kink
        P["a"].value += np.sign(P["a"].value) * 0.1
    const = {"a2": Tensor(rng.normal(size=(3, 4)))}
    fn = lambda: PRIMITIVES[name](P, const)
    probe = Tensor(rng.normal(size=fn().shape))
    res = finite_diff_check(lambda: ad.total(ad.mul(fn(), probe)), P)
    assert res.max_rel_err <= 1e-4, str(res)


@pytest.mark.parametrize("y", [0, 1])
def test_bce_gradient(y):
    z = Tensor.param([[0.37]])
    assert finite_diff_check(lambda: ad.bce_with_logits(z, y), {"z": z}).max_rel_err <= 1e-4


@pytest.mark.parametrize("y", [0, 1, 2])
def test_cross_entropy_gradient(y):
    z = Tensor.param([[0.3, -1.2, 2.0]])
    assert finite_diff_check(lambda: ad.cross_entropy(z, y), {"z": z}).max_rel_err <= 1e-4


class TestLosses:
    def test_bce_zero_logit(self):
        assert ad.bce_with_logits(Tensor(0.0), 1).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_bce_extreme_is_finite(self):
        assert np.isfinite(ad.bce_with_logits(Tensor(-1e6), 1).item())

    def test_invalid_labels(self):
        with pytest.raises(ValueError):
            ad.bce_with_logits(Tensor(0.0), 2)
        with pytest.raises(ValueError):
            ad.cross_entropy(Tensor([[0.0, 0.0, 0.0]]), 3)


class TestFiniteDiffCheck:
    def test_linear_exact(self):
        theta = Tensor.param([[0.8, -3.0]])
        res = finite_diff_check(lambda: ad.total(ad.scale(theta, 3.0)), {"theta": theta})
        assert res.max_rel_err <= 1e-10

    def test_quadratic_exact_under_central_differences(self):
        theta = Tensor.param([[1.0]])
        res = finite_diff_check(lambda: ad.mul(theta, theta), {"theta": theta}, eps=1e-3)
        assert res.numeric == pytest.approx(2.0, abs=1e-12)
        assert res.analytic == 2.0

    def test_reports_offending_coordinate(self):
        theta = Tensor.param([[1.0, 2.0]])

        def kinked():
            # relu kink at 1.0005 sits inside the eps window for coordinate 0
            return ad.total(ad.relu(ad.sub(theta, Tensor([[1.0005, -5.0]]))))

        res = finite_diff_check(kinked, {"theta": theta}, eps=1e-3, skip_kinks=False)
        assert res.worst_param == "theta" and res.worst_index == (0, 0)
        assert res.max_rel_err > 0.1

    def test_kink_crossing_is_skipped_and_listed(self):
        theta = Tensor.param([[1.0, 2.0]])
        f = lambda: ad.total(ad.relu(ad.sub(theta, Tensor([[1.0005, -5.0]]))))
        res = finite_diff_check(f, {"theta": theta}, eps=1e-3)
        assert res.kink_skipped == [("theta", (0, 0))]
        assert res.n_checked == 1 and res.max_rel_err <= 1e-10

    def test_wrong_gradient_detected(self):
        theta = Tensor.param([[0.5, -1.5]])

        def buggy():
            # forward is theta**2 but backward claims 3 * theta
            v = theta.value
            return ad.total(ad._record(v * v, (theta,), lambda g: (g * 3 * v,), "bug"))

        res = finite_diff_check(buggy, {"theta": theta})
        assert res.max_rel_err == pytest.approx(1 / 3, abs=1e-9)

    def test_richardson_cancels_cubic_truncation(self):
        theta = Tensor.param([[0.7]])
        cube = lambda: ad.mul(ad.mul(theta, theta), theta)
        plain = finite_diff_check(cube, {"theta": theta}, eps=1e-2)
        extra = finite_diff_check(cube, {"theta": theta}, eps=1e-2, richardson=True)
        # plain central difference of x**3 is off by exactly eps**2
        assert plain.numeric - plain.analytic == pytest.approx(1e-4, rel=1e-6)
        assert extra.max_rel_err <= 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=10),
       st.lists(st.booleans(), min_size=10, max_size=10))
def test_softmax_property(logits, mask_bits):
    n = len(logits)
    mask = np.array(mask_bits[:n])
    mask[0] = True
    p = ad.softmax_masked(Tensor([logits]), mask).value[0]
    assert np.all(p[~mask] == 0.0)
    assert abs(p.sum() - 1.0) <= 1e-12
