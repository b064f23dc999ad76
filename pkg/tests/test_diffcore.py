"""Kernel-level tests: forward values, backward gradients, tape mechanics, the oracle."""

import numpy as np
import pytest

from r3rec import diffcore as dc
from r3rec.diffcore import (
    OracleInvalidError,
    Parameter,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    backward,
    finite_diff_check,
    recording,
)


def scalar_loss(fn, params):
    """Run fn on a fresh tape and backprop; returns the loss value."""
    dc.zero_grads(params)
    tape = Tape()
    with recording(tape):
        out = fn()
    backward(tape, out)
    return float(out)


class TestForwardValues:
    def test_outer_product(self):
        out = dc.outer_product(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
        np.testing.assert_array_equal(out.data, [[3.0, 4.0], [6.0, 8.0]])

    def test_masked_softmax_uniform_logits(self):
        out = dc.masked_softmax(Tensor([0.0, 0.0, 0.0]), np.array([True, True, True]))
        np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)

    def test_masked_softmax_masked_positions_exact_zero(self):
        out = dc.masked_softmax(
            Tensor([5.0, -2.0, 7.0, 0.0]), np.array([True, False, True, False])
        )
        assert out.data[1] == 0.0 and out.data[3] == 0.0
        assert abs(out.data.sum() - 1.0) < 1e-12

    def test_masked_softmax_all_masked_rejected(self):
        with pytest.raises(ShapeError):
            dc.masked_softmax(Tensor([1.0, 2.0]), np.array([False, False]))

    def test_conv1d_same_hand_windows(self):
        # zero-padded windows (0,1,2), (1,2,3), (2,3,0) with an all-ones width-3 filter
        h = Tensor([[1.0], [2.0], [3.0]])
        filt = Tensor(np.ones((1, 3, 1)))
        bias = Tensor([0.0])
        out = dc.conv1d_same(h, filt, bias)
        np.testing.assert_array_equal(out.data[:, 0], [3.0, 6.0, 5.0])

    def test_conv1d_same_rejects_even_width(self):
        with pytest.raises(ShapeError):
            dc.conv1d_same(
                Tensor(np.zeros((4, 2))), Tensor(np.zeros((1, 2, 2))), Tensor([0.0])
            )

    def test_shape_error_names_kind_and_shapes(self):
        with pytest.raises(ShapeError, match="matvec"):
            dc.matvec(Tensor(np.zeros((2, 3))), Tensor(np.zeros(4)))

    def test_nonfinite_rejected_in_checked_mode(self):
        with pytest.raises(ValueError):
            Tensor([1.0, np.nan])
        with dc.unchecked():
            Tensor([1.0, np.nan])  # passes when checks are off

    def test_primitive_forward_dispatch(self):
        out = dc.primitive_forward("dot", Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
        assert out.item() == 11.0
        with pytest.raises(KeyError):
            dc.primitive_forward("no_such_kind", Tensor([1.0]))


class TestBackward:
    def test_dot_self_gradient(self):
        x = Parameter([3.0], name="x")
        scalar_loss(lambda: dc.dot(x, x), [x])
        np.testing.assert_array_equal(x.grad, [6.0])

    def test_mean_square_gradient(self):
        x = Parameter([1.0, 3.0], name="x")
        scalar_loss(lambda: dc.mean(dc.square(x)), [x])
        np.testing.assert_array_equal(x.grad, [1.0, 3.0])

    def test_relu_subgradient_zero_at_negative(self):
        x = Parameter([-1.0, 2.0], name="x")
        scalar_loss(lambda: dc.asum(dc.relu(x)), [x])
        np.testing.assert_array_equal(x.grad, [0.0, 1.0])

    def test_backward_is_additive(self):
        x = Parameter([2.0, -1.0], name="x")
        dc.zero_grads([x])
        tape = Tape()
        with recording(tape):
            out = dc.dot(x, x)
        backward(tape, out)
        once = x.grad.copy()
        backward(tape, out)
        np.testing.assert_array_equal(x.grad, 2.0 * once)

    def test_lookup_row_gradient_locality(self):
        table = Parameter(np.arange(6.0).reshape(3, 2), name="table")
        c = Tensor([1.0, 1.0])
        scalar_loss(lambda: dc.dot(dc.lookup_row(table, 2), c), [table])
        expected = np.zeros((3, 2))
        expected[2] = [1.0, 1.0]
        np.testing.assert_array_equal(table.grad, expected)

    def test_gather_rows_accumulates_duplicate_ids(self):
        table = Parameter(np.ones((4, 2)), name="table")
        scalar_loss(lambda: dc.asum(dc.gather_rows(table, [1, 1, 3])), [table])
        expected = np.zeros((4, 2))
        expected[1] = 2.0
        expected[3] = 1.0
        np.testing.assert_array_equal(table.grad, expected)

    def test_non_trainable_gets_no_gradient(self):
        frozen = Parameter(np.ones((3, 2)), trainable=False, name="emb")
        w = Parameter(np.ones(2), name="w")
        scalar_loss(lambda: dc.dot(dc.lookup_row(frozen, 1), w), [frozen, w])
        np.testing.assert_array_equal(frozen.grad, np.zeros((3, 2)))
        np.testing.assert_array_equal(w.grad, [1.0, 1.0])

    def test_backward_rejects_non_scalar_output(self):
        x = Parameter([1.0, 2.0], name="x")
        tape = Tape()
        with recording(tape):
            out = dc.square(x)
        with pytest.raises(TapeError):
            backward(tape, out)

    def test_backward_rejects_foreign_output(self):
        x = Parameter([1.0], name="x")
        tape = Tape()
        with recording(tape):
            dc.dot(x, x)
        stray = dc.dot(x, x)  # not recorded on `tape` (no active tape here)
        with pytest.raises(TapeError):
            backward(tape, stray)

    def test_grad_zero_after_zero_grads(self):
        x = Parameter([5.0], name="x")
        scalar_loss(lambda: dc.dot(x, x), [x])
        assert x.grad[0] != 0.0
        x.zero_grad()
        np.testing.assert_array_equal(x.grad, [0.0])


class TestTapeMechanics:
    def test_replay_matches_stored_values(self):
        rng = np.random.default_rng(7)
        x = Parameter(rng.normal(size=5), name="x")
        a = Parameter(rng.normal(size=(4, 5)), name="a")
        tape = Tape()
        with recording(tape):
            y = dc.matvec(a, x)
            z = dc.relu(y)
            dc.mean(dc.square(z))
        tape.replay()  # raises on any bitwise divergence

    def test_no_recording_outside_context(self):
        tape = Tape()
        with recording(tape):
            dc.add(Tensor([1.0]), Tensor([2.0]))
        dc.add(Tensor([1.0]), Tensor([2.0]))
        assert len(tape) == 1

    def test_paused_recording(self):
        tape = Tape()
        with recording(tape):
            with dc.paused_recording():
                dc.add(Tensor([1.0]), Tensor([2.0]))
        assert len(tape) == 0

    def test_forward_bit_deterministic(self):
        rng = np.random.default_rng(3)
        a = Tensor(rng.normal(size=(6, 4)))
        x = Tensor(rng.normal(size=4))
        r1 = dc.matvec(a, x)
        r2 = dc.matvec(a, x)
        assert np.array_equal(r1.data, r2.data)

    def test_op_counter_tracks_calls(self):
        dc.reset_op_counts()
        dc.dot(Tensor([1.0]), Tensor([1.0]))
        dc.dot(Tensor([1.0]), Tensor([1.0]))
        counts = dc.op_counts()
        assert counts["dot"][0] == 2

    def test_tensor_is_immutable(self):
        t = Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            t.data[0] = 9.0


def quadratic_loss(x):
    return lambda: dc.dot(x, x)


class TestFiniteDiffOracle:
    def test_quadratic_near_exact(self):
        x = Parameter([3.0], name="x")
        report = finite_diff_check(quadratic_loss(x), [x], h=1e-4, tol=1e-4)
        assert report.passed
        assert report.max_rel_err < 1e-8

    def test_every_primitive_gradient(self):
        # random points with |x| <= 10; relu sampled away from the kink
        rng = np.random.default_rng(42)
        L, D, F, w = 6, 3, 2, 3

        h_in = Parameter(rng.uniform(-10, 10, size=(L, D)), name="h")
        filt = Parameter(rng.uniform(-1, 1, size=(F, w, D)), name="filt")
        bias = Parameter(rng.uniform(-1, 1, size=F), name="bias")
        vec_a = Parameter(rng.uniform(-10, 10, size=L), name="vec_a")
        vec_b = Parameter(rng.uniform(-10, 10, size=L), name="vec_b")
        mat = Parameter(rng.uniform(-2, 2, size=(D, L)), name="mat")
        vec_d = Parameter(rng.uniform(-10, 10, size=D), name="vec_d")
        relu_in = Parameter(
            np.where(np.abs(z := rng.uniform(-10, 10, size=L)) < 0.5, z + 1.0, z),
            name="relu_in",
        )
        sa = Parameter(np.asarray(0.3), name="sa")
        mask = np.array([True, True, False, True, False, True])
        probe = Tensor(rng.uniform(-1, 1, size=L))

        cases = {
            "add": lambda: dc.asum(dc.add(vec_a, vec_b)),
            "mul": lambda: dc.asum(dc.mul(vec_a, vec_b)),
            "scale": lambda: dc.asum(dc.scale(vec_a, -2.5)),
            "square": lambda: dc.asum(dc.square(vec_a)),
            "exp": lambda: dc.exp(sa),
            "relu": lambda: dc.dot(dc.relu(relu_in), probe),
            "mean": lambda: dc.mean(dc.square(vec_a)),
            "dot": lambda: dc.dot(vec_a, vec_b),
            "matvec": lambda: dc.asum(dc.matvec(mat, vec_a)),
            "matmul": lambda: dc.asum(dc.matmul(mat, dc.outer_product(vec_a, vec_b))),
            "transpose": lambda: dc.asum(dc.matvec(dc.transpose(mat), vec_d)),
            "outer_product": lambda: dc.asum(dc.outer_product(vec_a, vec_b)),
            "flatten": lambda: dc.dot(dc.flatten(mat), dc.flatten(mat)),
            "concat": lambda: dc.asum(dc.square(dc.concat([vec_a, vec_b]))),
            "pack": lambda: dc.mean(dc.pack([dc.dot(vec_a, vec_b), dc.dot(vec_a, vec_a)])),
            "conv1d_same": lambda: dc.mean(dc.square(dc.conv1d_same(h_in, filt, bias))),
            "masked_softmax": lambda: dc.dot(dc.masked_softmax(vec_a, mask), probe),
        }
        params = [h_in, filt, bias, vec_a, vec_b, mat, vec_d, relu_in, sa]
        for kind, fn in cases.items():
            report = finite_diff_check(fn, params, h=1e-5, tol=1e-4)
            assert report.passed, f"{kind}: {report.lines()}"

    def test_masked_softmax_gradient_zero_at_masked(self):
        rng = np.random.default_rng(1)
        logits = Parameter(rng.uniform(-2, 2, size=5), name="logits")
        mask = np.array([True, False, True, True, False])
        probe = Tensor(rng.uniform(-1, 1, size=5))
        scalar_loss(lambda: dc.dot(dc.masked_softmax(logits, mask), probe), [logits])
        assert logits.grad[1] == 0.0 and logits.grad[4] == 0.0

    def test_corrupted_backward_detected(self, monkeypatch):
        # double the dot-product backward: the oracle must flag it
        true_vjp = dc._VJPS["dot"]
        monkeypatch.setitem(
            dc._VJPS, "dot", lambda rec, adj: [2.0 * g for g in true_vjp(rec, adj)]
        )
        x = Parameter([3.0, -1.5], name="x")
        report = finite_diff_check(lambda: dc.dot(x, x), [x], h=1e-5, tol=1e-4)
        assert not report.passed
        assert report.max_rel_err > 0.2

    def test_nondeterministic_loss_rejected(self):
        state = {"n": 0}

        def noisy():
            state["n"] += 1
            return dc.dot(Tensor([float(state["n"])]), Tensor([1.0]))

        x = Parameter([1.0], name="x")
        with pytest.raises(OracleInvalidError):
            finite_diff_check(noisy, [x])

    def test_coordinate_sampling_caps_work(self):
        x = Parameter(np.arange(100.0), name="x")
        report = finite_diff_check(lambda: dc.dot(x, x), [x], max_coords=10)
        assert report.entries[0].coords_checked == 10
        assert report.passed


class TestPropertyRandomized:
    def test_masked_softmax_partition_property(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            n = rng.integers(1, 12)
            mask = rng.random(n) < 0.6
            if not mask.any():
                mask[rng.integers(0, n)] = True
            logits = rng.uniform(-30, 30, size=n)
            out = dc.masked_softmax(Tensor(logits), mask)
            assert abs(out.data[mask].sum() - 1.0) < 1e-12
            assert np.all(out.data[~mask] == 0.0)
            assert np.all(out.data >= 0.0)

    def test_primitive_gradients_at_random_points(self):
        # the blanket invariant: analytic vs central differences at |x| <= 10
        rng = np.random.default_rng(23)
        for trial in range(5):
            n = int(rng.integers(2, 8))
            x = Parameter(rng.uniform(-10, 10, size=n), name="x")
            y = Parameter(rng.uniform(-10, 10, size=n), name="y")

            def loss():
                return dc.mean(dc.square(dc.add(dc.mul(x, y), dc.scale(x, 0.5))))

            report = finite_diff_check(loss, [x, y], h=1e-5, tol=1e-4, seed=trial)
            assert report.passed
