"""Tape recording, reverse accumulation and the finite-difference checker."""
import threading

import numpy as np
import pytest

from lkformer import tensor as T
from lkformer.autograd import GradReport, Tape, backward, gradcheck, relative_error
from lkformer.nn import silu
from lkformer.tensor import Rng, Tensor


def leaf(values):
    return Tensor(values, requires_grad=True)


class TestBackward:
    def test_sum_gives_ones(self):
        x = leaf(np.arange(4.0).reshape(2, 2))
        with Tape():
            loss = T.sum(x)
        backward(loss)
        assert np.array_equal(x.grad, np.ones((2, 2)))

    def test_square(self):
        x = leaf([3.0])
        with Tape():
            loss = T.sum(T.mul(x, x))
        backward(loss)
        assert x.grad.tolist() == [6.0]

    def test_silu_at_zero(self):
        x = leaf([0.0])
        with Tape():
            loss = T.sum(silu(x))
        backward(loss)
        assert x.grad.tolist() == [0.5]

    def test_fan_out_accumulates(self):
        # loss = sum(x*y + x) -> dx = y + 1, dy = x
        x, y = leaf([1.0, -2.0]), leaf([4.0, 5.0])
        with Tape():
            loss = T.sum(T.add(T.mul(x, y), x))
        backward(loss)
        assert x.grad.tolist() == [5.0, 6.0]
        assert y.grad.tolist() == [1.0, -2.0]

    def test_constants_get_no_grad(self):
        x, c = leaf([2.0]), Tensor([3.0])
        with Tape():
            loss = T.sum(T.mul(x, c))
        backward(loss)
        assert c.grad is None
        assert x.grad.tolist() == [3.0]

    def test_nothing_recorded_without_tape(self):
        x = leaf([1.0])
        y = T.mul(x, x)
        assert y._tape is None
        with pytest.raises(ValueError, match="not connected"):
            backward(T.sum(y))

    def test_nothing_recorded_without_grad_inputs(self):
        with Tape() as tape:
            T.add(Tensor([1.0]), Tensor([2.0]))
        assert len(tape) == 0

    def test_non_scalar_loss_rejected(self):
        x = leaf([1.0, 2.0])
        with Tape():
            y = T.mul(x, x)
        with pytest.raises(ValueError, match="scalar"):
            backward(y)

    def test_second_backward_is_an_error(self):
        x = leaf([1.0, 2.0])
        with Tape() as tape:
            loss = T.sum(T.mul(x, x))
        backward(loss)
        with pytest.raises(RuntimeError, match="already"):
            backward(loss)
        with pytest.raises(RuntimeError):
            with tape:
                pass

    def test_loss_from_another_tape(self):
        x = leaf([1.0])
        with Tape():
            loss = T.sum(x)
        other = Tape()
        with pytest.raises(ValueError, match="not recorded"):
            other.backward(loss)

    def test_each_entry_visited_once(self):
        calls = []
        x = leaf([1.0, 2.0])
        with Tape() as tape:
            y = T.mul(x, x)
            loss = T.sum(y)
        for entry in tape.entries:
            fn = entry.backward
            entry.backward = lambda g, needs, fn=fn, kind=entry.kind: calls.append(kind) or fn(g, needs)
        tape.backward(loss)
        assert calls == ["sum", "mul"]

    def test_tapes_are_thread_local(self):
        results = {}

        def work(i):
            x = leaf([float(i)])
            with Tape():
                loss = T.sum(T.mul(x, x))
            backward(loss)
            results[i] = x.grad[0]

        threads = [threading.Thread(target=work, args=(i,)) for i in range(6)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert results == {i: 2.0 * i for i in range(6)}


class TestGradcheck:
    def test_sum_of_squares_is_tight(self):
        x = Tensor(Rng(5).uniform(-1, 1, (3, 4)))
        report = gradcheck(lambda t: T.sum(T.mul(t, t)), x)
        assert report.passed
        assert report.max_error < 1e-7

    def test_product_rule_and_linearity(self):
        rng = Rng(6)
        a = Tensor(rng.uniform(-1, 1, (5,)))
        b = Tensor(rng.uniform(-1, 1, (5,)))
        report = gradcheck(lambda x: T.sum(T.mul(T.add(x, b), T.sub(x, b))), a, params={"b": b})
        assert report.passed
        assert set(report.errors) == {"input", "b"}

    def test_detects_a_wrong_backward(self):
        from lkformer.autograd import record

        def bad_square(x):
            out = Tensor._wrap(x.data * x.data)
            return record(out, (x,), lambda g, needs: (g * x.data,), "bad")  # missing factor 2

        x = Tensor(Rng(7).uniform(0.5, 1.0, (4,)))
        report = gradcheck(lambda t: T.sum(bad_square(t)), x)
        assert not report.passed
        assert report.max_error == pytest.approx(1.0 / 2.0, rel=1e-6)

    def test_restores_values_and_flags(self):
        x = Tensor(Rng(8).uniform(-1, 1, (6,)))
        before = x.data.copy()
        gradcheck(lambda t: T.sum(T.mul(t, t)), x)
        assert np.array_equal(x.data, before)
        assert x.requires_grad is False

    def test_non_finite_output_rejected(self):
        x = Tensor([1.0])
        with pytest.raises(ValueError, match="non-finite"):
            gradcheck(lambda t: T.sum(T.scale(t, np.inf)), x)

    def test_relative_error_denominator(self):
        err = relative_error(np.array([0.0, 1.0, 1e-12]), np.array([0.0, 1.1, 0.0]))
        assert err[0] == 0.0
        assert err[1] == pytest.approx(0.1 / 1.1)
        assert err[2] == pytest.approx(1e-4)

    def test_report_table(self):
        report = GradReport({"input": 3e-9, "weight": 2e-3})
        text = report.table("demo")
        assert not report.passed
        assert "demo" in text and "FAIL" in text and "ok" in text
