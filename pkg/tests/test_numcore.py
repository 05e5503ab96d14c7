import numpy as np
import pytest

from marc.numcore import (
    Adam,
    NumericError,
    Tape,
    Tensor,
    absolute,
    add,
    backward,
    clamp,
    concat_cols,
    concat_rows,
    div,
    exp,
    finite_diff_check,
    log,
    matmul,
    mean_all,
    mul,
    pairwise_sqdist,
    relu,
    row_sum,
    scale,
    sigmoid,
    slice_cols,
    softmax_rows,
    sqrt,
    sub,
    sum_all,
    take_rows,
    trace,
    transpose,
)


def test_trace_identity():
    assert trace(Tensor(np.eye(2))).item() == 2.0


def test_trace_non_square_errors():
    with pytest.raises(ValueError, match="trace"):
        trace(Tensor(np.ones((2, 3))))


def test_pairwise_sqdist_analytic():
    d = pairwise_sqdist(Tensor([[0.0], [1.0]]))
    assert np.array_equal(d.values, [[0.0, 1.0], [1.0, 0.0]])


def test_pairwise_sqdist_symmetric_zero_diag():
    rng = np.random.default_rng(0)
    for _ in range(5):
        x = rng.normal(size=(7, 4))
        d = pairwise_sqdist(Tensor(x)).values
        assert np.array_equal(d, d.T)
        assert np.array_equal(np.diag(d), np.zeros(7))


def test_sigmoid_zero():
    assert sigmoid(Tensor([[0.0]])).item() == 0.5


def test_matmul_identity_exact():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(4, 6))
    out = matmul(Tensor(a), Tensor(np.eye(6)))
    assert np.array_equal(out.values, a)


def test_transpose_involution_exact():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(3, 5))
    assert np.array_equal(transpose(transpose(Tensor(a))).values, a)


def test_trace_cyclic():
    rng = np.random.default_rng(3)
    for _ in range(10):
        a, b = rng.normal(size=(5, 5)), rng.normal(size=(5, 5))
        tab = trace(matmul(Tensor(a), Tensor(b))).item()
        tba = trace(matmul(Tensor(b), Tensor(a))).item()
        assert abs(tab - tba) < 1e-10


def test_matmul_shape_error_names_op():
    with pytest.raises(ValueError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_backward_sum_gives_ones():
    w = Tensor(np.random.default_rng(0).normal(size=(2, 2)), requires_grad=True)
    with Tape():
        backward(sum_all(w))
    assert np.array_equal(w.grad, np.ones((2, 2)))


def test_backward_quadratic_gives_w():
    w = Tensor(np.random.default_rng(1).normal(size=(3, 3)), requires_grad=True)
    with Tape():
        backward(scale(trace(matmul(transpose(w), w)), 0.5))
    assert np.allclose(w.grad, w.values, atol=1e-12)


def test_backward_accumulates_until_zeroed():
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape():
        loss = sum_all(w)
        backward(loss)
        backward(loss)
    assert np.array_equal(w.grad, 2 * np.ones((2, 2)))
    w.zero_grad()
    with Tape():
        backward(sum_all(w))
    assert np.array_equal(w.grad, np.ones((2, 2)))


def test_backward_requires_scalar():
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape():
        out = scale(w, 2.0)
        with pytest.raises(ValueError, match="1x1"):
            backward(out)


def test_backward_requires_tape_membership():
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    loss = sum_all(w)  # no active tape: not recorded
    with Tape():
        with pytest.raises(ValueError, match="not produced"):
            backward(loss)


def test_grad_of_non_grad_tensor_never_read():
    t = Tensor(np.ones((2, 2)))
    with pytest.raises(ValueError, match="requires_grad=False"):
        _ = t.grad


def test_non_finite_forward_aborts():
    big = Tensor(np.full((2, 2), 1e308))
    with pytest.raises(NumericError, match="exp"):
        exp(big)


def test_adam_zero_grad_keeps_params():
    p = Tensor(np.ones((2, 2)), requires_grad=True)
    opt = Adam([p], lr=0.1)
    opt.step()
    assert np.array_equal(p.values, np.ones((2, 2)))
    assert opt.t == 1


def test_adam_first_step_is_lr_sized():
    p = Tensor(np.array([[1.0]]), requires_grad=True)
    opt = Adam([p], lr=0.1)
    with Tape():
        backward(sum_all(p))
    opt.step()
    # bias-corrected first step with unit gradient moves by ~lr
    assert abs((1.0 - p.values[0, 0]) - 0.1) < 1e-8
    assert p._grad is None  # grads zeroed afterward


def test_adam_step_counter():
    p = Tensor(np.ones((1, 1)), requires_grad=True)
    opt = Adam([p], lr=0.01)
    opt.step()
    opt.step()
    assert opt.t == 2


def test_adam_non_finite_grad_aborts():
    p = Tensor(np.ones((1, 1)), requires_grad=True, name="theta")
    opt = Adam([p])
    p._grad = np.array([[np.nan]])
    with pytest.raises(NumericError, match="theta"):
        opt.step()


def test_finite_diff_quadratic_is_near_exact():
    w = Tensor(np.random.default_rng(5).normal(size=(3, 2)), requires_grad=True)
    rep = finite_diff_check(lambda: scale(sum_all(mul(w, w)), 0.5), [w], step=1e-5, tol=1e-4)
    assert rep["max_rel_err"] < 1e-8


def test_finite_diff_sigmoid_dot():
    rng = np.random.default_rng(6)
    w = Tensor(rng.normal(size=(4, 1)), requires_grad=True)
    x = Tensor(rng.normal(size=(1, 4)))
    rep = finite_diff_check(lambda: sigmoid(matmul(x, w)), [w], step=1e-5, tol=1e-4)
    assert rep["passed"], rep


def _primitive_cases(rng):
    """(name, builder) pairs; each builder returns (f, params)."""
    a = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    sq = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    m1 = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    m2 = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    pos = Tensor(rng.uniform(0.5, 2.0, size=(4, 3)), requires_grad=True)
    # keep relu/abs inputs away from the kink so central differences are valid
    kinked = Tensor(rng.uniform(0.1, 1.0, size=(4, 3)) * rng.choice([-1.0, 1.0], size=(4, 3)),
                    requires_grad=True)
    bias = Tensor(rng.normal(size=(1, 3)), requires_grad=True)
    col = Tensor(rng.normal(size=(4, 1)), requires_grad=True)
    pw_weight = Tensor(rng.normal(size=(4, 4)))
    cases = [
        ("matmul", lambda: sum_all(matmul(m1, m2)), [m1, m2]),
        ("add", lambda: sum_all(mul(add(a, b), b)), [a, b]),
        ("add_rowbcast", lambda: sum_all(mul(add(a, bias), a)), [a, bias]),
        ("add_colbcast", lambda: sum_all(mul(add(a, col), a)), [a, col]),
        ("sub", lambda: sum_all(mul(sub(a, b), a)), [a, b]),
        ("mul", lambda: sum_all(mul(a, b)), [a, b]),
        ("div", lambda: sum_all(div(a, pos)), [a, pos]),
        ("scale", lambda: sum_all(scale(a, -2.5)), [a]),
        ("absolute", lambda: sum_all(absolute(kinked)), [kinked]),
        ("relu", lambda: sum_all(mul(relu(kinked), b)), [kinked]),
        ("sigmoid", lambda: sum_all(mul(sigmoid(a), b)), [a]),
        ("exp", lambda: sum_all(mul(exp(a), b)), [a]),
        ("log", lambda: sum_all(mul(log(pos), b)), [pos]),
        ("sqrt", lambda: sum_all(mul(sqrt(pos), b)), [pos]),
        ("clamp", lambda: sum_all(clamp(scale(pos, 1.0), 0.6, 1.8)), [pos]),
        ("transpose", lambda: sum_all(matmul(transpose(m1), m1)), [m1]),
        ("concat_rows", lambda: sum_all(mul(concat_rows([a, b]), concat_rows([b, a]))), [a, b]),
        ("concat_cols", lambda: sum_all(mul(concat_cols([a, b]), concat_cols([b, a]))), [a, b]),
        ("slice_cols", lambda: sum_all(mul(slice_cols(a, 1, 3), slice_cols(b, 0, 2))), [a]),
        ("take_rows", lambda: sum_all(mul(take_rows(a, [0, 2, 2, 3]), take_rows(b, [0, 2, 2, 3]))), [a]),
        ("row_sum", lambda: sum_all(mul(row_sum(a), col)), [a]),
        ("sum", lambda: mul(sum_all(a), sum_all(b)), [a]),
        ("mean", lambda: mul(mean_all(a), mean_all(b)), [a]),
        ("trace", lambda: trace(matmul(sq, sq)), [sq]),
        ("pairwise_sqdist", lambda: sum_all(mul(pairwise_sqdist(m1), pw_weight)), [m1]),
        ("softmax_rows", lambda: sum_all(mul(softmax_rows(a), b)), [a]),
    ]
    return cases


@pytest.mark.parametrize("seed", range(20))
def test_every_primitive_matches_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    for name, f, params in _primitive_cases(rng):
        rep = finite_diff_check(f, params, step=1e-5, tol=1e-4)
        assert rep["passed"], f"{name}: max rel err {rep['max_rel_err']:.3g}"


def test_clamp_forward():
    out = clamp(Tensor([[-1.0, 0.5, 2.0]]), 0.0, 1.0)
    assert np.array_equal(out.values, [[0.0, 0.5, 1.0]])


def test_softmax_rows_sums_to_one():
    rng = np.random.default_rng(9)
    s = softmax_rows(Tensor(rng.normal(size=(5, 7)))).values
    assert np.allclose(s.sum(axis=1), 1.0, atol=1e-12)


def test_take_rows_out_of_range():
    with pytest.raises(ValueError, match="take_rows"):
        take_rows(Tensor(np.ones((3, 2))), [0, 3])


def test_tensor_must_be_2d():
    with pytest.raises(ValueError, match="2-D"):
        Tensor(np.ones((2, 2, 2)))
