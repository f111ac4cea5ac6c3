"""The autodiff substrate: op semantics, finite-difference gradient checks,
tape mechanics, and the accumulation rules the rest of the stack leans on."""

import numpy as np
import pytest

from sumlab import autodiff as ad
from sumlab.autodiff import (NonFiniteError, NonScalarRootError, OPS,
                             ShapeMismatchError, Tape, TapeConsumedError,
                             Tensor, backward, finite_difference_grad,
                             forward_op, no_grad)

from conftest import assert_grads_close


def leaf(rng, shape, lo=-2.0, hi=2.0):
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)


def project(out: Tensor, rng) -> Tensor:
    """Random linear functional of ``out`` so every op is checked under a
    non-trivial cotangent."""
    c = Tensor(rng.uniform(-1.0, 1.0, out.shape))
    return ad.sum_all(ad.mul(out, c))


# ----- basic semantics -----


def test_square_sum_gradient_by_hand():
    x = Tensor([2.0, -3.0], requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_all(ad.mul(x, x))
    assert loss.item() == 13.0
    backward(tape, loss)
    assert np.array_equal(x.grad, [4.0, -6.0])


def test_scalar_is_stored_as_rank_one():
    t = Tensor(3.5)
    assert t.shape == (1,)
    assert t.item() == 3.5


def test_rank_three_rejected():
    with pytest.raises(ShapeMismatchError):
        Tensor(np.zeros((2, 2, 2)))


def test_empty_rejected():
    with pytest.raises(ShapeMismatchError):
        Tensor(np.zeros((0, 3)))


def test_matmul_values_and_bias_broadcast():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[1.0, 0.0], [0.0, 1.0]])
    assert np.array_equal(ad.matmul(a, b).data, a.data)
    bias = Tensor([10.0, 20.0])
    out = ad.add(a, bias)
    assert np.array_equal(out.data, [[11.0, 22.0], [13.0, 24.0]])


def test_matmul_rejects_bad_shapes():
    with pytest.raises(ShapeMismatchError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeMismatchError):
        ad.matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))


def test_softmax_rows_normalizes_and_shifts():
    x = Tensor([[1000.0, 1000.0, 1000.0], [0.0, 100.0, -50.0]])
    out = ad.softmax_rows(x)
    assert np.allclose(out.data.sum(axis=1), 1.0, atol=1e-12)
    assert np.allclose(out.data[0], 1.0 / 3.0)


def test_log_of_nonpositive_raises():
    with pytest.raises(NonFiniteError):
        ad.log(Tensor([0.0]))
    with pytest.raises(NonFiniteError):
        ad.log(Tensor([-1.0]))


def test_relu_values():
    out = ad.relu(Tensor([-1.0, 0.0, 2.5]))
    assert np.array_equal(out.data, [0.0, 0.0, 2.5])


def test_embedding_rejects_out_of_range():
    table = Tensor(np.ones((4, 2)))
    with pytest.raises(ShapeMismatchError):
        ad.embedding_lookup(table, [0, 4])


def test_slice_bounds_checked():
    a = Tensor(np.ones((3, 4)))
    with pytest.raises(ShapeMismatchError):
        ad.slice_(a, 2, 2, axis=0)
    with pytest.raises(ShapeMismatchError):
        ad.slice_(a, 0, 5, axis=1)


def test_dropout_mask_must_be_binary():
    a = Tensor(np.ones((2, 2)))
    with pytest.raises(ShapeMismatchError):
        ad.dropout_mask_apply(a, Tensor(np.full((2, 2), 0.5)))


def test_scale_rejects_nonfinite_factor():
    with pytest.raises(NonFiniteError):
        ad.scale(Tensor([1.0]), float("inf"))


def test_nonfinite_input_rejected():
    with pytest.raises(NonFiniteError):
        ad.exp(Tensor(np.array([1.0, np.nan])))


def test_op_registry_is_exactly_the_sixteen():
    assert set(OPS) == {
        "matmul", "add", "mul", "softmax_rows", "log", "exp", "relu",
        "layer_norm_rows", "embedding_lookup", "concat", "slice",
        "transpose", "scale", "sum", "mean", "dropout_mask_apply",
    }


def test_forward_op_dispatch_matches_direct_calls(rng):
    a = leaf(rng, (3, 4))
    b = leaf(rng, (4, 2))
    assert np.array_equal(forward_op("matmul", [a, b]).data, ad.matmul(a, b).data)
    assert np.array_equal(
        forward_op("slice", [a], start=1, stop=3, axis=1).data,
        ad.slice_(a, 1, 3, axis=1).data)
    with pytest.raises(ValueError):
        forward_op("does_not_exist", [a])


# ----- tape mechanics -----


def test_backward_needs_scalar_root(rng):
    x = leaf(rng, (2, 2))
    with Tape() as tape:
        out = ad.mul(x, x)
    with pytest.raises(NonScalarRootError):
        backward(tape, out)


def test_tape_single_use(rng):
    x = leaf(rng, (3,))
    with Tape() as tape:
        loss = ad.sum_all(x)
    backward(tape, loss)
    with pytest.raises(TapeConsumedError):
        backward(tape, loss)


def test_gradients_accumulate_across_tapes(rng):
    x = leaf(rng, (3,))
    with Tape() as t1:
        l1 = ad.sum_all(ad.mul(x, x))
    backward(t1, l1)
    first = x.grad.copy()
    with Tape() as t2:
        l2 = ad.sum_all(ad.mul(x, x))
    backward(t2, l2)
    assert np.array_equal(x.grad, 2.0 * first)


def test_no_grad_suppresses_recording(rng):
    x = leaf(rng, (3,))
    with Tape() as tape:
        with no_grad():
            ad.sum_all(ad.mul(x, x))
        assert len(tape) == 0
        loss = ad.sum_all(x)
        assert len(tape) == 1
    backward(tape, loss)
    assert np.array_equal(x.grad, np.ones(3))


def test_ops_outside_any_tape_are_not_recorded(rng):
    x = leaf(rng, (3,))
    out = ad.sum_all(x)
    assert out.tape is None


def test_detach_blocks_gradient(rng):
    x = leaf(rng, (3,))
    with Tape() as tape:
        loss = ad.sum_all(ad.mul(x.detach(), x))
    backward(tape, loss)
    assert np.array_equal(x.grad, x.data)  # only the undetached factor


def test_backward_is_bit_deterministic(rng):
    x = leaf(rng, (4, 4))
    y = leaf(rng, (4, 4))

    def run():
        x.zero_grad()
        y.zero_grad()
        with Tape() as tape:
            loss = ad.sum_all(ad.mul(ad.softmax_rows(ad.matmul(x, y)), x))
        backward(tape, loss)
        return x.grad.copy(), y.grad.copy()

    gx1, gy1 = run()
    gx2, gy2 = run()
    assert gx1.tobytes() == gx2.tobytes()
    assert gy1.tobytes() == gy2.tobytes()


# ----- bit-stability of the matmul kernel -----


def test_matmul_rows_are_independent(rng):
    a = Tensor(rng.standard_normal((7, 5)))
    b = Tensor(rng.standard_normal((5, 6)))
    full = ad.matmul(a, b).data
    for i in range(7):
        row = ad.matmul(Tensor(a.data[i : i + 1]), b).data
        assert row.tobytes() == full[i : i + 1].tobytes()


def test_matmul_single_column_matches_wide(rng):
    a = Tensor(rng.standard_normal((4, 5)))
    b = rng.standard_normal((5, 3))
    wide = ad.matmul(a, Tensor(b)).data
    narrow = ad.matmul(a, Tensor(b[:, :1])).data
    assert narrow.tobytes() == wide[:, :1].tobytes()


def test_matmul_exact_zero_rows_contribute_nothing(rng):
    # Appending all-zero columns to a and matching zero rows to b must not
    # change a single output bit; decoder causality relies on this.
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 6))
    extra = rng.standard_normal((5, 6))
    a_pad = np.hstack([a, np.zeros((3, 5))])
    b_pad = np.vstack([b, extra])
    lhs = ad.matmul(Tensor(a), Tensor(b)).data
    rhs = ad.matmul(Tensor(a_pad), Tensor(b_pad)).data
    assert lhs.tobytes() == rhs.tobytes()


# ----- finite-difference checks, one op at a time -----

N_SEEDS = 8


@pytest.mark.parametrize("seed", range(N_SEEDS))
def test_grad_matmul(seed):
    rng = np.random.default_rng(seed)
    a = leaf(rng, (3, 4))
    b = leaf(rng, (4, 2))
    check_op(lambda: ad.matmul(a, b), [a, b], rng)


@pytest.mark.parametrize("seed", range(N_SEEDS))
def test_grad_matmul_single_column(seed):
    rng = np.random.default_rng(seed)
    a = leaf(rng, (3, 4))
    b = leaf(rng, (4, 1))
    check_op(lambda: ad.matmul(a, b), [a, b], rng)


@pytest.mark.parametrize("seed", range(N_SEEDS))
def test_grad_add_same_shape(seed):
    rng = np.random.default_rng(seed)
    a = leaf(rng, (3, 4))
    b = leaf(rng, (3, 4))
    check_op(lambda: ad.add(a, b), [a, b], rng)


@pytest.mark.parametrize("seed", range(N_SEEDS))
def test_grad_add_bias(seed):
    rng = np.random.default_rng(seed)
    a = leaf(rng, (3, 4))
    b = leaf(rng, (4,))
    check_op(lambda: ad.add(a, b), [a, b], rng)


@pytest.mark.parametrize("seed", range(N_SEEDS))
def test_grad_mul(seed):
    rng = np.random.default_rng(seed)
    a = leaf(rng, (2, 5))
    b = leaf(rng, (2, 5))
    check_op(lambda: ad.mul(a, b), [a, b], rng)


@pytest.mark.parametrize("seed", range(N_SEEDS))
def test_grad_softmax_rows(seed):
    rng = np.random.default_rng(seed)
    a = leaf(rng, (3, 5))
    check_op(lambda: ad.softmax_rows(a), [a], rng)


@pytest.mark.parametrize("seed", range(N_SEEDS))
def test_grad_log(seed):
    rng = np.random.default_rng(seed)
    a = leaf(rng, (3, 4), lo=0.1, hi=3.0)
    check_op(lambda: ad.log(a), [a], rng)


@pytest.mark.parametrize("seed", range(N_SEEDS))
def test_grad_exp(seed):
    rng = np.random.default_rng(seed)
    a = leaf(rng, (3, 4), lo=-1.5, hi=1.5)
    check_op(lambda: ad.exp(a), [a], rng)


@pytest.mark.parametrize("seed", range(N_SEEDS))
def test_grad_relu(seed):
    rng = np.random.default_rng(seed)
    a = leaf(rng, (3, 4))
    # keep coordinates away from the kink so differencing is valid
    a.data[np.abs(a.data) < 0.05] += 0.1
    check_op(lambda: ad.relu(a), [a], rng)


@pytest.mark.parametrize("seed", range(N_SEEDS))
def test_grad_layer_norm_rows(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, (3, 6))
    gain = leaf(rng, (6,), lo=0.5, hi=1.5)
    bias = leaf(rng, (6,), lo=-0.5, hi=0.5)
    check_op(lambda: ad.layer_norm_rows(x, gain, bias), [x, gain, bias], rng)


@pytest.mark.parametrize("seed", range(N_SEEDS))
def test_grad_embedding_lookup(seed):
    rng = np.random.default_rng(seed)
    table = leaf(rng, (7, 4))
    ids = [0, 2, 2, 5]  # the repeat checks gradient sharing
    check_op(lambda: ad.embedding_lookup(table, ids), [table], rng)


@pytest.mark.parametrize("seed", range(N_SEEDS))
@pytest.mark.parametrize("axis", [0, 1])
def test_grad_concat(seed, axis):
    rng = np.random.default_rng(seed)
    shape_a = (2, 4) if axis == 0 else (3, 2)
    shape_b = (3, 4) if axis == 0 else (3, 5)
    a = leaf(rng, shape_a)
    b = leaf(rng, shape_b)
    check_op(lambda: ad.concat(a, b, axis=axis), [a, b], rng)


@pytest.mark.parametrize("seed", range(N_SEEDS))
@pytest.mark.parametrize("axis", [0, 1])
def test_grad_slice(seed, axis):
    rng = np.random.default_rng(seed)
    a = leaf(rng, (4, 5))
    check_op(lambda: ad.slice_(a, 1, 3, axis=axis), [a], rng)


@pytest.mark.parametrize("seed", range(N_SEEDS))
def test_grad_transpose(seed):
    rng = np.random.default_rng(seed)
    a = leaf(rng, (3, 5))
    check_op(lambda: ad.transpose(a), [a], rng)


@pytest.mark.parametrize("seed", range(N_SEEDS))
def test_grad_scale(seed):
    rng = np.random.default_rng(seed)
    a = leaf(rng, (3, 4))
    check_op(lambda: ad.scale(a, -2.5), [a], rng)


@pytest.mark.parametrize("seed", range(N_SEEDS))
def test_grad_sum(seed):
    rng = np.random.default_rng(seed)
    a = leaf(rng, (3, 4))
    check_op(lambda: ad.sum_all(a), [a], rng)


@pytest.mark.parametrize("seed", range(N_SEEDS))
def test_grad_mean(seed):
    rng = np.random.default_rng(seed)
    a = leaf(rng, (3, 4))
    check_op(lambda: ad.mean_all(a), [a], rng)


@pytest.mark.parametrize("seed", range(N_SEEDS))
def test_grad_dropout_mask_apply(seed):
    rng = np.random.default_rng(seed)
    a = leaf(rng, (3, 4))
    mask = Tensor((rng.random((3, 4)) >= 0.5).astype(float))
    check_op(lambda: ad.dropout_mask_apply(a, mask), [a], rng)
    # and the dropped coordinates must have exactly zero gradient
    with Tape() as tape:
        loss = ad.sum_all(ad.dropout_mask_apply(a, mask))
    a.zero_grad()
    backward(tape, loss)
    assert np.array_equal(a.grad, mask.data)


def check_op(op_fn, params, rng):
    """FD-verify d(projection(op))/d(param) for every parameter."""
    c = Tensor(rng.uniform(-1.0, 1.0, op_fn().shape))

    def loss_fn():
        with no_grad():
            return ad.sum_all(ad.mul(op_fn(), c)).item()

    numeric = finite_difference_grad(loss_fn, params)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = ad.sum_all(ad.mul(op_fn(), c))
    backward(tape, loss)
    for p, num in zip(params, numeric):
        assert p.grad is not None
        assert_grads_close(p.grad, num)


# ----- the FD oracle itself -----


def test_fd_oracle_rejects_nondeterministic_loss():
    calls = []

    def noisy():
        calls.append(1)
        return float(len(calls))

    with pytest.raises(ValueError):
        finite_difference_grad(noisy, [Tensor([1.0], requires_grad=True)])


def test_fd_oracle_rejects_bad_step():
    with pytest.raises(ValueError):
        finite_difference_grad(lambda: 0.0, [], h=0.0)


def test_fd_oracle_restores_values(rng):
    x = Tensor(rng.uniform(-1, 1, (2, 3)), requires_grad=True)
    before = x.data.copy()
    finite_difference_grad(lambda: float(x.data.sum()), [x])
    assert np.array_equal(x.data, before)
