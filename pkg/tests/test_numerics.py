"""Tests for the differentiable tensor core."""

import numpy as np
import pytest

import adamatch.numerics as nm
from adamatch.errors import ContractViolation, DeterminismError, NumericDomainError
from adamatch.numerics import (
    OP_REGISTRY,
    OptimizerState,
    Tape,
    Tensor,
    finite_diff_check,
    forward_op,
    sgd_step,
)


def test_forward_op_trivial_examples():
    t = Tape()
    assert forward_op("tanh", [t.tensor(0.0)]).item() == 0.0
    assert forward_op("relu", [nm.tanh(t.tensor(-2.0))]).item() == 0.0
    a = t.tensor([[1.0, 2.0], [3.0, 4.0]])
    eye = t.tensor(np.eye(2))
    assert np.array_equal(forward_op("matmul", [a, eye]).values, a.values)


def test_forward_op_unknown_name():
    t = Tape()
    with pytest.raises(ContractViolation):
        forward_op("convolve", [t.tensor(1.0)])


def test_backward_linear_and_tanh():
    t = Tape()
    x = t.parameter([1.0, -2.0, 5.0])
    t.backward(nm.sum_(x))
    assert np.array_equal(x.grad, [1.0, 1.0, 1.0])

    t2 = Tape()
    y = t2.parameter(0.0)
    t2.backward(nm.tanh(y))
    assert y.grad == pytest.approx(1.0, abs=1e-15)


def test_backward_accumulates_until_zeroed():
    t = Tape()
    x = t.parameter([2.0])
    loss = nm.sum_(nm.mul(x, x))
    t.backward(loss)
    t.backward(loss)
    assert np.allclose(x.grad, [8.0])  # 2 * (2x)
    x.zero_grad()
    t.backward(loss)
    assert np.allclose(x.grad, [4.0])


def test_backward_rejects_nonscalar():
    t = Tape()
    x = t.parameter([1.0, 2.0])
    y = nm.mul(x, x)
    with pytest.raises(ContractViolation):
        t.backward(y)


def test_shape_mismatch_is_contract_violation():
    t = Tape()
    a = t.tensor(np.ones((3, 4)))
    b = t.tensor(np.ones((2, 4)))
    with pytest.raises(ContractViolation):
        nm.add(a, b)
    with pytest.raises(ContractViolation):
        nm.matmul(a, b)


def test_log_domain_error_in_test_mode():
    t = Tape()
    x = t.parameter([1.0, -1.0])
    with pytest.raises(NumericDomainError):
        nm.log(x)


def test_exp_overflow_flagged():
    t = Tape()
    x = t.parameter([1000.0])
    with pytest.raises(NumericDomainError):
        nm.exp(x)


def test_finite_diff_square_at_three():
    t = Tape()
    x = t.parameter(3.0)
    rep = finite_diff_check(lambda: nm.mul(x, x), [x], h=1e-5, tol=1e-8)
    assert rep.passed, rep.max_rel_errors
    x.zero_grad()
    t.backward(nm.mul(x, x))
    assert x.grad == pytest.approx(6.0, rel=1e-12)


def test_finite_diff_detects_nondeterminism():
    t = Tape()
    x = t.parameter(1.0)
    state = {"n": 0.0}

    def f():
        state["n"] += 1.0
        return nm.mul(x, t.tensor(state["n"]))

    with pytest.raises(DeterminismError):
        finite_diff_check(f, [x])


# ---------------------------------------------------------------------------
# per-op gradient suite: every registered op is finite-difference checked at
# 10 random points, 1e-6 for smooth ops and 1e-4 for piecewise ones.


def _away_from(rng, shape, margin=0.1, low=-1.0, high=1.0):
    """Uniform values with |x| >= margin (keeps relu/max kinks off the path)."""
    x = rng.uniform(margin, high, size=shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return x * sign


def _interior_points(rng, n, H, W):
    """Sample coords whose fractional cell offsets stay away from lattice lines."""
    fu = rng.uniform(0.15, 0.85, size=n)
    fv = rng.uniform(0.15, 0.85, size=n)
    c = rng.integers(0, W - 1, size=n)
    r = rng.integers(0, H - 1, size=n)
    x = (c + fu + 0.5) / W
    y = (r + fv + 0.5) / H
    return np.stack([x, y], axis=-1)


def _op_case(name, rng, tape):
    """Return (f, params) exercising op `name` as a scalar-valued function."""
    P = tape.parameter

    def scalarize(out):
        # random fixed projection so reductions do not hide gradients
        return nm.sum_(nm.mul(out, Tensor(proj[: out.size].reshape(out.shape))))

    proj = rng.normal(size=256)
    if name in ("add", "mul", "sub", "div"):
        a, b = P(rng.normal(size=(3, 4))), P(_away_from(rng, (3, 4), margin=0.4, high=2.0))
        return lambda: scalarize(getattr(nm, name)(a, b)), [a, b]
    if name == "neg":
        a = P(rng.normal(size=(5,)))
        return lambda: scalarize(nm.neg(a)), [a]
    if name in ("tanh", "exp"):
        a = P(rng.normal(size=(3, 3)))
        return lambda: scalarize(getattr(nm, name)(a)), [a]
    if name == "relu":
        a = P(_away_from(rng, (4, 4)))
        return lambda: scalarize(nm.relu(a)), [a]
    if name in ("log", "sqrt"):
        a = P(rng.uniform(0.3, 2.0, size=(3, 3)))
        return lambda: scalarize(getattr(nm, name)(a)), [a]
    if name == "clamp":
        a = P(_away_from(rng, (8,), margin=0.2, high=2.0) + 3.0)  # away from bounds 2.5/3.5
        return lambda: scalarize(nm.clamp(a, 2.45, 3.55)), [a]
    if name == "matmul":
        a, b = P(rng.normal(size=(3, 4))), P(rng.normal(size=(4, 2)))
        return lambda: scalarize(nm.matmul(a, b)), [a, b]
    if name == "reshape":
        a = P(rng.normal(size=(2, 6)))
        return lambda: scalarize(nm.reshape(a, (3, 4))), [a]
    if name == "transpose":
        a = P(rng.normal(size=(2, 3, 4)))
        return lambda: scalarize(nm.transpose(a, (2, 0, 1))), [a]
    if name == "expand":
        a = P(rng.normal(size=(3, 1)))
        return lambda: scalarize(nm.expand(a, (2, 3, 4))), [a]
    if name == "concat":
        a, b = P(rng.normal(size=(2, 3))), P(rng.normal(size=(4, 3)))
        return lambda: scalarize(nm.concat([a, b], axis=0)), [a, b]
    if name == "slice":
        a = P(rng.normal(size=(4, 5)))
        return lambda: scalarize(nm.slice_(a, (slice(1, 3), slice(0, 4)))), [a]
    if name == "gather":
        a = P(rng.normal(size=(5, 3)))
        idx = rng.integers(0, 5, size=7)
        return lambda: scalarize(nm.gather(a, idx, axis=0)), [a]
    if name == "take_rowwise":
        a = P(rng.normal(size=(4, 6)))
        idx = rng.integers(0, 6, size=4)
        return lambda: scalarize(nm.take_rowwise(a, idx)), [a]
    if name in ("sum", "mean"):
        a = P(rng.normal(size=(3, 4)))
        op = nm.sum_ if name == "sum" else nm.mean
        return lambda: scalarize(op(a, axis=1)), [a]
    if name == "max_over_axis":
        a = P(_away_from(rng, (3, 5), margin=0.05, high=3.0))
        a.values += np.arange(15).reshape(3, 5) * 10  # well-separated maxima
        return lambda: scalarize(nm.max_over_axis(a, axis=1)), [a]
    if name in ("logsumexp", "softmax_logsumexp"):
        a = P(rng.normal(size=(3, 4)))
        op = nm.logsumexp if name == "logsumexp" else nm.softmax_logsumexp
        return lambda: scalarize(op(a, axis=-1)), [a]
    if name == "l2_normalize":
        a = P(rng.normal(size=(3, 4)) + 0.5)
        return lambda: scalarize(nm.l2_normalize(a)), [a]
    if name == "pair_dot":
        zi, zt = P(rng.normal(size=(2, 3, 4))), P(rng.normal(size=(2, 2, 4)))
        return lambda: scalarize(nm.pair_dot(zi, zt)), [zi, zt]
    if name == "bilinear":
        grid = P(rng.normal(size=(4, 5, 3)))
        pts = P(_interior_points(rng, 6, 4, 5))
        return lambda: scalarize(nm.bilinear(grid, pts)), [grid, pts]
    if name == "scaled_dot_attention":
        q, k, v = (P(rng.normal(size=(3, 4)) * 0.5) for _ in range(3))
        return lambda: scalarize(nm.scaled_dot_attention(q, k, v)), [q, k, v]
    raise AssertionError(f"no finite-difference case for op '{name}'")


def test_every_registered_op_has_a_case():
    rng = np.random.default_rng(0)
    for name in OP_REGISTRY:
        _op_case(name, rng, Tape())


@pytest.mark.parametrize("name", sorted(OP_REGISTRY))
def test_op_gradients_match_finite_differences(name):
    _, smooth = OP_REGISTRY[name]
    tol = 1e-6 if smooth else 1e-4
    for seed in range(10):
        tape = Tape()
        rng = np.random.default_rng(1000 + seed)
        f, params = _op_case(name, rng, tape)
        rep = finite_diff_check(f, params, h=1e-5, tol=tol)
        assert rep.passed, f"{name} seed {seed}: worst rel err {rep.worst}"


def test_softmax_shift_invariance():
    rng = np.random.default_rng(7)
    t = Tape()
    x = rng.normal(size=(4, 6))
    for c in (0.5, -3.0, 100.0):
        a = nm.softmax_logsumexp(t.tensor(x), axis=-1).values
        b = nm.softmax_logsumexp(t.tensor(x + c), axis=-1).values
        assert np.max(np.abs(a - b)) < 1e-12


def test_max_over_axis_tie_breaking_lowest_index():
    t = Tape()
    x = t.parameter([[1.0, 3.0, 3.0], [2.0, 2.0, 0.0]])
    out, idx = nm.max_with_indices(x, axis=1)
    assert np.array_equal(idx, [1, 0])
    t.backward(nm.sum_(out))
    expected = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
    assert np.array_equal(x.grad, expected)


def test_tape_determinism_bitwise():
    def run():
        rng = np.random.default_rng(42)
        t = Tape()
        a = t.parameter(rng.normal(size=(6, 6)))
        b = t.parameter(rng.normal(size=(6, 6)))
        loss = nm.sum_(nm.tanh(nm.matmul(a, nm.softmax_logsumexp(b))))
        t.backward(loss)
        return loss.values.tobytes(), a.grad.tobytes(), b.grad.tobytes()

    assert run() == run()


def test_sgd_basic_and_momentum_recurrence():
    t = Tape()
    p = t.parameter(1.0)
    p.grad = np.asarray(2.0)
    sgd_step(OptimizerState(learning_rate=0.1), [p])
    assert p.values == pytest.approx(0.8)

    q = t.parameter(1.0)
    q.grad = np.asarray(5.0)
    sgd_step(OptimizerState(learning_rate=0.0), [q])
    assert q.values == pytest.approx(1.0)

    # two steps with momentum 0.9 and constant gradient g:
    # p2 = p0 - lr*g - lr*1.9*g (hand recurrence)
    lr, g, p0 = 0.01, 3.0, 2.0
    r = t.parameter(p0)
    state = OptimizerState(learning_rate=lr, momentum=0.9)
    r.grad = np.asarray(g)
    sgd_step(state, [r])
    r.grad = np.asarray(g)
    sgd_step(state, [r])
    assert r.values == pytest.approx(p0 - lr * g - lr * 1.9 * g, rel=1e-12)


def test_sgd_decoupled_weight_decay():
    t = Tape()
    p = t.parameter(2.0)
    p.grad = np.asarray(0.0)
    sgd_step(OptimizerState(learning_rate=0.1, weight_decay=0.5), [p])
    assert p.values == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_sgd_missing_grad_rejected():
    t = Tape()
    p = t.tensor(1.0)  # not a parameter
    with pytest.raises(ContractViolation):
        sgd_step(OptimizerState(learning_rate=0.1), [p])


def test_sgd_zeroes_grads():
    t = Tape()
    p = t.parameter([1.0, 2.0])
    p.grad = np.asarray([1.0, 1.0])
    sgd_step(OptimizerState(learning_rate=0.1), [p])
    assert np.array_equal(p.grad, [0.0, 0.0])


def test_tensor_file_roundtrip(tmp_path):
    from adamatch.numerics import load_tensor, save_tensor

    rng = np.random.default_rng(3)
    for arr in (rng.normal(size=(3, 4, 2)), np.float32(rng.normal(size=(5,))),
                np.asarray(2.5)):
        path = tmp_path / "t.admt"
        save_tensor(path, np.asarray(arr))
        back = load_tensor(path)
        assert back.dtype == np.asarray(arr).dtype
        assert np.array_equal(back, arr)


def test_tensor_file_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.admt"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    from adamatch.numerics import load_tensor

    with pytest.raises(ContractViolation):
        load_tensor(path)


def test_distinct_tapes_cannot_mix():
    t1, t2 = Tape(), Tape()
    a = t1.parameter([1.0])
    b = t2.parameter([1.0])
    with pytest.raises(ContractViolation):
        nm.add(a, b)
