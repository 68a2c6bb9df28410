import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nsrnn import tape as T
from nsrnn.checks import finite_difference, relative_error
from nsrnn.semiring import (NEG_INF, contraction_adjoints, log_add, logsumexp,
                            semiring_contract)

finite = st.floats(-30, 30, allow_nan=False)


def test_log_add_examples():
    assert log_add(NEG_INF, NEG_INF) == NEG_INF
    assert log_add(1.7, NEG_INF) == 1.7
    assert log_add(NEG_INF, -3.0) == -3.0
    assert log_add(0.0, 0.0) == pytest.approx(math.log(2), abs=1e-15)


def test_log_add_never_nan():
    out = log_add(np.array([NEG_INF, 0.0, 5.0]), np.array([NEG_INF, NEG_INF, 5.0]))
    assert not np.any(np.isnan(out))
    assert out[0] == NEG_INF and out[1] == 0.0


@given(finite, finite, finite)
def test_log_add_assoc_commutative(a, b, c):
    assert log_add(a, b) == pytest.approx(log_add(b, a), abs=1e-12)
    assert log_add(log_add(a, b), c) == pytest.approx(log_add(a, log_add(b, c)), abs=1e-12)


def test_logsumexp_examples():
    assert logsumexp([2.5]) == 2.5
    assert logsumexp([]) == NEG_INF
    assert logsumexp([0.0, 0.0, 0.0]) == pytest.approx(1.098612, abs=1e-6)
    assert logsumexp([NEG_INF, NEG_INF]) == NEG_INF


@given(st.lists(finite, min_size=1, max_size=8))
def test_logsumexp_at_least_max(xs):
    assert logsumexp(xs) >= max(xs)
    # same sum in real space
    assert logsumexp(xs) == pytest.approx(math.log(sum(math.exp(x) for x in xs)), abs=1e-9)


def test_real_matrix_product():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[5.0, 6.0], [7.0, 8.0]])
    for method in ("auto", "blocked"):
        out = semiring_contract("ij,jk->ik", [a, b], semiring="real", method=method)
        assert out.tolist() == [[19.0, 22.0], [43.0, 50.0]]


def test_log_vector_dot():
    z = np.zeros(3)
    assert semiring_contract("i,i->", [z, z]) == pytest.approx(math.log(3), abs=1e-15)
    assert semiring_contract("i,i->", [z, z], method="blocked") == pytest.approx(math.log(3), abs=1e-15)


def test_identity_contraction():
    x = np.log(np.random.default_rng(0).random((3, 4)))
    eye = np.where(np.eye(4) > 0, 0.0, NEG_INF)
    np.testing.assert_allclose(semiring_contract("ij,jk->ik", [x, eye]), x, atol=1e-15)
    np.testing.assert_allclose(semiring_contract("ij,jk->ik", [x, eye], method="blocked"), x,
                               atol=1e-15)


def test_shape_mismatch_is_reported():
    with pytest.raises(ValueError):
        semiring_contract("ij,jk->ik", [np.zeros((2, 3)), np.zeros((4, 2))])


def test_masked_entries_stay_zero():
    x = np.array([[0.0, NEG_INF], [NEG_INF, NEG_INF]])
    out = semiring_contract("ij,jk->ik", [x, x])
    assert out[0, 0] == 0.0
    assert np.all(np.isneginf(out[1]))


def _naive(letters_in, letter_out, operands, sizes):
    out_shape = tuple(sizes[c] for c in letter_out)
    out = np.zeros(out_shape)
    names = sorted(sizes)
    for assign in itertools.product(*(range(sizes[c]) for c in names)):
        env = dict(zip(names, assign))
        prod = 1.0
        for letters, op in zip(letters_in, operands):
            prod *= op[tuple(env[c] for c in letters)]
        out[tuple(env[c] for c in letter_out)] += prod
    return out


SPECS = ["ij,jk->ik", "abc,cd->abd", "ab,bc,cd->ad", "abcd,bd->ac", "ij,ij->i", "i,j->ij"]


@pytest.mark.parametrize("spec", SPECS)
def test_real_contract_matches_loops(spec):
    rng = np.random.default_rng(7)
    ins, out = spec.split("->")
    ins = ins.split(",")
    sizes = {c: int(rng.integers(1, 5)) for c in set("".join(ins))}
    # small integers make both sides exact
    ops = [rng.integers(0, 5, size=tuple(sizes[c] for c in s)).astype(float) for s in ins]
    want = _naive(ins, out, ops, sizes)
    assert np.array_equal(semiring_contract(spec, ops, semiring="real"), want)
    assert np.array_equal(semiring_contract(spec, ops, semiring="real", method="blocked"), want)


@pytest.mark.parametrize("spec", SPECS)
def test_block_size_invariance(spec):
    rng = np.random.default_rng(11)
    ins = spec.split("->")[0].split(",")
    sizes = {c: 4 for c in set("".join(ins))}
    real = [rng.random(tuple(sizes[c] for c in s)) for s in ins]
    logs = [np.log(r) for r in real]
    rs = [semiring_contract(spec, real, block_size=b, semiring="real", method="blocked")
          for b in (1, 7, 64)]
    ls = [semiring_contract(spec, logs, block_size=b, method="blocked") for b in (1, 7, 64)]
    assert np.array_equal(rs[0], rs[1]) and np.array_equal(rs[0], rs[2])
    np.testing.assert_allclose(ls[0], ls[1], atol=1e-12, rtol=0)
    np.testing.assert_allclose(ls[0], ls[2], atol=1e-12, rtol=0)
    np.testing.assert_allclose(ls[0], np.log(rs[0]), atol=1e-12, rtol=0)


def test_log_contract_extreme_scale():
    # values far outside exp() range must not overflow or underflow
    x = np.array([[-800.0, -801.0], [700.0, 2.0]])
    y = np.array([[0.0], [-1.0]])
    out = semiring_contract("ij,jk->ik", [x, y])
    assert out[0, 0] == pytest.approx(log_add(-800.0, -802.0), abs=1e-12)
    assert out[1, 0] == pytest.approx(log_add(700.0, 1.0), abs=1e-12)


@pytest.mark.parametrize("method", ["auto", "blocked"])
def test_adjoint_examples(method):
    g = contraction_adjoints("i->", [np.array([0.3])], 0.3, 2.0, method=method)
    assert g[0].tolist() == [2.0]
    x = np.array([1.5, 1.5])
    y = logsumexp(x)
    g = contraction_adjoints("i->", [x], y, 3.0, method=method)
    np.testing.assert_allclose(g[0], [1.5, 1.5], atol=1e-15)


@pytest.mark.parametrize("method", ["auto", "blocked"])
def test_contract_adjoints_fd(method):
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 2))
    proj = rng.normal(size=(2, 2))

    def f():
        return float(np.sum(proj * semiring_contract("ij,jk->ik", [a, b], method=method)))

    y = semiring_contract("ij,jk->ik", [a, b], method=method)
    ga, gb = contraction_adjoints("ij,jk->ik", [a, b], y, proj, method=method)
    for x, g in ((a, ga), (b, gb)):
        _, num = finite_difference(f, x)
        assert relative_error(g.ravel(), num) < 1e-4


def test_real_adjoints_are_matmul_adjoints():
    rng = np.random.default_rng(4)
    a, b, g = rng.normal(size=(2, 3)), rng.normal(size=(3, 4)), rng.normal(size=(2, 4))
    ga, gb = contraction_adjoints("ij,jk->ik", [a, b], a @ b, g, semiring="real")
    np.testing.assert_allclose(ga, g @ b.T, atol=1e-14)
    np.testing.assert_allclose(gb, a.T @ g, atol=1e-14)


def test_elementwise_examples():
    assert T.sigmoid(0.0).value == 0.5
    np.testing.assert_allclose(T.softmax(np.zeros(3)).value, [1 / 3] * 3, atol=1e-15)
    x = T.Var(np.array(0.0), requires_grad=True)
    with T.Tape() as tape:
        y = T.tanh(x)
    tape.backward(y)
    assert x.grad == pytest.approx(1.0)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=6))
def test_softmax_sums_to_one(xs):
    assert T.softmax(np.array(xs)).value.sum() == pytest.approx(1.0, abs=1e-12)


UNARY = {
    "sigmoid": T.sigmoid, "tanh": T.tanh, "exp": T.exp, "log_sigmoid": T.log_sigmoid,
    "softmax": T.softmax, "log_softmax": T.log_softmax, "cumsum": T.cumsum,
    "logsumexp": lambda v: T.logsumexp(v, axis=-1),
    "log": lambda v: T.log(T.exp(v) + 0.5),
    "square": T.square,
}


def _check_fd(build, inputs, rng, tol=1e-4):
    vars_ = [T.Var(x, requires_grad=True) for x in inputs]
    with T.Tape() as tape:
        out = build(*vars_)
    proj = rng.normal(size=out.value.shape)
    with T.Tape() as tape:
        out = build(*vars_)
        loss = T.sum(T.mul(out, proj))
    tape.backward(loss)

    def f():
        with T.no_grad():
            return float(np.sum(build(*[T.Var(v.value) for v in vars_]).value * proj))

    for v in vars_:
        _, num = finite_difference(f, v.value)
        assert relative_error(v.grad.ravel(), num) < tol


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_adjoints(name):
    rng = np.random.default_rng(5)
    _check_fd(UNARY[name], [rng.normal(size=(2, 3))], rng)


def test_affine_and_binary_adjoints():
    rng = np.random.default_rng(6)
    _check_fd(T.affine, [rng.normal(size=(2, 3)), rng.normal(size=(4, 3)), rng.normal(size=4)], rng)
    _check_fd(T.div, [rng.normal(size=(2, 3)), rng.uniform(1, 2, size=(2, 3))], rng)
    _check_fd(T.log_add, [rng.normal(size=(2, 3)), rng.normal(size=(3,))], rng)
    _check_fd(lambda a, b: T.contract("ij,jk->ik", a, b), [rng.normal(size=(2, 3)),
                                                          rng.normal(size=(3, 2))], rng)
    _check_fd(lambda a, b: T.contract("ij,jk->ik", a, b, semiring="real"),
              [rng.normal(size=(2, 3)), rng.normal(size=(3, 2))], rng)
    # relu, minimum and maximum away from their kinks
    x = rng.uniform(0.2, 1.0, size=(2, 3)) * rng.choice([-1, 1], size=(2, 3))
    _check_fd(T.relu, [x], rng)
    _check_fd(T.minimum, [x, x + rng.choice([-0.5, 0.5], size=x.shape)], rng)
    _check_fd(T.maximum, [x, x + rng.choice([-0.5, 0.5], size=x.shape)], rng)


def test_unused_values_get_zero_adjoint():
    a = T.Var(np.ones(3), requires_grad=True)
    b = T.Var(np.ones(3), requires_grad=True)
    with T.Tape() as tape:
        T.exp(b)
        loss = T.sum(T.square(a))
    tape.backward(loss)
    np.testing.assert_allclose(a.grad, 2.0)
    assert b.grad is None or not np.any(b.grad)
