import io
import itertools
import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nsrnn import automata, lang
from nsrnn import tape as T
from nsrnn.checks import finite_difference, relative_error

NEG = -math.inf


def chart(deltas, nq, ng, **kw):
    with T.no_grad():
        return lang.run_chart(deltas, nq, ng, **kw)


def random_deltas(rng, n, nq=2, ng=3, batch=1):
    return [rng.uniform(-2, 1, size=(batch, nq, ng, nq, 2 * ng + 1)) for _ in range(n)]


# initialization

def test_init_reading_is_point_mass():
    c = lang.chart_init(2, 3, q0=1, bottom=2)
    r = lang.reading(c).value[0].reshape(2, 3)
    want = np.zeros((2, 3))
    want[1, 2] = 1.0
    assert np.array_equal(r, want)
    assert lang.reading(lang.chart_init(2, 3, mode="ns", bottom=2)).value[0].tolist() == [0, 0, 1]


def test_init_alpha_sums_to_one():
    c = lang.chart_init(2, 3)
    assert np.exp(c.forward_weights(-1)).sum() == 1.0


def test_windowed_init_matches():
    a, b = lang.chart_init(2, 2), lang.chart_init(2, 2, window=1)
    assert np.array_equal(a.gamma[0].value, b.gamma[0].value)
    assert np.array_equal(a.alpha[0].value, b.alpha[0].value)


def test_config_errors():
    with pytest.raises(ValueError):
        lang.chart_init(0, 2)
    with pytest.raises(ValueError):
        lang.chart_init(2, 2, mode="xyz")
    with pytest.raises(ValueError):
        lang.chart_init(2, 2, mode="vrns")
    c = lang.chart_init(2, 2)
    with pytest.raises(ValueError):
        lang.chart_step(c, np.zeros((1, 2, 2, 2, 4)))


# the palindrome machine

WW = automata.ww_reverse_machine()
WW_OPTS = dict(q0=WW.q0, bottom=WW.bottom_id)


def ww_deltas(w):
    return WW, [d[None] for d in WW.transition_tensors(list(w))]


def test_alpha_after_011():
    m, ds = ww_deltas("011")
    a = np.exp(chart(ds, 2, 3, **WW_OPTS).forward_weights()[0])
    want = np.zeros((2, 3))
    want[m.states.index("q1"), m.stack_alphabet.index("1")] = 1.0
    want[m.states.index("q2"), m.stack_alphabet.index("0")] = 1.0
    np.testing.assert_allclose(a, want, atol=1e-12)


def test_worked_example_states():
    m, ds = ww_deltas("0110")
    c = chart(ds, 2, 3, **WW_OPTS)
    support = {}
    for t in (3, 4):
        a = c.forward_weights(t)[0]
        support[t] = {(m.states[q], m.stack_alphabet[y]): float(np.exp(a[q, y]))
                      for q, y in zip(*np.nonzero(np.isfinite(a)))}
    assert support[3] == pytest.approx({("q1", "1"): 1.0, ("q2", "0"): 1.0})
    assert support[4] == pytest.approx({("q1", "0"): 1.0, ("q2", "⊥"): 1.0})


def test_rns_reading_after_011():
    m, ds = ww_deltas("011")
    r = lang.reading(chart(ds, 2, 3, **WW_OPTS)).value[0].reshape(2, 3)
    assert r[0, 1] == pytest.approx(0.5, abs=1e-12)
    assert r[1, 0] == pytest.approx(0.5, abs=1e-12)
    assert r.sum() == pytest.approx(1.0, abs=1e-12)


def test_posterior_gradient_after_011():
    m, ds = ww_deltas("011")
    with T.Tape() as tape:
        vs = [T.Var(d, requires_grad=True) for d in ds]
        c = lang.run_chart(vs, 2, 3, **WW_OPTS)
        tape.backward(T.sum(lang.log_total(c)))
    q1, q2 = m.states.index("q1"), m.states.index("q2")
    one = m.stack_alphabet.index("1")
    pop = 2 * 3
    assert vs[2].grad[0, q1, one, q2, pop] == pytest.approx(0.5, abs=1e-12)
    # the push of the third symbol is the other run's last move
    assert vs[2].grad[0, q1, one, q1, one] == pytest.approx(0.5, abs=1e-12)


def test_dead_chart():
    c = chart([np.full((1, 2, 2, 2, 5), NEG)], 2, 2)
    assert np.all(np.isneginf(c.forward_weights()))
    with pytest.raises(lang.DeadChartError):
        lang.reading(c)


# counting runs of a one-state machine

def balanced_prefixes(t):
    n = 0
    for seq in itertools.product((1, 0, -1), repeat=t):
        height = 1
        for s in seq:
            height += s
            if height < 1:
                break
        else:
            n += 1
    return n


@pytest.mark.parametrize("t", range(7))
def test_counts_action_sequences(t):
    ds = [np.zeros((1, 1, 1, 1, 3)) for _ in range(t)]
    total = np.exp(chart(ds, 1, 1).forward_weights()[0]).sum()
    assert total == pytest.approx(balanced_prefixes(t), rel=1e-12)


# oracle equivalence

@settings(max_examples=25)
@given(st.integers(0, 2**31), st.integers(1, 2), st.integers(2, 3), st.integers(0, 6))
def test_rns_reading_matches_enumeration(seed, nq, ng, n):
    rng = np.random.default_rng(seed)
    m = automata.random_machine(rng, nq, ng)
    w = list(rng.choice(["a", "b"], size=n))
    ds = [d[None] for d in m.transition_tensors(w)]
    r = lang.reading(chart(ds, nq, ng)).value[0].reshape(nq, ng)
    np.testing.assert_allclose(r, automata.brute_force_posterior(m, w), atol=1e-9, rtol=0)


@given(st.integers(0, 2**31), st.sampled_from(["ns", "rns"]), st.integers(0, 6))
def test_readings_are_distributions(seed, mode, n):
    rng = np.random.default_rng(seed)
    r = lang.reading(chart(random_deltas(rng, n, batch=2), 2, 3, mode=mode)).value
    assert np.all(r >= 0)
    np.testing.assert_allclose(r.sum(axis=1), 1.0, atol=1e-9)


def test_vrns_reading_finite():
    rng = np.random.default_rng(0)
    ds = random_deltas(rng, 5)
    vs = [rng.uniform(0, 1, size=(1, 2)) for _ in range(5)]
    c = chart(ds, 2, 3, mode="vrns", vector_dim=2, vectors=vs, v0=np.full((1, 2), 0.5))
    r = lang.reading(c).value
    assert r.shape == (1, 12) and np.all(np.isfinite(r))


def test_vrns_constant_vectors_read_back_rns():
    # when every pushed vector is the same, eta is alpha times that vector
    rng = np.random.default_rng(1)
    ds = random_deltas(rng, 4)
    v = np.array([[0.3, 0.8]])
    vr = lang.reading(chart(ds, 2, 3, mode="vrns", vector_dim=2, vectors=[v] * 4,
                            v0=v)).value.reshape(2, 3, 2)
    rns = lang.reading(chart(ds, 2, 3)).value.reshape(2, 3)
    np.testing.assert_allclose(vr, rns[..., None] * v[0], atol=1e-12)


def test_log_and_real_semirings_agree():
    rng = np.random.default_rng(2)
    ds = random_deltas(rng, 5)
    a = lang.reading(chart(ds, 2, 3)).value
    b = lang.reading(chart([np.exp(d) for d in ds], 2, 3, semiring="real")).value
    np.testing.assert_allclose(a, b, atol=1e-12)


# gradients

def test_single_run_gradient_is_indicator():
    # one state, symbols (bottom, a): push a, replace a by a, pop
    ng = 2
    used = [(0, 0, 0, 1), (0, 1, 0, ng + 1), (0, 1, 0, 2 * ng)]
    ds = []
    for q, x, r, k in used:
        d = np.full((1, 1, ng, 1, 2 * ng + 1), NEG)
        d[0, q, x, r, k] = 0.7
        ds.append(d)
    with T.Tape() as tape:
        vs = [T.Var(d, requires_grad=True) for d in ds]
        tape.backward(T.sum(lang.log_total(lang.run_chart(vs, 1, ng))))
    for v, (q, x, r, k) in zip(vs, used):
        want = np.zeros_like(v.value)
        want[0, q, x, r, k] = 1.0
        np.testing.assert_allclose(v.grad, want, atol=1e-12)


def objective(mode, ds, vs, proj, **kw):
    opts = dict(kw)
    if mode == "vrns":
        opts.update(vector_dim=vs[0].shape[-1], v0=vs[0], vectors=vs[1:])
    return float(np.sum(lang.reading(chart(ds, 2, 2, mode=mode, **opts)).value * proj))


@settings(max_examples=8)
@given(st.integers(0, 2**31), st.sampled_from(["ns", "rns", "vrns"]), st.integers(1, 5))
def test_reading_grad_matches_fd(seed, mode, n):
    rng = np.random.default_rng(seed)
    ds = random_deltas(rng, n, 2, 2)
    if mode == "ns":
        # normalized actions: log-softmax over (r, action) for every (q, x)
        ds = [d - np.log(np.exp(d).sum(axis=(3, 4), keepdims=True)) for d in ds]
    vs = [rng.uniform(0.1, 0.9, size=(1, 2)) for _ in range(n + 1)]
    with T.Tape() as tape:
        dvars = [T.Var(d, requires_grad=True) for d in ds]
        vvars = [T.Var(v, requires_grad=True) for v in vs]
        kw = {}
        if mode == "vrns":
            kw = dict(vector_dim=2, v0=vvars[0], vectors=vvars[1:])
        c = lang.run_chart(dvars, 2, 2, mode=mode, **kw)
        proj = rng.normal(size=lang.reading(c).shape)
        grads = lang.reading_grad(c, proj, tape)
    targets = list(zip(ds, grads["deltas"]))
    if mode == "vrns":
        targets += list(zip(vs, grads["vectors"]))
    for arr, g in targets:
        _, num = finite_difference(lambda: objective(mode, ds, vs, proj), arr)
        assert relative_error(g.ravel(), num) < 1e-4


# windows and splitting

@settings(max_examples=15)
@given(st.integers(0, 2**31), st.integers(1, 8), st.integers(0, 3))
def test_window_covering_everything(seed, n, extra):
    rng = np.random.default_rng(seed)
    ds = random_deltas(rng, n)
    d = n + 1 + extra
    a, b = chart(ds, 2, 3), chart(ds, 2, 3, window=d)
    for t in range(n + 1):
        np.testing.assert_allclose(a.forward_weights(t), b.forward_weights(t), atol=1e-12, rtol=0)
    np.testing.assert_allclose(lang.reading(a).value, lang.reading(b).value, atol=1e-12, rtol=0)


def test_window_drops_long_spans():
    rng = np.random.default_rng(3)
    c = chart(random_deltas(rng, 8), 2, 3, window=3)
    for t in c.gamma:
        for i in range(-1, t):
            g = c.inner_weights(i, t)
            if t - i > 3:
                assert np.all(np.isneginf(g))


def split_run(ds, d, cuts):
    with T.no_grad():
        c = lang.chart_init(2, 3, window=d, batch=ds[0].shape[0])
        for t, delta in enumerate(ds):
            if t in cuts:
                c = lang.chart_split_forward(c)[1]
            c = lang.chart_step(c, delta)
        return lang.reading(c).value


def test_split_examples():
    rng = np.random.default_rng(4)
    ds = random_deltas(rng, 8, batch=2)
    ref = split_run(ds, 3, ())
    for cuts in ({4}, {2, 6}, set(range(8))):
        np.testing.assert_allclose(split_run(ds, 3, cuts), ref, atol=1e-12, rtol=0)
    n = 6
    np.testing.assert_allclose(split_run(ds[:n], n + 1, set(range(n))),
                               lang.reading(chart(ds[:n], 2, 3)).value, atol=1e-12, rtol=0)


@settings(max_examples=15)
@given(st.integers(0, 2**31), st.integers(2, 5), st.sets(st.integers(0, 9)))
def test_split_anywhere(seed, d, cuts):
    rng = np.random.default_rng(seed)
    ds = random_deltas(rng, 10)
    np.testing.assert_allclose(split_run(ds, d, cuts), split_run(ds, d, ()), atol=1e-12, rtol=0)


def test_split_at_zero_is_init():
    c = lang.chart_init(2, 3, window=3)
    _, res = lang.chart_split_forward(c, 0)
    assert np.array_equal(res.gamma[0].value, c.gamma[0].value)
    assert np.array_equal(res.alpha[0].value, c.alpha[0].value)
    with pytest.raises(ValueError):
        lang.chart_split_forward(lang.chart_init(2, 3))


def test_split_cuts_gradient():
    rng = np.random.default_rng(5)
    ds = random_deltas(rng, 4)
    with T.Tape() as tape:
        vs = [T.Var(d, requires_grad=True) for d in ds]
        c = lang.chart_init(2, 3, window=3)
        for k, v in enumerate(vs):
            if k == 2:
                c = lang.chart_split_forward(c)[1]
            c = lang.chart_step(c, v)
        tape.backward(T.sum(lang.log_total(c)))
    assert vs[0].grad is None or not np.any(vs[0].grad)
    assert np.any(vs[3].grad)


def test_appending_keeps_old_columns():
    rng = np.random.default_rng(6)
    ds = random_deltas(rng, 5)
    with T.no_grad():
        c = lang.run_chart(ds[:3], 2, 3)
        before = {t: c.gamma[t].value.copy() for t in c.gamma}
        c = lang.chart_step(c, ds[3])
    for t, v in before.items():
        assert np.array_equal(c.gamma[t].value, v)


# alternative formulations

@settings(max_examples=15)
@given(st.integers(0, 2**31), st.integers(1, 7))
def test_gamma_prime_equals_direct(seed, n):
    rng = np.random.default_rng(seed)
    ds = [rng.integers(0, 3, size=(1, 2, 2, 2, 5)).astype(float) for _ in range(n)]
    a = chart(ds, 2, 2, semiring="real", pop_method="gamma_prime")
    b = chart(ds, 2, 2, semiring="real", pop_method="direct")
    for t in a.gamma:
        assert np.array_equal(a.gamma[t].value, b.gamma[t].value)


def test_bottom_compat_loses_return_to_bottom():
    m, ds = ww_deltas("0110")
    fixed = chart(ds, 2, 3, **WW_OPTS)
    old = chart(ds, 2, 3, bottom_compat=True, **WW_OPTS)
    for t in (1, 2, 3):
        assert np.array_equal(fixed.forward_weights(t), old.forward_weights(t))
    q2 = m.states.index("q2")
    assert fixed.forward_weights(4)[0, q2, m.bottom_id] == 0.0
    assert np.isneginf(old.forward_weights(4)[0, q2, m.bottom_id])


def test_zeta_init_modes():
    rng = np.random.default_rng(7)
    ds = random_deltas(rng, 3)
    vs = [rng.uniform(0, 1, size=(1, 2)) for _ in range(3)]
    v0 = np.array([[0.2, 0.4]])
    a = chart(ds, 2, 3, mode="vrns", vector_dim=2, vectors=vs, v0=v0)
    b = chart(ds, 2, 3, mode="vrns", vector_dim=2, vectors=vs, v0=v0, zeta_init_mode="broadcast")
    assert np.all(np.isfinite(lang.reading(a).value))
    assert np.all(np.isfinite(lang.reading(b).value))


# size and time

def test_windowed_entry_count_is_linear():
    rng = np.random.default_rng(8)
    counts = {}
    for n in (10, 20, 40):
        counts[n] = chart(random_deltas(rng, n), 2, 3, window=4).entry_count()
    per = 2 * 3 * 2 * 3
    for n, k in counts.items():
        assert k <= 4 * (n + 1) * per
    full = chart(random_deltas(rng, 20), 2, 3).entry_count()
    assert full > counts[20]


def test_time_at_most_cubic():
    rng = np.random.default_rng(9)
    times = {}
    for n in (16, 32, 64):
        ds = random_deltas(rng, n)
        start = time.perf_counter()
        chart(ds, 2, 3)
        times[n] = time.perf_counter() - start
    # cubic growth would be a factor of 64; allow slack for timer noise
    assert times[64] / times[16] < 2 * 64


def test_dump_gamma():
    m, ds = ww_deltas("01")
    buf = io.StringIO()
    rows = lang.dump_gamma(chart(ds, 2, 3, **WW_OPTS), buf)
    lines = buf.getvalue().strip().splitlines()
    assert lines[0] == "i,t,q,x,r,y,log_weight"
    assert len(lines) == rows + 1
    assert "-1,0,0,2,0,2,0.0" in lines  # the simulated initial push
