"""Property suites run by ``nsrnn oracle-check``.

Each suite returns a list of :class:`CheckResult`.  The suites compare the
fast code paths against slow references: run enumeration, finite
differences, the literal recurrences and CKY.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import automata, grammar, lang, neural, stacks, tasks
from . import tape as T
from .rng import make_rng
from .semiring import contraction_adjoints, semiring_contract


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def _timed(name: str, fn: Callable[[], tuple[bool, str]]) -> CheckResult:
    start = time.perf_counter()
    try:
        ok, detail = fn()
    except Exception as exc:  # a crashing check is a failing check
        ok, detail = False, f"{type(exc).__name__}: {exc}"
    return CheckResult(name, bool(ok), detail, time.perf_counter() - start)


# helpers

def rns_reading_of(m: automata.RestrictedWpda, w) -> np.ndarray:
    deltas = [d[None] for d in m.transition_tensors(w, log=True)]
    with T.no_grad():
        c = lang.chart_init(m.num_states, m.num_symbols, mode="rns", q0=m.q0,
                            bottom=m.bottom_id)
        for d in deltas:
            c = lang.chart_step(c, d)
        return lang.reading(c).value[0]


def finite_difference(f: Callable[[], float], x: np.ndarray, eps: float = 1e-5,
                      probes: int | None = None, rng=None) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of scalar ``f`` w.r.t. entries of ``x`` (modified in place)."""
    flat = x.reshape(-1)
    idx = np.arange(flat.size)
    if probes is not None and probes < flat.size:
        idx = (rng or np.random.default_rng(0)).choice(flat.size, probes, replace=False)
    out = np.zeros(len(idx))
    for n, k in enumerate(idx):
        old = flat[k]
        flat[k] = old + eps
        hi = f()
        flat[k] = old - eps
        lo = f()
        flat[k] = old
        out[n] = (hi - lo) / (2 * eps)
    return idx, out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """Normwise relative error ``|a - b| / max(|a|, |b|)`` (2-norms over all entries)."""
    a, b = np.asarray(a, dtype=float).ravel(), np.asarray(b, dtype=float).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


# suites

def oracle_suite(machines: int = 200, seed: int = 0, tol: float = 1e-9) -> list[CheckResult]:
    def run():
        rng = make_rng(seed, "test")
        worst = 0.0
        for _ in range(machines):
            nq = int(rng.integers(1, 3))
            ng = int(rng.integers(1, 4))
            n = int(rng.integers(0, 7))
            m = automata.random_machine(rng, nq, ng)
            w = [str(s) for s in rng.choice(["a", "b"], size=n)]
            fast = rns_reading_of(m, w).reshape(nq, ng)
            slow = automata.brute_force_posterior(m, w)
            worst = max(worst, float(np.max(np.abs(fast - slow))))
        return worst <= tol, f"max |chart - enumeration| = {worst:.3g} over {machines} machines"
    return [_timed("rns-reading-vs-enumeration", run)]


def _reading_objective(mode, nq, ng, deltas, vectors, proj, **opts):
    with T.no_grad():
        c = lang.run_chart([d for d in deltas], nq, ng, mode=mode,
                           vectors=vectors[1:] if vectors is not None else None,
                           v0=vectors[0] if vectors is not None else None, **opts)
        return float(np.sum(lang.reading(c).value * proj))


def gradient_suite(seed: int = 0, tol: float = 1e-4, tol_end: float = 1e-3) -> list[CheckResult]:
    rng = make_rng(seed, "test")
    results = []

    def contraction():
        worst = 0.0
        for spec, shapes in [("bikqxuy,bkuyr->biqxry", [(2, 3, 3, 2, 2, 2, 2), (2, 3, 2, 2, 2)]),
                             ("biqxsz,bszry->biqxry", [(2, 3, 2, 2, 2, 2), (2, 2, 2, 2, 2)]),
                             ("ab,bc,cd->ad", [(2, 3), (3, 4), (4, 2)])]:
            ops = [rng.normal(size=s) for s in shapes]
            y = semiring_contract(spec, ops)
            proj = rng.normal(size=y.shape)
            grads = contraction_adjoints(spec, ops, y, proj)
            for k, op in enumerate(ops):
                idx, num = finite_difference(
                    lambda: float(np.sum(semiring_contract(spec, ops) * proj)), op)
                worst = max(worst, relative_error(grads[k].reshape(-1)[idx], num))
        return worst < tol, f"max relative error {worst:.2e}"
    results.append(_timed("grad-log-contraction", contraction))

    def chart(mode):
        def run():
            nq, ng, n, m = 2, 2, 4, 2
            deltas = [rng.normal(size=(1, nq, ng, nq, 2 * ng + 1)) for _ in range(n)]
            vectors = [rng.uniform(0.1, 0.9, size=(1, m)) for _ in range(n + 1)] \
                if mode == "vrns" else None
            opts = {"vector_dim": m} if mode == "vrns" else {}
            with T.Tape() as tape:
                ds = [T.Var(d, requires_grad=True) for d in deltas]
                vs = [T.Var(v, requires_grad=True) for v in vectors] if vectors else None
                c = lang.run_chart(ds, nq, ng, mode=mode, vectors=vs[1:] if vs else None,
                                   v0=vs[0] if vs else None, **opts)
                r = lang.reading(c)
                proj = rng.normal(size=r.shape)
                tape.backward(r, seed=proj)
            worst = 0.0
            targets = list(zip(deltas, ds)) + (list(zip(vectors, vs)) if vs else [])
            for arr, var in targets:
                idx, num = finite_difference(
                    lambda: _reading_objective(mode, nq, ng, deltas, vectors, proj, **opts), arr)
                worst = max(worst, relative_error(var.grad.reshape(-1)[idx], num))
            return worst < tol, f"max relative error {worst:.2e}"
        return run
    for mode in ("ns", "rns", "vrns"):
        results.append(_timed(f"grad-chart-{mode}", chart(mode)))

    def stack_fd(kind):
        def run():
            b, m, n = 2, 3, 4
            if kind == "strat":
                u = rng.uniform(0.2, 0.8, size=(n, b))
                d = rng.uniform(0.2, 0.8, size=(n, b))
                v = rng.normal(size=(n, b, m))
                arrays = [u, d, v]

                def build(vars_):
                    st = stacks.StratState(None, None, b, m)
                    for t in range(n):
                        st, r = stacks.strat_step(st, vars_[0][t], vars_[1][t], vars_[2][t])
                    return r
            else:
                logits = rng.normal(size=(n, b, 3))
                p = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
                v = rng.normal(size=(n, b, m))
                arrays = [p, v]

                def build(vars_):
                    st = stacks.SupState(None, b, m)
                    for t in range(n):
                        st, r = stacks.sup_step(st, vars_[0][t], vars_[1][t])
                    return r
            proj = rng.normal(size=(b, m))
            with T.Tape() as tape:
                vs = [T.Var(a, requires_grad=True) for a in arrays]
                r = build(vs)
                tape.backward(r, seed=proj)

            def f():
                with T.no_grad():
                    return float(np.sum(build([T.Var(a) for a in arrays]).value * proj))
            worst = 0.0
            for arr, var in zip(arrays, vs):
                idx, num = finite_difference(f, arr)
                worst = max(worst, relative_error(var.grad.reshape(-1)[idx], num))
            return worst < tol, f"max relative error {worst:.2e}"
        return run
    results.append(_timed("grad-stratification", stack_fd("strat")))
    results.append(_timed("grad-superposition", stack_fd("sup")))

    def end_to_end(stack):
        def run():
            model = neural.StackRnn(2, 4, stack)
            model.initialize(rng, 0.5)
            tokens = np.array([[0, 1, 1, 0]])
            with T.Tape() as tape:
                loss = neural.lm_loss(model.logits(tokens), neural._targets(tokens, model.eos))
                tape.backward(loss)

            def f():
                return float(model.sequence_losses(tokens).sum())
            worst = 0.0
            for name, p in model.store:
                idx, num = finite_difference(f, p.value, probes=6, rng=rng)
                worst = max(worst, relative_error(p.grad.reshape(-1)[idx], num, 1e-9))
            model.store.zero_grad()
            return worst < tol_end, f"max relative error {worst:.2e}"
        return run
    for label, stack in [("lstm", None), ("strat", {"type": "strat", "dim": 2}),
                         ("sup", {"type": "sup", "dim": 2}),
                         ("ns", {"type": "ns", "states": 2, "symbols": 2}),
                         ("rns", {"type": "rns", "states": 2, "symbols": 2}),
                         ("vrns", {"type": "vrns", "states": 2, "symbols": 2, "dim": 2})]:
        results.append(_timed(f"grad-end-to-end-{label}", end_to_end(stack)))
    return results


def superposition_as_vrns(probs: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    """VRNS reading with one state and symbol, weights (push, replace, pop) = ``probs``."""
    n, m = vectors.shape
    with T.no_grad():
        c = lang.chart_init(1, 1, mode="vrns", vector_dim=m, v0=np.zeros(m))
        for t in range(n):
            delta = np.log(np.asarray(probs[t], dtype=float)).reshape(1, 1, 1, 1, 3)
            c = lang.chart_step(c, delta, vectors[t][None])
        return lang.reading(c).value[0]


def equivalence_suite(seed: int = 0) -> list[CheckResult]:
    rng = make_rng(seed, "test")
    results = []

    def sup_vrns():
        worst = 0.0
        for _ in range(20):
            n, m = 8, 3
            logits = rng.normal(size=(n, 3))
            probs = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
            vectors = rng.uniform(0, 1, size=(n, m))
            st = stacks.SupState(None, 1, m)
            for t in range(n):
                st, r = stacks.sup_step(st, probs[t], vectors[t])
            worst = max(worst, float(np.max(np.abs(r.value[0] - superposition_as_vrns(probs, vectors)))))
        return worst <= 1e-9, f"max |superposition - vrns| = {worst:.3g}"
    results.append(_timed("superposition-equals-vrns", sup_vrns))

    def windowed():
        worst = 0.0
        for _ in range(10):
            # a length-n input drives n - 1 transitions, so the longest span is n
            n = int(rng.integers(2, 10))
            deltas = [rng.normal(size=(2, 2, 3, 2, 7)) for _ in range(n - 1)]
            for d in (n, n + 1, n + 3):
                with T.no_grad():
                    a = lang.reading(lang.run_chart(deltas, 2, 3)).value
                    b = lang.reading(lang.run_chart(deltas, 2, 3, window=d)).value
                worst = max(worst, float(np.max(np.abs(a - b))))
        return worst <= 1e-12, f"max |windowed - full| = {worst:.3g}"
    results.append(_timed("window-at-least-length", windowed))

    def split():
        worst = 0.0
        for _ in range(10):
            n, d = 9, int(rng.integers(2, 6))
            deltas = [rng.normal(size=(2, 2, 3, 2, 7)) for _ in range(n)]
            with T.no_grad():
                full = lang.run_chart(deltas, 2, 3, window=d)
                cuts = sorted(set(rng.integers(0, n, size=3).tolist()))
                c = lang.chart_init(2, 3, window=d, batch=2)
                for t in range(n):
                    if t in cuts:
                        c = lang.chart_split_forward(c)[1]
                    c = lang.chart_step(c, deltas[t])
                    ref = lang.run_chart(deltas[:t + 1], 2, 3, window=d)
                    worst = max(worst, float(np.max(np.abs(lang.reading(c).value
                                                           - lang.reading(ref).value))))
                worst = max(worst, float(np.max(np.abs(lang.reading(c).value
                                                       - lang.reading(full).value))))
        return worst <= 1e-12, f"max |split - monolithic| = {worst:.3g}"
    results.append(_timed("incremental-split", split))

    def gamma_prime():
        mismatches = 0
        for _ in range(10):
            n = int(rng.integers(1, 8))
            deltas = [rng.integers(0, 3, size=(1, 2, 2, 2, 5)).astype(float) for _ in range(n)]
            with T.no_grad():
                a = lang.run_chart(deltas, 2, 2, semiring="real", pop_method="gamma_prime")
                b = lang.run_chart(deltas, 2, 2, semiring="real", pop_method="direct")
            for t in a.gamma:
                if not np.array_equal(a.gamma[t].value, b.gamma[t].value):
                    mismatches += 1
        return mismatches == 0, f"{mismatches} columns differ"
    results.append(_timed("gamma-prime-equals-direct", gamma_prime))
    return results


def worked_example_suite() -> list[CheckResult]:
    def run():
        m = automata.ww_reverse_machine()
        deltas = [d[None] for d in m.transition_tensors(list("0110"), log=True)]
        with T.no_grad():
            c = lang.run_chart(deltas, m.num_states, m.num_symbols, q0=m.q0, bottom=m.bottom_id)
        want = {3: {("q1", "1"), ("q2", "0")}, 4: {("q1", "0"), ("q2", "⊥")}}
        for t, expected in want.items():
            a = c.forward_weights(t)[0]
            got = {(m.states[q], m.stack_alphabet[y]) for q, y in zip(*np.nonzero(np.isfinite(a)))}
            if got != expected:
                return False, f"t={t}: nonzero alpha at {sorted(got)}"
            vals = [a[m.states.index(q), m.stack_alphabet.index(y)] for q, y in expected]
            if not np.allclose(vals, 0.0, atol=1e-12):
                return False, f"t={t}: weights {np.exp(vals)}"
        return True, "alpha support and weights match at t=3 and t=4"
    return [_timed("ww-reverse-worked-example", run)]


def sampler_suite(seed: int = 0, samples: int = 10000) -> list[CheckResult]:
    rng = make_rng(seed, "test")
    results = []

    def split():
        task = tasks.make_task("marked-reversal")
        draws = [tuple(task.sample(3, rng)) for _ in range(samples)]
        first = sum(1 for w in draws if w[0] == task.alphabet[0]) / samples
        sigma = math.sqrt(0.25 / samples)
        return abs(first - 0.5) <= 4 * sigma, f"fraction {first:.4f} (4 sigma = {4 * sigma:.4f})"
    results.append(_timed("marked-reversal-length-3-split", split))

    def inside_sums():
        worst = 0.0
        for name in ("marked-reversal", "unmarked-reversal", "padded-reversal", "dyck"):
            task = tasks.make_task(name)
            g = task.grammar
            bg = grammar.prepare(g)
            for n in range(1, 8):
                total = sum(grammar.inside(bg, list(w)) for w in
                            automata.all_strings(g.terminals, n) if len(w) == n)
                worst = max(worst, abs(total - task.sampler.length_probability(n)))
        return worst <= 1e-9, f"max |sum inside - T| = {worst:.3g}"
    results.append(_timed("inside-sums-match-length-table", inside_sums))

    def counts():
        bad = []
        for name in tasks.NONCFL_NAMES:
            for n in range(0, 11):
                enum = tasks.noncfl_enumerate(name, n)
                if len(enum) != tasks.noncfl_count(name, n):
                    bad.append((name, n))
        return not bad, "all counts match" if not bad else f"mismatches {bad}"
    results.append(_timed("noncfl-counts-match-enumeration", counts))
    return results


def hardest_cfl_suite() -> list[CheckResult]:
    def run():
        g = grammar.parse_grammar("S -> a B\nB -> a B B\nB -> b\n")
        hom = automata.hardest_cfl_hom(g)
        bg = grammar.prepare(g, boolean=True)
        bad = []
        for w in automata.all_strings(g.terminals, 4):
            if grammar.recognizes(bg, list(w)) != automata.in_l0(hom(w)):
                bad.append("".join(w))
        return not bad, "membership preserved for |w| <= 4" if not bad else f"mismatch on {bad}"
    return [_timed("hardest-cfl-reduction", run)]


SUITES = {
    "oracle": oracle_suite,
    "gradients": gradient_suite,
    "equivalences": equivalence_suite,
    "worked-example": worked_example_suite,
    "sampler": sampler_suite,
    "hardest-cfl": hardest_cfl_suite,
}


def run_suites(names=None, quick: bool = False) -> list[CheckResult]:
    out = []
    for name in names or SUITES:
        fn = SUITES[name]
        if quick and name == "oracle":
            out.extend(fn(machines=40))
        elif quick and name == "sampler":
            out.extend(fn(samples=2000))
        else:
            out.extend(fn())
    return out
