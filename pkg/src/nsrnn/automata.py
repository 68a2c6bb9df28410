"""Restricted weighted pushdown automata and the grammar constructions around them.

A restricted WPDA reads one input symbol per transition and touches only the
top of its stack.  Each transition either pushes a symbol on top of the
current top ``x -> x y``, replaces the top ``x -> y``, or pops it
``x -> eps``.  The stack starts as the bottom symbol alone.

Weights live in three dense arrays indexed by integer ids::

    push[q, a, x, r, y]     replace[q, a, x, r, y]     pop[q, a, x, r]

:func:`enumerate_runs` walks every run explicitly and
:func:`configuration_weights` does the same with runs merged by their
current configuration; both serve as references for the dynamic program in
:mod:`nsrnn.lang`.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .grammar import Cfg, Rule, is_2gnf, is_gnf, prepare, recognizes

PUSH, REPLACE, POP = "push", "replace", "pop"


@dataclass(frozen=True, eq=False)
class RestrictedWpda:
    states: tuple[str, ...]
    input_alphabet: tuple[str, ...]
    stack_alphabet: tuple[str, ...]
    bottom: str
    start: str
    accept: frozenset
    push: np.ndarray
    replace: np.ndarray
    pop: np.ndarray

    def __post_init__(self):
        nq, ns, ng = len(self.states), len(self.input_alphabet), len(self.stack_alphabet)
        if self.bottom not in self.stack_alphabet:
            raise ValueError("the bottom symbol must be in the stack alphabet")
        if self.start not in self.states:
            raise ValueError("the start state must be a state")
        if not set(self.accept) <= set(self.states):
            raise ValueError("accept states must be states")
        want = {"push": (nq, ns, ng, nq, ng), "replace": (nq, ns, ng, nq, ng), "pop": (nq, ns, ng, nq)}
        for name, shape in want.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} weights have shape {arr.shape}, expected {shape}")
            if np.any(arr < 0) or np.any(np.isnan(arr)):
                raise ValueError(f"{name} weights must be nonnegative")

    @property
    def num_states(self) -> int:
        return len(self.states)

    @property
    def num_symbols(self) -> int:
        return len(self.stack_alphabet)

    @property
    def q0(self) -> int:
        return self.states.index(self.start)

    @property
    def bottom_id(self) -> int:
        return self.stack_alphabet.index(self.bottom)

    def input_ids(self, w: Sequence[str]) -> list[int]:
        try:
            return [self.input_alphabet.index(a) for a in w]
        except ValueError:
            bad = [a for a in w if a not in self.input_alphabet]
            raise ValueError(f"symbols {bad} are not in the input alphabet") from None

    def transition_tensor(self, a: str, log: bool = True) -> np.ndarray:
        """Weights for input ``a`` as a [Q, G, Q, 2G+1] tensor.

        The last axis holds G push targets, then G replace targets, then pop.
        """
        k = self.input_alphabet.index(a)
        t = np.concatenate(
            [self.push[:, k], self.replace[:, k], self.pop[:, k][..., None]], axis=-1
        )
        if log:
            with np.errstate(divide="ignore"):
                return np.log(t)
        return t

    def transition_tensors(self, w: Sequence[str], log: bool = True) -> list[np.ndarray]:
        return [self.transition_tensor(a, log=log) for a in w]

    def is_probabilistic(self, tol: float = 1e-9) -> bool:
        tot = self.push.sum(axis=(3, 4)) + self.replace.sum(axis=(3, 4)) + self.pop.sum(axis=3)
        return bool(np.all(np.abs(tot - 1.0) <= tol))

    @classmethod
    def from_transitions(cls, states, input_alphabet, stack_alphabet, bottom, start, accept,
                         transitions: Iterable[tuple]) -> "RestrictedWpda":
        """Build from tuples ``(kind, q, a, x, r, y, weight)``; ``y`` is ignored for pops.

        Repeated transitions add their weights.
        """
        states, input_alphabet, stack_alphabet = tuple(states), tuple(input_alphabet), tuple(stack_alphabet)
        nq, ns, ng = len(states), len(input_alphabet), len(stack_alphabet)
        push = np.zeros((nq, ns, ng, nq, ng))
        repl = np.zeros((nq, ns, ng, nq, ng))
        pop = np.zeros((nq, ns, ng, nq))
        qi, ai, gi = states.index, input_alphabet.index, stack_alphabet.index
        for kind, q, a, x, r, y, wt in transitions:
            if kind == PUSH:
                push[qi(q), ai(a), gi(x), qi(r), gi(y)] += wt
            elif kind == REPLACE:
                repl[qi(q), ai(a), gi(x), qi(r), gi(y)] += wt
            elif kind == POP:
                pop[qi(q), ai(a), gi(x), qi(r)] += wt
            else:
                raise ValueError(f"unknown transition kind {kind!r}")
        return cls(states, input_alphabet, stack_alphabet, bottom, start, frozenset(accept),
                   push, repl, pop)

    def transitions(self) -> list[tuple]:
        out = []
        for kind, arr in ((PUSH, self.push), (REPLACE, self.replace)):
            for q, a, x, r, y in zip(*np.nonzero(arr)):
                out.append((kind, self.states[q], self.input_alphabet[a], self.stack_alphabet[x],
                            self.states[r], self.stack_alphabet[y], float(arr[q, a, x, r, y])))
        for q, a, x, r in zip(*np.nonzero(self.pop)):
            out.append((POP, self.states[q], self.input_alphabet[a], self.stack_alphabet[x],
                        self.states[r], None, float(self.pop[q, a, x, r])))
        return out


@dataclass(frozen=True)
class Run:
    """A run: transitions with the configurations between them.

    ``configs[k]`` is ``(position, state, stack)`` with the stack as a tuple
    from bottom to top; ``configs[0]`` is ``(0, q0, (bottom,))``.
    """

    transitions: tuple[tuple, ...]
    configs: tuple[tuple, ...]
    weight: float

    @property
    def final(self) -> tuple:
        return self.configs[-1]

    @property
    def top(self) -> str:
        return self.configs[-1][2][-1]

    @property
    def state(self) -> str:
        return self.configs[-1][1]


def enumerate_runs(m: RestrictedWpda, w: Sequence[str], max_length: int = 10) -> list[Run]:
    """Every positive-weight run of ``m`` scanning ``w``.

    A pop that would leave the stack empty is not a legal move, so runs that
    attempt it are dropped.  The number of runs can grow exponentially, so
    inputs longer than ``max_length`` are refused.
    """
    if len(w) > max_length:
        raise ValueError(f"refusing to enumerate runs on a string of length {len(w)} > {max_length}")
    ids = m.input_ids(w)
    runs = [((), ((0, m.start, (m.bottom,)),), 1.0)]
    for pos, a in enumerate(ids, 1):
        nxt = []
        for trans, configs, wt in runs:
            _, state, stack = configs[-1]
            q = m.states.index(state)
            x = m.stack_alphabet.index(stack[-1])
            for r, y in zip(*np.nonzero(m.push[q, a, x])):
                v = m.push[q, a, x, r, y]
                tau = (PUSH, state, w[pos - 1], stack[-1], m.states[r], m.stack_alphabet[y])
                cfg = (pos, m.states[r], stack + (m.stack_alphabet[y],))
                nxt.append((trans + (tau,), configs + (cfg,), wt * v))
            for r, y in zip(*np.nonzero(m.replace[q, a, x])):
                v = m.replace[q, a, x, r, y]
                tau = (REPLACE, state, w[pos - 1], stack[-1], m.states[r], m.stack_alphabet[y])
                cfg = (pos, m.states[r], stack[:-1] + (m.stack_alphabet[y],))
                nxt.append((trans + (tau,), configs + (cfg,), wt * v))
            if len(stack) > 1:
                for r in np.nonzero(m.pop[q, a, x])[0]:
                    v = m.pop[q, a, x, r]
                    tau = (POP, state, w[pos - 1], stack[-1], m.states[r], None)
                    cfg = (pos, m.states[r], stack[:-1])
                    nxt.append((trans + (tau,), configs + (cfg,), wt * v))
        runs = nxt
    return [Run(t, c, float(v)) for t, c, v in runs if v > 0]


def configuration_weights(m: RestrictedWpda, w: Sequence[str]) -> dict:
    """Total run weight reaching each explicit configuration ``(state, stack)``.

    This is run enumeration with runs that agree on their current
    configuration merged, so it stays polynomial in practice for short
    inputs while still tracking whole stacks (no span decomposition).
    """
    ids = m.input_ids(w)
    conf = {(m.start, (m.bottom,)): 1.0}
    for a in ids:
        nxt: dict = {}
        for (state, stack), wt in conf.items():
            q = m.states.index(state)
            x = m.stack_alphabet.index(stack[-1])
            for r, y in zip(*np.nonzero(m.push[q, a, x])):
                key = (m.states[r], stack + (m.stack_alphabet[y],))
                nxt[key] = nxt.get(key, 0.0) + wt * m.push[q, a, x, r, y]
            for r, y in zip(*np.nonzero(m.replace[q, a, x])):
                key = (m.states[r], stack[:-1] + (m.stack_alphabet[y],))
                nxt[key] = nxt.get(key, 0.0) + wt * m.replace[q, a, x, r, y]
            if len(stack) > 1:
                for r in np.nonzero(m.pop[q, a, x])[0]:
                    key = (m.states[r], stack[:-1])
                    nxt[key] = nxt.get(key, 0.0) + wt * m.pop[q, a, x, r]
        conf = {k: v for k, v in nxt.items() if v > 0}
    return conf


def _filter_mask(m: RestrictedWpda, flt) -> np.ndarray:
    mask = np.ones((m.num_states, m.num_symbols), dtype=bool)
    if flt is not None:
        states, tops = flt
        sm = np.array([s in set(states) for s in m.states])
        tm = np.array([y in set(tops) for y in m.stack_alphabet])
        mask = sm[:, None] & tm[None, :]
    return mask


def stringsum(m: RestrictedWpda, w: Sequence[str], filter=None, method: str = "dp") -> float:
    """Total weight of runs scanning ``w``.

    ``filter`` is an optional ``(states, top_symbols)`` pair restricting the
    final configuration.  ``method="dp"`` runs the chart recurrences in log
    space; ``method="enumerate"`` sums :func:`enumerate_runs` explicitly.
    """
    if method == "enumerate":
        keep_states = None if filter is None else set(filter[0])
        keep_tops = None if filter is None else set(filter[1])
        total = 0.0
        for (state, stack), wt in configuration_weights(m, w).items():
            if keep_states is not None and (state not in keep_states or stack[-1] not in keep_tops):
                continue
            total += wt
        return total
    if method != "dp":
        raise ValueError(f"unknown method {method!r}")
    from .lang import forward_log_weights

    alpha = forward_log_weights(m.transition_tensors(w), m.num_states, m.num_symbols,
                                q0=m.q0, bottom=m.bottom_id)
    mask = _filter_mask(m, filter)
    vals = alpha[mask]
    if vals.size == 0 or np.all(np.isneginf(vals)):
        return 0.0
    top = np.max(vals)
    return float(np.exp(top) * np.sum(np.exp(vals - top)))


def recognize(m: RestrictedWpda, w: Sequence[str]) -> bool:
    """True iff some positive-weight run ends in an accept state with the bottom on top."""
    if any(a not in m.input_alphabet for a in w):
        return False
    return stringsum(m, w, filter=(m.accept, {m.bottom})) > 0


# grammar constructions

def gnf_to_2gnf(g: Cfg) -> Cfg:
    """Convert a GNF grammar so every rule emits one or two leading terminals.

    Each rule ``A -> a A1 A2..Am`` with ``m >= 1`` is replaced by the rules
    ``A -> a b B1..Bl A2..Am`` for every rule ``A1 -> b B1..Bl``.
    """
    if not is_gnf(g):
        raise ValueError("gnf_to_2gnf() requires a grammar in Greibach normal form")
    out: list[Rule] = []
    for r in g.rules:
        if len(r.rhs) <= 1:
            out.append(r)
            continue
        a, first, rest = r.rhs[0], r.rhs[1], r.rhs[2:]
        for s in g.rules_for(first):
            out.append(Rule(r.lhs, (a,) + s.rhs + rest, r.weight * s.weight))
    merged: dict[tuple, float] = {}
    for r in out:
        merged[(r.lhs, r.rhs)] = merged.get((r.lhs, r.rhs), 0.0) + r.weight
    rules = tuple(Rule(l, rhs, w) for (l, rhs), w in merged.items())
    return Cfg(g.variables, g.terminals, rules, g.start)


def _chunk_name(chunk: tuple[str, ...]) -> str:
    return "".join(f"[{s}]" for s in chunk) if len(chunk) > 1 else chunk[0]


def cfg_to_restricted_wpda(g: Cfg, bottom: str = "⊥") -> RestrictedWpda:
    """Build a restricted PDA (all weights 1) recognizing ``L(g)`` for a 2-GNF ``g``.

    The stack holds the constituents still to be derived, next one on top.
    A rule ``A -> a b B1..Bp`` reads ``a`` by moving to a state for that rule
    while replacing ``A`` with ``Bp``, then reads ``b`` by pushing
    ``B(p-1)..B1``.  A push of several symbols at once is encoded by a single
    stack symbol standing for that whole block; pops and replaces act on the
    block's top element.
    """
    if not is_2gnf(g):
        raise ValueError("cfg_to_restricted_wpda() requires a grammar in 2-GNF")
    if bottom in g.variables:
        raise ValueError("the bottom symbol clashes with a variable name")
    q0, qloop = "q0", "qloop"
    states = [q0, qloop]
    accept = {qloop}
    # transitions of the block-push machine; stack entries are blocks (tuples)
    # ordered bottom..top
    moves: list[tuple] = []  # (kind, q, a, top_original, r, payload)
    for n, rule in enumerate(g.rules):
        if not rule.rhs:
            accept.add(q0)
            continue
        a = rule.rhs[0]
        if len(rule.rhs) == 1:
            moves.append((POP, qloop, a, rule.lhs, qloop, None))
            continue
        b, tail = rule.rhs[1], rule.rhs[2:]
        qr = f"q[{n}]"
        states.append(qr)
        if not tail:
            moves.append((REPLACE, qloop, a, rule.lhs, qr, rule.lhs))
            moves.append((POP, qr, b, rule.lhs, qloop, None))
        else:
            moves.append((REPLACE, qloop, a, rule.lhs, qr, tail[-1]))
            above = tuple(reversed(tail[:-1]))  # bottom..top, B1 ends on top
            kind = PUSH if above else REPLACE
            moves.append((kind, qr, b, tail[-1], qloop, above if above else tail[-1]))
    # the start variable: its first move happens on the bottom in q0
    start_moves = []
    for kind, q, a, x, r, payload in moves:
        if q == qloop and x == g.start:
            if kind == POP:
                start_moves.append((REPLACE, q0, a, bottom, r, bottom))
            elif kind == REPLACE:
                start_moves.append((PUSH, q0, a, bottom, r, (payload,)))
            else:
                start_moves.append((PUSH, q0, a, bottom, r, payload))
    moves = [mv for mv in moves if not (mv[0] is not None and mv[1] == qloop and mv[3] == g.start)]
    moves += start_moves

    # close the set of reachable blocks
    blocks = {(bottom,)}
    frontier = [(bottom,)]
    for kind, q, a, x, r, payload in moves:
        if kind == PUSH:
            blk = payload if isinstance(payload, tuple) else (payload,)
            if blk not in blocks:
                blocks.add(blk)
                frontier.append(blk)
    while frontier:
        blk = frontier.pop()
        for kind, q, a, x, r, payload in moves:
            if blk[-1] != x or x == bottom:
                continue
            if kind == REPLACE:
                new = blk[:-1] + (payload,)
            elif kind == POP and len(blk) > 1:
                new = blk[:-1]
            else:
                continue
            if new not in blocks:
                blocks.add(new)
                frontier.append(new)
    ordered = [(bottom,)] + sorted(b for b in blocks if b != (bottom,))
    names = {blk: _chunk_name(blk) for blk in ordered}
    trans = []
    for kind, q, a, x, r, payload in moves:
        for blk in ordered:
            if blk[-1] != x:
                continue
            if kind == PUSH:
                pushed = payload if isinstance(payload, tuple) else (payload,)
                trans.append((PUSH, q, a, names[blk], r, names[pushed], 1.0))
            elif kind == REPLACE:
                trans.append((REPLACE, q, a, names[blk], r, names[blk[:-1] + (payload,)], 1.0))
            elif len(blk) > 1:
                trans.append((REPLACE, q, a, names[blk], r, names[blk[:-1]], 1.0))
            elif blk != (bottom,):
                trans.append((POP, q, a, names[blk], r, None, 1.0))
    return RestrictedWpda.from_transitions(
        states, g.terminals, [names[b] for b in ordered], bottom, q0, accept, trans
    )


# the hardest context-free language

def push_string(i: int) -> str:
    return "(" + "[" * i + "("


def pop_string(i: int, is_start: bool) -> str:
    return "$" if is_start else ")" + "]" * i + ")"


@dataclass(frozen=True)
class Homomorphism:
    """A map from source symbols to target strings, extended to strings by concatenation."""

    table: dict = field(default_factory=dict)

    def __call__(self, w: Sequence[str]) -> str:
        try:
            return "".join(self.table[a] for a in w)
        except KeyError as e:
            raise ValueError(f"symbol {e.args[0]!r} is outside the homomorphism's domain") from None


def rule_string(g: Cfg, rule: Rule) -> str:
    """Encode one GNF rule as the pop of its left side followed by pushes.

    The right side's variables are pushed last-to-first so the first one ends
    up on top and is the next to be popped.
    """
    idx = {v: k + 1 for k, v in enumerate(g.variables)}
    out = pop_string(idx[rule.lhs], rule.lhs == g.start)
    for v in reversed(rule.rhs[1:]):
        out += push_string(idx[v])
    return out


def hardest_cfl_hom(g: Cfg) -> Homomorphism:
    """Homomorphism ``h`` with ``w in L(g)`` iff ``h(w)`` is in the hardest CFL.

    ``h(b)`` lists the encodings of all rules emitting ``b``, each flanked by
    commas, and ends with ``;``.  Variables are numbered from 1 in declaration
    order.
    """
    if not is_gnf(g):
        raise ValueError("hardest_cfl_hom() requires a grammar in Greibach normal form")
    table = {}
    for b in g.terminals:
        parts = [rule_string(g, r) for r in g.rules if r.rhs and r.rhs[0] == b]
        table[b] = "," + "".join(p + "," for p in parts) + ";"
    return Homomorphism(table)


_L0_ORACLE = None


def l0_oracle():
    """CKY recognizer for the support of the hardest-CFL grammar."""
    global _L0_ORACLE
    if _L0_ORACLE is None:
        from .tasks import hardest_cfl_grammar

        _L0_ORACLE = prepare(hardest_cfl_grammar(), boolean=True)
    return _L0_ORACLE


def in_l0(s: str | Sequence[str]) -> bool:
    return recognizes(l0_oracle(), list(s))


def ww_reverse_machine() -> RestrictedWpda:
    """The two-state machine for even palindromes over {0, 1}, all weights 1.

    In ``q1`` it pushes the symbol it reads or, when the symbol matches the
    top, pops it and moves to ``q2``; in ``q2`` it can only pop matches.
    """
    trans = []
    for a in "01":
        for x in "01⊥":
            trans.append((PUSH, "q1", a, x, "q1", a, 1.0))
        trans.append((POP, "q1", a, a, "q2", None, 1.0))
        trans.append((POP, "q2", a, a, "q2", None, 1.0))
    return RestrictedWpda.from_transitions(
        ["q1", "q2"], ["0", "1"], ["0", "1", "⊥"], "⊥", "q1", {"q1", "q2"}, trans
    )


def random_machine(rng: np.random.Generator, num_states: int, num_symbols: int,
                   input_alphabet: Sequence[str] = ("a", "b"), low: float = -2.0,
                   high: float = 1.0, density: float = 1.0) -> RestrictedWpda:
    """A machine with log-weights uniform in ``[low, high]``; entries dropped with prob ``1-density``."""
    nq, ns, ng = num_states, len(input_alphabet), num_symbols

    def draw(shape):
        w = np.exp(rng.uniform(low, high, size=shape))
        if density < 1.0:
            w = w * (rng.random(shape) < density)
        return w

    return RestrictedWpda(
        tuple(f"q{k}" for k in range(nq)), tuple(input_alphabet),
        tuple(["⊥"] + [f"s{k}" for k in range(1, ng)]), "⊥", "q0",
        frozenset(f"q{k}" for k in range(nq)),
        draw((nq, ns, ng, nq, ng)), draw((nq, ns, ng, nq, ng)), draw((nq, ns, ng, nq)),
    )


def brute_force_posterior(m: RestrictedWpda, w: Sequence[str]) -> np.ndarray:
    """Distribution of (final state, top symbol) over runs, by enumeration."""
    out = np.zeros((m.num_states, m.num_symbols))
    for (state, stack), wt in configuration_weights(m, w).items():
        out[m.states.index(state), m.stack_alphabet.index(stack[-1])] += wt
    total = out.sum()
    if total <= 0:
        raise ValueError("no run survives")
    return out / total


def all_strings(alphabet: Sequence[str], max_length: int):
    for n in range(max_length + 1):
        yield from itertools.product(alphabet, repeat=n)


def log_or_neg_inf(x: float) -> float:
    return math.log(x) if x > 0 else -math.inf
