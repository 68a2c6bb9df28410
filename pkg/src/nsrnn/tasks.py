"""Language-modeling tasks: task grammars, non-context-free languages, exact-length sampling.

A task defines, for every length ``l``, a distribution over the strings of
that length.  Datasets pick ``l`` uniformly among the lengths in a range
that have at least one string, then draw a string of that length, so

    p_L(w) = p(w | |w|) / #{valid lengths in range}.

For grammar tasks ``p(w | l) = p_G(w) / p_G(l)``: the inside probability of
``w`` over the total probability of length ``l``.  For the non-context-free
tasks every string of a given length is equally likely.
"""

from __future__ import annotations

import itertools
import json
import math
import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .grammar import Cfg, Rule, binarize, f_mean, inside, preprocess
from .rng import make_rng

# Task grammars


def _digits(k: int) -> list[str]:
    return [str(d) for d in range(k)]


def _bracket_pairs(k: int) -> list[tuple[str, str]]:
    base = [("(", ")"), ("[", "]"), ("{", "}"), ("<", ">")]
    if k <= len(base):
        return base[:k]
    return base + [(f"({j}", f"){j}") for j in range(len(base), k)]


def marked_reversal_grammar(mu: float = 60.0, k: int = 2) -> Cfg:
    f = f_mean(mu)
    rules = [Rule("S", (a, "S", a), f / k) for a in _digits(k)]
    rules.append(Rule("S", ("#",), 1.0 - f))
    return Cfg.from_rules(rules)


def unmarked_reversal_grammar(mu: float = 60.0, k: int = 2) -> Cfg:
    f = f_mean(mu)
    rules = [Rule("S", (a, "S", a), f / k) for a in _digits(k)]
    rules.append(Rule("S", (), 1.0 - f))
    return Cfg.from_rules(rules, terminals=_digits(k))


def padded_reversal_grammar(mu_c: float = 60.0, mu_p: float = 30.0, k: int = 2) -> Cfg:
    fc, fp = f_mean(mu_c), f_mean(mu_p)
    rules = [Rule("S", (a, "S", a), fc / k) for a in _digits(k)]
    rules += [Rule("S", (f"T{a}",), (1.0 - fc) / k) for a in _digits(k)]
    for a in _digits(k):
        rules.append(Rule(f"T{a}", (a, f"T{a}"), fp))
        rules.append(Rule(f"T{a}", (), 1.0 - fp))
    return Cfg.from_rules(rules, terminals=_digits(k))


def dyck_grammar(mu_s: float = 1.0, mu_n: float = 40.0, k: int = 2) -> Cfg:
    fs, fn = f_mean(mu_s), f_mean(mu_n)
    rules = [Rule("S", ("S", "T"), fs), Rule("S", ("T",), 1.0 - fs)]
    for o, c in _bracket_pairs(k):
        rules.append(Rule("T", (o, "S", c), fn / k))
        rules.append(Rule("T", (o, c), (1.0 - fn) / k))
    return Cfg.from_rules(rules)


def hardest_cfl_grammar(mu_c: float = 0.5, mu_sf: float = 0.5, mu_lf: float = 2.0,
                        p_s: float = 0.25, mu_s: float = 1.5, mu_n: float = 3.0,
                        k: int = 2) -> Cfg:
    """Grammar for strings ``x1,y1,z1; ... xn,yn,zn;`` whose middle parts spell ``$`` then a Dyck word.

    ``k`` is the number of bracket types; with ``k = 2`` the brackets are
    ``()`` and ``[]``.
    """
    fc, fsf, flf = f_mean(mu_c), f_mean(mu_sf), f_mean(mu_lf - 1.0)
    fs, fn = f_mean(mu_s), f_mean(mu_n)
    pairs = _bracket_pairs(k)
    fillers = [s for pair in pairs for s in pair] + ["$"]
    rules = [
        Rule("S'", ("R", "$", "Q", "S", "L", ";"), 1.0),
        Rule("L", ("L'", ",", "U"), 1.0),
        Rule("L'", (",", "V", "L'"), fc),
        Rule("L'", (), 1.0 - fc),
        Rule("R", ("U", ",", "R'"), 1.0),
        Rule("R'", ("R'", "V", ","), fc),
        Rule("R'", (), 1.0 - fc),
        Rule("U", ("W", "U"), fsf),
        Rule("U", (), 1.0 - fsf),
        Rule("V", ("W", "V"), flf),
        Rule("V", ("W",), 1.0 - flf),
    ]
    rules += [Rule("W", (s,), 1.0 / len(fillers)) for s in fillers]
    rules += [
        Rule("Q", ("L", ";", "R"), p_s),
        Rule("Q", (), 1.0 - p_s),
        Rule("S", ("S", "Q", "T"), fs),
        Rule("S", ("T",), 1.0 - fs),
    ]
    for o, c in pairs:
        rules.append(Rule("T", (o, "Q", "S", "Q", c), fn / k))
    for o, c in pairs:
        rules.append(Rule("T", (o, "Q", c), (1.0 - fn) / k))
    return Cfg.from_rules(rules, start="S'")


# Exact-length sampling

def compositions(n: int, total: int):
    """All ordered tuples of ``n`` positive integers summing to ``total``."""
    if n == 0:
        if total == 0:
            yield ()
        return
    if total < n:
        return
    for cut in itertools.combinations(range(1, total), n - 1):
        bounds = (0,) + cut + (total,)
        yield tuple(bounds[j + 1] - bounds[j] for j in range(n))


@dataclass
class _CompiledRule:
    lhs: int
    rhs: tuple[str, ...]
    weight: float
    nts: tuple[int, ...]
    n_terminals: int


class SizedSampler:
    """Length table and exact-length sampler for a grammar.

    The grammar is first rewritten without epsilon or unary rules (strings of
    length 0 are dropped).  ``table[X, l]`` is the total probability of
    length-``l`` yields of ``X``; it grows on demand.
    """

    def __init__(self, g: Cfg):
        self.grammar = g
        self.prepared, self.p_empty = preprocess(g)
        self.variables = list(self.prepared.variables)
        self.index = {v: k for k, v in enumerate(self.variables)}
        self.rules: list[_CompiledRule] = []
        self.by_lhs: dict[int, list[int]] = {k: [] for k in range(len(self.variables))}
        for r in self.prepared.rules:
            nts = tuple(self.index[s] for s in r.rhs if s in self.index)
            cr = _CompiledRule(self.index[r.lhs], r.rhs, r.weight, nts, len(r.rhs) - len(nts))
            self.by_lhs[cr.lhs].append(len(self.rules))
            self.rules.append(cr)
        self.start = self.index[g.start]
        self.table = np.zeros((len(self.variables), 1))

    @cached_property
    def binary(self):
        return binarize(self.prepared, p_empty=self.p_empty)

    def _prefix_convolutions(self, rule: _CompiledRule, size: int) -> list[np.ndarray]:
        """``conv[j][s]``: weight of the first ``j`` nonterminals yielding total length ``s``."""
        convs = [np.zeros(size + 1)]
        convs[0][0] = 1.0
        for nt in rule.nts:
            row = self.table[nt, :size + 1]
            convs.append(np.convolve(convs[-1], row)[:size + 1])
        return convs

    def rule_weight(self, ridx: int, length: int) -> float:
        r = self.rules[ridx]
        rest = length - r.n_terminals
        if rest < len(r.nts):
            return 0.0
        if not r.nts:
            return r.weight if rest == 0 else 0.0
        return r.weight * self._prefix_convolutions(r, rest)[-1][rest]

    def ensure(self, n: int) -> np.ndarray:
        """Fill the table through length ``n``; returns it."""
        cur = self.table.shape[1] - 1
        if n <= cur:
            return self.table
        table = np.zeros((len(self.variables), n + 1))
        table[:, :cur + 1] = self.table
        self.table = table
        for length in range(cur + 1, n + 1):
            for x in range(len(self.variables)):
                self.table[x, length] = sum(self.rule_weight(ri, length) for ri in self.by_lhs[x])
        return self.table

    def length_probability(self, length: int) -> float:
        if length == 0:
            return self.p_empty
        return float(self.ensure(length)[self.start, length])

    def sample(self, length: int, rng: np.random.Generator, symbol: str | None = None) -> list[str]:
        """Draw a string of exactly ``length`` symbols, distributed as ``p_G(w) / p_G(length)``."""
        x = self.start if symbol is None else self.index[symbol]
        self.ensure(length)
        out: list[str] = []
        self._sample(x, length, rng, out)
        return out

    def _sample(self, x: int, length: int, rng, out: list[str]):
        total = self.table[x, length] if length >= 1 else 0.0
        if not total > 0:
            raise ValueError(f"no string of length {length} can be derived from {self.variables[x]}")
        cands = self.by_lhs[x]
        weights = np.array([self.rule_weight(ri, length) for ri in cands])
        r = self.rules[cands[rng.choice(len(cands), p=weights / weights.sum())]]
        rest = length - r.n_terminals
        parts = [0] * len(r.nts)
        if r.nts:
            convs = self._prefix_convolutions(r, rest)
            remaining = rest
            # draw the composition from the last part backwards
            for j in range(len(r.nts), 0, -1):
                sizes = np.arange(1, remaining + 1)
                p = convs[j - 1][remaining - sizes] * self.table[r.nts[j - 1], sizes]
                c = int(sizes[rng.choice(len(sizes), p=p / p.sum())])
                parts[j - 1] = c
                remaining -= c
        j = 0
        for s in r.rhs:
            if s in self.index:
                self._sample(self.index[s], parts[j], rng, out)
                j += 1
            else:
                out.append(s)

    def string_probability(self, w: Sequence[str]) -> float:
        """``p_G(w)`` by the inside algorithm."""
        return inside(self.binary, list(w))


# literal versions, kept as references for the fast paths above

def compute_weights(sampler: SizedSampler, x: int, length: int, table: np.ndarray) -> dict:
    """Weight of each (rule, composition) pair, by enumerating compositions."""
    t = {}
    for ri in sampler.by_lhs[x]:
        r = sampler.rules[ri]
        rest = length - len(r.rhs) + len(r.nts)
        for comp in compositions(len(r.nts), rest):
            w = r.weight
            for nt, c in zip(r.nts, comp):
                w *= table[nt, c]
            t[(ri, comp)] = w
    return t


def compute_table(g: Cfg, n: int) -> tuple[SizedSampler, np.ndarray]:
    """Length table by explicit composition enumeration."""
    s = SizedSampler(g)
    table = np.zeros((len(s.variables), n + 1))
    for length in range(1, n + 1):
        for x in range(len(s.variables)):
            table[x, length] = sum(compute_weights(s, x, length, table).values())
    return s, table


def sample_sized(sampler: SizedSampler, table: np.ndarray, x: int, length: int,
                 rng: np.random.Generator) -> list[str]:
    """Exact-length sampling by explicit composition enumeration."""
    if not table[x, length] > 0:
        raise ValueError(f"no string of length {length} can be derived from {sampler.variables[x]}")
    t = compute_weights(sampler, x, length, table)
    keys = list(t)
    p = np.array([t[k] for k in keys])
    ri, comp = keys[rng.choice(len(keys), p=p / p.sum())]
    out: list[str] = []
    j = 0
    for s in sampler.rules[ri].rhs:
        if s in sampler.index:
            out += sample_sized(sampler, table, sampler.index[s], comp[j], rng)
            j += 1
        else:
            out.append(s)
    return out


# Non-context-free languages


def _noncfl_parts(name: str, length: int):
    """Return ``m`` (length of ``w``) if strings of this length exist, else None."""
    if name == "anbncn":
        return length // 3 if length % 3 == 0 else None
    if name == "w#wR#w":
        return (length - 2) // 3 if length >= 2 and (length - 2) % 3 == 0 else None
    if name == "w#nw":
        return length // 3 if length % 3 == 0 else None
    if name == "w#w":
        return (length - 1) // 2 if length >= 1 and (length - 1) % 2 == 0 else None
    if name in ("ww'", "ww"):
        return length // 2 if length % 2 == 0 else None
    if name == "wwRw":
        return length // 3 if length % 3 == 0 else None
    raise ValueError(f"unknown non-context-free task {name!r}")


NONCFL_NAMES = ("anbncn", "w#wR#w", "w#nw", "w#w", "ww'", "wwRw", "ww")

NONCFL_ALPHABETS = {
    "anbncn": ["a", "b", "c"],
    "w#wR#w": ["0", "1", "#"],
    "w#nw": ["0", "1", "#"],
    "w#w": ["0", "1", "#"],
    "ww'": ["0", "1", "2", "3"],
    "wwRw": ["0", "1"],
    "ww": ["0", "1"],
}


def _assemble(name: str, w: list[str]) -> list[str]:
    m = len(w)
    if name == "anbncn":
        return ["a"] * m + ["b"] * m + ["c"] * m
    if name == "w#wR#w":
        return w + ["#"] + w[::-1] + ["#"] + w
    if name == "w#nw":
        return w + ["#"] * m + w
    if name == "w#w":
        return w + ["#"] + w
    if name == "ww'":
        return w + [str(int(a) + 2) for a in w]
    if name == "wwRw":
        return w + w[::-1] + w
    if name == "ww":
        return w + w
    raise ValueError(f"unknown non-context-free task {name!r}")


def noncfl_count(name: str, length: int) -> int:
    """Number of strings of the given length in the language."""
    m = _noncfl_parts(name, length)
    if m is None:
        return 0
    return 1 if name == "anbncn" else 2 ** m


def noncfl_member(name: str, s: Sequence[str]) -> bool:
    s = list(s)
    m = _noncfl_parts(name, len(s))
    if m is None:
        return False
    if name == "anbncn":
        return s == _assemble(name, [""] * m)
    w = s[:m]
    if any(a not in ("0", "1") for a in w):
        return False
    return s == _assemble(name, w)


def noncfl_sample(name: str, length: int, rng: np.random.Generator) -> list[str]:
    m = _noncfl_parts(name, length)
    if m is None:
        raise ValueError(f"{name} has no strings of length {length}")
    w = [str(b) for b in rng.integers(0, 2, size=m)] if name != "anbncn" else [""] * m
    return _assemble(name, w)


def noncfl_enumerate(name: str, length: int) -> list[list[str]]:
    """Brute force: every string over the alphabet that satisfies the pattern."""
    alphabet = NONCFL_ALPHABETS[name]
    return [list(s) for s in itertools.product(alphabet, repeat=length) if noncfl_member(name, s)]


# Tasks and task distributions

class Task:
    """A family of per-length string distributions over a fixed alphabet."""

    name: str
    alphabet: list[str]
    params: dict

    def has_length(self, length: int) -> bool:
        raise NotImplementedError

    def sample(self, length: int, rng: np.random.Generator) -> list[str]:
        raise NotImplementedError

    def log_prob_given_length(self, w: Sequence[str]) -> float:
        raise NotImplementedError

    def valid_lengths(self, lo: int, hi: int) -> list[int]:
        return [n for n in range(lo, hi + 1) if self.has_length(n)]


class GrammarTask(Task):
    def __init__(self, name: str, grammar: Cfg, params: dict):
        self.name = name
        self.grammar = grammar
        self.params = params
        self.alphabet = list(grammar.terminals)
        self.sampler = SizedSampler(grammar)

    def has_length(self, length: int) -> bool:
        return length >= 1 and self.sampler.length_probability(length) > 0

    def sample(self, length, rng):
        return self.sampler.sample(length, rng)

    def log_prob_given_length(self, w):
        p = self.sampler.string_probability(w)
        pl = self.sampler.length_probability(len(w))
        if not p > 0 or not pl > 0:
            raise ValueError(f"string {' '.join(w)!r} has zero probability under {self.name}")
        return math.log(p) - math.log(pl)


class NonCflTask(Task):
    def __init__(self, name: str):
        if name not in NONCFL_NAMES:
            raise ValueError(f"unknown non-context-free task {name!r}")
        self.name = name
        self.params = {}
        self.alphabet = list(NONCFL_ALPHABETS[name])

    def has_length(self, length):
        return length >= 1 and noncfl_count(self.name, length) > 0

    def sample(self, length, rng):
        return noncfl_sample(self.name, length, rng)

    def log_prob_given_length(self, w):
        if not noncfl_member(self.name, w):
            raise ValueError(f"string {' '.join(w)!r} is not in {self.name}")
        return -math.log(noncfl_count(self.name, len(w)))


_GRAMMARS = {
    "marked-reversal": (marked_reversal_grammar, {"mu": 60.0}),
    "unmarked-reversal": (unmarked_reversal_grammar, {"mu": 60.0}),
    "padded-reversal": (padded_reversal_grammar, {"mu_c": 60.0, "mu_p": 30.0}),
    "dyck": (dyck_grammar, {"mu_s": 1.0, "mu_n": 40.0}),
    "hardest-cfl": (hardest_cfl_grammar, {"mu_c": 0.5, "mu_sf": 0.5, "mu_lf": 2.0, "p_s": 0.25,
                                          "mu_s": 1.5, "mu_n": 3.0}),
}

TASK_NAMES = tuple(_GRAMMARS) + NONCFL_NAMES


def make_task(name: str, **params) -> Task:
    """Build a task by name.  Grammar tasks take their mean parameters and ``k``."""
    if name in _GRAMMARS:
        ctor, defaults = _GRAMMARS[name]
        full = dict(defaults)
        full["k"] = 2
        full.update(params)
        for key, val in full.items():
            if key != "k" and not val > 0:
                raise ValueError(f"parameter {key} must be positive")
        if full["k"] < 1:
            raise ValueError("k must be at least 1")
        return GrammarTask(name, ctor(**full), full)
    if name in NONCFL_NAMES:
        if params:
            raise ValueError(f"{name} takes no parameters")
        return NonCflTask(name)
    raise ValueError(f"unknown task {name!r}; known: {', '.join(TASK_NAMES)}")


@dataclass
class TaskDistribution:
    task: Task
    min_length: int
    max_length: int
    lengths: list[int] = field(init=False)

    def __post_init__(self):
        if self.min_length > self.max_length:
            raise ValueError("empty length range")
        self.lengths = self.task.valid_lengths(self.min_length, self.max_length)
        if not self.lengths:
            raise ValueError(f"{self.task.name} has no strings with length in "
                             f"[{self.min_length}, {self.max_length}]")

    def log_prob(self, w: Sequence[str]) -> float:
        if len(w) not in self.lengths:
            raise ValueError(f"length {len(w)} is outside the distribution's support")
        return self.task.log_prob_given_length(w) - math.log(len(self.lengths))

    def sample(self, count: int, rng: np.random.Generator) -> list[list[str]]:
        idx = rng.integers(0, len(self.lengths), size=count)
        return [self.task.sample(self.lengths[k], rng) for k in idx]

    def sample_per_length(self, per_length: int, rng: np.random.Generator) -> list[list[str]]:
        return [self.task.sample(n, rng) for n in self.lengths for _ in range(per_length)]


def sample_dataset(task: Task, min_length: int, max_length: int, count: int, seed: int,
                   stream: str = "data", per_length: int | None = None,
                   exclude=None, max_tries: int = 1000) -> list[list[str]]:
    """Sample strings deterministically from ``seed``.

    With ``per_length`` set, draws that many strings for every valid length
    instead of ``count`` strings with uniformly drawn lengths.  Strings found
    in ``exclude`` (a set of tuples) are redrawn at the same length.
    """
    dist = TaskDistribution(task, min_length, max_length)
    rng = make_rng(seed, stream)
    if per_length is not None:
        out = dist.sample_per_length(per_length, rng)
    else:
        out = dist.sample(count, rng)
    if exclude:
        for k, w in enumerate(out):
            tries = 0
            while tuple(w) in exclude:
                tries += 1
                if tries > max_tries:
                    raise ValueError(f"could not draw a length-{len(w)} string outside the "
                                     f"excluded set after {max_tries} tries")
                w = task.sample(len(w), rng)
            out[k] = w
    return out


def lower_bound_xent(dataset: Sequence[Sequence[str]], dist: TaskDistribution) -> float:
    """Per-symbol cross-entropy of the true distribution, counting one end symbol per string."""
    num = -sum(dist.log_prob(w) for w in dataset)
    den = sum(len(w) + 1 for w in dataset)
    return num / den


def write_dataset(path: str, strings: Sequence[Sequence[str]], metadata: dict) -> None:
    """Write one space-separated string per line plus a ``.meta.json`` sidecar."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for w in strings:
            f.write(" ".join(w) + "\n")
    meta = dict(metadata)
    meta["lengths"] = [len(w) for w in strings]
    with open(path + ".meta.json", "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
        f.write("\n")


def read_dataset(path: str) -> tuple[list[list[str]], dict]:
    with open(path, encoding="utf-8") as f:
        strings = [line.split() for line in f.read().splitlines()]
    meta_path = path + ".meta.json"
    meta = {}
    if os.path.exists(meta_path):
        with open(meta_path, encoding="utf-8") as f:
            meta = json.load(f)
    return strings, meta
