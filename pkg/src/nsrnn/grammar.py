"""Context-free grammars, weighted and unweighted.

Symbols are plain strings.  A rule with an empty right side is an
epsilon rule.  Grammar files hold one rule per line::

    # marked reversal
    S -> 0 S 0 [0.4918]
    S -> #     [0.0164]
    T -> _eps_

The optional trailing ``[weight]`` token defaults to 1.  Lines whose first
non-blank character is ``#`` are comments; ``#`` elsewhere is an ordinary
symbol.  Variables are the symbols that occur on some left side; everything
else is a terminal.
"""

from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

EPSILON_TOKEN = "_eps_"
_WEIGHT = re.compile(r"^\[([-+0-9.eE]+)\]$")


@dataclass(frozen=True)
class Rule:
    lhs: str
    rhs: tuple[str, ...]
    weight: float = 1.0

    def __str__(self):
        body = " ".join(self.rhs) if self.rhs else EPSILON_TOKEN
        return f"{self.lhs} -> {body} [{self.weight!r}]"


@dataclass(frozen=True)
class Cfg:
    """A (possibly weighted) context-free grammar."""

    variables: tuple[str, ...]
    terminals: tuple[str, ...]
    rules: tuple[Rule, ...]
    start: str

    def __post_init__(self):
        vs, ts = set(self.variables), set(self.terminals)
        if vs & ts:
            raise ValueError(f"variables and terminals overlap: {sorted(vs & ts)}")
        if self.start not in vs:
            raise ValueError(f"start symbol {self.start!r} is not a variable")
        for r in self.rules:
            if r.lhs not in vs:
                raise ValueError(f"rule {r} has a left side that is not a variable")
            for s in r.rhs:
                if s not in vs and s not in ts:
                    raise ValueError(f"rule {r} uses undeclared symbol {s!r}")
            if not r.weight >= 0:
                raise ValueError(f"rule {r} has a negative weight")

    @classmethod
    def from_rules(cls, rules: Iterable[Rule], start: str | None = None,
                   terminals: Sequence[str] | None = None) -> "Cfg":
        rules = tuple(rules)
        variables = tuple(dict.fromkeys(r.lhs for r in rules))
        if start is None:
            start = variables[0]
        found = dict.fromkeys(s for r in rules for s in r.rhs if s not in variables)
        if terminals is None:
            terminals = tuple(found)
        else:
            terminals = tuple(dict.fromkeys(list(terminals) + list(found)))
        return cls(variables, terminals, rules, start)

    def rules_for(self, lhs: str) -> list[Rule]:
        return [r for r in self.rules if r.lhs == lhs]

    def is_variable(self, s: str) -> bool:
        return s in self.variables

    def with_weights(self, weights: Sequence[float]) -> "Cfg":
        rules = tuple(Rule(r.lhs, r.rhs, float(w)) for r, w in zip(self.rules, weights))
        return Cfg(self.variables, self.terminals, rules, self.start)

    def normalized(self) -> "Cfg":
        """Rescale weights so that each variable's rules sum to one."""
        totals: dict[str, float] = {}
        for r in self.rules:
            totals[r.lhs] = totals.get(r.lhs, 0.0) + r.weight
        return self.with_weights([r.weight / totals[r.lhs] for r in self.rules])

    def is_proper(self, tol: float = 1e-12) -> bool:
        totals: dict[str, float] = {v: 0.0 for v in self.variables}
        for r in self.rules:
            totals[r.lhs] += r.weight
        return all(abs(t - 1.0) <= tol for v, t in totals.items() if self.rules_for(v))

    def to_text(self) -> str:
        return "".join(str(r) + "\n" for r in self.rules)


def parse_grammar(text: str, start: str | None = None) -> Cfg:
    """Parse the line-oriented grammar format described in the module docstring."""
    rules = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        # "#" is also a terminal, so only whole lines starting with it are comments
        if not line or line.startswith("#"):
            continue
        if "->" not in line:
            raise ValueError(f"line {lineno}: expected 'LHS -> RHS', got {raw!r}")
        lhs, rhs = line.split("->", 1)
        lhs = lhs.strip()
        if not lhs or " " in lhs:
            raise ValueError(f"line {lineno}: bad left side {lhs!r}")
        toks = rhs.split()
        weight = 1.0
        if toks:
            m = _WEIGHT.match(toks[-1])
            if m:
                weight = float(m.group(1))
                toks = toks[:-1]
        toks = [t for t in toks if t != EPSILON_TOKEN]
        rules.append(Rule(lhs, tuple(toks), weight))
    if not rules:
        raise ValueError("grammar has no rules")
    return Cfg.from_rules(rules, start=start)


def load_grammar(path, start: str | None = None) -> Cfg:
    with open(path, encoding="utf-8") as f:
        return parse_grammar(f.read(), start=start)


# Normal forms and preprocessing

def is_gnf(g: Cfg) -> bool:
    """Every rule is S -> eps or A -> a B1..Bp, and S is on no right side."""
    for r in g.rules:
        if not r.rhs:
            if r.lhs != g.start:
                return False
            continue
        if g.is_variable(r.rhs[0]):
            return False
        if any(not g.is_variable(s) for s in r.rhs[1:]):
            return False
        if g.start in r.rhs:
            return False
    return True


def is_2gnf(g: Cfg) -> bool:
    """Every rule is S -> eps, A -> a, or A -> a b B1..Bp."""
    if not is_gnf_like(g):
        return False
    for r in g.rules:
        if len(r.rhs) >= 2 and g.is_variable(r.rhs[1]):
            return False
        if any(not g.is_variable(s) for s in r.rhs[2:]):
            return False
    return True


def is_gnf_like(g: Cfg) -> bool:
    for r in g.rules:
        if not r.rhs:
            if r.lhs != g.start:
                return False
        elif g.is_variable(r.rhs[0]) or g.start in r.rhs:
            return False
    return True


def nullable_weights(g: Cfg, boolean: bool = False, tol: float = 1e-15,
                     max_iter: int = 100000) -> dict[str, float]:
    """Total weight with which each variable derives the empty string."""
    null = {v: 0.0 for v in g.variables}
    cand = [r for r in g.rules if all(g.is_variable(s) for s in r.rhs)]
    for _ in range(max_iter):
        new = {v: 0.0 for v in g.variables}
        for r in cand:
            w = 1.0 if boolean else r.weight
            for s in r.rhs:
                w *= null[s]
            new[r.lhs] += w
        if boolean:
            new = {v: min(1.0, x) for v, x in new.items()}
        delta = max(abs(new[v] - null[v]) for v in g.variables)
        null = new
        if delta <= tol:
            break
    return null


def remove_epsilon(g: Cfg, boolean: bool = False) -> tuple[Cfg, float]:
    """Drop epsilon rules, returning the new grammar and the weight of eps.

    Each rule ``A -> X1..Xm`` is expanded into every variant that omits a
    subset of its nullable variables, scaled by their nullable weights.
    """
    null = nullable_weights(g, boolean=boolean)
    merged: dict[tuple[str, tuple[str, ...]], float] = {}
    for r in g.rules:
        opt = [k for k, s in enumerate(r.rhs) if g.is_variable(s) and null[s] > 0]
        for n_drop in range(len(opt) + 1):
            for drop in itertools.combinations(opt, n_drop):
                rhs = tuple(s for k, s in enumerate(r.rhs) if k not in drop)
                if not rhs:
                    continue
                w = 1.0 if boolean else r.weight
                for k in drop:
                    w *= null[r.rhs[k]]
                key = (r.lhs, rhs)
                merged[key] = min(1.0, merged.get(key, 0.0) + w) if boolean else merged.get(key, 0.0) + w
    rules = [Rule(l, rhs, w) for (l, rhs), w in merged.items() if w > 0]
    return Cfg(g.variables, g.terminals, tuple(rules), g.start), null[g.start]


def remove_unary(g: Cfg, boolean: bool = False) -> Cfg:
    """Eliminate variable-to-variable rules using the closure (I - U)^-1."""
    idx = {v: k for k, v in enumerate(g.variables)}
    n = len(idx)
    u = np.zeros((n, n))
    for r in g.rules:
        if len(r.rhs) == 1 and g.is_variable(r.rhs[0]):
            u[idx[r.lhs], idx[r.rhs[0]]] += 1.0 if boolean else r.weight
    if not u.any():
        return g
    if boolean:
        closure = np.eye(n, dtype=bool) | (u > 0)
        for k in range(n):
            closure = closure | (closure[:, [k]] & closure[[k], :])
        closure = closure.astype(np.float64)
    else:
        closure = np.linalg.inv(np.eye(n) - u)
    merged: dict[tuple[str, tuple[str, ...]], float] = {}
    for r in g.rules:
        if len(r.rhs) == 1 and g.is_variable(r.rhs[0]):
            continue
        b = idx[r.lhs]
        for a in range(n):
            c = closure[a, b]
            if c <= 0:
                continue
            key = (g.variables[a], r.rhs)
            w = c * (1.0 if boolean else r.weight)
            merged[key] = min(1.0, merged.get(key, 0.0) + w) if boolean else merged.get(key, 0.0) + w
    rules = [Rule(l, rhs, w) for (l, rhs), w in merged.items() if w > 0]
    return Cfg(g.variables, g.terminals, tuple(rules), g.start)


def preprocess(g: Cfg, boolean: bool = False) -> tuple[Cfg, float]:
    """Weight-preserving removal of epsilon and unary rules.

    Returns the new grammar, which generates every nonempty string with the
    same weight, together with the weight of the empty string.
    """
    g2, p_empty = remove_epsilon(g, boolean=boolean)
    g3 = remove_unary(g2, boolean=boolean)
    if not g3.rules:
        raise ValueError("grammar generates only the empty string")
    return g3, p_empty


@dataclass
class BinaryGrammar:
    """A rank-2 grammar in array form, ready for the inside algorithm."""

    variables: list[str]
    terminals: list[str]
    start: int
    # lexical[A, a]: weight of A -> a
    lexical: np.ndarray
    # binary rules as parallel arrays A -> B C with weight w
    parent: np.ndarray
    left: np.ndarray
    right: np.ndarray
    weight: np.ndarray
    p_empty: float = 0.0
    term_index: dict[str, int] = field(default_factory=dict)


def binarize(g: Cfg, p_empty: float = 0.0) -> BinaryGrammar:
    """Binarize a grammar with no epsilon or unary variable rules.

    Terminals inside longer rules become fresh preterminals, and long right
    sides are split into chains of fresh variables with unit weight.
    """
    variables = list(g.variables)
    vindex = {v: k for k, v in enumerate(variables)}
    tindex = {t: k for k, t in enumerate(g.terminals)}

    def fresh(name):
        while name in vindex:
            name = name + "'"
        vindex[name] = len(variables)
        variables.append(name)
        return vindex[name]

    lexical: dict[tuple[int, int], float] = {}
    binary: dict[tuple[int, int, int], float] = {}
    preterm: dict[str, int] = {}

    def sym(s):
        if s in vindex and s in g.variables:
            return vindex[s]
        if s not in preterm:
            preterm[s] = fresh(f"<{s}>")
            lexical[(preterm[s], tindex[s])] = 1.0
        return preterm[s]

    chain = 0
    for r in g.rules:
        if not r.rhs:
            raise ValueError("binarize() needs a grammar without epsilon rules")
        if len(r.rhs) == 1:
            if g.is_variable(r.rhs[0]):
                raise ValueError("binarize() needs a grammar without unary rules")
            key = (vindex[r.lhs], tindex[r.rhs[0]])
            lexical[key] = lexical.get(key, 0.0) + r.weight
            continue
        ids = [sym(s) for s in r.rhs]
        head, w = vindex[r.lhs], r.weight
        while len(ids) > 2:
            chain += 1
            nxt = fresh(f"<{r.lhs}.{chain}>")
            key = (head, ids[0], nxt)
            binary[key] = binary.get(key, 0.0) + w
            head, w, ids = nxt, 1.0, ids[1:]
        key = (head, ids[0], ids[1])
        binary[key] = binary.get(key, 0.0) + w

    lex = np.zeros((len(variables), len(g.terminals)))
    for (a, t), w in lexical.items():
        lex[a, t] = w
    keys = list(binary)
    arr = np.array(keys, dtype=np.int64).reshape(-1, 3)
    return BinaryGrammar(
        variables=variables, terminals=list(g.terminals), start=vindex[g.start],
        lexical=lex, parent=arr[:, 0], left=arr[:, 1], right=arr[:, 2],
        weight=np.array([binary[k] for k in keys], dtype=np.float64),
        p_empty=p_empty, term_index=tindex,
    )


def prepare(g: Cfg, boolean: bool = False) -> BinaryGrammar:
    """Preprocess then binarize, the usual route to :func:`inside`."""
    g2, p_empty = preprocess(g, boolean=boolean)
    return binarize(g2, p_empty=p_empty)


def inside_chart(bg: BinaryGrammar, w: Sequence[str], boolean: bool = False) -> list[np.ndarray]:
    """Inside weights by span length: ``chart[L][i, A]`` for span ``w[i:i+L]``."""
    n = len(w)
    try:
        ids = [bg.term_index[a] for a in w]
    except KeyError as e:
        raise ValueError(f"symbol {e.args[0]!r} is not a terminal of the grammar") from None
    nv = len(bg.variables)
    chart: list[np.ndarray] = [np.zeros((n + 1, nv))]
    lex = (bg.lexical > 0).astype(np.float64) if boolean else bg.lexical
    wts = np.ones_like(bg.weight) if boolean else bg.weight
    chart.append(lex[:, ids].T.copy() if n else np.zeros((0, nv)))
    for length in range(2, n + 1):
        cnt = n - length + 1
        acc = np.zeros((cnt, len(wts)))
        for m in range(1, length):
            acc += chart[m][:cnt, bg.left] * chart[length - m][m:m + cnt, bg.right]
        span = np.zeros((cnt, nv))
        np.add.at(span.T, bg.parent, (acc * wts).T)
        if boolean:
            span = np.minimum(span, 1.0)
        chart.append(span)
    return chart


def inside(bg: BinaryGrammar, w: Sequence[str]) -> float:
    """Total weight of all derivations of ``w`` from the start symbol."""
    if len(w) == 0:
        return bg.p_empty
    return float(inside_chart(bg, w)[len(w)][0, bg.start])


def recognizes(bg: BinaryGrammar, w: Sequence[str]) -> bool:
    """CKY membership; ``bg`` may come from either weighted or boolean preprocessing."""
    if len(w) == 0:
        return bg.p_empty > 0
    if any(a not in bg.term_index for a in w):
        return False
    return bool(inside_chart(bg, w, boolean=True)[len(w)][0, bg.start] > 0)


def language(g: Cfg, max_length: int, min_length: int = 0) -> set[tuple[str, ...]]:
    """All strings of ``g`` within the length range, by exhaustive CKY."""
    bg = prepare(g, boolean=True)
    out = set()
    for n in range(min_length, max_length + 1):
        for w in itertools.product(g.terminals, repeat=n):
            if recognizes(bg, w):
                out.add(w)
    return out


def f_mean(mu: float) -> float:
    """Continue probability of a geometric count with mean ``mu``: 1 - 1/(mu+1)."""
    return 1.0 - 1.0 / (mu + 1.0)


def log_prob(bg: BinaryGrammar, w: Sequence[str]) -> float:
    p = inside(bg, w)
    return math.log(p) if p > 0 else -math.inf
