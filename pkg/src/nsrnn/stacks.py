"""Differentiable stacks driven by a recurrent controller.

Every stack follows the same three-step contract at each timestep::

    a_t = stack.actions(h_t)        # from the controller's hidden state
    s_t = stack.step(s_{t-1}, a_t)
    r_t = stack.reading(s_t)        # fed to the controller at t + 1

Readings are real-valued ``[B, reading_size]`` arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from . import lang
from . import tape as T
from .params import Linear, ParamStore
from .tape import Var


def _detach(x):
    return Var(x.value.copy()) if isinstance(x, Var) else x


class StackModule:
    reading_size: int

    def initial(self, batch: int) -> Any:
        raise NotImplementedError

    def actions(self, h: Var) -> Any:
        raise NotImplementedError

    def step(self, state, actions) -> Any:
        raise NotImplementedError

    def reading(self, state) -> Var:
        raise NotImplementedError

    def detach(self, state) -> Any:
        """A copy of ``state`` that blocks gradients (truncated backpropagation)."""
        raise NotImplementedError


# stratification stack

@dataclass
class StratState:
    values: Var | None  # [B, n, m]
    strengths: Var | None  # [B, n]
    batch: int
    dim: int


def strat_step(state: StratState, pop, push, v) -> tuple[StratState, Var]:
    """Update strengths for pop amount ``pop``, append ``(v, push)`` and read.

    ``pop`` and ``push`` are ``[B]`` (or scalars), ``v`` is ``[B, m]``.
    """
    b, m = state.batch, state.dim
    pop = T.reshape(T.as_var(pop), (-1, 1)) if np.ndim(T.as_var(pop).value) else T.as_var(pop)
    push = T.reshape(T.as_var(push), (-1, 1)) if np.ndim(T.as_var(push).value) else T.as_var(push)
    v = T.as_var(v)
    if v.ndim == 1:
        v = T.reshape(v, (1, -1))
    push = T.mul(push, np.ones((b, 1)))
    if state.strengths is None:
        strengths = push
        values = T.reshape(T.mul(v, np.ones((b, m))), (b, 1, m))
    else:
        s = state.strengths
        above = _strictly_above(s)
        removed = T.relu(T.sub(pop, above))
        s = T.relu(T.sub(s, removed))
        strengths = T.concat([s, push], axis=1)
        values = T.concat([state.values, T.reshape(T.mul(v, np.ones((b, m))), (b, 1, m))], axis=1)
    new = StratState(values, strengths, b, m)
    return new, strat_reading(new)


def _strictly_above(s: Var) -> Var:
    """``sum_{j > i} s[j]`` along the last axis."""
    total = T.sum(s, axis=1, keepdims=True)
    return T.sub(total, T.cumsum(s, axis=1))


def strat_reading(state: StratState) -> Var:
    if state.strengths is None:
        return Var(np.zeros((state.batch, state.dim)))
    s = state.strengths
    room = T.relu(T.sub(1.0, _strictly_above(s)))
    weight = T.minimum(s, room)
    return T.sum(T.mul(T.reshape(weight, weight.shape + (1,)), state.values), axis=1)


class StratificationStack(StackModule):
    """Stack of vectors with fractional strengths; pop and push amounts are sigmoids."""

    def __init__(self, store: ParamStore, hidden_size: int, dim: int, name: str = "strat"):
        self.dim = dim
        self.reading_size = dim
        self.pop_layer = Linear(store, f"{name}.pop", hidden_size, 1)
        self.push_layer = Linear(store, f"{name}.push", hidden_size, 1)
        self.value_layer = Linear(store, f"{name}.value", hidden_size, dim)

    def initial(self, batch):
        return StratState(None, None, batch, self.dim)

    def actions(self, h):
        u = T.reshape(T.sigmoid(self.pop_layer(h)), (-1,))
        d = T.reshape(T.sigmoid(self.push_layer(h)), (-1,))
        return u, d, T.tanh(self.value_layer(h))

    def step(self, state, actions):
        u, d, v = actions
        return strat_step(state, u, d, v)[0]

    def reading(self, state):
        return strat_reading(state)

    def detach(self, state):
        return StratState(_detach(state.values), _detach(state.strengths), state.batch, state.dim)


# superposition stack

@dataclass
class SupState:
    cells: Var | None  # [B, depth, m]; cell 0 is the top
    batch: int
    dim: int


def sup_step(state: SupState, probs, v) -> tuple[SupState, Var]:
    """Mix push / no-op / pop shifts of the stack; the pushed vector is ``v``.

    ``probs`` is ``[B, 3]`` (push, noop, pop) and ``v`` is ``[B, m]``.
    """
    b, m = state.batch, state.dim
    probs = T.as_var(probs)
    if probs.ndim == 1:
        probs = T.reshape(probs, (1, 3))
    v = T.as_var(v)
    if v.ndim == 1:
        v = T.reshape(v, (1, -1))
    v = T.mul(v, np.ones((b, m)))
    depth = 0 if state.cells is None else state.cells.shape[1]
    parts = [T.reshape(v, (b, 1, m))]
    if state.cells is not None:
        parts.append(state.cells)
    parts.append(Var(np.zeros((b, 2, m))))
    ext = T.concat(parts, axis=1)  # [v, cells..., 0, 0]
    p = T.mul(probs, np.ones((b, 3)))
    push = T.reshape(p[:, 0], (b, 1, 1))
    noop = T.reshape(p[:, 1], (b, 1, 1))
    pop = T.reshape(p[:, 2], (b, 1, 1))
    n = depth + 1
    cells = T.add(T.add(T.mul(push, ext[:, 0:n]), T.mul(noop, ext[:, 1:n + 1])),
                  T.mul(pop, ext[:, 2:n + 2]))
    new = SupState(cells, b, m)
    return new, sup_reading(new)


def sup_reading(state: SupState) -> Var:
    if state.cells is None:
        return Var(np.zeros((state.batch, state.dim)))
    return state.cells[:, 0]


class SuperpositionStack(StackModule):
    """Stack whose cells are expectations over push, no-op and pop."""

    def __init__(self, store: ParamStore, hidden_size: int, dim: int, name: str = "sup"):
        self.dim = dim
        self.reading_size = dim
        self.action_layer = Linear(store, f"{name}.action", hidden_size, 3)
        self.value_layer = Linear(store, f"{name}.value", hidden_size, dim)

    def initial(self, batch):
        return SupState(None, batch, self.dim)

    def actions(self, h):
        return T.softmax(self.action_layer(h), axis=-1), T.sigmoid(self.value_layer(h))

    def step(self, state, actions):
        return sup_step(state, *actions)[0]

    def reading(self, state):
        return sup_reading(state)

    def detach(self, state):
        return SupState(_detach(state.cells), state.batch, state.dim)


# nondeterministic stacks


def ns_actions(layer: Linear, h: Var, num_states: int, num_symbols: int) -> Var:
    """Log transition weights normalized over (r, action) for every (q, x)."""
    q, g = num_states, num_symbols
    logits = T.reshape(layer(h), (-1, q, g, q * (2 * g + 1)))
    return T.reshape(T.log_softmax(logits, axis=-1), (-1, q, g, q, 2 * g + 1))


def rns_actions(layer: Linear, h: Var, num_states: int, num_symbols: int) -> Var:
    """Unnormalized weights exp(affine(h)); returned in log scale, i.e. the affine output."""
    q, g = num_states, num_symbols
    return T.reshape(layer(h), (-1, q, g, q, 2 * g + 1))


def vrns_push_vector(layer: Linear, h: Var) -> Var:
    return T.sigmoid(layer(h))


class NondeterministicStack(StackModule):
    """A WPDA simulated by the chart in :mod:`nsrnn.lang`.

    ``mode`` selects the reading: ``"ns"`` (top symbols), ``"rns"`` (state
    and top symbol) or ``"vrns"`` (expected pushed vectors).  Transition
    weights are normalized per (q, x) when ``normalized`` is true (the
    default only for ``"ns"``).  ``num_symbols`` counts the bottom symbol.
    """

    def __init__(self, store: ParamStore, hidden_size: int, num_states: int, num_symbols: int,
                 mode: str = "rns", vector_dim: int | None = None, window: int | None = None,
                 normalized: bool | None = None, name: str | None = None, **chart_options):
        name = name or mode
        self.num_states, self.num_symbols = num_states, num_symbols
        self.mode = mode
        self.window = window
        self.normalized = (mode == "ns") if normalized is None else normalized
        self.vector_dim = vector_dim if mode == "vrns" else None
        self.chart_options = chart_options
        size = num_states * num_symbols * num_states * (2 * num_symbols + 1)
        self.action_layer = Linear(store, f"{name}.action", hidden_size, size)
        if mode == "vrns":
            if not vector_dim:
                raise ValueError("vector mode needs vector_dim")
            self.vector_layer = Linear(store, f"{name}.vector", hidden_size, vector_dim)
            self.v0 = store.add(f"{name}.v0", (vector_dim,), "uniform")
        cfg = lang.ChartConfig(num_states, num_symbols, mode=mode, window=window,
                               vector_dim=self.vector_dim, **chart_options)
        self.reading_size = cfg.reading_size

    def initial(self, batch):
        v0 = T.sigmoid(self.v0) if self.mode == "vrns" else None
        return lang.chart_init(self.num_states, self.num_symbols, mode=self.mode,
                               window=self.window, vector_dim=self.vector_dim, v0=v0,
                               batch=batch, **self.chart_options)

    def actions(self, h):
        f = ns_actions if self.normalized else rns_actions
        delta = f(self.action_layer, h, self.num_states, self.num_symbols)
        v = vrns_push_vector(self.vector_layer, h) if self.mode == "vrns" else None
        return delta, v

    def step(self, state, actions):
        delta, v = actions
        return lang.chart_step(state, delta, v)

    def reading(self, state):
        return lang.reading(state)

    def detach(self, state):
        if self.window is None:
            raise ValueError("truncated backpropagation through a nondeterministic stack "
                             "needs a window")
        return lang.chart_split_forward(state)[1]


def make_stack(store: ParamStore, hidden_size: int, spec: dict) -> StackModule | None:
    """Build a stack from a config dict such as ``{"type": "rns", "states": 2, "symbols": 3}``."""
    kind = spec.get("type", "none")
    name = spec.get("name")
    if kind in ("none", "lstm", None):
        return None
    if kind in ("strat", "stratification"):
        return StratificationStack(store, hidden_size, int(spec.get("dim", 10)), name or "strat")
    if kind in ("sup", "superposition"):
        return SuperpositionStack(store, hidden_size, int(spec.get("dim", 10)), name or "sup")
    if kind in ("ns", "rns", "vrns"):
        opts = {k: spec[k] for k in ("bottom_compat", "zeta_init_mode", "block_size") if k in spec}
        return NondeterministicStack(
            store, hidden_size, int(spec.get("states", 2)), int(spec.get("symbols", 3)),
            mode=kind, vector_dim=spec.get("dim"), window=spec.get("window"),
            normalized=spec.get("normalized"), name=name, **opts)
    raise ValueError(f"unknown stack type {kind!r}")
