"""Differentiable simulation of a restricted WPDA.

The chart holds inner weights ``gamma[i -> t][q, x -> r, y]``: the total
weight of partial runs that start at time ``i`` in state ``q`` with ``x`` on
top, push ``y`` at time ``i`` (or at ``i+1``; see below) and end at time ``t``
in state ``r`` with that same ``y`` on top, never exposing ``x`` in between.
Forward weights ``alpha[t][r, y]`` sum every run prefix ending in ``(r, y)``.

Time ``t`` counts input symbols read.  ``chart_init`` creates the simulated
push of the bottom symbol, ``gamma[-1 -> 0]``, so that at ``t = 0`` all mass
sits on ``(q0, bottom)``.  Each :func:`chart_step` consumes one transition
tensor ``delta_t`` of shape ``[B, Q, G, Q, 2G+1]`` (``G`` push targets, ``G``
replace targets, one pop) and appends column ``t``:

    gamma[t-1 -> t]  = push_t
    gamma[i -> t]    = gamma[i -> t-1] . replace_t
                       + sum_{k=i+1}^{t-2} gamma[i -> k] . gamma'[k -> t]
    gamma'[k -> t]   = gamma[k -> t-1] . pop_t
    alpha[t]         = sum_{i=-1}^{t-1} alpha[i] . gamma[i -> t]

Vector mode adds ``zeta``, which mirrors ``gamma`` but carries the pushed
vector of the top element.  All arithmetic is in the log semiring unless
``semiring="real"`` is requested.  A leading batch axis ``B`` runs several
strings of the same length in lock step.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tape as T
from .semiring import DEFAULT_BLOCK_SIZE, logsumexp as np_logsumexp
from .tape import Var

MODES = ("ns", "rns", "vrns")


class DeadChartError(RuntimeError):
    """Raised when a reading is requested but every run has weight zero."""


@dataclass(frozen=True)
class ChartConfig:
    num_states: int
    num_symbols: int
    mode: str = "rns"
    window: int | None = None
    vector_dim: int | None = None
    q0: int = 0
    bottom: int = 0
    semiring: str = "log"
    # reproduce the older treatment of the bottom symbol, where spans from
    # the initial push stop contributing once the first symbol is read
    bottom_compat: bool = False
    # "indicator": zeta[-1 -> 0] = init indicator times v0
    # "broadcast": zeta[-1 -> 0] = v0 for every (q, x, r, y)
    zeta_init_mode: str = "indicator"
    # "gamma_prime" contracts through the precomputed gamma'; "direct" sums
    # the three-way product in one contraction
    pop_method: str = "gamma_prime"
    block_size: int = DEFAULT_BLOCK_SIZE
    contract_method: str = "auto"

    def __post_init__(self):
        if self.num_states < 1 or self.num_symbols < 1:
            raise ValueError("chart dimensions must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "vrns" and not self.vector_dim:
            raise ValueError("vector mode needs a positive vector_dim")
        if self.window is not None and self.window < 1:
            raise ValueError("window must be at least 1")
        if self.semiring not in ("log", "real"):
            raise ValueError("semiring must be 'log' or 'real'")
        if self.zeta_init_mode not in ("indicator", "broadcast"):
            raise ValueError("zeta_init_mode must be 'indicator' or 'broadcast'")
        if self.pop_method not in ("gamma_prime", "direct"):
            raise ValueError("pop_method must be 'gamma_prime' or 'direct'")
        if not (0 <= self.q0 < self.num_states and 0 <= self.bottom < self.num_symbols):
            raise ValueError("q0 or bottom out of range")

    @property
    def log(self) -> bool:
        return self.semiring == "log"

    @property
    def zero(self) -> float:
        return -math.inf if self.log else 0.0

    @property
    def one(self) -> float:
        return 0.0 if self.log else 1.0

    @property
    def reading_size(self) -> int:
        q, g = self.num_states, self.num_symbols
        return {"ns": g, "rns": q * g, "vrns": q * g * (self.vector_dim or 0)}[self.mode]


@dataclass
class ChartState:
    """Chart columns up to the cursor ``t``.

    ``gamma[t]`` has shape ``[B, rows, Q, G, Q, G]`` with row ``j`` holding
    span start ``i = lo[t] + j``.  ``alpha[i]`` has shape ``[B, Q, G]``.
    ``zeta[t]`` mirrors ``gamma[t]`` with a trailing vector axis.
    """

    config: ChartConfig
    batch: int
    t: int
    gamma: dict = field(default_factory=dict)
    lo: dict = field(default_factory=dict)
    alpha: dict = field(default_factory=dict)
    zeta: dict = field(default_factory=dict)
    deltas: list = field(default_factory=list)
    vectors: list = field(default_factory=list)

    def entry_count(self) -> int:
        """Number of stored inner-weight entries (gamma only)."""
        return int(sum(v.value.size for v in self.gamma.values()))

    def forward_weights(self, t: int | None = None) -> np.ndarray:
        """``alpha[t]`` (default: the cursor) as a plain array."""
        return self.alpha[self.t if t is None else t].value

    def inner_weights(self, i: int, t: int) -> np.ndarray:
        """``gamma[i -> t]`` as ``[B, Q, G, Q, G]``; semiring zero outside the window."""
        col = self.gamma.get(t)
        if col is None:
            raise KeyError(f"column {t} is not stored")
        j = i - self.lo[t]
        if j < 0 or j >= col.value.shape[1]:
            cfg = self.config
            return np.full((self.batch, cfg.num_states, cfg.num_symbols,
                            cfg.num_states, cfg.num_symbols), cfg.zero)
        return col.value[:, j]


def _const(shape, value) -> Var:
    return Var(np.full(shape, value, dtype=np.float64))


def _plus(cfg: ChartConfig, a: Var, b: Var) -> Var:
    return T.log_add(a, b) if cfg.log else T.add(a, b)


def _times(cfg: ChartConfig, a, b) -> Var:
    return T.add(a, b) if cfg.log else T.mul(a, b)


def _contract(cfg: ChartConfig, spec: str, *ops) -> Var:
    return T.contract(spec, *ops, semiring=cfg.semiring, block_size=cfg.block_size,
                      method=cfg.contract_method)


def _as_vector(cfg: ChartConfig, v, batch: int) -> Var:
    """A pushed vector in the chart's semiring, shape [B, m]."""
    v = T.as_var(v)
    if v.ndim == 1:
        v = T.reshape(v, (1, v.shape[0]))
        if batch != 1:
            v = T.mul(v, np.ones((batch, 1)))
    if v.shape != (batch, cfg.vector_dim):
        raise ValueError(f"pushed vector has shape {v.shape}, expected {(batch, cfg.vector_dim)}")
    if cfg.log:
        if np.any(v.value < 0):
            raise ValueError("log-space vector mode needs nonnegative pushed vectors")
        return T.log(v)
    return v


def chart_init(num_states: int, num_symbols: int, mode: str = "rns", window: int | None = None,
               vector_dim: int | None = None, v0=None, batch: int = 1, q0: int = 0,
               bottom: int = 0, **options) -> ChartState:
    """A chart at ``t = 0`` holding only the simulated initial push of the bottom symbol.

    Extra keyword options are :class:`ChartConfig` fields.
    """
    cfg = ChartConfig(num_states, num_symbols, mode=mode, window=window, vector_dim=vector_dim,
                      q0=q0, bottom=bottom, **options)
    return _init_from_config(cfg, batch, v0)


def _init_from_config(cfg: ChartConfig, batch: int, v0=None) -> ChartState:
    q, g = cfg.num_states, cfg.num_symbols
    ind = np.full((batch, 1, q, g, q, g), cfg.zero)
    ind[:, 0, cfg.q0, cfg.bottom, cfg.q0, cfg.bottom] = cfg.one
    a0 = np.full((batch, q, g), cfg.zero)
    a0[:, cfg.q0, cfg.bottom] = cfg.one
    c = ChartState(cfg, batch, 0)
    c.gamma[0] = Var(ind)
    c.lo[0] = -1
    c.alpha[-1] = Var(a0)
    c.alpha[0] = Var(a0.copy())
    if cfg.mode == "vrns":
        if v0 is None:
            v0 = np.zeros(cfg.vector_dim)
        lv = _as_vector(cfg, v0, batch)
        lv = T.reshape(lv, (batch, 1, 1, 1, 1, 1, cfg.vector_dim))
        if cfg.zeta_init_mode == "indicator":
            z = _times(cfg, Var(ind[..., None]), lv)
        else:
            z = _times(cfg, _const((batch, 1, q, g, q, g, 1), cfg.one), lv)
        c.zeta[0] = z
        c.vectors.append(v0)
    return c


def _rows(col: Var, lo_col: int, first: int, last: int) -> Var:
    """Rows for span starts ``first..last`` (inclusive) of a stored column."""
    return col[:, first - lo_col:last - lo_col + 1]


def _pad_rows(cfg: ChartConfig, x: Var, n_after: int) -> Var:
    if n_after <= 0:
        return x
    shape = (x.shape[0], n_after) + x.shape[2:]
    return T.concat([x, _const(shape, cfg.zero)], axis=1)


def _span_matrix(cfg: ChartConfig, cols: dict, los: dict, first: int, last_i: int,
                 ks: range) -> Var:
    """Stack ``cols[k]`` rows ``first..k-1`` (padded to ``last_i``) along a new k axis."""
    parts = []
    for k in ks:
        part = _rows(cols[k], los[k], first, k - 1)
        parts.append(_pad_rows(cfg, part, last_i - (k - 1)))
    return T.stack(parts, axis=2)


def chart_step(c: ChartState, delta, v=None) -> ChartState:
    """Consume one transition tensor and return the chart advanced to ``t + 1``.

    ``delta`` is ``[B, Q, G, Q, 2G+1]`` (a leading batch axis may be omitted
    when ``B = 1``), in log scale for the log semiring.  Vector mode also
    needs the pushed vector ``v`` of shape ``[B, m]`` or ``[m]``.  The input
    state is left untouched.
    """
    cfg = c.config
    q, g = cfg.num_states, cfg.num_symbols
    delta = T.as_var(delta)
    if delta.ndim == 4:
        delta = T.reshape(delta, (1,) + delta.shape)
    want = (c.batch, q, g, q, 2 * g + 1)
    if delta.shape != want:
        raise ValueError(f"transition tensor has shape {delta.shape}, expected {want}")
    if cfg.mode == "vrns" and v is None:
        raise ValueError("vector mode needs a pushed vector at every step")

    t = c.t + 1
    lo = -1 if cfg.window is None else max(-1, t - cfg.window)
    push = delta[..., :g]
    repl = delta[..., g:2 * g]
    pop = delta[..., 2 * g]
    prev, prev_lo = c.gamma[t - 1], c.lo[t - 1]

    new = replace(c, t=t, gamma=dict(c.gamma), lo=dict(c.lo), alpha=dict(c.alpha),
                  zeta=dict(c.zeta), deltas=c.deltas + [delta], vectors=list(c.vectors))

    ks = range(lo + 1, t - 1)  # k in [i+1, t-2]; k >= 0 since lo >= -1
    gp = None
    if len(ks) and cfg.pop_method == "gamma_prime":
        src = _rows(prev, prev_lo, ks[0], ks[-1])
        gp = _contract(cfg, "bkuysz,bszr->bkuyr", src, pop)

    push_row = T.reshape(push, (c.batch, 1, q, g, q, g))
    if t - 2 >= lo:
        old = _rows(prev, prev_lo, lo, t - 2)
        body = _contract(cfg, "biqxsz,bszry->biqxry", old, repl)
        if len(ks):
            gik = _span_matrix(cfg, c.gamma, c.lo, lo, t - 3, ks)
            if cfg.pop_method == "gamma_prime":
                pterm = _contract(cfg, "bikqxuy,bkuyr->biqxry", gik, gp)
            else:
                src = _rows(prev, prev_lo, ks[0], ks[-1])
                pterm = _contract(cfg, "bikqxuy,bkuysz,bszr->biqxry", gik, src, pop)
            body = _plus(cfg, body, _pad_rows(cfg, pterm, 1))
        col = T.concat([body, push_row], axis=1)
    else:
        col = push_row
    new.gamma[t] = col
    new.lo[t] = lo

    first = lo
    if cfg.bottom_compat and first == -1:
        first = 0
    if first <= t - 1:
        a = T.stack([c.alpha[i] for i in range(first, t)], axis=1)
        new.alpha[t] = _contract(cfg, "biqx,biqxry->bry", a, _rows(col, lo, first, t - 1))
    else:
        new.alpha[t] = _const((c.batch, q, g), cfg.zero)

    if cfg.mode == "vrns":
        m = cfg.vector_dim
        lv = _as_vector(cfg, v, c.batch)
        new.vectors.append(v)
        zpush = _times(cfg, T.reshape(push, (c.batch, 1, q, g, q, g, 1)),
                       T.reshape(lv, (c.batch, 1, 1, 1, 1, 1, m)))
        zprev = c.zeta[t - 1]
        if t - 2 >= lo:
            zold = _rows(zprev, prev_lo, lo, t - 2)
            zbody = _contract(cfg, "biqxszm,bszry->biqxrym", zold, repl)
            if len(ks):
                zik = _span_matrix(cfg, c.zeta, c.lo, lo, t - 3, ks)
                if gp is None:
                    src = _rows(prev, prev_lo, ks[0], ks[-1])
                    gp = _contract(cfg, "bkuysz,bszr->bkuyr", src, pop)
                zpop = _contract(cfg, "bikqxuym,bkuyr->biqxrym", zik, gp)
                zbody = _plus(cfg, zbody, _pad_rows(cfg, zpop, 1))
            zcol = T.concat([zbody, zpush], axis=1)
        else:
            zcol = zpush
        new.zeta[t] = zcol
    return new


def _check_alive(cfg: ChartConfig, total: np.ndarray):
    dead = np.isneginf(total) if cfg.log else (total <= 0)
    if np.any(dead):
        lanes = np.nonzero(np.reshape(dead, -1))[0].tolist()
        raise DeadChartError(f"every run has weight zero (batch lanes {lanes})")


def reading(c: ChartState) -> Var:
    """Stack reading at the cursor, real scale, shape ``[B, reading_size]``.

    NS: distribution over top symbols.  RNS: joint distribution over (state,
    top symbol).  VRNS: expected top vector for each (state, top symbol),
    weighted by the normalized forward weights.
    """
    cfg = c.config
    q, g = cfg.num_states, cfg.num_symbols
    a = c.alpha[c.t]
    flat = T.reshape(a, (c.batch, q * g))
    if cfg.log:
        total = T.logsumexp(flat, axis=1, keepdims=True)
    else:
        total = T.sum(flat, axis=1, keepdims=True)
    _check_alive(cfg, total.value)
    if cfg.mode == "rns":
        return T.exp(T.sub(flat, total)) if cfg.log else T.div(flat, total)
    if cfg.mode == "ns":
        if cfg.log:
            marg = T.logsumexp(a, axis=1)
            return T.exp(T.sub(marg, total))
        return T.div(T.sum(a, axis=1), total)
    eta = _eta(c)
    m = cfg.vector_dim
    eta = T.reshape(eta, (c.batch, q * g * m))
    if cfg.log:
        return T.exp(T.sub(eta, total))
    return T.div(eta, total)


def _eta(c: ChartState) -> Var:
    cfg = c.config
    t = c.t
    col = c.zeta[t]
    lo = c.lo[t]
    first = lo
    if cfg.bottom_compat and first == -1 and t >= 1:
        first = 0
    if t == 0:
        first = -1
    a = T.stack([c.alpha[i] for i in range(first, t)], axis=1)
    return _contract(cfg, "biqx,biqxrym->brym", a, _rows(col, lo, first, t - 1))


def log_total(c: ChartState) -> Var:
    """Log of the total forward weight at the cursor, shape ``[B]``."""
    cfg = c.config
    flat = T.reshape(c.alpha[c.t], (c.batch, -1))
    if cfg.log:
        return T.logsumexp(flat, axis=1)
    return T.log(T.sum(flat, axis=1))


def reading_grad(c: ChartState, reading_adjoint, tape: T.Tape) -> dict:
    """Backpropagate an adjoint of :func:`reading` to every transition tensor.

    The chart must have been built inside ``tape`` from tensors that require
    gradients.  Returns ``{"deltas": [...], "vectors": [...]}`` where entry
    ``k`` is the adjoint of the ``k``-th tensor passed to :func:`chart_step`
    (and, in vector mode, the ``k``-th vector, ``v0`` first).
    """
    r = reading(c)
    tape.backward(r, seed=reading_adjoint)
    out = {"deltas": [tape.adjoint(d) for d in c.deltas]}
    if c.config.mode == "vrns":
        out["vectors"] = [tape.adjoint(v) if isinstance(v, Var) else None for v in c.vectors]
    return out


def _detach(x: Var) -> Var:
    return Var(x.value.copy())


def chart_split_forward(c: ChartState, boundary: int | None = None):
    """Cut a windowed chart at ``boundary`` for truncated backpropagation.

    Returns ``(frozen, resumed)``.  ``frozen`` holds plain-array copies of
    the last ``D - 1`` gamma (and zeta) columns and the last ``D`` forward
    weights at the boundary.  ``resumed`` is a chart at ``t = boundary``
    built from those copies, so stepping it reproduces the uninterrupted
    chart while gradients stop at the boundary.
    """
    cfg = c.config
    if cfg.window is None:
        raise ValueError("only a windowed chart can be split")
    b = c.t if boundary is None else boundary
    if b > c.t or b < 0:
        raise ValueError(f"boundary {b} is outside [0, {c.t}]")
    if b == 0:
        res = _init_from_config(cfg, c.batch, c.vectors[0] if c.vectors else None)
        res.vectors = [_detach(v) if isinstance(v, Var) else v for v in res.vectors]
        if cfg.mode == "vrns":
            res.zeta[0] = _detach(res.zeta[0])
        frozen = {"gamma": {0: res.gamma[0].value}, "lo": {0: -1},
                  "alpha": {-1: res.alpha[-1].value, 0: res.alpha[0].value}, "zeta": {}}
        if cfg.mode == "vrns":
            frozen["zeta"][0] = res.zeta[0].value
        return frozen, res
    d = cfg.window
    cols = range(max(0, b - d + 2), b + 1)
    alphas = range(max(-1, b - d + 1), b + 1)
    res = ChartState(cfg, c.batch, b)
    for k in cols:
        res.gamma[k] = _detach(c.gamma[k])
        res.lo[k] = c.lo[k]
        if cfg.mode == "vrns":
            res.zeta[k] = _detach(c.zeta[k])
    for i in alphas:
        res.alpha[i] = _detach(c.alpha[i])
    frozen = {
        "gamma": {k: res.gamma[k].value for k in cols},
        "lo": {k: res.lo[k] for k in cols},
        "alpha": {i: res.alpha[i].value for i in alphas},
        "zeta": {k: res.zeta[k].value for k in cols} if cfg.mode == "vrns" else {},
    }
    return frozen, res


def run_chart(deltas: Sequence, num_states: int, num_symbols: int, vectors=None,
              v0=None, **options) -> ChartState:
    """Build a chart over a whole sequence of transition tensors."""
    batch = options.pop("batch", 1)
    if len(deltas) and T.as_var(deltas[0]).ndim == 5:
        batch = T.as_var(deltas[0]).shape[0]
    c = chart_init(num_states, num_symbols, v0=v0, batch=batch, **options)
    for k, d in enumerate(deltas):
        c = chart_step(c, d, None if vectors is None else vectors[k])
    return c


def forward_log_weights(deltas: Sequence[np.ndarray], num_states: int, num_symbols: int,
                        q0: int = 0, bottom: int = 0, **options) -> np.ndarray:
    """``alpha`` after the last tensor for a single string, log scale ``[Q, G]``."""
    with T.no_grad():
        c = chart_init(num_states, num_symbols, q0=q0, bottom=bottom, **options)
        for d in deltas:
            c = chart_step(c, np.asarray(d))
    return c.alpha[c.t].value[0]


def dump_gamma(c: ChartState, out, lane: int = 0) -> int:
    """Write one CSV row ``i,t,q,x,r,y,log_weight`` per nonzero inner weight.

    ``out`` is a path or a text file object; returns the number of rows.
    """
    cfg = c.config
    own = isinstance(out, (str, bytes)) or hasattr(out, "__fspath__")
    f = open(out, "w", newline="", encoding="utf-8") if own else out
    try:
        w = csv.writer(f)
        w.writerow(["i", "t", "q", "x", "r", "y", "log_weight"])
        n = 0
        for t in sorted(c.gamma):
            col = c.gamma[t].value[lane]
            vals = col if cfg.log else np.log(np.where(col > 0, col, np.nan))
            for j, qq, x, r, y in zip(*np.nonzero(np.isfinite(vals))):
                w.writerow([c.lo[t] + j, t, qq, x, r, y, repr(float(vals[j, qq, x, r, y]))])
                n += 1
        return n
    finally:
        if own:
            f.close()


def log_normalize(x: np.ndarray, axis=None) -> np.ndarray:
    return x - np_logsumexp(x, axis=axis, keepdims=True)
