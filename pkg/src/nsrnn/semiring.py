"""Real and log semiring kernels over dense numpy arrays.

Log-scale arrays encode a nonnegative weight ``w`` as ``log(w)``; semiring
zero is exactly ``-inf`` and semiring one is exactly ``0.0``.

The central routine is :func:`semiring_contract`, an einsum-style
generalized contraction.  Its exact path splits the contracted index space
into fixed-size blocks that are reduced one after another in ascending
order, so memory never exceeds ``block_size`` times the output size.  In the
log semiring a faster shifted-``einsum`` path is tried first; entries where
shifting could have underflowed are recomputed on the exact path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

NEG_INF = -math.inf
DEFAULT_BLOCK_SIZE = 32

# A shifted sum below this value may have lost terms to underflow.
_UNDERFLOW_GUARD = 1e-200

__all__ = [
    "NEG_INF",
    "DEFAULT_BLOCK_SIZE",
    "ContractionSpec",
    "log_add",
    "logsumexp",
    "semiring_contract",
    "contraction_adjoints",
]


def log_add(a, b):
    """Return ``log(exp(a) + exp(b))`` using the max-shift trick.

    Works elementwise on scalars or arrays. ``-inf`` is the identity.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    hi = np.maximum(a, b)
    lo = np.minimum(a, b)
    with np.errstate(invalid="ignore"):
        out = hi + np.log1p(np.exp(lo - hi))
    # both -inf: lo - hi is nan
    out = np.where(np.isneginf(hi), NEG_INF, out)
    if out.ndim == 0:
        return float(out)
    return out


def logsumexp(values, axis=None, keepdims: bool = False):
    """``log(sum(exp(values)))`` over ``axis``; an empty reduction is ``-inf``."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        if axis is None:
            return NEG_INF
        shape = np.sum(x, axis=axis, keepdims=keepdims).shape
        return np.full(shape, NEG_INF)
    m = np.max(x, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(x - m_safe), axis=axis, keepdims=True)) + m_safe
    # an all -inf slice gives log(0) = -inf already; a +inf max stays +inf
    out = np.where(np.isposinf(m), np.inf, out)
    if not keepdims:
        out = np.squeeze(out, axis=axis) if axis is not None else out.reshape(())
    if out.ndim == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class ContractionSpec:
    """Parsed einsum-style descriptor such as ``"ij,jk->ik"``.

    Letters present in some input but absent from the output are contracted.
    Every output letter must occur in at least one input, and a letter may
    not repeat within a single operand.
    """

    inputs: tuple[str, ...]
    output: str

    @classmethod
    def parse(cls, spec: "str | ContractionSpec") -> "ContractionSpec":
        if isinstance(spec, ContractionSpec):
            return spec
        return _parse_spec(spec.replace(" ", ""))

    @property
    def contracted(self) -> str:
        seen = []
        for letters in self.inputs:
            for c in letters:
                if c not in self.output and c not in seen:
                    seen.append(c)
        return "".join(seen)

    def __str__(self) -> str:
        return ",".join(self.inputs) + "->" + self.output

    def sizes(self, shapes: Sequence[tuple[int, ...]]) -> dict[str, int]:
        if len(shapes) != len(self.inputs):
            raise ValueError(
                f"contraction {self} expects {len(self.inputs)} operands, got {len(shapes)}"
            )
        sizes: dict[str, int] = {}
        for k, (letters, shape) in enumerate(zip(self.inputs, shapes)):
            if len(letters) != len(shape):
                raise ValueError(
                    f"operand {k} of {self} has {len(shape)} axes, spec names {len(letters)}"
                )
            for c, n in zip(letters, shape):
                if sizes.setdefault(c, n) != n:
                    raise ValueError(
                        f"axis '{c}' of {self} has conflicting lengths {sizes[c]} and {n}"
                    )
        return sizes


@lru_cache(maxsize=None)
def _parse_spec(text: str) -> ContractionSpec:
    if "->" not in text:
        raise ValueError(f"contraction spec needs an explicit output: {text!r}")
    lhs, out = text.split("->")
    inputs = tuple(lhs.split(","))
    letters = set("".join(inputs))
    for c in out:
        if c not in letters:
            raise ValueError(f"output axis '{c}' does not occur in any operand of {text!r}")
    if len(set(out)) != len(out):
        raise ValueError(f"repeated output axis in {text!r}")
    for term in inputs:
        if len(set(term)) != len(term):
            raise ValueError(f"repeated axis within operand '{term}' of {text!r}")
    return ContractionSpec(inputs, out)


def _broadcast_to_output(x: np.ndarray, letters: str, output: str) -> np.ndarray:
    """View ``x`` (axes ``letters``, all in ``output``) with output axis order."""
    order = [letters.index(c) for c in output if c in letters]
    x = np.transpose(x, order)
    shape = []
    it = iter(x.shape)
    for c in output:
        shape.append(next(it) if c in letters else 1)
    return x.reshape(shape)


def _gather_block(x, letters, output, contracted, csizes, flat_block):
    """Operand values for a block of contracted assignments.

    Returns an array with output-ordered axes (size 1 where the operand lacks
    the letter) plus a trailing block axis.
    """
    own = [c for c in contracted if c in letters]
    free = [c for c in output if c in letters]
    x = np.transpose(x, [letters.index(c) for c in free + own])
    fshape = x.shape[: len(free)]
    x = x.reshape(fshape + (-1,))
    if own:
        multi = np.unravel_index(flat_block, [csizes[c] for c in contracted])
        idx = np.ravel_multi_index(
            [multi[contracted.index(c)] for c in own], [csizes[c] for c in own]
        )
        x = x[..., idx]
    else:
        x = np.broadcast_to(x, fshape + (len(flat_block),))
    shape = []
    it = iter(fshape)
    for c in output:
        shape.append(next(it) if c in letters else 1)
    return x.reshape(tuple(shape) + (len(flat_block),))


def _blocked_contract(spec, operands, block_size, semiring):
    sizes = spec.sizes([op.shape for op in operands])
    contracted = spec.contracted
    csizes = {c: sizes[c] for c in contracted}
    out_shape = tuple(sizes[c] for c in spec.output)
    total = int(np.prod([csizes[c] for c in contracted])) if contracted else 1
    log = semiring == "log"
    acc = np.full(out_shape, NEG_INF if log else 0.0)
    for start in range(0, total, block_size):
        flat = np.arange(start, min(start + block_size, total))
        joint = None
        for letters, x in zip(spec.inputs, operands):
            part = _gather_block(x, letters, spec.output, contracted, csizes, flat)
            if joint is None:
                joint = part
            else:
                joint = joint + part if log else joint * part
        joint = np.broadcast_to(joint, out_shape + (len(flat),))
        if log:
            acc = log_add(acc, logsumexp(joint, axis=-1))
        else:
            # strictly sequential left-to-right accumulation, so the result
            # does not depend on block_size
            seq = np.concatenate([acc[..., None], joint], axis=-1)
            acc = np.cumsum(seq, axis=-1)[..., -1]
    return np.asarray(acc, dtype=np.float64).reshape(out_shape)


@lru_cache(maxsize=4096)
def _einsum_path(text, shapes):
    operands = [np.empty(s) for s in shapes]
    return tuple(np.einsum_path(text, *operands, optimize="greedy")[0][1:])


@lru_cache(maxsize=8192)
def _pair_plan(a: str, b: str, out: str, shape_a, shape_b):
    """Transpose/reshape recipe computing ``a,b->out`` with one batched matmul."""
    size = dict(zip(a, shape_a))
    size.update(zip(b, shape_b))
    batch = [c for c in out if c in a and c in b]
    free_a = [c for c in out if c in a and c not in b]
    free_b = [c for c in out if c in b and c not in a]
    contr = [c for c in a if c in b and c not in out]
    only_a = tuple(k for k, c in enumerate(a) if c not in b and c not in out)
    only_b = tuple(k for k, c in enumerate(b) if c not in a and c not in out)
    a_left = [c for c in a if c in b or c in out]
    b_left = [c for c in b if c in a or c in out]
    perm_a = tuple(a_left.index(c) for c in batch + free_a + contr)
    perm_b = tuple(b_left.index(c) for c in batch + contr + free_b)

    def prod(cs):
        return int(np.prod([size[c] for c in cs], dtype=np.int64))

    nb, nfa, nfb, nc = prod(batch), prod(free_a), prod(free_b), prod(contr)
    mid = batch + free_a + free_b
    final = tuple(mid.index(c) for c in out)
    mid_shape = tuple(size[c] for c in mid)
    return (only_a, only_b, perm_a, perm_b, (nb, nfa, nc), (nb, nc, nfb), mid_shape, final)


def _pair(a: str, b: str, out: str, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    only_a, only_b, perm_a, perm_b, sa, sb, mid_shape, final = _pair_plan(
        a, b, out, x.shape, y.shape)
    if only_a:
        x = x.sum(axis=only_a)
    if only_b:
        y = y.sum(axis=only_b)
    z = np.matmul(x.transpose(perm_a).reshape(sa), y.transpose(perm_b).reshape(sb))
    return z.reshape(mid_shape).transpose(final)


def _einsum(text, *operands):
    """``np.einsum`` evaluated as a sequence of pairwise batched matmuls."""
    ins, out = text.split("->")
    letters = ins.split(",")
    if len(operands) == 1 or any(len(set(t)) != len(t) for t in letters):
        return np.einsum(text, *operands)
    if len(operands) == 2:
        return _pair(letters[0], letters[1], out, *operands)
    path = _einsum_path(text, tuple(op.shape for op in operands))
    ops, lets = list(operands), list(letters)
    for step in path:
        if len(step) != 2:
            return np.einsum(text, *operands)
        i, j = sorted(step)
        rest = lets[:i] + lets[i + 1:j] + lets[j + 1:]
        keep = set("".join(rest) + out)
        la, lb = lets[i], lets[j]
        lo = "".join(dict.fromkeys(c for c in la + lb if c in keep))
        z = _pair(la, lb, lo, ops[i], ops[j])
        ops = ops[:i] + ops[i + 1:j] + ops[j + 1:] + [z]
        lets = rest + [lo]
    if len(ops) != 1:
        return np.einsum(text, *operands)
    if lets[0] == out:
        return ops[0]
    return np.einsum(f"{lets[0]}->{out}", ops[0])


def _shifted(spec, operands):
    """Per-operand max-shifted exponentials plus the summed shift."""
    out_shape = tuple(spec.sizes([op.shape for op in operands])[c] for c in spec.output)
    shift = np.zeros(out_shape)
    exps = []
    for letters, x in zip(spec.inputs, operands):
        red = tuple(k for k, c in enumerate(letters) if c not in spec.output)
        m = np.max(x, axis=red, keepdims=True) if red else x
        m = np.where(np.isfinite(m), m, 0.0)
        exps.append(np.exp(x - m))
        kept = "".join(c for c in letters if c in spec.output)
        shift = shift + _broadcast_to_output(np.squeeze(m, axis=red) if red else m, kept, spec.output)
    return exps, shift


def _log_contract_fast(spec, operands, cache=None):
    """Shifted einsum; returns ``(result, exact)``.

    ``exact`` is False when some entry may have underflowed and the caller
    must fall back to the blocked path.
    """
    text = str(spec)
    exps, shift = _shifted(spec, operands)
    if cache is not None:
        cache["shifted"] = (exps, shift)
    s = _einsum(text, *exps)
    small = s < _UNDERFLOW_GUARD
    if small.any():
        # distinguish structural zeros (no finite term at all) from underflow
        masks = [np.isfinite(x).astype(np.float64) for x in operands]
        count = _einsum(text, *masks)
        if np.any(small & (count > 0)):
            return None, False
    with np.errstate(divide="ignore"):
        y = np.log(s) + shift
    return y, True


def semiring_contract(spec, operands, block_size: int = DEFAULT_BLOCK_SIZE,
                      semiring: str = "log", method: str = "auto", cache: dict | None = None):
    """Generalized contraction of ``operands`` in the real or log semiring.

    Parameters
    ----------
    spec : str or ContractionSpec
        Einsum-style descriptor, e.g. ``"biqxsz,bszry->biqxry"``.
    operands : sequence of ndarray
        Real-scale arrays for ``semiring="real"``, log-scale for ``"log"``.
    block_size : int
        Number of contracted-index assignments reduced per block.
    method : {"auto", "blocked"}
        ``"auto"`` lets the log semiring use the shifted-einsum path when it
        is provably accurate; ``"blocked"`` forces the exact blocked path.
    cache : dict, optional
        Receives intermediates that :func:`contraction_adjoints` can reuse.

    Returns
    -------
    ndarray
        The semiring sum over contracted indices of semiring products.
    """
    if block_size < 1:
        raise ValueError("block_size must be positive")
    if semiring not in ("log", "real"):
        raise ValueError(f"unknown semiring {semiring!r}")
    spec = ContractionSpec.parse(spec)
    operands = [np.asarray(op, dtype=np.float64) for op in operands]
    spec.sizes([op.shape for op in operands])
    if semiring == "real":
        if method == "blocked":
            return _blocked_contract(spec, operands, block_size, "real")
        return np.asarray(_einsum(str(spec), *operands), dtype=np.float64)
    if method == "auto":
        y, exact = _log_contract_fast(spec, operands, cache)
        if exact:
            return y
    return _blocked_contract(spec, operands, block_size, "log")


def _scatter_block(adj, w, letters, output, contracted, csizes, flat):
    """Add block contributions ``w`` (output axes + block) into ``adj``."""
    own = [c for c in contracted if c in letters]
    free = [c for c in output if c in letters]
    drop = tuple(k for k, c in enumerate(output) if c not in letters)
    if drop:
        w = w.sum(axis=drop)
    fshape = w.shape[:-1]
    if own:
        multi = np.unravel_index(flat, [csizes[c] for c in contracted])
        idx = np.ravel_multi_index(
            [multi[contracted.index(c)] for c in own], [csizes[c] for c in own]
        )
        target = adj.reshape(fshape + (-1,))
        np.add.at(np.moveaxis(target, -1, 0), idx, np.moveaxis(w, -1, 0))
    else:
        adj += w.sum(axis=-1).reshape(adj.shape)


def _blocked_adjoints(spec, operands, y, gy, block_size):
    sizes = spec.sizes([op.shape for op in operands])
    contracted = spec.contracted
    csizes = {c: sizes[c] for c in contracted}
    out_shape = tuple(sizes[c] for c in spec.output)
    total = int(np.prod([csizes[c] for c in contracted])) if contracted else 1
    # adjoint buffers laid out as (free in output order, own contracted)
    bufs = []
    for letters in spec.inputs:
        free = [c for c in spec.output if c in letters]
        own = [c for c in contracted if c in letters]
        bufs.append(np.zeros([sizes[c] for c in free + own]))
    dead = np.isneginf(y)
    y_safe = np.where(dead, 0.0, y)
    for start in range(0, total, block_size):
        flat = np.arange(start, min(start + block_size, total))
        joint = None
        for letters, x in zip(spec.inputs, operands):
            part = _gather_block(x, letters, spec.output, contracted, csizes, flat)
            joint = part if joint is None else joint + part
        joint = np.broadcast_to(joint, out_shape + (len(flat),))
        w = np.exp(joint - y_safe[..., None]) * gy[..., None]
        w = np.where(dead[..., None], 0.0, w)
        for k, letters in enumerate(spec.inputs):
            _scatter_block(bufs[k], w, letters, spec.output, contracted, csizes, flat)
    grads = []
    for letters, buf in zip(spec.inputs, bufs):
        free = [c for c in spec.output if c in letters]
        own = [c for c in contracted if c in letters]
        order = free + own
        grads.append(np.transpose(buf, [order.index(c) for c in letters]))
    return grads


def _adjoint_einsum(spec, k, gy, operands) -> np.ndarray:
    """Sum ``gy`` times the other operands onto operand ``k``'s axes."""
    letters = spec.inputs[k]
    others = [operands[j] for j in range(len(operands)) if j != k]
    other_letters = [spec.inputs[j] for j in range(len(operands)) if j != k]
    seen = set(spec.output).union(*other_letters)
    # axes owned only by operand k get a broadcast length-1 axis
    target = "".join(c for c in letters if c in seen)
    g = _einsum(",".join([spec.output] + other_letters) + "->" + target, gy, *others)
    return _broadcast_to_output(g, target, letters)


def _fast_adjoints(spec, operands, y, gy, shifted=None):
    exps, shift = shifted or _shifted(spec, operands)
    dead = np.isneginf(y)
    with np.errstate(over="ignore", invalid="ignore"):
        z = np.where(dead, 0.0, gy * np.exp(shift - np.where(dead, 0.0, y)))
    return [_adjoint_einsum(spec, k, z, exps) * exps[k] for k in range(len(operands))]


def contraction_adjoints(spec, operands, result, output_adjoint,
                         block_size: int = DEFAULT_BLOCK_SIZE, semiring: str = "log",
                         method: str = "auto", cache: dict | None = None):
    """Adjoints of every operand of a contraction given the output adjoint.

    In the log semiring the adjoint of operand entry ``x`` is the sum, over
    every product term it takes part in, of ``output_adjoint[y] *
    exp(term - y)``: the posterior share of that term in its output entry.
    """
    spec = ContractionSpec.parse(spec)
    operands = [np.asarray(op, dtype=np.float64) for op in operands]
    gy = np.asarray(output_adjoint, dtype=np.float64)
    if gy.shape != np.shape(result):
        raise ValueError(f"output adjoint shape {gy.shape} != result shape {np.shape(result)}")
    if semiring == "real":
        return [np.broadcast_to(_adjoint_einsum(spec, k, gy, operands), op.shape).copy()
                for k, op in enumerate(operands)]
    result = np.asarray(result)
    if method == "auto":
        shifted = (cache or {}).get("shifted") or _shifted(spec, operands)
        gap = np.where(np.isneginf(result), 0.0, shifted[1] - result)
        # a large gap means the forward sum was tiny after shifting
        if np.all(gap < 400.0):
            return _fast_adjoints(spec, operands, result, gy, shifted)
    return _blocked_adjoints(spec, operands, np.asarray(result), gy, block_size)
