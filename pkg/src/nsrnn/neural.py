"""LSTM controller, stack-RNN language model, optimizer and training loop."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tape as T
from .lang import DeadChartError
from .params import Linear, ParamStore
from .rng import make_rng, restore_rng, rng_state
from .stacks import StackModule, make_stack
from .tape import Tape, Var

CHECKPOINT_VERSION = 1
LOG_COLUMNS = ("epoch", "train_loss", "val_ce_diff", "lr", "seconds")


# LSTM

class Lstm:
    """Single-layer LSTM with untied input, forget, candidate and output gates."""

    def __init__(self, store: ParamStore, input_size: int, hidden_size: int, name: str = "lstm"):
        self.input_size, self.hidden_size = input_size, hidden_size
        self.weight = store.add(f"{name}.weight", (4 * hidden_size, input_size + hidden_size),
                                "uniform")
        self.bias = store.add(f"{name}.bias", (4 * hidden_size,), "uniform")

    def initial(self, batch: int):
        z = np.zeros((batch, self.hidden_size))
        return Var(z), Var(z.copy())

    def __call__(self, state, x):
        return lstm_step(self.weight, self.bias, state, x)


def lstm_step(weight, bias, state, x):
    """One LSTM update; ``weight`` is ``[4H, In + H]`` with gate blocks i, f, g, o."""
    h, c = state
    n = h.shape[-1]
    z = T.affine(T.concat([x, h], axis=-1), weight, bias)
    i = T.sigmoid(z[:, 0:n])
    f = T.sigmoid(z[:, n:2 * n])
    g = T.tanh(z[:, 2 * n:3 * n])
    o = T.sigmoid(z[:, 3 * n:4 * n])
    c = T.add(T.mul(f, c), T.mul(i, g))
    return T.mul(o, T.tanh(c)), c


# model

@dataclass
class RnnState:
    h: Var
    c: Var
    stacks: list
    reading: Var  # r_{t-1}, [B, R]
    t: int = 0


class StackRnn:
    """Language model: an LSTM controller reading one-hot symbols plus stack readings.

    Output classes are the ``vocab_size`` symbols followed by EOS.  ``stack``
    is a config dict (see :func:`nsrnn.stacks.make_stack`), a list of them
    whose readings are concatenated, or ``None`` for a plain LSTM.
    """

    def __init__(self, vocab_size: int, hidden_size: int = 20, stack=None):
        self.vocab_size = vocab_size
        self.hidden_size = hidden_size
        self.config = {"vocab_size": vocab_size, "hidden_size": hidden_size, "stack": stack}
        self.store = ParamStore()
        specs = [] if stack is None else (list(stack) if isinstance(stack, (list, tuple)) else [stack])
        self.stacks: list[StackModule] = []
        for k, spec in enumerate(specs):
            spec = dict(spec)
            if len(specs) > 1:
                spec.setdefault("name", f"stack{k}")
            m = make_stack(self.store, hidden_size, spec)
            if m is not None:
                self.stacks.append(m)
        self.reading_size = sum(s.reading_size for s in self.stacks)
        self.lstm = Lstm(self.store, vocab_size + self.reading_size, hidden_size)
        self.output = Linear(self.store, "output", hidden_size, vocab_size + 1)

    @property
    def eos(self) -> int:
        return self.vocab_size

    def initialize(self, rng: np.random.Generator, uniform_bound: float = 0.1, xavier: bool = True):
        self.store.initialize(rng, uniform_bound, xavier)

    def initial_state(self, batch: int) -> RnnState:
        h, c = self.lstm.initial(batch)
        states = [s.initial(batch) for s in self.stacks]
        return RnnState(h, c, states, self._reading(states, batch), 0)

    def _reading(self, states, batch) -> Var:
        if not self.stacks:
            return Var(np.zeros((batch, 0)))
        parts = [s.reading(st) for s, st in zip(self.stacks, states)]
        return parts[0] if len(parts) == 1 else T.concat(parts, axis=-1)

    def step(self, state: RnnState, symbols: np.ndarray, update_stack: bool = True):
        """Read ``symbols`` (``[B]`` ids); returns the new state and logits ``y_t``."""
        x = np.zeros((len(symbols), self.vocab_size))
        x[np.arange(len(symbols)), symbols] = 1.0
        inp = T.concat([Var(x), state.reading], axis=-1) if self.reading_size else Var(x)
        h, c = self.lstm((state.h, state.c), inp)
        stacks, reading = state.stacks, state.reading
        if update_stack and self.stacks:
            stacks = [s.step(st, s.actions(h)) for s, st in zip(self.stacks, stacks)]
            reading = self._reading(stacks, len(symbols))
        return RnnState(h, c, stacks, reading, state.t + 1), self.output(h)

    def detach(self, state: RnnState) -> RnnState:
        stacks = [s.detach(st) for s, st in zip(self.stacks, state.stacks)]
        return RnnState(Var(state.h.value.copy()), Var(state.c.value.copy()), stacks,
                        self._reading(stacks, state.h.shape[0]) if self.stacks
                        else state.reading, state.t)

    def logits(self, tokens) -> list[Var]:
        """Logits ``y_0 .. y_n`` for a batch of equal-length sequences ``[B, n]``."""
        tokens = np.asarray(tokens, dtype=np.int64)
        b, n = tokens.shape
        state = self.initial_state(b)
        out = [self.output(state.h)]
        for t in range(n):
            state, y = self.step(state, tokens[:, t], update_stack=t < n - 1)
            out.append(y)
        return out

    def sequence_losses(self, tokens) -> np.ndarray:
        """Per-sequence negative log-likelihood in nats (EOS included), no gradient."""
        tokens = np.asarray(tokens, dtype=np.int64)
        with T.no_grad():
            ys = self.logits(tokens)
            targets = _targets(tokens, self.eos)
            total = np.zeros(tokens.shape[0])
            for t, y in enumerate(ys):
                lp = _log_softmax_np(y.value)
                total -= lp[np.arange(len(total)), targets[:, t]]
        return total


def _log_softmax_np(x):
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def _targets(tokens: np.ndarray, eos: int) -> np.ndarray:
    b = tokens.shape[0]
    return np.concatenate([tokens, np.full((b, 1), eos, dtype=np.int64)], axis=1)


def lm_loss(logits: Sequence[Var], targets) -> Var:
    """Summed ``-log softmax(y_t)[target_t]`` over timesteps and sequences (nats)."""
    targets = np.asarray(targets, dtype=np.int64)
    total = None
    for t, y in enumerate(logits):
        lp = T.log_softmax(y, axis=-1)
        picked = T.getitem(lp, (np.arange(targets.shape[0]), targets[:, t]))
        s = T.neg(T.sum(picked))
        total = s if total is None else T.add(total, s)
    return total


# optimization

class Adam:
    def __init__(self, store: ParamStore, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.store, self.lr = store, lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v.value) for k, v in store}
        self.v = {k: np.zeros_like(v.value) for k, v in store}
        self.t = 0

    def step(self) -> None:
        adam_step(self)

    def state(self) -> dict:
        return {"m": self.m, "v": self.v, "t": self.t, "lr": self.lr}


def adam_step(opt: Adam) -> None:
    """Bias-corrected Adam update; clears every gradient afterwards."""
    opt.t += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1 ** opt.t
    c2 = 1.0 - b2 ** opt.t
    for k, p in opt.store:
        g = p.grad if p.grad is not None else np.zeros_like(p.value)
        opt.m[k] = b1 * opt.m[k] + (1 - b1) * g
        opt.v[k] = b2 * opt.v[k] + (1 - b2) * g * g
        p.value = p.value - opt.lr * (opt.m[k] / c1) / (np.sqrt(opt.v[k] / c2) + opt.eps)
    opt.store.zero_grad()


def grad_norm(store: ParamStore) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in store.grads().values()))


def clip_gradients(store: ParamStore, threshold: float = 5.0) -> float:
    """Global-norm clipping; returns the norm before clipping."""
    norm = grad_norm(store)
    if norm > threshold:
        scale = threshold / norm
        for _, p in store:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# checkpoints

def save_checkpoint(path, model: StackRnn, opt: Adam | None = None, rngs: dict | None = None,
                    extra: dict | None = None) -> None:
    arrays = {"format_version": np.array(CHECKPOINT_VERSION)}
    for k, v in model.store:
        arrays[f"param/{k}"] = v.value
    if opt is not None:
        for k in opt.m:
            arrays[f"adam_m/{k}"] = opt.m[k]
            arrays[f"adam_v/{k}"] = opt.v[k]
        arrays["adam_t"] = np.array(opt.t)
        arrays["adam_lr"] = np.array(opt.lr)
    meta = {"model": model.config, "rngs": {k: rng_state(r) for k, r in (rngs or {}).items()},
            "extra": extra or {}}
    arrays["meta"] = np.array(json.dumps(meta))
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_checkpoint(path) -> tuple[StackRnn, dict]:
    """Rebuild the model; the second value holds optimizer moments, rngs and extras."""
    with np.load(path, allow_pickle=False) as z:
        version = int(z["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        meta = json.loads(str(z["meta"]))
        cfg = meta["model"]
        model = StackRnn(cfg["vocab_size"], cfg["hidden_size"], cfg["stack"])
        model.store.load({k[6:]: z[k] for k in z.files if k.startswith("param/")})
        info = {"extra": meta["extra"],
                "rngs": {k: restore_rng(s) for k, s in meta["rngs"].items()}}
        if "adam_t" in z.files:
            info["adam"] = {"t": int(z["adam_t"]), "lr": float(z["adam_lr"]),
                            "m": {k[7:]: z[k] for k in z.files if k.startswith("adam_m/")},
                            "v": {k[7:]: z[k] for k in z.files if k.startswith("adam_v/")}}
    return model, info


# training

@dataclass
class Schedule:
    epochs: int = 100
    lr: float = 0.005
    batch_size: int = 10
    decay: float = 0.9
    decay_patience: int = 5
    stop_patience: int = 10
    clip: float = 5.0
    bptt: int | None = None
    init_bound: float = 0.1
    xavier: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "Schedule":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class TrainResult:
    log: list[dict] = field(default_factory=list)
    status: str = "ok"
    message: str = ""
    best_epoch: int | None = None
    best_val: float = math.inf
    best_params: dict | None = None
    seed: int = 0


def batches(strings: Sequence[Sequence[int]], batch_size: int,
            rng: np.random.Generator | None = None) -> list[np.ndarray]:
    """Group strings into equal-length batches of at most ``batch_size``; shuffled if ``rng``."""
    by_len: dict[int, list] = {}
    for s in strings:
        by_len.setdefault(len(s), []).append(list(s))
    out = []
    for n in sorted(by_len):
        group = by_len[n]
        if rng is not None:
            order = rng.permutation(len(group))
            group = [group[i] for i in order]
        for i in range(0, len(group), batch_size):
            out.append(np.array(group[i:i + batch_size], dtype=np.int64).reshape(-1, n))
    if rng is not None:
        out = [out[i] for i in rng.permutation(len(out))]
    return out


def batch_gradient(model: StackRnn, tokens: np.ndarray, bptt: int | None = None) -> float:
    """Accumulate gradients of the summed loss of one batch; returns the loss in nats.

    With ``bptt`` the unroll is cut every ``bptt`` timesteps and gradients
    stop at the cut (windowed nondeterministic stacks resume from
    :func:`nsrnn.lang.chart_split_forward`).
    """
    b, n = tokens.shape
    targets = _targets(tokens, model.eos)
    chunk = n + 1 if not bptt else bptt
    state = model.initial_state(b)
    total = 0.0
    t = 0
    while t <= n:
        end = min(n + 1, t + chunk)
        with Tape() as tape:
            ys = []
            for pos in range(t, end):
                if pos == 0:
                    ys.append(model.output(state.h))
                else:
                    state, y = model.step(state, tokens[:, pos - 1], update_stack=pos < n)
                    ys.append(y)
            loss = lm_loss(ys, targets[:, t:end])
            tape.backward(loss)
        total += float(loss.value)
        if end <= n:
            state = model.detach(state)
        t = end
    return total


def cross_entropy(model: StackRnn, strings: Sequence[Sequence[int]], batch_size: int = 64):
    """Total nats and symbol count (EOS included) of ``strings`` under ``model``."""
    nats, count = 0.0, 0
    for tokens in batches(strings, batch_size):
        nats += float(model.sequence_losses(tokens).sum())
        count += tokens.size + tokens.shape[0]
    return nats, count


def train(model: StackRnn, train_data, valid_data, valid_lower_bound: float,
          schedule: Schedule | None = None, seed: int = 0, log_path=None,
          checkpoint_path=None, on_epoch: Callable[[dict], None] | None = None,
          target: float | None = None, deadline: float | None = None) -> TrainResult:
    """Train from a fresh initialization drawn from the ``init`` stream of ``seed``.

    ``valid_lower_bound`` is the per-symbol cross-entropy of the true
    distribution on ``valid_data``; the logged ``val_ce_diff`` is the model's
    per-symbol validation cross-entropy minus this bound.  The best
    parameters (by validation) are restored into ``model`` at the end.
    Training stops early once ``val_ce_diff`` drops to ``target`` or below,
    or after the first epoch that ends past ``deadline`` (a
    ``time.perf_counter()`` value).
    """
    sched = schedule or Schedule()
    model.initialize(make_rng(seed, "init"), sched.init_bound, sched.xavier)
    shuffle = make_rng(seed, "shuffle")
    opt = Adam(model.store, lr=sched.lr)
    result = TrainResult(seed=seed, best_params=model.store.values())
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
    since_improve = since_decay = 0
    try:
        for epoch in range(1, sched.epochs + 1):
            start = time.perf_counter()
            nats, count = 0.0, 0
            try:
                for tokens in batches(train_data, sched.batch_size, shuffle):
                    loss = batch_gradient(model, tokens, sched.bptt)
                    if not math.isfinite(loss):
                        raise FloatingPointError(f"non-finite training loss {loss}")
                    # average per symbol so the clip threshold does not depend on batch shape
                    symbols = tokens.size + tokens.shape[0]
                    for _, p in model.store:
                        if p.grad is not None:
                            p.grad = p.grad / symbols
                    clip_gradients(model.store, sched.clip)
                    opt.step()
                    nats += loss
                    count += symbols
                vn, vc = cross_entropy(model, valid_data)
                val = vn / vc - valid_lower_bound
                if not math.isfinite(val):
                    raise FloatingPointError(f"non-finite validation loss {val}")
            except (FloatingPointError, DeadChartError) as exc:
                result.status = "nan"
                result.message = f"epoch {epoch}: {exc}"
                row = {"epoch": epoch, "train_loss": float("nan"), "val_ce_diff": float("nan"),
                       "lr": opt.lr, "seconds": time.perf_counter() - start}
                result.log.append(row)
                if writer:
                    writer.writerow(row)
                break
            row = {"epoch": epoch, "train_loss": nats / max(count, 1), "val_ce_diff": val,
                   "lr": opt.lr, "seconds": time.perf_counter() - start}
            result.log.append(row)
            if writer:
                writer.writerow(row)
                fh.flush()
            if on_epoch:
                on_epoch(row)
            if val < result.best_val:
                result.best_val, result.best_epoch = val, epoch
                result.best_params = model.store.values()
                since_improve = since_decay = 0
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, model, opt, {"shuffle": shuffle},
                                    {"epoch": epoch, "val_ce_diff": val, "seed": seed})
                if target is not None and val <= target:
                    result.message = f"reached target {target} at epoch {epoch}"
                    break
            else:
                since_improve += 1
                since_decay += 1
            if deadline is not None and time.perf_counter() >= deadline:
                result.message = f"time limit after epoch {epoch}"
                break
            if since_improve == 0:
                continue
            if since_improve >= max(sched.stop_patience, 1) or sched.stop_patience == 0:
                break
            if since_decay >= max(sched.decay_patience, 1) or sched.decay_patience == 0:
                opt.lr *= sched.decay
                since_decay = 0
    finally:
        if fh:
            fh.close()
    model.store.load(result.best_params)
    return result
