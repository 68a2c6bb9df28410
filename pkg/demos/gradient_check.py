"""
Checking chart gradients against finite differences
===================================================

The chart is built on a small reverse-mode tape.  Here the gradient of a
reading with respect to random transition weights is compared with central
differences.
"""

import numpy as np

from nsrnn import lang, tape
from nsrnn.checks import finite_difference, relative_error

rng = np.random.default_rng(1)
Q, G, n = 2, 2, 5
deltas = [rng.normal(size=(1, Q, G, Q, 2 * G + 1)) for _ in range(n)]
proj = rng.normal(size=(1, Q * G))


def objective():
    with tape.no_grad():
        r = lang.reading(lang.run_chart(deltas, Q, G)).value
    return float((r * proj).sum())


leaf = tape.Var(deltas[2], requires_grad=True)
with tape.Tape() as tp:
    r = lang.reading(lang.run_chart(deltas[:2] + [leaf] + deltas[3:], Q, G))
    loss = tape.sum(r * proj)
tp.backward(loss)

idx, numeric = finite_difference(objective, deltas[2])
print("relative error", relative_error(leaf.grad.reshape(-1)[idx], numeric))
