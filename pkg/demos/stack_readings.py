"""
What the differentiable stacks read back
========================================

Feed the same push/pop pattern to the stratification stack, the superposition
stack and the vector-valued nondeterministic stack, and compare readings.
"""

import numpy as np

from nsrnn import lang, stacks, tape
from nsrnn.checks import superposition_as_vrns

vectors = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]])
print("pushing", vectors.tolist(), "then popping once")

# stratification: push strength d, pop strength u
st = stacks.StratState(None, None, 1, 2)
for v in vectors:
    st, r = stacks.strat_step(st, pop=np.zeros(1), push=np.ones(1), v=v[None])
st, r = stacks.strat_step(st, pop=np.ones(1), push=np.zeros(1), v=np.zeros((1, 2)))
print("stratification", r.value[0])

# superposition: probabilities of (push, no-op, pop)
sp = stacks.SupState(None, 1, 2)
for v in vectors:
    sp, r = stacks.sup_step(sp, np.array([1.0, 0.0, 0.0]), v)
sp, r = stacks.sup_step(sp, np.array([0.0, 0.0, 1.0]), np.zeros(2))
print("superposition ", r.value[0])

# a one-state, one-symbol nondeterministic stack with vectors on the stack;
# the last action is a pop, the earlier ones pushes
probs = [[1.0, 0.0, 0.0]] * 3 + [[0.0, 0.0, 1.0]]
vecs = np.vstack([vectors, np.zeros((1, 2))])
with tape.no_grad(), np.errstate(divide="ignore"):
    c = lang.chart_init(1, 1, mode="vrns", vector_dim=2, v0=np.zeros(2))
    for p, v in zip(probs, vecs):
        delta = np.log(np.asarray(p)).reshape(1, 1, 1, 1, 3)
        c = lang.chart_step(c, delta, v[None])
    print("vector nondet ", lang.reading(c).value[0])

# with mixed actions the two agree only while no mass falls off the bottom
rng = np.random.default_rng(0)
p = rng.dirichlet(np.ones(3), size=8)
v = rng.uniform(size=(8, 2))
sp = stacks.SupState(None, 1, 2)
for t in range(8):
    sp, r = stacks.sup_step(sp, p[t], v[t])
print("random actions: superposition", r.value[0], "vector nondet", superposition_as_vrns(p, v))
