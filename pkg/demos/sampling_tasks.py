"""
Sampling benchmark languages at an exact length
===============================================

Each context-free task is a probabilistic grammar.  A table of length
probabilities lets us draw strings of exactly the requested length, and the
same grammar scores strings, which gives the best achievable cross-entropy.
"""

import math

from nsrnn import tasks
from nsrnn.rng import make_rng

rng = make_rng(0)
for name in tasks.TASK_NAMES:
    t = tasks.make_task(name)
    n = t.valid_lengths(10, 16)[0]
    print(f"{name:18s} length {n:2d}: {' '.join(t.sample(n, rng))}")

# how much probability the grammar puts on each length
mr = tasks.make_task("marked-reversal")
for n in (1, 3, 5, 7):
    print("P(length =", n, ") =", round(mr.sampler.length_probability(n), 6))

# lower bound on per-symbol cross-entropy for a validation set drawn uniformly
# over the valid lengths in [10, 20]
dist = tasks.TaskDistribution(mr, 10, 20)
valid = tasks.sample_dataset(mr, 10, 20, 200, seed=0, stream="valid")
print("lower bound", tasks.lower_bound_xent(valid, dist), "nats/symbol")

# the copy language is uniform at each length, so the bound is easy to check
ww = tasks.noncfl_enumerate("w#w", 7)
print(len(ww), "strings of length 7; bound",
      tasks.lower_bound_xent(ww, tasks.TaskDistribution(tasks.make_task("w#w"), 7, 7)),
      "=", math.log(8) / 8)
