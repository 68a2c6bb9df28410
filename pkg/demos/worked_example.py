"""
Tracking every run of a nondeterministic pushdown automaton
===========================================================

The machine below guesses the middle of an even palindrome: in state q1 it
pushes what it reads, and at any point it may switch to q2 and start popping
matching symbols.  The chart keeps all of those guesses at once.
"""

import numpy as np

from nsrnn import automata, lang, tape

m = automata.ww_reverse_machine()
print("states", m.states, "stack alphabet", m.stack_alphabet)

# one transition tensor per input symbol, in log space, with a batch axis
w = list("0110")
deltas = [d[None] for d in m.transition_tensors(w, log=True)]

with tape.no_grad():
    chart = lang.run_chart(deltas, m.num_states, m.num_symbols, q0=m.q0, bottom=m.bottom_id)

# nonzero forward weights after each prefix: (state, top of stack)
for t in range(len(w) + 1):
    a = chart.forward_weights(t)[0]
    live = [(m.states[q], m.stack_alphabet[y], float(np.exp(a[q, y])))
            for q, y in zip(*np.nonzero(np.isfinite(a)))]
    print(f"after {''.join(w[:t]) or 'nothing':5s}", live)

# every state is final, so the stringsum counts both surviving guesses;
# acceptance asks for a run that ends with the bottom symbol exposed
print("stringsum", automata.stringsum(m, w))
for s in ("0110", "0111", "1001"):
    print(s, "accepted" if automata.recognize(m, list(s)) else "rejected")
