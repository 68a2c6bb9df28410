"""
Reducing a context-free language to the hardest one
===================================================

A grammar in Greibach normal form yields a homomorphism h with
w in L(G) exactly when h(w) is in the hardest context-free language.
"""

from nsrnn import automata, grammar

g = grammar.parse_grammar("S -> a B\nB -> a B B\nB -> b\n")
h = automata.hardest_cfl_hom(g)
for sym in g.terminals:
    print(f"h({sym}) = {h([sym])}")

bg = grammar.prepare(g, boolean=True)
for w in ("ab", "aabb", "aab", "abb"):
    print(w, grammar.recognizes(bg, list(w)), automata.in_l0(h(list(w))))
