#!/usr/bin/env python3
"""Deterministic generator for the bundled toy corpus (data/toy.props).

Every non-rare word occurs >= 10 times across training instances (one
instance per predicate, so words in multi-predicate sentences count once
per predicate). Three designated hapax nouns exercise rare-word handling.
"""
import collections, sys

NOUNS = ["cat", "dog", "farmer", "trader", "girl", "boy", "horse", "banker"]
VERBS = [("chased", "chase"), ("fed", "feed")]
TMP = ["yesterday", "today"]
LOC = ["barn", "market"]
RARE = ["zorilla", "quokka", "axolotl"]

sentences = []  # (tokens, [(pred_idx, lemma, [(start, end, role)])])

def cap(tokens):
    out = list(tokens)
    out[0] = out[0].capitalize()
    return out

def add(tokens, preds):
    sentences.append((cap(tokens), preds))

def cyc(pool, i):
    return pool[i % len(pool)]

# Table 2 sentence: three predicates.
add("the trade figures turn out well , and all those recently unloaded bonds spurt in price .".split(),
    [(3, "turn", [(0, 2, "A1"), (3, 4, "V"), (5, 5, "A2")]),
     (11, "unload", [(10, 10, "AM-TMP"), (11, 11, "V"), (12, 12, "A1")]),
     (13, "spurt", [(8, 12, "A1"), (13, 13, "V"), (14, 15, "AM-ADV")])])

# P1 x6: the A quickly V-ed the B TMP .
for i in range(6):
    a, b = cyc(NOUNS, i), cyc(NOUNS, i + 3)
    v, lem = cyc(VERBS, i)
    t = cyc(TMP, i)
    add(["the", a, "quickly", v, "the", b, t, "."],
        [(3, lem, [(0, 1, "A0"), (2, 2, "AM-MNR"), (3, 3, "V"), (4, 5, "A1"), (6, 6, "AM-TMP")])])

# P2 x5: the A V1 the B and the C V2 the D .
for i in range(5):
    a, b, c, d = cyc(NOUNS, 2 * i), cyc(NOUNS, 2 * i + 1), cyc(NOUNS, 2 * i + 4), cyc(NOUNS, 2 * i + 5)
    v1, l1 = cyc(VERBS, i)
    v2, l2 = cyc(VERBS, i + 1)
    add(["the", a, v1, "the", b, "and", "the", c, v2, "the", d, "."],
        [(2, l1, [(0, 1, "A0"), (2, 2, "V"), (3, 4, "A1")]),
         (8, l2, [(6, 7, "A0"), (8, 8, "V"), (9, 10, "A1")])])

# P3 x6: TMP the A V-ed the B in the L .
for i in range(6):
    a, b = cyc(NOUNS, i + 1), cyc(NOUNS, i + 6)
    v, lem = cyc(VERBS, i + 1)
    add([cyc(TMP, i), "the", a, v, "the", b, "in", "the", cyc(LOC, i), "."],
        [(3, lem, [(0, 0, "AM-TMP"), (1, 2, "A0"), (3, 3, "V"), (4, 5, "A1"), (6, 8, "AM-LOC")])])

# P4 x10: the A did not chase the B .   (three of the B slots are hapaxes)
for i in range(10):
    a = cyc(NOUNS, i)
    b = RARE[i - 7] if i >= 7 else cyc(NOUNS, i + 2)
    add(["the", a, "did", "not", "chase", "the", b, "."],
        [(4, "chase", [(0, 1, "A0"), (2, 2, "AM-MOD"), (3, 3, "AM-NEG"), (4, 4, "V"), (5, 6, "A1")])])

# P5 x10: the A gave the B to the C TMP .
for i in range(10):
    a, b, c = cyc(NOUNS, i), cyc(NOUNS, i + 2), cyc(NOUNS, i + 5)
    add(["the", a, "gave", "the", b, "to", "the", c, cyc(TMP, i), "."],
        [(2, "give", [(0, 1, "A0"), (2, 2, "V"), (3, 4, "A1"), (5, 7, "A2"), (8, 8, "AM-TMP")])])

# P6 x10: the A moved the bonds from the L1 to the L2 .
for i in range(10):
    a = cyc(NOUNS, i + 4)
    add(["the", a, "moved", "the", "bonds", "from", "the", cyc(LOC, i), "to", "the", cyc(LOC, i + 1), "."],
        [(2, "move", [(0, 1, "A0"), (2, 2, "V"), (3, 4, "A1"), (5, 7, "A3"), (8, 10, "A4")])])

# P7 x4: three clauses, three predicates.
for i in range(4):
    a, b, c, d, e, f = (cyc(NOUNS, i), cyc(NOUNS, i + 1), cyc(NOUNS, i + 2),
                        cyc(NOUNS, i + 3), cyc(NOUNS, i + 4), cyc(NOUNS, i + 5))
    v1, l1 = cyc(VERBS, i)
    v2, l2 = cyc(VERBS, i + 1)
    v3, l3 = cyc(VERBS, i)
    add(["the", a, v1, "the", b, ",", "the", c, v2, "the", d, ",", "and",
         "the", e, v3, "the", f, "."],
        [(2, l1, [(0, 1, "A0"), (2, 2, "V"), (3, 4, "A1")]),
         (8, l2, [(6, 7, "A0"), (8, 8, "V"), (9, 10, "A1")]),
         (15, l3, [(13, 14, "A0"), (15, 15, "V"), (16, 17, "A1")])])

# P9 x7: the trade figures spurt in price TMP .
for i in range(7):
    add(["the", "trade", "figures", "spurt", "in", "price", cyc(TMP, i), "."],
        [(3, "spurt", [(0, 2, "A1"), (3, 3, "V"), (4, 5, "AM-ADV"), (6, 6, "AM-TMP")])])

# P10 x7: the trade figures turn out well TMP .
for i in range(7):
    add(["the", "trade", "figures", "turn", "out", "well", cyc(TMP, i + 1), "."],
        [(3, "turn", [(0, 2, "A1"), (3, 4, "V"), (5, 5, "A2"), (6, 6, "AM-TMP")])])

# P11 x7: the A recently unloaded all those bonds .
for i in range(7):
    a = cyc(NOUNS, i + 3)
    add(["the", a, "recently", "unloaded", "all", "those", "bonds", "."],
        [(3, "unload", [(0, 1, "A0"), (2, 2, "AM-TMP"), (3, 3, "V"), (4, 6, "A1")])])

# P8 x2: long three-clause sentences for the upper length bins.
for i in range(2):
    a, b, c, d, e, f = (cyc(NOUNS, i + 2), cyc(NOUNS, i + 6), cyc(NOUNS, i + 3),
                        "bonds", cyc(NOUNS, i + 4), cyc(NOUNS, i))
    v1, l1 = cyc(VERBS, i + 1)
    v3, l3 = cyc(VERBS, i)
    add([cyc(TMP, i), "the", a, "quickly", v1, "the", b, "in", "the", cyc(LOC, i),
         ",", "the", c, "gave", "the", d, "to", "the", e, ",", "and",
         "the", f, v3, "the", cyc(NOUNS, i + 7), "."],
        [(4, l1, [(0, 0, "AM-TMP"), (1, 2, "A0"), (3, 3, "AM-MNR"), (4, 4, "V"),
                  (5, 6, "A1"), (7, 9, "AM-LOC")]),
         (13, "give", [(11, 12, "A0"), (13, 13, "V"), (14, 15, "A1"), (16, 18, "A2")]),
         (23, l3, [(21, 22, "A0"), (23, 23, "V"), (24, 25, "A1")])])

# P0 x2: predicate-free sentences.
add("the cat near the barn .".split(), [])
add("the bonds from the market .".split(), [])

# ── render ───────────────────────────────────────────────────────────
def render(tokens, preds):
    lines = []
    cells = []
    for (_, _, spans) in preds:
        col = []
        ordered = sorted(spans)
        nxt = 0
        for t in range(len(tokens)):
            cell = ""
            if nxt < len(ordered) and ordered[nxt][0] == t:
                cell += "(" + ordered[nxt][2]
            cell += "*"
            if nxt < len(ordered) and ordered[nxt][1] == t:
                cell += ")"
                nxt += 1
            col.append(cell)
        cells.append(col)
    lemma_at = {p[0]: p[1] for p in preds}
    for t, tok in enumerate(tokens):
        row = [tok, lemma_at.get(t, "-")] + [col[t] for col in cells]
        lines.append(" ".join(row))
    return "\n".join(lines) + "\n\n"

out = "".join(render(t, p) for t, p in sentences)
open(sys.argv[1], "w").write(out)

# ── sanity stats ─────────────────────────────────────────────────────
n_preds = sum(len(p) for _, p in sentences)
labels = sorted({r for _, ps in sentences for (_, _, sp) in ps for (_, _, r) in sp if r != "V"})
freq = collections.Counter()
for tokens, preds in sentences:
    for _ in preds:
        for tok in tokens:
            freq[tok.lower()] += 1
low = {w: c for w, c in freq.items() if c < 10 and w not in RARE}
print(f"sentences={len(sentences)} predicates={n_preds} labels={len(labels)}: {labels}")
print(f"vocab={len(freq)} words below threshold 10 (non-rare): {low}")
for r in RARE:
    print(f"rare {r}: {freq[r]} occurrence(s)")
lin_lens = []
for tokens, preds in sentences:
    for (_, _, spans) in preds:
        lin_lens.append(len(tokens) + 2 * len(spans))
print(f"linearized target lengths: min={min(lin_lens)} max={max(lin_lens)}")
print("length bins:", collections.Counter(
    "<=20" if l <= 20 else "21-30" if l <= 30 else "31-40" if l <= 40 else ">40" for l in lin_lens))
assert not low, f"words below frequency threshold: {low}"
assert len(sentences) >= 50 and n_preds >= 80 and len(labels) >= 8
print("OK")
