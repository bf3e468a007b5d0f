# Regenerates tests/data/rouge_pairs.inc. Exact rational ROUGE from a
# from-scratch implementation, cross-checked against the rouge_score package
# when it is importable.
from collections import Counter
from fractions import Fraction
import sys

PAIRS = [
    ("the cat sat on the mat", "the cat sat on the mat"),
    ("the cat sat on the mat", "a dog ran in the park"),
    ("the cat", "the cat sat"),
    ("the the the the", "the cat the"),
    ("", "some reference text"),
    ("word", "word"),
    ("word", "other"),
    ("a b c d e f", "f e d c b a"),
    ("a b a b a b", "a b a b"),
    ("The Cat SAT", "the cat sat down"),
    ("police killed the gunman", "police kill the gunman"),
    ("the gunman kill police", "police killed the gunman"),
    ("w1 w2 w3 w4 w5", "w1 w2 w6 w7 w8\nw9 w3 w4"),
    ("w1 w2 w6 w7 w8\nw1 w3 w8 w9 w5", "w1 w2 w3 w4 w5"),
    ("a b c\nd e f", "a b c\nd e f"),
    ("x y z\na b", "a b\nx y z"),
    ("one two three four five six seven eight", "two four six eight"),
    ("red green blue red green", "green red blue green red"),
    ("a a a b b", "a b a b a b"),
    ("summary of the document\nit is short", "the document is short\na summary"),
]

def toks(s):
    return s.lower().split()

def sents(s):
    return [toks(l) for l in s.split("\n") if toks(l)]

def score(m, c, r):
    p = Fraction(m, c) if c else Fraction(0)
    rr = Fraction(m, r) if r else Fraction(0)
    f = 2 * p * rr / (p + rr) if p + rr else Fraction(0)
    return m, c, r, p, rr, f

def ngrams(t, n):
    return Counter(tuple(t[i:i + n]) for i in range(len(t) - n + 1))

def rouge_n(c, r, n):
    cc, rc = ngrams(c, n), ngrams(r, n)
    m = sum(min(v, rc[g]) for g, v in cc.items())
    return score(m, max(len(c) - n + 1, 0), max(len(r) - n + 1, 0))

def lcs_len(a, b):
    t = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            t[i][j] = t[i - 1][j - 1] + 1 if a[i - 1] == b[j - 1] else max(t[i - 1][j], t[i][j - 1])
    return t

def lcs_positions(ref, cand):
    t = lcs_len(ref, cand)
    i, j, out = len(ref), len(cand), []
    while i and j:
        if ref[i - 1] == cand[j - 1]:
            out.append(i - 1); i -= 1; j -= 1
        elif t[i - 1][j] >= t[i][j - 1]:
            i -= 1
        else:
            j -= 1
    return out

def rouge_lsum(cs, rs):
    cl = Counter(w for s in cs for w in s)
    rl = Counter(w for s in rs for w in s)
    ct, rt = sum(cl.values()), sum(rl.values())
    hits = 0
    for r in rs:
        u = set()
        for c in cs:
            u |= set(lcs_positions(r, c))
        for p in sorted(u):
            w = r[p]
            if cl[w] > 0 and rl[w] > 0:
                hits += 1; cl[w] -= 1; rl[w] -= 1
    return score(hits, ct, rt)

def all_scores(cand, ref):
    c, r = toks(cand), toks(ref)
    return [rouge_n(c, r, 1), rouge_n(c, r, 2), score(lcs_len(c, r)[len(c)][len(r)], len(c), len(r)),
            rouge_lsum(sents(cand), sents(ref))]

def cross_check():
    try:
        from rouge_score import rouge_scorer
    except ImportError:
        return
    sc = rouge_scorer.RougeScorer(["rouge1", "rouge2", "rougeL", "rougeLsum"], use_stemmer=False)
    for cand, ref in PAIRS:
        ext = sc.score(ref, cand)
        for name, mine in zip(["rouge1", "rouge2", "rougeL", "rougeLsum"], all_scores(cand, ref)):
            if abs(float(mine[5]) - ext[name].fmeasure) > 1e-12:
                sys.exit(f"mismatch {name} on {cand!r} / {ref!r}: {mine[5]} vs {ext[name].fmeasure}")

def cxx(s):
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n") + '"'

def main():
    cross_check()
    print("// generated by tests/oracle/rouge_fixture.py; {matches, cand, ref} per metric")
    for cand, ref in PAIRS:
        parts = ", ".join("{%d, %d, %d}" % s[:3] for s in all_scores(cand, ref))
        print(f"{{{cxx(cand)}, {cxx(ref)}, {{{parts}}}}},")

main()
