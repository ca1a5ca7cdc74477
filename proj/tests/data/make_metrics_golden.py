"""Regenerates metrics_golden.json from the fixture corpus.

Run from this directory: python3 make_metrics_golden.py
"""
import json
import math
import re
from collections import Counter
from fractions import Fraction


def tokenize(s):
    return re.findall(r"[?,.!']|[^\s?,.!']+", s.lower())


def load(path):
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def key(r):
    return (r["image_id"], " ".join(tokenize(r["answer"])))


def grams(toks, n):
    return Counter(tuple(toks[i:i + n]) for i in range(len(toks) - n + 1))


def bleu(pairs):
    c = sum(len(h) for h, _ in pairs)
    r = 0
    for h, refs in pairs:
        r += min((abs(len(x) - len(h)), len(x)) for x in refs)[1]
    bp = min(1.0, math.exp(1 - r / c))
    precisions = []
    for n in range(1, 5):
        match = total = 0
        for h, refs in pairs:
            hg = grams(h, n)
            for g, cnt in hg.items():
                match += min(cnt, max(grams(x, n)[g] for x in refs))
            total += sum(hg.values())
        precisions.append(Fraction(match, total) if total else Fraction(0))
    out = []
    for k in range(1, 5):
        ps = precisions[:k]
        out.append(0.0 if any(p == 0 for p in ps) else bp * math.exp(sum(math.log(p) for p in ps) / k))
    return out


def lcs(a, b):
    table = [[0] * (len(b) + 1) for _ in a + [None]]
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            table[i + 1][j + 1] = table[i][j] + 1 if x == y else max(table[i][j + 1], table[i + 1][j])
    return table[-1][-1]


def rouge(pairs, beta=1.2):
    scores = []
    for h, refs in pairs:
        best = 0.0
        for x in refs:
            l = lcs(h, x)
            if l:
                rec, prec = l / len(x), l / len(h)
                best = max(best, (1 + beta ** 2) * rec * prec / (rec + beta ** 2 * prec))
        scores.append(best)
    return sum(scores) / len(scores)


def cider(pairs):
    N = len(pairs)
    per_n = []
    for n in range(1, 5):
        df = Counter()
        for _, refs in pairs:
            df.update(set(g for x in refs for g in grams(x, n)))

        def vec(toks):
            return {g: c * math.log(N / (1 + df[g])) for g, c in grams(toks, n).items()}

        total = 0.0
        for h, refs in pairs:
            hv = vec(h)
            s = 0.0
            for x in refs:
                rv = vec(x)
                nh = math.sqrt(sum(v * v for v in hv.values()))
                nr = math.sqrt(sum(v * v for v in rv.values()))
                if nh and nr:
                    s += sum(v * rv.get(g, 0.0) for g, v in hv.items()) / (nh * nr)
            total += s / len(refs)
        per_n.append(total / N)
    return 10 * sum(per_n) / 4


def main():
    gold, gen = load("metrics_gold.jsonl"), load("metrics_generated.jsonl")
    refs = {}
    for r in gold:
        refs.setdefault(key(r), []).append(tokenize(r["question"]))
    hyps = {}
    for r in gen:
        hyps.setdefault(key(r), tokenize(r["question"]))
    pairs = [(hyps[k], v) for k, v in refs.items()]
    b = bleu(pairs)
    report = {"bleu1": b[0], "bleu2": b[1], "bleu3": b[2], "bleu4": b[3],
              "rouge_l": rouge(pairs), "cider": cider(pairs), "n_pairs": len(pairs)}
    with open("metrics_golden.json", "w") as f:
        json.dump(report, f, indent=2)
        f.write("\n")


if __name__ == "__main__":
    main()
