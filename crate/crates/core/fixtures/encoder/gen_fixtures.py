"""Regenerates the encoder fixtures from a standalone n-gram hasher.

    python3 gen_fixtures.py

Writes golden.json (frozen vectors for 20 strings), semantic_table.jsonl and
semantic_pairs.json (a synthetic lookup table with labelled pairs).
"""
import json
import math
import random

DIM = 64
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK = (1 << 64) - 1

GOLDEN = [
    "abc",
    "neutral",
    "debugging auth module for 3 hours",
    "tests keep failing",
    "submit IETF draft today",
    "IETF submission, zero blockers, execute now",
    "sedentary for hours at the desk",
    "Calm playlist, low energy",
    "  Leading and trailing   spaces  ",
    "MIXED Case Input",
    "arXiv scan: field-level fusion for agent memory",
    "overdue invoice from the supplier",
    "headache and fatigue after a short night",
    "reply to the team before the 3 pm meeting",
    "(parenthesised) words, with punctuation!",
    "café résumé naïve",
    "a",
    "ab",
    "x y",
    "",
]


def fnv1a64(s):
    h = FNV_OFFSET
    for b in s.encode("utf-8"):
        h ^= b
        h = (h * FNV_PRIME) & MASK
    return h


def features(text):
    norm = " ".join(w.lower() for w in text.split())
    out = []
    if len(norm) >= 3:
        out += [norm[i:i + 3] for i in range(len(norm) - 2)]
    elif norm:
        out.append(norm)
    tokens = [t for t in (strip_edges(w) for w in norm.split()) if t]
    out += [tokens[i] + " " + tokens[i + 1] for i in range(len(tokens) - 1)]
    return out


def strip_edges(tok):
    i, j = 0, len(tok)
    while i < j and not tok[i].isalnum():
        i += 1
    while j > i and not tok[j - 1].isalnum():
        j -= 1
    return tok[i:j]


def encode(text, dim=DIM):
    v = [0.0] * dim
    for f in features(text):
        h = fnv1a64(f)
        v[h % dim] += -1.0 if h >> 63 else 1.0
    n = math.sqrt(sum(x * x for x in v))
    return [x / n for x in v] if n > 0 else v


def orthonormal(rng, count, dim):
    basis = []
    while len(basis) < count:
        v = [rng.gauss(0.0, 1.0) for _ in range(dim)]
        for b in basis:
            d = sum(x * y for x, y in zip(v, b))
            v = [x - d * y for x, y in zip(v, b)]
        n = math.sqrt(sum(x * x for x in v))
        if n > 1e-6:
            basis.append([x / n for x in v])
    return basis


TOPICS = [
    ["submit IETF draft today", "IETF submission, zero blockers, execute now"],
    ["debugging auth module for 3 hours", "stuck fixing the login code all afternoon"],
    ["sitting at the desk since morning", "no movement for hours, sedentary day"],
    ["overdue invoice from the supplier", "supplier payment is late"],
    ["could not sleep last night", "poor sleep and woke up tired"],
]


def semantic():
    rng = random.Random(20240501)
    basis = orthonormal(rng, len(TOPICS) * 3, DIM)
    rows = []
    for i, texts in enumerate(TOPICS):
        topic = basis[i]
        for j, text in enumerate(texts):
            private = basis[len(TOPICS) + 2 * i + j]
            v = [t + 0.6 * p for t, p in zip(topic, private)]
            rows.append({"text": text, "vector": v})
    pairs = []
    for i, texts in enumerate(TOPICS):
        pairs.append({"a": texts[0], "b": texts[1], "kind": "paraphrase"})
        other = TOPICS[(i + 1) % len(TOPICS)]
        pairs.append({"a": texts[0], "b": other[1], "kind": "unrelated"})
    return rows, pairs


def main():
    golden = {"dim": DIM, "entries": [{"text": t, "vector": encode(t)} for t in GOLDEN]}
    with open("golden.json", "w") as f:
        json.dump(golden, f, indent=1)
        f.write("\n")
    rows, pairs = semantic()
    with open("semantic_table.jsonl", "w") as f:
        for r in rows:
            f.write(json.dumps(r) + "\n")
    with open("semantic_pairs.json", "w") as f:
        json.dump(pairs, f, indent=1)
        f.write("\n")


if __name__ == "__main__":
    main()
