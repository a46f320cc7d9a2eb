"""Regenerate toy_pairs.csv: 64 phrase pairs over four separable topic clusters.

Scores: 1.0 when the target shares a word with the anchor inside the same
cluster, 0.75 for the same cluster otherwise, 0.25 for the partner cluster
(0<->1, 2<->3) and 0.0 for the remaining clusters.
"""

import csv
import random
from pathlib import Path

CLUSTERS = [
    ("A01B", ["plough", "soil", "tillage", "harrow", "furrow", "seedbed"]),
    ("B60K", ["engine", "wheel", "axle", "transmission", "clutch", "gearbox"]),
    ("C07D", ["compound", "ring", "heterocyclic", "synthesis", "reagent", "catalyst"]),
    ("H04L", ["packet", "protocol", "router", "network", "signal", "channel"]),
]
PARTNER = {0: 1, 1: 0, 2: 3, 3: 2}


def main(path=Path(__file__).with_name("toy_pairs.csv")):
    rnd = random.Random(7)
    rows = []
    for c, (code, words) in enumerate(CLUSTERS):
        far = [k for k in range(4) if k not in (c, PARTNER[c])]
        plan = [("share", 1.0)] * 4 + [("same", 0.75)] * 4 + [("partner", 0.25)] * 4 + [("far", 0.0)] * 4
        for kind, score in plan:
            a = rnd.sample(words, 2)
            if kind == "share":
                t = [a[rnd.randrange(2)], rnd.choice([w for w in words if w not in a])]
                rnd.shuffle(t)
            elif kind == "same":
                t = rnd.sample([w for w in words if w not in a], 2)
            else:
                k = PARTNER[c] if kind == "partner" else rnd.choice(far)
                t = rnd.sample(CLUSTERS[k][1], 2)
            rows.append((f"p{len(rows):02d}", " ".join(a), " ".join(t), code, score))
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id", "anchor", "target", "context", "score"])
        w.writerows(rows)


if __name__ == "__main__":
    main()
