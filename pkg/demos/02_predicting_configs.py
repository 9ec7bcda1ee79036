"""Choosing an extractor per context without training every option.

The oracle trains every (combo, config) pair and keeps the cheapest config
that reaches the accuracy target. The kNN predictor only sees a third of the
combos, drawn evenly across similarity quartiles, and maps a context's
(mean, std) similarity to a config.
"""

import time

import numpy as np

from ctxswitch.heads import HeadHyperparams
from ctxswitch.predictor import (
    accuracy_table,
    build_predictor,
    enumerate_combinations,
    random_sample,
    sd_sample,
    select_config,
)
from ctxswitch.similarity import context_representation, similarity_matrix

from fixture import build

ds = build()
S = similarity_matrix(ds)
order = [c.id for c in ds.manifest.configs_by_flops()]
flops = {c.id: c.flops_m for c in ds.manifest.configs}
combos = enumerate_combinations(ds.n_classes, 3)

t0 = time.perf_counter()
table = accuracy_table(ds, combos, order, HeadHyperparams())
print(f"exhaustive table: {len(combos)} combos x {len(order)} configs in {time.perf_counter() - t0:.0f}s")
thr = float(np.median([v["val"] for v in table.values()]))
oracle = {c: select_config({k: table[(c, k)]["val"] for k in order}, order, thr)[0] for c in combos}
print(f"accuracy target {thr:.3f}; oracle picks", {k: list(oracle.values()).count(k) for k in order})


def evaluate(sampled):
    pred = build_predictor(ds, sampled, order, thr, S=S, table=table)
    held = [c for c in combos if c not in set(sampled)]
    picks = {c: pred.predict(context_representation(S, c)) for c in held}
    acc = np.mean([table[(c, picks[c])]["test"] for c in held])
    best = np.mean([table[(c, oracle[c])]["test"] for c in held])
    cost = np.mean([flops[picks[c]] for c in held])
    return acc, best, cost


print("\nsampler              acc    oracle  avg MFLOPs")
for seed in range(3):
    sd = sd_sample(combos, S, 0.33, seed)
    for name, sampled in (("similarity-directed", sd), ("random", random_sample(combos, len(sd), seed))):
        acc, best, cost = evaluate(sampled)
        print(f"{name:<19} {acc:.3f}  {best:.3f}  {cost:10.1f}   (seed {seed})")
print(f"\nfixed most expensive config would cost {max(flops.values()):.0f} MFLOPs per frame")
