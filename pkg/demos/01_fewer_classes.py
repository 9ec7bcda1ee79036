"""Why small classifiers pay off.

Three properties of the synthetic fixture:

1. A head that only has to separate three classes is far more accurate than
   one over all ten, at the same extractor cost.
2. Making the extractor cheaper (noisier embeddings) lowers both, but the
   gap stays, so a cheap three-class head can beat an expensive ten-class one.
3. How hard a context is depends on which classes it holds: the mean cosine
   similarity of the class means tracks the accuracy loss.
"""

import numpy as np

from ctxswitch.heads import HeadHyperparams, evaluate_accuracy, train_all_class, train_heads
from ctxswitch.predictor import enumerate_combinations
from ctxswitch.similarity import context_representation, similarity_matrix

from fixture import build

ds = build()
hyper = HeadHyperparams(epochs=30)
rng = np.random.default_rng(0)
combos = enumerate_combinations(ds.n_classes, 3)
sample = [combos[i] for i in rng.choice(len(combos), size=20, replace=False)]

print("config  MFLOPs  all-class acc  mean 3-class acc")
micro_acc = {}
for cfg in ds.manifest.configs_by_flops():
    full = evaluate_accuracy(train_all_class(ds, cfg.id, hyper), ds, "test")
    accs = [evaluate_accuracy(train_heads(ds, cfg.id, c, hyper), ds, "test") for c in sample]
    micro_acc[cfg.id] = accs
    print(f"{cfg.id:>6}  {cfg.flops_m:6.0f}  {full:13.3f}  {np.mean(accs):16.3f}")

S = similarity_matrix(ds)
mid = ds.manifest.configs_by_flops()[1].id
means = [context_representation(S, c).mean_sim for c in sample]
r = np.corrcoef(means, micro_acc[mid])[0, 1]
print(f"\nPearson r(mean similarity, accuracy) at {mid}: {r:.2f}")
print("Contexts of mutually similar classes are the hard ones; they need the expensive extractor.")
