"""Replaying a camera stream through the edge-cloud loop.

A random walk over three-class contexts changes one class every 30 frames.
The device runs the current micro-classifier; its change head asks the
cloud's all-class model for help, which picks the next context size and
config and ships new heads when they are not already cached.
"""

import numpy as np

from ctxswitch.heads import HeadHyperparams, train_all_class
from ctxswitch.predictor import build_predictor, enumerate_combinations, sd_sample
from ctxswitch.similarity import similarity_matrix
from ctxswitch.simulator import SimConfig, System, context_change_count, make_cloud_trainer, run, synthesize_sequence
from ctxswitch.switching import AllClassModel

from fixture import build

ds = build()
S = similarity_matrix(ds)
hyper = HeadHyperparams(epochs=30)
target = 0.85
preds = {
    m: build_predictor(ds, sd_sample(enumerate_combinations(ds.n_classes, m), S, 0.33, 42),
                       acc_thr=target, hyper=hyper, S=S)
    for m in (2, 3, 4)
}
allc = AllClassModel.from_manifest(train_all_class(ds, ds.manifest.reference.id, hyper), ds.manifest)
system = System(ds, preds, allc, S, trainer=make_cloud_trainer(ds, hyper))

n = context_change_count(1 / 30, len(ds.manifest.splits["test"]))
traces = [synthesize_sequence(range(ds.n_classes), 3, n, 30, ds, seed) for seed in range(5)]
print(f"all-class model: {allc.flops_m:.0f} MFLOPs, {allc.device_latency_ms['pi0']:.0f} ms per frame on pi0")
print("\npolicy      acc    MFLOPs  avg ms  speedup  triggers")
for m_set in [(2, 3, 4), (2,), (3,), (4,)]:
    reps = [run(SimConfig(m_set=m_set, keep_log=False), tr, system) for tr in traces]
    row = [np.mean([getattr(r, k) for r in reps]) for k in
           ("accuracy", "avg_device_flops_m", "avg_latency_ms", "speedup_vs_allclass", "trigger_count")]
    print(f"{str(m_set):<10} {row[0]:.3f}  {row[1]:6.1f}  {row[2]:6.1f}  {row[3]:6.2f}x  {row[4]:8.1f}")

print("\nhead cache capacity vs hit ratio (hybrid policy, first trace)")
for cap in (1, 2, 4, 8, None):
    rep = run(SimConfig(cache_capacity=cap, keep_log=False), traces[0], system)
    total = rep.cache_hits + rep.cache_misses
    print(f"  capacity {str(cap):>4}: {rep.cache_hits}/{total} hits,"
          f" {rep.breakdown_ms['head_download']:.1f} ms/frame downloading")
