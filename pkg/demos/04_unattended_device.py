"""A device with no cloud link.

Only a handful of micro-classifiers fit in storage. The greedy selector
first picks a set covering every class with the lowest expected FLOPs, then
swaps in more accurate heads until the average meets the target. At run
time the device falls back to the installed context that overlaps most
with the one it wanted.
"""

from ctxswitch.heads import HeadHyperparams, train_all_class
from ctxswitch.predictor import build_predictor, enumerate_combinations, sd_sample
from ctxswitch.selection import StorageModel, build_candidates, greedy_select, storage_footprint
from ctxswitch.similarity import similarity_matrix
from ctxswitch.simulator import SimConfig, System, context_change_count, make_cloud_trainer, run, synthesize_sequence
from ctxswitch.switching import AllClassModel

from fixture import build

ds = build()
S = similarity_matrix(ds)
hyper = HeadHyperparams(epochs=30)
combos = enumerate_combinations(ds.n_classes, 3)
pred = build_predictor(ds, sd_sample(combos, S, 0.33, 42), acc_thr=0.85, hyper=hyper, S=S)
trainer = make_cloud_trainer(ds, hyper)
storage = StorageModel.from_manifest(ds.manifest)

cands = build_candidates(ds, combos, pred, 1 / 30, hyper, similarity=S)
result = greedy_select(cands, 6, ds.n_classes, 0.9, lambda c: trainer(c.combo, c.config_id).val_accuracy, seed=42)
print(f"initial cover avg expected MFLOPs: {sum(c.flops for c in result.initial) / len(result.initial):.1f}")
print(f"after selection: {result.avg_flops:.1f} MFLOPs, avg val accuracy {result.avg_accuracy:.3f}")
for step in result.audit:
    print(f"  stage {step['stage']}: {step['removed']['combo']} -> {step['added']['combo']}")
print(f"storage: {storage_footprint(result.selected, storage, 'unattended') / 1e6:.2f} MB")

installed = {c.key: trainer(c.combo, c.config_id) for c in result.selected}
allc = AllClassModel.from_manifest(train_all_class(ds, ds.manifest.reference.id, hyper), ds.manifest)
system = System(ds, {3: pred}, allc, S, installed=installed)
n = context_change_count(1 / 30, len(ds.manifest.splits["test"]))
trace = synthesize_sequence(range(ds.n_classes), 3, n, 30, ds, 7)
rep = run(SimConfig(mode="local", m_set=(3,), keep_log=False), trace, system)
print(f"\nunattended run: accuracy {rep.accuracy:.3f}, {rep.avg_latency_ms:.0f} ms/frame,"
      f" speedup {rep.speedup_vs_allclass:.2f}x over running the all-class model on every frame")
