"""Command-line entry point: ``ctxswitch <subcommand> ...``.

Each subcommand writes its data to files and prints a single summary line.
Failures print one ``error: <Kind>: <message>`` line to stderr and exit with
2 (usage), 3 (data error) or 4 (infeasible request).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import graded_center_distances, load_dataset, synthesize_gaussian_dataset, write_dataset
from .errors import CtxSwitchError, SchemaViolation
from .heads import HeadHyperparams, head_filename, load_heads, save_heads, train_all_class
from .predictor import (
    accuracy_table,
    build_predictor,
    enumerate_combinations,
    load_predictor,
    random_sample,
    save_predictor,
    sd_sample,
    select_config,
)
from .selection import (
    Candidate,
    SelectionResult,
    StorageModel,
    build_candidates,
    greedy_select,
    storage_footprint,
    topk_frequent,
    write_selection,
)
from .similarity import context_representation, similarity_matrix, write_similarity_csv
from .simulator import (
    SimConfig,
    System,
    context_change_count,
    make_cloud_trainer,
    run,
    synthesize_sequence,
    write_frames_csv,
    write_report_csv,
    write_report_json,
)
from .switching import AllClassModel

DEFAULT_SEED = 42


def _default_seed() -> int:
    raw = os.environ.get("CTXSWITCH_SEED")
    if raw is None:
        return DEFAULT_SEED
    try:
        return int(raw)
    except ValueError:
        raise SchemaViolation("CTXSWITCH_SEED", f"not an integer: {raw!r}") from None


def _int_list(text):
    try:
        return tuple(int(x) for x in text.split(",") if x)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _config_list(text):
    out = []
    for part in text.split(","):
        try:
            flops, noise = part.split(":")
            out.append((float(flops), float(noise)))
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected FLOPS:NOISE pairs, got {part!r}") from None
    return out


def _add_common(p, manifest=True):
    if manifest:
        p.add_argument("--manifest", required=True, help="manifest.json or its directory")
    p.add_argument("--out", default=".", help="output directory (default: %(default)s)")
    p.add_argument("--seed", type=int, default=None,
                   help=f"PRNG seed (default: $CTXSWITCH_SEED or {DEFAULT_SEED})")


def _add_heads(p):
    h = HeadHyperparams()
    g = p.add_argument_group("head training")
    g.add_argument("--hidden-dim", type=int, default=h.hidden_dim, help="default: %(default)s")
    g.add_argument("--epochs", type=int, default=h.epochs, help="default: %(default)s")
    g.add_argument("--batch-size", type=int, default=h.batch_size, help="default: %(default)s")
    g.add_argument("--lr", type=float, default=h.learning_rate, help="default: %(default)s")
    g.add_argument("--momentum", type=float, default=h.momentum, help="default: %(default)s")
    g.add_argument("--negative-ratio", type=float, default=h.negative_ratio, help="default: %(default)s")
    g.add_argument("--jobs", type=int, default=1, help="parallel training workers (default: %(default)s)")


def _hyper(args, seed):
    return HeadHyperparams(hidden_dim=args.hidden_dim, epochs=args.epochs, batch_size=args.batch_size,
                           learning_rate=args.lr, momentum=args.momentum,
                           negative_ratio=args.negative_ratio, seed=seed)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctxswitch",
        description="Context-aware micro-classifier orchestration over embedding datasets.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a dataset")
    _add_common(p)

    p = sub.add_parser("synth", help="write a synthetic Gaussian dataset")
    _add_common(p, manifest=False)
    p.add_argument("--classes", type=int, default=10, help="default: %(default)s")
    p.add_argument("--dim", type=int, default=16, help="default: %(default)s")
    p.add_argument("--spread", type=float, default=1.0, help="default: %(default)s")
    p.add_argument("--distance-scale", type=float, default=3.0, help="default: %(default)s")
    p.add_argument("--samples-per-class", type=int, default=100, help="default: %(default)s")
    p.add_argument("--configs", type=_config_list, default=_config_list("50:2.0,100:1.2,200:0.6,400:0"),
                   help="FLOPS:NOISE pairs (default: 50:2.0,100:1.2,200:0.6,400:0)")

    p = sub.add_parser("oracle", help="brute-force best config per combination")
    _add_common(p)
    _add_heads(p)
    p.add_argument("--m", type=int, default=3, help="default: %(default)s")
    p.add_argument("--acc-thr", type=float, default=0.9, help="default: %(default)s")
    p.add_argument("--sample-mode", choices=("all", "sd", "random"), default="all", help="default: %(default)s")
    p.add_argument("--fraction", type=float, default=0.33, help="default: %(default)s")

    p = sub.add_parser("build-knn", help="train the configuration predictor")
    _add_common(p)
    _add_heads(p)
    p.add_argument("--m", type=int, default=3, help="default: %(default)s")
    p.add_argument("--fraction", type=float, default=0.33, help="default: %(default)s")
    p.add_argument("--acc-thr", type=float, default=0.9, help="default: %(default)s")
    p.add_argument("--k-start", type=int, default=3, help="default: %(default)s")
    p.add_argument("--normalize", action="store_true", help="z-score the (mean, std) features")
    p.add_argument("--vote", choices=("plurality", "strict"), default="plurality", help="default: %(default)s")
    p.add_argument("--sim-matrix", action="store_true", help="also write sim_matrix.csv")

    p = sub.add_parser("predict", help="predict the config for a set of classes")
    _add_common(p)
    p.add_argument("--knn", required=True, help="knn.json")
    p.add_argument("--classes", required=True, help="comma-separated class names")

    p = sub.add_parser("select", help="choose micro-classifiers to pre-install")
    _add_common(p)
    _add_heads(p)
    p.add_argument("--knn", required=True, help="knn.json for the context size to select")
    p.add_argument("--mode", choices=("greedy", "topk"), default="greedy", help="default: %(default)s")
    p.add_argument("--n", type=int, default=10, help="number of micro-classifiers (default: %(default)s)")
    p.add_argument("--budget-mb", type=float, default=None, help="storage budget in MB (1e6 bytes)")
    p.add_argument("--acc-thr", type=float, default=0.0, help="stage-2 accuracy target (default: %(default)s)")
    p.add_argument("--criterion", choices=("average", "min"), default="average", help="default: %(default)s")
    p.add_argument("--interval", type=int, default=30, help="context interval for CCR and traces (default: %(default)s)")
    p.add_argument("--store", default=None, help="write the selected heads into this directory")

    p = sub.add_parser("simulate", help="run the trace-driven simulator")
    _add_common(p)
    _add_heads(p)
    p.add_argument("--knn", action="append", default=[], help="knn.json (repeat, one per context size)")
    p.add_argument("--selection", default=None, help="selection.json (local mode)")
    p.add_argument("--store", default=None, help="pre-installed head store directory (local mode)")
    p.add_argument("--mode", choices=("cloud", "local"), default="cloud", help="default: %(default)s")
    p.add_argument("--device", default="pi0", help="default: %(default)s")
    p.add_argument("--rate-mbps", type=float, default=3.0, help="default: %(default)s")
    p.add_argument("--interval", type=int, default=30, help="frames per context (default: %(default)s)")
    p.add_argument("--changes", type=int, default=None,
                   help="context changes (default: ceil(|test| / interval))")
    p.add_argument("--trace-m", type=int, default=3, help="classes per trace context (default: %(default)s)")
    p.add_argument("--theta", type=float, default=0.5, help="default: %(default)s")
    p.add_argument("--m-set", type=_int_list, default=None, help="context sizes (default: from --knn files)")
    p.add_argument("--cache-capacity", type=int, default=None, help="head cache size (default: unbounded)")
    p.add_argument("--frame-bytes", type=int, default=30_000, help="default: %(default)s")
    p.add_argument("--cloud-ms", type=float, default=0.0, help="default: %(default)s")
    p.add_argument("--replace", choices=("recency", "farthest"), default="recency", help="default: %(default)s")
    p.add_argument("--frames", action="store_true", help="also write frames.csv")
    p.add_argument("--baseline", action="append", default=[],
                   help="static comparison row NAME:ACC:AVG_MS (repeatable)")
    return parser


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_ingest(args, seed):
    ds = load_dataset(args.manifest)
    m = ds.manifest
    summary = {
        "dataset": m.dataset_name,
        "classes": m.n_classes,
        "configs": [c.id for c in m.configs],
        "reference_config": m.reference.id,
        "splits": {k: len(v) for k, v in m.splits.items()},
    }
    (_out(args) / "ingest.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    splits = ",".join(f"{k}:{v}" for k, v in summary["splits"].items())
    return f"ok dataset={m.dataset_name} classes={m.n_classes} configs={len(m.configs)} splits={splits}"


def cmd_synth(args, seed):
    D = graded_center_distances(args.classes, seed, scale=args.distance_scale,
                                latent_dim=min(4, args.dim))
    ds = synthesize_gaussian_dataset(args.classes, args.dim, args.spread, D, args.samples_per_class,
                                     args.configs, seed)
    path = write_dataset(ds, args.out)
    return f"ok manifest={path}"


def _combos_for(ds, m, mode, fraction, seed, S):
    combos = enumerate_combinations(ds.n_classes, m)
    if mode == "sd":
        return sd_sample(combos, S, fraction, seed)
    if mode == "random":
        return random_sample(combos, max(1, round(fraction * len(combos))), seed)
    return combos


def cmd_oracle(args, seed):
    ds = load_dataset(args.manifest)
    S = similarity_matrix(ds)
    combos = _combos_for(ds, args.m, args.sample_mode, args.fraction, seed, S)
    order = [c.id for c in ds.manifest.configs_by_flops()]
    table = accuracy_table(ds, combos, order, _hyper(args, seed), splits=("val",), jobs=args.jobs)
    split = "val" if ds.has_split("val") else "test"
    path = _out(args) / "oracle.csv"
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["combo", "mean_sim", "std_sim"] + [f"acc_{c}" for c in order] + ["best_config", "unmet"])
        for combo in combos:
            accs = {c: table[(combo, c)][split] for c in order}
            best, unmet = select_config(accs, order, args.acc_thr)
            rep = context_representation(S, combo)
            w.writerow(["-".join(map(str, combo)), repr(rep.mean_sim), repr(rep.std_sim)]
                       + [repr(accs[c]) for c in order] + [best, int(unmet)])
    return f"ok combos={len(combos)} oracle={path}"


def cmd_build_knn(args, seed):
    ds = load_dataset(args.manifest)
    S = similarity_matrix(ds)
    combos = _combos_for(ds, args.m, "sd", args.fraction, seed, S)
    hyper = _hyper(args, seed)
    table = accuracy_table(ds, combos, None, hyper, splits=("val",), jobs=args.jobs)
    pred = build_predictor(ds, combos, None, args.acc_thr, hyper, S=S, table=table,
                           k_start=args.k_start, normalize=args.normalize, vote=args.vote)
    out = _out(args)
    path = out / "knn.json"
    save_predictor(pred, path)
    if args.sim_matrix:
        write_similarity_csv(S, ds.manifest.classes, out / "sim_matrix.csv")
    return f"ok points={len(pred.points)} knn={path}"


def cmd_predict(args, seed):
    ds = load_dataset(args.manifest)
    pred = load_predictor(args.knn)
    names = [c.strip() for c in args.classes.split(",") if c.strip()]
    combo = tuple(sorted(ds.manifest.class_index(n) for n in names))
    S = similarity_matrix(ds)
    return pred.predict(context_representation(S, combo))


def _training_trace(ds, predictors, system, args, seed):
    """Contexts instantiated when the switching policy replays the train split."""
    n_train = len(ds.manifest.splits["train"])
    trace = synthesize_sequence(range(ds.n_classes), min(3, ds.n_classes - 1),
                                context_change_count(1 / args.interval, n_train), args.interval,
                                ds, seed, split="train")
    sim = SimConfig(mode="cloud", m_set=tuple(sorted(predictors)), context_interval=args.interval,
                    keep_log=False, seed=seed)
    return [c for c, _ in run(sim, trace, system).contexts]


def _system(ds, predictors, hyper, S):
    ref = ds.manifest.reference.id
    allc = AllClassModel.from_manifest(train_all_class(ds, ref, hyper), ds.manifest)
    storage = StorageModel.from_manifest(ds.manifest, hidden_dim=hyper.hidden_dim)
    return System(ds, predictors, allc, S, trainer=make_cloud_trainer(ds, hyper),
                  head_bytes=storage.head_bytes), storage


def cmd_select(args, seed):
    ds = load_dataset(args.manifest)
    pred = load_predictor(args.knn)
    m = pred.m or len(pred.points[0].combo)
    S = similarity_matrix(ds)
    hyper = _hyper(args, seed)
    combos = enumerate_combinations(ds.n_classes, m)
    system, storage = _system(ds, {m: pred}, hyper, S)
    n = args.n
    per_head = max(storage.head_bytes(combos[0], c.id) for c in ds.manifest.configs)
    if args.budget_mb is not None:
        room = args.budget_mb * 1e6 - storage_footprint([], storage, "unattended")
        n = min(n, max(0, int(room // per_head)))
    if args.mode == "greedy":
        cands = build_candidates(ds, combos, pred, 1 / args.interval, hyper, similarity=S)

        def trainer(c):
            return system.trainer(c.combo, c.config_id).val_accuracy

        result = greedy_select(cands, n, ds.n_classes, args.acc_thr, trainer, seed=seed,
                               criterion=args.criterion)
    else:
        trace = _training_trace(ds, {m: pred}, system, args, seed)
        chosen = topk_frequent(trace, n)
        sel = []
        for combo in chosen:
            cid = pred.predict(context_representation(S, combo))
            sel.append(Candidate(combo, cid, ds.manifest.config(cid).flops_m))
        accs = {c.key: system.trainer(c.combo, c.config_id).val_accuracy for c in sel}
        result = SelectionResult(selected=sel, initial=list(sel), accuracies=accs)
    out = _out(args)
    doc = write_selection(result, storage, out / "selection.json", class_names=ds.manifest.classes)
    if args.store:
        for c in result.selected:
            clf = system.trainer(c.combo, c.config_id)
            save_heads(clf, Path(args.store) / "heads" / c.config_id / head_filename(c.combo))
    return f"ok selected={len(result.selected)} storage_bytes={doc['storage_bytes']} selection={out / 'selection.json'}"


def _installed(ds, system, args):
    installed = {}
    if args.store:
        for f in sorted(Path(args.store).glob("heads/*/*.bin")):
            clf = load_heads(f)
            installed[(clf.combo, clf.config_id)] = clf
    if args.selection:
        doc = json.loads(Path(args.selection).read_text(encoding="utf-8"))
        for ctx in doc["contexts"]:
            key = (tuple(ctx["combo"]), ctx["config"])
            if key not in installed:
                installed[key] = system.trainer(*key)
    if not installed:
        raise SchemaViolation("--selection", "local mode needs --selection or --store")
    return installed


def _parse_baseline(text):
    try:
        name, acc, ms = text.split(":")
        return {"name": name, "accuracy": float(acc), "avg_latency_ms": float(ms)}
    except ValueError:
        raise SchemaViolation("--baseline", f"expected NAME:ACC:AVG_MS, got {text!r}") from None


def cmd_simulate(args, seed):
    ds = load_dataset(args.manifest)
    if not args.knn:
        raise SchemaViolation("--knn", "at least one knn.json is required")
    predictors = {}
    for path in args.knn:
        p = load_predictor(path)
        predictors[p.m or len(p.points[0].combo)] = p
    m_set = args.m_set or tuple(sorted(predictors))
    S = similarity_matrix(ds)
    hyper = _hyper(args, seed)
    system, _ = _system(ds, predictors, hyper, S)
    if args.mode == "local":
        system.installed = _installed(ds, system, args)
    n_test = len(ds.manifest.splits["test"])
    changes = args.changes if args.changes is not None else context_change_count(1 / args.interval, n_test)
    trace = synthesize_sequence(range(ds.n_classes), args.trace_m, changes, args.interval, ds, seed)
    sim = SimConfig(mode=args.mode, device=args.device, data_rate_mbps=args.rate_mbps,
                    context_interval=args.interval, theta=args.theta, m_set=m_set,
                    cache_capacity=args.cache_capacity, frame_bytes=args.frame_bytes,
                    cloud_ms=args.cloud_ms, replace=args.replace, keep_log=args.frames, seed=seed)
    report = run(sim, trace, system)
    report.baselines = [_parse_baseline(b) for b in args.baseline]
    out = _out(args)
    write_report_json(report, out / "report.json")
    write_report_csv(report, out / "report.csv")
    if args.frames:
        write_frames_csv(report, out / "frames.csv")
    return (f"ok acc={report.accuracy:.4f} avg_ms={report.avg_latency_ms:.3f} "
            f"speedup={report.speedup_vs_allclass:.3f} triggers={report.trigger_count} "
            f"switches={report.switch_count} report={out / 'report.json'}")


COMMANDS = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "oracle": cmd_oracle,
    "build-knn": cmd_build_knn,
    "predict": cmd_predict,
    "select": cmd_select,
    "simulate": cmd_simulate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        seed = args.seed if args.seed is not None else _default_seed()
        np.seterr(over="ignore", under="ignore")
        line = COMMANDS[args.command](args, seed)
    except CtxSwitchError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    print(line)
    return 0


if __name__ == "__main__":
    sys.exit(main())
