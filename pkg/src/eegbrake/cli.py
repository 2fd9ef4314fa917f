"""Command-line pipeline.

Every stage reads from and writes to one working directory (``--out``,
defaulting to ``$EEGBRAKE_OUTPUT_DIR`` or ``./eegbrake-out``) and leaves a
``manifest-<stage>.txt`` with the config fingerprint and input/output hashes.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import cluster, evaluate, ic_select, plots, predict, synth
from .ica import ica_from_bytes, ica_to_bytes, scalp_column, sources
from .preprocess import load_epochs, preprocess, save_epochs
from .signal_model import Epoch, load_recording, save_recording
from .spectral import ersp, write_tfmap_csv

log = logging.getLogger("eegbrake")

STAGES = ("synth", "preprocess", "ica", "select", "cluster", "train", "predict", "ablate",
          "report")


class StageError(RuntimeError):
    """A stage could not run; the message names the cause."""


# --------------------------------------------------------------------------
# helpers

def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out: Path, stage: str, cfg: evaluate.EvalConfig, inputs, outputs,
                    extra=None) -> None:
    lines = [f"stage = {stage}", f"config_fingerprint = {cfg.fingerprint()}",
             f"seed = {cfg.synth.seed}"]
    for k, v in sorted((extra or {}).items()):
        lines.append(f"{k} = {v}")
    for p in sorted(inputs, key=lambda p: p.name):
        lines.append(f"input.{p.name} = {_sha(p)}")
    for p in sorted(outputs, key=lambda p: p.name):
        lines.append(f"output.{p.name} = {_sha(p)}")
    (out / f"manifest-{stage}.txt").write_text("\n".join(lines) + "\n")


def _subjects(out: Path, suffix: str, stage: str) -> list[str]:
    names = sorted(p.name[:-len(suffix)] for p in out.glob(f"sub-*{suffix}"))
    if not names:
        raise StageError(f"no sub-*{suffix} files in {out}; run the '{stage}' stage first")
    return names


def _need(path: Path, stage: str) -> Path:
    if not path.exists():
        raise StageError(f"missing {path.name} in {path.parent}; run the '{stage}' stage first")
    return path


def _analysis(out: Path, sub: str, cfg):
    epochs, names, xy = load_epochs(_need(out / f"{sub}.epochs", "preprocess"))
    decomp = ica_from_bytes(_need(out / f"{sub}.ica", "ica").read_bytes())
    with open(_need(out / f"{sub}_labels.csv", "ica"), newline="") as fh:
        labels = [r["label"] for r in csv.DictReader(fh)]
    a = evaluate.analyze_subject(epochs, xy, cfg, decomposition=decomp, labels=labels)
    return epochs, names, xy, a


def _fmt(x: float) -> str:
    return repr(float(x))


# --------------------------------------------------------------------------
# stages

def cmd_synth(args, cfg, out: Path):
    outputs = []
    for i in range(args.subjects):
        scfg = dataclasses.replace(cfg.synth, seed=cfg.synth.seed + i,
                                   informative=not args.null)
        rec, trace, truth = synth.generate(scfg)
        sub = f"sub-{i + 1:02d}"
        save_recording(rec, trace, out / f"{sub}.nbrk")
        synth.save_truth(truth, out / f"{sub}.truth")
        outputs += [out / f"{sub}.nbrk", out / f"{sub}.truth"]
    _write_manifest(out, "synth", cfg, [], outputs,
                    {"subjects": args.subjects, "informative": not args.null})


def cmd_preprocess(args, cfg, out: Path):
    inputs, outputs = [], []
    for sub in _subjects(out, ".nbrk", "synth"):
        rec, trace = load_recording(out / f"{sub}.nbrk")
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            epochs = preprocess(rec, trace, cfg.preprocess)
        for w in caught:
            log.warning("%s: %s", sub, w.message)
        save_epochs(out / f"{sub}.epochs", epochs, rec.channel_names, rec.electrode_xy)
        inputs.append(out / f"{sub}.nbrk")
        outputs.append(out / f"{sub}.epochs")
    _write_manifest(out, "preprocess", cfg, inputs, outputs)


def cmd_ica(args, cfg, out: Path):
    inputs, outputs = [], []
    for sub in _subjects(out, ".epochs", "preprocess"):
        epochs, names, xy = load_epochs(out / f"{sub}.epochs")
        decomp = evaluate.fit_ica(epochs, cfg.ica)
        labels = evaluate.label_ics(decomp, epochs, xy)
        (out / f"{sub}.ica").write_bytes(ica_to_bytes(decomp))
        with open(out / f"{sub}_labels.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["ic_index", "label"])
            w.writerows(enumerate(labels))
        log.info("%s: %d components, converged=%s after %d epochs", sub, decomp.n_components,
                 decomp.converged, decomp.iterations)
        inputs.append(out / f"{sub}.epochs")
        outputs += [out / f"{sub}.ica", out / f"{sub}_labels.csv"]
    _write_manifest(out, "ica", cfg, inputs, outputs)


def cmd_select(args, cfg, out: Path):
    horizons = tuple(int(h) for h in args.horizon.split(","))
    for h in horizons:
        if h not in ic_select.HORIZONS_MS:
            raise StageError(f"horizon {h} ms is not one of {ic_select.HORIZONS_MS}")
    cfg = dataclasses.replace(cfg, select=dataclasses.replace(cfg.select, horizons=horizons))
    if cfg.select.selection_horizon not in horizons:
        cfg = dataclasses.replace(cfg, select=dataclasses.replace(
            cfg.select, selection_horizon=horizons[0]))
    subs = _subjects(out, ".ica", "ica")
    sweeps, outputs, inputs, all_nu = {}, [], [], []
    lines = ["[select]", f"horizons_ms = {', '.join(map(str, horizons))}",
             f"selection_horizon_ms = {cfg.select.selection_horizon}"]
    for sub in subs:
        epochs, _, _, a = _analysis(out, sub, cfg)
        sweeps[sub] = evaluate.horizon_sweep(a)
        for h, scores in a.scores.items():
            p = out / f"{sub}_nu_{h}.csv"
            ic_select.write_scores_csv(p, scores)
            outputs.append(p)
        sel = a.scores[cfg.select.selection_horizon]
        all_nu += [float(s.nu) for s in sel if s.label not in ic_select.ARTIFACT_LABELS]
        best = max(horizons, key=lambda h: (sweeps[sub][h], -h))
        lines += ["", f"[{sub}]", f"argmax_horizon_ms = {best}",
                  f"selected_ics = {' '.join(map(str, a.selected)) or 'none'}",
                  f"fallback_selection = {a.fallback}"]
        lines += [f"mean_nu_{h} = {_fmt(sweeps[sub][h])}" for h in horizons]
        everyone = evaluate.horizon_sweep(a, None)
        lines += [f"mean_nu_all_ics_{h} = {_fmt(everyone[h])}" for h in horizons]
        inputs += [out / f"{sub}.epochs", out / f"{sub}.ica"]
    mean = {h: float(np.mean([sweeps[s][h] for s in subs])) for h in horizons}
    best = max(horizons, key=lambda h: (mean[h], -h))
    lines[3:3] = [f"argmax_horizon_ms = {best}"] + \
        [f"mean_nu_{h} = {_fmt(mean[h])}" for h in horizons]
    (out / "select_report.txt").write_text("\n".join(lines) + "\n")
    with open(out / "select_sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "horizon_ms", "mean_nu"])
        for sub in subs:
            for h in horizons:
                w.writerow([sub, h, _fmt(sweeps[sub][h])])
    plots.plot_horizon_sweep(sweeps, out / "horizon_sweep.png")
    cut = ic_select.nearest_rank_percentile(all_nu, 100 * (1 - cfg.select.top_fraction))
    plots.plot_nu_histogram(all_nu, out / "nu_histogram.png", threshold=cut)
    outputs += [out / "select_report.txt", out / "select_sweep.csv", out / "horizon_sweep.png",
                out / "nu_histogram.png"]
    _write_manifest(out, "select", cfg, inputs, outputs)
    print(f"argmax_horizon_ms = {best}")


def cmd_cluster(args, cfg, out: Path):
    subs = _subjects(out, ".ica", "ica")
    vectors, tags, maps, inputs = [], [], [], []
    for sub in subs:
        epochs, _, xy, a = _analysis(out, sub, cfg)
        ranked = sorted((s for s in a.scores[cfg.select.selection_horizon]
                         if s.label not in ic_select.ARTIFACT_LABELS),
                        key=lambda s: (-s.nu, s.ic_index))
        picks = sorted(set(a.selected) | {s.ic_index for s in ranked[:args.per_subject]})
        for ic in picks:
            m = cluster.render_scalp_map(scalp_column(a.decomposition, ic), xy, (sub, ic))
            maps.append(m)
            vectors.append(m.vector())
            tags.append((sub, ic))
        inputs += [out / f"{sub}.ica"]
    if len(vectors) < 3:
        raise StageError(f"only {len(vectors)} scalp maps; clustering needs at least 3")
    aligned = np.asarray(cluster.align_polarity(vectors))
    scores, _, explained, _ = cluster.pca_reduce(aligned, 0.95)
    dendro = cluster.upgma(cluster.cosine_distance_matrix(scores))
    hi = min(15, len(vectors))
    wss = cluster.wss_elbow(scores, dendro, (1, hi))
    k = min(args.k, len(vectors))
    assign = cluster.cut_tree(dendro, k)
    cluster.write_merge_table(out / "merge_table.tsv", dendro)
    with open(out / "wss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "wss"])
        w.writerows((kk, _fmt(v)) for kk, v in wss.items())
    with open(out / "clusters.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "ic_index", "cluster"])
        w.writerows((s, ic, int(c)) for (s, ic), c in zip(tags, assign))
    centroid_maps = []
    for c in range(k):
        g = np.full(maps[0].grid.shape, np.nan)
        g[maps[0].mask] = aligned[assign == c].mean(axis=0)
        centroid_maps.append(cluster.ScalpMap(g, maps[0].mask, ("centroid", c)))
        cluster.write_scalp_csv(out / f"cluster_{c}_centroid.csv", centroid_maps[-1])
    plots.plot_wss(wss, out / "wss.png")
    plots.plot_scalp_maps(centroid_maps, out / "cluster_centroids.png",
                          [f"cluster {c} (n={int(np.sum(assign == c))})" for c in range(k)])
    outputs = [out / n for n in ("merge_table.tsv", "wss.csv", "clusters.csv", "wss.png",
                                 "cluster_centroids.png")]
    outputs += [out / f"cluster_{c}_centroid.csv" for c in range(k)]
    _write_manifest(out, "cluster", cfg, inputs, outputs,
                    {"maps": len(vectors), "pca_components": scores.shape[1],
                     "pca_explained": _fmt(explained)})


def cmd_train(args, cfg, out: Path):
    inputs, outputs = [], []
    for sub in _subjects(out, ".ica", "ica"):
        epochs, _, _, a = _analysis(out, sub, cfg)
        report, model, scaling, _ = evaluate.run_arm(args.arm, epochs, a, cfg, sub)
        meta = {"subject": sub, "arm": args.arm, "horizon_ms": cfg.ablation.horizon_ms,
                "selected_ics": " ".join(map(str, a.selected)),
                "config_fingerprint": cfg.fingerprint(),
                "train_fingerprint": cfg.train.fingerprint(),
                "final_train_loss": _fmt(model.loss_curve[-1]),
                "test_rmse": _fmt(report.rmse)}
        bundle = predict.ModelBundle(model, scaling, meta,
                                     a.decomposition if args.arm.startswith("ic") else None)
        p = out / f"{sub}_{args.arm}.model"
        p.write_bytes(predict.bundle_to_bytes(bundle))
        inputs += [out / f"{sub}.epochs", out / f"{sub}.ica"]
        outputs.append(p)
    _write_manifest(out, "train", cfg, inputs, outputs, {"arm": args.arm})


def cmd_predict(args, cfg, out: Path):
    inputs, outputs = [], []
    for sub in _subjects(out, ".ica", "ica"):
        mpath = _need(out / f"{sub}_{args.arm}.model", "train")
        bundle = predict.bundle_from_bytes(mpath.read_bytes())
        epochs, _, _, a = _analysis(out, sub, cfg)
        _, test_idx = evaluate.split_trials(len(epochs), cfg.ablation.train_fraction)
        base = args.arm.removesuffix(evaluate.NO_BRAKE)
        feats = evaluate._arm_features(base, epochs, a, cfg,
                                       evaluate.split_trials(len(epochs),
                                                             cfg.ablation.train_fraction)[0])
        h = int(bundle.meta["horizon_ms"])
        include = not args.arm.endswith(evaluate.NO_BRAKE)
        p = out / f"{sub}_{args.arm}_predictions.csv"
        traces = []
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["trial", "time_ms", "measured", "predicted"])
            for j in test_idx:
                tr = predict.rolling_predict(bundle.model, feats[j], epochs[j].brake, h,
                                             bundle.scaling, include, epochs[j].fs)
                traces.append(tr)
                for t, y, g in zip(tr.timestamps_ms, tr.measured, tr.predicted):
                    w.writerow([j, _fmt(t), _fmt(y), _fmt(g)])
        fig = out / f"{sub}_{args.arm}_prediction.png"
        plots.plot_prediction([traces[0]], fig, [args.arm])
        inputs.append(mpath)
        outputs += [p, fig]
    _write_manifest(out, "predict", cfg, inputs, outputs, {"arm": args.arm})


def cmd_ablate(args, cfg, out: Path):
    arms = tuple(args.arms.split(",")) if args.arms else cfg.ablation.arms
    rows, inputs = [], []
    for sub in _subjects(out, ".ica", "ica"):
        epochs, _, _, a = _analysis(out, sub, cfg)
        rows += evaluate.run_ablation(epochs, a, cfg, sub, arms)
        inputs += [out / f"{sub}.epochs", out / f"{sub}.ica"]
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "feature_source", "horizon_ms", "rmse", "r2", "rmse_clamped",
                    "n_train", "n_test", *[f"rmse_{p}" for p in evaluate.PHASES]])
        for r in rows:
            ph = dict(r.phase_rmse)
            w.writerow(r.row() + [_fmt(r.rmse_clamped), r.n_train, r.n_test] +
                       [_fmt(ph[p]) if p in ph else "" for p in evaluate.PHASES])
    _write_manifest(out, "ablate", cfg, inputs, [out / "ablation.csv"],
                    {"arms": ",".join(arms)})


def _read_ablation(path: Path):
    reports = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            phases = tuple((p, float(r[f"rmse_{p}"])) for p in evaluate.PHASES
                           if r.get(f"rmse_{p}"))
            reports.append(evaluate.EvalReport(
                r["subject"], r["feature_source"], int(r["horizon_ms"]), float(r["rmse"]),
                float(r["rmse_clamped"]), float(r["r2"]), int(r["n_train"]),
                int(r["n_test"]), "", phases))
    return reports


def cmd_report(args, cfg, out: Path):
    abl = _need(out / "ablation.csv", "ablate")
    reports = _read_ablation(abl)
    agg = evaluate.aggregate(reports)
    lines = ["[run]", f"config_fingerprint = {cfg.fingerprint()}",
             f"subjects = {len({r.subject for r in reports})}",
             f"horizon_ms = {cfg.ablation.horizon_ms}"]
    sel = out / "select_report.txt"
    if sel.exists():
        for line in sel.read_text().splitlines():
            if line.startswith("argmax_horizon_ms"):
                lines.append(line)
                break
    for r in agg:
        lines += ["", f"[{r.feature_source}]", f"rmse = {_fmt(r.rmse)}",
                  f"rmse_clamped = {_fmt(r.rmse_clamped)}", f"r2 = {_fmt(r.r2)}"]
        for p in evaluate.PHASES:
            vals = [dict(x.phase_rmse).get(p) for x in reports
                    if x.feature_source == r.feature_source]
            vals = [v for v in vals if v is not None]
            if vals:
                lines.append(f"rmse_{p} = {_fmt(np.mean(vals))}")
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "feature_source", "horizon_ms", "rmse", "r2"])
        for r in list(reports) + agg:
            w.writerow(r.row())
    plots.plot_ablation(reports, out / "ablation.png")
    outputs = [out / "report.txt", out / "report.csv", out / "ablation.png"]
    # time-frequency map of the first subject's first selected component
    subs = sorted(p.name[:-len(".ica")] for p in out.glob("sub-*.ica"))
    if subs:
        epochs, _, _, a = _analysis(out, subs[0], cfg)
        ic = a.selected[0]
        ic_epochs = [Epoch(sources(a.decomposition, ep.eeg)[ic:ic + 1], ep.brake, ep.t0_index,
                           ep.fs) for ep in epochs]
        tf = ersp(ic_epochs, 0, np.arange(2.0, 41.0, 2.0))
        write_tfmap_csv(out / "ersp.csv", tf)
        plots.plot_ersp(tf, out / "ersp.png", f"{subs[0]} IC {ic}")
        outputs += [out / "ersp.csv", out / "ersp.png"]
    _write_manifest(out, "report", cfg, [abl], outputs)
    print((out / "report.txt").read_text(), end="")


def cmd_run_all(args, cfg, out: Path):
    cmd_synth(args, cfg, out)
    cmd_preprocess(args, cfg, out)
    cmd_ica(args, cfg, out)
    cmd_select(args, cfg, out)
    cmd_cluster(args, cfg, out)
    cmd_train(args, cfg, out)
    cmd_predict(args, cfg, out)
    cmd_ablate(args, cfg, out)
    cmd_report(args, cfg, out)


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", type=Path, default=None,
                        help="working directory (default: $EEGBRAKE_OUTPUT_DIR or "
                             "./eegbrake-out)")
    common.add_argument("--config", type=Path, default=None,
                        help="key = value config file with [section] headers")
    common.add_argument("--seed", type=int, default=None, help="base random seed")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="eegbrake",
                                description="EEG braking-intensity prediction pipeline")
    sp = p.add_subparsers(dest="command", required=True)

    def synth_flags(q):
        q.add_argument("--subjects", type=int, default=3)
        q.add_argument("--null", action="store_true",
                       help="brake follows a hidden source absent from the EEG")

    synth_flags(sp.add_parser("synth", parents=[common], help="generate synthetic subjects"))
    sp.add_parser("preprocess", parents=[common], help="filter, epoch, re-reference")
    sp.add_parser("ica", parents=[common], help="decompose and label components")
    q = sp.add_parser("select", parents=[common], help="nu sweep and component selection")
    q.add_argument("--horizon", default="200,300,400", help="comma-separated horizons (ms)")
    q = sp.add_parser("cluster", parents=[common], help="cluster component scalp maps")
    q.add_argument("--k", type=int, default=2)
    q.add_argument("--per-subject", type=int, default=3,
                   help="top components per subject added to the selected ones")
    for name in ("train", "predict"):
        q = sp.add_parser(name, parents=[common], help=f"{name} the predictor")
        q.add_argument("--arm", default="ic", help="feature source")
    q = sp.add_parser("ablate", parents=[common], help="compare feature sources")
    q.add_argument("--arms", default=None, help="comma-separated arms (default: config)")
    sp.add_parser("report", parents=[common], help="summaries and figures")
    q = sp.add_parser("run-all", parents=[common], help="every stage in order")
    synth_flags(q)
    q.add_argument("--horizon", default="200,300,400")
    q.add_argument("--k", type=int, default=2)
    q.add_argument("--per-subject", type=int, default=3)
    q.add_argument("--arm", default="ic")
    q.add_argument("--arms", default=None)
    return p


COMMANDS = {"synth": cmd_synth, "preprocess": cmd_preprocess, "ica": cmd_ica,
            "select": cmd_select, "cluster": cmd_cluster, "train": cmd_train,
            "predict": cmd_predict, "ablate": cmd_ablate, "report": cmd_report,
            "run-all": cmd_run_all}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = args.out or Path(os.environ.get("EEGBRAKE_OUTPUT_DIR", "eegbrake-out"))
    try:
        cfg = evaluate.load_config(args.config) if args.config else evaluate.EvalConfig()
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, synth=dataclasses.replace(cfg.synth, seed=args.seed))
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, cfg, out)
    except (StageError, FileNotFoundError, ValueError, KeyError, OSError) as exc:
        print(f"eegbrake {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
