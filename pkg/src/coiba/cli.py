"""``coiba`` command line: train the toy model, attribute, evaluate, and run studies.

Every command writes its delimited results (CSV/JSON) and figures under
``--out-dir`` together with the resolved config. Failures print one line
``error: kind=<kind> exit=<code> message=<text>`` to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from typing import List, Optional

import numpy as np
from scipy.stats import spearmanr

from . import data, metrics, plotting, vit
from .attribution import (
    AttributionMap,
    attribute_many,
    calibrate_stats,
    derive_seed,
    upsample_scores,
)
from .bottleneck import BottleneckSpec
from .errors import CoibaError, ConfigError, ParseError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4
BETA_SWEEP = [0.01, 0.1, 1.0, 10.0, 100.0]
IBA_BETA = 10.0


# -- shared plumbing ----------------------------------------------------
def _common_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--seed", type=int, help="base seed (overrides the config)")
    p.add_argument("--out-dir", help="output directory (fallback: $COIBA_OUT_DIR, then the config)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for per-image jobs")
    return p


def _spec_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--method", choices=["coiba", "iba", "iba-star"], default="coiba")
    p.add_argument("--s-layer", type=int, dest="s")
    p.add_argument("--e-layer", type=int, dest="e")
    p.add_argument("--beta", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--readout", choices=["capacity", "lambda", "first-layer"])
    p.add_argument("--per-channel", action="store_true", default=None)


def _input_flags(p: argparse.ArgumentParser, images: bool = True) -> None:
    p.add_argument("--checkpoint", required=True)
    if images:
        p.add_argument("--images", required=True,
                       help="directory with labels.csv (as written by train-toy) or image files")
        p.add_argument("--limit", type=int, help="use only the first N images")


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(prog="coiba", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-toy", parents=[common], help="train the toy ViT on synthetic glyphs")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("attribute", parents=[common], help="write attribution maps")
    _input_flags(p)
    _spec_flags(p)
    p.add_argument("--target", type=int, help="class to explain (default: label, else prediction)")

    p = sub.add_parser("evaluate", parents=[common], help="faithfulness and localization metrics")
    _input_flags(p)
    p.add_argument("--maps", required=True, help="directory of maps written by attribute")
    p.add_argument("--metrics", default="insdel,road,ehr",
                   help="comma list from insdel,road,ehr,sensitivity")
    p.add_argument("--curves", action="store_true", help="dump per-sample curves")
    p.add_argument("--predicted-target", action="store_true",
                   help="score the predicted class instead of the label")

    p = sub.add_parser("compare-layers", parents=[common], help="per-layer IBA map study")
    _input_flags(p)
    p.add_argument("--beta", type=float, default=IBA_BETA)

    p = sub.add_parser("sanity-check", parents=[common], help="parameter randomization test")
    _input_flags(p)
    _spec_flags(p)
    p.add_argument("--mode", choices=["cumulative", "independent"], default="cumulative")
    p.add_argument("--layers", help="comma list of block indices (default: all)")

    p = sub.add_parser("ablate", parents=[common], help="sweep one setting")
    _input_flags(p)
    _spec_flags(p)
    p.add_argument("--axis", choices=["beta", "layers", "uniform-channel", "readout"], required=True)
    return parser


def resolve_config(args) -> data.RunConfig:
    cfg = data.load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    out = args.out_dir or os.environ.get("COIBA_OUT_DIR") or cfg.out_dir
    cfg = dataclasses.replace(cfg, out_dir=out)
    spec_over = {k: getattr(args, k) for k in ("s", "e", "beta", "iterations", "readout", "per_channel")
                 if getattr(args, k, None) is not None and args.command != "compare-layers"}
    if spec_over:
        cfg = dataclasses.replace(cfg, bottleneck=dataclasses.replace(cfg.bottleneck, **spec_over))
    if getattr(args, "epochs", None) is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, epochs=args.epochs))
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    cfg = cfg.resolved()
    os.makedirs(cfg.out_dir, exist_ok=True)
    data.write_text_atomic(os.path.join(cfg.out_dir, "config.resolved.json"),
                           json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return cfg


def _out(cfg, *parts) -> str:
    path = os.path.join(cfg.out_dir, *parts)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    return path


def _emit(**fields) -> None:
    print(" ".join(f"{k}={v}" for k, v in fields.items()), flush=True)


def load_images(path: str, limit: Optional[int] = None) -> List[dict]:
    """Records ``{id, image, label, mask}`` from a labelled directory or image files."""
    records = []
    labels_csv = os.path.join(path, "labels.csv") if os.path.isdir(path) else None
    if labels_csv and os.path.exists(labels_csv):
        for row in data.read_csv(labels_csv):
            mask = None
            if row.get("mask"):
                mask = data.load_image(os.path.join(path, row["mask"]))[..., 0] > 0.5
            records.append({"id": row["id"], "image": data.load_image(os.path.join(path, row["file"])),
                            "label": int(row["label"]) if row.get("label") else None, "mask": mask})
    else:
        files = sorted(os.listdir(path)) if os.path.isdir(path) else [path]
        for f in files:
            full = os.path.join(path, f) if os.path.isdir(path) else f
            if f.endswith((".pgm", ".ppm")) and not f.endswith("_mask.pgm"):
                stem = os.path.splitext(os.path.basename(f))[0]
                records.append({"id": stem, "image": data.load_image(full), "label": None, "mask": None})
    if not records:
        raise FileNotFoundError(f"no images found in {path}")
    return records[:limit] if limit else records


def pipeline_stats(model: vit.ModelCheckpoint, cfg: data.RunConfig):
    """Calibration statistics from the leading train-split images, or ``None``."""
    spec = cfg.bottleneck
    if spec.stats_mode != "calibration":
        return None
    train, _ = data.make_splits(dataclasses.replace(cfg.data, n_train=max(spec.calibration_size,
                                                                         cfg.data.classes)),
                                model.config)
    images = np.stack([s.image for s in train[:spec.calibration_size]])
    return calibrate_stats(model, images, range(1, model.config.depth + 1))


def _targets(model, records, fixed: Optional[int] = None, predicted: bool = False) -> List[int]:
    if fixed is not None:
        return [fixed] * len(records)
    probs = vit.predict_proba(model, np.stack([r["image"] for r in records]))
    return [int(np.argmax(p)) if predicted or r["label"] is None else r["label"]
            for r, p in zip(records, probs)]


def _attribute_records(model, cfg, records, targets, spec: BottleneckSpec, method: str,
                       jobs: int, stats) -> List[AttributionMap]:
    return attribute_many(model, [r["image"] for r in records], targets, spec, method,
                          jobs=jobs, base_seed=cfg.seed, stats=stats)


def _mean(vals) -> Optional[float]:
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


# -- commands -----------------------------------------------------------
def cmd_train_toy(cfg: data.RunConfig, args) -> int:
    train, test = data.make_splits(cfg.data, cfg.model)
    x_tr, y_tr, _ = data.stack(train)
    x_te, y_te, m_te = data.stack(test)
    log_rows = []
    model = vit.train_toy(vit.init_model(cfg.model), (x_tr, y_tr), cfg.train.epochs,
                          lr=cfg.train.lr, batch_size=cfg.train.batch_size, seed=cfg.seed,
                          weight_decay=cfg.train.weight_decay,
                          log=lambda rec: log_rows.append([rec["epoch"], rec["loss"]]))
    ckpt = _out(cfg, "checkpoint.cibt")
    vit.save_checkpoint(model, ckpt)
    digest = cfg.digest()
    data.write_csv(_out(cfg, "train_log.csv"), ["epoch", "loss"], log_rows, f"config={digest}")
    acc = vit.evaluate_accuracy(model, x_te, y_te)
    masked = x_te.copy()
    masked[m_te] = 0.0
    masked_acc = vit.evaluate_accuracy(model, masked, y_te)
    rows = []
    for i, s in enumerate(test):
        stem = f"{i:04d}"
        gray = s.image.shape[-1] == 1
        name = stem + (".pgm" if gray else ".ppm")
        save = data.save_pgm if gray else data.save_ppm
        save(_out(cfg, "heldout", name), s.image, depth=16, comment=f"config={digest}")
        data.save_pgm(_out(cfg, "heldout", stem + "_mask.pgm"), s.gt_mask.astype(float))
        rows.append([stem, name, s.label, s.cell, stem + "_mask.pgm"])
    data.write_csv(_out(cfg, "heldout", "labels.csv"), ["id", "file", "label", "cell", "mask"], rows)
    summary = {"config_digest": digest, "checkpoint_digest": model.digest(),
               "heldout_accuracy": acc, "masked_accuracy": masked_acc, "epochs": cfg.train.epochs}
    data.write_text_atomic(_out(cfg, "train_summary.json"), json.dumps(summary, indent=2) + "\n")
    _emit(checkpoint=ckpt, heldout_accuracy=f"{acc:.4f}", masked_accuracy=f"{masked_acc:.4f}",
          checkpoint_digest=model.digest()[:16])
    return EXIT_OK


def _write_map(cfg, stem: str, amap: AttributionMap, digest: str) -> None:
    pm = amap.pixel_map
    lo, hi = float(pm.min()), float(pm.max())
    data.save_pgm(_out(cfg, "maps", stem + ".pgm"), metrics.normalize_map(pm), depth=16,
                  comment=f"config={digest}")
    side = amap.sidecar()
    side.update({"id": stem, "config_digest": digest, "map_min": lo, "map_max": hi,
                 "bottleneck_probs": [float(p) for p in amap.bottleneck_probs]
                 if amap.bottleneck_probs is not None else None})
    data.write_text_atomic(_out(cfg, "maps", stem + ".json"), json.dumps(side, indent=2) + "\n")


def cmd_attribute(cfg, args) -> int:
    model = vit.load_checkpoint(args.checkpoint)
    records = load_images(args.images, args.limit)
    targets = _targets(model, records, args.target)
    maps = _attribute_records(model, cfg, records, targets, cfg.bottleneck, args.method, args.jobs,
                              pipeline_stats(model, cfg))
    digest = cfg.digest()
    for rec, amap in zip(records, maps):
        _write_map(cfg, rec["id"], amap, digest)
    for rec, amap in list(zip(records, maps))[:4]:
        plotting.plot_map(rec["image"], amap.pixel_map, _out(cfg, "figures", f"map_{rec['id']}.png"),
                          args.method)
    _emit(maps=len(maps), method=args.method, out=os.path.join(cfg.out_dir, "maps"),
          mean_runtime_ms=f"{np.mean([m.runtime_ms for m in maps]):.1f}")
    return EXIT_OK


def _load_map(maps_dir: str, stem: str, image_size: int) -> np.ndarray:
    side = os.path.join(maps_dir, stem + ".json")
    pgm = os.path.join(maps_dir, stem + ".pgm")
    if os.path.exists(side):
        with open(side, encoding="utf-8") as fh:
            scores = np.asarray(json.load(fh)["token_scores"], dtype=np.float64)
        return upsample_scores(scores, image_size)
    if os.path.exists(pgm):
        return data.load_image(pgm)[..., 0]
    raise FileNotFoundError(f"missing map for {stem}: {side}")


EVAL_COLUMNS = ["id", "target", "confidence", "ins_auc", "del_auc", "d_insdel",
                "road_morf", "road_lerf", "d_road", "ehr"]


def cmd_evaluate(cfg, args) -> int:
    model = vit.load_checkpoint(args.checkpoint)
    predict = vit.as_predictor(model)
    records = load_images(args.images, args.limit)
    wanted = {m.strip() for m in args.metrics.split(",") if m.strip()}
    unknown = wanted - {"insdel", "road", "ehr", "sensitivity"}
    if unknown:
        raise ConfigError(f"unknown metrics {sorted(unknown)}")
    predicted = args.predicted_target or cfg.eval.target_mode == "predicted"
    targets = _targets(model, records, predicted=predicted)
    ev = cfg.eval
    rows, curves, sens_cols = [], {"insertion": [], "deletion": []}, []
    if "sensitivity" in wanted:
        sens_cols = [f"sens_{n}" for n in ev.sens_n]
    for i, (rec, t) in enumerate(zip(records, targets)):
        pmap = _load_map(args.maps, rec["id"], model.config.image_size)
        seed = derive_seed(cfg.seed, i)
        row = {"id": rec["id"], "target": t,
               "confidence": float(predict(rec["image"][None])[0, t])}
        if "insdel" in wanted:
            ins, dele = metrics.insertion_deletion(predict, rec["image"], pmap, t, ev.step_fraction,
                                                   ev.blur_kernel, ev.blur_sigma)
            row.update(ins_auc=ins.auc, del_auc=dele.auc, d_insdel=ins.auc - dele.auc)
            curves["insertion"].append(ins)
            curves["deletion"].append(dele)
            if args.curves or ev.curves:
                lines = ["# fraction insertion deletion"] + [
                    f"{f!r} {a!r} {b!r}" for f, a, b in zip(ins.fractions, ins.scores, dele.scores)]
                data.write_text_atomic(_out(cfg, "curves", rec["id"] + ".dat"), "\n".join(lines) + "\n")
        if "road" in wanted:
            morf = metrics.road(predict, rec["image"], pmap, t, ev.road_fractions, "morf",
                                ev.road_sigma, seed)
            lerf = metrics.road(predict, rec["image"], pmap, t, ev.road_fractions, "lerf",
                                ev.road_sigma, seed)
            row.update(road_morf=morf, road_lerf=lerf, d_road=lerf - morf)
        if "ehr" in wanted and rec["mask"] is not None and rec["mask"].any():
            row["ehr"] = metrics.ehr(pmap, rec["mask"])
        if sens_cols:
            n_vals = [min(n, pmap.size) for n in ev.sens_n]
            sens = metrics.sensitivity_n(predict, rec["image"], pmap, t, n_vals, ev.sens_trials, seed)
            row.update({c: sens[n] for c, n in zip(sens_cols, n_vals)})
        rows.append(row)
    digest = cfg.digest()
    header = EVAL_COLUMNS + sens_cols
    data.write_csv(_out(cfg, "eval.csv"), header, [[r.get(c) for c in header] for r in rows],
                   f"config={digest}")
    conf = [r["confidence"] for r in rows]
    binned = {k: [r.get(k) for r in rows] for k in ("d_insdel", "d_road")
              if all(r.get(k) is not None for r in rows)}
    report = metrics.confidence_binned_report(conf, binned, ev.bin_width)
    summary = {"config_digest": digest, "samples": len(rows),
               "means": {c: _mean([r.get(c) for r in rows]) for c in header[2:]},
               "bins": report.rows(),
               "settings": {"step_fraction": ev.step_fraction, "road_fractions": ev.road_fractions,
                            "road_sigma": ev.road_sigma, "road_neighbourhood": "8-uniform",
                            "blur": list(metrics.blur_params(model.config.image_size))
                            if ev.blur_kernel is None else [ev.blur_kernel, ev.blur_sigma],
                            "target": "predicted" if predicted else "ground-truth"}}
    data.write_text_atomic(_out(cfg, "eval_summary.json"), json.dumps(summary, indent=2) + "\n")
    if curves["insertion"]:
        plotting.plot_mean_curves(curves, _out(cfg, "figures", "insdel_curves.png"))
    if binned:
        plotting.plot_confidence_bins(report, _out(cfg, "figures", "confidence_bins.png"),
                                      next(iter(binned)))
    _emit(samples=len(rows), **{k: f"{v:.4f}" for k, v in summary["means"].items() if v is not None})
    return EXIT_OK


def layer_study(model, cfg, records, targets, beta: float, jobs: int):
    """Per-layer IBA maps, their SSIM matrix and the best-layer histogram."""
    stats = pipeline_stats(model, cfg)
    depth = model.config.depth
    layers = list(range(1, depth + 1))
    predict = vit.as_predictor(model)
    per = {}
    for l in layers:
        spec = dataclasses.replace(cfg.bottleneck, mode="coiba", s=l, e=l, beta=beta, betas=None)
        per[l] = _attribute_records(model, cfg, records, targets, spec, "iba", jobs, stats)
    scores = np.array([[a.auc - b.auc for a, b in
                        (metrics.insertion_deletion(predict, r["image"], m, t) for r, m, t in
                         zip(records, per[l], targets))] for l in layers])
    best = np.argmax(scores, axis=0)
    counts = np.bincount(best, minlength=len(layers))
    ssim = np.eye(len(layers))
    for i in range(len(layers)):
        for j in range(i + 1, len(layers)):
            ssim[i, j] = ssim[j, i] = np.mean([metrics.map_ssim(a, b)
                                               for a, b in zip(per[layers[i]], per[layers[j]])])
    dist = [j - i for i in range(len(layers)) for j in range(i + 1, len(layers))]
    vals = [ssim[i, j] for i in range(len(layers)) for j in range(i + 1, len(layers))]
    rho = float(spearmanr(dist, vals).statistic) if len(set(vals)) > 1 else float("nan")
    return {"layers": layers, "maps": per, "d_insdel": scores, "best_counts": counts,
            "ssim": ssim, "spearman": rho}


def cmd_compare_layers(cfg, args) -> int:
    model = vit.load_checkpoint(args.checkpoint)
    records = load_images(args.images, args.limit)
    targets = _targets(model, records)
    res = layer_study(model, cfg, records, targets, args.beta, args.jobs)
    digest = cfg.digest()
    layers = res["layers"]
    data.write_csv(_out(cfg, "ssim_matrix.csv"), ["layer"] + [str(l) for l in layers],
                   [[l] + list(row) for l, row in zip(layers, res["ssim"])], f"config={digest}")
    data.write_csv(_out(cfg, "best_layer.csv"), ["layer", "count", "mean_d_insdel"],
                   [[l, int(c), float(res["d_insdel"][i].mean())]
                    for i, (l, c) in enumerate(zip(layers, res["best_counts"]))], f"config={digest}")
    plotting.plot_ssim_matrix(res["ssim"], layers, _out(cfg, "figures", "ssim_matrix.png"))
    plotting.plot_layer_histogram(res["best_counts"], layers, _out(cfg, "figures", "best_layer.png"))
    off = res["ssim"][~np.eye(len(layers), dtype=bool)]
    adjacent = np.mean([res["ssim"][i, i + 1] for i in range(len(layers) - 1)])
    distant = res["ssim"][0, -1]
    _emit(samples=len(records), mean_pairwise_ssim=f"{off.mean():.4f}",
          spearman_distance_ssim=f"{res['spearman']:.4f}", adjacent_ssim=f"{adjacent:.4f}",
          distant_ssim=f"{distant:.4f}", best_layer_max_share=f"{res['best_counts'].max() / len(records):.4f}")
    return EXIT_OK


def cmd_sanity_check(cfg, args) -> int:
    model = vit.load_checkpoint(args.checkpoint)
    records = load_images(args.images, args.limit)
    targets = _targets(model, records)
    depth = model.config.depth
    if args.layers:
        idx = [int(v) for v in args.layers.split(",")]
    else:
        idx = list(range(depth + 1 if args.mode == "cumulative" else depth))
    calib = None
    if cfg.bottleneck.stats_mode == "calibration":
        train, _ = data.make_splits(dataclasses.replace(cfg.data, n_train=max(
            cfg.bottleneck.calibration_size, cfg.data.classes)), model.config)
        calib = np.stack([s.image for s in train[:cfg.bottleneck.calibration_size]])
    table = metrics.sanity_check(model, [r["image"] for r in records], targets, cfg.bottleneck,
                                 args.mode, [None] + idx, args.method, calibration=calib)
    digest = cfg.digest()
    data.write_csv(_out(cfg, "sanity.csv"), ["randomized_from", "mean_ssim"],
                   [["none" if k is None else k, v] for k, v in table.items()], f"config={digest}")
    plotting.plot_sanity(table, _out(cfg, "figures", "sanity.png"))
    _emit(mode=args.mode, **{f"ssim_{'none' if k is None else k}": f"{v:.4f}" for k, v in table.items()})
    return EXIT_OK


def _ablation_settings(cfg, axis: str, depth: int):
    base = cfg.bottleneck
    if axis == "beta":
        return [(f"beta={b}", dataclasses.replace(base, beta=b)) for b in BETA_SWEEP]
    if axis == "readout":
        return [(f"readout={r}", dataclasses.replace(base, readout=r))
                for r in ("capacity", "lambda", "first-layer")]
    if axis == "uniform-channel":
        return [(f"per_channel={pc}", dataclasses.replace(base, per_channel=pc)) for pc in (False, True)]
    out = [(f"s={s},e={depth}", dataclasses.replace(base, s=s, e=depth)) for s in range(1, depth + 1)]
    return out + [(f"s=1,e={e}", dataclasses.replace(base, s=1, e=e)) for e in range(1, depth)]


def cmd_ablate(cfg, args) -> int:
    model = vit.load_checkpoint(args.checkpoint)
    predict = vit.as_predictor(model)
    records = load_images(args.images, args.limit)
    targets = _targets(model, records)
    stats = pipeline_stats(model, cfg)
    rows = []
    for name, spec in _ablation_settings(cfg, args.axis, model.config.depth):
        maps = _attribute_records(model, cfg, records, targets, spec, "coiba", args.jobs, stats)
        d = [a.auc - b.auc for a, b in (metrics.insertion_deletion(predict, r["image"], m, t)
                                         for r, m, t in zip(records, maps, targets))]
        rows.append([name, float(np.mean(d)), metrics.accuracy_under_bottleneck(maps),
                     float(np.mean([m.loss_compression for m in maps]))])
    digest = cfg.digest()
    data.write_csv(_out(cfg, f"ablate_{args.axis}.csv"),
                   ["setting", "d_insdel", "accuracy_under_bottleneck", "compression"], rows,
                   f"config={digest}")
    plotting.plot_sweep([r[0] for r in rows], {"d_insdel": [r[1] for r in rows],
                                               "accuracy": [r[2] for r in rows]},
                        _out(cfg, "figures", f"ablate_{args.axis}.png"), args.axis,
                        logx=args.axis == "beta")
    for r in rows:
        _emit(setting=r[0], d_insdel=f"{r[1]:.4f}", accuracy_under_bottleneck=f"{r[2]:.4f}")
    return EXIT_OK


COMMANDS = {"train-toy": cmd_train_toy, "attribute": cmd_attribute, "evaluate": cmd_evaluate,
            "compare-layers": cmd_compare_layers, "sanity-check": cmd_sanity_check,
            "ablate": cmd_ablate}


def _fail(kind: str, code: int, exc: BaseException) -> int:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    print(f"error: kind={kind} exit={code} message={msg}", file=sys.stderr, flush=True)
    return code


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        return _fail("config", EXIT_CONFIG, exc)
    except (OSError, ParseError) as exc:
        return _fail("io", EXIT_IO, exc)
    except (CoibaError, ValueError, ArithmeticError, IndexError) as exc:
        return _fail(getattr(exc, "kind", "runtime"), EXIT_RUNTIME, exc)


if __name__ == "__main__":
    sys.exit(main())
