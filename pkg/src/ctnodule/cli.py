"""Command-line surface: preprocess, featurize, train-heads,
train-classifier, evaluate, predict, archive-inspect.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
Data outputs go to files; logs go to stderr; predict prints one summary
line on stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, archive, artifacts, classifiers, ct_io, heads, metrics, patching
from .encoder import EncoderConfig, encoder_forward, load_encoder
from .errors import CtNoduleError, EmptyInput, MissingArtifact

log = logging.getLogger("ctnodule")

PARTITIONS = ("train", "val", "test")


def _load_config_file(path) -> dict:
    return json.loads(Path(path).read_text()) if path else {}


def _merged(args: argparse.Namespace, keys: list[str]) -> dict:
    """Config-file values overridden by any explicitly passed flags."""
    file_cfg = _load_config_file(getattr(args, "config", None))
    out = {}
    for key in keys:
        flag_val = getattr(args, key.replace("-", "_"), None)
        out[key] = flag_val if flag_val is not None else file_cfg.get(key)
    return out


# --- preprocess ---

def cmd_preprocess(args) -> int:
    cfg = _merged(
        args,
        ["window", "hu_lo", "hu_hi", "image_size", "seed", "negative_ratio"],
    )
    cfg = {
        "window": cfg["window"] or patching.DEFAULT_WINDOW,
        "hu_lo": -1000.0 if cfg["hu_lo"] is None else cfg["hu_lo"],
        "hu_hi": 400.0 if cfg["hu_hi"] is None else cfg["hu_hi"],
        "image_size": cfg["image_size"] or patching.DEFAULT_IMAGE_SIZE,
        "seed": cfg["seed"] or 0,
        "negative_ratio": cfg["negative_ratio"] or 1.0,
    }
    cfg_hash = artifacts.config_hash(cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    annotations = ct_io.load_annotations(Path(args.annotations).read_text())
    candidates = ct_io.load_candidates(Path(args.candidates).read_text())
    if not candidates:
        raise EmptyInput("candidates file has no rows")

    scan_paths = sorted(Path(args.scans_dir).glob("*.mhd"))
    scan_ids = [p.stem for p in scan_paths]
    if not scan_ids:
        raise EmptyInput(f"no .mhd scans in {args.scans_dir}")
    split = ct_io.split_dataset(scan_ids, seed=cfg["seed"])
    (out_dir / "split.json").write_text(split.to_json())

    positives = [c for c in candidates if c.label == 1]
    negatives, _ = patching.sample_negatives(
        candidates, annotations, cfg["negative_ratio"], cfg["seed"]
    )
    selected = positives + negatives
    by_scan: dict[str, list] = {}
    for cand in selected:
        by_scan.setdefault(cand.scan_id, []).append(cand)

    partition_of = {}
    for part, ids in zip(PARTITIONS, (split.train_ids, split.val_ids, split.test_ids)):
        for sid in ids:
            partition_of[sid] = part

    stats = patching.BuildStats()
    samples_by_part = {p: [] for p in PARTITIONS}
    for path in scan_paths:
        sid = path.stem
        cands = by_scan.get(sid)
        if not cands:
            continue
        volume = ct_io.read_metaimage_file(path)
        samples = patching.build_samples(
            volume,
            cands,
            annotations,
            w=cfg["window"],
            hu_window=(cfg["hu_lo"], cfg["hu_hi"]),
            image_size=cfg["image_size"],
            stats=stats,
        )
        samples_by_part[partition_of[sid]].extend(samples)

    for part in PARTITIONS:
        patching.save_patch_set(
            samples_by_part[part],
            out_dir / f"patches_{part}.bin",
            out_dir / f"patches_{part}.csv",
        ) if samples_by_part[part] else _write_empty_patch_set(out_dir, part)
    artifacts.write_meta(
        out_dir / "meta.json",
        cfg_hash,
        cfg["seed"],
        {"config": cfg, "image_size": cfg["image_size"]},
    )
    n_pos = sum(s.label == 1 for p in PARTITIONS for s in samples_by_part[p])
    n_neg = sum(s.label == 0 for p in PARTITIONS for s in samples_by_part[p])
    log.info(
        "scans=%d positives=%d negatives=%d skipped=%d",
        len(scan_paths), n_pos, n_neg, stats.skipped,
    )
    return 0


def _write_empty_patch_set(out_dir: Path, part: str) -> None:
    (out_dir / f"patches_{part}.bin").write_bytes(b"")
    (out_dir / f"patches_{part}.csv").write_text(
        ",".join(patching.MANIFEST_COLUMNS) + "\n"
    )


# --- featurize ---

def cmd_featurize(args) -> int:
    in_dir = Path(args.patches)
    meta = artifacts.read_meta(in_dir / "meta.json")
    image_size = meta["image_size"]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    archive_bytes = Path(args.archive).read_bytes()
    config, params = load_encoder(archive_bytes)
    if config.image_size != image_size:
        raise CtNoduleError(
            f"encoder expects {config.image_size}px images, patches are {image_size}px"
        )

    for part in PARTITIONS:
        samples = patching.load_patch_set(
            in_dir / f"patches_{part}.bin", in_dir / f"patches_{part}.csv", image_size
        )
        cls_rows, gap_rows, manifest = [], [], []
        for i, sample in enumerate(samples):
            cls_vec, _, gap_vec = encoder_forward(
                sample.image.astype(np.float64), params, config
            )
            cls_rows.append(cls_vec)
            gap_rows.append(gap_vec)
            bbox = sample.bbox_target or ("", "", "", "")
            manifest.append([i, sample.scan_id, sample.label, *bbox])
        d = config.embed_dim
        _write_matrix(out_dir / f"features_{part}_cls.bin", cls_rows, d)
        _write_matrix(out_dir / f"features_{part}_gap.bin", gap_rows, d)
        lines = ["index,scan_id,label,cx,cy,bw,bh"]
        lines += [",".join(str(v) for v in row) for row in manifest]
        (out_dir / f"features_{part}.csv").write_text("\n".join(lines) + "\n")
    artifacts.write_meta(
        out_dir / "meta.json",
        meta["config_hash"],
        meta["seed"],
        {"embed_dim": config.embed_dim},
    )
    return 0


def _write_matrix(path: Path, rows, dim: int) -> None:
    mat = np.stack(rows).astype("<f4") if rows else np.zeros((0, dim), dtype="<f4")
    path.write_bytes(mat.tobytes())


def load_feature_set(features_dir, part: str, pooling: str = "cls") -> heads.FeatureSet:
    features_dir = Path(features_dir)
    meta = artifacts.read_meta(features_dir / "meta.json")
    d = meta["embed_dim"]

    def matrix(kind):
        data = np.frombuffer(
            (features_dir / f"features_{part}_{kind}.bin").read_bytes(), dtype="<f4"
        )
        return data.reshape(-1, d).astype(np.float64)

    if pooling == "cls":
        feats = matrix("cls")
    elif pooling == "gap":
        feats = matrix("gap")
    elif pooling == "concat":
        feats = np.hstack([matrix("cls"), matrix("gap")])
    else:
        raise CtNoduleError(f"unknown pooling {pooling!r}")

    lines = (features_dir / f"features_{part}.csv").read_text().splitlines()[1:]
    labels = np.empty(len(lines), dtype=np.intp)
    bboxes = np.full((len(lines), 4), 0.5)
    for i, line in enumerate(lines):
        parts = line.split(",")
        labels[i] = int(parts[2])
        if labels[i] == 1 and parts[3]:
            bboxes[i] = [float(v) for v in parts[3:7]]
    return heads.FeatureSet(feats, labels, bboxes)


# --- training ---

def cmd_train_heads(args) -> int:
    features_dir = Path(args.features)
    meta = artifacts.read_meta(features_dir / "meta.json")
    cfg = heads.TrainConfig(
        lr=args.lr,
        batch_size=args.batch_size,
        weight_decay=args.weight_decay,
        epochs=args.epochs,
        seed=args.seed if args.seed is not None else meta["seed"],
        bbox_weight=args.bbox_weight,
    )
    sce = heads.SceConfig(args.alpha, args.beta, args.clamp_a)
    train = load_feature_set(features_dir, "train", args.pooling)
    val = load_feature_set(features_dir, "val", args.pooling)
    cls_head, det_head, history = heads.train_heads(train, val, cfg, sce)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "heads.nsta").write_bytes(
        heads.save_heads(
            cls_head,
            det_head,
            cfg,
            sce,
            {"pooling": args.pooling, "config_hash": meta["config_hash"]},
        )
    )
    (out_dir / "history.csv").write_text(heads.history_to_csv(history))
    artifacts.write_meta(
        out_dir / "meta.json", meta["config_hash"], cfg.seed, {"pooling": args.pooling}
    )
    log.info("best val acc %.4f", max(h.val_acc for h in history))
    return 0


def cmd_train_classifier(args) -> int:
    features_dir = Path(args.features)
    meta = artifacts.read_meta(features_dir / "meta.json")
    train = load_feature_set(features_dir, "train", args.pooling)
    seed = args.seed if args.seed is not None else meta["seed"]
    tree_cfg = classifiers.TreeConfig(args.max_depth, args.min_samples_split)
    if args.model == "dt":
        model = classifiers.fit_decision_tree(train.features, train.labels, tree_cfg)
    elif args.model == "rf":
        model = classifiers.fit_random_forest(
            train.features,
            train.labels,
            n_trees=args.n_trees,
            master_seed=seed,
            config=tree_cfg,
        )
    else:
        model = classifiers.KnnModel(train.features, train.labels, args.k)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "model.json").write_text(
        classifiers.save_model(
            model, {"pooling": args.pooling, "config_hash": meta["config_hash"]}
        )
    )
    artifacts.write_meta(
        out_dir / "meta.json", meta["config_hash"], seed, {"pooling": args.pooling}
    )
    return 0


# --- evaluation / prediction ---

def cmd_evaluate(args) -> int:
    features_dir = Path(args.features)
    feat_meta = artifacts.read_meta(features_dir / "meta.json")
    model_dir = Path(args.model)
    model_meta = artifacts.read_meta(model_dir / "meta.json")
    artifacts.check_meta(model_meta, feat_meta["config_hash"], str(model_dir))
    pooling = model_meta.get("pooling", "cls")
    test = load_feature_set(features_dir, "test", pooling)

    if (model_dir / "heads.nsta").exists():
        cls_head, _, _ = heads.load_heads((model_dir / "heads.nsta").read_bytes())

        def predict_fn(f):
            _, probs = heads.head_forward_classify(f, cls_head)
            return int(probs.argmax()), float(probs[1])

    elif (model_dir / "model.json").exists():
        model, _ = classifiers.load_model((model_dir / "model.json").read_text())

        def predict_fn(f):
            return classifiers.predict(model, f)

    else:
        raise MissingArtifact(f"no heads.nsta or model.json in {model_dir}")

    report = metrics.evaluate(predict_fn, test.features, test.labels)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.json").write_text(
        report.to_json(
            {
                "tool_version": __version__,
                "config_hash": feat_meta["config_hash"],
                "seed": feat_meta["seed"],
            }
        )
    )
    (out_dir / "roc.csv").write_text(metrics.roc_to_csv(report.roc_points))
    (out_dir / "roc.svg").write_text(metrics.roc_to_svg(report.roc_points))
    artifacts.write_meta(out_dir / "meta.json", feat_meta["config_hash"], feat_meta["seed"])
    log.info("accuracy %.4f auc %s", report.accuracy, report.auc)
    return 0


def cmd_predict(args) -> int:
    volume = ct_io.read_metaimage_file(args.scan)
    config, params = load_encoder(Path(args.archive).read_bytes())
    cls_head, det_head, _ = heads.load_heads(Path(args.heads).read_bytes())

    candidate = ct_io.Candidate(Path(args.scan).stem, tuple(args.center), 0)
    sample = patching.build_samples(
        volume,
        [ct_io.Candidate(candidate.scan_id, candidate.world_center, 0)],
        [],
        w=args.window,
        hu_window=(args.hu_lo, args.hu_hi),
        image_size=config.image_size,
    )
    if not sample:
        raise CtNoduleError("candidate center falls outside the volume")
    cls_vec, _, gap_vec = encoder_forward(
        sample[0].image.astype(np.float64), params, config
    )
    feature = cls_vec.astype(np.float64)
    _, probs = heads.head_forward_classify(feature, cls_head)
    label = int(probs.argmax())
    box_px = None
    if det_head is not None:
        cx, cy, bw, bh = heads.head_forward_detect(feature, det_head)
        s = config.image_size
        box_px = (cx * s, cy * s, bw * s, bh * s)
    line = f"label={label} prob={probs[1]:.6f}"
    if box_px is not None:
        line += " bbox_px=({:.1f},{:.1f},{:.1f},{:.1f})".format(*box_px)
    print(line)
    if args.overlay and box_px is not None:
        Path(args.overlay).write_text(_overlay_svg(config.image_size, box_px))
    return 0


def _overlay_svg(size: int, box_px) -> str:
    cx, cy, bw, bh = box_px
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">\n'
        f'<rect x="{cx - bw / 2:.1f}" y="{cy - bh / 2:.1f}" width="{bw:.1f}" '
        f'height="{bh:.1f}" fill="none" stroke="red" stroke-width="2"/>\n</svg>\n'
    )


def cmd_archive_inspect(args) -> int:
    metadata, tensors = archive.load_tensor_archive(Path(args.archive).read_bytes())
    print(json.dumps(metadata, indent=2, sort_keys=True))
    for name, tensor in tensors.items():
        print(f"{name}  {tensor.shape}  float32")
    return 0


# --- parser ---

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctnodule", description="lung nodule detection pipeline"
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="extract labeled patches from scans")
    p.add_argument("--scans-dir", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--candidates", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON config file; flags override")
    p.add_argument("--window", type=int)
    p.add_argument("--hu-lo", type=float)
    p.add_argument("--hu-hi", type=float)
    p.add_argument("--image-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--negative-ratio", type=float)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("featurize", help="run the frozen encoder over patches")
    p.add_argument("--patches", required=True)
    p.add_argument("--archive", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train-heads", help="train classification/detection heads")
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pooling", choices=["cls", "gap", "concat"], default="cls")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--clamp-a", type=float, default=-4.0)
    p.add_argument("--bbox-weight", type=float, default=1.0)
    p.set_defaults(func=cmd_train_heads)

    p = sub.add_parser("train-classifier", help="fit a classical classifier")
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", choices=["dt", "rf", "knn"], required=True)
    p.add_argument("--pooling", choices=["cls", "gap", "concat"], default="gap")
    p.add_argument("--max-depth", type=int)
    p.add_argument("--min-samples-split", type=int, default=2)
    p.add_argument("--n-trees", type=int, default=100)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train_classifier)

    p = sub.add_parser("evaluate", help="evaluate a model on the test partition")
    p.add_argument("--features", required=True)
    p.add_argument("--model", required=True, help="directory of a trained model")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="classify one world-mm location in a scan")
    p.add_argument("--scan", required=True)
    p.add_argument("--center", type=float, nargs=3, required=True, metavar=("X", "Y", "Z"))
    p.add_argument("--archive", required=True)
    p.add_argument("--heads", required=True)
    p.add_argument("--window", type=int, default=patching.DEFAULT_WINDOW)
    p.add_argument("--hu-lo", type=float, default=-1000.0)
    p.add_argument("--hu-hi", type=float, default=400.0)
    p.add_argument("--overlay", help="write the predicted box as an SVG overlay")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("archive-inspect", help="print archive config and tensors")
    p.add_argument("--archive", required=True)
    p.set_defaults(func=cmd_archive_inspect)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        return args.func(args)
    except CtNoduleError as exc:
        json.dump(
            {"error": type(exc).__name__, "message": str(exc)}, sys.stderr
        )
        sys.stderr.write("\n")
        return 2
    except Exception as exc:  # pragma: no cover - defensive
        log.exception("internal error: %s", exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
