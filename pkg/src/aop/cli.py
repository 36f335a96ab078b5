"""Command-line surface and experiment orchestration.

Subcommands: synth-gen, train-aop, train-classifier, pretreat, evaluate-seg,
run-comparison, gradcam. Exit codes: 0 success, 1 usage error, 2 data error,
3 training divergence. AOP_DEVICE selects the compute device.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage
from PIL.PngImagePlugin import PngInfo

from . import aop_net, classifier, gradcam, report, synth
from .config import (
    CLASS_NAMES,
    SPLITS,
    VARIANT_NAMES,
    RunConfig,
    SplitSpec,
    variant_from_name,
)
from .data import (
    IngestionError,
    SUPPORTED_EXTENSIONS,
    center_crop_square,
    load_classification_dataset,
    load_image_file,
    load_segmentation_dataset,
    resize_mask,
)

log = logging.getLogger(__name__)

PRETREATED_TAG = "aop_pretreated"
ARMS = ("none",) + VARIANT_NAMES


class UsageError(ValueError):
    pass


def _device() -> str:
    return os.environ.get("AOP_DEVICE", "cpu")


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_yaml(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        s = args.seed
        cfg.seeds.split, cfg.seeds.augment, cfg.seeds.init = s, s + 1, s + 2
        cfg.seeds.shuffle, cfg.seeds.synth = s + 3, s + 4
        cfg.synth.rng_seed = s + 4
    return cfg


def _out_dir(cfg: RunConfig, args) -> Path:
    out = Path(args.out) if getattr(args, "out", None) else Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _corpus_dir(cfg: RunConfig) -> Path:
    return Path(cfg.paths.corpus_dir)


def aop_checkpoint_path(out_dir: Path, variant: str) -> Path:
    return out_dir / f"aop_{variant}.pt"


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise IngestionError(f"missing required artifact {path} ({hint})")
    return path


def _seg_dataset(cfg: RunConfig):
    seg_root = _require(
        _corpus_dir(cfg) / "segmentation", "run `aop synth-gen` or point paths.corpus_dir at a dataset"
    )
    spec = SplitSpec(cfg.data.seg_train_fraction, cfg.seeds.split)
    return load_segmentation_dataset(seg_root, spec, cfg.data.seg_image_size)


def _pretreater(cfg: RunConfig, out_dir: Path, variant: str) -> aop_net.Pretreater:
    ckpt = aop_net.load_checkpoint(
        _require(aop_checkpoint_path(out_dir, variant), f"train it with `aop train-aop --variant {variant}`")
    )
    return aop_net.Pretreater(
        ckpt, work_size=cfg.aop_work_size, out_size=cfg.classifier.input_size, device=_device()
    )


# ----------------------------------------------------------------- commands


def cmd_synth_gen(args) -> int:
    cfg = _load_config(args)
    out_root = Path(args.out) if args.out else _corpus_dir(cfg)
    cls_root, seg_root = synth.generate_corpus(cfg.synth, out_root)
    n_cls = sum(1 for _ in cls_root.rglob("*.png"))
    n_seg = sum(1 for _ in (seg_root / "images").glob("*.png"))
    print(f"corpus written to {out_root}")
    print(f"  classification images: {n_cls}")
    print(f"  segmentation pairs:    {n_seg}")
    print(f"  manifest:              {out_root / 'manifest.csv'}")
    return 0


def cmd_train_aop(args) -> int:
    cfg = _load_config(args)
    variant = variant_from_name(args.variant)  # raises for unknown names
    out = _out_dir(cfg, args)
    train_pairs, _ = _seg_dataset(cfg)
    resume = None
    ckpt_path = aop_checkpoint_path(out, variant.name)
    if args.resume:
        resume = aop_net.load_checkpoint(_require(ckpt_path, "cannot resume without a checkpoint"))
    ckpt = aop_net.train_aop(
        train_pairs,
        variant,
        cfg.aop_train,
        gen_spec=cfg.generator,
        disc_spec=cfg.discriminator,
        recipe=cfg.aop_augment,
        ssim_cfg=cfg.ssim,
        device=_device(),
        init_seed=cfg.seeds.init,
        augment_seed=cfg.seeds.augment,
        shuffle_seed=cfg.seeds.shuffle,
        out_dir=out,
        resume_from=resume,
        config_hash=cfg.config_hash(),
    )
    aop_net.save_checkpoint(ckpt, ckpt_path)
    print(f"pretreatment checkpoint written to {ckpt_path} (epoch {ckpt['epoch']})")
    return 0


def _load_cls_dataset(cfg: RunConfig):
    cls_root = _require(
        _corpus_dir(cfg) / "classification", "run `aop synth-gen` or point paths.corpus_dir at a dataset"
    )
    return load_classification_dataset(cls_root, cfg.classifier.input_size)


def cmd_train_classifier(args) -> int:
    cfg = _load_config(args)
    if args.arm not in ARMS:
        raise UsageError(f"unknown arm {args.arm!r}; expected one of {ARMS}")
    out = _out_dir(cfg, args)
    ds = _load_cls_dataset(cfg)
    pretreat_fn = None if args.arm == "none" else _pretreater(cfg, out, args.arm)
    ckpt = classifier.train_classifier(
        ds.split("training"),
        ds.split("validation"),
        cfg.cls_train,
        spec=cfg.classifier,
        recipe=cfg.cls_augment,
        pretreat_fn=pretreat_fn,
        device=_device(),
        init_seed=cfg.seeds.init,
        augment_seed=cfg.seeds.augment,
        shuffle_seed=cfg.seeds.shuffle,
        out_dir=out,
        config_hash=cfg.config_hash(),
    )
    path = out / f"cls_{args.arm}.pt"
    aop_net.save_checkpoint(ckpt, path)
    print(f"classifier checkpoint written to {path} (best val acc {ckpt['best_val_accuracy']:.4f})")
    return 0


def cmd_pretreat(args) -> int:
    cfg = _load_config(args)
    ckpt = aop_net.load_checkpoint(_require(Path(args.checkpoint), "pretreatment checkpoint"))
    pre = aop_net.Pretreater(
        ckpt, work_size=cfg.aop_work_size, out_size=cfg.classifier.input_size, device=_device()
    )
    in_dir, out_dir = Path(args.in_dir), Path(args.out_dir)
    if not in_dir.is_dir():
        raise IngestionError(f"input directory {in_dir} does not exist")
    out_dir.mkdir(parents=True, exist_ok=True)
    files = [p for p in sorted(in_dir.rglob("*")) if p.suffix.lower() in SUPPORTED_EXTENSIONS]
    count = 0
    for f in files:
        with PILImage.open(f) as im:
            if isinstance(im.info.get(PRETREATED_TAG), str):
                log.warning("%s already carries a pretreatment tag; output is undefined protocol", f)
                print(f"warning: {f} appears to be pretreated already", file=sys.stderr)
            img = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        res = pre(img)
        meta = PngInfo()
        meta.add_text(PRETREATED_TAG, pre.variant_name)
        dst = out_dir / (f.stem + ".png")
        arr = np.clip(np.rint(res * 255.0), 0, 255).astype(np.uint8)
        PILImage.fromarray(arr).save(dst, format="PNG", pnginfo=meta)
        count += 1
    print(f"pretreated {count} images -> {out_dir}")
    return 0


def _mask_from_output(out: np.ndarray, variant, eval_cfg) -> np.ndarray:
    """Evaluation mask from a generator output: threshold the probability
    map, or floor-threshold the channel-max of an rgb output (background
    trains toward exact zero)."""
    if variant.output_mode == "probability_map":
        return aop_net.threshold_mask(out[0], eval_cfg.mask_threshold)
    return (out.max(axis=0) >= eval_cfg.rgb_mask_threshold).astype(np.float32)


def segmentation_scores(
    ckpt: dict, pairs, cfg: RunConfig, device: str = "cpu", chunk: int = 32
) -> dict[str, float]:
    """Micro-averaged pixel P/R/F1 of one pretreatment checkpoint on
    held-out pairs, evaluated at the generator's working resolution."""
    gen, variant = aop_net.load_generator(ckpt, device)
    work = cfg.aop_work_size
    tp = fp = fn = 0
    with torch.no_grad():
        for lo in range(0, len(pairs), chunk):
            block = pairs[lo : lo + chunk]
            imgs = [p.image if p.image.shape[0] == work else _resize_sq(p.image, work) for p in block]
            x = torch.from_numpy(np.stack(imgs).astype(np.float32)).permute(0, 3, 1, 2)
            outs = gen(x.to(torch.device(device))).cpu().numpy()
            for pair, out in zip(block, outs):
                pred = _mask_from_output(out, variant, cfg.eval)
                true = pair.mask if pair.mask.shape[0] == work else resize_mask(center_crop_square(pair.mask), work, work)
                tp += int(np.sum((pred == 1) & (true == 1)))
                fp += int(np.sum((pred == 1) & (true == 0)))
                fn += int(np.sum((pred == 0) & (true == 1)))
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return {"precision": p, "recall": r, "f1": f1}


def _resize_sq(img, size):
    from .data import resize_image

    return resize_image(center_crop_square(img), size, size)


def cmd_evaluate_seg(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg, args)
    _, test_pairs = _seg_dataset(cfg)
    rows: dict[str, dict[str, float]] = {}
    paths = args.checkpoint or [str(aop_checkpoint_path(out, v)) for v in VARIANT_NAMES]
    for path in paths:
        ckpt = aop_net.load_checkpoint(_require(Path(path), "pretreatment checkpoint"))
        rows[ckpt["variant"]] = segmentation_scores(ckpt, test_pairs, cfg, _device())
    csv_path = out / "segmentation_scores.csv"
    report.write_segmentation_csv(rows, cfg.config_hash(), csv_path)
    print(f"{'variant':<10} {'precision':>9} {'recall':>9} {'f1':>9}")
    for variant, vals in rows.items():
        print(f"{variant:<10} {vals['precision']:>9.4f} {vals['recall']:>9.4f} {vals['f1']:>9.4f}")
    print(f"table written to {csv_path}")
    return 0


def _manifest_masks(cfg: RunConfig, corpus_root: Path) -> dict[str, np.ndarray]:
    """Ground-truth leaf masks for classification images, re-rasterized from
    the manifest's curve parameters and mapped to the classifier input
    geometry (center crop + nearest resize)."""
    manifest = _require(corpus_root / "manifest.csv", "corpus manifest with curve parameters")
    size = cfg.classifier.input_size
    masks = {}
    for row in synth.load_manifest(manifest):
        if row.split not in SPLITS:
            continue
        params = synth.parse_curve_params(row.curve_params)
        m = synth.rasterize_leaf_mask(params, cfg.synth.image_size)
        if m.shape[0] != size:
            m = resize_mask(center_crop_square(m), size, size)
        masks[row.filename] = m
    return masks


def _gradcam_overlap_mean(
    model, examples, images, masks_by_name, cfg, device, class_mode="predicted", limit=None
) -> float:
    limit = limit or cfg.eval.gradcam_images
    scores = []
    for ex, img in zip(examples[:limit], images[:limit]):
        mask = masks_by_name.get("classification/" + ex.name)
        if mask is None:
            continue
        if class_mode == "true":
            target = ex.label
        else:
            labels, _ = classifier.predict_batch(model, [img], device)
            target = labels[0]
        emap = gradcam.gradcam_map(img, model, target, device=device)
        scores.append(gradcam.overlap_score(emap, mask))
    if not scores:
        raise IngestionError("no manifest masks matched the requested examples")
    return float(np.mean(scores))


def run_comparison(cfg: RunConfig, out: Path) -> report.MetricsReport:
    """Train and evaluate the four classifier arms (identical seeds, only
    the pretreatment differs), plus segmentation scores per variant."""
    corpus_root = _corpus_dir(cfg)
    ds = _load_cls_dataset(cfg)
    _, seg_test = _seg_dataset(cfg)
    masks_by_name = _manifest_masks(cfg, corpus_root)
    device = _device()
    cfg_hash = cfg.config_hash()
    protocol_hash = cfg.classifier_protocol_hash()

    split_examples = {s: ds.split(s) for s in SPLITS}
    arms: dict[str, report.ArmMetrics] = {}
    seg_rows: dict[str, dict[str, float]] = {}

    for arm in report.ARM_ORDER:
        log.info("=== arm %s ===", arm)
        if arm == "none":
            arm_images = {s: [ex.image for ex in split_examples[s]] for s in SPLITS}
        else:
            pre = _pretreater(cfg, out, arm)
            seg_rows[arm] = segmentation_scores(
                aop_net.load_checkpoint(aop_checkpoint_path(out, arm)), seg_test, cfg, device
            )
            arm_images = {s: pre.batch([ex.image for ex in split_examples[s]]) for s in SPLITS}

        arm_sets = {
            s: [dataclasses.replace(ex, image=img) for ex, img in zip(split_examples[s], arm_images[s])]
            for s in SPLITS
        }
        ckpt = classifier.train_classifier(
            arm_sets["training"],
            arm_sets["validation"],
            cfg.cls_train,
            spec=cfg.classifier,
            recipe=cfg.cls_augment,
            pretreat_tag=None if arm == "none" else arm,
            device=device,
            init_seed=cfg.seeds.init,
            augment_seed=cfg.seeds.augment,
            shuffle_seed=cfg.seeds.shuffle,
            out_dir=out,
            config_hash=cfg_hash,
        )
        aop_net.save_checkpoint(ckpt, out / f"cls_{arm}.pt")
        model = classifier.load_classifier(ckpt, device)

        accs, confs = {}, {}
        from .metrics import accuracy, confusion_matrix

        for s in SPLITS:
            preds, _ = classifier.predict_batch(model, arm_images[s], device)
            truths = [ex.label for ex in split_examples[s]]
            accs[s] = accuracy(preds, truths)
            confs[s] = confusion_matrix(preds, truths)
        overlap = _gradcam_overlap_mean(
            model, split_examples["test"], arm_images["test"], masks_by_name, cfg, device,
            class_mode=cfg.eval.gradcam_class_mode,
        )
        arms[arm] = report.make_arm_metrics(arm, accs, confs, overlap)
        log.info(
            "arm %s: train %.3f val %.3f test %.3f gap %.3f overlap %.3f",
            arm, accs["training"], accs["validation"], accs["test"], arms[arm].gap, overlap,
        )

    prov = report.provenance(cfg_hash)
    prov["classifier_protocol_hash"] = protocol_hash
    rep = report.MetricsReport(prov, arms, seg_rows)
    rep.save_json(out / "report.json")
    report.write_accuracy_csv(rep, out / "accuracy_table.csv")
    report.write_segmentation_csv(seg_rows, cfg_hash, out / "segmentation_scores.csv")
    report.plot_accuracy_bars(rep, out / "accuracy_bars.png")
    report.plot_overlap_bars(rep, out / "overlap_bars.png")
    for arm, metrics in arms.items():
        report.plot_confusion(
            np.array(metrics.confusion["test"]), f"test confusion ({arm})",
            out / f"confusion_test_{arm}.png", cfg_hash,
        )
    return rep


def cmd_run_comparison(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg, args)
    rep = run_comparison(cfg, out)
    print(f"{'arm':<10} {'train':>7} {'val':>7} {'test':>7} {'gap':>7} {'overlap':>8}")
    for arm in report.ARM_ORDER:
        m = rep.arms[arm]
        print(
            f"{arm:<10} {m.split_accuracy['training']:>7.3f} {m.split_accuracy['validation']:>7.3f} "
            f"{m.split_accuracy['test']:>7.3f} {m.gap:>7.3f} {m.gradcam_overlap_mean:>8.3f}"
        )
    print(f"report written to {out / 'report.json'}")
    return 0


def cmd_gradcam(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg, args)
    ckpt = aop_net.load_checkpoint(_require(Path(args.checkpoint), "classifier checkpoint"))
    if ckpt.get("kind") != "classifier":
        raise UsageError(f"{args.checkpoint} is not a classifier checkpoint")
    model = classifier.load_classifier(ckpt, _device())
    ds = _load_cls_dataset(cfg)
    examples = ds.split(args.split)[: args.limit]
    masks = _manifest_masks(cfg, _corpus_dir(cfg))
    pre = None
    if ckpt.get("pretreat_variant"):
        pre = _pretreater(cfg, out, ckpt["pretreat_variant"])
    overlay_dir = out / "gradcam"
    overlay_dir.mkdir(parents=True, exist_ok=True)
    import csv as _csv

    csv_path = out / "gradcam_overlap.csv"
    with open(csv_path, "w", newline="") as fh:
        fh.write(f"# config_hash={cfg.config_hash()}\n")
        w = _csv.writer(fh)
        w.writerow(["filename", "true_class", "predicted_class", "target_class", "overlap"])
        for ex in examples:
            img = pre(ex.image) if pre else ex.image
            pred, _probs = classifier.predict_batch(model, [img], _device())
            target = ex.label if args.class_mode == "true" else pred[0]
            emap = gradcam.gradcam_map(img, model, target, device=_device())
            mask = masks.get("classification/" + ex.name)
            score = gradcam.overlap_score(emap, mask) if mask is not None else float("nan")
            blended = gradcam.overlay(img, emap)
            name = ex.name.replace("/", "_")
            arr = np.clip(np.rint(blended * 255.0), 0, 255).astype(np.uint8)
            PILImage.fromarray(arr).save(overlay_dir / f"{name}", format="PNG")
            w.writerow([ex.name, ex.label, pred[0], target, f"{score:.6f}"])
    print(f"overlays in {overlay_dir}, scores in {csv_path}")
    return 0


# ----------------------------------------------------------------- parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="aop", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="YAML run configuration (defaults when omitted)")
        p.add_argument("--seed", type=int, help="override all named seeds from this base value")
        p.add_argument("--out", help="output directory (overrides paths.out_dir)")

    p = sub.add_parser("synth-gen", help="generate the synthetic confounded corpus")
    common(p)
    p.set_defaults(fn=cmd_synth_gen)

    p = sub.add_parser("train-aop", help="train one pretreatment variant")
    common(p)
    p.add_argument("--variant", required=True, help="MAE_prob | MAE | SSIM")
    p.add_argument("--resume", action="store_true", help="resume from the existing checkpoint")
    p.set_defaults(fn=cmd_train_aop)

    p = sub.add_parser("train-classifier", help="train one classifier arm")
    common(p)
    p.add_argument("--arm", default="none", help="none | MAE_prob | MAE | SSIM")
    p.set_defaults(fn=cmd_train_classifier)

    p = sub.add_parser("pretreat", help="apply a pretreatment checkpoint to a directory of images")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_pretreat)

    p = sub.add_parser("evaluate-seg", help="segmentation P/R/F1 on held-out pairs")
    common(p)
    p.add_argument("--checkpoint", action="append", help="checkpoint path (repeatable; defaults to all variants)")
    p.set_defaults(fn=cmd_evaluate_seg)

    p = sub.add_parser("run-comparison", help="train/evaluate the four classifier arms")
    common(p)
    p.set_defaults(fn=cmd_run_comparison)

    p = sub.add_parser("gradcam", help="evidence maps, overlays, and overlap scores")
    common(p)
    p.add_argument("--checkpoint", required=True, help="classifier checkpoint")
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--limit", type=int, default=16)
    p.add_argument("--class-mode", default="predicted", choices=("predicted", "true"))
    p.set_defaults(fn=cmd_gradcam)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except aop_net.TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        if exc.dump_path:
            print(f"diagnostic state dumped to {exc.dump_path}", file=sys.stderr)
        return 3
    except (IngestionError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
