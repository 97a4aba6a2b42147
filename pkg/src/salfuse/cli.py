"""Command-line surface.

Subcommands: forward (saliency maps for one RGB-D pair), eval (directory
metrics), attr-eval (metrics grouped by ground-truth attributes), gradcheck
(finite-difference verification), train-toy (desk-scale fitting), ablate
(single-toggle variant comparison).

Exit codes: 0 success, 2 validation failure, 3 numerical failure,
4 gradient-check tolerance breach.
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import attributes, mapio, metrics, nn
from . import config as cfg_mod
from . import gradcheck as gradcheck_mod
from .config import ModelConfig, RunConfig
from .errors import NumericsError, SalfuseError, ValidationError
from .model import build_model, combine_specific_outputs
from .synth import Sample, make_dataset
from .train import predict_map, train_toy

# single-toggle variant matrix; each entry edits one model-config field
ABLATION_VARIANTS: dict[str, dict] = {
    "full": {},
    "A1": {"cim_mode": "concat_only"},
    "A2": {"cim_mode": "enhance_only"},
    "A3": {"cim_mode": "fuse_only"},
    "A4": {"cim_mode": "no_propagation"},
    "B1": {"mfa_mode": "off"},
    "B2": {"mfa_mode": "enhance_fusion"},
    "B3": {"mfa_mode": "concat"},
    "C1": {"specific_decoders": False},
    "C2": {},  # same model as full; scored on the combined modality maps
    "CIM1": {"cim_levels": 1},
    "CIM3": {"cim_levels": 3},
}

TOY_LR = 3e-3  # calibrated so the default toy run actually overfits


def toy_run_config() -> RunConfig:
    run = RunConfig()
    run.optimizer.lr = TOY_LR
    return run


# ---------------------------------------------------------------------------
# shared plumbing


def _load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return toy_run_config().validate()
    payload = cfg_mod.load_json(path)
    if isinstance(payload, dict) and "model" in payload:
        return cfg_mod.run_config_from_dict(payload)
    run = RunConfig(model=cfg_mod.model_config_from_dict(payload))
    run.optimizer.lr = TOY_LR
    return run.validate()


def _apply_seed(run: RunConfig, seed: int | None) -> RunConfig:
    if seed is not None:
        run.seed = seed
        run.model.seed = seed
    return run.validate()


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _paired_stems(pred_dir: Path, gt_dir: Path) -> list[str]:
    """Filename stems present in both directories; loud about strays."""
    if not pred_dir.is_dir():
        raise ValidationError(f"prediction directory not found: {pred_dir}")
    if not gt_dir.is_dir():
        raise ValidationError(f"ground-truth directory not found: {gt_dir}")
    pred = {p.stem for p in pred_dir.glob("*.png")}
    gt = {p.stem for p in gt_dir.glob("*.png")}
    only_pred = sorted(pred - gt)
    only_gt = sorted(gt - pred)
    if only_pred or only_gt:
        raise ValidationError(
            "unpaired files between directories: "
            f"prediction-only={only_pred}, ground-truth-only={only_gt}")
    if not pred:
        raise ValidationError("no .png pairs found to evaluate")
    return sorted(pred)


def _load_pairs(pred_dir: Path, gt_dir: Path) -> list[tuple[str, np.ndarray, np.ndarray]]:
    pairs = []
    for stem in _paired_stems(pred_dir, gt_dir):
        pred = mapio.load_map(pred_dir / f"{stem}.png")
        gt = mapio.load_gt(gt_dir / f"{stem}.png")
        if pred.shape != gt.shape:
            pred = np.clip(mapio.resize_bilinear(pred, *gt.shape), 0.0, 1.0)
        pairs.append((stem, pred, gt))
    return pairs


def _aggregate_dict(report: metrics.MetricsReport) -> dict:
    return {
        "num_images": report.num_images,
        "skipped_empty_gt": report.skipped_empty_gt,
        "e_variant": report.e_variant,
        "s_measure": report.mean_s_measure,
        "e_value": report.mean_e_value,
        "mae": report.mean_mae,
        "f_max": report.mean_f_max,
    }


def _per_image_rows(report: metrics.MetricsReport) -> list[list]:
    rows = []
    for r in report.per_image:
        rows.append([r.name, _fmt(r.s_measure), _fmt(r.e_value), _fmt(r.mae),
                     _fmt(r.f_max), int(r.empty_gt)])
    return rows


def _emit_report(report: metrics.MetricsReport, out_dir: Path, emit: str, stem: str) -> None:
    agg = _aggregate_dict(report)
    if emit in ("json", "both"):
        payload = {
            "aggregate": agg,
            "per_image": [{
                "name": r.name, "s_measure": r.s_measure, "e_value": r.e_value,
                "mae": r.mae, "f_max": r.f_max, "empty_gt": r.empty_gt,
            } for r in report.per_image],
        }
        _write_json(out_dir / f"{stem}.json", payload)
    if emit in ("csv", "both"):
        rows = _per_image_rows(report)
        rows.append(["mean", _fmt(agg["s_measure"]), _fmt(agg["e_value"]),
                     _fmt(agg["mae"]), _fmt(agg["f_max"]), ""])
        _write_csv(out_dir / f"{stem}.csv",
                   ["name", "s_measure", "e_value", "mae", "f_max", "empty_gt"], rows)
    if report.mean_precision is not None:
        curve_rows = [[t, _fmt(float(report.mean_precision[t])), _fmt(float(report.mean_recall[t])),
                       _fmt(float(report.mean_f_curve[t]))] for t in range(256)]
        _write_csv(out_dir / f"{stem}_curves.csv",
                   ["threshold", "precision", "recall", "f_measure"], curve_rows)


# ---------------------------------------------------------------------------
# subcommands


def cmd_forward(args) -> int:
    run = _apply_seed(_load_run_config(args.config), args.seed)
    model = build_model(run.model)
    model.load_state_dict(nn.load_params(args.weights))

    rgb = mapio.load_rgb(args.rgb)
    depth = mapio.load_map(args.depth)
    orig_h, orig_w = rgb.shape[1:]
    size = run.model.input_size
    from . import autodiff as ad
    rgb_in = ad.tensor(np.clip(mapio.resize_bilinear(rgb, size, size), 0.0, 1.0)[None])
    depth_in = ad.tensor(np.clip(mapio.resize_bilinear(depth, size, size), 0.0, 1.0)[None, None])
    out = model(rgb_in, depth_in)

    out_dir = Path(args.out)
    stem = Path(args.rgb).stem
    written = []

    def emit(logits, suffix: str) -> None:
        prob = np.asarray(ad.sigmoid(logits).data[0, 0], dtype=np.float64)
        restored = np.clip(mapio.resize_bilinear(prob, orig_h, orig_w), 0.0, 1.0)
        path = out_dir / f"{stem}_{suffix}.png"
        mapio.save_map(restored, path)
        written.append(path)

    emit(out.s_shared, "shared")
    if out.s_rgb is not None:
        emit(out.s_rgb, "rgb")
        emit(out.s_depth, "depth")
    for path in written:
        print(path)
    return 0


def cmd_eval(args) -> int:
    pairs = _load_pairs(Path(args.pred_dir), Path(args.gt_dir))
    report = metrics.evaluate_dataset(pairs, e_variant=args.e_variant, threads=args.threads)
    _emit_report(report, Path(args.out), args.emit, "eval_report")
    agg = _aggregate_dict(report)
    print(f"images={agg['num_images']} skipped_empty_gt={agg['skipped_empty_gt']} "
          f"s={agg['s_measure']:.4f} e_{agg['e_variant']}={agg['e_value']:.4f} "
          f"mae={agg['mae']:.4f} f_max={'-' if agg['f_max'] is None else format(agg['f_max'], '.4f')}")
    return 0


def cmd_attr_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    sidecar = attributes.read_sidecar(args.sidecar) if args.sidecar else None
    if args.attr == "sidecar" and sidecar is None:
        raise ValidationError("--attr sidecar requires --sidecar <csv>")
    pairs = _load_pairs(pred_dir, gt_dir)

    grouped: dict[str, list] = {}
    for stem, pred, gt in pairs:
        record = attributes.attribute_record(stem, gt)
        label = attributes.group_label(record, args.attr, sidecar)
        grouped.setdefault(label, []).append((stem, pred, gt))

    known = {"count": ("none", "single", "multiple"),
             "scale": ("small", "medium", "large")}.get(args.attr, tuple(sorted(grouped)))
    empty = [label for label in known if label not in grouped]

    out_dir = Path(args.out)
    groups_payload = {}
    csv_rows = []
    for label in sorted(grouped):
        report = metrics.evaluate_dataset(grouped[label], e_variant=args.e_variant, threads=args.threads)
        agg = _aggregate_dict(report)
        groups_payload[label] = agg
        csv_rows.append([label, agg["num_images"], _fmt(agg["s_measure"]), _fmt(agg["e_value"]),
                         _fmt(agg["mae"]), _fmt(agg["f_max"])])
        if args.emit in ("json", "csv", "both"):
            _emit_report(report, out_dir / f"group_{label}", args.emit, "eval_report")

    payload = {"attribute": args.attr, "groups": groups_payload, "empty_groups": empty}
    if args.emit in ("json", "both"):
        _write_json(out_dir / "attr_report.json", payload)
    if args.emit in ("csv", "both"):
        _write_csv(out_dir / "attr_report.csv",
                   ["group", "num_images", "s_measure", "e_value", "mae", "f_max"], csv_rows)
    for label in sorted(grouped):
        agg = groups_payload[label]
        print(f"{label}: images={agg['num_images']} s={agg['s_measure']:.4f} mae={agg['mae']:.4f}")
    if empty:
        print(f"note: empty groups omitted: {', '.join(empty)}")
    return 0


def cmd_gradcheck(args) -> int:
    run = _apply_seed(_load_run_config(args.config), args.seed)
    report = gradcheck_mod.check_gradients(run, samples=args.samples, seed=run.seed)
    payload = {
        "samples": [dataclasses.asdict(s) | {"index": list(s.index)} for s in report.samples],
        "max_rel_error": report.max_rel_error,
        "tolerance": report.tolerance,
        "passed": report.passed,
    }
    _write_json(Path(args.out) / "gradcheck.json", payload)
    worst = report.worst()
    print(f"samples={len(report.samples)} max_rel_error={report.max_rel_error:.3e} "
          f"tolerance={report.tolerance:.0e} worst={worst.parameter}{list(worst.index)} "
          f"passed={report.passed}")
    return 0 if report.passed else 4


def _load_triples_from_dir(data_dir: Path, size: int) -> list[Sample]:
    rgb_dir, depth_dir, gt_dir = data_dir / "rgb", data_dir / "depth", data_dir / "gt"
    for d in (rgb_dir, depth_dir, gt_dir):
        if not d.is_dir():
            raise ValidationError(f"data directory must contain rgb/, depth/, gt/; missing {d}")
    stems = sorted(p.stem for p in rgb_dir.glob("*.png"))
    if not stems:
        raise ValidationError(f"no .png files in {rgb_dir}")
    samples = []
    for stem in stems:
        paths = [rgb_dir / f"{stem}.png", depth_dir / f"{stem}.png", gt_dir / f"{stem}.png"]
        for p in paths[1:]:
            if not p.is_file():
                raise ValidationError(f"unpaired sample {stem!r}: missing {p}")
        rgb = mapio.load_rgb(paths[0])
        depth = mapio.load_map(paths[1])[None]
        gt = mapio.load_gt(paths[2])[None]
        if rgb.shape[1:] != (size, size):
            raise ValidationError(f"sample {stem!r}: images must be {size}x{size}, got {rgb.shape[1:]}")
        samples.append(Sample(name=stem, rgb=rgb, depth=depth, gt=gt))
    return samples


def cmd_train_toy(args) -> int:
    run = _apply_seed(_load_run_config(args.config), args.seed)
    if args.data_dir:
        samples = _load_triples_from_dir(Path(args.data_dir), run.model.input_size)
    else:
        samples = make_dataset(args.samples, run.model.input_size, run.seed)
    result = train_toy(run, samples, args.out)
    first, last = result.stats[0].mean_loss, result.stats[-1].mean_loss
    _write_json(Path(args.out) / "train_report.json", {
        "epochs": len(result.stats),
        "epoch1_loss": first,
        "final_loss": last,
        "loss_ratio": last / first,
        "train_mae": result.train_mae,
    })
    print(f"epochs={len(result.stats)} epoch1_loss={first:.4f} final_loss={last:.4f} "
          f"ratio={last / first:.4f} train_mae={result.train_mae:.4f}")
    print(result.weights_path)
    return 0


def cmd_ablate(args) -> int:
    base = _apply_seed(_load_run_config(args.config), args.seed)
    names = [v.strip() for v in args.variants.split(",") if v.strip()]
    if not names:
        raise ValidationError("no ablation variants given")
    unknown = [v for v in names if v not in ABLATION_VARIANTS]
    if unknown:
        raise ValidationError(f"unknown ablation variants {unknown}; "
                              f"known: {', '.join(ABLATION_VARIANTS)}")

    samples = make_dataset(args.samples, base.model.input_size, base.seed)
    out_dir = Path(args.out)
    rows = []
    table = {}
    for name in names:
        run = copy.deepcopy(base)
        for field, value in ABLATION_VARIANTS[name].items():
            setattr(run.model, field, value)
        run.validate()
        result = train_toy(run, samples, out_dir / name)
        model = build_model(run.model)
        model.load_state_dict(nn.load_params(result.weights_path))
        pairs = []
        for s in samples:
            if name == "C2":
                from . import autodiff as ad
                out = model(ad.tensor(s.rgb[None]), ad.tensor(s.depth[None]))
                pred = np.asarray(combine_specific_outputs(out).data[0, 0], dtype=np.float64)
            else:
                pred = predict_map(model, s)
            pairs.append((s.name, pred, s.gt[0]))
        report = metrics.evaluate_dataset(pairs)
        entry = {"s_measure": report.mean_s_measure, "mae": report.mean_mae,
                 "final_loss": result.stats[-1].mean_loss}
        table[name] = entry
        rows.append([name, _fmt(entry["s_measure"]), _fmt(entry["mae"]), _fmt(entry["final_loss"])])
        print(f"{name}: s={entry['s_measure']:.4f} mae={entry['mae']:.4f} "
              f"final_loss={entry['final_loss']:.4f}")

    _write_json(out_dir / "ablation.json", {"seed": base.seed, "variants": table})
    _write_csv(out_dir / "ablation.csv", ["variant", "s_measure", "mae", "final_loss"], rows)
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="salfuse",
        description="Two-stream RGB-D saliency fusion: forward passes, evaluation, "
                    "toy training, gradient checking, ablation sweeps.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON run config (or bare model config)")
        p.add_argument("--seed", type=int, default=None, help="override config seeds")
        p.add_argument("--threads", type=int, default=1, help="worker threads for evaluation")
        p.add_argument("--out", default=".", help="output directory")

    p = sub.add_parser("forward", help="saliency maps for one RGB-D pair")
    common(p)
    p.add_argument("--weights", required=True, help="trained parameter container")
    p.add_argument("--rgb", required=True, help="colour image (PNG)")
    p.add_argument("--depth", required=True, help="depth map (8-bit gray PNG)")
    p.set_defaults(func=cmd_forward)

    def eval_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--pred-dir", required=True, help="directory of prediction maps")
        p.add_argument("--gt-dir", required=True, help="directory of ground-truth maps")
        p.add_argument("--emit", choices=("json", "csv", "both"), default="both")
        p.add_argument("--e-variant", choices=("max", "mean"), default="max")

    p = sub.add_parser("eval", help="score prediction maps against ground truth")
    common(p)
    eval_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attr-eval", help="score predictions grouped by GT attributes")
    common(p)
    eval_flags(p)
    p.add_argument("--attr", choices=("count", "scale", "sidecar"), default="scale")
    p.add_argument("--sidecar", help="CSV of stem,label rows for sidecar grouping")
    p.set_defaults(func=cmd_attr_eval)

    p = sub.add_parser("gradcheck", help="verify backpropagation against finite differences")
    common(p)
    p.add_argument("--samples", type=int, default=32, help="parameter entries to probe")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train-toy", help="fit the model on synthetic or on-disk triples")
    common(p)
    p.add_argument("--data-dir", help="directory with rgb/, depth/, gt/ subdirectories")
    p.add_argument("--samples", type=int, default=5, help="synthetic sample count")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("ablate", help="train and score single-toggle model variants")
    common(p)
    p.add_argument("--variants", default=",".join(ABLATION_VARIANTS),
                   help="comma-separated variant names")
    p.add_argument("--samples", type=int, default=5, help="synthetic sample count")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericsError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (SalfuseError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
