"""Command-line interface.

Commands: synth, augment, train-toy, infer, eval, render, gradcheck,
nms-demo. Scene sets live in directories holding one .rimg image and one
.gt.jsonl box file per scene plus a manifest.json index; everything is
seeded, so any command rerun with the same arguments produces identical
bytes. All failures exit nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import gradsuite, io, pipeline, synth
from .augment import carve_candidate, copy_paste, flip, rotate
from .grad import ContractError, ShapeError
from .io import BoxRecord, FormatError
from .metakernel import AggMode, MetaInput
from .postproc import IouKind, Proposal, WnmsConfig, standard_nms, weighted_nms
from .rimg import RangeImage

PROFILES = {"vehicle": synth.ClassProfile(), "ped": synth.PED_PROFILE}
META_BY_NAME = {m.value: m for m in MetaInput}
AGG_BY_NAME = {a.value: a for a in AggMode}
IOU_KINDS = {"bev": IouKind.BEV, "3d": IouKind.IOU_3D}


def _write_manifest(out_dir: str, entries, seed: int, extra=None) -> None:
    manifest = {"seed": seed, "scenes": entries}
    if extra:
        manifest.update(extra)
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _read_manifest(data_dir: str) -> dict:
    path = os.path.join(data_dir, "manifest.json")
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def _load_scene(data_dir: str, entry: dict):
    img = io.read_rimg(os.path.join(data_dir, entry["image"]))
    records = io.read_boxes_jsonl(os.path.join(data_dir, entry["boxes"]))
    return img, records


def cmd_synth(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    profile = dataclasses.replace(
        PROFILES[args.profile],
        radius_range=(args.radius_min, args.radius_max),
        yaw_range=(-args.yaw_max, args.yaw_max))
    beams = synth.default_beam_table(args.rows, args.fov_top, args.fov_bottom)
    entries = []
    for i in range(args.scenes):
        scene_seed = args.seed + i
        spec = synth.random_scene(scene_seed, num_boxes=args.boxes, profile=profile,
                                  width=args.width, beam_table=beams)
        img, gts = synth.raycast(spec)
        name = f"scene_{i:03d}"
        io.write_rimg(os.path.join(args.out, f"{name}.rimg"), img)
        io.write_boxes_jsonl(
            os.path.join(args.out, f"{name}.gt.jsonl"),
            [BoxRecord(b, profile.name) for b in gts])
        entries.append({"name": name, "image": f"{name}.rimg",
                        "boxes": f"{name}.gt.jsonl", "seed": scene_seed})
    _write_manifest(args.out, entries, args.seed,
                    {"class": profile.name, "width": args.width, "rows": args.rows})
    print(f"wrote {len(entries)} scenes to {args.out}")
    return 0


def cmd_augment(args) -> int:
    manifest = _read_manifest(args.data)
    ops = [s.strip() for s in args.ops.split(",") if s.strip()]
    unknown = set(ops) - {"rotate", "flip", "copy-paste"}
    if unknown:
        raise ValueError(f"unknown augment ops: {sorted(unknown)}")
    os.makedirs(args.out, exist_ok=True)
    scenes = [_load_scene(args.data, e) for e in manifest["scenes"]]
    entries, provenance = [], []
    for i, (entry, (img, records)) in enumerate(zip(manifest["scenes"], scenes)):
        rng = np.random.default_rng(args.seed + i)
        boxes = [r.box for r in records]
        cls = records[0].cls if records else manifest.get("class", "VEHICLE_LIKE")
        log = {"scene": entry["name"], "applied": []}
        if "rotate" in ops:
            k = int(rng.integers(0, img.width))
            img, boxes = rotate(img, boxes, k)
            log["applied"].append({"op": "rotate", "k_cols": k})
        if "flip" in ops and rng.uniform() < 0.5:
            img, boxes = flip(img, boxes, axis="y")
            log["applied"].append({"op": "flip", "axis": "y"})
        if "copy-paste" in ops and len(scenes) > 1:
            donor_img, donor_records = scenes[(i + 1) % len(scenes)]
            if donor_records:
                pick = int(rng.integers(0, len(donor_records)))
                shift = int(rng.integers(0, img.width))
                try:
                    cand = carve_candidate(donor_img, donor_records[pick].box, shift)
                except ValueError:
                    cand = None
                if cand is not None:
                    img, boxes, accepted = copy_paste(img, boxes, cand)
                    log["applied"].append({"op": "copy-paste", "donor": pick,
                                           "shift_cols": shift, "accepted": accepted})
        name = entry["name"]
        io.write_rimg(os.path.join(args.out, f"{name}.rimg"), img)
        io.write_boxes_jsonl(os.path.join(args.out, f"{name}.gt.jsonl"),
                             [BoxRecord(b, cls) for b in boxes])
        entries.append({"name": name, "image": f"{name}.rimg",
                        "boxes": f"{name}.gt.jsonl", "seed": args.seed + i})
        provenance.append(log)
    _write_manifest(args.out, entries, args.seed,
                    {"class": manifest.get("class", "VEHICLE_LIKE"),
                     "augmented_from": os.path.abspath(args.data)})
    with open(os.path.join(args.out, "provenance.json"), "w", encoding="utf-8") as f:
        json.dump(provenance, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"wrote {len(entries)} augmented scenes to {args.out}")
    return 0


def _parse_grid(rows: str, cols: str):
    rr = [int(v) for v in rows.split(",") if v.strip()]
    cc = [int(v) for v in cols.split(",") if v.strip()]
    if not rr or not cc:
        raise ValueError("grid rows and cols must each list at least one offset")
    return tuple((r, c) for r in rr for c in cc)


def _model_from_args(args) -> pipeline.ToyModel:
    return pipeline.ToyModel(c_hidden=args.hidden, meta=META_BY_NAME[args.meta],
                             agg_mode=AGG_BY_NAME[args.agg], seed=args.seed,
                             grid=_parse_grid(args.grid_rows, args.grid_cols))


def cmd_train_toy(args) -> int:
    manifest = _read_manifest(args.data)
    scenes = []
    for entry in manifest["scenes"]:
        img, records = _load_scene(args.data, entry)
        scenes.append((img, [r.box for r in records]))
    model = _model_from_args(args)
    log_lines = []

    def log(it, losses):
        line = f"iter {it:4d}  total {losses[0]:.6f}  cls {losses[1]:.6f}  reg {losses[2]:.6f}"
        log_lines.append(line)
        print(line)

    model, history = pipeline.train_toy_model(
        model, scenes, args.iterations, args.step_size, log=log, batch=args.batch,
        cls_weight=args.cls_weight)
    fingerprint = io.config_fingerprint(model.config_dict())
    io.save_checkpoint(args.ckpt, model.param_arrays(), fingerprint)
    if args.log:
        with open(args.log, "w", encoding="utf-8") as f:
            f.write("\n".join(log_lines) + "\n")
    first, last = history[0][0], history[-1][0]
    print(f"saved checkpoint to {args.ckpt}  (initial loss {first:.4f}, final {last:.4f})")
    return 0


def _model_from_checkpoint(path: str) -> pipeline.ToyModel:
    params, fingerprint = io.load_checkpoint(path)
    try:
        cfg = json.loads(fingerprint)
    except json.JSONDecodeError as e:
        raise ContractError(f"checkpoint fingerprint is not valid JSON: {e}") from e
    model = pipeline.ToyModel(c_hidden=int(cfg["c_hidden"]),
                              meta=META_BY_NAME[cfg["meta"]],
                              agg_mode=AGG_BY_NAME[cfg["agg_mode"]],
                              relu_weights=bool(cfg["relu_weights"]),
                              grid=tuple(tuple(o) for o in cfg["grid"]))
    expected = io.config_fingerprint(model.config_dict())
    if expected != fingerprint:
        raise ContractError("checkpoint fingerprint does not match this build's config")
    model.load_param_arrays(params)
    return model


def cmd_infer(args) -> int:
    model = _model_from_checkpoint(args.ckpt)
    manifest = _read_manifest(args.data)
    cfg = WnmsConfig(score_threshold=args.score_threshold,
                     iou_threshold=args.iou_threshold,
                     iou_kind=IOU_KINDS[args.iou_kind])
    os.makedirs(args.out, exist_ok=True)
    cls = manifest.get("class", "VEHICLE_LIKE")
    entries = []
    for entry in manifest["scenes"]:
        img, _ = _load_scene(args.data, entry)
        props = pipeline.infer(model, img, cfg, use_standard=(args.nms == "standard"))
        name = entry["name"]
        io.write_boxes_jsonl(os.path.join(args.out, f"{name}.det.jsonl"),
                             [BoxRecord(p.box, cls, p.score) for p in props])
        entries.append({"name": name, "detections": f"{name}.det.jsonl",
                        "count": len(props)})
        print(f"{name}: {len(props)} detections")
    with open(os.path.join(args.out, "detections.json"), "w", encoding="utf-8") as f:
        json.dump({"nms": args.nms, "scenes": entries}, f, indent=2, sort_keys=True)
        f.write("\n")
    return 0


def cmd_eval(args) -> int:
    from .evalap import EvalConfig, bucketed_ap_multi

    manifest = _read_manifest(args.data)
    pairs = []
    for entry in manifest["scenes"]:
        _, records = _load_scene(args.data, entry)
        gts = [r.box for r in records]
        det_path = os.path.join(args.dets, f"{entry['name']}.det.jsonl")
        dets = [Proposal(r.box, r.score if r.score is not None else 0.0)
                for r in io.read_boxes_jsonl(det_path)]
        pairs.append((dets, gts))
    cfg = EvalConfig(iou_threshold=args.iou, iou_kind=IOU_KINDS[args.kind])
    report = bucketed_ap_multi(pairs, cfg)
    doc = report.to_dict()
    doc.update({"iou_threshold": args.iou, "iou_kind": args.kind,
                "num_scenes": len(pairs)})
    text = json.dumps(doc, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text + "\n")
    print(text)
    return 0


def cmd_render(args) -> int:
    img = io.read_rimg(args.image)
    fg_mask = None
    if args.gt:
        from .assign import label_pixels
        records = io.read_boxes_jsonl(args.gt)
        fg_mask = label_pixels(img, [r.box for r in records]).foreground_mask
    pixels = io.render_range_channel(img, fg_mask)
    io.write_pnm(args.out, pixels)
    print(f"wrote {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    ok, _ = gradsuite.run_suite(report=print)
    print("gradient suite: " + ("all checks passed" if ok else "FAILURES"))
    return 0 if ok else 1


def cmd_nms_demo(args) -> int:
    records = io.read_boxes_jsonl(args.props)
    props = [Proposal(r.box, r.score if r.score is not None else 0.0) for r in records]
    cfg = WnmsConfig(score_threshold=args.score_threshold,
                     iou_threshold=args.iou_threshold,
                     iou_kind=IOU_KINDS[args.iou_kind])
    weighted = weighted_nms(props, cfg)
    standard = standard_nms(props, cfg)

    def fmt(p):
        b = p.box
        return (f"score {p.score:.3f}  c=({b.cx:+7.2f},{b.cy:+7.2f},{b.cz:+6.2f})  "
                f"dims=({b.length:.2f},{b.width:.2f},{b.height:.2f})  yaw {b.yaw:+.3f}")

    print(f"{len(props)} proposals in, weighted -> {len(weighted)}, "
          f"standard -> {len(standard)}")
    print("weighted:")
    for p in weighted:
        print("  " + fmt(p))
    print("standard:")
    for p in standard:
        print("  " + fmt(p))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rvdet",
                                 description="Range-view detection toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate ray-cast scenes")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--scenes", type=int, default=50)
    p.add_argument("--boxes", type=int, default=1)
    p.add_argument("--profile", choices=sorted(PROFILES), default="vehicle")
    p.add_argument("--width", type=int, default=96)
    p.add_argument("--rows", type=int, default=20)
    p.add_argument("--fov-top", type=float, default=2.0,
                   help="top beam inclination, degrees")
    p.add_argument("--fov-bottom", type=float, default=-20.0,
                   help="bottom beam inclination, degrees")
    p.add_argument("--radius-min", type=float, default=5.0)
    p.add_argument("--radius-max", type=float, default=9.0)
    p.add_argument("--yaw-max", type=float, default=0.8,
                   help="headings are drawn uniformly from [-yaw-max, yaw-max]")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("augment", help="rotate/flip/copy-paste a scene set")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--ops", default="rotate,flip,copy-paste",
                   help="comma list from: rotate, flip, copy-paste")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train-toy", help="train the toy detector")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--iterations", type=int, default=500)
    p.add_argument("--step-size", type=float, default=0.3)
    p.add_argument("--batch", type=int, default=15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--meta", choices=sorted(META_BY_NAME), default="rel_xyz_range")
    p.add_argument("--agg", choices=sorted(AGG_BY_NAME), default="concat_fc")
    p.add_argument("--cls-weight", type=float, default=pipeline.CLS_WEIGHT,
                   help="classification term weight in the training objective")
    p.add_argument("--grid-rows", default="-2,0,2",
                   help="comma list of trunk stencil row offsets")
    p.add_argument("--grid-cols", default="-6,-3,0,3,6",
                   help="comma list of trunk stencil column offsets")
    p.add_argument("--log", default=None, help="also write loss lines to this file")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("infer", help="run a checkpoint over a scene set")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--nms", choices=("weighted", "standard"), default="weighted")
    p.add_argument("--score-threshold", type=float, default=0.5)
    p.add_argument("--iou-threshold", type=float, default=0.5)
    p.add_argument("--iou-kind", choices=sorted(IOU_KINDS), default="bev")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="bucketed AP of detections vs ground truth")
    p.add_argument("--dets", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--iou", type=float, default=0.7)
    p.add_argument("--kind", choices=sorted(IOU_KINDS), default="bev")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="range channel to PGM/PPM")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gt", default=None,
                   help="box file; foreground pixels are tinted in the output")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("nms-demo", help="weighted vs standard NMS side by side")
    p.add_argument("--props", required=True)
    p.add_argument("--score-threshold", type=float, default=0.5)
    p.add_argument("--iou-threshold", type=float, default=0.5)
    p.add_argument("--iou-kind", choices=sorted(IOU_KINDS), default="bev")
    p.set_defaults(func=cmd_nms_demo)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FormatError, ContractError, ShapeError, ValueError, OSError,
            json.JSONDecodeError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
