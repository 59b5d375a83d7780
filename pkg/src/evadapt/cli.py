"""Command-line surface: train / eval / significance / params / voxelize /
synth / gradcheck.

Evaluation masks come from a minimal stand-in head: a per-token linear
classifier over the final embeddings, rasterized back to patches,
thresholded, and split into instances by connected-component labeling.
It exists so the metric pipeline runs end to end; it is not a trained
decoder and its absolute numbers carry no meaning.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict

import numpy as np
import yaml

from . import _kernels, events as ev, synth
from .distill import DistillConfig
from .encoder import (TrainablePlan, ViTConfig, count_trainable,
                      forward_capture, init_params)
from .io import ConfigError, read_dump, read_masks, validate_keys, write_dump, write_masks
from .metrics import MaskSet, MetricsReport, compute_report, report_to_dict
from .significance import (convergence_diagnostic, token_significance,
                           transition_stack)
from .trainer import (TrainConfig, TrainState, load_checkpoint,
                      pipeline_grad_check, save_checkpoint, train)

_PLAN_SCHEMA = {"mode": None, "layers": None, "lora_rank": None,
                "lora_sites": {"kind": None, "layers": None}}

_CONFIG_SCHEMA = {
    "seed": None,
    "teacher_seed": None,
    "out_dir": None,
    "model": {k: None for k in ("img_size", "patch_size", "in_channels",
                                "embed_dim", "depth", "num_heads", "mlp_hidden")},
    "distill": {k: None for k in ("layers", "gammas", "gamma0", "beta",
                                  "mixing_ratio", "attention_source",
                                  "rollout_horizon", "seed")},
    "train": {k: None for k in ("epochs", "steps_per_epoch", "batch_size",
                                "lr", "decay_factor", "decay_epoch",
                                "adam_beta1", "adam_beta2", "adam_eps", "seed")},
    "plan": _PLAN_SCHEMA,
    "scene": {k: None for k in ("height", "width", "window_ms", "threshold",
                                "background", "noise_rate", "num_shapes",
                                "num_samples", "shapes")},
    "events": {k: None for k in ("bins", "signed", "normalize")},
}


def load_config(path) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}
    validate_keys(doc, _CONFIG_SCHEMA)
    return doc


def _model_config(doc: dict) -> ViTConfig:
    return ViTConfig(**doc.get("model", {}))


def _plan(doc: dict) -> TrainablePlan:
    p = dict(doc.get("plan", {}))
    if "layers" in p:
        p["layers"] = tuple(p["layers"])
    if "lora_sites" in p:
        p["lora_sites"] = (p["lora_sites"]["kind"],
                           tuple(p["lora_sites"]["layers"]))
    return TrainablePlan(**p)


def _distill_config(doc: dict) -> DistillConfig:
    d = dict(doc.get("distill", {}))
    if "layers" in d:
        d["layers"] = tuple(d["layers"])
    if "gammas" in d:
        d["gammas"] = tuple(d["gammas"])
    return DistillConfig(**d)


def _scene_spec(doc: dict, seed: int) -> synth.SceneSpec:
    s = dict(doc.get("scene", {}))
    num_shapes = s.pop("num_shapes", 2)
    shape_docs = s.pop("shapes", None)
    s.pop("num_samples", None)
    spec = synth.SceneSpec(**s, seed=seed)
    if shape_docs:
        spec.shapes = [synth.Shape(**sd) for sd in shape_docs]
    else:
        rng = np.random.default_rng(seed)
        H, W = spec.height, spec.width
        # cap the per-window travel at ~15% of the frame so shapes stay visible
        v_max = 0.15 * min(H, W) / max(spec.window_ms, 1.0)
        for i in range(num_shapes):
            kind = "rectangle" if i % 2 == 0 else "disk"
            size = float(rng.uniform(0.15, 0.3) * min(H, W))
            spec.shapes.append(synth.Shape(
                kind=kind,
                position=(float(rng.uniform(0.3, 0.7) * W),
                          float(rng.uniform(0.3, 0.7) * H)),
                size=(size, size),
                velocity=(float(rng.uniform(-v_max, v_max)),
                          float(rng.uniform(-v_max, v_max))),
                intensity=float(rng.uniform(0.5, 1.0)),
            ))
    return spec


def make_dataset(doc: dict, n: int, seed: int):
    """(image, normalized event volume) pairs from jittered scenes."""
    evc = doc.get("events", {})
    bins = evc.get("bins", 3)
    signed = evc.get("signed", False)
    normalize = evc.get("normalize", True)
    samples = []
    for i in range(n):
        spec = _scene_spec(doc, seed=seed + i)
        image = synth.render_frame(spec, spec.window_ms)
        stream = synth.generate_events(spec)
        window = (0, int(spec.window_ms * 1000))
        vol = ev.voxelize(stream, window, spec.height, spec.width,
                          B=bins, signed=signed)
        if normalize:
            vol = ev.normalize_volume(vol)
        samples.append((image, vol.grid, spec))
    return samples


# -- mask prediction head ---------------------------------------------------

def init_head(embed_dim: int, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    return {"head.w": rng.normal(0, 1.0, embed_dim), "head.b": np.zeros(1)}


def predict_masks(params, head: dict[str, np.ndarray],
                  volume: np.ndarray) -> MaskSet | None:
    """Threshold per-token logits, rasterize to patches, label components."""
    cfg = params.config
    capture = forward_capture(params, volume)
    final = capture.embeddings[-1].data
    logits = final @ head["head.w"] + head["head.b"][0]
    grid = (logits > 0).reshape(cfg.grid, cfg.grid)
    ps = cfg.patch_size
    pixel = np.kron(grid, np.ones((ps, ps), dtype=bool))
    labels, count = _kernels.label_components(pixel.astype(np.uint8))
    masks = [labels == i for i in range(1, count + 1)]
    if not masks:
        return None
    return MaskSet(masks=masks)


def _aggregate(reports: list[MetricsReport]) -> dict:
    agg = {
        "frames": len(reports),
        "mP": float(np.mean([r.mP for r in reports])),
        "mR": float(np.mean([r.mR for r in reports])),
        "mIoU": float(np.mean([r.mIoU for r in reports])),
        "aIoU": float(np.mean([r.aIoU for r in reports])),
        "tp": int(sum(r.tp for r in reports)),
        "fp": int(sum(r.fp for r in reports)),
        "fn": int(sum(r.fn for r in reports)),
    }
    for k in ("mP", "mR", "mIoU", "aIoU"):
        agg[k] = float(f"{agg[k]:.6f}")
    return agg


# -- subcommands ------------------------------------------------------------

def cmd_train(args) -> int:
    doc = load_config(args.config)
    seed = doc.get("seed", 0)
    out_dir = args.out or doc.get("out_dir", "out")
    os.makedirs(out_dir, exist_ok=True)
    config = _model_config(doc)
    plan = _plan(doc)
    dcfg = _distill_config(doc)
    tc = dict(doc.get("train", {}))
    tc.setdefault("seed", seed)
    tcfg = TrainConfig(**tc)
    scene = doc.get("scene", {})
    if scene.get("height", 32) != config.img_size or \
            scene.get("width", 32) != config.img_size:
        raise ConfigError("scene.height/width must equal model.img_size")
    n_samples = scene.get("num_samples", 8)
    data = [(img, vol) for img, vol, _ in make_dataset(doc, n_samples, seed)]
    teacher = init_params(config, seed=doc.get("teacher_seed", 0))
    student = teacher.copy()
    if plan.mode == "lora":
        from .encoder import apply_lora, lora_sites_for
        student = apply_lora(student, plan.lora_rank,
                             lora_sites_for(config, *plan.lora_sites),
                             seed=seed)
    state = TrainState.create(student, plan)
    state, history = train(teacher, state, data, tcfg, dcfg)
    head = init_head(config.embed_dim, seed)
    ckpt = os.path.join(out_dir, "checkpoint.evdt")
    save_checkpoint(ckpt, state, extra_meta={"seed": seed},
                    extra_tensors=head)
    csv_path = os.path.join(out_dir, "loss.csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        fields = sorted({k for row in history for k in row},
                        key=lambda k: (k != "step", k))
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(history)
    with open(os.path.join(out_dir, "config.resolved.yaml"), "w",
              encoding="utf-8") as fh:
        yaml.safe_dump(doc, fh, sort_keys=True)
    print(f"trained {len(history)} steps; "
          f"final loss {history[-1]['total']:.6f}; wrote {ckpt}")
    return 0


def cmd_eval(args) -> int:
    if args.pred_dir:
        return _eval_mask_dirs(args)
    if not args.checkpoint:
        print("eval: need --checkpoint or --pred-dir", file=sys.stderr)
        return 2
    doc = load_config(args.config)
    state, meta, extra = load_checkpoint(args.checkpoint)
    config = state.params.config
    if _model_config(doc) != config:
        raise ConfigError("config/checkpoint model shapes differ")
    head = {"head.w": extra["head.w"].astype(np.float64),
            "head.b": extra["head.b"].astype(np.float64)}
    seed = doc.get("seed", 0)
    n = doc.get("scene", {}).get("num_samples", 8)
    reports = []
    per_frame = []
    for i, (image, vol, spec) in enumerate(make_dataset(doc, n, seed)):
        gt = synth.ground_truth_masks(spec, spec.window_ms)
        pred = predict_masks(state.params, head, vol)
        if pred is None:
            pred = MaskSet(masks=[], ids=[])
        r = compute_report(gt, pred)
        reports.append(r)
        per_frame.append({"frame": i, **report_to_dict(r)})
    out = {"aggregate": _aggregate(reports), "frames": per_frame}
    _write_json(args.out, out)
    return 0


def _eval_mask_dirs(args) -> int:
    names = sorted(os.listdir(args.gt_dir))
    reports = []
    per_frame = []
    for name in names:
        if not name.endswith(".rle"):
            continue
        gmasks, gids, _ = read_masks(os.path.join(args.gt_dir, name))
        gt = MaskSet(masks=gmasks, ids=gids)
        ppath = os.path.join(args.pred_dir, name)
        if os.path.exists(ppath):
            pmasks, pids, _ = read_masks(ppath)
            pred = MaskSet(masks=pmasks, ids=pids)
        else:
            pred = MaskSet(masks=[], ids=[])
        r = compute_report(gt, pred)
        reports.append(r)
        per_frame.append({"frame": name, **report_to_dict(r)})
    if not reports:
        print("eval: no .rle mask files found", file=sys.stderr)
        return 2
    out = {"aggregate": _aggregate(reports), "frames": per_frame}
    _write_json(args.out, out)
    return 0


def _write_json(path, obj):
    text = json.dumps(obj, indent=2)
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def cmd_significance(args) -> int:
    tensors, _ = read_dump(args.attn)
    mats = list(tensors.values())
    ks = {m.shape for m in mats}
    if any(m.ndim != 2 or m.shape[0] != m.shape[1] for m in mats) or len(ks) != 1:
        print("significance: dump must hold equal-size square matrices",
              file=sys.stderr)
        return 2
    stack = transition_stack([m.astype(np.float64) for m in mats])
    sig = token_significance(stack, args.layer, args.beta)
    diag = convergence_diagnostic(stack)
    rows = [("significance", i, v) for i, v in enumerate(sig.values)]
    rows += [("prefix_gap", i, v) for i, v in enumerate(diag)]
    out = args.out
    fh = open(out, "w", newline="", encoding="utf-8") if out else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(["kind", "index", "value"])
        for kind, i, v in rows:
            w.writerow([kind, i, f"{v:.12g}"])
    finally:
        if out:
            fh.close()
    return 0


_PARAM_ROWS = [
    ("Embed", TrainablePlan(mode="embed")),
    ("Embed + Four MLPs", TrainablePlan(mode="embed+mlps", layers=(3, 6, 9, 12))),
    ("Embed + Four Blocks", TrainablePlan(mode="embed+blocks", layers=(3, 6, 9, 12))),
    ("Embed + All MLPs", TrainablePlan(mode="embed+all_mlps")),
    ("All", TrainablePlan(mode="all")),
    ("LoRA(Embed + Four MLPs, r=16)",
     TrainablePlan(mode="lora", lora_rank=16, lora_sites=("mlps", (3, 6, 9, 12)))),
    ("LoRA(Embed + Four MLPs, r=64)",
     TrainablePlan(mode="lora", lora_rank=64, lora_sites=("mlps", (3, 6, 9, 12)))),
    ("LoRA(Embed + Four MLPs, r=256)",
     TrainablePlan(mode="lora", lora_rank=256, lora_sites=("mlps", (3, 6, 9, 12)))),
    ("LoRA(Embed + All Blocks, r=16)",
     TrainablePlan(mode="lora", lora_rank=16,
                   lora_sites=("blocks", tuple(range(1, 13))))),
]


def cmd_params(args) -> int:
    if args.config:
        config = _model_config(load_config(args.config))
    else:
        from .encoder import VIT_B
        config = VIT_B
    total = count_trainable(config, TrainablePlan(mode="all"))
    print(f"{'Plan':36s} {'Trainable':>12s} {'% of total':>10s}")
    for label, plan in _PARAM_ROWS:
        try:
            n = count_trainable(config, plan)
        except ValueError:
            continue
        print(f"{label:36s} {n:12d} {100.0 * n / total:9.1f}%")
    return 0


def cmd_voxelize(args) -> int:
    stream, dims = ev.read_events(args.events)
    if dims is None:
        if args.height is None or args.width is None:
            print("voxelize: need --height/--width or a '# H= W=' header",
                  file=sys.stderr)
            return 2
        dims = (args.height, args.width)
    t_start = args.t_start
    t_end = args.t_end if args.t_end is not None else \
        (stream[-1].t if stream else t_start + 1)
    vol = ev.voxelize(stream, (t_start, t_end), dims[0], dims[1],
                      B=args.bins, signed=args.signed)
    if args.normalize:
        vol = ev.normalize_volume(vol)
    write_dump(args.out, {"volume": vol.grid},
               meta={"window": [t_start, t_end], "bins": args.bins})
    print(f"wrote {args.out}: volume {vol.grid.shape}, sum {vol.grid.sum():g}")
    return 0


def cmd_synth(args) -> int:
    doc = load_config(args.config) if args.config else {}
    spec = _scene_spec(doc, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    frame = synth.render_frame(spec, spec.window_ms)
    stream = synth.generate_events(spec)
    masks = synth.ground_truth_masks(spec, spec.window_ms)
    write_dump(os.path.join(args.out, "frame.evdt"), {"frame": frame})
    ev.write_events(os.path.join(args.out, "events.txt"), stream,
                    dims=(spec.height, spec.width))
    write_masks(os.path.join(args.out, "masks.rle"), masks.masks, masks.ids,
                shape=(spec.height, spec.width))
    with open(os.path.join(args.out, "scene.yaml"), "w", encoding="utf-8") as fh:
        yaml.safe_dump({"scene": {
            "height": spec.height, "width": spec.width,
            "window_ms": spec.window_ms, "threshold": spec.threshold,
            "background": spec.background, "noise_rate": spec.noise_rate,
            "shapes": [asdict(s) for s in spec.shapes],
        }, "seed": spec.seed}, fh, sort_keys=True)
    print(f"wrote sample to {args.out}: {len(stream)} events, "
          f"{len(masks)} masks")
    return 0


def cmd_gradcheck(args) -> int:
    doc = load_config(args.config) if args.config else {}
    config = _model_config(doc) if doc.get("model") else ViTConfig(
        img_size=8, patch_size=4, embed_dim=8, depth=2, num_heads=2,
        mlp_hidden=16)
    plan = _plan(doc) if doc.get("plan") else TrainablePlan(
        mode="embed+mlps", layers=(1, 2))
    dcfg = _distill_config(doc) if doc.get("distill") else DistillConfig(
        layers=(0, 1, 2), gammas=(0.5, 1.0), mixing_ratio=0.25)
    err = pipeline_grad_check(config, plan, dcfg, seed=args.seed,
                              step=args.step)
    print(f"max relative gradient error: {err:.3e}")
    return 0 if err <= 1e-4 else 1


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="evadapt")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("train", help="run the distillation training loop")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="segmentation metrics on synthetic data")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--gt-dir")
    p.add_argument("--pred-dir")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("significance", help="token significance + prefix gaps")
    p.add_argument("--attn", required=True)
    p.add_argument("--layer", type=int, default=1)
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_significance)

    p = sub.add_parser("params", help="trainable parameter counts per plan")
    p.add_argument("--config")
    p.set_defaults(fn=cmd_params)

    p = sub.add_parser("voxelize", help="events file -> volume dump")
    p.add_argument("--events", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--bins", type=int, default=3)
    p.add_argument("--t-start", type=int, default=0)
    p.add_argument("--t-end", type=int, default=None)
    p.add_argument("--signed", action="store_true")
    p.add_argument("--normalize", action="store_true")
    p.set_defaults(fn=cmd_voxelize)

    p = sub.add_parser("synth", help="generate a synthetic sample directory")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("gradcheck", help="full-pipeline gradient check")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-5)
    p.set_defaults(fn=cmd_gradcheck)

    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
