"""Command-line workflow around one workspace directory.

Subcommands: gen-dataset, train-enhancer, train-detector, optimize,
evaluate. Each stage records its outputs in workspace.json so later
stages find them; identical inputs and seed reproduce identical bytes.
Exit codes: 0 success, 2 configuration problems, 3 numeric failures.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict

import numpy as np

from camotex import __version__, io
from camotex.config import (Config, config_from_dict, config_to_dict,
                            load_config)
from camotex.detector import DetectorModel, train_detector
from camotex.errors import ConfigError, NumericError
from camotex.render import EnhancerModel, TextureMap, train_enhancer
from camotex.optim import AdamState, optimize_texture

log = logging.getLogger(__name__)

WORKSPACE_FILE = "workspace.json"

# default step budget for the evaluate-stage comparison runs (gamma sweep,
# loss ablation); short of the full optimize budget to keep studies cheap
STUDY_STEPS = 150


# ---------------------------------------------------------------------------
# checkpoint bundles

def save_enhancer(path, model: EnhancerModel, state: AdamState, meta: dict):
    tensors = dict(model.params())
    tensors.update(state.tensors("opt_"))
    full = {"kind": "enhancer", "leaky_slope": model.leaky_slope,
            "hidden": int(model.w1.shape[-1]), "lr": state.lr,
            "adam_t": state.t}
    full.update(meta)
    io.write_bundle(path, tensors, full)


def load_enhancer(path):
    tensors, meta = io.read_bundle(path)
    if meta.get("kind") != "enhancer":
        raise ConfigError(f"{path} is not an enhancer checkpoint")
    model = EnhancerModel(tensors["w1"], tensors["b1"], tensors["w2"],
                          tensors["b2"], meta["leaky_slope"])
    state = AdamState(meta["lr"])
    state.t = int(meta["adam_t"])
    for k in model.params():
        state.m[k] = tensors[f"opt_m_{k}"]
        state.v[k] = tensors[f"opt_v_{k}"]
    return model, state, meta


def save_detector(path, model: DetectorModel, state: AdamState, meta: dict):
    tensors = dict(model.params())
    tensors.update(state.tensors("opt_"))
    full = {"kind": "detector", "channels": list(model.channels),
            "classes": model.classes, "leaky_slope": model.leaky_slope,
            "lr": state.lr, "adam_t": state.t}
    full.update(meta)
    io.write_bundle(path, tensors, full)


def load_detector(path):
    tensors, meta = io.read_bundle(path)
    if meta.get("kind") != "detector":
        raise ConfigError(f"{path} is not a detector checkpoint")
    weights = {k: tensors[k] for k in tensors if not k.startswith("opt_")}
    model = DetectorModel(weights, meta["channels"], meta["classes"],
                          meta["leaky_slope"])
    state = AdamState(meta["lr"])
    state.t = int(meta["adam_t"])
    for k in model.params():
        state.m[k] = tensors[f"opt_m_{k}"]
        state.v[k] = tensors[f"opt_v_{k}"]
    return model, state, meta


def history_csv(path, rows, fields):
    lines = [",".join(fields)]
    for r in rows:
        lines.append(",".join(
            f"{r[f]:.8f}" if isinstance(r[f], float) else str(r[f])
            for f in fields))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# workspace manifest

def write_workspace(out_dir, ws):
    io.write_json(Path(out_dir) / WORKSPACE_FILE, ws)


def load_workspace(out_dir, require=()):
    """Read the manifest and verify every referenced path still exists."""
    path = Path(out_dir) / WORKSPACE_FILE
    if not path.exists():
        raise ConfigError(
            f"no workspace manifest at {path}; run gen-dataset first")
    ws = io.read_json(path)
    for key in require:
        if key not in ws.get("paths", {}):
            raise ConfigError(
                f"workspace {out_dir} has no {key!r} artifact yet; "
                f"run the stage that produces it first")
    for key, rel in ws.get("paths", {}).items():
        if not (Path(out_dir) / rel).exists():
            raise ConfigError(
                f"workspace references missing {key} at {rel}")
    return ws


def resolve_config(args, ws=None) -> Config:
    """Config file > workspace echo > defaults, then flag overrides."""
    if args.config:
        cfg = load_config(args.config)
    elif ws is not None and ws.get("config"):
        cfg = config_from_dict(ws["config"])
    else:
        cfg = Config()
        cfg.validate()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    if args.deterministic:
        cfg.deterministic = True
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_dataset(args) -> int:
    from camotex.scene import generate_dataset

    cfg = resolve_config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    echo = config_to_dict(cfg)
    # per-view seed streams make any thread count byte-identical
    manifest = generate_dataset(cfg.scene, out / "dataset", cfg.seed,
                                threads=cfg.threads, config_echo=echo)
    ws = {
        "version": __version__,
        "config": echo,
        "seeds": {"gen-dataset": cfg.seed},
        "paths": {"dataset": "dataset",
                  "dataset_manifest": "dataset/manifest.json"},
    }
    write_workspace(out, ws)
    n_train = sum(1 for s in manifest["samples"] if s["split"] == "train")
    print(f"dataset: {len(manifest['samples'])} views "
          f"({n_train} train), workspace {out}")
    return 0


def _load_dataset(out_dir, ws, split):
    from camotex.scene import load_split, load_textures

    dataset_dir = Path(out_dir) / ws["paths"]["dataset"]
    manifest = io.read_json(dataset_dir / "manifest.json")
    samples = load_split(dataset_dir, manifest, split)
    pool, specials = load_textures(dataset_dir, manifest)
    return manifest, samples, pool, specials


def cmd_train_enhancer(args) -> int:
    ws = load_workspace(args.out_dir, require=("dataset",))
    cfg = resolve_config(args, ws)
    _, samples, pool, _ = _load_dataset(args.out_dir, ws, "train")
    ec = cfg.enhancer
    epochs = args.epochs if args.epochs is not None else ec.epochs
    models_dir = Path(args.out_dir) / "models"
    models_dir.mkdir(exist_ok=True)
    ckpt = models_dir / "enhancer.tnsb"

    resume = None
    prev_history = []
    if args.resume:
        if not ckpt.exists():
            raise ConfigError(f"cannot resume: {ckpt} does not exist")
        model, state, meta = load_enhancer(ckpt)
        prev_history = meta.get("history", [])
        resume = (model, state, int(meta["epochs_done"]))
        if resume[2] >= epochs:
            raise ConfigError(
                f"checkpoint already has {resume[2]} epochs; raise --epochs")

    model, history, state = train_enhancer(
        samples, pool, epochs, ec.learning_rate, cfg.seed,
        batch_size=ec.batch_size, leaky_slope=ec.leaky_slope,
        hidden=ec.hidden, resume=resume, log_every=1)
    full_history = prev_history + history
    save_enhancer(ckpt, model, state,
                  {"epochs_done": epochs, "seed": cfg.seed,
                   "history": full_history})
    history_csv(models_dir / "enhancer_history.csv", full_history,
                ["epoch", "train_loss", "holdout_l1"])
    ws["paths"]["enhancer"] = "models/enhancer.tnsb"
    ws["paths"]["enhancer_history"] = "models/enhancer_history.csv"
    ws.setdefault("seeds", {})["train-enhancer"] = cfg.seed
    write_workspace(args.out_dir, ws)
    last = full_history[-1]
    print(f"enhancer: {epochs} epochs, train L1 {last['train_loss']:.5f}, "
          f"holdout L1 {last['holdout_l1']:.5f}")
    return 0


def cmd_train_detector(args) -> int:
    ws = load_workspace(args.out_dir, require=("dataset",))
    cfg = resolve_config(args, ws)
    _, samples, _, specials = _load_dataset(args.out_dir, ws, "train")
    dc = cfg.detector
    epochs = args.epochs if args.epochs is not None else dc.epochs
    models_dir = Path(args.out_dir) / "models"
    models_dir.mkdir(exist_ok=True)
    ckpt = models_dir / "detector.tnsb"

    resume = None
    prev_history = []
    if args.resume:
        if not ckpt.exists():
            raise ConfigError(f"cannot resume: {ckpt} does not exist")
        model, state, meta = load_detector(ckpt)
        prev_history = meta.get("history", [])
        resume = (model, state, int(meta["epochs_done"]))
        if resume[2] >= epochs:
            raise ConfigError(
                f"checkpoint already has {resume[2]} epochs; raise --epochs")

    model, history, state = train_detector(
        samples, specials, epochs, dc.learning_rate, cfg.seed,
        batch_size=dc.batch_size, channels=dc.channels, classes=dc.classes,
        leaky_slope=dc.leaky_slope, box_weight=dc.box_loss_weight,
        resume=resume, log_every=1)
    full_history = prev_history + history
    save_detector(ckpt, model, state,
                  {"epochs_done": epochs, "seed": cfg.seed,
                   "history": full_history})
    history_csv(models_dir / "detector_history.csv", full_history,
                ["epoch", "train_loss"])
    ws["paths"]["detector"] = "models/detector.tnsb"
    ws["paths"]["detector_history"] = "models/detector_history.csv"
    ws.setdefault("seeds", {})["train-detector"] = cfg.seed
    write_workspace(args.out_dir, ws)
    print(f"detector: {epochs} epochs, "
          f"train loss {full_history[-1]['train_loss']:.5f}")
    return 0


def make_snapshot_grid(run_dir, cols=4, pad=2):
    """Tile the periodic texture snapshots into one overview image."""
    run_dir = Path(run_dir)
    paths = sorted(run_dir.glob("texture_step*.ppm"))
    final = run_dir / "texture_final.ppm"
    if final.exists():
        paths.append(final)
    if not paths:
        return None
    tiles = [io.read_ppm(p) for p in paths]
    h, w = tiles[0].shape[:2]
    cols = min(cols, len(tiles))
    rows = (len(tiles) + cols - 1) // cols
    grid = np.ones((rows * h + (rows + 1) * pad,
                    cols * w + (cols + 1) * pad, 3), np.float32)
    for i, tile in enumerate(tiles):
        r, c = divmod(i, cols)
        y = pad + r * (h + pad)
        x = pad + c * (w + pad)
        grid[y:y + h, x:x + w] = tile
    out = run_dir / "snapshot_grid.ppm"
    io.write_ppm(out, grid)
    return out


def cmd_optimize(args) -> int:
    ws = load_workspace(args.out_dir,
                        require=("dataset", "enhancer", "detector"))
    cfg = resolve_config(args, ws)
    rc = cfg.optimize
    lc = cfg.losses
    if args.init is not None:
        rc.init_strategy = args.init
    if args.max_steps is not None:
        rc.max_steps = args.max_steps
    if args.no_iou_loss:
        rc.use_iou_loss = False
    if args.no_smooth_loss:
        rc.use_smooth_loss = False
    if args.gamma is not None:
        lc.gamma = args.gamma
    rc.validate()
    lc.validate()

    _, samples, _, _ = _load_dataset(args.out_dir, ws, rc.dataset_split)
    enhancer, _, _ = load_enhancer(Path(args.out_dir) / ws["paths"]["enhancer"])
    detector, _, _ = load_detector(Path(args.out_dir) / ws["paths"]["detector"])
    run_dir = Path(args.out_dir) / "runs" / args.run_name
    texture, history = optimize_texture(samples, detector, enhancer, rc, lc,
                                        cfg.seed, out_dir=run_dir)
    make_snapshot_grid(run_dir)
    rel = f"runs/{args.run_name}"
    ws["paths"][f"run_{args.run_name}"] = rel
    if args.run_name == "optimize":
        ws["paths"]["adversarial_texture"] = f"{rel}/texture_final.tnsr"
    ws.setdefault("seeds", {})[f"optimize:{args.run_name}"] = cfg.seed
    write_workspace(args.out_dir, ws)
    print(f"optimize: {len(history)} steps, final total loss "
          f"{history[-1]['total_loss']:.5f}, texture in {run_dir}")
    return 0


def _parse_texture_args(pairs):
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise ConfigError(
                f"--texture wants NAME=PATH, got {item!r}")
        name, path = item.split("=", 1)
        if not Path(path).exists():
            raise ConfigError(f"texture file {path} does not exist")
        out[name] = TextureMap(io.read_tnsr(path), role="adversarial")
    return out


def cmd_evaluate(args) -> int:
    from camotex import evaluate as ev
    from camotex.render import retexture

    ws = load_workspace(args.out_dir, require=("dataset", "detector"))
    cfg = resolve_config(args, ws)
    out = Path(args.out_dir)
    reports = out / "reports"
    reports.mkdir(exist_ok=True)
    _, test_samples, _, specials = _load_dataset(args.out_dir, ws, "test")
    detector, _, _ = load_detector(out / ws["paths"]["detector"])

    if args.dumps:
        rows = io.read_detections(args.dumps)
        gts = ev.gt_map(test_samples)
        records = ev.dump_to_records(rows)
        merge = tuple(cfg.evaluate.merge_classes)
        report = [{"source": Path(args.dumps).name,
                   "ap50": ev.average_precision(records, gts,
                                                cfg.evaluate.ap_iou, merge),
                   "adr": ev.adr(records, gts, cfg.evaluate.adr_conf,
                                 cfg.evaluate.ap_iou, merge)}]
        ev.rows_to_csv(report, reports / "dump_report.csv")
        print(f"dump report: AP@0.5 {report[0]['ap50']:.4f} "
              f"ADR {report[0]['adr']:.4f}")
        ws["paths"]["reports"] = "reports"
        write_workspace(args.out_dir, ws)
        return 0

    textures: Dict[str, TextureMap] = dict(specials)
    adv_rel = ws["paths"].get("adversarial_texture")
    if adv_rel:
        textures["adversarial"] = TextureMap(io.read_tnsr(out / adv_rel),
                                             role="adversarial")
    textures.update(_parse_texture_args(args.texture))

    table = ev.compare_textures(textures, test_samples, detector,
                                cfg.evaluate)
    ev.rows_to_csv(table, reports / "texture_comparison.csv")
    for name in textures:
        _, _, records = ev.evaluate_texture(test_samples, detector,
                                            textures[name], cfg.evaluate)
        io.write_detections(reports / f"detections_{name}.txt",
                            ev.records_to_dump(records))

    overlay_tex = textures.get("adversarial", textures["base"])
    for s in test_samples[:args.saliency_count]:
        img = retexture(s, overlay_tex)
        heat = ev.ablation_saliency(img, detector, s.b_gt,
                                    grid=cfg.evaluate.saliency_grid)
        io.write_ppm(reports / f"saliency_{s.sample_id}.ppm",
                     ev.saliency_overlay(img, heat))

    if not args.no_sweep or not args.no_init_study or args.loss_ablation:
        if "enhancer" not in ws["paths"]:
            raise ConfigError(
                "gamma sweep / init study need the enhancer checkpoint; "
                "run train-enhancer or pass --no-sweep --no-init-study")
        enhancer, _, _ = load_enhancer(out / ws["paths"]["enhancer"])
        _, train_samples, _, _ = _load_dataset(args.out_dir, ws, "train")
        steps = args.sweep_steps
        if not args.no_sweep:
            rows = ev.run_gamma_sweep(
                train_samples, test_samples, detector, enhancer,
                cfg.optimize, cfg.losses, cfg.evaluate,
                gammas=(0.01, 0.1, 1.0, 10.0, 100.0), seed=cfg.seed,
                max_steps=steps)
            ev.rows_to_csv(rows, reports / "gamma_sweep.csv")
        if not args.no_init_study:
            rows = ev.run_init_study(
                train_samples, test_samples, detector, enhancer,
                cfg.optimize, cfg.losses, cfg.evaluate, seed=cfg.seed,
                max_steps=steps)
            ev.rows_to_csv(rows, reports / "init_study.csv")
        if args.loss_ablation:
            rows = ev.run_loss_ablation(
                train_samples, test_samples, detector, enhancer,
                cfg.optimize, cfg.losses, cfg.evaluate, seed=cfg.seed,
                max_steps=steps)
            ev.rows_to_csv(rows, reports / "loss_ablation.csv")

    ws["paths"]["reports"] = "reports"
    write_workspace(args.out_dir, ws)
    for row in table:
        print(f"{row['texture']:>12}: AP@0.5 {row['ap50']:.4f} "
              f"ADR {row['adr']:.4f}")
    return 0


# ---------------------------------------------------------------------------
# argument plumbing

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="camotex",
        description="Adversarial body-texture pipeline: synthetic scenes, "
                    "surrogate detector, constrained texture optimization.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--threads", type=int,
                        help="worker threads for dataset generation")
    common.add_argument("--deterministic", action="store_true",
                        help="force fixed reduction order")
    common.add_argument("--out-dir", default="workspace",
                        help="workspace directory (default: ./workspace)")

    g = sub.add_parser("gen-dataset", parents=[common],
                       help="render the synthetic view dataset")
    g.set_defaults(func=cmd_gen_dataset)

    for name, fn in (("train-enhancer", cmd_train_enhancer),
                     ("train-detector", cmd_train_detector)):
        t = sub.add_parser(name, parents=[common],
                           help=f"{name.split('-')[1]} training")
        t.add_argument("--epochs", type=int, help="override epoch count")
        t.add_argument("--resume", action="store_true",
                       help="continue from the saved checkpoint")
        t.set_defaults(func=fn)

    o = sub.add_parser("optimize", parents=[common],
                       help="run the texture attack")
    o.add_argument("--run-name", default="optimize",
                   help="subdirectory under runs/ for this attack")
    o.add_argument("--init", choices=("zeros", "ones", "random", "base"),
                   help="override the starting texture")
    o.add_argument("--gamma", type=float, help="override smoothness weight")
    o.add_argument("--max-steps", type=int, help="override the step budget")
    o.add_argument("--no-iou-loss", action="store_true",
                   help="drop the box-overlap term")
    o.add_argument("--no-smooth-loss", action="store_true",
                   help="drop the smoothness term")
    o.set_defaults(func=cmd_optimize)

    e = sub.add_parser("evaluate", parents=[common],
                       help="metrics, sweeps, and saliency reports")
    e.add_argument("--texture", action="append", metavar="NAME=PATH",
                   help="extra texture to evaluate (repeatable)")
    e.add_argument("--dumps", help="score an external detection dump "
                                   "instead of rendering")
    e.add_argument("--no-sweep", action="store_true",
                   help="skip the smoothness-weight sweep")
    e.add_argument("--no-init-study", action="store_true",
                   help="skip the initialization study")
    e.add_argument("--loss-ablation", action="store_true",
                   help="also compare class-only vs class+overlap attacks")
    e.add_argument("--sweep-steps", type=int, default=STUDY_STEPS,
                   help=f"step budget per sweep run (default {STUDY_STEPS})")
    e.add_argument("--saliency-count", type=int, default=4,
                   help="number of saliency overlays (default 4)")
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        log.error("%s", e)
        return 2
    except NumericError as e:
        log.error("numeric failure: %s", e)
        return 3
    except FileNotFoundError as e:
        log.error("missing file: %s", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
