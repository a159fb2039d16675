"""Command-line surface: train, eval, synth, gradcheck, ablate, dump-attn,
render-pred. All output is file-based (PNG/CSV/JSON plus figures); exit codes
are 0 success, 1 verification/eval failure, 2 usage error, 3 I/O error."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path


def _cap_threads() -> None:
    """Honour CSTS_THREADS before numpy/BLAS get imported."""
    cap = os.environ.get("CSTS_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, cap)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="csts",
        description="Audio-visual egocentric gaze anticipation: training, "
                    "evaluation, synthetic data, and verification tooling.")
    sub = parser.add_subparsers(dest="command", required=True)

    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", type=Path, default=None,
                        help="JSON file with training-config fields")
    shared.add_argument("--seed", type=int, default=None, help="run seed")
    shared.add_argument("--out", type=Path, default=None, help="output directory")
    shared.add_argument("--precision", choices=["f32", "f64"], default=None,
                        help="float width for the run")

    def train_like(p):
        p.add_argument("--corpus", type=Path, required=True,
                       help="corpus directory or manifest path")
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--batch-size", type=int, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--fusion", default=None)
        p.add_argument("--contrastive", default=None)
        p.add_argument("--alpha", type=float, default=None)
        p.add_argument("--eval-every", type=int, default=None)
        p.add_argument("--gamma", type=float, default=None,
                       help="binarization threshold for evaluation")

    p = sub.add_parser("train", parents=[shared], help="train one model")
    train_like(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[shared], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--gamma", type=float, default=0.5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", parents=[shared], help="generate a synthetic corpus")
    p.add_argument("--clips", type=int, default=20)
    p.add_argument("--cue-validity", type=float, default=0.9)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--fps", type=float, default=20.0)
    p.add_argument("--frames", choices=["png", "packed"], default="png")
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck", parents=[shared],
                       help="finite-difference check of every module path")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", parents=[shared], help="run an ablation grid")
    train_like(p)
    p.add_argument("--grid", choices=["components", "fusion", "contrastive"],
                   default="components")
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dump-attn", parents=[shared],
                       help="write spatial-fusion correlation maps for a clip")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--clip", required=True, help="clip id from the manifest")
    p.set_defaults(func=cmd_dump_attn)

    p = sub.add_parser("render-pred", parents=[shared],
                       help="write predicted-heatmap overlays for a clip")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--clip", required=True)
    p.set_defaults(func=cmd_render_pred)

    return parser


# -- helpers ----------------------------------------------------------------------


def _load_train_config(args):
    from .config import TrainConfig
    cfg = TrainConfig.from_json(args.config) if args.config else TrainConfig(
        preset="desk", epochs=3, batch_size=8, lr=1e-3, precision="f32")
    overrides = {
        "seed": args.seed, "precision": args.precision,
        "epochs": getattr(args, "epochs", None),
        "batch_size": getattr(args, "batch_size", None),
        "lr": getattr(args, "lr", None),
        "fusion": getattr(args, "fusion", None),
        "contrastive": getattr(args, "contrastive", None),
        "alpha": getattr(args, "alpha", None),
        "eval_every": getattr(args, "eval_every", None),
        "gamma": getattr(args, "gamma", None),
    }
    d = cfg.to_dict()
    d.update({k: v for k, v in overrides.items() if v is not None})
    return type(cfg).from_dict(d)


def _write_report(report, out_dir: Path) -> None:
    from .viz import per_frame_figure
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out_dir / "report.txt").write_text(report.to_text() + "\n", encoding="utf-8")
    (out_dir / "per_frame.csv").write_text(report.per_frame_csv(), encoding="utf-8")
    per_frame_figure(report, out_dir / "per_frame_f1.png")


def _checkpoint_model(args):
    from . import tensor as T
    from .training import load_model_from_checkpoint
    model, blob = load_model_from_checkpoint(args.checkpoint)
    T.set_precision(blob["train"].get("precision", "f64"))
    return model, blob


def _find_clip(corpus: Path, clip_id: str):
    from .data import load_manifest
    manifest = corpus / "manifest.json" if corpus.is_dir() else corpus
    for m in load_manifest(manifest):
        if m.clip_id == clip_id:
            return m
    from .errors import DataError
    raise DataError(f"clip {clip_id!r} not found in {manifest}")


def _clip_sample(model, manifest):
    from .data import load_clip
    cfg = model.cfg
    spec_size = cfg.audio.input_size if cfg.audio else cfg.image_size
    return load_clip(manifest, image_size=cfg.video.input_size, spec_size=spec_size)


# -- command handlers ------------------------------------------------------------------


def cmd_train(args) -> int:
    from .training import train
    from .viz import loss_curve_figure
    cfg = _load_train_config(args)
    out = args.out or Path("runs/train")
    result = train(cfg, args.corpus, out)
    cfg.save_json(out / "config.json")
    loss_curve_figure(result.metrics_path, out / "loss_curve.png")
    print(f"trained {result.steps} steps, final loss {result.final_loss:.4f}")
    if result.report is not None:
        _write_report(result.report, out)
        print(result.report.to_text())
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    from .data import load_manifest, split_manifests
    from .training import evaluate_model, load_samples
    model, _ = _checkpoint_model(args)
    manifest = args.corpus / "manifest.json" if args.corpus.is_dir() else args.corpus
    train_m, test_m = split_manifests(load_manifest(manifest))
    chosen = train_m if args.split == "train" else test_m
    samples = load_samples(chosen, model.cfg)
    report = evaluate_model(model, samples, gamma=args.gamma)
    out = args.out or Path("runs/eval")
    _write_report(report, out)
    print(report.to_text())
    return 0


def cmd_synth(args) -> int:
    from .data import synth_generate
    out = args.out or Path("runs/corpus")
    manifest = synth_generate(out, args.clips, args.seed or 0,
                              cue_validity=args.cue_validity,
                              image_size=args.image_size, fps=args.fps,
                              frames_format=args.frames,
                              train_fraction=args.train_fraction)
    print(f"wrote {args.clips} clips, manifest: {manifest}")
    return 0


def cmd_gradcheck(args) -> int:
    from .training import gradcheck_model
    passed, rows = gradcheck_model(tolerance=args.tolerance, seed=args.seed or 0)
    for r in rows:
        status = "ok" if r["worst"] < args.tolerance else "FAIL"
        print(f"{r['module']:<22} max rel err {r['worst']:.3e}  "
              f"[{r['param']}]  {status}")
    if passed:
        print(f"gradient check passed at tolerance {args.tolerance:g}")
        return 0
    worst = max(rows, key=lambda r: r["worst"])
    print(f"gradient check FAILED at tolerance {args.tolerance:g}: "
          f"{worst['param']} has rel err {worst['worst']:.3e}", file=sys.stderr)
    return 1


def cmd_ablate(args) -> int:
    from .training import ablate, ablation_cells
    from .viz import ablation_figure
    cfg = _load_train_config(args)
    seeds = [int(s) for s in str(args.seeds).split(",") if s != ""]
    cells = ablation_cells(args.grid, cfg)
    out = args.out or Path("runs/ablate")
    rows = ablate(cells, args.corpus, out, seeds=seeds)
    ablation_figure(rows, out / "ablation_f1.png")
    for r in rows:
        f1 = "failed" if r["f1"] is None else f"{r['f1']:.4f}"
        err = f"  ({r['error']})" if r["error"] else ""
        print(f"{r['label']:<14} seed {r['seed']}: f1 {f1}{err}")
    print(f"table: {out / 'ablation.csv'}")
    return 0


def cmd_dump_attn(args) -> int:
    import numpy as np
    from . import tensor as T
    from .tensor import Tensor
    from .viz import save_grayscale, save_overlay
    model, _ = _checkpoint_model(args)
    if model.cfg.fusion not in ("s_fusion", "sts"):
        from .errors import ConfigError
        raise ConfigError(f"checkpoint uses fusion {model.cfg.fusion!r}, which has "
                          "no spatial correlation weights to dump")
    manifest = _find_clip(args.corpus, args.clip)
    sample = _clip_sample(model, manifest)
    dt = T.default_dtype()
    with T.no_grad():
        out = model(Tensor(sample.frames.astype(dt)),
                    Tensor(sample.spectrograms.astype(dt)), capture=True)
    maps = out.correlation_maps()                      # (T, H, W)
    out_dir = args.out or Path("runs/attn")
    out_dir.mkdir(parents=True, exist_ok=True)
    stride = sample.frames.shape[0] // maps.shape[0]
    count = 0
    for k in range(maps.shape[0]):
        save_grayscale(maps[k], out_dir / f"clip_{manifest.clip_id}_t{k}_attn.png",
                       upscale_to=model.cfg.image_size * 4)
        save_overlay(sample.frames[k * stride], maps[k],
                     out_dir / f"clip_{manifest.clip_id}_t{k}_overlay.png")
        count += 2
    print(f"wrote {count} files to {out_dir}")
    return 0


def cmd_render_pred(args) -> int:
    import numpy as np
    from . import tensor as T
    from .data import read_frames, resize_frames
    from .tensor import Tensor
    from .viz import save_overlay
    model, _ = _checkpoint_model(args)
    manifest = _find_clip(args.corpus, args.clip)
    sample = _clip_sample(model, manifest)
    dt = T.default_dtype()
    specs = Tensor(sample.spectrograms.astype(dt)) if model.cfg.needs_audio else None
    with T.no_grad():
        out = model(Tensor(sample.frames.astype(dt)), specs)
    heat = out.heatmaps.data                          # (T_out, H, W)
    future = read_frames(manifest.frames_path, sample.future_indices)
    future = resize_frames(future, model.cfg.image_size).astype(np.float64) / 255.0
    out_dir = args.out or Path("runs/pred")
    out_dir.mkdir(parents=True, exist_ok=True)
    for k in range(heat.shape[0]):
        x, y, ok = sample.gazes[k]
        suffix = "pred" if ok else "pred_nogt"
        save_overlay(future[k], heat[k],
                     out_dir / f"clip_{manifest.clip_id}_f{k}_{suffix}.png",
                     dot=(x, y) if ok else None)
    print(f"wrote {heat.shape[0]} files to {out_dir}")
    return 0


def main(argv=None) -> int:
    _cap_threads()
    parser = build_parser()
    args = parser.parse_args(argv)
    from .errors import (ConfigError, ContractError, DataError, EvalError,
                         NumericsError, ShapeError, StateError)
    try:
        return args.func(args)
    except (DataError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (ConfigError, ContractError, ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (EvalError, NumericsError, StateError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
