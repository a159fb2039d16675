"""AdamW training loop with cosine decay, evaluation hooks, and the ablation
matrix over fusion strategies and contrastive placements."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as D
from . import tensor as T
from .config import ModelConfig, TrainConfig
from .errors import ConfigError, EvalError, NumericsError
from .heads import gaussian_target, info_nce, kld_loss, total_loss
from .metrics import EvalReport, FrameCounts, aggregate, frame_counts
from .model import GazeAnticipationModel
from .tensor import Tensor


def cosine_lr(base: float, step: int, total_steps: int) -> float:
    """Cosine decay from ``base`` at step 0 towards 0 at ``total_steps``."""
    if total_steps <= 0:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr_t: float | None = None) -> None:
        lr = self.lr if lr_t is None else lr_t
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = p.data - lr * (update + self.weight_decay * p.data)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out


def clip_global_norm(params: dict[str, Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for p in params.values():
            p.grad = p.grad * scale
    return total


# -- batching ---------------------------------------------------------------------


def load_samples(manifests: list[D.ClipManifest], model_cfg: ModelConfig
                 ) -> list[D.ClipSample]:
    spec_size = model_cfg.audio.input_size if model_cfg.audio else model_cfg.image_size
    return [D.load_clip(m, image_size=model_cfg.video.input_size,
                        spec_size=spec_size) for m in manifests]


def collate(samples: list[D.ClipSample], model_cfg: ModelConfig):
    dt = T.default_dtype()
    frames = Tensor(np.stack([s.frames for s in samples]).astype(dt))
    specs = None
    if model_cfg.needs_audio:
        specs = Tensor(np.stack([s.spectrograms for s in samples]).astype(dt))
    targets, valid = [], []
    for s in samples:
        t, v = gaussian_target(s.gazes, model_cfg.image_size, model_cfg.image_size,
                               model_cfg.gaussian_kernel, model_cfg.gaussian_sigma)
        targets.append(t)
        valid.append(v)
    return frames, specs, np.stack(targets).astype(dt), np.stack(valid)


def uniform_baseline(samples: list[D.ClipSample], model_cfg: ModelConfig,
                     gamma: float = 0.5) -> EvalReport:
    """Score the uniform-prediction baseline on the same protocol; trained
    models must beat this for the synthetic signal to count as learned."""
    size = model_cfg.image_size
    flat = np.full((size, size), 1.0 / (size * size))
    counts = [frame_counts(flat, (x, y), future_index=t,
                           kernel=model_cfg.gaussian_kernel, gamma=gamma)
              for s in samples for t, (x, y, ok) in enumerate(s.gazes) if ok]
    if not counts:
        raise EvalError("no valid gaze frames in the evaluation split")
    return aggregate(counts, model_cfg.out_frames)


def evaluate_model(model: GazeAnticipationModel, samples: list[D.ClipSample],
                   gamma: float = 0.5, batch_size: int = 16) -> EvalReport:
    cfg = model.cfg
    counts: list[FrameCounts] = []
    with T.no_grad():
        for lo in range(0, len(samples), batch_size):
            chunk = samples[lo:lo + batch_size]
            frames, specs, _, _ = collate(chunk, cfg)
            heat = model(frames, specs).heatmaps.data
            for b, sample in enumerate(chunk):
                for t, (x, y, ok) in enumerate(sample.gazes):
                    if not ok:
                        continue
                    counts.append(frame_counts(heat[b, t], (x, y), future_index=t,
                                               kernel=cfg.gaussian_kernel, gamma=gamma))
    if not counts:
        raise EvalError("no valid gaze frames in the evaluation split")
    return aggregate(counts, cfg.out_frames)


# -- the training loop --------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint_path: Path
    metrics_path: Path
    report: EvalReport | None
    final_loss: float
    steps: int


def train(cfg: TrainConfig, corpus: Path | str, out_dir: Path | str,
          cache: dict | None = None) -> TrainResult:
    """Run the full recipe on a corpus directory and write ``checkpoint.bin``
    plus a JSON-lines metrics log into ``out_dir``.

    ``cache`` optionally shares preloaded samples between runs (the ablation
    matrix re-trains many models on one corpus).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    prev_dtype = "f64" if T.default_dtype() == np.float64 else "f32"
    T.set_precision(cfg.precision)
    try:
        return _train_inner(cfg, Path(corpus), out_dir, cache)
    finally:
        T.set_precision(prev_dtype)


def _train_inner(cfg: TrainConfig, corpus: Path, out_dir: Path,
                 cache: dict | None) -> TrainResult:
    model_cfg = cfg.model_config()
    rng = np.random.default_rng(cfg.seed)
    model = GazeAnticipationModel(model_cfg, rng)
    params = model.named_parameters()
    opt = AdamW(params, cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.adam_eps)

    manifest = corpus / "manifest.json" if corpus.is_dir() else corpus
    manifests = D.load_manifest(manifest)
    train_m, test_m = D.split_manifests(manifests)
    if not train_m:
        raise ConfigError(f"corpus {corpus} has no training clips")
    spec_size = model_cfg.audio.input_size if model_cfg.audio else model_cfg.image_size
    key = (model_cfg.video.input_size, spec_size)
    if cache is not None and key in cache:
        train_s, test_s = cache[key]
    else:
        train_s = load_samples(train_m, model_cfg)
        test_s = load_samples(test_m, model_cfg)
        if cache is not None:
            cache[key] = (train_s, test_s)

    steps_per_epoch = math.ceil(len(train_s) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    metrics_path = out_dir / "metrics.jsonl"
    ckpt_path = out_dir / "checkpoint.bin"
    step = 0
    final_loss = math.nan
    report: EvalReport | None = None

    with open(metrics_path, "w", encoding="utf-8") as log:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(train_s))
            for lo in range(0, len(train_s), cfg.batch_size):
                batch = [train_s[i] for i in order[lo:lo + cfg.batch_size]]
                frames, specs, targets, valid = collate(batch, model_cfg)
                lr_t = cosine_lr(cfg.lr, step, total_steps)
                try:
                    out = model(frames, specs)
                    kld = kld_loss(out.heatmaps, targets, valid)
                    cntr = None
                    if out.w_v is not None and len(batch) > 0:
                        cntr = info_nce(out.w_v, out.w_a, cfg.temperature)
                    loss = total_loss(kld, cntr, cfg.alpha)
                    model.zero_grads()
                    T.backward(loss)
                except NumericsError as e:
                    raise NumericsError(
                        f"training aborted at step {step} (epoch {epoch}): {e}") from e
                if cfg.grad_clip > 0:
                    clip_global_norm(params, cfg.grad_clip)
                opt.step(lr_t)
                kld_f = float(kld.item())
                cntr_f = float(cntr.item()) if cntr is not None else 0.0
                final_loss = kld_f + cfg.alpha * cntr_f
                record = {
                    "step": step, "epoch": epoch, "lr": lr_t,
                    "kld": kld_f, "cntr": cntr_f, "total": final_loss,
                }
                log.write(json.dumps(record, sort_keys=True) + "\n")
                step += 1
            if cfg.eval_every and test_s and (epoch + 1) % cfg.eval_every == 0:
                rep = evaluate_model(model, test_s, gamma=cfg.gamma)
                log.write(json.dumps({"epoch": epoch, "eval": rep.to_dict()},
                                     sort_keys=True) + "\n")
        if test_s:
            report = evaluate_model(model, test_s, gamma=cfg.gamma)
            log.write(json.dumps({"final_eval": report.to_dict()}, sort_keys=True) + "\n")

    config_blob = {"train": cfg.to_dict(), "model": model_cfg.to_dict()}
    D.save_checkpoint(ckpt_path, {k: p.data for k, p in params.items()},
                      config_blob, step=step, state=opt.state_tensors())
    return TrainResult(checkpoint_path=ckpt_path, metrics_path=metrics_path,
                       report=report, final_loss=final_loss, steps=step)


def load_model_from_checkpoint(path: Path | str) -> tuple[GazeAnticipationModel, dict]:
    ck = D.load_checkpoint(path)
    model_cfg = ModelConfig.from_dict(ck.config["model"])
    model = GazeAnticipationModel(model_cfg, np.random.default_rng(0))
    D.load_into_model(model, ck.params)
    return model, ck.config


# -- ablation matrix ---------------------------------------------------------------------


GRIDS = {
    "components": [("vision", "vision", "none"), ("s_fusion", "s_fusion", "none"),
                   ("t_fusion", "t_fusion", "none"), ("sts", "sts", "none"),
                   ("csts", "sts", "post")],
    "fusion": [("vision", "vision", "none"), ("linear", "linear", "none"),
               ("bilinear", "bilinear", "none"), ("concat", "concat", "none"),
               ("vanilla_sa", "vanilla_sa", "none"), ("sts", "sts", "none")],
    "contrastive": [("sts", "sts", "none"), ("sts+vanilla", "sts", "vanilla"),
                    ("sts+s", "sts", "s"), ("sts+t", "sts", "t"),
                    ("sts+cross", "sts", "cross"), ("csts", "sts", "post")],
}


def ablation_cells(kind: str, base: TrainConfig) -> list[tuple[str, TrainConfig]]:
    if kind not in GRIDS:
        raise ConfigError(f"unknown ablation grid {kind!r}; expected one of {sorted(GRIDS)}")
    cells = []
    for label, fusion, contrastive in GRIDS[kind]:
        cfg = TrainConfig.from_dict({**base.to_dict(),
                                     "fusion": fusion, "contrastive": contrastive})
        cells.append((label, cfg))
    return cells


def ablate(cells: list[tuple[str, TrainConfig]], corpus: Path | str,
           out_dir: Path | str, seeds: list[int] | None = None) -> list[dict]:
    """Train and evaluate every (cell, seed); per-cell failures are recorded
    and the grid continues. Returns one result row per run."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = seeds or [0]
    cache: dict = {}
    rows = []
    for label, cfg in cells:
        for seed in seeds:
            run_cfg = TrainConfig.from_dict({**cfg.to_dict(), "seed": seed})
            run_dir = out_dir / f"{label}_seed{seed}"
            t0 = time.time()
            row = {"label": label, "seed": seed, "config": run_cfg.to_dict()}
            try:
                result = train(run_cfg, corpus, run_dir, cache=cache)
                rep = result.report
                row.update(f1=rep.f1 if rep else None,
                           recall=rep.recall if rep else None,
                           precision=rep.precision if rep else None,
                           steps=result.steps, error=None)
            except Exception as e:  # cell failures must not kill the grid
                row.update(f1=None, recall=None, precision=None, steps=0,
                           error=f"{type(e).__name__}: {e}")
            row["seconds"] = round(time.time() - t0, 2)
            rows.append(row)
    _write_ablation_table(rows, out_dir)
    return rows


def _write_ablation_table(rows: list[dict], out_dir: Path) -> None:
    with open(out_dir / "ablation.json", "w", encoding="utf-8") as f:
        json.dump(rows, f, indent=2, sort_keys=True)
        f.write("\n")
    lines = ["label,seed,f1,recall,precision,steps,seconds,error"]
    for r in rows:
        fmt = lambda v: "" if v is None else (repr(v) if isinstance(v, float) else str(v))
        lines.append(",".join([r["label"], str(r["seed"]), fmt(r["f1"]),
                               fmt(r["recall"]), fmt(r["precision"]),
                               str(r["steps"]), str(r["seconds"]),
                               (r["error"] or "").replace(",", ";")]))
    (out_dir / "ablation.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def mean_f1(rows: list[dict], label: str) -> float:
    vals = [r["f1"] for r in rows if r["label"] == label and r["f1"] is not None]
    if not vals:
        raise EvalError(f"no successful runs for ablation cell {label!r}")
    return float(np.mean(vals))


# -- gradient verification across every module path ---------------------------------


def gradcheck_model(tolerance: float = 1e-4, seed: int = 0,
                    samples_per_param: int = 2,
                    h: float = 1e-5) -> tuple[bool, list[dict]]:
    """Finite-difference check of the full training loss against the analytic
    gradients, probing a component sample from every parameter of every
    module (desk scale, f64, contrastive path live).

    Returns (passed, per-module rows sorted by module name).
    """
    prev = "f64" if T.default_dtype() == np.float64 else "f32"
    T.set_precision("f64")
    try:
        cfg = TrainConfig.from_dict({"preset": "desk", "fusion": "sts",
                                     "contrastive": "post", "precision": "f64",
                                     "seed": seed})
        model_cfg = cfg.model_config()
        rng = np.random.default_rng(seed)
        model = GazeAnticipationModel(model_cfg, rng)
        params = model.named_parameters()

        g = np.random.default_rng(seed + 1)
        size = model_cfg.video.input_size
        frames = Tensor(g.random((2, 8, size, size, 3)))
        specs = Tensor(g.random((2, 8, size, size)))
        gazes = [[(0.3, 0.4, True), (0.7, 0.6, True)] * 4,
                 [(0.5, 0.5, True), (0.2, 0.8, False)] * 4]
        targets, valid = [], []
        for gz in gazes:
            t, v = gaussian_target(gz, size, size, model_cfg.gaussian_kernel,
                                   model_cfg.gaussian_sigma)
            targets.append(t)
            valid.append(v)
        targets = np.stack(targets)
        valid = np.stack(valid)

        def loss_fn(_ignored=None) -> Tensor:
            out = model(frames, specs)
            kld = kld_loss(out.heatmaps, targets, valid)
            cntr = info_nce(out.w_v, out.w_a, cfg.temperature)
            return total_loss(kld, cntr, cfg.alpha)

        modules: dict[str, dict] = {}
        pick = np.random.default_rng(seed + 2)
        for name, p in params.items():
            module = name.split(".", 1)[0]
            idx = sorted(pick.choice(p.size, size=min(samples_per_param, p.size),
                                     replace=False).tolist())
            err = T.finite_diff_check(loss_fn, p, h=h, indices=idx)
            row = modules.setdefault(module, {"module": module, "worst": -1.0,
                                              "param": "", "n_params": 0})
            row["n_params"] += 1
            if err > row["worst"]:
                row["worst"] = err
                row["param"] = name
        rows = sorted(modules.values(), key=lambda r: r["module"])
        passed = all(r["worst"] < tolerance for r in rows)
        return passed, rows
    finally:
        T.set_precision(prev)
