"""Desk-scale training loop, evaluation, ablation runner and the collapse demonstration."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .container import write_container
from .errors import DegenerateDataError, NumericalError, ValidationError
from .fixtures import CaptionedClip, make_corpus
from .lfq import utilization
from .metrics import level_utilization, perplexity, psnr, ssim
from .model import Batch, RunConfig, Tokenizer, make_batch
from .objectives import LossWeights

log = logging.getLogger(__name__)

EVAL_CLIPS = 16


def corpus_for(config: RunConfig) -> list[CaptionedClip]:
    return make_corpus(config.n_clips, (config.frames, config.height, config.width), seed=config.data_seed,
                       levels=config.levels, max_objects=config.max_objects)


def eval_batch(config: RunConfig, clips: list[CaptionedClip]) -> Batch:
    return make_batch(clips[:EVAL_CLIPS], 0.0, None, config.spatial_budget, config.text_dim)


def evaluate(model: Tokenizer, batch: Batch, weights: LossWeights | None = None) -> dict:
    """Unmasked, deterministic metrics; ``total`` uses ``weights`` (default: the model's)."""
    weights = weights or model.config.weights
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = model(batch)
        lb = model.losses(batch, codeword_seed=0, out=out)
        x_hat = out.x_hat.clamp(0, 1)
    model.train(was_training)
    d = lb.as_dict(weights)
    d["psnr"] = psnr(batch.video, x_hat)
    d["ssim"] = ssim(batch.video, x_hat)
    d["utilization"] = level_utilization(out.q_levels, model.codebook.size)
    d["ar_perplexity"] = perplexity(d["ar"])
    return d


@dataclass
class TrainResult:
    model: Tokenizer
    history: list[dict]
    initial: dict
    final: dict
    config: RunConfig
    extra: dict = field(default_factory=dict)

    def report(self) -> dict:
        recon = [h["recon"] for h in self.history]
        trend = None
        if len(recon) >= 4:
            q = max(1, len(recon) // 4)
            trend = {"first_quarter_mean": float(np.mean(recon[:q])), "last_quarter_mean": float(np.mean(recon[-q:])),
                     "decreasing": bool(np.mean(recon[-q:]) < np.mean(recon[:q]))}
        return {"config": self.config.to_dict(), "initial": self.initial, "final": self.final,
                "history": self.history, "trend": trend, **self.extra}


def train_toy(config: RunConfig, clips: list[CaptionedClip] | None = None, out_dir: str | Path | None = None,
              steps: int | None = None) -> TrainResult:
    """AdamW on the weighted total objective over the seeded toy corpus.

    Raises ``NumericalError`` (carrying the step index) on a non-finite loss.
    """
    steps = config.steps if steps is None else steps
    if steps < 0:
        raise ValidationError("steps must be >= 0")
    clips = clips if clips is not None else corpus_for(config)
    if not clips:
        raise ValidationError("empty corpus")
    model = Tokenizer(config)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    sched = (torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(steps, 1))
             if config.lr_schedule == "cosine" else None)
    ev = eval_batch(config, clips)
    initial = evaluate(model, ev)
    order_gen = torch.Generator().manual_seed(config.seed)
    order: list[int] = []
    history = []
    model.train()
    for step in range(steps):
        if len(order) < config.batch_size:
            order += torch.randperm(len(clips), generator=order_gen).tolist()
        idx, order = order[: config.batch_size], order[config.batch_size:]
        batch = make_batch([clips[i] for i in idx], config.mask_ratio, config.seed * 1_000_003 + step,
                           config.spatial_budget, config.text_dim)
        lb = model.losses(batch, codeword_seed=step, skip_unweighted=True)
        total = lb.total(config.weights)
        if not torch.isfinite(total):
            raise NumericalError(f"non-finite loss at step {step}", step=step)
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        if sched is not None:
            sched.step()
        rec = lb.as_dict(config.weights)
        rec["step"] = step
        history.append(rec)
        if step % 50 == 0:
            log.info("step %d total %.4f recon %.4f", step, rec["total"], rec["recon"])
    final = evaluate(model, ev)
    result = TrainResult(model, history, initial, final, config)
    if out_dir is not None:
        save_run(result, Path(out_dir))
    return result


def save_run(result: TrainResult, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_container(out / "checkpoint.lpq", {k: v for k, v in result.model.state_dict().items()})
    with open(out / "history.jsonl", "w", encoding="utf-8") as f:
        for rec in result.history:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(out / "report.json", "w", encoding="utf-8") as f:
        json.dump(result.report(), f, indent=2, sort_keys=True)


# -- ablations ------------------------------------------------------------------

AXES = {
    "quantizer": ["vq", "gvq", "rvq", "lfq", "lapq"],
    "levels": [2, 3, 4],
    "losses": ["full", "no_drift", "no_ar"],
}


def ablation_cell(base: RunConfig, axis: str, value) -> RunConfig:
    if axis == "quantizer":
        return base.replace(quantizer=value)
    if axis == "levels":
        return base.replace(levels=int(value))
    if axis == "losses":
        w = base.weights
        weights = {"full": w, "no_drift": LossWeights(w.recon, w.codebook, w.ar, 0.0),
                   "no_ar": LossWeights(w.recon, w.codebook, 0.0, w.drift)}
        if value not in weights:
            raise ValidationError(f"unknown loss ablation {value!r}")
        return base.replace(weights=dataclasses.asdict(weights[value]))
    raise ValidationError(f"unknown ablation axis {axis!r}")


def _run_cell(args) -> dict:
    base, axis, value = args
    cfg = ablation_cell(base, axis, value)
    res = train_toy(cfg)
    f = res.final
    full = base.weights
    total_full = (full.recon * f["recon"] + full.codebook * f["codebook"] + full.ar * f["ar"]
                  + full.drift * f["drift"])
    return {
        "axis": axis, "value": str(value), "quantizer": cfg.quantizer, "levels": cfg.effective_levels,
        "seed": cfg.seed, "data_seed": cfg.data_seed, "steps": cfg.steps,
        "recon": f["recon"], "total_full_weights": total_full, "total_trained_weights": f["total"],
        "psnr": f["psnr"], "ssim": f["ssim"], "codebook": f["codebook"], "ar": f["ar"], "drift": f["drift"],
        "utilization_mean": float(np.mean(f["utilization"])), "ar_perplexity": f["ar_perplexity"],
    }


def run_ablation(base: RunConfig, axis: str, values: list | None = None, out_dir: str | Path | None = None,
                 workers: int = 1) -> list[dict]:
    """One training run per cell with shared seeds; optional CSV + JSON output.

    The ``total_full_weights`` column re-weights every cell's final loss terms
    with the base weights, so loss-family ablations compare on one objective.
    """
    if axis not in AXES:
        raise ValidationError(f"axis must be one of {sorted(AXES)}")
    values = list(values) if values is not None else AXES[axis]
    for v in values:
        ablation_cell(base, axis, v)   # validate before spending compute
    jobs = [(base, axis, v) for v in values]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_cell, jobs))
    else:
        rows = [_run_cell(j) for j in jobs]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"ablation_{axis}.csv", "w", newline="", encoding="utf-8") as f:
            w = csv.DictWriter(f, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
        with open(out / f"ablation_{axis}.json", "w", encoding="utf-8") as f:
            json.dump({"config": base.to_dict(), "axis": axis, "rows": rows}, f, indent=2, sort_keys=True)
    return rows


def corpus_utilization(model: Tokenizer, clips: list[CaptionedClip]) -> list[float]:
    """Per-level fraction of the codebook hit anywhere in ``clips`` (unmasked)."""
    idx = None
    model.eval()
    with torch.no_grad():
        for i in range(0, len(clips), EVAL_CLIPS):
            batch = make_batch(clips[i:i + EVAL_CLIPS], 0.0, None, model.config.spatial_budget,
                               model.config.text_dim)
            lv = [q.indices.reshape(-1) for q in model(batch, with_reference=False).q_levels]
            idx = lv if idx is None else [torch.cat([a, b]) for a, b in zip(idx, lv)]
    return [utilization(i, model.codebook.size) for i in idx]


# -- collapse -------------------------------------------------------------------

def check_non_degenerate(clips: list[CaptionedClip]) -> None:
    if len(clips) < 2:
        raise DegenerateDataError("collapse demonstration needs at least two clips")
    first = clips[0].video
    if all(np.array_equal(first, c.video) for c in clips[1:]):
        raise DegenerateDataError("all clips are identical")


def mean_objective(model: Tokenizer, clips: list[CaptionedClip], weights: LossWeights) -> float:
    """Average full objective over the corpus in unmasked evaluation batches."""
    model.eval()
    vals, sizes = [], []
    with torch.no_grad():
        for i in range(0, len(clips), EVAL_CLIPS):
            chunk = clips[i:i + EVAL_CLIPS]
            batch = make_batch(chunk, 0.0, None, model.config.spatial_budget, model.config.text_dim)
            vals.append(float(model.losses(batch, codeword_seed=0).total(weights)))
            sizes.append(len(chunk))
    return math.fsum(v * s for v, s in zip(vals, sizes)) / sum(sizes)


def collapse_constants(model: Tokenizer, clips: list[CaptionedClip]) -> list[torch.Tensor]:
    """Corpus-mean pre-activation of every level, used as the input-independent assignment."""
    sums, count = None, 0
    with torch.no_grad():
        for i in range(0, len(clips), EVAL_CLIPS):
            chunk = clips[i:i + EVAL_CLIPS]
            batch = make_batch(chunk, 0.0, None, model.config.spatial_budget, model.config.text_dim)
            q = model.quantize(model.encoder(model.encoder_input(batch)), batch)
            m = [lvl.z.mean(dim=(2, 3, 4)).sum(0) for lvl in q]
            sums = m if sums is None else [a + b for a, b in zip(sums, m)]
            count += len(chunk)
    return [s / count for s in sums]


def demo_collapse(config: RunConfig, clips: list[CaptionedClip] | None = None, steps: int | None = None,
                  out_dir: str | Path | None = None, trained: TrainResult | None = None) -> dict:
    """Compare the trained model with the same weights under a constant code assignment.

    ``trained`` reuses an existing run on the same corpus instead of training again.
    """
    clips = clips if clips is not None else corpus_for(config)
    check_non_degenerate(clips)
    res = trained if trained is not None else train_toy(config, clips, steps=steps)
    model = res.model
    loss_trained = mean_objective(model, clips, config.weights)
    model.collapse_to = collapse_constants(model, clips)
    loss_collapsed = mean_objective(model, clips, config.weights)
    model.collapse_to = None
    report = {"config": config.to_dict(), "steps": len(res.history), "loss_trained": loss_trained,
              "loss_collapsed": loss_collapsed, "margin": loss_collapsed - loss_trained}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "collapse.json", "w", encoding="utf-8") as f:
            json.dump(report, f, indent=2, sort_keys=True)
    return report
