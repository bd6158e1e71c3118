"""Command-line entry points.

Exit codes: 0 success, 1 validation error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .container import read_container, write_container
from .errors import NumericalError, ValidationError
from .fixtures import make_clip, make_corpus, random_scene
from .localization import frame_descriptors, localize_multi, query_vector, score_trajectory
from .model import RunConfig, Tokenizer, make_batch
from .segmentation import CRFParams, segment_all
from .train import AXES, corpus_for, corpus_utilization, demo_collapse, run_ablation, save_run, train_toy

log = logging.getLogger("videotok")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors are validation errors (exit 1), not numerical ones
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# -- helpers ----------------------------------------------------------------------

def load_config(path: str | None, seed: int | None) -> RunConfig:
    cfg = RunConfig()
    if path:
        try:
            with open(path, encoding="utf-8") as f:
                raw = json.load(f)
        except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ValidationError("config must be a JSON object")
        try:
            cfg = RunConfig.from_dict(raw)
        except TypeError as exc:
            raise ValidationError(str(exc)) from exc
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    return cfg


def input_hash(config: RunConfig, files: list[str | Path] = (), extra: dict | None = None) -> str:
    """sha256 over the canonical config JSON, command arguments and input file bytes."""
    h = hashlib.sha256()
    h.update(config.to_json().encode())
    h.update(json.dumps(extra or {}, sort_keys=True).encode())
    for p in files:
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def header(command: str, config: RunConfig, args: dict, files: list = ()) -> dict:
    return {"command": command, "config": config.to_dict(), "args": args,
            "input_hash": input_hash(config, files, {"command": command, **args})}


def load_model(config: RunConfig, checkpoint: str | None) -> Tokenizer:
    if checkpoint is None:
        return train_toy(config).model
    tensors = read_container(checkpoint)
    model = Tokenizer(config)
    state = model.state_dict()
    if set(tensors) != set(state):
        raise ValidationError("checkpoint does not match the configured model")
    loaded = {}
    for k, v in tensors.items():
        if tuple(v.shape) != tuple(state[k].shape):
            raise ValidationError(f"checkpoint tensor {k} has shape {v.shape}, expected {tuple(state[k].shape)}")
        loaded[k] = torch.from_numpy(v).to(state[k].dtype)
    model.load_state_dict(loaded)
    model.eval()
    return model


# -- subcommands ------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, out: Path, args) -> dict:
    clips = corpus_for(cfg)
    tensors = {}
    for i, c in enumerate(clips):
        tensors[f"clip{i:04d}/video"] = c.video
        for oid, m in c.masks.items():
            tensors[f"clip{i:04d}/mask{oid}"] = m.astype(np.uint8)
    write_container(out / "corpus.lpq", tensors)
    rep = header("gen-data", cfg, {})
    rep["clips"] = [c.sidecar() for c in clips]
    write_json(out / "corpus.json", rep)
    return rep


def cmd_train(cfg: RunConfig, out: Path, args) -> dict:
    res = train_toy(cfg, out_dir=out)
    rep = header("train", cfg, {})
    rep.update({"initial": res.initial, "final": res.final, "steps": len(res.history)})
    write_json(out / "train_summary.json", rep)
    return rep


def cmd_ablate(cfg: RunConfig, out: Path, args) -> dict:
    values = args.values
    if values is not None and args.axis == "levels":
        try:
            values = [int(v) for v in values]
        except ValueError as exc:
            raise ValidationError("levels values must be integers") from exc
    rows = run_ablation(cfg, args.axis, values, out_dir=out, workers=args.workers)
    rep = header("ablate", cfg, {"axis": args.axis, "values": args.values})
    rep["rows"] = rows
    write_json(out / f"ablation_{args.axis}_report.json", rep)
    return rep


def _crf_params(args) -> CRFParams:
    base = CRFParams()
    return CRFParams(**{**base.__dict__, "iterations": args.crf_iters, "pairwise": args.crf_pairwise})


def cmd_segment(cfg: RunConfig, out: Path, args) -> dict:
    model = load_model(cfg, args.checkpoint)
    clips = corpus_for(cfg)
    ids = args.clips if args.clips else list(range(min(4, len(clips))))
    params = _crf_params(args)
    tensors, results = {}, []
    for i in ids:
        if not 0 <= i < len(clips):
            raise ValidationError(f"clip index {i} out of range")
        clip = clips[i]
        batch = make_batch([clip], 0.0, None, cfg.spatial_budget, cfg.text_dim)
        with torch.no_grad():
            q_levels = model(batch, with_reference=False).q_levels
        res = segment_all(clip.video, q_levels[-1], clip.semantic_units, model.lapq.text_prior, params,
                          threshold=args.threshold, text_dim=cfg.text_dim)
        tensors[f"clip{i:04d}/labels"] = res.labels.astype(np.uint8)
        ious = {}
        for unit in res.units:
            gt = clip.masks[clip.unit_objects[unit]]
            pred = res.binary(unit)
            union = np.logical_or(gt, pred).sum()
            ious[unit] = float(np.logical_and(gt, pred).sum() / union) if union else 1.0
        results.append({"clip": i, "labels": res.mapping(), "iou": ious})
    write_container(out / "masks.lpq", tensors)
    files = [args.checkpoint] if args.checkpoint else []
    rep = header("segment", cfg, {"clips": ids, "crf_iters": args.crf_iters, "crf_pairwise": args.crf_pairwise,
                                  "threshold": args.threshold}, files)
    rep["results"] = results
    write_json(out / "segment.json", rep)
    return rep


def cmd_localize(cfg: RunConfig, out: Path, args) -> dict:
    model = load_model(cfg, args.checkpoint)
    rng = np.random.default_rng(cfg.data_seed + 7)
    dims = (args.scene_frames, cfg.height, cfg.width)
    descriptors, captions, truth, start = [], [], [], 0
    for s in range(args.scenes):
        clip = make_clip(random_scene(rng, dims, max_objects=1), dims, seed=cfg.data_seed * 31 + s, levels=cfg.levels)
        batch = make_batch([clip], 0.0, None, cfg.spatial_budget, cfg.text_dim)
        with torch.no_grad():
            q1 = model(batch, with_reference=False).q_levels[0]
        descriptors.append(frame_descriptors(q1))
        captions.append(clip.caption)
        truth.append({"query": s, "caption": clip.caption, "start_frame": start, "end_frame": start + args.scene_frames - 1})
        start += args.scene_frames
    desc = np.concatenate(descriptors)
    trajectories = [score_trajectory(desc, query_vector(c, model.lapq.text_prior, cfg.text_dim), args.window, args.stride)
                    for c in captions]
    segments = localize_multi([t.window_scores for t in trajectories], args.tau, args.window, args.stride)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "segments.jsonl", "w", encoding="utf-8") as f:
        for seg in segments:
            f.write(json.dumps(seg.as_dict(), sort_keys=True) + "\n")
    files = [args.checkpoint] if args.checkpoint else []
    rep = header("localize", cfg, {"window": args.window, "stride": args.stride, "tau": args.tau,
                                   "scenes": args.scenes, "scene_frames": args.scene_frames}, files)
    rep.update({"ground_truth": truth, "segments": [s.as_dict() for s in segments]})
    write_json(out / "localize.json", rep)
    return rep


def cmd_collapse(cfg: RunConfig, out: Path, args) -> dict:
    report = demo_collapse(cfg, steps=args.steps)
    rep = header("collapse-demo", cfg, {"steps": args.steps})
    rep.update({k: report[k] for k in ("steps", "loss_trained", "loss_collapsed", "margin")})
    write_json(out / "collapse.json", rep)
    return rep


def cmd_codebook_stats(cfg: RunConfig, out: Path, args) -> dict:
    model = load_model(cfg, args.checkpoint)
    clips = corpus_for(cfg)
    diverse = corpus_utilization(model, clips)
    repeated = corpus_utilization(model, [clips[0]] * len(clips))
    files = [args.checkpoint] if args.checkpoint else []
    rep = header("codebook-stats", cfg, {}, files)
    rep.update({"utilization_diverse": diverse, "utilization_repeated": repeated, "codebook_size": model.codebook.size})
    write_json(out / "codebook_stats.json", rep)
    return rep


def cmd_export_plots(cfg: RunConfig, out: Path, args) -> dict:
    hist = Path(args.run) / "history.jsonl"
    if not hist.exists():
        raise ValidationError(f"{hist} not found")
    rows = [json.loads(line) for line in hist.read_text(encoding="utf-8").splitlines() if line.strip()]
    if not rows:
        raise ValidationError("empty history")
    out.mkdir(parents=True, exist_ok=True)
    fields = ["step"] + sorted(k for k in rows[0] if k != "step")
    with open(out / "loss_curves.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    rep = header("export-plots", cfg, {"run": str(args.run)}, [hist])
    rep["rows"] = len(rows)
    write_json(out / "export_plots.json", rep)
    return rep


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "ablate": cmd_ablate, "segment": cmd_segment,
    "localize": cmd_localize, "collapse-demo": cmd_collapse, "codebook-stats": cmd_codebook_stats,
    "export-plots": cmd_export_plots,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="UTF-8 JSON run configuration")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    p = _Parser(prog="videotok", description="Desk-scale pyramidal video tokenizer harness.")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="out")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="render the toy corpus")
    sub.add_parser("train", parents=[common], help="train on the toy corpus")
    a = sub.add_parser("ablate", parents=[common], help="run one ablation axis")
    a.add_argument("--axis", choices=sorted(AXES), required=True)
    a.add_argument("--values", nargs="+", default=None)
    a.add_argument("--workers", type=int, default=1)
    for name in ("segment", "localize", "codebook-stats"):
        s = sub.add_parser(name, parents=[common])
        s.add_argument("--checkpoint", default=None, help="LPQ1 checkpoint; trains from the config if omitted")
    seg = sub.choices["segment"]
    seg.add_argument("--crf-iters", type=int, default=CRFParams.iterations)
    seg.add_argument("--crf-pairwise", type=float, default=CRFParams.pairwise)
    seg.add_argument("--threshold", type=float, default=0.5)
    seg.add_argument("--clips", type=int, nargs="+", default=None)
    loc = sub.choices["localize"]
    loc.add_argument("--window", type=int, default=25)
    loc.add_argument("--stride", type=int, default=1)
    loc.add_argument("--tau", type=float, default=0.5)
    loc.add_argument("--scenes", type=int, default=4)
    loc.add_argument("--scene-frames", type=int, default=32)
    c = sub.add_parser("collapse-demo", parents=[common])
    c.add_argument("--steps", type=int, default=None)
    e = sub.add_parser("export-plots", parents=[common])
    e.add_argument("--run", required=True, help="directory holding history.jsonl")
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:          # --help and usage errors
        return exc.code if isinstance(exc.code, int) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, out, args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (ValidationError, FileNotFoundError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
