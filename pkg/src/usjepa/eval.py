"""Segmentation metrics, significance testing, and the sweep/ablation harnesses."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import stats

from . import dataio, train
from .train import (
    build_pretrain_state,
    build_probe_state,
    labelled_videos,
    load_encoder_from_checkpoint,
    predict_segmentation,
    run_pretrain,
    run_probe_training,
)

FRACTIONS = (100, 50, 20, 10)
METRIC_NAMES = ("dsc", "ji", "ppv", "recall")


def confusion_counts(pred: np.ndarray, truth: np.ndarray, c: int) -> tuple[int, int, int]:
    """Pixel (TP, FP, FN) over the whole clip for class c."""
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    p = pred == c
    t = truth == c
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return tp, fp, fn


def _ratio(num: int, den: int, tp: int, fp: int, fn: int) -> float:
    # Both masks empty: perfect agreement by convention; otherwise an empty
    # denominator means the metric's own target set is empty -> 0.
    if fp == 0 and fn == 0 and tp == 0:
        return 1.0
    return num / den if den else 0.0


def dsc(counts) -> float:
    tp, fp, fn = counts
    return _ratio(2 * tp, 2 * tp + fp + fn, tp, fp, fn)


def ji(counts) -> float:
    tp, fp, fn = counts
    return _ratio(tp, tp + fp + fn, tp, fp, fn)


def ppv(counts) -> float:
    tp, fp, fn = counts
    return _ratio(tp, tp + fp, tp, fp, fn)


def recall(counts) -> float:
    tp, fp, fn = counts
    return _ratio(tp, tp + fn, tp, fp, fn)


@dataclass
class MetricsRecord:
    video_id: str
    per_class: dict[int, dict[str, float]] = field(default_factory=dict)

    def macro(self, name: str) -> float:
        """Mean over foreground classes (background excluded)."""
        vals = [m[name] for c, m in self.per_class.items() if c != 0]
        return float(np.mean(vals)) if vals else float("nan")

    def as_dict(self) -> dict:
        return {
            "video_id": self.video_id,
            "per_class": {str(c): m for c, m in self.per_class.items()},
            "macro": {n: self.macro(n) for n in METRIC_NAMES},
        }


def score_masks(pred: np.ndarray, truth: np.ndarray, num_classes: int,
                video_id: str = "") -> MetricsRecord:
    rec = MetricsRecord(video_id)
    for c in range(1, num_classes + 1):
        counts = confusion_counts(pred, truth, c)
        rec.per_class[c] = {
            "dsc": dsc(counts), "ji": ji(counts),
            "ppv": ppv(counts), "recall": recall(counts),
        }
    return rec


def paired_significance(per_video_a, per_video_b) -> float:
    """Two-sided paired t-test on matched per-video scores."""
    a = np.asarray(per_video_a, dtype=np.float64)
    b = np.asarray(per_video_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ValueError("need two equally sized score lists of length >= 2")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        return 1.0 if mean == 0.0 else 0.0  # limit of a degenerate t statistic
    t = mean / (sd / math.sqrt(len(d)))
    return float(2.0 * stats.t.sf(abs(t), len(d) - 1))


def _eval_clip(video: np.ndarray, cfg: dict):
    """Deterministic evaluation clip: stride from frame 0."""
    T, step = cfg["data"]["clip_frames"], cfg["data"]["frame_step"]
    needed = (T - 1) * step + 1
    if video.shape[0] < needed:
        raise ValueError(f"video too short for evaluation clip ({video.shape[0]} < {needed})")
    return video[0:needed:step]


def evaluate_probe(state: train.ProbeState, dataset_root, split: str = "test") -> list[MetricsRecord]:
    ids, frames, labels = labelled_videos(dataset_root, split)
    num_classes = state.cfg["data"]["num_classes"]
    records = []
    for vid, f, l in zip(ids, frames, labels):
        clip = torch.from_numpy(_eval_clip(f, state.cfg))
        truth = _eval_clip(l, state.cfg)
        pred = predict_segmentation(state, clip)
        records.append(score_masks(pred, truth, num_classes, vid))
    return records


def mean_sd(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


def _train_probe_for(cfg: dict, dataset_root, seed: int, fraction: int,
                     encoder_ckpt=None) -> train.ProbeState:
    encoder = None
    if encoder_ckpt is not None:
        encoder = load_encoder_from_checkpoint(encoder_ckpt, cfg)
    state = build_probe_state(cfg, seed, encoder)
    all_ids = dataio.list_videos(dataset_root, "train")
    ids = dataio.subsample_train(all_ids, fraction, seed=cfg["runtime"]["seed"])
    _, frames, labels = labelled_videos(dataset_root, "train", ids)
    run_probe_training(state, frames, labels, cfg["schedule"]["probe_steps"])
    return state


@dataclass
class SweepRow:
    method: str
    fraction: int
    stats: dict[str, tuple[float, float]]  # metric -> (mean, sd)
    p_value: float | None = None  # vs the named baseline, paired by video


def fraction_sweep(methods, dataset_root, cfg: dict, seeds=(0, 1, 2),
                   fractions=FRACTIONS, baseline_of: dict | None = None):
    """Train and evaluate one probe per (method, fraction, seed).

    `methods` is a list of (label, encoder_checkpoint_or_None); None trains
    the probe on a random-init frozen encoder.  `baseline_of` maps a method
    label to the label it is tested against (paired t-test on per-video
    scores averaged over seeds).
    """
    for label, ckpt in methods:
        if ckpt is not None and not Path(ckpt).is_file():
            raise FileNotFoundError(f"missing checkpoint for method {label!r}: {ckpt}")
    per_video: dict[tuple, dict[str, list[float]]] = {}
    rows = []
    for label, ckpt in methods:
        for fraction in fractions:
            scores = {n: [] for n in METRIC_NAMES}
            vid_scores: dict[str, list[float]] = {}
            for seed in seeds:
                state = _train_probe_for(cfg, dataset_root, seed, fraction, ckpt)
                for rec in evaluate_probe(state, dataset_root, "test"):
                    for n in METRIC_NAMES:
                        scores[n].append(rec.macro(n))
                    vid_scores.setdefault(rec.video_id, []).append(rec.macro("dsc"))
            per_video[(label, fraction)] = {
                v: float(np.mean(s)) for v, s in vid_scores.items()
            }
            rows.append(SweepRow(label, fraction,
                                 {n: mean_sd(scores[n]) for n in METRIC_NAMES}))
    if baseline_of:
        for row in rows:
            base = baseline_of.get(row.method)
            if base is None:
                continue
            mine = per_video[(row.method, row.fraction)]
            theirs = per_video[(base, row.fraction)]
            vids = sorted(set(mine) & set(theirs))
            if len(vids) >= 2:
                row.p_value = paired_significance(
                    [mine[v] for v in vids], [theirs[v] for v in vids]
                )
    return rows


def sweep_csv(rows, path) -> None:
    """CSV in the comparison-table layout: Method, %, then metric +/- SD."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["Method", "% training samples", "DSC +/- SD", "JI +/- SD",
                    "PPV +/- SD", "Recall +/- SD", "p-value"])
        for row in rows:
            cells = [row.method, row.fraction]
            for n in METRIC_NAMES:
                mean, sd = row.stats[n]
                cells.append(f"{mean:.3f} +/- {sd:.3f}")
            cells.append("" if row.p_value is None else f"{row.p_value:.3g}")
            w.writerow(cells)


def lambda_ablation(lambdas, dataset_root, cfg: dict, seed: int = 0,
                    fraction: int = 100) -> dict[float, float]:
    """One pretrain + probe per mixing weight; validation DSC per column."""
    results = {}
    for lam in lambdas:
        if not 0.0 <= lam <= 1.0:
            raise ValueError(f"lambda must be in [0, 1], got {lam}")
    for lam in lambdas:
        run_cfg = json.loads(json.dumps(cfg))
        run_cfg["loss"]["lambda"] = lam
        state = build_pretrain_state(run_cfg, seed)
        videos = train.pretrain_videos(dataset_root, "train")
        run_pretrain(state, videos, run_cfg["schedule"]["pretrain_steps"])
        probe = _train_probe_from_state(run_cfg, dataset_root, seed, fraction, state)
        records = evaluate_probe(probe, dataset_root, "val")
        results[lam] = float(np.mean([r.macro("dsc") for r in records]))
    return results


def _train_probe_from_state(cfg, dataset_root, seed, fraction,
                            pretrain_state) -> train.ProbeState:
    import copy as _copy

    encoder = _copy.deepcopy(pretrain_state.encoder)
    state = build_probe_state(cfg, seed, encoder)
    all_ids = dataio.list_videos(dataset_root, "train")
    ids = dataio.subsample_train(all_ids, fraction, seed=cfg["runtime"]["seed"])
    _, frames, labels = labelled_videos(dataset_root, "train", ids)
    run_probe_training(state, frames, labels, cfg["schedule"]["probe_steps"])
    return state


def ablation_csv(results: dict[float, float], path, row_label: str = "feature-pred + LL") -> None:
    lambdas = list(results)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["Method"] + [f"lambda={l:g}" for l in lambdas])
        w.writerow([row_label] + [f"{results[l]:.3f}" for l in lambdas])


def records_json(records: list[MetricsRecord], path, aggregate: bool = True) -> None:
    payload = {"videos": [r.as_dict() for r in records]}
    if aggregate and records:
        payload["aggregate"] = {
            n: mean_sd([r.macro(n) for r in records]) for n in METRIC_NAMES
        }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def records_csv(records: list[MetricsRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["video_id", "DSC", "JI", "PPV", "Recall"])
        for r in records:
            w.writerow([r.video_id] + [f"{r.macro(n):.6f}" for n in METRIC_NAMES])
        if records:
            w.writerow(["aggregate"] + [
                f"{np.mean([r.macro(n) for r in records]):.6f}" for n in METRIC_NAMES
            ])


def loss_curve_svg(jsonl_path, out_path, key: str = "combined",
                   width: int = 640, height: int = 320) -> None:
    """Minimal static SVG line plot of a logged loss column."""
    steps, values = [], []
    with open(jsonl_path) as fh:
        for line in fh:
            rec = json.loads(line)
            steps.append(rec["step"])
            values.append(rec[key])
    if not steps:
        raise ValueError(f"no records in {jsonl_path}")
    lo, hi = min(values), max(values)
    span = (hi - lo) or 1.0
    pad = 20
    pts = []
    for s, v in zip(steps, values):
        x = pad + (width - 2 * pad) * (s - steps[0]) / max(steps[-1] - steps[0], 1)
        y = height - pad - (height - 2 * pad) * (v - lo) / span
        pts.append(f"{x:.1f},{y:.1f}")
    svg = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">'
        f'<rect width="100%" height="100%" fill="white"/>'
        f'<polyline fill="none" stroke="steelblue" stroke-width="1.5" '
        f'points="{" ".join(pts)}"/>'
        f'<text x="{pad}" y="14" font-size="12">{key} (min {lo:.4g}, max {hi:.4g})</text>'
        f"</svg>"
    )
    Path(out_path).write_text(svg)
