"""Scaled-down benchmark runs on synthetic clips.

Used by the acceptance suite and the ``bench`` command: generate a dataset,
split it by video, subsample labeled videos, train each method for each seed,
and collect test-split metrics per network.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import FrameStore, SynthConfig, generate_synthetic, sample_labeled, split_by_video
from .evaluate import evaluate_model
from .metrics import report_row
from .trainer import TrainConfig, fit, steps_per_epoch

log = logging.getLogger(__name__)


@dataclass
class BenchConfig:
    synth: SynthConfig = field(default_factory=lambda: SynthConfig(n_videos=12, frames_per_video=50, image_size=64))
    methods: tuple[str, ...] = ("endo-semis", "supervised")
    seeds: tuple[int, ...] = (0, 1, 2)
    labeled_ratio: float = 0.1
    split_seed: int = 0
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs=30, image_size=64, base_width=8, depth=4, batch_size=16))
    # labeled-only methods get as many optimiser steps per epoch as the
    # semi-supervised ones, so the baseline is not simply under-trained
    match_steps: bool = True


def prepare(data_dir, bench: BenchConfig):
    data_dir = Path(data_dir)
    manifest_path = data_dir / "manifest.jsonl"
    if manifest_path.exists():
        from .data import DatasetManifest

        manifest = DatasetManifest.load(manifest_path)
    else:
        manifest = generate_synthetic(bench.synth, data_dir)
    manifest = split_by_video(manifest, seed=bench.split_seed)
    return sample_labeled(manifest, bench.labeled_ratio, seed=bench.split_seed)


def run_bench(bench: BenchConfig, work_dir) -> list[dict]:
    """Train every (method, seed) pair; one metrics row per network."""
    work = Path(work_dir)
    manifest = prepare(work / "data", bench)
    store = FrameStore(manifest)
    labeled, unlabeled = store.labeled(), store.unlabeled()
    val, test = store.evaluation("val"), store.evaluation("test")
    rows = []
    matched = steps_per_epoch(len(labeled), len(unlabeled), bench.train.batch_size)
    for method in bench.methods:
        for seed in bench.seeds:
            cfg = replace(bench.train, method=method, seed=seed, labeled_ratio=bench.labeled_ratio,
                          au=None, eu=None, jps=None, ml_d=None, ml_eb=None)
            if bench.match_steps and not cfg.uses_unlabeled:
                cfg = replace(cfg, steps_per_epoch=matched)
            run_dir = work / "runs" / f"{method}_s{seed}"
            log.info("training %s seed %d", method, seed)
            result = fit(labeled, unlabeled, val, cfg, run_dir=run_dir)
            for i, net in enumerate((result.net1, result.net2), 1):
                ev = evaluate_model(net, test)
                row = report_row(f"{method}-{i}", ev.pixel, ev.image)
                row.update({"method": method, "seed": seed, "network": i})
                rows.append(row)
    (work / "bench_results.json").write_text(json.dumps(rows, indent=2))
    return rows


def summarise(rows: list[dict]) -> dict:
    """Mean test Dice per (method, network) over seeds."""
    out: dict = {}
    for r in rows:
        out.setdefault((r["method"], r["network"]), []).append(r["dice"])
    return {f"{m}-{n}": float(np.mean(v)) for (m, n), v in out.items()}
