"""End-to-end run: data, ground pretraining, cross-view training, index, evaluation.

Every stage writes its artifact into one output directory so a run can be
inspected or compared byte for byte with another run.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .geoindex import Evaluation, GridSpec, ReferenceIndex, build_index, default_grid, evaluate
from .models import ArchSpec, MultiScaleNet, Network, save_checkpoint
from .synthworld import Manifest, WorldSpec, generate_dataset
from .trainer import FeatureTable, TrainConfig, TrainLog, precompute_targets, pretrain_ground
from .trainer import train_crossview_multi, train_crossview_single

log = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    world: WorldSpec = field(default_factory=WorldSpec)
    samples: int = 4000
    holdout_val: int = 500
    holdout_test: int = 500
    arch: ArchSpec = field(default_factory=lambda: ArchSpec(class_count=8))
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(lr=0.01, epochs=6, eval_every=50))
    cross: TrainConfig = field(default_factory=lambda: TrainConfig(lr=3e-4, epochs=8, eval_every=100))
    multi: Optional[TrainConfig] = field(default_factory=lambda: TrainConfig(lr=3e-4, epochs=3, eval_every=50))
    grid_cols: int = 50
    grid_rows: int = 50


@dataclass
class PipelineRun:
    out: Path
    world: WorldSpec
    manifest: Manifest
    grid: GridSpec
    f_g: Network
    f_a: Network
    targets: FeatureTable
    logs: dict[str, TrainLog]
    indexes: dict[str, ReferenceIndex]
    evaluations: dict[str, Evaluation]
    f_ms: Optional[MultiScaleNet] = None
    seconds: float = 0.0

    def test_queries(self) -> list[tuple[np.ndarray, tuple[float, float]]]:
        test = self.manifest.split("test")
        return list(zip(self.targets.rows([r.id for r in test]), [r.location for r in test]))


def run_pipeline(cfg: PipelineConfig, out_dir) -> PipelineRun:
    """Run every stage; the multi-scale stage is skipped when ``cfg.multi`` is None."""
    t0 = time.perf_counter()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = generate_dataset(cfg.world, cfg.samples, cfg.holdout_val, cfg.holdout_test, out / "data",
                                side=cfg.arch.input_side)
    logs: dict[str, TrainLog] = {}

    f_g, logs["pretrain"] = pretrain_ground(manifest, cfg.arch, cfg.pretrain)
    save_checkpoint(out / "ground.cvwt", f_g)
    targets = precompute_targets(f_g, manifest)
    targets.save(out / "targets.cvft")

    f_a, logs["cross"] = train_crossview_single(manifest, targets, f_g, cfg.cross)
    save_checkpoint(out / "aerial.cvwt", f_a)

    grid = default_grid(cfg.world, cfg.grid_cols, cfg.grid_rows)
    test = manifest.split("test")
    queries = list(zip(targets.rows([r.id for r in test]), [r.location for r in test]))
    models: dict[str, object] = {"baseline": f_g, "single": f_a}
    f_ms = None
    if cfg.multi is not None:
        f_ms, logs["multi"] = train_crossview_multi(manifest, targets, f_a, cfg.multi)
        save_checkpoint(out / "multi.cvwt", f_ms)
        models["multi"] = f_ms

    indexes, evaluations = {}, {}
    for name, model in models.items():
        indexes[name] = build_index(model, cfg.world, grid)
        indexes[name].save(out / f"{name}.cvix")
        evaluations[name] = evaluate(indexes[name], queries)
        evaluations[name].write(out, prefix=f"eval_{name}")
        log.info("%s: %s", name, evaluations[name].summary())
    for name, tl in logs.items():
        tl.write_csv(out, prefix=f"{name}_")
    return PipelineRun(out, cfg.world, manifest, grid, f_g, f_a, targets, logs, indexes, evaluations, f_ms,
                       time.perf_counter() - t0)
