"""
Ground-to-aerial localization end to end
========================================

Pretrain a ground network on scene classes, regress an aerial network onto
its features, index every grid cell and rank the cells for held-out ground
photos. By default this is a reduced run (a few minutes); pass ``full`` to
use the benchmark sizes.
"""

# %%
import sys
from pathlib import Path


from crossview.pipeline import PipelineConfig, run_pipeline
from crossview.trainer import TrainConfig
from crossview.viz import distance_heatmap, falsecolor_map, max_activation_report, report_csv

full = "full" in sys.argv[1:]
out = Path("localization_run")
if full:
    cfg = PipelineConfig()
else:
    cfg = PipelineConfig(samples=1200, holdout_val=150, holdout_test=150, grid_cols=30, grid_rows=30,
                         pretrain=TrainConfig(lr=0.01, epochs=4, eval_every=50),
                         cross=TrainConfig(lr=3e-4, epochs=4, eval_every=50),
                         multi=TrainConfig(lr=3e-4, epochs=2, eval_every=50))
run = run_pipeline(cfg, out)

# %% Accuracy: the share of queries whose true cell ranks in the top k percent
for name, ev in run.evaluations.items():
    s = ev.summary()
    print(f"{name:9s} top1%={s['top1pct']:.3f} median_pct={s['median_percentile']:.3f} auc={s['auc']:.3f}")
print("chance top1% is 0.01")

# %% Distance heatmaps for a few queries, true cell marked black
index = run.indexes["single"]
for feat, loc in run.test_queries()[:3]:
    cell = index.grid.cell_of(*loc)
    distance_heatmap(index, feat, loc).write(out / f"heatmap_cell{cell}.ppm")

# %% False colour: urban-ish coordinates in red, rural in green, water in blue
falsecolor_map(index).write(out / "falsecolor.ppm")

# %% Which validation photos excite each class coordinate most
val = run.manifest.split("val")
report = max_activation_report(run.f_g, run.manifest.ground_stack(val), [r.id for r in val], range(8))
label = {r.id: r.scene_class for r in val}
for c, rows in report.items():
    print(c, [label[i] for i, _ in rows])
(out / "maxact.csv").write_text(report_csv(report))
print("artifacts in", out.resolve(), sorted(p.name for p in out.iterdir())[:8], "...")
