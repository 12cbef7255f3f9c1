"""Command-line entry point: one subcommand per pipeline stage.

Options come from three layers, later ones winning: built-in defaults, a
``key=value`` file given with ``--config``, then explicit flags. Each run
writes the resolved settings to ``<out>/<command>.config``; passing that file
back with ``--config`` repeats the run.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must fit in an unsigned 64-bit integer, got {v}")
    return v


def _int_list(text: str) -> list[int]:
    return [int(v) for v in str(text).split(",") if v.strip()]


@dataclass
class Option:
    key: str
    type: Callable[[str], Any]
    default: Any = None
    required: bool = False
    help: str = ""


GLOBAL_OPTIONS = [
    Option("seed", _u64, 0, help="global seed (world layout, initialisation, batch order)"),
    Option("threads", int, None, help="cap on BLAS worker threads; results do not depend on it"),
    Option("out", str, ".", help="output directory"),
]

_TRAIN = [
    Option("manifest", str, required=True, help="manifest.csv written by gen-data"),
    Option("momentum", float, 0.9),
    Option("batch_size", int, 32),
    Option("eval_every", int, 100),
]

COMMANDS: dict[str, tuple[str, list[Option]]] = {
    "gen-data": ("render a synthetic dataset", [
        Option("n", int, 4000, help="number of location samples"),
        Option("val", int, help="validation hold-out size (default: n/8)"),
        Option("test", int, help="test hold-out size (default: n/8)"),
        Option("side", int, 64, help="image side in pixels"),
        Option("extent", float, 32000.0, help="world side in metres"),
        Option("ground_depth_min", float, 100.0, help="nearest ground-view context depth in metres"),
        Option("ground_depth_max", float, 100.0, help="farthest ground-view context depth in metres"),
    ]),
    "pretrain-ground": ("scene-classification pretraining of the ground extractor", _TRAIN + [
        Option("lr", float, 0.01),
        Option("epochs", int, 6),
        Option("feature_dim", int, 32),
        Option("classes", int, 8),
    ]),
    "train-cross": ("cross-view training of the single-scale aerial extractor", _TRAIN + [
        Option("ground_checkpoint", str, required=True),
        Option("lr", float, 3e-4),
        Option("epochs", int, 8),
        Option("target_zoom", int, 18),
    ]),
    "train-multi": ("cross-view training of the multi-scale aerial extractor", _TRAIN + [
        Option("ground_checkpoint", str, required=True),
        Option("aerial_checkpoint", str, required=True, help="best single-scale aerial checkpoint"),
        Option("lr", float, 3e-4),
        Option("epochs", int, 3),
        Option("fusion_init", str, "random", help="random or fine"),
        Option("train_subnets", _bool, True),
    ]),
    "build-index": ("aerial features for every grid cell", [
        Option("checkpoint", str, required=True, help="aerial (or any) extractor checkpoint"),
        Option("manifest", str, help="locates world.cfg when --world is not given"),
        Option("world", str, help="world.cfg written by gen-data"),
        Option("cols", int, 50),
        Option("rows", int, 50),
        Option("zoom", int, 18, help="tile zoom for single-scale models"),
    ]),
    "localize": ("rank all cells for one ground query", [
        Option("index", str, required=True),
        Option("ground_checkpoint", str, required=True),
        Option("manifest", str, required=True),
        Option("query_id", int, required=True),
        Option("radius", float, 0.0, help="cells within this many metres of the truth count as correct"),
        Option("top", int, 10, help="candidates printed"),
    ]),
    "eval": ("accuracy curve over a split", [
        Option("index", str, required=True),
        Option("ground_checkpoint", str, required=True),
        Option("manifest", str, required=True),
        Option("split", str, "test"),
        Option("radius", float, 0.0),
    ]),
    "heatmap": ("distance heatmap over the index grid", [
        Option("index", str, required=True),
        Option("ground_checkpoint", str, required=True),
        Option("manifest", str, required=True),
        Option("query_id", int, required=True),
        Option("marker", _bool, True, help="mark the true location"),
    ]),
    "fine-heatmap": ("sliding-window distance map around a location", [
        Option("checkpoint", str, required=True, help="aerial extractor checkpoint"),
        Option("ground_checkpoint", str, required=True),
        Option("manifest", str, required=True),
        Option("query_id", int, required=True),
        Option("world", str),
        Option("x", float, help="centre x (default: the query's true location)"),
        Option("y", float),
        Option("window_meters", float, 200.0),
        Option("stride_meters", float, 50.0),
        Option("span_meters", float, 1000.0),
        Option("alpha", float, 0.6),
    ]),
    "falsecolor": ("false-colour map of grouped embedding coordinates", [
        Option("index", str, required=True),
        Option("red", _int_list, "5,6", help="coordinates averaged into red (default: suburban, urban)"),
        Option("green", _int_list, "2,3", help="default: rural, forest"),
        Option("blue", _int_list, "0,1", help="default: water, coast"),
        Option("allow_overlap", _bool, False),
    ]),
    "maxact": ("top-k images per embedding coordinate", [
        Option("checkpoint", str, required=True),
        Option("manifest", str, required=True),
        Option("split", str, "val"),
        Option("images", str, "ground", help="ground, or z18/z16/z14 for aerial tiles"),
        Option("coordinates", _int_list, "", help="comma list; empty means all"),
        Option("k", int, 5),
    ]),
    "gradcheck": ("finite-difference check of backprop gradients", [
        Option("model", str, "default", help="default, ground, multi or linear"),
        Option("epsilon", float, 1e-3),
        Option("tolerance", float, 1e-3),
        Option("batch", int, 2),
        Option("samples", int, 12, help="coordinates probed per parameter tensor"),
    ]),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add(parser: argparse.ArgumentParser, opt: Option) -> None:
    flag = "--" + opt.key.replace("_", "-")
    default = "" if opt.default is None else f" (default: {opt.default})"
    parser.add_argument(flag, dest=opt.key, type=opt.type, default=argparse.SUPPRESS, help=opt.help + default)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="crossview", description="Cross-view ground-to-aerial localization pipeline.")
    parser.add_argument("--config", default=argparse.SUPPRESS, help="key=value settings file")
    for opt in GLOBAL_OPTIONS:
        _add(parser, opt)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, (desc, opts) in COMMANDS.items():
        p = sub.add_parser(name, help=desc, description=desc)
        p.add_argument("--config", default=argparse.SUPPRESS, help="key=value settings file")
        for opt in GLOBAL_OPTIONS + opts:
            _add(p, opt)
    return parser


def read_config(path, command: str) -> dict[str, Any]:
    """Parse a ``key=value`` file, rejecting keys the command does not take."""
    options = {o.key: o for o in GLOBAL_OPTIONS + COMMANDS[command][1]}
    out: dict[str, Any] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        if key == "command":
            if value.strip() != command:
                raise UsageError(f"{path}: config is for {value.strip()!r}, not {command!r}")
            continue
        if key not in options:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r} for {command}")
        value = value.strip()
        if value == "" and options[key].default is None:
            continue
        try:
            out[key] = options[key].type(value)
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"{path}:{lineno}: bad value for {key}: {exc}") from None
    return out


def resolve(command: str, flags: dict[str, Any]) -> dict[str, Any]:
    options = GLOBAL_OPTIONS + COMMANDS[command][1]
    cfg = {o.key: (o.type(o.default) if isinstance(o.default, str) and o.type is not str else o.default)
           for o in options}
    if "config" in flags:
        cfg.update(read_config(flags["config"], command))
    cfg.update({k: v for k, v in flags.items() if k not in ("config", "command")})
    missing = [o.key for o in options if o.required and cfg.get(o.key) is None]
    if missing:
        raise UsageError(f"{command}: missing required " + ", ".join("--" + k.replace("_", "-") for k in missing))
    return cfg


def config_text(command: str, cfg: dict[str, Any]) -> str:
    lines = [f"command={command}"]
    for o in GLOBAL_OPTIONS + COMMANDS[command][1]:
        v = cfg[o.key]
        if v is None:
            v = ""
        elif isinstance(v, list):
            v = ",".join(map(str, v))
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{o.key}={v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _world(cfg: dict[str, Any]):
    from .synthworld import WorldSpec

    if cfg.get("world"):
        path = Path(cfg["world"])
    elif cfg.get("manifest"):
        path = Path(cfg["manifest"]).parent / "world.cfg"
    else:
        raise UsageError("need --world or --manifest to locate world.cfg")
    if not path.is_file():
        raise FileNotFoundError(f"world description not found: {path}")
    return WorldSpec.from_text(path.read_text(encoding="utf-8"))


def _train_config(cfg: dict[str, Any], **extra):
    from .trainer import TrainConfig

    return TrainConfig(lr=cfg["lr"], momentum=cfg["momentum"], batch_size=cfg["batch_size"],
                       epochs=cfg["epochs"], seed=cfg["seed"] % 2 ** 63, eval_every=cfg["eval_every"], **extra)


def _query(cfg: dict[str, Any]):
    from .models import extract_ground, load_checkpoint
    from .synthworld import load_manifest

    manifest = load_manifest(cfg["manifest"])
    rec = manifest.by_id(cfg["query_id"])
    f_g = load_checkpoint(cfg["ground_checkpoint"])
    return rec, extract_ground(f_g, manifest.ground(rec)[None])[0]


def cmd_gen_data(cfg, out: Path) -> None:
    from .synthworld import WorldSpec, generate_dataset

    world = WorldSpec(seed=cfg["seed"] % 2 ** 63, extent=cfg["extent"],
                      ground_depth=(cfg["ground_depth_min"], cfg["ground_depth_max"]))
    val = cfg["n"] // 8 if cfg["val"] is None else cfg["val"]
    test = cfg["n"] // 8 if cfg["test"] is None else cfg["test"]
    m = generate_dataset(world, cfg["n"], val, test, out, side=cfg["side"])
    print(f"wrote {len(m)} samples to {out / 'manifest.csv'}")


def cmd_pretrain_ground(cfg, out: Path) -> None:
    from .models import ArchSpec, save_checkpoint
    from .synthworld import load_manifest
    from .trainer import pretrain_ground

    manifest = load_manifest(cfg["manifest"])
    arch = ArchSpec(input_side=manifest.side, feature_dim=cfg["feature_dim"], class_count=cfg["classes"])
    net, tlog = pretrain_ground(manifest, arch, _train_config(cfg))
    save_checkpoint(out / "ground.cvwt", net)
    tlog.write_csv(out)
    acc = dict(tlog.accuracy)[tlog.best_step]
    print(f"val_loss={dict(tlog.evals)[tlog.best_step]:.6f} val_accuracy={acc:.4f} best_step={tlog.best_step}")


def cmd_train_cross(cfg, out: Path) -> None:
    from .models import load_checkpoint, save_checkpoint
    from .synthworld import load_manifest
    from .trainer import precompute_targets, train_crossview_single

    manifest = load_manifest(cfg["manifest"])
    f_g = load_checkpoint(cfg["ground_checkpoint"])
    targets = precompute_targets(f_g, manifest)
    f_a, tlog = train_crossview_single(manifest, targets, f_g, _train_config(cfg, target_zoom=cfg["target_zoom"]))
    save_checkpoint(out / "aerial.cvwt", f_a)
    tlog.write_csv(out)
    print(f"val_distance={dict(tlog.evals)[tlog.best_step]:.6f} initial={tlog.evals[0][1]:.6f} "
          f"best_step={tlog.best_step}")


def cmd_train_multi(cfg, out: Path) -> None:
    from .models import load_checkpoint, save_checkpoint
    from .synthworld import load_manifest
    from .trainer import precompute_targets, train_crossview_multi

    if cfg["fusion_init"] not in ("random", "fine"):
        raise UsageError("--fusion-init must be random or fine")
    manifest = load_manifest(cfg["manifest"])
    f_g = load_checkpoint(cfg["ground_checkpoint"])
    f_a = load_checkpoint(cfg["aerial_checkpoint"])
    targets = precompute_targets(f_g, manifest)
    net, tlog = train_crossview_multi(manifest, targets, f_a, _train_config(cfg),
                                      fusion_init=cfg["fusion_init"], train_subnets=cfg["train_subnets"])
    save_checkpoint(out / "multi.cvwt", net)
    tlog.write_csv(out)
    print(f"val_distance={dict(tlog.evals)[tlog.best_step]:.6f} initial={tlog.evals[0][1]:.6f} "
          f"best_step={tlog.best_step}")


def cmd_build_index(cfg, out: Path) -> None:
    from .geoindex import build_index, default_grid
    from .models import load_checkpoint

    world = _world(cfg)
    model = load_checkpoint(cfg["checkpoint"])
    t0 = time.perf_counter()
    index = build_index(model, world, default_grid(world, cfg["cols"], cfg["rows"]), zoom=cfg["zoom"])
    index.save(out / "index.cvix")
    print(f"indexed {index.grid.size} cells in {time.perf_counter() - t0:.1f}s -> {out / 'index.cvix'}")


def cmd_localize(cfg, out: Path) -> None:
    from .geoindex import ReferenceIndex, localize

    index = ReferenceIndex.load(cfg["index"])
    rec, q = _query(cfg)
    res = localize(index, q, rec.location, query_id=rec.id, radius=cfg["radius"])
    centers = index.grid.centers()
    lines = ["rank,cell,x,y,distance"]
    lines += [f"{r},{c},{centers[c, 0]!r},{centers[c, 1]!r},{d:.9g}"
              for r, (c, d) in enumerate(zip(res.order.tolist(), res.distances.tolist()), start=1)]
    (out / f"localize_{rec.id}.csv").write_text("\n".join(lines) + "\n")
    for r, (c, d) in enumerate(res.candidates[: cfg["top"]], start=1):
        print(f"{r:4d} cell={c} ({centers[c, 0]:.0f}, {centers[c, 1]:.0f}) distance={d:.4f}")
    print(f"truth_cell={res.truth_cell} rank={res.rank} rank_percentile={res.rank_percentile:.6f}")


def cmd_eval(cfg, out: Path) -> None:
    from .geoindex import ReferenceIndex, evaluate
    from .models import extract_ground, load_checkpoint
    from .synthworld import load_manifest

    index = ReferenceIndex.load(cfg["index"])
    manifest = load_manifest(cfg["manifest"])
    recs = manifest.split(cfg["split"])
    if not recs:
        raise ValueError(f"split {cfg['split']!r} is empty")
    feats = extract_ground(load_checkpoint(cfg["ground_checkpoint"]), manifest.ground_stack(recs))
    ev = evaluate(index, list(zip(feats, [r.location for r in recs])), radius=cfg["radius"])
    ev.write(out)
    s = ev.summary()
    print(f"top1pct={s['top1pct']} median_percentile={s['median_percentile']} auc={s['auc']} "
          f"queries={s['queries']} ({s['tie_rule']})")


def cmd_heatmap(cfg, out: Path) -> None:
    from .geoindex import ReferenceIndex
    from .viz import distance_heatmap

    index = ReferenceIndex.load(cfg["index"])
    rec, q = _query(cfg)
    raster = distance_heatmap(index, q, rec.location if cfg["marker"] else None)
    path = raster.write(out / f"heatmap_{rec.id}.ppm")
    print(f"wrote {path}")


def cmd_fine_heatmap(cfg, out: Path) -> None:
    from .models import load_checkpoint
    from .viz import fine_heatmap

    world = _world(cfg)
    rec, q = _query(cfg)
    cx = rec.x if cfg["x"] is None else cfg["x"]
    cy = rec.y if cfg["y"] is None else cfg["y"]
    raster = fine_heatmap(load_checkpoint(cfg["checkpoint"]), world, (cx, cy), cfg["window_meters"],
                          cfg["stride_meters"], q, span_meters=cfg["span_meters"], alpha=cfg["alpha"])
    path = raster.write(out / f"fine_heatmap_{rec.id}.ppm")
    print(f"wrote {path} ({raster.width}x{raster.height})")


def cmd_falsecolor(cfg, out: Path) -> None:
    from .geoindex import ReferenceIndex
    from .viz import CategoryGroups, falsecolor_map

    index = ReferenceIndex.load(cfg["index"])
    groups = CategoryGroups(cfg["red"], cfg["green"], cfg["blue"], allow_overlap=cfg["allow_overlap"])
    path = falsecolor_map(index, groups).write(out / "falsecolor.ppm")
    print(f"wrote {path}")


def cmd_maxact(cfg, out: Path) -> None:
    from .models import MultiScaleNet, load_checkpoint
    from .synthworld import load_manifest
    from .viz import max_activation_report, report_csv

    model = load_checkpoint(cfg["checkpoint"])
    manifest = load_manifest(cfg["manifest"])
    recs = manifest.split(cfg["split"])
    if isinstance(model, MultiScaleNet):
        images = tuple(manifest.aerial_stack(recs, z) for z in model.zooms)
    elif cfg["images"] == "ground":
        images = manifest.ground_stack(recs)
    elif cfg["images"] in ("z18", "z16", "z14"):
        images = manifest.aerial_stack(recs, int(cfg["images"][1:]))
    else:
        raise UsageError("--images must be ground, z18, z16 or z14")
    coords = cfg["coordinates"] or list(range(model.spec.feature_dim))
    report = max_activation_report(model, images, [r.id for r in recs], coords, k=cfg["k"])
    (out / "maxact.csv").write_text(report_csv(report))
    by_id = {r.id: r.scene_class for r in recs}
    for c, rows in report.items():
        print(f"coordinate {c}: " + " ".join(f"{i}(class {by_id[i]}, {a:.2f})" for i, a in rows))


def cmd_gradcheck(cfg, out: Path) -> None:
    from .gradcheck import check_model

    t0 = time.perf_counter()
    report = check_model(cfg["model"], epsilon=cfg["epsilon"], tolerance=cfg["tolerance"], batch=cfg["batch"],
                         samples_per_entry=cfg["samples"], seed=cfg["seed"] % 2 ** 63)
    text = report.summary() + f"\nseconds={time.perf_counter() - t0:.1f}\n"
    (out / "gradcheck.txt").write_text(text)
    print(text, end="")
    if not report.passed:
        raise FloatingPointError(f"gradient check failed: worst relative error {report.worst:.3e}")


HANDLERS = {name: globals()["cmd_" + name.replace("-", "_")] for name in COMMANDS}


def main(argv: Optional[list[str]] = None) -> int:
    from .gradcheck import NonFiniteLoss
    from .params import FormatError
    from .synthworld import ManifestError
    from .trainer import TrainingDiverged

    parser = build_parser()
    try:
        args = vars(parser.parse_args(argv))
    except SystemExit as exc:  # --help or a usage error; hand the code back to the caller
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    command = args.get("command")
    if command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        cfg = resolve(command, args)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{command}.config").write_text(config_text(command, cfg))
        if cfg["threads"] is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=max(1, cfg["threads"])):
                HANDLERS[command](cfg, out)
        else:
            HANDLERS[command](cfg, out)
    except UsageError as exc:
        print(f"crossview: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, NonFiniteLoss, FloatingPointError) as exc:
        print(f"crossview: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ManifestError, FormatError, OSError, KeyError, ValueError) as exc:
        print(f"crossview: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
