"""Two training stages: ground-network pretraining and cross-view regression.

Cross-view training fits the aerial extractor so that its output for the tile
at a location matches the frozen ground extractor's embedding of the photo
taken there, using the half squared Euclidean loss. Model selection uses the
mean (unsquared) feature distance on the validation split.
"""

from __future__ import annotations

import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .autodiff import DTYPE, Tensor, euclidean_loss, softmax_cross_entropy
from .models import ArchSpec, MultiScaleNet, Network, ZOOMS
from .optim import SGD
from .params import FormatError
from .synthworld import Manifest, derive_seed

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    """The training loss became NaN or infinite."""


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    eval_every: int = 100
    target_zoom: Union[int, str] = 18

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.batch_size < 1 or self.epochs < 1 or self.eval_every < 1:
            raise ValueError("batch_size, epochs and eval_every must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")


@dataclass
class TrainLog:
    losses: list[tuple[int, float]] = field(default_factory=list)
    evals: list[tuple[int, float]] = field(default_factory=list)
    accuracy: list[tuple[int, float]] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    best_step: int = 0
    metric_name: str = "val_distance"

    @property
    def best_metric(self) -> float:
        return dict(self.evals)[self.best_step]

    @property
    def initial_metric(self) -> float:
        return self.evals[0][1]

    def smoothed_loss(self, window: int = 50) -> np.ndarray:
        v = np.array([l for _, l in self.losses])
        w = min(window, len(v))
        return np.convolve(v, np.ones(w) / w, mode="valid")

    def write_csv(self, out_dir, prefix: str = "") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        lines = ["step,loss"] + [f"{s},{l:.9g}" for s, l in self.losses]
        (out / f"{prefix}loss.csv").write_text("\n".join(lines) + "\n")
        acc = dict(self.accuracy)
        if acc:
            lines = [f"step,{self.metric_name},val_accuracy"]
            lines += [f"{s},{m:.9g},{acc[s]:.6f}" for s, m in self.evals]
        else:
            lines = [f"step,{self.metric_name}"] + [f"{s},{m:.9g}" for s, m in self.evals]
        (out / f"{prefix}val.csv").write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

@dataclass
class SplitData:
    ids: np.ndarray
    labels: np.ndarray
    ground: Optional[np.ndarray] = None
    aerial: dict[int, np.ndarray] = field(default_factory=dict)


def load_split(manifest: Manifest, split: str, ground: bool = True, zooms=()) -> SplitData:
    recs = manifest.split(split)
    data = SplitData(np.array([r.id for r in recs], np.int64), np.array([r.scene_class for r in recs], np.int64))
    if ground:
        data.ground = manifest.ground_stack(recs)
    for z in zooms:
        data.aerial[z] = manifest.aerial_stack(recs, z)
    return data


def channel_mean(images: np.ndarray) -> np.ndarray:
    return (images.astype(np.float64).mean(axis=(0, 2, 3)) / 255.0).astype(DTYPE)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield perm[s : s + batch_size]


def _check_finite(value: float, step: int, lr: float) -> None:
    if not np.isfinite(value):
        raise TrainingDiverged(f"non-finite loss {value} at step {step} (lr={lr})")


# ---------------------------------------------------------------------------
# Feature tables
# ---------------------------------------------------------------------------

@dataclass
class FeatureTable:
    """Embedding per manifest record id."""

    ids: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        self._row = {int(i): k for k, i in enumerate(self.ids)}

    def rows(self, ids) -> np.ndarray:
        try:
            return self.features[[self._row[int(i)] for i in ids]]
        except KeyError as exc:
            raise KeyError(f"no target feature for record id {exc.args[0]}") from None

    def __getitem__(self, rid: int) -> np.ndarray:
        return self.features[self._row[int(rid)]]

    def to_bytes(self) -> bytes:
        n, d = self.features.shape
        return (b"CVFT" + struct.pack("<HII", 1, n, d) + self.ids.astype("<u8").tobytes()
                + np.ascontiguousarray(self.features, "<f4").tobytes())

    @classmethod
    def from_bytes(cls, buf: bytes) -> "FeatureTable":
        if buf[:4] != b"CVFT":
            raise FormatError("not a CVFT feature table")
        _, n, d = struct.unpack_from("<HII", buf, 4)
        ids = np.frombuffer(buf, "<u8", n, 14).astype(np.int64)
        feats = np.frombuffer(buf, "<f4", n * d, 14 + 8 * n).reshape(n, d).astype(DTYPE)
        return cls(ids, feats)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "FeatureTable":
        return cls.from_bytes(Path(path).read_bytes())


def precompute_targets(f_g: Network, manifest: Manifest, batch_size: int = 128) -> FeatureTable:
    """Frozen ground embeddings for every record, in manifest order."""
    recs = manifest.records
    feats = np.empty((len(recs), f_g.spec.feature_dim), DTYPE)
    for s in range(0, len(recs), batch_size):
        chunk = recs[s : s + batch_size]
        imgs = []
        for r in chunk:
            try:
                imgs.append(manifest.ground(r))
            except (OSError, ValueError) as exc:
                raise FormatError(f"cannot decode ground image of record {r.id}: {exc}") from exc
        feats[s : s + len(chunk)] = f_g.features(np.stack(imgs), batch_size=batch_size)
    return FeatureTable(np.array([r.id for r in recs], np.int64), feats)


# ---------------------------------------------------------------------------
# Stage 1: ground extractor
# ---------------------------------------------------------------------------

def pretrain_ground(manifest: Manifest, arch: ArchSpec, cfg: TrainConfig) -> tuple[Network, TrainLog]:
    """Scene-classification training of the ground extractor.

    The embedding layer doubles as the logit layer; selection keeps the
    parameters with the lowest validation cross-entropy.
    """
    if arch.class_count is None:
        raise ValueError("ground pretraining needs an ArchSpec with class_count")
    train = load_split(manifest, "train")
    val = load_split(manifest, "val")
    if len(train.ids) == 0:
        raise ValueError("manifest has an empty train split")
    for split in (train, val):
        if len(split.labels) and (split.labels.min() < 0 or split.labels.max() >= arch.class_count):
            raise ValueError(f"scene labels outside [0, {arch.class_count})")

    net = Network.build(arch, seed=derive_seed("init", cfg.seed))
    net.channel_mean = channel_mean(train.ground)
    net.mode = "train"
    opt = SGD(net.params, cfg.lr, cfg.momentum)
    rng = np.random.default_rng(derive_seed("order", cfg.seed))
    tlog = TrainLog(metric_name="val_loss")
    eval_split = val if len(val.ids) else train

    def evaluate(step: int):
        logits = net.features(eval_split.ground)
        loss = float(softmax_cross_entropy(Tensor(logits), eval_split.labels).data)
        acc = float((logits[:, : arch.class_count].argmax(1) == eval_split.labels).mean())
        tlog.evals.append((step, loss))
        tlog.accuracy.append((step, acc))
        return loss

    best = (evaluate(0), 0, net.params.copy())
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        for idx in _batches(len(train.ids), cfg.batch_size, rng):
            net.params.zero_grad()
            loss = softmax_cross_entropy(net(train.ground[idx]), train.labels[idx])
            value = float(loss.data)
            _check_finite(value, step, cfg.lr)
            loss.backward()
            opt.step()
            step += 1
            tlog.losses.append((step, value))
            if step % cfg.eval_every == 0:
                m = evaluate(step)
                if m < best[0]:
                    best = (m, step, net.params.copy())
        tlog.epoch_seconds.append(time.perf_counter() - t0)
        log.info("pretrain epoch %d: loss %.4f", epoch + 1, tlog.losses[-1][1])
    if tlog.evals[-1][0] != step:
        m = evaluate(step)
        if m < best[0]:
            best = (m, step, net.params.copy())
    tlog.best_step = best[1]
    net.params = best[2]
    net.mode = "eval"
    return net, tlog


def validation_distance(features: np.ndarray, targets: np.ndarray) -> float:
    """Mean unsquared Euclidean distance between rows."""
    diff = features.astype(np.float64) - targets.astype(np.float64)
    return float(np.sqrt((diff ** 2).sum(axis=1)).mean()) if len(diff) else 0.0


# ---------------------------------------------------------------------------
# Stage 2: cross-view regression
# ---------------------------------------------------------------------------

def _regress(model, inputs_train: list, y_train: np.ndarray, inputs_val: list, y_val: np.ndarray,
             cfg: TrainConfig, trainable: Optional[list[str]] = None) -> TrainLog:
    """Shared SGD loop for the single- and multi-scale aerial extractors."""
    opt = SGD(model.params, cfg.lr, cfg.momentum, trainable=trainable)
    rng = np.random.default_rng(derive_seed("order", cfg.seed))
    tlog = TrainLog()
    if not len(y_val):
        inputs_val, y_val = inputs_train, y_train

    def evaluate(step: int) -> float:
        m = validation_distance(model.features(*inputs_val), y_val)
        tlog.evals.append((step, m))
        return m

    model.mode = "train"
    best = (evaluate(0), 0, model.params.copy())
    step = 0
    n = len(y_train)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        for idx in _batches(n, cfg.batch_size, rng):
            model.params.zero_grad()
            loss = euclidean_loss(model(*(x[idx] for x in inputs_train)), y_train[idx])
            value = float(loss.data)
            _check_finite(value, step, cfg.lr)
            loss.backward()
            opt.step()
            step += 1
            tlog.losses.append((step, value))
            if step % cfg.eval_every == 0:
                m = evaluate(step)
                if m < best[0]:
                    best = (m, step, model.params.copy())
        tlog.epoch_seconds.append(time.perf_counter() - t0)
        log.info("cross-view epoch %d: loss %.4f", epoch + 1, tlog.losses[-1][1])
    if tlog.evals[-1][0] != step:
        m = evaluate(step)
        if m < best[0]:
            best = (m, step, model.params.copy())
    tlog.best_step = best[1]
    model.params = best[2]
    model.mode = "eval"
    return tlog


def train_crossview_single(manifest: Manifest, targets: FeatureTable, f_g: Network,
                           cfg: TrainConfig) -> tuple[Network, TrainLog]:
    """Fit an aerial extractor initialised from the ground extractor's weights."""
    zoom = 18 if cfg.target_zoom in ("multi", None) else int(cfg.target_zoom)
    if zoom not in manifest.zooms:
        raise ValueError(f"zoom {zoom} not available in manifest (has {manifest.zooms})")
    train = load_split(manifest, "train", ground=False, zooms=(zoom,))
    val = load_split(manifest, "val", ground=False, zooms=(zoom,))
    f_a = f_g.copy()
    tlog = _regress(f_a, [train.aerial[zoom]], targets.rows(train.ids),
                    [val.aerial[zoom]], targets.rows(val.ids), cfg)
    return f_a, tlog


def train_crossview_multi(manifest: Manifest, targets: FeatureTable, f_a_best: Network, cfg: TrainConfig,
                          fusion_init: str = "random", train_subnets: bool = True) -> tuple[MultiScaleNet, TrainLog]:
    """Three untied copies of ``f_a_best`` plus a fusion layer, trained end to end."""
    missing = [z for z in ZOOMS if z not in manifest.zooms]
    if missing:
        raise ValueError(f"multi-scale training needs zooms {ZOOMS}; manifest lacks {missing}")
    net = MultiScaleNet.from_single(f_a_best, seed=derive_seed("fusion", cfg.seed), fusion_init=fusion_init)
    train = load_split(manifest, "train", ground=False, zooms=ZOOMS)
    val = load_split(manifest, "val", ground=False, zooms=ZOOMS)
    trainable = None if train_subnets else ["fusion.weight", "fusion.bias"]
    tlog = _regress(net, [train.aerial[z] for z in ZOOMS], targets.rows(train.ids),
                    [val.aerial[z] for z in ZOOMS], targets.rows(val.ids), cfg, trainable)
    return net, tlog
