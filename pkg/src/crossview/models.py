"""Miniature AlexNet-style extractors: ground, single-scale aerial, multi-scale fusion."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import params as P
from .autodiff import DTYPE, Tensor, concat, conv2d, fully_connected, maxpool2d, relu
from .params import ParamStore

ZOOMS = (18, 16, 14)  # fine -> coarse


@dataclass(frozen=True)
class ArchSpec:
    input_side: int = 64
    input_channels: int = 3
    conv_blocks: tuple[int, ...] = (16, 32, 64)
    fc_hidden: int = 128
    feature_dim: int = 32
    class_count: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "conv_blocks", tuple(int(c) for c in self.conv_blocks))
        if self.input_side % (2 ** len(self.conv_blocks)):
            raise ValueError(
                f"input_side {self.input_side} not divisible by 2^{len(self.conv_blocks)}"
            )
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be at least 2")
        if self.class_count is not None:
            if self.class_count < 2:
                raise ValueError("class_count must be at least 2")
            if self.class_count > self.feature_dim:
                # the embedding doubles as the logit layer
                raise ValueError("class_count cannot exceed feature_dim")

    @property
    def final_side(self) -> int:
        return self.input_side // 2 ** len(self.conv_blocks)

    def to_text(self) -> str:
        lines = [
            f"input_side={self.input_side}",
            f"input_channels={self.input_channels}",
            f"conv_blocks={','.join(map(str, self.conv_blocks))}",
            f"fc_hidden={self.fc_hidden}",
            f"feature_dim={self.feature_dim}",
            f"class_count={'' if self.class_count is None else self.class_count}",
        ]
        return "\n".join(lines)

    @classmethod
    def from_text(cls, text: str) -> "ArchSpec":
        kv = P.parse_header(text)
        return cls(
            input_side=int(kv["input_side"]),
            input_channels=int(kv["input_channels"]),
            conv_blocks=tuple(int(c) for c in kv["conv_blocks"].split(",") if c),
            fc_hidden=int(kv["fc_hidden"]),
            feature_dim=int(kv["feature_dim"]),
            class_count=int(kv["class_count"]) if kv.get("class_count") else None,
        )


def init_params(spec: ArchSpec, seed: int, prefix: str = "", store: Optional[ParamStore] = None) -> ParamStore:
    """He-normal weights, zero biases, drawn in a fixed layer order."""
    rng = np.random.default_rng(seed)
    store = store if store is not None else ParamStore(seed)
    c_in = spec.input_channels
    for i, c_out in enumerate(spec.conv_blocks, start=1):
        fan_in = c_in * 9
        store.add(f"{prefix}conv{i}.weight", (rng.standard_normal((c_out, c_in, 3, 3)) * np.sqrt(2 / fan_in)).astype(DTYPE))
        store.add(f"{prefix}conv{i}.bias", np.zeros(c_out, DTYPE))
        c_in = c_out
    flat = c_in * spec.final_side ** 2
    store.add(f"{prefix}fc_hidden.weight", (rng.standard_normal((flat, spec.fc_hidden)) * np.sqrt(2 / flat)).astype(DTYPE))
    store.add(f"{prefix}fc_hidden.bias", np.zeros(spec.fc_hidden, DTYPE))
    store.add(
        f"{prefix}fc_out.weight",
        (rng.standard_normal((spec.fc_hidden, spec.feature_dim)) * np.sqrt(2 / spec.fc_hidden)).astype(DTYPE),
    )
    store.add(f"{prefix}fc_out.bias", np.zeros(spec.feature_dim, DTYPE))
    return store


def _as_input(images, spec: ArchSpec, channel_mean: np.ndarray, dtype=DTYPE) -> np.ndarray:
    arr = np.asarray(images)
    if arr.ndim != 4 or arr.shape[1:] != (spec.input_channels, spec.input_side, spec.input_side):
        raise ValueError(
            f"expected images of shape [N, {spec.input_channels}, {spec.input_side}, {spec.input_side}], got {arr.shape}"
        )
    if arr.dtype == np.uint8:
        arr = arr.astype(dtype) / np.asarray(255, dtype)
    else:
        arr = arr.astype(dtype, copy=False)
    return arr - channel_mean.astype(dtype).reshape(1, -1, 1, 1)


@dataclass
class Network:
    """One extractor: conv blocks, a hidden FC layer and the embedding layer.

    Inputs are images in [0, 1] (float) or raw uint8; the stored per-channel
    mean is subtracted before the first convolution.
    """

    spec: ArchSpec
    params: ParamStore
    channel_mean: np.ndarray = field(default_factory=lambda: np.zeros(3, DTYPE))
    mode: str = "eval"

    @classmethod
    def build(cls, spec: ArchSpec, seed: int = 0) -> "Network":
        return cls(spec, init_params(spec, seed), np.zeros(spec.input_channels, DTYPE))

    @property
    def has_head(self) -> bool:
        return self.spec.class_count is not None

    def forward(self, x: Tensor) -> Tensor:
        p = self.params
        h = x
        for i in range(1, len(self.spec.conv_blocks) + 1):
            h = maxpool2d(relu(conv2d(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"], stride=1, pad=1)))
        h = relu(fully_connected(h.flatten(), p["fc_hidden.weight"], p["fc_hidden.bias"]))
        return fully_connected(h, p["fc_out.weight"], p["fc_out.bias"])

    def __call__(self, images) -> Tensor:
        dtype = next(iter(self.params.items()))[1].data.dtype
        return self.forward(Tensor(_as_input(images, self.spec, self.channel_mean, dtype)))

    def features(self, images, batch_size: int = 128) -> np.ndarray:
        """Embedding rows for a stack of images, computed without a graph."""
        images = np.asarray(images)
        if images.ndim != 4 or images.shape[1:] != (self.spec.input_channels, self.spec.input_side, self.spec.input_side):
            raise ValueError(
                f"expected images of shape [N, {self.spec.input_channels}, {self.spec.input_side}, "
                f"{self.spec.input_side}], got {images.shape}"
            )
        out = np.empty((len(images), self.spec.feature_dim), DTYPE)
        frozen = _Frozen(self.params)
        with frozen:
            for s in range(0, len(images), batch_size):
                out[s : s + batch_size] = self(images[s : s + batch_size]).data
        return out

    def copy(self) -> "Network":
        return Network(self.spec, self.params.copy(), self.channel_mean.copy(), self.mode)

    def header(self) -> str:
        return "\n".join(
            [
                "kind=single",
                f"rng_seed={self.params.rng_seed}",
                self.spec.to_text(),
                "channel_mean=" + ",".join(repr(float(v)) for v in self.channel_mean),
            ]
        )


class _Frozen:
    """Temporarily mark parameters as constants so no graph is recorded."""

    def __init__(self, store: ParamStore):
        self.store = store

    def __enter__(self):
        self.flags = [(t, t.requires_grad) for _, t in self.store.items()]
        for t, _ in self.flags:
            t.requires_grad = False

    def __exit__(self, *exc):
        for t, flag in self.flags:
            t.requires_grad = flag


@dataclass
class MultiScaleNet:
    """Three untied single-scale extractors (fine -> coarse) fused by one FC layer."""

    spec: ArchSpec
    params: ParamStore
    channel_means: tuple[np.ndarray, np.ndarray, np.ndarray]
    zooms: tuple[int, int, int] = ZOOMS
    mode: str = "eval"

    @classmethod
    def from_single(cls, base: Network, seed: int = 0, fusion_init: str = "random",
                    zooms: Sequence[int] = ZOOMS) -> "MultiScaleNet":
        """Copy ``base`` into each subnet and initialise the fusion layer.

        ``fusion_init="fine"`` sets the fusion weight to ``[I; 0; 0]`` so the
        fused output reproduces the finest subnet exactly.
        """
        store = ParamStore(seed)
        for z in zooms:
            for name, t in base.params.items():
                store.add(f"z{z}.{name}", t.data.copy())
        d = base.spec.feature_dim
        if fusion_init == "random":
            rng = np.random.default_rng(seed)
            w = (rng.standard_normal((3 * d, d)) * np.sqrt(1 / (3 * d))).astype(DTYPE)
        elif fusion_init == "fine":
            w = np.zeros((3 * d, d), DTYPE)
            w[:d] = np.eye(d, dtype=DTYPE)
        else:
            raise ValueError(f"unknown fusion_init {fusion_init!r}")
        store.add("fusion.weight", w)
        store.add("fusion.bias", np.zeros(d, DTYPE))
        means = tuple(base.channel_mean.copy() for _ in zooms)
        return cls(base.spec, store, means, tuple(zooms))

    @property
    def subnets(self) -> list[Network]:
        return [
            Network(self.spec, self.params.subset(f"z{z}."), m, self.mode)
            for z, m in zip(self.zooms, self.channel_means)
        ]

    def __call__(self, tiles_fine, tiles_mid, tiles_coarse) -> Tensor:
        n = {len(tiles_fine), len(tiles_mid), len(tiles_coarse)}
        if len(n) != 1:
            raise ValueError(
                f"batch sizes differ across scales: {len(tiles_fine)}, {len(tiles_mid)}, {len(tiles_coarse)}"
            )
        outs = [net(t) for net, t in zip(self.subnets, (tiles_fine, tiles_mid, tiles_coarse))]
        return fully_connected(concat(outs, axis=1), self.params["fusion.weight"], self.params["fusion.bias"])

    def features(self, tiles_fine, tiles_mid, tiles_coarse, batch_size: int = 128) -> np.ndarray:
        n = len(tiles_fine)
        if not (len(tiles_mid) == len(tiles_coarse) == n):
            raise ValueError(
                f"batch sizes differ across scales: {n}, {len(tiles_mid)}, {len(tiles_coarse)}"
            )
        out = np.empty((n, self.spec.feature_dim), DTYPE)
        with _Frozen(self.params):
            for s in range(0, n, batch_size):
                sl = slice(s, s + batch_size)
                out[sl] = self(tiles_fine[sl], tiles_mid[sl], tiles_coarse[sl]).data
        return out

    def header(self) -> str:
        lines = ["kind=multi", f"rng_seed={self.params.rng_seed}", self.spec.to_text(),
                 "zooms=" + ",".join(map(str, self.zooms))]
        for z, m in zip(self.zooms, self.channel_means):
            lines.append(f"channel_mean_z{z}=" + ",".join(repr(float(v)) for v in m))
        return "\n".join(lines)


@dataclass
class LinearModel:
    """One fully connected layer on flat inputs; the kink-free case for gradient checks."""

    params: ParamStore
    mode: str = "eval"

    @classmethod
    def build(cls, in_dim: int, out_dim: int, seed: int = 0) -> "LinearModel":
        rng = np.random.default_rng(seed)
        store = ParamStore(seed)
        store.add("weight", (rng.standard_normal((in_dim, out_dim)) / np.sqrt(in_dim)).astype(DTYPE))
        store.add("bias", (0.1 * rng.standard_normal(out_dim)).astype(DTYPE))
        return cls(store)

    def __call__(self, x) -> Tensor:
        w = self.params["weight"]
        return fully_connected(Tensor(np.asarray(x, w.data.dtype)), w, self.params["bias"])


# ---------------------------------------------------------------------------
# Extraction entry points
# ---------------------------------------------------------------------------

def extract_ground(net: Network, images) -> np.ndarray:
    """Pre-softmax embedding of ground images."""
    if not net.has_head:
        raise ValueError("ground extractor must be built with a classification head (class_count)")
    return net.features(images)


def extract_aerial_single(net: Network, tiles) -> np.ndarray:
    return net.features(tiles)


def extract_aerial_multi(net: MultiScaleNet, tiles_fine, tiles_mid, tiles_coarse) -> np.ndarray:
    return net.features(tiles_fine, tiles_mid, tiles_coarse)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _floats(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.split(",") if v], DTYPE)


def checkpoint_bytes(model) -> bytes:
    return P.to_bytes(model.params, model.header())


def save_checkpoint(path, model) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path):
    """Load a :class:`Network` or :class:`MultiScaleNet` from a ``CVWT`` file."""
    store, header = P.load(path)
    kv = P.parse_header(header)
    spec = ArchSpec.from_text(header)
    if kv.get("kind", "single") == "multi":
        zooms = tuple(int(z) for z in kv["zooms"].split(","))
        means = tuple(_floats(kv[f"channel_mean_z{z}"]) for z in zooms)
        return MultiScaleNet(spec, store, means, zooms)
    return Network(spec, store, _floats(kv.get("channel_mean", "0,0,0")))


def checksum(model) -> bytes:
    """32-byte SHA-256 of the serialized checkpoint."""
    return hashlib.sha256(checkpoint_bytes(model)).digest()


def with_dtype(model, dtype):
    """Copy of ``model`` whose parameters are stored as ``dtype``."""
    if isinstance(model, MultiScaleNet):
        return MultiScaleNet(model.spec, model.params.astype(dtype), model.channel_means, model.zooms, model.mode)
    return replace(model, params=model.params.astype(dtype))
