"""Residual feature extractor, the three point-detection heads, and decoding."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

HEAD_VARIANTS = ("regression", "pixelwise", "spatial_softmax")
ACTIVATION_FOR_HEAD = {"pixelwise": "sigmoid", "spatial_softmax": "spatial_softmax"}

CHECKPOINT_MAGIC = b"PSNTCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 1
    base_channels: int = 16
    n_blocks: int = 4
    output_stride: int = 4

    def __post_init__(self):
        s = self.output_stride
        if s < 1 or s & (s - 1):
            raise ValueError(f"output_stride must be a power of two, got {s}")
        if self.n_blocks < 0 or self.base_channels < 1 or self.in_channels < 1:
            raise ValueError("invalid backbone size")


@dataclass(frozen=True)
class ActivationMap:
    """Score map at ``output_stride`` resolution (h×w, or N×h×w for a batch)."""

    scores: np.ndarray
    output_stride: int
    activation_kind: str  # logit | sigmoid | spatial_softmax


@dataclass(frozen=True)
class PredictedPoint:
    x: float
    y: float
    score: float


def _stem_kernel(config: BackboneConfig, index: int) -> int:
    if config.output_stride == 1:
        return 3
    return 4 if index == 0 else 2


def _he(rng: np.random.Generator, shape, fan_in: int, scale: float = 1.0) -> np.ndarray:
    return (rng.standard_normal(shape) * scale * math.sqrt(2.0 / fan_in)).astype(np.float32)


class FeatureExtractor:
    """Strided stem convolutions followed by residual conv-relu-conv blocks.

    One stride-2 stem convolution per factor of two in ``output_stride``
    (4×4 on the image, non-overlapping 2×2 afterwards; a single 3×3 stride-1
    stem when the stride is 1), then ``n_blocks`` residual
    blocks at ``base_channels`` width.
    """

    def __init__(self, config: BackboneConfig, params: Mapping[str, Tensor]):
        self.config = config
        self.params = params
        self.n_stem = max(1, int(math.log2(config.output_stride)))

    @staticmethod
    def init_params(config: BackboneConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
        c, cin = config.base_channels, config.in_channels
        n_stem = max(1, int(math.log2(config.output_stride)))
        p: dict[str, np.ndarray] = {}
        for i in range(n_stem):
            ci = cin if i == 0 else c
            k = _stem_kernel(config, i)
            p[f"stem{i}.w"] = _he(rng, (c, ci, k, k), ci * k * k)
            p[f"stem{i}.b"] = np.zeros(c, np.float32)
        for i in range(config.n_blocks):
            p[f"block{i}.conv1.w"] = _he(rng, (c, c, 3, 3), c * 9)
            p[f"block{i}.conv1.b"] = np.zeros(c, np.float32)
            # damped second conv keeps the residual stack near identity at init
            p[f"block{i}.conv2.w"] = _he(rng, (c, c, 3, 3), c * 9, scale=0.25)
            p[f"block{i}.conv2.b"] = np.zeros(c, np.float32)
        return p

    def __call__(self, image: Tensor) -> Tensor:
        return extract_features(self, image)


def extract_features(model: FeatureExtractor, image: Tensor) -> Tensor:
    """Map a C×H×W image (or C×N×H×W channel-major batch) to features at
    1/output_stride resolution."""
    cfg, p = model.config, model.params
    h, w = image.shape[-2:]
    s = cfg.output_stride
    if h % s or w % s:
        raise ValueError(f"image {h}x{w} not divisible by output_stride {s}")
    if image.shape[0] != cfg.in_channels:
        raise ValueError(f"expected {cfg.in_channels} input channels, got {image.shape[0]}")
    stem_stride = 2 if s > 1 else 1
    x = image
    for i in range(model.n_stem):
        pad = 1 if _stem_kernel(cfg, i) != 2 else 0
        x = ad.relu(ad.conv2d(x, p[f"stem{i}.w"], p[f"stem{i}.b"], stride=stem_stride, pad=pad))
    for i in range(cfg.n_blocks):
        y = ad.relu(ad.conv2d(x, p[f"block{i}.conv1.w"], p[f"block{i}.conv1.b"], pad=1))
        y = ad.conv2d(y, p[f"block{i}.conv2.w"], p[f"block{i}.conv2.b"], pad=1)
        x = ad.relu(ad.add(x, y))
    return x


class DetectionHead:
    def __init__(self, variant: str, params: Mapping[str, Tensor], in_channels: int):
        if variant not in HEAD_VARIANTS:
            raise ValueError(f"unknown head variant {variant!r}")
        self.variant = variant
        self.params = params
        self.in_channels = in_channels

    @staticmethod
    def init_params(variant: str, channels: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        if variant == "regression":
            return {
                "head.w": (rng.standard_normal((channels, 2)) * 0.01).astype(np.float32),
                "head.b": np.zeros(2, np.float32),
            }
        return {
            "head.w": (rng.standard_normal((1, channels, 1, 1)) * 0.01).astype(np.float32),
            "head.b": np.zeros(1, np.float32),
        }

    def raw(self, features: Tensor) -> Tensor:
        """Graph output before decoding: normalized (x, y) or 1-channel logits.

        Batched (C×N×h×w) features give N×2 points or N×h×w logits.
        """
        c = features.shape[0]
        if c != self.in_channels:
            raise ValueError(f"head expects {self.in_channels} channels, got {c}")
        batched = features.data.ndim == 4
        f = features if batched else ad.reshape(features, (c, 1) + features.shape[1:])
        _, n, h, w = f.shape
        if self.variant == "regression":
            pooled = ad.transpose(ad.global_avgpool(f), (1, 0))
            out = ad.sigmoid(ad.linear(pooled, self.params["head.w"], self.params["head.b"]))
        else:
            logits = ad.conv2d(f, self.params["head.w"], self.params["head.b"])
            out = ad.reshape(logits, (n, h, w))
        return out if batched else ad.reshape(out, out.shape[1:])


def _softmax_np(logits: np.ndarray) -> np.ndarray:
    lead = logits.shape[:-2]
    flat = logits.reshape(lead + (-1,)).astype(np.float64)
    flat = flat - flat.max(axis=-1, keepdims=True)
    e = np.exp(flat)
    return (e / e.sum(axis=-1, keepdims=True)).reshape(logits.shape)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float64)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def head_forward(head: DetectionHead, features: Tensor, image_dims=None, output_stride: int | None = None):
    """Run a head and interpret its output.

    Regression heads return a :class:`PredictedPoint` (a list for a batch) in
    pixels of ``image_dims`` = (H, W); map heads return an :class:`ActivationMap`
    with sigmoid or spatial-softmax scores. Scores are computed in float64.
    """
    out = head.raw(features).data
    if head.variant == "regression":
        if image_dims is None:
            raise ValueError("regression head needs image_dims to scale coordinates")
        h, w = image_dims
        pts = [PredictedPoint(float(r[0]) * w, float(r[1]) * h, 1.0) for r in out.reshape(-1, 2)]
        return pts if out.ndim == 2 else pts[0]
    if output_stride is None:
        if image_dims is None:
            raise ValueError("map head needs output_stride or image_dims")
        output_stride = image_dims[0] // out.shape[-2]
    if head.variant == "pixelwise":
        return ActivationMap(_sigmoid_np(out), output_stride, "sigmoid")
    return ActivationMap(_softmax_np(out), output_stride, "spatial_softmax")


def decode_argmax(amap: ActivationMap, image_dims=None) -> PredictedPoint:
    """Cell-center of the maximal score; ties go to the lowest row-major index."""
    scores = np.asarray(amap.scores)
    if scores.ndim != 2 or scores.size == 0:
        raise ValueError("decode_argmax expects a non-empty h×w map")
    flat = int(np.argmax(scores))
    i, j = divmod(flat, scores.shape[1])
    s = amap.output_stride
    return PredictedPoint((j + 0.5) * s, (i + 0.5) * s, float(scores[i, j]))


def map_confidence(amap: ActivationMap) -> float:
    scores = np.asarray(amap.scores)
    if scores.size == 0:
        raise ValueError("empty activation map")
    return float(scores.max())


def encode_target(point, map_dims, stride: int) -> np.ndarray:
    """One-hot h×w grid with the cell containing ``point`` = (x, y) set to 1."""
    x, y = point
    h, w = map_dims
    if not (0 <= x < w * stride and 0 <= y < h * stride):
        raise ValueError(f"point {point} outside image {h * stride}x{w * stride}")
    i = min(int(math.floor(y / stride)), h - 1)
    j = min(int(math.floor(x / stride)), w - 1)
    grid = np.zeros((h, w), np.float32)
    grid[i, j] = 1.0
    return grid


@dataclass
class ModelConfig:
    head_variant: str = "spatial_softmax"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def to_dict(self) -> dict:
        return {"head_variant": self.head_variant, "backbone": asdict(self.backbone)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(d["head_variant"], BackboneConfig(**d.get("backbone", {})))


class DetectionModel:
    """Feature extractor plus one head, over a flat name→Tensor parameter set."""

    def __init__(self, config: ModelConfig, params: Mapping[str, np.ndarray]):
        self.config = config
        expected = self.expected_shapes(config)
        got = {k: tuple(np.shape(v)) for k, v in params.items()}
        if got != expected:
            missing = sorted(set(expected) - set(got))
            wrong = sorted(k for k in set(expected) & set(got) if expected[k] != got[k])
            extra = sorted(set(got) - set(expected))
            raise ValueError(f"parameters do not fit the architecture (missing {missing}, wrong shape {wrong}, unexpected {extra})")
        self.params: dict[str, Tensor] = {k: Tensor(np.asarray(v, np.float32), requires_grad=True) for k, v in params.items()}
        self.backbone = FeatureExtractor(config.backbone, self.params)
        self.head = DetectionHead(config.head_variant, self.params, config.backbone.base_channels)

    @staticmethod
    def expected_shapes(config: ModelConfig) -> dict[str, tuple]:
        rng = np.random.default_rng(0)
        p = FeatureExtractor.init_params(config.backbone, rng)
        p.update(DetectionHead.init_params(config.head_variant, config.backbone.base_channels, rng))
        return {k: v.shape for k, v in p.items()}

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> "DetectionModel":
        if config.head_variant not in HEAD_VARIANTS:
            raise ValueError(f"unknown head variant {config.head_variant!r}")
        rng = np.random.default_rng(seed)
        p = FeatureExtractor.init_params(config.backbone, rng)
        p.update(DetectionHead.init_params(config.head_variant, config.backbone.base_channels, rng))
        return cls(config, p)

    @property
    def variant(self) -> str:
        return self.config.head_variant

    @property
    def stride(self) -> int:
        return self.config.backbone.output_stride

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def forward(self, images: np.ndarray) -> Tensor:
        """N×C×H×W images to N×2 normalized points or N×h×w logits."""
        images = np.asarray(images)
        if images.ndim != 4:
            raise ValueError(f"expected N×C×H×W images, got shape {images.shape}")
        x = Tensor(np.ascontiguousarray(images.transpose(1, 0, 2, 3)))
        return self.head.raw(self.backbone(x))

    def predict(self, images: np.ndarray, batch_size: int = 64) -> tuple[list[PredictedPoint], list[ActivationMap | None]]:
        """Decode points (and maps for map heads) for N×C×H×W ``images``."""
        images = np.asarray(images, np.float32)
        dims = images.shape[-2:]
        points: list[PredictedPoint] = []
        maps: list[ActivationMap | None] = []
        for start in range(0, len(images), batch_size):
            chunk = images[start : start + batch_size].transpose(1, 0, 2, 3)
            feats = self.backbone(Tensor(np.ascontiguousarray(chunk)))
            res = head_forward(self.head, feats, dims, self.stride)
            if self.variant == "regression":
                points.extend(res)
                maps.extend([None] * len(res))
                continue
            for s in res.scores:
                amap = ActivationMap(s, res.output_stride, res.activation_kind)
                points.append(decode_argmax(amap, dims))
                maps.append(amap)
        return points, maps


def write_container(path, header: dict, arrays: Mapping[str, np.ndarray]) -> None:
    """Magic, version, JSON header length, JSON header, then raw float32 LE buffers.

    The header's ``tensors`` list records each buffer's name and shape in the
    order the buffers follow.
    """
    header = dict(header)
    header["tensors"] = [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    if len(raw) < off + 8:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<II", raw, off)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    off += 8
    if len(raw) < off + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    off += hlen
    arrays: dict[str, np.ndarray] = {}
    for spec in header.pop("tensors"):
        shape = tuple(spec["shape"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if off + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated buffer for {spec['name']}")
        arrays[spec["name"]] = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=off).reshape(shape).astype(np.float32)
        off += nbytes
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return header, arrays


def save_model(model: DetectionModel, path) -> None:
    write_container(path, {"architecture": model.config.to_dict()}, model.parameter_arrays())


def load_model(path) -> DetectionModel:
    """Model from a bare model file or a training checkpoint.

    Checkpoints carry ``best/`` (best validation) and ``param/`` (last epoch)
    groups; the best group is preferred when present.
    """
    header, arrays = read_container(path)
    try:
        cfg = ModelConfig.from_dict(header["architecture"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad architecture header ({exc})") from exc
    for prefix in ("best/", "param/", ""):
        params = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix) and "/" not in k[len(prefix):]}
        if params:
            try:
                return DetectionModel(cfg, params)
            except ValueError as exc:
                raise CheckpointError(f"{path}: {exc}") from exc
    raise CheckpointError(f"{path}: no parameter tensors")
