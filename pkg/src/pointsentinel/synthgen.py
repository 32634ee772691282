"""Seeded radiograph-analog scenes with a single annotated target point.

Scenes are noise plus a smooth background gradient, a bright tube (a line
entering from the top edge whose lower end is the target) or a V-shaped
bifurcation whose junction is the target, and optionally a short curved
distractor tube that looks like the target tube up close.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .ingest import SampleRecord

# stream tags keep presence-set scenes independent of dataset scenes
_STREAM_DATASET = 0
_STREAM_POSITIVE = 1
_STREAM_NEGATIVE = 2


@dataclass(frozen=True)
class SceneConfig:
    image_size: tuple[int, int] = (64, 64)
    noise_std: float = 0.04
    tube_width_px: int = 2
    ett_min_len_frac: float = 0.2
    ett_max_len_frac: float = 0.8
    tt_len_frac: float = 0.3
    distractor_prob: float = 0.0
    target_class: str = "ett_tip"
    carina_branch_angle_deg: float = 70.0
    pixel_spacing_mm: float | None = 5.0
    seed: int = 0
    tip_bias_px: tuple[float, float] = (0.0, 0.0)
    margin_frac: float = 0.125
    tube_intensity: float = 0.55
    falloff_px: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        object.__setattr__(self, "tip_bias_px", tuple(float(v) for v in self.tip_bias_px))
        if not 0 < self.ett_min_len_frac <= self.ett_max_len_frac <= 1:
            raise ValueError("need 0 < ett_min_len_frac <= ett_max_len_frac <= 1")
        if not 0 <= self.distractor_prob <= 1:
            raise ValueError("distractor_prob must lie in [0, 1]")
        if self.target_class not in ("ett_tip", "carina"):
            raise ValueError(f"unknown target_class {self.target_class!r}")
        if self.noise_std < 0 or self.tube_width_px < 1:
            raise ValueError("noise_std must be >= 0 and tube_width_px >= 1")
        if min(self.image_size) < 8:
            raise ValueError("image_size too small")
        if self.pixel_spacing_mm is not None and self.pixel_spacing_mm <= 0:
            raise ValueError("pixel_spacing_mm must be positive")

    @property
    def margin(self) -> float:
        return max(float(self.tube_width_px), self.margin_frac * min(self.image_size))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["tip_bias_px"] = list(self.tip_bias_px)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SyntheticScene:
    image: np.ndarray
    record: SampleRecord
    has_target: bool
    has_distractor: bool
    distractor_tip: tuple[float, float] | None = field(default=None, repr=False)


def scene_rng(seed: int, index: int, stream: int = _STREAM_DATASET) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), index, stream]))


def background(cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    """Low-frequency intensity field: base level plus a random linear ramp and a soft blob."""
    h, w = cfg.image_size
    yy, xx = np.mgrid[0:h, 0:w]
    u, v = xx / max(w - 1, 1) - 0.5, yy / max(h - 1, 1) - 0.5
    base = rng.uniform(0.18, 0.28)
    gx, gy = rng.uniform(-0.08, 0.08, size=2)
    cx, cy = rng.uniform(-0.3, 0.3, size=2)
    amp = rng.uniform(0.0, 0.08)
    blob = amp * np.exp(-((u - cx) ** 2 + (v - cy) ** 2) / (2 * 0.25**2))
    return base + gx * u + gy * v + blob


def _segment_distance(px: np.ndarray, py: np.ndarray, pts: np.ndarray) -> np.ndarray:
    d = np.full(px.shape, np.inf)
    for (x0, y0), (x1, y1) in zip(pts[:-1], pts[1:]):
        dx, dy = x1 - x0, y1 - y0
        L2 = dx * dx + dy * dy
        t = np.zeros_like(px) if L2 == 0 else np.clip(((px - x0) * dx + (py - y0) * dy) / L2, 0.0, 1.0)
        d = np.minimum(d, np.hypot(px - (x0 + t * dx), py - (y0 + t * dy)))
    return d


def render_polyline(cfg: SceneConfig, pts) -> np.ndarray:
    """Anti-aliased tube: flat core of ``tube_width_px`` with a Gaussian edge.

    Pixel (r, c) is sampled at its center (c + 0.5, r + 0.5), so a polyline
    ending at point p has its visible end at p in continuous pixel coordinates.
    """
    h, w = cfg.image_size
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    d = _segment_distance(xx, yy, np.asarray(pts, dtype=np.float64))
    excess = np.maximum(d - cfg.tube_width_px / 2.0, 0.0)
    sigma = cfg.falloff_px / 2.0
    return cfg.tube_intensity * np.exp(-0.5 * (excess / sigma) ** 2)


def sample_tip(cfg: SceneConfig, rng: np.random.Generator) -> tuple[float, float]:
    """Uniform tip in the central region (ETT tips also obey the tube-length range)."""
    h, w = cfg.image_size
    m = cfg.margin
    y_lo, y_hi = m, h - m
    if cfg.target_class == "ett_tip":
        y_lo = max(y_lo, cfg.ett_min_len_frac * h)
        y_hi = min(y_hi, cfg.ett_max_len_frac * h)
        if y_lo > y_hi:
            y_lo = y_hi = 0.5 * (y_lo + y_hi)
    x = rng.uniform(m, w - m) + cfg.tip_bias_px[0]
    y = rng.uniform(y_lo, y_hi) + cfg.tip_bias_px[1]
    return float(np.clip(x, 0.0, np.nextafter(w, 0))), float(np.clip(y, 0.0, np.nextafter(h, 0)))


def ett_polyline(cfg: SceneConfig, tip, rng: np.random.Generator) -> np.ndarray:
    """Near-vertical line from the top edge to ``tip`` with small lateral jitter."""
    tx, ty = tip
    x_top = tx + rng.uniform(-0.15, 0.15) * ty
    n = 4
    ys = np.linspace(-2.0, ty, n + 1)
    xs = np.linspace(x_top, tx, n + 1)
    xs[1:-1] += rng.uniform(-1.0, 1.0, size=n - 1)
    return np.column_stack([xs, ys])


def carina_polylines(cfg: SceneConfig, junction, rng: np.random.Generator) -> list[np.ndarray]:
    """Trachea from the top edge down to ``junction``, then two diverging bronchi."""
    jx, jy = junction
    h = cfg.image_size[0]
    trachea = np.array([[jx + rng.uniform(-2.0, 2.0), -2.0], [jx, jy]])
    half = math.radians(cfg.carina_branch_angle_deg) / 2.0
    length = 0.3 * h
    branches = []
    for sign in (-1.0, 1.0):
        ang = half + rng.uniform(-0.1, 0.1)
        end = (jx + sign * length * math.sin(ang), jy + length * math.cos(ang))
        branches.append(np.array([[jx, jy], end]))
    return [trachea, *branches]


def tt_polyline(cfg: SceneConfig, tip, rng: np.random.Generator) -> np.ndarray:
    """Short tube ending at ``tip``: a quarter arc from a mid-image stoma that
    bends into a straight downward run.

    The straight lower half makes the end look like the target tube's end up
    close; only the free upper end and the bend give it away.
    """
    tx, ty = tip
    length = cfg.tt_len_frac * cfg.image_size[0]
    straight = 0.5 * length
    r = (length - straight) / (math.pi / 2)
    side = 1.0 if rng.random() < 0.5 else -1.0
    top_y = ty - straight
    # arc center beside the top of the straight run, so the tangent is continuous
    cx, cy = tx + side * r, top_y
    angles = np.linspace(math.pi / 2, 0.0, 10)
    arc = np.column_stack([cx - side * r * np.cos(angles), cy - r * np.sin(angles)])
    return np.vstack([arc, [[tx, ty]]])


def tt_stoma_offset(cfg: SceneConfig) -> tuple[float, float]:
    """(|dx|, dy) from the distractor's end up to its stoma."""
    length = cfg.tt_len_frac * cfg.image_size[0]
    r = 0.5 * length / (math.pi / 2)
    return r, 0.5 * length + r


def _distractor_tip(cfg: SceneConfig, rng: np.random.Generator, avoid=None) -> tuple[float, float]:
    """Distractor end point: the stoma sits in the upper-middle band, the end one radius below."""
    h, w = cfg.image_size
    m = cfg.margin
    rx, ry = tt_stoma_offset(cfg)
    x_lo, x_hi = min(m + rx, w / 2), max(w - m - rx, w / 2)
    for _ in range(32):
        x = rng.uniform(x_lo, x_hi)
        y = min(rng.uniform(0.3 * h, 0.5 * h) + ry, h - m)
        if avoid is None or math.hypot(x - avoid[0], y - avoid[1]) > 0.25 * min(h, w):
            break
    return float(x), float(y)


def _compose(cfg: SceneConfig, rng: np.random.Generator, bg: np.ndarray, layers: list[np.ndarray]) -> np.ndarray:
    img = bg + np.maximum.reduce(layers) if layers else bg
    if cfg.noise_std > 0:
        img = img + rng.normal(0.0, cfg.noise_std, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _record(cfg: SceneConfig, index: int, point, patient: str, prefix: str = "case") -> SampleRecord:
    case_id = f"{prefix}{index:06d}"
    return SampleRecord(
        case_id=case_id,
        patient_id=patient,
        image_path=f"images/{case_id}.pgm",
        target_class=cfg.target_class,
        point=point,
        image_dims=cfg.image_size,
        pixel_spacing_mm=cfg.pixel_spacing_mm,
    )


def _render(cfg: SceneConfig, rng: np.random.Generator, with_target: bool, distractor: bool):
    bg = background(cfg, rng)
    layers, tip, dtip = [], None, None
    if with_target:
        tip = sample_tip(cfg, rng)
        if cfg.target_class == "ett_tip":
            layers.append(render_polyline(cfg, ett_polyline(cfg, tip, rng)))
        else:
            layers.extend(render_polyline(cfg, pl) for pl in carina_polylines(cfg, tip, rng))
    if distractor:
        dtip = _distractor_tip(cfg, rng, avoid=tip)
        layers.append(render_polyline(cfg, tt_polyline(cfg, dtip, rng)))
    return _compose(cfg, rng, bg, layers), tip, dtip


def generate_scene(cfg: SceneConfig, index: int, patient_id: str | None = None, *, with_target: bool = True) -> SyntheticScene:
    """Scene ``index`` of the stream defined by ``cfg.seed``; pure in (cfg, index).

    With probability ``distractor_prob`` a distractor tube is added to the
    target (or drawn alone when ``with_target`` is false).
    """
    rng = scene_rng(cfg.seed, index)
    distractor = bool(rng.random() < cfg.distractor_prob)
    image, tip, dtip = _render(cfg, rng, with_target, distractor)
    rec = _record(cfg, index, tip, patient_id if patient_id is not None else f"P{index:06d}")
    return SyntheticScene(image, rec, with_target, distractor, dtip)


def generate_background(cfg: SceneConfig, index: int) -> np.ndarray:
    """Noise-free background that :func:`generate_scene` draws for ``index``."""
    rng = scene_rng(cfg.seed, index)
    rng.random()
    return background(cfg, rng)


def generate_dataset(cfg: SceneConfig, n: int, patient_group_size: int = 1) -> list[SyntheticScene]:
    """``n`` scenes; consecutive groups of ``patient_group_size`` share a patient id."""
    if n < 1 or patient_group_size < 1:
        raise ValueError("n and patient_group_size must be >= 1")
    return [generate_scene(cfg, i, f"P{i // patient_group_size:06d}") for i in range(n)]


def make_presence_set(cfg: SceneConfig, n_pos: int, n_neg: int) -> list[SyntheticScene]:
    """Target-tube positives (no distractor) followed by distractor-only negatives."""
    if n_pos < 1 or n_neg < 1:
        raise ValueError("n_pos and n_neg must be >= 1")
    scenes = []
    for i in range(n_pos):
        rng = scene_rng(cfg.seed, i, _STREAM_POSITIVE)
        image, tip, _ = _render(cfg, rng, True, False)
        scenes.append(SyntheticScene(image, _record(cfg, i, tip, f"Q{i:06d}", "pos"), True, False))
    for i in range(n_neg):
        rng = scene_rng(cfg.seed, i, _STREAM_NEGATIVE)
        image, _, dtip = _render(cfg, rng, False, True)
        scenes.append(SyntheticScene(image, _record(cfg, i, None, f"N{i:06d}", "neg"), False, True, dtip))
    return scenes


def shifted_config(cfg: SceneConfig, offset_diag: float, direction=(0.0, -1.0)) -> SceneConfig:
    """Copy of ``cfg`` whose tips move by ``offset_diag`` image diagonals along ``direction``."""
    h, w = cfg.image_size
    norm = math.hypot(*direction)
    step = offset_diag * math.hypot(h, w) / norm
    bx, by = cfg.tip_bias_px
    return replace(cfg, tip_bias_px=(bx + step * direction[0], by + step * direction[1]))


def scenes_to_arrays(scenes: list[SyntheticScene]) -> np.ndarray:
    return np.stack([s.image for s in scenes]).astype(np.float32)[:, None]


def load_scene_config(path) -> SceneConfig:
    """Scene config JSON with a required ``version`` field; extra keys ``n``,
    ``patient_group_size`` are dataset-level and ignored here."""
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    if "version" not in d:
        raise ValueError(f"{path}: missing 'version' field")
    d = {k: v for k, v in d.items() if k not in ("version", "n", "patient_group_size", "presence")}
    return SceneConfig.from_dict(d)
