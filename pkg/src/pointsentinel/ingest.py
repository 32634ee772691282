"""Sample records, line annotations, PGM images and patient-level splits."""

from __future__ import annotations

import csv
import json
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

TARGET_CLASSES = ("carina", "ett_tip")
CSV_FIELDS = ["case_id", "patient_id", "target_class", "x", "y", "pixel_spacing_mm", "image_path", "height", "width"]


class RecordError(ValueError):
    pass


@dataclass(frozen=True)
class SampleRecord:
    case_id: str
    patient_id: str
    image_path: str
    target_class: str
    point: tuple[float, float] | None
    image_dims: tuple[int, int]
    pixel_spacing_mm: float | None = None

    def __post_init__(self):
        if self.target_class not in TARGET_CLASSES:
            raise RecordError(f"{self.case_id}: unknown target_class {self.target_class!r}")
        h, w = self.image_dims
        if h <= 0 or w <= 0:
            raise RecordError(f"{self.case_id}: bad image dims {self.image_dims}")
        if self.point is not None:
            x, y = self.point
            if not (0 <= x < w and 0 <= y < h):
                raise RecordError(f"{self.case_id}: point {self.point} outside {h}x{w} image")
        if self.pixel_spacing_mm is not None and not self.pixel_spacing_mm > 0:
            raise RecordError(f"{self.case_id}: pixel_spacing_mm must be positive")


@dataclass(frozen=True)
class LineAnnotation:
    case_id: str
    points: tuple[tuple[float, float], ...]


def line_to_tip(line: LineAnnotation | Sequence[Sequence[float]]) -> tuple[float, float]:
    """Bottom-most point (max y, image rows grow downward); last one wins ties."""
    pts = line.points if isinstance(line, LineAnnotation) else line
    if len(pts) == 0:
        raise ValueError("line annotation has no points")
    best = pts[0]
    for p in pts[1:]:
        if p[1] >= best[1]:
            best = p
    return (float(best[0]), float(best[1]))


def read_line_annotations(path) -> list[LineAnnotation]:
    """JSON-lines file, one ``{"case_id": ..., "points": [[x, y], ...]}`` per line."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
                pts = tuple((float(x), float(y)) for x, y in obj["points"])
                case_id = str(obj["case_id"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise RecordError(f"{path}:{lineno}: malformed line annotation ({exc})") from exc
            if not pts:
                raise RecordError(f"{path}:{lineno}: empty point list")
            out.append(LineAnnotation(case_id, pts))
    return out


def write_line_annotations(lines: Iterable[LineAnnotation], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ln in lines:
            fh.write(json.dumps({"case_id": ln.case_id, "points": [list(p) for p in ln.points]}) + "\n")


def split_by_patient(records: Sequence[SampleRecord], train_frac: float, seed: int):
    """Seeded patient-disjoint split; returns (train, test) in input order."""
    if not 0 < train_frac < 1:
        raise ValueError("train_frac must be in (0, 1)")
    patients = sorted({r.patient_id for r in records})
    if len(patients) < 2:
        raise ValueError("need at least two patients to split")
    random.Random(seed).shuffle(patients)
    n_train = round(train_frac * len(patients))
    n_train = min(max(n_train, 1), len(patients) - 1)
    train_ids = set(patients[:n_train])
    train = [r for r in records if r.patient_id in train_ids]
    test = [r for r in records if r.patient_id not in train_ids]
    return train, test


def _fmt(v: float) -> str:
    return repr(float(v))


def write_records(records: Iterable[SampleRecord], csv_path) -> None:
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in records:
            x, y = ("", "") if r.point is None else (_fmt(r.point[0]), _fmt(r.point[1]))
            spacing = "" if r.pixel_spacing_mm is None else _fmt(r.pixel_spacing_mm)
            w.writerow([r.case_id, r.patient_id, r.target_class, x, y, spacing, r.image_path, r.image_dims[0], r.image_dims[1]])


def read_records(csv_path) -> list[SampleRecord]:
    out = []
    with open(csv_path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_FIELDS:
            raise RecordError(f"{csv_path}:1: expected header {','.join(CSV_FIELDS)}")
        for lineno, row in enumerate(reader, 2):
            if len(row) != len(CSV_FIELDS):
                raise RecordError(f"{csv_path}:{lineno}: expected {len(CSV_FIELDS)} fields, got {len(row)}")
            d = dict(zip(CSV_FIELDS, row))
            try:
                if (d["x"] == "") != (d["y"] == ""):
                    raise ValueError("x and y must both be present or both empty")
                point = None if d["x"] == "" else (float(d["x"]), float(d["y"]))
                if point is not None and not all(math.isfinite(v) for v in point):
                    raise ValueError("non-finite coordinate")
                spacing = None if d["pixel_spacing_mm"] == "" else float(d["pixel_spacing_mm"])
                dims = (int(d["height"]), int(d["width"]))
                out.append(SampleRecord(d["case_id"], d["patient_id"], d["image_path"], d["target_class"], point, dims, spacing))
            except ValueError as exc:
                raise RecordError(f"{csv_path}:{lineno}: {exc}") from exc
    return out


def save_pgm(image: np.ndarray, path, maxval: int = 65535) -> None:
    """Write a [0, 1] float image as binary P5 PGM (8- or 16-bit by maxval)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("save_pgm expects a 2-D image")
    if maxval not in (255, 65535):
        raise ValueError("maxval must be 255 or 65535")
    q = np.rint(np.clip(img, 0.0, 1.0) * maxval)
    data = q.astype(">u2" if maxval > 255 else "u1").tobytes()
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(data)


def _pgm_tokens(raw: bytes, count: int) -> tuple[list[int], int]:
    tokens: list[int] = []
    i = 0
    while len(tokens) < count:
        while i < len(raw) and raw[i : i + 1].isspace():
            i += 1
        if i < len(raw) and raw[i : i + 1] == b"#":
            while i < len(raw) and raw[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(raw) and not raw[j : j + 1].isspace():
            j += 1
        if j == i:
            raise ValueError("truncated PGM header")
        tokens.append(int(raw[i:j]))
        i = j
    return tokens, i + 1  # single whitespace byte ends the header


def load_image(path) -> np.ndarray:
    """Read a P5 PGM (maxval 255 or 65535) as float64 values in [0, 1]."""
    raw = Path(path).read_bytes()
    if raw[:2] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (bad magic)")
    try:
        (w, h, maxval), off = _pgm_tokens(raw[2:], 3)
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from exc
    off += 2
    if w <= 0 or h <= 0 or not 0 < maxval <= 65535:
        raise ValueError(f"{path}: bad dimensions or maxval")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * dtype.itemsize
    if len(raw) - off < need:
        raise ValueError(f"{path}: pixel data truncated")
    pix = np.frombuffer(raw, dtype=dtype, count=w * h, offset=off).reshape(h, w)
    return pix.astype(np.float64) / maxval
