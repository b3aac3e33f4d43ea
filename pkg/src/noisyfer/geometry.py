"""Face alignment, landmark-anchored region crops and unlabelled-clip validation.

Coordinates are pixels with x to the right and y down. Affine transforms are
2x3 matrices mapping source-frame points to crop points.

Landmark record text format, one frame per line, whitespace separated::

    frame_index n_faces [x y w h lex ley rex rey nx ny lmx lmy rmx rmy]

The bracketed 14 numbers (box, then left eye, right eye, nose, left mouth,
right mouth) are present iff ``n_faces >= 1``. ``#`` starts a comment.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import GeometryError, InputError

log = logging.getLogger(__name__)

LANDMARKS = ("left_eye", "right_eye", "nose", "left_mouth", "right_mouth")


@dataclass
class LandmarkRecord:
    frame_index: int
    n_faces: int
    box: tuple[float, float, float, float] | None = None  # x, y, w, h
    landmarks: np.ndarray | None = None  # 5 x 2, order of LANDMARKS

    def point(self, name: str) -> np.ndarray:
        if self.landmarks is None:
            raise GeometryError(f"frame {self.frame_index}: no landmarks")
        return self.landmarks[LANDMARKS.index(name)]

    def area(self) -> float:
        return 0.0 if self.box is None else float(self.box[2] * self.box[3])


def parse_records(lines: Iterable[str], frame_size: tuple[int, int] | None = None) -> list[LandmarkRecord]:
    """Parse the landmark text format; errors name the offending line."""
    out = []
    for lineno, raw in enumerate(lines, start=1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        parts = text.split()
        try:
            idx, n = int(parts[0]), int(parts[1])
            nums = [float(p) for p in parts[2:]]
        except (ValueError, IndexError) as exc:
            raise InputError(f"line {lineno}: cannot parse record: {exc}") from exc
        if n < 0:
            raise InputError(f"line {lineno}: negative face count")
        if n == 0:
            if nums:
                raise InputError(f"line {lineno}: landmarks given for a frame with no face")
            out.append(LandmarkRecord(idx, 0))
            continue
        if len(nums) != 14:
            raise InputError(f"line {lineno}: expected 14 numbers after the face count, got {len(nums)}")
        box = tuple(nums[:4])
        if box[2] <= 0 or box[3] <= 0:
            raise InputError(f"line {lineno}: box must have positive size")
        if frame_size is not None:
            fw, fh = frame_size
            if box[0] < 0 or box[1] < 0 or box[0] + box[2] > fw or box[1] + box[3] > fh:
                raise InputError(f"line {lineno}: box {box} outside the {fw}x{fh} frame")
        out.append(LandmarkRecord(idx, n, box, np.array(nums[4:], dtype=np.float64).reshape(5, 2)))
    return out


def format_record(rec: LandmarkRecord) -> str:
    if rec.n_faces == 0 or rec.box is None or rec.landmarks is None:
        return f"{rec.frame_index} {rec.n_faces}"
    nums = list(rec.box) + rec.landmarks.ravel().tolist()
    return f"{rec.frame_index} {rec.n_faces} " + " ".join(repr(float(v)) for v in nums)


# -- transforms ----------------------------------------------------------------


def alignment_angle(left_eye, right_eye) -> float:
    """Angle (radians) of the eye line against the horizontal."""
    l = np.asarray(left_eye, dtype=np.float64)
    r = np.asarray(right_eye, dtype=np.float64)
    d = r - l
    if not np.any(d):
        raise GeometryError("eye landmarks coincide")
    return math.atan2(d[1], d[0])


def rotation_about(center, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    cx, cy = (float(v) for v in center)
    R = np.array([[c, -s], [s, c]])
    t = np.array([cx, cy]) - R @ np.array([cx, cy])
    return np.hstack([R, t[:, None]])


def align_transform(left_eye, right_eye) -> np.ndarray:
    """Rotation by -angle about the eye midpoint; levels the eye line."""
    mid = (np.asarray(left_eye, float) + np.asarray(right_eye, float)) / 2.0
    return rotation_about(mid, -alignment_angle(left_eye, right_eye))


def apply_affine(A: np.ndarray, pts) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    return pts @ A[:, :2].T + A[:, 2]


def invert_affine(A: np.ndarray) -> np.ndarray:
    M = np.linalg.inv(A[:, :2])
    return np.hstack([M, (-M @ A[:, 2])[:, None]])


def similarity_from_pairs(src1, src2, dst1, dst2) -> np.ndarray:
    """Rotation + uniform scale + translation taking src1->dst1 and src2->dst2."""
    p1, p2, q1, q2 = (complex(*np.asarray(p, dtype=np.float64)) for p in (src1, src2, dst1, dst2))
    if p1 == p2:
        raise GeometryError("anchor landmarks coincide")
    a = (q2 - q1) / (p2 - p1)
    b = q1 - a * p1
    return np.array([[a.real, -a.imag, b.real], [a.imag, a.real, b.imag]])


@dataclass(frozen=True)
class CropSpec:
    region: str
    anchors: tuple[str, str] = ("left_eye", "right_eye")
    targets: tuple[tuple[float, float], tuple[float, float]] = ((0.2, 0.6), (0.8, 0.6))
    side: int = 224
    margin: float = 0.1  # face crop only: box expansion

    def __post_init__(self):
        if self.region not in ("face", "eyes", "mouth"):
            raise GeometryError(f"unknown region {self.region!r}")
        for tx, ty in self.targets:
            if not (0.0 < tx < 1.0 and 0.0 < ty < 1.0):
                raise GeometryError(f"target coordinates {self.targets} must lie in (0, 1)")


EYES_SPEC = CropSpec("eyes")
MOUTH_SPEC = CropSpec("mouth", ("left_mouth", "right_mouth"), ((0.25, 0.45), (0.75, 0.45)))
FACE_SPEC = CropSpec("face")


def region_specs(side: int = 224) -> tuple[CropSpec, CropSpec, CropSpec]:
    return tuple(CropSpec(s.region, s.anchors, s.targets, side, s.margin) for s in (FACE_SPEC, EYES_SPEC, MOUTH_SPEC))


def crop_transform(record: LandmarkRecord, spec: CropSpec) -> np.ndarray:
    """2x3 source->crop matrix for one region.

    Eyes/mouth: the two anchor landmarks land exactly on ``targets * side``.
    Face: the detection box grown by ``margin`` is rotated to level the eyes
    and scaled onto the crop.
    """
    if record.landmarks is None or record.n_faces < 1:
        raise GeometryError(f"frame {record.frame_index}: landmarks missing")
    S = spec.side
    if spec.region == "face":
        x, y, w, h = record.box
        side_src = max(w, h) * (1.0 + spec.margin)
        if side_src <= 0:
            raise GeometryError("degenerate face box")
        center = np.array([x + w / 2.0, y + h / 2.0])
        theta = alignment_angle(record.point("left_eye"), record.point("right_eye"))
        scale = S / side_src
        c, s = math.cos(-theta) * scale, math.sin(-theta) * scale
        M = np.array([[c, -s], [s, c]])
        t = np.array([S / 2.0, S / 2.0]) - M @ center
        return np.hstack([M, t[:, None]])
    a, b = (record.point(n) for n in spec.anchors)
    (t1x, t1y), (t2x, t2y) = spec.targets
    return similarity_from_pairs(a, b, (t1x * S, t1y * S), (t2x * S, t2y * S))


def warp_bilinear(image: np.ndarray, A: np.ndarray, side: int) -> np.ndarray:
    """Sample ``image`` (H x W x C) onto a side x side grid through ``A``.

    Out-of-frame samples take the nearest edge pixel.
    """
    h, w = image.shape[:2]
    inv = invert_affine(A)
    v, u = np.mgrid[0:side, 0:side].astype(np.float64)
    sx = inv[0, 0] * u + inv[0, 1] * v + inv[0, 2]
    sy = inv[1, 0] * u + inv[1, 1] * v + inv[1, 2]
    sx = np.clip(sx, 0.0, w - 1.0)
    sy = np.clip(sy, 0.0, h - 1.0)
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]
    img = image.astype(np.float64)
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _to_unit(image: np.ndarray) -> np.ndarray:
    if np.issubdtype(image.dtype, np.integer):
        return image.astype(np.float64) / 255.0
    return np.clip(image.astype(np.float64), 0.0, 1.0)


def build_region_stack(frame: np.ndarray, record: LandmarkRecord, specs: Sequence[CropSpec] | None = None) -> np.ndarray:
    """Face, eyes and mouth crops of an H x W x 3 frame as a 9 x S x S array in [0, 1]."""
    specs = specs or region_specs()
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise InputError(f"frame must be H x W x 3, got {frame.shape}")
    img = _to_unit(frame)
    crops = []
    for spec in specs:
        A = crop_transform(record, spec)
        crops.append(warp_bilinear(img, A, spec.side).transpose(2, 0, 1))
    return np.clip(np.concatenate(crops, axis=0), 0.0, 1.0)


def build_video_stack(frames: Sequence[np.ndarray], records: Sequence[LandmarkRecord], specs=None) -> tuple[np.ndarray, list[int]]:
    """Stacks for every frame with usable landmarks; returns (n x 9 x S x S, kept frame indices)."""
    out, kept = [], []
    for frame, rec in zip(frames, records):
        try:
            out.append(build_region_stack(frame, rec, specs))
            kept.append(rec.frame_index)
        except GeometryError as exc:
            log.warning("skipping frame %d: %s", rec.frame_index, exc)
    if not out:
        raise InputError("no frame had usable landmarks")
    return np.stack(out), kept


# -- clip validation -----------------------------------------------------------------


@dataclass(frozen=True)
class ClipRule:
    min_frames: int = 30
    area_threshold: float = 0.2
    majority: float = 0.5

    def __post_init__(self):
        if self.min_frames < 1:
            raise InputError("min_frames must be >= 1")
        if not 0.0 < self.area_threshold < 1.0:
            raise InputError("area_threshold must lie in (0, 1)")


def validate_clips(
    records: Sequence[LandmarkRecord],
    rule: ClipRule,
    frame_size: tuple[int, int],
    fixed_length: bool = False,
) -> list[tuple[int, int]]:
    """Spans ``(start_frame, length)`` that qualify as unlabelled clips.

    A span is a maximal run of consecutive single-face frames, at least
    ``min_frames`` long, in which strictly more than ``majority`` of the
    frames have box area / frame area >= ``area_threshold``. With
    ``fixed_length`` only the first ``min_frames`` frames of each qualifying
    run are emitted.
    """
    for prev, cur in zip(records, records[1:]):
        if cur.frame_index != prev.frame_index + 1:
            raise InputError(f"records out of order or with a gap at frame {prev.frame_index} -> {cur.frame_index}")
    fw, fh = frame_size
    frame_area = float(fw * fh)
    big = np.array([r.n_faces == 1 and r.area() / frame_area >= rule.area_threshold for r in records], dtype=bool)
    single = np.array([r.n_faces == 1 for r in records], dtype=bool)

    spans = []
    i, n = 0, len(records)
    while i < n:
        if not single[i]:
            i += 1
            continue
        j = i
        while j < n and single[j]:
            j += 1
        length = j - i
        if length >= rule.min_frames and big[i:j].sum() > rule.majority * length:
            spans.append((records[i].frame_index, rule.min_frames if fixed_length else length))
        i = j
    return spans
