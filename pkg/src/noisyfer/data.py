"""Video samples, dataset manifests and the synthetic emotion generator.

Manifest file format (JSON, UTF-8)::

    {
      "format": "noisyfer-manifest/1",
      "dataset_id": str,
      "classes": [7 class names],
      "illumination_corrected": bool,       # optional; absent = unknown
      "entries": [
        {"video_id": str,
         "label": int | "UNLABELLED",
         "frame_count": int,
         # exactly one of:
         "inline": {"shape": [n, 9, S, S], "float64_le_b64": str},
         "frame_paths": [str, ...]}          # each a .npy array 9 x S x S
      ]
    }

Inline frames are the raw little-endian float64 buffer (row-major), base64
encoded, so a round trip is bit-exact.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import InputError
from .tensor import Rng

CLASSES = ("anger", "neutral", "sad", "fear", "surprise", "happiness", "disgust")
AFEW_TRAIN_COUNTS = (197, 207, 179, 127, 120, 212, 114)
UNLABELLED = "UNLABELLED"
MANIFEST_FORMAT = "noisyfer-manifest/1"

# region channel-group carrying each class's signal (0 face, 1 eyes, 2 mouth)
CLASS_REGION = {0: 2, 1: 0, 2: 1, 3: 1, 4: 2, 5: 2, 6: 1}


@dataclass
class VideoSample:
    video_id: str
    frames: np.ndarray  # n x 9 x S x S, values in [0, 1]
    label: int | None = None
    pseudo_label: int | None = None
    confidence: float | None = None

    @property
    def frame_count(self) -> int:
        return int(self.frames.shape[0])

    @property
    def target(self) -> int:
        """Label used for training: the true label if present, else the pseudo-label."""
        if self.label is not None:
            return self.label
        if self.pseudo_label is None:
            raise InputError(f"video {self.video_id} has neither a label nor a pseudo-label")
        return self.pseudo_label


@dataclass
class Manifest:
    dataset_id: str
    entries: list[VideoSample] = field(default_factory=list)
    classes: tuple[str, ...] = CLASSES
    frame_paths: dict[str, list[str]] = field(default_factory=dict)
    illumination_corrected: bool | None = None  # None: unknown / not applicable

    def __len__(self):
        return len(self.entries)

    def __eq__(self, other):
        if not isinstance(other, Manifest):
            return NotImplemented
        if (self.dataset_id, tuple(self.classes), self.frame_paths, self.illumination_corrected) != (
            other.dataset_id,
            tuple(other.classes),
            other.frame_paths,
            other.illumination_corrected,
        ):
            return False
        if len(self.entries) != len(other.entries):
            return False
        for a, b in zip(self.entries, other.entries):
            if a.video_id != b.video_id or a.label != b.label:
                return False
            if a.frames.shape != b.frames.shape or a.frames.tobytes() != b.frames.tobytes():
                return False
        return True

    def labels(self) -> np.ndarray:
        return np.array([-1 if e.label is None else e.label for e in self.entries])

    def class_counts(self) -> np.ndarray:
        labels = self.labels()
        return np.bincount(labels[labels >= 0], minlength=len(self.classes))

    def unlabelled(self) -> "Manifest":
        return replace(self, entries=[replace(e, label=None) for e in self.entries])


def _encode(frames: np.ndarray) -> dict:
    arr = np.ascontiguousarray(frames, dtype="<f8")
    return {"shape": list(arr.shape), "float64_le_b64": base64.b64encode(arr.tobytes()).decode("ascii")}


def _decode(blob: dict) -> np.ndarray:
    raw = base64.b64decode(blob["float64_le_b64"])
    return np.frombuffer(raw, dtype="<f8").reshape(blob["shape"]).astype(np.float64)


def manifest_to_dict(m: Manifest) -> dict:
    entries = []
    for e in m.entries:
        d = {
            "video_id": e.video_id,
            "label": UNLABELLED if e.label is None else int(e.label),
            "frame_count": e.frame_count,
        }
        if e.video_id in m.frame_paths:
            d["frame_paths"] = list(m.frame_paths[e.video_id])
        else:
            d["inline"] = _encode(e.frames)
        entries.append(d)
    out = {"format": MANIFEST_FORMAT, "dataset_id": m.dataset_id, "classes": list(m.classes)}
    if m.illumination_corrected is not None:
        out["illumination_corrected"] = bool(m.illumination_corrected)
    out["entries"] = entries
    return out


def manifest_from_dict(d: dict, base: Path | None = None) -> Manifest:
    if d.get("format") != MANIFEST_FORMAT:
        raise InputError(f"unsupported manifest format {d.get('format')!r}")
    classes = tuple(d["classes"])
    entries, paths = [], {}
    for i, raw in enumerate(d["entries"]):
        label = raw["label"]
        if label == UNLABELLED:
            label = None
        elif not isinstance(label, int) or not 0 <= label < len(classes):
            raise InputError(f"entry {i}: label {label!r} outside the class table")
        if "inline" in raw:
            frames = _decode(raw["inline"])
        elif "frame_paths" in raw:
            files = [Path(p) if base is None or Path(p).is_absolute() else base / p for p in raw["frame_paths"]]
            try:
                frames = np.stack([np.load(p).astype(np.float64) for p in files])
            except OSError as exc:
                raise InputError(f"entry {i}: cannot read frame file: {exc}") from exc
            paths[raw["video_id"]] = list(raw["frame_paths"])
        else:
            raise InputError(f"entry {i}: needs 'inline' or 'frame_paths'")
        if frames.shape[0] < 1 or frames.shape[0] != raw["frame_count"]:
            raise InputError(f"entry {i}: frame_count {raw['frame_count']} but {frames.shape[0]} frames stored")
        entries.append(VideoSample(raw["video_id"], frames, label))
    return Manifest(d["dataset_id"], entries, classes, paths, d.get("illumination_corrected"))


def save_manifest(m: Manifest, path) -> None:
    Path(path).write_text(json.dumps(manifest_to_dict(m)))


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read manifest {path}: {exc}") from exc
    return manifest_from_dict(d, base=path.parent)


# -- synthetic data ----------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 7
    labelled_per_class: int = 30
    unlabelled_per_class: int = 120
    validation_per_class: int = 30
    frames_range: tuple[int, int] = (3, 5)
    side: int = 8
    signal: float = 0.35
    background: float = 0.15
    label_noise: float = 0.1
    # per-video nuisances: global brightness offset, pattern shift in pixels
    brightness_jitter: float = 0.15
    max_shift: int = 1
    flip_prob: float = 0.5
    signal_frame_prob: float = 0.6


def class_patterns(spec: SyntheticSpec) -> np.ndarray:
    """Fixed +/-1 patterns, one per class, shape K x S x S (seed-independent)."""
    g = np.random.Generator(np.random.PCG64(20200917))
    return np.where(g.random((spec.num_classes, spec.side, spec.side)) < 0.5, -1.0, 1.0)


def _make_video(cls: int, spec: SyntheticSpec, patterns: np.ndarray, rng: Rng) -> np.ndarray:
    lo, hi = spec.frames_range
    n = int(rng.integers(lo, hi + 1))
    s = spec.side
    base = 0.5 + rng.uniform(-spec.brightness_jitter, spec.brightness_jitter)
    frames = base + spec.background * rng.normal(0.0, 1.0, (n, 9, s, s))
    pat = patterns[cls]
    dy, dx = (int(v) for v in rng.integers(-spec.max_shift, spec.max_shift + 1, size=2))
    pat = np.roll(pat, (dy, dx), axis=(0, 1))
    if rng.random() < spec.flip_prob:
        pat = pat[:, ::-1]
    region = CLASS_REGION[cls % 7]
    active = rng.random(n) < spec.signal_frame_prob
    active[int(rng.integers(0, n))] = True
    for i in np.flatnonzero(active):
        frames[i, 3 * region : 3 * region + 3] += spec.signal * pat
    return np.clip(frames, 0.0, 1.0)


def _draw_set(name: str, per_class: int, spec: SyntheticSpec, patterns, rng: Rng, noisy: bool) -> list[VideoSample]:
    out = []
    for c in range(spec.num_classes):
        for j in range(per_class):
            label = c
            if noisy and spec.label_noise > 0 and rng.random() < spec.label_noise:
                label = int((c + rng.integers(1, spec.num_classes)) % spec.num_classes)
            out.append(VideoSample(f"{name}-{c}-{j:04d}", _make_video(c, spec, patterns, rng), label))
    order = rng.permutation(len(out))
    return [out[i] for i in order]


def generate_synthetic(spec: SyntheticSpec, rng: Rng):
    """Labelled (with label noise), unlabelled, and clean validation manifests.

    Each class is a fixed spatial pattern added to one region group (eyes for
    sad/fear/disgust, mouth for anger/surprise/happiness, whole face for
    neutral) on a random subset of frames. Unlabelled entries keep their
    ground truth in ``truth`` for offline analysis only.
    """
    patterns = class_patterns(spec)
    labelled = Manifest("synthetic-labelled", _draw_set("lab", spec.labelled_per_class, spec, patterns, rng, True))
    raw_unl = _draw_set("unl", spec.unlabelled_per_class, spec, patterns, rng, False)
    truth = {e.video_id: e.label for e in raw_unl}
    unlabelled = Manifest("synthetic-unlabelled", [replace(e, label=None) for e in raw_unl])
    validation = Manifest("synthetic-validation", _draw_set("val", spec.validation_per_class, spec, patterns, rng, False))
    return labelled, unlabelled, validation, truth
