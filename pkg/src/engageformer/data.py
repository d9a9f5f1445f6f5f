"""Clip and manifest file formats, PPM frame ingestion, synthetic data, splitting and metrics.

Clip file (``.efv``): ``b"EFV1"``, u32 little-endian T, H, W, D, then
T*H*W*D unsigned bytes in (t, h, w, c) row-major order.

Manifest: UTF-8 text with ``#label <id> <name>`` header lines and one
``<relative path>\\t<label id>\\t<label name>`` record per clip. Paths are
relative to the manifest's directory.
"""

from __future__ import annotations

import math
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .errors import (BadMagicError, DataError, HeaderMismatchError, ManifestError, PpmError,
                     SplitError, TruncatedPayloadError)
from .numerics import Rng

CLIP_MAGIC = b"EFV1"
_HEADER = struct.Struct("<4I")


# ---------------------------------------------------------------- clip files

def encode_clip(clip: np.ndarray) -> bytes:
    clip = np.asarray(clip)
    if clip.ndim != 4 or clip.dtype != np.uint8:
        raise DataError(f"clips are 4-D uint8 arrays, got {clip.dtype} {clip.shape}")
    return CLIP_MAGIC + _HEADER.pack(*clip.shape) + np.ascontiguousarray(clip).tobytes()


def decode_clip(buf: bytes) -> np.ndarray:
    if buf[:4] != CLIP_MAGIC:
        raise BadMagicError(f"bad clip magic {bytes(buf[:4])!r}")
    if len(buf) < 4 + _HEADER.size:
        raise TruncatedPayloadError(f"clip header truncated at {len(buf)} bytes")
    shape = _HEADER.unpack_from(buf, 4)
    if min(shape) < 1:
        raise HeaderMismatchError(f"clip header has a zero extent: {shape}")
    expected = int(np.prod(shape, dtype=np.int64))
    payload = len(buf) - 4 - _HEADER.size
    if payload < expected:
        raise TruncatedPayloadError(f"clip payload has {payload} bytes, header {shape} needs {expected}")
    if payload > expected:
        raise HeaderMismatchError(f"clip payload has {payload} bytes, header {shape} needs {expected}")
    return np.frombuffer(buf, dtype=np.uint8, offset=4 + _HEADER.size).reshape(shape).copy()


def write_clip(path: str | Path, clip: np.ndarray) -> None:
    Path(path).write_bytes(encode_clip(clip))


def read_clip(path: str | Path) -> np.ndarray:
    return decode_clip(Path(path).read_bytes())


def normalize_clip(clip: np.ndarray) -> np.ndarray:
    """Map uint8 pixels to [-1, 1]: ``(x/255 - 0.5) / 0.5``."""
    x = np.asarray(clip, dtype=np.float64) / 255.0
    return ((x - 0.5) / 0.5).astype(nx.get_dtype())


# ---------------------------------------------------------------- PPM frames

_PPM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def decode_ppm(buf: bytes) -> np.ndarray:
    """Parse a binary P6 image with maxval 255 into an (H, W, 3) uint8 array."""
    if buf[:2] != b"P6":
        raise PpmError(f"not a binary P6 file (magic {bytes(buf[:2])!r})")
    pos = 2
    fields = []
    for _ in range(3):
        m = _PPM_TOKEN.match(buf, pos)
        if m is None:
            raise PpmError("truncated PPM header")
        try:
            fields.append(int(m.group(1)))
        except ValueError:
            raise PpmError(f"bad PPM header field {m.group(1)!r}") from None
        pos = m.end()
    width, height, maxval = fields
    if maxval != 255:
        raise PpmError(f"only maxval 255 is supported, got {maxval}")
    if pos >= len(buf) or buf[pos : pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise PpmError("missing whitespace after PPM header")
    pos += 1
    need = width * height * 3
    if len(buf) - pos < need:
        raise PpmError(f"PPM payload has {len(buf) - pos} bytes, expected {need}")
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(height, width, 3).copy()


def encode_ppm(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.uint8)
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def subsample_indices(available: int, frames: int) -> list[int]:
    return [i * available // frames for i in range(frames)]


def ingest_ppm_sequence(directory: str | Path, frames: int | None = None, pattern: str = "*.ppm") -> np.ndarray:
    """Stack lexicographically ordered P6 frames into a (T, H, W, 3) clip.

    With ``frames`` set and more files available, frames are picked uniformly
    at indices ``floor(i * F / frames)``.
    """
    paths = sorted(Path(directory).glob(pattern))
    if not paths:
        raise DataError(f"no frames matching {pattern!r} in {directory}")
    if frames is not None:
        if len(paths) < frames:
            raise DataError(f"{directory} has {len(paths)} frames, need {frames}")
        paths = [paths[i] for i in subsample_indices(len(paths), frames)]
    images = []
    for p in paths:
        img = decode_ppm(p.read_bytes())
        if images and img.shape != images[0].shape:
            raise PpmError(f"{p.name}: dimensions {img.shape[:2]} differ from {images[0].shape[:2]}")
        images.append(img)
    return np.stack(images)


# ---------------------------------------------------------------- manifests

@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: int
    name: str


@dataclass
class Manifest:
    labels: dict[int, str]
    entries: list[ManifestEntry]
    root: Path = field(default_factory=Path)

    @property
    def num_classes(self) -> int:
        return len(self.labels)

    def resolve(self, entry: ManifestEntry) -> Path:
        return self.root / entry.path

    def validate(self) -> None:
        ids = sorted(self.labels)
        if ids != list(range(len(ids))):
            raise ManifestError(f"label ids must be dense from 0, got {ids}")
        if len(set(self.labels.values())) != len(self.labels):
            raise ManifestError("label names must be unique")
        for e in self.entries:
            if self.labels.get(e.label) != e.name:
                raise ManifestError(f"{e.path}: label {e.label} {e.name!r} disagrees with the label map")

    def format(self) -> str:
        lines = [f"#label {i} {self.labels[i]}" for i in sorted(self.labels)]
        lines += [f"{e.path}\t{e.label}\t{e.name}" for e in self.entries]
        return "\n".join(lines) + "\n"


def parse_manifest(text: str, root: str | Path = ".") -> Manifest:
    labels: dict[int, str] = {}
    entries = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#label "):
            parts = line.split(maxsplit=2)
            if len(parts) != 3 or not parts[1].isdigit():
                raise ManifestError(f"line {lineno}: bad label header {line!r}")
            labels[int(parts[1])] = parts[2].strip()
            continue
        if line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3 or not parts[1].strip().isdigit():
            raise ManifestError(f"line {lineno}: expected '<path>\\t<id>\\t<name>', got {line!r}")
        entries.append(ManifestEntry(parts[0], int(parts[1]), parts[2].strip()))
    manifest = Manifest(labels, entries, Path(root))
    manifest.validate()
    return manifest


def read_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc.strerror}") from None
    return parse_manifest(text, path.parent)


def write_manifest(path: str | Path, manifest: Manifest) -> None:
    Path(path).write_text(manifest.format(), encoding="utf-8")


def load_clips(manifest: Manifest) -> tuple[list[np.ndarray], list[int]]:
    """Read and normalize every clip listed in ``manifest``."""
    clips, labels = [], []
    for e in manifest.entries:
        path = manifest.resolve(e)
        try:
            raw = read_clip(path)
        except OSError as exc:
            raise DataError(f"cannot read clip {path}: {exc.strerror}") from None
        clips.append(normalize_clip(raw))
        labels.append(e.label)
    return clips, labels


# ---------------------------------------------------------------- synthetic data

def synth_clip(label: int, classes: int, geometry: Sequence[int], rng: Rng) -> np.ndarray:
    """Bright square over Gaussian noise; its position and flicker rate encode the class."""
    T, H, W, D = geometry
    side = max(2, min(H, W) // 4)
    cols = math.ceil(math.sqrt(classes))
    rows = math.ceil(classes / cols)
    r, c = divmod(label, cols)
    y0 = round(r * (H - side) / max(rows - 1, 1))
    x0 = round(c * (W - side) / max(cols - 1, 1))
    jitter = rng.random(3)
    y0 = int(np.clip(y0 + int(jitter[0] * 3) - 1, 0, H - side))
    x0 = int(np.clip(x0 + int(jitter[1] * 3) - 1, 0, W - side))
    phase = 2.0 * math.pi * jitter[2]
    freq = 1 + label

    clip = 70.0 + 20.0 * rng.gaussian(T * H * W * D).reshape(T, H, W, D)
    t = np.arange(T)
    level = 150.0 + 100.0 * np.sin(2.0 * math.pi * freq * t / T + phase)
    tint = np.linspace(1.0, 0.8, D)
    clip[:, y0 : y0 + side, x0 : x0 + side, :] = level[:, None, None, None] * tint
    return np.clip(np.rint(clip), 0, 255).astype(np.uint8)


def synth_dataset(n_per_class: int, classes: int, geometry: Sequence[int], seed: int, out_dir: str | Path,
                  labels: Sequence[str] | None = None) -> Path:
    """Write a balanced synthetic clip set plus ``manifest.txt``; returns the manifest path."""
    if n_per_class < 1:
        raise DataError(f"n per class must be >= 1, got {n_per_class}")
    if classes < 2:
        raise DataError(f"need at least 2 classes, got {classes}")
    names = list(labels) if labels is not None else [f"class{c}" for c in range(classes)]
    if len(names) != classes:
        raise DataError(f"{classes} classes but {len(names)} label names")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc.strerror}") from None
    root = Rng(seed)
    entries = []
    for c in range(classes):
        for k in range(n_per_class):
            rel = f"c{c:02d}_{k:04d}.efv"
            write_clip(out / rel, synth_clip(c, classes, geometry, root.derive(c, k)))
            entries.append(ManifestEntry(rel, c, names[c]))
    manifest = Manifest(dict(enumerate(names)), entries, out)
    write_manifest(out / "manifest.txt", manifest)
    return out / "manifest.txt"


# ---------------------------------------------------------------- splitting

def stratified_split(manifest: Manifest, ratio: float = 0.8, seed: int = 0) -> tuple[Manifest, Manifest]:
    """Per-class seeded shuffle; ``ceil(ratio * n_c)`` clips of each class go to train.

    Both outputs keep the input record order.
    """
    by_class: dict[int, list[int]] = {}
    for i, e in enumerate(manifest.entries):
        by_class.setdefault(e.label, []).append(i)
    rng = Rng(seed)
    train_idx: set[int] = set()
    for label in sorted(by_class):
        idx = by_class[label]
        if len(idx) < 2:
            raise SplitError(f"class {label} ({manifest.labels.get(label)}) has {len(idx)} sample(s), need >= 2")
        shuffled = rng.derive(label).shuffle(idx)
        train_idx.update(shuffled[: math.ceil(ratio * len(idx) - 1e-9)])
    train = [e for i, e in enumerate(manifest.entries) if i in train_idx]
    test = [e for i, e in enumerate(manifest.entries) if i not in train_idx]
    return (Manifest(dict(manifest.labels), train, manifest.root),
            Manifest(dict(manifest.labels), test, manifest.root))


# ---------------------------------------------------------------- metrics

@dataclass
class EvalReport:
    confusion: np.ndarray  # (C, C); rows are true labels, columns predictions

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.confusion)) / self.total

    def precision(self) -> np.ndarray:
        predicted = self.confusion.sum(axis=0)
        tp = np.diag(self.confusion).astype(float)
        return np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)

    def recall(self) -> np.ndarray:
        actual = self.confusion.sum(axis=1)
        tp = np.diag(self.confusion).astype(float)
        return np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)

    @property
    def macro_precision(self) -> float:
        return float(self.precision().mean())

    @property
    def macro_recall(self) -> float:
        return float(self.recall().mean())

    @property
    def class_counts(self) -> list[int]:
        return [int(x) for x in self.confusion.sum(axis=1)]

    def format(self) -> str:
        lines = [
            f"samples={self.total}",
            f"accuracy={self.accuracy:.6f}",
            f"macro_precision={self.macro_precision:.6f}",
            f"macro_recall={self.macro_recall:.6f}",
            f"class_counts={','.join(map(str, self.class_counts))}",
            "confusion=",
        ]
        lines += [" ".join(str(int(v)) for v in row) for row in self.confusion]
        return "\n".join(lines) + "\n"


def parse_report(text: str) -> tuple[dict[str, str], np.ndarray]:
    """Read back :meth:`EvalReport.format` output as (key/value fields, confusion grid)."""
    fields, rows = {}, []
    grid = False
    for line in text.splitlines():
        if grid:
            if line.strip():
                rows.append([int(v) for v in line.split()])
        elif line.startswith("confusion="):
            grid = True
        elif "=" in line:
            k, v = line.split("=", 1)
            fields[k] = v
    return fields, np.array(rows, dtype=np.int64)


def confusion_report(y_true: Sequence[int], y_pred: Sequence[int], classes: int) -> EvalReport:
    if len(y_true) == 0:
        raise DataError("cannot score an empty prediction set")
    if len(y_true) != len(y_pred):
        raise DataError(f"{len(y_true)} labels but {len(y_pred)} predictions")
    cm = np.zeros((classes, classes), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        cm[t, p] += 1
    return EvalReport(cm)


def evaluate(cfg, params: Mapping[str, np.ndarray], manifest: Manifest) -> EvalReport:
    """Inference-mode predictions for every clip in ``manifest``."""
    from .model import predict

    if not manifest.entries:
        raise DataError("cannot evaluate an empty manifest")
    clips, labels = load_clips(manifest)
    preds = [predict(clip, cfg, params)[0] for clip in clips]
    return confusion_report(labels, preds, cfg.classes)
