"""Raw ultrasound videos and stills -> cropped, cataloged image corpus.

Videos are consumed as directories of already-decoded frames
(``frames/<video_id>/<frame_index zero-padded to 6>.png``); decoding a
container file into such a directory is delegated to an external ``ffmpeg``
subprocess. The catalog is a JSON Lines manifest of sample records.
"""

from __future__ import annotations

import json
import re
import shutil
import subprocess
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    EmptyInputError,
    GestationalAgeParseError,
    InputRangeError,
    ManifestValidationError,
)

VALID_SOURCES = ("still", "video_frame")

# Known manifest fields, in serialization order.
_RECORD_FIELDS = (
    "sample_id",
    "patient_id",
    "path",
    "label",
    "plane",
    "gestational_age_days",
    "source",
    "video_id",
    "frame_index",
    "site",
)

_GA_RE = re.compile(r"^\s*(\d+)w(?:(\d+)d)?\s*$")


@dataclass(frozen=True)
class FrameExtractionSpec:
    """Arithmetic progression of frame indices to keep from a video.

    Extracted indices are exactly ``{start_frame + k*stride | k >= 0}``
    capped at ``end_frame`` inclusive.
    """

    stride: int = 80
    start_frame: int = 0
    end_frame: int = 0

    def __post_init__(self):
        if self.stride < 1:
            raise ConfigurationError(f"stride must be >= 1, got {self.stride}")
        if self.start_frame < 0:
            raise ConfigurationError(f"start_frame must be >= 0, got {self.start_frame}")
        if self.end_frame < self.start_frame:
            raise ConfigurationError(
                f"end_frame {self.end_frame} < start_frame {self.start_frame}"
            )

    def indices(self) -> list[int]:
        return list(range(self.start_frame, self.end_frame + 1, self.stride))


@dataclass(frozen=True)
class CropRect:
    """Pixel-space region of interest; must lie fully inside the source image."""

    x: int
    y: int
    width: int
    height: int

    def __post_init__(self):
        if self.x < 0 or self.y < 0:
            raise ConfigurationError(f"crop offsets must be >= 0, got ({self.x},{self.y})")
        if self.width < 1 or self.height < 1:
            raise ConfigurationError(
                f"crop size must be >= 1, got {self.width}x{self.height}"
            )


@dataclass
class SampleRecord:
    """One cataloged ultrasound image with its provenance and labels.

    ``extra`` holds unknown fields read from a manifest line so that
    round-tripping preserves them.
    """

    sample_id: str
    patient_id: str
    path: str
    label: str
    source: str = "still"
    plane: str | None = None
    gestational_age_days: int | None = None
    video_id: str | None = None
    frame_index: int | None = None
    site: str = ""
    extra: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        out = {}
        for name in _RECORD_FIELDS:
            value = getattr(self, name)
            if value is None:
                continue
            out[name] = value
        out.update(self.extra)
        return out

    @classmethod
    def from_json_dict(cls, data: Mapping) -> "SampleRecord":
        known = {k: data[k] for k in _RECORD_FIELDS if k in data}
        extra = {k: v for k, v in data.items() if k not in _RECORD_FIELDS}
        known.setdefault("site", "")
        return cls(extra=extra, **known)


@dataclass
class Manifest:
    """Validated collection of sample records plus derived counts.

    Records are kept in canonical order (sorted by sample_id). The patient
    registry normally derives from the records; tests and external loaders
    may supply it explicitly, in which case splitters verify every
    registered patient actually has images.
    """

    records: list[SampleRecord]
    label_counts: dict[str, int] = field(default_factory=dict)
    patient_counts: dict[str, int] = field(default_factory=dict)

    @property
    def patient_count(self) -> int:
        return len(self.patient_counts)

    def patient_ids(self) -> list[str]:
        return sorted(self.patient_counts)

    def records_for_patient(self, patient_id: str) -> list[SampleRecord]:
        return [r for r in self.records if r.patient_id == patient_id]


def extract_frames(
    video: Sequence[np.ndarray], spec: FrameExtractionSpec
) -> list[tuple[int, np.ndarray]]:
    """Pick frames of an in-memory frame sequence at the spec's index set.

    Returns (frame_index, image) pairs in ascending index order.
    """
    n = len(video)
    if n == 0:
        raise EmptyInputError("video has no frames")
    if spec.end_frame >= n:
        raise InputRangeError(f"end_frame {spec.end_frame} >= frame count {n}")
    return [(i, video[i]) for i in spec.indices()]


def crop_roi(image: np.ndarray, rect: CropRect) -> np.ndarray:
    """Cut the region of interest out of an image, values copied unmodified."""
    h, w = image.shape[:2]
    if rect.x + rect.width > w or rect.y + rect.height > h:
        raise InputRangeError(
            f"crop rect ({rect.x},{rect.y},{rect.width},{rect.height}) "
            f"exceeds image {w}x{h}"
        )
    return image[rect.y : rect.y + rect.height, rect.x : rect.x + rect.width].copy()


def build_manifest(records: Sequence[SampleRecord]) -> Manifest:
    """Validate records and assemble the manifest with per-label/patient counts.

    Deterministic: records are re-ordered canonically (sorted by sample_id),
    so any input ordering yields the same manifest.
    """
    problems = []
    seen = Counter(r.sample_id for r in records)
    dupes = sorted(sid for sid, c in seen.items() if c > 1)
    for sid in dupes:
        problems.append(f"duplicate sample_id: {sid}")
    for r in records:
        if r.source not in VALID_SOURCES:
            problems.append(f"{r.sample_id}: unknown source {r.source!r}")
        if r.source == "video_frame":
            if r.video_id is None:
                problems.append(f"{r.sample_id}: source=video_frame without video_id")
            if r.frame_index is None:
                problems.append(f"{r.sample_id}: source=video_frame without frame_index")
        if not r.patient_id:
            problems.append(f"{r.sample_id}: empty patient_id")
        if r.gestational_age_days is not None and r.gestational_age_days < 0:
            problems.append(f"{r.sample_id}: negative gestational_age_days")
    if problems:
        raise ManifestValidationError(problems)

    ordered = sorted(records, key=lambda r: r.sample_id)
    return Manifest(
        records=ordered,
        label_counts=dict(sorted(Counter(r.label for r in ordered).items())),
        patient_counts=dict(sorted(Counter(r.patient_id for r in ordered).items())),
    )


def parse_gestational_age(text: str) -> int:
    """Parse '<weeks>w<days>d' (or '<weeks>w') to an age in days."""
    m = _GA_RE.match(text)
    if m is None:
        raise GestationalAgeParseError(f"cannot parse gestational age {text!r}")
    weeks = int(m.group(1))
    days = int(m.group(2)) if m.group(2) is not None else 0
    return weeks * 7 + days


# ---------------------------------------------------------------------------
# File interfaces


def write_manifest(manifest: Manifest, path: str | Path) -> None:
    """Write one record per line as UTF-8 JSON Lines."""
    with open(path, "w", encoding="utf-8") as fh:
        for record in manifest.records:
            fh.write(json.dumps(record.to_json_dict(), ensure_ascii=False) + "\n")


def read_manifest(path: str | Path) -> Manifest:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(SampleRecord.from_json_dict(json.loads(line)))
    return build_manifest(records)


def read_crop_sidecar(path: str | Path) -> dict[str, CropRect]:
    """Read the JSON Lines crop sidecar: {sample_id, x, y, width, height}."""
    crops = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            entry = json.loads(line)
            crops[entry["sample_id"]] = CropRect(
                x=entry["x"], y=entry["y"], width=entry["width"], height=entry["height"]
            )
    return crops


def frame_path(frames_root: str | Path, video_id: str, frame_index: int) -> Path:
    return Path(frames_root) / video_id / f"{frame_index:06d}.png"


def list_frame_indices(video_dir: str | Path) -> list[int]:
    """Frame indices available in a decoded-frame directory, sorted."""
    indices = []
    for p in Path(video_dir).glob("*.png"):
        if p.stem.isdigit():
            indices.append(int(p.stem))
    return sorted(indices)


def iter_video_dirs(frames_root: str | Path) -> Iterator[tuple[str, Path]]:
    for p in sorted(Path(frames_root).iterdir()):
        if p.is_dir():
            yield p.name, p


def decode_video_file(video_path: str | Path, out_dir: str | Path) -> Path:
    """Decode a video container into a 0-based frame directory via ffmpeg.

    Codec handling is intentionally external; this is the only non-portable
    ingestion path.
    """
    ffmpeg = shutil.which("ffmpeg")
    if ffmpeg is None:
        raise ConfigurationError(
            "ffmpeg not found; decode the video externally into a frame directory"
        )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cmd = [
        ffmpeg,
        "-hide_banner",
        "-loglevel",
        "error",
        "-i",
        str(video_path),
        "-start_number",
        "0",
        str(out / "%06d.png"),
    ]
    subprocess.run(cmd, check=True)
    return out
