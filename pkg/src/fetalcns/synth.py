"""Synthetic ultrasound-like corpus generator.

Each anomaly class is a bright geometric pattern drawn on speckle-noise
background; the Normal class is plain speckle. Patterns are coded by local
shape, never by absolute position, so they survive random crops, horizontal
flips and the translation invariance of global average pooling:

    Anencephaly        one large filled ellipse
    Encephalocele      ring (hollow ellipse)
    Holoprosencephaly  scatter of small bright dots
    Rachischisis       full-height vertical stripe
    Normal             speckle only

Every record stores its pattern geometry under the manifest extra field
``pattern`` so explanation tests can score heatmaps against the true region.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import imageops
from .corpus import FIVE_CLASSES, PlaneKind
from .errors import ConfigurationError
from .ingest import Manifest, SampleRecord, build_manifest, write_manifest

IMAGE_SIZE = 256

_NORMAL_PLANES = (
    PlaneKind.THALAMIC_TRANSVERSE.value,
    PlaneKind.LATERAL_VENTRICLE_TRANSVERSE.value,
    PlaneKind.CEREBELLAR_TRANSVERSE.value,
    PlaneKind.SPINAL_LONGITUDINAL.value,
)


def _speckle(rng: np.random.Generator, base: float) -> np.ndarray:
    """Ultrasound-like texture: smooth illumination times granular noise."""
    coarse = rng.normal(1.0, 0.25, size=(32, 32))
    illum = imageops.resize_bilinear(np.clip(coarse, 0.3, 1.7) * base, IMAGE_SIZE, IMAGE_SIZE)
    grain = rng.rayleigh(scale=0.55, size=(IMAGE_SIZE, IMAGE_SIZE))
    return illum * grain


def _ellipse_mask(cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _pattern(label: str, rng: np.random.Generator) -> tuple[np.ndarray, dict]:
    """Returns (boolean region mask, geometry dict) for a class pattern."""
    if label == "Anencephaly":
        cy = rng.uniform(70, 186)
        cx = rng.uniform(70, 186)
        ry, rx = rng.uniform(26, 40), rng.uniform(26, 40)
        return _ellipse_mask(cy, cx, ry, rx), {
            "kind": "ellipse", "cy": cy, "cx": cx, "ry": ry, "rx": rx,
        }
    if label == "Encephalocele":
        cy = rng.uniform(80, 176)
        cx = rng.uniform(80, 176)
        router = rng.uniform(42, 56)
        rinner = router - rng.uniform(12, 16)
        outer = _ellipse_mask(cy, cx, router, router)
        inner = _ellipse_mask(cy, cx, rinner, rinner)
        return outer & ~inner, {
            "kind": "ring", "cy": cy, "cx": cx, "r_outer": router, "r_inner": rinner,
        }
    if label == "Holoprosencephaly":
        count = int(rng.integers(5, 8))
        dots = []
        mask = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
        for _ in range(count):
            cy = rng.uniform(40, 216)
            cx = rng.uniform(40, 216)
            r = rng.uniform(7, 11)
            mask |= _ellipse_mask(cy, cx, r, r)
            dots.append({"cy": cy, "cx": cx, "r": r})
        return mask, {"kind": "dots", "dots": dots}
    if label == "Rachischisis":
        cx = rng.uniform(60, 196)
        half_w = rng.uniform(10, 16)
        xx = np.arange(IMAGE_SIZE)
        mask = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
        mask[:, np.abs(xx - cx) <= half_w] = True
        return mask, {"kind": "stripe", "cx": cx, "half_width": half_w}
    raise ConfigurationError(f"no pattern defined for label {label!r}")


def render_image(label: str, rng: np.random.Generator, base: float) -> tuple[np.ndarray, dict | None]:
    """One uint8 grayscale frame plus its pattern geometry (None for Normal)."""
    img = _speckle(rng, base)
    geometry = None
    if label != "Normal":
        mask, geometry = _pattern(label, rng)
        boost = rng.uniform(95, 125)
        img = img + mask * (boost * rng.uniform(0.9, 1.1, size=img.shape))
    return np.clip(img, 0, 255).astype(np.uint8), geometry


def generate_corpus(
    patients: int,
    images_per_patient: int,
    seed: int,
    out_dir: str | Path,
) -> Manifest:
    """Deterministic five-class corpus: patient i gets class i mod 5.

    Writes ``images/<sample_id>.png`` files and ``manifest.jsonl``; returns
    the manifest.
    """
    if patients < 1 or images_per_patient < 1:
        raise ConfigurationError(
            f"patients and images_per_patient must be >= 1, got {patients}, {images_per_patient}"
        )
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for p in range(patients):
        label = FIVE_CLASSES[p % len(FIVE_CLASSES)]
        prng = np.random.default_rng([seed % 2**64, p])
        patient_id = f"P{p:03d}"
        ga_days = int(prng.integers(70, 281))
        plane = (
            _NORMAL_PLANES[p % len(_NORMAL_PLANES)]
            if label == "Normal"
            else PlaneKind.UNSPECIFIED.value
        )
        site = "site-a" if label != "Normal" else "site-b"
        for j in range(images_per_patient):
            sample_id = f"{patient_id}_img{j:03d}"
            # base intensity varies per image, so patient identity carries no
            # stable signal and only the class pattern separates the corpus
            base = prng.uniform(48, 72)
            image, geometry = render_image(label, prng, base)
            rel_path = f"images/{sample_id}.png"
            imageops.save_image(out / rel_path, image)
            extra = {"pattern": geometry} if geometry is not None else {}
            records.append(
                SampleRecord(
                    sample_id=sample_id,
                    patient_id=patient_id,
                    path=rel_path,
                    label=label,
                    source="still",
                    plane=plane,
                    gestational_age_days=ga_days,
                    site=site,
                    extra=extra,
                )
            )
    manifest = build_manifest(records)
    write_manifest(manifest, out / "manifest.jsonl")
    return manifest


def pattern_mask(geometry: dict, size: int = IMAGE_SIZE) -> np.ndarray:
    """Reconstruct the boolean pattern region from stored geometry."""
    if geometry["kind"] == "ellipse":
        return _ellipse_mask(geometry["cy"], geometry["cx"], geometry["ry"], geometry["rx"])
    if geometry["kind"] == "ring":
        outer = _ellipse_mask(geometry["cy"], geometry["cx"], geometry["r_outer"], geometry["r_outer"])
        inner = _ellipse_mask(geometry["cy"], geometry["cx"], geometry["r_inner"], geometry["r_inner"])
        return outer & ~inner
    if geometry["kind"] == "dots":
        mask = np.zeros((size, size), dtype=bool)
        for d in geometry["dots"]:
            mask |= _ellipse_mask(d["cy"], d["cx"], d["r"], d["r"])
        return mask
    if geometry["kind"] == "stripe":
        xx = np.arange(size)
        mask = np.zeros((size, size), dtype=bool)
        mask[:, np.abs(xx - geometry["cx"]) <= geometry["half_width"]] = True
        return mask
    raise ConfigurationError(f"unknown pattern kind {geometry['kind']!r}")
