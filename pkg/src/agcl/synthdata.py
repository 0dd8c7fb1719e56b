"""Synthetic grayscale corpus with severity-controlled lesions and reports.

Each disease class has a distinct shape signature; severity controls lesion
radius and contrast through disjoint ranges, so severe lesions of a class are
strictly larger and higher-contrast than mild ones. Ground-truth boxes and
report sentences come for free, which makes every downstream stage testable.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
from PIL import Image

from .mining import DEFAULT_CLUSTERS, Lexicon

DISEASES = (
    "atelectasis",
    "cardiomegaly",
    "effusion",
    "infiltration",
    "mass",
    "nodule",
    "pneumonia",
    "pneumothorax",
)

# per severity: (radius lo, radius hi, contrast lo, contrast hi); ranges are
# disjoint so area/contrast ordering holds by construction
SEVERITY_GEOMETRY = {
    "mild": (2.5, 4.5, 0.10, 0.18),
    "moderate": (6.0, 8.5, 0.22, 0.32),
    "severe": (10.0, 13.0, 0.38, 0.55),
}

_SEVERITY_NAMES = ("mild", "moderate", "severe")


class BBox(NamedTuple):
    """Axis-aligned box, half-open pixel convention [x0, x1) x [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def validate(self) -> "BBox":
        if not (self.x1 > self.x0 and self.y1 > self.y0 and self.x0 >= 0 and self.y0 >= 0):
            raise ValueError(f"degenerate box {self}")
        return self


@dataclass(frozen=True)
class DatasetConfig:
    image_size: int = 64
    num_classes: int = 6
    train_samples: int = 2000
    val_samples: int = 300
    test_samples: int = 500
    severity_mix: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)  # (mild, moderate, severe)
    dsl_fraction: float = 0.25
    normal_fraction: float = 0.25
    cooccurrence_rate: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 32:
            raise ValueError("image_size must be at least 32")
        if self.image_size % 8 != 0:
            raise ValueError("image_size must be a multiple of the trunk stride (8)")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.num_classes > len(DISEASES):
            raise ValueError(f"at most {len(DISEASES)} distinct shape generators are available")
        for frac in (self.dsl_fraction, self.normal_fraction, self.cooccurrence_rate):
            if not 0.0 <= frac <= 1.0:
                raise ValueError("fractions must lie in [0, 1]")
        if any(m < 0 for m in self.severity_mix) or abs(sum(self.severity_mix) - 1.0) > 1e-9:
            raise ValueError("severity_mix must be non-negative and sum to 1")

    @property
    def classes(self) -> tuple[str, ...]:
        return DISEASES[: self.num_classes]


@dataclass
class Sample:
    id: str
    pixels: np.ndarray  # (H, W) floats in [0, 1], quantized to the 8-bit grid
    labels: set[str]
    dsl: dict[str, str]
    gt_boxes: list[tuple[str, BBox]]
    report: str | None
    patient: str
    true_severity: dict[str, str] = field(default_factory=dict)  # latent, test oracle only


class Splits(NamedTuple):
    train: list[Sample]
    val: list[Sample]
    test: list[Sample]


# ---------------------------------------------------------------------------
# shape rasterizers: mask(dx, dy, r) over pixel-center offsets from the lesion center
# ---------------------------------------------------------------------------

def _bar(dx, dy, r):
    return (np.abs(dx) <= r) & (np.abs(dy) <= max(0.9, 0.35 * r))


def _ellipse(dx, dy, r):
    return (dx / r) ** 2 + (dy / (0.65 * r)) ** 2 <= 1.0


def _wedge(dx, dy, r):
    return (np.abs(dx) <= r) & (np.abs(dy) <= r) & (dx + dy >= 0)


def _speckled_disk(dx, dy, r):
    return dx**2 + dy**2 <= r**2  # texture applied separately


def _disk(dx, dy, r):
    return dx**2 + dy**2 <= r**2


def _ring(dx, dy, r):
    d2 = dx**2 + dy**2
    return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)


def _cross(dx, dy, r):
    arm = max(0.9, 0.35 * r)
    return ((np.abs(dx) <= r) & (np.abs(dy) <= arm)) | ((np.abs(dy) <= r) & (np.abs(dx) <= arm))


def _frame(dx, dy, r):
    m = np.maximum(np.abs(dx), np.abs(dy))
    return (m <= r) & (m >= max(r - 1.6, 0.62 * r))


_SHAPES = {
    "atelectasis": _bar,
    "cardiomegaly": _ellipse,
    "effusion": _wedge,
    "infiltration": _speckled_disk,
    "mass": _disk,
    "nodule": _ring,
    "pneumonia": _cross,
    "pneumothorax": _frame,
}


def _mask_bbox(mask: np.ndarray) -> BBox:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return BBox(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1).validate()


def _boxes_overlap(a: BBox, b: BBox) -> float:
    ix = max(0, min(a.x1, b.x1) - max(a.x0, b.x0))
    iy = max(0, min(a.y1, b.y1) - max(a.y0, b.y0))
    return ix * iy / min(a.area(), b.area())


def _render_lesion(pixels, disease, severity, rng, scale):
    """Draws one lesion in place; returns its tight bounding box."""
    size = pixels.shape[0]
    r_lo, r_hi, c_lo, c_hi = SEVERITY_GEOMETRY[severity]
    r = rng.uniform(r_lo, r_hi) * scale
    contrast = rng.uniform(c_lo, c_hi)
    margin = int(np.ceil(r)) + 1
    cx = rng.uniform(margin, size - margin)
    cy = rng.uniform(margin, size - margin)
    yy, xx = np.mgrid[0:size, 0:size]
    mask = _SHAPES[disease](xx - cx, yy - cy, r)
    if disease == "infiltration":
        speckle = rng.random(pixels.shape) * mask
        pixels += contrast * 1.6 * speckle * (speckle > 0.35)
    else:
        pixels += contrast * mask
    return _mask_bbox(mask)


def _background(size: int, rng: np.random.Generator) -> np.ndarray:
    base = rng.uniform(0.25, 0.38)
    yy, xx = np.mgrid[0:size, 0:size]
    angle = rng.uniform(0, 2 * np.pi)
    grad = (np.cos(angle) * xx + np.sin(angle) * yy) / size
    pixels = base + 0.05 * grad + rng.normal(0.0, 0.045, size=(size, size))
    # faint distractor dots, strictly below the mild contrast floor
    for _ in range(rng.integers(0, 3)):
        r = rng.uniform(1.5, 3.0)
        cx, cy = rng.uniform(4, size - 4, size=2)
        pixels += rng.uniform(0.04, 0.07) * (((xx - cx) ** 2 + (yy - cy) ** 2) <= r**2)
    return pixels


def _quantize(pixels: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so in-memory pixels equal the PNG round-trip."""
    return (np.round(np.clip(pixels, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def _generate_split(split: str, n: int, config: DatasetConfig, rng: np.random.Generator,
                    lexicon: Lexicon) -> list[Sample]:
    classes = config.classes
    scale = config.image_size / 64.0
    n_normal = int(round(config.normal_fraction * n))
    normal_at = np.zeros(n, dtype=bool)
    normal_at[rng.permutation(n)[:n_normal]] = True

    samples: list[Sample] = []
    patient_idx, patient_left = -1, 0
    for i in range(n):
        if patient_left == 0:
            patient_idx += 1
            patient_left = int(rng.integers(1, 3))  # 1 or 2 images per patient
        patient_left -= 1
        pixels = _background(config.image_size, rng)
        labels: set[str] = set()
        severity: dict[str, str] = {}
        boxes: list[tuple[str, BBox]] = []
        if not normal_at[i]:
            n_lesions = 2 if (len(classes) > 1 and rng.random() < config.cooccurrence_rate) else 1
            chosen = rng.choice(len(classes), size=n_lesions, replace=False)
            for ci in chosen:
                disease = classes[int(ci)]
                sev = _SEVERITY_NAMES[int(rng.choice(3, p=config.severity_mix))]
                # retry placement until the new box barely overlaps existing ones
                for _attempt in range(25):
                    trial = pixels.copy()
                    box = _render_lesion(trial, disease, sev, rng, scale)
                    if all(_boxes_overlap(box, b) < 0.3 for _, b in boxes):
                        pixels = trial
                        break
                labels.add(disease)
                severity[disease] = sev
                boxes.append((disease, box))
        samples.append(
            Sample(
                id=f"{split}-{i:05d}",
                pixels=_quantize(pixels),
                labels=labels,
                dsl={},
                gt_boxes=boxes,
                report=None,
                patient=f"{split}-p{patient_idx:05d}",
                true_severity=severity,
            )
        )

    positives = [s for s in samples if s.labels]
    n_dsl = int(round(config.dsl_fraction * len(positives)))
    annotated = rng.choice(len(positives), size=n_dsl, replace=False) if n_dsl else []
    for idx in annotated:
        positives[idx].dsl = dict(positives[idx].true_severity)
    for s in samples:
        if s.dsl or not s.labels:
            s.report = render_report(s, lexicon=lexicon, rng=rng)
    return samples


def generate_dataset(config: DatasetConfig) -> Splits:
    """Deterministic train/val/test splits; patients never cross splits."""
    lexicon = Lexicon.default(config.classes)
    children = np.random.SeedSequence(config.seed).spawn(3)
    sizes = (config.train_samples, config.val_samples, config.test_samples)
    return Splits(
        *[
            _generate_split(name, n, config, np.random.default_rng(child), lexicon)
            for name, n, child in zip(("train", "val", "test"), sizes, children)
        ]
    )


# ---------------------------------------------------------------------------
# report rendering
# ---------------------------------------------------------------------------

_POSITIVE_TEMPLATES = (
    "There is a {adj}{lat} {disease}.",
    "A {adj}{lat} {disease} is seen.",
    "Findings show {adj}{lat} {disease}.",
)


def render_report(sample: Sample, lexicon: Lexicon | None = None,
                  rng: np.random.Generator | None = None) -> str:
    """One sentence per severity-annotated disease; normals get negations."""
    if lexicon is None:
        lexicon = Lexicon.default(DISEASES)
    if rng is None:
        digest = hashlib.sha256(sample.id.encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
    all_diseases = sorted(lexicon.keywords)
    if not sample.labels:
        others = rng.choice(len(all_diseases), size=int(rng.integers(1, 3)), replace=False)
        return " ".join(f"No {all_diseases[int(i)]}." for i in others)
    narratable = sorted(d for d in sample.labels if d in sample.dsl)
    if not narratable:
        raise ValueError(f"sample {sample.id} has no severity annotation to narrate")
    sentences = []
    for disease in narratable:
        cluster = lexicon.clusters[sample.dsl[disease]]
        adj = cluster[int(rng.integers(len(cluster)))]
        lat = ("", " left", " right")[int(rng.integers(3))]
        template = _POSITIVE_TEMPLATES[int(rng.integers(len(_POSITIVE_TEMPLATES)))]
        sentences.append(template.format(adj=adj, lat=lat, disease=disease))
    absent = [d for d in all_diseases if d not in sample.labels]
    if absent and rng.random() < 0.3:
        sentences.append(f"No {absent[int(rng.integers(len(absent)))]}.")
    return " ".join(sentences)


# ---------------------------------------------------------------------------
# persistence: images/*.png + manifest.jsonl + config.echo.json
# ---------------------------------------------------------------------------

def _record(sample: Sample, split: str) -> dict:
    return {
        "id": sample.id,
        "patient": sample.patient,
        "split": split,
        "labels": sorted(sample.labels),
        "dsl": dict(sorted(sample.dsl.items())),
        "boxes": [[d, *box] for d, box in sample.gt_boxes],
        "severity": dict(sorted(sample.true_severity.items())),
        "report": sample.report,
        "image": f"images/{sample.id}.png",
    }


def write_dataset(splits: Splits, config: DatasetConfig, out_dir) -> str:
    """Writes PNGs and a JSON-lines manifest; returns the manifest path."""
    out_dir = str(out_dir)
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    with open(manifest_path, "w") as fh:
        for split, samples in zip(splits._fields, splits):
            for s in samples:
                Image.fromarray(np.round(s.pixels * 255.0).astype(np.uint8), mode="L").save(
                    os.path.join(img_dir, f"{s.id}.png")
                )
                fh.write(json.dumps(_record(s, split), sort_keys=True) + "\n")
    echo = {"classes": list(config.classes), **asdict(config)}
    with open(os.path.join(out_dir, "config.echo.json"), "w") as fh:
        json.dump(echo, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path


def manifest_lines(splits: Splits) -> str:
    """The manifest text without touching disk (determinism checks)."""
    return "".join(
        json.dumps(_record(s, split), sort_keys=True) + "\n"
        for split, samples in zip(splits._fields, splits)
        for s in samples
    )


def load_dataset(root) -> tuple[dict, Splits]:
    """Reads a written dataset back; pixels come from the PNGs."""
    root = str(root)
    with open(os.path.join(root, "config.echo.json")) as fh:
        echo = json.load(fh)
    buckets: dict[str, list[Sample]] = {"train": [], "val": [], "test": []}
    with open(os.path.join(root, "manifest.jsonl")) as fh:
        for line in fh:
            rec = json.loads(line)
            with Image.open(os.path.join(root, rec["image"])) as img:
                pixels = np.asarray(img, dtype=np.float32) / 255.0
            buckets[rec["split"]].append(
                Sample(
                    id=rec["id"],
                    pixels=pixels,
                    labels=set(rec["labels"]),
                    dsl=dict(rec["dsl"]),
                    gt_boxes=[(b[0], BBox(*b[1:])) for b in rec["boxes"]],
                    report=rec["report"],
                    patient=rec["patient"],
                    true_severity=dict(rec.get("severity", {})),
                )
            )
    return echo, Splits(buckets["train"], buckets["val"], buckets["test"])


# ---------------------------------------------------------------------------
# array views for training
# ---------------------------------------------------------------------------

def stack_pixels(samples) -> tuple[np.ndarray, dict[str, int]]:
    """(N, 1, H, W) float32 batch plus id -> row lookup."""
    x = np.stack([s.pixels for s in samples]).astype(np.float32)[:, None]
    return x, {s.id: i for i, s in enumerate(samples)}


def label_matrix(samples, classes) -> np.ndarray:
    y = np.zeros((len(samples), len(classes)), dtype=np.float32)
    col = {c: j for j, c in enumerate(classes)}
    for i, s in enumerate(samples):
        for d in s.labels:
            if d in col:
                y[i, col[d]] = 1.0
    return y
