"""Synthetic detection data and the on-disk dataset format.

Images are 8-bit grayscale, stored as binary PGM (P5); PPM (P6) files
are also readable and are collapsed to grayscale by channel mean. An
annotation file holds one line per image: the image path followed by
seven whitespace-separated fields per box
(x1 y1 x2 y2 height visibility ignore_flag).

The generator renders upright striped rectangles ("pedestrians",
aspect ratio ~0.41) over structured noise, with horizontally striped
rectangles of the same size statistics acting as distractors and gray
blocks as occluders. Visibility is the exact unoccluded area fraction,
so the height/visibility evaluation subsets are all populated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .boxes import RoiBox, iou
from .evaluation import GroundTruthBox

PEDESTRIAN_ASPECT = 0.41


# ---------------------------------------------------------------------------
# PGM / PPM
# ---------------------------------------------------------------------------

def write_pgm(path, image: np.ndarray) -> None:
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError(f"write_pgm expects 2-D uint8, got {image.shape} "
                         f"{image.dtype}")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def read_pnm(path) -> np.ndarray:
    """Read binary PGM (P5) or PPM (P6); PPM collapses to grayscale."""
    with open(path, "rb") as fh:
        blob = fh.read()
    magic = blob[:2]
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported PNM magic {magic!r}")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(blob[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit images supported, maxval {maxval}")
    channels = 1 if magic == b"P5" else 3
    data = np.frombuffer(blob, np.uint8, count=w * h * channels, offset=pos)
    if channels == 1:
        return data.reshape(h, w).copy()
    return data.reshape(h, w, 3).mean(axis=2).astype(np.uint8)


def image_to_input(image: np.ndarray, dtype=np.float64) -> np.ndarray:
    """Grayscale uint8 -> normalized (3, H, W) array in [-1, 1]."""
    norm = (image.astype(dtype) - 127.5) / 127.5
    return np.repeat(norm[None, :, :], 3, axis=0)


# ---------------------------------------------------------------------------
# Annotation files
# ---------------------------------------------------------------------------

def write_annotations(path, entries: Sequence[tuple]) -> None:
    """entries: (image_path, list[GroundTruthBox]) pairs."""
    with open(path, "w") as fh:
        for image_path, gts in entries:
            parts = [str(image_path)]
            for g in gts:
                parts.extend([f"{g.box.x1:.3f}", f"{g.box.y1:.3f}",
                              f"{g.box.x2:.3f}", f"{g.box.y2:.3f}",
                              f"{g.hgt:.3f}", f"{g.vis:.6f}",
                              str(int(g.ignore))])
            fh.write(" ".join(parts) + "\n")


def read_annotations(path) -> list:
    entries = []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if (len(parts) - 1) % 7 != 0:
                raise ValueError(
                    f"{path}:{ln}: box records need 7 fields each, "
                    f"got {len(parts) - 1} values")
            gts = []
            for k in range(1, len(parts), 7):
                x1, y1, x2, y2, hgt, vis = map(float, parts[k:k + 6])
                gts.append(GroundTruthBox(RoiBox(x1, y1, x2, y2), hgt, vis,
                                          bool(int(parts[k + 6]))))
            entries.append((parts[0], gts))
    return entries


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------

@dataclass
class SynthSpec:
    image_size: tuple = (256, 512)          # (H, W)
    objects_range: tuple = (2, 5)           # pedestrians per image
    height_range: tuple = (20.0, 200.0)
    # sampling weights for the small/medium bands inside height_range
    height_buckets: tuple = ((20.0, 50.0, 0.2), (50.0, 75.0, 0.45),
                             (75.0, 200.0, 0.35))
    occluder_prob: float = 0.35
    occluded_fraction: tuple = (0.35, 0.8)  # occluded area fraction range
    distractors_range: tuple = (2, 6)
    aspect: float = PEDESTRIAN_ASPECT

    def validate(self) -> None:
        h, w = self.image_size
        if self.height_range[1] > h:
            raise ValueError(
                f"objects up to {self.height_range[1]} px do not fit in a "
                f"{h} px tall image")
        if self.height_range[1] * self.aspect > w:
            raise ValueError("objects would be wider than the image")
        for lo, hi, _ in self.height_buckets:
            if lo < self.height_range[0] - 1e-9 or hi > self.height_range[1] + 1e-9:
                raise ValueError("height bucket outside height_range")


@dataclass
class Dataset:
    """In-memory split: grayscale images plus per-image annotations."""
    images: list = field(default_factory=list)   # uint8 (H, W)
    annotations: list = field(default_factory=list)  # list[GroundTruthBox]
    names: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.images)


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    coarse = rng.uniform(80, 170, size=(h // 16, w // 16))
    img = np.kron(coarse, np.ones((16, 16)))
    img += rng.normal(0, 9, size=(h, w))
    return img


def _stripe_pattern(rng, length: int, period: int) -> np.ndarray:
    lo = rng.uniform(45, 75)
    hi = rng.uniform(185, 220)
    phase = int(rng.integers(period))
    idx = (np.arange(length) + phase) // max(period // 2, 1)
    return np.where(idx % 2 == 0, lo, hi)


def _paint_pedestrian(rng, img, box: RoiBox) -> None:
    x1, y1 = int(round(box.x1)), int(round(box.y1))
    x2, y2 = int(round(box.x2)), int(round(box.y2))
    w = x2 - x1
    period = max(4, w // 4)
    cols = _stripe_pattern(rng, w, period)
    img[y1:y2, x1:x2] = cols[None, :]
    img[y1:y2, x1:x2] += rng.normal(0, 5, size=(y2 - y1, w))
    # dark head cap over the middle of the top rows
    head_h = max(2, int(0.16 * (y2 - y1)))
    hx1 = x1 + max(1, w // 5)
    hx2 = x2 - max(1, w // 5)
    img[y1:y1 + head_h, hx1:hx2] = rng.uniform(25, 55)


def _paint_distractor(rng, img, box: RoiBox) -> None:
    x1, y1 = int(round(box.x1)), int(round(box.y1))
    x2, y2 = int(round(box.x2)), int(round(box.y2))
    h = y2 - y1
    period = max(4, (x2 - x1) // 4)
    rows = _stripe_pattern(rng, h, period)
    img[y1:y2, x1:x2] = rows[:, None]
    img[y1:y2, x1:x2] += rng.normal(0, 5, size=(h, x2 - x1))


def _paint_occluder(rng, img, box: RoiBox) -> None:
    x1, y1 = int(round(box.x1)), int(round(box.y1))
    x2, y2 = int(round(box.x2)), int(round(box.y2))
    img[y1:y2, x1:x2] = rng.uniform(95, 150)
    img[y1:y2, x1:x2] += rng.normal(0, 6, size=(y2 - y1, x2 - x1))


def _sample_box(rng, spec: SynthSpec, existing: list, tries: int = 40):
    h_img, w_img = spec.image_size
    weights = np.array([b[2] for b in spec.height_buckets])
    weights = weights / weights.sum()
    for _ in range(tries):
        lo, hi, _ = spec.height_buckets[int(rng.choice(len(weights), p=weights))]
        hgt = float(rng.uniform(lo, hi))
        wid = spec.aspect * hgt
        if wid >= w_img - 2 or hgt >= h_img - 2:
            continue
        x1 = float(rng.uniform(1, w_img - wid - 1))
        y1 = float(rng.uniform(1, h_img - hgt - 1))
        box = RoiBox(x1, y1, x1 + wid, y1 + hgt)
        if all(iou(box, other) < 0.25 for other in existing):
            return box
    return None


def generate_image(spec: SynthSpec, rng: np.random.Generator):
    """Render one scene; returns (uint8 image, list of GroundTruthBox)."""
    h_img, w_img = spec.image_size
    img = _background(rng, h_img, w_img)

    placed: list = []
    n_dis = int(rng.integers(spec.distractors_range[0],
                             spec.distractors_range[1] + 1))
    distractors = []
    for _ in range(n_dis):
        box = _sample_box(rng, spec, placed)
        if box is None:
            continue
        placed.append(box)
        distractors.append(box)
        _paint_distractor(rng, img, box)

    n_obj = int(rng.integers(spec.objects_range[0], spec.objects_range[1] + 1))
    gts = []
    for _ in range(n_obj):
        box = _sample_box(rng, spec, placed)
        if box is None:
            continue
        placed.append(box)
        _paint_pedestrian(rng, img, box)
        vis = 1.0
        if rng.random() < spec.occluder_prob:
            frac = float(rng.uniform(*spec.occluded_fraction))
            occ_h = frac * box.height
            pad = rng.uniform(2, 10)
            occ = RoiBox(max(box.x1 - pad, 0.0), box.y2 - occ_h,
                         min(box.x2 + pad, float(w_img)), min(box.y2 + pad, float(h_img)))
            _paint_occluder(rng, img, occ)
            from .boxes import intersection_area
            vis = 1.0 - intersection_area(occ, box) / box.area
        gts.append(GroundTruthBox(box, hgt=box.height, vis=vis))

    return np.clip(img, 0, 255).astype(np.uint8), gts


def generate_dataset(spec: SynthSpec, count: int, seed: int,
                     prefix: str = "img", stream: int = 0) -> Dataset:
    """Deterministic split of ``count`` rendered scenes.

    ``stream`` separates splits drawn from the same seed (train vs eval).
    """
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([seed, stream, count]))
    ds = Dataset()
    for i in range(count):
        image, gts = generate_image(spec, rng)
        ds.images.append(image)
        ds.annotations.append(gts)
        ds.names.append(f"{prefix}_{i:05d}")
    return ds


def save_dataset(ds: Dataset, out_dir) -> Path:
    """Write PGM images plus an annotations.txt; returns the ann path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, image, gts in zip(ds.names, ds.images, ds.annotations):
        rel = f"{name}.pgm"
        write_pgm(out / rel, image)
        entries.append((rel, gts))
    ann = out / "annotations.txt"
    write_annotations(ann, entries)
    return ann


def load_dataset(ann_path) -> Dataset:
    ann_path = Path(ann_path)
    base = ann_path.parent
    ds = Dataset()
    for rel, gts in read_annotations(ann_path):
        ds.images.append(read_pnm(base / rel))
        ds.annotations.append(gts)
        ds.names.append(Path(rel).stem)
    return ds
