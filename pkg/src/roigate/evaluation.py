"""Detection evaluation: matching, FPPI/miss-rate curves, MR_-2, subsets.

The protocol follows the Caltech-style convention. Detections are
matched per image in descending score order; each detection takes the
highest-IoU unmatched non-ignore ground truth at or above the IoU
threshold (a true positive), failing that an ignore region under a
relaxed criterion (neither rewarded nor penalized), and otherwise
counts as a false positive. Sweeping the score threshold produces a
(false positives per image, miss rate) staircase, and the log-average
miss rate samples it at reference FPPI points spread log-uniformly over
[1e-2, 1e0].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .boxes import RoiBox, intersection_area, iou

__all__ = [
    "Detection", "GroundTruthBox", "SubsetSpec", "MatchResult",
    "DEFAULT_SUBSETS", "iou", "match_detections", "fppi_missrate_curve",
    "log_average_miss_rate", "subset_filter", "read_detections",
    "write_detections", "read_ground_truth", "write_ground_truth",
    "evaluate_detections",
]


@dataclass(frozen=True)
class GroundTruthBox:
    """An annotated box with height, visible fraction and ignore flag."""
    box: RoiBox
    hgt: float
    vis: float
    ignore: bool = False

    def __post_init__(self):
        if not self.hgt > 0:
            raise ValueError(f"ground truth height must be positive, got {self.hgt}")
        if not 0.0 <= self.vis <= 1.0:
            raise ValueError(f"visibility must be in [0, 1], got {self.vis}")


@dataclass(frozen=True)
class Detection:
    box: RoiBox
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"detection score must be finite, got {self.score}")


@dataclass(frozen=True)
class SubsetSpec:
    """Height/visibility window; boxes outside it are evaluated as ignore."""
    name: str
    hgt_range: tuple
    vis_range: tuple

    def __post_init__(self):
        for lo, hi in (self.hgt_range, self.vis_range):
            if lo > hi:
                raise ValueError(f"subset {self.name}: empty range [{lo}, {hi}]")

    def contains(self, gt: GroundTruthBox) -> bool:
        return (self.hgt_range[0] <= gt.hgt <= self.hgt_range[1]
                and self.vis_range[0] <= gt.vis <= self.vis_range[1])


INF = math.inf

DEFAULT_SUBSETS = (
    SubsetSpec("All", (20.0, INF), (0.2, INF)),
    SubsetSpec("Small", (50.0, 75.0), (0.65, INF)),
    SubsetSpec("Occlusion", (50.0, INF), (0.2, 0.65)),
    SubsetSpec("Reasonable", (50.0, INF), (0.65, INF)),
)


def subset_filter(gts: Sequence[GroundTruthBox],
                  spec: SubsetSpec) -> list:
    """Mark out-of-window boxes as ignore; never drops a record."""
    return [gt if spec.contains(gt) or gt.ignore
            else replace(gt, ignore=True) for gt in gts]


# ---------------------------------------------------------------------------
# Matching
# ---------------------------------------------------------------------------

TP, FP, IGNORED = "tp", "fp", "ignored"


@dataclass
class MatchResult:
    """Per-image match outcome.

    outcomes: one (score, label) per detection in input order, label in
    {"tp", "fp", "ignored"}. gt_matched: per ground truth, whether some
    detection claimed it (always False for ignore boxes). n_gt: count of
    non-ignore ground truths.
    """
    outcomes: list
    gt_matched: list
    n_gt: int


def match_detections(dets: Sequence[Detection],
                     gts: Sequence[GroundTruthBox],
                     iou_thresh: float = 0.5) -> MatchResult:
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    real = [i for i, g in enumerate(gts) if not g.ignore]
    ignored_gts = [g for g in gts if g.ignore]
    taken = [False] * len(gts)
    outcomes: list = [None] * len(dets)
    for di in order:
        det = dets[di]
        best_iou, best_gt = 0.0, -1
        for gi in real:
            if taken[gi]:
                continue
            v = iou(det.box, gts[gi].box)
            if v >= iou_thresh and v > best_iou:
                best_iou, best_gt = v, gi
        if best_gt >= 0:
            taken[best_gt] = True
            outcomes[di] = (det.score, TP)
            continue
        # ignore regions use intersection over detection area and are
        # never consumed
        if any(intersection_area(det.box, g.box) / det.box.area >= iou_thresh
               for g in ignored_gts):
            outcomes[di] = (det.score, IGNORED)
        else:
            outcomes[di] = (det.score, FP)
    return MatchResult(outcomes=outcomes, gt_matched=taken, n_gt=len(real))


# ---------------------------------------------------------------------------
# Curves and the log-average miss rate
# ---------------------------------------------------------------------------

def fppi_missrate_curve(matches: Iterable[MatchResult],
                        image_count: int) -> list:
    """(FPPI, miss rate) at every distinct score threshold, descending.

    With no detections at all the curve is the single point (0, 1).
    Raises when there is no non-ignore ground truth to miss.
    """
    if image_count < 1:
        raise ValueError("image_count must be >= 1")
    matches = list(matches)
    total_gt = sum(m.n_gt for m in matches)
    if total_gt == 0:
        raise ValueError("miss rate undefined: no non-ignore ground truth")
    scored = sorted((pair for m in matches for pair in m.outcomes),
                    key=lambda p: -p[0])
    if not scored:
        return [(0.0, 1.0)]
    curve = []
    tp = fp = 0
    for k, (score, label) in enumerate(scored):
        if label == TP:
            tp += 1
        elif label == FP:
            fp += 1
        last_of_threshold = k + 1 == len(scored) or scored[k + 1][0] != score
        if last_of_threshold:
            curve.append((fp / image_count, 1.0 - tp / total_gt))
    return curve


def reference_fppi_points(n: int = 9, lo: float = 1e-2,
                          hi: float = 1e0) -> np.ndarray:
    return np.power(10.0, np.linspace(math.log10(lo), math.log10(hi), n))


def log_average_miss_rate(curve: Sequence[tuple], n_points: int = 9,
                          floor: float = 1e-4) -> float:
    """Geometric mean of the miss rate sampled at reference FPPI points.

    At each reference point the miss rate of the last curve entry with
    fppi <= the point is used; if the curve starts to the right of the
    point, its highest miss rate stands in. Miss rates are clamped to a
    small floor so perfect segments stay finite under the logarithm.
    """
    if not curve:
        raise ValueError("empty curve")
    refs = reference_fppi_points(n_points)
    highest = max(mr for _, mr in curve)
    samples = []
    for ref in refs:
        mr = highest
        for fppi, miss in curve:
            if fppi <= ref:
                mr = miss
        samples.append(max(mr, floor))
    value = math.exp(sum(math.log(s) for s in samples) / len(samples))
    # the exact geometric mean lies in [floor, 1]; keep rounding inside it
    return float(min(max(value, floor), 1.0))


def evaluate_detections(dets_per_image: dict, gts_per_image: dict,
                        subsets: Sequence[SubsetSpec] = DEFAULT_SUBSETS,
                        iou_thresh: float = 0.5) -> dict:
    """MR_-2 and curve per subset over a keyed image collection.

    Images present in either mapping count toward FPPI; an image with
    no entry contributes no detections / no ground truth.
    """
    image_ids = sorted(set(dets_per_image) | set(gts_per_image))
    results = {}
    for spec in subsets:
        matches = []
        for img in image_ids:
            gts = subset_filter(gts_per_image.get(img, []), spec)
            matches.append(match_detections(dets_per_image.get(img, []),
                                            gts, iou_thresh))
        curve = fppi_missrate_curve(matches, len(image_ids))
        results[spec.name] = {
            "mr2": log_average_miss_rate(curve),
            "curve": curve,
        }
    return results


# ---------------------------------------------------------------------------
# Interchange files: one record per line
# ---------------------------------------------------------------------------

def write_detections(path, dets_per_image: dict) -> None:
    """Lines of: image_id x1 y1 x2 y2 score."""
    with open(path, "w") as fh:
        for img in sorted(dets_per_image):
            for d in dets_per_image[img]:
                fh.write(f"{img} {d.box.x1:.6f} {d.box.y1:.6f} "
                         f"{d.box.x2:.6f} {d.box.y2:.6f} {d.score:.9f}\n")


def read_detections(path) -> dict:
    out: dict = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise ValueError(f"{path}:{ln}: expected 6 fields, got {len(parts)}")
            img, x1, y1, x2, y2, score = parts
            out.setdefault(img, []).append(
                Detection(RoiBox(float(x1), float(y1), float(x2), float(y2)),
                          float(score)))
    return out


def write_ground_truth(path, gts_per_image: dict) -> None:
    """Lines of: image_id x1 y1 x2 y2 hgt vis ignore_flag."""
    with open(path, "w") as fh:
        for img in sorted(gts_per_image):
            for g in gts_per_image[img]:
                fh.write(f"{img} {g.box.x1:.6f} {g.box.y1:.6f} "
                         f"{g.box.x2:.6f} {g.box.y2:.6f} "
                         f"{g.hgt:.6f} {g.vis:.6f} {int(g.ignore)}\n")


def read_ground_truth(path) -> dict:
    out: dict = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 8:
                raise ValueError(f"{path}:{ln}: expected 8 fields, got {len(parts)}")
            img = parts[0]
            x1, y1, x2, y2, hgt, vis = map(float, parts[1:7])
            out.setdefault(img, []).append(
                GroundTruthBox(RoiBox(x1, y1, x2, y2), hgt, vis,
                               bool(int(parts[7]))))
    return out
