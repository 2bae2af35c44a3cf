"""Synthetic ground truth and noisy proposal sets.

The proposal generator perturbs ground-truth regions with morphology and
translation jitter, optionally swaps labels, drops whole targets, and
mixes in low-scoring elliptical distractors. It stands in for a learned
segmentation model at desk scale, with the noise knobs acting as a
quality dial.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import masks
from .engine import ProposalSet, Segment
from .labels import Label, STUFF, THING
from .metrics import GroundTruthImage
from .rngstream import generator

DEFAULT_THING_LABEL_IDS = ("crate", "disc", "ring", "rod", "knob", "tile", "cone", "lump")
DEFAULT_STUFF_LABEL_IDS = ("field", "water", "pave", "sky")


def default_catalog() -> list[Label]:
    things = [Label(lid, THING) for lid in DEFAULT_THING_LABEL_IDS]
    stuff = [Label(lid, STUFF) for lid in DEFAULT_STUFF_LABEL_IDS]
    return things + stuff


@dataclass(frozen=True)
class NoiseConfig:
    """Quality dial for the synthetic proposal generator."""

    variants_per_target: int = 6
    dilate_erode_radius_max: int = 2
    translation_jitter_std: float = 1.5
    label_noise_prob: float = 0.1
    miss_prob: float = 0.15
    distractor_count: int = 10
    base_quality: float = 0.9
    distractor_base_quality: float = 0.2
    score_noise_std: float = 0.1
    max_proposals: int = 1000

    def __post_init__(self):
        for name in ("label_noise_prob", "miss_prob"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise ValueError(f"{name} must be in [0, 1], got {value}")
        if self.max_proposals < 1:
            raise ValueError(f"max_proposals must be >= 1, got {self.max_proposals}")
        if self.variants_per_target < 0 or self.distractor_count < 0:
            raise ValueError("variants_per_target and distractor_count must be >= 0")

    def to_json(self) -> dict:
        return {
            "variants_per_target": self.variants_per_target,
            "dilate_erode_radius_max": self.dilate_erode_radius_max,
            "translation_jitter_std": self.translation_jitter_std,
            "label_noise_prob": self.label_noise_prob,
            "miss_prob": self.miss_prob,
            "distractor_count": self.distractor_count,
            "base_quality": self.base_quality,
            "distractor_base_quality": self.distractor_base_quality,
            "score_noise_std": self.score_noise_std,
            "max_proposals": self.max_proposals,
        }

    @classmethod
    def from_json(cls, data: dict) -> "NoiseConfig":
        return cls(**{k: data[k] for k in cls().to_json() if k in data})


def _disk(radius: int) -> np.ndarray:
    grid = np.arange(-radius, radius + 1)
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    return (xx * xx + yy * yy) <= radius * radius


def _translate(bitmap: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Shift without wraparound; pixels leaving the canvas are clipped."""
    h, w = bitmap.shape
    out = np.zeros_like(bitmap)
    src_x = slice(max(0, -dx), min(w, w - dx))
    dst_x = slice(max(0, dx), min(w, w + dx))
    src_y = slice(max(0, -dy), min(h, h - dy))
    dst_y = slice(max(0, dy), min(h, h + dy))
    out[dst_y, dst_x] = bitmap[src_y, src_x]
    return out


def _clamp(x: float) -> float:
    return min(max(x, 0.0), 1.0)


def synthesize(
    gt: GroundTruthImage,
    cfg: NoiseConfig,
    seed: int,
    catalog: list[Label] | None = None,
) -> ProposalSet:
    """Generate a noisy proposal set for one ground-truth image.

    Per surviving target: ``variants_per_target`` masks perturbed by
    dilation/erosion (disk radius up to the configured max) and rounded
    Gaussian translation; variants that end up empty or disjoint from
    their source are discarded. Scores follow
    ``clamp(base_quality * IoU_to_source + N(0, score_noise_std))``.
    Deterministic for a given (gt, cfg, seed).
    """
    rng = generator(seed, "synthesize")
    if catalog is None:
        catalog = gt.labels()
    canvas = gt.canvas
    proposals: list[Segment] = []
    counter = 0

    for target in gt.targets:
        if rng.random() < cfg.miss_prob:
            continue
        source = target.mask.bitmap()
        for _ in range(cfg.variants_per_target):
            radius = int(rng.integers(0, cfg.dilate_erode_radius_max + 1))
            grow = bool(rng.random() < 0.5)
            dx = int(round(rng.normal(0.0, cfg.translation_jitter_std)))
            dy = int(round(rng.normal(0.0, cfg.translation_jitter_std)))
            bitmap = source
            if radius > 0:
                structure = _disk(radius)
                if grow:
                    bitmap = ndimage.binary_dilation(bitmap, structure=structure)
                else:
                    bitmap = ndimage.binary_erosion(bitmap, structure=structure)
            if dx or dy:
                bitmap = _translate(np.asarray(bitmap, dtype=bool), dx, dy)
            overlap = int(np.count_nonzero(bitmap & source))
            if overlap == 0:
                continue
            label = target.label
            if len(catalog) > 1 and rng.random() < cfg.label_noise_prob:
                others = [l for l in catalog if l != label]
                label = others[int(rng.integers(len(others)))]
            area = int(np.count_nonzero(bitmap))
            iou_src = overlap / (area + target.mask.area - overlap)
            score = _clamp(cfg.base_quality * iou_src + rng.normal(0.0, cfg.score_noise_std))
            proposals.append(
                Segment(
                    id=f"p{counter:04d}",
                    mask=masks.Mask.from_bitmap(bitmap, canvas),
                    label=label,
                    score=score,
                )
            )
            counter += 1

    yy, xx = np.meshgrid(np.arange(canvas.height), np.arange(canvas.width), indexing="ij")
    for _ in range(cfg.distractor_count):
        cx = rng.uniform(0, canvas.width)
        cy = rng.uniform(0, canvas.height)
        ax = rng.uniform(canvas.width * 0.04, canvas.width * 0.18)
        ay = rng.uniform(canvas.height * 0.04, canvas.height * 0.18)
        label = catalog[int(rng.integers(len(catalog)))]
        score = _clamp(cfg.distractor_base_quality + rng.normal(0.0, cfg.score_noise_std))
        bitmap = ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 <= 1.0
        if not bitmap.any():
            continue
        proposals.append(
            Segment(id=f"p{counter:04d}", mask=masks.Mask.from_bitmap(bitmap, canvas), label=label, score=score)
        )
        counter += 1

    if len(proposals) > cfg.max_proposals:
        proposals.sort(key=lambda s: (-s.score, s.id))
        proposals = proposals[: cfg.max_proposals]
    proposals.sort(key=lambda s: s.id)
    return ProposalSet(canvas, proposals)


def oracle_proposals(gt: GroundTruthImage) -> ProposalSet:
    """Exact ground-truth masks with correct labels; scores descend by area."""
    if not gt.targets:
        return ProposalSet(gt.canvas, [])
    max_area = max(t.mask.area for t in gt.targets)
    segments = [
        Segment(id=f"o{i:04d}", mask=t.mask, label=t.label, score=t.mask.area / max_area)
        for i, t in enumerate(gt.targets)
    ]
    return ProposalSet(gt.canvas, segments)


# ----------------------------------------------------------------------
# Synthetic ground truth
# ----------------------------------------------------------------------

# Owner-grid code bands used while carving a random scene.
_STUFF_BASE = 0
_THING_BASE = 1000


def random_ground_truth(
    canvas: masks.Canvas,
    seed: int,
    catalog: list[Label] | None = None,
    n_stuff: tuple[int, int] = (2, 3),
    n_containers: tuple[int, int] = (1, 2),
    n_inner_per_container: tuple[int, int] = (2, 3),
    n_free_things: tuple[int, int] = (3, 5),
) -> GroundTruthImage:
    """Random panoptic scene: stuff areas, large container things, and
    small things carved inside containers (near their rims) or floating free.

    The scene is a partition: every pixel belongs to exactly one region.
    """
    rng = generator(seed, "ground-truth")
    if catalog is None:
        catalog = default_catalog()
    thing_labels = [l for l in catalog if l.is_thing]
    stuff_labels = [l for l in catalog if l.is_stuff]
    if not thing_labels or not stuff_labels:
        raise ValueError("catalog needs at least one thing and one stuff label")
    w, h = canvas.width, canvas.height
    scale = min(w, h)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")

    # Stuff: Voronoi areas around random sites.
    k = int(rng.integers(n_stuff[0], n_stuff[1] + 1))
    k = min(k, len(stuff_labels))
    sites = np.column_stack([rng.uniform(0, w, size=k), rng.uniform(0, h, size=k)])
    dist = (xx[None, :, :] - sites[:, 0, None, None]) ** 2 + (yy[None, :, :] - sites[:, 1, None, None]) ** 2
    owner = np.argmin(dist, axis=0).astype(np.int32) + _STUFF_BASE
    stuff_assignment = list(rng.permutation(len(stuff_labels))[:k])

    def _paint_ellipse(code, cx, cy, ax, ay):
        region = ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 <= 1.0
        owner[region] = code

    thing_specs = []  # (code, label)
    next_thing = _THING_BASE

    def _new_thing(cx, cy, ax, ay):
        nonlocal next_thing
        code = next_thing
        next_thing += 1
        _paint_ellipse(code, cx, cy, ax, ay)
        label = thing_labels[int(rng.integers(len(thing_labels)))]
        thing_specs.append((code, label))
        return cx, cy, ax, ay

    containers = []
    n_cont = int(rng.integers(n_containers[0], n_containers[1] + 1))
    for _ in range(n_cont):
        ax = rng.uniform(0.14, 0.23) * scale
        ay = rng.uniform(0.14, 0.23) * scale
        cx = rng.uniform(ax + 2, w - ax - 2)
        cy = rng.uniform(ay + 2, h - ay - 2)
        containers.append(_new_thing(cx, cy, ax, ay))

    # Small things near each container's rim, where distance ordering has
    # a real edge over score ordering.
    for ccx, ccy, cax, cay in containers:
        n_inner = int(rng.integers(n_inner_per_container[0], n_inner_per_container[1] + 1))
        for _ in range(n_inner):
            angle = rng.uniform(0, 2 * math.pi)
            radial = rng.uniform(0.5, 0.75)
            px = ccx + math.cos(angle) * cax * radial
            py = ccy + math.sin(angle) * cay * radial
            r = rng.uniform(0.030, 0.062) * scale
            _new_thing(px, py, r, r * rng.uniform(0.8, 1.25))

    n_free = int(rng.integers(n_free_things[0], n_free_things[1] + 1))
    for _ in range(n_free):
        r = rng.uniform(0.032, 0.075) * scale
        cx = rng.uniform(r + 1, w - r - 1)
        cy = rng.uniform(r + 1, h - r - 1)
        _new_thing(cx, cy, r, r * rng.uniform(0.75, 1.3))

    min_area = max(8, int(0.0005 * w * h))
    things = []
    for code, label in thing_specs:
        region = owner == code
        if int(region.sum()) >= min_area:
            things.append((masks.Mask.from_bitmap(region, canvas), label))
    stuff = []
    for band in range(k):
        region = owner == (_STUFF_BASE + band)
        if region.any():
            stuff.append((masks.Mask.from_bitmap(region, canvas), stuff_labels[stuff_assignment[band]]))
    return GroundTruthImage(canvas, thing_instances=things, stuff_regions=stuff)
