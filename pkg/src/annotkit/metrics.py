"""Annotation quality and cost metrics.

Targets are ground-truth thing instances plus one merged region per stuff
class. Predictions are the visible regions of a depth-resolved rendering:
one unit per thing-labeled entry, one merged unit per stuff label.
Matching requires identical labels; panoptic quality uses IoU > 0.5
(which makes matches unique on partitions), recall uses a configurable
threshold with greedy one-to-one matching by descending IoU.

All functions are pure and safe to run in parallel across images.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .engine import Rendering
from .errors import CanvasMismatchError, EmptyInputError, EmptyMaskError, InvalidPolygonError
from .labels import Label
from .masks import Canvas, Mask, union_masks

PQ_MATCH_THRESHOLD = 0.5


@dataclass(frozen=True)
class GroundTruthTarget:
    target_id: str
    label: Label
    mask: Mask


class GroundTruthImage:
    """Reference annotation: thing instances and per-class merged stuff regions."""

    def __init__(
        self,
        canvas: Canvas,
        thing_instances: Sequence[tuple[Mask, Label]] = (),
        stuff_regions: Sequence[tuple[Mask, Label]] = (),
    ):
        self.canvas = canvas
        for mask, label in list(thing_instances) + list(stuff_regions):
            if mask.canvas != canvas:
                raise CanvasMismatchError(f"ground-truth mask on {mask.canvas}, image on {canvas}")
            if mask.is_empty:
                raise EmptyMaskError(f"ground-truth region for {label.id!r} is empty")
        for _, label in thing_instances:
            if not label.is_thing:
                raise ValueError(f"label {label.id!r} is not a thing label")
        for _, label in stuff_regions:
            if not label.is_stuff:
                raise ValueError(f"label {label.id!r} is not a stuff label")
        self.thing_instances: tuple[tuple[Mask, Label], ...] = tuple(thing_instances)
        # Same-class stuff regions collapse into a single region per class.
        merged: dict[Label, list[Mask]] = {}
        order: list[Label] = []
        for mask, label in stuff_regions:
            if label not in merged:
                merged[label] = []
                order.append(label)
            merged[label].append(mask)
        self.stuff_regions: tuple[tuple[Mask, Label], ...] = tuple(
            (union_masks(merged[label], canvas), label) for label in order
        )
        targets = [
            GroundTruthTarget(f"thing:{i}", label, mask)
            for i, (mask, label) in enumerate(self.thing_instances)
        ]
        targets += [
            GroundTruthTarget(f"stuff:{label.id}", label, mask) for mask, label in self.stuff_regions
        ]
        self.targets: tuple[GroundTruthTarget, ...] = tuple(targets)

    def labels(self) -> list[Label]:
        out, seen = [], set()
        for target in self.targets:
            if target.label not in seen:
                seen.add(target.label)
                out.append(target.label)
        return out


@dataclass
class ClassStats:
    targets: int = 0
    recalled: int = 0
    tp: int = 0
    fp: int = 0
    fn: int = 0
    iou_sum: float = 0.0


@dataclass(frozen=True)
class QualityReport:
    recall: float
    recalled: int
    total_targets: int
    panoptic_quality: float
    segmentation_quality: float
    recognition_quality: float
    true_positives: int
    false_positives: int
    false_negatives: int
    per_class: dict[str, ClassStats] = field(default_factory=dict)
    matched_target_ids: frozenset[str] = frozenset()

    def to_json(self) -> dict:
        return {
            "recall": self.recall,
            "recalled": self.recalled,
            "total_targets": self.total_targets,
            "panoptic_quality": self.panoptic_quality,
            "segmentation_quality": self.segmentation_quality,
            "recognition_quality": self.recognition_quality,
            "true_positives": self.true_positives,
            "false_positives": self.false_positives,
            "false_negatives": self.false_negatives,
            "per_class": {
                key: {
                    "targets": s.targets,
                    "recalled": s.recalled,
                    "tp": s.tp,
                    "fp": s.fp,
                    "fn": s.fn,
                    "iou_sum": s.iou_sum,
                }
                for key, s in sorted(self.per_class.items())
            },
        }


@dataclass(frozen=True)
class CostCurve:
    """Mean quality over a fixed image set at increasing micro-action budgets."""

    budgets: tuple[int, ...]
    mean_recall: tuple[float, ...]
    mean_pq: tuple[float, ...]
    n_images: int

    def __post_init__(self):
        if any(b2 <= b1 for b1, b2 in zip(self.budgets, self.budgets[1:])):
            raise ValueError("budgets must be strictly increasing")


class GroundTruthIndex:
    """Precomputed per-target data for fast repeated scoring.

    Labels are interned to small integer codes so that trial evaluations
    inside the simulator loop stay cheap.
    """

    def __init__(self, gt: GroundTruthImage):
        self.gt = gt
        self.targets = gt.targets
        self._flat = [t.mask.flat_indices() for t in self.targets]
        self._areas = np.array([t.mask.area for t in self.targets], dtype=np.int64)
        self._code_of: dict[Label, int] = {}
        self._code_labels: list[Label] = []
        self._code_is_thing: list[bool] = []
        self._target_codes = np.array([self.code_for(t.label) for t in self.targets], dtype=np.int64)
        # When targets are pairwise disjoint (the common panoptic case) a
        # single joint bincount yields all intersections at once.
        npix = gt.canvas.pixel_count
        gt_code = np.zeros(npix, dtype=np.int32)
        claimed = np.zeros(npix, dtype=bool)
        disjoint = True
        for t, idx in enumerate(self._flat):
            if claimed[idx].any():
                disjoint = False
                break
            claimed[idx] = True
            gt_code[idx] = t + 1
        self._gt_code_flat = gt_code if disjoint else None

    def code_for(self, label: Label) -> int:
        code = self._code_of.get(label)
        if code is None:
            code = len(self._code_labels)
            self._code_of[label] = code
            self._code_labels.append(label)
            self._code_is_thing.append(label.is_thing)
        return code

    def codes_for(self, labels: Sequence[Label]) -> np.ndarray:
        return np.array([self.code_for(label) for label in labels], dtype=np.int64)

    def _units_and_pairs(self, flat: np.ndarray, entry_codes: np.ndarray):
        """Build visible prediction units and same-label IoU pairs.

        Returns (visible per entry, unit label codes, unit areas,
        pairs sorted by descending IoU then target then unit).
        """
        n_entries = len(entry_codes)
        n_targets = len(self.targets)
        counts = None
        if self._gt_code_flat is not None:
            joint = self._gt_code_flat * np.int32(n_entries + 1)
            joint += flat.astype(np.int32, copy=False)
            joint += 1
            counts = np.bincount(joint, minlength=(n_targets + 1) * (n_entries + 1)).reshape(
                n_targets + 1, n_entries + 1
            )
            visible = counts.sum(axis=0)[1:]
        elif n_entries:
            visible = np.bincount(flat[flat >= 0], minlength=n_entries)
        else:
            visible = np.zeros(0, dtype=np.int64)

        # One unit per visible thing entry; stuff entries merge per label.
        unit_of_entry = np.full(n_entries, -1, dtype=np.int64)
        unit_codes: list[int] = []
        unit_areas: list[int] = []
        stuff_units: dict[int, int] = {}
        is_thing = self._code_is_thing
        for e in range(n_entries):
            if visible[e] == 0:
                continue
            code = int(entry_codes[e])
            if is_thing[code]:
                unit_of_entry[e] = len(unit_codes)
                unit_codes.append(code)
                unit_areas.append(int(visible[e]))
            else:
                u = stuff_units.get(code)
                if u is None:
                    u = len(unit_codes)
                    stuff_units[code] = u
                    unit_codes.append(code)
                    unit_areas.append(0)
                unit_of_entry[e] = u
                unit_areas[u] += int(visible[e])
        n_units = len(unit_codes)
        unit_codes_arr = np.asarray(unit_codes, dtype=np.int64)
        unit_areas_arr = np.asarray(unit_areas, dtype=np.int64)

        inter = np.zeros((n_targets, max(n_units, 1)), dtype=np.float64)
        if n_units:
            entry_valid = unit_of_entry >= 0
            if counts is not None:
                merge = np.zeros((n_entries, n_units), dtype=np.float64)
                merge[np.flatnonzero(entry_valid), unit_of_entry[entry_valid]] = 1.0
                inter[:, :n_units] = counts[1:, 1:].astype(np.float64) @ merge
            else:
                for t in range(n_targets):
                    per_entry = np.bincount(flat[self._flat[t]] + 1, minlength=n_entries + 1)[1:]
                    inter[t] = np.bincount(
                        unit_of_entry[entry_valid], weights=per_entry[entry_valid], minlength=n_units
                    )
        eligible = (inter[:, :n_units] > 0) & (unit_codes_arr[None, :] == self._target_codes[:, None])
        ts, us = np.nonzero(eligible)
        if len(ts):
            inter_v = inter[ts, us]
            ious = inter_v / (self._areas[ts] + unit_areas_arr[us] - inter_v)
            order = np.lexsort((us, ts, -ious))
            pairs = list(zip(ious[order], ts[order], us[order]))
        else:
            pairs = []
        return visible, unit_codes_arr, unit_areas_arr, pairs

    @staticmethod
    def _greedy(pairs, threshold: float) -> list[tuple[float, int, int]]:
        taken_t: set[int] = set()
        taken_u: set[int] = set()
        matches = []
        for iou_value, t, u in pairs:
            if iou_value <= threshold:
                break
            if t in taken_t or u in taken_u:
                continue
            taken_t.add(t)
            taken_u.add(u)
            matches.append((float(iou_value), int(t), int(u)))
        return matches

    def pq_value(self, flat_code_map: np.ndarray, entry_codes: np.ndarray) -> float:
        """Panoptic quality only; the hot path for simulator trial scoring."""
        _, unit_codes, _, pairs = self._units_and_pairs(flat_code_map, entry_codes)
        matches = self._greedy(pairs, PQ_MATCH_THRESHOLD)
        tp = len(matches)
        denom = tp + 0.5 * (len(unit_codes) - tp) + 0.5 * (len(self.targets) - tp)
        if denom == 0.0:
            return 1.0
        if tp == 0:
            return 0.0
        return sum(m[0] for m in matches) / denom

    def visible_counts(self, flat_code_map: np.ndarray, n_entries: int) -> np.ndarray:
        if n_entries == 0:
            return np.zeros(0, dtype=np.int64)
        return np.bincount(flat_code_map[flat_code_map >= 0], minlength=n_entries)

    def score_code_map(
        self,
        segment_code_map: np.ndarray,
        entry_labels: Sequence[Label],
        recall_threshold: float = 0.5,
    ) -> QualityReport:
        """Score a per-pixel owner map (codes index ``entry_labels``, -1 empty)."""
        flat = segment_code_map.ravel()
        entry_codes = self.codes_for(entry_labels)
        _, unit_codes_arr, _, pairs = self._units_and_pairs(flat, entry_codes)
        n_units = len(unit_codes_arr)
        unit_labels = [self._code_labels[int(code)] for code in unit_codes_arr]
        n_targets = len(self.targets)

        pq_matches = self._greedy(pairs, PQ_MATCH_THRESHOLD)
        recall_matches = (
            pq_matches if recall_threshold == PQ_MATCH_THRESHOLD else self._greedy(pairs, recall_threshold)
        )

        per_class: dict[str, ClassStats] = {}

        def stats(label: Label) -> ClassStats:
            return per_class.setdefault(label.id, ClassStats())

        for target in self.targets:
            stats(target.label).targets += 1
        for _, t, _ in recall_matches:
            stats(self.targets[t].label).recalled += 1
        matched_t = {t for _, t, _ in pq_matches}
        matched_u = {u for _, _, u in pq_matches}
        iou_sum = 0.0
        for iou_value, t, u in pq_matches:
            s = stats(self.targets[t].label)
            s.tp += 1
            s.iou_sum += iou_value
            iou_sum += iou_value
        for u in range(n_units):
            if u not in matched_u:
                stats(unit_labels[u]).fp += 1
        for t in range(n_targets):
            if t not in matched_t:
                stats(self.targets[t].label).fn += 1

        tp = len(pq_matches)
        fp = n_units - tp
        fn = n_targets - tp
        denom = tp + 0.5 * fp + 0.5 * fn
        if denom == 0.0:
            pq = sq = rq = 1.0
        elif tp == 0:
            pq = sq = rq = 0.0
        else:
            sq = iou_sum / tp
            rq = tp / denom
            pq = iou_sum / denom

        recalled = len(recall_matches)
        recall = recalled / n_targets if n_targets else 1.0
        return QualityReport(
            recall=recall,
            recalled=recalled,
            total_targets=n_targets,
            panoptic_quality=pq,
            segmentation_quality=sq,
            recognition_quality=rq,
            true_positives=tp,
            false_positives=fp,
            false_negatives=fn,
            per_class=per_class,
            matched_target_ids=frozenset(self.targets[t].target_id for _, t, _ in recall_matches),
        )

    def score_rendering(self, rendering: Rendering, recall_threshold: float = 0.5) -> QualityReport:
        if rendering.canvas != self.gt.canvas:
            raise CanvasMismatchError(f"rendering on {rendering.canvas}, ground truth on {self.gt.canvas}")
        return self.score_code_map(
            rendering.segment_code_map,
            [entry.label for entry in rendering.entries],
            recall_threshold=recall_threshold,
        )


def evaluate_quality(
    rendering: Rendering, gt: GroundTruthImage, recall_threshold: float = 0.5
) -> QualityReport:
    """Recall and panoptic quality of a rendering against ground truth."""
    return GroundTruthIndex(gt).score_rendering(rendering, recall_threshold=recall_threshold)


def recall_at_iou(rendering: Rendering, gt: GroundTruthImage, threshold: float = 0.5) -> QualityReport:
    """Fraction of targets recalled at IoU > ``threshold``."""
    return evaluate_quality(rendering, gt, recall_threshold=threshold)


def panoptic_quality(rendering: Rendering, gt: GroundTruthImage) -> QualityReport:
    """PQ = sum of matched IoU / (TP + FP/2 + FN/2) at IoU > 0.5 with same labels."""
    return evaluate_quality(rendering, gt)


def pixel_agreement(a: Rendering, b: Rendering) -> float:
    """Fraction of pixels whose labels agree; unlabeled counts as a label."""
    if a.canvas != b.canvas:
        raise CanvasMismatchError(f"renderings on {a.canvas} vs {b.canvas}")
    joint: dict[Label, int] = {}

    def remap(rendering: Rendering) -> np.ndarray:
        lut = np.empty(len(rendering.catalog) + 1, dtype=np.int64)
        lut[0] = -1
        for i, label in enumerate(rendering.catalog):
            lut[i + 1] = joint.setdefault(label, len(joint))
        return lut[rendering.label_code_map + 1]

    return float(np.mean(remap(a) == remap(b)))


def labelme_polygon_cost(p: int) -> int:
    """Micro-action cost of drawing a p-vertex polygon plus typing its label."""
    if p < 3:
        raise InvalidPolygonError(f"polygon needs at least 3 vertices, got {p}")
    return p + 2


def aggregate_curve(traces: Sequence, budgets: Sequence[int]) -> CostCurve:
    """Mean quality at each budget: the last recorded step whose cumulative
    cost fits, or the initial quality for budgets before the first step."""
    traces = list(traces)
    if not traces:
        raise EmptyInputError("no traces to aggregate")
    budgets = [int(b) for b in budgets]
    mean_recall = []
    mean_pq = []
    for budget in budgets:
        recall_total = 0.0
        pq_total = 0.0
        for trace in traces:
            recall, pq = trace.initial_recall, trace.initial_pq
            for step in trace.steps:
                if step.cum_cost > budget:
                    break
                recall, pq = step.recall, step.pq
            recall_total += recall
            pq_total += pq
        mean_recall.append(recall_total / len(traces))
        mean_pq.append(pq_total / len(traces))
    return CostCurve(
        budgets=tuple(budgets),
        mean_recall=tuple(mean_recall),
        mean_pq=tuple(mean_pq),
        n_images=len(traces),
    )


def curve_csv_lines(curve: CostCurve) -> list[str]:
    lines = ["budget,mean_recall,mean_pq,n_images"]
    for budget, recall, pq in zip(curve.budgets, curve.mean_recall, curve.mean_pq):
        lines.append(f"{budget},{recall:.6f},{pq:.6f},{curve.n_images}")
    return lines


def write_curve_csv(curve: CostCurve, path, preamble: str | None = None):
    """Write the curve as CSV; an optional preamble line goes first."""
    lines = curve_csv_lines(curve)
    if preamble is not None:
        lines.insert(0, preamble)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
