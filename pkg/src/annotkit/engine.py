"""Interactive annotation session over a fixed proposal set.

A session holds a depth-ordered active subset of machine-proposed
segments and supports four edit actions (add, remove, change label,
change depth) plus candidate retrieval for the add flow. Every action is
charged in micro-actions (clicks, mouse-wheel scroll steps, keypresses,
menu selections) and appended to a replayable log.

Sessions are single-actor state machines: apply actions from one thread
at a time. Distinct sessions are independent.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from . import masks
from .errors import (
    CanvasMismatchError,
    EmptyMaskError,
    InvalidActionError,
    NoCandidatesError,
    OutOfBoundsError,
    UnknownLabelError,
    UnknownSegmentError,
)
from .labels import Label
from .masks import Canvas, Mask, Point

INIT_AUTO = "auto"
INIT_EMPTY = "empty"
ORDER_BY_SCORE = "score"
ORDER_BY_DISTANCE = "distance"

# Micro-action charges per edit action. Add = opening click + one scroll
# step per candidate skipped + confirming click. Hide is a pure view
# toggle and never reaches the session. The table is exported with run
# metadata so curves can be recomputed under alternative charges.
ADD_BASE_COST = 2
REMOVE_COST = 1
RELABEL_SHORTLIST_COST = 2
RELABEL_MANUAL_COST = 3
FAILED_CLICK_COST = 1
HIDE_COST = 0

COST_TABLE = {
    "add": f"{ADD_BASE_COST} + chosen_index scrolls",
    "remove": REMOVE_COST,
    "change_label_shortlist": RELABEL_SHORTLIST_COST,
    "change_label_manual": RELABEL_MANUAL_COST,
    "change_depth": "|effective shift| scrolls",
    "hide": HIDE_COST,
    "failed_click": FAILED_CLICK_COST,
}


@dataclass(frozen=True)
class Segment:
    """A scored, labeled proposal mask."""

    id: str
    mask: Mask
    label: Label
    score: float

    def __post_init__(self):
        if self.mask.is_empty:
            raise EmptyMaskError(f"segment {self.id!r} has an empty mask")
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"segment {self.id!r} score {self.score} outside [0, 1]")


class ProposalSet:
    """Immutable collection of candidate segments for one image."""

    def __init__(self, canvas: Canvas, segments: Sequence[Segment]):
        seen = set()
        for seg in segments:
            if seg.id in seen:
                raise ValueError(f"duplicate segment id {seg.id!r}")
            seen.add(seg.id)
            if seg.mask.canvas != canvas:
                raise CanvasMismatchError(f"segment {seg.id!r} on {seg.mask.canvas}, proposal set on {canvas}")
        self.canvas = canvas
        self.segments: tuple[Segment, ...] = tuple(segments)
        self._index = {seg.id: i for i, seg in enumerate(self.segments)}

    def __len__(self):
        return len(self.segments)

    def __iter__(self):
        return iter(self.segments)

    def __contains__(self, segment_id: str):
        return segment_id in self._index

    def get(self, segment_id: str) -> Segment:
        try:
            return self.segments[self._index[segment_id]]
        except KeyError:
            raise UnknownSegmentError(f"segment {segment_id!r} not in proposal set") from None

    def index_of(self, segment_id: str) -> int:
        try:
            return self._index[segment_id]
        except KeyError:
            raise UnknownSegmentError(f"segment {segment_id!r} not in proposal set") from None

    def labels(self) -> list[Label]:
        out = []
        seen = set()
        for seg in self.segments:
            if seg.label not in seen:
                seen.add(seg.label)
                out.append(seg.label)
        return out


@dataclass(frozen=True)
class SessionConfig:
    """Knobs of the add-candidate pipeline and initialization mode."""

    nms_threshold: float | None = None
    ordering: str = ORDER_BY_SCORE
    top_n: int | None = None
    init_mode: str = INIT_AUTO

    def __post_init__(self):
        if self.nms_threshold is not None and not (0.0 < self.nms_threshold < 1.0):
            raise ValueError(f"nms_threshold must be in (0, 1), got {self.nms_threshold}")
        if self.ordering not in (ORDER_BY_SCORE, ORDER_BY_DISTANCE):
            raise ValueError(f"unknown ordering {self.ordering!r}")
        if self.top_n is not None and self.top_n < 1:
            raise ValueError(f"top_n must be positive, got {self.top_n}")
        if self.init_mode not in (INIT_AUTO, INIT_EMPTY):
            raise ValueError(f"unknown init_mode {self.init_mode!r}")

    def setting_string(self) -> str:
        """Compact name used for sweep output files, e.g. init-auto+nms0.5+sortdistance-top4."""
        parts = [f"init-{self.init_mode}"]
        if self.nms_threshold is not None:
            parts.append(f"nms{self.nms_threshold:g}")
        if self.ordering != ORDER_BY_SCORE or self.top_n is not None:
            sort = f"sort{self.ordering}"
            if self.top_n is not None:
                sort += f"-top{self.top_n}"
            parts.append(sort)
        return "+".join(parts)

    def to_json(self) -> dict:
        return {
            "nms_threshold": self.nms_threshold,
            "ordering": self.ordering,
            "top_n": self.top_n,
            "init_mode": self.init_mode,
        }

    @classmethod
    def from_json(cls, data: dict) -> "SessionConfig":
        return cls(
            nms_threshold=data.get("nms_threshold"),
            ordering=data.get("ordering", ORDER_BY_SCORE),
            top_n=data.get("top_n"),
            init_mode=data.get("init_mode", INIT_AUTO),
        )


@dataclass
class MicroActionLedger:
    """Running micro-action counts, by device gesture and by edit action."""

    clicks: int = 0
    scrolls: int = 0
    keypresses: int = 0
    menu_selections: int = 0
    by_action: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.clicks + self.scrolls + self.keypresses + self.menu_selections

    def charge(self, action: str, clicks=0, scrolls=0, keypresses=0, menu_selections=0) -> int:
        cost = clicks + scrolls + keypresses + menu_selections
        self.clicks += clicks
        self.scrolls += scrolls
        self.keypresses += keypresses
        self.menu_selections += menu_selections
        self.by_action[action] = self.by_action.get(action, 0) + cost
        return cost

    def snapshot(self) -> "MicroActionLedger":
        return MicroActionLedger(
            clicks=self.clicks,
            scrolls=self.scrolls,
            keypresses=self.keypresses,
            menu_selections=self.menu_selections,
            by_action=dict(self.by_action),
        )

    def to_json(self) -> dict:
        return {
            "total": self.total,
            "clicks": self.clicks,
            "scrolls": self.scrolls,
            "keypresses": self.keypresses,
            "menu_selections": self.menu_selections,
            "by_action": dict(sorted(self.by_action.items())),
        }

    @classmethod
    def from_json(cls, data: dict) -> "MicroActionLedger":
        return cls(
            clicks=data["clicks"],
            scrolls=data["scrolls"],
            keypresses=data["keypresses"],
            menu_selections=data["menu_selections"],
            by_action=dict(data.get("by_action", {})),
        )

    def __eq__(self, other):
        if not isinstance(other, MicroActionLedger):
            return NotImplemented
        return self.to_json() == other.to_json()


@dataclass(frozen=True)
class ActiveEntry:
    """One depth-ordered annotation entry; the label may differ from the proposal's."""

    segment_id: str
    label: Label


@dataclass(frozen=True)
class CandidateList:
    """Ordered add candidates at an anchor point (post NMS/ordering/truncation)."""

    anchor: Point
    segment_ids: tuple[str, ...]

    def __len__(self):
        return len(self.segment_ids)


@dataclass(frozen=True)
class ActionRecord:
    """One executed (or wasted) action; the unit of the replayable log."""

    kind: str
    cost: int
    point: tuple[float, float] | None = None
    segment_id: str | None = None
    label_id: str | None = None
    via_shortlist: bool | None = None
    chosen_index: int | None = None
    shift: int | None = None
    failed: bool = False
    recall: float | None = None
    pq: float | None = None

    def to_json(self) -> dict:
        out = {"kind": self.kind, "cost": self.cost}
        if self.point is not None:
            out["point"] = [self.point[0], self.point[1]]
        for key in ("segment_id", "label_id", "via_shortlist", "chosen_index", "shift"):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        if self.failed:
            out["failed"] = True
        if self.recall is not None:
            out["recall"] = self.recall
        if self.pq is not None:
            out["pq"] = self.pq
        return out

    @classmethod
    def from_json(cls, data: dict) -> "ActionRecord":
        point = data.get("point")
        return cls(
            kind=data["kind"],
            cost=data["cost"],
            point=tuple(point) if point is not None else None,
            segment_id=data.get("segment_id"),
            label_id=data.get("label_id"),
            via_shortlist=data.get("via_shortlist"),
            chosen_index=data.get("chosen_index"),
            shift=data.get("shift"),
            failed=data.get("failed", False),
            recall=data.get("recall"),
            pq=data.get("pq"),
        )


@dataclass(frozen=True)
class Rendering:
    """Depth-resolved view of a session: per-pixel owner entry and label.

    ``segment_code_map`` holds, per pixel, the index of the owning entry in
    ``entries`` (front-to-back order), or -1 where nothing is drawn.
    """

    canvas: Canvas
    segment_code_map: np.ndarray
    entries: tuple[ActiveEntry, ...]
    catalog: tuple[Label, ...]

    @cached_property
    def label_code_map(self) -> np.ndarray:
        """Per-pixel index into ``catalog``; -1 where unlabeled."""
        code_of = {label: i for i, label in enumerate(self.catalog)}
        lut = np.full(len(self.entries) + 1, -1, dtype=np.int32)
        for i, entry in enumerate(self.entries):
            lut[i + 1] = code_of[entry.label]
        out = lut[self.segment_code_map + 1]
        out.flags.writeable = False
        return out

    def label_id_at(self, x: int, y: int) -> str | None:
        code = int(self.label_code_map[y, x])
        return None if code < 0 else self.catalog[code].id


def render_hash(rendering: Rendering) -> str:
    """Stable digest of a rendering (canvas, ownership, entry labels)."""
    h = hashlib.sha256()
    h.update(f"{rendering.canvas.width}x{rendering.canvas.height}".encode())
    h.update(rendering.segment_code_map.astype(np.int32).tobytes())
    for entry in rendering.entries:
        h.update(f"|{entry.segment_id}={entry.label.id}/{entry.label.kind}".encode())
    return h.hexdigest()


def render_entries(
    proposals: ProposalSet, entries: Sequence[ActiveEntry], catalog: Sequence[Label]
) -> Rendering:
    """Depth-resolve a front-to-back entry list against its proposal masks."""
    entries = tuple(entries)
    stack = [(proposals.get(e.segment_id).mask, code) for code, e in enumerate(entries)]
    code_map = masks.rasterize(stack, proposals.canvas)
    return Rendering(
        canvas=proposals.canvas,
        segment_code_map=code_map,
        entries=entries,
        catalog=tuple(catalog),
    )


def auto_initialize(proposals: ProposalSet) -> list[ActiveEntry]:
    """Greedy score-descending coverage construction of the initial active set.

    Segments are visited by descending score (ties by ascending id) and
    appended iff they still own at least one uncovered pixel. Insertion
    order is depth order, earliest in front.
    """
    covered = np.zeros((proposals.canvas.height, proposals.canvas.width), dtype=bool)
    active: list[ActiveEntry] = []
    for seg in sorted(proposals, key=lambda s: (-s.score, s.id)):
        bitmap = seg.mask.bitmap()
        if not np.all(covered[bitmap]):
            active.append(ActiveEntry(segment_id=seg.id, label=seg.label))
            covered |= bitmap
    return active


class AnnotationSession:
    """Mutable annotation state: active set, ledger, and action log."""

    def __init__(
        self,
        proposals: ProposalSet,
        config: SessionConfig,
        catalog: Sequence[Label] | None = None,
    ):
        self.proposals = proposals
        self.config = config
        self.catalog: tuple[Label, ...] = tuple(catalog) if catalog is not None else tuple(proposals.labels())
        self._catalog_set = set(self.catalog)
        for seg in proposals:
            if seg.label not in self._catalog_set:
                raise UnknownLabelError(f"proposal {seg.id!r} labeled {seg.label.id!r} outside the catalog")
        self._active: list[ActiveEntry] = []
        self._ledger = MicroActionLedger()
        self._log: list[ActionRecord] = []
        self._moments_cache: dict[int, masks.SpatialMoments] = {}
        self._iou_cache: dict[tuple[int, int], float] = {}
        if config.init_mode == INIT_AUTO:
            self._active = auto_initialize(proposals)
        self._check()

    # ------------------------------------------------------------------
    # Read side
    # ------------------------------------------------------------------

    @property
    def active(self) -> tuple[ActiveEntry, ...]:
        """Active entries front (index 0) to back."""
        return tuple(self._active)

    @property
    def log(self) -> tuple[ActionRecord, ...]:
        return tuple(self._log)

    def ledger(self) -> MicroActionLedger:
        return self._ledger.snapshot()

    def render(self) -> Rendering:
        return render_entries(self.proposals, self._active, self.catalog)

    def candidates_at(self, p: Point) -> CandidateList:
        """Ordered addable proposals whose mask contains ``p``.

        Pipeline: drop active segments, optional greedy NMS by descending
        score (class-agnostic), order by score or by Mahalanobis distance
        from the click, truncate to ``top_n``.
        """
        col, row = self._pixel(p)
        active_ids = {e.segment_id for e in self._active}
        valid = [
            seg
            for seg in self.proposals
            if seg.id not in active_ids and seg.mask.bitmap()[row, col]
        ]
        if self.config.nms_threshold is not None:
            valid = self._nms(valid, self.config.nms_threshold)
        if self.config.ordering == ORDER_BY_SCORE:
            valid.sort(key=lambda s: (-s.score, s.id))
        else:
            valid.sort(key=lambda s: (masks.mahalanobis(p, self._moments(s)), s.id))
        if self.config.top_n is not None:
            valid = valid[: self.config.top_n]
        return CandidateList(anchor=p, segment_ids=tuple(s.id for s in valid))

    def label_shortlist(self, p: Point) -> list[Label]:
        """Labels of all proposals containing ``p``, best score first, deduplicated."""
        col, row = self._pixel(p)
        best: dict[Label, float] = {}
        for seg in self.proposals:
            if seg.mask.bitmap()[row, col]:
                if seg.label not in best or seg.score > best[seg.label]:
                    best[seg.label] = seg.score
        return [label for label, _ in sorted(best.items(), key=lambda kv: (-kv[1], kv[0].id))]

    # ------------------------------------------------------------------
    # Edit actions
    # ------------------------------------------------------------------

    def apply_add(self, p: Point, chosen_index: int) -> int:
        """Add the candidate at ``chosen_index`` for a click at ``p``; returns cost.

        An empty candidate list still costs the wasted click (ledger +1)
        before NoCandidatesError is raised.
        """
        candidates = self.candidates_at(p)
        if len(candidates) == 0:
            cost = self._ledger.charge("add", clicks=FAILED_CLICK_COST)
            self._log.append(ActionRecord(kind="add", cost=cost, point=(p.x, p.y), failed=True))
            raise NoCandidatesError(f"no candidate segment at ({p.x}, {p.y})")
        if not (0 <= chosen_index < len(candidates)):
            raise InvalidActionError(
                f"chosen_index {chosen_index} outside candidate list of length {len(candidates)}"
            )
        segment_id = candidates.segment_ids[chosen_index]
        segment = self.proposals.get(segment_id)
        self._active.insert(0, ActiveEntry(segment_id=segment_id, label=segment.label))
        cost = self._ledger.charge("add", clicks=2, scrolls=chosen_index)
        self._log.append(
            ActionRecord(
                kind="add",
                cost=cost,
                point=(p.x, p.y),
                segment_id=segment_id,
                chosen_index=chosen_index,
            )
        )
        self._check()
        return cost

    def apply_remove(self, segment_id: str) -> int:
        """Remove an active segment; depth order of the rest is preserved."""
        idx = self._active_index(segment_id)
        del self._active[idx]
        cost = self._ledger.charge("remove", clicks=REMOVE_COST)
        self._log.append(ActionRecord(kind="remove", cost=cost, segment_id=segment_id))
        self._check()
        return cost

    def apply_change_label(self, segment_id: str, new_label: Label, via_shortlist: bool = True) -> int:
        """Relabel an active segment from the shortlist (cost 2) or manually (cost 3)."""
        idx = self._active_index(segment_id)
        if new_label not in self._catalog_set:
            raise UnknownLabelError(f"label {new_label.id!r} not in catalog")
        self._active[idx] = ActiveEntry(segment_id=segment_id, label=new_label)
        if via_shortlist:
            cost = self._ledger.charge("change_label", keypresses=1, menu_selections=1)
        else:
            cost = self._ledger.charge("change_label", keypresses=2, menu_selections=1)
        self._log.append(
            ActionRecord(
                kind="change_label",
                cost=cost,
                segment_id=segment_id,
                label_id=new_label.id,
                via_shortlist=via_shortlist,
            )
        )
        self._check()
        return cost

    def apply_change_depth(self, segment_id: str, shift: int) -> int:
        """Move an active segment by ``shift`` depth steps (negative = frontward).

        The landing index is clamped; cost equals the effective number of
        scroll steps, which may be 0 when fully clamped.
        """
        if shift == 0:
            raise InvalidActionError("depth shift must be non-zero")
        idx = self._active_index(segment_id)
        target = min(max(idx + shift, 0), len(self._active) - 1)
        effective = abs(target - idx)
        entry = self._active.pop(idx)
        self._active.insert(target, entry)
        cost = self._ledger.charge("change_depth", scrolls=effective)
        self._log.append(ActionRecord(kind="change_depth", cost=cost, segment_id=segment_id, shift=shift))
        self._check()
        return cost

    def attach_quality(self, recall: float, pq: float):
        """Stamp quality-after onto the most recent log record."""
        if not self._log:
            raise InvalidActionError("no action recorded yet")
        self._log[-1] = dataclasses.replace(self._log[-1], recall=recall, pq=pq)

    # ------------------------------------------------------------------
    # Internals
    # ------------------------------------------------------------------

    def _pixel(self, p: Point) -> tuple[int, int]:
        col, row = p.pixel()
        if not (0 <= col < self.proposals.canvas.width and 0 <= row < self.proposals.canvas.height):
            raise OutOfBoundsError(f"point ({p.x}, {p.y}) outside canvas {self.proposals.canvas}")
        return col, row

    def _active_index(self, segment_id: str) -> int:
        for i, entry in enumerate(self._active):
            if entry.segment_id == segment_id:
                return i
        raise UnknownSegmentError(f"segment {segment_id!r} is not active")

    def _moments(self, seg: Segment) -> masks.SpatialMoments:
        idx = self.proposals.index_of(seg.id)
        cached = self._moments_cache.get(idx)
        if cached is None:
            cached = masks.moments(seg.mask)
            self._moments_cache[idx] = cached
        return cached

    def _pair_iou(self, a: Segment, b: Segment) -> float:
        i, j = self.proposals.index_of(a.id), self.proposals.index_of(b.id)
        key = (i, j) if i < j else (j, i)
        cached = self._iou_cache.get(key)
        if cached is None:
            cached = masks.iou(a.mask, b.mask)
            self._iou_cache[key] = cached
        return cached

    def _nms(self, valid: list[Segment], threshold: float) -> list[Segment]:
        # Class-agnostic greedy suppression; equal scores keep the lower id first.
        kept: list[Segment] = []
        for seg in sorted(valid, key=lambda s: (-s.score, s.id)):
            if all(self._pair_iou(seg, k) <= threshold for k in kept):
                kept.append(seg)
        return kept

    def _check(self):
        ids = [e.segment_id for e in self._active]
        assert len(ids) == len(set(ids)), "duplicate segment in active set"
        assert all(sid in self.proposals for sid in ids), "active segment outside proposal set"


def new_session(
    proposals: ProposalSet,
    config: SessionConfig,
    catalog: Sequence[Label] | None = None,
) -> AnnotationSession:
    """Create a session; active set auto-initialized or empty per config."""
    return AnnotationSession(proposals, config, catalog)


def replay_log(
    proposals: ProposalSet,
    config: SessionConfig,
    records: Iterable[ActionRecord],
    catalog: Sequence[Label] | None = None,
) -> AnnotationSession:
    """Re-apply a recorded action sequence to a fresh session.

    Candidate retrieval is deterministic, so replaying reproduces the
    ledger and render exactly.
    """
    session = new_session(proposals, config, catalog)
    label_by_id = {label.id: label for label in session.catalog}
    for record in records:
        if record.kind == "add":
            point = Point(record.point[0], record.point[1])
            if record.failed:
                try:
                    session.apply_add(point, 0)
                except NoCandidatesError:
                    continue
                raise InvalidActionError("log expected a failed click but candidates exist")
            session.apply_add(point, record.chosen_index)
        elif record.kind == "remove":
            session.apply_remove(record.segment_id)
        elif record.kind == "change_label":
            session.apply_change_label(
                record.segment_id, label_by_id[record.label_id], via_shortlist=record.via_shortlist
            )
        elif record.kind == "change_depth":
            session.apply_change_depth(record.segment_id, record.shift)
        else:
            raise InvalidActionError(f"unknown action kind {record.kind!r}")
    return session
