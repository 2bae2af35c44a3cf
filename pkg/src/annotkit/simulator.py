"""Deterministic simulated annotator.

Each step builds a pool of candidate edit actions (per active segment:
remove, the closest quality-improving reordering, relabel to the best
overlapping ground-truth class; per unmatched target: an add probed by a
simulated click), then executes the candidate with the largest panoptic
quality gain. Mouse positions are drawn from the target segment's pixel
Gaussian with rejection resampling.

One image simulates strictly sequentially; different images may run in
parallel on independent derived RNG streams.
"""
from __future__ import annotations

import weakref
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .engine import (
    ADD_BASE_COST,
    REMOVE_COST,
    RELABEL_MANUAL_COST,
    RELABEL_SHORTLIST_COST,
    ActiveEntry,
    AnnotationSession,
    ProposalSet,
    SessionConfig,
    new_session,
)
from .errors import EmptyMaskError
from .labels import Label
from .masks import Mask, Point, moments
from .metrics import GroundTruthImage, GroundTruthIndex, QualityReport
from .rngstream import generator

KIND_RANK = {"add": 0, "remove": 1, "change_label": 2, "change_depth": 3}

CLICK_RESAMPLE_CAP = 100


@dataclass(frozen=True)
class SimRng:
    """Seed plus per-(image, step) stream derivation; same inputs, same trace."""

    seed: int

    def for_step(self, image_id: str, step_index: int) -> np.random.Generator:
        return generator(self.seed, image_id, "step", step_index)


@dataclass(frozen=True)
class CandidateAction:
    kind: str
    target_id: str
    predicted_quality_delta: float
    predicted_cost: int
    point: Point | None = None
    chosen_index: int | None = None
    segment_id: str | None = None
    new_label: Label | None = None
    via_shortlist: bool | None = None
    shift: int | None = None


@dataclass(frozen=True)
class TraceStep:
    index: int
    kind: str
    target_id: str
    cost: int
    cum_cost: int
    recall: float
    pq: float


@dataclass(frozen=True)
class ActionTrace:
    image_id: str
    setting: str
    seed: int
    budget: int
    initial_recall: float
    initial_pq: float
    steps: tuple[TraceStep, ...]
    terminal_reason: str

    @property
    def final_recall(self) -> float:
        return self.steps[-1].recall if self.steps else self.initial_recall

    @property
    def final_pq(self) -> float:
        return self.steps[-1].pq if self.steps else self.initial_pq

    @property
    def total_cost(self) -> int:
        return self.steps[-1].cum_cost if self.steps else 0


def sample_click(mask: Mask, rng: np.random.Generator) -> Point:
    """Draw a click from the mask's pixel Gaussian, resampling until it
    lands on the mask (cap 100 draws, then a uniform set pixel)."""
    if mask.is_empty:
        raise EmptyMaskError("cannot click an empty mask")
    m = moments(mask)
    chol = np.linalg.cholesky(m.covariance)
    bitmap = mask.bitmap()
    w, h = mask.canvas.width, mask.canvas.height
    for _ in range(CLICK_RESAMPLE_CAP):
        offset = chol @ rng.standard_normal(2)
        x = m.center.x + offset[0]
        y = m.center.y + offset[1]
        col, row = int(np.floor(x)), int(np.floor(y))
        if 0 <= col < w and 0 <= row < h and bitmap[row, col]:
            return Point(float(x), float(y))
    flat = mask.flat_indices()
    pick = int(flat[int(rng.integers(len(flat)))])
    return Point(pick % w + 0.5, pick // w + 0.5)


class _EvalContext:
    """Per-(proposal set, ground truth) caches for fast trial scoring."""

    def __init__(self, proposals: ProposalSet, gt: GroundTruthImage):
        self.proposals = proposals
        self.gt_index = GroundTruthIndex(gt)
        self.npix = proposals.canvas.pixel_count
        self._flat = {seg.id: seg.mask.flat_indices() for seg in proposals}
        self._best_target_cache: dict[str, int | None] = {}
        self._overlap_cache: dict[tuple[str, str], bool] = {}
        self._buf = np.empty(self.npix, dtype=np.int32)
        self._base_buf = np.empty(self.npix, dtype=np.int32)

    def _paint(self, sids: Sequence[str], into: np.ndarray | None = None) -> np.ndarray:
        code_map = self._buf if into is None else into
        code_map.fill(-1)
        for code in range(len(sids) - 1, -1, -1):
            code_map[self._flat[sids[code]]] = code
        return code_map

    def entry_codes(self, entries: Sequence[ActiveEntry]) -> list[int]:
        code_for = self.gt_index.code_for
        return [code_for(e.label) for e in entries]

    def pq_sids(self, sids: Sequence[str], codes: Sequence[int]) -> float:
        return self.gt_index.pq_value(self._paint(sids), np.asarray(codes, dtype=np.int64))

    def report(self, entries: Sequence[ActiveEntry]) -> QualityReport:
        return self.gt_index.score_code_map(
            self._paint([e.segment_id for e in entries]), [e.label for e in entries]
        )

    def overlaps(self, sid_a: str, sid_b: str) -> bool:
        key = (sid_a, sid_b) if sid_a < sid_b else (sid_b, sid_a)
        cached = self._overlap_cache.get(key)
        if cached is None:
            bitmap = self.proposals.get(key[0]).mask.bitmap().ravel()
            cached = bool(bitmap[self._flat[key[1]]].any())
            self._overlap_cache[key] = cached
        return cached

    def best_target_index(self, segment_id: str) -> int | None:
        """Index of the max-IoU ground-truth target, or None without overlap."""
        if segment_id in self._best_target_cache:
            return self._best_target_cache[segment_id]
        mask = self.proposals.get(segment_id).mask
        bitmap = mask.bitmap().ravel()
        best = None
        best_iou = 0.0
        for t, target in enumerate(self.gt_index.targets):
            inter = int(np.count_nonzero(bitmap[target.mask.flat_indices()]))
            if inter == 0:
                continue
            value = inter / (mask.area + target.mask.area - inter)
            if value > best_iou:
                best_iou = value
                best = t
        self._best_target_cache[segment_id] = best
        return best


_context_cache: "weakref.WeakKeyDictionary[AnnotationSession, tuple[int, _EvalContext]]" = (
    weakref.WeakKeyDictionary()
)


def _context_for(session: AnnotationSession, gt: GroundTruthImage) -> _EvalContext:
    cached = _context_cache.get(session)
    if cached is not None and cached[0] == id(gt):
        return cached[1]
    ctx = _EvalContext(session.proposals, gt)
    _context_cache[session] = (id(gt), ctx)
    return ctx


def build_candidate_pool(
    session: AnnotationSession,
    gt: GroundTruthImage,
    rng: np.random.Generator,
    _ctx: _EvalContext | None = None,
    _base: QualityReport | None = None,
) -> list[CandidateAction]:
    """Candidate actions for the current state, with trial-applied quality deltas."""
    ctx = _ctx or _context_for(session, gt)
    entries = list(session.active)
    base = _base or ctx.report(entries)
    base_pq = base.panoptic_quality
    sids = [e.segment_id for e in entries]
    codes = ctx.entry_codes(entries)
    base_flat = ctx._paint(sids, into=ctx._base_buf)
    visible = ctx.gt_index.visible_counts(base_flat, len(entries))
    pool: list[CandidateAction] = []
    n = len(entries)

    for i, entry in enumerate(entries):
        # A fully occluded entry paints nothing, so removing or relabeling
        # it leaves the render untouched (delta exactly 0); only a depth
        # move can surface it.
        entry_visible = visible[i] > 0

        if entry_visible:
            delta = ctx.pq_sids(sids[:i] + sids[i + 1 :], codes[:i] + codes[i + 1 :]) - base_pq
            pool.append(
                CandidateAction(
                    kind="remove",
                    target_id=entry.segment_id,
                    segment_id=entry.segment_id,
                    predicted_cost=REMOVE_COST,
                    predicted_quality_delta=delta,
                )
            )

        # Closest improving reordering: magnitudes outward, frontward
        # first. Passing a disjoint entry leaves the render bit-identical
        # to the previous magnitude, so only actual crossings are scored.
        found = None
        for magnitude in range(1, n):
            for shift in (-magnitude, magnitude):
                j = i + shift
                if not (0 <= j < n):
                    continue
                if not ctx.overlaps(entry.segment_id, sids[j]):
                    continue
                trial_sids = sids.copy()
                trial_sids.insert(j, trial_sids.pop(i))
                trial_codes = codes.copy()
                trial_codes.insert(j, trial_codes.pop(i))
                delta = ctx.pq_sids(trial_sids, trial_codes) - base_pq
                if delta > 0.0:
                    found = (shift, magnitude, delta)
                    break
            if found:
                break
        if found:
            shift, magnitude, delta = found
            pool.append(
                CandidateAction(
                    kind="change_depth",
                    target_id=entry.segment_id,
                    segment_id=entry.segment_id,
                    shift=shift,
                    predicted_cost=magnitude,
                    predicted_quality_delta=delta,
                )
            )

        t = ctx.best_target_index(entry.segment_id) if entry_visible else None
        if t is not None:
            target = ctx.gt_index.targets[t]
            # Relabeling to the current label can never improve; skip it
            # (and spare the hover-position draw).
            if target.label != entry.label:
                hover = sample_click(session.proposals.get(entry.segment_id).mask, rng)
                shortlist = session.label_shortlist(hover)
                via_shortlist = target.label in shortlist
                trial_codes = codes.copy()
                trial_codes[i] = ctx.gt_index.code_for(target.label)
                # The raster is label-independent; rescore the base map.
                delta = (
                    ctx.gt_index.pq_value(base_flat, np.asarray(trial_codes, dtype=np.int64)) - base_pq
                )
                pool.append(
                    CandidateAction(
                        kind="change_label",
                        target_id=entry.segment_id,
                        segment_id=entry.segment_id,
                        new_label=target.label,
                        via_shortlist=via_shortlist,
                        predicted_cost=RELABEL_SHORTLIST_COST if via_shortlist else RELABEL_MANUAL_COST,
                        predicted_quality_delta=delta,
                    )
                )

    matched = base.matched_target_ids
    for target in ctx.gt_index.targets:
        if target.target_id in matched:
            continue
        click = sample_click(target.mask, rng)
        candidates = session.candidates_at(click)
        for index, segment_id in enumerate(candidates.segment_ids):
            proposal = session.proposals.get(segment_id)
            # Front insertion shifts every owner code up by one and paints
            # the candidate as code 0; cheaper than a full repaint.
            trial_flat = base_flat + (base_flat >= 0)
            trial_flat[ctx._flat[segment_id]] = 0
            trial_codes = np.empty(len(codes) + 1, dtype=np.int64)
            trial_codes[0] = ctx.gt_index.code_for(proposal.label)
            trial_codes[1:] = codes
            delta = ctx.gt_index.pq_value(trial_flat, trial_codes) - base_pq
            if delta > 0.0:
                pool.append(
                    CandidateAction(
                        kind="add",
                        target_id=target.target_id,
                        point=click,
                        chosen_index=index,
                        segment_id=segment_id,
                        predicted_cost=ADD_BASE_COST + index,
                        predicted_quality_delta=delta,
                    )
                )
                break

    return pool


def choose_action(
    session: AnnotationSession,
    gt: GroundTruthImage,
    rng: np.random.Generator,
    _ctx: _EvalContext | None = None,
    _base: QualityReport | None = None,
) -> CandidateAction | None:
    """Highest-gain candidate with a strictly positive delta, or None."""
    pool = build_candidate_pool(session, gt, rng, _ctx=_ctx, _base=_base)
    positive = [c for c in pool if c.predicted_quality_delta > 0.0]
    if not positive:
        return None
    positive.sort(
        key=lambda c: (-c.predicted_quality_delta, c.predicted_cost, KIND_RANK[c.kind], c.target_id)
    )
    return positive[0]


def execute_action(session: AnnotationSession, action: CandidateAction) -> int:
    if action.kind == "add":
        cost = session.apply_add(action.point, action.chosen_index)
    elif action.kind == "remove":
        cost = session.apply_remove(action.segment_id)
    elif action.kind == "change_label":
        cost = session.apply_change_label(action.segment_id, action.new_label, action.via_shortlist)
    elif action.kind == "change_depth":
        cost = session.apply_change_depth(action.segment_id, action.shift)
    else:
        raise ValueError(f"unknown candidate kind {action.kind!r}")
    assert cost == action.predicted_cost, "executed cost diverged from prediction"
    return cost


def step(
    session: AnnotationSession, gt: GroundTruthImage, rng: np.random.Generator
) -> CandidateAction | None:
    """Execute the best improving candidate; None means no improvement exists."""
    chosen = choose_action(session, gt, rng)
    if chosen is None:
        return None
    execute_action(session, chosen)
    return chosen


def simulate_session(
    proposals: ProposalSet,
    gt: GroundTruthImage,
    config: SessionConfig,
    budget: int,
    seed: int,
    image_id: str = "img",
    catalog: Sequence[Label] | None = None,
) -> tuple[ActionTrace, AnnotationSession]:
    """Run the greedy annotator until no action improves quality or the next
    action would blow the budget. Returns the trace and the final session."""
    if budget < 0:
        raise ValueError(f"budget must be >= 0, got {budget}")
    if proposals.canvas != gt.canvas:
        raise ValueError(f"proposals on {proposals.canvas}, ground truth on {gt.canvas}")
    if catalog is None:
        catalog = list(proposals.labels())
        seen = set(catalog)
        for label in gt.labels():
            if label not in seen:
                seen.add(label)
                catalog.append(label)
    session = new_session(proposals, config, catalog)
    ctx = _context_for(session, gt)
    quality = ctx.report(session.active)
    initial_recall, initial_pq = quality.recall, quality.panoptic_quality
    steps: list[TraceStep] = []
    cum_cost = 0
    step_index = 0
    sim_rng = SimRng(seed)
    while True:
        rng = sim_rng.for_step(image_id, step_index)
        chosen = choose_action(session, gt, rng, _ctx=ctx, _base=quality)
        if chosen is None:
            terminal = "no-improvement"
            break
        if cum_cost + chosen.predicted_cost > budget:
            terminal = "budget-exhausted"
            break
        cost = execute_action(session, chosen)
        after = ctx.report(session.active)
        assert after.panoptic_quality > quality.panoptic_quality, "executed action did not improve quality"
        quality = after
        cum_cost += cost
        session.attach_quality(after.recall, after.panoptic_quality)
        steps.append(
            TraceStep(
                index=step_index,
                kind=chosen.kind,
                target_id=chosen.target_id,
                cost=cost,
                cum_cost=cum_cost,
                recall=after.recall,
                pq=after.panoptic_quality,
            )
        )
        step_index += 1
    trace = ActionTrace(
        image_id=image_id,
        setting=config.setting_string(),
        seed=seed,
        budget=budget,
        initial_recall=initial_recall,
        initial_pq=initial_pq,
        steps=tuple(steps),
        terminal_reason=terminal,
    )
    return trace, session


def simulate_image(
    proposals: ProposalSet,
    gt: GroundTruthImage,
    config: SessionConfig,
    budget: int,
    seed: int,
    image_id: str = "img",
    catalog: Sequence[Label] | None = None,
) -> ActionTrace:
    trace, _ = simulate_session(proposals, gt, config, budget, seed, image_id, catalog)
    return trace


_worker_state: dict = {}


def _init_pool_worker(images, config, budget, seed, catalog):
    _worker_state["args"] = (images, config, budget, seed, catalog)


def _run_pool_image(index: int) -> ActionTrace:
    images, config, budget, seed, catalog = _worker_state["args"]
    image_id, proposals, gt = images[index]
    return simulate_image(proposals, gt, config, budget, seed, image_id, catalog)


def simulate_dataset(
    images: Sequence[tuple[str, ProposalSet, GroundTruthImage]],
    config: SessionConfig,
    budget: int,
    seed: int,
    catalog: Sequence[Label] | None = None,
    jobs: int = 1,
) -> list[ActionTrace]:
    """Simulate every image; output order follows the input regardless of
    scheduling, so results are identical for any ``jobs``."""
    images = list(images)
    if jobs <= 1 or len(images) <= 1:
        return [
            simulate_image(proposals, gt, config, budget, seed, image_id, catalog)
            for image_id, proposals, gt in images
        ]
    import multiprocessing

    ctx = multiprocessing.get_context("fork")
    with ctx.Pool(
        processes=min(jobs, len(images)),
        initializer=_init_pool_worker,
        initargs=(images, config, budget, seed, catalog),
    ) as pool:
        return pool.map(_run_pool_image, range(len(images)))


def trace_lines(trace: ActionTrace) -> list[str]:
    """Line-delimited trace: preamble, header, one row per step."""
    lines = [
        f"# setting={trace.setting} seed={trace.seed} image={trace.image_id} budget={trace.budget}"
        f" initial_recall={trace.initial_recall:.6f} initial_pq={trace.initial_pq:.6f}"
        f" terminal={trace.terminal_reason}",
        "step,kind,cost,cum_cost,recall,pq",
    ]
    for s in trace.steps:
        lines.append(f"{s.index},{s.kind},{s.cost},{s.cum_cost},{s.recall:.6f},{s.pq:.6f}")
    return lines


def write_trace(trace: ActionTrace, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(trace_lines(trace)) + "\n")
