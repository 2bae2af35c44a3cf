"""Dataset and artifact persistence.

Manifests are single UTF-8 JSON documents with masks embedded in the RLE
text form, so fixtures stay human-inspectable and diffable. Annotation
files record the active set, ledger, and the append-only action log that
makes a session replayable.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .engine import (
    ActionRecord,
    ActiveEntry,
    AnnotationSession,
    MicroActionLedger,
    ProposalSet,
    Segment,
    SessionConfig,
)
from .errors import (
    CorruptMaskError,
    ManifestError,
    SchemaError,
    UnknownLabelError,
    VersionError,
)
from .labels import KINDS, Label
from .masks import Canvas, Mask
from .metrics import GroundTruthImage
from .rngstream import derive_seed
from .synth import NoiseConfig, random_ground_truth, synthesize

ANNOTATION_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    canvas: Canvas
    gt: GroundTruthImage | None
    proposals: ProposalSet | None = None
    display: str | None = None


class DatasetManifest:
    """Label catalog plus per-image ground truth and optional proposals."""

    def __init__(self, catalog, images):
        self.catalog: tuple[Label, ...] = tuple(catalog)
        self.images: tuple[ImageRecord, ...] = tuple(images)
        self.by_id = {}
        catalog_set = set(self.catalog)
        for image in self.images:
            if image.image_id in self.by_id:
                raise SchemaError("duplicate image id", location=image.image_id)
            self.by_id[image.image_id] = image
            if image.gt is not None:
                for target in image.gt.targets:
                    if target.label not in catalog_set:
                        raise UnknownLabelError(
                            f"ground-truth label {target.label.id!r} missing from catalog (image {image.image_id})"
                        )

    def __len__(self):
        return len(self.images)


def _require(condition, message, location):
    if not condition:
        raise SchemaError(message, location=location)


def _parse_mask(rle, canvas, location):
    try:
        mask = Mask.from_rle_text(rle)
    except CorruptMaskError as exc:
        raise CorruptMaskError(f"{exc} (at {location})") from exc
    if mask.canvas != canvas:
        raise CorruptMaskError(f"mask canvas {mask.canvas} does not match image canvas {canvas} (at {location})")
    return mask


def manifest_from_json(data: dict, location: str = "<memory>") -> DatasetManifest:
    _require(isinstance(data, dict), "manifest must be a JSON object", location)
    _require(isinstance(data.get("catalog"), list), "missing catalog list", location)
    _require(isinstance(data.get("images"), list), "missing images list", location)
    catalog = []
    for i, entry in enumerate(data["catalog"]):
        where = f"{location}:catalog[{i}]"
        _require(isinstance(entry, dict) and "id" in entry and "kind" in entry, "catalog entry needs id and kind", where)
        _require(entry["kind"] in KINDS, f"kind must be one of {KINDS}", where)
        catalog.append(Label(entry["id"], entry["kind"]))
    label_by_id = {label.id: label for label in catalog}

    images = []
    for i, entry in enumerate(data["images"]):
        where = f"{location}:images[{i}]"
        _require(isinstance(entry, dict), "image entry must be an object", where)
        for key in ("id", "width", "height"):
            _require(key in entry, f"image entry needs {key!r}", where)
        image_id = entry["id"]
        where = f"{location}:image {image_id!r}"
        canvas = Canvas(int(entry["width"]), int(entry["height"]))

        gt = None
        if entry.get("gt") is not None:
            _require(isinstance(entry["gt"], list), "gt must be a list", where)
            things, stuff = [], []
            for j, region in enumerate(entry["gt"]):
                rwhere = f"{where}:gt[{j}]"
                _require(isinstance(region, dict) and "label" in region and "rle" in region, "gt entry needs label and rle", rwhere)
                label = label_by_id.get(region["label"])
                if label is None:
                    raise UnknownLabelError(f"ground-truth label {region['label']!r} not in catalog (at {rwhere})")
                mask = _parse_mask(region["rle"], canvas, rwhere)
                (things if label.is_thing else stuff).append((mask, label))
            gt = GroundTruthImage(canvas, thing_instances=things, stuff_regions=stuff)

        proposals = None
        if entry.get("proposals") is not None:
            _require(isinstance(entry["proposals"], list), "proposals must be a list", where)
            segments = []
            for j, prop in enumerate(entry["proposals"]):
                pwhere = f"{where}:proposals[{j}]"
                for key in ("id", "label", "score", "rle"):
                    _require(key in prop, f"proposal needs {key!r}", pwhere)
                label = label_by_id.get(prop["label"])
                if label is None:
                    raise UnknownLabelError(f"proposal label {prop['label']!r} not in catalog (at {pwhere})")
                mask = _parse_mask(prop["rle"], canvas, pwhere)
                segments.append(Segment(id=prop["id"], mask=mask, label=label, score=float(prop["score"])))
            proposals = ProposalSet(canvas, segments)

        images.append(
            ImageRecord(
                image_id=image_id,
                canvas=canvas,
                gt=gt,
                proposals=proposals,
                display=entry.get("display"),
            )
        )
    return DatasetManifest(catalog, images)


def manifest_to_json(manifest: DatasetManifest) -> dict:
    images = []
    for image in manifest.images:
        entry = {
            "id": image.image_id,
            "width": image.canvas.width,
            "height": image.canvas.height,
        }
        if image.display is not None:
            entry["display"] = image.display
        if image.gt is not None:
            regions = [
                {"label": label.id, "rle": mask.to_rle_text()} for mask, label in image.gt.thing_instances
            ]
            regions += [
                {"label": label.id, "rle": mask.to_rle_text()} for mask, label in image.gt.stuff_regions
            ]
            entry["gt"] = regions
        if image.proposals is not None:
            entry["proposals"] = [
                {"id": seg.id, "label": seg.label.id, "score": seg.score, "rle": seg.mask.to_rle_text()}
                for seg in image.proposals
            ]
        images.append(entry)
    return {
        "catalog": [{"id": label.id, "kind": label.kind} for label in manifest.catalog],
        "images": images,
    }


def load_manifest(path) -> DatasetManifest:
    if not os.path.exists(path):
        raise ManifestError("manifest file not found", location=str(path))
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"invalid JSON: {exc}", location=str(path)) from exc
    return manifest_from_json(data, location=str(path))


def save_manifest(manifest: DatasetManifest, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest_to_json(manifest), fh)
        fh.write("\n")


# ----------------------------------------------------------------------
# Annotation files
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class AnnotationFile:
    version: int
    image_id: str
    active: tuple[tuple[str, str], ...]  # (segment_id, label_id) front-to-back
    ledger: MicroActionLedger
    log: tuple[ActionRecord, ...]


def annotation_to_json(session: AnnotationSession, image_id: str) -> dict:
    return {
        "version": ANNOTATION_FORMAT_VERSION,
        "image_id": image_id,
        "active": [{"segment_id": e.segment_id, "label": e.label.id} for e in session.active],
        "ledger": session.ledger().to_json(),
        "log": [record.to_json() for record in session.log],
    }


def save_annotation(session: AnnotationSession, image_id: str, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(annotation_to_json(session, image_id), fh)
        fh.write("\n")


def annotation_from_json(data: dict, location: str = "<memory>") -> AnnotationFile:
    _require(isinstance(data, dict), "annotation must be a JSON object", location)
    version = data.get("version")
    if version != ANNOTATION_FORMAT_VERSION:
        raise VersionError(
            f"unsupported annotation format version {version!r} (expected {ANNOTATION_FORMAT_VERSION})",
            location=location,
        )
    for key in ("image_id", "active", "ledger", "log"):
        _require(key in data, f"annotation needs {key!r}", location)
    active = tuple((entry["segment_id"], entry["label"]) for entry in data["active"])
    ledger = MicroActionLedger.from_json(data["ledger"])
    log = tuple(ActionRecord.from_json(entry) for entry in data["log"])
    return AnnotationFile(
        version=version, image_id=data["image_id"], active=active, ledger=ledger, log=log
    )


def load_annotation(path) -> AnnotationFile:
    if not os.path.exists(path):
        raise ManifestError("annotation file not found", location=str(path))
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"invalid JSON: {exc}", location=str(path)) from exc
    return annotation_from_json(data, location=str(path))


def entries_from_annotation(record: AnnotationFile, catalog) -> list[ActiveEntry]:
    label_by_id = {label.id: label for label in catalog}
    entries = []
    for segment_id, label_id in record.active:
        label = label_by_id.get(label_id)
        if label is None:
            raise UnknownLabelError(f"annotation label {label_id!r} not in catalog")
        entries.append(ActiveEntry(segment_id=segment_id, label=label))
    return entries


# ----------------------------------------------------------------------
# Splits and run configuration
# ----------------------------------------------------------------------


def split(manifest: DatasetManifest, exploration_count: int, seed: int):
    """Deterministic disjoint exhaustive split into (exploration, hold-out)."""
    n = len(manifest.images)
    if not (0 <= exploration_count <= n):
        raise ValueError(f"exploration_count {exploration_count} outside [0, {n}]")
    order = np.random.default_rng(seed).permutation(n)
    chosen = set(int(i) for i in order[:exploration_count])
    exploration = [img for i, img in enumerate(manifest.images) if i in chosen]
    holdout = [img for i, img in enumerate(manifest.images) if i not in chosen]
    return (
        DatasetManifest(manifest.catalog, exploration),
        DatasetManifest(manifest.catalog, holdout),
    )


@dataclass(frozen=True)
class RunConfig:
    """Everything a simulation run depends on, for reproducibility."""

    session: SessionConfig
    budget: int
    seed: int
    noise: NoiseConfig | None = None
    exploration_count: int | None = None

    def to_json(self) -> dict:
        return {
            "session": self.session.to_json(),
            "budget": self.budget,
            "seed": self.seed,
            "noise": self.noise.to_json() if self.noise is not None else None,
            "exploration_count": self.exploration_count,
        }

    @classmethod
    def from_json(cls, data: dict) -> "RunConfig":
        return cls(
            session=SessionConfig.from_json(data["session"]),
            budget=int(data["budget"]),
            seed=int(data["seed"]),
            noise=NoiseConfig.from_json(data["noise"]) if data.get("noise") else None,
            exploration_count=data.get("exploration_count"),
        )

    def fingerprint(self) -> str:
        import hashlib

        payload = json.dumps(self.to_json(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()[:16]


# ----------------------------------------------------------------------
# Synthetic dataset assembly
# ----------------------------------------------------------------------


def build_synthetic_manifest(
    n_images: int,
    canvas: Canvas,
    seed: int,
    catalog=None,
    noise: NoiseConfig | None = None,
) -> DatasetManifest:
    """Random ground-truth scenes, with proposals attached when noise is given."""
    from .synth import default_catalog

    if catalog is None:
        catalog = default_catalog()
    images = []
    for i in range(n_images):
        image_id = f"img{i:03d}"
        gt = random_ground_truth(canvas, derive_seed(seed, image_id, "gt"), catalog=catalog)
        proposals = None
        if noise is not None:
            proposals = synthesize(gt, noise, derive_seed(seed, image_id, "proposals"), catalog=catalog)
        images.append(ImageRecord(image_id=image_id, canvas=canvas, gt=gt, proposals=proposals))
    return DatasetManifest(catalog, images)


def attach_proposals(manifest: DatasetManifest, noise: NoiseConfig, seed: int) -> DatasetManifest:
    """New manifest with synthesized proposals for every image that has ground truth."""
    images = []
    for image in manifest.images:
        proposals = image.proposals
        if image.gt is not None:
            proposals = synthesize(
                image.gt, noise, derive_seed(seed, image.image_id, "proposals"), catalog=list(manifest.catalog)
            )
        images.append(
            ImageRecord(
                image_id=image.image_id,
                canvas=image.canvas,
                gt=image.gt,
                proposals=proposals,
                display=image.display,
            )
        )
    return DatasetManifest(manifest.catalog, images)
