"""Keypoint annotation ingestion: COCO-style documents -> canonical instances.

The canonical skeleton has 17 joints (Human3.6M-like order).  ``head_down`` is
the neck joint; ``head_top`` is synthesized from nose and neck for sources that
lack it.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Mapping, NamedTuple, Sequence, Union

import numpy as np

log = logging.getLogger(__name__)


class Visibility(IntEnum):
    ABSENT = 0
    OCCLUDED = 1
    VISIBLE = 2


class AnnotationParseError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class SkeletonSpec:
    name: str
    joint_names: tuple[str, ...]
    left_ankle: int
    right_ankle: int
    head_top: int | None
    head_down: int | None
    flip_pairs: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        j = len(self.joint_names)
        named = [i for i in (self.left_ankle, self.right_ankle, self.head_top, self.head_down) if i is not None]
        if j < 4:
            raise ValueError("skeleton needs at least 4 joints")
        if len(set(named)) != len(named) or not all(0 <= i < j for i in named):
            raise ValueError("ankle/head indices must be distinct and < J")

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    @property
    def ankles(self) -> tuple[int, int]:
        return (self.left_ankle, self.right_ankle)

    def index(self, name: str) -> int:
        return self.joint_names.index(name)


CANONICAL_JOINTS = (
    "pelvis", "right_hip", "right_knee", "right_ankle", "left_hip", "left_knee", "left_ankle",
    "spine", "neck", "nose", "head_top",
    "left_shoulder", "left_elbow", "left_wrist", "right_shoulder", "right_elbow", "right_wrist",
)
CANONICAL = SkeletonSpec(
    "canonical17", CANONICAL_JOINTS,
    left_ankle=6, right_ankle=3, head_top=10, head_down=8,
    flip_pairs=((1, 4), (2, 5), (3, 6), (11, 14), (12, 15), (13, 16)),
)
# stick-figure limbs drawn by the synthetic renderer
CANONICAL_BONES = (
    (0, 1), (1, 2), (2, 3), (0, 4), (4, 5), (5, 6), (0, 7), (7, 8), (8, 9), (9, 10),
    (8, 11), (11, 12), (12, 13), (8, 14), (14, 15), (15, 16),
)

COCO17_JOINTS = (
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
)
# COCO has neither head_top nor neck; both are synthesized on remap
COCO17 = SkeletonSpec("coco17", COCO17_JOINTS, left_ankle=15, right_ankle=16, head_top=None, head_down=None,
                      flip_pairs=((1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12), (13, 14), (15, 16)))

MPII16_JOINTS = (
    "right_ankle", "right_knee", "right_hip", "left_hip", "left_knee", "left_ankle",
    "pelvis", "thorax", "upper_neck", "head_top",
    "right_wrist", "right_elbow", "right_shoulder", "left_shoulder", "left_elbow", "left_wrist",
)
MPII16 = SkeletonSpec("mpii16", MPII16_JOINTS, left_ankle=5, right_ankle=0, head_top=9, head_down=7,
                      flip_pairs=((0, 5), (1, 4), (2, 3), (10, 15), (11, 14), (12, 13)))


class Synth(NamedTuple):
    """Canonical joint computed from already-resolved canonical joints."""
    op: str  # "mid" | "head_top"
    refs: tuple[int, ...]


MappingEntry = Union[int, Synth, None]

# canonical index -> source index | Synth rule.  Rules run in insertion order
# after all direct copies, so a rule may use direct joints or earlier rules.
COCO17_TO_CANONICAL: dict[int, MappingEntry] = {
    1: 12, 2: 14, 3: 16, 4: 11, 5: 13, 6: 15,
    9: 0, 11: 5, 12: 7, 13: 9, 14: 6, 15: 8, 16: 10,
    0: Synth("mid", (1, 4)),
    8: Synth("mid", (11, 14)),
    7: Synth("mid", (0, 8)),
    10: Synth("head_top", (9, 8)),
}
MPII16_TO_CANONICAL: dict[int, MappingEntry] = {
    0: 6, 1: 2, 2: 1, 3: 0, 4: 3, 5: 4, 6: 5, 8: 7, 10: 9,
    11: 13, 12: 14, 13: 15, 14: 12, 15: 11, 16: 10,
    # MPII has no nose; upper_neck is the nearest stand-in
    9: 8,
    7: Synth("mid", (0, 8)),
}
IDENTITY_CANONICAL: dict[int, MappingEntry] = {i: i for i in range(CANONICAL.num_joints)}

SKELETONS = {"canonical17": CANONICAL, "coco17": COCO17, "mpii16": MPII16}
MAPPINGS = {"canonical17": IDENTITY_CANONICAL, "coco17": COCO17_TO_CANONICAL, "mpii16": MPII16_TO_CANONICAL}


@dataclass
class PersonInstance:
    person_id: int
    joints: np.ndarray  # (J, 2) float64, image pixels
    visibility: np.ndarray  # (J,) int8 Visibility codes
    bbox: tuple[float, float, float, float]  # x, y, w, h

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64).reshape(-1, 2)
        self.visibility = np.asarray(self.visibility, dtype=np.int8)
        if self.visibility.shape != (len(self.joints),):
            raise ValueError("joints and visibility lengths differ")
        self.bbox = tuple(float(v) for v in self.bbox)
        if self.bbox[2] <= 0 or self.bbox[3] <= 0:
            raise ValueError(f"person {self.person_id}: degenerate bbox {self.bbox}")

    @property
    def num_joints(self) -> int:
        return len(self.joints)

    def annotated(self, j: int) -> bool:
        return self.visibility[j] != Visibility.ABSENT

    def has_annotated_ankle(self, skeleton: SkeletonSpec = CANONICAL) -> bool:
        return any(self.annotated(j) for j in skeleton.ankles)

    def translated(self, dx: float, dy: float) -> "PersonInstance":
        x, y, w, h = self.bbox
        return PersonInstance(self.person_id, self.joints - np.array([dx, dy]), self.visibility.copy(),
                              (x - dx, y - dy, w, h))

    def to_record(self) -> dict:
        return {
            "person_id": int(self.person_id),
            "joints": [[float(x), float(y)] for x, y in self.joints],
            "visibility": [int(v) for v in self.visibility],
            "bbox": [float(v) for v in self.bbox],
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "PersonInstance":
        return cls(int(rec["person_id"]), np.array(rec["joints"], dtype=np.float64).reshape(-1, 2),
                   np.array(rec["visibility"], dtype=np.int8), tuple(rec["bbox"]))

    def __eq__(self, other):
        if not isinstance(other, PersonInstance):
            return NotImplemented
        return (self.person_id == other.person_id and self.bbox == other.bbox
                and np.array_equal(self.joints, other.joints) and np.array_equal(self.visibility, other.visibility))


@dataclass
class ImageAnnotation:
    image_id: int
    width: int
    height: int
    file_name: str
    persons: list[PersonInstance] = field(default_factory=list)

    def to_record(self) -> dict:
        return {
            "image_id": int(self.image_id),
            "file_name": self.file_name,
            "width": int(self.width),
            "height": int(self.height),
            "persons": [p.to_record() for p in self.persons],
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "ImageAnnotation":
        return cls(int(rec["image_id"]), int(rec["width"]), int(rec["height"]), str(rec["file_name"]),
                   [PersonInstance.from_record(p) for p in rec["persons"]])


class Rejection(NamedTuple):
    annotation_id: object
    reason: str


def _byte_offset(text: str, char_pos: int) -> int:
    return len(text[:char_pos].encode("utf-8"))


def parse_annotation_doc(data: bytes | str, source_skeleton: SkeletonSpec) -> tuple[list[ImageAnnotation], list[Rejection]]:
    """Parse a COCO-keypoints document into per-image annotations.

    Bad annotations (wrong keypoint count, unknown image, degenerate bbox,
    visible point outside the image) are skipped and returned as rejections.
    Images come back sorted by ``image_id``; persons keep document order.
    """
    text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise AnnotationParseError(exc.msg, _byte_offset(text, exc.pos)) from None
    if not isinstance(doc, dict) or "images" not in doc or "annotations" not in doc:
        raise AnnotationParseError('expected an object with "images" and "annotations"', 0)

    images: dict[int, ImageAnnotation] = {}
    for im in doc["images"]:
        try:
            img = ImageAnnotation(int(im["image_id"] if "image_id" in im else im["id"]), int(im["width"]),
                                  int(im["height"]), str(im.get("file_name", "")))
        except (KeyError, TypeError, ValueError) as exc:
            raise AnnotationParseError(f"bad image entry {im!r}: {exc}", 0) from None
        if img.width <= 0 or img.height <= 0:
            raise AnnotationParseError(f"image {img.image_id} has non-positive size", 0)
        images[img.image_id] = img

    rejected: list[Rejection] = []
    nj = source_skeleton.num_joints
    for ann in doc["annotations"]:
        aid = ann.get("annotation_id", ann.get("id"))
        img = images.get(ann.get("image_id"))
        if img is None:
            rejected.append(Rejection(aid, f"unknown image_id {ann.get('image_id')}"))
            continue
        kps = ann.get("keypoints", [])
        if len(kps) != 3 * nj:
            rejected.append(Rejection(aid, f"keypoints length {len(kps)} != 3*{nj}"))
            continue
        trip = np.asarray(kps, dtype=np.float64).reshape(nj, 3)
        vis = trip[:, 2].astype(np.int8)
        if np.any((vis < 0) | (vis > 2)):
            rejected.append(Rejection(aid, "visibility flag outside {0,1,2}"))
            continue
        joints = np.where(vis[:, None] > 0, trip[:, :2], 0.0)
        shown = joints[vis == Visibility.VISIBLE]
        if np.any((shown < 0) | (shown[:, 0] > img.width)[:, None] | (shown[:, 1] > img.height)[:, None]):
            rejected.append(Rejection(aid, "visible keypoint outside image"))
            continue
        try:
            person = PersonInstance(int(aid) if aid is not None else len(img.persons), joints, vis,
                                    tuple(ann.get("bbox", (0, 0, 0, 0))))
        except ValueError as exc:
            rejected.append(Rejection(aid, str(exc)))
            continue
        img.persons.append(person)
    for r in rejected:
        log.warning("annotation %s rejected: %s", r.annotation_id, r.reason)
    return [images[k] for k in sorted(images)], rejected


def remap_skeleton(p: PersonInstance, mapping: Mapping[int, MappingEntry],
                   canonical: SkeletonSpec = CANONICAL) -> PersonInstance:
    """Re-express ``p`` in canonical joint order.

    Synthesized joints are flagged occluded (absent if any input is absent).
    Raises ValueError when the mapping cannot produce the ankle joints.
    """
    j = canonical.num_joints
    for a in canonical.ankles:
        if mapping.get(a) is None:
            raise ValueError(f"person {p.person_id}: ankle joint {canonical.joint_names[a]} is unmappable")
    joints = np.zeros((j, 2))
    vis = np.zeros(j, dtype=np.int8)
    synth = [(ci, src) for ci, src in mapping.items() if isinstance(src, Synth)]
    for ci, src in mapping.items():
        if src is not None and not isinstance(src, Synth):
            joints[ci] = p.joints[src]
            vis[ci] = p.visibility[src]
    for ci, rule in synth:
        if any(vis[r] == Visibility.ABSENT for r in rule.refs):
            continue
        if rule.op == "mid":
            joints[ci] = np.mean(joints[list(rule.refs)], axis=0)
        elif rule.op == "head_top":
            nose, neck = joints[rule.refs[0]], joints[rule.refs[1]]
            joints[ci] = nose + 0.5 * (nose - neck)
        else:
            raise ValueError(f"unknown synthesis op {rule.op!r}")
        vis[ci] = Visibility.OCCLUDED
    return PersonInstance(p.person_id, joints, vis, p.bbox)


def filter_eligible(images: Iterable[ImageAnnotation], skeleton: SkeletonSpec = CANONICAL) -> list[ImageAnnotation]:
    """Keep images with >= 2 persons that each have an annotated ankle."""
    out = []
    for img in images:
        persons = [p for p in img.persons if p.has_annotated_ankle(skeleton)]
        if len(persons) >= 2:
            out.append(ImageAnnotation(img.image_id, img.width, img.height, img.file_name, persons))
    return out


def ingest(data: bytes | str, source: str = "coco17") -> tuple[list[ImageAnnotation], list[Rejection]]:
    """Parse, remap to the canonical skeleton, and apply the eligibility filter."""
    images, rejected = parse_annotation_doc(data, SKELETONS[source])
    mapping = MAPPINGS[source]
    for img in images:
        img.persons = [remap_skeleton(p, mapping) for p in img.persons]
    return filter_eligible(images), rejected


# ---------------------------------------------------------------------------
# canonical manifest: JSON lines, one image per line


def dump_manifest(images: Sequence[ImageAnnotation]) -> str:
    return "".join(json.dumps(img.to_record(), separators=(",", ":")) + "\n" for img in images)


def load_manifest(text: str) -> list[ImageAnnotation]:
    out = []
    offset = 0
    for lineno, line in enumerate(text.splitlines(keepends=True), 1):
        if line.strip():
            try:
                out.append(ImageAnnotation.from_record(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise AnnotationParseError(f"manifest line {lineno}: {exc}", offset) from None
        offset += len(line.encode("utf-8"))
    return out
