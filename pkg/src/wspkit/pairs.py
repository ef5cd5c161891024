"""Two-person pair samples with perspective-derived relative-depth labels."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from itertools import combinations
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage

from .anno import CANONICAL, ImageAnnotation, PersonInstance, SkeletonSpec, Visibility

DELTA_S_THRESHOLDS = (1.0, 0.5, 0.3, 0.1)
ANKLE_MASK_FRACTION = 0.15


class MissingJointError(ValueError):
    pass


@dataclass(frozen=True)
class PairBuildConfig:
    crop_padding_ratio: float = 0.2
    pairs_per_image: int = 1
    rng_seed: int = 0
    tie_epsilon: float = 0.0

    def __post_init__(self):
        if self.crop_padding_ratio < 0:
            raise ValueError("crop_padding_ratio must be >= 0")
        if self.pairs_per_image < 1:
            raise ValueError("pairs_per_image must be >= 1")
        if self.tie_epsilon < 0:
            raise ValueError("tie_epsilon must be >= 0")


def ankle_anchor(p: PersonInstance, skeleton: SkeletonSpec = CANONICAL) -> float:
    """Image-Y of the lowest annotated ankle (larger Y = nearer ground point)."""
    ys = [p.joints[j, 1] for j in skeleton.ankles if p.visibility[j] != Visibility.ABSENT]
    if not ys:
        raise MissingJointError(f"person {p.person_id} has no annotated ankle")
    return float(max(ys))


def relative_depth_label(a: PersonInstance, b: PersonInstance, skeleton: SkeletonSpec = CANONICAL) -> int:
    """1 when A is at least as close to the camera as B, judged from the ankle anchors."""
    return int(ankle_anchor(a, skeleton) >= ankle_anchor(b, skeleton))


def person_scale(p: PersonInstance, skeleton: SkeletonSpec = CANONICAL) -> float:
    """Head segment length |head_top - head_down| in pixels."""
    ht, hd = skeleton.head_top, skeleton.head_down
    if ht is None or hd is None or not (p.annotated(ht) and p.annotated(hd)):
        raise MissingJointError(f"person {p.person_id} lacks head_top/head_down")
    return float(np.hypot(*(p.joints[ht] - p.joints[hd])))


def scale_gap_ratio(a: PersonInstance, b: PersonInstance, skeleton: SkeletonSpec = CANONICAL) -> float:
    sa, sb = person_scale(a, skeleton), person_scale(b, skeleton)
    return scale_gap_from_scales(sa, sb)


def scale_gap_from_scales(sa: float, sb: float) -> float:
    top = max(sa, sb)
    if top <= 0:
        raise ValueError("scale gap undefined when both scales are zero")
    return abs(sa - sb) / top


@dataclass
class PairSample:
    image_ref: str
    image_id: int
    crop_box: tuple[int, int, int, int]  # x, y, w, h in the original image (integer pixels)
    person_a: PersonInstance  # crop-frame coordinates
    person_b: PersonInstance
    label: int
    delta_s: float | None
    ankle_masked: bool = False
    seed: int = 0
    pixels: np.ndarray | None = field(default=None, repr=False, compare=False)

    def to_record(self) -> dict:
        return {
            "image_ref": self.image_ref,
            "image_id": int(self.image_id),
            "crop_box": [int(v) for v in self.crop_box],
            "person_a": self.person_a.to_record(),
            "person_b": self.person_b.to_record(),
            "label": int(self.label),
            "delta_s": None if self.delta_s is None else float(self.delta_s),
            "ankle_masked": bool(self.ankle_masked),
            "seed": int(self.seed),
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "PairSample":
        return cls(str(rec["image_ref"]), int(rec["image_id"]), tuple(int(v) for v in rec["crop_box"]),
                   PersonInstance.from_record(rec["person_a"]), PersonInstance.from_record(rec["person_b"]),
                   int(rec["label"]), None if rec["delta_s"] is None else float(rec["delta_s"]),
                   bool(rec["ankle_masked"]), int(rec["seed"]))

    def swapped(self) -> "PairSample":
        """B/A order; the label flips unless the anchors tie."""
        return replace(self, person_a=self.person_b, person_b=self.person_a,
                       label=relative_depth_label(self.person_b, self.person_a))


def crop_box_for(a: PersonInstance, b: PersonInstance, ratio: float, width: int, height: int) -> tuple[int, int, int, int]:
    """Union of both bboxes, each side pushed out by ratio * diagonal / 2, snapped outward to whole pixels and clipped."""
    x0 = min(a.bbox[0], b.bbox[0])
    y0 = min(a.bbox[1], b.bbox[1])
    x1 = max(a.bbox[0] + a.bbox[2], b.bbox[0] + b.bbox[2])
    y1 = max(a.bbox[1] + a.bbox[3], b.bbox[1] + b.bbox[3])
    pad = 0.5 * ratio * math.hypot(x1 - x0, y1 - y0)
    cx0 = max(0, math.floor(x0 - pad))
    cy0 = max(0, math.floor(y0 - pad))
    cx1 = min(width, math.ceil(x1 + pad))
    cy1 = min(height, math.ceil(y1 + pad))
    return (cx0, cy0, cx1 - cx0, cy1 - cy0)


def _pair_delta_s(a: PersonInstance, b: PersonInstance) -> float | None:
    try:
        return scale_gap_ratio(a, b)
    except (MissingJointError, ValueError):
        return None


def build_pairs(img: ImageAnnotation, cfg: PairBuildConfig, rng: np.random.Generator,
                image_ref: str | None = None) -> list[PairSample]:
    """Sample up to ``pairs_per_image`` distinct unordered person pairs from one image.

    Person order inside each pair is randomised so both labels occur.  With
    ``tie_epsilon > 0``, pairs whose ankle anchors differ by less than it are dropped.
    """
    persons = img.persons
    if len(persons) < 2:
        raise ValueError(f"image {img.image_id}: fewer than 2 eligible persons")
    candidates = list(combinations(range(len(persons)), 2))
    k = min(cfg.pairs_per_image, len(candidates))
    chosen = rng.choice(len(candidates), size=k, replace=False)
    out = []
    for c in chosen:
        i, j = candidates[int(c)]
        if rng.random() < 0.5:
            i, j = j, i
        a, b = persons[i], persons[j]
        if cfg.tie_epsilon > 0 and abs(ankle_anchor(a) - ankle_anchor(b)) < cfg.tie_epsilon:
            continue
        box = crop_box_for(a, b, cfg.crop_padding_ratio, img.width, img.height)
        ca, cb = a.translated(box[0], box[1]), b.translated(box[0], box[1])
        out.append(PairSample(image_ref if image_ref is not None else img.file_name, img.image_id, box, ca, cb,
                              relative_depth_label(a, b), _pair_delta_s(a, b), False, cfg.rng_seed))
    return out


def image_rng(seed: int, image_id: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(image_id)])


def build_dataset(images: Iterable[ImageAnnotation], cfg: PairBuildConfig,
                  image_ref=None) -> list[PairSample]:
    """Pairs for every image, ordered by image_id; each image gets its own seeded stream."""
    out = []
    for img in sorted(images, key=lambda im: im.image_id):
        ref = image_ref(img) if image_ref is not None else None
        out.extend(build_pairs(img, cfg, image_rng(cfg.rng_seed, img.image_id), ref))
    return out


def ankle_mask_boxes(s: PairSample, skeleton: SkeletonSpec = CANONICAL) -> list[tuple[float, float, float, float]]:
    """Crop-frame squares (x0, y0, x1, y1) around every annotated ankle, side 15% of bbox height."""
    boxes = []
    for p in (s.person_a, s.person_b):
        half = 0.5 * ANKLE_MASK_FRACTION * p.bbox[3]
        for j in skeleton.ankles:
            if p.annotated(j):
                x, y = p.joints[j]
                boxes.append((x - half, y - half, x + half, y + half))
    return boxes


def apply_mask_boxes(pixels: np.ndarray, boxes: Sequence[tuple[float, float, float, float]]) -> np.ndarray:
    out = np.array(pixels, copy=True)
    h, w = out.shape[-2:]
    for x0, y0, x1, y1 in boxes:
        c0, c1 = max(0, math.floor(x0)), min(w, math.ceil(x1))
        r0, r1 = max(0, math.floor(y0)), min(h, math.ceil(y1))
        if c0 < c1 and r0 < r1:
            out[..., r0:r1, c0:c1] = 0
    return out


def mask_ankles(s: PairSample) -> PairSample:
    """Ankle-removed variant: zeroes ankle squares in attached pixels; labels untouched.

    Without pixels only the flag is set; :func:`crop_pixels` applies the boxes
    when the crop is loaded.
    """
    if s.ankle_masked:
        return s
    pixels = None if s.pixels is None else apply_mask_boxes(s.pixels, ankle_mask_boxes(s))
    return replace(s, ankle_masked=True, pixels=pixels)


def crop_pixels(image: np.ndarray, s: PairSample) -> np.ndarray:
    x, y, w, h = s.crop_box
    crop = np.zeros((h, w), dtype=image.dtype)
    sub = image[y:y + h, x:x + w]
    crop[:sub.shape[0], :sub.shape[1]] = sub
    if s.ankle_masked:
        crop = apply_mask_boxes(crop, ankle_mask_boxes(s))
    return crop


def bucket_by_delta_s(samples: Sequence, thresholds: Sequence[float] = DELTA_S_THRESHOLDS) -> dict[float, list]:
    """{t: [s for s in samples if s.delta_s <= t]} for each threshold."""
    for s in samples:
        if s.delta_s is None:
            raise ValueError(f"sample from image {s.image_id} has no scale gap ratio")
    return {t: [s for s in samples if s.delta_s <= t] for t in thresholds}


# ---------------------------------------------------------------------------
# letterboxing


@dataclass(frozen=True)
class Letterbox:
    """Crop-frame -> network-input affine map: u_in = scale * u + offset."""
    scale: float
    offset_x: float
    offset_y: float

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts) * self.scale + np.array([self.offset_x, self.offset_y])

    def apply_box(self, bbox: tuple[float, float, float, float]) -> tuple[float, float, float, float]:
        x, y, w, h = bbox
        return (x * self.scale + self.offset_x, y * self.scale + self.offset_y, w * self.scale, h * self.scale)


def letterbox_transform(width: int, height: int, size: int) -> Letterbox:
    side = max(width, height)
    s = size / side
    return Letterbox(s, 0.5 * (side - width) * s, 0.5 * (side - height) * s)


def letterbox(pixels: np.ndarray, size: int) -> tuple[np.ndarray, Letterbox]:
    """Pad to a centred square and resample to ``size`` x ``size`` (bilinear, prefiltered when shrinking)."""
    h, w = pixels.shape
    lb = letterbox_transform(w, h, size)
    src = pixels.astype(np.float64)
    if lb.scale < 1.0:
        src = ndimage.gaussian_filter(src, sigma=0.5 * (1.0 / lb.scale - 1.0) + 1e-9, mode="constant")
    centers = np.arange(size) + 0.5
    # output pixel centre -> source pixel index (centres at integer + 0.5)
    sx = (centers - lb.offset_x) / lb.scale - 0.5
    sy = (centers - lb.offset_y) / lb.scale - 0.5
    gy, gx = np.meshgrid(sy, sx, indexing="ij")
    out = ndimage.map_coordinates(src, [gy, gx], order=1, mode="constant", cval=0.0)
    return out, lb


def dump_pairs(samples: Sequence[PairSample]) -> str:
    return "".join(json.dumps(s.to_record(), separators=(",", ":")) + "\n" for s in samples)


def load_pairs(text: str) -> list[PairSample]:
    return [PairSample.from_record(json.loads(line)) for line in text.splitlines() if line.strip()]
