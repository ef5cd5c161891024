"""On-disk synthetic corpora: graymap images, canonical manifest and 3D ground truth."""
from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .anno import ImageAnnotation, dump_manifest, load_manifest
from .checkpoint import atomic_write_bytes
from .pose3d import FinetuneConfig, Pose3DSet, concat_sets, person_crops
from .synth import CameraModel, RenderResult, SceneConfig, generate_scene, read_pgm, render, write_pgm
from .wsp import WspConfig

MANIFEST = "manifest.jsonl"
POSES = "poses3d.jsonl"
IMAGE_DIR = "images"


def worker_count(requested: int | None = None) -> int:
    """Worker processes to use, capped by the WSPKIT_THREADS environment variable."""
    n = requested or os.cpu_count() or 1
    cap = os.environ.get("WSPKIT_THREADS")
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ValueError(f"WSPKIT_THREADS must be an integer, got {cap!r}") from None
    return max(1, n)


def scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def render_scene(seed: int, index: int, cfg: SceneConfig) -> RenderResult:
    """Scene ``index`` of the corpus seeded by ``seed``; independent of how the corpus is split up."""
    scene = generate_scene(scene_rng(seed, index), cfg)
    return render(scene, image_id=index, file_name=f"{IMAGE_DIR}/{index:06d}.pgm")


def _render_job(args):
    return render_scene(*args)


def render_corpus(count: int, seed: int, cfg: SceneConfig = SceneConfig(), workers: int = 1) -> list[RenderResult]:
    jobs = [(seed, i, cfg) for i in range(count)]
    if workers <= 1 or count < 64:
        return [_render_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_render_job, jobs, chunksize=32))


def pose_record(r: RenderResult) -> dict:
    return {
        "image_id": r.annotation.image_id,
        "file_name": r.annotation.file_name,
        "camera": r.camera.to_dict(),
        "poses": [p.joints.tolist() for p in r.poses],
    }


def write_corpus(out_dir, results: Sequence[RenderResult]) -> None:
    out = Path(out_dir)
    (out / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
    for r in results:
        write_pgm(out / r.annotation.file_name, r.image)
    atomic_write_bytes(out / POSES, "".join(json.dumps(pose_record(r), separators=(",", ":")) + "\n"
                                            for r in results).encode())
    atomic_write_bytes(out / MANIFEST, dump_manifest([r.annotation for r in results]).encode())


@dataclass
class Corpus:
    root: Path
    annotations: list[ImageAnnotation]
    pose_records: list[dict]

    def image(self, file_name: str) -> np.ndarray:
        return read_pgm(self.root / file_name)

    def __len__(self) -> int:
        return len(self.annotations)


def load_corpus(root, need_poses: bool = False) -> Corpus:
    root = Path(root)
    man = root / MANIFEST
    if not man.is_file():
        raise FileNotFoundError(f"no {MANIFEST} in {root}")
    anns = load_manifest(man.read_text())
    poses = []
    if (root / POSES).is_file():
        poses = [json.loads(line) for line in (root / POSES).read_text().splitlines() if line.strip()]
    elif need_poses:
        raise FileNotFoundError(f"no {POSES} in {root}")
    return Corpus(root, anns, poses)


def pose_set_from_records(records: Sequence[dict], load_image, wcfg: WspConfig, fcfg: FinetuneConfig) -> Pose3DSet:
    sets = []
    for rec in records:
        cam = CameraModel(**rec["camera"])
        sets.append(person_crops(load_image(rec["file_name"]), [np.asarray(p) for p in rec["poses"]], cam, wcfg, fcfg))
    if not sets:
        raise ValueError("no 3D records")
    return concat_sets(sets)


def pose_set_from_results(results: Sequence[RenderResult], wcfg: WspConfig, fcfg: FinetuneConfig) -> Pose3DSet:
    return concat_sets([person_crops(r.image, [p.joints for p in r.poses], r.camera, wcfg, fcfg) for r in results])
