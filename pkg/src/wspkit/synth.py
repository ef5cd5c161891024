"""Synthetic pinhole-camera scenes of stick figures with exact 3D ground truth.

World frame: X right, Y up (ground plane Y = 0), Z forward.  The camera sits at
(0, height_mm, 0) looking along +Z, tilted down by ``pitch`` radians.  Image y
grows downward.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .anno import CANONICAL, CANONICAL_BONES, ImageAnnotation, PersonInstance, Visibility
from .poses import Pose3D

J = CANONICAL.num_joints
PELVIS = 0


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class CameraModel:
    focal: float = 150.0
    cx: float = 64.0
    cy: float = 64.0
    height_mm: float = 1000.0
    pitch: float = 0.0

    def __post_init__(self):
        if self.focal <= 0:
            raise ValueError("focal length must be positive")

    def scaled(self, factor: float) -> "CameraModel":
        return replace(self, focal=self.focal * factor, cx=self.cx * factor, cy=self.cy * factor)

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        """World mm -> camera mm (x right, y down, z along the optical axis)."""
        p = np.asarray(points, dtype=np.float64)
        dx, dy, dz = p[..., 0], p[..., 1] - self.height_mm, p[..., 2]
        c, s = np.cos(self.pitch), np.sin(self.pitch)
        return np.stack([dx, -(dy * c + dz * s), dz * c - dy * s], axis=-1)

    def to_dict(self) -> dict:
        return {"focal": self.focal, "cx": self.cx, "cy": self.cy, "height_mm": self.height_mm, "pitch": self.pitch}


def project(points: np.ndarray, cam: CameraModel) -> np.ndarray:
    """Pinhole projection of world points (..., 3) to pixels (..., 2)."""
    pc = cam.to_camera(points)
    z = pc[..., 2]
    if np.any(z <= 0):
        raise ValueError("point at or behind the camera plane")
    return np.stack([cam.focal * pc[..., 0] / z + cam.cx, cam.focal * pc[..., 1] / z + cam.cy], axis=-1)


@dataclass
class SynthPerson:
    root: tuple[float, float]  # ground position (x, z) mm
    height: float
    joints: np.ndarray  # (J, 3) world mm
    standing: bool = True


@dataclass
class SyntheticScene:
    persons: list[SynthPerson]
    camera: CameraModel
    width: int = 128
    height: int = 128
    seed: int | None = None

    def camera_joints(self, i: int) -> np.ndarray:
        return self.camera.to_camera(self.persons[i].joints)

    def root_depth(self, i: int) -> float:
        return float(self.camera_joints(i)[PELVIS, 2])

    def to_bytes(self) -> bytes:
        parts = [np.array([self.width, self.height], dtype="<i8").tobytes(),
                 np.array(list(self.camera.to_dict().values()), dtype="<f8").tobytes()]
        for p in self.persons:
            parts.append(np.array([*p.root, p.height, float(p.standing)], dtype="<f8").tobytes())
            parts.append(np.ascontiguousarray(p.joints, dtype="<f8").tobytes())
        return b"".join(parts)


@dataclass(frozen=True)
class SceneConfig:
    min_persons: int = 2
    max_persons: int = 3
    depth_range: tuple[float, float] = (3000.0, 8000.0)
    height_range: tuple[float, float] = (1500.0, 1900.0)
    pitch: float = 0.0
    camera_height_mm: float = 1000.0
    width: int = 128
    height: int = 128
    focal: float = 150.0
    standing: bool = True
    float_range: tuple[float, float] = (100.0, 400.0)  # ankle lift when not standing
    tie_injection: bool = False
    max_retries: int = 200

    def __post_init__(self):
        if self.min_persons < 2 or self.max_persons < self.min_persons:
            raise ValueError("person count must be >= 2")
        for lo, hi in (self.depth_range, self.height_range):
            if not lo <= hi:
                raise ValueError("empty range")
        if self.depth_range[0] <= 0:
            raise ValueError("depth range must be positive")

    def camera(self) -> CameraModel:
        return CameraModel(self.focal, self.width / 2, self.height / 2, self.camera_height_mm, self.pitch)


def _rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def stick_figure(rng: np.random.Generator, root_x: float, root_z: float, height: float, lift: float = 0.0) -> np.ndarray:
    """Randomly articulated canonical-17 figure.  Both ankles sit at the root depth."""
    h = height
    leg = 0.53 * h
    hip_half, shoulder_half = 0.06 * h, 0.11 * h
    torso, head = 0.30 * h, 0.17 * h
    upper_arm, forearm = 0.17 * h, 0.15 * h
    yaw = rng.uniform(-0.8, 0.8)
    ry = _rot_y(yaw)
    # body-frame forward points toward the camera (-Z)
    fwd = ry @ np.array([0.0, 0.0, -1.0])
    lat = ry @ np.array([1.0, 0.0, 0.0])

    out = np.zeros((J, 3))
    pelvis_y = lift + leg * rng.uniform(0.93, 1.0)
    pelvis = np.array([root_x, pelvis_y, root_z])
    out[0] = pelvis
    stance = hip_half + rng.uniform(-0.01, 0.06) * h
    for hip_i, knee_i, ankle_i, side in ((1, 2, 3, 1.0), (4, 5, 6, -1.0)):
        hip = pelvis + side * hip_half * lat
        ankle = np.array([root_x + side * stance, lift, root_z])
        mid = 0.5 * (hip + ankle)
        d = np.linalg.norm(hip - ankle)
        bulge = np.sqrt(max((leg / 2) ** 2 - (d / 2) ** 2, 0.0))
        out[hip_i], out[knee_i], out[ankle_i] = hip, mid + bulge * fwd, ankle

    lean = _rot_y(yaw) @ _rot_x(-rng.uniform(-0.2, 0.3)) @ _rot_z(rng.uniform(-0.15, 0.15))
    up = lean @ np.array([0.0, 1.0, 0.0])
    neck = pelvis + torso * up
    out[7] = pelvis + 0.5 * torso * up
    out[8] = neck
    hdir = lean @ _rot_x(-rng.uniform(-0.3, 0.3)) @ np.array([0.0, 1.0, 0.0])
    out[10] = neck + head * hdir
    out[9] = neck + 0.55 * head * hdir + 0.06 * h * fwd

    for sh_i, el_i, wr_i, side in ((11, 12, 13, -1.0), (14, 15, 16, 1.0)):
        shoulder = neck - 0.02 * h * up + side * shoulder_half * (lean @ np.array([1.0, 0, 0]))
        swing = rng.uniform(-1.0, 1.0)
        abduct = rng.uniform(0.05, 1.0)
        arm = lean @ _rot_x(-swing) @ _rot_z(side * abduct)
        d_upper = arm @ np.array([0.0, -1.0, 0.0])
        elbow = shoulder + upper_arm * d_upper
        d_fore = arm @ _rot_x(-rng.uniform(0.0, 1.8)) @ np.array([0.0, -1.0, 0.0])
        out[sh_i], out[el_i], out[wr_i] = shoulder, elbow, elbow + forearm * d_fore
    return out


def _in_frame(points_px: np.ndarray, width: int, height: int, margin: float = 1.0) -> bool:
    return bool(np.all(points_px[:, 0] >= margin) and np.all(points_px[:, 0] <= width - margin)
                and np.all(points_px[:, 1] >= margin) and np.all(points_px[:, 1] <= height - margin))


def generate_scene(rng: np.random.Generator, cfg: SceneConfig = SceneConfig()) -> SyntheticScene:
    """Place 2..max persons at random ground positions, all fully inside the frame."""
    cam = cfg.camera()
    n = int(rng.integers(cfg.min_persons, cfg.max_persons + 1))
    persons: list[SynthPerson] = []
    tie_z = None
    for k in range(n):
        for _ in range(cfg.max_retries):
            z = tie_z if (cfg.tie_injection and k == 1 and tie_z is not None) else rng.uniform(*cfg.depth_range)
            half_fov = z * (cfg.width / 2) / cfg.focal
            x = rng.uniform(-0.75, 0.75) * half_fov
            h = rng.uniform(*cfg.height_range)
            lift = 0.0 if cfg.standing else rng.uniform(*cfg.float_range)
            joints = stick_figure(rng, x, z, h, lift)
            if np.any(cam.to_camera(joints)[:, 2] <= 0):
                continue
            if _in_frame(project(joints, cam), cfg.width, cfg.height):
                persons.append(SynthPerson((x, z), h, joints, cfg.standing))
                if k == 0:
                    tie_z = z
                break
        else:
            raise PlacementError(f"could not place person {k} inside the frustum after {cfg.max_retries} tries")
    return SyntheticScene(persons, cam, cfg.width, cfg.height)


def true_depth_label(scene: SyntheticScene, a: int, b: int) -> int:
    """1 iff person ``a``'s root is at most as deep as person ``b``'s (camera frame)."""
    return int(scene.root_depth(a) <= scene.root_depth(b))


# ---------------------------------------------------------------------------
# rendering

LIMB_WIDTH_MM = 70.0
_BONE_STYLE = {}
for _a, _b in CANONICAL_BONES:
    name = CANONICAL.joint_names[_b]
    if name.startswith("left"):
        _BONE_STYLE[(_a, _b)] = (1.0, 0.55)
    elif name.startswith("right"):
        _BONE_STYLE[(_a, _b)] = (1.0, 0.8)
    elif name in ("nose", "head_top"):
        _BONE_STYLE[(_a, _b)] = (1.8, 1.0)
    else:
        _BONE_STYLE[(_a, _b)] = (1.5, 0.7)


def _draw_segment(img: np.ndarray, p0: np.ndarray, p1: np.ndarray, width: float, value: float) -> None:
    h, w = img.shape
    r = width / 2 + 1.0
    x0, x1 = int(max(0, np.floor(min(p0[0], p1[0]) - r))), int(min(w, np.ceil(max(p0[0], p1[0]) + r)))
    y0, y1 = int(max(0, np.floor(min(p0[1], p1[1]) - r))), int(min(h, np.ceil(max(p0[1], p1[1]) + r)))
    if x0 >= x1 or y0 >= y1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1]
    px, py = xs + 0.5, ys + 0.5
    d = p1 - p0
    ll = float(d @ d)
    t = np.clip(((px - p0[0]) * d[0] + (py - p0[1]) * d[1]) / ll, 0.0, 1.0) if ll > 0 else np.zeros_like(px)
    dist = np.hypot(px - (p0[0] + t * d[0]), py - (p0[1] + t * d[1]))
    cover = np.clip(width / 2 + 0.5 - dist, 0.0, 1.0)
    region = img[y0:y1, x0:x1]
    region *= 1.0 - cover
    region += cover * value


def person_bbox(px: np.ndarray, pad: float, width: int, height: int) -> tuple[float, float, float, float]:
    x0 = max(0.0, float(px[:, 0].min()) - pad)
    y0 = max(0.0, float(px[:, 1].min()) - pad)
    x1 = min(float(width), float(px[:, 0].max()) + pad)
    y1 = min(float(height), float(px[:, 1].max()) + pad)
    return (x0, y0, x1 - x0, y1 - y0)


@dataclass
class RenderResult:
    image: np.ndarray  # (H, W) float32 in [0, 1]
    annotation: ImageAnnotation
    poses: list[Pose3D] = field(default_factory=list)  # camera-frame mm
    camera: CameraModel | None = None  # intrinsics at the rendered resolution


def annotate(scene: SyntheticScene, resolution: tuple[int, int] | None = None, image_id: int = 0,
             file_name: str = "") -> RenderResult:
    """Exact 2D annotations, camera-frame poses and intrinsics; the image is left empty."""
    width, height = resolution if resolution is not None else (scene.width, scene.height)
    cam = scene.camera.scaled(width / scene.width)
    persons, poses = [], []
    for i in range(len(scene.persons)):
        pj = scene.persons[i].joints
        px = project(pj, cam)
        pad = 0.75 * LIMB_WIDTH_MM * cam.focal / scene.root_depth(i)
        vis = np.full(J, Visibility.VISIBLE, dtype=np.int8)
        persons.append(PersonInstance(i, px, vis, person_bbox(px, pad, width, height)))
        poses.append(Pose3D(cam.to_camera(pj)))
    ann = ImageAnnotation(image_id, width, height, file_name, persons)
    return RenderResult(np.zeros((0, 0), dtype=np.float32), ann, poses, cam)


def render(scene: SyntheticScene, resolution: tuple[int, int] | None = None, image_id: int = 0,
           file_name: str = "") -> RenderResult:
    """Painter's-order stick-figure render with line width proportional to focal / depth."""
    res = annotate(scene, resolution, image_id, file_name)
    cam, width, height = res.camera, res.annotation.width, res.annotation.height
    img = np.zeros((height, width), dtype=np.float64)
    order = sorted(range(len(scene.persons)), key=lambda i: -scene.root_depth(i))
    for i in order:
        pj = scene.persons[i].joints
        cj = cam.to_camera(pj)
        px = project(pj, cam)
        bones = sorted(CANONICAL_BONES, key=lambda ab: -(cj[ab[0], 2] + cj[ab[1], 2]))
        for a, b in bones:
            scale, value = _BONE_STYLE[(a, b)]
            zmid = 0.5 * (cj[a, 2] + cj[b, 2])
            _draw_segment(img, px[a], px[b], scale * LIMB_WIDTH_MM * cam.focal / zmid, value)
    res.image = img.astype(np.float32)
    return res


# ---------------------------------------------------------------------------
# portable graymap I/O


def write_pgm(path, image: np.ndarray) -> None:
    data = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary graymap")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pos += 1
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)
    return data.astype(np.float32) / maxval
