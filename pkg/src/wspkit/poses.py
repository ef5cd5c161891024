from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Pose3D:
    """J x (x, y, z) joint positions in millimetres plus per-joint validity."""

    joints: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64).reshape(-1, 3)
        if self.valid is None:
            self.valid = np.ones(len(self.joints), dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != (len(self.joints),):
            raise ValueError("validity mask length differs from joint count")
        if not np.all(np.isfinite(self.joints)):
            raise ValueError("pose coordinates must be finite")

    @property
    def num_joints(self) -> int:
        return len(self.joints)

    def root_relative(self, root: int = 0) -> "Pose3D":
        return Pose3D(self.joints - self.joints[root], self.valid.copy())
