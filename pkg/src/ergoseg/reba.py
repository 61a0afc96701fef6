"""Rapid Entire Body Assessment (REBA) scoring from 3D skeletons.

Group A (trunk, neck, legs) and group B (upper arm, lower arm, wrist) posture
scores go through the standard worksheet lookup tables; load, coupling and
activity adjustments come from a :class:`RebaContext` because they cannot be
seen in a pose.

Angle conventions (degrees), with ``up`` the gravity-up axis, ``right`` the
horizontal left-hip -> right-hip direction and ``forward = up x right``:

* trunk flexion: angle between pelvis->neck and ``up``, negative when the
  trunk leans backward (extension);
* neck flexion: sagittal-plane angle of neck->head relative to the trunk,
  negative in extension;
* knee flexion: 180 minus the hip-knee-ankle angle (0 for a straight leg);
* upper-arm elevation: angle between shoulder->elbow and the trunk's downward
  direction, negative when the elbow is behind the trunk;
* arm abduction: how far shoulder->elbow leaves the sagittal plane, outward;
* lower-arm flexion: angle between shoulder->elbow and elbow->wrist.

The canonical skeleton has no hand joints, so wrist angles default to neutral.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solveh_banded
from scipy.optimize import brentq

from .graph import SkeletonTopology, canonical_topology

MIN_SCORE, MAX_SCORE = 1, 15
DEFAULT_SMOOTHING = 1.0  # spline residual budget per 100 frames

# degrees; postures within these bands count as neutral / flagged
UPRIGHT_TOLERANCE = 5.0
EXTENSION_TOLERANCE = 5.0
SIDE_BEND_THRESHOLD = 10.0
TWIST_THRESHOLD = 10.0
ABDUCTION_THRESHOLD = 30.0
# metres
SHOULDER_RAISE_THRESHOLD = 0.05
UNILATERAL_SUPPORT_THRESHOLD = 0.10
MIN_SEGMENT_LENGTH = 1e-6

# TABLE_A[neck-1][trunk-1][legs-1]
TABLE_A = np.array([
    [[1, 2, 3, 4], [2, 3, 4, 5], [2, 4, 5, 6], [3, 5, 6, 7], [4, 6, 7, 8]],
    [[1, 2, 3, 4], [3, 4, 5, 6], [4, 5, 6, 7], [5, 6, 7, 8], [6, 7, 8, 9]],
    [[3, 3, 5, 6], [4, 5, 6, 7], [5, 6, 7, 8], [6, 7, 8, 9], [7, 8, 9, 9]],
])

# TABLE_B[lower_arm-1][upper_arm-1][wrist-1]
TABLE_B = np.array([
    [[1, 2, 2], [1, 2, 3], [3, 4, 5], [4, 5, 5], [6, 7, 8], [7, 8, 8]],
    [[1, 2, 3], [2, 3, 4], [4, 5, 5], [5, 6, 7], [7, 8, 8], [8, 9, 9]],
])

# TABLE_C[score_a-1][score_b-1]
TABLE_C = np.array([
    [1, 1, 1, 2, 3, 3, 4, 5, 6, 7, 7, 7],
    [1, 2, 2, 3, 4, 4, 5, 6, 6, 7, 7, 8],
    [2, 3, 3, 3, 4, 5, 6, 7, 7, 8, 8, 8],
    [3, 4, 4, 4, 5, 6, 7, 8, 8, 9, 9, 9],
    [4, 4, 4, 5, 6, 7, 8, 8, 9, 9, 9, 9],
    [6, 6, 6, 7, 8, 8, 9, 9, 10, 10, 10, 10],
    [7, 7, 7, 8, 9, 9, 9, 10, 10, 11, 11, 11],
    [8, 8, 8, 9, 10, 10, 10, 10, 10, 11, 11, 11],
    [9, 9, 9, 10, 10, 10, 11, 11, 11, 12, 12, 12],
    [10, 10, 10, 11, 11, 11, 11, 12, 12, 12, 12, 12],
    [11, 11, 11, 11, 12, 12, 12, 12, 12, 12, 12, 12],
    [12, 12, 12, 12, 12, 12, 12, 12, 12, 12, 12, 12],
])


class DegenerateFrameError(ValueError):
    def __init__(self, joint_a: str, joint_b: str):
        super().__init__(f"joints {joint_a!r} and {joint_b!r} coincide")
        self.joints = (joint_a, joint_b)


@dataclass(frozen=True)
class JointAngles:
    trunk_flexion: float = 0.0
    trunk_twisted: bool = False
    trunk_side_bent: bool = False
    neck_flexion: float = 0.0
    neck_twisted: bool = False
    neck_side_bent: bool = False
    knee_flexion: float = 0.0
    bilateral_support: bool = True
    upper_arm_elevation: float = 0.0
    shoulder_raised: bool = False
    arm_abducted: bool = False
    arm_supported: bool = False
    lower_arm_flexion: float = 0.0
    wrist_flexion: float = 0.0
    wrist_deviated: bool = False

    def __post_init__(self):
        for name in ("trunk_flexion", "neck_flexion", "knee_flexion", "upper_arm_elevation",
                     "lower_arm_flexion", "wrist_flexion"):
            v = getattr(self, name)
            if not np.isfinite(v) or not -180.0 <= v <= 180.0:
                raise ValueError(f"{name}={v} outside [-180, 180]")


@dataclass(frozen=True)
class RebaContext:
    load: int = 0          # 0: <5 kg, 1: 5-10 kg, 2: >10 kg
    shock: bool = False    # +1 on the load score
    coupling: int = 0      # 0 good .. 3 unacceptable
    static: bool = False
    repeated: bool = False
    rapid_change: bool = False

    def __post_init__(self):
        if self.load not in (0, 1, 2):
            raise ValueError(f"load band {self.load} not in 0..2")
        if self.coupling not in (0, 1, 2, 3):
            raise ValueError(f"coupling {self.coupling} not in 0..3")

    @property
    def load_score(self) -> int:
        return self.load + int(self.shock)

    @property
    def activity_score(self) -> int:
        return int(self.static) + int(self.repeated) + int(self.rapid_change)


# -- component scores ---------------------------------------------------------
def trunk_score(a: JointAngles) -> int:
    f = a.trunk_flexion
    if abs(f) <= UPRIGHT_TOLERANCE:
        s = 1
    elif -20.0 <= f <= 20.0:
        s = 2
    elif f <= 60.0:
        s = 3
    else:
        s = 4
    return s + int(a.trunk_twisted or a.trunk_side_bent)


def neck_score(a: JointAngles) -> int:
    s = 1 if -EXTENSION_TOLERANCE <= a.neck_flexion <= 20.0 else 2
    return s + int(a.neck_twisted or a.neck_side_bent)


def legs_score(a: JointAngles) -> int:
    s = 1 if a.bilateral_support else 2
    if a.knee_flexion > 60.0:
        s += 2
    elif a.knee_flexion > 30.0:
        s += 1
    return s


def upper_arm_score(a: JointAngles) -> int:
    e = a.upper_arm_elevation
    if -20.0 <= e <= 20.0:
        s = 1
    elif e < -20.0 or e <= 45.0:
        s = 2
    elif e <= 90.0:
        s = 3
    else:
        s = 4
    s += int(a.arm_abducted) + int(a.shoulder_raised) - int(a.arm_supported)
    return max(s, 1)


def lower_arm_score(a: JointAngles) -> int:
    return 1 if 60.0 <= a.lower_arm_flexion <= 100.0 else 2


def wrist_score(a: JointAngles) -> int:
    return (1 if abs(a.wrist_flexion) <= 15.0 else 2) + int(a.wrist_deviated)


@dataclass(frozen=True)
class RebaBreakdown:
    trunk: int
    neck: int
    legs: int
    upper_arm: int
    lower_arm: int
    wrist: int
    table_a: int
    score_a: int
    table_b: int
    score_b: int
    table_c: int
    total: int


def combine_components(trunk: int, neck: int, legs: int, upper_arm: int, lower_arm: int,
                       wrist: int, context: RebaContext = RebaContext()) -> RebaBreakdown:
    """Table lookups from component scores; indices are clamped into table range."""
    trunk, neck, legs = min(max(trunk, 1), 5), min(max(neck, 1), 3), min(max(legs, 1), 4)
    upper_arm, lower_arm = min(max(upper_arm, 1), 6), min(max(lower_arm, 1), 2)
    wrist = min(max(wrist, 1), 3)
    ta = int(TABLE_A[neck - 1, trunk - 1, legs - 1])
    sa = min(ta + context.load_score, 12)
    tb = int(TABLE_B[lower_arm - 1, upper_arm - 1, wrist - 1])
    sb = min(tb + context.coupling, 12)
    tc = int(TABLE_C[sa - 1, sb - 1])
    total = min(max(tc + context.activity_score, MIN_SCORE), MAX_SCORE)
    return RebaBreakdown(trunk, neck, legs, upper_arm, lower_arm, wrist, ta, sa, tb, sb, tc, total)


def reba_breakdown(angles: JointAngles, context: RebaContext = RebaContext()) -> RebaBreakdown:
    return combine_components(
        trunk_score(angles), neck_score(angles), legs_score(angles),
        upper_arm_score(angles), lower_arm_score(angles), wrist_score(angles), context)


def reba_score(angles: JointAngles, context: RebaContext = RebaContext()) -> int:
    return reba_breakdown(angles, context).total


# -- geometry -------------------------------------------------------------------
def _angle(u: np.ndarray, v: np.ndarray) -> float:
    c = np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v))
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


class _Frame:
    def __init__(self, coords: np.ndarray, topology: SkeletonTopology):
        self.coords = coords
        self.topology = topology

    def __getitem__(self, name: str) -> np.ndarray:
        return self.coords[self.topology.index(name)]

    def bone(self, a: str, b: str) -> np.ndarray:
        v = self[b] - self[a]
        if np.linalg.norm(v) <= MIN_SEGMENT_LENGTH:
            raise DegenerateFrameError(a, b)
        return v


def body_axes(frame: _Frame, up: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Horizontal (right, forward) unit vectors from the hip line."""
    hips = frame.bone("l_hip", "r_hip")
    right = hips - np.dot(hips, up) * up
    if np.linalg.norm(right) <= MIN_SEGMENT_LENGTH:
        raise DegenerateFrameError("l_hip", "r_hip")
    right = _unit(right)
    return right, np.cross(up, right)


def _sagittal(v: np.ndarray, up: np.ndarray, fwd: np.ndarray) -> float:
    return float(np.degrees(np.arctan2(np.dot(v, fwd), np.dot(v, up))))


def _lateral(v: np.ndarray, right: np.ndarray) -> float:
    return float(np.degrees(np.arcsin(np.clip(np.dot(_unit(v), right), -1.0, 1.0))))


def extract_angles(frame, topology: SkeletonTopology | None = None,
                   up=(0.0, 1.0, 0.0)) -> JointAngles:
    """Posture angles and flags for one (N, 3) frame in metres."""
    topology = topology or canonical_topology()
    coords = np.asarray(frame, dtype=np.float64).reshape(topology.num_joints, 3)
    f = _Frame(coords, topology)
    up = _unit(np.asarray(up, dtype=np.float64))
    right, fwd = body_axes(f, up)

    trunk = f.bone("pelvis", "neck")
    trunk_mag = _angle(trunk, up)
    trunk_flex = trunk_mag if np.dot(trunk, fwd) >= -1e-12 else -trunk_mag
    shoulders = f.bone("l_shoulder", "r_shoulder")
    sh_h = shoulders - np.dot(shoulders, up) * up
    twist = _angle(sh_h, right) if np.linalg.norm(sh_h) > MIN_SEGMENT_LENGTH else 0.0

    head = f.bone("neck", "head")
    neck_flex = _sagittal(head, up, fwd) - _sagittal(trunk, up, fwd)
    neck_lat = abs(_lateral(head, right) - _lateral(trunk, right))

    knees, heights = [], []
    for side in ("l", "r"):
        thigh = f.bone(f"{side}_hip", f"{side}_knee")
        shank = f.bone(f"{side}_knee", f"{side}_ankle")
        knees.append(_angle(thigh, shank))
        heights.append(np.dot(f[f"{side}_ankle"], up))

    down = -_unit(trunk)
    # forward direction perpendicular to the trunk: arm flexion is measured against the trunk
    front = fwd - np.dot(fwd, down) * down
    side_dir = {"l": -right, "r": right}
    arms = []
    for side in ("l", "r"):
        upper = f.bone(f"{side}_shoulder", f"{side}_elbow")
        lower = f.bone(f"{side}_elbow", f"{side}_wrist")
        elev = _angle(upper, down)
        if np.dot(upper, front) < -1e-12:
            elev = -elev
        # abduction: how far the arm leaves the sagittal plane, outward
        abduction = float(np.degrees(np.arcsin(np.clip(
            np.dot(_unit(upper), side_dir[side]), -1.0, 1.0))))
        raised = np.dot(f[f"{side}_shoulder"] - f["neck"], up) > SHOULDER_RAISE_THRESHOLD
        arms.append(JointAngles(
            upper_arm_elevation=elev, arm_abducted=abduction > ABDUCTION_THRESHOLD,
            shoulder_raised=bool(raised), lower_arm_flexion=_angle(upper, lower)))
    # REBA scores one arm; take the side with the worse group-B table value
    worst = max(arms, key=lambda a: int(TABLE_B[lower_arm_score(a) - 1,
                                                min(upper_arm_score(a), 6) - 1, 0]))

    return JointAngles(
        trunk_flexion=trunk_flex,
        trunk_twisted=twist > TWIST_THRESHOLD,
        trunk_side_bent=abs(_lateral(trunk, right)) > SIDE_BEND_THRESHOLD,
        neck_flexion=float(np.clip(neck_flex, -180.0, 180.0)),
        neck_twisted=False,
        neck_side_bent=neck_lat > SIDE_BEND_THRESHOLD,
        knee_flexion=max(knees),
        bilateral_support=abs(heights[0] - heights[1]) <= UNILATERAL_SUPPORT_THRESHOLD,
        upper_arm_elevation=worst.upper_arm_elevation,
        shoulder_raised=worst.shoulder_raised,
        arm_abducted=worst.arm_abducted,
        lower_arm_flexion=worst.lower_arm_flexion,
    )


def score_frames(joints: np.ndarray, topology: SkeletonTopology | None = None,
                 contexts=None, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Raw REBA score per frame of a (T, N, 3) sequence.

    ``contexts`` is one :class:`RebaContext` for all frames or a per-frame list.
    """
    joints = np.asarray(joints, dtype=np.float64)
    T = len(joints)
    if contexts is None or isinstance(contexts, RebaContext):
        contexts = [contexts or RebaContext()] * T
    return np.array([reba_score(extract_angles(joints[t], topology, up), contexts[t])
                     for t in range(T)], dtype=np.int64)


def _penalized_fit(y: np.ndarray, lam: float) -> np.ndarray:
    # Reinsch form on unit spacing: (R + lam Q'Q) g = Q'y, fit = y - lam Q g.
    n = len(y) - 2
    ab = np.zeros((3, n))
    ab[2] = 2.0 / 3.0 + 6.0 * lam
    ab[1, 1:] = 1.0 / 6.0 - 4.0 * lam
    ab[0, 2:] = lam
    g = solveh_banded(ab, y[:-2] - 2.0 * y[1:-1] + y[2:])
    qg = np.zeros_like(y)
    qg[:-2] += g
    qg[1:-1] -= 2.0 * g
    qg[2:] += g
    return y - lam * qg


def smooth_scores(raw, smoothing: float = DEFAULT_SMOOTHING) -> np.ndarray:
    """Cubic smoothing spline through (t, raw_t) with residual budget ``smoothing * T / 100``.

    The curvature weight is chosen so the residual sum of squares equals the budget; if a
    straight line already fits within budget, the line is returned.
    """
    raw = np.asarray(raw, dtype=np.float64)
    T = len(raw)
    if T < 4 or smoothing <= 0 or np.all(raw == raw[0]):
        return raw.copy()
    budget = smoothing * T / 100.0
    t = np.arange(T, dtype=np.float64)
    line = np.polyval(np.polyfit(t, raw, 1), t)
    if np.sum((line - raw) ** 2) <= budget:
        return line

    def excess(u):
        return np.sum((_penalized_fit(raw, 10.0 ** u) - raw) ** 2) - budget

    lo, hi = -12.0, 0.0
    if excess(lo) >= 0:
        return _penalized_fit(raw, 10.0 ** lo)
    while excess(hi) < 0:
        hi += 4.0
    return _penalized_fit(raw, 10.0 ** brentq(excess, lo, hi, xtol=1e-12, rtol=1e-12))
