"""Skeleton sequence datasets: file formats, padding/masking, splits, synthesis.

Per-video file (UTF-8 text)::

    # ergoseg-sequence v1 id=<id> frames=<T> fps=<hz> topology=<hash>
    pelvis_x,pelvis_y,pelvis_z,...,label,reba_raw,reba_smooth
    <45 floats>,<int>,<int|NA>,<float|NA>

Manifest (whitespace separated, ``#`` comments, paths relative to the file)::

    ergoseg-manifest 1
    topology <hash> [<topology file>]
    smoothing <float>
    class <id> <name> [load=<0-2>] [shock=0|1] [coupling=<0-3>]
                      [static=0|1] [repeated=0|1] [rapid=0|1]
    video <split> <path>

Class lines carry the REBA context that cannot be read off the pose.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import reba
from .graph import SkeletonTopology, canonical_topology, load_topology
from .layers import PAD_VALUE

MANIFEST_VERSION = 1
SEQUENCE_MAGIC = "ergoseg-sequence v1"


class DatasetError(ValueError):
    """One or more itemized problems found while loading a dataset."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass
class SkeletonSequence:
    video_id: str
    joints: np.ndarray          # (T, N, 3) metres
    labels: np.ndarray          # (T,) int
    reba_raw: np.ndarray | None = None     # (T,) int in 1..15
    reba_smooth: np.ndarray | None = None  # (T,) float
    fps: float = 30.0

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        T = len(self.joints)
        if self.joints.ndim != 3 or self.joints.shape[2] != 3:
            raise ValueError(f"{self.video_id}: joints must be (T, N, 3), got {self.joints.shape}")
        if len(self.labels) != T:
            raise ValueError(f"{self.video_id}: {len(self.labels)} labels for {T} frames")
        for name in ("reba_raw", "reba_smooth"):
            arr = getattr(self, name)
            if arr is not None:
                dtype = np.int64 if name == "reba_raw" else np.float64
                arr = np.asarray(arr, dtype=dtype)
                if len(arr) != T:
                    raise ValueError(f"{self.video_id}: {name} has {len(arr)} frames, expected {T}")
                setattr(self, name, arr)
        if self.reba_raw is not None and len(self.reba_raw) and (
                self.reba_raw.min() < 1 or self.reba_raw.max() > 15):
            raise ValueError(f"{self.video_id}: raw REBA outside 1..15")

    @property
    def length(self) -> int:
        return len(self.joints)

    def model_input(self) -> np.ndarray:
        """Joints as the (3, N, T) network input."""
        return np.ascontiguousarray(self.joints.transpose(2, 1, 0))


@dataclass
class ClassInfo:
    name: str
    context: reba.RebaContext = field(default_factory=reba.RebaContext)


@dataclass
class Dataset:
    sequences: list[SkeletonSequence]
    classes: list[ClassInfo]
    topology: SkeletonTopology
    smoothing: float = reba.DEFAULT_SMOOTHING
    splits: dict[str, str] = field(default_factory=dict)  # video id -> split name

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def split(self, name: str) -> list[SkeletonSequence]:
        return [s for s in self.sequences if self.splits.get(s.video_id) == name]

    def contexts_for(self, labels) -> list[reba.RebaContext]:
        return [self.classes[int(c)].context for c in labels]

    def compute_targets(self, seq: SkeletonSequence, up=(0.0, 1.0, 0.0)) -> None:
        seq.reba_raw = reba.score_frames(seq.joints, self.topology,
                                         self.contexts_for(seq.labels), up)
        seq.reba_smooth = reba.smooth_scores(seq.reba_raw, self.smoothing)


# -- padding ------------------------------------------------------------------------
@dataclass
class PaddedBatch:
    joints: np.ndarray   # (B, 3, N, T_max), PAD_VALUE on padded frames
    labels: np.ndarray   # (B, T_max), ignore id on padded frames
    targets: np.ndarray  # (B, T_max), PAD_VALUE on padded frames
    mask: np.ndarray     # (B, T_max) True on real frames
    lengths: np.ndarray  # (B,)
    ignore_label: int
    video_ids: list[str] = field(default_factory=list)

    def unpad(self) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
        """(joints (T, N, 3), labels, targets) for every sequence."""
        out = []
        for b, T in enumerate(self.lengths):
            out.append((self.joints[b, :, :, :T].transpose(2, 1, 0),
                        self.labels[b, :T], self.targets[b, :T]))
        return out


def pad_and_mask(sequences, t_max: int | None = None, ignore_label: int | None = None) -> PaddedBatch:
    sequences = list(sequences)
    lengths = np.array([s.length for s in sequences], dtype=np.int64)
    if t_max is None:
        t_max = int(lengths.max())
    if (lengths > t_max).any():
        raise ValueError(f"sequence longer ({lengths.max()}) than t_max={t_max}")
    n = sequences[0].joints.shape[1]
    if ignore_label is None:
        ignore_label = int(max(s.labels.max() for s in sequences)) + 1
    B = len(sequences)
    joints = np.full((B, 3, n, t_max), PAD_VALUE)
    labels = np.full((B, t_max), ignore_label, dtype=np.int64)
    targets = np.full((B, t_max), PAD_VALUE)
    mask = np.zeros((B, t_max), dtype=bool)
    for b, s in enumerate(sequences):
        T = s.length
        joints[b, :, :, :T] = s.model_input()
        labels[b, :T] = s.labels
        if s.reba_smooth is not None:
            targets[b, :T] = s.reba_smooth
        mask[b, :T] = True
    return PaddedBatch(joints, labels, targets, mask, lengths, ignore_label,
                       [s.video_id for s in sequences])


# -- file IO -----------------------------------------------------------------------------
def _fmt(x: float) -> str:
    return repr(float(x))


def write_sequence(path: str | Path, seq: SkeletonSequence, topology: SkeletonTopology) -> None:
    names = [f"{j}_{a}" for j in topology.joints for a in "xyz"]
    lines = [f"# {SEQUENCE_MAGIC} id={seq.video_id} frames={seq.length} fps={_fmt(seq.fps)} "
             f"topology={topology.hash}",
             ",".join(names + ["label", "reba_raw", "reba_smooth"])]
    flat = seq.joints.reshape(seq.length, -1)
    for t in range(seq.length):
        raw = "NA" if seq.reba_raw is None else str(int(seq.reba_raw[t]))
        smooth = "NA" if seq.reba_smooth is None else _fmt(seq.reba_smooth[t])
        lines.append(",".join([_fmt(v) for v in flat[t]] + [str(int(seq.labels[t])), raw, smooth]))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")


def read_sequence(path: str | Path, topology: SkeletonTopology | None = None) -> SkeletonSequence:
    topology = topology or canonical_topology()
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith(f"# {SEQUENCE_MAGIC}"):
        raise DatasetError([f"{path}: missing sequence header"])
    meta = dict(tok.split("=", 1) for tok in text[0][len(f"# {SEQUENCE_MAGIC}"):].split())
    vid = meta.get("id", Path(path).stem)
    problems = []
    if meta.get("topology") != topology.hash:
        problems.append(f"{vid}: topology hash {meta.get('topology')} != {topology.hash}")
    n_coord = 3 * topology.num_joints
    joints, labels, raw, smooth = [], [], [], []
    for row_no, line in enumerate(text[2:], start=3):
        cells = line.split(",")
        if len(cells) != n_coord + 3:
            problems.append(f"{vid}: row {row_no} has {len(cells)} fields, expected {n_coord + 3}")
            continue
        try:
            joints.append([float(c) for c in cells[:n_coord]])
            labels.append(int(cells[n_coord]))
            raw.append(None if cells[n_coord + 1] == "NA" else int(cells[n_coord + 1]))
            smooth.append(None if cells[n_coord + 2] == "NA" else float(cells[n_coord + 2]))
        except ValueError as exc:
            problems.append(f"{vid}: row {row_no}: {exc}")
    declared = int(meta.get("frames", len(joints)))
    if not problems and declared != len(joints):
        problems.append(f"{vid}: header declares {declared} frames, found {len(joints)}")
    if problems:
        raise DatasetError(problems)
    T = len(joints)
    seq = SkeletonSequence(
        vid, np.array(joints).reshape(T, topology.num_joints, 3), np.array(labels, dtype=np.int64),
        None if any(r is None for r in raw) else np.array(raw, dtype=np.int64),
        None if any(s is None for s in smooth) else np.array(smooth),
        float(meta.get("fps", 30.0)))
    return seq


def write_manifest(path: str | Path, dataset: Dataset, video_paths: dict[str, str],
                   topology_file: str | None = None) -> None:
    lines = [f"ergoseg-manifest {MANIFEST_VERSION}",
             f"topology {dataset.topology.hash}" + (f" {topology_file}" if topology_file else ""),
             f"smoothing {_fmt(dataset.smoothing)}"]
    for cid, info in enumerate(dataset.classes):
        c = info.context
        lines.append(f"class {cid} {info.name} load={c.load} shock={int(c.shock)} "
                     f"coupling={c.coupling} static={int(c.static)} "
                     f"repeated={int(c.repeated)} rapid={int(c.rapid_change)}")
    for seq in dataset.sequences:
        lines.append(f"video {dataset.splits.get(seq.video_id, 'train')} {video_paths[seq.video_id]}")
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_class(parts: list[str]) -> tuple[int, ClassInfo]:
    cid, name = int(parts[1]), parts[2]
    kv = dict(p.split("=", 1) for p in parts[3:])
    ctx = reba.RebaContext(
        load=int(kv.get("load", 0)), shock=bool(int(kv.get("shock", 0))),
        coupling=int(kv.get("coupling", 0)), static=bool(int(kv.get("static", 0))),
        repeated=bool(int(kv.get("repeated", 0))), rapid_change=bool(int(kv.get("rapid", 0))))
    return cid, ClassInfo(name, ctx)


def load_dataset(manifest: str | Path, compute_missing: bool = True) -> Dataset:
    """Read a manifest and every video it lists, validating as it goes.

    Missing REBA columns are computed from the joints with the manifest's
    class contexts and smoothing parameter.
    """
    manifest = Path(manifest)
    base = manifest.parent
    problems: list[str] = []
    lines = manifest.read_text().splitlines()
    rows = [(i, ln.split("#", 1)[0].split()) for i, ln in enumerate(lines, 1)]
    rows = [(i, p) for i, p in rows if p]
    if not rows or rows[0][1][:1] != ["ergoseg-manifest"]:
        raise DatasetError([f"{manifest}: not an ergoseg manifest"])
    if int(rows[0][1][1]) != MANIFEST_VERSION:
        raise DatasetError([f"{manifest}: unsupported manifest version {rows[0][1][1]}"])
    topo_hash, topology, smoothing = None, canonical_topology(), reba.DEFAULT_SMOOTHING
    classes: dict[int, ClassInfo] = {}
    videos: list[tuple[int, str, str]] = []
    for lineno, parts in rows[1:]:
        try:
            key = parts[0]
            if key == "topology":
                topo_hash = parts[1]
                if len(parts) > 2:
                    topology = load_topology(base / parts[2])
            elif key == "smoothing":
                smoothing = float(parts[1])
            elif key == "class":
                cid, info = _parse_class(parts)
                classes[cid] = info
            elif key == "video":
                videos.append((lineno, parts[1], parts[2]))
            else:
                problems.append(f"manifest line {lineno}: unknown directive {key!r}")
        except (IndexError, ValueError, OSError) as exc:
            problems.append(f"manifest line {lineno}: {exc}")
    if sorted(classes) != list(range(len(classes))):
        problems.append("manifest class ids must be 0..Cl-1 without gaps")
    if topo_hash is not None and topo_hash != topology.hash:
        problems.append(f"manifest topology hash {topo_hash} != {topology.hash}")
    if problems:
        raise DatasetError(problems)

    dataset = Dataset([], [classes[i] for i in range(len(classes))], topology, smoothing)
    for lineno, split, rel in videos:
        path = base / rel
        if not path.exists():
            problems.append(f"manifest line {lineno}: missing file {rel}")
            continue
        try:
            seq = read_sequence(path, topology)
        except DatasetError as exc:
            problems.extend(f"manifest line {lineno}: {p}" for p in exc.problems)
            continue
        except ValueError as exc:
            problems.append(f"manifest line {lineno}: {exc}")
            continue
        bad = np.flatnonzero(seq.labels >= dataset.num_classes)
        if bad.size:
            problems.append(f"{seq.video_id}: label {seq.labels[bad[0]]} >= {dataset.num_classes} "
                            f"at data row {bad[0] + 1}")
            continue
        if compute_missing and (seq.reba_raw is None or seq.reba_smooth is None):
            if seq.reba_raw is None:
                dataset.compute_targets(seq)
            else:
                seq.reba_smooth = reba.smooth_scores(seq.reba_raw, smoothing)
        dataset.sequences.append(seq)
        dataset.splits[seq.video_id] = split
    if problems:
        raise DatasetError(problems)
    return dataset


def save_dataset(directory: str | Path, dataset: Dataset, manifest_name: str = "manifest.txt") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {}
    for seq in dataset.sequences:
        rel = f"videos/{seq.video_id}.csv"
        write_sequence(directory / rel, seq, dataset.topology)
        paths[seq.video_id] = rel
    topo_file = None
    if dataset.topology.hash != canonical_topology().hash:
        topo_file = "topology.txt"
        (directory / topo_file).write_text(dataset.topology.to_text())
    write_manifest(directory / manifest_name, dataset, paths, topo_file)
    return directory / manifest_name


def assign_splits(video_ids, n_val: int | None = None, seed: int = 0) -> dict[str, str]:
    """Seeded train/val assignment; default holds out a quarter (5 of 20)."""
    ids = list(video_ids)
    if n_val is None:
        n_val = max(1, round(len(ids) / 4)) if len(ids) > 1 else 0
    order = np.random.default_rng(seed).permutation(len(ids))
    val = {ids[i] for i in order[:n_val]}
    return {v: ("val" if v in val else "train") for v in ids}


# -- synthetic data ---------------------------------------------------------------------
@dataclass(frozen=True)
class Posture:
    """Joint angles (degrees) a synthetic activity regime holds."""
    trunk: float = 0.0
    neck: float = 0.0
    hip: float = 0.0
    knee: float = 0.0
    arm: float = 0.0
    elbow: float = 0.0
    abduct: float = 0.0
    lift_leg: float = 0.0  # left hip flexion of a raised leg (unilateral stance)

    def as_array(self) -> np.ndarray:
        return np.array([self.trunk, self.neck, self.hip, self.knee, self.arm, self.elbow,
                         self.abduct, self.lift_leg])

    @classmethod
    def from_array(cls, a) -> Posture:
        return cls(*map(float, a))


# angles sit well inside REBA bands so sway and per-video jitter rarely cross a boundary
REGIMES: tuple[tuple[str, Posture, reba.RebaContext], ...] = (
    ("upright", Posture(neck=8), reba.RebaContext()),
    ("trunk_flexed", Posture(trunk=40, neck=10, arm=32, elbow=80), reba.RebaContext(load=1)),
    ("arms_raised", Posture(neck=-15, arm=120, elbow=30), reba.RebaContext(coupling=1)),
    ("squat_lift", Posture(trunk=35, neck=10, hip=55, knee=100, arm=32, elbow=80),
     reba.RebaContext(load=2, coupling=1)),
    ("forward_reach", Posture(trunk=12, neck=35, arm=68, elbow=20), reba.RebaContext(repeated=True)),
    ("side_reach", Posture(trunk=12, arm=65, elbow=20, abduct=60), reba.RebaContext()),
    ("one_leg", Posture(lift_leg=50, arm=10, elbow=80), reba.RebaContext(static=True)),
    ("deep_bend", Posture(trunk=80, neck=35, knee=45, arm=68, elbow=20),
     reba.RebaContext(load=1, coupling=2)),
)

BODY = {"trunk": 0.5, "head": 0.25, "shoulder": 0.19, "upper_arm": 0.3, "forearm": 0.27,
        "hip": 0.12, "thigh": 0.45, "shank": 0.43}


def _rot(v, toward, deg):
    r = math.radians(deg)
    return math.cos(r) * v + math.sin(r) * toward


def pose_from_angles(p: Posture, topology: SkeletonTopology | None = None) -> np.ndarray:
    """Canonical 15-joint coordinates (metres, +y up, facing +z) for a posture."""
    topology = topology or canonical_topology()
    up, fwd, right = np.array([0., 1, 0]), np.array([0., 0, 1]), np.array([-1., 0, 0])
    pts = {"pelvis": np.array([0.0, 1.0, 0.0])}
    trunk_dir = _rot(up, fwd, p.trunk)
    pts["neck"] = pts["pelvis"] + BODY["trunk"] * trunk_dir
    pts["head"] = pts["neck"] + BODY["head"] * _rot(up, fwd, p.trunk + p.neck)
    down = -trunk_dir
    front = _rot(fwd, -up, p.trunk)  # perpendicular to the trunk, pointing forward
    for side, out in (("l", -right), ("r", right)):
        sh = pts["neck"] + BODY["shoulder"] * out
        sag = _rot(down, front, p.arm)
        upper = _rot(sag, out, p.abduct) if side == "r" else sag
        elbow = sh + BODY["upper_arm"] * upper
        bend_dir = _rot(front, -down, p.arm)  # forward-perpendicular to the upper arm
        fore = _rot(upper, bend_dir, p.elbow)
        pts[f"{side}_shoulder"], pts[f"{side}_elbow"] = sh, elbow
        pts[f"{side}_wrist"] = elbow + BODY["forearm"] * fore
        hip = pts["pelvis"] + BODY["hip"] * out
        hip_flex = p.hip + (p.lift_leg if side == "l" else 0.0)
        knee_flex = p.knee + (p.lift_leg if side == "l" else 0.0)
        thigh = _rot(-up, fwd, hip_flex)
        shank = _rot(-up, fwd, hip_flex - knee_flex)
        knee = hip + BODY["thigh"] * thigh
        pts[f"{side}_hip"], pts[f"{side}_knee"] = hip, knee
        pts[f"{side}_ankle"] = knee + BODY["shank"] * shank
    return np.stack([pts[name] for name in topology.joints])


def _regime(c: int) -> tuple[str, Posture, reba.RebaContext]:
    if c < len(REGIMES):
        return REGIMES[c]
    rng = np.random.default_rng([c, 77])
    p = Posture(trunk=rng.uniform(-10, 80), neck=rng.uniform(-10, 35), knee=rng.uniform(0, 80),
                arm=rng.uniform(0, 130), elbow=rng.uniform(0, 120), abduct=rng.uniform(0, 40))
    ctx = reba.RebaContext(load=int(rng.integers(3)), coupling=int(rng.integers(4)))
    return f"regime_{c}", p, ctx


@dataclass(frozen=True)
class SynthConfig:
    classes: int = 5
    videos: int = 8
    segments: int | None = None   # per video; default classes + 2
    t_min: int = 120
    t_max: int = 200
    noise: float = 0.01           # coordinate noise std, metres
    blend: int = 4                # transition frames at the start of each segment
    sway: float = 2.0             # within-segment angle wobble, degrees
    jitter: float = 0.05          # per-video relative variation of regime angles
    fps: float = 30.0
    smoothing: float = reba.DEFAULT_SMOOTHING


def _segment_plan(rng, n_classes: int, n_segments: int, T: int, min_len: int):
    order = list(rng.permutation(n_classes))
    while len(order) < n_segments:
        choices = [c for c in range(n_classes) if c != order[-1]]
        order.append(int(rng.choice(choices)))
    # distinct neighbours: repair accidental repeats from the permutation seam
    for i in range(1, len(order)):
        if order[i] == order[i - 1]:
            j = next(k for k in range(len(order)) if order[k] != order[i] and
                     (k == 0 or order[k - 1] != order[i]) and
                     (k + 1 >= len(order) or order[k + 1] != order[i]) and
                     order[i - 1] != order[k] and (i + 1 >= len(order) or order[i + 1] != order[k]))
            order[i], order[j] = order[j], order[i]
    spare = T - min_len * n_segments
    if spare < 0:
        raise ValueError(f"T={T} too short for {n_segments} segments of >= {min_len} frames")
    w = rng.dirichlet(np.full(n_segments, 5.0))
    extra = np.floor(w * spare).astype(int)
    extra[: spare - extra.sum()] += 1
    lengths = min_len + extra
    return [int(c) for c in order], lengths


def generate_synthetic(config: SynthConfig = SynthConfig(), seed: int = 0,
                       topology: SkeletonTopology | None = None) -> Dataset:
    """Videos that cycle through posture regimes, one regime per activity class.

    Each class holds a distinct posture with a small sway; the first ``blend``
    frames of a segment interpolate from the previous posture.  Every class
    appears in every video.  REBA targets come from the engine with the class
    contexts, so risk and activity are correlated by construction.
    """
    topology = topology or canonical_topology()
    if topology.num_joints != 15:
        raise ValueError("the synthetic generator builds the canonical 15-joint skeleton")
    rng = np.random.default_rng(seed)
    regimes = [_regime(c) for c in range(config.classes)]
    classes = [ClassInfo(name, ctx) for name, _, ctx in regimes]
    n_seg = config.segments or config.classes + 2
    if n_seg < config.classes:
        raise ValueError("need at least one segment per class")
    dataset = Dataset([], classes, topology, config.smoothing)
    min_len = config.blend + 4
    for v in range(config.videos):
        T = int(rng.integers(config.t_min, config.t_max + 1))
        order, lengths = _segment_plan(rng, config.classes, n_seg, T, min_len)
        scale = rng.uniform(0.9, 1.1)
        yaw = math.radians(rng.uniform(-10.0, 10.0))
        offset = np.array([rng.uniform(-0.05, 0.05), 0.0, rng.uniform(-0.05, 0.05)])
        targets = [regimes[c][1].as_array() * (1.0 + config.jitter * rng.standard_normal(8))
                   for c in range(config.classes)]
        phase = rng.uniform(0, 2 * math.pi)
        angles = np.zeros((T, 8))
        labels = np.zeros(T, dtype=np.int64)
        t0 = 0
        prev = targets[order[0]]
        for c, n in zip(order, lengths):
            cur = targets[c]
            for k in range(n):
                w = 1.0 if t0 == 0 else min(1.0, (k + 1) / config.blend)
                w = w * w * (3 - 2 * w)
                angles[t0 + k] = (1 - w) * prev + w * cur
            labels[t0:t0 + n] = c
            prev = cur
            t0 += n
        # wobble only the angles a regime actually bends, so neutral joints stay neutral
        wobble = config.sway * np.sin(2 * math.pi * np.arange(T) / 40.0 + phase)
        bent = np.abs(angles[:, :6]) > 2 * config.sway
        angles[:, :6] += np.where(bent, wobble[:, None], 0.0)
        rot = np.array([[math.cos(yaw), 0, math.sin(yaw)], [0, 1, 0],
                        [-math.sin(yaw), 0, math.cos(yaw)]])
        joints = np.stack([pose_from_angles(Posture.from_array(a), topology) for a in angles])
        joints = (joints * scale) @ rot.T + offset
        if config.noise > 0:
            joints = joints + rng.normal(0.0, config.noise, size=joints.shape)
        seq = SkeletonSequence(f"synth{v:03d}", joints, labels, fps=config.fps)
        dataset.compute_targets(seq)
        dataset.sequences.append(seq)
    dataset.splits = {s.video_id: "train" for s in dataset.sequences}
    return dataset
