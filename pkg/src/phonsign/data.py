"""Landmark preprocessing, augmentation, synthetic compositional data and dataset files.

Dataset file layout (all integers little-endian)::

    one line of UTF-8 JSON: {"format": "phonsign-dataset", "version": 1,
        "layout", "frames", "nodes", "n_classes", "counts", "records"}
    then ``records`` fixed-width records:
        int32 label, int32[4] component indices (-1 if unknown),
        float32[frames * nodes * 3] coordinates, row-major (T, N, 3)

Label maps are text files with one ``index<TAB>name`` line per class.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import FINGER_BASES, HAND_COUNT, LEFT_HAND_OFFSET, RIGHT_HAND_OFFSET, WRIST, LandmarkLayout

DATASET_FORMAT = "phonsign-dataset"
DATASET_VERSION = 1
PALM_BASES = FINGER_BASES[1:]  # index, middle, ring, pinky bases
PALM_MIN = 1e-9
MOVEMENT_FAMILIES = ("still", "line", "arc", "circle", "zigzag")
# spread of location offsets and movement amplitudes, in palm-size units
LOCATION_SCALE = 0.3
MOVEMENT_AMPLITUDE = (0.6, 0.9)


class DegenerateInputError(ValueError):
    pass


class InvalidSpecError(ValueError):
    pass


class DatasetFormatError(ValueError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    """The project-wide generator: Philox counter-based bit stream."""
    return np.random.Generator(np.random.Philox(int(seed)))


# ---------------------------------------------------------------- preprocessing

@dataclass
class RawSequence:
    frames: np.ndarray  # (T_raw, N, 3)
    source_id: str = ""
    phon: tuple | None = None

    def __post_init__(self):
        arr = np.asarray(self.frames, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[-1] != 3:
            raise ValueError(f"frames must be (T, N, 3), got {arr.shape}")
        self.frames = arr


def palm_size(frames: np.ndarray) -> np.ndarray:
    """Per-frame mean wrist to finger-base distance, shape (T,)."""
    frames = np.asarray(frames, dtype=np.float64)
    d = frames[:, PALM_BASES, :] - frames[:, WRIST:WRIST + 1, :]
    return np.linalg.norm(d, axis=-1).mean(axis=-1)


def resample(frames: np.ndarray, target_T: int) -> np.ndarray:
    """Linear interpolation along time; first and last frames are kept exactly."""
    frames = np.asarray(frames, dtype=np.float64)
    n = len(frames)
    if n == 0:
        raise DegenerateInputError("sequence has no frames")
    if n == target_T:
        return frames.copy()
    if n == 1:
        return np.repeat(frames, target_T, axis=0)
    pos = np.linspace(0.0, n - 1, target_T)
    lo = np.minimum(np.floor(pos).astype(int), n - 2)
    w = (pos - lo)[:, None, None]
    return (1.0 - w) * frames[lo] + w * frames[lo + 1]


def preprocess(raw: RawSequence | np.ndarray, target_T: int = 30) -> np.ndarray:
    """Wrist-centre, palm-normalize each frame, then resample to ``target_T`` frames.

    Interpolated frames are normalized once more: blending two unit-palm
    frames shrinks the palm, and without this a second pass would not be a
    no-op.
    """
    frames = raw.frames if isinstance(raw, RawSequence) else np.asarray(raw, dtype=np.float64)
    if len(frames) == 0:
        raise DegenerateInputError("sequence has no frames")
    if frames.shape[1] != HAND_COUNT:
        raise ValueError(f"preprocess expects {HAND_COUNT} hand landmarks, got {frames.shape[1]}")
    palm = palm_size(frames)
    if np.any(palm <= PALM_MIN):
        bad = int(np.argmax(palm <= PALM_MIN))
        raise DegenerateInputError(f"degenerate palm (size {palm[bad]:.3g}) at frame {bad}")
    centred = (frames - frames[:, WRIST:WRIST + 1, :]) / palm[:, None, None]
    if len(frames) == target_T:
        return centred
    out = resample(centred, target_T)
    palm = palm_size(out)
    if np.any(palm <= PALM_MIN):
        raise DegenerateInputError("interpolation collapsed the palm between two frames")
    return out / palm[:, None, None]


# ---------------------------------------------------------------- augmentation

def shift_and_scale(seq: np.ndarray, shift: int, scale: float) -> np.ndarray:
    """Shift along time with edge replication, then multiply all coordinates."""
    seq = np.asarray(seq)
    T = seq.shape[0]
    idx = np.clip(np.arange(T) - int(shift), 0, T - 1)
    return seq[idx] * scale


def augment(seq: np.ndarray, rng: np.random.Generator, max_shift: int = 3,
            scale_range: tuple = (0.9, 1.1)) -> np.ndarray:
    shift = int(rng.integers(-max_shift, max_shift + 1))
    scale = float(rng.uniform(*scale_range))
    return shift_and_scale(seq, shift, scale)


def augment_batch(x: np.ndarray, rng: np.random.Generator, max_shift: int = 3,
                  scale_range: tuple = (0.9, 1.1)) -> np.ndarray:
    """Independent shift and scale draws for each sequence of a (B, T, N, 3) batch."""
    B, T = x.shape[:2]
    shifts = rng.integers(-max_shift, max_shift + 1, size=B)
    scales = rng.uniform(*scale_range, size=B)
    idx = np.clip(np.arange(T)[None, :] - shifts[:, None], 0, T - 1)
    return x[np.arange(B)[:, None], idx] * scales[:, None, None, None]


# ---------------------------------------------------------------- dominant hand

def _displacement(block: np.ndarray) -> float | None:
    present = np.any(block != 0, axis=(1, 2))
    if not present.any():
        return None
    both = present[1:] & present[:-1]
    step = np.linalg.norm(np.diff(block, axis=0), axis=-1).sum(axis=-1)
    return float(step[both].sum())


def select_dominant_hand(pose_seq: np.ndarray) -> np.ndarray:
    """Return the 21-point block of the hand that moves more; ties go to the right.

    An all-zero hand block in a frame marks that hand missing there; frame
    pairs where it is missing do not contribute to its displacement.
    """
    pose_seq = np.asarray(pose_seq, dtype=np.float64)
    if pose_seq.ndim != 3 or pose_seq.shape[1:] != (75, 3):
        raise ValueError(f"expected (T, 75, 3), got {pose_seq.shape}")
    left = pose_seq[:, LEFT_HAND_OFFSET:LEFT_HAND_OFFSET + HAND_COUNT]
    right = pose_seq[:, RIGHT_HAND_OFFSET:RIGHT_HAND_OFFSET + HAND_COUNT]
    dl, dr = _displacement(left), _displacement(right)
    if dl is None and dr is None:
        raise DegenerateInputError("both hands are missing in every frame")
    if dr is None:
        return left.copy()
    if dl is None or dr >= dl:
        return right.copy()
    return left.copy()


# ---------------------------------------------------------------- dataset files

@dataclass
class DatasetFile:
    layout: str
    frames: int
    n_classes: int
    counts: tuple
    labels: np.ndarray
    phon: np.ndarray
    coords: np.ndarray
    version: int = DATASET_VERSION

    def __post_init__(self):
        self.counts = tuple(int(c) for c in self.counts)
        self.labels = np.asarray(self.labels, dtype=np.int32).reshape(-1)
        n = len(self.labels)
        nodes = LandmarkLayout.from_name(self.layout).node_count
        self.phon = np.asarray(self.phon, dtype=np.int32).reshape(n, 4)
        self.coords = np.asarray(self.coords, dtype=np.float32).reshape(n, self.frames, nodes, 3)
        if not np.all(np.isfinite(self.coords)):
            raise DatasetFormatError("coordinates must be finite")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DatasetFormatError("label outside [0, n_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def nodes(self) -> int:
        return self.coords.shape[2]

    def header(self) -> dict:
        return {"format": DATASET_FORMAT, "version": self.version, "layout": self.layout,
                "frames": self.frames, "nodes": self.nodes, "n_classes": self.n_classes,
                "counts": list(self.counts), "records": len(self)}

    def subset(self, idx) -> "DatasetFile":
        return DatasetFile(self.layout, self.frames, self.n_classes, self.counts,
                           self.labels[idx], self.phon[idx], self.coords[idx], self.version)

    def equals(self, other: "DatasetFile") -> bool:
        return (self.header() == other.header()
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.phon, other.phon)
                and self.coords.tobytes() == other.coords.tobytes())


def _record_dtype(frames: int, nodes: int) -> np.dtype:
    return np.dtype([("label", "<i4"), ("phon", "<i4", (4,)), ("coords", "<f4", (frames, nodes, 3))])


def write_dataset(ds: DatasetFile, path) -> None:
    rec = np.zeros(len(ds), dtype=_record_dtype(ds.frames, ds.nodes))
    rec["label"] = ds.labels
    rec["phon"] = ds.phon
    rec["coords"] = ds.coords
    with open(path, "wb") as fh:
        fh.write(json.dumps(ds.header(), sort_keys=True).encode() + b"\n")
        fh.write(rec.tobytes())


def read_dataset(path) -> DatasetFile:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DatasetFormatError(f"{path}: cannot read ({exc.strerror})") from exc
    nl = blob.find(b"\n")
    if nl < 0:
        raise DatasetFormatError(f"{path}: missing header line")
    try:
        head = json.loads(blob[:nl].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"{path}: corrupt header ({exc})") from exc
    if not isinstance(head, dict) or head.get("format") != DATASET_FORMAT:
        raise DatasetFormatError(f"{path}: not a {DATASET_FORMAT} file")
    if head.get("version") != DATASET_VERSION:
        raise DatasetFormatError(f"{path}: unsupported dataset version {head.get('version')!r}")
    try:
        frames, nodes, n = int(head["frames"]), int(head["nodes"]), int(head["records"])
        layout, K, counts = head["layout"], int(head["n_classes"]), head["counts"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"{path}: incomplete header ({exc})") from exc
    dt = _record_dtype(frames, nodes)
    start = nl + 1
    payload = len(blob) - start
    if payload < n * dt.itemsize:
        k = payload // dt.itemsize
        raise DatasetFormatError(
            f"{path}: truncated at record {k} (byte offset {start + k * dt.itemsize}); "
            f"expected {n} records of {dt.itemsize} bytes")
    if payload > n * dt.itemsize:
        raise DatasetFormatError(f"{path}: {payload - n * dt.itemsize} trailing bytes after record {n}")
    rec = np.frombuffer(blob, dtype=dt, count=n, offset=start)
    bad = ~np.isfinite(rec["coords"].reshape(n, frames * nodes * 3)).all(axis=1)
    if bad.any():
        k = int(np.argmax(bad))
        raise DatasetFormatError(f"{path}: non-finite coordinates in record {k} "
                                 f"(byte offset {start + k * dt.itemsize})")
    try:
        return DatasetFile(layout, frames, K, counts, rec["label"].copy(), rec["phon"].copy(),
                           rec["coords"].copy(), head["version"])
    except ValueError as exc:
        raise DatasetFormatError(f"{path}: {exc}") from exc


def write_label_map(names, path) -> None:
    Path(path).write_text("".join(f"{i}\t{name}\n" for i, name in enumerate(names)))


def read_label_map(path) -> list[str]:
    names = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        idx, sep, name = line.partition("\t")
        if not sep or not idx.isdigit() or int(idx) != len(names):
            raise DatasetFormatError(f"{path}: malformed label map line {lineno}")
        names.append(name)
    return names


def tuple_name(t) -> str:
    return "h{}_l{}_m{}_o{}".format(*t)


def parse_tuple_name(name: str) -> tuple:
    parts = name.split("_")
    if len(parts) != 4 or [p[0] for p in parts] != list("hlmo"):
        raise ValueError(f"not a component tuple name: {name!r}")
    return tuple(int(p[1:]) for p in parts)


# ---------------------------------------------------------------- synthetic data

@dataclass
class SyntheticSpec:
    inventory: tuple = (6, 5, 4, 3)
    samples_per_class: int = 20
    noise: float = 0.02
    train_frac: float = 0.6
    seed: int = 0
    frames: int = 30
    test_per_class: int = 5

    def __post_init__(self):
        self.inventory = tuple(int(m) for m in self.inventory)
        if len(self.inventory) != 4 or min(self.inventory) < 2:
            raise InvalidSpecError("inventory needs four sizes, each at least 2")
        if self.noise < 0:
            raise InvalidSpecError("noise must be non-negative")
        if not 0 < self.train_frac <= 1:
            raise InvalidSpecError("train_frac must be in (0, 1]")
        if self.samples_per_class < 1 or self.test_per_class < 0 or self.frames < 2:
            raise InvalidSpecError("bad sample or frame counts")


@dataclass
class SyntheticSplit:
    train: DatasetFile
    test_seen: DatasetFile
    test_unseen: DatasetFile
    names: list
    tuples: np.ndarray  # (K, 4), class index -> component values
    seen: np.ndarray = field(repr=False)  # class indices in training


def canonical_hand() -> np.ndarray:
    """A flat 21-point hand, wrist at the origin, palm size about 1."""
    pts = np.zeros((HAND_COUNT, 3))
    angles = np.deg2rad([-60.0, -20.0, 0.0, 18.0, 36.0])
    lengths = (0.45, 0.38, 0.3, 0.25)
    for f, (base, ang) in enumerate(zip(FINGER_BASES, angles)):
        d = np.array([np.sin(ang), np.cos(ang), 0.0])
        root = d * (0.6 if f == 0 else 1.0)
        pts[base] = root
        for j in range(1, 4):
            pts[base + j] = pts[base + j - 1] + d * lengths[j]
    return pts


def _rotation(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


def _trajectory(family: str, T: int, direction: np.ndarray, normal: np.ndarray, amp: float) -> np.ndarray:
    s = np.linspace(0.0, 1.0, T)[:, None]
    side = np.cross(normal, direction)
    if family == "still":
        path = np.zeros((T, 3))
    elif family == "line":
        path = (s - 0.5) * direction
    elif family == "arc":
        th = np.pi * s
        path = -np.cos(th) * 0.5 * direction + np.sin(th) * 0.5 * side
    elif family == "circle":
        th = 2 * np.pi * s
        path = 0.5 * (np.cos(th) - 1) * direction + 0.5 * np.sin(th) * side
    elif family == "zigzag":
        tri = 2 * np.abs(((4 * s) % 2) - 1) - 1
        path = (s - 0.5) * direction + 0.3 * tri * side
    else:
        raise ValueError(family)
    path = path - path.mean(axis=0)
    return amp * path


@dataclass
class Templates:
    hands: np.ndarray  # (m_h, 21, 3)
    locations: np.ndarray  # (m_l, 3)
    movements: np.ndarray  # (m_m, T, 3)
    rotations: np.ndarray  # (m_o, 3, 3)

    def compose(self, t) -> np.ndarray:
        h, l, m, o = t
        shape = self.hands[h] @ self.rotations[o].T
        return shape[None] + self.locations[l][None, None] + self.movements[m][:, None, :]


def curl_patterns(n: int, rng: np.random.Generator, levels=(0.0, 0.5, 1.0)) -> np.ndarray:
    """``n`` per-finger curl vectors from a graded grid, picked greedily to stay far apart."""
    grid = np.array(list(itertools.product(levels, repeat=5)))
    if n > len(grid):
        raise InvalidSpecError(f"at most {len(grid)} distinct handshapes")
    chosen = [int(rng.integers(len(grid)))]
    dmin = np.linalg.norm(grid - grid[chosen[0]], axis=1)
    for _ in range(n - 1):
        far = np.flatnonzero(dmin == dmin.max())
        k = int(far[rng.integers(len(far))])
        chosen.append(k)
        dmin = np.minimum(dmin, np.linalg.norm(grid - grid[k], axis=1))
    return grid[chosen]


def make_templates(inventory, T: int, rng: np.random.Generator) -> Templates:
    m_h, m_l, m_m, m_o = inventory
    base = canonical_hand()
    hands = np.empty((m_h, HAND_COUNT, 3))
    for v, curls in enumerate(curl_patterns(m_h, rng)):
        # bend each finger about its base, more strongly towards the tip
        shape = base.copy()
        for f, base_idx in enumerate(FINGER_BASES):
            for j in range(1, 4):
                k = base_idx + j
                bend = _rotation(np.array([1.0, 0.0, 0.0]), -curls[f] * 0.9 * j)
                shape[k] = shape[base_idx] + bend @ (base[k] - base[base_idx])
        shape += rng.normal(0.0, 0.05, size=shape.shape)
        shape[WRIST] = 0.0
        hands[v] = shape
    locations = rng.normal(0.0, LOCATION_SCALE, size=(m_l, 3))
    movements = np.empty((m_m, T, 3))
    for v in range(m_m):
        family = MOVEMENT_FAMILIES[v % len(MOVEMENT_FAMILIES)]
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        n = rng.normal(size=3)
        n -= (n @ d) * d
        n /= np.linalg.norm(n)
        movements[v] = _trajectory(family, T, d, n, amp=float(rng.uniform(*MOVEMENT_AMPLITUDE)))
    rotations = np.empty((m_o, 3, 3))
    for v in range(m_o):
        axis = rng.normal(size=3)
        rotations[v] = _rotation(axis, 2 * np.pi * v / m_o + rng.uniform(-0.2, 0.2))
    return Templates(hands, locations, movements, rotations)


def split_tuples(inventory, train_frac: float, rng: np.random.Generator, attempts: int = 64):
    """Seen class indices covering every component value; raises if impossible."""
    tuples = np.array(list(itertools.product(*[range(m) for m in inventory])))
    K = len(tuples)
    n_seen = int(round(train_frac * K))
    if n_seen < max(inventory):
        raise InvalidSpecError(f"{n_seen} seen classes cannot cover {max(inventory)} values of one component")
    for _ in range(attempts):
        seen = np.sort(rng.permutation(K)[:n_seen])
        if all(len(np.unique(tuples[seen, i])) == m for i, m in enumerate(inventory)):
            return tuples, seen
    raise InvalidSpecError("train fraction leaves some component value unseen in training")


def generate_synthetic(spec: SyntheticSpec, rng: np.random.Generator | None = None) -> SyntheticSplit:
    rng = make_rng(spec.seed) if rng is None else rng
    templates = make_templates(spec.inventory, spec.frames, rng)
    tuples, seen = split_tuples(spec.inventory, spec.train_frac, rng)
    K = len(tuples)
    unseen = np.setdiff1d(np.arange(K), seen)

    def draw(classes, per_class):
        labels = np.repeat(classes, per_class).astype(np.int32)
        coords = np.empty((len(labels), spec.frames, HAND_COUNT, 3))
        for i, k in enumerate(labels):
            coords[i] = templates.compose(tuples[k])
        if spec.noise > 0:
            coords += rng.normal(0.0, spec.noise, size=coords.shape)
        return DatasetFile("DominantHand21", spec.frames, K, spec.inventory, labels, tuples[labels], coords)

    train = draw(seen, spec.samples_per_class)
    test_seen = draw(seen, spec.test_per_class)
    test_unseen = draw(unseen, spec.test_per_class)
    return SyntheticSplit(train, test_seen, test_unseen, [tuple_name(t) for t in tuples], tuples, seen)


def stratified_split(labels: np.ndarray, frac: float, rng: np.random.Generator):
    """(train_idx, holdout_idx); each class with >= 2 samples sends round(frac * n), at least 1, to holdout."""
    labels = np.asarray(labels)
    hold = []
    for k in np.unique(labels):
        idx = np.flatnonzero(labels == k)
        if len(idx) < 2:
            continue
        n = min(len(idx) - 1, max(1, int(round(frac * len(idx)))))
        hold.extend(rng.permutation(idx)[:n])
    hold = np.sort(np.asarray(hold, dtype=int))
    keep = np.setdiff1d(np.arange(len(labels)), hold)
    return keep, hold
