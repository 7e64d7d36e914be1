"""Dataset manifests, vocabulary, feature stores and frame alignment.

File formats owned by this module:

  - manifest CSV with header ``video_id,start_sec,end_sec,verb_id,noun_id,action_id``;
  - vocabulary JSON: verb/noun name lists, action (verb_id, noun_id) pairs,
    optional many-shot id lists;
  - feature container (one file per video and modality): magic ``RUFT``,
    u32 version=1, u32 dim, u32 fps numerator, u32 fps denominator, u64 row
    count, the row index table (u32 frame ids, strictly increasing), then the
    rows as little-endian 32-bit floats.  Rows are promoted to float64 in
    memory;
  - detections as JSON lines ``{"video_id":…, "frame":…, "dets":[[class,score],…]}``.

Snippet features are looked up by flooring the snippet time to a frame index
and taking the stored row at or before that frame, clamped to the first row
when the time precedes the start of the video.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .timeline import TimelineSpec

RUFT_MAGIC = b"RUFT"
RUFT_VERSION = 1

MANIFEST_HEADER = ["video_id", "start_sec", "end_sec",
                   "verb_id", "noun_id", "action_id"]


# ---------------------------------------------------------------------------
# vocabulary

@dataclass
class Vocabulary:
    verbs: list[str]
    nouns: list[str]
    actions: list[tuple[int, int]]          # action id -> (verb id, noun id)
    many_shot_verbs: list[int] = field(default_factory=list)
    many_shot_nouns: list[int] = field(default_factory=list)
    many_shot_actions: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.actions = [tuple(a) for a in self.actions]
        seen = set()
        for a, (v, n) in enumerate(self.actions):
            if not (0 <= v < len(self.verbs)) or not (0 <= n < len(self.nouns)):
                raise ValueError(f"action {a} maps to invalid pair ({v}, {n})")
            if (v, n) in seen:
                raise ValueError(f"duplicate (verb, noun) pair ({v}, {n})")
            seen.add((v, n))
        for name, ids, bound in (
            ("many_shot_verbs", self.many_shot_verbs, len(self.verbs)),
            ("many_shot_nouns", self.many_shot_nouns, len(self.nouns)),
            ("many_shot_actions", self.many_shot_actions, len(self.actions)),
        ):
            if any(not 0 <= i < bound for i in ids):
                raise ValueError(f"{name} contains out-of-range ids")

    @property
    def num_actions(self) -> int:
        return len(self.actions)

    def verb_of(self, action_id: int) -> int:
        return self.actions[action_id][0]

    def noun_of(self, action_id: int) -> int:
        return self.actions[action_id][1]

    def to_json(self) -> str:
        payload = {
            "verbs": self.verbs,
            "nouns": self.nouns,
            "actions": [list(a) for a in self.actions],
            "many_shot_verbs": self.many_shot_verbs,
            "many_shot_nouns": self.many_shot_nouns,
            "many_shot_actions": self.many_shot_actions,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        d = json.loads(text)
        return cls(
            verbs=d["verbs"], nouns=d["nouns"],
            actions=[tuple(a) for a in d["actions"]],
            many_shot_verbs=d.get("many_shot_verbs", []),
            many_shot_nouns=d.get("many_shot_nouns", []),
            many_shot_actions=d.get("many_shot_actions", []),
        )

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_json(Path(path).read_text())


# ---------------------------------------------------------------------------
# manifest

@dataclass(frozen=True)
class SampleRecord:
    video_id: str
    start_sec: float
    end_sec: float
    verb_id: int
    noun_id: int
    action_id: int

    def __post_init__(self):
        if not self.start_sec < self.end_sec:
            raise ValueError(
                f"{self.video_id}: start {self.start_sec} must precede end {self.end_sec}")


def write_manifest(path, records: list[SampleRecord]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for r in records:
            writer.writerow([r.video_id, repr(r.start_sec), repr(r.end_sec),
                             r.verb_id, r.noun_id, r.action_id])


def read_manifest(path, vocab: Vocabulary | None = None) -> list[SampleRecord]:
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != MANIFEST_HEADER:
            raise ValueError(f"unexpected manifest header {header}")
        for row in reader:
            rec = SampleRecord(row[0], float(row[1]), float(row[2]),
                               int(row[3]), int(row[4]), int(row[5]))
            if vocab is not None:
                if not 0 <= rec.action_id < vocab.num_actions:
                    raise ValueError(f"{rec.video_id}: action id {rec.action_id} "
                                     f"outside vocabulary")
                if vocab.actions[rec.action_id] != (rec.verb_id, rec.noun_id):
                    raise ValueError(f"{rec.video_id}: verb/noun ids disagree with "
                                     f"action {rec.action_id}")
            records.append(rec)
    return records


# ---------------------------------------------------------------------------
# feature tables / stores

@dataclass
class FeatureTable:
    """Frame-indexed feature rows for one (video, modality) pair."""

    frames: np.ndarray   # (N,) uint32, strictly increasing
    rows: np.ndarray     # (N, D) float64 in memory
    fps: Fraction

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.uint32)
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.frames.ndim != 1 or self.rows.ndim != 2:
            raise ValueError("frames must be 1-D and rows 2-D")
        if len(self.frames) != len(self.rows):
            raise ValueError("frame index table and rows disagree in length")
        if len(self.frames) == 0:
            raise ValueError("feature table is empty")
        if np.any(np.diff(self.frames.astype(np.int64)) <= 0):
            raise ValueError("frame indices must be strictly increasing")

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def row_at_or_before(self, frame: int) -> np.ndarray:
        """Latest stored row whose frame id is <= frame (clamped to the first)."""
        pos = int(np.searchsorted(self.frames, frame, side="right")) - 1
        return self.rows[max(pos, 0)]


def write_feature_table(path, table: FeatureTable):
    n, dim = table.rows.shape
    with open(path, "wb") as fh:
        fh.write(RUFT_MAGIC)
        fh.write(struct.pack("<IIIIQ", RUFT_VERSION, dim,
                             table.fps.numerator, table.fps.denominator, n))
        fh.write(table.frames.astype("<u4").tobytes())
        fh.write(table.rows.astype("<f4").tobytes())


def read_feature_table(path) -> FeatureTable:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != RUFT_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        version, dim, fps_num, fps_den, n = struct.unpack("<IIIIQ", fh.read(24))
        if version != RUFT_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        frames = np.frombuffer(fh.read(4 * n), dtype="<u4").copy()
        raw = np.frombuffer(fh.read(4 * n * dim), dtype="<f4")
        rows = raw.reshape(n, dim).astype(np.float64)
    return FeatureTable(frames, rows, Fraction(fps_num, fps_den))


class FeatureStore:
    """In-memory map of (modality, video) -> FeatureTable."""

    def __init__(self):
        self._tables: dict[tuple[str, str], FeatureTable] = {}

    def add(self, modality: str, video_id: str, table: FeatureTable):
        key = (modality, video_id)
        existing_dim = self.dim(modality)
        if existing_dim is not None and existing_dim != table.dim:
            raise ValueError(
                f"{modality}: dim {table.dim} conflicts with existing {existing_dim}")
        self._tables[key] = table

    def get(self, modality: str, video_id: str) -> FeatureTable:
        try:
            return self._tables[(modality, video_id)]
        except KeyError:
            raise KeyError(f"no features for video {video_id!r}, "
                           f"modality {modality!r}") from None

    def dim(self, modality: str) -> int | None:
        for (m, _), table in self._tables.items():
            if m == modality:
                return table.dim
        return None

    @property
    def modalities(self) -> list[str]:
        return sorted({m for m, _ in self._tables})

    def videos(self, modality: str) -> list[str]:
        return sorted(v for m, v in self._tables if m == modality)

    def save(self, root):
        root = Path(root)
        for (modality, video_id), table in sorted(self._tables.items()):
            mod_dir = root / modality
            mod_dir.mkdir(parents=True, exist_ok=True)
            write_feature_table(mod_dir / f"{video_id}.ruft", table)

    @classmethod
    def load(cls, root, modalities: list[str] | None = None) -> "FeatureStore":
        root = Path(root)
        store = cls()
        if not root.is_dir():
            raise FileNotFoundError(f"feature directory {root} does not exist")
        for mod_dir in sorted(root.iterdir()):
            if not mod_dir.is_dir():
                continue
            if modalities is not None and mod_dir.name not in modalities:
                continue
            for path in sorted(mod_dir.glob("*.ruft")):
                store.add(mod_dir.name, path.stem, read_feature_table(path))
        return store


def sample_features(store: FeatureStore, video_id: str, modality: str,
                    spec: TimelineSpec, start_sec: float) -> np.ndarray:
    """S x D feature matrix for one sample, one modality.

    Row t holds the stored feature at frame floor(step_time * fps); steps
    whose time precedes the first stored frame repeat the first row.
    """
    table = store.get(modality, video_id)
    fps = float(table.fps)
    out = np.empty((spec.total_steps, table.dim))
    for t in range(1, spec.total_steps + 1):
        time = spec.step_time(start_sec, t)
        frame = int(np.floor(time * fps))
        out[t - 1] = table.row_at_or_before(max(frame, 0))
    return out


def sample_segment_features(store: FeatureStore, video_id: str, modality: str,
                            n_snippets: int, start_sec: float,
                            end_sec: float) -> np.ndarray:
    """N x D features sampled uniformly inside [start_sec, end_sec].

    Snippet t (1-based) is taken at start + (t/N) * (end - start), so row t
    corresponds to an observed fraction of t/N of the segment.
    """
    if n_snippets < 1:
        raise ValueError(f"need at least one snippet, got {n_snippets}")
    table = store.get(modality, video_id)
    fps = float(table.fps)
    out = np.empty((n_snippets, table.dim))
    span = end_sec - start_sec
    for t in range(1, n_snippets + 1):
        frame = int(np.floor((start_sec + span * t / n_snippets) * fps))
        out[t - 1] = table.row_at_or_before(max(frame, 0))
    return out


def materialize_features(store: FeatureStore, records: list[SampleRecord],
                         modalities: list[str], spec: TimelineSpec,
                         task: str = "anticipation") -> dict[str, np.ndarray]:
    """Stack per-sample feature matrices into (N, S, D) arrays per modality.

    ``task`` picks the sampling window: "anticipation" reads the observed
    span before the action starts, "early" reads uniform snippets of the
    action segment itself.
    """
    if task not in ("anticipation", "early"):
        raise ValueError(f"unknown task {task!r}")

    def one(record, modality):
        if task == "anticipation":
            return sample_features(store, record.video_id, modality, spec,
                                   record.start_sec)
        return sample_segment_features(store, record.video_id, modality,
                                       spec.total_steps, record.start_sec,
                                       record.end_sec)

    out = {}
    for modality in modalities:
        out[modality] = np.stack([
            one(r, modality) for r in records
        ]) if records else np.zeros((0, spec.total_steps, store.dim(modality) or 0))
    return out


# ---------------------------------------------------------------------------
# object detections -> bag-of-objects features

def bag_of_objects(detections, num_classes: int) -> np.ndarray:
    """Per-class sums of detection confidences.

    ``detections`` is an iterable of (class_id, score).  Scores for each
    class are accumulated in sorted order, which makes the result exactly
    invariant to the order detections are listed in.
    """
    out = np.zeros(num_classes)
    by_class: dict[int, list[float]] = {}
    for class_id, score in detections:
        class_id = int(class_id)
        if not 0 <= class_id < num_classes:
            raise ValueError(f"detection class {class_id} outside [0, {num_classes})")
        by_class.setdefault(class_id, []).append(float(score))
    for class_id, scores in by_class.items():
        total = 0.0
        for s in sorted(scores):
            total += s
        out[class_id] = total
    return out


def read_detections_jsonl(path) -> dict[str, dict[int, list[tuple[int, float]]]]:
    """Parse detection records into {video_id: {frame: [(class, score), ...]}}."""
    videos: dict[str, dict[int, list[tuple[int, float]]]] = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            frame_map = videos.setdefault(rec["video_id"], {})
            frame_map.setdefault(int(rec["frame"]), []).extend(
                (int(c), float(s)) for c, s in rec["dets"])
    return videos


def write_detections_jsonl(path, videos):
    with open(path, "w") as fh:
        for video_id in sorted(videos):
            for frame in sorted(videos[video_id]):
                dets = [[int(c), float(s)] for c, s in videos[video_id][frame]]
                fh.write(json.dumps({"video_id": video_id, "frame": frame,
                                     "dets": dets}) + "\n")


def detections_to_table(frame_map: dict[int, list[tuple[int, float]]],
                        num_classes: int, fps: Fraction) -> FeatureTable:
    """Bag-of-objects feature table over the frames that carry detections."""
    frames = sorted(frame_map)
    if not frames:
        raise ValueError("no detection frames for this video")
    rows = np.stack([bag_of_objects(frame_map[f], num_classes) for f in frames])
    return FeatureTable(np.asarray(frames, dtype=np.uint32), rows, fps)


# ---------------------------------------------------------------------------
# on-disk dataset bundle

@dataclass
class Dataset:
    """Everything a training or evaluation run needs, loaded in memory."""

    vocab: Vocabulary
    store: FeatureStore
    splits: dict[str, list[SampleRecord]]
    corrupted: dict[str, list[str]] = field(default_factory=dict)

    def records(self, split: str) -> list[SampleRecord]:
        if split not in self.splits:
            raise KeyError(f"dataset has no split {split!r} "
                           f"(available: {sorted(self.splits)})")
        return self.splits[split]


def load_dataset(root, modalities: list[str] | None = None) -> Dataset:
    root = Path(root)
    vocab = Vocabulary.load(root / "vocab.json")
    records = read_manifest(root / "manifest.csv", vocab)
    by_video = {r.video_id: r for r in records}
    splits_path = root / "splits.json"
    if splits_path.exists():
        raw = json.loads(splits_path.read_text())
        splits = {name: [by_video[v] for v in videos]
                  for name, videos in raw.items()}
    else:
        splits = {"all": records}
    store = FeatureStore.load(root / "features", modalities)
    corrupted = {}
    meta_path = root / "meta.json"
    if meta_path.exists():
        corrupted = json.loads(meta_path.read_text()).get("corrupted", {})
    return Dataset(vocab, store, splits, corrupted)
