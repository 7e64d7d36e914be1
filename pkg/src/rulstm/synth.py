"""Seeded synthetic datasets for verifying the training and fusion machinery.

Each action class owns one prototype vector per modality.  A sample of class
y at step t (of S) carries ``(t / S) * prototype + noise * eps``, so class
evidence ramps up toward the action start and prediction quality should
improve as the anticipation time shrinks.  With some per-sample probability a
modality is replaced by pure unit noise and recorded in the dataset metadata;
an attention-based fusion should learn to down-weight it.

Generation is fully determined by (config, seed): every sample draws from a
generator derived from the root seed and its own identity, so datasets are
reproducible byte-for-byte regardless of generation order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .data import (
    Dataset,
    FeatureStore,
    FeatureTable,
    SampleRecord,
    Vocabulary,
    write_manifest,
)
from .rng import Rng
from .timeline import TimelineSpec


class ConfigError(ValueError):
    """A configuration field has an invalid value (named in the message)."""


@dataclass
class SynthConfig:
    num_actions: int = 10
    modalities: dict[str, int] = field(
        default_factory=lambda: {"rgb": 16, "flow": 16, "obj": 8})
    train_samples: int = 200
    val_samples: int = 50
    noise: float = 1.0
    corruption: dict[str, float] = field(default_factory=dict)
    corruption_scale: float = 1.0
    timeline: TimelineSpec = field(default_factory=TimelineSpec)
    num_verbs: int | None = None
    num_nouns: int | None = None
    many_shot_threshold: int = 10

    def __post_init__(self):
        if self.num_actions < 1:
            raise ConfigError(f"num_actions must be >= 1, got {self.num_actions}")
        if not self.modalities:
            raise ConfigError("modalities must not be empty")
        for name, dim in self.modalities.items():
            if dim < 1:
                raise ConfigError(f"modalities[{name!r}] dim must be >= 1, got {dim}")
        if self.train_samples < 0 or self.val_samples < 0:
            raise ConfigError("train_samples/val_samples must be >= 0")
        if self.noise < 0:
            raise ConfigError(f"noise must be >= 0, got {self.noise}")
        if self.corruption_scale <= 0:
            raise ConfigError(
                f"corruption_scale must be > 0, got {self.corruption_scale}")
        if isinstance(self.corruption, (int, float)):
            self.corruption = {m: float(self.corruption) for m in self.modalities}
        for name, prob in self.corruption.items():
            if name not in self.modalities:
                raise ConfigError(f"corruption names unknown modality {name!r}")
            if not 0.0 <= prob <= 1.0:
                raise ConfigError(f"corruption[{name!r}] must be in [0, 1], got {prob}")
        verbs = self.num_verbs or max(1, math.isqrt(self.num_actions))
        nouns = self.num_nouns or -(-self.num_actions // verbs)
        if verbs * nouns < self.num_actions:
            raise ConfigError(
                f"num_verbs*num_nouns = {verbs * nouns} cannot cover "
                f"{self.num_actions} actions")
        self.num_verbs = verbs
        self.num_nouns = nouns

    def to_dict(self) -> dict:
        return {
            "num_actions": self.num_actions,
            "modalities": dict(self.modalities),
            "train_samples": self.train_samples,
            "val_samples": self.val_samples,
            "noise": self.noise,
            "corruption": dict(self.corruption),
            "corruption_scale": self.corruption_scale,
            "timeline": {"alpha": self.timeline.alpha,
                         "s_enc": self.timeline.s_enc,
                         "s_ant": self.timeline.s_ant},
            "num_verbs": self.num_verbs,
            "num_nouns": self.num_nouns,
            "many_shot_threshold": self.many_shot_threshold,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if "timeline" in d:
            d["timeline"] = TimelineSpec(**d["timeline"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def _make_vocabulary(config: SynthConfig, train_records) -> Vocabulary:
    verbs = [f"verb_{i:03d}" for i in range(config.num_verbs)]
    nouns = [f"noun_{i:03d}" for i in range(config.num_nouns)]
    actions = [(k % config.num_verbs, k // config.num_verbs)
               for k in range(config.num_actions)]
    verb_counts = np.zeros(len(verbs), dtype=int)
    noun_counts = np.zeros(len(nouns), dtype=int)
    action_counts = np.zeros(len(actions), dtype=int)
    for rec in train_records:
        action_counts[rec.action_id] += 1
        verb_counts[rec.verb_id] += 1
        noun_counts[rec.noun_id] += 1
    thr = config.many_shot_threshold
    return Vocabulary(
        verbs=verbs, nouns=nouns, actions=actions,
        many_shot_verbs=[int(i) for i in np.nonzero(verb_counts >= thr)[0]],
        many_shot_nouns=[int(i) for i in np.nonzero(noun_counts >= thr)[0]],
        many_shot_actions=[int(i) for i in np.nonzero(action_counts >= thr)[0]],
    )


def _synth_fps(spec: TimelineSpec) -> Fraction:
    alpha = Fraction(str(spec.alpha)).limit_denominator(10**6)
    return 1 / alpha


def synth_generate(config: SynthConfig, seed: int) -> Dataset:
    """Build the dataset in memory; same (config, seed) twice is bit-identical."""
    spec = config.timeline
    root = Rng(seed)
    fps = _synth_fps(spec)
    start_sec = spec.alpha * (spec.total_steps + 1)
    step_frames = [int(np.floor(spec.step_time(start_sec, t) * float(fps)))
                   for t in range(1, spec.total_steps + 1)]
    if any(b <= a for a, b in zip(step_frames, step_frames[1:])):
        raise ConfigError("timeline.alpha produces colliding snippet frames")

    prototypes = {
        m: root.derive(f"proto/{m}").normal((config.num_actions, dim))
        for m, dim in config.modalities.items()
    }

    store = FeatureStore()
    splits: dict[str, list[SampleRecord]] = {"train": [], "val": []}
    corrupted: dict[str, list[str]] = {}
    ramp = np.asarray([t / spec.total_steps
                       for t in range(1, spec.total_steps + 1)])

    for split, count in (("train", config.train_samples),
                         ("val", config.val_samples)):
        for i in range(count):
            video_id = f"{split}_{i:05d}"
            label = i % config.num_actions
            rng = root.derive(f"sample/{split}/{i}")
            bad = []
            for m, dim in config.modalities.items():
                if rng.uniform() < config.corruption.get(m, 0.0):
                    rows = config.corruption_scale * rng.normal(
                        (spec.total_steps, dim))
                    bad.append(m)
                else:
                    rows = (ramp[:, None] * prototypes[m][label]
                            + config.noise * rng.normal((spec.total_steps, dim)))
                # Store as the file format would: 32-bit rows, promoted back.
                rows = rows.astype(np.float32).astype(np.float64)
                store.add(m, video_id, FeatureTable(
                    np.asarray(step_frames, dtype=np.uint32), rows, fps))
            if bad:
                corrupted[video_id] = bad
            verb_id = label % config.num_verbs
            noun_id = label // config.num_verbs
            splits[split].append(SampleRecord(
                video_id, start_sec, start_sec + 1.0, verb_id, noun_id, label))

    vocab = _make_vocabulary(config, splits["train"])
    return Dataset(vocab, store, splits, corrupted)


def write_dataset(dataset: Dataset, out_dir, config: SynthConfig, seed: int):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    all_records = [r for split in dataset.splits.values() for r in split]
    write_manifest(out / "manifest.csv", all_records)
    dataset.vocab.save(out / "vocab.json")
    (out / "splits.json").write_text(json.dumps(
        {name: [r.video_id for r in records]
         for name, records in dataset.splits.items()},
        indent=2, sort_keys=True))
    (out / "meta.json").write_text(json.dumps(
        {"seed": seed, "config": config.to_dict(),
         "corrupted": dataset.corrupted},
        indent=2, sort_keys=True))
    dataset.store.save(out / "features")
