"""Evaluation metrics over prediction timelines.

All ranking metrics share one tie rule: among equal scores the lower class id
ranks first, so every metric is deterministic.  Aggregations accumulate in
plain ascending order (records, then classes), which keeps reports
bit-reproducible and lets tests compare against naive re-implementations
exactly.

Verb and noun metrics are always computed on probabilities marginalized from
the action softmax, never on separate predictions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Vocabulary
from .linalg import softmax
from .model import PredictionTimeline, marginalize
from .timeline import TimelineSpec


@dataclass
class EvalRecord:
    sample_id: str
    verb_id: int
    noun_id: int
    action_id: int
    timeline: PredictionTimeline


# ---------------------------------------------------------------------------
# per-record metrics

def rank_of(scores, truth: int) -> int:
    """0-based rank of ``truth``; equal scores rank lower ids first."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 0 <= truth < scores.shape[0]:
        raise ValueError(f"class {truth} outside [0, {scores.shape[0]})")
    s = scores[truth]
    better = int(np.sum(scores > s))
    tied_before = int(np.sum(scores[:truth] == s))
    return better + tied_before


def topk_hit(scores, truth: int, k: int) -> bool:
    scores = np.asarray(scores, dtype=np.float64)
    if k < 1 or k > scores.shape[0]:
        raise ValueError(f"k={k} outside [1, {scores.shape[0]}]")
    return rank_of(scores, truth) < k


def mean_topk_recall(score_rows, truths, k: int, classes) -> tuple[float, int]:
    """Unweighted mean over classes of the per-class top-k hit fraction.

    ``classes`` is the class set to average over (e.g. the many-shot list);
    classes without test instances are excluded and their count is returned
    alongside the percentage.
    """
    score_rows = np.asarray(score_rows, dtype=np.float64)
    truths = [int(t) for t in truths]
    if score_rows.shape[0] == 0:
        raise ValueError("mean_topk_recall needs at least one record")
    classes = sorted(set(int(c) for c in classes))
    if not classes:
        raise ValueError("empty class set")
    total = 0.0
    present = 0
    excluded = 0
    for c in classes:
        idx = [i for i, t in enumerate(truths) if t == c]
        if not idx:
            excluded += 1
            continue
        hits = sum(1 for i in idx if rank_of(score_rows[i], c) < k)
        total += hits / len(idx)
        present += 1
    if present == 0:
        raise ValueError("no class in the set has test instances")
    return 100.0 * total / present, excluded


def time_to_action(timeline: PredictionTimeline, truth: int, k: int,
                   scores=None) -> float:
    """Largest anticipation time whose prediction ranks ``truth`` in the
    top k; 0 when no step does."""
    rows = timeline.fused_scores if scores is None else scores
    if rows.shape[0] == 0:
        raise ValueError("empty timeline")
    taus = timeline.anticipation_times
    best = 0.0
    for t in range(rows.shape[0]):
        if rank_of(rows[t], truth) < k and taus[t] > best:
            best = taus[t]
    return best


def min_observation_ratio(timeline: PredictionTimeline, truth: int,
                          scores=None) -> tuple[float, bool]:
    """Smallest observed fraction at which the top-1 prediction is correct.

    Returns (percentage, ever_correct); records that are never correct
    saturate at 100% and are flagged so aggregation can count them.
    """
    rows = timeline.fused_scores if scores is None else scores
    if rows.shape[0] == 0:
        raise ValueError("empty timeline")
    ratios = timeline.observation_ratios
    for t in range(rows.shape[0]):
        if rank_of(rows[t], truth) == 0:
            return 100.0 * ratios[t], True
    return 100.0, False


# ---------------------------------------------------------------------------
# aggregation

TARGETS = ("verb", "noun", "action")


def _truth(record: EvalRecord, target: str) -> int:
    return {"verb": record.verb_id, "noun": record.noun_id,
            "action": record.action_id}[target]


def _target_scores(record: EvalRecord, vocab: Vocabulary | None):
    """Per-step score rows for action plus (if vocab) verb and noun."""
    action = record.timeline.fused_scores
    out = {"action": action}
    if vocab is not None:
        probs = softmax(action)
        verb, noun = marginalize(probs, vocab)
        out["verb"] = verb
        out["noun"] = noun
    return out


def _check_homogeneous(records: list[EvalRecord]) -> TimelineSpec:
    if not records:
        raise ValueError("no records to aggregate")
    spec = records[0].timeline.spec
    for rec in records:
        if rec.timeline.spec != spec:
            raise ValueError("records carry inconsistent timeline specs")
    return spec


def _nearest_step(values: list[float], wanted: float) -> int:
    return min(range(len(values)), key=lambda i: (abs(values[i] - wanted), i))


@dataclass
class MetricsReport:
    mode: str
    payload: dict

    def to_json(self) -> str:
        return json.dumps({"mode": self.mode, **self.payload},
                          indent=2, sort_keys=True)

    def save_json(self, path):
        Path(path).write_text(self.to_json())

    def to_csv(self) -> str:
        """One wide row of percentages (2 decimals), plot-ready."""
        cols: list[tuple[str, float]] = []
        p = self.payload
        if self.mode == "anticipation":
            targets = [t for t in TARGETS if t in p["accuracy"]]
            for tau, v in zip(p["taus"], p["accuracy"]["action"]["top5"]):
                cols.append((f"top5_action@{tau:g}s", v))
            ref = f"{p['tau_ref']:g}s"
            step = p["tau_ref_index"]
            for target in targets:
                cols.append((f"top5_{target}@{ref}",
                             p["accuracy"][target]["top5"][step]))
            for target in targets:
                cols.append((f"recall5_{target}@{ref}",
                             p["recall5"][target]["value"]))
            for target in targets:
                cols.append((f"tta5_{target}", p["tta5"][target]))
        elif self.mode == "early":
            targets = [t for t in TARGETS if t in p["mor"]]
            for rate, v in zip(p["rates"], p["accuracy"]["action"]["top1"]):
                cols.append((f"top1_action@{100 * rate:g}%", v))
            for target in targets:
                cols.append((f"mor_{target}", p["mor"][target]["mean"]))
            cols.append(("avg_top1_action", p["avg_top1"]["action"]))
        elif self.mode == "recognition":
            for target in [t for t in TARGETS if t in p["top1"]]:
                cols.append((f"top1_{target}", p["top1"][target]))
        else:
            raise ValueError(f"unknown report mode {self.mode}")
        header = ",".join(name for name, _ in cols)
        row = ",".join(f"{v:.2f}" for _, v in cols)
        return header + "\n" + row + "\n"

    def save_csv(self, path):
        Path(path).write_text(self.to_csv())


def _accuracy_tables(records, per_target_rows, vocab, ks=(1, 5)):
    """accuracy[target][topK][step] as percentages."""
    n = len(records)
    steps = per_target_rows[0]["action"].shape[0]
    targets = list(per_target_rows[0])
    acc = {target: {f"top{k}": [] for k in ks} for target in targets}
    for target in targets:
        num_classes = per_target_rows[0][target].shape[1]
        for k in ks:
            # k is clamped: top-k over fewer than k classes is trivially a hit.
            k_eff = min(k, num_classes)
            for step in range(steps):
                hits = 0
                for rec, rows in zip(records, per_target_rows):
                    if rank_of(rows[target][step], _truth(rec, target)) < k_eff:
                        hits += 1
                acc[target][f"top{k}"].append(100.0 * hits / n)
    return acc


def aggregate(records: list[EvalRecord], *, mode: str = "anticipation",
              vocab: Vocabulary | None = None,
              recall_at: float = 1.0) -> MetricsReport:
    """Compute every report metric for one homogeneous record set."""
    spec = _check_homogeneous(records)
    per_target_rows = [_target_scores(rec, vocab) for rec in records]
    targets = list(per_target_rows[0])
    n = len(records)

    if mode == "anticipation":
        taus = spec.anticipation_times()
        acc = _accuracy_tables(records, per_target_rows, vocab)
        ref_idx = _nearest_step(taus, recall_at)

        recall = {}
        for target in targets:
            if vocab is None and target != "action":
                continue
            class_sets = {
                "verb": vocab.many_shot_verbs if vocab else [],
                "noun": vocab.many_shot_nouns if vocab else [],
                "action": vocab.many_shot_actions if vocab else [],
            }.get(target, [])
            if not class_sets:
                size = per_target_rows[0][target].shape[1]
                class_sets = list(range(size))
            rows = np.stack([r[target][ref_idx] for r in per_target_rows])
            truths = [_truth(rec, target) for rec in records]
            value, excluded = mean_topk_recall(rows, truths, 5, class_sets)
            recall[target] = {"value": value, "excluded_classes": excluded,
                              "class_set_size": len(class_sets)}

        tta = {}
        for target in targets:
            total = 0.0
            for rec, rows in zip(records, per_target_rows):
                total += time_to_action(rec.timeline, _truth(rec, target), 5,
                                        scores=rows[target])
            tta[target] = total / n

        payload = {
            "num_records": n,
            "taus": taus,
            "tau_ref": taus[ref_idx],
            "tau_ref_index": ref_idx,
            "accuracy": acc,
            "recall5": recall,
            "tta5": tta,
        }
        return MetricsReport("anticipation", payload)

    if mode == "early":
        rates = spec.observation_ratios()
        acc = _accuracy_tables(records, per_target_rows, vocab, ks=(1, 5))
        mor = {}
        for target in targets:
            total = 0.0
            never = 0
            for rec, rows in zip(records, per_target_rows):
                value, ever = min_observation_ratio(
                    rec.timeline, _truth(rec, target), scores=rows[target])
                total += value
                never += 0 if ever else 1
            mor[target] = {"mean": total / n, "never_correct": never}
        avg_top1 = {target: sum(acc[target]["top1"]) / len(rates)
                    for target in targets}
        payload = {
            "num_records": n,
            "rates": rates,
            "accuracy": acc,
            "mor": mor,
            "avg_top1": avg_top1,
        }
        return MetricsReport("early", payload)

    if mode == "recognition":
        top1 = {}
        for target in targets:
            hits = 0
            for rec, rows in zip(records, per_target_rows):
                if rank_of(rows[target][-1], _truth(rec, target)) == 0:
                    hits += 1
            top1[target] = 100.0 * hits / n
        return MetricsReport("recognition", {"num_records": n, "top1": top1})

    raise ValueError(f"unknown evaluation mode {mode!r}")


# ---------------------------------------------------------------------------
# prediction dumps

def write_dump(path, records: list[EvalRecord]):
    """JSON-lines dump: one record per sample with per-step score arrays."""
    with open(path, "w") as fh:
        for rec in records:
            t = rec.timeline
            fh.write(json.dumps({
                "sample_id": rec.sample_id,
                "verb_id": rec.verb_id,
                "noun_id": rec.noun_id,
                "action_id": rec.action_id,
                "alpha": t.spec.alpha,
                "s_enc": t.spec.s_enc,
                "s_ant": t.spec.s_ant,
                "modalities": t.modalities,
                "scores": [list(row) for row in t.fused_scores],
                "weights": [list(row) for row in t.fusion_weights],
            }) + "\n")


def read_dump(path) -> list[EvalRecord]:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            spec = TimelineSpec(d["alpha"], d["s_enc"], d["s_ant"])
            timeline = PredictionTimeline(
                spec=spec,
                modalities=d["modalities"],
                fused_scores=np.asarray(d["scores"], dtype=np.float64),
                modality_scores=None,
                fusion_weights=np.asarray(d["weights"], dtype=np.float64),
            )
            records.append(EvalRecord(d["sample_id"], d["verb_id"],
                                      d["noun_id"], d["action_id"], timeline))
    return records
