"""Three-stage training protocol with early stopping.

Stage 1 pre-trains each branch in sequence-completion mode (the unrolling
cell reads future in-window features).  Stage 2 fine-tunes each branch on the
anticipation objective.  Stage 3 assembles the branches into the fusion model
and fine-tunes end-to-end (only meaningful for attention fusion; fixed-weight
fusion has nothing to train jointly).

Every stage runs mini-batch SGD with momentum on the step-averaged
cross-entropy loss, shuffles with a per-epoch generator derived from the run
seed, and selects the epoch with the best validation metric (earliest epoch
on ties).  Given (seed, config, data) every checkpoint byte is reproducible;
wall-clock times appear only in the per-epoch CSV log, never in checkpoints
or report summaries.
"""

from __future__ import annotations

import io
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, materialize_features
from .metrics import rank_of
from .model import FusionModel, RUBranchParams, branch_backward, branch_forward
from .nn import (
    DropoutSpec,
    SgdMomentum,
    clip_global_norm,
    collect_blocks,
    cross_entropy_timeline,
    zero_grads,
)
from .rng import Rng
from .synth import ConfigError
from .timeline import TimelineSpec


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    clip_norm: float | None = 5.0
    hidden_size: int = 1024
    dropout_p: float = 0.8
    resample_dropout_per_step: bool = True
    timeline: TimelineSpec = field(default_factory=TimelineSpec)
    modalities: list[str] | None = None      # None = all modalities in the data
    fusion: str = "matt"
    architecture: str = "ru"                 # "bl" = rolling-only baseline
    use_scp: bool = True
    scp_epochs: dict | int = 100
    branch_epochs: dict | int = 100
    fusion_epochs: int = 100
    early_stop_metric: str = "top5_action"   # or "avg_top1_action"
    early_stop_tau: float = 1.0
    freeze_branches_in_fusion: bool = False
    late_weights: list[float] | None = None
    task: str = "anticipation"               # "early" = early recognition

    def __post_init__(self):
        if self.task not in ("anticipation", "early"):
            raise ConfigError(f"task must be anticipation or early, got {self.task!r}")
        if self.task == "early" and self.timeline.s_enc != 0:
            raise ConfigError("task 'early' requires timeline.s_enc = 0")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.hidden_size < 1:
            raise ConfigError(f"hidden_size must be >= 1, got {self.hidden_size}")
        if self.fusion not in ("late", "early", "matt"):
            raise ConfigError(f"fusion must be late/early/matt, got {self.fusion!r}")
        if self.architecture not in ("ru", "bl"):
            raise ConfigError(f"architecture must be ru or bl, got {self.architecture!r}")
        if self.modalities is not None and not self.modalities:
            raise ConfigError("modalities must be a non-empty list or null")
        for name in ("scp_epochs", "branch_epochs", "fusion_epochs"):
            value = getattr(self, name)
            counts = value.values() if isinstance(value, dict) else [value]
            if any(int(v) < 0 for v in counts):
                raise ConfigError(f"{name} must be >= 0")
        if self.early_stop_metric not in ("top5_action", "avg_top1_action"):
            raise ConfigError(
                f"early_stop_metric must be top5_action or avg_top1_action, "
                f"got {self.early_stop_metric!r}")

    def epochs_for(self, stage: str, modality: str | None = None) -> int:
        value = {"scp": self.scp_epochs, "branch": self.branch_epochs,
                 "fusion": self.fusion_epochs}[stage]
        if isinstance(value, dict):
            if modality not in value:
                raise ConfigError(f"{stage}_epochs has no entry for {modality!r}")
            return int(value[modality])
        return int(value)

    def dropout_spec(self) -> DropoutSpec:
        return DropoutSpec(self.dropout_p, self.resample_dropout_per_step)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "clip_norm": self.clip_norm,
            "hidden_size": self.hidden_size,
            "dropout_p": self.dropout_p,
            "resample_dropout_per_step": self.resample_dropout_per_step,
            "timeline": {"alpha": self.timeline.alpha,
                         "s_enc": self.timeline.s_enc,
                         "s_ant": self.timeline.s_ant},
            "modalities": self.modalities,
            "fusion": self.fusion,
            "architecture": self.architecture,
            "use_scp": self.use_scp,
            "scp_epochs": self.scp_epochs,
            "branch_epochs": self.branch_epochs,
            "fusion_epochs": self.fusion_epochs,
            "early_stop_metric": self.early_stop_metric,
            "early_stop_tau": self.early_stop_tau,
            "freeze_branches_in_fusion": self.freeze_branches_in_fusion,
            "late_weights": self.late_weights,
            "task": self.task,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "timeline" in d:
            d["timeline"] = TimelineSpec(**d["timeline"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


@dataclass
class TrainData:
    """Materialized feature arrays for one run."""

    features: dict[str, np.ndarray]          # modality -> (N, S, D)
    labels: np.ndarray                       # (N,)
    val_features: dict[str, np.ndarray]
    val_labels: np.ndarray
    spec: TimelineSpec
    num_actions: int

    @property
    def num_samples(self) -> int:
        return len(self.labels)

    @property
    def has_validation(self) -> bool:
        return len(self.val_labels) > 0


def build_train_data(dataset: Dataset, cfg: TrainConfig,
                     train_split: str = "train",
                     val_split: str = "val") -> TrainData:
    modalities = cfg.modalities or dataset.store.modalities
    train_records = dataset.records(train_split)
    val_records = dataset.records(val_split) if val_split in dataset.splits else []
    if not train_records:
        raise ValueError(f"split {train_split!r} is empty")
    spec = cfg.timeline
    return TrainData(
        features=materialize_features(dataset.store, train_records, modalities,
                                      spec, cfg.task),
        labels=np.asarray([r.action_id for r in train_records]),
        val_features=materialize_features(dataset.store, val_records, modalities,
                                          spec, cfg.task),
        val_labels=np.asarray([r.action_id for r in val_records], dtype=int),
        spec=spec,
        num_actions=dataset.vocab.num_actions,
    )


# ---------------------------------------------------------------------------
# logs and early stopping

@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    val_top1: list[float]
    val_top5: list[float]
    selection: float
    wall_time: float


@dataclass
class TrainLog:
    stage: str
    modality: str | None
    taus: list[float]
    rows: list[EpochRow] = field(default_factory=list)
    selected_epoch: int | None = None

    def to_csv(self) -> str:
        out = io.StringIO()
        tau_cols = [f"top1@{tau:g}" for tau in self.taus] + \
                   [f"top5@{tau:g}" for tau in self.taus]
        out.write(",".join(["epoch", "train_loss", *tau_cols,
                            "selection", "wall_time"]) + "\n")
        for r in self.rows:
            cells = [str(r.epoch), repr(r.train_loss)]
            cells += [repr(v) for v in r.val_top1]
            cells += [repr(v) for v in r.val_top5]
            cells += [repr(r.selection), f"{r.wall_time:.3f}"]
            out.write(",".join(cells) + "\n")
        return out.getvalue()

    def summary(self) -> dict:
        """Deterministic digest (no wall-clock): suitable for reports."""
        return {
            "stage": self.stage,
            "modality": self.modality,
            "epochs": len(self.rows),
            "taus": self.taus,
            "train_loss": [r.train_loss for r in self.rows],
            "selection": [r.selection for r in self.rows],
            "selected_epoch": self.selected_epoch,
        }


def early_stop_select(log: TrainLog) -> int:
    """Earliest epoch achieving the maximum selection metric (1-based)."""
    if not log.rows:
        raise ValueError("empty training log")
    values = [r.selection for r in log.rows]
    if any(np.isnan(v) for v in values):
        raise ValueError("selection metric missing for some epochs")
    best = max(values)
    return values.index(best) + 1


# ---------------------------------------------------------------------------
# shared epoch machinery

def _val_metrics(scores: np.ndarray, labels: np.ndarray,
                 taus: list[float], cfg: TrainConfig):
    """(top1 per step, top5 per step, selection value) from (N, T, K) scores."""
    n, t_count, k = scores.shape
    if n == 0:
        nan = [float("nan")] * t_count
        return nan, nan, float("nan")
    top1, top5 = [], []
    for t in range(t_count):
        hits1 = hits5 = 0
        for i in range(n):
            rank = rank_of(scores[i, t], int(labels[i]))
            hits1 += rank < 1
            hits5 += rank < min(5, k)
        top1.append(100.0 * hits1 / n)
        top5.append(100.0 * hits5 / n)
    if cfg.early_stop_metric == "avg_top1_action":
        selection = sum(top1) / len(top1)
    else:
        idx = min(range(len(taus)),
                  key=lambda i: (abs(taus[i] - cfg.early_stop_tau), i))
        selection = top5[idx]
    return top1, top5, selection


def _snapshot(blocks: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {name: arr.copy() for name, arr in blocks.items()}


def _restore(blocks: dict[str, np.ndarray], snap: dict[str, np.ndarray]):
    for name, arr in blocks.items():
        arr[...] = snap[name]


@dataclass
class StageResult:
    log: TrainLog
    optimizer: SgdMomentum
    best_blocks: dict[str, np.ndarray]
    best_velocity: dict[str, np.ndarray]


def _run_stage(stage: str, modality: str | None, epochs: int,
               forward_loss_backward, evaluate, blocks, cfg: TrainConfig,
               rng: Rng, n_samples: int, taus: list[float]) -> StageResult:
    """Generic epoch loop: shuffle, batch, step, validate, track the best."""
    log = TrainLog(stage=stage, modality=modality, taus=taus)
    optimizer = SgdMomentum(cfg.learning_rate, cfg.momentum)
    best_value = -np.inf
    best_blocks = _snapshot(blocks)
    best_velocity: dict[str, np.ndarray] = {}

    for epoch in range(1, epochs + 1):
        started = time.perf_counter()
        perm = rng.derive(f"shuffle/{epoch}").permutation(n_samples)
        epoch_loss = 0.0
        seen = 0
        for start in range(0, n_samples, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            batch_rng = rng.derive(f"dropout/{epoch}/{start}")
            loss, grads = forward_loss_backward(idx, batch_rng)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at stage {stage!r} epoch {epoch} "
                    f"batch offset {start}")
            if cfg.clip_norm is not None:
                clip_global_norm(grads, cfg.clip_norm)
            optimizer.step(blocks, grads)
            epoch_loss += loss * len(idx)
            seen += len(idx)
        top1, top5, selection = evaluate()
        row = EpochRow(epoch, epoch_loss / seen, top1, top5, selection,
                       time.perf_counter() - started)
        log.rows.append(row)
        if not np.isnan(selection) and selection > best_value:
            best_value = selection
            log.selected_epoch = epoch
            best_blocks = _snapshot(blocks)
            best_velocity = _snapshot(optimizer.velocity)

    if log.rows and log.selected_epoch is None:
        # No validation metric: keep the final epoch.
        log.selected_epoch = len(log.rows)
        best_blocks = _snapshot(blocks)
        best_velocity = _snapshot(optimizer.velocity)
    _restore(blocks, best_blocks)
    return StageResult(log, optimizer, best_blocks, best_velocity)


# ---------------------------------------------------------------------------
# stage drivers

def _branch_mode(cfg: TrainConfig) -> str:
    return "baseline" if cfg.architecture == "bl" else "anticipation"


def train_branch(branch: RUBranchParams, feats: np.ndarray, labels: np.ndarray,
                 val_feats: np.ndarray, val_labels: np.ndarray,
                 cfg: TrainConfig, *, mode: str, epochs: int,
                 rng: Rng) -> StageResult:
    """Train one branch (scp, anticipation, or baseline mode)."""
    spec = cfg.timeline
    taus = spec.anticipation_times()
    blocks = collect_blocks(branch.blocks(f"branch.{branch.modality}"))
    prefix = f"branch.{branch.modality}"
    eval_mode = _branch_mode(cfg) if mode == "scp" else mode

    def forward_loss_backward(idx, batch_rng):
        out = branch_forward(branch, feats[idx], spec, mode,
                             train=True, rng=batch_rng, want_tape=True)
        loss, dscores = cross_entropy_timeline(out.scores, labels[idx])
        grads = zero_grads(blocks)
        branch_backward(branch, out.tape, dscores, grads, prefix)
        return loss, grads

    def evaluate():
        if len(val_labels) == 0:
            nan = [float("nan")] * len(taus)
            return nan, nan, float("nan")
        out = branch_forward(branch, val_feats, spec, eval_mode, train=False)
        return _val_metrics(out.scores, val_labels, taus, cfg)

    stage = "scp" if mode == "scp" else "branch"
    return _run_stage(stage, branch.modality, epochs, forward_loss_backward,
                      evaluate, blocks, cfg, rng, len(labels), taus)


def train_fusion(model: FusionModel, data: TrainData, cfg: TrainConfig,
                 rng: Rng, epochs: int | None = None) -> StageResult:
    """Fine-tune the assembled model end-to-end through the fusion layer."""
    spec = cfg.timeline
    taus = spec.anticipation_times()
    all_blocks = model.blocks()
    if cfg.freeze_branches_in_fusion:
        if model.matt is None:
            raise ConfigError("freeze_branches_in_fusion needs matt fusion")
        trainable = collect_blocks(model.matt.blocks("matt"))
    else:
        trainable = all_blocks
    if epochs is None:
        epochs = cfg.epochs_for("fusion")

    def forward_loss_backward(idx, batch_rng):
        batch = {m: arr[idx] for m, arr in data.features.items()}
        fwd = model.forward(batch, train=True, rng=batch_rng, want_tape=True)
        loss, dfused = cross_entropy_timeline(fwd.fused, data.labels[idx])
        grads = zero_grads(all_blocks)
        model.backward(fwd, dfused, grads)
        if cfg.freeze_branches_in_fusion:
            grads = {name: grads[name] for name in trainable}
        return loss, grads

    def evaluate():
        if not data.has_validation:
            nan = [float("nan")] * len(taus)
            return nan, nan, float("nan")
        fwd = model.forward(data.val_features, train=False)
        return _val_metrics(fwd.fused, data.val_labels, taus, cfg)

    return _run_stage("fusion", None, epochs, forward_loss_backward, evaluate,
                      trainable, cfg, rng, data.num_samples, taus)


# ---------------------------------------------------------------------------
# full protocol

@dataclass
class ProtocolResult:
    model: FusionModel
    logs: dict[str, TrainLog]


def build_model(data: TrainData, cfg: TrainConfig) -> FusionModel:
    modalities = {m: data.features[m].shape[2]
                  for m in (cfg.modalities or sorted(data.features))}
    return FusionModel.init(
        modalities, cfg.hidden_size, data.num_actions, cfg.timeline,
        Rng(cfg.seed).derive("init"), strategy=cfg.fusion,
        dropout=cfg.dropout_spec(), late_weights=cfg.late_weights,
        branch_mode=_branch_mode(cfg))


def run_protocol(data: TrainData, cfg: TrainConfig) -> ProtocolResult:
    """Sequence-completion pre-training, branch fine-tuning, fusion stage."""
    root = Rng(cfg.seed)
    model = build_model(data, cfg)
    logs: dict[str, TrainLog] = {}

    branch_inputs = model.branch_inputs(data.features, cfg.timeline)
    val_inputs = (model.branch_inputs(data.val_features, cfg.timeline)
                  if data.has_validation else [np.zeros((0,) + bi.shape[1:])
                                               for bi in branch_inputs])

    use_scp = cfg.use_scp and cfg.architecture == "ru"
    for branch, feats, val_feats in zip(model.branches, branch_inputs, val_inputs):
        if use_scp:
            result = train_branch(
                branch, feats, data.labels, val_feats, data.val_labels, cfg,
                mode="scp", epochs=cfg.epochs_for("scp", branch.modality),
                rng=root.derive(f"train/scp/{branch.modality}"))
            logs[f"scp/{branch.modality}"] = result.log
        result = train_branch(
            branch, feats, data.labels, val_feats, data.val_labels, cfg,
            mode=_branch_mode(cfg),
            epochs=cfg.epochs_for("branch", branch.modality),
            rng=root.derive(f"train/branch/{branch.modality}"))
        logs[f"branch/{branch.modality}"] = result.log

    if model.strategy == "matt":
        result = train_fusion(model, data, cfg, root.derive("train/fusion"))
        logs["fusion"] = result.log
    return ProtocolResult(model, logs)
