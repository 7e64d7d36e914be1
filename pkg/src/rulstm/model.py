"""The rolling-unrolling anticipation architecture.

Each modality has a branch made of two LSTM cells sharing a hidden size: a
rolling cell that keeps encoding incoming snippet features from a zero state,
and an unrolling cell that, at every prediction step, is seeded with the
rolling cell's current hidden and cell state and iterated once per remaining
step until the action starts.  A linear head maps the unrolling cell's final
hidden vector to per-class scores.

Three branch modes share that machinery:

  - ``anticipation``: the unrolling cell re-reads the current step's feature
    at every iteration (inference mode, and the fine-tuning objective);
  - ``scp``: during pre-training the unrolling cell instead reads the *future*
    features inside the observed window (iteration j reads row t+j-1), which
    pushes the rolling cell toward pure summarization;
  - ``baseline``: scores come straight from the rolling state with no
    unrolling cell (the single-LSTM ablation arm).

Branches are combined by one of three fusion strategies: ``late`` (fixed
convex weights on scores), ``early`` (a single branch over concatenated
features), or ``matt`` (a small ReLU MLP maps the concatenated rolling
hidden+cell states of all branches to per-modality logits, softmax-normalized
into fusion weights, recomputed at every prediction step).  Scores, never
probabilities, are fused; probabilities are taken afterward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import ShapeError, softmax
from .nn import (
    DropoutSpec,
    LinearParams,
    LstmCellParams,
    MlpParams,
    collect_blocks,
    cross_entropy_timeline,
    dropout_backward,
    dropout_forward,
    linear_backward,
    linear_forward,
    lstm_step,
    lstm_step_backward,
    mlp_backward,
    mlp_forward,
)
from .rng import Rng
from .timeline import TimelineSpec

BRANCH_MODES = ("anticipation", "scp", "baseline")
FUSION_STRATEGIES = ("late", "early", "matt")

# MATT dropout sits on the inputs of its 2nd and 3rd layers.
MATT_DROPOUT_LAYERS = (1, 2)


class RUBranchParams:
    """All learnable parameters of one modality branch."""

    def __init__(self, modality: str, input_dim: int, hidden_dim: int,
                 num_actions: int, dropout: DropoutSpec = DropoutSpec()):
        self.modality = modality
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.num_actions = num_actions
        self.dropout = dropout
        self.rolling = LstmCellParams(input_dim, hidden_dim)
        self.unrolling = LstmCellParams(input_dim, hidden_dim)
        self.head = LinearParams(hidden_dim, num_actions)

    @classmethod
    def init(cls, modality, input_dim, hidden_dim, num_actions, rng: Rng,
             dropout: DropoutSpec = DropoutSpec()) -> "RUBranchParams":
        p = cls(modality, input_dim, hidden_dim, num_actions, dropout)
        p.rolling = LstmCellParams.init(input_dim, hidden_dim, rng.derive("rolling"))
        p.unrolling = LstmCellParams.init(input_dim, hidden_dim, rng.derive("unrolling"))
        p.head = LinearParams.init(hidden_dim, num_actions, rng.derive("head"))
        return p

    def blocks(self, prefix: str):
        yield from self.rolling.blocks(f"{prefix}.rolling")
        yield from self.unrolling.blocks(f"{prefix}.unrolling")
        yield from self.head.blocks(f"{prefix}.head")


@dataclass
class BranchForward:
    """Per-step scores plus the rolling states MATT fuses over."""

    scores: np.ndarray      # (B, T, K) over anticipation steps
    r_hidden: np.ndarray    # (B, T, H) rolling hidden at each anticipation step
    r_cell: np.ndarray      # (B, T, H)
    tape: dict | None = None


def _check_features(feats: np.ndarray, spec: TimelineSpec, input_dim: int,
                    modality: str) -> np.ndarray:
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim == 2:
        feats = feats[None]
    if feats.ndim != 3:
        raise ShapeError(f"{modality}: features must be (B, S, D), got {feats.shape}")
    if feats.shape[1] != spec.total_steps:
        raise ShapeError(
            f"{modality}: expected {spec.total_steps} feature rows, got {feats.shape[1]}"
        )
    if feats.shape[2] != input_dim:
        raise ShapeError(
            f"{modality}: expected feature dim {input_dim}, got {feats.shape[2]}"
        )
    return feats


def branch_forward(branch: RUBranchParams, feats: np.ndarray, spec: TimelineSpec,
                   mode: str = "anticipation", *, train: bool = False,
                   rng: Rng | None = None, want_tape: bool = False) -> BranchForward:
    """Run one branch over a batch of feature sequences.

    ``feats`` has shape (B, S, D) with S = spec.total_steps.  In scp mode,
    unrolling iteration j at step t reads feature row t+j-1, which never
    exceeds S because the iteration count is exactly the number of remaining
    steps.
    """
    if mode not in BRANCH_MODES:
        raise ValueError(f"unknown branch mode {mode!r}")
    feats = _check_features(feats, spec, branch.input_dim, branch.modality)
    b = feats.shape[0]
    h_dim = branch.hidden_dim
    p = branch.dropout.p
    resample = branch.dropout.resample_per_step
    if train and p > 0.0 and rng is None:
        raise ValueError("train-mode forward needs an Rng for dropout")

    seq_masks = {}
    if train and p > 0.0 and not resample:
        # One mask per site, shared across time-steps of this forward pass.
        keep = 1.0 - p
        seq_masks["r"] = rng.mask((b, branch.input_dim), keep) / keep
        seq_masks["u"] = rng.mask((b, branch.input_dim), keep) / keep
        seq_masks["head"] = rng.mask((b, h_dim), keep) / keep

    def site_dropout(x, site):
        if not train or p == 0.0:
            return x, None
        if not resample:
            mask = seq_masks[site]
            return x * mask, mask
        return dropout_forward(x, p, True, rng)

    ant_steps = spec.anticipation_steps
    t_count = len(ant_steps)
    scores = np.zeros((b, t_count, branch.num_actions))
    r_hidden = np.zeros((b, t_count, h_dim))
    r_cell = np.zeros((b, t_count, h_dim))

    h = np.zeros((b, h_dim))
    c = np.zeros((b, h_dim))
    r_caches = []
    step_records = []

    for t in range(1, spec.total_steps + 1):
        x, _ = site_dropout(feats[:, t - 1], "r")
        h, c, cache = lstm_step(branch.rolling, x, h, c)
        if want_tape:
            r_caches.append(cache)
        if t <= spec.s_enc:
            continue
        idx = t - spec.s_enc - 1
        r_hidden[:, idx] = h
        r_cell[:, idx] = c

        if mode == "baseline":
            head_in, head_mask = site_dropout(h, "head")
            s, head_cache = linear_forward(branch.head, head_in)
            u_caches = []
        else:
            n_t = spec.unroll_count(t)
            hu, cu = h, c
            u_caches = []
            for j in range(1, n_t + 1):
                row = t - 1 if mode == "anticipation" else t + j - 2
                u_in, _ = site_dropout(feats[:, row], "u")
                hu, cu, u_cache = lstm_step(branch.unrolling, u_in, hu, cu)
                if want_tape:
                    u_caches.append(u_cache)
            head_in, head_mask = site_dropout(hu, "head")
            s, head_cache = linear_forward(branch.head, head_in)
        scores[:, idx] = s
        if want_tape:
            step_records.append((u_caches, head_cache, head_mask))

    tape = None
    if want_tape:
        tape = {"mode": mode, "spec": spec, "r_caches": r_caches,
                "steps": step_records}
    return BranchForward(scores, r_hidden, r_cell, tape)


def branch_backward(branch: RUBranchParams, tape: dict, dscores: np.ndarray,
                    grads: dict[str, np.ndarray], prefix: str,
                    dstates: tuple[np.ndarray, np.ndarray] | None = None):
    """Reverse a taped branch_forward.

    ``dscores`` is (B, T, K); ``dstates`` optionally carries extra gradient
    (dh, dc), each (B, T, H), flowing into the rolling states at each
    anticipation step (the MATT path).  Feature inputs are data, so their
    gradients are dropped.
    """
    spec: TimelineSpec = tape["spec"]
    mode = tape["mode"]
    b = dscores.shape[0]
    dh_r = np.zeros((b, branch.hidden_dim))
    dc_r = np.zeros((b, branch.hidden_dim))

    for t in range(spec.total_steps, 0, -1):
        if t > spec.s_enc:
            idx = t - spec.s_enc - 1
            u_caches, head_cache, head_mask = tape["steps"][idx]
            dhead_in = linear_backward(head_cache, dscores[:, idx], grads,
                                       f"{prefix}.head")
            dhead_in = dropout_backward(dhead_in, head_mask)
            if mode == "baseline":
                dh_r += dhead_in
            else:
                dhu = dhead_in
                dcu = np.zeros_like(dhu)
                for u_cache in reversed(u_caches):
                    _, dhu, dcu = lstm_step_backward(
                        u_cache, dhu, dcu, grads, f"{prefix}.unrolling")
                dh_r += dhu
                dc_r += dcu
            if dstates is not None:
                dh_r += dstates[0][:, idx]
                dc_r += dstates[1][:, idx]
        _, dh_r, dc_r = lstm_step_backward(
            tape["r_caches"][t - 1], dh_r, dc_r, grads, f"{prefix}.rolling")


@dataclass
class PredictionTimeline:
    """Scores and fusion weights emitted over the anticipation stage."""

    spec: TimelineSpec
    modalities: list[str]
    fused_scores: np.ndarray              # (T, K)
    modality_scores: np.ndarray | None    # (M, T, K); None for loaded dumps
    fusion_weights: np.ndarray            # (T, M)

    @property
    def anticipation_times(self) -> list[float]:
        return self.spec.anticipation_times()

    @property
    def observation_ratios(self) -> list[float]:
        return self.spec.observation_ratios()


@dataclass
class FusionForward:
    fused: np.ndarray              # (B, T, K)
    modality_scores: np.ndarray    # (M, B, T, K)
    weights: np.ndarray            # (B, T, M)
    branch_outs: list[BranchForward]
    matt_caches: list | None = None


class FusionModel:
    """M modality branches plus a fusion strategy (and MATT parameters)."""

    def __init__(self, modalities: dict[str, int], hidden_dim: int,
                 num_actions: int, spec: TimelineSpec, strategy: str = "matt",
                 dropout: DropoutSpec = DropoutSpec(),
                 late_weights: list[float] | None = None,
                 branch_mode: str = "anticipation"):
        if strategy not in FUSION_STRATEGIES:
            raise ValueError(f"unknown fusion strategy {strategy!r}")
        if not modalities:
            raise ValueError("at least one modality is required")
        if branch_mode not in ("anticipation", "baseline"):
            raise ValueError(
                f"branch_mode must be anticipation or baseline, got {branch_mode!r}")
        self.modalities = list(modalities)
        self.input_dims = dict(modalities)
        self.hidden_dim = hidden_dim
        self.num_actions = num_actions
        self.spec = spec
        self.strategy = strategy
        self.dropout = dropout
        self.branch_mode = branch_mode

        if strategy == "early":
            joint = "+".join(self.modalities)
            self.branches = [RUBranchParams(
                joint, sum(modalities.values()), hidden_dim, num_actions, dropout)]
        else:
            self.branches = [RUBranchParams(
                name, dim, hidden_dim, num_actions, dropout)
                for name, dim in modalities.items()]

        m = len(self.branches)
        if late_weights is None:
            late_weights = [1.0 / m] * m
        if len(late_weights) != m:
            raise ShapeError(f"{len(late_weights)} late weights for {m} branches")
        if abs(sum(late_weights) - 1.0) > 1e-9:
            raise ValueError("late fusion weights must sum to 1")
        self.late_weights = np.asarray(late_weights, dtype=np.float64)

        self.matt: MlpParams | None = None
        if strategy == "matt":
            self.matt = MlpParams(self._matt_sizes())

    def _matt_sizes(self) -> list[int]:
        m = len(self.branches)
        h_in = m * 2 * self.hidden_dim
        return [h_in, max(h_in // 4, 1), max(h_in // 8, 1), m]

    @classmethod
    def init(cls, modalities, hidden_dim, num_actions, spec, rng: Rng,
             strategy: str = "matt", dropout: DropoutSpec = DropoutSpec(),
             late_weights=None, branch_mode: str = "anticipation") -> "FusionModel":
        model = cls(modalities, hidden_dim, num_actions, spec, strategy,
                    dropout, late_weights, branch_mode)
        for branch in model.branches:
            init = RUBranchParams.init(
                branch.modality, branch.input_dim, hidden_dim, num_actions,
                rng.derive(f"branch/{branch.modality}"), dropout)
            branch.rolling = init.rolling
            branch.unrolling = init.unrolling
            branch.head = init.head
        if model.matt is not None:
            model.matt = MlpParams.init(model._matt_sizes(), rng.derive("matt"))
        return model

    def blocks(self) -> dict[str, np.ndarray]:
        sources = [b.blocks(f"branch.{b.modality}") for b in self.branches]
        if self.matt is not None:
            sources.append(self.matt.blocks("matt"))
        return collect_blocks(*sources)

    # -- feature plumbing ---------------------------------------------------

    def branch_inputs(self, features: dict[str, np.ndarray],
                      spec: TimelineSpec) -> list[np.ndarray]:
        missing = [m for m in self.modalities if m not in features]
        if missing:
            raise KeyError(f"missing features for modalities {missing}")
        arrays = [
            _check_features(features[m], spec, self.input_dims[m], m)
            for m in self.modalities
        ]
        if self.strategy == "early":
            return [np.concatenate(arrays, axis=2)]
        return arrays

    # -- forward / fuse / backward -------------------------------------------

    def forward(self, features: dict[str, np.ndarray], *, train: bool = False,
                rng: Rng | None = None, want_tape: bool = False,
                spec: TimelineSpec | None = None,
                mode: str | None = None) -> FusionForward:
        spec = spec or self.spec
        if mode is None:
            mode = self.branch_mode
        inputs = self.branch_inputs(features, spec)
        branch_outs = []
        for branch, feats in zip(self.branches, inputs):
            branch_rng = rng.derive(f"dropout/{branch.modality}") if rng else None
            branch_outs.append(branch_forward(
                branch, feats, spec, mode, train=train, rng=branch_rng,
                want_tape=want_tape))
        matt_rng = rng.derive("dropout/matt") if rng else None
        return self.fuse(branch_outs, train=train, rng=matt_rng,
                         want_tape=want_tape)

    def fuse(self, branch_outs: list[BranchForward], *, train: bool = False,
             rng: Rng | None = None, want_tape: bool = False) -> FusionForward:
        """Combine per-branch scores into fused scores (one of three ways)."""
        shapes = {out.scores.shape for out in branch_outs}
        if len(shapes) != 1:
            raise ShapeError(f"branch outputs disagree on shape: {shapes}")
        if len(branch_outs) != len(self.branches):
            raise ShapeError(
                f"{len(branch_outs)} branch outputs for {len(self.branches)} branches")
        scores = np.stack([out.scores for out in branch_outs])  # (M, B, T, K)
        m, b, t_count, _ = scores.shape

        if self.strategy == "matt":
            weights = np.zeros((b, t_count, m))
            fused = np.zeros((b, t_count, self.num_actions))
            matt_caches = []
            for idx in range(t_count):
                u = np.concatenate(
                    [np.concatenate([out.r_hidden[:, idx], out.r_cell[:, idx]], axis=1)
                     for out in branch_outs], axis=1)
                lam, caches = mlp_forward(
                    self.matt, u, train=train, rng=rng, dropout_p=self.dropout.p,
                    dropout_layers=MATT_DROPOUT_LAYERS)
                w = softmax(lam)
                weights[:, idx] = w
                fused[:, idx] = np.einsum("mbk,bm->bk", scores[:, :, idx], w)
                matt_caches.append(caches if want_tape else None)
            return FusionForward(fused, scores, weights, branch_outs,
                                 matt_caches if want_tape else None)

        w = (np.ones(1) if self.strategy == "early" else self.late_weights)
        fused = np.tensordot(w, scores, axes=(0, 0))
        weights = np.broadcast_to(w, (b, t_count, m)).copy()
        return FusionForward(fused, scores, weights, branch_outs, None)

    def backward(self, fwd: FusionForward, dfused: np.ndarray,
                 grads: dict[str, np.ndarray]):
        """Backpropagate through fusion and all branches into ``grads``."""
        m = len(self.branches)
        b, t_count, _ = dfused.shape

        if self.strategy == "matt":
            dscores = np.zeros_like(fwd.modality_scores)  # (M, B, T, K)
            dh = np.zeros((m, b, t_count, self.hidden_dim))
            dc = np.zeros((m, b, t_count, self.hidden_dim))
            h2 = self.hidden_dim
            for idx in range(t_count):
                w = fwd.weights[:, idx]                     # (B, M)
                s = fwd.modality_scores[:, :, idx]          # (M, B, K)
                d = dfused[:, idx]                          # (B, K)
                dscores[:, :, idx] = w.T[:, :, None] * d[None]
                dw = np.einsum("bk,mbk->bm", d, s)
                dlam = w * (dw - np.sum(dw * w, axis=1, keepdims=True))
                du = mlp_backward(fwd.matt_caches[idx], dlam, grads, "matt")
                for j in range(m):
                    chunk = du[:, j * 2 * h2:(j + 1) * 2 * h2]
                    dh[j, :, idx] = chunk[:, :h2]
                    dc[j, :, idx] = chunk[:, h2:]
            for j, (branch, out) in enumerate(zip(self.branches, fwd.branch_outs)):
                branch_backward(branch, out.tape, dscores[j], grads,
                                f"branch.{branch.modality}", (dh[j], dc[j]))
            return

        w = np.ones(1) if self.strategy == "early" else self.late_weights
        for j, (branch, out) in enumerate(zip(self.branches, fwd.branch_outs)):
            branch_backward(branch, out.tape, w[j] * dfused, grads,
                            f"branch.{branch.modality}")

    # -- inference-facing helpers ---------------------------------------------

    def predict_timeline(self, features: dict[str, np.ndarray],
                         spec: TimelineSpec | None = None) -> PredictionTimeline:
        """Eval-mode forward for a single sample (features of shape (S, D))."""
        spec = spec or self.spec
        single = {m: np.asarray(f, dtype=np.float64)[None] if np.asarray(f).ndim == 2
                  else np.asarray(f, dtype=np.float64)
                  for m, f in features.items()}
        fwd = self.forward(single, train=False, spec=spec)
        return PredictionTimeline(
            spec=spec,
            modalities=[b.modality for b in self.branches],
            fused_scores=fwd.fused[0],
            modality_scores=fwd.modality_scores[:, 0],
            fusion_weights=fwd.weights[0],
        )


def early_recognition_forward(model: FusionModel,
                              features: dict[str, np.ndarray]) -> FusionForward:
    """Run the model over N uniformly-sampled snippets with no encoding stage.

    Each step emits a prediction at observation ratio t/N; the last step's
    output doubles as the plain recognition output.
    """
    arrays = {m: np.asarray(f, dtype=np.float64) for m, f in features.items()}
    first = next(iter(arrays.values()))
    n = first.shape[-2]
    if n < 1:
        raise ShapeError("early recognition needs at least one snippet")
    spec = TimelineSpec(alpha=model.spec.alpha, s_enc=0, s_ant=n)
    return model.forward(arrays, train=False, spec=spec)


def anticipation_loss(scores: np.ndarray, label) -> float:
    """Mean negative log-probability of the label over prediction steps."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim == 2:
        scores = scores[None]
        labels = np.asarray([label])
    else:
        labels = np.asarray(label)
    loss, _ = cross_entropy_timeline(scores, labels)
    return loss


def model_config(model: FusionModel, *, vocabulary: str | None = None,
                 checkpoint: str | None = None) -> dict:
    """JSON-ready description of a model's architecture and file references."""
    return {
        "modalities": dict(model.input_dims),
        "hidden_size": model.hidden_dim,
        "num_actions": model.num_actions,
        "timeline": {"alpha": model.spec.alpha, "s_enc": model.spec.s_enc,
                     "s_ant": model.spec.s_ant},
        "fusion": model.strategy,
        "late_weights": [float(w) for w in model.late_weights],
        "branch_mode": model.branch_mode,
        "dropout": {"p": model.dropout.p,
                    "resample_per_step": model.dropout.resample_per_step},
        "vocabulary": vocabulary,
        "checkpoint": checkpoint,
    }


def model_from_config(config: dict) -> FusionModel:
    """Rebuild a model skeleton (zero weights) from a description dict."""
    spec = TimelineSpec(**config["timeline"])
    dropout = DropoutSpec(config["dropout"]["p"],
                          config["dropout"]["resample_per_step"])
    return FusionModel(
        modalities=config["modalities"],
        hidden_dim=config["hidden_size"],
        num_actions=config["num_actions"],
        spec=spec,
        strategy=config["fusion"],
        dropout=dropout,
        late_weights=config.get("late_weights"),
        branch_mode=config.get("branch_mode", "anticipation"),
    )


def marginalize(action_probs: np.ndarray, vocab) -> tuple[np.ndarray, np.ndarray]:
    """Verb and noun distributions obtained by summing action probabilities.

    Works on a single (K,) vector or any (..., K) stack; sums run in
    ascending action-id order so results are reproducible bit-for-bit.
    """
    probs = np.asarray(action_probs, dtype=np.float64)
    k = probs.shape[-1]
    if k != len(vocab.actions):
        raise ValueError(
            f"{k} action probabilities for a {len(vocab.actions)}-action vocabulary")
    verb_ids = np.asarray([v for v, _ in vocab.actions])
    noun_ids = np.asarray([n for _, n in vocab.actions])
    verb_probs = np.zeros(probs.shape[:-1] + (len(vocab.verbs),))
    noun_probs = np.zeros(probs.shape[:-1] + (len(vocab.nouns),))
    np.add.at(verb_probs, (..., verb_ids), probs)
    np.add.at(noun_probs, (..., noun_ids), probs)
    return verb_probs, noun_probs
