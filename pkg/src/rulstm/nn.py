"""Differentiable building blocks with hand-written backward passes.

Everything operates on float64 arrays with a leading batch axis.  Forward
functions return ``(output, cache)`` where the cache holds exactly what the
matching backward function needs; backward functions accumulate parameter
gradients into a flat ``{block name: array}`` dict so the optimizer and the
checkpoint format can address every tensor by name.

Conventions, fixed across the package:
  - LSTM gate input is ``z = concat(x, h_prev)`` and each gate has its own
    (H, D+H) weight and (H,) bias; update is i,f,o = sigmoid, g = tanh,
    c' = f*c + i*g, h' = o*tanh(c').
  - Dropout is inverted: kept units are scaled by 1/(1-p) at train time and
    evaluation is the identity.
  - SGD momentum is classical: v <- mu*v - lr*g; theta <- theta + v.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import ShapeError, relu, sigmoid, softmax
from .rng import Rng


# ---------------------------------------------------------------------------
# initialization

def glorot(rng: Rng, rows: int, cols: int) -> np.ndarray:
    """Uniform in +-sqrt(6/(fan_in+fan_out)); fan from the (out, in) shape."""
    limit = np.sqrt(6.0 / (rows + cols))
    return (rng.uniform((rows, cols)) * 2.0 - 1.0) * limit


# ---------------------------------------------------------------------------
# parameter containers

GATES = ("i", "f", "o", "g")


class LstmCellParams:
    """One LSTM cell: four gate weights (H, D+H) and biases (H,)."""

    def __init__(self, input_dim: int, hidden_dim: int):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        z = input_dim + hidden_dim
        self.w = {k: np.zeros((hidden_dim, z)) for k in GATES}
        self.b = {k: np.zeros(hidden_dim) for k in GATES}

    @classmethod
    def init(cls, input_dim, hidden_dim, rng: Rng) -> "LstmCellParams":
        p = cls(input_dim, hidden_dim)
        for k in GATES:
            p.w[k] = glorot(rng, hidden_dim, input_dim + hidden_dim)
        # Positive forget bias keeps early gradients alive through time.
        p.b["f"] += 1.0
        return p

    def blocks(self, prefix: str):
        for k in GATES:
            yield f"{prefix}.w_{k}", self.w[k]
        for k in GATES:
            yield f"{prefix}.b_{k}", self.b[k]


class LinearParams:
    """Affine map y = x @ w.T + b with w of shape (out, in)."""

    def __init__(self, input_dim: int, output_dim: int):
        self.input_dim = input_dim
        self.output_dim = output_dim
        self.w = np.zeros((output_dim, input_dim))
        self.b = np.zeros(output_dim)

    @classmethod
    def init(cls, input_dim, output_dim, rng: Rng) -> "LinearParams":
        p = cls(input_dim, output_dim)
        p.w = glorot(rng, output_dim, input_dim)
        return p

    def blocks(self, prefix: str):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


class MlpParams:
    """Stack of linear layers with ReLU between them, linear final layer."""

    def __init__(self, sizes: list[int]):
        if len(sizes) < 2:
            raise ShapeError(f"MLP needs at least two sizes, got {sizes}")
        self.sizes = list(sizes)
        self.layers = [LinearParams(a, b) for a, b in zip(sizes, sizes[1:])]

    @classmethod
    def init(cls, sizes, rng: Rng) -> "MlpParams":
        p = cls(sizes)
        p.layers = [
            LinearParams.init(a, b, rng) for a, b in zip(sizes, sizes[1:])
        ]
        return p

    def blocks(self, prefix: str):
        for idx, layer in enumerate(self.layers):
            yield from layer.blocks(f"{prefix}.fc{idx}")


def collect_blocks(*sources) -> dict[str, np.ndarray]:
    """Merge (name, array) streams into one dict, rejecting name clashes."""
    out: dict[str, np.ndarray] = {}
    for source in sources:
        for name, arr in source:
            if name in out:
                raise ValueError(f"duplicate parameter block {name!r}")
            out[name] = arr
    return out


def zero_grads(blocks: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in blocks.items()}


# ---------------------------------------------------------------------------
# dropout

@dataclass(frozen=True)
class DropoutSpec:
    """Inverted dropout; ``resample_per_step`` controls mask reuse over time."""

    p: float = 0.8
    resample_per_step: bool = True

    def __post_init__(self):
        if not (0.0 <= self.p < 1.0):
            raise ValueError(f"dropout probability must be in [0, 1), got {self.p}")


def dropout_forward(x: np.ndarray, p: float, train: bool, rng: Rng | None):
    """Returns (output, mask); mask is None when the op was the identity."""
    if not (0.0 <= p < 1.0):
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x, None
    if rng is None:
        raise ValueError("train-mode dropout needs an Rng")
    mask = rng.mask(x.shape, 1.0 - p) / (1.0 - p)
    return x * mask, mask


def dropout_backward(dy: np.ndarray, mask) -> np.ndarray:
    return dy if mask is None else dy * mask


# ---------------------------------------------------------------------------
# lstm cell

def lstm_step(params: LstmCellParams, x: np.ndarray, h: np.ndarray, c: np.ndarray):
    """One LSTM update over a batch; returns (h', c', cache)."""
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ShapeError(
            f"lstm input shape {x.shape} incompatible with D={params.input_dim}"
        )
    if h.shape != (x.shape[0], params.hidden_dim) or c.shape != h.shape:
        raise ShapeError(f"lstm state shapes {h.shape}/{c.shape} mismatch input {x.shape}")
    z = np.concatenate([x, h], axis=1)
    i = sigmoid(z @ params.w["i"].T + params.b["i"])
    f = sigmoid(z @ params.w["f"].T + params.b["f"])
    o = sigmoid(z @ params.w["o"].T + params.b["o"])
    g = np.tanh(z @ params.w["g"].T + params.b["g"])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    cache = (params, z, i, f, o, g, c, tc)
    return h_new, c_new, cache


def lstm_step_backward(cache, dh: np.ndarray, dc: np.ndarray,
                       grads: dict[str, np.ndarray], prefix: str):
    """Reverse one lstm_step.  Returns (dx, dh_prev, dc_prev)."""
    params, z, i, f, o, g, c_prev, tc = cache
    d = params.input_dim
    do = dh * tc
    dct = dc + dh * o * (1.0 - tc * tc)
    di = dct * g
    df = dct * c_prev
    dg = dct * i
    da = {
        "i": di * i * (1.0 - i),
        "f": df * f * (1.0 - f),
        "o": do * o * (1.0 - o),
        "g": dg * (1.0 - g * g),
    }
    dz = np.zeros_like(z)
    for k in GATES:
        grads[f"{prefix}.w_{k}"] += da[k].T @ z
        grads[f"{prefix}.b_{k}"] += da[k].sum(axis=0)
        dz += da[k] @ params.w[k]
    return dz[:, :d], dz[:, d:], dct * f


# ---------------------------------------------------------------------------
# linear / mlp

def linear_forward(params: LinearParams, x: np.ndarray):
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ShapeError(
            f"linear input shape {x.shape} incompatible with in={params.input_dim}"
        )
    return x @ params.w.T + params.b, (params, x)


def linear_backward(cache, dy: np.ndarray, grads: dict[str, np.ndarray], prefix: str):
    params, x = cache
    grads[f"{prefix}.w"] += dy.T @ x
    grads[f"{prefix}.b"] += dy.sum(axis=0)
    return dy @ params.w


def mlp_forward(params: MlpParams, x: np.ndarray, *, train: bool = False,
                rng: Rng | None = None, dropout_p: float = 0.0,
                dropout_layers: tuple[int, ...] = ()):
    """ReLU MLP; dropout (if any) is applied to the inputs of the listed layers."""
    caches = []
    out = x
    for idx, layer in enumerate(params.layers):
        mask = None
        if idx in dropout_layers and dropout_p > 0.0:
            out, mask = dropout_forward(out, dropout_p, train, rng)
        out, lin_cache = linear_forward(layer, out)
        pre_relu = None
        if idx < len(params.layers) - 1:
            pre_relu = out
            out = relu(out)
        caches.append((lin_cache, mask, pre_relu))
    return out, caches


def mlp_backward(caches, dy: np.ndarray, grads: dict[str, np.ndarray], prefix: str):
    for idx in range(len(caches) - 1, -1, -1):
        lin_cache, mask, pre_relu = caches[idx]
        if pre_relu is not None:
            dy = dy * (pre_relu > 0)
        dy = linear_backward(lin_cache, dy, grads, f"{prefix}.fc{idx}")
        dy = dropout_backward(dy, mask)
    return dy


# ---------------------------------------------------------------------------
# loss

def cross_entropy_timeline(scores: np.ndarray, labels: np.ndarray):
    """Mean over batch and prediction steps of -log softmax(scores)[label].

    scores: (B, T, K); labels: (B,).  Returns (loss, dscores) where dscores
    already carries the 1/(B*T) averaging.
    """
    if scores.ndim != 3:
        raise ShapeError(f"scores must be (B, T, K), got {scores.shape}")
    b, t, k = scores.shape
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} mismatch batch {b}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label outside [0, {k})")
    probs = softmax(scores)
    picked = probs[np.arange(b)[:, None], np.arange(t)[None, :], labels[:, None]]
    loss = float(-np.log(picked).sum() / (b * t))
    dscores = probs.copy()
    dscores[np.arange(b)[:, None], np.arange(t)[None, :], labels[:, None]] -= 1.0
    dscores /= b * t
    return loss, dscores


# ---------------------------------------------------------------------------
# optimizer

class SgdMomentum:
    """Classical momentum: v <- mu*v - lr*g; theta <- theta + v (in place)."""

    def __init__(self, learning_rate: float = 0.01, momentum: float = 0.9):
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, blocks: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        for name, theta in blocks.items():
            g = grads[name]
            if g.shape != theta.shape:
                raise ShapeError(
                    f"gradient shape {g.shape} mismatches {name} {theta.shape}"
                )
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(theta)
            v = self.momentum * v - self.learning_rate * g
            self.velocity[name] = v
            theta += v

    def state_blocks(self):
        for name, v in sorted(self.velocity.items()):
            yield f"velocity.{name}", v

    def load_state(self, blocks: dict[str, np.ndarray]):
        self.velocity = {
            name[len("velocity."):]: arr.copy()
            for name, arr in blocks.items()
            if name.startswith("velocity.")
        }


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    norm = float(np.sqrt(total))
    if norm > max_norm > 0:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# finite-difference gradient checking

class NonDeterministicClosureError(RuntimeError):
    """The loss closure returned different values for identical parameters."""


@dataclass
class GradCheckReport:
    tolerance: float
    block_errors: dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.block_errors.values()) if self.block_errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def format_table(self) -> str:
        width = max((len(n) for n in self.block_errors), default=4)
        lines = [f"{'block'.ljust(width)}  max_rel_err  status"]
        for name in sorted(self.block_errors):
            err = self.block_errors[name]
            status = "ok" if err < self.tolerance else "FAIL"
            lines.append(f"{name.ljust(width)}  {err:.3e}    {status}")
        lines.append(f"overall max {self.max_error:.3e} "
                     f"({'pass' if self.passed else 'fail'} at {self.tolerance:g})")
        return "\n".join(lines)


def gradcheck(loss_fn, blocks: dict[str, np.ndarray],
              analytic: dict[str, np.ndarray], *, step: float = 1e-5,
              tolerance: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` must be a deterministic closure over ``blocks`` (dropout in
    eval mode or with fixed masks); this is verified by evaluating it twice.
    The per-block error is the largest absolute deviation normalized by the
    larger of the two gradients' magnitudes.
    """
    base = loss_fn()
    if loss_fn() != base:
        raise NonDeterministicClosureError(
            "loss closure is not deterministic; fix dropout masks or use eval mode"
        )
    report = GradCheckReport(tolerance=tolerance)
    for name, theta in blocks.items():
        ana = analytic.get(name)
        if ana is None:
            raise KeyError(f"no analytic gradient for block {name!r}")
        num = np.zeros_like(theta)
        flat_theta = theta.reshape(-1)
        flat_num = num.reshape(-1)
        for idx in range(flat_theta.size):
            orig = flat_theta[idx]
            flat_theta[idx] = orig + step
            hi = loss_fn()
            flat_theta[idx] = orig - step
            lo = loss_fn()
            flat_theta[idx] = orig
            flat_num[idx] = (hi - lo) / (2.0 * step)
        scale = max(float(np.max(np.abs(num))), float(np.max(np.abs(ana))), 1e-12)
        report.block_errors[name] = float(np.max(np.abs(num - ana))) / scale
    return report
