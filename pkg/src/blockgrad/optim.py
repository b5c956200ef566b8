"""Blockwise adaptive gradient optimizers and reference baselines.

BlockAdagrad keeps one accumulator per block,

    v_b <- v_b + ||g_b||^2 / d_b
    theta_b <- theta_b - eta * g_b / (sqrt(v_b) + eps),

and reduces to coordinate-wise Adagrad when every block is a single
coordinate.  BlockAdam adds weighted second-moment averaging and
exponential-moving-average momentum,

    A_t <- A_{t-1} + a_t
    v_b <- v_{b} + a_t ||g_b||^2 / d_b,      vhat_b = v_b / A_t
    m   <- beta_t m + (1 - beta_t) g
    theta_b <- theta_b - eta_t * m_b / (sqrt(vhat_b) + eps),

where vhat may equivalently be maintained by the EMA recursion
vhat_b <- alpha_t vhat_b + (1 - alpha_t) ||g_b||^2 / d_b with
alpha_t = 1 - a_t/A_t (the accumulation="ema" mode, which avoids
overflow of A_t for fast-growing weight sequences).  With one block per
coordinate, constant beta, exponential weights alpha and
eta_t = eta/(sqrt(t)(1 - beta^t)), BlockAdam is exactly Adam.

Optimizer state is single-owner and mutated sequentially; checkpoints
round-trip through a plain-text format with 17-significant-digit floats
so a resumed run is bit-identical to an uninterrupted one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from blockgrad.core import BlockPartition
from blockgrad.schedules import MomentumSchedule, StepsizeSchedule, WeightSequence

__all__ = [
    "BlockAdagrad",
    "BlockAdam",
    "AdagradRef",
    "AdamRef",
    "NagRef",
    "BlockScaling",
    "optimal_block_scaling",
    "clip_global_norm",
    "serialize_state",
    "deserialize_state",
]

STATE_HEADER = "blockgrad-state"
STATE_VERSION = 1


def clip_global_norm(g: np.ndarray, max_norm: float) -> np.ndarray:
    """Rescale g so that ||g||_2 <= max_norm."""
    norm = float(np.linalg.norm(g))
    if norm > max_norm:
        return g * (max_norm / norm)
    return g


def _prepare_gradient(g, theta, clip_norm, weight_decay):
    g = np.asarray(g, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise ValueError("non-finite gradient rejected")
    if clip_norm is not None:
        g = clip_global_norm(g, clip_norm)
    if weight_decay:
        g = g + weight_decay * theta
    return g


def _blockwise_update(theta, numer, denom_blocks, partition, scale):
    """theta -= scale * numer / denom[block], with 0/0 defined as 0."""
    denom = partition.scatter(denom_blocks)
    if np.any(denom == 0.0):
        upd = np.divide(numer, denom, out=np.zeros_like(numer), where=denom != 0.0)
    else:
        upd = numer / denom
    theta -= scale * upd
    return theta


class BlockAdagrad:
    """Blockwise Adagrad for online convex learning (constant base stepsize)."""

    def __init__(self, partition: BlockPartition, eta: float, eps: float = 1e-3,
                 clip_norm: float | None = None, weight_decay: float = 0.0):
        if eta <= 0:
            raise ValueError("eta must be positive")
        if eps < 0:
            raise ValueError("eps must be >= 0")
        self.partition = partition
        self.eta = float(eta)
        self.eps = float(eps)
        self.clip_norm = clip_norm
        self.weight_decay = float(weight_decay)
        self.v = np.zeros(partition.B)
        self.t = 0

    def step(self, theta: np.ndarray, g: np.ndarray) -> np.ndarray:
        if theta.shape != (self.partition.d,) or g.shape != (self.partition.d,):
            raise ValueError("dimension mismatch")
        g = _prepare_gradient(g, theta, self.clip_norm, self.weight_decay)
        self.v += self.partition.block_sums_sq(g) / self.partition.sizes
        self.t += 1
        denom = np.sqrt(self.v) + self.eps
        return _blockwise_update(theta, g, denom, self.partition, self.eta)

    def block_gradient_norms(self) -> np.ndarray:
        """||g_{1:t, G_b}||_2 per block, recovered from the accumulators."""
        return np.sqrt(self.v * self.partition.sizes)


class BlockAdam:
    """Blockwise adaptive gradient with weighted second moments and momentum."""

    def __init__(self, partition: BlockPartition, weights: WeightSequence,
                 stepsize: StepsizeSchedule, momentum: MomentumSchedule,
                 eps: float = 1e-3, accumulation: str = "direct",
                 clip_norm: float | None = None, weight_decay: float = 0.0):
        if eps < 0:
            # eps = 0 is tolerated for test configurations (with a 0/0 guard);
            # production runs should keep eps > 0.
            raise ValueError("eps must be >= 0")
        if accumulation not in ("direct", "ema"):
            raise ValueError("accumulation must be 'direct' or 'ema'")
        self.partition = partition
        self.weights = weights
        self.stepsize = stepsize
        self.momentum = momentum
        self.eps = float(eps)
        self.accumulation = accumulation
        self.clip_norm = clip_norm
        self.weight_decay = float(weight_decay)
        self.v = np.zeros(partition.B)  # raw weighted sums, or vhat in ema mode
        self.m = np.zeros(partition.d)
        self.A = 0.0
        self.beta_prod = 1.0
        self.t = 0

    def step(self, theta: np.ndarray, g: np.ndarray) -> np.ndarray:
        if theta.shape != (self.partition.d,) or g.shape != (self.partition.d,):
            raise ValueError("dimension mismatch")
        g = _prepare_gradient(g, theta, self.clip_norm, self.weight_decay)
        t = self.t + 1
        mean_sq = self.partition.block_sums_sq(g) / self.partition.sizes
        if self.accumulation == "direct":
            a_t = self.weights.a_next(t, self.A)
            self.A += a_t
            self.v += a_t * mean_sq
            vhat = self.v / self.A
        else:
            coeff = self.weights.ema_next(t, self.A)
            self.A += self.weights.a_next(t, self.A)
            self.v = coeff * self.v + (1.0 - coeff) * mean_sq
            vhat = self.v
        beta_t = self.momentum.beta_at(t)
        self.beta_prod *= beta_t
        self.m = beta_t * self.m + (1.0 - beta_t) * g
        eta_t = self.stepsize.value(t, self.beta_prod)
        self.t = t
        denom = np.sqrt(vhat) + self.eps
        return _blockwise_update(theta, self.m, denom, self.partition, eta_t)

    def vhat(self) -> np.ndarray:
        """Current weighted second-moment estimate per block."""
        if self.t == 0:
            return np.zeros(self.partition.B)
        return self.v / self.A if self.accumulation == "direct" else self.v.copy()


# ---------------------------------------------------------------------------
# Reference baselines (independent textbook implementations)
# ---------------------------------------------------------------------------

class AdagradRef:
    """Coordinate-wise Adagrad: theta -= eta * g / (sqrt(sum g^2) + eps)."""

    def __init__(self, d: int, eta: float, eps: float = 1e-8):
        self.eta = float(eta)
        self.eps = float(eps)
        self.v = np.zeros(d)
        self.t = 0

    def step(self, theta, g):
        self.v += g * g
        self.t += 1
        denom = np.sqrt(self.v) + self.eps
        if np.any(denom == 0.0):
            upd = np.divide(g, denom, out=np.zeros_like(g), where=denom != 0.0)
        else:
            upd = g / denom
        theta -= self.eta * upd
        return theta


class AdamRef:
    """Bias-corrected Adam with a per-step learning rate.

    lr may be a float or a callable t -> eta_t (t starts at 1).
    """

    def __init__(self, d: int, lr, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.m = np.zeros(d)
        self.u = np.zeros(d)
        self.t = 0

    def step(self, theta, g):
        self.t += 1
        t = self.t
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.u = self.beta2 * self.u + (1 - self.beta2) * g * g
        m_hat = self.m / (1 - self.beta1 ** t)
        u_hat = self.u / (1 - self.beta2 ** t)
        lr_t = self.lr(t) if callable(self.lr) else self.lr
        theta -= lr_t * m_hat / (np.sqrt(u_hat) + self.eps)
        return theta


class NagRef:
    """SGD with Nesterov momentum: v = mu v + g; theta -= eta (g + mu v)."""

    def __init__(self, d: int, eta: float, mu: float = 0.9):
        self.eta = float(eta)
        self.mu = float(mu)
        self.buf = np.zeros(d)

    def step(self, theta, g):
        self.buf = self.mu * self.buf + g
        theta -= self.eta * (g + self.mu * self.buf)
        return theta


# ---------------------------------------------------------------------------
# Optimal blockwise scaling (closed form of the budgeted scaling problem)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BlockScaling:
    """Per-block scaling q_b under the budget sum_b q_b d_b <= c."""

    q: np.ndarray
    c: float

    def coordinate_scaling(self, partition: BlockPartition) -> np.ndarray:
        return partition.scatter(self.q)


def optimal_block_scaling(g_history: np.ndarray, partition: BlockPartition,
                          c: float) -> BlockScaling:
    """Minimizer of sum_t ||g_t||^2_{Diag(s)^-1} over blockwise-constant s
    with sum(s) <= c:

        q_b = c * ||g_{1:T, G_b}|| / (sqrt(d_b) * sum_i sqrt(d_i) ||g_{1:T, G_i}||)

    Blocks with an all-zero gradient history get q_b = 0 and their
    objective term is treated as 0.
    """
    if c <= 0:
        raise ValueError("budget c must be positive")
    g_history = np.atleast_2d(np.asarray(g_history, dtype=np.float64))
    if g_history.shape[1] != partition.d:
        raise ValueError("gradient history dimension mismatch")
    sq = np.zeros(partition.B)
    for g in g_history:
        sq += partition.block_sums_sq(g)
    norms = np.sqrt(sq)
    root_d = np.sqrt(partition.sizes.astype(np.float64))
    total = float(root_d @ norms)
    if total == 0.0:
        raise ValueError("all-zero gradient history")
    q = c * norms / (root_d * total)
    return BlockScaling(q=q, c=float(c))


def scaling_objective(g_history: np.ndarray, partition: BlockPartition,
                      q: np.ndarray) -> float:
    """sum_t ||g_t||^2_{Diag(s)^-1} for blockwise s = q, 0-history terms = 0."""
    g_history = np.atleast_2d(np.asarray(g_history, dtype=np.float64))
    sq = np.zeros(partition.B)
    for g in g_history:
        sq += partition.block_sums_sq(g)
    out = 0.0
    for b in range(partition.B):
        if sq[b] == 0.0:
            continue
        if q[b] == 0.0:
            return math.inf
        out += sq[b] / q[b]
    return out


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _fmt_array(a: np.ndarray) -> str:
    return " ".join(_fmt(x) for x in a)


def _parse_array(text: str) -> np.ndarray:
    if not text.strip():
        return np.zeros(0)
    return np.array([float(tok) for tok in text.split()], dtype=np.float64)


def _partition_to_text(p: BlockPartition) -> str:
    return ";".join(
        ",".join(f"{start}:{end}" for start, end in ranges) for ranges in p.blocks
    )


def _partition_from_text(text: str, d: int) -> BlockPartition:
    blocks = []
    for chunk in text.split(";"):
        ranges = []
        for token in chunk.split(","):
            start, end = token.split(":")
            ranges.append((int(start), int(end)))
        blocks.append(ranges)
    return BlockPartition(blocks, d)


def _weights_to_text(w: WeightSequence) -> str:
    return f"{w.kind}:{_fmt(w.param)}"


def _weights_from_text(text: str) -> WeightSequence:
    kind, param = text.split(":")
    return WeightSequence(kind, float(param))


def _momentum_to_text(m: MomentumSchedule) -> str:
    return f"{m.kind}:{_fmt(m.beta)}:{_fmt(m.tau)}"


def _momentum_from_text(text: str) -> MomentumSchedule:
    kind, beta, tau = text.split(":")
    return MomentumSchedule(kind, float(beta), float(tau))


def _stepsize_to_text(s: StepsizeSchedule) -> str:
    return f"{s.kind}:{_fmt(s.eta)}"


def _stepsize_from_text(text: str, momentum: MomentumSchedule | None) -> StepsizeSchedule:
    kind, eta = text.split(":")
    return StepsizeSchedule(kind, float(eta), momentum if kind == "bias_corrected" else None)


def serialize_state(opt) -> str:
    """Self-describing text checkpoint of an optimizer's full state."""
    lines = [f"{STATE_HEADER} {STATE_VERSION}"]
    common = [
        ("d", str(opt.partition.d)),
        ("partition", _partition_to_text(opt.partition)),
        ("eps", _fmt(opt.eps)),
        ("clip", "none" if opt.clip_norm is None else _fmt(opt.clip_norm)),
        ("weight_decay", _fmt(opt.weight_decay)),
        ("t", str(opt.t)),
    ]
    if isinstance(opt, BlockAdagrad):
        lines.append("kind=block_adagrad")
        lines.extend(f"{k}={v}" for k, v in common)
        lines.append(f"eta={_fmt(opt.eta)}")
        lines.append(f"v={_fmt_array(opt.v)}")
    elif isinstance(opt, BlockAdam):
        lines.append("kind=block_adam")
        lines.extend(f"{k}={v}" for k, v in common)
        lines.append(f"weights={_weights_to_text(opt.weights)}")
        lines.append(f"momentum={_momentum_to_text(opt.momentum)}")
        lines.append(f"stepsize={_stepsize_to_text(opt.stepsize)}")
        lines.append(f"accumulation={opt.accumulation}")
        lines.append(f"A={_fmt(opt.A)}")
        lines.append(f"beta_prod={_fmt(opt.beta_prod)}")
        lines.append(f"v={_fmt_array(opt.v)}")
        lines.append(f"m={_fmt_array(opt.m)}")
    else:
        raise TypeError(f"cannot serialize {type(opt).__name__}")
    return "\n".join(lines) + "\n"


def deserialize_state(text: str):
    """Rebuild an optimizer from `serialize_state` output."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty state document")
    header = lines[0].split()
    if len(header) != 2 or header[0] != STATE_HEADER:
        raise ValueError("corrupted state header")
    if int(header[1]) != STATE_VERSION:
        raise ValueError(f"unsupported state version {header[1]}")
    fields = {}
    for line in lines[1:]:
        if "=" not in line:
            raise ValueError(f"malformed state line: {line!r}")
        key, value = line.split("=", 1)
        fields[key] = value

    def need(key):
        if key not in fields:
            raise ValueError(f"truncated state: missing {key!r}")
        return fields[key]

    kind = need("kind")
    d = int(need("d"))
    partition = _partition_from_text(need("partition"), d)
    eps = float(need("eps"))
    clip = None if need("clip") == "none" else float(need("clip"))
    weight_decay = float(need("weight_decay"))
    t = int(need("t"))
    if kind == "block_adagrad":
        opt = BlockAdagrad(partition, eta=float(need("eta")), eps=eps,
                           clip_norm=clip, weight_decay=weight_decay)
        v = _parse_array(need("v"))
        if v.shape != (partition.B,):
            raise ValueError("truncated state: accumulator length mismatch")
        opt.v = v
        opt.t = t
        return opt
    if kind == "block_adam":
        momentum = _momentum_from_text(need("momentum"))
        opt = BlockAdam(
            partition,
            weights=_weights_from_text(need("weights")),
            stepsize=_stepsize_from_text(need("stepsize"), momentum),
            momentum=momentum,
            eps=eps,
            accumulation=need("accumulation"),
            clip_norm=clip,
            weight_decay=weight_decay,
        )
        v = _parse_array(need("v"))
        m = _parse_array(need("m"))
        if v.shape != (partition.B,) or m.shape != (partition.d,):
            raise ValueError("truncated state: array length mismatch")
        opt.v = v
        opt.m = m
        opt.A = float(need("A"))
        opt.beta_prod = float(need("beta_prod"))
        opt.t = t
        return opt
    raise ValueError(f"unknown optimizer kind {kind!r}")
