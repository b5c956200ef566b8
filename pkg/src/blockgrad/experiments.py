"""Reproducible desk-scale experiment harnesses.

Each runner takes a frozen config (seed included), derives one child RNG
per repetition, and aggregates per-repetition traces by index, so results
are byte-stable for a given (config, seed) regardless of thread count.
CSV output uses 9 significant digits.

Experiments:
  regret      online hinge learning; blockwise-Adagrad regret curves against
              a per-realization comparator, plus the per-run regret bound.
  nonconvex   momentum variant on the smoothed hinge; pool estimates of the
              expected squared gradient norm.
  minnorm     per-sample least squares; convergence to the minimum-norm
              solution and the block-rowspace invariant.
  layerwise   one trainable layer of a small invertible MLP; convergence to
              the closed-form minimum-norm layer weights.
  stability   paired runs on datasets differing in one example; parameter
              and loss divergence traces.
  diagnostics second-moment dispersion statistics per block.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from blockgrad.core import BlockPartition, Rng
from blockgrad.models import (
    FeatureBlockSpec,
    Mlp,
    SyntheticStream,
    hinge_loss_grad,
    least_squares_grad,
    min_norm_least_squares,
    random_invertible,
    smoothed_hinge_batch,
    smoothed_hinge_loss_grad,
)
from blockgrad.optim import AdagradRef, BlockAdagrad, BlockAdam
from blockgrad.schedules import MomentumSchedule, StepsizeSchedule, WeightSequence

__all__ = [
    "paper_partitions",
    "ComparatorConfig",
    "RegretConfig",
    "RegretResult",
    "run_regret_experiment",
    "regret_bound_value",
    "NonconvexConfig",
    "NonconvexResult",
    "run_nonconvex_experiment",
    "MinNormConfig",
    "MinNormResult",
    "run_minnorm_ls",
    "LayerwiseConfig",
    "LayerwiseResult",
    "run_layerwise_minnorm",
    "StabilityConfig",
    "StabilityResult",
    "run_stability_probe",
    "DiagnosticsConfig",
    "DiagnosticsReport",
    "compute_diagnostics",
    "run_diagnostics_experiment",
    "iterate_average",
    "write_regret_csv",
    "write_nonconvex_csv",
    "write_stability_csv",
    "write_diagnostics_csv",
]

DEFAULT_STREAM = tuple(SyntheticStream.paper_blocks())


def paper_partitions(d: int) -> dict[str, BlockPartition]:
    """The five benchmark partitions: whole vector, input-matched halves,
    a misaligned 3-way split, quarters, and one block per coordinate."""
    half = d // 2
    a = round(0.35 * d)
    b = round(0.30 * d)
    quarter = d // 4
    return {
        "B1": BlockPartition.single(d),
        "B2": BlockPartition.from_sizes([half, d - half]),
        "B3": BlockPartition.from_sizes([a, b, d - a - b]),
        "B4": BlockPartition.from_sizes([quarter] * 3 + [d - 3 * quarter]),
        "Bd": BlockPartition.coordinatewise(d),
    }


def iterate_average(trajectory) -> np.ndarray:
    """(1/T) sum_t theta_t over a non-empty trajectory."""
    traj = np.atleast_2d(np.asarray(trajectory, dtype=np.float64))
    if traj.shape[0] == 0:
        raise ValueError("empty trajectory")
    return traj.mean(axis=0)


def _map_indexed(fn, count: int, threads: int):
    if threads <= 1:
        return [fn(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(count)))


def _block_indicator(partition: BlockPartition) -> np.ndarray:
    M = np.zeros((partition.d, partition.B))
    M[np.arange(partition.d), partition.coord_block] = 1.0
    return M


def _fmt(x: float) -> str:
    return format(float(x), ".9g")


def _write_rows(path, header: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


# ---------------------------------------------------------------------------
# Regret experiment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ComparatorConfig:
    """Full-batch Adagrad solve of the hindsight-optimal parameters.

    Runs at most max_iters iterations and stops once the best objective
    improved by less than tol over the last window iterations.  When
    warm_start is set the solver starts from the iterate average of the
    best online run instead of zero, which usually cuts the iteration
    count by an order of magnitude.
    """

    eta: float = 1.0
    eps: float = 1e-8
    max_iters: int = 100_000
    window: int = 1_000
    tol: float = 1e-10
    warm_start: bool = True


@dataclass(frozen=True)
class RegretConfig:
    T: int = 1_000
    repetitions: int = 100
    eta: float = 0.01
    eps: float = 1e-8
    seed: int = 42
    partitions: tuple[str, ...] = ("B1", "B2", "B3", "B4", "Bd")
    stream: tuple[FeatureBlockSpec, ...] = DEFAULT_STREAM
    comparator: ComparatorConfig = field(default_factory=ComparatorConfig)


@dataclass
class RegretResult:
    ts: np.ndarray
    labels: list[str]
    mean: dict
    std: dict
    final_per_rep: dict
    bound_per_rep: dict
    comparator_converged: list[bool]
    config: RegretConfig


def _hinge_objective(theta: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
    margins = y * (X @ theta)
    return float(np.maximum(0.0, 1.0 - margins).sum())


def _comparator_solve(X, y, cfg: ComparatorConfig, theta0: np.ndarray):
    """Best fixed parameters for the realized sequence (summed hinge loss)."""
    theta = theta0.copy()
    opt = AdagradRef(X.shape[1], eta=cfg.eta, eps=cfg.eps)
    best_obj = _hinge_objective(theta, X, y)
    best_theta = theta.copy()
    history = [best_obj]
    converged = False
    for _ in range(cfg.max_iters):
        margins = y * (X @ theta)
        active = margins < 1.0
        grad = -(X.T @ (y * active))
        theta = opt.step(theta, grad)
        obj = _hinge_objective(theta, X, y)
        if obj < best_obj:
            best_obj = obj
            best_theta = theta.copy()
        history.append(best_obj)
        if len(history) > cfg.window and history[-cfg.window - 1] - best_obj < cfg.tol:
            converged = True
            break
    return best_theta, best_obj, converged


def regret_bound_value(trajectory, partition: BlockPartition, eta: float,
                       theta_star: np.ndarray,
                       block_grad_norms: np.ndarray) -> float:
    """RHS of the blockwise regret bound with trajectory-estimated radii:

        sum_b [D_b^2/(2 eta sqrt(d_b)) + eta sqrt(d_b)] * ||g_{1:T, G_b}||_2,

    where D_b is the largest distance of the block-b iterates from the
    comparator over the realized run.
    """
    traj = np.atleast_2d(np.asarray(trajectory, dtype=np.float64))
    diffs = traj - theta_star
    M = _block_indicator(partition)
    block_sq = (diffs * diffs) @ M
    D = np.sqrt(block_sq.max(axis=0))
    root_d = np.sqrt(partition.sizes.astype(np.float64))
    terms = (D * D / (2.0 * eta * root_d) + eta * root_d) * block_grad_norms
    return float(terms.sum())


def _regret_one_rep(rep: int, cfg: RegretConfig, partitions):
    rng = Rng(cfg.seed).child(rep)
    stream = SyntheticStream(list(cfg.stream), rng)
    d = stream.dim
    X, y = stream.sample(cfg.T)

    losses = {}
    trajectories = {}
    grad_norms = {}
    for label in cfg.partitions:
        partition = partitions[label]
        opt = BlockAdagrad(partition, eta=cfg.eta, eps=cfg.eps)
        theta = np.zeros(d)
        traj = np.empty((cfg.T + 1, d))
        traj[0] = theta
        loss_seq = np.empty(cfg.T)
        for t in range(cfg.T):
            loss, g = hinge_loss_grad(theta, X[t], y[t])
            loss_seq[t] = loss
            theta = opt.step(theta, g)
            traj[t + 1] = theta
        losses[label] = loss_seq
        trajectories[label] = traj
        grad_norms[label] = opt.block_gradient_norms()

    if cfg.comparator.warm_start:
        best_label = min(cfg.partitions, key=lambda lb: losses[lb].sum())
        theta0 = iterate_average(trajectories[best_label])
    else:
        theta0 = np.zeros(d)
    theta_star, _, converged = _comparator_solve(X, y, cfg.comparator, theta0)

    comp_margins = y * (X @ theta_star)
    comp_cum = np.cumsum(np.maximum(0.0, 1.0 - comp_margins))

    curves = {}
    bounds = {}
    for label in cfg.partitions:
        curves[label] = np.cumsum(losses[label]) - comp_cum
        bounds[label] = regret_bound_value(
            trajectories[label], partitions[label], cfg.eta, theta_star,
            grad_norms[label])
    return curves, bounds, converged


def run_regret_experiment(config: RegretConfig, threads: int = 1) -> RegretResult:
    d = sum(b.width for b in config.stream)
    partitions = paper_partitions(d)
    unknown = [lb for lb in config.partitions if lb not in partitions]
    if unknown:
        raise ValueError(f"unknown partition labels {unknown}")

    reps = _map_indexed(lambda r: _regret_one_rep(r, config, partitions),
                        config.repetitions, threads)

    labels = list(config.partitions)
    mean, std, final_per_rep, bound_per_rep = {}, {}, {}, {}
    for label in labels:
        stack = np.stack([curves[label] for curves, _, _ in reps])
        mean[label] = stack.mean(axis=0)
        std[label] = stack.std(axis=0)
        final_per_rep[label] = stack[:, -1]
        bound_per_rep[label] = np.array([bounds[label] for _, bounds, _ in reps])
    return RegretResult(
        ts=np.arange(1, config.T + 1),
        labels=labels,
        mean=mean,
        std=std,
        final_per_rep=final_per_rep,
        bound_per_rep=bound_per_rep,
        comparator_converged=[conv for _, _, conv in reps],
        config=config,
    )


def write_regret_csv(result: RegretResult, path) -> None:
    header = ["t"]
    for label in result.labels:
        header += [f"mean_regret_{label}", f"std_regret_{label}"]
    rows = []
    for i, t in enumerate(result.ts):
        row = [str(int(t))]
        for label in result.labels:
            row += [_fmt(result.mean[label][i]), _fmt(result.std[label][i])]
        rows.append(row)
    _write_rows(path, header, rows)


# ---------------------------------------------------------------------------
# Nonconvex experiment
# ---------------------------------------------------------------------------

def build_weight_sequence(kind: str, param: float) -> WeightSequence:
    builders = {
        "constant": WeightSequence.constant,
        "poly": WeightSequence.polynomial,
        "exp": WeightSequence.exponential,
        "poly_decay": WeightSequence.poly_decay,
    }
    if kind not in builders:
        raise ValueError(f"unknown weight sequence {kind!r}")
    return builders[kind](param)


def build_momentum(kind: str, beta: float, tau: float) -> MomentumSchedule:
    if kind == "const":
        return MomentumSchedule.constant(beta)
    if kind == "increasing":
        return MomentumSchedule.increasing(beta, tau)
    raise ValueError(f"unknown momentum schedule {kind!r}")


def build_stepsize(kind: str, eta: float,
                   momentum: MomentumSchedule) -> StepsizeSchedule:
    if kind == "const":
        return StepsizeSchedule.constant(eta)
    if kind == "invsqrt":
        return StepsizeSchedule.inv_sqrt(eta)
    if kind == "bias_corrected":
        return StepsizeSchedule.bias_corrected(eta, momentum)
    raise ValueError(f"unknown stepsize schedule {kind!r}")


@dataclass(frozen=True)
class NonconvexConfig:
    # The horizon and seed are the documented defaults of the reproduction
    # preset: short enough that the partition groups are still separated
    # (the problem is interpolated well before t = 1000).
    T: int = 200
    repetitions: int = 10
    weight_seq: str = "constant"
    weight_param: float = 1.0
    stepsize: str = "invsqrt"
    eta: float = 1.0
    momentum: str = "const"
    beta: float = 0.9
    momentum_tau: float = 1.0
    eps: float = 1e-8
    pool_size: int = 10_000
    stride: int = 10
    seed: int = 9
    partitions: tuple[str, ...] = ("B1", "B2", "B3", "B4", "Bd")
    stream: tuple[FeatureBlockSpec, ...] = DEFAULT_STREAM

    def make_optimizer(self, partition: BlockPartition) -> BlockAdam:
        momentum = build_momentum(self.momentum, self.beta, self.momentum_tau)
        return BlockAdam(
            partition,
            build_weight_sequence(self.weight_seq, self.weight_param),
            build_stepsize(self.stepsize, self.eta, momentum),
            momentum,
            eps=self.eps,
        )


@dataclass
class NonconvexResult:
    ts: np.ndarray
    labels: list[str]
    mean: dict
    std: dict
    final_per_rep: dict
    config: NonconvexConfig


def _pool_grad_norm_sq(theta, pool_X, pool_y) -> float:
    _, grad = smoothed_hinge_batch(theta, pool_X, pool_y)
    return float(grad @ grad)


def _nonconvex_one_rep(rep: int, cfg: NonconvexConfig, partitions, eval_ts):
    rng = Rng(cfg.seed).child(rep)
    stream = SyntheticStream(list(cfg.stream), rng)
    d = stream.dim
    pool_X, pool_y = stream.sample(cfg.pool_size)
    X, y = stream.sample(cfg.T)

    curves = {}
    for label in cfg.partitions:
        partition = partitions[label]
        opt = cfg.make_optimizer(partition)
        theta = np.zeros(d)
        estimates = []
        k = 0
        for t in range(1, cfg.T + 1):
            _, g = smoothed_hinge_loss_grad(theta, X[t - 1], y[t - 1])
            theta = opt.step(theta, g)
            if k < len(eval_ts) and t == eval_ts[k]:
                estimates.append(_pool_grad_norm_sq(theta, pool_X, pool_y))
                k += 1
        curves[label] = np.array(estimates)
    return curves


def run_nonconvex_experiment(config: NonconvexConfig, threads: int = 1) -> NonconvexResult:
    d = sum(b.width for b in config.stream)
    partitions = paper_partitions(d)
    eval_ts = sorted(set(range(config.stride, config.T + 1, config.stride)) | {config.T})

    reps = _map_indexed(
        lambda r: _nonconvex_one_rep(r, config, partitions, eval_ts),
        config.repetitions, threads)

    labels = list(config.partitions)
    mean, std, final_per_rep = {}, {}, {}
    for label in labels:
        stack = np.stack([curves[label] for curves in reps])
        mean[label] = stack.mean(axis=0)
        std[label] = stack.std(axis=0)
        final_per_rep[label] = stack[:, -1]
    return NonconvexResult(
        ts=np.array(eval_ts), labels=labels, mean=mean, std=std,
        final_per_rep=final_per_rep, config=config)


def write_nonconvex_csv(result: NonconvexResult, path) -> None:
    header = ["t"] + [f"grad_norm_sq_{label}" for label in result.labels]
    rows = []
    for i, t in enumerate(result.ts):
        rows.append([str(int(t))] + [_fmt(result.mean[label][i]) for label in result.labels])
    _write_rows(path, header, rows)


# ---------------------------------------------------------------------------
# Minimum-norm least squares
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MinNormConfig:
    n: int = 5
    d: int = 20
    num_blocks: int = 1
    iterations: int = 20_000
    eta: float = 0.5
    eps: float = 1e-8
    seed: int = 42
    record_stride: int = 100


@dataclass
class MinNormResult:
    theta: np.ndarray
    theta_star: np.ndarray
    rel_distance: float
    rowspace_max_resid: float
    block_residuals: np.ndarray
    distance_curve: np.ndarray
    average_rel_distance: float
    config: MinNormConfig


def _even_partition(d: int, num_blocks: int) -> BlockPartition:
    if d % num_blocks:
        raise ValueError("num_blocks must divide d")
    return BlockPartition.from_sizes([d // num_blocks] * num_blocks)


def run_minnorm_ls(config: MinNormConfig,
                   data: tuple[np.ndarray, np.ndarray] | None = None) -> MinNormResult:
    """Per-sample least-squares descent from zero; the block-b component of
    every iterate must stay in the row space of the block's columns."""
    rng = Rng(config.seed)
    if data is None:
        X = rng.normal((config.n, config.d))
        y = rng.normal(config.n)
    else:
        X, y = data
    partition = _even_partition(config.d, config.num_blocks)
    theta_star = min_norm_least_squares(X, y)
    # distances fall back to absolute when the target is the zero vector
    norm_star = float(np.linalg.norm(theta_star)) or 1.0

    # Per-block projector factors for the rowspace check.
    factors = []
    for b in range(partition.B):
        idx = partition.indices(b)
        Xb = X[:, idx]
        G = Xb @ Xb.T
        try:
            L = np.linalg.cholesky(G)
        except np.linalg.LinAlgError as exc:
            raise ValueError(f"block {b} columns are rank-deficient") from exc
        factors.append((idx, Xb, L))

    def rowspace_residuals(theta):
        out = np.zeros(partition.B)
        for b, (idx, Xb, L) in enumerate(factors):
            tb = theta[idx]
            norm = np.linalg.norm(tb)
            if norm == 0.0:
                continue
            z = np.linalg.solve(L, Xb @ tb)
            proj = Xb.T @ np.linalg.solve(L.T, z)
            out[b] = np.linalg.norm(tb - proj) / norm
        return out

    opt = BlockAdagrad(partition, eta=config.eta, eps=config.eps)
    theta = np.zeros(config.d)
    running_sum = np.zeros(config.d)
    max_resid = 0.0
    curve = []
    for t in range(1, config.iterations + 1):
        i = rng.randint(config.n)
        _, g = least_squares_grad(theta, X, y, index=i)
        theta = opt.step(theta, g)
        running_sum += theta
        max_resid = max(max_resid, float(rowspace_residuals(theta).max()))
        if t % config.record_stride == 0 or t == config.iterations:
            curve.append(np.linalg.norm(theta - theta_star) / norm_star)

    avg = running_sum / config.iterations
    return MinNormResult(
        theta=theta,
        theta_star=theta_star,
        rel_distance=float(np.linalg.norm(theta - theta_star) / norm_star),
        rowspace_max_resid=max_resid,
        block_residuals=rowspace_residuals(theta),
        distance_curve=np.array(curve),
        average_rel_distance=float(np.linalg.norm(avg - theta_star) / norm_star),
        config=config,
    )


# ---------------------------------------------------------------------------
# Layerwise minimum norm
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerwiseConfig:
    L: int = 2
    d: int = 8
    n: int = 4
    slope: float = 0.1
    iterations: int = 20_000
    eta: float = 0.5
    eps: float = 1e-8
    seed: int = 42


@dataclass
class LayerwiseResult:
    weights: np.ndarray
    target: np.ndarray
    rel_distance: float
    target_loss: float
    final_loss: float
    config: LayerwiseConfig


def run_layerwise_minnorm(config: LayerwiseConfig) -> LayerwiseResult:
    """Train the bottom layer of an invertible stack from zero with a global
    adaptive stepsize; compare against the closed-form minimum-norm layer."""
    rng = Rng(config.seed)
    X = rng.normal((config.n, config.d))
    Y = rng.normal((config.n, config.d))
    uppers = [random_invertible(config.d, rng) for _ in range(config.L - 1)]
    model = Mlp([None] + uppers, trainable=0, slope=config.slope, dim=config.d)
    target = model.target_solution(X, Y)
    target_loss, _ = model.loss_grad(target, X, Y)

    partition = BlockPartition.single(config.d * config.d)
    opt = BlockAdagrad(partition, eta=config.eta, eps=config.eps)
    w = np.zeros(config.d * config.d)
    for _ in range(config.iterations):
        i = rng.randint(config.n)
        _, g = model.loss_grad(w, X[i:i + 1], Y[i:i + 1])
        w = opt.step(w, g)

    final_loss, _ = model.loss_grad(w, X, Y)
    return LayerwiseResult(
        weights=w,
        target=target,
        rel_distance=float(np.linalg.norm(w - target) / np.linalg.norm(target)),
        target_loss=target_loss,
        final_loss=final_loss,
        config=config,
    )


# ---------------------------------------------------------------------------
# Stability probe
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StabilityConfig:
    # eta is small enough that gradients stay active over the whole horizon;
    # larger stepsizes interpolate the sample within ~100 steps, after which
    # the divergence traces freeze.  beta defaults to 0 (the probe's analyzed
    # setting); setting it > 0 is allowed for exploration only.
    n: int = 100
    steps: int = 1_000
    repetitions: int = 50
    probe_count: int = 20
    eta: float = 0.003
    eps: float = 1e-8
    weight_a: float = 1.0
    beta: float = 0.0
    seed: int = 42
    partitions: tuple[str, ...] = ("B1", "B2", "Bd")
    stream: tuple[FeatureBlockSpec, ...] = DEFAULT_STREAM
    identical: bool = False  # run with S' = S (divergence must stay 0)


@dataclass
class StabilityResult:
    ts: np.ndarray  # iterate index, starting at 1
    labels: list[str]
    delta_mean: dict
    ftilde_mean: dict
    config: StabilityConfig


def _smoothed_hinge_values(theta, X, y):
    margins = y * (X @ theta)
    return np.where(
        margins <= 0.0, 0.5 - margins,
        np.where(margins < 1.0, 0.5 * (1.0 - margins) ** 2, 0.0))


def _stability_one_rep(rep: int, cfg: StabilityConfig, partitions):
    rng = Rng(cfg.seed).child(rep)
    stream = SyntheticStream(list(cfg.stream), rng)
    d = stream.dim
    X, y = stream.sample(cfg.n)
    Xp, yp = X.copy(), y.copy()
    swap = rng.randint(cfg.n)
    x_new, y_new = stream.next()
    if not cfg.identical:
        Xp[swap] = x_new
        yp[swap] = y_new
    idx_seq = rng.randint(cfg.n, size=cfg.steps)
    probes_X, probes_y = stream.sample(cfg.probe_count)

    def make_opt(partition):
        return BlockAdam(
            partition,
            WeightSequence.constant(cfg.weight_a),
            StepsizeSchedule.inv_sqrt(cfg.eta),
            MomentumSchedule.constant(cfg.beta),
            eps=cfg.eps,
        )

    deltas = {}
    ftildes = {}
    for label in cfg.partitions:
        partition = partitions[label]
        opt_a, opt_b = make_opt(partition), make_opt(partition)
        ta, tb = np.zeros(d), np.zeros(d)
        delta = np.zeros(cfg.steps + 1)
        ftilde = np.zeros(cfg.steps + 1)
        for k in range(cfg.steps):
            i = int(idx_seq[k])
            _, ga = smoothed_hinge_loss_grad(ta, X[i], y[i])
            _, gb = smoothed_hinge_loss_grad(tb, Xp[i], yp[i])
            ta = opt_a.step(ta, ga)
            tb = opt_b.step(tb, gb)
            delta[k + 1] = np.linalg.norm(ta - tb)
            fa = _smoothed_hinge_values(ta, probes_X, probes_y)
            fb = _smoothed_hinge_values(tb, probes_X, probes_y)
            ftilde[k + 1] = float(np.abs(fa - fb).mean())
        deltas[label] = delta
        ftildes[label] = ftilde
    return deltas, ftildes


def run_stability_probe(config: StabilityConfig, threads: int = 1) -> StabilityResult:
    d = sum(b.width for b in config.stream)
    partitions = paper_partitions(d)
    reps = _map_indexed(lambda r: _stability_one_rep(r, config, partitions),
                        config.repetitions, threads)
    labels = list(config.partitions)
    delta_mean, ftilde_mean = {}, {}
    for label in labels:
        delta_mean[label] = np.stack([dl[label] for dl, _ in reps]).mean(axis=0)
        ftilde_mean[label] = np.stack([ft[label] for _, ft in reps]).mean(axis=0)
    return StabilityResult(
        ts=np.arange(1, config.steps + 2),
        labels=labels,
        delta_mean=delta_mean,
        ftilde_mean=ftilde_mean,
        config=config,
    )


def write_stability_csv(result: StabilityResult, path) -> None:
    header = (["t"]
              + [f"delta_{label}" for label in result.labels]
              + [f"ftilde_{label}" for label in result.labels])
    rows = []
    for i, t in enumerate(result.ts):
        row = [str(int(t))]
        row += [_fmt(result.delta_mean[label][i]) for label in result.labels]
        row += [_fmt(result.ftilde_mean[label][i]) for label in result.labels]
        rows.append(row)
    _write_rows(path, header, rows)


# ---------------------------------------------------------------------------
# Dispersion diagnostics
# ---------------------------------------------------------------------------

@dataclass
class DiagnosticsReport:
    sigma_i_sq: np.ndarray
    sigma_b_sq: np.ndarray
    cv: np.ndarray
    r1: float
    r2: float
    r3: float
    r_min: float
    vbar_fine: float
    vbar_block: float
    vbar_ratio: float
    partition: BlockPartition
    eps: float


def compute_diagnostics(epoch_grads, partition: BlockPartition,
                        eps: float) -> DiagnosticsReport:
    """Second-moment dispersion statistics from per-sample gradients.

    epoch_grads is a list of (samples x d) arrays, one per epoch.  The
    per-coordinate and per-block second moments are the maxima over epochs
    of the epoch means; the comparison ratios r1/r2/r3 aggregate how much
    detail the per-coordinate view adds over the per-block one.  The vbar
    estimates track the running-mean accumulator maxima over the
    concatenated sample stream, at block level and at coordinate level.
    """
    if eps <= 0:
        raise ValueError("diagnostics need eps > 0")
    if not epoch_grads:
        raise ValueError("need at least one epoch of gradients")
    d = partition.d
    M = _block_indicator(partition)
    sizes = partition.sizes.astype(np.float64)

    epoch_coord = []
    for G in epoch_grads:
        G = np.atleast_2d(np.asarray(G, dtype=np.float64))
        if G.shape[1] != d:
            raise ValueError("gradient dimension mismatch")
        epoch_coord.append((G * G).mean(axis=0))
    epoch_coord = np.stack(epoch_coord)
    sigma_i_sq = epoch_coord.max(axis=0)
    sigma_b_sq = (epoch_coord @ M / sizes).max(axis=0)

    block_mean = sigma_i_sq @ M / sizes
    block_sq_mean = (sigma_i_sq * sigma_i_sq) @ M / sizes
    block_var = np.maximum(0.0, block_sq_mean - block_mean * block_mean)
    with np.errstate(invalid="ignore", divide="ignore"):
        cv = np.sqrt(block_var) / block_mean
    if np.any(block_mean == 0.0):
        warnings.warn("zero-mean block: coefficient of variation undefined")
        cv = np.where(block_mean == 0.0, np.nan, cv)

    if not np.any(sigma_b_sq > 0.0):
        raise ValueError("all gradients are zero; dispersion ratios undefined")
    sigma_i = np.sqrt(sigma_i_sq)
    sigma_b = np.sqrt(sigma_b_sq)
    log_i = np.log(sigma_i_sq / eps ** 2 + 1.0)
    log_b = np.log(sigma_b_sq / eps ** 2 + 1.0)
    r1 = float(log_i.sum() / (sizes @ log_b))
    r2 = float(sigma_i.sum() / (sizes @ sigma_b))
    r3 = float((sigma_i * log_i).sum() / ((sizes * sigma_b) @ log_b))

    # Running-mean accumulator maxima over the concatenated stream.
    all_sq = np.concatenate([np.atleast_2d(np.asarray(G)) ** 2 for G in epoch_grads])
    counts = np.arange(1, all_sq.shape[0] + 1, dtype=np.float64)[:, None]
    cum_coord = np.cumsum(all_sq, axis=0) / counts
    cum_block = np.cumsum(all_sq @ M / sizes, axis=0) / counts
    vbar_fine = float(cum_coord.max())
    vbar_block = float(cum_block.max())
    vbar_ratio = float(np.sqrt((vbar_fine + eps ** 2) / (vbar_block + eps ** 2)))

    return DiagnosticsReport(
        sigma_i_sq=sigma_i_sq,
        sigma_b_sq=sigma_b_sq,
        cv=cv,
        r1=r1,
        r2=r2,
        r3=r3,
        r_min=min(r1, r2, r3),
        vbar_fine=vbar_fine,
        vbar_block=vbar_block,
        vbar_ratio=vbar_ratio,
        partition=partition,
        eps=eps,
    )


@dataclass(frozen=True)
class DiagnosticsConfig:
    epochs: int = 3
    steps_per_epoch: int = 200
    samples_per_epoch: int = 2_000
    eta: float = 1.0
    beta: float = 0.9
    eps: float = 1e-3
    seed: int = 42
    partition: str = "B2"
    stream: tuple[FeatureBlockSpec, ...] = DEFAULT_STREAM


def run_diagnostics_experiment(config: DiagnosticsConfig) -> DiagnosticsReport:
    """Train briefly on the smoothed hinge, sampling per-example gradients
    at the end of each epoch, then compute the dispersion report."""
    rng = Rng(config.seed)
    stream = SyntheticStream(list(config.stream), rng)
    d = stream.dim
    partition = paper_partitions(d)[config.partition]
    opt = BlockAdam(
        partition,
        WeightSequence.constant(1.0),
        StepsizeSchedule.inv_sqrt(config.eta),
        MomentumSchedule.constant(config.beta),
        eps=config.eps,
    )
    theta = np.zeros(d)
    epoch_grads = []
    for _ in range(config.epochs):
        X, y = stream.sample(config.steps_per_epoch)
        for t in range(config.steps_per_epoch):
            _, g = smoothed_hinge_loss_grad(theta, X[t], y[t])
            theta = opt.step(theta, g)
        Xs, ys = stream.sample(config.samples_per_epoch)
        margins = ys * (Xs @ theta)
        coeff = np.where(margins <= 0.0, -1.0,
                         np.where(margins < 1.0, -(1.0 - margins), 0.0))
        epoch_grads.append(Xs * (coeff * ys)[:, None])
    return compute_diagnostics(epoch_grads, partition, config.eps)


def write_diagnostics_csv(report: DiagnosticsReport, path) -> None:
    header = ["block", "d_b", "sigma_b_sq", "cv",
              "r1", "r2", "r3", "r_min", "vbar_ratio"]
    rows = []
    for b in range(report.partition.B):
        rows.append([
            str(b), str(int(report.partition.sizes[b])),
            _fmt(report.sigma_b_sq[b]), _fmt(report.cv[b]), "", "", "", "", "",
        ])
    rows.append(["summary", "", "", "",
                 _fmt(report.r1), _fmt(report.r2), _fmt(report.r3),
                 _fmt(report.r_min), _fmt(report.vbar_ratio)])
    _write_rows(path, header, rows)
