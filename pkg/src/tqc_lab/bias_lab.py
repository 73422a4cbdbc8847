"""Single-state MDP laboratory for comparing overestimation control methods.

Each method trains an ensemble of small networks on a fixed 50-point
dataset of (action, reward) pairs. The TD bootstrap action is the argmax of
the method's policy objective on a dense action grid, recomputed every
iteration. The learned value is compared against the exact Q of that
greedy policy.
"""

from __future__ import annotations

import csv
import enum
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from tqc_lab.distributional import quantile_fractions, shared_target_loss_terms, sort_pooled
from tqc_lab.envs import TOY_GAMMA, TOY_SIGMA, toy_mean_reward, toy_sample_reward
from tqc_lab.errors import InvalidArgumentError
from tqc_lab.numeric import (
    AdamState,
    DenseNetSpec,
    ParamVector,
    adam_step,
    backward,
    ema_update,
    forward,
    init_params,
)

AVG_SWEEP = (3, 5, 10, 20, 50)
MIN_SWEEP = (2, 3, 4, 6, 8, 10)
TQC_SWEEP = (0, 1, 2, 3, 4, 5, 6, 7, 10, 13, 16)


@dataclass(frozen=True)
class ToyConfig:
    grid_size: int = 50
    iterations: int = 3000
    hidden_sizes: tuple[int, ...] = (50, 50)
    gamma: float = TOY_GAMMA
    sigma: float = TOY_SIGMA
    eval_grid_size: int = 2000
    policy_grid_step: float = 0.001
    seeds: int = 100
    lr: float = 2e-3
    inner_steps: int = 5
    n_atoms: int = 25
    tqc_networks: int = 2
    target_networks: bool = False
    target_beta: float = 0.005
    # "dense" scans the whole policy grid each TD step; "refine" scans every
    # 10th point, then the dense grid around the coarse winner.
    bootstrap_search: str = "dense"

    def __post_init__(self):
        for name in ("grid_size", "iterations", "inner_steps", "eval_grid_size", "seeds", "n_atoms", "tqc_networks"):
            if getattr(self, name) <= 0:
                raise InvalidArgumentError(f"{name} must be positive")
        if self.grid_size < 2:
            raise InvalidArgumentError("grid_size must be at least 2")
        if self.bootstrap_search not in ("dense", "refine"):
            raise InvalidArgumentError(f"unknown bootstrap_search {self.bootstrap_search!r}")

    def policy_grid(self) -> np.ndarray:
        n = int(round(2.0 / self.policy_grid_step)) + 1
        return np.linspace(-1.0, 1.0, n)

    def eval_grid(self) -> np.ndarray:
        return np.linspace(-1.0, 1.0, self.eval_grid_size)


class Family(str, enum.Enum):
    AVG = "avg"
    MIN = "min"
    TQC = "tqc"


@dataclass(frozen=True)
class MethodSpec:
    """AVG(N), MIN(N) or TQC(d of M atoms, N networks)."""

    family: Family
    n_networks: int
    drop: int = 0
    n_atoms: int = 25

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if self.n_networks < 1:
            raise InvalidArgumentError("need at least one network")
        if self.family is Family.TQC and not 0 <= self.drop < self.n_atoms:
            raise InvalidArgumentError(f"drop must satisfy 0 <= d < {self.n_atoms}")

    @property
    def output_dim(self) -> int:
        return self.n_atoms if self.family is Family.TQC else 1

    @property
    def label(self) -> str:
        if self.family is Family.TQC:
            return f"tqc_d{self.drop}_n{self.n_networks}"
        return f"{self.family.value}_n{self.n_networks}"

    @property
    def sweep_value(self) -> int:
        return self.drop if self.family is Family.TQC else self.n_networks


def sweep_methods(family: Family | str, config: ToyConfig = ToyConfig(), values=None) -> list[MethodSpec]:
    family = Family(family)
    if family is Family.AVG:
        return [MethodSpec(family, n) for n in (values or AVG_SWEEP)]
    if family is Family.MIN:
        return [MethodSpec(family, n) for n in (values or MIN_SWEEP)]
    return [
        MethodSpec(family, config.tqc_networks, d, config.n_atoms) for d in (values or TQC_SWEEP)
    ]


@dataclass(frozen=True)
class ToyDataset:
    actions: np.ndarray
    rewards: np.ndarray

    def __post_init__(self):
        self.actions.setflags(write=False)
        self.rewards.setflags(write=False)

    def __len__(self):
        return len(self.actions)


def build_toy_dataset(grid_size: int, rng: np.random.Generator, sigma: float = TOY_SIGMA) -> ToyDataset:
    """One noisy reward per point of an even action grid over [-1, 1]."""
    if grid_size < 2:
        raise InvalidArgumentError("grid_size must be at least 2")
    actions = np.linspace(-1.0, 1.0, grid_size)
    rewards = np.asarray(toy_sample_reward(actions, rng, sigma), dtype=np.float64)
    return ToyDataset(actions, rewards.copy())


@dataclass
class ToyApproximator:
    method: MethodSpec
    spec: DenseNetSpec
    params: ParamVector

    def outputs(self, actions: np.ndarray) -> np.ndarray:
        """Raw network outputs ``(N, A, out)``."""
        out, _ = forward(self.spec, self.params, np.asarray(actions, float).reshape(-1, 1))
        return out

    def q_hat(self, actions) -> np.ndarray:
        """Value the method bootstraps from: mean, min, or truncated-mixture mean."""
        return critic_value(self.method, self.outputs(actions))

    def policy_objective(self, actions) -> np.ndarray:
        return policy_objective(self.method, self.outputs(actions))


def critic_value(method: MethodSpec, out: np.ndarray) -> np.ndarray:
    """Collapse ensemble outputs ``(N, A, out)`` to the critic-target value ``(A,)``."""
    if method.family is Family.AVG:
        return out[..., 0].mean(axis=0)
    if method.family is Family.MIN:
        return out[..., 0].min(axis=0)
    return truncated_atoms(method, out).mean(axis=-1)


def truncated_atoms(method: MethodSpec, out: np.ndarray) -> np.ndarray:
    """``(A, kN)`` smallest pooled atoms for TQC outputs ``(N, A, M)``."""
    n, _, m = out.shape
    values, _ = sort_pooled(np.swapaxes(out, 0, 1))
    return values[:, : (m - method.drop) * n]


def policy_objective(method: MethodSpec, out: np.ndarray) -> np.ndarray:
    if method.family is Family.MIN:
        return out[..., 0].min(axis=0)
    # AVG and TQC (untruncated mean over all atoms)
    return out.mean(axis=(0, 2))


def grid_argmax(values: np.ndarray) -> int:
    """First index of the maximum: ties go to the lowest grid point."""
    return int(np.argmax(values))


def _policy_search_points(config: ToyConfig, grid: np.ndarray) -> np.ndarray:
    if config.bootstrap_search == "dense":
        return np.arange(len(grid))
    coarse = np.arange(0, len(grid), 10)
    if coarse[-1] != len(grid) - 1:
        coarse = np.append(coarse, len(grid) - 1)
    return coarse


def _init_group(methods, spec, rngs):
    members = [init_params(spec, rng, ensemble=m.n_networks) for m, rng in zip(methods, rngs)]
    bounds = np.cumsum([0] + [m.n_networks for m in methods])
    data = np.concatenate([p.data for p in members], axis=0)
    return ParamVector(spec, data), [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


def _greedy_outputs(methods, groups, spec, params, config, grid, search_idx):
    """Outputs ``(n_g, 1, out)`` of every group at its own greedy action."""
    out, _ = forward(spec, params, grid[search_idx, None])
    if config.bootstrap_search == "dense":
        best = [grid_argmax(policy_objective(m, out[g])) for m, g in zip(methods, groups)]
        return [out[g, b : b + 1] for g, b in zip(groups, best)]
    centers = [search_idx[grid_argmax(policy_objective(m, out[g]))] for m, g in zip(methods, groups)]
    result = []
    for m, g, c in zip(methods, groups, centers):
        window = grid[max(c - 10, 0) : c + 11, None]
        fine, _ = forward(spec, ParamVector(spec, params.data[g]), window)
        b = grid_argmax(policy_objective(m, fine))
        result.append(fine[:, b : b + 1])
    return result


def train_toy_group(
    methods: Sequence[MethodSpec],
    dataset: ToyDataset,
    config: ToyConfig,
    rngs: Sequence[np.random.Generator],
    iterations: int | None = None,
) -> list[ToyApproximator]:
    """Train several methods of one family side by side as a single stacked ensemble.

    Losses are separable across methods and Adam acts elementwise, so the
    result matches training each method on its own with the same rng.
    """
    if len({m.output_dim for m in methods}) != 1:
        raise InvalidArgumentError("methods trained together must share an output size")
    spec = DenseNetSpec(1, config.hidden_sizes, methods[0].output_dim)
    params, groups = _init_group(methods, spec, rngs)
    target = params.copy() if config.target_networks else None
    opt = AdamState.for_params(params, lr=config.lr)
    grid = config.policy_grid()
    search_idx = _policy_search_points(config, grid)
    x = dataset.actions[:, None]
    r = dataset.rewards
    n_samples = len(r)
    distributional = methods[0].family is Family.TQC
    tau = quantile_fractions(methods[0].n_atoms) if distributional else None

    for _ in range(config.iterations if iterations is None else iterations):
        boot = target if target is not None else params
        nxt = _greedy_outputs(methods, groups, spec, boot, config, grid, search_idx)
        if distributional:
            z = [config.gamma * truncated_atoms(m, o)[0] for m, o in zip(methods, nxt)]
        else:
            y = np.empty((params.data.shape[0], n_samples))
            for m, g, o in zip(methods, groups, nxt):
                y[g] = r + config.gamma * critic_value(m, o)[0]
        for _ in range(config.inner_steps):
            pred, trace = forward(spec, params, x)
            if distributional:
                upstream = np.empty_like(pred)
                for g, zg in zip(groups, z):
                    _, dtheta = shared_target_loss_terms(pred[g], r, zg, tau)
                    upstream[g] = dtheta / n_samples
            else:
                upstream = (pred - y[..., None]) / n_samples
            params, opt = adam_step(params, backward(trace, upstream), opt)
        if target is not None:
            target = ema_update(target, params, config.target_beta)
    return [
        ToyApproximator(m, spec, ParamVector(spec, params.data[g].copy()))
        for m, g in zip(methods, groups)
    ]


def train_toy(
    method: MethodSpec,
    dataset: ToyDataset,
    config: ToyConfig,
    rng: np.random.Generator,
    iterations: int | None = None,
) -> ToyApproximator:
    """TD learning of one method's ensemble on the fixed dataset.

    Every iteration picks the greedy bootstrap action on the policy grid,
    freezes the resulting targets and takes ``config.inner_steps``
    full-batch Adam steps toward them.
    """
    return train_toy_group([method], dataset, config, [rng], iterations)[0]


def true_q(a, greedy_action: float, gamma: float = TOY_GAMMA):
    """Exact Q of the deterministic policy that always plays ``greedy_action``."""
    return toy_mean_reward(a) + gamma * toy_mean_reward(greedy_action) / (1.0 - gamma)


def optimal_action(config: ToyConfig = ToyConfig()) -> float:
    grid = config.policy_grid()
    return float(grid[grid_argmax(toy_mean_reward(grid))])


@dataclass(frozen=True)
class BiasStats:
    mean_delta: float
    var_delta: float
    argmax_distance: float
    greedy_action: float


def greedy_action(approx: ToyApproximator, config: ToyConfig) -> float:
    grid = config.policy_grid()
    return float(grid[grid_argmax(approx.policy_objective(grid))])


def delta_stats(q_hat: np.ndarray, q_true: np.ndarray) -> tuple[float, float]:
    delta = np.asarray(q_hat) - np.asarray(q_true)
    return float(delta.mean()), float(delta.var())


def eval_bias(approx: ToyApproximator, config: ToyConfig, a_star: float | None = None) -> BiasStats:
    """Bias and variance of Q-hat - Q over the evaluation grid for one trained seed."""
    a_g = greedy_action(approx, config)
    grid = config.eval_grid()
    mean, var = delta_stats(approx.q_hat(grid), true_q(grid, a_g, config.gamma))
    a_star = optimal_action(config) if a_star is None else a_star
    return BiasStats(mean, var, abs(a_star - a_g), a_g)


def robust_mean(values: Sequence[float], trim_fraction: float = 0.1) -> float:
    """Mean after dropping ``floor(trim_fraction * n)`` values from each tail."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise InvalidArgumentError("robust mean of an empty sequence")
    cut = int(np.floor(trim_fraction * v.size))
    return float(v[cut : v.size - cut].mean())


def argmax_distance(objective: np.ndarray, a_star: float, grid: np.ndarray) -> float:
    """|a* - argmax of ``objective`` sampled on ``grid``|."""
    return float(abs(a_star - grid[grid_argmax(objective)]))


@dataclass
class SweepRow:
    family: str
    param: int
    mean_delta: float
    var_delta: float
    argmax_distance: float
    per_seed: list[tuple[int, BiasStats]] = field(default_factory=list)

    def deltas(self) -> np.ndarray:
        return np.array([s.mean_delta for _, s in self.per_seed])

    def variances(self) -> np.ndarray:
        return np.array([s.var_delta for _, s in self.per_seed])


def seed_dataset(seed: int, config: ToyConfig) -> ToyDataset:
    """The dataset of ``seed``; every method sees the same rewards for a seed."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    return build_toy_dataset(config.grid_size, rng, config.sigma)


def method_rng(method: MethodSpec, seed: int) -> np.random.Generator:
    code = ["avg", "min", "tqc"].index(method.family.value)
    return np.random.default_rng(
        np.random.SeedSequence([seed, 1, code, method.n_networks, method.drop])
    )


def run_seed(methods: Sequence[MethodSpec], seed: int, config: ToyConfig) -> list[BiasStats]:
    """Train and evaluate methods of one family on the dataset of ``seed``."""
    dataset = seed_dataset(seed, config)
    rngs = [method_rng(m, seed) for m in methods]
    approxes = train_toy_group(methods, dataset, config, rngs)
    a_star = optimal_action(config)
    return [eval_bias(a, config, a_star) for a in approxes]


def aggregate(method: MethodSpec, results: list[tuple[int, BiasStats]], trim: float = 0.1) -> SweepRow:
    stats = [s for _, s in results]
    return SweepRow(
        method.family.value,
        method.sweep_value,
        robust_mean([s.mean_delta for s in stats], trim),
        robust_mean([s.var_delta for s in stats], trim),
        float(np.mean([s.argmax_distance for s in stats])),
        list(results),
    )


def run_sweep(
    family: Family | str,
    seeds: Sequence[int],
    config: ToyConfig = ToyConfig(),
    values: Sequence[int] | None = None,
    progress=None,
    workers: int = 1,
) -> list[SweepRow]:
    """One aggregate row per sweep value, each over all ``seeds``.

    Seeds are independent, so ``workers > 1`` runs them in separate processes.
    Results do not depend on ``workers``.
    """
    methods = sweep_methods(family, config, values)
    seeds = list(seeds)
    by_seed: dict[int, list[BiasStats]] = {}
    if workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(run_seed, methods, seed, config): seed for seed in seeds}
            for fut in as_completed(futures):
                by_seed[futures[fut]] = fut.result()
                if progress is not None:
                    progress(family, futures[fut])
    else:
        for seed in seeds:
            by_seed[seed] = run_seed(methods, seed, config)
            if progress is not None:
                progress(family, seed)
    per_method = [[(seed, by_seed[seed][i]) for seed in seeds] for i in range(len(methods))]
    return [aggregate(m, res) for m, res in zip(methods, per_method)]


PER_SEED_HEADER = ["seed", "mean_delta", "var_delta", "argmax_distance"]
AGGREGATE_HEADER = ["method", "param", "mean_delta", "var_delta", "argmax_distance"]


def write_sweep_csvs(rows: Sequence[SweepRow], out_dir: Path | str) -> list[Path]:
    """Per-seed CSV for every (method, value) and one aggregate ``summary.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for row in rows:
        path = out_dir / f"{row.family}_{row.param}.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(PER_SEED_HEADER)
            for seed, s in row.per_seed:
                w.writerow([seed, repr(s.mean_delta), repr(s.var_delta), repr(s.argmax_distance)])
        written.append(path)
    summary = out_dir / "summary.csv"
    existing = []
    if summary.exists():
        with summary.open() as fh:
            keys = {(r.family, str(r.param)) for r in rows}
            existing = [line for line in csv.DictReader(fh) if (line["method"], line["param"]) not in keys]
    with summary.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(AGGREGATE_HEADER)
        for line in existing:
            w.writerow([line[k] for k in AGGREGATE_HEADER])
        for row in rows:
            w.writerow([row.family, row.param, repr(row.mean_delta), repr(row.var_delta), repr(row.argmax_distance)])
    written.append(summary)
    return written

