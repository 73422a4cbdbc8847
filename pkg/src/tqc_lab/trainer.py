"""Off-policy TQC training loop, evaluation, drop-share diagnostics and run output."""

from __future__ import annotations

import copy
import csv
import dataclasses
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from tqc_lab.actor import (
    Policy,
    TemperatureState,
    deterministic_action,
    policy_loss,
    sample_action,
    sample_with_noise,
    target_entropy,
    temperature_step,
)
from tqc_lab.distributional import (
    StrategyKind,
    TargetStrategy,
    build_target_distribution,
    dropped_counts,
    quantile_fractions,
    sorted_target_loss_terms,
)
from tqc_lab.envs import make_env
from tqc_lab.errors import InvalidArgumentError, NumericError
from tqc_lab.numeric import (
    AdamState,
    DenseNetSpec,
    adam_step,
    backward,
    ema_update,
    forward,
    init_params,
)
from tqc_lab.replay import Batch, ReplayBuffer


@dataclass
class TrainConfig:
    env: str = "pointmass"
    n_critics: int = 5
    atoms: int = 25
    drop: int = 2
    critic_hidden: tuple[int, ...] = (512, 512, 512)
    policy_hidden: tuple[int, ...] = (256, 256)
    lr: float = 3e-4
    gamma: float = 0.99
    buffer_capacity: int = 1_000_000
    batch_size: int = 256
    beta: float = 0.005
    target_update_interval: int = 1
    gradient_steps: int = 1
    env_steps: int = 1
    strategy: str = "tqc"
    steps: int = 30_000
    eval_interval: int = 1000
    eval_episodes: int = 10
    seed: int = 0
    warmup_steps: int = 1000
    kappa: float = 1.0
    init_alpha: float = 1.0
    diag_window: int = 1000
    out_dir: str = "runs"

    def __post_init__(self):
        self.critic_hidden = tuple(int(h) for h in self.critic_hidden)
        self.policy_hidden = tuple(int(h) for h in self.policy_hidden)
        self.strategy = StrategyKind(self.strategy).value
        positive = (
            "n_critics atoms buffer_capacity batch_size target_update_interval "
            "gradient_steps env_steps eval_interval eval_episodes diag_window"
        ).split()
        for name in positive:
            if getattr(self, name) < 1:
                raise InvalidArgumentError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 <= self.drop < self.atoms:
            raise InvalidArgumentError(f"drop must satisfy 0 <= drop < atoms, got {self.drop}")
        if not 0.0 <= self.gamma < 1.0:
            raise InvalidArgumentError("gamma must lie in [0, 1)")
        if not 0.0 < self.beta <= 1.0:
            raise InvalidArgumentError("beta must lie in (0, 1]")
        if self.steps < 0 or self.warmup_steps < 0:
            raise InvalidArgumentError("steps and warmup_steps must be non-negative")
        if self.lr <= 0 or self.kappa <= 0 or self.init_alpha <= 0:
            raise InvalidArgumentError("lr, kappa and init_alpha must be positive")

    @property
    def target_strategy(self) -> TargetStrategy:
        return TargetStrategy(self.strategy, self.drop)


# ---------------------------------------------------------------- config files

def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _parse_value(name: str, raw: str):
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    if name not in fields:
        raise InvalidArgumentError(f"unknown config key {name!r}")
    default = fields[name].default
    raw = raw.strip()
    try:
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise InvalidArgumentError(f"bad value for {name}: {raw!r}") from None
    return raw


def dump_config(config: TrainConfig) -> str:
    return "".join(
        f"{f.name} = {_format_value(getattr(config, f.name))}\n"
        for f in dataclasses.fields(config)
    )


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidArgumentError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        values[key] = _parse_value(key, raw)
    return values


def load_config(path: Path | str, **overrides) -> TrainConfig:
    values = parse_config_text(Path(path).read_text())
    values.update(overrides)
    return TrainConfig(**values)


# ---------------------------------------------------------------- diagnostics

@dataclass(frozen=True)
class DiagnosticsRecord:
    """Average share of the truncated atoms that came from each critic.

    ``sorted_shares[r]`` is the average, over minibatches, of the r-th
    largest per-critic share within each minibatch.
    """

    unsorted_shares: np.ndarray
    sorted_shares: np.ndarray
    minibatches: int


def minibatch_shares(counts: np.ndarray) -> np.ndarray:
    """Per-critic share of all atoms dropped in one minibatch of counts ``(B, N)``."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total == 0:
        return np.full(counts.shape[-1], np.nan)
    return counts.sum(axis=0) / total


def drop_share_diagnostics(window: Sequence[np.ndarray]) -> DiagnosticsRecord:
    """Unsorted and sorted-then-averaged drop shares over a window of minibatches."""
    if len(window) == 0:
        raise InvalidArgumentError("no minibatches recorded")
    shares = np.stack([minibatch_shares(c) for c in window])
    ranked = -np.sort(-shares, axis=1)
    return DiagnosticsRecord(shares.mean(axis=0), ranked.mean(axis=0), len(window))


class DropShareTracker:
    def __init__(self, n_critics: int, window: int):
        self.n_critics = n_critics
        self.window: deque[np.ndarray] = deque(maxlen=window)

    def update(self, counts: np.ndarray) -> None:
        self.window.append(np.asarray(counts))

    def record(self) -> DiagnosticsRecord | None:
        return drop_share_diagnostics(self.window) if self.window else None


# ---------------------------------------------------------------- evaluation

@dataclass(frozen=True)
class EvalResult:
    mean: float
    returns: list[float]
    start_states: list[np.ndarray]


def evaluate(policy, env, episodes: int = 10, rng: np.random.Generator | None = None,
             max_steps: int = 100_000) -> EvalResult:
    """Undiscounted returns of deterministic rollouts.

    ``policy`` is a :class:`Policy` (acting with tanh of its mean) or any
    callable mapping a state to an action.
    """
    if episodes < 1:
        raise InvalidArgumentError("episodes must be positive")
    act = policy if callable(policy) else (lambda s: deterministic_action(policy, s))
    rng = np.random.default_rng(0) if rng is None else rng
    returns, starts = [], []
    for _ in range(episodes):
        state = env.reset(rng)
        starts.append(np.array(state, copy=True))
        total = 0.0
        for _ in range(max_steps):
            state, reward, done = env.step(act(state), rng)
            total += reward
            if done:
                break
        returns.append(total)
    return EvalResult(float(np.mean(returns)), returns, starts)


# ---------------------------------------------------------------- agent

@dataclass
class UpdateInfo:
    alpha: float
    policy_loss: float
    critic_loss: float
    dropped: np.ndarray | None = None


class TQCAgent:
    """Policy, N quantile critics with EMA targets, and the entropy temperature."""

    def __init__(self, config: TrainConfig, state_dim: int, action_dim: int, low, high,
                 rng: np.random.Generator):
        self.config = config
        self.policy = Policy.create(state_dim, action_dim, config.policy_hidden, rng, low, high)
        self.critic_spec = DenseNetSpec(state_dim + action_dim, config.critic_hidden, config.atoms)
        self.critics = init_params(self.critic_spec, rng, ensemble=config.n_critics)
        self.target_critics = self.critics.copy()
        self.temperature = TemperatureState(float(np.log(config.init_alpha)), target_entropy(action_dim))
        self.policy_opt = AdamState.for_params(self.policy.params, lr=config.lr)
        self.critic_opt = AdamState.for_params(self.critics, lr=config.lr)
        self.alpha_opt = AdamState.zeros((1,), lr=config.lr)
        self.fractions = quantile_fractions(config.atoms)
        self.strategy = config.target_strategy
        self.gradient_steps = 0

    def act(self, state, rng) -> np.ndarray:
        action, _ = sample_action(self.policy, state, rng)
        return action

    def critic_targets(self, batch: Batch, rng: np.random.Generator):
        """Target atoms ``(C, B, K)`` built from target critics at ``(s', a' ~ pi)``."""
        next_actions, next_logp = sample_action(self.policy, batch.next_states, rng)
        x = np.concatenate([batch.next_states, next_actions], axis=-1)
        atoms, _ = forward(self.critic_spec, self.target_critics, x)
        atoms = np.swapaxes(atoms, 0, 1)
        targets = build_target_distribution(
            self.strategy, atoms, batch.rewards, batch.dones, self.config.gamma,
            self.temperature.alpha, next_logp,
        )
        dropped = None
        if self.strategy.kind is StrategyKind.TQC and self.strategy.drop > 0:
            dropped = dropped_counts(atoms, self.strategy.drop)
        return np.swapaxes(targets.values, 0, 1), dropped

    def update(self, batch: Batch, rng: np.random.Generator) -> UpdateInfo:
        """Temperature, then policy, then critics, then target EMA."""
        cfg = self.config
        noise = rng.standard_normal((len(batch), self.policy.action_dim))

        current = sample_with_noise(self.policy, batch.states, noise)
        self.temperature, self.alpha_opt = temperature_step(
            current.log_prob, self.temperature, self.alpha_opt
        )
        alpha = self.temperature.alpha

        pi_loss, pi_grad, _ = policy_loss(
            self.critic_spec, self.critics, self.policy, batch.states, alpha, noise
        )
        new_pi, self.policy_opt = adam_step(self.policy.params, pi_grad, self.policy_opt)
        self.policy = self.policy.with_params(new_pi)

        targets, dropped = self.critic_targets(batch, rng)
        x = np.concatenate([batch.states, batch.actions], axis=-1)
        pred, trace = forward(self.critic_spec, self.critics, x)
        losses, dtheta = sorted_target_loss_terms(pred, np.sort(targets, axis=-1), self.fractions, cfg.kappa)
        z_loss = float(losses.mean(axis=1).sum())
        if not (np.isfinite(z_loss) and np.isfinite(pi_loss)):
            raise NumericError(f"non-finite loss: critic {z_loss}, policy {pi_loss}")
        grad = backward(trace, dtheta / len(batch))
        self.critics, self.critic_opt = adam_step(self.critics, grad, self.critic_opt)

        self.gradient_steps += 1
        if self.gradient_steps % cfg.target_update_interval == 0:
            self.target_critics = ema_update(self.target_critics, self.critics, cfg.beta)
        return UpdateInfo(alpha, pi_loss, z_loss, dropped)


# ---------------------------------------------------------------- training

@dataclass
class RunArtifacts:
    config: TrainConfig
    run_dir: Path | None
    learning_curve: list[dict] = field(default_factory=list)
    diagnostics: list[dict] = field(default_factory=list)
    agent: TQCAgent | None = None
    eval_results: list[tuple[int, EvalResult]] = field(default_factory=list)
    drop_tracker: DropShareTracker | None = None


def run_dir_name(seed: int, when: float | None = None) -> str:
    stamp = time.strftime("%Y%m%d-%H%M%S", time.localtime(when))
    return f"seed{seed}-{stamp}"


def learning_curve_header(episodes: int) -> list[str]:
    return ["step", "eval_mean"] + [f"eval_ep{i}" for i in range(1, episodes + 1)]


DIAGNOSTICS_HEADER = ["step", "critic_index", "unsorted_share", "sorted_rank", "sorted_share"]


def _streams(seed: int):
    init, env, act, replay, evaluation = np.random.SeedSequence(seed).spawn(5)
    return (np.random.default_rng(s) for s in (init, env, act, replay, evaluation))


def train(config: TrainConfig, env=None, out_dir: Path | str | None = None,
          write: bool = True, progress=None) -> RunArtifacts:
    """Collect, update, evaluate; one environment step at a time.

    With ``write`` the learning curve, diagnostics, a config snapshot and
    final parameters go to ``<out_dir>/seed<seed>-<timestamp>/``.
    """
    env = make_env(config.env) if env is None else env
    eval_env = copy.deepcopy(env)
    init_rng, env_rng, act_rng, replay_rng, eval_seed_rng = _streams(config.seed)
    eval_seed = int(eval_seed_rng.integers(2**63 - 1))
    agent = TQCAgent(config, env.state_dim, env.action_dim, env.low, env.high, init_rng)
    buffer = ReplayBuffer(min(config.buffer_capacity, max(config.steps, 1)), env.state_dim, env.action_dim)
    tracker = DropShareTracker(config.n_critics, config.diag_window)
    artifacts = RunArtifacts(config, None, agent=agent, drop_tracker=tracker)

    run_dir = None
    if write:
        run_dir = Path(out_dir if out_dir is not None else config.out_dir) / run_dir_name(config.seed)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.txt").write_text(dump_config(config))
        artifacts.run_dir = run_dir

    info = None
    state = env.reset(env_rng)
    step = 0
    try:
        while step < config.steps:
            for _ in range(config.env_steps):
                if step >= config.steps:
                    break
                if step < config.warmup_steps:
                    action = env_rng.uniform(env.low, env.high)
                else:
                    action = agent.act(state, act_rng)
                next_state, reward, done = env.step(action, env_rng)
                buffer.push(state, action, reward, next_state, done and env.done_is_terminal)
                state = env.reset(env_rng) if done else next_state
                step += 1
                if step % config.eval_interval == 0:
                    _record(artifacts, agent, eval_env, step, eval_seed, tracker)
                    if progress is not None:
                        progress(step, artifacts.learning_curve[-1], info)
            if step >= config.warmup_steps and len(buffer) >= 1:
                for _ in range(config.gradient_steps):
                    info = agent.update(buffer.sample(config.batch_size, replay_rng), act_rng)
                    if info.dropped is not None:
                        tracker.update(info.dropped)
    except NumericError as exc:
        if run_dir is not None:
            (run_dir / "failure.txt").write_text(
                f"step = {step}\nerror = {exc}\nalpha = {agent.temperature.alpha!r}\n"
                f"gradient_steps = {agent.gradient_steps}\n"
            )
            _write_outputs(artifacts, agent, run_dir)
        raise

    if run_dir is not None:
        _write_outputs(artifacts, agent, run_dir)
    return artifacts


def _record(artifacts: RunArtifacts, agent: TQCAgent, env, step: int, eval_seed: int,
            tracker: DropShareTracker) -> None:
    cfg = artifacts.config
    result = evaluate(agent.policy, env, cfg.eval_episodes, np.random.default_rng(eval_seed))
    artifacts.eval_results.append((step, result))
    row = {"step": step, "eval_mean": result.mean}
    row.update({f"eval_ep{i}": r for i, r in enumerate(result.returns, 1)})
    artifacts.learning_curve.append(row)
    rec = tracker.record()
    if rec is not None:
        for i in range(cfg.n_critics):
            artifacts.diagnostics.append({
                "step": step,
                "critic_index": i,
                "unsorted_share": float(rec.unsorted_shares[i]),
                "sorted_rank": i,
                "sorted_share": float(rec.sorted_shares[i]),
            })


def _write_csv(path: Path, header: list[str], rows: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in header])


def _write_outputs(artifacts: RunArtifacts, agent: TQCAgent, run_dir: Path) -> None:
    cfg = artifacts.config
    _write_csv(run_dir / "learning_curve.csv", learning_curve_header(cfg.eval_episodes),
               artifacts.learning_curve)
    _write_csv(run_dir / "diagnostics.csv", DIAGNOSTICS_HEADER, artifacts.diagnostics)
    np.savez(
        run_dir / "params.npz",
        policy=agent.policy.params.data,
        critics=agent.critics.data,
        target_critics=agent.target_critics.data,
        log_alpha=np.array([agent.temperature.log_alpha]),
    )
