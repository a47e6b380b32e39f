"""End-to-end training and evaluation loops.

One loop covers all five settings.  Interacting settings (online, gcrl,
meta) alternate acting, episodic replay storage with hindsight relabelling,
live command updates, and supervised gradient steps.  The il and offline
settings never touch the environment during training: they run the pure
training loop over a fixed dataset, stepping an environment only inside
evaluations (which never write to memory or parameters).

Acting-time commands are drawn optimistically from replay statistics; an
empty memory falls back to the maximum-achievable bootstrap command.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import envs
from .autodiff import AdamState, Tape, adam_step
from .policy import (
    CommandTokenSet,
    HiddenState,
    PolicyConfig,
    PolicyParams,
    TokenMask,
    act,
    loss_batch,
    policy_forward,
)
from .replay import (
    Command,
    CommandMask,
    ReplayMemory,
    Transition,
    sample_exploratory_command,
    sample_training_batch,
    update_command,
)

SETTINGS = ("online", "il", "offline", "gcrl", "meta")


def token_mask_for(setting):
    """Which tokens each setting feeds to the policy.

    il disables the reward-derived inputs (desired return and previous
    reward); gcrl adds the goal token; everything else uses the full
    command plus previous-step tokens.
    """
    if setting == "il":
        return TokenMask(d_h=True, d_r=False, goal=False,
                         prev_action=True, prev_reward=False, prev_terminal=True)
    if setting == "gcrl":
        return TokenMask(d_h=True, d_r=True, goal=True,
                         prev_action=True, prev_reward=True, prev_terminal=True)
    return TokenMask(d_h=True, d_r=True, goal=False,
                     prev_action=True, prev_reward=True, prev_terminal=True)


def env_setting_for(setting):
    if setting == "gcrl":
        return "gcrl"
    if setting == "meta":
        return "meta"
    return "standard"


@dataclass(frozen=True)
class SettingConfig:
    """Everything one run needs; fully serialisable for reproducibility."""

    setting: str
    tokens: TokenMask
    interacts_with_env: bool
    total_env_steps: int = 200_000
    total_train_steps: int = 3_000
    train_interval: int = 8  # env steps between gradient steps
    train_steps_per_burst: int = 1
    batch_size: int = 32
    max_batch_steps: int = 1_536  # cap on summed suffix length per batch
    warmup_episodes: int = 50
    capacity: int = 700
    k_best: int = 20
    optimism_floor: float = 0.1
    learning_rate: float = 1e-3
    lr_final: float = 2e-4
    lr_decay_start: float = 0.5  # fraction of the budget where decay begins
    grad_clip: float = 10.0
    eval_every: int = 5_000  # env steps, or gradient steps for il/offline
    eval_episodes: int = 10
    min_condition_episodes: int = 2
    bootstrap_horizon: int = 500
    bootstrap_return: float = 500.0
    greedy_eval: bool = False
    seeds: tuple = (0, 1, 2, 3, 4)
    policy: PolicyConfig = PolicyConfig()

    def command_mask(self):
        return CommandMask(d_h=self.tokens.d_h, d_r=self.tokens.d_r, goal=self.tokens.goal)


def setting_config(setting, **overrides):
    """Defaults per setting; keyword overrides win."""
    if setting not in SETTINGS:
        raise ValueError(f"unknown setting {setting!r}")
    base = dict(
        setting=setting,
        tokens=token_mask_for(setting),
        interacts_with_env=setting not in ("il", "offline"),
    )
    if setting == "il":
        base.update(total_train_steps=1_500, eval_every=100)
    elif setting == "offline":
        base.update(total_train_steps=3_000, eval_every=100)
    base.update(overrides)
    return SettingConfig(**base)


@dataclass(frozen=True)
class EvalRow:
    condition: str
    mean_return: float
    std_return: float
    episodes: int


@dataclass(frozen=True)
class EvalReport:
    progress: int
    rows: tuple
    mean_return: float
    std_return: float


@dataclass
class TrainResult:
    params: PolicyParams
    reports: list
    train_env_steps: int
    episodes_collected: int
    grad_steps: int
    memory: ReplayMemory | None = None


def reset_routine(env, memory, config):
    """Start one episode: reset env and hidden state, sample a command.

    Returns (observation, goal, command, hidden).  The command comes from
    the statistics of the best stored episodes; with an empty memory the
    optimistic bootstrap (the maximum achievable horizon/return) is used.
    Also opens a new episode in the memory.
    """
    obs, goal = env.reset()
    hidden = HiddenState.initial(config.policy)
    mask = config.command_mask()
    if len(memory) == 0:
        command = Command(
            d_h=config.bootstrap_horizon, d_r=config.bootstrap_return, goal=goal, mask=mask
        )
    else:
        command = sample_exploratory_command(
            memory, config.k_best, mask=mask, goal=goal, optimism_floor=config.optimism_floor
        )
        command = _clamp_command(command, config)
    memory.begin_episode()
    return obs, goal, command, hidden


def _clamp_command(command, config):
    """Keep optimistic commands within what an episode can actually yield."""
    return replace(
        command,
        d_h=min(command.d_h, config.bootstrap_horizon),
        d_r=min(command.d_r, config.bootstrap_return),
    )


def lr_at(config, fraction):
    """Learning rate at a point of the run: flat, then linear decay."""
    if fraction <= config.lr_decay_start:
        return config.learning_rate
    t = (fraction - config.lr_decay_start) / max(1.0 - config.lr_decay_start, 1e-9)
    return config.learning_rate + min(t, 1.0) * (config.lr_final - config.learning_rate)


def train_step(params, memory, adam, config, progress_fraction=0.0):
    """One supervised update on a batch of hindsight-relabelled suffixes."""
    batch = sample_training_batch(memory, config.batch_size, config.max_batch_steps)
    tape = Tape()
    loss = loss_batch(batch, config.tokens, params, tape)
    tape.backward(loss)
    adam.lr = lr_at(config, progress_fraction)
    adam_step(params.trainable(config.tokens), adam, clip_norm=config.grad_clip)
    return float(loss.values)


def _eval_command(config, memory, rng, goal):
    """Test-time command for one evaluation episode."""
    mask = config.command_mask()
    if config.setting in ("offline", "gcrl") and memory is not None and len(memory) > 0:
        command = sample_exploratory_command(
            memory, config.k_best, mask=mask, goal=goal, optimism_floor=config.optimism_floor
        )
        if config.setting == "gcrl":
            command = replace(command, d_h=config.bootstrap_horizon)
        return _clamp_command(command, config)
    return Command(
        d_h=config.bootstrap_horizon, d_r=config.bootstrap_return, goal=goal, mask=mask
    )


def rollout_episode(env, params, config, command, rng, mode="sample", memory=None):
    """Play one episode to termination; optionally record it into `memory`."""
    obs, goal = env.reset()
    command = replace(command, goal=goal) if goal is not None else command
    hidden = HiddenState.initial(config.policy)
    if memory is not None:
        memory.begin_episode()
    total = 0.0
    steps = 0
    terminal = False
    while not terminal:
        tokens = CommandTokenSet.build(command, hidden, config.tokens)
        dist, hidden = policy_forward(obs, tokens, hidden, params)
        action = act(dist, rng, mode)
        result = env.step(action)
        if memory is not None:
            memory.append(Transition(obs, action, result.reward, goal, result.terminal))
        hidden = hidden.observed(action, result.reward)
        command = update_command(command, result.reward)
        obs = result.observation
        total += result.reward
        steps += 1
        terminal = result.terminal
    return total, steps


def eval_conditions(setting):
    """Evaluation grid: goals for gcrl, the 3x3x3 parameter grid for meta."""
    if setting == "gcrl":
        return [(f"g={g:+.1f}", g, None) for g in envs.GCRL_EVAL_GOALS]
    if setting == "meta":
        return [
            (f"l={p.pole_half_length:g},m={p.pole_mass:g},f={p.force_magnitude:g}", None, p)
            for p in envs.meta_eval_grid()
        ]
    return [("all", None, None)]


def evaluate(params, config, rng, memory=None, progress=0):
    """Roll test episodes per condition; never touches memory or parameters."""
    conditions = eval_conditions(config.setting)
    if len(conditions) > 1:
        per = max(config.min_condition_episodes, math.ceil(config.eval_episodes / len(conditions)))
    else:
        per = config.eval_episodes
    mode = "greedy" if config.greedy_eval else "sample"
    rows = []
    everything = []
    for label, forced_goal, forced_params in conditions:
        env = envs.CartPoleEnv(
            env_setting_for(config.setting), rng, forced_goal=forced_goal, forced_params=forced_params
        )
        returns = []
        for _ in range(per):
            command = _eval_command(config, memory, rng, forced_goal)
            total, _ = rollout_episode(env, params, config, command, rng, mode)
            returns.append(total)
        returns = np.array(returns)
        rows.append(EvalRow(label, float(returns.mean()), float(returns.std()), per))
        everything.append(returns)
    pooled = np.concatenate(everything)
    return EvalReport(
        progress=progress,
        rows=tuple(rows),
        mean_return=float(pooled.mean()),
        std_return=float(pooled.std()),
    )


def run_training(config, seed, memory=None, on_eval=None, on_step=None):
    """One full training run for one seed.

    For il/offline, `memory` must hold the training dataset; the loop is then
    pure supervised training with periodic evaluations and zero environment
    interaction.  Interacting settings build their own replay memory.
    """
    ss = np.random.SeedSequence(seed)
    s_init, s_env, s_act, s_mem, s_eval = ss.spawn(5)
    params = PolicyParams.initialize(config.policy, s_init)
    adam = AdamState(lr=config.learning_rate)
    reports = []

    def run_eval(progress, mem):
        report = evaluate(
            params, config, np.random.default_rng(s_eval.spawn(1)[0]), memory=mem, progress=progress
        )
        reports.append(report)
        if on_eval is not None:
            on_eval(report)
        return report

    if not config.interacts_with_env:
        if memory is None or len(memory) == 0:
            raise ValueError(f"{config.setting}: training requires a preloaded non-empty dataset")
        memory.rng = np.random.default_rng(s_mem)
        grad_steps = 0
        for step_i in range(1, config.total_train_steps + 1):
            train_step(params, memory, adam, config, step_i / config.total_train_steps)
            grad_steps += 1
            if step_i % config.eval_every == 0:
                run_eval(step_i, memory)
        if config.total_train_steps % config.eval_every != 0:
            run_eval(config.total_train_steps, memory)
        return TrainResult(params, reports, 0, 0, grad_steps, memory)

    env = envs.CartPoleEnv(env_setting_for(config.setting), np.random.default_rng(s_env))
    memory = ReplayMemory(config.capacity, np.random.default_rng(s_mem), setting=env.setting)
    act_rng = np.random.default_rng(s_act)
    episodes = 0
    env_steps = 0
    grad_steps = 0
    obs, goal, command, hidden = reset_routine(env, memory, config)
    while env_steps < config.total_env_steps:
        tokens = CommandTokenSet.build(command, hidden, config.tokens)
        dist, hidden = policy_forward(obs, tokens, hidden, params)
        action = act(dist, act_rng)
        result = env.step(action)
        memory.append(Transition(obs, action, result.reward, goal, result.terminal))
        hidden = hidden.observed(action, result.reward)
        command = update_command(command, result.reward)
        obs = result.observation
        env_steps += 1
        if on_step is not None:
            on_step(env_steps, command, result)
        if (
            episodes >= config.warmup_episodes
            and len(memory) > 0
            and env_steps % config.train_interval == 0
        ):
            for _ in range(config.train_steps_per_burst):
                train_step(params, memory, adam, config, env_steps / config.total_env_steps)
                grad_steps += 1
        if env_steps % config.eval_every == 0:
            run_eval(env_steps, memory)
        if result.terminal:
            episodes += 1
            obs, goal, command, hidden = reset_routine(env, memory, config)
    if config.total_env_steps % config.eval_every != 0:
        run_eval(env_steps, memory)
    return TrainResult(params, reports, env.total_steps, episodes, grad_steps, memory)


def random_baseline(setting, rng, episodes_per_condition=100):
    """Mean return of the uniform-random policy, per evaluation condition."""
    env_setting = env_setting_for(setting)
    out = {}
    for label, forced_goal, forced_params in eval_conditions(setting):
        env = envs.CartPoleEnv(env_setting, rng, forced_goal=forced_goal, forced_params=forced_params)
        returns = []
        for _ in range(episodes_per_condition):
            env.reset()
            total = 0.0
            terminal = False
            while not terminal:
                result = env.step(int(rng.integers(2)))
                total += result.reward
                terminal = result.terminal
            returns.append(total)
        out[label] = float(np.mean(returns))
    return out
