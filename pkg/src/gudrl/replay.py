"""Episodic experience memory with hindsight command relabelling.

The memory stores whole episodes of (observation, action, reward, goal,
terminal) tuples.  Training batches are episode suffixes: a start index is
drawn uniformly, and each step of the suffix is labelled in hindsight with
the horizon actually remaining and the return actually achieved from there
to the end of the episode.  Acting-time commands are drawn from the
statistics of the best stored episodes, biased optimistically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

DATASET_MAGIC = "GUDRL-DATASET"
DATASET_VERSION = "v1"


class EpisodeClosedError(RuntimeError):
    """Appending after a terminal transition without starting a new episode."""


class EmptyMemoryError(RuntimeError):
    """Sampling from a memory that holds no complete episode."""


class DatasetFormatError(ValueError):
    """A dataset file that cannot be parsed."""


@dataclass(frozen=True)
class Transition:
    observation: np.ndarray
    action: int
    reward: float
    goal: float | None
    terminal: bool


@dataclass(frozen=True)
class Episode:
    transitions: tuple
    total_return: float
    length: int

    @classmethod
    def from_transitions(cls, transitions):
        ts = tuple(transitions)
        if not ts or not ts[-1].terminal or any(t.terminal for t in ts[:-1]):
            raise ValueError("Episode: exactly the final transition must be terminal")
        return cls(ts, total_return=float(sum(t.reward for t in ts)), length=len(ts))


@dataclass(frozen=True)
class CommandMask:
    """Which command components the policy is allowed to read."""

    d_h: bool = True
    d_r: bool = True
    goal: bool = False


@dataclass(frozen=True)
class Command:
    """Desired horizon and return, plus an optional goal."""

    d_h: int
    d_r: float
    goal: float | None = None
    mask: CommandMask = CommandMask()


def update_command(command, observed_reward):
    """Advance a live command past one environment step.

    The horizon counts down (never below 1, a zero-step horizon is not a
    meaningful input); the desired return absorbs the observed reward and may
    go negative.  The goal is untouched.
    """
    return replace(
        command,
        d_h=max(command.d_h - 1, 1),
        d_r=command.d_r - observed_reward,
    )


@dataclass
class SuffixSample:
    """One training element: an episode suffix with hindsight commands.

    prev_* hold the previous step's action/reward/terminal tokens, shifted by
    one step; position 0 carries the start-of-episode marker (terminal=1,
    action=reward=0).
    """

    observations: np.ndarray  # (L, 4)
    actions: np.ndarray  # (L,) int
    d_h: np.ndarray  # (L,) remaining steps including the current one
    d_r: np.ndarray  # (L,) reward suffix sums
    goal: float | None
    prev_action: np.ndarray
    prev_reward: np.ndarray
    prev_terminal: np.ndarray

    @property
    def length(self):
        return len(self.actions)


class ReplayMemory:
    """Bounded episode store; eviction drops the lowest-return episode."""

    def __init__(self, capacity, rng, setting="standard"):
        if capacity < 1:
            raise ValueError("ReplayMemory: capacity must be >= 1")
        self.capacity = capacity
        self.rng = rng
        self.setting = setting
        self.episodes = []
        self._open = []

    def __len__(self):
        return len(self.episodes)

    def begin_episode(self):
        self._open = []

    def append(self, transition):
        if self._open is None:
            raise EpisodeClosedError(
                "append: previous episode ended; call begin_episode() first"
            )
        self._open.append(transition)
        if transition.terminal:
            self.add_episode(Episode.from_transitions(self._open))
            self._open = None

    def add_episode(self, episode):
        self.episodes.append(episode)
        if len(self.episodes) > self.capacity:
            worst = min(range(len(self.episodes)), key=lambda i: (self.episodes[i].total_return, i))
            del self.episodes[worst]

    def returns(self):
        return [e.total_return for e in self.episodes]

    def top_episodes(self, k):
        order = sorted(range(len(self.episodes)), key=lambda i: (-self.episodes[i].total_return, i))
        return [self.episodes[i] for i in order[:k]]


def suffix_sample(episode, start):
    """Hindsight-relabel the suffix of one episode from `start` to the end."""
    length = episode.length
    if not 0 <= start < length:
        raise IndexError(f"suffix start {start} outside episode of length {length}")
    ts = episode.transitions[start:]
    n = len(ts)
    rewards = np.array([t.reward for t in ts])
    d_r = np.cumsum(rewards[::-1])[::-1].copy()
    d_h = np.arange(n, 0, -1, dtype=np.float64)
    prev_action = np.zeros(n)
    prev_reward = np.zeros(n)
    prev_terminal = np.zeros(n)
    prev_terminal[0] = 1.0  # start-of-episode marker
    if n > 1:
        prev_action[1:] = [t.action for t in ts[:-1]]
        prev_reward[1:] = rewards[:-1]
    return SuffixSample(
        observations=np.stack([t.observation for t in ts]),
        actions=np.array([t.action for t in ts], dtype=np.intp),
        d_h=d_h,
        d_r=d_r,
        goal=ts[0].goal,
        prev_action=prev_action,
        prev_reward=prev_reward,
        prev_terminal=prev_terminal,
    )


def sample_training_batch(memory, batch_size, max_total_steps=None):
    """Draw suffix samples: episode uniform, start index uniform.

    When `max_total_steps` is set, sampling stops early once the combined
    suffix length reaches it (always yielding at least one sample), which
    bounds the cost of a gradient step once episodes grow long.
    """
    if not memory.episodes:
        raise EmptyMemoryError("sample_training_batch: memory holds no episodes")
    batch = []
    total = 0
    for _ in range(batch_size):
        episode = memory.episodes[int(memory.rng.integers(len(memory.episodes)))]
        start = int(memory.rng.integers(episode.length))
        sample = suffix_sample(episode, start)
        batch.append(sample)
        total += sample.length
        if max_total_steps is not None and total >= max_total_steps:
            break
    return batch


def sample_exploratory_command(memory, k_best, mask=CommandMask(), goal=None, optimism_floor=0.0):
    """Optimistic command from the statistics of the k most rewarding episodes.

    Desired return: drawn uniformly from [mean, mean + spread] of the top
    returns, where spread is the sample std (0 when only one episode
    contributes), raised to at least optimism_floor * mean.  A policy that
    follows commands accurately collapses the std of its own best episodes,
    which freezes the ratchet; the floor keeps new commands reaching past
    the data (set it to 0 for the pure statistics rule).

    Horizon: rounded mean length of the top episodes, raised to cover the
    drawn return when that return needs more steps than the mean length
    (with at most one reward per step, a return above the horizon would be
    unachievable and the optimism would never reach the data).
    """
    if not memory.episodes:
        raise EmptyMemoryError("sample_exploratory_command: memory holds no episodes")
    top = memory.top_episodes(k_best)
    lengths = np.array([e.length for e in top], dtype=np.float64)
    rets = np.array([e.total_return for e in top])
    mean_ret = float(rets.mean())
    std_ret = float(rets.std(ddof=1)) if len(top) > 1 else 0.0
    spread = max(std_ret, optimism_floor * mean_ret)
    d_r = float(memory.rng.uniform(mean_ret, mean_ret + spread)) if spread > 0.0 else mean_ret
    d_h = max(int(round(float(lengths.mean()))), int(math.ceil(d_r)), 1)
    return Command(d_h=d_h, d_r=d_r, goal=goal, mask=mask)


def build_il_dataset(source, count=5, target_return=500.0):
    """Select `count` episodes with exactly the target return, in found order."""
    chosen = [e for e in source.episodes if e.total_return == target_return][:count]
    if len(chosen) < count:
        raise ValueError(
            f"build_il_dataset: found {len(chosen)} episodes with return "
            f"{target_return:g}, need {count}"
        )
    out = ReplayMemory(capacity=count, rng=source.rng, setting=source.setting)
    out.episodes = chosen
    return out


def build_offline_dataset(source, n):
    """Select the n lowest-return episodes; ties keep the earlier-collected."""
    if len(source.episodes) < n:
        raise ValueError(
            f"build_offline_dataset: source holds {len(source.episodes)} episodes, need {n}"
        )
    order = sorted(range(len(source.episodes)), key=lambda i: (source.episodes[i].total_return, i))
    keep = sorted(order[:n])  # preserve collection order within the selection
    out = ReplayMemory(capacity=max(n, 1), rng=source.rng, setting=source.setting)
    out.episodes = [source.episodes[i] for i in keep]
    return out


def _fmt(x):
    return f"{x:.17g}"


def save_dataset(memory, path):
    """Write the line-oriented dataset format; reals keep full precision."""
    with open(path, "w") as f:
        f.write(f"{DATASET_MAGIC} {DATASET_VERSION} {memory.setting} {len(memory.episodes)}\n")
        for episode in memory.episodes:
            f.write(f"E {episode.length} {_fmt(episode.total_return)}\n")
            for t in episode.transitions:
                o = t.observation
                goal = "NA" if t.goal is None else _fmt(t.goal)
                f.write(
                    f"{_fmt(o[0])} {_fmt(o[1])} {_fmt(o[2])} {_fmt(o[3])} "
                    f"{t.action} {_fmt(t.reward)} {goal} {int(t.terminal)}\n"
                )


def load_dataset(path, rng=None):
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise DatasetFormatError(f"{path}: empty file, missing dataset header")
    head = lines[0].split()
    if len(head) != 4 or head[0] != DATASET_MAGIC:
        raise DatasetFormatError(f"{path}: malformed header {lines[0]!r}")
    if head[1] != DATASET_VERSION:
        raise DatasetFormatError(
            f"{path}: unsupported dataset version {head[1]!r} (expected {DATASET_VERSION})"
        )
    setting = head[2]
    try:
        n_episodes = int(head[3])
    except ValueError:
        raise DatasetFormatError(f"{path}: bad episode count {head[3]!r}")
    memory = ReplayMemory(
        capacity=max(n_episodes, 1),
        rng=rng if rng is not None else np.random.default_rng(0),
        setting=setting,
    )
    pos = 1
    for e_idx in range(n_episodes):
        if pos >= len(lines):
            raise DatasetFormatError(
                f"{path}: truncated file, expected {n_episodes} episodes, found {e_idx}"
            )
        head = lines[pos].split()
        if len(head) != 3 or head[0] != "E":
            raise DatasetFormatError(f"{path}: line {pos + 1}: malformed episode header")
        length = int(head[1])
        pos += 1
        transitions = []
        for r in range(length):
            if pos >= len(lines):
                raise DatasetFormatError(
                    f"{path}: truncated episode {e_idx}: {r} of {length} records"
                )
            parts = lines[pos].split()
            if len(parts) != 8:
                raise DatasetFormatError(
                    f"{path}: line {pos + 1}: expected 8 fields, found {len(parts)}"
                )
            try:
                transitions.append(
                    Transition(
                        observation=np.array([float(v) for v in parts[:4]]),
                        action=int(parts[4]),
                        reward=float(parts[5]),
                        goal=None if parts[6] == "NA" else float(parts[6]),
                        terminal=bool(int(parts[7])),
                    )
                )
            except ValueError:
                raise DatasetFormatError(f"{path}: line {pos + 1}: unparseable record")
            pos += 1
        memory.add_episode(Episode.from_transitions(transitions))
    return memory
