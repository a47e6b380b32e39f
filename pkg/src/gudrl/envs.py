"""CartPole environment family behind a partially-observed episodic interface.

Three presentation settings share one dynamics core:

* ``standard`` - canonical constants, +1 reward per step survived.
* ``gcrl``     - a per-episode cart-position goal g ~ U[-1, 1]; the reward
                 becomes exp(-|x - g|), everything else unchanged.
* ``meta``     - pole length/mass and push force are resampled per episode;
                 the agent never observes them directly.

Observations are the 4-vector (x, x_dot, theta, theta_dot).  Every episode
ends on pole fall, cart out of bounds, or the 500-step time limit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

SETTINGS = ("standard", "gcrl", "meta")

GCRL_EVAL_GOALS = (-1.0, -0.5, 0.0, 0.5, 1.0)

# Meta randomisation intervals; canonical values sit at each midpoint-ish.
META_POLE_HALF_LENGTH = (0.25, 0.75)
META_POLE_MASS = (0.05, 0.5)
META_FORCE = (5.0, 15.0)


@dataclass(frozen=True)
class EnvParams:
    """Physical constants of one cart-pole instance."""

    gravity: float = 9.8
    cart_mass: float = 1.0
    pole_mass: float = 0.1
    pole_half_length: float = 0.5
    force_magnitude: float = 10.0
    timestep: float = 0.02
    x_threshold: float = 2.4
    theta_threshold: float = 12.0 * math.pi / 180.0
    time_limit: int = 500

    def __post_init__(self):
        for name in ("cart_mass", "pole_mass", "pole_half_length", "force_magnitude", "timestep"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"EnvParams.{name} must be strictly positive")


CANONICAL_PARAMS = EnvParams()


@dataclass
class EnvState:
    x: float
    x_dot: float
    theta: float
    theta_dot: float
    steps_elapsed: int = 0
    goal: float | None = None


@dataclass(frozen=True)
class StepResult:
    observation: np.ndarray
    reward: float
    goal: float | None
    terminal: bool


class TerminalStateError(RuntimeError):
    """Stepping an episode that has already ended."""


def observation(state):
    return np.array([state.x, state.x_dot, state.theta, state.theta_dot])


def is_terminal(state, params):
    return (
        abs(state.x) > params.x_threshold
        or abs(state.theta) > params.theta_threshold
        or state.steps_elapsed >= params.time_limit
    )


def euler_step(state, params, force):
    """Explicit Euler update; accelerations computed from the pre-step state."""
    cos_t = math.cos(state.theta)
    sin_t = math.sin(state.theta)
    total_mass = params.cart_mass + params.pole_mass
    pml = params.pole_mass * params.pole_half_length
    temp = (force + pml * state.theta_dot**2 * sin_t) / total_mass
    theta_acc = (params.gravity * sin_t - cos_t * temp) / (
        params.pole_half_length * (4.0 / 3.0 - params.pole_mass * cos_t**2 / total_mass)
    )
    x_acc = temp - pml * theta_acc * cos_t / total_mass
    tau = params.timestep
    return EnvState(
        x=state.x + tau * state.x_dot,
        x_dot=state.x_dot + tau * x_acc,
        theta=state.theta + tau * state.theta_dot,
        theta_dot=state.theta_dot + tau * theta_acc,
        steps_elapsed=state.steps_elapsed + 1,
        goal=state.goal,
    )


def gcrl_reward(x, g):
    """exp(-|x - g|): 1 at the goal, decaying with cart distance."""
    return math.exp(-abs(x - g))


def step(state, params, action):
    """Advance one timestep with action 0 (push left) or 1 (push right).

    Reward is 1 per step taken in the unit-reward settings, so an episode's
    return always equals its length; with a goal present it is the
    goal-distance reward evaluated at the post-step cart position.
    """
    if is_terminal(state, params):
        raise TerminalStateError("step: episode already terminal; reset first")
    if action not in (0, 1):
        raise ValueError(f"step: action must be 0 or 1, got {action!r}")
    force = params.force_magnitude if action == 1 else -params.force_magnitude
    new_state = euler_step(state, params, force)
    reward = 1.0 if state.goal is None else gcrl_reward(new_state.x, state.goal)
    result = StepResult(
        observation=observation(new_state),
        reward=reward,
        goal=new_state.goal,
        terminal=is_terminal(new_state, params),
    )
    return new_state, result


def sample_meta_params(rng):
    """Randomised physics for one meta episode; other constants canonical."""
    return replace(
        CANONICAL_PARAMS,
        pole_half_length=rng.uniform(*META_POLE_HALF_LENGTH),
        pole_mass=rng.uniform(*META_POLE_MASS),
        force_magnitude=rng.uniform(*META_FORCE),
    )


def meta_eval_grid():
    """3x3x3 grid over the randomised parameters: endpoints plus midpoint."""
    def spread(lo, hi):
        return (lo, (lo + hi) / 2.0, hi)

    grid = []
    for length in spread(*META_POLE_HALF_LENGTH):
        for mass in spread(*META_POLE_MASS):
            for force in spread(*META_FORCE):
                grid.append(
                    replace(
                        CANONICAL_PARAMS,
                        pole_half_length=length,
                        pole_mass=mass,
                        force_magnitude=force,
                    )
                )
    return grid


def reset(setting, rng, forced_goal=None, forced_params=None):
    """Draw an initial state for one episode.

    Returns (state, observation, goal, params).  State components are drawn
    uniformly from [-0.05, 0.05]; gcrl then draws its goal, meta draws its
    physics (unless forced, as evaluation grids do).
    """
    if setting not in SETTINGS:
        raise ValueError(f"reset: unknown setting {setting!r}")
    if setting == "meta":
        params = forced_params if forced_params is not None else sample_meta_params(rng)
    else:
        params = CANONICAL_PARAMS
    x, x_dot, theta, theta_dot = rng.uniform(-0.05, 0.05, size=4)
    goal = None
    if setting == "gcrl":
        goal = forced_goal if forced_goal is not None else float(rng.uniform(-1.0, 1.0))
    state = EnvState(x=x, x_dot=x_dot, theta=theta, theta_dot=theta_dot, goal=goal)
    return state, observation(state), goal, params


class CartPoleEnv:
    """Stateful wrapper used by the agent loop; counts every step it takes."""

    def __init__(self, setting, rng, forced_goal=None, forced_params=None):
        self.setting = setting
        self.rng = rng
        self.forced_goal = forced_goal
        self.forced_params = forced_params
        self.state = None
        self.params = None
        self.total_steps = 0

    def reset(self):
        self.state, obs, goal, self.params = reset(
            self.setting, self.rng, self.forced_goal, self.forced_params
        )
        return obs, goal

    def step(self, action):
        self.state, result = step(self.state, self.params, action)
        self.total_steps += 1
        return result
