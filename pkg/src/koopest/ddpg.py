"""Deterministic actor-critic training for per-step correction actions.

The agent observes the pair (measured state, current estimate), emits an
action in the estimator's reduced coordinates, and is rewarded with the
negated squared estimation error of the resulting next estimate. Training
is pseudo-online: episodes replay stored measured trajectories while the
estimate evolves under the agent's actions.

The critic minimizes the larger of two squared temporal-difference terms:
the classic one bootstrapped through the frozen target critic, and the
same residual bootstrapped through the live critic. Whichever term is
larger for a sample receives the gradient; in the second case the gradient
flows through both critic evaluations. Target networks are hard-copied
every fixed number of optimizer steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .approximator import (
    GradientBundle,
    Mlp,
    adam_step,
    backward,
    bundle_add,
    bundle_norm,
    clone,
    forward,
    init_mlp,
    init_optimizer,
    network_from_dict,
    network_to_dict,
    OptimizerState,
)
from .dynamics import Trajectory


class TrainingDivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class RlState:
    """Agent observation: measured state alongside the current estimate."""

    measured: np.ndarray
    estimated: np.ndarray

    @property
    def vec(self) -> np.ndarray:
        return np.concatenate([self.measured, self.estimated])


@dataclass(frozen=True)
class Transition:
    s: RlState
    a: np.ndarray
    reward: float
    s_next: RlState


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.99
    batch_size: int = 64
    target_period: int = 10
    episodes: int = 20
    steps: int | None = None
    buffer_capacity: int = 100_000
    noise_kind: str = "ou"  # "ou" | "gaussian"
    noise_theta: float = 0.15
    noise_sigma: float = 0.2
    noise_decay: float = 0.995
    hidden_width: int = 64
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    action_scale: float | str = "auto"
    actor_warmup: int = 0
    updates_per_step: int = 1
    keep_best: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.target_period < 1:
            raise ValueError(f"target_period must be >= 1, got {self.target_period}")
        if self.episodes < 0:
            raise ValueError(f"episodes must be >= 0, got {self.episodes}")
        if self.noise_kind not in ("ou", "gaussian"):
            raise ValueError(f"unknown noise kind {self.noise_kind!r}")
        if isinstance(self.action_scale, str) and self.action_scale != "auto":
            raise ValueError(f"action_scale must be a number or 'auto'")
        if self.actor_warmup < 0:
            raise ValueError(f"actor_warmup must be >= 0, got {self.actor_warmup}")
        if self.updates_per_step < 1:
            raise ValueError(
                f"updates_per_step must be >= 1, got {self.updates_per_step}"
            )


class OrnsteinUhlenbeck:
    """Mean-reverting exploration noise; zero-mean, resets each episode."""

    def __init__(self, dim: int, theta: float = 0.15, sigma: float = 0.2,
                 seed: int | np.random.SeedSequence = 0):
        self.dim = dim
        self.theta = theta
        self.sigma = sigma
        self.scale = 1.0
        self._rng = np.random.default_rng(seed)
        self.state = np.zeros(dim)

    def reset(self) -> None:
        self.state = np.zeros(self.dim)

    def sample(self) -> np.ndarray:
        self.state = (
            self.state
            - self.theta * self.state
            + self.sigma * self._rng.normal(size=self.dim)
        )
        return self.scale * self.state


class GaussianNoise:
    def __init__(self, dim: int, sigma: float = 0.2,
                 seed: int | np.random.SeedSequence = 0):
        self.dim = dim
        self.sigma = sigma
        self.scale = 1.0
        self._rng = np.random.default_rng(seed)

    def reset(self) -> None:
        pass

    def sample(self) -> np.ndarray:
        return self.scale * self.sigma * self._rng.normal(size=self.dim)


def make_noise(config: TrainConfig, dim: int,
               seed: int | np.random.SeedSequence) -> OrnsteinUhlenbeck | GaussianNoise:
    if config.noise_kind == "ou":
        return OrnsteinUhlenbeck(dim, config.noise_theta, config.noise_sigma, seed)
    return GaussianNoise(dim, config.noise_sigma, seed)


class ReplayBuffer:
    """Fixed-capacity ring buffer; eviction is strictly oldest-first."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._s = np.zeros((capacity, state_dim))
        self._a = np.zeros((capacity, action_dim))
        self._r = np.zeros(capacity)
        self._s2 = np.zeros((capacity, state_dim))
        self._size = 0
        self._next = 0
        self.inserted = 0

    def __len__(self) -> int:
        return self._size

    def push(self, s, a: np.ndarray, reward: float, s_next) -> None:
        s_vec = s.vec if isinstance(s, RlState) else np.asarray(s)
        s2_vec = s_next.vec if isinstance(s_next, RlState) else np.asarray(s_next)
        i = self._next
        self._s[i] = s_vec
        self._a[i] = a
        self._r[i] = reward
        self._s2[i] = s2_vec
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)
        self.inserted += 1

    def sample(self, rng: np.random.Generator, batch_size: int):
        """Uniform with replacement over the currently stored transitions."""
        if self._size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, self._size, size=batch_size)
        return self._s[idx], self._a[idx], self._r[idx], self._s2[idx]

    def rewards_in_order(self) -> np.ndarray:
        """Stored rewards, oldest retained first (for inspection/tests)."""
        if self._size < self.capacity:
            return self._r[: self._size].copy()
        order = (self._next + np.arange(self.capacity)) % self.capacity
        return self._r[order].copy()


@dataclass
class Agent:
    actor: Mlp
    critic: Mlp
    actor_target: Mlp
    critic_target: Mlp
    buffer: ReplayBuffer
    actor_opt: OptimizerState
    critic_opt: OptimizerState

    @property
    def state_dim(self) -> int:
        return self.actor.in_dim

    @property
    def action_dim(self) -> int:
        return self.actor.out_dim


def init_agent(
    state_dim: int,
    action_dim: int,
    config: TrainConfig,
    action_scale: float | np.ndarray,
    seed: int | None = None,
) -> Agent:
    """Actor with bounded tanh output, linear critic, targets hard-copied."""
    w = config.hidden_width
    ss = np.random.SeedSequence(config.seed if seed is None else seed)
    actor_seed, critic_seed = ss.spawn(2)
    # near-zero final layers: the initial policy barely perturbs the
    # estimator and the initial value surface is flat
    actor = init_mlp(
        (state_dim, w, w, w, action_dim), "scaled_tanh", action_scale, actor_seed,
        final_bound=3e-3,
    )
    critic = init_mlp(
        (state_dim + action_dim, w, w, w, 1), "linear", 1.0, critic_seed,
        final_bound=3e-3,
    )
    return Agent(
        actor=actor,
        critic=critic,
        actor_target=clone(actor),
        critic_target=clone(critic),
        buffer=ReplayBuffer(config.buffer_capacity, state_dim, action_dim),
        actor_opt=init_optimizer(actor, config.actor_lr),
        critic_opt=init_optimizer(critic, config.critic_lr),
    )


def select_action(agent: Agent, s: RlState, noise=None, noise_map=None) -> np.ndarray:
    """Actor output plus exploration noise.

    The noise process runs in normalized units. Without a map it is scaled
    entrywise by the actor's tanh bound. With a map (shape action_dim x k,
    noise dimension k) the sample is pushed through it; environments whose
    actions act on the state only through a projection supply a map whose
    image matches that projection, so exploration perturbs what the reward
    can actually see and nothing else.
    """
    a = forward(agent.actor, s.vec)
    if noise is not None:
        eta = noise.sample()
        if noise_map is not None:
            a = a + noise_map @ eta
        else:
            a = a + np.asarray(agent.actor.out_scale) * eta
    return a


def compute_reward(measured: np.ndarray, estimated: np.ndarray) -> float:
    """Negated squared estimation error (larger is better, max 0)."""
    d = np.asarray(measured) - np.asarray(estimated)
    return -float(np.dot(d, d))


def stack_batch(transitions: list[Transition]):
    S = np.stack([t.s.vec for t in transitions])
    A = np.stack([np.asarray(t.a) for t in transitions])
    R = np.array([t.reward for t in transitions])
    S2 = np.stack([t.s_next.vec for t in transitions])
    return S, A, R, S2


def _as_arrays(batch):
    if isinstance(batch, (list,)) or (
        isinstance(batch, tuple) and batch and isinstance(batch[0], Transition)
    ):
        return stack_batch(list(batch))
    return batch


def critic_loss(agent: Agent, batch, gamma: float) -> tuple[float, GradientBundle]:
    """Mean over the batch of max(l_td, l_bellman), with its critic gradient.

    l_td uses the frozen target critic for the bootstrap term, so only the
    Q(s, a) evaluation carries gradient. l_bellman bootstraps through the
    live critic; for samples where it is the larger term the gradient flows
    through both the Q(s, a) and the Q(s', mu'(s')) evaluations. Ties go to
    l_td. Both terms evaluate the target actor at s'.
    """
    S, A, R, S2 = _as_arrays(batch)
    a2 = forward(agent.actor_target, S2)
    sa = np.hstack([S, A])
    s2a2 = np.hstack([S2, a2])
    q = forward(agent.critic, sa)[:, 0]
    q_frozen = forward(agent.critic_target, s2a2)[:, 0]
    q_live = forward(agent.critic, s2a2)[:, 0]
    d_td = R + gamma * q_frozen - q
    d_bell = R + gamma * q_live - q
    use_bell = d_bell**2 > d_td**2
    loss = float(np.mean(np.where(use_bell, d_bell**2, d_td**2)))
    b = len(R)
    up_q = np.where(use_bell, -2.0 * d_bell, -2.0 * d_td) / b
    grads, _ = backward(agent.critic, sa, up_q[:, np.newaxis])
    up_boot = np.where(use_bell, 2.0 * gamma * d_bell, 0.0) / b
    grads_boot, _ = backward(agent.critic, s2a2, up_boot[:, np.newaxis])
    return loss, bundle_add(grads, grads_boot)


def actor_loss_gradient(agent: Agent, batch) -> GradientBundle:
    """Gradient of -mean Q(s, mu(s)) in the actor parameters (chain rule
    through the critic's action input)."""
    S, _, _, _ = _as_arrays(batch)
    a = forward(agent.actor, S)
    sa = np.hstack([S, a])
    b = S.shape[0]
    upstream = np.full((b, 1), -1.0 / b)
    _, input_grad = backward(agent.critic, sa, upstream)
    grad_action = input_grad[:, S.shape[1] :]
    grads, _ = backward(agent.actor, S, grad_action)
    return grads


def hard_update(agent: Agent) -> None:
    agent.actor_target = clone(agent.actor)
    agent.critic_target = clone(agent.critic)


@dataclass
class StepRecord:
    episode: int
    step: int
    reward: float
    critic_loss: float
    actor_grad_norm: float


@dataclass
class TrainingHistory:
    episode_rewards: list[float] = field(default_factory=list)
    steps: list[StepRecord] = field(default_factory=list)
    target_copies: int = 0


def train(
    agent: Agent,
    env,
    trajectories: list[Trajectory],
    config: TrainConfig,
    validate=None,
) -> tuple[Agent, TrainingHistory]:
    """Pseudo-online training over stored measured trajectories.

    Episode m replays trajectory m (cycling when there are more episodes
    than trajectories): the estimate starts at the measured initial state
    and advances through env.step under the noisy policy; every step pushes
    one transition and performs one critic and one actor update. Targets
    are hard-copied every config.target_period optimizer steps.

    env must expose step(x_hat, action) -> next estimate.

    With keep_best on, the weights from the episode scoring highest are
    restored at the end. validate(agent) -> score supplies the selection
    signal; without it the episode's training reward is used. Exploration
    noise makes the training reward a poor proxy for how the deployed
    (noise-free) policy behaves, so callers that can afford a rollout
    should pass a validator.
    """
    if not trajectories:
        raise ValueError("need at least one trajectory")
    ss = np.random.SeedSequence(config.seed)
    batch_seed, noise_seed = ss.spawn(2)
    rng = np.random.default_rng(batch_seed)
    noise_map = getattr(env, "noise_map", None)
    noise_dim = agent.action_dim if noise_map is None else noise_map.shape[1]
    noise = make_noise(config, noise_dim, noise_seed)
    history = TrainingHistory()
    opt_steps = 0
    best_reward = -np.inf
    best_weights: tuple[Mlp, Mlp] | None = None
    for m in range(config.episodes):
        traj = trajectories[m % len(trajectories)]
        measured = traj.states
        length = traj.steps if config.steps is None else min(config.steps, traj.steps)
        noise.reset()
        noise.scale = config.noise_decay**m
        x_hat = measured[0].copy()
        ep_reward = 0.0
        for k in range(length):
            s = RlState(measured=measured[k], estimated=x_hat)
            a = select_action(agent, s, noise, noise_map)
            x_hat_next = env.step(x_hat, a)
            if not np.all(np.isfinite(x_hat_next)):
                raise TrainingDivergenceError(
                    f"episode {m} step {k}: estimate diverged to {x_hat_next}"
                )
            reward = compute_reward(measured[k + 1], x_hat_next)
            s_next = RlState(measured=measured[k + 1], estimated=x_hat_next)
            agent.buffer.push(s, a, reward, s_next)
            for _ in range(config.updates_per_step):
                batch = agent.buffer.sample(rng, config.batch_size)
                loss, critic_grads = critic_loss(agent, batch, config.gamma)
                if not np.isfinite(loss):
                    raise TrainingDivergenceError(
                        f"episode {m} step {k}: critic loss is {loss}"
                    )
                agent.critic, agent.critic_opt = adam_step(
                    agent.critic, critic_grads, agent.critic_opt
                )
                # before the critic has calibrated, its action gradients point
                # anywhere; holding the actor still for a warmup avoids chasing
                # them into regions the estimator cannot recover from
                if opt_steps >= config.actor_warmup:
                    actor_grads = actor_loss_gradient(agent, batch)
                    agent.actor, agent.actor_opt = adam_step(
                        agent.actor, actor_grads, agent.actor_opt
                    )
                else:
                    actor_grads = None
                opt_steps += 1
                if opt_steps % config.target_period == 0:
                    hard_update(agent)
                    history.target_copies += 1
            history.steps.append(
                StepRecord(
                    episode=m, step=k, reward=reward, critic_loss=loss,
                    actor_grad_norm=0.0 if actor_grads is None
                    else bundle_norm(actor_grads),
                )
            )
            x_hat = x_hat_next
            ep_reward += reward
        history.episode_rewards.append(ep_reward)
        # selection sees training data only; late-run policy collapse is
        # common enough under hard target updates that keeping the best
        # episode's weights is worth the bookkeeping
        if config.keep_best:
            score = ep_reward if validate is None else float(validate(agent))
            if np.isfinite(score) and score >= best_reward:
                best_reward = score
                best_weights = (clone(agent.actor), clone(agent.critic))
    if config.keep_best and best_weights is not None:
        agent.actor, agent.critic = best_weights
        agent.actor_target = clone(agent.actor)
        agent.critic_target = clone(agent.critic)
    return agent, history


def agent_to_dict(agent: Agent) -> dict:
    return {
        "schema_version": 1,
        "actor": network_to_dict(agent.actor),
        "critic": network_to_dict(agent.critic),
        "actor_target": network_to_dict(agent.actor_target),
        "critic_target": network_to_dict(agent.critic_target),
        "buffer_capacity": agent.buffer.capacity,
        "actor_lr": agent.actor_opt.lr,
        "critic_lr": agent.critic_opt.lr,
    }


def agent_from_dict(payload: dict) -> Agent:
    """Rebuild networks; the replay buffer and Adam moments start fresh."""
    actor = network_from_dict(payload["actor"])
    critic = network_from_dict(payload["critic"])
    return Agent(
        actor=actor,
        critic=critic,
        actor_target=network_from_dict(payload["actor_target"]),
        critic_target=network_from_dict(payload["critic_target"]),
        buffer=ReplayBuffer(
            int(payload["buffer_capacity"]), actor.in_dim, actor.out_dim
        ),
        actor_opt=init_optimizer(actor, float(payload["actor_lr"])),
        critic_opt=init_optimizer(critic, float(payload["critic_lr"])),
    )
