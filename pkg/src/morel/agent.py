"""
Dual-path actor-critic and its A2C / PPO updates with joint segmentation.

The motion path is a full SegNet (its encoder feeds the policy; decoder and
translation head are kept for the joint segmentation loss), the static path
is an independently initialized encoder of the same shape. Both 512-d
embeddings are concatenated and fused by fc 1024 -> 512 before the actor
and critic heads.
"""

import logging
import math
from collections import deque
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import Checkpoint, IncompatibleCheckpointError, load_state
from .config import ConfigurationError, config_fingerprint
from .dataset import episode_seed
from .env import NUM_ACTIONS, SpriteWorld
from .motionops import seg_loss
from .schemas import Algo, EnvConfig, TrainConfig, UpdateConfig
from .segnet import (
    EMBEDDING_DIM,
    RELU_GAIN,
    Encoder,
    SegNet,
    SegOutput,
    _check_shape,
    orthogonal_,
    seeded_init,
)
from .segtrain import MetricsWriter, check_finite, save_checkpoint

logger = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "update",
    "env_steps",
    "mean_return",
    "loss_policy",
    "loss_value",
    "loss_entropy",
    "loss_seg",
)
PPO_METRIC_COLUMNS = METRIC_COLUMNS + ("clip_fraction",)

# stream ids mixed into the run seed
_ROLLOUT_STREAM = 1
_MINIBATCH_STREAM = 2
_EVAL_STREAM = 3


@dataclass
class PolicyOutput:
    logits: torch.Tensor  # (B, A)
    value: torch.Tensor  # (B,)
    segmentation: Optional[SegOutput] = None

    @property
    def log_probs(self) -> torch.Tensor:
        return F.log_softmax(self.logits, dim=-1)

    @property
    def probs(self) -> torch.Tensor:
        return F.softmax(self.logits, dim=-1)

    def entropy(self) -> torch.Tensor:
        log_probs = self.log_probs
        return -(log_probs.exp() * log_probs).sum(dim=-1)


class MorelActorCritic(nn.Module):
    """Motion path (SegNet) + static path (Encoder) -> fc 512 -> actor / critic."""

    has_segmentation = True

    def __init__(
        self,
        num_actions: int = NUM_ACTIONS,
        num_masks: int = 20,
        frame_size: int = 84,
        seed: Optional[int] = None,
    ):
        super().__init__()
        self.num_actions = num_actions
        self.num_masks = num_masks
        self.frame_size = frame_size
        self.motion = SegNet(num_masks, frame_size=frame_size)
        self.static = Encoder(in_channels=2, frame_size=frame_size)
        self.fusion = nn.Linear(2 * EMBEDDING_DIM, EMBEDDING_DIM)
        self.actor = nn.Linear(EMBEDDING_DIM, num_actions)
        self.critic = nn.Linear(EMBEDDING_DIM, 1)
        if seed is not None:
            seeded_init(self, seed)

    def reset_parameters(self) -> None:
        self.motion.reset_parameters()
        self.static.reset_parameters()
        orthogonal_(self.fusion, RELU_GAIN)
        orthogonal_(self.actor, 1.0)
        orthogonal_(self.critic, 1.0)

    def heads(
        self, motion_embedding: torch.Tensor, static_embedding: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        fused = F.relu(self.fusion(torch.cat([motion_embedding, static_embedding], dim=1)))
        return self.actor(fused), self.critic(fused).squeeze(-1)

    def forward(self, obs: torch.Tensor, with_segmentation: bool = False) -> PolicyOutput:
        _check_shape(obs, (None, 2, self.frame_size, self.frame_size), "observation")
        motion_embedding = self.motion.encode(obs)
        static_embedding = self.static(obs)
        logits, value = self.heads(motion_embedding, static_embedding)
        segmentation = self.motion.decode(motion_embedding) if with_segmentation else None
        return PolicyOutput(logits, value, segmentation)

    def architecture(self) -> Dict[str, Any]:
        return {
            "kind": "morel_actor_critic",
            "num_actions": self.num_actions,
            "num_masks": self.num_masks,
            "frame_size": self.frame_size,
        }


class StandardActorCritic(nn.Module):
    """Single encoder on the 2-frame input feeding the actor and critic heads."""

    has_segmentation = False

    def __init__(self, num_actions: int = NUM_ACTIONS, frame_size: int = 84, seed: Optional[int] = None):
        super().__init__()
        self.num_actions = num_actions
        self.frame_size = frame_size
        self.encoder = Encoder(in_channels=2, frame_size=frame_size)
        self.actor = nn.Linear(EMBEDDING_DIM, num_actions)
        self.critic = nn.Linear(EMBEDDING_DIM, 1)
        if seed is not None:
            seeded_init(self, seed)

    def reset_parameters(self) -> None:
        self.encoder.reset_parameters()
        orthogonal_(self.actor, 1.0)
        orthogonal_(self.critic, 1.0)

    def forward(self, obs: torch.Tensor, with_segmentation: bool = False) -> PolicyOutput:
        if with_segmentation:
            raise ValueError("the standard architecture has no segmentation branch")
        _check_shape(obs, (None, 2, self.frame_size, self.frame_size), "observation")
        embedding = self.encoder(obs)
        return PolicyOutput(self.actor(embedding), self.critic(embedding).squeeze(-1))

    def architecture(self) -> Dict[str, Any]:
        return {
            "kind": "standard_actor_critic",
            "num_actions": self.num_actions,
            "frame_size": self.frame_size,
        }


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def act(model: nn.Module, obs: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Action distribution and value for one (2, H, W) or a batch of observations."""
    single = obs.dim() == 3
    batch = obs.unsqueeze(0) if single else obs
    with torch.no_grad():
        out = model(batch)
    probs, value = out.probs, out.value
    return (probs[0], value[0]) if single else (probs, value)


def transfer_weights(
    checkpoint: Checkpoint, seed: int, num_actions: int = NUM_ACTIONS
) -> MorelActorCritic:
    """Build an agent whose motion path is copied from a segnet checkpoint.

    The static path and heads are initialized from ``seed``.

    Raises:
        IncompatibleCheckpointError: If the checkpoint is not a segnet or its
            tensors do not fit
    """
    arch = checkpoint.meta.get("architecture", {})
    if arch.get("kind") != "segnet":
        raise IncompatibleCheckpointError(
            f"cannot transfer from a '{arch.get('kind')}' checkpoint, expected 'segnet'"
        )
    model = MorelActorCritic(
        num_actions=num_actions,
        num_masks=arch["num_masks"],
        frame_size=arch["frame_size"],
        seed=seed,
    )
    load_state(model.motion, checkpoint.model_state(), what="motion path")
    logger.info(f"Transferred segnet step {checkpoint.step} into the motion path (seed {seed})")
    return model


@dataclass
class RolloutBatch:
    """Time-major rollout: every per-step field is (T, N, ...)."""

    obs: torch.Tensor  # (T, N, 2, H, W)
    actions: torch.Tensor  # (T, N) long
    rewards: torch.Tensor  # (T, N)
    dones: torch.Tensor  # (T, N), 1.0 where the episode ended after the step
    values: torch.Tensor  # (T, N)
    log_probs: torch.Tensor  # (T, N)
    bootstrap_values: torch.Tensor  # (N,)

    def __post_init__(self):
        t, n = self.rewards.shape
        for name in ("actions", "dones", "values", "log_probs"):
            if tuple(getattr(self, name).shape) != (t, n):
                raise ValueError(f"rollout field '{name}' must be {(t, n)}")
        if tuple(self.obs.shape[:2]) != (t, n) or tuple(self.bootstrap_values.shape) != (n,):
            raise ValueError("rollout observations or bootstrap values are mis-shaped")
        if not torch.isfinite(self.rewards).all():
            raise ValueError("rollout rewards must be finite")

    @property
    def num_steps(self) -> int:
        return self.rewards.shape[0]

    @property
    def num_envs(self) -> int:
        return self.rewards.shape[1]


def discounted_returns(
    rewards: torch.Tensor, dones: torch.Tensor, bootstrap: torch.Tensor, gamma: float
) -> torch.Tensor:
    """R_t = r_t + gamma * (1 - done_t) * R_{t+1}, with R_T = bootstrap."""
    returns = torch.zeros_like(rewards)
    running = bootstrap
    for t in reversed(range(rewards.shape[0])):
        running = rewards[t] + gamma * (1.0 - dones[t]) * running
        returns[t] = running
    return returns


def compute_advantages(rollout: RolloutBatch, gamma: float) -> Tuple[torch.Tensor, torch.Tensor]:
    """n-step returns and advantages A_t = R_t - V_t, both (T, N)."""
    returns = discounted_returns(
        rollout.rewards, rollout.dones.to(rollout.rewards.dtype), rollout.bootstrap_values, gamma
    )
    return returns, returns - rollout.values


@dataclass
class UpdateStats:
    loss_policy: float
    loss_value: float
    loss_entropy: float
    loss_seg: float
    loss_total: float
    grad_norm: float
    clip_fraction: Optional[float] = None

    def as_row(self) -> Dict[str, float]:
        row = asdict(self)
        if self.clip_fraction is None:
            row.pop("clip_fraction")
        return row


def _flatten(rollout: RolloutBatch) -> Dict[str, torch.Tensor]:
    t, n = rollout.num_steps, rollout.num_envs
    return {
        "obs": rollout.obs.reshape(t * n, *rollout.obs.shape[2:]),
        "actions": rollout.actions.reshape(-1),
        "values": rollout.values.reshape(-1),
        "log_probs": rollout.log_probs.reshape(-1),
    }


def _uses_seg(model: nn.Module, joint_seg: bool, config: UpdateConfig) -> bool:
    if joint_seg and not getattr(model, "has_segmentation", False):
        raise ConfigurationError("joint segmentation needs a model with a motion path")
    return joint_seg and config.seg_coef > 0


def _seg_term(obs: torch.Tensor, out: PolicyOutput, config: UpdateConfig) -> torch.Tensor:
    # curriculum is complete by the time the agent trains
    return seg_loss(
        obs,
        out.segmentation,
        schedule=None,
        window_size=config.window_size,
        reg_reduction=config.reg_reduction,
    ).total


def a2c_objective(
    model: nn.Module,
    obs: torch.Tensor,
    actions: torch.Tensor,
    returns: torch.Tensor,
    advantages: torch.Tensor,
    config: UpdateConfig,
    joint_seg: bool = False,
) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """Total A2C loss and its terms over a flat batch."""
    use_seg = _uses_seg(model, joint_seg, config)
    out = model(obs, with_segmentation=use_seg)
    log_prob = out.log_probs.gather(1, actions.view(-1, 1)).squeeze(1)
    policy = -(advantages.detach() * log_prob).mean()
    value = (returns.detach() - out.value).pow(2).mean()
    entropy = out.entropy().mean()
    total = policy + config.value_coef * value - config.entropy_coef * entropy
    seg = torch.zeros((), dtype=total.dtype)
    if use_seg:
        seg = _seg_term(obs, out, config)
        total = total + config.seg_coef * seg
    return total, {"policy": policy, "value": value, "entropy": entropy, "seg": seg}


def ppo_minibatch_objective(
    model: nn.Module,
    obs: torch.Tensor,
    actions: torch.Tensor,
    old_log_probs: torch.Tensor,
    old_values: torch.Tensor,
    returns: torch.Tensor,
    advantages: torch.Tensor,
    config: UpdateConfig,
    joint_seg: bool = False,
) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """Clipped PPO loss for one minibatch.

    The segmentation loss is scaled by the fraction of samples whose policy
    or value term was not clipped. Besides the loss terms, the returned dict
    holds ``ratio``, ``clipped`` (per-sample bool) and ``seg_weight``.
    """
    use_seg = _uses_seg(model, joint_seg, config)
    eps = config.clip_epsilon
    advantages = advantages.detach()
    returns = returns.detach()
    out = model(obs, with_segmentation=use_seg)

    log_prob = out.log_probs.gather(1, actions.view(-1, 1)).squeeze(1)
    ratio = torch.exp(log_prob - old_log_probs.detach())
    surrogate = torch.min(ratio * advantages, ratio.clamp(1 - eps, 1 + eps) * advantages)
    policy = -surrogate.mean()
    policy_clipped = ((advantages > 0) & (ratio > 1 + eps)) | ((advantages < 0) & (ratio < 1 - eps))

    delta = out.value - old_values.detach()
    value_clipped_pred = old_values.detach() + delta.clamp(-eps, eps)
    value = torch.max(
        (returns - out.value).pow(2), (returns - value_clipped_pred).pow(2)
    ).mean()
    value_clipped = delta.detach().abs() > eps

    clipped = policy_clipped | value_clipped
    seg_weight = 1.0 - clipped.to(out.value.dtype).mean()

    entropy = out.entropy().mean()
    total = policy + config.value_coef * value - config.entropy_coef * entropy
    seg = torch.zeros((), dtype=total.dtype)
    if use_seg:
        seg = _seg_term(obs, out, config)
        total = total + config.seg_coef * seg_weight * seg
    return total, {
        "policy": policy,
        "value": value,
        "entropy": entropy,
        "seg": seg,
        "ratio": ratio.detach(),
        "clipped": clipped,
        "seg_weight": seg_weight.detach(),
    }


def _apply_gradients(
    model: nn.Module, optimizer: torch.optim.Optimizer, loss: torch.Tensor, config: UpdateConfig
) -> float:
    optimizer.zero_grad()
    loss.backward()
    norm = nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip_norm)
    optimizer.step()
    return float(norm)


def a2c_update(
    model: nn.Module,
    optimizer: torch.optim.Optimizer,
    rollout: RolloutBatch,
    config: UpdateConfig,
    joint_seg: bool = False,
    step: int = 0,
    dump_dir: Optional[Path] = None,
) -> UpdateStats:
    """One gradient step on the A2C objective (plus the joint segmentation loss)."""
    returns, advantages = compute_advantages(rollout, config.gamma)
    flat = _flatten(rollout)
    total, terms = a2c_objective(
        model, flat["obs"], flat["actions"], returns.reshape(-1), advantages.reshape(-1),
        config, joint_seg,
    )
    check_finite(total, {"obs": flat["obs"], "actions": flat["actions"]}, dump_dir, step)
    grad_norm = _apply_gradients(model, optimizer, total, config)
    return UpdateStats(
        loss_policy=float(terms["policy"].detach()),
        loss_value=float(terms["value"].detach()),
        loss_entropy=float(terms["entropy"].detach()),
        loss_seg=float(terms["seg"].detach()),
        loss_total=float(total.detach()),
        grad_norm=grad_norm,
    )


def ppo_update(
    model: nn.Module,
    optimizer: torch.optim.Optimizer,
    rollout: RolloutBatch,
    config: UpdateConfig,
    joint_seg: bool = False,
    generator: Optional[torch.Generator] = None,
    step: int = 0,
    dump_dir: Optional[Path] = None,
) -> UpdateStats:
    """``epochs`` passes of shuffled minibatch updates on the clipped objective."""
    returns, advantages = compute_advantages(rollout, config.gamma)
    flat = _flatten(rollout)
    returns, advantages = returns.reshape(-1), advantages.reshape(-1)
    n = returns.shape[0]
    if config.minibatches > n:
        raise ConfigurationError(f"{config.minibatches} minibatches requested for {n} samples")

    sums = {"policy": 0.0, "value": 0.0, "entropy": 0.0, "seg": 0.0, "total": 0.0, "norm": 0.0}
    clipped_total = 0.0
    count = 0
    for _ in range(config.epochs):
        permutation = torch.randperm(n, generator=generator)
        for index in torch.tensor_split(permutation, config.minibatches):
            total, terms = ppo_minibatch_objective(
                model,
                flat["obs"][index],
                flat["actions"][index],
                flat["log_probs"][index],
                flat["values"][index],
                returns[index],
                advantages[index],
                config,
                joint_seg,
            )
            check_finite(
                total, {"obs": flat["obs"][index], "actions": flat["actions"][index]},
                dump_dir, step,
            )
            sums["norm"] += _apply_gradients(model, optimizer, total, config)
            for key in ("policy", "value", "entropy", "seg"):
                sums[key] += float(terms[key].detach())
            sums["total"] += float(total.detach())
            clipped_total += float(terms["clipped"].float().mean())
            count += 1

    return UpdateStats(
        loss_policy=sums["policy"] / count,
        loss_value=sums["value"] / count,
        loss_entropy=sums["entropy"] / count,
        loss_seg=sums["seg"] / count,
        loss_total=sums["total"] / count,
        grad_norm=sums["norm"] / count,
        clip_fraction=clipped_total / count,
    )


def make_optimizer(model: nn.Module, config: UpdateConfig, algo: Algo) -> torch.optim.Optimizer:
    lr = config.resolved_learning_rate(algo)
    if config.resolved_optimizer(algo) == "rmsprop":
        return torch.optim.RMSprop(
            model.parameters(), lr=lr, alpha=config.rmsprop_alpha, eps=config.optim_eps
        )
    return torch.optim.Adam(model.parameters(), lr=lr, eps=config.optim_eps)


def _sample_actions(probs: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    return torch.multinomial(probs, 1, generator=generator).squeeze(1)


class RolloutCollector:
    """Steps ``num_envs`` environments in lockstep and gathers rollouts.

    Environment ``i`` resets its ``e``-th episode with seed
    ``episode_seed(seed, i, e)``.
    """

    def __init__(self, env_config: EnvConfig, num_envs: int, seed: int, return_window: int = 10):
        self.seed = seed
        self.envs = [SpriteWorld(env_config) for _ in range(num_envs)]
        self.episodes = [0] * num_envs
        self.generator = torch.Generator().manual_seed(episode_seed(seed, _ROLLOUT_STREAM))
        self.running_returns = np.zeros(num_envs)
        self.completed: deque = deque(maxlen=return_window)
        self.env_steps = 0
        self._obs = np.stack([self._reset(i) for i in range(num_envs)])

    def _reset(self, i: int) -> np.ndarray:
        frame = self.envs[i].reset(seed=episode_seed(self.seed, i, self.episodes[i]))
        return np.stack([frame, frame])

    @property
    def mean_return(self) -> float:
        return float(np.mean(self.completed)) if self.completed else math.nan

    def collect(self, model: nn.Module, n_steps: int) -> RolloutBatch:
        fields: Dict[str, List[torch.Tensor]] = {
            k: [] for k in ("obs", "actions", "rewards", "dones", "values", "log_probs")
        }
        with torch.no_grad():
            for _ in range(n_steps):
                obs = torch.from_numpy(self._obs)
                out = model(obs)
                actions = _sample_actions(out.probs, self.generator)
                rewards = np.zeros(len(self.envs), dtype=np.float32)
                dones = np.zeros(len(self.envs), dtype=np.float32)
                next_obs = []
                for i, env in enumerate(self.envs):
                    transition = env.step(int(actions[i]))
                    rewards[i] = transition.reward
                    self.running_returns[i] += transition.reward
                    if transition.done:
                        dones[i] = 1.0
                        self.completed.append(self.running_returns[i])
                        self.running_returns[i] = 0.0
                        self.episodes[i] += 1
                        next_obs.append(self._reset(i))
                    else:
                        next_obs.append(transition.obs)
                fields["obs"].append(obs)
                fields["actions"].append(actions)
                fields["rewards"].append(torch.from_numpy(rewards))
                fields["dones"].append(torch.from_numpy(dones))
                fields["values"].append(out.value)
                fields["log_probs"].append(out.log_probs.gather(1, actions.view(-1, 1)).squeeze(1))
                self._obs = np.stack(next_obs)
                self.env_steps += len(self.envs)
            bootstrap = model(torch.from_numpy(self._obs)).value
        stacked = {k: torch.stack(v) for k, v in fields.items()}
        return RolloutBatch(bootstrap_values=bootstrap, **stacked)


def evaluate(
    model: nn.Module,
    env_config: EnvConfig,
    episodes: int,
    seed: int,
    greedy: bool = False,
) -> List[float]:
    """Returns of ``episodes`` full episodes under a fixed seed.

    Raises:
        ValueError: If episodes < 1
    """
    if episodes < 1:
        raise ValueError(f"episodes must be >= 1, got {episodes}")
    generator = torch.Generator().manual_seed(episode_seed(seed, _EVAL_STREAM))
    env = SpriteWorld(env_config)
    returns = []
    with torch.no_grad():
        for e in range(episodes):
            frame = env.reset(seed=episode_seed(seed, _EVAL_STREAM, e))
            obs = np.stack([frame, frame])
            total = 0.0
            done = False
            while not done:
                probs = model(torch.from_numpy(obs).unsqueeze(0)).probs
                if greedy:
                    action = int(probs.argmax(dim=1))
                else:
                    action = int(_sample_actions(probs, generator))
                transition = env.step(action)
                total += transition.reward
                obs, done = transition.obs, transition.done
            returns.append(total)
    return returns


@dataclass
class TrainResult:
    run_dir: Path
    updates: int
    env_steps: int
    final_mean_return: float


def agent_meta(model: nn.Module) -> Dict[str, Any]:
    return {"kind": "agent", "architecture": model.architecture()}


def load_agent(checkpoint: Checkpoint) -> nn.Module:
    arch = dict(checkpoint.meta.get("architecture", {}))
    kind = arch.pop("kind", None)
    if kind == "morel_actor_critic":
        model: nn.Module = MorelActorCritic(**arch)
    elif kind == "standard_actor_critic":
        model = StandardActorCritic(**arch)
    else:
        raise IncompatibleCheckpointError(f"checkpoint holds a '{kind}' model, expected an agent")
    load_state(model, checkpoint.model_state())
    return model


def _write_eval(path: Path, returns: List[float]) -> None:
    with MetricsWriter(path, ("episode", "return")) as writer:
        for i, value in enumerate(returns):
            writer.write({"episode": i, "return": value})


def train(
    model: nn.Module,
    env_config: EnvConfig,
    update_config: UpdateConfig,
    train_config: TrainConfig,
    joint_seg: bool,
    seed: int,
    out_dir: Path | str,
) -> TrainResult:
    """Synchronous rollout/update loop writing metrics, evaluations and checkpoints.

    Args:
        model: Agent to train in place
        env_config: Environment for rollouts and evaluation
        update_config: Update hyperparameters
        train_config: Budget, algorithm and logging cadence
        joint_seg: Add the segmentation loss to every update
        seed: Run seed for environments and sampling
        out_dir: Run directory
    """
    algo = train_config.algo
    steps_per_update = update_config.n_steps * update_config.num_envs
    num_updates = train_config.total_env_steps // steps_per_update
    if num_updates < 1:
        raise ConfigurationError(
            f"total_env_steps {train_config.total_env_steps} is below one update "
            f"({steps_per_update} env steps)"
        )
    _uses_seg(model, joint_seg, update_config)

    out_dir = Path(out_dir)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out_dir / "eval").mkdir(exist_ok=True)
    optimizer = make_optimizer(model, update_config, algo)
    collector = RolloutCollector(
        env_config, update_config.num_envs, seed, train_config.return_window
    )
    minibatch_generator = torch.Generator().manual_seed(episode_seed(seed, _MINIBATCH_STREAM))
    fingerprint = config_fingerprint(
        {"update": update_config.model_dump(mode="json"), "train": train_config.model_dump(mode="json")}
    )
    columns = PPO_METRIC_COLUMNS if algo == "ppo" else METRIC_COLUMNS

    logger.info(
        f"Training {algo} for {num_updates} updates ({steps_per_update} env steps each), "
        f"joint_seg={joint_seg}, seed={seed}"
    )
    with MetricsWriter(out_dir / "metrics.csv", columns) as metrics:
        for update in range(1, num_updates + 1):
            rollout = collector.collect(model, update_config.n_steps)
            if algo == "ppo":
                stats = ppo_update(
                    model, optimizer, rollout, update_config, joint_seg,
                    minibatch_generator, update, out_dir,
                )
            else:
                stats = a2c_update(
                    model, optimizer, rollout, update_config, joint_seg, update, out_dir
                )
            env_steps = update * steps_per_update
            metrics.write(
                {"update": update, "env_steps": env_steps, "mean_return": collector.mean_return,
                 **stats.as_row()}
            )
            if update % train_config.log_every == 0:
                logger.info(
                    f"update {update}/{num_updates} env_steps={env_steps} "
                    f"mean_return={collector.mean_return:.3f} loss={stats.loss_total:.4f}"
                )
            if train_config.eval_every and update % train_config.eval_every == 0:
                returns = evaluate(model, env_config, train_config.eval_episodes, seed)
                _write_eval(out_dir / "eval" / f"eval_{update:06d}.csv", returns)
            if train_config.checkpoint_every and update % train_config.checkpoint_every == 0:
                save_checkpoint(
                    model, out_dir / "checkpoints" / f"update_{update:06d}.ckpt",
                    update, optimizer, fingerprint, agent_meta(model),
                )

    save_checkpoint(
        model, out_dir / "final.ckpt", num_updates, optimizer, fingerprint, agent_meta(model)
    )
    if collector.completed:
        logger.info(f"Finished: mean return {collector.mean_return:.3f} over last episodes")
    else:
        logger.warning("Finished without completing an episode; mean_return is NaN")
    return TrainResult(out_dir, num_updates, num_updates * steps_per_update, collector.mean_return)
