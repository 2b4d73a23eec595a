import logging
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from channel_model import ChannelSimulator, GainMatrix
from experience_replay import GlobalExperience, LocalExperience, LocalUpload, ReplayBuffer, assemble_uploads
from network_environment import (
    DelayLine,
    HetNetEnvironment,
    LocalState,
    SlotRecord,
    preprocess_features,
)
from neural_numerics import (
    AdamState,
    ForwardCache,
    Mlp,
    MlpGradients,
    adam_step,
    mlp_backward,
    mlp_forward,
    mlp_from_state_dict,
    mlp_init,
    mlp_state_dict,
    scale,
    soft_update,
)
from scenario_config import AgentConfig, ScenarioConfig
from simulation_errors import ConfigurationError, IncompleteSlotError, NumericError, OutputError, ShapeError

logger = logging.getLogger(__name__)

LOCAL_STATE_WIDTH = 7


def actor_topology(agent: AgentConfig, p_max: float) -> Tuple[List[int], List]:
    """Layer sizes and activations shared by the local, actor and target-actor nets of one AP."""
    sizes = [LOCAL_STATE_WIDTH, *agent.actor_hidden, 1, 1]
    activations = ["relu", "relu", "sigmoid", scale(p_max)]
    return sizes, activations


@dataclass
class ActorAgent:
    """Networks of one AP: the local net it acts with, the trained actor and its target."""
    ap: int
    p_max: float
    p_floor: float
    local: Mlp
    actor: Mlp
    target: Mlp
    optimizer: AdamState


@dataclass
class ActorSet:
    agents: List[ActorAgent]

    @classmethod
    def build(cls, config: ScenarioConfig, rng: np.random.Generator) -> "ActorSet":
        """Initialize every AP's local and actor nets independently; targets start as actor copies."""
        agent_cfg = config.agent
        agents = []
        for n, (p_max, p_floor) in enumerate(zip(config.p_max, config.p_floor)):
            sizes, activations = actor_topology(agent_cfg, float(p_max))
            actor = mlp_init(sizes, activations, rng)
            local = mlp_init(sizes, activations, rng)
            agents.append(ActorAgent(
                ap=n,
                p_max=float(p_max),
                p_floor=float(p_floor),
                local=local,
                actor=actor,
                target=actor.copy(),
                optimizer=AdamState.for_network(
                    actor, agent_cfg.actor_learning_rate,
                    agent_cfg.adam_beta1, agent_cfg.adam_beta2, agent_cfg.adam_epsilon,
                ),
            ))
        return cls(agents)

    def __len__(self) -> int:
        return len(self.agents)

    def __getitem__(self, n: int) -> ActorAgent:
        return self.agents[n]

    def __iter__(self):
        return iter(self.agents)

    @property
    def target_actors(self) -> List[Mlp]:
        return [agent.target for agent in self.agents]

    def neuron_count(self) -> int:
        """Neurons of one actor network, input and scale layers included."""
        return int(sum(self.agents[0].actor.layer_sizes))


@dataclass
class CriticNetwork:
    """Q(s, a) built from a state module, an action module and a mixed module on their concatenation."""
    state_module: Mlp
    action_module: Mlp
    mixed_module: Mlp
    p_max: np.ndarray

    def modules(self) -> List[Mlp]:
        return [self.state_module, self.action_module, self.mixed_module]

    def copy(self) -> "CriticNetwork":
        return CriticNetwork(
            self.state_module.copy(), self.action_module.copy(), self.mixed_module.copy(), self.p_max.copy()
        )


@dataclass
class CriticCache:
    state_cache: ForwardCache
    action_cache: ForwardCache
    mixed_cache: ForwardCache
    state_width: int


def build_critic(num_aps: int, agent: AgentConfig, p_max, rng: np.random.Generator) -> CriticNetwork:
    """Create a critic whose state module takes 7N + N^2 inputs and action module N inputs."""
    state_in = LOCAL_STATE_WIDTH * num_aps + num_aps ** 2
    l2s, l3s = agent.critic_state_hidden
    return CriticNetwork(
        state_module=mlp_init([state_in, l2s, l3s], ["relu", "linear"], rng),
        action_module=mlp_init([num_aps, agent.critic_action_hidden], ["linear"], rng),
        mixed_module=mlp_init([l3s + agent.critic_action_hidden, agent.critic_mixed_hidden, 1],
                              ["relu", "linear"], rng),
        p_max=np.asarray(p_max, dtype=float),
    )


def critic_forward(critic: CriticNetwork, state_features, actions) -> Tuple[np.ndarray, CriticCache]:
    """
    Evaluate Q for a batch.

    Args:
        critic: Critic to evaluate
        state_features: (batch, 7N + N^2) preprocessed global states
        actions: (batch, N) transmit powers in watts

    Returns:
        Tuple of (Q values of shape (batch,), cache for critic_backward)
    """
    x_s = np.atleast_2d(np.asarray(state_features, dtype=float))
    a = np.atleast_2d(np.asarray(actions, dtype=float))
    if x_s.shape[0] != a.shape[0]:
        raise ShapeError(f"State batch {x_s.shape[0]} and action batch {a.shape[0]} differ")
    h_s, state_cache = mlp_forward(critic.state_module, x_s)
    h_a, action_cache = mlp_forward(critic.action_module, a / critic.p_max)
    q, mixed_cache = mlp_forward(critic.mixed_module, np.concatenate([h_s, h_a], axis=1))
    return q[:, 0], CriticCache(state_cache, action_cache, mixed_cache, h_s.shape[1])


def critic_backward(critic: CriticNetwork, cache: CriticCache,
                    q_gradient) -> Tuple[List[MlpGradients], np.ndarray]:
    """
    Backpropagate an upstream gradient on Q through all three modules.

    Returns:
        Tuple of (gradients for state, action and mixed modules, gradient w.r.t. actions in watts)
    """
    upstream = np.asarray(q_gradient, dtype=float).reshape(-1, 1)
    mixed_grads, mixed_input_grad = mlp_backward(critic.mixed_module, cache.mixed_cache, upstream)
    state_grads, _ = mlp_backward(critic.state_module, cache.state_cache,
                                  mixed_input_grad[:, :cache.state_width])
    action_grads, action_input_grad = mlp_backward(critic.action_module, cache.action_cache,
                                                   mixed_input_grad[:, cache.state_width:])
    return [state_grads, action_grads, mixed_grads], action_input_grad / critic.p_max


@dataclass
class CriticPair:
    critic: CriticNetwork
    target: CriticNetwork
    optimizers: List[AdamState]

    @classmethod
    def build(cls, config: ScenarioConfig, rng: np.random.Generator) -> "CriticPair":
        agent = config.agent
        critic = build_critic(config.num_aps, agent, config.p_max, rng)
        optimizers = [
            AdamState.for_network(module, agent.critic_learning_rate,
                                  agent.adam_beta1, agent.adam_beta2, agent.adam_epsilon)
            for module in critic.modules()
        ]
        return cls(critic=critic, target=critic.copy(), optimizers=optimizers)

    @property
    def num_aps(self) -> int:
        return self.critic.action_module.input_dim

    def neuron_count(self) -> int:
        """Input neurons of both modules plus every hidden and output neuron."""
        c = self.critic
        return int(
            c.state_module.input_dim + c.action_module.input_dim
            + sum(c.state_module.layer_sizes[1:]) + sum(c.action_module.layer_sizes[1:])
            + sum(c.mixed_module.layer_sizes[1:])
        )


@dataclass
class NoiseSchedule:
    """Exploration noise with std max(floor, sqrt(variance) * decay^slot), in units of p_max."""
    initial_variance: float = 2.0
    decay: float = 0.9995
    floor_std: float = 0.01

    @classmethod
    def from_config(cls, agent: AgentConfig) -> "NoiseSchedule":
        return cls(agent.noise_variance, agent.noise_decay, agent.noise_floor_std)

    def std(self, slot: int) -> float:
        return max(self.floor_std, float(np.sqrt(self.initial_variance)) * self.decay ** max(slot, 0))


@dataclass
class TrainerClock:
    """Tracks the slot and which stage of the delayed training timeline it falls in."""
    T_d: int
    D: int
    T_u: int
    slot: int = 0
    first_update: Optional[int] = None

    @classmethod
    def from_config(cls, config: ScenarioConfig) -> "TrainerClock":
        return cls(config.T_d, config.D, config.T_u)

    @property
    def nominal_first_update(self) -> int:
        return self.T_d + self.D

    @property
    def nominal_first_replacement(self) -> int:
        return 2 * self.T_d + self.D + self.T_u

    @property
    def phase(self) -> str:
        if self.first_update is None or self.slot < self.first_update:
            return "random-accumulation"
        if self.slot < self.first_update + self.T_u + self.T_d:
            return "training"
        return "steady"

    def is_push_slot(self) -> bool:
        """Actor weights go out every T_u slots counted from the first update."""
        if self.first_update is None or self.slot <= self.first_update:
            return False
        return (self.slot - self.first_update) % self.T_u == 0


def select_action(local_net: Mlp, s_n: LocalState, noise: NoiseSchedule, slot: int,
                  rng: np.random.Generator, explore: bool = True, p_floor: Optional[float] = None) -> float:
    """
    Choose a transmit power from an AP's local network.

    Args:
        local_net: Local network whose last layer scales by p_max
        s_n: Raw local state
        noise: Exploration schedule
        slot: Current slot, selects the noise std
        rng: Random stream for the noise draw
        explore: Add Gaussian noise (training stage) or act greedily (testing stage)
        p_floor: Lowest admissible power; defaults to 1e-6 * p_max

    Returns:
        Power in watts within [p_floor, p_max]
    """
    p_max = local_net.layers[-1].activation.factor
    floor = 1e-6 * p_max if p_floor is None else p_floor
    mu, _ = mlp_forward(local_net, preprocess_features(s_n))
    action = float(mu[0])
    if explore:
        action += float(rng.normal(0.0, noise.std(slot))) * p_max
    return float(np.clip(action, floor, p_max))


def _batch_arrays(batch: Sequence[GlobalExperience], next_states: bool = False) -> np.ndarray:
    if next_states:
        return np.stack([exp.next_state_features() for exp in batch])
    return np.stack([exp.state_features() for exp in batch])


def _local_features(global_features: np.ndarray, n: int) -> np.ndarray:
    return global_features[:, LOCAL_STATE_WIDTH * n:LOCAL_STATE_WIDTH * (n + 1)]


def compute_critic_targets(batch: Sequence[GlobalExperience], target_actors: Sequence[Mlp],
                           target_critic: CriticNetwork, eta: float) -> np.ndarray:
    """y = R + eta * Q-(s', s_o', a') with a'_n taken from target actor n; the task never terminates."""
    if not batch:
        raise ShapeError("Cannot compute targets for an empty batch")
    rewards = np.array([exp.reward_sum for exp in batch])
    if eta == 0.0:
        return rewards
    next_features = _batch_arrays(batch, next_states=True)
    next_actions = np.column_stack([
        mlp_forward(actor, _local_features(next_features, n))[0][:, 0]
        for n, actor in enumerate(target_actors)
    ])
    q_next, _ = critic_forward(target_critic, next_features, next_actions)
    return rewards + eta * q_next


def update_critic(critic_pair: CriticPair, batch: Sequence[GlobalExperience], targets) -> float:
    """
    One Adam step on the mean squared error between targets and Q(s, a).

    Returns:
        The loss before the step

    Raises:
        NumericError when the loss or any gradient is non-finite; nothing is updated then
    """
    y = np.asarray(targets, dtype=float)
    if y.shape != (len(batch),):
        raise ShapeError(f"{y.shape[0] if y.ndim else 0} targets for a batch of {len(batch)}")
    actions = np.stack([exp.actions for exp in batch])
    q, cache = critic_forward(critic_pair.critic, _batch_arrays(batch), actions)
    residual = q - y
    loss = float(np.mean(residual ** 2))
    if not np.isfinite(loss):
        raise NumericError(f"Critic loss is {loss}")
    gradients, _ = critic_backward(critic_pair.critic, cache, 2.0 * residual / len(batch))
    if not all(g.is_finite() for g in gradients):
        raise NumericError("Critic gradient is non-finite")
    for module, grads, state in zip(critic_pair.critic.modules(), gradients, critic_pair.optimizers):
        adam_step(module, grads, state)
    return loss


def actor_objective(actor_set: ActorSet, critic: CriticNetwork, batch: Sequence[GlobalExperience]) -> float:
    """Batch-mean Q with every action taken from the online actors."""
    features = _batch_arrays(batch)
    actions = np.column_stack([
        mlp_forward(agent.actor, _local_features(features, n))[0][:, 0]
        for n, agent in enumerate(actor_set)
    ])
    q, _ = critic_forward(critic, features, actions)
    return float(np.mean(q))


def actor_gradients(actor_set: ActorSet, critic: CriticNetwork, batch: Sequence[GlobalExperience],
                    other_actions: str = "online") -> Tuple[List[MlpGradients], np.ndarray]:
    """
    Gradient of the negated batch-mean Q with respect to each actor's parameters.

    Args:
        actor_set: Actors to differentiate
        critic: Critic providing Q
        batch: Sampled global experiences
        other_actions: "online" evaluates every actor on the batch; "logged" keeps the
            recorded actions of the other APs and needs one critic pass per AP

    Returns:
        (per-actor gradients, online actions of shape (batch, N))
    """
    features = _batch_arrays(batch)
    size = len(batch)
    forwards = [mlp_forward(agent.actor, _local_features(features, n)) for n, agent in enumerate(actor_set)]
    online_actions = np.column_stack([out[:, 0] for out, _ in forwards])

    if other_actions == "online":
        _, cache = critic_forward(critic, features, online_actions)
        _, action_grads = critic_backward(critic, cache, np.full(size, -1.0 / size))
        per_ap_grads = [action_grads[:, n] for n in range(len(actor_set))]
    elif other_actions == "logged":
        logged = np.stack([exp.actions for exp in batch])
        per_ap_grads = []
        for n in range(len(actor_set)):
            mixed = logged.copy()
            mixed[:, n] = online_actions[:, n]
            _, cache = critic_forward(critic, features, mixed)
            _, action_grads = critic_backward(critic, cache, np.full(size, -1.0 / size))
            per_ap_grads.append(action_grads[:, n])
    else:
        raise ConfigurationError(f"Unknown other_actions mode: {other_actions}")

    gradients = [
        mlp_backward(agent.actor, forwards[n][1], per_ap_grads[n][:, np.newaxis])[0]
        for n, agent in enumerate(actor_set)
    ]
    return gradients, online_actions


def update_actors(actor_set: ActorSet, critic: CriticNetwork, batch: Sequence[GlobalExperience],
                  other_actions: str = "online") -> Dict[str, object]:
    """
    Ascend the batch-mean Q for every actor through the shared critic.

    Returns:
        Dict with 'mean_actions' (per AP, batch mean before the step) and 'skipped' (AP indices)
    """
    gradients, online_actions = actor_gradients(actor_set, critic, batch, other_actions)
    skipped = []
    for n, agent in enumerate(actor_set):
        try:
            adam_step(agent.actor, gradients[n], agent.optimizer)
        except NumericError as e:
            logger.warning(f"Skipping update of actor {n + 1}: {e}")
            skipped.append(n)
    return {"mean_actions": online_actions.mean(axis=0), "skipped": skipped}


def sync_targets(actor_set: ActorSet, critic_pair: CriticPair, tau_a: float, tau_c: float) -> None:
    """Soft-update every target actor and the target critic."""
    for agent in actor_set:
        soft_update(agent.target, agent.actor, tau_a)
    for target, online in zip(critic_pair.target.modules(), critic_pair.critic.modules()):
        soft_update(target, online, tau_c)


class WeightSynchronizer:
    """Carries actor snapshots from the core network to the APs over a T_d downlink."""

    def __init__(self, delay: int):
        self.downlink = DelayLine(delay)
        self.replacement_slots: List[int] = []

    def push(self, actor_set: ActorSet, slot: int) -> int:
        snapshot = [agent.actor.copy() for agent in actor_set]
        return self.downlink.push(snapshot, slot)

    def deliver(self, actor_set: ActorSet, slot: int) -> bool:
        """Install every snapshot released by `slot` as the APs' local nets."""
        delivered = self.downlink.pop_released(slot)
        for snapshot in delivered:
            for agent, weights in zip(actor_set, snapshot):
                agent.local.load_parameters_from(weights)
        if delivered:
            self.replacement_slots.append(slot)
        return bool(delivered)


def push_local_weights(actor_set: ActorSet, synchronizer: WeightSynchronizer,
                       clock: TrainerClock) -> Optional[int]:
    """Send actor snapshots on the T_u schedule; returns the arrival slot, or None when nothing was sent."""
    if not clock.is_push_slot():
        return None
    release = synchronizer.push(actor_set, clock.slot)
    logger.debug(f"Slot {clock.slot}: actor weights sent, arriving at slot {release}")
    return release


def save_checkpoint(actor_set: ActorSet, critic_pair: CriticPair, path: Union[str, Path]) -> Path:
    """Write every local, actor, target-actor and critic network to one .npz file."""
    state: Dict[str, np.ndarray] = {}
    for agent in actor_set:
        for role, net in (("local", agent.local), ("actor", agent.actor), ("target", agent.target)):
            state.update(mlp_state_dict(net, prefix=f"ap{agent.ap}_{role}_"))
    for role, critic in (("critic", critic_pair.critic), ("target_critic", critic_pair.target)):
        for module_name, module in zip(("state", "action", "mixed"), critic.modules()):
            state.update(mlp_state_dict(module, prefix=f"{role}_{module_name}_"))
    state["p_max"] = critic_pair.critic.p_max
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("wb") as handle:
            np.savez(handle, **state)
    except OSError as e:
        logger.error(f"Error writing checkpoint: {e}")
        raise OutputError(f"Could not write checkpoint {path}: {e}") from e
    return path


def load_checkpoint(path: Union[str, Path], config: ScenarioConfig) -> Tuple[ActorSet, CriticPair]:
    """Restore networks written by save_checkpoint; optimizer moments start fresh."""
    agent_cfg = config.agent
    with np.load(Path(path)) as data:
        state = {key: data[key] for key in data.files}

    def critic_from(role: str) -> CriticNetwork:
        return CriticNetwork(
            *(mlp_from_state_dict(state, prefix=f"{role}_{name}_") for name in ("state", "action", "mixed")),
            p_max=np.array(state["p_max"], dtype=float),
        )

    agents = []
    for n, (p_max, p_floor) in enumerate(zip(config.p_max, config.p_floor)):
        actor = mlp_from_state_dict(state, prefix=f"ap{n}_actor_")
        agents.append(ActorAgent(
            ap=n, p_max=float(p_max), p_floor=float(p_floor),
            local=mlp_from_state_dict(state, prefix=f"ap{n}_local_"),
            actor=actor,
            target=mlp_from_state_dict(state, prefix=f"ap{n}_target_"),
            optimizer=AdamState.for_network(actor, agent_cfg.actor_learning_rate,
                                            agent_cfg.adam_beta1, agent_cfg.adam_beta2, agent_cfg.adam_epsilon),
        ))
    critic = critic_from("critic")
    optimizers = [
        AdamState.for_network(module, agent_cfg.critic_learning_rate,
                              agent_cfg.adam_beta1, agent_cfg.adam_beta2, agent_cfg.adam_epsilon)
        for module in critic.modules()
    ]
    return ActorSet(agents), CriticPair(critic, critic_from("target_critic"), optimizers)


@dataclass
class TrainingResult:
    """Everything a training run produces."""
    actor_set: ActorSet
    critic_pair: CriticPair
    records: List[SlotRecord]
    training_log: pd.DataFrame
    diagnostics: Dict[str, int]
    first_update_slot: Optional[int]
    replacement_slots: List[int]
    timings: Dict[str, float] = field(default_factory=dict)
    experiences: List[GlobalExperience] = field(default_factory=list)

    @property
    def final_powers(self) -> np.ndarray:
        return self.records[-1].powers


def random_powers(config: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    """Uniform powers in [p_floor, p_max] for every AP."""
    return rng.uniform(config.p_floor, config.p_max)


def _mean_times(samples: Dict[str, List[float]]) -> Dict[str, float]:
    return {name: float(np.mean(values)) for name, values in samples.items() if values}


def run_training(config: ScenarioConfig, rng: np.random.Generator,
                 gains: Optional[Iterable[GainMatrix]] = None,
                 checkpoint_dir: Optional[Union[str, Path]] = None,
                 keep_experiences: bool = False) -> TrainingResult:
    """
    Run the delayed multi-agent training stage for config.train_slots slots.

    Args:
        config: Scenario and agent hyperparameters
        rng: Random stream; split into network, action, sampling and channel streams
        gains: Raw gain matrices starting at slot 0; a fresh channel is simulated when omitted
        checkpoint_dir: Where to write periodic checkpoints when agent.checkpoint_interval > 0
        keep_experiences: Also return every assembled global experience, in assembly order

    Returns:
        TrainingResult with one SlotRecord per action slot
    """
    agent_cfg = config.agent
    init_rng, action_rng, sample_rng, channel_rng = rng.spawn(4)
    if gains is None:
        gains = ChannelSimulator(config, channel_rng)

    n_aps = config.num_aps
    actor_set = ActorSet.build(config, init_rng)
    critic_pair = CriticPair.build(config, init_rng)
    env = HetNetEnvironment(config, gains, start_slot=0)
    buffer = ReplayBuffer(config.M)
    uplink = DelayLine(config.T_d)
    synchronizer = WeightSynchronizer(config.T_d)
    noise = NoiseSchedule.from_config(agent_cfg)
    clock = TrainerClock.from_config(config)
    diagnostics: Dict[str, int] = defaultdict(int)
    timing_samples: Dict[str, List[float]] = defaultdict(list)
    records: List[SlotRecord] = []
    log_rows = []
    experiences: List[GlobalExperience] = []

    logger.info(
        f"Training {n_aps} agents for {config.train_slots} slots "
        f"(T_d={config.T_d}, D={config.D}, T_u={config.T_u}, M={config.M})"
    )
    states, aux = env.reset(random_powers(config, action_rng))

    for t in range(1, config.train_slots + 1):
        clock.slot = t
        if clock.first_update is None:
            actions = random_powers(config, action_rng)
        else:
            started = time.perf_counter()
            actions = np.array([
                select_action(agent.local, states[n], noise, t, action_rng, explore=True, p_floor=agent.p_floor)
                for n, agent in enumerate(actor_set)
            ])
            timing_samples["local_forward"].append((time.perf_counter() - started) / n_aps)

        record, next_states, next_aux = env.advance(actions)
        records.append(record)
        uplink.push([
            LocalUpload(
                experience=LocalExperience(n, states[n], float(actions[n]),
                                           float(record.spectral_efficiency[n]), next_states[n], t),
                aux_prev=aux[n],
                aux_now=next_aux[n],
            )
            for n in range(n_aps)
        ], t)
        for uploads in uplink.pop_released(t):
            try:
                experience = assemble_uploads(uploads, n_aps, config.p_floor)
                buffer.push(experience)
                if keep_experiences:
                    experiences.append(experience)
            except IncompleteSlotError as e:
                diagnostics["incomplete_slots"] += 1
                logger.warning(f"Slot {t}: assembly deferred: {e}")

        row = {"slot": t, "critic_loss": np.nan}
        row.update({f"mean_action_{n + 1}": np.nan for n in range(n_aps)})
        if len(buffer) >= config.D:
            batch = buffer.sample(config.D, sample_rng)
            started = time.perf_counter()
            try:
                targets = compute_critic_targets(batch, actor_set.target_actors, critic_pair.target,
                                                 agent_cfg.discount)
                row["critic_loss"] = update_critic(critic_pair, batch, targets)
            except NumericError as e:
                diagnostics["skipped_updates"] += 1
                logger.warning(f"Slot {t}: skipping non-finite critic update: {e}")
            else:
                timing_samples["critic_update"].append(time.perf_counter() - started)
                started = time.perf_counter()
                outcome = update_actors(actor_set, critic_pair.critic, batch, agent_cfg.other_actions)
                timing_samples["actor_update"].append((time.perf_counter() - started) / n_aps)
                diagnostics["skipped_actor_updates"] += len(outcome["skipped"])
                row.update({f"mean_action_{n + 1}": a for n, a in enumerate(outcome["mean_actions"])})
                sync_targets(actor_set, critic_pair, agent_cfg.tau_actor, agent_cfg.tau_critic)
                diagnostics["updates"] += 1
                if clock.first_update is None:
                    clock.first_update = t
                    logger.info(f"Slot {t}: first critic/actor update")

        push_local_weights(actor_set, synchronizer, clock)
        if synchronizer.deliver(actor_set, t):
            logger.debug(f"Slot {t}: local networks replaced")

        row["sum_rate"] = record.sum_rate
        log_rows.append(row)
        if checkpoint_dir is not None and agent_cfg.checkpoint_interval and t % agent_cfg.checkpoint_interval == 0:
            save_checkpoint(actor_set, critic_pair, Path(checkpoint_dir) / f"checkpoint_{t:06d}.npz")
        states, aux = next_states, next_aux

    if synchronizer.replacement_slots:
        logger.info(f"First local replacement at slot {synchronizer.replacement_slots[0]}")
    logger.info(
        f"Training finished: {diagnostics['updates']} updates, "
        f"{diagnostics['skipped_updates']} skipped, {len(synchronizer.replacement_slots)} replacements"
    )
    return TrainingResult(
        actor_set=actor_set,
        critic_pair=critic_pair,
        records=records,
        training_log=pd.DataFrame(log_rows),
        diagnostics=dict(diagnostics),
        first_update_slot=clock.first_update,
        replacement_slots=list(synchronizer.replacement_slots),
        timings=_mean_times(timing_samples),
        experiences=experiences,
    )


def run_testing(actor_set: ActorSet, config: ScenarioConfig, rng: np.random.Generator,
                gains: Optional[Iterable[GainMatrix]] = None, start_slot: int = 0,
                initial_powers=None) -> List[SlotRecord]:
    """
    Run the trained local nets greedily for config.test_slots slots.

    Args:
        actor_set: Trained agents; only their local nets are used
        config: Scenario
        rng: Random stream for the channel and the bootstrap powers
        gains: Raw gain matrices starting at `start_slot`
        start_slot: Slot index of the bootstrap slot
        initial_powers: Powers of the bootstrap slot, usually the last training powers

    Returns:
        One SlotRecord per test slot
    """
    if gains is None:
        gains = ChannelSimulator(config, rng)
    if initial_powers is None:
        initial_powers = random_powers(config, rng)
    env = HetNetEnvironment(config, gains, start_slot=start_slot)
    states, _ = env.reset(initial_powers)
    noise = NoiseSchedule.from_config(config.agent)
    records = []
    for _ in range(config.test_slots):
        actions = np.array([
            select_action(agent.local, states[n], noise, env.current_slot, rng, explore=False, p_floor=agent.p_floor)
            for n, agent in enumerate(actor_set)
        ])
        record, states, _ = env.advance(actions)
        records.append(record)
    logger.info(f"Testing finished: {len(records)} slots")
    return records
