import numpy as np

from channel_model import ChannelSimulator
from experience_replay import LocalExperience, assemble_global
from network_environment import HetNetEnvironment
from scenario_config import AgentConfig, ScenarioConfig


def small_scenario(**overrides) -> ScenarioConfig:
    """Two APs with tiny networks and short stages."""
    settings = dict(
        name="small",
        ap_positions=[(0.0, 0.0), (300.0, 0.0)],
        layer_of_ap=[1, 2],
        p_max_watts=[1.0, 0.2],
        nu_min_m=[10.0, 10.0],
        nu_max_m=[200.0, 100.0],
        T_d=3,
        T_u=5,
        M=50,
        D=4,
        train_slots=30,
        test_slots=10,
        trials=2,
        agent=AgentConfig(
            actor_hidden=(8, 8),
            critic_state_hidden=(16, 16),
            critic_action_hidden=8,
            critic_mixed_hidden=8,
        ),
    )
    settings.update(overrides)
    return ScenarioConfig(**settings)


def collect_experiences(config: ScenarioConfig, slots: int, seed: int = 0):
    """Assembled global experiences from random powers on a simulated channel."""
    rng = np.random.default_rng(seed)
    env = HetNetEnvironment(config, ChannelSimulator(config, rng))
    states, aux = env.reset(config.p_max)
    experiences = []
    for t in range(1, slots + 1):
        actions = rng.uniform(config.p_floor, config.p_max)
        record, next_states, next_aux = env.advance(actions)
        local = [
            LocalExperience(n, states[n], float(actions[n]), float(record.spectral_efficiency[n]), next_states[n], t)
            for n in range(config.num_aps)
        ]
        experiences.append(assemble_global(local, aux, next_aux))
        states, aux = next_states, next_aux
    return experiences
