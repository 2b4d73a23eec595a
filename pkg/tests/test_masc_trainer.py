import numpy as np
import pandas as pd
import pytest

from masc_trainer import (
    ActorSet,
    CriticPair,
    NoiseSchedule,
    TrainerClock,
    WeightSynchronizer,
    actor_gradients,
    actor_objective,
    compute_critic_targets,
    critic_backward,
    critic_forward,
    load_checkpoint,
    push_local_weights,
    run_testing,
    run_training,
    save_checkpoint,
    select_action,
    sync_targets,
    update_actors,
    update_critic,
)
from neural_numerics import mlp_forward
from network_environment import preprocess_features
from simulation_errors import ConfigurationError
from tests.helpers import collect_experiences, small_scenario


def initial_actor_set(config, seed):
    """The actor set run_training builds for the same seed."""
    init_rng = np.random.default_rng(seed).spawn(4)[0]
    return ActorSet.build(config, init_rng)


def assert_same_parameters(a, b):
    for pa, pb in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(pa, pb)


def test_network_widths_and_neuron_counts(scenario, rng):
    actor_set = ActorSet.build(scenario, rng)
    critic_pair = CriticPair.build(scenario, rng)
    assert critic_pair.critic.state_module.input_dim == 7 * 2 + 2 ** 2
    assert critic_pair.critic.action_module.input_dim == 2
    assert critic_pair.num_aps == 2
    assert actor_set.neuron_count() == 7 + 8 + 8 + 1 + 1
    assert critic_pair.neuron_count() == 18 + 2 + 16 + 16 + 8 + 8 + 1


def test_targets_start_as_copies(scenario, rng):
    actor_set = ActorSet.build(scenario, rng)
    critic_pair = CriticPair.build(scenario, rng)
    for agent in actor_set:
        assert_same_parameters(agent.target, agent.actor)
    for target, online in zip(critic_pair.target.modules(), critic_pair.critic.modules()):
        assert_same_parameters(target, online)


def test_noise_schedule():
    noise = NoiseSchedule()
    assert noise.std(0) == pytest.approx(np.sqrt(2.0))
    assert noise.std(1) == pytest.approx(np.sqrt(2.0) * 0.9995)
    assert noise.std(100000) == 0.01


def test_trainer_clock_phases_and_push_slots():
    clock = TrainerClock(T_d=3, D=4, T_u=5)
    assert (clock.nominal_first_update, clock.nominal_first_replacement) == (7, 15)
    clock.slot = 9
    assert clock.phase == "random-accumulation"
    assert not clock.is_push_slot()
    clock.first_update = 7
    assert clock.phase == "training"
    clock.slot = 15
    assert clock.phase == "steady"
    pushes = []
    for t in range(7, 23):
        clock.slot = t
        if clock.is_push_slot():
            pushes.append(t)
    assert pushes == [12, 17, 22]


def test_select_action_bounds(scenario, rng):
    agent = ActorSet.build(scenario, rng)[1]
    state = collect_experiences(scenario, 1)[0].states[1]
    greedy = select_action(agent.local, state, NoiseSchedule(), 0, rng, explore=False, p_floor=agent.p_floor)
    expected, _ = mlp_forward(agent.local, preprocess_features(state))
    assert greedy == pytest.approx(float(np.clip(expected[0], agent.p_floor, agent.p_max)))

    loud = NoiseSchedule(initial_variance=1e12, decay=1.0, floor_std=0.0)
    draws = {select_action(agent.local, state, loud, 0, rng, p_floor=agent.p_floor) for _ in range(50)}
    assert draws == {agent.p_floor, agent.p_max}


def test_zero_discount_targets_are_rewards(scenario, rng):
    batch = collect_experiences(scenario, 4)
    actor_set = ActorSet.build(scenario, rng)
    critic_pair = CriticPair.build(scenario, rng)
    targets = compute_critic_targets(batch, actor_set.target_actors, critic_pair.target, 0.0)
    np.testing.assert_array_equal(targets, [exp.reward_sum for exp in batch])


def test_discounted_targets_use_target_actors(scenario, rng):
    batch = collect_experiences(scenario, 3)
    actor_set = ActorSet.build(scenario, rng)
    critic_pair = CriticPair.build(scenario, rng)
    targets = compute_critic_targets(batch, actor_set.target_actors, critic_pair.target, 0.5)
    for exp, y in zip(batch, targets):
        next_actions = [
            mlp_forward(agent.target, preprocess_features(s))[0][0]
            for agent, s in zip(actor_set, exp.next_states)
        ]
        q, _ = critic_forward(critic_pair.target, exp.next_state_features(), next_actions)
        assert y == pytest.approx(exp.reward_sum + 0.5 * q[0], rel=1e-10)


def test_update_critic_returns_mean_squared_residual(scenario, rng):
    batch = collect_experiences(scenario, 4)
    critic_pair = CriticPair.build(scenario, rng)
    targets = np.array([exp.reward_sum for exp in batch])
    q, _ = critic_forward(critic_pair.critic, np.stack([e.state_features() for e in batch]),
                          np.stack([e.actions for e in batch]))
    before = critic_pair.critic.copy()
    loss = update_critic(critic_pair, batch, targets)
    assert loss == pytest.approx(np.mean((q - targets) ** 2), rel=1e-12)
    assert any(
        not np.array_equal(p, b)
        for new, old in zip(critic_pair.critic.modules(), before.modules())
        for p, b in zip(new.parameters(), old.parameters())
    )


def test_critic_action_gradient_matches_finite_differences(scenario, rng):
    batch = collect_experiences(scenario, 3)
    critic = CriticPair.build(scenario, rng).critic
    features = np.stack([e.state_features() for e in batch])
    actions = np.stack([e.actions for e in batch])
    q, cache = critic_forward(critic, features, actions)
    _, action_grad = critic_backward(critic, cache, np.ones(len(batch)))
    for n in range(2):
        step = 1e-6 * scenario.p_max[n]
        shifted = actions.copy()
        shifted[:, n] += step
        q_up, _ = critic_forward(critic, features, shifted)
        shifted[:, n] -= 2 * step
        q_down, _ = critic_forward(critic, features, shifted)
        np.testing.assert_allclose(action_grad[:, n], (q_up - q_down) / (2 * step), rtol=1e-4, atol=1e-6)


def test_actor_step_raises_critic_objective():
    base = small_scenario()
    config = small_scenario(agent=base.agent.model_copy(update={"actor_learning_rate": 1e-6}))
    rng = np.random.default_rng(21)
    batch = collect_experiences(config, 6)
    actor_set = ActorSet.build(config, rng)
    critic = CriticPair.build(config, rng).critic
    before = actor_objective(actor_set, critic, batch)
    outcome = update_actors(actor_set, critic, batch, "online")
    assert outcome["skipped"] == []
    assert outcome["mean_actions"].shape == (2,)
    assert actor_objective(actor_set, critic, batch) > before


def test_actor_steps_never_lower_the_objective():
    base = small_scenario()
    config = small_scenario(agent=base.agent.model_copy(update={"actor_learning_rate": 1e-7}))
    raised = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        batch = collect_experiences(config, 4, seed=seed)
        actor_set = ActorSet.build(config, rng)
        critic = CriticPair.build(config, rng).critic
        before = actor_objective(actor_set, critic, batch)
        update_actors(actor_set, critic, batch, "online")
        after = actor_objective(actor_set, critic, batch)
        assert after >= before - 1e-8
        raised += after > before
    assert raised > 0


def test_actor_gradients_match_objective_finite_differences(scenario):
    rng = np.random.default_rng(22)
    batch = collect_experiences(scenario, 5, seed=3)
    actor_set = ActorSet.build(scenario, rng)
    critic = CriticPair.build(scenario, rng).critic
    gradients, online_actions = actor_gradients(actor_set, critic, batch, "online")
    assert online_actions.shape == (5, 2)
    step = 1e-6
    for agent, grads in zip(actor_set, gradients):
        for param, analytic in zip(agent.actor.parameters(), grads.arrays()):
            flat, flat_grad = param.reshape(-1), analytic.reshape(-1)
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + step
                up = actor_objective(actor_set, critic, batch)
                flat[i] = original - step
                down = actor_objective(actor_set, critic, batch)
                flat[i] = original
                numeric = (up - down) / (2 * step)
                # gradients are of the negated objective
                assert -flat_grad[i] == pytest.approx(numeric, rel=1e-3, abs=1e-7)


def test_critic_parameter_gradients_match_finite_differences(scenario, rng):
    batch = collect_experiences(scenario, 4, seed=5)
    critic = CriticPair.build(scenario, rng).critic
    features = np.stack([e.state_features() for e in batch])
    actions = np.stack([e.actions for e in batch])
    _, cache = critic_forward(critic, features, actions)
    module_grads, _ = critic_backward(critic, cache, np.ones(len(batch)))
    step = 1e-6

    def total_q():
        return float(np.sum(critic_forward(critic, features, actions)[0]))

    for module, grads in zip(critic.modules(), module_grads):
        for param, analytic in zip(module.parameters(), grads.arrays()):
            flat, flat_grad = param.reshape(-1), analytic.reshape(-1)
            for i in rng.choice(flat.size, size=min(flat.size, 15), replace=False):
                original = flat[i]
                flat[i] = original + step
                up = total_q()
                flat[i] = original - step
                down = total_q()
                flat[i] = original
                assert flat_grad[i] == pytest.approx((up - down) / (2 * step), rel=1e-3, abs=1e-6)


def test_logged_mode_updates_every_actor(scenario, rng):
    batch = collect_experiences(scenario, 4)
    actor_set = ActorSet.build(scenario, rng)
    before = [agent.actor.copy() for agent in actor_set]
    critic = CriticPair.build(scenario, rng).critic
    outcome = update_actors(actor_set, critic, batch, "logged")
    assert outcome["skipped"] == []
    for agent, old in zip(actor_set, before):
        assert any(not np.array_equal(p, q) for p, q in zip(agent.actor.parameters(), old.parameters()))


def test_update_actors_rejects_unknown_mode(scenario, rng):
    batch = collect_experiences(scenario, 2)
    actor_set = ActorSet.build(scenario, rng)
    critic = CriticPair.build(scenario, rng).critic
    with pytest.raises(ConfigurationError):
        update_actors(actor_set, critic, batch, "stale")


def test_sync_targets_extremes(scenario, rng):
    actor_set = ActorSet.build(scenario, rng)
    critic_pair = CriticPair.build(scenario, rng)
    batch = collect_experiences(scenario, 4)
    update_critic(critic_pair, batch, [e.reward_sum for e in batch])
    update_actors(actor_set, critic_pair.critic, batch)
    frozen = [agent.target.copy() for agent in actor_set]
    sync_targets(actor_set, critic_pair, 0.0, 0.0)
    for agent, old in zip(actor_set, frozen):
        assert_same_parameters(agent.target, old)
    sync_targets(actor_set, critic_pair, 1.0, 1.0)
    for agent in actor_set:
        assert_same_parameters(agent.target, agent.actor)
    for target, online in zip(critic_pair.target.modules(), critic_pair.critic.modules()):
        assert_same_parameters(target, online)


def test_weight_synchronizer_delivers_after_delay(scenario, rng):
    actor_set = ActorSet.build(scenario, rng)
    initial_local = [agent.local.copy() for agent in actor_set]
    synchronizer = WeightSynchronizer(3)
    clock = TrainerClock(T_d=3, D=4, T_u=5, slot=12, first_update=7)
    assert push_local_weights(actor_set, synchronizer, clock) == 15
    for t in (13, 14):
        assert not synchronizer.deliver(actor_set, t)
    for agent, local in zip(actor_set, initial_local):
        assert_same_parameters(agent.local, local)
    assert synchronizer.deliver(actor_set, 15)
    for agent in actor_set:
        assert_same_parameters(agent.local, agent.actor)
    assert synchronizer.replacement_slots == [15]


def test_training_timeline():
    config = small_scenario(T_d=3, D=4, T_u=5, train_slots=20)
    result = run_training(config, np.random.default_rng(3))
    assert result.first_update_slot == 7
    assert result.replacement_slots == [15, 20]
    assert len(result.records) == 20
    assert [r.slot for r in result.records] == list(range(1, 21))
    log = result.training_log
    assert log["critic_loss"].iloc[:6].isna().all()
    assert log["critic_loss"].iloc[6:].notna().all()
    assert result.diagnostics["updates"] == 14
    assert {"slot", "critic_loss", "mean_action_1", "mean_action_2", "sum_rate"} <= set(log.columns)


def test_local_nets_untouched_until_first_replacement():
    config = small_scenario(T_d=3, D=4, T_u=5, train_slots=14)
    initial = initial_actor_set(config, 8)
    result = run_training(config, np.random.default_rng(8))
    assert result.replacement_slots == []
    for agent, start in zip(result.actor_set, initial):
        assert_same_parameters(agent.local, start.local)

    longer = run_training(small_scenario(T_d=3, D=4, T_u=5, train_slots=15), np.random.default_rng(8))
    assert longer.replacement_slots == [15]
    assert any(
        not np.array_equal(p, q)
        for agent, start in zip(longer.actor_set, initial)
        for p, q in zip(agent.local.parameters(), start.local.parameters())
    )


def test_training_is_deterministic_per_seed():
    config = small_scenario()
    a = run_training(config, np.random.default_rng(17))
    b = run_training(config, np.random.default_rng(17))
    pd.testing.assert_frame_equal(a.training_log, b.training_log)
    np.testing.assert_array_equal(a.final_powers, b.final_powers)


def test_batch_larger_than_buffer_never_trains():
    config = small_scenario(D=60, M=50)
    result = run_training(config, np.random.default_rng(4))
    assert result.first_update_slot is None
    assert result.replacement_slots == []
    assert result.training_log["critic_loss"].isna().all()
    for record in result.records:
        assert np.all(record.powers >= config.p_floor)
        assert np.all(record.powers <= config.p_max)


def test_periodic_checkpoints(tmp_path):
    base = small_scenario()
    config = small_scenario(train_slots=20, agent=base.agent.model_copy(update={"checkpoint_interval": 10}))
    run_training(config, np.random.default_rng(2), checkpoint_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["checkpoint_000010.npz", "checkpoint_000020.npz"]


def test_checkpoint_round_trip(scenario, rng, tmp_path):
    actor_set = ActorSet.build(scenario, rng)
    critic_pair = CriticPair.build(scenario, rng)
    path = save_checkpoint(actor_set, critic_pair, tmp_path / "ckpt" / "nets.npz")
    restored_actors, restored_critic = load_checkpoint(path, scenario)
    for agent, restored in zip(actor_set, restored_actors):
        for role in ("local", "actor", "target"):
            assert_same_parameters(getattr(agent, role), getattr(restored, role))
    for module, restored in zip(critic_pair.critic.modules(), restored_critic.critic.modules()):
        assert_same_parameters(module, restored)
    np.testing.assert_array_equal(restored_critic.critic.p_max, scenario.p_max)


def test_testing_stage_runs_greedy_local_nets(scenario):
    trained = run_training(scenario, np.random.default_rng(6))
    a = run_testing(trained.actor_set, scenario, np.random.default_rng(9), start_slot=30,
                    initial_powers=trained.final_powers)
    b = run_testing(trained.actor_set, scenario, np.random.default_rng(9), start_slot=30,
                    initial_powers=trained.final_powers)
    assert len(a) == scenario.test_slots
    assert a[0].slot == 31
    for ra, rb in zip(a, b):
        np.testing.assert_array_equal(ra.powers, rb.powers)
        assert np.all(ra.powers <= scenario.p_max)
        assert np.all(ra.powers >= scenario.p_floor)
