import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ltom.env import (
    AGENTS,
    LEFT,
    RIGHT,
    EnvConfig,
    ExpertConfig,
    PushTState,
    contact_point,
    expert_action,
    gen_dataset,
    in_contact,
    metrics,
    mirror_state,
    observe,
    read_dataset,
    reset,
    run_expert,
    step,
    wrap_angle,
    write_dataset,
)
from ltom.env.expert import expert_plan
from ltom.env.pusht import heading, lateral

CFG = EnvConfig()


def _at_faces(cfg=CFG, theta=math.pi / 2):
    """Block at the centre with both pushers exactly on their contact points."""
    block = np.array([0.5, 0.4, theta])
    pushers = np.stack([contact_point(block, cfg, a) for a in AGENTS])
    return PushTState(block=block, goal=np.array([0.5, 0.8, theta]), pushers=pushers)


def test_wrap_angle_range():
    assert wrap_angle(math.pi) == math.pi
    assert wrap_angle(-math.pi) == math.pi
    assert wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)
    w = wrap_angle(np.linspace(-20, 20, 101))
    assert np.all((w > -math.pi) & (w <= math.pi))


def test_config_validation():
    with pytest.raises(ValueError):
        EnvConfig(g_left=0.0)
    with pytest.raises(ValueError):
        EnvConfig(sigma_con=-0.1)


def test_reset_layout_is_deterministic_and_in_bounds():
    for seed in range(50):
        s = reset(CFG, seed)
        assert s.block.tobytes() == reset(CFG, seed).block.tobytes()
        assert abs(wrap_angle(s.block[2] - CFG.nominal_heading)) <= CFG.heading_jitter
        assert s.goal[2] == s.block[2]  # keep the initial orientation
        assert np.all((s.goal[:2] >= 0) & (s.goal[:2] <= 1)) and np.all((s.pushers >= 0) & (s.pushers <= 1))
        assert not any(in_contact(s, CFG, a) for a in AGENTS) or CFG.home_gap <= CFG.contact_radius


def test_equal_pushes_do_not_rotate():
    s = _at_faces()
    a = np.array([0.0, 0.01])
    nxt = step(s, CFG, a, a)
    assert nxt.block[2] == s.block[2]
    np.testing.assert_allclose(nxt.block[:2], s.block[:2] + [0.0, 0.01], atol=1e-15)


def test_single_pusher_rotation_formula():
    cfg = replace(CFG, g_left=0.7)
    s = _at_faces(cfg)
    d = 0.01
    nxt = step(s, cfg, np.array([0.0, d]), np.zeros(2))
    assert nxt.block[2] - s.block[2] == pytest.approx(cfg.kappa * d * 0.7, rel=1e-12)
    nxt = step(s, cfg, np.zeros(2), np.array([0.0, d]))
    assert nxt.block[2] - s.block[2] == pytest.approx(-cfg.kappa * d, rel=1e-12)


def test_asymmetric_gains_rotate_per_step():
    cfg = CFG.with_gains(1.0, 0.5)
    s = _at_faces(cfg)
    d = 0.01
    nxt = step(s, cfg, np.array([0.0, d]), np.array([0.0, d]))
    assert nxt.block[2] - s.block[2] == pytest.approx(cfg.kappa * 0.5 * d, rel=1e-12)


def test_open_loop_straight_push_drift_matches_simulation():
    # equal straight pushes under OOD gains: the heading drifts every step the pushers stay in contact
    cfg = CFG.with_gains(1.0, 0.5)
    s = _at_faces(cfg)
    deltas = []
    for _ in range(10):
        f = heading(s.block[2])
        prev = s.block[2]
        s = step(s, cfg, 0.01 * f, 0.01 * f)
        deltas.append(s.block[2] - prev)
    assert deltas[0] == pytest.approx(cfg.kappa * 0.5 * 0.01, rel=1e-12)
    # counter-clockwise drift from the stronger left push; it compounds once the faces tilt
    assert all(d > 0 for d in deltas)
    assert sum(deltas) >= 10 * cfg.kappa * 0.5 * 0.01 - 1e-12


def test_clamped_actions_and_walls():
    s = _at_faces()
    nxt = step(s, CFG, np.array([0.0, 1.0]), np.array([0.0, 1.0]))
    np.testing.assert_array_equal(nxt.last_actions, [[0.0, CFG.a_max], [0.0, CFG.a_max]])
    far = PushTState(block=np.array([0.5, 0.999, math.pi / 2]), goal=np.zeros(3),
                     pushers=np.stack([contact_point(np.array([0.5, 0.999, math.pi / 2]), CFG, a) for a in AGENTS]))
    hit = step(far, CFG, np.array([0.0, 0.02]), np.array([0.0, 0.02]))
    assert hit.block[1] == 1.0 and hit.wall_hits >= 1


def test_out_of_contact_pusher_does_not_move_block():
    s = _at_faces()
    s = replace(s, pushers=s.pushers - 0.2 * heading(s.block[2]))
    nxt = step(s, CFG, np.array([0.0, 0.01]), np.array([0.0, 0.01]))
    np.testing.assert_array_equal(nxt.block, s.block)


def test_pusher_behind_face_first_closes_the_gap():
    s = _at_faces()
    f = heading(s.block[2])
    s = replace(s, pushers=s.pushers - 0.004 * f)
    nxt = step(s, CFG, 0.01 * f, 0.01 * f)
    np.testing.assert_allclose(nxt.block[:2] - s.block[:2], 0.006 * f, atol=1e-15)


@given(st.integers(0, 10_000), st.lists(st.floats(-0.02, 0.02), min_size=4, max_size=4))
def test_step_is_bitwise_deterministic(seed, a):
    s = reset(CFG, seed)
    x = step(s, CFG, a[:2], a[2:])
    y = step(s, CFG, a[:2], a[2:])
    assert x.block.tobytes() == y.block.tobytes() and x.pushers.tobytes() == y.pushers.tobytes()


def _mirror_action(a):
    return np.array([-a[0], a[1]])


def test_mirror_symmetry_of_whole_trajectory():
    cfg = replace(CFG, sigma_con=0.0)
    for seed in range(5):
        s = reset(cfg, seed)
        m = mirror_state(s)
        rng = np.random.default_rng(seed)
        for _ in range(40):
            a = rng.uniform(-0.02, 0.02, (2, 2))
            a[:, 1] = np.abs(a[:, 1])
            s = step(s, cfg, a[0], a[1])
            m = step(m, cfg, _mirror_action(a[1]), _mirror_action(a[0]))
            want = mirror_state(s)
            np.testing.assert_allclose(m.block[:2], want.block[:2], rtol=0, atol=1e-12)
            assert abs(wrap_angle(m.block[2] - want.block[2])) <= 1e-12
            np.testing.assert_allclose(m.pushers, want.pushers, rtol=0, atol=1e-12)


def test_mirror_is_an_involution():
    s = reset(CFG, 3)
    back = mirror_state(mirror_state(s))
    np.testing.assert_allclose(back.block, s.block, atol=1e-15)
    np.testing.assert_allclose(back.pushers, s.pushers, atol=1e-15)


def test_observation_split_and_noise():
    s = reset(CFG, 0)
    o0 = observe(s, CFG, LEFT, np.random.default_rng(1))
    o1 = observe(s, CFG, RIGHT, np.random.default_rng(2))
    assert o0.ego.shape == (5,) and o0.con.shape == (8,)
    np.testing.assert_array_equal(o0.ego[:2], s.pushers[LEFT])
    assert not np.array_equal(o0.con, o1.con)  # independent per-agent noise
    exact = observe(s, replace(CFG, sigma_con=0.0), LEFT, np.random.default_rng(1)).con
    np.testing.assert_allclose(exact, [s.block[0], s.block[1], math.sin(s.block[2]), math.cos(s.block[2]),
                                       s.goal[0], s.goal[1], math.sin(s.goal[2]), math.cos(s.goal[2])])
    with pytest.raises(KeyError):
        observe(s, CFG, 2, np.random.default_rng(0))


def test_metrics_literals_and_boundaries():
    s = reset(CFG, 0)
    at_goal = replace(s, block=s.goal.copy())
    assert metrics(at_goal, CFG) == {"trans_err": 0.0, "rot_err": 0.0, "success": True}
    turned = replace(s, block=s.goal + [0, 0, math.pi / 2])
    m = metrics(turned, CFG)
    assert m["rot_err"] == pytest.approx(math.pi / 2) and not m["success"]
    f = heading(s.goal[2])
    inside = replace(s, block=np.array([*(s.goal[:2] + (0.03 - 1e-9) * f), s.goal[2]]))
    outside = replace(s, block=np.array([*(s.goal[:2] + (0.03 + 1e-9) * f), s.goal[2]]))
    assert metrics(inside, CFG)["success"] and not metrics(outside, CFG)["success"]
    rot_in = replace(s, block=np.array([*s.goal[:2], s.goal[2] + 0.1 - 1e-9]))
    rot_out = replace(s, block=np.array([*s.goal[:2], s.goal[2] + 0.1 + 1e-9]))
    assert metrics(rot_in, CFG)["success"] and not metrics(rot_out, CFG)["success"]


# -- expert ------------------------------------------------------------------------


def test_expert_idle_at_goal():
    s = reset(CFG, 4)
    a_u, a_v = expert_action(replace(s, block=s.goal.copy()), CFG)
    assert np.abs(a_u).max() < 1e-3 * CFG.a_max and np.abs(a_v).max() < 1e-3 * CFG.a_max


def test_expert_actions_mirror_about_block_axis():
    # with the block axis on a world axis the per-component clamp commutes with the mirror
    rng = np.random.default_rng(0)
    for _ in range(10):
        s = _at_faces()
        off = rng.uniform(-0.03, 0.03, 2)
        s = replace(s, pushers=s.pushers + np.array([off, [-off[0], off[1]]]))
        a_u, a_v = expert_action(s, CFG)
        f, l = heading(s.block[2]), lateral(s.block[2])
        assert a_u @ f == pytest.approx(a_v @ f, abs=1e-15)
        assert a_u @ l == pytest.approx(-(a_v @ l), abs=1e-15)


def test_symmetric_expert_never_rotates_and_succeeds():
    ok = 0
    for seed in range(200):
        _, final, dth = run_expert(CFG, seed, record=False)
        assert np.max(np.abs(dth)) <= 1e-12
        m = metrics(final, CFG)
        ok += m["trans_err"] < 0.02 and m["rot_err"] < 0.02
    assert ok / 200 >= 0.95


def test_expert_plan_matches_the_noise_free_rollout():
    ep, _, _ = run_expert(CFG, 11, ExpertConfig(), noise=0.0)
    n = len(ep)
    for t in (0, 5, n - 3):
        for k in range(min(8, n - t)):
            np.testing.assert_allclose(ep.plan[:, t, k], ep.act[:, t + k], atol=1e-15)


def test_expert_plan_from_a_state():
    s = reset(CFG, 2)
    plan = expert_plan(s, CFG, ExpertConfig(), 5)
    a = expert_action(s, CFG)
    np.testing.assert_array_equal(plan[:, 0], np.stack(a))


def test_noisy_demo_labels_stay_clean():
    ep, _, _ = run_expert(CFG, 3, ExpertConfig(), noise=0.25)
    # the label at each step is what the expert commands from the visited state
    assert ep.act.shape[0] == 2 and np.all(np.abs(ep.act) <= CFG.a_max)
    np.testing.assert_array_equal(ep.plan[:, :, 0], ep.act)


def test_dataset_round_trip_and_checksum(tmp_path):
    ds = gen_dataset(CFG, 3, seed=5)
    assert len(ds.episodes) == 3
    d1 = write_dataset(ds, tmp_path / "a.jsonl")
    d2 = write_dataset(gen_dataset(CFG, 3, seed=5), tmp_path / "b.jsonl")
    assert d1 == d2
    back, header = read_dataset(tmp_path / "a.jsonl")
    assert header["n_episodes"] == 3 and header["env"]["g_left"] == header["env"]["g_right"]
    for a, b in zip(ds.episodes, back.episodes):
        assert a.seed == b.seed
        np.testing.assert_array_equal(a.con, b.con)
        np.testing.assert_array_equal(a.act, b.act)
        np.testing.assert_array_equal(a.plan, b.plan)
    assert back.config == ds.config


def test_dataset_requires_symmetric_gains():
    with pytest.raises(ValueError):
        gen_dataset(CFG.with_gains(1.0, 0.5), 1, 0)


def test_dataset_counts_discards():
    # a tiny step budget makes most episodes fail; they are resampled and counted
    ds = gen_dataset(replace(CFG, max_steps=24), 2, seed=0)
    assert len(ds.episodes) == 2 and ds.n_discarded > 0


def test_dataset_gives_up_when_the_expert_cannot_succeed():
    with pytest.raises(ValueError, match="expert failed"):
        gen_dataset(replace(CFG, max_steps=5), 1, seed=0)


def test_expert_waits_out_a_frozen_partner():
    # the right pusher holds still for 20 steps mid-push; the expert still finishes
    ex = ExpertConfig()
    for seed in range(20):
        state = reset(CFG, seed)
        for t in range(CFG.max_steps):
            a_u, a_v = expert_action(state, CFG, ex)
            if 12 <= t < 32:
                a_v = np.zeros(2)
            state = step(state, CFG, a_u, a_v)
        assert metrics(state, CFG)["success"]


def test_collection_stalls_hold_one_pusher_still():
    ex = replace(ExpertConfig(), stall_prob=1.0, stall_max=300)
    ep, final, _ = run_expert(CFG, 4, ex, noise=0.25)
    # a stall starts on the first step; the stalled pusher never moves while it lasts
    still = [bool(np.all(ep.ego[i, :, :2] == ep.ego[i, 0, :2])) for i in (0, 1)]
    assert any(still) and not all(still)
    no_stall = replace(ex, stall_prob=0.0)
    ep0, _, _ = run_expert(CFG, 4, no_stall, noise=0.25)
    assert not np.array_equal(ep0.ego[:, :5], ep.ego[:, :5])
