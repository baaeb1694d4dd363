import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rearrange.rewardkit import (
    Outcome,
    RewardComponents,
    RewardWeights,
    StageGeometry,
    StageState,
    Thresholds,
    check_termination,
    collision_flags,
    default_stage_budget,
    place_reward,
    progress_reward,
    reach_reward,
    slowdown_reward,
    smoothness_penalty,
    symmetric_yaw_error,
    time_factor,
    total_reward,
    update_stage,
)
from rearrange.worldmodel import ACTIVE, ANCHOR, OBSTACLE

THR = Thresholds()
W = RewardWeights()


def geom(d_rbt=1.0, d_ref=1.0, v=(0.0, 0.0), yaw=0.0, n=1):
    return StageGeometry(
        p_rbt=np.tile([d_rbt, 0.0], (n, 1)),
        p_act=np.zeros((n, 2)),
        p_ref=np.tile([0.0, d_ref], (n, 1)),
        v_act=np.tile(v, (n, 1)),
        yaw_err=np.full(n, yaw),
    )


def stage(n=1, T_s=250, g=0, tau=0):
    s = StageState.initial(n, T_s)
    s.g[:] = g
    s.tau[:] = tau
    return s


def test_defaults():
    assert THR.reach == 0.2
    assert (THR.align, THR.yaw, THR.vel, THR.smooth, THR.d_th, THR.v_th) == (0.10, 0.3, 0.05, 0.1, 0.5, 0.2)
    assert W.w_success == 10.0 and W.eps0 == 1e-6
    assert default_stage_budget(1000, 4) == 250
    with pytest.raises(ValueError):
        Thresholds(reach=0.0)
    with pytest.raises(ValueError):
        RewardWeights(eps0=0.0)
    with pytest.raises(ValueError):
        RewardWeights(w_rbt=math.inf)


def test_time_factor_examples():
    assert abs(time_factor(0, 250, 1e-6) - 1.0) < 1e-8
    assert time_factor(250, 250) == 0.0
    assert time_factor(125, 250) == pytest.approx(0.5, abs=1e-8)
    with pytest.raises(ValueError):
        time_factor(251, 250)


@given(st.integers(1, 5000), st.floats(1e-9, 1e-3))
def test_time_factor_endpoint_bound(T_s, eps0):
    eta0 = time_factor(0, T_s, eps0)
    assert -eps0 / (T_s + eps0) - 1e-15 <= eta0 - 1.0 <= 0.0
    taus = np.arange(0, T_s + 1)
    eta = time_factor(taus, T_s, eps0)
    assert np.all(np.diff(eta) < 0)
    assert eta[-1] == 0.0


def test_reach_reward_examples_and_latch():
    s = stage()
    assert reach_reward(geom(d_rbt=0.5), s, THR)[0] == 0.0
    assert reach_reward(geom(d_rbt=0.1), s, THR)[0] == time_factor(0, 250)
    # two-step trace: the stage machine latches, so the second step pays nothing
    g = geom(d_rbt=0.1)
    s1, _, ev = update_stage(s, g, THR, [1], np.array([[ANCHOR, ACTIVE]]))
    assert ev.reach[0] and s1.g[0] == 1 and s1.tau[0] == 1
    assert reach_reward(g, s1, THR)[0] == 0.0
    _, _, ev2 = update_stage(s1, g, THR, [1], np.array([[ANCHOR, ACTIVE]]))
    assert not ev2.reach[0]


def test_place_reward_examples():
    s = stage(g=1, tau=10)
    assert place_reward(geom(d_ref=0.0), s, THR)[0] == time_factor(10, 250)
    assert place_reward(geom(d_ref=0.0, v=(2 * THR.vel, 0)), s, THR)[0] == 0.0
    assert place_reward(geom(d_ref=0.0), stage(g=0), THR)[0] == 0.0


def test_yaw_symmetry_wrapping_examples():
    cube = math.pi / 2
    e = symmetric_yaw_error(0.49 * cube, 0.0, cube)
    assert e == pytest.approx(0.49 * cube) and abs(e) > THR.yaw
    assert symmetric_yaw_error(math.pi / 2, 0.0, cube) == pytest.approx(0.0, abs=1e-12)
    assert symmetric_yaw_error(2.0, 0.3, 0.0) == 0.0


def test_yaw_wrapping_dense_sweep_oracle():
    for period in (math.pi / 2, 2 * math.pi / 3):
        yaws = np.linspace(-3 * math.pi, 3 * math.pi, 20001)
        e = symmetric_yaw_error(yaws, 0.0, period)
        # oracle: distance to the nearest symmetric copy of the target
        k = np.arange(-20, 21)
        oracle = np.min(np.abs(yaws[:, None] - k[None] * period), axis=1)
        assert np.allclose(np.abs(e), oracle, atol=1e-9)
        assert np.all((e > -period / 2 - 1e-12) & (e <= period / 2 + 1e-12))


def test_progress_examples():
    s = stage()
    s.prev_d_rbt[:] = 1.0
    s.prev_d_ref[:] = 1.0
    assert progress_reward(geom(1.0, 1.0), s, W)[0] == 0.0
    assert progress_reward(geom(0.95, 1.0), s, W)[0] == pytest.approx(0.05)
    s.g[:] = 1
    assert progress_reward(geom(0.5, 0.9), s, W)[0] == pytest.approx(0.1)


def test_progress_telescopes_over_random_trajectories():
    rng = np.random.default_rng(0)
    w = RewardWeights(w_rbt=1.7, w_ref=0.6)
    for _ in range(1000):
        n = int(rng.integers(2, 60))
        d_rbt = rng.uniform(0, 2, n)
        d_ref = rng.uniform(0, 2, n)
        switch = int(rng.integers(1, n))
        s = stage()
        s.prev_d_rbt[:] = d_rbt[0]
        s.prev_d_ref[:] = d_ref[0]
        total = 0.0
        for t in range(1, n):
            s.g[:] = int(t > switch)
            total += progress_reward(geom(d_rbt[t], d_ref[t]), s, w)[0]
            s.prev_d_rbt[:] = d_rbt[t]
            s.prev_d_ref[:] = d_ref[t]
        oracle = w.w_rbt * (d_rbt[0] - d_rbt[switch]) + w.w_ref * (d_ref[switch] - d_ref[n - 1])
        assert abs(total - oracle) <= 1e-9


def test_progress_closed_loop_is_zero():
    rng = np.random.default_rng(1)
    d = rng.uniform(0, 2, 50)
    d[-1] = d[0]
    s = stage()
    s.prev_d_rbt[:] = d[0]
    total = 0.0
    for x in d[1:]:
        total += progress_reward(geom(x, 1.0), s, W)[0]
        s.prev_d_rbt[:] = x
    assert abs(total) <= 1e-9


def test_smoothness_examples():
    assert smoothness_penalty([0.2, 0.3], [0.2, 0.3]) == 0.0
    assert smoothness_penalty([0.5, 0.0], [0.0, 0.0]) == pytest.approx(0.0625)
    assert smoothness_penalty([0.05, 0.0], [0.0, 0.0]) == 0.0
    # signed indicator: decreases are not penalized
    assert smoothness_penalty([0.0, 0.0], [0.5, 0.0]) == 0.0
    assert smoothness_penalty([0.5, 0.6], [0.0, 0.0]) == pytest.approx(0.5**4 + 0.6**4)


def test_slowdown_examples():
    assert slowdown_reward(geom(d_ref=THR.d_th), THR)[0] == 0.0
    assert slowdown_reward(geom(d_ref=0.0), THR)[0] == 1.0
    assert slowdown_reward(geom(d_ref=0.0, v=(2 * THR.v_th, 0)), THR)[0] == -1.0
    assert slowdown_reward(geom(d_ref=0.0, v=(5 * THR.v_th, 0)), THR)[0] == -1.0


def comps(reach=False, place=False, success=False, eta_s=0.5, eta_g=0.2, progress=0.0, smooth=0.0, slow=0.0):
    a = lambda x: np.array([x])  # noqa: E731
    return RewardComponents(a(reach), a(place), a(success), a(eta_s), a(eta_g), a(progress), a(smooth), a(slow))


def test_total_reward_presets():
    c = comps(reach=True)
    assert total_reward(c, W, "swr")[0] == W.w_reach
    assert total_reward(c, W, "swr_td")[0] == pytest.approx(W.w_reach * 0.2)
    assert total_reward(c, W, "ours")[0] == pytest.approx(W.w_reach * 0.5)
    assert total_reward(c, W, "base")[0] == 0.0
    assert total_reward(comps(success=True), W, "base")[0] == W.w_success
    with pytest.raises(ValueError):
        total_reward(c, W, "nope")
    full = comps(place=True, smooth=2.0, slow=0.5, progress=0.1)
    assert total_reward(full, W, "ours")[0] == pytest.approx(W.w_place * 0.5 - W.w_smooth * 2 + W.w_slow * 0.5 + 0.1)
    assert total_reward(full, W, "ours", "reach")[0] == pytest.approx(0.1)


def _stage_trace(preset, offset, T_s=250):
    """Stage 0 takes ``offset`` steps, then stage 1 runs an identical 40-step local trace."""
    tau_local = np.arange(40)
    reach_at, place_at = 12, 35
    rewards = []
    for tau in tau_local:
        t_global = offset + tau
        c = comps(reach=tau == reach_at, place=tau == place_at, eta_s=time_factor(tau, T_s),
                  eta_g=time_factor(min(t_global, T_s), T_s))
        rewards.append(total_reward(c, W, preset)[0])
    return np.array(rewards)


def test_stage_timer_reset_asymmetry():
    ours_a, ours_b = _stage_trace("ours", 30), _stage_trace("ours", 180)
    td_a, td_b = _stage_trace("swr_td", 30), _stage_trace("swr_td", 180)
    assert np.array_equal(ours_a, ours_b)
    assert not np.array_equal(td_a, td_b)
    assert td_b.sum() < td_a.sum()
    assert np.all(ours_b >= td_b) and ours_b.sum() > td_b.sum()


def test_update_stage_bookkeeping():
    roles = np.array([[ANCHOR, ACTIVE, OBSTACLE, OBSTACLE, OBSTACLE]])
    active_ids = [1, 2, 3, 4]
    s = stage(g=1, tau=77)
    s2, r2, ev = update_stage(s, geom(d_ref=0.0), THR, active_ids, roles)
    assert ev.place[0] and not ev.success[0]
    assert s2.stage_idx[0] == 1 and s2.tau[0] == 0 and s2.g[0] == 0
    assert list(r2[0]) == [ANCHOR, OBSTACLE, ACTIVE, OBSTACLE, OBSTACLE]
    assert s2.t_global[0] == 1
    # reach: gate opens, tau keeps counting
    s3, _, ev = update_stage(stage(tau=5), geom(d_rbt=0.1), THR, active_ids, roles)
    assert ev.reach[0] and s3.g[0] == 1 and s3.tau[0] == 6
    # final stage place: success, no advance
    s4 = stage(g=1)
    s4.stage_idx[:] = 3
    s5, r5, ev = update_stage(s4, geom(d_ref=0.0), THR, active_ids, roles)
    assert ev.success[0] and s5.stage_idx[0] == 3


def test_one_reward_per_stage_event():
    rng = np.random.default_rng(2)
    roles = np.array([[ANCHOR, ACTIVE]])
    s = stage()
    reach_count = place_count = 0
    for _ in range(200):
        g = geom(d_rbt=rng.uniform(0, 0.4), d_ref=rng.uniform(0, 0.2))
        reach_count += reach_reward(g, s, THR)[0] > 0
        place_count += place_reward(g, s, THR)[0] > 0
        s, roles, ev = update_stage(s, g, THR, [1], roles)
        if ev.success[0]:
            break
    assert reach_count == 1 and place_count <= 1


def test_termination_examples():
    T = dict(arena_radius=1.5, T_s=250, episode_limit=1000)
    out = check_termination([False], [[1.6, 0, 0]], collision=[False], tau=[3], t_global=[3], **T)
    assert out[0] == Outcome.OUTSIDE
    out = check_termination([False], [[0, 0, 0]], collision=[True], tau=[3], t_global=[3], **T)
    assert out[0] == Outcome.COLLISION
    out = check_termination([False], [[0, 0, 0]], collision=[False], tau=[250], t_global=[300], **T)
    assert out[0] == Outcome.STAGE_TIMEOUT
    out = check_termination([False], [[0, 0, 0]], collision=[False], tau=[100], t_global=[1000], **T)
    assert out[0] == Outcome.EPISODE_TIMEOUT
    out = check_termination([False], [[0, 0, 0]], collision=[False], tau=[250], t_global=[1000], **T)
    assert out[0] == Outcome.EPISODE_TIMEOUT
    out = check_termination([False], [[0, 0, 0]], collision=[False], tau=[3], t_global=[3], **T)
    assert out[0] == Outcome.RUNNING


def test_termination_precedence():
    T = dict(arena_radius=1.5, T_s=250, episode_limit=1000)
    out = check_termination([True, False, False], [[2, 0, 0]] * 3, collision=[True, True, False],
                            tau=[250] * 3, t_global=[10] * 3, **T)
    assert list(out) == [Outcome.SUCCESS, Outcome.COLLISION, Outcome.OUTSIDE]
    assert Outcome(3).label == "Collision"


def test_collision_flags_roles():
    roles = np.array([[ANCHOR, ACTIVE, OBSTACLE]])
    f = np.zeros((1, 4, 4), bool)
    f[0, 2, 3] = f[0, 3, 2] = True  # active touches obstacle
    assert collision_flags(f, roles)[0]
    f[:] = False
    f[0, 0, 2] = f[0, 2, 0] = True  # robot pushes active
    assert not collision_flags(f, roles)[0]
    f[0, 0, 3] = f[0, 3, 0] = True  # robot touches obstacle
    assert collision_flags(f, roles)[0]
    f[:] = False
    f[0, 1, 2] = f[0, 2, 1] = True  # active resting against the anchor
    assert not collision_flags(f, roles)[0]


def test_collision_exemption_only_masks_robot_contact():
    roles = np.array([[ANCHOR, OBSTACLE, ACTIVE]])
    f = np.zeros((1, 4, 4), bool)
    f[0, 0, 2] = f[0, 2, 0] = True  # pusher resting on the just-placed box
    exempt = np.array([[False, True, False]])
    assert collision_flags(f, roles)[0]
    assert not collision_flags(f, roles, exempt)[0]
    f[0, 3, 2] = f[0, 2, 3] = True  # new active box hits it: still a collision
    assert collision_flags(f, roles, exempt)[0]
