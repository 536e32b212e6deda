"""Trajectory synthesis, FK labeling, windowing, and family presets."""

import numpy as np
import pytest

from actionhead import kinematics as kin
from actionhead import trajgen
from actionhead.dataset import dataset_bytes


@pytest.fixture(scope="module")
def chain():
    return kin.load_chain("planar3")


@pytest.fixture(scope="module")
def families():
    return trajgen.in_distribution_families()


# ---------------------------------------------------------------------------
# minimum-jerk profile
# ---------------------------------------------------------------------------

def test_profile_boundary_values():
    s = trajgen.min_jerk_profile(np.array([0.0, 0.5, 1.0]))
    assert np.allclose(s, [0.0, 0.5, 1.0])


def test_profile_monotone_with_peak_slope_at_center():
    u = np.linspace(0, 1, 10001)
    s = trajgen.min_jerk_profile(u)
    ds = np.diff(s) / np.diff(u)
    assert np.all(np.diff(s) >= 0)
    assert np.isclose(ds.max(), 15.0 / 8.0, atol=1e-3)
    assert np.argmax(ds) == len(ds) // 2 or abs(u[np.argmax(ds)] - 0.5) < 1e-3
    # velocity dies off at the ends
    assert ds[0] < 1e-3 and ds[-1] < 1e-3


def test_equal_via_points_give_constant_trajectory():
    v = np.array([[0.3, -0.2, 0.5]])
    traj = trajgen.interpolate_via_points(np.vstack([v, v]), [1.0], dt=0.1)
    assert np.allclose(traj.steps, v, atol=1e-7)


def test_via_points_hit_exactly():
    rng = np.random.default_rng(0)
    vias = rng.uniform(-1, 1, size=(4, 3))
    durations = [1.0, 0.8, 1.2]
    traj = trajgen.interpolate_via_points(vias, durations, dt=0.1)
    steps64 = traj.steps.astype(np.float64)
    assert np.allclose(steps64[0], vias[0], atol=1e-6)
    assert np.allclose(steps64[-1], vias[-1], atol=1e-6)
    # interior via points appear at segment boundaries
    idx = 0
    for t_seg, via in zip(durations, vias[1:]):
        idx += max(2, round(t_seg / 0.1))
        assert np.allclose(steps64[idx], via, atol=1e-6)


def test_peak_step_bound():
    rng = np.random.default_rng(1)
    dt = 0.1
    for _ in range(20):
        a, b = rng.uniform(-2, 2, size=(2, 3))
        t_seg = float(rng.integers(5, 25)) * dt  # exact multiple of dt
        traj = trajgen.interpolate_via_points(np.vstack([a, b]), [t_seg], dt=dt)
        deltas = np.abs(np.diff(traj.steps.astype(np.float64), axis=0))
        bound = (15.0 / 8.0) * np.abs(b - a) / t_seg * dt
        assert np.all(deltas <= bound * (1 + 1e-6) + 1e-12)


def test_second_differences_bounded():
    # peak acceleration of the quintic is 10/sqrt(3) * range / T^2
    dt = 0.05
    a = np.array([0.0, 0.0, 0.0])
    b = np.array([1.0, -2.0, 0.5])
    t_seg = 1.0
    traj = trajgen.interpolate_via_points(np.vstack([a, b]), [t_seg], dt=dt)
    dd = np.abs(np.diff(traj.steps.astype(np.float64), n=2, axis=0))
    bound = (10.0 / np.sqrt(3.0)) * np.abs(b - a) / t_seg**2 * dt * dt
    assert np.all(dd <= bound * 1.02 + 1e-12)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def test_sampled_trajectory_respects_box_and_limits(chain):
    rng = np.random.default_rng(2)
    fam = trajgen.FamilySpec(name="box", q_lo=np.array([-0.4, -0.8, -0.6]),
                             q_hi=np.array([0.9, 0.8, 0.6]))
    for _ in range(10):
        traj = trajgen.sample_trajectory(chain, fam, rng)
        lo = np.maximum(fam.q_lo, chain.joint_limits[:, 0]) - 1e-6
        hi = np.minimum(fam.q_hi, chain.joint_limits[:, 1]) + 1e-6
        assert np.all(traj.steps >= lo) and np.all(traj.steps <= hi)


def test_region_family_vias_land_inside_region(chain, families):
    rng = np.random.default_rng(9)
    fam = families[1]  # center-sector region
    for _ in range(3):
        traj = trajgen.sample_trajectory(chain, fam, rng)
        # via points appear exactly in the output; at minimum the endpoints
        # are vias, so both must map into the region
        ends = np.array([kin.forward_kinematics(chain, q.astype(np.float64)).p
                         for q in (traj.steps[0], traj.steps[-1])])
        assert fam.region.contains(ends).all()
        assert np.all(traj.steps >= chain.joint_limits[:, 0] - 1e-6)
        assert np.all(traj.steps <= chain.joint_limits[:, 1] + 1e-6)


def test_unreachable_region_rejected(chain):
    fam = trajgen.FamilySpec(name="far", region=trajgen.TaskRegion((0.0, 0.5), (2.0, 3.0)))
    with pytest.raises(trajgen.TrajGenError):
        trajgen.sample_trajectory(chain, fam, np.random.default_rng(0))


def test_tool_band_holds_along_whole_trajectory(chain):
    # the banded angle interpolates monotonically between via points, so a
    # band satisfied at the vias must hold at every step
    region = trajgen.TaskRegion((-0.95, 0.95), (0.40, 1.15), tool_range=(-0.35, 0.35))
    fam = trajgen.FamilySpec(name="banded", region=region, via_range=(3, 5))
    rng = np.random.default_rng(4)
    for _ in range(3):
        traj = trajgen.sample_trajectory(chain, fam, rng)
        for q in traj.steps[:: max(1, len(traj) // 8)]:
            R = kin.forward_kinematics(chain, q.astype(np.float64)).R
            yaw = np.arctan2(R[1, 0], R[0, 0])
            assert -0.35 - 1e-6 <= yaw <= 0.35 + 1e-6


def test_gripper_events_sit_on_via_arrivals(chain):
    fam = trajgen.family_presets()["IN_C"]
    rng = np.random.default_rng(11)
    hit_some = False
    for _ in range(6):
        traj = trajgen.sample_trajectory(chain, fam, rng)
        events = trajgen.sample_gripper_events(rng, len(traj),
                                               fam.gripper_event_prob,
                                               via_steps=traj.via_steps)
        arrivals = set(int(t) for t in traj.via_steps)
        for t, v in events:
            assert t in arrivals
            assert v in (0.0, 1.0)
        hit_some = hit_some or bool(events)
    assert hit_some


def test_via_steps_index_the_via_points():
    vias = np.array([[0.0, 0.0], [1.0, -0.5], [0.2, 0.3]])
    traj = trajgen.interpolate_via_points(vias, [1.0, 0.7], dt=0.1)
    assert traj.via_steps is not None
    np.testing.assert_allclose(traj.steps[traj.via_steps], vias, atol=1e-6)


def test_family_needs_exactly_one_region_kind():
    with pytest.raises(trajgen.TrajGenError):
        trajgen.FamilySpec(name="none")
    with pytest.raises(trajgen.TrajGenError):
        trajgen.FamilySpec(name="both", q_lo=np.zeros(3), q_hi=np.ones(3),
                           region=trajgen.TaskRegion((0.0, 1.0), (0.5, 1.0)))


def test_family_outside_limits_rejected(chain):
    fam = trajgen.FamilySpec(name="bad", q_lo=np.array([4.0, 0, 0]), q_hi=np.array([5.0, 1, 1]))
    with pytest.raises(trajgen.TrajGenError):
        trajgen.sample_trajectory(chain, fam, np.random.default_rng(0))


def test_family_dof_mismatch_rejected(chain):
    fam = trajgen.FamilySpec(name="short", q_lo=np.array([-1.0]), q_hi=np.array([1.0]))
    with pytest.raises(trajgen.TrajGenError):
        trajgen.sample_trajectory(chain, fam, np.random.default_rng(0))


def test_empty_box_rejected():
    with pytest.raises(trajgen.TrajGenError):
        trajgen.FamilySpec(name="empty", q_lo=np.array([1.0]), q_hi=np.array([1.0]))


# ---------------------------------------------------------------------------
# FK labeling
# ---------------------------------------------------------------------------

def test_constant_trajectory_constant_labels(chain):
    q = np.array([0.4, -0.3, 0.2])
    traj = trajgen.JPTrajectory(steps=np.tile(q, (7, 1)), dt=0.1)
    labels = trajgen.label_with_fk(chain, traj)
    assert np.all(labels == labels[0])
    assert np.all(labels[:, 9] == 1.0)  # no events: gripper open throughout


def test_labels_match_per_step_fk_oracle(chain):
    rng = np.random.default_rng(3)
    traj = trajgen.sample_trajectory(chain, trajgen.in_distribution_families()[1], rng)
    labels = trajgen.label_with_fk(chain, traj)
    for t in range(0, len(traj), 5):
        pose = kin.forward_kinematics(chain, traj.steps[t].astype(np.float64))
        want = np.concatenate([pose.p, kin.rotmat_to_rot6d(pose.R), [1.0]])
        assert np.max(np.abs(labels[t].astype(np.float64) - want)) < 1e-6
    # same inputs, same code path: labels are bitwise reproducible
    again = trajgen.label_with_fk(chain, traj)
    assert labels.tobytes() == again.tobytes()


def test_gripper_events_piecewise_constant(chain):
    traj = trajgen.JPTrajectory(steps=np.zeros((10, 3)), dt=0.1)
    labels = trajgen.label_with_fk(chain, traj, gripper_events=[(3, 0.0), (7, 1.0)])
    assert np.all(labels[:3, 9] == 1.0)
    assert np.all(labels[3:7, 9] == 0.0)
    assert np.all(labels[7:, 9] == 1.0)
    with pytest.raises(trajgen.TrajGenError):
        trajgen.label_with_fk(chain, traj, gripper_events=[(99, 0.0)])
    with pytest.raises(trajgen.TrajGenError):
        trajgen.label_with_fk(chain, traj, gripper_events=[(2, 0.5)])


# ---------------------------------------------------------------------------
# windowing and dataset assembly
# ---------------------------------------------------------------------------

def test_window_count_enumeration():
    t_len, n_obs, horizon = 9, 2, 4
    cond_rows = np.arange(t_len * 3, dtype=np.float32).reshape(t_len, 3)
    act_rows = np.arange(t_len * 2, dtype=np.float32).reshape(t_len, 2)
    cond, chunks = trajgen.extract_windows(cond_rows, act_rows, n_obs, horizon)
    assert cond.shape == (t_len - n_obs + 1, n_obs, 3)
    assert chunks.shape == (t_len - n_obs + 1, horizon, 2)
    for w in range(cond.shape[0]):
        start = w + n_obs - 1
        assert np.array_equal(cond[w], cond_rows[w : w + n_obs])
        for h in range(horizon):
            src = min(start + h, t_len - 1)  # repeat-last padding
            assert np.array_equal(chunks[w, h], act_rows[src])


def test_window_alignment_chunk_starts_at_last_cond_row():
    rows = np.arange(12, dtype=np.float32).reshape(-1, 1)
    cond, chunks = trajgen.extract_windows(rows, rows, n_obs=2, horizon=3)
    assert np.all(cond[:, -1, 0] == chunks[:, 0, 0])


def test_too_short_sequence_rejected():
    rows = np.zeros((1, 3), dtype=np.float32)
    with pytest.raises(trajgen.TrajGenError):
        trajgen.extract_windows(rows, rows, n_obs=2, horizon=4)


def test_build_dataset_deterministic_and_normalized(chain, families):
    ds1 = trajgen.build_dataset(chain, families, n_trajs=4, horizon=8, n_obs=2, seed=11)
    ds2 = trajgen.build_dataset(chain, families, n_trajs=4, horizon=8, n_obs=2, seed=11)
    assert dataset_bytes(ds1) == dataset_bytes(ds2)
    ds3 = trajgen.build_dataset(chain, families, n_trajs=4, horizon=8, n_obs=2, seed=12)
    assert dataset_bytes(ds1) != dataset_bytes(ds3)

    norm_c = ds1.stats.normalize_cond(ds1.cond)
    norm_a = ds1.stats.normalize_action(ds1.actions)
    assert norm_c.min() >= -1.0 - 1e-6 and norm_c.max() <= 1.0 + 1e-6
    assert norm_a.min() >= -1.0 - 1e-6 and norm_a.max() <= 1.0 + 1e-6
    # round trip
    back = ds1.stats.denormalize_action(norm_a)
    assert np.max(np.abs(back - ds1.actions)) < 1e-5


def test_build_dataset_rejects_bad_args(chain, families):
    with pytest.raises(trajgen.TrajGenError):
        trajgen.build_dataset(chain, families, n_trajs=0)
    with pytest.raises(trajgen.TrajGenError):
        trajgen.build_dataset(chain, [], n_trajs=2)
    with pytest.raises(trajgen.TrajGenError):
        trajgen.build_dataset(chain, families, n_trajs=2, horizon=0)


def test_stored_actions_fk_reproducible(chain, families):
    ds = trajgen.build_dataset(chain, families, n_trajs=2, horizon=4, n_obs=2, seed=5)
    # the conditioning window's last row is the chunk's first configuration
    for i in range(0, ds.n_samples, 7):
        q = ds.cond[i, -1].astype(np.float64)
        pose = kin.forward_kinematics(chain, q)
        want = np.concatenate([pose.p, kin.rotmat_to_rot6d(pose.R)])
        assert np.max(np.abs(ds.actions[i, 0, :9].astype(np.float64) - want)) < 1e-6


def test_sample_count_scales_linearly(chain, families):
    n4 = trajgen.build_dataset(chain, families, n_trajs=4, horizon=4, seed=3).n_samples
    n8 = trajgen.build_dataset(chain, families, n_trajs=8, horizon=4, seed=3).n_samples
    n16 = trajgen.build_dataset(chain, families, n_trajs=16, horizon=4, seed=3).n_samples
    # window counts grow proportionally with trajectory count (within
    # per-trajectory length variance)
    assert 1.5 < n8 / n4 < 2.5
    assert 1.5 < n16 / n8 < 2.5


# ---------------------------------------------------------------------------
# family presets
# ---------------------------------------------------------------------------

def test_eight_presets_with_expected_names():
    presets = trajgen.family_presets()
    assert set(presets) == {"IN_A", "IN_C", "IN_G", "OUT_B", "OUT_D", "OUT_E", "OUT_F", "OUT_H"}


def test_in_presets_pairwise_overlap():
    presets = trajgen.family_presets()
    ins = [presets["IN_A"], presets["IN_C"], presets["IN_G"]]
    for i in range(3):
        for j in range(i + 1, 3):
            assert ins[i].region.overlaps(ins[j].region)


def _sample_region(region, rng, n):
    phi = rng.uniform(*region.phi_range, size=n)
    r = rng.uniform(*region.r_range, size=n)
    return np.stack([r * np.cos(phi), r * np.sin(phi), np.zeros(n)], axis=1)


def test_out_presets_extend_beyond_in_union():
    presets = trajgen.family_presets()
    ins = [presets[k] for k in ("IN_A", "IN_C", "IN_G")]
    rng = np.random.default_rng(7)
    for name in ("OUT_B", "OUT_D", "OUT_E", "OUT_F", "OUT_H"):
        pts = _sample_region(presets[name].region, rng, 2000)
        inside_union = np.zeros(len(pts), dtype=bool)
        for f in ins:
            inside_union |= f.region.contains(pts)
        frac_outside = 1.0 - inside_union.mean()
        assert frac_outside > 0.05, f"{name} lies almost entirely inside the IN union"
        assert inside_union.mean() > 0.0, f"{name} is fully disjoint from the IN union"


def test_presets_respect_planar_limits(chain):
    # region presets draw vias from inside the joint limits by construction;
    # every preset must actually be reachable for the planar arm
    rng = np.random.default_rng(4)
    for fam in trajgen.family_presets().values():
        traj = trajgen.sample_trajectory(chain, fam, rng)
        assert np.all(traj.steps >= chain.joint_limits[:, 0] - 1e-6)
        assert np.all(traj.steps <= chain.joint_limits[:, 1] + 1e-6)
