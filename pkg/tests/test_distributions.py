import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from profile_irl.distributions import (
    OptimalityProfile,
    augment,
    discount_matrix,
    empirical_return_distribution,
    exact_return_distribution,
    exact_reward_distribution,
    marked_trajectory_dist,
    merge_atoms,
    rescaled_traj_distribution,
    returns,
    total_variation,
    traj_return,
)
from profile_irl.mdp import (
    TabularMdp,
    TabularPolicy,
    Trajectory,
    build_gridworld,
    enumerate_trajectories,
    sample_trajectories,
    two_corridor,
    two_corridor_policy,
)
from profile_irl.ot import wasserstein


def corridor_world():
    spec = two_corridor()
    mdp = build_gridworld(spec)
    return mdp, enumerate_trajectories(mdp, two_corridor_policy(spec))


def random_enumerable(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 7))
    k = int(rng.integers(1, 3))
    t = rng.dirichlet(np.ones(n) * 0.5, size=(n, k))
    terms = frozenset(int(s) for s in rng.choice(n, size=int(rng.integers(0, 2)), replace=False))
    for s in terms:
        t[s] = 0.0
        t[s, :, s] = 1.0
    mdp = TabularMdp(t, rng.dirichlet(np.ones(n)), np.zeros(n), terms, int(rng.integers(1, 6)))
    pol = TabularPolicy(rng.dirichlet(np.ones(k), size=n))
    return mdp, pol, rng.normal(size=n)


# -- profiles ----------------------------------------------------------------


def test_profile_validation():
    with pytest.raises(ValueError):
        OptimalityProfile(np.array([0.0, 1.0]), np.array([0.5, 0.6]))
    with pytest.raises(ValueError):
        OptimalityProfile(np.array([1.0, 0.0]), np.array([0.5, 0.5]))
    with pytest.raises(ValueError):
        OptimalityProfile(np.array([np.nan]), np.array([1.0]))
    with pytest.raises(ValueError):
        OptimalityProfile(np.array([]), np.array([]))


def test_merge_duplicates():
    prof = OptimalityProfile.from_samples([1.0, 1.0, 3.0])
    assert prof.atoms == [(1.0, pytest.approx(2 / 3)), (3.0, pytest.approx(1 / 3))]
    loc, w = merge_atoms([2.0, 1.0, 2.0 + 1e-13], [0.2, 0.3, 0.5])
    assert loc.tolist() == [1.0, 2.0] and w.tolist() == pytest.approx([0.3, 0.7])


def test_single_suffix_profile():
    aug = augment([Trajectory((0,))])
    prof = empirical_return_distribution(np.array([5.0]), aug, 0.9)
    assert prof.atoms == [(5.0, 1.0)]


def test_histogram_profile_uses_bin_centres():
    prof = OptimalityProfile.from_samples([0.0, 0.1, 1.9, 2.0], n_bins=2)
    assert prof.locations.tolist() == pytest.approx([0.5, 1.5])
    assert prof.weights.tolist() == pytest.approx([0.5, 0.5])
    # empty bins are dropped so every weight stays positive
    prof = OptimalityProfile.from_samples([0.0, 0.0, 3.0], n_bins=3)
    assert len(prof) == 2 and abs(prof.weights.sum() - 1) < 1e-12


def test_profile_json_round_trip(tmp_path):
    prof = OptimalityProfile.from_atoms([0.1, -2.0, 7.25], [0.2, 0.5, 0.3])
    back = OptimalityProfile.from_json(prof.to_json())
    assert np.array_equal(back.locations, prof.locations)
    assert np.array_equal(back.weights, prof.weights)
    prof.save(tmp_path / "p.json")
    assert json.loads((tmp_path / "p.json").read_text())["schema_version"] == 1
    assert np.array_equal(OptimalityProfile.load(tmp_path / "p.json").weights, prof.weights)


def test_profile_from_csv(tmp_path):
    (tmp_path / "p.csv").write_text("location,weight\n2,1\n-1,3\n")
    prof = OptimalityProfile.from_csv(tmp_path / "p.csv")
    assert prof.atoms == [(-1.0, 0.75), (2.0, 0.25)]


# -- augmentation and returns ----------------------------------------------


def test_augment_suffix_lengths():
    aug = augment([Trajectory((3, 1, 2))])
    assert [len(s) for s in aug.suffixes] == [3, 2, 1]
    assert aug.suffixes[1].states == (1, 2)
    assert len(augment([Trajectory((0, 1)), Trajectory((2, 3))])) == 4
    _, trajs = corridor_world()
    aug = augment([t for t, _ in trajs])
    assert len(aug) == 10
    assert len(aug.full_trajectory_indices()) == 2


def test_augment_empty():
    with pytest.raises(ValueError):
        augment([])


def test_return_examples():
    traj = Trajectory((0, 1, 2))
    r = np.array([1.0, 2.0, 4.0])
    assert traj_return(r, traj, 0.5) == 3.0
    assert traj_return(r, traj, 0.0) == 1.0
    assert traj_return(np.full(3, 1.5), traj, 1.0) == 4.5
    assert traj_return(lambda s: 2.0 * s, traj, 1.0) == 6.0


def test_discount_matrix_is_linear_map_for_returns():
    rng = np.random.default_rng(0)
    trajs = [Trajectory(tuple(rng.integers(0, 5, size=int(rng.integers(1, 7))).tolist())) for _ in range(20)]
    r = rng.normal(size=5)
    mat = discount_matrix(trajs, 0.8, 5)
    assert np.allclose(mat @ r, returns(r, trajs, 0.8), atol=1e-12)


def test_augmented_suffix_returns_follow_recursion():
    # R(s[j:]) = r(s_j) + gamma R(s[j+1:]): suffix returns add nothing new
    rng = np.random.default_rng(1)
    traj = Trajectory(tuple(rng.integers(0, 4, size=6).tolist()))
    r = rng.normal(size=4)
    y = returns(r, augment([traj]).suffixes, 0.7)
    for j in range(5):
        assert y[j] == pytest.approx(r[traj.states[j]] + 0.7 * y[j + 1], abs=1e-12)


# -- two-corridor world -----------------------------------------------------


def test_rescaled_distribution_two_corridor():
    _, trajs = corridor_world()
    out = rescaled_traj_distribution(trajs)
    assert sorted(p for _, p in out) == [pytest.approx(0.5, abs=1e-12)] * 2


def test_rescaled_distribution_small_cases():
    a, b = Trajectory((0,)), Trajectory((0, 1, 2))
    out = dict(rescaled_traj_distribution([(a, 0.5), (b, 0.5)]))
    assert abs(out[a] - 0.25) < 1e-12 and abs(out[b] - 0.75) < 1e-12
    c = Trajectory((1, 2, 0))
    same = [(b, 0.3), (c, 0.7)]
    assert rescaled_traj_distribution(same) == pytest.approx(same)


def test_marked_masses_two_corridor():
    _, trajs = corridor_world()
    marked = marked_trajectory_dist(trajs)
    for (traj, t), p in marked.entries:
        expected = 0.25 if len(traj) == 2 else 0.0625
        assert abs(p - expected) < 1e-12
    assert len(marked.entries) == 10


def test_marked_single_trajectories():
    m = marked_trajectory_dist([(Trajectory((4,)), 1.0)])
    assert m.entries == (((Trajectory((4,)), 0), 1.0),)
    m = marked_trajectory_dist([(Trajectory((0, 1, 2, 3)), 1.0)])
    assert [p for _, p in m.entries] == [0.25] * 4


def test_undiscounted_two_corridor_profile_is_half_half():
    mdp, _ = corridor_world()
    spec = two_corridor()
    prof = exact_return_distribution(mdp, two_corridor_policy(spec), mdp.gt_reward, 1.0)
    assert prof.locations.tolist() == [-10.0, 10.0]
    assert np.allclose(prof.weights, [0.5, 0.5], atol=1e-12)


def test_empirical_profile_from_enumeration_matches_exact():
    # duplicating each maximal trajectory in proportion to its probability
    # reproduces the exact future measure at any gamma
    mdp, trajs = corridor_world()
    spec = two_corridor()
    data = []
    for traj, p in trajs:
        data += [traj] * round(p * 10)
    emp = empirical_return_distribution(mdp.gt_reward, augment(data), 0.0)
    exact = exact_return_distribution(mdp, two_corridor_policy(spec), mdp.gt_reward, 0.0)
    assert total_variation(emp, exact) < 1e-9


def test_constant_reward_single_atom():
    mdp, _ = corridor_world()
    pol = two_corridor_policy(two_corridor())
    prof = exact_return_distribution(mdp, pol, np.full(mdp.n_states, 2.5), 0.0)
    assert prof.atoms == [(2.5, pytest.approx(1.0))]


@pytest.mark.parametrize("seed", range(20))
def test_gamma_zero_pushforward_identity(seed):
    mdp, pol, r = random_enumerable(seed)
    p0 = exact_return_distribution(mdp, pol, r, 0.0)
    pr = exact_reward_distribution(mdp, pol, r)
    assert total_variation(p0, pr) < 1e-9


def test_symmetry_under_occupancy_preserving_permutation():
    rng = np.random.default_rng(5)
    # two states visited equally often: swapping them preserves occupancy
    data = [Trajectory((0, 1, 2)), Trajectory((1, 0, 2)), Trajectory((3,))]
    r = rng.normal(size=4)
    perm = np.array([1, 0, 2, 3])
    a = empirical_return_distribution(r, augment(data), 0.0)
    b = empirical_return_distribution(r[perm], augment(data), 0.0)
    assert np.array_equal(a.locations, b.locations) and np.array_equal(a.weights, b.weights)


def test_empirical_profile_converges_to_exact():
    spec = two_corridor()
    mdp = build_gridworld(spec)
    pol = two_corridor_policy(spec)
    exact = exact_return_distribution(mdp, pol, mdp.gt_reward, 0.9)
    dists = []
    for n in (10, 100, 1000):
        errs = []
        for seed in range(10):
            data = sample_trajectories(mdp, pol, n, seed)
            emp = empirical_return_distribution(mdp.gt_reward, augment(data), 0.9)
            errs.append(wasserstein(emp, exact, 1.0))
        dists.append(np.mean(errs))
    assert dists[0] >= dists[1] >= dists[2]
    assert dists[2] < 0.5


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=40), st.integers(0, 50))
def test_profiles_always_normalised(values, n_bins):
    prof = OptimalityProfile.from_samples(values, n_bins)
    assert abs(prof.weights.sum() - 1) < 1e-9
    assert np.all(np.diff(prof.locations) > 0)
