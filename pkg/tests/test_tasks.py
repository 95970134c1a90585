import numpy as np
import pytest
from scipy.integrate import quad

from eim._rng import rng_from_seed
from eim.tasks import (LINE_HALF_SPAN, LINE_X, OBSTACLE_RADIUS, OBSTACLE_X,
                       clearance_feature_map, damped_least_squares_ik,
                       end_effector_feature_map, feature_map_from_name,
                       forward_kinematics, gen_obstacle_task, gen_random_gmm_task,
                       gen_robot_line_task, line_distance, sample_via_points,
                       trajectory_clearances, trajectory_success)
from eim.validation import InputError


class TestRandomGmmTask:
    def test_single_component_target(self):
        task = gen_random_gmm_task(2, 1, seed=0, train_n=100, test_n=50,
                                   validation_n=50)
        assert task.target.n_components == 1
        assert task.train.shape == (100, 2)

    def test_same_seed_same_target(self):
        a = gen_random_gmm_task(3, 4, seed=5, train_n=10, test_n=10, validation_n=10)
        b = gen_random_gmm_task(3, 4, seed=5, train_n=10, test_n=10, validation_n=10)
        for ca, cb in zip(a.target.components, b.target.components):
            np.testing.assert_array_equal(ca.mean, cb.mean)
            np.testing.assert_array_equal(ca.covariance, cb.covariance)
        np.testing.assert_array_equal(a.train, b.train)

    def test_one_d_density_integrates_to_one(self):
        task = gen_random_gmm_task(1, 3, seed=1, train_n=10, test_n=10,
                                   validation_n=10)
        val, _ = quad(lambda x: float(np.exp(task.target.log_density(np.array([x])))),
                      -40, 40, limit=300)
        assert val == pytest.approx(1.0, abs=1e-4)

    def test_weights_floored(self):
        for seed in range(5):
            task = gen_random_gmm_task(2, 5, seed=seed, train_n=10, test_n=10,
                                       validation_n=10)
            assert np.min(task.target.coefficients.probabilities) >= 0.05 / 1.3

    def test_splits_disjoint(self):
        task = gen_random_gmm_task(2, 2, seed=2, train_n=200, test_n=200,
                                   validation_n=200)
        pool = np.concatenate([task.train, task.test, task.validation])
        assert len(np.unique(pool, axis=0)) == len(pool)


class TestForwardKinematics:
    def test_straight_arm(self):
        np.testing.assert_allclose(forward_kinematics(np.zeros(10)), [10.0, 0.0],
                                   atol=1e-12)

    def test_first_joint_right_angle(self):
        angles = np.zeros(10)
        angles[0] = np.pi / 2
        np.testing.assert_allclose(forward_kinematics(angles), [0.0, 10.0],
                                   atol=1e-9)

    def test_matches_independent_symbolic_evaluation(self):
        rng = rng_from_seed(3)
        angles = rng.uniform(-np.pi, np.pi, size=10)
        x = y = 0.0
        heading = 0.0
        for a in angles:
            heading += a
            x += np.cos(heading)
            y += np.sin(heading)
        np.testing.assert_allclose(forward_kinematics(angles), [x, y], rtol=1e-12)

    def test_wrong_link_count(self):
        with pytest.raises(InputError):
            forward_kinematics(np.zeros(7))


class TestRobotLineTask:
    def test_generated_samples_reach_the_line(self):
        task = gen_robot_line_task(60, seed=4, test_n=20, validation_n=20)
        for split in (task.train, task.test, task.validation):
            dist = line_distance(forward_kinematics(split))
            assert np.max(dist) <= 1e-2 + 1e-9

    def test_multimodal_postures_at_matched_target(self):
        # solve the same target many times from random postures: the signed
        # bend statistic must take both signs (distinct solution branches)
        rng = rng_from_seed(5)
        target = np.tile([[LINE_X, 1.5]], (200, 1))
        theta0 = rng.normal(0.0, 0.5, size=(200, 10))
        theta, ok = damped_least_squares_ik(target, theta0)
        bend = theta[ok][:, 1:].sum(axis=1)
        assert (bend > 0).any() and (bend < 0).any()

    def test_feature_map_is_end_effector(self):
        task = gen_robot_line_task(10, seed=6, test_n=5, validation_n=5)
        g = task.feature_map(task.train)
        np.testing.assert_allclose(g, forward_kinematics(task.train), rtol=1e-12)

    def test_feature_jacobian_matches_finite_differences(self):
        fmap = end_effector_feature_map()
        rng = rng_from_seed(7)
        x = rng.uniform(-1, 1, size=(3, 10))
        jac = fmap.jacobian(x)
        h = 1e-6
        for j in range(10):
            xp, xm = x.copy(), x.copy()
            xp[:, j] += h
            xm[:, j] -= h
            fd = (forward_kinematics(xp) - forward_kinematics(xm)) / (2 * h)
            np.testing.assert_allclose(jac[:, :, j], fd, atol=1e-6)

    def test_line_distance_cases(self):
        assert line_distance(np.array([[LINE_X, 0.0]]))[0] == 0.0
        assert line_distance(np.array([[LINE_X, LINE_HALF_SPAN + 1.0]]))[0] == \
            pytest.approx(1.0)
        assert line_distance(np.array([[LINE_X - 2.0, 0.5]]))[0] == pytest.approx(2.0)


class TestObstacleTask:
    def test_eight_modes_all_observed(self):
        ctx = np.array([0.5, 0.5, 0.5])
        vias = sample_via_points(ctx, 1000, rng_from_seed(8))
        above = vias > 0.5
        patterns = {tuple(row) for row in above}
        assert len(patterns) == 8

    def test_mode_probabilities_proportional_to_gaps(self):
        ctx = np.array([0.3, 0.5, 0.7])
        vias = sample_via_points(ctx, 20000, rng_from_seed(9))
        p_above = (vias > ctx).mean(axis=0)
        top = 1.0 - (ctx + OBSTACLE_RADIUS)
        bottom = ctx - OBSTACLE_RADIUS
        np.testing.assert_allclose(p_above, top / (top + bottom), atol=0.02)

    def test_degenerate_gap_probability_one_for_open_side(self):
        ctx = np.array([OBSTACLE_RADIUS, 0.5, 0.5])  # first obstacle touches bottom
        vias = sample_via_points(ctx, 500, rng_from_seed(10))
        assert np.all(np.isfinite(vias))
        assert np.all((vias >= 0.02) & (vias <= 0.98))
        # the closed side has zero gap, so the side choice is always "above";
        # only far normal tails of the height draw may dip below the center
        assert np.mean(vias[:, 0] > ctx[0]) > 0.95

    def test_success_agrees_with_dense_check(self):
        rng = rng_from_seed(11)
        ctx = rng.uniform(0.2, 0.8, size=(100, 3))
        vias = np.stack([sample_via_points(c, 1, rng)[0] for c in ctx])
        coarse = trajectory_success(vias, ctx, n_points=200)
        dense = trajectory_success(vias, ctx, n_points=2000)
        np.testing.assert_array_equal(coarse, dense)

    def test_data_success_rate_in_expected_band(self):
        task = gen_obstacle_task(100, 10, seed=12, test_contexts=10,
                                 validation_contexts=10)
        ok = trajectory_success(task.train, task.train_contexts)
        assert 0.75 <= ok.mean() <= 0.95

    def test_straight_center_line_hits_center_obstacles(self):
        ctx = np.array([[0.5, 0.5, 0.5]])
        via = np.array([[0.5, 0.5, 0.5]])
        assert not trajectory_success(via, ctx)[0]

    def test_clearance_feature_map_pure_and_signed(self):
        fmap = clearance_feature_map()
        ctx = np.array([[0.5, 0.5, 0.5]])
        via = np.array([[0.9, 0.1, 0.9]])
        a = fmap(via, ctx)
        b = fmap(via, ctx)
        np.testing.assert_array_equal(a, b)
        assert a.shape == (1, 3)
        assert np.all(a > 0)
        assert np.all(fmap(np.array([[0.5, 0.5, 0.5]]), ctx) < 0)

    def test_contexts_aligned_with_samples(self):
        task = gen_obstacle_task(7, 3, seed=13, test_contexts=4,
                                 validation_contexts=2)
        assert task.train.shape == (21, 3)
        assert task.train_contexts.shape == (21, 3)
        np.testing.assert_array_equal(task.train_contexts[0], task.train_contexts[2])
        assert task.test_context_set.shape == (4, 3)


class TestFeatureMapRegistry:
    def test_known_names_round_trip(self):
        assert feature_map_from_name("end_effector").name == "end_effector"
        assert feature_map_from_name("obstacle_clearance").width == 3

    def test_unknown_name(self):
        with pytest.raises(InputError):
            feature_map_from_name("nope")
