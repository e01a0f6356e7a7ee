import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

import follower_lab as fl
from follower_lab.model import default_initial_state, lsim_states

from oracles import freq_response_by_solve, msd_step_response_ivp, naive_zoh_sim

positive_param = st.floats(min_value=0.05, max_value=2000.0,
                           allow_nan=False, allow_infinity=False)


class TestFollowerParams:
    def test_rejects_non_positive(self):
        for bad in [(0, 1, 1), (1, -2, 1), (1, 1, 0)]:
            with pytest.raises(fl.ValidationError):
                fl.FollowerParams(*bad)

    @given(positive_param, positive_param, positive_param)
    @settings(max_examples=50, deadline=None)
    def test_always_hurwitz(self, m, b, k):
        p = fl.FollowerParams(m, b, k)
        model = fl.build_state_space(p)
        assert np.all(np.linalg.eigvals(model.A).real < 0)

    def test_hurwitz_over_many_random_triples(self):
        rng = np.random.default_rng(0)
        mbk = rng.uniform(0.01, 1000.0, size=(10_000, 3))
        km = mbk[:, 2] / mbk[:, 0]
        bm = mbk[:, 1] / mbk[:, 0]
        # closed-form roots of s^2 + bm s + km
        disc = bm ** 2 - 4 * km + 0j
        roots = np.stack([(-bm + np.sqrt(disc)) / 2, (-bm - np.sqrt(disc)) / 2])
        assert np.all(roots.real < 0)


class TestBuildStateSpace:
    def test_unit_parameters(self, unit_params):
        m = fl.build_state_space(unit_params)
        assert np.array_equal(m.A, [[0, 1], [-1, -1]])
        assert np.array_equal(m.B, [[0, 0], [1, 1]])
        assert np.array_equal(m.C, [[1, 0], [0, 0]])
        assert np.all(m.D == 0)

    def test_arithmetic_entries(self):
        m = fl.build_state_space(fl.FollowerParams(2, 4, 8),
                                 fl.EnvParams(k_p=1000, b_p=10))
        assert np.array_equal(m.A, [[0, 1], [-4, -2]])
        assert np.array_equal(m.B, [[0, 0], [4, 2]])
        assert np.array_equal(m.C, [[1, 0], [1000, 10]])

    def test_human_scale_entry_magnitude(self, human_params):
        # fitted entries average ~270 in magnitude at human scale
        m = fl.build_state_space(human_params)
        assert 100 < abs(m.A[1, 0]) < 1000

    def test_position_only_output(self, unit_params):
        m = fl.build_state_space(unit_params, outputs="pos")
        assert m.C.shape == (1, 2)
        assert np.array_equal(m.C, [[1, 0]])


class TestBlockDiagonal:
    def test_single_model_identity(self, unit_params):
        m = fl.build_state_space(unit_params)
        assert fl.block_diagonal([m]) is m

    def test_two_axes(self, unit_params):
        m1 = fl.build_state_space(unit_params)
        m2 = fl.build_state_space(fl.FollowerParams(2, 4, 8))
        combo = fl.block_diagonal([m1, m2])
        expected = np.zeros((4, 4))
        expected[:2, :2] = [[0, 1], [-1, -1]]
        expected[2:, 2:] = [[0, 1], [-4, -2]]
        assert np.array_equal(combo.A, expected)
        assert combo.dof == 2

    def test_empty_list_rejected(self):
        with pytest.raises(fl.ValidationError):
            fl.block_diagonal([])

    def test_structure_mask_by_enumeration(self, unit_params):
        # brute-force the expected-zero index set of a 6-axis composition
        models = [fl.build_state_space(unit_params) for _ in range(6)]
        combo = fl.block_diagonal(models)
        sub = models[0].structure_mask
        for name, dims in (("A", (2, 2)), ("B", (2, 2)), ("C", (2, 2))):
            mask = combo.structure_mask[name]
            rows, cols = dims
            for i in range(6 * rows):
                for j in range(6 * cols):
                    same_block = i // rows == j // cols
                    expected = sub[name][i % rows, j % cols] if same_block else True
                    assert mask[i, j] == expected, (name, i, j)

    def test_off_block_entries_zero(self, unit_params):
        models = [fl.build_state_space(unit_params) for _ in range(6)]
        combo = fl.block_diagonal(models)
        assert combo.A.shape == (12, 12)
        assert np.all(combo.A[combo.structure_mask["A"]] == 0.0)


class TestSimulate:
    def test_zero_input_zero_state_gives_zero_output(self, unit_params):
        model = fl.build_state_space(unit_params)
        traj = fl.Trajectory(rate=100.0, pos=np.zeros((200, 1)), vel=np.zeros((200, 1)))
        rec = fl.simulate(model, traj)
        assert np.all(rec.y_pos == 0.0)
        assert np.all(rec.y_vel == 0.0)

    def test_step_response_dc_gain(self, unit_params):
        # second-order unit-dc step: settles on the input exactly
        model = fl.build_state_space(unit_params)
        n = 4000  # 40 s = 20 time constants of the (1,1,1) system
        pos = np.ones((n, 1))
        vel = np.zeros((n, 1))
        traj = fl.Trajectory(rate=100.0, pos=pos, vel=vel)
        rec = fl.simulate(model, traj, x0=np.zeros(2))
        assert abs(rec.y_pos[-1, 0] - 1.0) < 1e-6
        t, x_ref = msd_step_response_ivp(1.0, 1.0, 1.0, (n - 1) * 0.01, 0.01)
        assert np.max(np.abs(rec.y_pos[:, 0] - x_ref)) < 1e-8

    def test_sinusoid_matches_frequency_response(self, human_params):
        model = fl.build_state_space(human_params)
        f0 = 0.2
        w0 = 2 * np.pi * f0
        rate, dur = 100.0, 60.0
        t = np.arange(int(dur * rate)) / rate
        amp = 0.1
        traj = fl.Trajectory(rate=rate, pos=amp * np.sin(w0 * t)[:, None],
                             vel=amp * w0 * np.cos(w0 * t)[:, None])
        rec = fl.simulate(model, traj)
        # channel responses from a direct linear solve; the velocity input
        # is the derivative of the position input, so H = G_pos + jw G_vel
        G = freq_response_by_solve(model.A, model.B, np.array([[1.0, 0.0]]),
                                   np.zeros((1, 2)), np.array([w0]))[0, 0]
        H = G[0] + 1j * w0 * G[1]
        y_expected = amp * np.abs(H) * np.sin(w0 * t + np.angle(H))
        tail = slice(int(20 * rate), None)  # skip transient
        err = np.max(np.abs(rec.y_pos[tail, 0] - y_expected[tail]))
        assert err < 0.01 * amp * np.abs(H)

    def test_matches_naive_recurrence(self, human_params, short_noise_traj):
        model = fl.build_state_space(human_params)
        rec = fl.simulate(model, short_noise_traj)
        u = short_noise_traj.input_matrix()
        x = naive_zoh_sim(model.A, model.B, u, short_noise_traj.dt,
                          default_initial_state(model, u))
        assert np.allclose(rec.y_pos[:, 0], x[:, 0], atol=1e-10)

    def test_unstable_model_rejected(self):
        bad = fl.StateSpaceModel(A=np.array([[0.0, 1.0], [5.0, 1.0]]),
                                 B=np.eye(2), C=np.eye(2), D=np.zeros((2, 2)), dof=1)
        traj = fl.Trajectory(rate=100.0, pos=np.zeros((100, 1)), vel=np.zeros((100, 1)))
        with pytest.raises(fl.ValidationError):
            fl.simulate(bad, traj)

    def test_dt_mismatch_rejected(self, unit_params, short_noise_traj):
        model = fl.build_state_space(unit_params)
        with pytest.raises(fl.ValidationError):
            fl.simulate(model, short_noise_traj, dt=0.02)

    def test_deterministic_with_seed(self, human_params, short_noise_traj):
        model = fl.build_state_space(human_params)
        a = fl.simulate(model, short_noise_traj, noise=fl.NoiseModel(seed=5))
        b = fl.simulate(model, short_noise_traj, noise=fl.NoiseModel(seed=5))
        assert np.array_equal(a.y_pos, b.y_pos)


class TestSimulatorProperties:
    def test_superposition(self, human_params):
        model = fl.build_state_space(human_params)
        t1 = fl.gen_filtered_noise(fl.NoiseTrajSpec(seed=1, duration=20))
        t2 = fl.gen_fourier(fl.default_fourier_spec(seed=2, duration=20))
        n = min(t1.n_samples, t2.n_samples)
        combined = fl.Trajectory(rate=100.0, pos=t1.pos[:n] + t2.pos[:n],
                                 vel=t1.vel[:n] + t2.vel[:n])
        za = np.zeros(2)
        y1 = fl.simulate(model, t1, x0=za).y_pos[:n]
        y2 = fl.simulate(model, t2, x0=za).y_pos[:n]
        y12 = fl.simulate(model, combined, x0=za).y_pos
        scale = np.max(np.abs(y12))
        assert np.max(np.abs(y12 - (y1 + y2))) < 1e-9 * scale

    def test_time_shift_invariance(self, human_params):
        model = fl.build_state_space(human_params)
        traj = fl.gen_filtered_noise(fl.NoiseTrajSpec(seed=4, duration=20))
        shift = 150
        padded_pos = np.vstack([np.zeros((shift, 1)), traj.pos])
        padded_vel = np.vstack([np.zeros((shift, 1)), traj.vel])
        delayed = fl.Trajectory(rate=100.0, pos=padded_pos, vel=padded_vel)
        y = fl.simulate(model, traj, x0=np.zeros(2)).y_pos
        y_delayed = fl.simulate(model, delayed, x0=np.zeros(2)).y_pos
        scale = np.max(np.abs(y))
        assert np.max(np.abs(y_delayed[shift:] - y)) < 1e-9 * scale
        assert np.max(np.abs(y_delayed[:shift])) < 1e-12

    def test_block_diagonal_decoupling(self):
        params = [fl.FollowerParams(1, 20, 270), fl.FollowerParams(1, 12, 150),
                  fl.FollowerParams(1, 30, 420)]
        models = [fl.build_state_space(p) for p in params]
        combo = fl.block_diagonal(models)
        traj = fl.gen_filtered_noise(fl.NoiseTrajSpec(seed=5, duration=20, axes=3))
        y_combo = fl.simulate(combo, traj).y_pos
        for a in range(3):
            single = fl.Trajectory(rate=100.0, pos=traj.pos[:, [a]], vel=traj.vel[:, [a]])
            y_single = fl.simulate(models[a], single).y_pos[:, 0]
            assert np.max(np.abs(y_combo[:, a] - y_single)) < 1e-12

    @given(positive_param, positive_param, positive_param)
    @settings(max_examples=15, deadline=None)
    def test_unit_dc_gain(self, m, b, k):
        km, bm = k / m, b / m
        disc = bm ** 2 - 4 * km
        slow_pole = (bm - np.sqrt(disc)) / 2 if disc >= 0 else bm / 2
        assume(slow_pole > 0.05)  # keep settle times testable
        model = fl.build_state_space(fl.FollowerParams(m, b, k))
        level = 0.37
        n = max(int(30 / slow_pole * 100), 200)
        traj = fl.Trajectory(rate=100.0, pos=np.full((n, 1), level), vel=np.zeros((n, 1)))
        rec = fl.simulate(model, traj, x0=np.zeros(2))
        # steady state equals the input exactly (unit DC gain)
        assert abs(rec.y_pos[-1, 0] - level) < 1e-5 * level + 1e-7

    def test_zoh_exactness_under_refinement(self, human_params):
        # a staircase input represented at dt and dt/2 must produce the
        # same sampled output: the discretization itself is exact
        model = fl.build_state_space(human_params)
        coarse = fl.gen_filtered_noise(fl.NoiseTrajSpec(seed=6, duration=20))
        u = coarse.input_matrix()
        fine_pos = np.repeat(coarse.pos, 2, axis=0)
        fine_vel = np.repeat(coarse.vel, 2, axis=0)
        fine = fl.Trajectory(rate=200.0, pos=fine_pos, vel=fine_vel)
        y_coarse = fl.simulate(model, coarse).y_pos[:, 0]
        y_fine = fl.simulate(model, fine).y_pos[::2, 0]
        scale = np.max(np.abs(y_coarse))
        assert np.max(np.abs(y_fine - y_coarse)) < 1e-6 * scale


class TestContactForce:
    def test_free_space_zero(self):
        env = fl.EnvParams(k_p=1000, b_p=50, surface_height=0.0, enabled=True)
        assert fl.contact_force(env, 0.05, -0.3) == 0.0

    def test_pure_spring(self):
        env = fl.EnvParams(k_p=1000, b_p=0, surface_height=0.0, enabled=True)
        assert fl.contact_force(env, -0.01, 0.0) == pytest.approx(10.0)

    def test_spring_plus_damper(self):
        # penetrating at 0.1 m/s: k_p*delta + b_p*rate = 10 + 5
        env = fl.EnvParams(k_p=1000, b_p=50, surface_height=0.0, enabled=True)
        delta = 0.01
        pen_rate = 0.1
        expected = env.k_p * delta + env.b_p * pen_rate
        assert fl.contact_force(env, -delta, -pen_rate) == pytest.approx(expected)
        assert expected == 15.0

    def test_no_adhesion_floor(self):
        env = fl.EnvParams(k_p=100, b_p=500, surface_height=0.0, enabled=True)
        # fast withdrawal would give negative force; floored at zero
        assert fl.contact_force(env, -0.001, 1.0) == 0.0

    def test_linear_form_flag(self):
        env = fl.EnvParams(k_p=100, b_p=10, enabled=True, linear_force=True)
        # raw output row: k_p x + b_p xdot, sign and floor free
        assert fl.contact_force(env, 0.02, 0.1) == pytest.approx(3.0)
        assert fl.contact_force(env, -0.02, -0.1) == pytest.approx(-3.0)

    def test_array_input(self):
        env = fl.EnvParams(k_p=1000, b_p=0, surface_height=0.0, enabled=True)
        x = np.array([0.01, -0.01, -0.02])
        f = fl.contact_force(env, x, np.zeros(3))
        assert np.allclose(f, [0.0, 10.0, 20.0])


class TestStochasticOutput:
    def test_zero_sigma_unchanged(self):
        y = np.array([0.1, 2.0])
        noise = fl.NoiseModel(sigma_pos=0.0, seed=1)
        assert np.array_equal(fl.stochastic_output(y, noise, True, 1000.0), y)

    def test_sample_std_matches_sigma(self):
        noise = fl.NoiseModel(sigma_pos=0.007, seed=3)
        y = np.zeros((100_000, 2))
        out = fl.stochastic_output(y, noise, np.ones((100_000, 1), dtype=bool), 1000.0)
        assert abs(np.std(out[:, 0]) / 0.007 - 1) < 0.02
        assert abs(np.std(out[:, 1]) / 7.0 - 1) < 0.02

    def test_force_unchanged_out_of_contact(self):
        noise = fl.NoiseModel(sigma_pos=0.007, seed=3)
        y = np.column_stack([np.zeros(1000), np.full(1000, 2.5)])
        out = fl.stochastic_output(y, noise, np.zeros((1000, 1), dtype=bool), 1000.0)
        assert np.array_equal(out[:, 1], y[:, 1])
        assert not np.array_equal(out[:, 0], y[:, 0])

    def test_noise_never_enters_state(self, human_params, short_noise_traj):
        model = fl.build_state_space(human_params)
        clean = fl.simulate(model, short_noise_traj)
        noisy = fl.simulate(model, short_noise_traj, noise=fl.NoiseModel(seed=8))
        # velocity output is untouched: noise applies to outputs only
        assert np.array_equal(clean.y_vel, noisy.y_vel)
        assert not np.array_equal(clean.y_pos, noisy.y_pos)
