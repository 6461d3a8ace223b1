import numpy as np
import pytest

from geopose import kernels, losses, metrics, model, scene
from geopose.errors import ConfigError, NumericsError
from geopose.training import (
    BetaLossSpec,
    HomoscedasticLossSpec,
    ReprojectionLossSpec,
    TrainConfig,
    adam_step,
    beta_sweep,
    save_report,
    train,
    two_step_train,
)


@pytest.fixture(scope="module")
def room_setup():
    scn = scene.room_scene(seed=2, n_points=300, n_anchors=8)
    tr = scene.sample_poses(scn, 150, seed=4, split="train")
    te = scene.sample_poses(scn, 40, seed=4, split="test")
    tr, te, scn, _ = scene.center_frame(tr, te, scn)
    return scn, tr, te


def _cfg(loss, **kw):
    defaults = dict(learning_rate=3e-3, batch_size=32, max_iterations=300, seed=1)
    defaults.update(kw)
    return TrainConfig(loss=loss, **defaults)


class TestAdamStep:
    def test_zero_gradient_no_change(self, rng):
        params = rng.normal(size=10)
        cfg = _cfg(BetaLossSpec())
        out, (m, v) = adam_step(params, np.zeros(10), (np.zeros(10), np.zeros(10)), 1, cfg)
        np.testing.assert_array_equal(out, params)

    def test_first_step_closed_form(self, rng):
        g = rng.normal(size=10)
        cfg = _cfg(BetaLossSpec(), learning_rate=1e-2)
        out, _ = adam_step(np.zeros(10), g, (np.zeros(10), np.zeros(10)), 1, cfg)
        np.testing.assert_allclose(out, -1e-2 * g / (np.abs(g) + cfg.eps), rtol=1e-12)

    def test_non_finite_gradient_aborts(self, rng):
        cfg = _cfg(BetaLossSpec())
        bad = np.array([1.0, np.nan, 0.0])
        with pytest.raises(NumericsError):
            adam_step(np.zeros(3), bad, (np.zeros(3), np.zeros(3)), 1, cfg)

    def test_step_index_starts_at_one(self):
        cfg = _cfg(BetaLossSpec())
        with pytest.raises(ConfigError):
            adam_step(np.zeros(3), np.zeros(3), (np.zeros(3), np.zeros(3)), 0, cfg)

    def test_quadratic_toy_problem_reaches_lstsq_optimum(self, rng):
        # linear model, quadratic loss: 0.5 ||A x - b||^2
        a = rng.normal(size=(30, 4))
        b = rng.normal(size=30)
        expected = np.linalg.lstsq(a, b, rcond=None)[0]
        x = np.zeros(4)
        m, v = np.zeros(4), np.zeros(4)
        for t in range(1, 30001):
            grad = a.T @ (a @ x - b)
            kernels.adam_update(x, grad, m, v, t, 1e-3, 0.9, 0.999, 1e-8)
        np.testing.assert_allclose(x, expected, atol=1e-3)


class TestTrainLoop:
    def test_deterministic_reports(self, room_setup):
        scn, tr, _ = room_setup
        cfg = _cfg(BetaLossSpec())
        mcfg = model.RegressorConfig(input_dim=scn.observation_dim, seed=7)
        st_a = model.init(mcfg)
        rep_a = train(st_a, tr, cfg)
        st_b = model.init(mcfg)
        rep_b = train(st_b, tr, cfg)
        np.testing.assert_array_equal(rep_a.loss_trace, rep_b.loss_trace)
        np.testing.assert_array_equal(st_a.theta, st_b.theta)
        assert rep_a.iterations == rep_b.iterations

    def test_trace_length_equals_iterations(self, room_setup):
        scn, tr, _ = room_setup
        cfg = _cfg(BetaLossSpec())
        st = model.init(model.RegressorConfig(input_dim=scn.observation_dim, seed=7))
        rep = train(st, tr, cfg)
        assert rep.loss_trace.size == rep.iterations

    def test_loss_decreases(self, room_setup):
        scn, tr, _ = room_setup
        cfg = _cfg(BetaLossSpec(), max_iterations=800)
        st = model.init(model.RegressorConfig(input_dim=scn.observation_dim, seed=7))
        rep = train(st, tr, cfg)
        assert np.mean(rep.loss_trace[-50:]) < 0.2 * np.mean(rep.loss_trace[:50])

    def test_plateau_stopping(self, room_setup):
        scn, tr, _ = room_setup
        # huge tolerance makes the plateau rule fire at the first check
        cfg = _cfg(BetaLossSpec(), max_iterations=5000, plateau_window=50, plateau_tol=10.0)
        st = model.init(model.RegressorConfig(input_dim=scn.observation_dim, seed=7))
        rep = train(st, tr, cfg)
        assert rep.converged
        assert rep.iterations == 100

    def test_homoscedastic_optimizes_s(self, room_setup):
        scn, tr, _ = room_setup
        cfg = _cfg(HomoscedasticLossSpec(), max_iterations=600)
        st = model.init(model.RegressorConfig(input_dim=scn.observation_dim, seed=7))
        rep = train(st, tr, cfg)
        assert rep.final_s is not None
        assert not np.allclose(rep.final_s, [0.0, -3.0])  # moved from init

    def test_runaway_parameters_abort(self, room_setup):
        scn, tr, _ = room_setup
        cfg = _cfg(BetaLossSpec(), learning_rate=1e200, max_iterations=200)
        st = model.init(model.RegressorConfig(input_dim=scn.observation_dim, seed=7))
        with pytest.raises(NumericsError):
            train(st, tr, cfg)

    def test_reprojection_needs_scene(self, room_setup):
        _, tr, _ = room_setup
        cfg = _cfg(ReprojectionLossSpec())
        st = model.init(model.RegressorConfig(input_dim=tr[0].observation.size, seed=7))
        with pytest.raises(ConfigError):
            train(st, tr, cfg)

    def test_observation_dim_mismatch(self, room_setup):
        _, tr, _ = room_setup
        cfg = _cfg(BetaLossSpec())
        st = model.init(model.RegressorConfig(input_dim=5, seed=7))
        with pytest.raises(ConfigError):
            train(st, tr, cfg)

    def test_skipped_samples_counted(self, room_setup):
        scn, tr, _ = room_setup
        # clamp the box so most predicted projections fall outside
        cfg = _cfg(
            ReprojectionLossSpec(bounds=losses.Bounds(-1e-4, 1e-4, -1e-4, 1e-4)),
            max_iterations=30,
        )
        st = model.init(model.RegressorConfig(input_dim=scn.observation_dim, seed=7))
        with pytest.warns(UserWarning):
            rep = train(st, tr, cfg, scn)
        assert rep.skipped_samples > 0


class TestGradientAssembly:
    """One training iteration must apply exactly the hand-assembled
    mean-over-batch gradient of the selected loss."""

    def _expected_first_step(self, state, samples, spec, scn=None):
        obs = np.stack([s.observation for s in samples])
        out = model.forward(state, obs)
        b_n = len(samples)
        g_pos = np.zeros((b_n, 3))
        g_raw = np.zeros((b_n, 4))
        g_s = np.zeros(2)
        for i, s in enumerate(samples):
            q = s.pose.orientation
            if isinstance(spec, BetaLossSpec):
                res = losses.beta_loss(
                    s.pose.position, q, out.position[i], out.quat_raw[i],
                    spec.beta, spec.norm,
                )
            elif isinstance(spec, HomoscedasticLossSpec):
                res = losses.homoscedastic_loss(
                    s.pose.position, q, out.position[i], out.quat_raw[i],
                    losses.HomoscedasticParams(spec.s_x, spec.s_q), spec.norm,
                )
                g_s += res.grad_s / b_n
            else:
                res = losses.reprojection_loss(
                    s.pose, out.position[i], out.quat_raw[i], scn.intrinsics,
                    scn.points[s.visible_points], spec.norm, spec.bounds,
                )
                if res is None:
                    continue
            g_pos[i] = res.grad_position / b_n
            g_raw[i] = res.grad_quaternion_raw / b_n
        grads = model.backward(state, out.tape, g_pos, g_raw)
        return grads, g_s

    @pytest.mark.parametrize("kind", ["beta", "sigma", "reproj"])
    def test_first_step_matches_reference(self, room_setup, kind):
        scn, tr, _ = room_setup
        samples = tr[:24]
        spec = {
            "beta": BetaLossSpec(beta=333.0),
            "sigma": HomoscedasticLossSpec(s_x=0.3, s_q=-2.0),
            "reproj": ReprojectionLossSpec(),
        }[kind]
        cfg = TrainConfig(
            loss=spec, learning_rate=1e-3, batch_size=len(samples),
            max_iterations=1, seed=2, max_reproj_points=10**6,
        )
        mcfg = model.RegressorConfig(input_dim=scn.observation_dim, seed=4)

        ref_state = model.init(mcfg)
        grads, g_s = self._expected_first_step(ref_state, samples, spec, scn)
        theta = ref_state.theta.copy()
        kernels.adam_update(
            theta, grads, np.zeros_like(theta), np.zeros_like(theta), 1,
            cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps,
        )

        st = model.init(mcfg)
        rep = train(st, samples, cfg, scn)
        np.testing.assert_allclose(st.theta, theta, atol=1e-12)
        if kind == "sigma":
            s = np.array([spec.s_x, spec.s_q])
            kernels.adam_update(
                s, g_s, np.zeros(2), np.zeros(2), 1,
                cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps,
            )
            np.testing.assert_allclose(rep.final_s, s, atol=1e-12)


class TestHomoscedasticStationarity:
    def test_s_converges_to_log_loss(self):
        # frozen pose: fixed residual losses; the stationary point of the
        # uncertainty-weighted objective is s = log(L)
        lx, lq = 2.5, 0.04
        s = np.array([0.0, -3.0])
        m, v = np.zeros(2), np.zeros(2)
        for t in range(1, 20001):
            grad = np.array([-lx * np.exp(-s[0]) + 1.0, -lq * np.exp(-s[1]) + 1.0])
            kernels.adam_update(s, grad, m, v, t, 1e-2, 0.9, 0.999, 1e-8)
        np.testing.assert_allclose(s, [np.log(lx), np.log(lq)], atol=1e-6)

    def test_insensitive_to_initialization(self):
        lx, lq = 1.7, 0.2
        finals = []
        for s0 in ([0.0, -3.0], [2.0, 1.0], [-2.0, -6.0]):
            s = np.array(s0, dtype=float)
            m, v = np.zeros(2), np.zeros(2)
            for t in range(1, 20001):
                grad = np.array([-lx * np.exp(-s[0]) + 1.0, -lq * np.exp(-s[1]) + 1.0])
                kernels.adam_update(s, grad, m, v, t, 1e-2, 0.9, 0.999, 1e-8)
            finals.append(s.copy())
        for s in finals[1:]:
            np.testing.assert_allclose(s, finals[0], atol=1e-5)


class TestTwoStep:
    def test_phase_order_enforced(self, room_setup):
        scn, tr, _ = room_setup
        st = model.init(model.RegressorConfig(input_dim=scn.observation_dim, seed=7))
        good1 = _cfg(HomoscedasticLossSpec())
        good2 = _cfg(ReprojectionLossSpec())
        with pytest.raises(ConfigError):
            two_step_train(st, tr, scn, good2, good2)
        with pytest.raises(ConfigError):
            two_step_train(st, tr, scn, good1, good1)

    def test_reports_both_phases_and_finite_start(self, room_setup):
        scn, tr, _ = room_setup
        st = model.init(model.RegressorConfig(input_dim=scn.observation_dim, seed=7))
        rep = two_step_train(
            st, tr, scn, _cfg(HomoscedasticLossSpec(), max_iterations=400),
            _cfg(ReprojectionLossSpec(), max_iterations=200),
        )
        assert rep.phase1.loss_trace.size == rep.phase1.iterations
        assert rep.phase2.loss_trace.size == rep.phase2.iterations
        # pretrained weights project sanely: fine-tune starts finite
        assert np.isfinite(rep.phase2.loss_trace[0])

    def test_fine_tune_reduces_reprojection_error(self, room_setup):
        scn, tr, te = room_setup
        mcfg = model.RegressorConfig(input_dim=scn.observation_dim, seed=7)
        st_sigma = model.init(mcfg)
        train(st_sigma, tr, _cfg(HomoscedasticLossSpec(), max_iterations=800))
        st_two = model.init(mcfg)
        two_step_train(
            st_two, tr, scn, _cfg(HomoscedasticLossSpec(), max_iterations=800),
            _cfg(ReprojectionLossSpec(), max_iterations=600),
        )
        mre_sigma = metrics.mean_reprojection_error(st_sigma, te, scn)
        mre_two = metrics.mean_reprojection_error(st_two, te, scn)
        assert mre_two <= mre_sigma


class TestBetaSweep:
    def test_single_beta_single_row(self, room_setup):
        scn, tr, te = room_setup
        mcfg = model.RegressorConfig(input_dim=scn.observation_dim, seed=7)
        rows = beta_sweep(
            lambda: model.init(mcfg), tr, te, [500.0], _cfg(BetaLossSpec(), max_iterations=100)
        )
        assert len(rows) == 1
        assert rows[0].beta == 500.0
        assert rows[0].median_position_m >= 0

    def test_invalid_grids_rejected(self, room_setup):
        scn, tr, te = room_setup
        mcfg = model.RegressorConfig(input_dim=scn.observation_dim, seed=7)
        factory = lambda: model.init(mcfg)
        cfg = _cfg(BetaLossSpec(), max_iterations=50)
        with pytest.raises(ConfigError):
            beta_sweep(factory, tr, te, [], cfg)
        with pytest.raises(ConfigError):
            beta_sweep(factory, tr, te, [500.0, -1.0], cfg)
        with pytest.raises(ConfigError):
            beta_sweep(factory, tr, te, [500.0], _cfg(HomoscedasticLossSpec()))

    def test_identical_initialization_per_beta(self, room_setup):
        # two sweeps over permuted grids give matching per-beta results
        scn, tr, te = room_setup
        mcfg = model.RegressorConfig(input_dim=scn.observation_dim, seed=7)
        cfg = _cfg(BetaLossSpec(), max_iterations=120)
        a = beta_sweep(lambda: model.init(mcfg), tr, te, [250.0, 750.0], cfg)
        b = beta_sweep(lambda: model.init(mcfg), tr, te, [750.0, 250.0], cfg)
        assert a[0].median_position_m == b[1].median_position_m
        assert a[1].median_position_m == b[0].median_position_m


class TestReportSerialization:
    def test_trace_csv_round_trip(self, tmp_path, room_setup):
        scn, tr, _ = room_setup
        cfg = _cfg(BetaLossSpec(), max_iterations=50)
        st = model.init(model.RegressorConfig(input_dim=scn.observation_dim, seed=7))
        rep = train(st, tr, cfg)
        path = tmp_path / "trace.csv"
        save_report(rep, path, checkpoint_ref="model.npz")
        lines = path.read_text().splitlines()
        assert lines[0] == "iteration,loss"
        values = [float(line.split(",")[1]) for line in lines[1:]]
        np.testing.assert_array_equal(values, rep.loss_trace)
        summary = (tmp_path / "trace.csv.summary").read_text()
        assert "checkpoint model.npz" in summary
        assert f"iterations {rep.iterations}" in summary
