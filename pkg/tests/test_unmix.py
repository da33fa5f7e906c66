import numpy as np
import pytest

from kunmix.errors import DegeneratePixelError
from kunmix.kernels import KernelSpec, gram_matrix
from kunmix.model import EndmemberMatrix
from kunmix.synth import MixingModel, NoiseSpec, generate_scene, generate_synthetic_endmembers
from kunmix.unmix import (
    SkHypeConfig,
    fcls_unmix_pixel,
    skhype_u_update,
    skhype_unmix_pixel,
    unmix_scene,
)

from _oracles import fcls_grid_oracle


@pytest.fixture(scope="module")
def small_setup():
    m = generate_synthetic_endmembers(30, 3, seed=1)
    cfg = SkHypeConfig(mu=1e-6)
    gram = gram_matrix(cfg.kernel, m.data)
    return m, gram, cfg


class TestSkHypePixel:
    def test_noiseless_linear_pixel(self, small_setup):
        # u runs to its ceiling on purely linear data; the default 0.99
        # ceiling leaves a 1% kernel share (a ~2e-3 abundance floor), so the
        # ceiling is raised to let the linear part take over fully
        m, gram, _ = small_setup
        cfg = SkHypeConfig(mu=1e-6, u_bounds=(0.01, 0.999))
        truth = np.array([0.2, 0.5, 0.3])
        px = skhype_unmix_pixel(m.data @ truth, m, gram, cfg)
        assert np.abs(px.alpha - truth).max() < 1e-3
        assert px.u >= 0.9
        # and the linear baseline agrees
        np.testing.assert_allclose(fcls_unmix_pixel(m.data @ truth, m), truth, atol=1e-8)

    @pytest.mark.xfail(
        reason="with the Gaussian kernel the jointly optimal solution spreads "
        "a vertex pixel across correlated endmembers (the quadratic penalty "
        "prefers small mixed coefficients plus a cheap kernel correction); "
        "verified against an independent primal solve, so exact vertex "
        "recovery is a property of the linear-kernel limit only",
        strict=False,
    )
    def test_vertex_recovery_gaussian(self, small_setup):
        m, gram, cfg = small_setup
        px = skhype_unmix_pixel(m.data[:, 0], m, gram, cfg)
        assert np.abs(px.alpha - np.array([1.0, 0.0, 0.0])).max() < 1e-3

    def test_vertex_recovery_linear_kernel(self):
        m = generate_synthetic_endmembers(30, 3, seed=1)
        cfg = SkHypeConfig(kernel=KernelSpec.linear(), mu=1e-6)
        gram = gram_matrix(cfg.kernel, m.data)
        px = skhype_unmix_pixel(m.data[:, 0], m, gram, cfg)
        assert np.abs(px.alpha - np.array([1.0, 0.0, 0.0])).max() < 1e-3

    def test_dual_objective_traces_nondecreasing(self, small_setup):
        m, gram, cfg = small_setup
        rng = np.random.default_rng(0)
        px = skhype_unmix_pixel(m.data @ rng.dirichlet(np.ones(3)), m, gram, cfg)
        assert len(px.dual_objective_trace) == px.iterations
        for trace in px.dual_objective_trace:
            if trace.size > 1:
                slack = 1e-12 * np.maximum(1.0, np.abs(trace[:-1]))
                assert np.all(np.diff(trace) >= -slack)

    def test_stationarity_identity(self):
        # e = mu * beta must equal the primal residual r - K_u beta - u M gamma
        m = generate_synthetic_endmembers(25, 3, seed=2)
        cfg = SkHypeConfig(mu=1e-3)
        gram = gram_matrix(cfg.kernel, m.data)
        rng = np.random.default_rng(1)
        r = m.data @ rng.dirichlet(np.ones(3)) + 0.01 * rng.normal(size=25)
        px = skhype_unmix_pixel(r, m, gram, cfg)
        ku = px.u * (m.data @ m.data.T) + (1 - px.u) * gram
        residual = r - ku @ px.beta - px.u * (m.data @ px.gamma)
        np.testing.assert_allclose(residual, px.residuals, atol=1e-8)
        np.testing.assert_allclose(px.residuals, cfg.mu * px.beta, atol=1e-12)

    def test_finite_difference_lagrangian(self):
        # the recovered primal variables must be stationary for the primal
        # objective J(a, b) = (||a||^2/u + b'Kb/(1-u))/2 + ||r - Ma - Kb||^2/(2 mu)
        m = generate_synthetic_endmembers(12, 3, seed=3)
        cfg = SkHypeConfig(mu=1e-2)
        gram = gram_matrix(cfg.kernel, m.data)
        rng = np.random.default_rng(2)
        r = m.data @ rng.dirichlet(np.ones(3)) + 0.02 * rng.normal(size=12)
        px = skhype_unmix_pixel(r, m, gram, cfg)
        u = px.u
        a0 = u * (m.data.T @ px.beta + px.gamma)   # primal mixed coefficients
        b0 = (1 - u) * px.beta                     # kernel expansion coefficients

        def objective(a, b):
            fit = r - m.data @ a - gram @ b
            return 0.5 * (a @ a / u + b @ gram @ b / (1 - u)) + fit @ fit / (2 * cfg.mu)

        h = 1e-6
        scale = max(1.0, objective(a0, b0))
        for i in range(12):
            e = np.zeros(12); e[i] = h
            grad = (objective(a0, b0 + e) - objective(a0, b0 - e)) / (2 * h)
            assert abs(grad) < 1e-4 * scale
        for i in range(3):
            e = np.zeros(3); e[i] = h
            grad = (objective(a0 + e, b0) - objective(a0 - e, b0)) / (2 * h)
            # gradient equals the bound multiplier gamma_i, zero when a0_i > 0
            assert abs(grad - px.gamma[i]) < 1e-4 * scale
            assert px.gamma[i] * a0[i] == pytest.approx(0.0, abs=1e-8)

    def test_alpha_on_simplex_and_gamma_nonneg(self, small_setup):
        m, gram, _ = small_setup
        cfg = SkHypeConfig()
        rng = np.random.default_rng(3)
        for _ in range(5):
            r = m.data @ rng.dirichlet(np.ones(3)) + 0.02 * rng.normal(size=30)
            px = skhype_unmix_pixel(r, m, gram, cfg)
            assert px.alpha.min() >= -1e-8
            assert px.alpha.sum() == pytest.approx(1.0, abs=1e-6)
            assert px.gamma.min() >= -1e-8

    def test_shape_validation(self, small_setup):
        m, gram, cfg = small_setup
        with pytest.raises(ValueError, match="pixel"):
            skhype_unmix_pixel(np.ones(7), m, gram, cfg)
        with pytest.raises(ValueError, match="gram"):
            skhype_unmix_pixel(np.ones(30), m, np.eye(7), cfg)


class TestUUpdate:
    def _setup(self):
        m = EndmemberMatrix(data=np.vstack([np.eye(2), [[0.5, 0.5]]]))
        gram = np.eye(3)
        return m, gram

    def test_zero_kernel_energy_clamps_high(self):
        m, gram = self._setup()
        u = skhype_u_update(np.zeros(3), np.array([1.0, 0.0]), m, gram, 0.5)
        assert u == 0.99

    def test_zero_denominator_raises(self):
        m, gram = self._setup()
        with pytest.raises(DegeneratePixelError):
            skhype_u_update(np.zeros(3), np.zeros(2), m, gram, 0.5)

    def test_unit_ratio_fixed_point(self):
        # beta' K beta = ||M'beta + gamma||^2 = 1 keeps u at 0.5
        m, gram = self._setup()
        beta = np.array([1.0, 0.0, 0.0])        # K beta . beta = 1, M'beta = e1
        u = skhype_u_update(beta, np.zeros(2), m, gram, 0.5)
        assert u == pytest.approx(0.5, abs=1e-12)

    def test_literal_mode_exceeds_one_and_clamps(self):
        m, gram = self._setup()
        beta = np.array([1.0, 0.0, 0.0])
        u = skhype_u_update(beta, np.zeros(2), m, gram, 0.5, mode="literal")
        assert u == 0.99  # 1 + 0.5 * 1 = 1.5, clamped to the upper bound

    def test_bounds_respected(self):
        m, gram = self._setup()
        beta = np.array([1.0, 0.0, 0.0])
        u = skhype_u_update(beta, np.zeros(2), m, gram, 0.5, u_bounds=(0.4, 0.45))
        assert u == 0.45


class TestFcls:
    def test_noiseless_interpolation(self):
        m = generate_synthetic_endmembers(20, 4, seed=4)
        truth = np.array([0.1, 0.4, 0.3, 0.2])
        np.testing.assert_allclose(fcls_unmix_pixel(m.data @ truth, m), truth, atol=1e-8)

    def test_vertex(self):
        m = generate_synthetic_endmembers(20, 4, seed=5)
        out = fcls_unmix_pixel(m.data[:, 1], m)
        np.testing.assert_allclose(out, [0, 1, 0, 0], atol=1e-8)

    def test_matches_simplex_grid(self):
        rng = np.random.default_rng(6)
        for _ in range(8):
            m_data = rng.uniform(0, 1, (4, 3))
            m = EndmemberMatrix(data=m_data)
            r = rng.uniform(0, 1, 4)
            ours = fcls_unmix_pixel(r, m)
            ref = fcls_grid_oracle(r, m_data, resolution=1000)
            assert np.abs(ours - ref).max() < 2e-3


@pytest.fixture(scope="module")
def scene():
    m = generate_synthetic_endmembers(24, 3, seed=7)
    return m, generate_scene(m, 30, MixingModel.pnmm(0.7), NoiseSpec(21.0, seed=2), seed=8)


class TestUnmixScene:
    def test_fcls_scene(self, scene):
        m, s = scene
        res = unmix_scene(s, m, "fcls")
        assert res.abundances.shape == (3, 30)
        res.validate(tol=1e-6)
        assert res.method == "fcls"
        assert np.all(np.isnan(res.u_values))
        assert res.fallback_mask is None

    def test_skhype_scene_valid(self, scene):
        m, s = scene
        cfg = SkHypeConfig()
        res = unmix_scene(s, m, "skhype", cfg)
        res.validate(tol=1e-6, u_bounds=cfg.u_bounds)
        assert res.fallback_mask is not None and not res.fallback_mask.any()
        assert res.wall_time > 0

    def test_workers_bit_identical(self, scene):
        m, s = scene
        a = unmix_scene(s, m, "skhype", workers=1)
        b = unmix_scene(s, m, "skhype", workers=4)
        np.testing.assert_array_equal(a.abundances, b.abundances)
        np.testing.assert_array_equal(a.u_values, b.u_values)
        np.testing.assert_array_equal(a.iterations, b.iterations)
        c = unmix_scene(s, m, "fcls", workers=3)
        d = unmix_scene(s, m, "fcls", workers=1)
        np.testing.assert_array_equal(c.abundances, d.abundances)

    def test_batched_engine_matches_pixel_api(self, scene):
        # the scene engine batches linear algebra across pixels for small
        # band counts; per-pixel results must track the one-pixel API
        m, s = scene
        cfg = SkHypeConfig()
        res = unmix_scene(s, m, "skhype", cfg)
        gram = gram_matrix(cfg.kernel, m.data)
        for j in (0, 7, 19):
            px = skhype_unmix_pixel(s.pixels[:, j], m, gram, cfg)
            np.testing.assert_allclose(res.abundances[:, j], px.alpha, atol=1e-9)
            assert res.u_values[j] == pytest.approx(px.u, abs=1e-9)
            assert res.iterations[j] == px.iterations

    def test_linear_kernel_matches_fcls_on_lmm(self):
        m = generate_synthetic_endmembers(20, 3, seed=9)
        scene = generate_scene(m, 12, MixingModel.lmm(), NoiseSpec(np.inf), seed=3)
        cfg = SkHypeConfig(kernel=KernelSpec.linear(), mu=1e-6)
        res = unmix_scene(scene, m, "skhype", cfg)
        ref = unmix_scene(scene, m, "fcls", cfg)
        assert np.abs(res.abundances - ref.abundances).max() < 1e-3

    def test_band_mismatch_rejected(self, scene):
        m, s = scene
        m_other = generate_synthetic_endmembers(10, 3, seed=10)
        with pytest.raises(ValueError, match="bands"):
            unmix_scene(s, m_other, "fcls")

    def test_unknown_method(self, scene):
        m, s = scene
        with pytest.raises(ValueError, match="method"):
            unmix_scene(s, m, "nmf")


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            SkHypeConfig(mu=0.0)
        with pytest.raises(ValueError):
            SkHypeConfig(u_bounds=(0.5, 0.4))
        with pytest.raises(ValueError):
            SkHypeConfig(u_init=1.5)
        with pytest.raises(ValueError):
            SkHypeConfig(u_update="newton")

    def test_dict_roundtrip(self):
        cfg = SkHypeConfig(mu=0.05, u_bounds=(0.05, 0.9), u_update="literal")
        assert SkHypeConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ValueError, match="unknown"):
            SkHypeConfig.from_dict({"mu": 0.1, "stepsize": 2.0})
