import numpy as np
import pytest

from sustain.errors import EmptyDataset, InvalidBatch, NotSPD
from sustain.oracle import IteratePair
from sustain.sampling import SampleToken
from sustain.testbed import (
    Dataset,
    HyperCleanSpec,
    MetaLinearSpec,
    QuadBilevelSpec,
    generate_corrupted_dataset,
    load_dataset_csv,
    make_hyperclean,
    make_meta_linear,
    make_quadratic,
    random_quadratic_spec,
)

TOK = SampleToken.root(0).child(0)


class TestQuadratic:
    def test_identity_lower_hessian(self):
        rng = np.random.default_rng(0)
        B = rng.standard_normal((4, 2))
        spec = QuadBilevelSpec(A=np.eye(4), B=B, b=np.zeros(4),
                               y_target=np.zeros(4))
        _, exact = make_quadratic(spec, rng_seed=0)
        x = rng.standard_normal(2)
        assert exact.y_star(x) == pytest.approx(B @ x)

    def test_onedim_closed_forms(self):
        # A=1, B=1, b=0, target 0, lam=0.5, x=2: y*=2, ell=3, grad=3
        spec = QuadBilevelSpec(A=np.array([[1.0]]), B=np.array([[1.0]]),
                               b=np.zeros(1), y_target=np.zeros(1), lam=0.5)
        _, exact = make_quadratic(spec, rng_seed=0)
        x = np.array([2.0])
        assert exact.y_star(x)[0] == pytest.approx(2.0)
        assert exact.ell(x) == pytest.approx(3.0)
        assert exact.grad_ell(x)[0] == pytest.approx(3.0)

    def test_grad_matches_finite_differences(self, quad5):
        _, exact = quad5
        rng = np.random.default_rng(5)
        h = 1e-5
        for _ in range(20):
            x = rng.standard_normal(2)
            g = exact.grad_ell(x)
            fd = np.array([
                (exact.ell(x + h * e) - exact.ell(x - h * e)) / (2 * h)
                for e in np.eye(2)
            ])
            assert np.linalg.norm(fd - g) <= 1e-6 * max(1.0, np.linalg.norm(g))

    def test_not_spd_rejected(self):
        spec = QuadBilevelSpec(A=-np.eye(2), B=np.zeros((2, 1)), b=np.zeros(2),
                               y_target=np.zeros(2))
        with pytest.raises(NotSPD):
            make_quadratic(spec, rng_seed=0)

    def test_constants_from_spectrum(self, quad5):
        oracle, _ = quad5
        assert oracle.constants.mu_g == pytest.approx(1.0)
        assert oracle.constants.L_g == pytest.approx(2.0)
        assert oracle.constants.C_gxy == pytest.approx(np.linalg.norm(oracle.spec.B, 2))

    def test_noise_is_token_deterministic(self, quad5_noisy):
        oracle, _ = quad5_noisy
        pair = IteratePair(np.zeros(2), np.zeros(5))
        a = oracle.grad_y_g_sample(pair, TOK)
        b = oracle.grad_y_g_sample(pair, TOK)
        assert np.array_equal(a, b)
        c = oracle.grad_y_g_sample(pair, SampleToken.root(0).child(1))
        assert not np.array_equal(a, c)

    def test_noise_additive_across_iterates(self, quad5_noisy):
        # same token at two iterates differs exactly by the mean difference
        oracle, exact = quad5_noisy
        p1 = IteratePair(np.zeros(2), np.zeros(5))
        p2 = IteratePair(np.ones(2), np.ones(5))
        d_sample = oracle.grad_y_g_sample(p1, TOK) - oracle.grad_y_g_sample(p2, TOK)
        d_mean = exact.grad_y_g_mean(p1) - exact.grad_y_g_mean(p2)
        assert d_sample == pytest.approx(d_mean)

    def test_surrogate_at_y_star_is_exact_gradient(self, quad5):
        _, exact = quad5
        rng = np.random.default_rng(8)
        for _ in range(5):
            x = rng.standard_normal(2)
            assert exact.surrogate_grad(x, exact.y_star(x)) == pytest.approx(
                exact.grad_ell(x), rel=1e-12, abs=1e-12
            )

    def test_sinusoidal_outer_term(self):
        spec = QuadBilevelSpec(A=np.eye(1), B=np.eye(1), b=np.zeros(1),
                               y_target=np.zeros(1), lam=0.1, sin_amp=0.5)
        _, exact = make_quadratic(spec, rng_seed=0)
        x = np.array([0.7])
        h = 1e-6
        fd = (exact.ell(x + h) - exact.ell(x - h)) / (2 * h)
        assert exact.grad_ell(x)[0] == pytest.approx(fd, rel=1e-6)
        assert exact.ell_star is None


class TestCorruptedDataset:
    def test_p_zero_matches_planted(self):
        tr0, _ = generate_corrupted_dataset(100, 50, 5, p=0.0, rng_seed=1)
        tr0b, _ = generate_corrupted_dataset(100, 50, 5, p=0.0, rng_seed=1)
        assert np.array_equal(tr0.labels, tr0b.labels)

    def test_p_one_flips_everything(self):
        tr0, _ = generate_corrupted_dataset(200, 10, 5, p=0.0, rng_seed=2)
        tr1, _ = generate_corrupted_dataset(200, 10, 5, p=1.0, rng_seed=2)
        assert np.array_equal(tr1.labels, 1.0 - tr0.labels)

    def test_flip_fraction_concentrates(self):
        n = 10_000
        clean, _ = generate_corrupted_dataset(n, 10, 5, p=0.0, rng_seed=3)
        corrupt, _ = generate_corrupted_dataset(n, 10, 5, p=0.3, rng_seed=3)
        frac = np.mean(clean.labels != corrupt.labels)
        assert abs(frac - 0.3) <= 0.015  # 3 sigma binomial band

    def test_validation_never_corrupted(self):
        _, val0 = generate_corrupted_dataset(50, 300, 5, p=0.0, rng_seed=4)
        _, val1 = generate_corrupted_dataset(50, 300, 5, p=0.9, rng_seed=4)
        assert np.array_equal(val0.labels, val1.labels)

    def test_invalid_p(self):
        with pytest.raises(ValueError):
            generate_corrupted_dataset(10, 10, 2, p=1.5, rng_seed=0)


class TestHyperClean:
    def _oracle(self, batch_size=4):
        train, val = generate_corrupted_dataset(30, 20, 6, p=0.3, rng_seed=5)
        spec = HyperCleanSpec(train=train, val=val, corruption_rate=0.3,
                              reg=1e-3, batch_size=batch_size)
        return make_hyperclean(spec, rng_seed=0)

    def test_dimensions(self):
        oracle = self._oracle()
        assert oracle.d_up == 30 and oracle.d_lo == 6

    def test_lower_strong_convexity(self):
        oracle = self._oracle()
        rng = np.random.default_rng(6)
        for _ in range(5):
            pair = IteratePair(rng.standard_normal(30), rng.standard_normal(6))
            H = oracle.full_lower_hessian(pair)
            assert np.linalg.eigvalsh(H)[0] >= 2 * 1e-3 - 1e-12

    def test_hessian_action_matches_full_hessian_in_expectation(self):
        oracle = self._oracle(batch_size=30)  # full batch, zero variance
        rng = np.random.default_rng(7)
        pair = IteratePair(rng.standard_normal(30), rng.standard_normal(6))
        H = oracle.full_lower_hessian(pair)
        # batch indices are drawn with replacement, so average over tokens
        root = SampleToken.root(10)
        v = rng.standard_normal(6)
        mean = np.mean([oracle.hess_yy_g_sample(pair, root.child(i))(v)
                        for i in range(3000)], axis=0)
        assert mean == pytest.approx(H @ v, rel=0.1, abs=0.1 * np.linalg.norm(H @ v))

    def test_hessian_symmetry(self):
        oracle = self._oracle()
        rng = np.random.default_rng(8)
        pair = IteratePair(rng.standard_normal(30), rng.standard_normal(6))
        H = oracle.hess_yy_g_sample(pair, TOK)
        for _ in range(10):
            u, v = rng.standard_normal(6), rng.standard_normal(6)
            assert float(u @ H(v)) == pytest.approx(float(v @ H(u)), rel=1e-10)

    def test_grad_y_g_unbiased(self):
        oracle = self._oracle(batch_size=2)
        rng = np.random.default_rng(9)
        pair = IteratePair(rng.standard_normal(30) * 0.1, rng.standard_normal(6) * 0.1)
        root = SampleToken.root(20)
        draws = np.array([oracle.grad_y_g_sample(pair, root.child(i))
                          for i in range(20_000)])
        # full-batch reference
        from sustain.testbed import _sigmoid
        tr = oracle.spec.train
        w = _sigmoid(pair.x)
        resid = _sigmoid(tr.features @ pair.y) - tr.labels
        full = 2e-3 * pair.y + (w * resid) @ tr.features
        se = draws.std(axis=0, ddof=1) / np.sqrt(len(draws))
        assert np.all(np.abs(draws.mean(axis=0) - full) <= 4 * se + 1e-9)

    def test_upper_grad_x_is_zero(self):
        oracle = self._oracle()
        pair = IteratePair(np.zeros(30), np.zeros(6))
        assert np.all(oracle.grad_x_f_sample(pair, TOK) == 0.0)

    def test_empty_dataset_rejected(self):
        with pytest.raises(EmptyDataset):
            make_hyperclean(
                HyperCleanSpec(train=Dataset(np.zeros((0, 2)), np.zeros(0)),
                               val=Dataset(np.zeros((1, 2)), np.zeros(1)),
                               corruption_rate=0.0),
                rng_seed=0,
            )


class TestMetaLinear:
    def test_single_task_closed_form(self):
        # Z = I, v = 0, rho = 1: y*(x) = -x/2
        spec = MetaLinearSpec(Z=[np.eye(3)], v=[np.zeros(3)],
                              D=[np.eye(3)], u=[np.zeros(3)], rho=1.0, m=1)
        oracle = make_meta_linear(spec, rng_seed=0)
        x = np.array([1.0, -2.0, 0.5])
        y = np.zeros(3)
        for _ in range(400):  # inner gradient descent to the minimizer
            g = oracle.grad_y_g_sample(IteratePair(x, y), TOK)
            y = y - 0.3 * g
        assert y == pytest.approx(-x / 2, abs=1e-8)

    def test_full_batch_zero_variance(self):
        rng = np.random.default_rng(11)
        Z = [rng.standard_normal((5, 2)) for _ in range(3)]
        spec = MetaLinearSpec(Z=Z, v=[rng.standard_normal(5) for _ in range(3)],
                              D=Z, u=[rng.standard_normal(5) for _ in range(3)],
                              rho=1.0, m=3)
        oracle = make_meta_linear(spec, rng_seed=0)
        pair = IteratePair(rng.standard_normal(2), rng.standard_normal(6))
        a = oracle.grad_y_g_sample(pair, SampleToken.root(0).child(0))
        b = oracle.grad_y_g_sample(pair, SampleToken.root(0).child(99))
        assert np.array_equal(a, b)

    def test_block_separability(self):
        rng = np.random.default_rng(12)
        Z = [rng.standard_normal((4, 2)) for _ in range(3)]
        v = [rng.standard_normal(4) for _ in range(3)]
        spec = MetaLinearSpec(Z=Z, v=v, D=Z, u=v, rho=1.0, m=3)
        oracle = make_meta_linear(spec, rng_seed=0)
        pair = IteratePair(rng.standard_normal(2), rng.standard_normal(6))
        g1 = oracle.grad_y_g_sample(pair, TOK)
        # perturb task 2's data: blocks 0 and 1 of the gradient are unchanged
        v2 = list(v)
        v2[2] = v2[2] + 1.0
        oracle2 = make_meta_linear(
            MetaLinearSpec(Z=Z, v=v2, D=Z, u=v, rho=1.0, m=3), rng_seed=0)
        g2 = oracle2.grad_y_g_sample(pair, TOK)
        assert np.array_equal(g1[:4], g2[:4])
        assert not np.array_equal(g1[4:6], g2[4:6])

    def test_batch_exceeding_tasks_rejected(self):
        spec = MetaLinearSpec(Z=[np.eye(2)], v=[np.zeros(2)],
                              D=[np.eye(2)], u=[np.zeros(2)], rho=1.0, m=2)
        with pytest.raises(InvalidBatch):
            make_meta_linear(spec, rng_seed=0)


def test_csv_roundtrip(tmp_path):
    path = tmp_path / "data.csv"
    path.write_text("f1,f2,label\n0.5,-1.25,1\n2.0,3.5,0\n")
    ds = load_dataset_csv(str(path))
    assert ds.features == pytest.approx(np.array([[0.5, -1.25], [2.0, 3.5]]))
    assert ds.labels == pytest.approx(np.array([1.0, 0.0]))


def test_csv_missing_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(EmptyDataset):
        load_dataset_csv(str(path))
