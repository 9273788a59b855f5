import numpy as np
import pytest

from chanloc.turbo import GaussianBelief, extrinsic, gaussian_product, lmmse_a


def random_system(rng, rows, cols):
    phi = (rng.standard_normal((rows, cols)) + 1j * rng.standard_normal((rows, cols))) / np.sqrt(2)
    prior = GaussianBelief(
        rng.standard_normal(cols) + 1j * rng.standard_normal(cols),
        rng.uniform(0.1, 3.0, size=cols),
    )
    x = prior.mean + np.sqrt(prior.var) * (
        rng.standard_normal(cols) + 1j * rng.standard_normal(cols)
    ) / np.sqrt(2)
    s2 = rng.uniform(0.05, 1.0)
    y = phi @ x + np.sqrt(s2 / 2) * (rng.standard_normal(rows) + 1j * rng.standard_normal(rows))
    return y, phi, prior, s2


def innovation_form_posterior(y, phi, prior, s2):
    """Independent oracle: Kalman/innovation form of the Gaussian posterior."""
    v = np.diag(prior.var.astype(complex))
    gram = phi @ v @ phi.conj().T + s2 * np.eye(len(y))
    gain = v @ phi.conj().T @ np.linalg.inv(gram)
    mean = prior.mean + gain @ (y - phi @ prior.mean)
    cov = v - gain @ phi @ v
    return mean, np.real(np.diag(cov))


def test_scalar_bayes_example():
    post = lmmse_a(np.array([2.0 + 0j]), np.array([[1.0 + 0j]]), GaussianBelief([0j], [1.0]), 1.0)
    assert post.mean[0] == pytest.approx(1.0)
    assert post.var[0] == pytest.approx(0.5)


def test_matches_innovation_form_oracle():
    rng = np.random.default_rng(0)
    for _ in range(40):
        rows = rng.integers(6, 24)
        cols = rng.integers(2, min(rows, 12))
        y, phi, prior, s2 = random_system(rng, rows, cols)
        post = lmmse_a(y, phi, prior, s2)
        mean, var = innovation_form_posterior(y, phi, prior, s2)
        np.testing.assert_allclose(post.mean, mean, rtol=1e-9, atol=1e-11)
        np.testing.assert_allclose(post.var, var, rtol=1e-9, atol=1e-11)


def test_flat_prior_limit_is_least_squares():
    rng = np.random.default_rng(1)
    phi = rng.standard_normal((6, 6)) + 1j * rng.standard_normal((6, 6))
    x = rng.standard_normal(6) + 1j * rng.standard_normal(6)
    y = phi @ x
    prior = GaussianBelief(np.zeros(6, dtype=complex), np.full(6, 1e10))
    post = lmmse_a(y, phi, prior, 1e-8)
    np.testing.assert_allclose(post.mean, np.linalg.solve(phi, y), rtol=1e-5)


def test_uninformative_observation_returns_prior():
    rng = np.random.default_rng(2)
    y, phi, prior, _ = random_system(rng, 8, 4)
    post = lmmse_a(phi @ prior.mean, phi, prior, 1e12)
    np.testing.assert_allclose(post.mean, prior.mean, rtol=1e-6)
    np.testing.assert_allclose(post.var, prior.var, rtol=1e-6)


def test_per_entry_noise_variance_supported():
    rng = np.random.default_rng(3)
    y, phi, prior, s2 = random_system(rng, 10, 4)
    uniform = lmmse_a(y, phi, prior, s2)
    vector = lmmse_a(y, phi, prior, np.full(10, s2))
    np.testing.assert_allclose(uniform.mean, vector.mean, rtol=1e-12)


def test_dimension_mismatch_raises():
    with pytest.raises(ValueError):
        lmmse_a(np.zeros(3, complex), np.zeros((3, 2), complex), GaussianBelief(np.zeros(3, complex), np.ones(3)), 1.0)


def test_extrinsic_gaussian_division_example():
    ext = extrinsic(GaussianBelief([1.0 + 0j], [0.5]), GaussianBelief([0j], [1.0]))
    assert ext.mean[0] == pytest.approx(2.0)
    assert ext.var[0] == pytest.approx(1.0)


def test_extrinsic_zero_information_clips_to_uninformative():
    pri = GaussianBelief([0.5 + 0j], [1.0])
    ext = extrinsic(GaussianBelief([1.0 + 0j], [1.0]), pri)
    assert ext.var[0] == pytest.approx(1e12)
    assert ext.mean[0] == pytest.approx(1.0 + 0j)


def test_extrinsic_times_prior_recovers_posterior():
    rng = np.random.default_rng(4)
    for _ in range(50):
        pri = GaussianBelief(
            rng.standard_normal(5) + 1j * rng.standard_normal(5), rng.uniform(0.5, 2.0, 5)
        )
        post = GaussianBelief(
            rng.standard_normal(5) + 1j * rng.standard_normal(5),
            pri.var * rng.uniform(0.05, 0.95, 5),
        )
        ext = extrinsic(post, pri)
        back = gaussian_product(ext, pri)
        np.testing.assert_allclose(back.mean, post.mean, rtol=1e-9)
        np.testing.assert_allclose(back.var, post.var, rtol=1e-9)
