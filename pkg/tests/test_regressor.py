import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vhempc.nlp import check_gradient
from vhempc.regressor import (
    Kernel,
    KernelBasis,
    RegressorModel,
    Sample,
    feature_jacobian,
    featurize,
    fit_least_squares,
    latin_hypercube_centers,
    mixed_kernels,
    new_regressor,
    predict,
    predict_with_gradient,
    stable_rate,
    test_error,
    update,
)


@pytest.fixture
def basis():
    centers = latin_hypercube_centers([0.0, 0.0, 0.0], [1.0, 1.0, 20.0], 6, seed=1)
    return KernelBasis(centers, mixed_kernels())


def test_kernel_values_by_hand():
    c, w = np.array([1.0, 2.0]), np.array([0.0, 2.0])
    assert Kernel("gaussian", sigma=1.0)(c, w) == pytest.approx(np.exp(-0.5), rel=1e-15)
    # (0.1 * 4 + 0.05)^2
    assert Kernel("polynomial", scale=0.1, offset=0.05, degree=2)(c, w) == pytest.approx(0.2025, rel=1e-14)


def test_unknown_kernel_rejected():
    with pytest.raises(ValueError):
        Kernel("laplacian")


def test_mixed_component_at_origin():
    basis = KernelBasis(np.zeros((1, 3)), mixed_kernels(sigma=1.2247, offset=0.05))
    assert featurize(basis, np.zeros(3))[0] == pytest.approx(1.0 + 0.05 + 0.05**2, abs=1e-15)


def test_gaussian_component_at_its_centre():
    c = np.array([0.3, -1.0])
    basis = KernelBasis(c[None, :], (Kernel("gaussian", sigma=0.7),))
    model = RegressorModel(basis, np.array([1.0]))
    assert predict(model, c) == 1.0
    assert predict(RegressorModel(basis, np.zeros(1)), c + 1.0) == 0.0


def test_scalar_sgd_step():
    # phi(w) = 1 for a single Gaussian at w; theta 0, y 1, rate 0.5 -> 0.5
    basis = KernelBasis(np.zeros((1, 1)), (Kernel("gaussian"),))
    model = RegressorModel(basis, np.zeros(1), rate=lambda k: 0.5)
    assert update(model, Sample(np.zeros(1), 1.0), 1).theta[0] == pytest.approx(0.5, abs=1e-15)


def test_zero_residual_leaves_theta(basis):
    model = new_regressor(basis, 4)
    w = np.array([0.4, 0.4, 4.0])
    assert np.array_equal(update(model, Sample(w, predict(model, w)), 3).theta, model.theta)


def test_constant_rate_contracts_residual_geometrically(basis):
    w = np.array([0.6, 0.1, 12.0])
    phi = featurize(basis, w)
    gamma = 1.5 / (phi @ phi)
    model = RegressorModel(basis, np.zeros(basis.S), rate=lambda k: gamma)
    residuals = []
    for k in range(1, 8):
        residuals.append(abs(predict(model, w) - 3.0))
        model = update(model, Sample(w, 3.0), k)
    ratios = np.array(residuals[1:]) / np.array(residuals[:-1])
    np.testing.assert_allclose(ratios, abs(1 - gamma * (phi @ phi)), rtol=1e-8)


def test_mse_of_zero_model_on_unit_targets(basis):
    samples = [Sample(w, 1.0) for w in np.random.default_rng(0).random((5, 3))]
    assert test_error(RegressorModel(basis, np.zeros(basis.S)), samples) == pytest.approx(1.0)


def test_stable_rate_scales_with_features(basis):
    lo, hi = np.zeros(3), np.array([1.0, 1.0, 20.0])
    g = stable_rate(basis, lo, hi, count=200)
    W = np.random.default_rng(1).random((50, 3)) * hi
    assert all(g * (featurize(basis, w) @ featurize(basis, w)) <= 1.0 + 1e-9 for w in W)


def test_featurize_sums_kernels(basis):
    w = np.array([0.3, 0.6, 5.0])
    phi = featurize(basis, w)
    assert phi.shape == (basis.S,)
    by_hand = [sum(k(c, w) for k in basis.kernels) for c in basis.centers]
    np.testing.assert_allclose(phi, by_hand, rtol=1e-15)


def test_prediction_gradient_matches_differences(basis):
    model = new_regressor(basis, seed=3)
    w = np.array([0.2, 0.7, 4.0])
    assert check_gradient(lambda z: predict_with_gradient(model, z), w) <= 1e-5
    assert check_gradient(lambda z: (featurize(basis, z), feature_jacobian(basis, z)), w) <= 1e-5


def test_update_step_by_hand(basis):
    model = RegressorModel(basis, np.zeros(basis.S), gamma0=0.1)
    w = np.array([0.5, 0.5, 10.0])
    phi = featurize(basis, w)
    new = update(model, Sample(w, 2.0), k=4)
    # residual -2, rate 0.1 / sqrt(4)
    np.testing.assert_allclose(new.theta, 0.05 * 2.0 * phi, rtol=1e-14)


def test_frozen_model_ignores_updates(basis):
    model = new_regressor(basis, seed=0).freeze()
    assert update(model, Sample(np.ones(3), 5.0), 1) is model


def test_update_index_must_be_positive(basis):
    with pytest.raises(ValueError):
        update(new_regressor(basis, 0), Sample(np.ones(3), 1.0), 0)


def test_theta_shape_validated(basis):
    with pytest.raises(ValueError):
        RegressorModel(basis, np.zeros(basis.S + 1))


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.floats(0.0, 1.0), min_size=3, max_size=3),
    st.floats(-5.0, 5.0),
    st.integers(1, 1000),
)
def test_sgd_step_never_overshoots_when_rate_is_small(basis_w, y, k):
    centers = latin_hypercube_centers([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], 5, seed=2)
    basis = KernelBasis(centers, mixed_kernels())
    w = np.array(basis_w)
    phi = featurize(basis, w)
    # rate * |phi|^2 <= 1 keeps the updated residual the same sign and smaller
    gamma0 = 1.0 / (phi @ phi)
    model = RegressorModel(basis, np.random.default_rng(k).standard_normal(basis.S), gamma0=gamma0)
    before = abs(predict(model, w) - y)
    after = abs(predict(update(model, Sample(w, y), k), w) - y)
    assert after <= before + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 1.0))
def test_sgd_step_moves_towards_exact_weights(seed, fraction):
    # target in the feature span and rate * |phi|^2 <= 1: every step is a
    # relaxed projection, so the distance to the true weights cannot grow
    rng = np.random.default_rng(seed)
    basis = KernelBasis(rng.random((4, 3)), mixed_kernels())
    target = RegressorModel(basis, rng.standard_normal(4))
    model = RegressorModel(basis, rng.standard_normal(4))
    w = rng.random(3)
    phi = featurize(basis, w)
    model = RegressorModel(basis, model.theta, rate=lambda k: fraction / (phi @ phi))
    new = update(model, Sample(w, predict(target, w)), 1)
    assert np.linalg.norm(new.theta - target.theta) <= np.linalg.norm(model.theta - target.theta) + 1e-12


def test_training_mse_non_increasing_per_epoch():
    rng = np.random.default_rng(5)
    basis = KernelBasis(latin_hypercube_centers(np.zeros(3), np.ones(3), 5, seed=4), mixed_kernels())
    target = RegressorModel(basis, rng.standard_normal(basis.S))
    train = [Sample(w, predict(target, w)) for w in rng.random((30, 3))]
    gamma = 0.5 / max(featurize(basis, s.w) @ featurize(basis, s.w) for s in train)
    model = RegressorModel(basis, np.zeros(basis.S), rate=lambda k: gamma)
    errors = [test_error(model, train)]
    k = 1
    for _ in range(20):
        for sample in train:
            model = update(model, sample, k)
            k += 1
        errors.append(test_error(model, train))
    assert all(b <= a + 1e-15 for a, b in zip(errors, errors[1:]))
    assert errors[-1] < 0.1 * errors[0]


def test_least_squares_recovers_weights(basis):
    rng = np.random.default_rng(8)
    theta = rng.standard_normal(basis.S)
    target = RegressorModel(basis, theta)
    samples = [Sample(w, predict(target, w)) for w in rng.random((40, 3)) * [1, 1, 20]]
    np.testing.assert_allclose(fit_least_squares(basis, samples), theta, atol=1e-6)


def test_save_load_round_trip(basis, tmp_path):
    model = new_regressor(basis, seed=11, gamma0=0.02)
    model.save(tmp_path / "reg.json")
    loaded = RegressorModel.load(tmp_path / "reg.json")
    np.testing.assert_array_equal(loaded.theta, model.theta)
    np.testing.assert_array_equal(loaded.basis.centers, model.basis.centers)
    assert loaded.gamma0 == 0.02
    w = np.array([0.1, 0.9, 3.0])
    assert predict(loaded, w) == predict(model, w)


def test_test_error_needs_samples(basis):
    with pytest.raises(ValueError):
        test_error(new_regressor(basis, 0), [])
