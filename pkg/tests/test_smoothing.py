import numpy as np
import pytest
from nlss.utils import ConfigError, DataError, Offsets, one_hot
from nlss.smoothing import SmoothingParams, gaussian_kernel, spatial_mask, temporal_mask, smooth


TOL = 1e-6
FLAT = np.inf


def half_plane(H=6, W=6):
    labels = np.zeros((1, H, W), dtype=np.uint8)
    labels[:, :, W // 2 :] = 1
    return labels


def test_gaussian_kernel_center():
    kernel = gaussian_kernel(3, 1.0)
    np.testing.assert_allclose(kernel[1, 1], 0.204180, TOL)
    np.testing.assert_allclose(kernel.sum(), 1.0, TOL)
    np.testing.assert_allclose(kernel, kernel.T, TOL)


def test_flat_kernel():
    np.testing.assert_allclose(gaussian_kernel(3, FLAT), 1.0 / 9, TOL)


def test_kernel_size_must_be_odd():
    with pytest.raises(ConfigError):
        gaussian_kernel(4, 1.0)


def test_spatial_half_plane_boundary():
    Z = one_hot(half_plane(), 2)
    M = spatial_mask(Z, gaussian_kernel(3, FLAT))
    np.testing.assert_allclose(M[0, :, 2, 2], [2 / 3, 1 / 3], TOL)
    np.testing.assert_allclose(M[0, :, 2, 3], [1 / 3, 2 / 3], TOL)
    np.testing.assert_allclose(M[0, :, 2, 0], [1.0, 0.0], TOL)


def test_spatial_preserves_unit_sum_near_unlabeled():
    labels = half_plane()
    labels[0, 1:4, 1:4] = Offsets.UNLABELED
    Z = one_hot(labels, 2)
    M = spatial_mask(Z, gaussian_kernel(5, 1.0))
    labeled = labels[0] != Offsets.UNLABELED
    np.testing.assert_allclose(M[0].sum(axis=0)[labeled], 1.0, TOL)


def test_temporal_average():
    seasons = np.zeros((1, 4, 5, 5), dtype=np.uint8)
    seasons[:, 3] = 1
    M = temporal_mask(seasons, 2, gaussian_kernel(3, 1.0))
    np.testing.assert_allclose(M[0, :, 2, 2], [0.75, 0.25], TOL)
    np.testing.assert_allclose(M[0, :, 0, 0], [0.75, 0.25], TOL)


def test_temporal_skips_unlabeled_seasons():
    seasons = np.zeros((1, 4, 3, 3), dtype=np.uint8)
    seasons[:, 0] = Offsets.UNLABELED
    seasons[:, 1] = 1
    M = temporal_mask(seasons, 2, gaussian_kernel(3, 1.0))
    np.testing.assert_allclose(M[0, :, 1, 1], [2 / 3, 1 / 3], TOL)


def test_temporal_needs_four_seasons():
    with pytest.raises(DataError):
        temporal_mask(np.zeros((1, 3, 4, 4), dtype=np.uint8), 2, gaussian_kernel(3, 1.0))


def test_smooth_constant_pixel():
    labels = np.zeros((1, 4, 4), dtype=np.uint8)
    seasons = np.zeros((1, 4, 4, 4), dtype=np.uint8)
    out = smooth(one_hot(labels, 2), seasons, SmoothingParams(beta=0.05, mu=0.15))
    np.testing.assert_allclose(out[0, :, 1, 1], [0.975, 0.025], TOL)


def test_smooth_keeps_distributions():
    rng = np.random.default_rng(0)
    seasons = rng.integers(0, 3, size=(2, 4, 6, 6)).astype(np.uint8)
    seasons[:, :, 0, :2] = Offsets.UNLABELED
    labels = seasons[:, 1]
    out = smooth(one_hot(labels, 3), seasons, SmoothingParams(beta=0.1, mu=0.3, kernel_size=3))
    labeled = labels != Offsets.UNLABELED
    np.testing.assert_allclose(out.sum(axis=1)[labeled], 1.0, TOL)
    np.testing.assert_equal(out.sum(axis=1)[~labeled], 0.0)
    assert np.all(out >= 0)


def test_smooth_disabled_is_identity():
    labels = half_plane()
    Z = one_hot(labels, 2)
    out = smooth(Z, np.repeat(labels[:, None], 4, axis=1), SmoothingParams(beta=0.0, mu=0.0))
    np.testing.assert_equal(out, Z)
    assert out is not Z


def test_smooth_uniform_only():
    labels = half_plane()
    out = smooth(one_hot(labels, 2), np.repeat(labels[:, None], 4, axis=1), SmoothingParams(beta=0.2, mu=0.0))
    np.testing.assert_allclose(out[0, :, 0, 0], [0.9, 0.1], TOL)


@pytest.mark.parametrize("beta,mu", [(-0.1, 0.0), (0.6, 0.6)])
def test_params_validated(beta, mu):
    with pytest.raises(ConfigError):
        SmoothingParams(beta=beta, mu=mu)


def test_params_unknown_key():
    with pytest.raises(ConfigError):
        SmoothingParams.from_dict(beta=0.1, radius=2)


@pytest.mark.parametrize("size", [3, 5])
def test_spatial_conserves_class_mass_when_fully_labeled(size):
    labels = np.random.default_rng(3).integers(0, 3, size=(1, 9, 9)).astype(np.uint8)
    Z = one_hot(labels, 3)
    M = spatial_mask(Z, gaussian_kernel(size, 1.0))
    np.testing.assert_allclose(M.sum(axis=(2, 3)), Z.sum(axis=(2, 3)), rtol=1e-9)


def test_spatial_mass_not_conserved_around_unlabeled():
    # normalized convolution keeps unit channel sums instead of per-class totals
    labels = np.random.default_rng(3).integers(0, 3, size=(1, 9, 9)).astype(np.uint8)
    labels[0, 3:6, 3:6] = Offsets.UNLABELED
    Z = one_hot(labels, 3)
    M = spatial_mask(Z, gaussian_kernel(3, 1.0))
    assert not np.allclose(M.sum(axis=(2, 3)), Z.sum(axis=(2, 3)))


def test_smooth_commutes_with_class_relabeling():
    rng = np.random.default_rng(4)
    C = 4
    seasons = rng.integers(0, C, size=(2, 4, 8, 8)).astype(np.uint8)
    seasons[:, :, :2, :2] = Offsets.UNLABELED
    labels = seasons[:, 2]
    perm = rng.permutation(C)
    relabel = np.concatenate([perm, np.arange(C, 256)]).astype(np.uint8)
    params = SmoothingParams(beta=0.05, mu=0.15, kernel_size=3)
    out = smooth(one_hot(labels, C), seasons, params)
    moved = smooth(one_hot(relabel[labels], C), relabel[seasons], params)
    np.testing.assert_allclose(moved[:, perm], out, rtol=0, atol=1e-12)
