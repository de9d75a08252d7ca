"""Spatial-temporal label smoothing.

The one-hot label of the season fed to the network is mixed with a uniform distribution and with
two Gaussian-blurred label averages: the spatial mask (the same season blurred) and the temporal
mask (the four seasons averaged, then blurred)::

    Z' = (1 - beta - mu) Z + beta U + mu (M_s + M_t) / 2

Blurring uses reflect padding at the tile border and normalized convolution around unlabeled
pixels, so every labeled pixel keeps a unit channel sum.
"""
import logging
from dataclasses import dataclass
import numpy as np
from scipy import ndimage
from nlss.utils import exporter, dataclass_from_dict, one_hot, Offsets, ConfigError, DataError


__all__ = []
export = exporter(__all__)
logger = logging.getLogger("nlss")


@export
@dataclass
class SmoothingParams:
    """`beta` weighs the uniform distribution, `mu` the spatial-temporal masks"""

    beta: float = 0.05
    mu: float = 0.15
    kernel_size: int = 5
    sigma: float = 1.0

    def __post_init__(self):
        if self.beta < 0 or self.mu < 0 or self.beta + self.mu > 1.0 + 1e-12:
            raise ConfigError(f"need beta, mu >= 0 and beta + mu <= 1, got beta={self.beta}, mu={self.mu}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel size must be odd and positive, got {self.kernel_size}")
        if self.sigma <= 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")

    @property
    def enabled(self) -> bool:
        return self.beta > 0 or self.mu > 0

    @classmethod
    def from_dict(cls, **kwargs) -> "SmoothingParams":
        return dataclass_from_dict(cls, kwargs)


@export
def gaussian_kernel(size: int = 5, sigma: float = 1.0) -> np.ndarray:
    """Normalized `size x size` kernel `exp(-r^2 / 2 sigma^2)`; an infinite sigma gives the flat kernel"""
    if size < 1 or size % 2 == 0:
        raise ConfigError(f"kernel size must be odd and positive, got {size}")
    r = np.arange(size) - size // 2
    r2 = r[:, None] ** 2 + r[None, :] ** 2
    kernel = np.ones((size, size)) if np.isinf(sigma) else np.exp(-r2 / (2.0 * sigma ** 2))
    return kernel / kernel.sum()


def _blur(values: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Correlate over the two trailing axes with half-sample reflection at the border"""
    k = kernel.reshape((1,) * (values.ndim - 2) + kernel.shape)
    return ndimage.correlate(values, k, mode="reflect")


def _normalized_blur(mass: np.ndarray, support: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    num = _blur(mass, kernel)
    den = _blur(support, kernel)[..., None, :, :]
    return np.divide(num, den, out=np.zeros_like(num), where=den > 1e-12)


def _labeled(Z: np.ndarray) -> np.ndarray:
    return (Z.sum(axis=-3) > 0).astype(np.float64)


@export
def spatial_mask(Z: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Blur each class plane of a one-hot label `[..., C, H, W]`

    :param Z: One-hot labels, all-zero at unlabeled pixels
    :param kernel: A normalized kernel from `gaussian_kernel`
    :return: `M_s`, same shape as `Z`
    """
    Z = np.asarray(Z, dtype=np.float64)
    return _normalized_blur(Z, _labeled(Z), kernel)


@export
def temporal_mask(seasons: np.ndarray, num_classes: int, kernel: np.ndarray) -> np.ndarray:
    """Average the seasonal one-hot labels and blur the average

    :param seasons: Label maps `[B, S, H, W]` for the four seasons of each location
    :param num_classes: C
    :param kernel: A normalized kernel
    :return: `M_t`, `[B, C, H, W]`
    """
    seasons = np.asarray(seasons)
    if seasons.ndim != 4 or seasons.shape[1] != Offsets.NUM_SEASONS:
        raise DataError(f"expected {Offsets.NUM_SEASONS} seasonal label maps per location, got shape {seasons.shape}")
    B, S, H, W = seasons.shape
    stacked = one_hot(seasons.reshape(B * S, H, W), num_classes).reshape(B, S, num_classes, H, W)
    mass = stacked.sum(axis=1)
    support = (seasons != Offsets.UNLABELED).sum(axis=1).astype(np.float64)
    return _normalized_blur(mass, support, kernel)


@export
def smooth(Z: np.ndarray, seasons: np.ndarray, params: SmoothingParams) -> np.ndarray:
    """Smoothed soft labels `Z'` for the selected season `Z` (one-hot `[B, C, H, W]`)

    Unlabeled pixels stay all-zero so they drop out of the segmentation losses.
    """
    Z = np.asarray(Z, dtype=np.float64)
    labeled = _labeled(Z)[:, None]
    if not params.enabled:
        return Z.copy()
    C = Z.shape[1]
    out = (1.0 - params.beta - params.mu) * Z + params.beta / C
    if params.mu > 0:
        kernel = gaussian_kernel(params.kernel_size, params.sigma)
        out = out + 0.5 * params.mu * (spatial_mask(Z, kernel) + temporal_mask(seasons, C, kernel))
    return out * labeled
