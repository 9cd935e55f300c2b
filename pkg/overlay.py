"""Derived images from predicted stacks (narrow-band composites, oxygen saturation) and their
draping onto reconstructed surfaces."""

from dataclasses import dataclass
import logging
import pathlib

import matplotlib
import matplotlib.colors
import numpy as np
import PIL.Image
import scipy.ndimage
import scipy.optimize

from dataset import SpectralStack
from errors import ConfigError, DataError, ShapeError
from reconstruction import PinholeCamera, PointCloud
import config

logger = logging.getLogger(__name__)

MIN_TOTAL_HB = 1e-9
NO_DATA_GRAY = 128


# ========== extinction coefficients ==========
@dataclass
class ExtinctionTable:
    """Molar extinction coefficients of oxy- and deoxyhaemoglobin, interpolated linearly between rows."""
    wavelengths_nm: np.ndarray
    eps_hbo2: np.ndarray
    eps_hb: np.ndarray

    def __post_init__(self) -> None:
        self.wavelengths_nm = np.asarray(self.wavelengths_nm, dtype=np.float64).ravel()
        self.eps_hbo2 = np.asarray(self.eps_hbo2, dtype=np.float64).ravel()
        self.eps_hb = np.asarray(self.eps_hb, dtype=np.float64).ravel()
        n = self.wavelengths_nm.size
        if n < 2 or self.eps_hbo2.size != n or self.eps_hb.size != n:
            raise DataError('an extinction table needs at least two rows with one value per column')
        if np.any(np.diff(self.wavelengths_nm) <= 0):
            raise DataError('extinction table wavelengths must increase strictly')
        if not (np.all(self.eps_hbo2 > 0) and np.all(self.eps_hb > 0)):
            raise DataError('extinction coefficients must be positive')

    def at(self, wavelengths_nm) -> np.ndarray:
        """(C, 2) coefficients [HbO2, Hb] at the given wavelengths."""
        wl = np.asarray(wavelengths_nm, dtype=np.float64)
        lo, hi = self.wavelengths_nm[0], self.wavelengths_nm[-1]
        if wl.min() < lo or wl.max() > hi:
            raise DataError(f'extinction table covers {lo}-{hi} nm, stack spans {wl.min()}-{wl.max()} nm')
        return np.column_stack([np.interp(wl, self.wavelengths_nm, self.eps_hbo2),
                                np.interp(wl, self.wavelengths_nm, self.eps_hb)])

    @classmethod
    def load(cls, path: str | pathlib.Path) -> 'ExtinctionTable':
        """Reads a CSV with columns wavelength_nm,eps_hbo2,eps_hb."""
        path = pathlib.Path(path)
        try:
            lines = path.read_text().strip().splitlines()
        except OSError as e:
            raise DataError(f'cannot read extinction table {path}: {e}') from e
        if not lines or lines[0].replace(' ', '') != 'wavelength_nm,eps_hbo2,eps_hb':
            raise DataError(f'extinction table {path} must start with the header wavelength_nm,eps_hbo2,eps_hb')
        try:
            table = np.loadtxt(lines[1:], delimiter=',', ndmin=2)
        except ValueError as e:
            raise DataError(f'malformed extinction table {path}: {e}') from e
        if table.shape[1] != 3:
            raise DataError(f'extinction table {path} needs 3 columns, got {table.shape[1]}')
        return cls(table[:, 0], table[:, 1], table[:, 2])

    def save(self, path: str | pathlib.Path) -> None:
        rows = np.column_stack([self.wavelengths_nm, self.eps_hbo2, self.eps_hb])
        np.savetxt(path, rows, delimiter=',', fmt='%.10g', header='wavelength_nm,eps_hbo2,eps_hb', comments='')


# ========== narrow band ==========
@dataclass
class NarrowBandImage:
    bands: np.ndarray
    requested_nm: list[float]
    selected_nm: list[float]
    indices: list[int]

    @property
    def image(self) -> np.ndarray:
        """False-colour uint8 (H, W, 3): the longest requested band drives red, the shortest green and blue."""
        b = np.clip(np.round(self.bands), 0, 255).astype(np.uint8)
        if len(b) == 1:
            return np.stack([b[0]] * 3, axis=-1)
        if len(b) == 2:
            return np.stack([b[1], b[0], b[0]], axis=-1)
        return np.stack([b[2], b[1], b[0]], axis=-1)

    def save_png(self, path: str | pathlib.Path) -> pathlib.Path:
        path = pathlib.Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        PIL.Image.fromarray(self.image).save(path)
        return path


def nearest_band(wavelengths_nm: list[float], requested_nm: float) -> int:
    grid = np.asarray(wavelengths_nm, dtype=np.float64)
    return int(np.argmin(np.abs(grid - requested_nm)))


def narrow_band(msi: SpectralStack, requested_nm=config.NBI_WAVELENGTHS_NM) -> NarrowBandImage:
    """Selects the band nearest each requested wavelength, in ascending wavelength order."""
    requested = sorted(float(w) for w in requested_nm)
    if not requested:
        raise ConfigError('narrow_band needs at least one wavelength')
    indices = [nearest_band(msi.wavelengths_nm, w) for w in requested]
    selected = [float(msi.wavelengths_nm[i]) for i in indices]
    for want, got in zip(requested, selected):
        if abs(want - got) > 1e-9:
            logger.warning('no band at %g nm, substituting %g nm', want, got)
    return NarrowBandImage(msi.data[indices], requested, selected, indices)


# ========== oxygen saturation ==========
@dataclass
class SaturationMap:
    sao2: np.ndarray
    residual: np.ndarray
    coefficients: np.ndarray

    @property
    def defined(self) -> np.ndarray:
        return np.isfinite(self.sao2)

    def summary(self) -> dict:
        values = self.sao2[self.defined]
        return {
            'defined_pixels': int(values.size), 'undefined_pixels': int(self.sao2.size - values.size),
            'mean_sao2': float(values.mean()) if values.size else None,
            'mean_residual': float(np.nanmean(self.residual)) if values.size else None,
        }


def absorbance(values: np.ndarray, flat_field: float = config.FLAT_FIELD) -> np.ndarray:
    """-log10(I / I0); NaN where I <= 0."""
    if not flat_field > 0:
        raise ConfigError(f'flat field must be positive, got {flat_field}')
    values = np.asarray(values, dtype=np.float64)
    with np.errstate(divide='ignore', invalid='ignore'):
        return np.where(values > 0, -np.log10(values / flat_field), np.nan)


def unmix(absorbance_pixels: np.ndarray, design: np.ndarray) -> np.ndarray:
    """Least-squares (c1, c2, c3) per row of absorbance_pixels (P, C) with c1, c2 >= 0.

    Rows the unconstrained solution leaves non-negative keep it; the rest are re-solved with bounds.
    """
    coefficients = np.linalg.lstsq(design, absorbance_pixels.T, rcond=None)[0].T
    lower = np.array([0.0, 0.0, -np.inf])
    for i in np.flatnonzero(np.any(coefficients[:, :2] < 0, axis=1)):
        result = scipy.optimize.lsq_linear(design, absorbance_pixels[i], bounds=(lower, np.inf), method='bvls')
        coefficients[i] = result.x
    return coefficients


def oxygen_saturation(
        msi: SpectralStack | np.ndarray,
        ext: ExtinctionTable,
        wavelengths_nm: list[float] | None = None,
        flat_field: float = config.FLAT_FIELD,
        ) -> SaturationMap:
    """Modified Beer-Lambert unmixing A = c1 eps_HbO2 + c2 eps_Hb + c3 per pixel, SaO2 = c1 / (c1 + c2).

    Parameters
    ----------
    msi: SpectralStack | np.ndarray
        (C, H, W) intensities; a bare array needs wavelengths_nm.
    ext: ExtinctionTable
        Coefficients, interpolated onto the band grid.
    flat_field: float
        Reference intensity I0.

    Returns
    -------
    SaturationMap
        SaO2 in [0, 1] (NaN where undefined), RMS fit residual and the coefficients (H, W, 3).
    """
    if isinstance(msi, SpectralStack):
        data, wavelengths_nm = msi.data, msi.wavelengths_nm
    else:
        data = np.asarray(msi, dtype=np.float64)
        if wavelengths_nm is None:
            raise ConfigError('wavelengths_nm is required for a bare array')
    if data.ndim != 3 or data.shape[0] != len(wavelengths_nm):
        raise ShapeError(f'expected ({len(wavelengths_nm)}, H, W) intensities, got {data.shape}')
    channels, height, width = data.shape
    design = np.column_stack([ext.at(wavelengths_nm), np.ones(channels)])
    a = absorbance(data, flat_field).reshape(channels, -1).T
    usable = np.all(np.isfinite(a), axis=1)
    coefficients = np.full((a.shape[0], 3), np.nan)
    if usable.any():
        coefficients[usable] = unmix(a[usable], design)
    total = coefficients[:, 0] + coefficients[:, 1]
    with np.errstate(invalid='ignore', divide='ignore'):
        sao2 = np.where(total > MIN_TOTAL_HB, coefficients[:, 0] / total, np.nan)
    residual = np.sqrt(np.mean((coefficients @ design.T - a) ** 2, axis=1))
    undefined = int(np.sum(~np.isfinite(sao2)))
    if undefined:
        logger.info('oxygen saturation undefined at %d of %d pixels', undefined, sao2.size)
    return SaturationMap(np.clip(sao2, 0.0, 1.0).reshape(height, width), residual.reshape(height, width),
                         coefficients.reshape(height, width, 3))


# ========== draping ==========
def scalar_colors(values: np.ndarray, colormap: str = config.OVERLAY_COLORMAP, vmin: float = 0.0, vmax: float = 1.0) -> np.ndarray:
    """uint8 RGB per value; NaN maps to mid grey."""
    cmap = matplotlib.colormaps[colormap]
    rgba = cmap(matplotlib.colors.Normalize(vmin=vmin, vmax=vmax, clip=True)(np.nan_to_num(values, nan=vmin)))
    colors = np.round(rgba[:, :3] * 255).astype(np.uint8)
    colors[~np.isfinite(values)] = NO_DATA_GRAY
    return colors


def drape_overlay(
        cloud: PointCloud,
        image: np.ndarray,
        cam: PinholeCamera,
        colormap: str | None = config.OVERLAY_COLORMAP,
        value_range: tuple[float, float] = (0.0, 1.0),
        ) -> PointCloud:
    """Samples a map (H, W) or an RGB image (H, W, 3) bilinearly at each point's projection.

    Points behind the camera or projecting outside the image carry NaN (and grey when coloured).
    Scalar maps are coloured through colormap unless it is None; RGB images colour the points directly.
    """
    image = np.asarray(image)
    if image.shape[:2] != (cam.height, cam.width):
        raise ShapeError(f'overlay is {image.shape[:2]}, camera is {(cam.height, cam.width)}')
    if len(cloud) == 0:
        return cloud.with_values(np.zeros(0), np.zeros((0, 3), dtype=np.uint8) if image.ndim == 3 or colormap else None)
    in_front = cloud.points[:, 2] > 0
    uv = np.full((len(cloud), 2), -1.0)
    uv[in_front] = cam.project(cloud.points[in_front])
    visible = in_front & cam.contains(uv)
    coords = np.stack([uv[visible, 1], uv[visible, 0]])

    def sample(plane: np.ndarray) -> np.ndarray:
        out = np.full(len(cloud), np.nan)
        out[visible] = scipy.ndimage.map_coordinates(np.asarray(plane, dtype=np.float64), coords, order=1, mode='nearest')
        return out

    if image.ndim == 3:
        channels = np.stack([sample(image[..., c]) for c in range(3)], axis=1)
        colors = np.where(np.isfinite(channels), np.clip(np.round(channels), 0, 255), NO_DATA_GRAY).astype(np.uint8)
        values = channels.mean(axis=1)
    else:
        values = sample(image)
        colors = scalar_colors(values, colormap, *value_range) if colormap else None
    logger.info('draped overlay onto %d of %d points', int(visible.sum()), len(cloud))
    return cloud.with_values(values, colors)
