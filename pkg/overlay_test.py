"""Usage: python -m pytest"""

import logging
import math

import numpy as np
import pytest

from dataset import SpectralStack
from errors import ConfigError, DataError, ShapeError
from overlay import (ExtinctionTable, absorbance, drape_overlay, narrow_band, nearest_band, oxygen_saturation,
                     scalar_colors)
from reconstruction import PinholeCamera, PointCloud
import config


def extinction() -> ExtinctionTable:
    grid = np.arange(450.0, 701.0, 5.0)
    return ExtinctionTable(grid, 0.5 + 0.4 * np.sin(grid / 30.0), 0.6 + 0.3 * np.cos(grid / 25.0))


def synthesize(c_hbo2: float, c_hb: float, offset: float = 0.05, size: int = 2) -> np.ndarray:
    """(24, size, size) intensities of a pixel obeying the modified Beer-Lambert law."""
    eps = extinction().at(config.WAVELENGTHS_NM)
    a = c_hbo2 * eps[:, 0] + c_hb * eps[:, 1] + offset
    intensity = config.FLAT_FIELD * 10.0 ** (-a)
    return np.broadcast_to(intensity[:, None, None], (len(a), size, size)).copy()


def ramp_stack() -> SpectralStack:
    data = np.arange(24, dtype=np.float64)[:, None, None] * np.ones((24, 3, 4))
    return SpectralStack(data, config.WAVELENGTHS_NM)


def plane_cloud(cam: PinholeCamera, depth: float = 30.0) -> PointCloud:
    v, u = np.mgrid[10:cam.height - 10:20, 10:cam.width - 10:20]
    uv = np.column_stack([u.ravel(), v.ravel()]).astype(np.float64) + 0.37
    return PointCloud(cam.rays(uv) / cam.rays(uv)[:, 2:3] * depth, 'metric')


# ========== ExtinctionTable ==========
def test_extinction_table_1():
    """Test description: coefficients are interpolated linearly between rows"""
    table = ExtinctionTable([500.0, 600.0], [1.0, 3.0], [2.0, 1.0])
    np.testing.assert_allclose(table.at([550.0]), [[2.0, 1.5]])

def test_extinction_table_2():
    """Test description: wavelengths outside the table are refused"""
    with pytest.raises(DataError):
        ExtinctionTable([500.0, 600.0], [1.0, 3.0], [2.0, 1.0]).at([450.0, 550.0])

def test_extinction_table_3():
    """Test description: unordered rows and non-positive coefficients"""
    with pytest.raises(DataError):
        ExtinctionTable([600.0, 500.0], [1.0, 3.0], [2.0, 1.0])
    with pytest.raises(DataError):
        ExtinctionTable([500.0, 600.0], [1.0, 0.0], [2.0, 1.0])

def test_extinction_table_4(tmp_path):
    """Test description: CSV tables read back and need their header"""
    table = extinction()
    table.save(tmp_path / 'hb.csv')
    loaded = ExtinctionTable.load(tmp_path / 'hb.csv')
    np.testing.assert_allclose(loaded.eps_hb, table.eps_hb, rtol=1e-9)
    (tmp_path / 'bad.csv').write_text('500,1,2\n600,2,1\n')
    with pytest.raises(DataError):
        ExtinctionTable.load(tmp_path / 'bad.csv')

# ========== narrow_band() ==========
def test_nearest_band_1():
    """Test description: 540 nm is band 8 of the 460-690 nm grid"""
    assert nearest_band(config.WAVELENGTHS_NM, 540.0) == 8
    assert nearest_band(config.WAVELENGTHS_NM, 415.0) == 0

def test_narrow_band_1(caplog):
    """Test description: 415 nm is substituted by 460 nm with a warning, 540 nm is exact"""
    with caplog.at_level(logging.WARNING, logger='overlay'):
        nbi = narrow_band(ramp_stack(), (540.0, 415.0))
    assert nbi.requested_nm == [415.0, 540.0]
    assert nbi.selected_nm == [460.0, 540.0]
    assert nbi.indices == [0, 8]
    assert any('415' in r.getMessage() for r in caplog.records)

def test_narrow_band_2():
    """Test description: exact grid wavelengths return the band data unmodified"""
    stack = ramp_stack()
    nbi = narrow_band(stack, (540.0, 600.0))
    np.testing.assert_array_equal(nbi.bands, stack.data[[8, 14]])
    assert nbi.image.shape == (3, 4, 3) and nbi.image.dtype == np.uint8
    assert nbi.image[0, 0, 0] == 14 and nbi.image[0, 0, 1] == 8

def test_narrow_band_3(tmp_path):
    """Test description: no wavelength requested; composites are written as PNG"""
    with pytest.raises(ConfigError):
        narrow_band(ramp_stack(), ())
    assert narrow_band(ramp_stack()).save_png(tmp_path / 'nbi' / 'a.png').exists()

# ========== oxygen_saturation() ==========
def test_oxygen_saturation_1():
    """Test description: pure oxyhaemoglobin attenuation gives SaO2 = 1"""
    result = oxygen_saturation(synthesize(0.8, 0.0), extinction(), config.WAVELENGTHS_NM)
    np.testing.assert_allclose(result.sao2, 1.0, atol=1e-6)
    np.testing.assert_allclose(result.residual, 0.0, atol=1e-9)

def test_oxygen_saturation_2():
    """Test description: an equal mixture gives SaO2 = 0.5 and recovers the offset"""
    result = oxygen_saturation(synthesize(0.4, 0.4, offset=0.1), extinction(), config.WAVELENGTHS_NM)
    np.testing.assert_allclose(result.sao2, 0.5, atol=1e-6)
    np.testing.assert_allclose(result.coefficients[..., 2], 0.1, atol=1e-6)

def test_oxygen_saturation_3():
    """Test description: zero-signal pixels are undefined, not zero"""
    data = synthesize(0.3, 0.6)
    data[:, 0, 1] = 0.0
    result = oxygen_saturation(data, extinction(), config.WAVELENGTHS_NM)
    assert math.isnan(result.sao2[0, 1])
    assert np.isfinite(result.sao2[0, 0]) and result.sao2[0, 0] == pytest.approx(1.0 / 3.0, abs=1e-6)
    assert result.summary()['undefined_pixels'] == 1

def test_oxygen_saturation_4():
    """Test description: predicted stacks carry their own wavelengths"""
    stack = SpectralStack(synthesize(0.5, 0.5), config.WAVELENGTHS_NM)
    assert np.nanmax(np.abs(oxygen_saturation(stack, extinction()).sao2 - 0.5)) < 1e-4

def test_oxygen_saturation_5():
    """Test description: bare arrays need wavelengths of matching length"""
    with pytest.raises(ConfigError):
        oxygen_saturation(synthesize(0.5, 0.5), extinction())
    with pytest.raises(ShapeError):
        oxygen_saturation(synthesize(0.5, 0.5), extinction(), config.WAVELENGTHS_NM[:10])

def test_absorbance_1():
    """Test description: the flat field has zero absorbance and a tenth of it one"""
    np.testing.assert_allclose(absorbance(np.array([255.0, 25.5])), [0.0, 1.0])
    with pytest.raises(ConfigError):
        absorbance(np.ones(2), flat_field=0.0)

# ========== drape_overlay() ==========
def test_drape_overlay_1():
    """Test description: a constant map puts its value on every point"""
    cam = PinholeCamera.default()
    cloud = plane_cloud(cam)
    draped = drape_overlay(cloud, np.full((cam.height, cam.width), 0.42), cam)
    np.testing.assert_allclose(draped.values, 0.42)
    assert draped.colors.shape == (len(cloud), 3)

def test_drape_overlay_2():
    """Test description: a column-gradient map gives each point its projected column"""
    cam = PinholeCamera.default()
    cloud = plane_cloud(cam)
    gradient = np.tile(np.arange(cam.width, dtype=np.float64), (cam.height, 1))
    draped = drape_overlay(cloud, gradient, cam, colormap=None)
    np.testing.assert_allclose(draped.values, cam.project(cloud.points)[:, 0], atol=1e-6)
    assert draped.colors is None

def test_drape_overlay_3():
    """Test description: points outside the view or behind the camera carry no data"""
    cam = PinholeCamera.default()
    cloud = PointCloud(np.array([[0.0, 0.0, 30.0], [100.0, 0.0, 30.0], [0.0, 0.0, -30.0]]), 'metric')
    draped = drape_overlay(cloud, np.full((cam.height, cam.width), 0.5), cam)
    assert draped.values[0] == pytest.approx(0.5)
    assert np.all(np.isnan(draped.values[1:]))
    assert np.all(draped.colors[1:] == 128)

def test_drape_overlay_4():
    """Test description: RGB composites colour the points directly; mismatched sizes are refused"""
    cam = PinholeCamera.default()
    image = np.zeros((cam.height, cam.width, 3), dtype=np.uint8)
    image[..., 0] = 200
    draped = drape_overlay(PointCloud(np.array([[0.0, 0.0, 30.0]]), 'metric'), image, cam)
    assert draped.colors[0].tolist() == [200, 0, 0]
    with pytest.raises(ShapeError):
        drape_overlay(PointCloud(np.array([[0.0, 0.0, 30.0]])), np.zeros((10, 10)), cam)

def test_scalar_colors_1():
    """Test description: NaN values are grey"""
    colors = scalar_colors(np.array([0.0, np.nan, 1.0]))
    assert colors[1].tolist() == [128, 128, 128]
    assert colors[0].tolist() != colors[2].tolist()
