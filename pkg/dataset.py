"""Spectral stacks on disk, RGB synthesis, density maps, sparse stacks, augmentation,
fold splitting and the synthetic tissue generator."""

from dataclasses import dataclass
import json
import logging
import pathlib

import joblib
import numpy as np
import scipy.ndimage

from errors import ConfigError, DataError, ShapeError
import config

logger = logging.getLogger(__name__)

DensityMap = np.ndarray


# ========== domain types ==========
@dataclass
class SpectralStack:
    """An image cube stored band-sequentially as (channels, height, width), values in [0, 255]."""
    data: np.ndarray
    wavelengths_nm: list[float]

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3:
            raise ShapeError(f'stack data must have 3 axes (channels, height, width), got {data.shape}')
        wavelengths = [float(w) for w in self.wavelengths_nm]
        if len(wavelengths) != data.shape[0]:
            raise DataError(f'{len(wavelengths)} wavelengths for {data.shape[0]} channels')
        if len(wavelengths) > 1 and not np.all(np.diff(wavelengths) > 0):
            raise DataError(f'wavelengths must be strictly increasing, got {wavelengths}')
        if not np.all(np.isfinite(data)):
            raise DataError('stack contains non-finite values')
        self.data = np.clip(data, 0.0, config.VALUE_MAX)
        self.wavelengths_nm = wavelengths

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def pixels(self) -> np.ndarray:
        """Returns the per-pixel spectra as a (height * width, channels) array."""
        return self.data.reshape(self.channels, -1).T


@dataclass
class CameraResponse:
    """Spectral sensitivity h of an RGB camera over a band grid. Rows run blue, green, red."""
    matrix: np.ndarray
    wavelengths_nm: list[float]
    source_note: str = ''

    def __post_init__(self) -> None:
        matrix = np.asarray(self.matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != config.RGB_CHANNELS:
            raise ShapeError(f'camera response must be 3 x C, got {matrix.shape}')
        if matrix.shape[1] != len(self.wavelengths_nm):
            raise ShapeError(f'camera response has {matrix.shape[1]} columns for {len(self.wavelengths_nm)} wavelengths')
        if np.any(matrix < 0):
            raise DataError('camera response rows must be nonnegative')
        sums = matrix.sum(axis=1)
        if np.any(sums <= 0):
            raise DataError('camera response rows must not be all zero')
        self.matrix = matrix / sums[:, None]
        centroids = self.centroids_nm()
        if not np.all(np.diff(centroids) > 0):
            raise DataError(f'camera response rows must be ordered by increasing wavelength, centroids {centroids}')

    def centroids_nm(self) -> list[float]:
        """Response-weighted mean wavelength of each row, used as the RGB band metadata."""
        return [float(x) for x in self.matrix @ np.asarray(self.wavelengths_nm, dtype=np.float64)]

    @classmethod
    def default(cls, wavelengths_nm: list[float] | None = None) -> 'CameraResponse':
        """Smooth gaussian blue/green/red curves over the band grid."""
        wavelengths = np.asarray(config.WAVELENGTHS_NM if wavelengths_nm is None else wavelengths_nm, dtype=np.float64)
        rows = [np.exp(-0.5 * ((wavelengths - c) / w) ** 2)
                for c, w in zip(reversed(config.RGB_RESPONSE_CENTERS_NM), reversed(config.RGB_RESPONSE_WIDTHS_NM))]
        return cls(np.vstack(rows), list(wavelengths), 'gaussian default')

    @classmethod
    def load(cls, path: str | pathlib.Path) -> 'CameraResponse':
        """Reads a CSV with a wavelength header row followed by 3 response rows."""
        try:
            table = np.loadtxt(path, delimiter=',', ndmin=2)
        except (OSError, ValueError) as e:
            raise DataError(f'cannot read camera response {path}: {e}') from e
        if table.shape[0] != 4:
            raise DataError(f'camera response {path} needs 4 rows (wavelengths + 3 responses), found {table.shape[0]}')
        return cls(table[1:], list(table[0]), str(path))

    def save(self, path: str | pathlib.Path) -> None:
        table = np.vstack([np.asarray(self.wavelengths_nm), self.matrix])
        np.savetxt(path, table, delimiter=',', fmt='%.10g')


@dataclass(frozen=True)
class Spot:
    u: float
    v: float
    wavelength_nm: float
    id: int


@dataclass
class SpotSet:
    """Spot centres in image coordinates (u = column, v = row) of a width x height image."""
    spots: list[Spot]
    width: int
    height: int

    def __post_init__(self) -> None:
        ids = [s.id for s in self.spots]
        if len(set(ids)) != len(ids):
            raise DataError('spot ids must be unique')
        for s in self.spots:
            if not (0 <= s.u <= self.width - 1 and 0 <= s.v <= self.height - 1):
                raise DataError(f'spot {s.id} at ({s.u}, {s.v}) lies outside the {self.width}x{self.height} image')

    def __len__(self) -> int:
        return len(self.spots)

    def by_id(self) -> dict[int, Spot]:
        return {s.id: s for s in self.spots}

    @classmethod
    def load(cls, path: str | pathlib.Path, width: int, height: int) -> 'SpotSet':
        """Reads a CSV with columns id,u,v,wavelength_nm."""
        path = pathlib.Path(path)
        try:
            lines = path.read_text().strip().splitlines()
        except OSError as e:
            raise DataError(f'cannot read spot file {path}: {e}') from e
        if not lines or lines[0].replace(' ', '') != 'id,u,v,wavelength_nm':
            raise DataError(f'spot file {path} must start with the header id,u,v,wavelength_nm')
        if len(lines) == 1:
            return cls([], width, height)
        try:
            table = np.loadtxt(lines[1:], delimiter=',', ndmin=2)
        except ValueError as e:
            raise DataError(f'malformed spot file {path}: {e}') from e
        spots = [Spot(float(u), float(v), float(w), int(i)) for i, u, v, w in table]
        return cls(spots, width, height)

    def save(self, path: str | pathlib.Path) -> None:
        rows = np.array([[s.id, s.u, s.v, s.wavelength_nm] for s in self.spots], dtype=np.float64).reshape(-1, 4)
        np.savetxt(path, rows, delimiter=',', fmt=['%d', '%.10f', '%.10f', '%.4f'],
                   header='id,u,v,wavelength_nm', comments='')


@dataclass
class Sample:
    """One training/evaluation item: ground truth H, RGB R, density map D_hsi and sparse stack H_s."""
    hsi: SpectralStack
    rgb: SpectralStack
    density: DensityMap
    sparse: SpectralStack
    spots: SpotSet | None = None
    sample_id: str = ''
    source: str = 'synthetic'


# ========== stack files ==========
def _header_path(path: str | pathlib.Path) -> pathlib.Path:
    path = pathlib.Path(path)
    return path if path.suffix == '.json' else path.with_suffix('.json')


def _write_cube(data: np.ndarray, wavelengths_nm: list[float], path: str | pathlib.Path) -> pathlib.Path:
    header_path = _header_path(path)
    payload_path = header_path.with_suffix('.f32')
    channels, height, width = data.shape
    header = {
        'width': width, 'height': height, 'channels': channels,
        'wavelengths_nm': [float(w) for w in wavelengths_nm],
        'dtype': 'f32le', 'order': 'band-sequential', 'payload': payload_path.name,
    }
    header_path.parent.mkdir(parents=True, exist_ok=True)
    header_path.write_text(json.dumps(header, indent=2, sort_keys=True), encoding='utf-8')
    payload_path.write_bytes(np.ascontiguousarray(data, dtype='<f4').tobytes())
    return header_path


def _read_cube(path: str | pathlib.Path) -> tuple[np.ndarray, list[float]]:
    header_path = _header_path(path)
    try:
        header = json.loads(header_path.read_text(encoding='utf-8'))
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f'cannot read stack header {header_path}: {e}') from e
    for key in ('width', 'height', 'channels', 'wavelengths_nm', 'dtype', 'order'):
        if key not in header:
            raise DataError(f'stack header {header_path} lacks {key!r}')
    if header['dtype'] != 'f32le' or header['order'] != 'band-sequential':
        raise DataError(f'unsupported stack encoding {header["dtype"]}/{header["order"]}')
    channels, height, width = int(header['channels']), int(header['height']), int(header['width'])
    if min(channels, height, width) < 1:
        raise DataError(f'stack header {header_path} declares empty extents')
    payload_path = header_path.parent / header.get('payload', header_path.with_suffix('.f32').name)
    try:
        payload = payload_path.read_bytes()
    except OSError as e:
        raise DataError(f'cannot read stack payload {payload_path}: {e}') from e
    expected = channels * height * width * 4
    if len(payload) != expected:
        raise DataError(f'payload {payload_path} has {len(payload)} bytes, header implies {expected}')
    data = np.frombuffer(payload, dtype='<f4').reshape(channels, height, width).astype(np.float32)
    return data, list(header['wavelengths_nm'])


def save_stack(stack: SpectralStack, path: str | pathlib.Path) -> pathlib.Path:
    """Writes a JSON header and a sibling little-endian float32 payload. Returns the header path."""
    return _write_cube(stack.data, stack.wavelengths_nm, path)


def load_stack(path: str | pathlib.Path) -> SpectralStack:
    data, wavelengths = _read_cube(path)
    return SpectralStack(data, wavelengths)


def save_map(values: np.ndarray, path: str | pathlib.Path) -> pathlib.Path:
    """Writes a single-channel map (density, PSNR, SaO2) in the stack format, without clamping."""
    values = np.asarray(values, dtype=np.float32)
    if values.ndim == 2:
        values = values[None]
    return _write_cube(values, [float(i) for i in range(values.shape[0])], path)


def load_map(path: str | pathlib.Path) -> np.ndarray:
    data, _ = _read_cube(path)
    return data[0] if data.shape[0] == 1 else data


# ========== synthesis ==========
def synthesize_rgb(hsi: SpectralStack, response: CameraResponse) -> SpectralStack:
    """R = h * H applied per pixel, clamped to [0, 255]."""
    if response.matrix.shape[1] != hsi.channels:
        raise ShapeError(f'camera response has {response.matrix.shape[1]} columns, stack has {hsi.channels} channels')
    rgb = np.einsum('kc,chw->khw', response.matrix, hsi.data.astype(np.float64))
    return SpectralStack(rgb, response.centroids_nm())


def make_density_map(spots: SpotSet, sigma_px: float, dims: tuple[int, int]) -> DensityMap:
    """Gaussian bumps with unit peaks at every spot, combined by maximum.

    Parameters
    ----------
    spots: SpotSet
        Spot centres.
    sigma_px: float
        Standard deviation of each bump in pixels.
    dims: tuple[int, int]
        (height, width) of the map.

    Returns
    -------
    density: np.ndarray
        A (height, width) float32 map in [0, 1].
    """
    if sigma_px <= 0:
        raise ConfigError(f'sigma_px must be positive, got {sigma_px}')
    height, width = dims
    if (spots.height, spots.width) != (height, width):
        raise ShapeError(f'spot set is for {spots.height}x{spots.width}, map requested {height}x{width}')
    rows, cols = np.mgrid[0:height, 0:width].astype(np.float64)
    density = np.zeros((height, width), dtype=np.float64)
    for s in spots.spots:
        bump = np.exp(-((cols - s.u) ** 2 + (rows - s.v) ** 2) / (2.0 * sigma_px ** 2))
        np.maximum(density, bump, out=density)
    return density.astype(np.float32)


def rgb_density(density: DensityMap) -> DensityMap:
    """D_rgb = 1 - D_hsi."""
    return (np.float32(1.0) - density).astype(np.float32)


def make_sparse_stack(hsi: SpectralStack, density: DensityMap, threshold: float = config.SPARSE_THRESHOLD) -> SpectralStack:
    """H_s = D_hsi * H, zeroed wherever D_hsi falls below threshold."""
    if density.shape != (hsi.height, hsi.width):
        raise ShapeError(f'density map {density.shape} does not match stack {(hsi.height, hsi.width)}')
    weight = np.where(density >= threshold, density, np.float32(0.0)).astype(np.float32)
    return SpectralStack(hsi.data * weight[None], hsi.wavelengths_nm)


# ========== augmentation ==========
def _geometric_ops(height: int, width: int, seed: int, crop_size: int | None, n_crops: int) -> list:
    ops = [
        ('flip_horizontal', lambda a: np.flip(a, axis=-1)),
        ('flip_vertical', lambda a: np.flip(a, axis=-2)),
        ('rotate_90', lambda a: np.rot90(a, 1, axes=(-2, -1))),
        ('rotate_180', lambda a: np.rot90(a, 2, axes=(-2, -1))),
        ('rotate_270', lambda a: np.rot90(a, 3, axes=(-2, -1))),
    ]
    if crop_size is not None:
        if crop_size > height or crop_size > width or crop_size < 1:
            raise DataError(f'crop of {crop_size} px does not fit a {height}x{width} image')
        rng = np.random.default_rng(seed)
        for i in range(n_crops):
            top = int(rng.integers(0, height - crop_size + 1))
            left = int(rng.integers(0, width - crop_size + 1))
            ops.append((f'crop_{i}', lambda a, t=top, l=left: a[..., t: t + crop_size, l: l + crop_size]))
    return ops


def augment(stack: SpectralStack, seed: int, crop_size: int | None = None, n_crops: int = 1) -> list[SpectralStack]:
    """Flips, 90 degree rotations and random crops. Per-pixel spectra are never altered."""
    ops = _geometric_ops(stack.height, stack.width, seed, crop_size, n_crops)
    return [SpectralStack(np.ascontiguousarray(op(stack.data)), stack.wavelengths_nm) for _, op in ops]


def augment_sample(sample: Sample, seed: int, crop_size: int | None = None, n_crops: int = 1) -> list[Sample]:
    """Applies the same geometric transforms to every array of a sample."""
    ops = _geometric_ops(sample.hsi.height, sample.hsi.width, seed, crop_size, n_crops)
    augmented = []
    for name, op in ops:
        augmented.append(Sample(
            hsi=SpectralStack(np.ascontiguousarray(op(sample.hsi.data)), sample.hsi.wavelengths_nm),
            rgb=SpectralStack(np.ascontiguousarray(op(sample.rgb.data)), sample.rgb.wavelengths_nm),
            density=np.ascontiguousarray(op(sample.density)),
            sparse=SpectralStack(np.ascontiguousarray(op(sample.sparse.data)), sample.sparse.wavelengths_nm),
            spots=None,
            sample_id=f'{sample.sample_id}/{name}',
            source=sample.source,
        ))
    return augmented


# ========== folds ==========
def split_folds(dataset_ids: list, k: int, seed: int) -> list[tuple[list, list]]:
    """Partitions ids into k disjoint test folds whose sizes differ by at most one.

    Returns
    -------
    folds: list[tuple[list, list]]
        (train_ids, test_ids) per fold; train is the complement of test.
    """
    ids = list(dataset_ids)
    if k <= 0:
        raise ConfigError(f'fold count must be positive, got {k}')
    if k > len(ids):
        raise ConfigError(f'cannot split {len(ids)} items into {k} folds')
    order = np.random.default_rng(seed).permutation(len(ids))
    folds = []
    for chunk in np.array_split(order, k):
        test = set(int(i) for i in chunk)
        folds.append(([ids[i] for i in range(len(ids)) if i not in test], [ids[i] for i in sorted(test)]))
    return folds


# ========== synthetic tissue ==========
@dataclass
class Endmember:
    center_nm: float
    width_nm: float
    amplitude: float

    def spectrum(self, wavelengths_nm: np.ndarray) -> np.ndarray:
        bump = np.exp(-0.5 * ((wavelengths_nm - self.center_nm) / self.width_nm) ** 2)
        return config.SYNTH_BASELINE + self.amplitude * bump


def species_library(species: int, wavelengths_nm: list[float]) -> list[Endmember]:
    """Deterministic endmember spectra for a synthetic tissue type."""
    rng = np.random.default_rng([species, 104729])
    low, high = min(wavelengths_nm), max(wavelengths_nm)
    library = []
    for _ in range(config.SYNTH_ENDMEMBERS_PER_SPECIES):
        library.append(Endmember(
            center_nm=float(rng.uniform(low - 20.0, high + 20.0)),
            width_nm=float(rng.uniform(config.SYNTH_MIN_WIDTH_NM, 2.2 * config.SYNTH_MIN_WIDTH_NM)),
            amplitude=float(rng.uniform(0.45, 1.0) * config.SYNTH_MAX_AMPLITUDE),
        ))
    return library


def _smooth_field(rng: np.random.Generator, dims: tuple[int, int]) -> np.ndarray:
    noise = scipy.ndimage.gaussian_filter(rng.standard_normal(dims), sigma=config.SYNTH_FIELD_SIGMA_PX, mode='wrap')
    return (noise - noise.mean()) / (noise.std() + 1e-12)


def _synthetic_sample(
        index: int,
        seed_seq: np.random.SeedSequence,
        dims: tuple[int, int],
        library: list[Endmember],
        response: CameraResponse,
        wavelengths: list[float],
        sigma_px: float,
        threshold: float,
        source: str,
        ) -> Sample:
    rng = np.random.default_rng(seed_seq)
    height, width = dims
    grid = np.asarray(wavelengths, dtype=np.float64)

    # mix a random subset of endmembers with smooth abundance fields
    low, high = config.SYNTH_ENDMEMBERS_PER_STACK
    count = int(rng.integers(low, min(high, len(library)) + 1))
    chosen = rng.choice(len(library), size=count, replace=False)
    spectra = np.stack([library[i].spectrum(grid) for i in chosen])
    logits = np.stack([2.0 * _smooth_field(rng, dims) for _ in chosen])
    abundance = np.exp(logits - logits.max(axis=0))
    abundance /= abundance.sum(axis=0)
    shading = 0.7 + 0.3 / (1.0 + np.exp(-_smooth_field(rng, dims)))
    hsi = SpectralStack(shading[None] * np.einsum('ec,ehw->chw', spectra, abundance), wavelengths)

    # spots at distinct integer pixels, wavelengths cycling through the band grid
    n_spots = max(1, height * width // config.SYNTH_PIXELS_PER_SPOT)
    flat = rng.choice(height * width, size=min(n_spots, height * width), replace=False)
    spots = SpotSet([Spot(float(p % width), float(p // width), wavelengths[i % len(wavelengths)], i)
                     for i, p in enumerate(sorted(int(x) for x in flat))], width, height)

    density = make_density_map(spots, sigma_px, dims)
    return Sample(
        hsi=hsi,
        rgb=synthesize_rgb(hsi, response),
        density=density,
        sparse=make_sparse_stack(hsi, density, threshold),
        spots=spots,
        sample_id=f'{source}_{index:04d}',
        source=source,
    )


def generate_synthetic_dataset(
        n_stacks: int,
        dims: tuple[int, int],
        seed: int,
        species: int = 0,
        response: CameraResponse | None = None,
        wavelengths_nm: list[float] | None = None,
        sigma_px: float = config.DENSITY_SIGMA_PX,
        threshold: float = config.SPARSE_THRESHOLD,
        source: str | None = None,
        n_jobs: int = 1,
        ) -> list[Sample]:
    """Builds (H, R, D_hsi, H_s) quadruples from smooth mixtures of gaussian endmember spectra.

    Parameters
    ----------
    n_stacks: int
        Number of samples.
    dims: tuple[int, int]
        (height, width) of every stack.
    seed: int
        Seed; identical seeds give identical datasets.
    species: int
        Selects the endmember library, so different species have distinct spectra.
    response: CameraResponse
        Camera response used for R; defaults to the gaussian response over the grid.

    Returns
    -------
    samples: list[Sample]
    """
    height, width = dims
    if n_stacks < 0 or height < 1 or width < 1:
        raise ConfigError(f'invalid synthetic dataset request: {n_stacks} stacks of {height}x{width}')
    wavelengths = list(config.WAVELENGTHS_NM if wavelengths_nm is None else wavelengths_nm)
    response = response or CameraResponse.default(wavelengths)
    if len(response.wavelengths_nm) != len(wavelengths):
        raise ShapeError('camera response and band grid differ in length')
    library = species_library(species, wavelengths)
    source = source or f'species{species}'
    children = np.random.SeedSequence([seed, species]).spawn(n_stacks)
    samples = joblib.Parallel(n_jobs=n_jobs)(
        joblib.delayed(_synthetic_sample)(i, children[i], (height, width), library, response,
                                          wavelengths, sigma_px, threshold, source)
        for i in range(n_stacks)
    )
    logger.info('generated %d synthetic stacks of %dx%dx%d (species %d)', n_stacks, height, width, len(wavelengths), species)
    return list(samples)


# ========== dataset directories ==========
def save_dataset(samples: list[Sample], directory: str | pathlib.Path) -> pathlib.Path:
    """Writes every sample as four stack files plus spots, and a manifest listing them all."""
    directory = pathlib.Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for sample in samples:
        stem = sample.sample_id.replace('/', '_')
        entry = {
            'id': sample.sample_id, 'source': sample.source,
            'hsi': save_stack(sample.hsi, directory / f'{stem}_hsi.json').name,
            'rgb': save_stack(sample.rgb, directory / f'{stem}_rgb.json').name,
            'density': save_map(sample.density, directory / f'{stem}_density.json').name,
            'sparse': save_stack(sample.sparse, directory / f'{stem}_sparse.json').name,
            'spots': None,
        }
        if sample.spots is not None:
            sample.spots.save(directory / f'{stem}_spots.csv')
            entry['spots'] = f'{stem}_spots.csv'
        entries.append(entry)
    manifest = directory / 'manifest.json'
    manifest.write_text(json.dumps({'schema_version': 1, 'samples': entries}, indent=2, sort_keys=True), encoding='utf-8')
    return manifest


def load_dataset(path: str | pathlib.Path) -> list[Sample]:
    """Loads a dataset from its manifest (or the directory holding manifest.json)."""
    path = pathlib.Path(path)
    manifest = path / 'manifest.json' if path.is_dir() else path
    try:
        content = json.loads(manifest.read_text(encoding='utf-8'))
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f'cannot read dataset manifest {manifest}: {e}') from e
    root = manifest.parent
    samples = []
    for entry in content.get('samples', []):
        hsi = load_stack(root / entry['hsi'])
        spots = None
        if entry.get('spots'):
            spots = SpotSet.load(root / entry['spots'], hsi.width, hsi.height)
        samples.append(Sample(
            hsi=hsi,
            rgb=load_stack(root / entry['rgb']),
            density=load_map(root / entry['density']),
            sparse=load_stack(root / entry['sparse']),
            spots=spots,
            sample_id=entry['id'],
            source=entry.get('source', 'synthetic'),
        ))
    if not samples:
        raise DataError(f'dataset {manifest} lists no samples')
    return samples
