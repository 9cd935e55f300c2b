"""Metric surface reconstruction: structured-light spot triangulation, two-view structure from
motion (essential matrix with RANSAC, pose recovery, triangulation) and scale registration of
the SfM cloud against the structured-light clouds.

Camera convention: a point X1 in the frame-A camera maps to X2 = R X1 + t in frame B,
E = [t]x R, and matched normalised points satisfy x2^T E x1 = 0.
"""

from dataclasses import dataclass, field
import json
import logging
import math
import pathlib
import warnings

import joblib
import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.spatial
from scipy.spatial.transform import Rotation
import skimage.measure
import skimage.transform

from dataset import SpotSet
from detection import CorrespondenceSet, FilterThresholds, filter_correspondences, track_features
from errors import (AmbiguousPose, ConfigError, DataError, DegenerateGeometry, GeometryError,
                    InsufficientCorrespondences, RegistrationError, ShapeError)
import config

logger = logging.getLogger(__name__)

SCALE_STATUSES = ('up-to-scale', 'metric')


# ========== cameras ==========
@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError(f'focal lengths must be positive, got ({self.fx}, {self.fy})')
        if not (0 <= self.cx <= self.width - 1 and 0 <= self.cy <= self.height - 1):
            raise ConfigError(f'principal point ({self.cx}, {self.cy}) lies outside the {self.width}x{self.height} image')

    @classmethod
    def default(cls) -> 'PinholeCamera':
        return cls(config.CAMERA_FOCAL_PX, config.CAMERA_FOCAL_PX, (config.CAMERA_WIDTH - 1) / 2.0,
                   (config.CAMERA_HEIGHT - 1) / 2.0, config.CAMERA_WIDTH, config.CAMERA_HEIGHT)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def normalize(self, uv: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
        return np.column_stack([(uv[:, 0] - self.cx) / self.fx, (uv[:, 1] - self.cy) / self.fy])

    def denormalize(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        return np.column_stack([xy[:, 0] * self.fx + self.cx, xy[:, 1] * self.fy + self.cy])

    def project(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return self.denormalize(points[:, :2] / points[:, 2:3])

    def rays(self, uv: np.ndarray) -> np.ndarray:
        """Unit back-projection directions for pixel positions."""
        xy = self.normalize(uv)
        d = np.column_stack([xy, np.ones(xy.shape[0])])
        return d / np.linalg.norm(d, axis=1, keepdims=True)

    def contains(self, uv: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
        return (uv[:, 0] >= 0) & (uv[:, 0] <= self.width - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= self.height - 1)

    def to_dict(self) -> dict:
        return {'fx': self.fx, 'fy': self.fy, 'cx': self.cx, 'cy': self.cy, 'width': self.width, 'height': self.height}

    @classmethod
    def from_dict(cls, d: dict) -> 'PinholeCamera':
        try:
            return cls(float(d['fx']), float(d['fy']), float(d['cx']), float(d['cy']), int(d['width']), int(d['height']))
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f'malformed camera description: {e}') from e

    def save(self, path: str | pathlib.Path) -> None:
        pathlib.Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding='utf-8')

    @classmethod
    def load(cls, path: str | pathlib.Path) -> 'PinholeCamera':
        try:
            return cls.from_dict(json.loads(pathlib.Path(path).read_text(encoding='utf-8')))
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f'cannot read camera file {path}: {e}') from e


def rotation_y(angle_rad: float) -> np.ndarray:
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_about(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    """Rodrigues rotation about a unit axis."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = skew(axis)
    return np.eye(3) + math.sin(angle_rad) * k + (1.0 - math.cos(angle_rad)) * (k @ k)


def skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


@dataclass
class ProbeRig:
    """The spot projector: origin at (baseline, 0, 0) in the camera frame, rotated about y by
    -angle so its axis converges on the camera axis. Rays are given in the probe frame."""
    baseline_mm: float
    angle_deg: float
    rays: dict[int, np.ndarray]
    wavelengths_nm: dict[int, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.baseline_mm > 0:
            raise ConfigError(f'baseline must be positive, got {self.baseline_mm}')
        rays = {}
        for spot_id, ray in self.rays.items():
            ray = np.asarray(ray, dtype=np.float64).reshape(3)
            norm = np.linalg.norm(ray)
            if not norm > 0 or not np.isfinite(norm):
                raise ConfigError(f'ray {spot_id} has no direction')
            rays[int(spot_id)] = ray / norm
        self.rays = rays

    @property
    def origin(self) -> np.ndarray:
        return np.array([self.baseline_mm, 0.0, 0.0])

    @property
    def rotation(self) -> np.ndarray:
        return rotation_y(-math.radians(self.angle_deg))

    def ray_in_camera(self, spot_id: int) -> np.ndarray:
        if spot_id not in self.rays:
            raise DataError(f'spot {spot_id} has no calibrated projection ray')
        return self.rotation @ self.rays[spot_id]

    @classmethod
    def default(
            cls,
            spot_count: int = config.RIG_SPOT_COUNT,
            cone_half_angle_deg: float = config.RIG_CONE_HALF_ANGLE_DEG,
            baseline_mm: float = config.RIG_BASELINE_MM,
            angle_deg: float = config.RIG_ANGLE_DEG,
            ) -> 'ProbeRig':
        """Two interleaved rings of rays around the probe axis, one wavelength per spot."""
        rays, wavelengths = {}, {}
        for i in range(spot_count):
            cone = math.radians(cone_half_angle_deg) * (0.5 if i % 2 == 0 else 1.0)
            azimuth = 2.0 * math.pi * i / spot_count
            rays[i] = np.array([math.sin(cone) * math.cos(azimuth), math.sin(cone) * math.sin(azimuth), math.cos(cone)])
            wavelengths[i] = config.WAVELENGTHS_NM[i % len(config.WAVELENGTHS_NM)]
        return cls(baseline_mm, angle_deg, rays, wavelengths)

    def to_dict(self) -> dict:
        return {
            'baseline_mm': self.baseline_mm, 'angle_deg': self.angle_deg,
            'rays': [{'id': i, 'wavelength_nm': self.wavelengths_nm.get(i), 'direction': [float(x) for x in r]}
                     for i, r in sorted(self.rays.items())],
        }

    @classmethod
    def from_dict(cls, d: dict) -> 'ProbeRig':
        try:
            rays = {int(r['id']): np.asarray(r['direction'], dtype=np.float64) for r in d['rays']}
            wavelengths = {int(r['id']): float(r['wavelength_nm']) for r in d['rays'] if r.get('wavelength_nm') is not None}
            return cls(float(d['baseline_mm']), float(d['angle_deg']), rays, wavelengths)
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f'malformed rig calibration: {e}') from e

    def save(self, path: str | pathlib.Path) -> None:
        pathlib.Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding='utf-8')

    @classmethod
    def load(cls, path: str | pathlib.Path) -> 'ProbeRig':
        try:
            return cls.from_dict(json.loads(pathlib.Path(path).read_text(encoding='utf-8')))
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f'cannot read rig calibration {path}: {e}') from e


# ========== point clouds ==========
@dataclass
class PointCloud:
    points: np.ndarray
    scale_status: str = 'up-to-scale'
    source: np.ndarray | str = 'SfM'
    ids: np.ndarray | None = None
    values: np.ndarray | None = None
    colors: np.ndarray | None = None
    reprojection_error: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        n = self.points.shape[0]
        if not np.all(np.isfinite(self.points)):
            raise DataError('point coordinates must be finite')
        if self.scale_status not in SCALE_STATUSES:
            raise ConfigError(f'scale_status must be one of {SCALE_STATUSES}, got {self.scale_status!r}')
        if isinstance(self.source, str):
            self.source = np.full(n, self.source, dtype=object)
        self.source = np.asarray(self.source, dtype=object)
        for name in ('ids', 'values', 'colors', 'reprojection_error'):
            value = getattr(self, name)
            if value is not None and len(value) != n:
                raise ShapeError(f'{name} has {len(value)} entries for {n} points')
        if len(self.source) != n:
            raise ShapeError(f'source has {len(self.source)} entries for {n} points')

    def __len__(self) -> int:
        return self.points.shape[0]

    def subset(self, mask: np.ndarray) -> 'PointCloud':
        pick = lambda a: None if a is None else np.asarray(a)[mask]
        return PointCloud(self.points[mask], self.scale_status, self.source[mask], pick(self.ids),
                          pick(self.values), pick(self.colors), pick(self.reprojection_error))

    def scaled(self, s: float) -> 'PointCloud':
        """The cloud scaled by s and marked metric."""
        return PointCloud(self.points * s, 'metric', self.source.copy(), self.ids, self.values, self.colors,
                          self.reprojection_error)

    def with_values(self, values: np.ndarray, colors: np.ndarray | None = None) -> 'PointCloud':
        return PointCloud(self.points, self.scale_status, self.source, self.ids, values,
                          self.colors if colors is None else colors, self.reprojection_error)


def write_ply(cloud: PointCloud, path: str | pathlib.Path) -> pathlib.Path:
    """ASCII PLY with x, y, z and, when present, a float value and uchar red/green/blue per vertex."""
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ['ply', 'format ascii 1.0', f'comment scale_status {cloud.scale_status}',
             f'element vertex {len(cloud)}', 'property double x', 'property double y', 'property double z']
    if cloud.values is not None:
        lines.append('property double value')
    if cloud.colors is not None:
        lines += ['property uchar red', 'property uchar green', 'property uchar blue']
    lines.append('end_header')
    for i, p in enumerate(cloud.points):
        row = [repr(float(x)) for x in p]
        if cloud.values is not None:
            row.append(repr(float(cloud.values[i])))
        if cloud.colors is not None:
            row += [str(int(c)) for c in cloud.colors[i]]
        lines.append(' '.join(row))
    path.write_text('\n'.join(lines) + '\n', encoding='ascii')
    return path


def read_ply(path: str | pathlib.Path) -> PointCloud:
    path = pathlib.Path(path)
    try:
        lines = path.read_text(encoding='ascii').splitlines()
    except (OSError, UnicodeDecodeError) as e:
        raise DataError(f'cannot read PLY {path}: {e}') from e
    if not lines or lines[0] != 'ply' or 'end_header' not in lines:
        raise DataError(f'{path} is not an ASCII PLY file')
    end = lines.index('end_header')
    status, count, properties = 'up-to-scale', 0, []
    for line in lines[1:end]:
        parts = line.split()
        if parts[:2] == ['format', 'ascii'] or not parts:
            continue
        if parts[0] == 'format':
            raise DataError(f'{path}: only ASCII PLY is supported')
        if parts[:2] == ['comment', 'scale_status']:
            status = parts[2]
        elif parts[:2] == ['element', 'vertex']:
            count = int(parts[2])
        elif parts[0] == 'property':
            properties.append(parts[-1])
    try:
        table = np.array([[float(x) for x in line.split()] for line in lines[end + 1: end + 1 + count]]).reshape(count, len(properties))
    except ValueError as e:
        raise DataError(f'{path}: malformed vertex rows: {e}') from e
    column = {name: table[:, i] for i, name in enumerate(properties)}
    if not all(k in column for k in ('x', 'y', 'z')):
        raise DataError(f'{path}: vertices need x, y and z')
    colors = None
    if all(k in column for k in ('red', 'green', 'blue')):
        colors = np.column_stack([column['red'], column['green'], column['blue']]).astype(np.uint8)
    return PointCloud(np.column_stack([column['x'], column['y'], column['z']]), status, 'SfM',
                      values=column.get('value'), colors=colors)


# ========== ray geometry ==========
def _closest_points(o1: np.ndarray, d1: np.ndarray, o2: np.ndarray, d2: np.ndarray):
    """Closest points of line pairs o + s d (unit d). Returns (P1, P2, s1, s2, sin_angle)."""
    w0 = o1 - o2
    b = np.sum(d1 * d2, axis=-1)
    d = np.sum(d1 * w0, axis=-1)
    e = np.sum(d2 * w0, axis=-1)
    denom = 1.0 - b * b
    safe = np.where(denom > 1e-300, denom, 1.0)
    s1 = (b * e - d) / safe
    s2 = (e - b * d) / safe
    p1 = o1 + s1[..., None] * d1
    p2 = o2 + s2[..., None] * d2
    return p1, p2, s1, s2, np.sqrt(np.clip(denom, 0.0, 1.0))


def triangulate_sl(
        spots: SpotSet,
        cam: PinholeCamera,
        rig: ProbeRig,
        min_angle_deg: float = config.SL_MIN_ANGLE_DEG,
        skew_tolerance_mm: float = config.SL_SKEW_TOLERANCE_MM,
        ) -> tuple[PointCloud, dict[int, str]]:
    """Intersects each spot's camera ray with its calibrated probe ray.

    Parameters
    ----------
    spots: SpotSet
        Detected spot centres, ids matching the rig's ray table.
    cam: PinholeCamera
        Camera intrinsics.
    rig: ProbeRig
        Projector geometry.

    Returns
    -------
    cloud: PointCloud
        Metric points (mm) at the midpoints of the common perpendiculars, ids = spot ids.
    dropped: dict[int, str]
        Spot id to reason: 'parallel', 'behind', 'skew' or 'frustum'.
    """
    if not spots.spots:
        return PointCloud(np.zeros((0, 3)), 'metric', 'SL', ids=np.zeros(0, dtype=int)), {}
    ids = np.array([s.id for s in spots.spots])
    uv = np.array([[s.u, s.v] for s in spots.spots], dtype=np.float64)
    d_cam = cam.rays(uv)
    d_probe = np.stack([rig.ray_in_camera(int(i)) for i in ids])
    origin = np.broadcast_to(rig.origin, d_probe.shape)
    p1, p2, s1, s2, sin_angle = _closest_points(np.zeros_like(d_cam), d_cam, origin, d_probe)
    midpoint = 0.5 * (p1 + p2)

    dropped = {}
    keep = np.ones(len(ids), dtype=bool)
    min_sin = math.sin(math.radians(min_angle_deg))
    for i, spot_id in enumerate(ids):
        if sin_angle[i] < min_sin:
            dropped[int(spot_id)] = 'parallel'
        elif s1[i] <= 0 or s2[i] <= 0:
            dropped[int(spot_id)] = 'behind'
        elif np.linalg.norm(p1[i] - p2[i]) > skew_tolerance_mm:
            dropped[int(spot_id)] = 'skew'
        elif midpoint[i, 2] <= 0 or not cam.contains(cam.project(midpoint[i]))[0]:
            dropped[int(spot_id)] = 'frustum'
        else:
            continue
        keep[i] = False
    if dropped:
        logger.info('structured light: dropped %d of %d spots %s', len(dropped), len(ids), dropped)
    return PointCloud(midpoint[keep], 'metric', 'SL', ids=ids[keep]), dropped


# ========== essential matrix ==========
@dataclass
class RansacConfig:
    """threshold is a Sampson distance in pixels; the normalised threshold is threshold / focal length."""
    iterations: int = config.RANSAC_ITERATIONS
    sample_size: int = config.RANSAC_SAMPLE_SIZE
    threshold: float = config.RANSAC_THRESHOLD_PX
    confidence: float = config.RANSAC_CONFIDENCE
    min_inliers: int = config.RANSAC_MIN_INLIERS
    refine_steps: int = config.RANSAC_REFINE_STEPS
    seed: int = 0

    def __post_init__(self) -> None:
        if self.sample_size < 8:
            raise ConfigError(f'the eight-point solver needs samples of at least 8, got {self.sample_size}')
        if self.iterations < 1 or self.threshold <= 0:
            raise ConfigError('RANSAC needs iterations >= 1 and a positive threshold')
        if not 0.0 < self.confidence < 1.0:
            raise ConfigError(f'confidence must lie in (0, 1), got {self.confidence}')
        if self.refine_steps < 0:
            raise ConfigError(f'refine_steps must be >= 0, got {self.refine_steps}')


def _condition(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    centroid = x.mean(axis=0)
    spread = np.mean(np.linalg.norm(x - centroid, axis=1))
    scale = math.sqrt(2.0) / spread if spread > 0 else 1.0
    T = np.array([[scale, 0.0, -scale * centroid[0]], [0.0, scale, -scale * centroid[1]], [0.0, 0.0, 1.0]])
    xh = np.column_stack([x, np.ones(x.shape[0])]) @ T.T
    return xh, T


def _design_matrix(x1h: np.ndarray, x2h: np.ndarray) -> np.ndarray:
    return np.einsum('ni,nj->nij', x2h, x1h).reshape(-1, 9)


def project_essential(E: np.ndarray) -> np.ndarray:
    """Nearest matrix with singular values (s, s, 0), normalised to unit Frobenius norm."""
    U, _, Vt = np.linalg.svd(E)
    return U @ np.diag([1.0, 1.0, 0.0]) @ Vt / math.sqrt(2.0)


def eight_point(x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Least-squares essential matrix from N >= 8 normalised correspondences (Hartley conditioning).
    The (s, s, 0) constraint is imposed after undoing the conditioning, so exact data is fitted exactly."""
    if x1.shape[0] < 8:
        raise InsufficientCorrespondences(f'the eight-point solver needs 8 pairs, got {x1.shape[0]}')
    x1h, T1 = _condition(x1)
    x2h, T2 = _condition(x2)
    _, _, Vt = np.linalg.svd(_design_matrix(x1h, x2h))
    E = T2.T @ Vt[-1].reshape(3, 3) @ T1
    return project_essential(E)


class EssentialModel(skimage.transform.EssentialMatrixTransform):
    """EssentialMatrixTransform whose estimate() is eight_point(), for skimage.measure.ransac."""

    def estimate(self, src: np.ndarray, dst: np.ndarray) -> bool:
        self.params = eight_point(np.asarray(src, dtype=np.float64), np.asarray(dst, dtype=np.float64))
        return True


def sampson_distance(E: np.ndarray, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Square root of the Sampson error of each normalised pair."""
    with np.errstate(divide='ignore', invalid='ignore'):
        return EssentialModel(matrix=E).residuals(np.asarray(x1, dtype=np.float64), np.asarray(x2, dtype=np.float64))


def _degenerate_sample(x1: np.ndarray, x2: np.ndarray) -> bool:
    x1h, _ = _condition(x1)
    x2h, _ = _condition(x2)
    s = np.linalg.svd(_design_matrix(x1h, x2h), compute_uv=False)
    return s[min(7, s.size - 1)] < 1e-10 * s[0]


def estimate_essential_normalized(
        x1: np.ndarray,
        x2: np.ndarray,
        cfg: RansacConfig | None = None,
        focal_px: float = config.CAMERA_FOCAL_PX,
        ) -> tuple[np.ndarray, np.ndarray]:
    """RANSAC over eight-point samples on normalised coordinates, then re-estimation on the inliers.

    The consensus set is grown by re-fitting while that increases support. The returned mask only
    holds pairs within the threshold of the returned E, and never fewer than max(min_inliers, 8).
    """
    cfg = cfg or RansacConfig()
    n = x1.shape[0]
    needed = max(cfg.min_inliers, 8)
    if n < max(8, cfg.sample_size):
        raise InsufficientCorrespondences(f'{n} correspondences, at least {max(8, cfg.sample_size)} required')
    threshold = cfg.threshold / focal_px
    with warnings.catch_warnings():
        warnings.simplefilter('ignore')
        model, inliers = skimage.measure.ransac(
            (x1, x2), EssentialModel, min_samples=cfg.sample_size, residual_threshold=threshold,
            is_data_valid=lambda a, b: not _degenerate_sample(a, b), max_trials=cfg.iterations,
            stop_probability=cfg.confidence, rng=cfg.seed)
    count = 0 if inliers is None else int(np.count_nonzero(inliers))
    if model is None or count < needed:
        raise DegenerateGeometry(f'no model reached {needed} inliers (best {count}) in at most {cfg.iterations} trials')

    mask = np.asarray(inliers, dtype=bool)
    E = eight_point(x1[mask], x2[mask])
    for _ in range(cfg.refine_steps):
        grown = sampson_distance(E, x1, x2) < threshold
        if grown.sum() <= mask.sum():
            break
        mask, E = grown, eight_point(x1[grown], x2[grown])
    stable = mask & (sampson_distance(E, x1, x2) < threshold)
    if stable.sum() < needed:
        raise DegenerateGeometry(f'only {int(stable.sum())} pairs stay within {cfg.threshold} px of the refined model, need {needed}')
    if not np.array_equal(stable, mask):
        mask, E = stable, eight_point(x1[stable], x2[stable])
    logger.info('essential matrix: %d of %d inliers', int(mask.sum()), n)
    return E, mask


def estimate_essential(cs: CorrespondenceSet, cam: PinholeCamera, cfg: RansacConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    """E and the inlier mask over the accepted pairs of cs."""
    p, q = cs.arrays()
    return estimate_essential_normalized(cam.normalize(p), cam.normalize(q), cfg, 0.5 * (cam.fx + cam.fy))


# ========== pose ==========
@dataclass
class Pose:
    R: np.ndarray
    t: np.ndarray
    in_front: int
    candidate_counts: list[int]


def pose_candidates(E: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """The four (R, t) factorisations of E, with det(R) = +1 and unit t."""
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = U[:, 2] / np.linalg.norm(U[:, 2])
    R1, R2 = U @ W @ Vt, U @ W.T @ Vt
    return [(R1, t), (R1, -t), (R2, t), (R2, -t)]


def _two_view_rays(x1: np.ndarray, x2: np.ndarray, R: np.ndarray, t: np.ndarray):
    d1 = np.column_stack([x1, np.ones(x1.shape[0])])
    d1 /= np.linalg.norm(d1, axis=1, keepdims=True)
    d2 = np.column_stack([x2, np.ones(x2.shape[0])]) @ R
    d2 /= np.linalg.norm(d2, axis=1, keepdims=True)
    centre2 = np.broadcast_to(-R.T @ t, d2.shape)
    return _closest_points(np.zeros_like(d1), d1, centre2, d2)


def _midpoints(x1: np.ndarray, x2: np.ndarray, R: np.ndarray, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p1, p2, _, _, sin_angle = _two_view_rays(x1, x2, R, t)
    return 0.5 * (p1 + p2), sin_angle


def _linear_points(x1: np.ndarray, x2: np.ndarray, R: np.ndarray, t: np.ndarray) -> np.ndarray:
    P1 = np.hstack([np.eye(3), np.zeros((3, 1))])
    P2 = np.hstack([R, t.reshape(3, 1)])
    points = np.empty((x1.shape[0], 3))
    for i, (a, b) in enumerate(zip(x1, x2)):
        A = np.stack([a[0] * P1[2] - P1[0], a[1] * P1[2] - P1[1], b[0] * P2[2] - P2[0], b[1] * P2[2] - P2[1]])
        _, _, Vt = np.linalg.svd(A)
        X = Vt[-1]
        points[i] = X[:3] / X[3] if abs(X[3]) > 1e-300 else np.full(3, np.inf)
    return points


def recover_pose_normalized(E: np.ndarray, x1: np.ndarray, x2: np.ndarray) -> Pose:
    if np.linalg.norm(E) < 1e-12:
        raise DegenerateGeometry('essential matrix vanishes: no epipolar geometry (pure rotation or no motion)')
    if x1.shape[0] < 1:
        raise InsufficientCorrespondences('pose recovery needs at least one inlier pair')
    candidates = pose_candidates(E)
    counts = []
    for R, t in candidates:
        X, _ = _midpoints(x1, x2, R, t)
        depth2 = X @ R[2] + t[2]
        counts.append(int(np.sum((X[:, 2] > 0) & (depth2 > 0))))
    order = np.argsort(counts)[::-1]
    if counts[order[0]] == counts[order[1]]:
        raise AmbiguousPose(f'no pose candidate is strictly best (points in front: {counts})')
    R, t = candidates[order[0]]
    return Pose(R, t, counts[order[0]], counts)


def recover_pose(E: np.ndarray, cs: CorrespondenceSet, cam: PinholeCamera, mask: np.ndarray | None = None) -> Pose:
    """Chooses among the four factorisations of E the one placing most inlier points in front of both cameras."""
    p, q = cs.arrays()
    if mask is not None:
        p, q = p[mask], q[mask]
    return recover_pose_normalized(E, cam.normalize(p), cam.normalize(q))


def _signed_sampson(E: np.ndarray, x1h: np.ndarray, x2h: np.ndarray) -> np.ndarray:
    ex1 = x1h @ E.T
    etx2 = x2h @ E
    denom = ex1[:, 0] ** 2 + ex1[:, 1] ** 2 + etx2[:, 0] ** 2 + etx2[:, 1] ** 2
    return np.sum(x2h * ex1, axis=1) / np.sqrt(np.maximum(denom, 1e-300))


def refine_pose_normalized(pose: Pose, x1: np.ndarray, x2: np.ndarray, focal_px: float = config.CAMERA_FOCAL_PX) -> Pose:
    """Minimises the Sampson distance (in pixels) of the inlier pairs over R and the direction of t,
    starting from pose. The translation keeps unit length."""
    if x1.shape[0] < 5:
        raise InsufficientCorrespondences(f'pose refinement needs 5 pairs, got {x1.shape[0]}')
    x1h = np.column_stack([x1, np.ones(x1.shape[0])])
    x2h = np.column_stack([x2, np.ones(x2.shape[0])])
    tangent = scipy.linalg.null_space(pose.t.reshape(1, 3))

    def unpack(params: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        R = Rotation.from_rotvec(params[:3]).as_matrix() @ pose.R
        t = pose.t + tangent @ params[3:]
        return R, t / np.linalg.norm(t)

    def residuals(params: np.ndarray) -> np.ndarray:
        R, t = unpack(params)
        return focal_px * _signed_sampson(skew(t) @ R, x1h, x2h)

    start = np.abs(residuals(np.zeros(5)))
    result = scipy.optimize.least_squares(residuals, np.zeros(5), method='lm')
    if not result.success or not np.all(np.isfinite(result.x)):
        logger.warning('pose refinement did not converge (%s); keeping the RANSAC pose', result.message)
        return pose
    R, t = unpack(result.x)
    logger.debug('pose refinement: rms Sampson distance %.4f -> %.4f px',
                 float(np.sqrt(np.mean(start ** 2))), float(np.sqrt(np.mean(result.fun ** 2))))
    return Pose(R, t, pose.in_front, pose.candidate_counts)


def refine_pose(pose: Pose, cs: CorrespondenceSet, cam: PinholeCamera) -> Pose:
    p, q = cs.arrays()
    return refine_pose_normalized(pose, cam.normalize(p), cam.normalize(q), 0.5 * (cam.fx + cam.fy))


def triangulate_two_view(
        R: np.ndarray,
        t: np.ndarray,
        cs: CorrespondenceSet,
        cam: PinholeCamera,
        mask: np.ndarray | None = None,
        method: str = 'midpoint',
        min_angle_deg: float = config.MIN_TRIANGULATION_ANGLE_DEG,
        ) -> PointCloud:
    """Up-to-scale points in the frame-A camera with per-point reprojection error (pixels, mean of both views).

    Pairs whose rays are parallel (on the baseline) or that land behind either camera are dropped.
    Point ids index cs.pairs.
    """
    if method not in ('midpoint', 'linear'):
        raise ConfigError(f'unknown triangulation method {method!r}')
    p, q = cs.arrays()
    ids = np.array([i for i, pair in enumerate(cs.pairs) if pair.accepted], dtype=int)
    if mask is not None:
        p, q, ids = p[mask], q[mask], ids[mask]
    x1, x2 = cam.normalize(p), cam.normalize(q)
    X, sin_angle = _midpoints(x1, x2, R, t)
    if method == 'linear':
        X = _linear_points(x1, x2, R, t)
    X2 = X @ R.T + t
    keep = (sin_angle >= math.sin(math.radians(min_angle_deg))) & np.all(np.isfinite(X), axis=1)
    keep &= (X[:, 2] > 0) & (X2[:, 2] > 0)
    if (~keep).any():
        logger.info('two-view triangulation dropped %d of %d pairs', int((~keep).sum()), keep.size)
    X, X2, p, q, ids = X[keep], X2[keep], p[keep], q[keep], ids[keep]
    error = 0.5 * (np.linalg.norm(cam.project(X) - p, axis=1) + np.linalg.norm(cam.project(X2) - q, axis=1))
    return PointCloud(X, 'up-to-scale', 'SfM', ids=ids, reprojection_error=error)


# ========== scale registration ==========
def sl_reference(sl_pair: tuple[PointCloud, PointCloud]) -> PointCloud:
    """Per-spot average of two structured-light clouds, matched by spot id."""
    a, b = sl_pair
    if a.ids is None or b.ids is None:
        if len(a) != len(b):
            raise RegistrationError('structured-light clouds without ids must have equal length')
        return PointCloud(0.5 * (a.points + b.points), 'metric', 'SL')
    common, ia, ib = np.intersect1d(a.ids, b.ids, return_indices=True)
    return PointCloud(0.5 * (a.points[ia] + b.points[ib]), 'metric', 'SL', ids=common)


def _local_normals(points: np.ndarray, neighbors: int) -> np.ndarray | None:
    if points.shape[0] < 3:
        return None
    k = min(neighbors, points.shape[0] - 1) + 1
    _, idx = scipy.spatial.cKDTree(points).query(points, k=k)
    normals = np.empty_like(points)
    for i, nb in enumerate(idx):
        local = points[nb] - points[nb].mean(axis=0)
        normals[i] = np.linalg.svd(local)[2][-1]
    return normals


def _initial_scale(sfm: np.ndarray, ref: np.ndarray) -> float:
    """Ray-to-plane scale when the reference is planar, else the ratio of median ranges."""
    if ref.shape[0] >= 3:
        centroid = ref.mean(axis=0)
        _, sv, Vt = np.linalg.svd(ref - centroid)
        if sv[1] > 1e-9 * sv[0] and sv[2] < 0.05 * sv[1]:
            normal = Vt[-1]
            along = sfm @ normal
            usable = np.abs(along) > 1e-12 * np.linalg.norm(sfm, axis=1)
            ratios = (centroid @ normal) / along[usable]
            ratios = ratios[ratios > 0]
            if ratios.size:
                return float(np.median(ratios))
    return float(np.median(np.linalg.norm(ref, axis=1)) / np.median(np.linalg.norm(sfm, axis=1)))


def register_scale(
        sfm: PointCloud,
        sl_pair: tuple[PointCloud, PointCloud],
        gating_radius_mm: float = config.GATING_RADIUS_MM,
        residual: str = 'plane',
        iterations: int = config.REGISTRATION_ITERATIONS,
        ) -> tuple[PointCloud, float]:
    """Scales an up-to-scale SfM cloud onto the averaged structured-light shape.

    Parameters
    ----------
    sfm: PointCloud
        Up-to-scale cloud in the frame-A camera.
    sl_pair: tuple[PointCloud, PointCloud]
        Metric clouds from two structured-light frames.
    gating_radius_mm: float
        Nearest-neighbour pairs farther apart than this are ignored.
    residual: str
        'plane' measures distances to the local SL surface, 'point' to the nearest SL point.

    Returns
    -------
    cloud: PointCloud
        The metric SfM cloud.
    s: float
        The scale factor.
    """
    if residual not in ('plane', 'point'):
        raise ConfigError(f'unknown registration residual {residual!r}')
    ref = sl_reference(sl_pair).points
    if ref.shape[0] == 0:
        raise RegistrationError('the structured-light clouds share no spots')
    if len(sfm) == 0:
        raise RegistrationError('the SfM cloud is empty')
    points = sfm.points
    tree = scipy.spatial.cKDTree(ref)
    normals = _local_normals(ref, config.PLANE_NEIGHBORS) if residual == 'plane' else None
    s = _initial_scale(points, ref)
    if not (np.isfinite(s) and s > 0):
        raise RegistrationError(f'invalid initial scale {s}')

    for _ in range(iterations):
        dist, idx = tree.query(s * points, distance_upper_bound=gating_radius_mm)
        gated = np.isfinite(dist)
        if not gated.any():
            raise RegistrationError(f'no SfM point lies within {gating_radius_mm} mm of the structured-light shape')
        a, b = points[gated], ref[idx[gated]]
        if normals is not None:
            n = normals[idx[gated]]
            na, nb = np.sum(n * a, axis=1), np.sum(n * b, axis=1)
            denom = float(np.sum(na * na))
            s_new = float(np.sum(na * nb)) / denom if denom > 0 else float(np.sum(a * b)) / float(np.sum(a * a))
        else:
            s_new = float(np.sum(a * b)) / float(np.sum(a * a))
        if not (np.isfinite(s_new) and s_new > 0):
            raise RegistrationError(f'scale estimate {s_new} is not positive')
        converged = abs(s_new - s) <= 1e-12 * s
        s = s_new
        if converged:
            break
    logger.info('scale registration: s = %.9g from %d gated pairs', s, int(gated.sum()))
    return sfm.scaled(s), s


# ========== pipeline ==========
@dataclass
class ReconstructionConfig:
    ransac: RansacConfig = field(default_factory=RansacConfig)
    thresholds: FilterThresholds = field(default_factory=FilterThresholds)
    triangulation: str = 'midpoint'
    registration_residual: str = 'plane'
    gating_radius_mm: float = config.GATING_RADIUS_MM
    sl_min_angle_deg: float = config.SL_MIN_ANGLE_DEG
    sl_skew_tolerance_mm: float = config.SL_SKEW_TOLERANCE_MM
    max_frame_gap: int = config.MAX_FRAME_GAP
    refine_pose: bool = True


@dataclass
class Reconstruction:
    cloud: PointCloud
    scale: float
    pose: Pose
    sl_clouds: tuple[PointCloud, PointCloud]
    correspondences: CorrespondenceSet
    inliers: int
    sl_dropped: dict[int, str]

    def summary(self) -> dict:
        return {
            'points': len(self.cloud), 'scale': self.scale, 'inliers': self.inliers,
            'correspondences': len(self.correspondences), 'accepted': len(self.correspondences.accepted()),
            'rejected': self.correspondences.reasons(),
            'rotation': self.pose.R.tolist(), 'translation': self.pose.t.tolist(),
            'sl_points': [len(c) for c in self.sl_clouds],
            'sl_dropped': {str(k): v for k, v in sorted(self.sl_dropped.items())},
            'mean_reprojection_error_px': float(np.mean(self.cloud.reprojection_error)) if len(self.cloud) else None,
        }


def reconstruct_surface(
        cam: PinholeCamera,
        rig: ProbeRig,
        sl_spots: tuple[SpotSet, SpotSet],
        frames: tuple[np.ndarray, np.ndarray] | None = None,
        correspondences: CorrespondenceSet | None = None,
        cfg: ReconstructionConfig | None = None,
        ) -> Reconstruction:
    """Full two-view pipeline: correspondences, filtering, essential matrix, pose, triangulation,
    structured-light triangulation of both SL frames and scale registration."""
    cfg = cfg or ReconstructionConfig()
    if correspondences is None:
        if frames is None:
            raise ConfigError('either frames or correspondences are required')
        correspondences = track_features(frames[0], frames[1])
    cs = filter_correspondences(correspondences, cfg.thresholds)
    if cs.insufficient:
        raise InsufficientCorrespondences(f'{len(cs.accepted())} accepted correspondences, need {config.MIN_MATCHES}')
    E, mask = estimate_essential(cs, cam, cfg.ransac)
    cs = cs.reject(~mask, 'ransac')
    pose = recover_pose(E, cs, cam)
    if cfg.refine_pose:
        pose = refine_pose(pose, cs, cam)
    sfm = triangulate_two_view(pose.R, pose.t, cs, cam, method=cfg.triangulation)
    sl_results = [triangulate_sl(s, cam, rig, cfg.sl_min_angle_deg, cfg.sl_skew_tolerance_mm) for s in sl_spots]
    sl_clouds = (sl_results[0][0], sl_results[1][0])
    cloud, s = register_scale(sfm, sl_clouds, cfg.gating_radius_mm, cfg.registration_residual)
    dropped = {**sl_results[0][1], **sl_results[1][1]}
    return Reconstruction(cloud, s, pose, sl_clouds, cs, int(mask.sum()), dropped)


def frame_pairs(count: int, max_gap: int = config.MAX_FRAME_GAP) -> list[tuple[int, int]]:
    """Index pairs (i, j) with 0 < j - i <= max_gap; the surface is taken as rigid within that gap."""
    if max_gap < 1:
        raise ConfigError(f'max_frame_gap must be >= 1, got {max_gap}')
    return [(i, j) for i in range(count) for j in range(i + 1, min(count, i + max_gap + 1))]


def _safe_reconstruct(*args, **kwargs) -> Reconstruction | GeometryError:
    try:
        return reconstruct_surface(*args, **kwargs)
    except GeometryError as e:
        return e


def reconstruct_sequence(
        cam: PinholeCamera,
        rig: ProbeRig,
        frames: list[np.ndarray],
        sl_spots: list[tuple[SpotSet, SpotSet]],
        cfg: ReconstructionConfig | None = None,
        n_jobs: int = 1,
        ) -> list[Reconstruction | GeometryError]:
    """Reconstructs every frame pair within the rigidity gap in parallel. sl_spots[i] belongs to frame i.
    Failed pairs are returned as their exception."""
    cfg = cfg or ReconstructionConfig()
    if len(sl_spots) != len(frames):
        raise ShapeError(f'{len(sl_spots)} structured-light entries for {len(frames)} frames')
    pairs = frame_pairs(len(frames), cfg.max_frame_gap)
    return list(joblib.Parallel(n_jobs=n_jobs)(
        joblib.delayed(_safe_reconstruct)(cam, rig, sl_spots[i], (frames[i], frames[j]), None, cfg) for i, j in pairs
    ))
