"""Synthetic endoscopic scene: a textured, tilted tissue surface seen by a moving camera, with the
probe's spots projected onto it. Produces everything the reconstruction pipeline consumes plus
the ground truth to score it against."""

from dataclasses import dataclass, field
import json
import logging
import math
import pathlib

import numpy as np
import PIL.Image
import scipy.ndimage

from dataset import Spot, SpotSet
from detection import CorrespondenceSet, load_correspondences, save_correspondences
from errors import ConfigError, DataError
from reconstruction import PinholeCamera, ProbeRig, rotation_about
import config

logger = logging.getLogger(__name__)

TEXEL_MM = 0.05
TEXTURE_EXTENT_MM = 60.0
TINT = (1.0, 0.62, 0.5)


@dataclass
class SceneConfig:
    depth_mm: float = config.SCENE_DEPTH_MM
    tilt_deg: tuple[float, float] = config.SCENE_TILT_DEG
    texture_sigma_px: float = config.SCENE_TEXTURE_SIGMA_PX
    motion_mm: tuple[float, float, float] = config.SCENE_MOTION_MM
    rotation_deg: float = config.SCENE_ROTATION_DEG
    rotation_axis: tuple[float, float, float] = config.SCENE_ROTATION_AXIS
    ridge_start_mm: float = config.SCENE_RIDGE_START_MM
    ridge_curvature: float = config.SCENE_RIDGE_CURVATURE
    grid_step_px: int = 16
    spot_noise_px: float = 0.0
    correspondence_noise_px: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        lo, hi = config.WORKING_DISTANCE_MM
        if not lo <= self.depth_mm <= hi:
            raise ConfigError(f'depth {self.depth_mm} mm lies outside the working distance {lo}-{hi} mm')
        if self.grid_step_px < 1:
            raise ConfigError(f'grid_step_px must be >= 1, got {self.grid_step_px}')
        if self.spot_noise_px < 0 or self.correspondence_noise_px < 0:
            raise ConfigError('noise levels must be non-negative')
        if self.ridge_curvature < 0:
            raise ConfigError(f'ridge_curvature must be non-negative, got {self.ridge_curvature}')


@dataclass
class TissueSurface:
    """Tilted plane n . (X - p0) = 0 in frame-A camera coordinates that rises towards the camera into a
    parabolic ridge, -h(a) with h(a) = c * max(a - a0, 0)^2 along the in-plane axis a. Textured in
    in-plane (a, b) millimetres."""
    point: np.ndarray
    normal: np.ndarray
    texture: np.ndarray
    ridge_start_mm: float = config.SCENE_RIDGE_START_MM
    ridge_curvature: float = config.SCENE_RIDGE_CURVATURE

    @classmethod
    def create(
            cls, depth_mm: float, tilt_deg: tuple[float, float], sigma_px: float, rng: np.random.Generator,
            ridge_start_mm: float = config.SCENE_RIDGE_START_MM, ridge_curvature: float = config.SCENE_RIDGE_CURVATURE,
            ) -> 'TissueSurface':
        tilt = rotation_about(np.array([1.0, 0.0, 0.0]), math.radians(tilt_deg[0])) @ \
            rotation_about(np.array([0.0, 1.0, 0.0]), math.radians(tilt_deg[1]))
        size = int(TEXTURE_EXTENT_MM / TEXEL_MM)
        noise = scipy.ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma_px)
        noise = (noise - noise.min()) / (noise.max() - noise.min())
        return cls(np.array([0.0, 0.0, depth_mm]), tilt @ np.array([0.0, 0.0, 1.0]), 30.0 + 190.0 * noise,
                   ridge_start_mm, ridge_curvature)

    @property
    def basis(self) -> tuple[np.ndarray, np.ndarray]:
        e1 = np.cross(np.array([0.0, 1.0, 0.0]), self.normal)
        e1 /= np.linalg.norm(e1)
        return e1, np.cross(self.normal, e1)

    def height(self, a: np.ndarray) -> np.ndarray:
        return self.ridge_curvature * np.square(np.maximum(a - self.ridge_start_mm, 0.0))

    def intersect(self, origins: np.ndarray, directions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Ray/surface hits and the ray parameters (non-positive means behind the origin or parallel).

        Starts at the hit on the flat part and walks back onto the ridge by Newton steps; the
        residual is convex in the ray parameter, so the iteration approaches the root from above."""
        directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
        origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), directions.shape)
        e1, _ = self.basis
        along = directions @ self.normal
        safe = np.where(np.abs(along) > 1e-12, along, np.nan)
        s = ((self.point - origins) @ self.normal) / safe
        rel0 = origins - self.point
        for _ in range(50):
            a = (rel0 + s[:, None] * directions) @ e1
            residual = rel0 @ self.normal + s * along + self.height(a)
            slope = along + 2.0 * self.ridge_curvature * np.maximum(a - self.ridge_start_mm, 0.0) * (directions @ e1)
            step = np.where(np.abs(slope) > 1e-12, residual / np.where(slope == 0, 1.0, slope), 0.0)
            s = s - step
            if not np.any(np.abs(step) > 1e-14 * np.maximum(np.abs(s), 1.0)):
                break
        s = np.nan_to_num(s, nan=-1.0)
        return origins + s[:, None] * directions, s

    def sample(self, points: np.ndarray) -> np.ndarray:
        e1, e2 = self.basis
        rel = points - self.point
        half = self.texture.shape[0] / 2.0
        coords = np.stack([rel @ e2 / TEXEL_MM + half, rel @ e1 / TEXEL_MM + half])
        return scipy.ndimage.map_coordinates(self.texture, coords, order=1, mode='reflect')


@dataclass
class SceneBundle:
    """Inputs for one reconstruction (two white-light frames, two SL spot sets, correspondences) and
    the truth: R, t of frame B relative to frame A, and the 3D points behind the correspondences."""
    camera: PinholeCamera
    rig: ProbeRig
    frames: tuple[np.ndarray, np.ndarray]
    sl_spots: tuple[SpotSet, SpotSet]
    correspondences: CorrespondenceSet
    points_gt: np.ndarray
    R: np.ndarray
    t: np.ndarray
    sl_dropped: dict[int, str] = field(default_factory=dict)


def render_frame(surface: TissueSurface, cam: PinholeCamera, R: np.ndarray, t: np.ndarray) -> np.ndarray:
    """RGB uint8 image of the surface seen from the camera at pose (R, t) relative to frame A."""
    v, u = np.mgrid[0:cam.height, 0:cam.width]
    rays_b = cam.rays(np.column_stack([u.ravel(), v.ravel()]).astype(np.float64))
    hits, s = surface.intersect(-R.T @ t, rays_b @ R)
    gray = np.where(s > 0, surface.sample(hits), 0.0).reshape(cam.height, cam.width)
    rgb = np.stack([gray * c for c in TINT], axis=-1)
    return np.clip(np.round(rgb), 0, 255).astype(np.uint8)


def project_spots(
        surface: TissueSurface, cam: PinholeCamera, rig: ProbeRig, rng: np.random.Generator | None = None, noise_px: float = 0.0,
        ) -> tuple[SpotSet, dict[int, str]]:
    """Where each probe ray meets the surface, as seen by the camera in frame A."""
    spots, dropped = [], {}
    for spot_id in sorted(rig.rays):
        hit, s = surface.intersect(rig.origin, rig.ray_in_camera(spot_id))
        if s[0] <= 0 or hit[0, 2] <= 0:
            dropped[spot_id] = 'behind'
            continue
        uv = cam.project(hit)[0]
        if noise_px > 0 and rng is not None:
            uv = uv + rng.normal(0.0, noise_px, 2)
        if not cam.contains(uv)[0]:
            dropped[spot_id] = 'frustum'
            continue
        spots.append(Spot(float(uv[0]), float(uv[1]), float(rig.wavelengths_nm.get(spot_id, math.nan)), spot_id))
    if dropped:
        logger.info('scene: %d spots fall outside the view %s', len(dropped), dropped)
    return SpotSet(spots, cam.width, cam.height), dropped


def analytic_correspondences(
        surface: TissueSurface, cam: PinholeCamera, R: np.ndarray, t: np.ndarray, step_px: int, margin_px: int = 8,
        ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Grid points in frame A, their exact positions in frame B and the 3D points (frame A) behind them."""
    v, u = np.mgrid[margin_px:cam.height - margin_px:step_px, margin_px:cam.width - margin_px:step_px]
    p = np.column_stack([u.ravel(), v.ravel()]).astype(np.float64)
    points, s = surface.intersect(np.zeros(3), cam.rays(p))
    in_b = points @ R.T + t
    q = cam.project(in_b)
    keep = (s > 0) & (in_b[:, 2] > 0) & cam.contains(q)
    return p[keep], q[keep], points[keep]


def make_scene(cfg: SceneConfig | None = None, cam: PinholeCamera | None = None, rig: ProbeRig | None = None) -> SceneBundle:
    """Builds a scene bundle; identical configs give identical bundles."""
    cfg = cfg or SceneConfig()
    cam = cam or PinholeCamera.default()
    rig = rig or ProbeRig.default()
    rng = np.random.default_rng(cfg.seed)
    surface = TissueSurface.create(cfg.depth_mm, cfg.tilt_deg, cfg.texture_sigma_px, rng, cfg.ridge_start_mm, cfg.ridge_curvature)
    R = rotation_about(np.asarray(cfg.rotation_axis, dtype=np.float64), math.radians(cfg.rotation_deg))
    t = np.asarray(cfg.motion_mm, dtype=np.float64)

    frames = (render_frame(surface, cam, np.eye(3), np.zeros(3)), render_frame(surface, cam, R, t))
    sl_a, dropped = project_spots(surface, cam, rig, rng, cfg.spot_noise_px)
    sl_b, _ = project_spots(surface, cam, rig, rng, cfg.spot_noise_px)
    p, q, points = analytic_correspondences(surface, cam, R, t, cfg.grid_step_px)
    if cfg.correspondence_noise_px > 0:
        q = q + rng.normal(0.0, cfg.correspondence_noise_px, q.shape)
    cs = CorrespondenceSet.from_points(p, q, (cam.height, cam.width))
    logger.info('scene: %d correspondences, %d spots, |t| = %.4f mm', len(cs), len(sl_a), float(np.linalg.norm(t)))
    return SceneBundle(cam, rig, frames, (sl_a, sl_b), cs, points, R, t, dropped)


# ========== bundles on disk ==========
def save_scene(bundle: SceneBundle, directory: str | pathlib.Path) -> pathlib.Path:
    """Writes frames as PNG, spots and correspondences as CSV and the rest as JSON; returns scene.json."""
    directory = pathlib.Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, frame in zip(('frame_a.png', 'frame_b.png'), bundle.frames):
        PIL.Image.fromarray(frame).save(directory / name)
    for name, spots in zip(('sl_a.csv', 'sl_b.csv'), bundle.sl_spots):
        spots.save(directory / name)
    save_correspondences(bundle.correspondences, directory / 'correspondences.csv')
    np.savetxt(directory / 'points_gt.csv', bundle.points_gt, delimiter=',', fmt='%.12f', header='x,y,z', comments='')
    bundle.rig.save(directory / 'rig.json')
    manifest = {
        'camera': bundle.camera.to_dict(), 'rig': 'rig.json',
        'frames': ['frame_a.png', 'frame_b.png'], 'sl_spots': ['sl_a.csv', 'sl_b.csv'],
        'correspondences': 'correspondences.csv', 'points_gt': 'points_gt.csv',
        'R': bundle.R.tolist(), 't': bundle.t.tolist(),
        'sl_dropped': {str(k): v for k, v in sorted(bundle.sl_dropped.items())},
    }
    path = directory / 'scene.json'
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding='utf-8')
    return path


def load_scene(path: str | pathlib.Path) -> SceneBundle:
    """Reads a bundle from its directory or its scene.json."""
    path = pathlib.Path(path)
    if path.is_dir():
        path = path / 'scene.json'
    try:
        manifest = json.loads(path.read_text(encoding='utf-8'))
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f'cannot read scene manifest {path}: {e}') from e
    root = path.parent
    try:
        cam = PinholeCamera.from_dict(manifest['camera'])
        rig = ProbeRig.load(root / manifest['rig'])
        frames = tuple(np.asarray(PIL.Image.open(root / name).convert('RGB')) for name in manifest['frames'])
        spots = tuple(SpotSet.load(root / name, cam.width, cam.height) for name in manifest['sl_spots'])
        cs = load_correspondences(root / manifest['correspondences'])
        points = np.loadtxt(root / manifest['points_gt'], delimiter=',', skiprows=1, ndmin=2)
        return SceneBundle(cam, rig, frames, spots, cs, points, np.asarray(manifest['R']), np.asarray(manifest['t']),
                           {int(k): v for k, v in manifest.get('sl_dropped', {}).items()})
    except KeyError as e:
        raise DataError(f'scene manifest {path} lacks {e}') from e
    except OSError as e:
        raise DataError(f'cannot read scene file: {e}') from e
