"""Keypoint detection, patch descriptors, pyramidal Lucas-Kanade tracking and the
correspondence outlier filters."""

from dataclasses import dataclass, field, replace
import logging
import math
import pathlib
from typing import Callable

import cv2
import numpy as np
import scipy.ndimage
import scipy.spatial
import skimage

from errors import ConfigError, DataError, ShapeError
import config

logger = logging.getLogger(__name__)

REASONS = ('lost', 'descriptor', 'flow', 'symmetric', 'smoothness', 'ransac')


@dataclass
class Keypoints:
    points: np.ndarray
    descriptors: np.ndarray
    patch: int = config.DESCRIPTOR_PATCH

    def __len__(self) -> int:
        return self.points.shape[0]


DetectorHook = Callable[[np.ndarray], Keypoints]


def to_gray(frame: np.ndarray) -> np.ndarray:
    """Float64 grayscale in [0, 1] for RGB, RGBA or single-channel frames of any range."""
    frame = np.asarray(frame)
    if frame.ndim == 3:
        if frame.shape[2] == 4:
            frame = skimage.color.rgba2rgb(frame)
        frame = skimage.color.rgb2gray(frame)
    elif frame.ndim != 2:
        raise ShapeError(f'frames must be 2D or RGB, got shape {frame.shape}')
    return skimage.util.img_as_float64(frame) if frame.dtype.kind in 'ui' else frame.astype(np.float64)


def patch_descriptors(gray: np.ndarray, points: np.ndarray, patch: int = config.DESCRIPTOR_PATCH) -> np.ndarray:
    """Zero-mean, unit-norm intensity patches sampled bilinearly around (u, v) points.

    Flat patches map to the zero vector.
    """
    half = patch // 2
    offsets = np.arange(-half, half + 1, dtype=np.float64)
    dv, du = np.meshgrid(offsets, offsets, indexing='ij')
    rows = points[:, 1, None] + dv.ravel()[None]
    cols = points[:, 0, None] + du.ravel()[None]
    values = scipy.ndimage.map_coordinates(gray, [rows.ravel(), cols.ravel()], order=1, mode='nearest')
    values = values.reshape(points.shape[0], -1)
    values = values - values.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(values, axis=1, keepdims=True)
    return np.divide(values, norms, out=np.zeros_like(values), where=norms > 1e-12)


class CornerDetector:
    """Harris corners with patch descriptors, the default detector hook."""

    def __init__(
            self,
            min_distance: int = config.CORNER_MIN_DISTANCE,
            threshold_rel: float = config.CORNER_THRESHOLD_REL,
            patch: int = config.DESCRIPTOR_PATCH,
            max_corners: int | None = None,
            ) -> None:
        self.min_distance = min_distance
        self.threshold_rel = threshold_rel
        self.patch = patch
        self.max_corners = max_corners

    def __call__(self, frame: np.ndarray) -> Keypoints:
        gray = to_gray(frame)
        border = self.patch // 2 + config.LK_WINDOW + 1
        response = skimage.feature.corner_harris(gray, sigma=1)
        peaks = skimage.feature.corner_peaks(response, min_distance=self.min_distance,
                                             threshold_rel=self.threshold_rel, exclude_border=border,
                                             num_peaks=self.max_corners if self.max_corners else np.inf)
        points = peaks[:, ::-1].astype(np.float64).reshape(-1, 2)
        return Keypoints(points, patch_descriptors(gray, points, self.patch), self.patch)


# ========== tracking ==========
def _as_8bit(gray: np.ndarray) -> np.ndarray:
    return skimage.util.img_as_ubyte(np.clip(gray, 0.0, 1.0))


def lucas_kanade(
        frame_a: np.ndarray,
        frame_b: np.ndarray,
        points: np.ndarray,
        window: int = config.LK_WINDOW,
        levels: int = config.LK_LEVELS,
        iterations: int = config.LK_ITERATIONS,
        ) -> tuple[np.ndarray, np.ndarray]:
    """Tracks (u, v) points from frame_a to frame_b with OpenCV's pyramidal Lucas-Kanade.

    Parameters
    ----------
    frame_a, frame_b: np.ndarray
        Grayscale frames of equal shape with intensities in [0, 1]; tracked at 8 bits.
    points: np.ndarray
        (N, 2) positions in frame_a.
    window: int
        Half-size of the square integration window.
    levels: int
        Number of pyramid levels.
    iterations: int
        Iteration cap per level.

    Returns
    -------
    tracked: np.ndarray
        (N, 2) positions in frame_b.
    status: np.ndarray
        False where the window is untextured or the track left the frame.
    """
    n = points.shape[0]
    if n == 0:
        return np.zeros((0, 2)), np.zeros(0, dtype=bool)
    criteria = (cv2.TERM_CRITERIA_EPS | cv2.TERM_CRITERIA_COUNT, iterations, config.LK_EPSILON)
    tracked, status, _ = cv2.calcOpticalFlowPyrLK(
        _as_8bit(frame_a), _as_8bit(frame_b), points.astype(np.float32).reshape(-1, 1, 2), None,
        winSize=(2 * window + 1, 2 * window + 1), maxLevel=levels - 1, criteria=criteria,
        minEigThreshold=config.LK_MIN_EIGENVALUE)
    tracked = tracked.reshape(n, 2).astype(np.float64)
    height, width = frame_a.shape
    inside = (tracked[:, 0] >= 0) & (tracked[:, 0] <= width - 1) & (tracked[:, 1] >= 0) & (tracked[:, 1] <= height - 1)
    return tracked, (status.ravel() == 1) & inside & np.all(np.isfinite(tracked), axis=1)


# ========== correspondences ==========
@dataclass
class Correspondence:
    p: tuple[float, float]
    q: tuple[float, float]
    descriptor_dist: float
    flow_len_px: float
    sym_residual_px: float
    smoothness_px: float = 0.0
    accepted: bool = True
    reject_reason: str | None = None

    @property
    def flow(self) -> tuple[float, float]:
        return (self.q[0] - self.p[0], self.q[1] - self.p[1])


@dataclass
class CorrespondenceSet:
    pairs: list[Correspondence] = field(default_factory=list)
    frame_dims: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        for pair in self.pairs:
            if pair.accepted != (pair.reject_reason is None):
                raise DataError('a correspondence carries a reject reason exactly when it is not accepted')
            if pair.reject_reason is not None and pair.reject_reason not in REASONS:
                raise DataError(f'unknown reject reason {pair.reject_reason!r}')

    def __len__(self) -> int:
        return len(self.pairs)

    @classmethod
    def from_points(cls, p: np.ndarray, q: np.ndarray, frame_dims: tuple[int, int] | None = None) -> 'CorrespondenceSet':
        """Accepted pairs with zero descriptor and symmetric residuals, e.g. from a file or a synthetic scene."""
        p, q = np.asarray(p, dtype=np.float64).reshape(-1, 2), np.asarray(q, dtype=np.float64).reshape(-1, 2)
        if p.shape != q.shape:
            raise ShapeError(f'{p.shape[0]} points in frame A but {q.shape[0]} in frame B')
        pairs = [Correspondence((float(a[0]), float(a[1])), (float(b[0]), float(b[1])), 0.0,
                                float(math.hypot(b[0] - a[0], b[1] - a[1])), 0.0) for a, b in zip(p, q)]
        return cls(pairs, frame_dims)

    def accepted(self) -> list[Correspondence]:
        return [pair for pair in self.pairs if pair.accepted]

    @property
    def insufficient(self) -> bool:
        return len(self.accepted()) < config.MIN_MATCHES

    def arrays(self, accepted_only: bool = True) -> tuple[np.ndarray, np.ndarray]:
        """(N, 2) pixel positions in frame A and frame B."""
        pairs = self.accepted() if accepted_only else self.pairs
        p = np.array([pair.p for pair in pairs], dtype=np.float64).reshape(-1, 2)
        q = np.array([pair.q for pair in pairs], dtype=np.float64).reshape(-1, 2)
        return p, q

    def reasons(self) -> dict[str, int]:
        counts = {}
        for pair in self.pairs:
            if pair.reject_reason is not None:
                counts[pair.reject_reason] = counts.get(pair.reject_reason, 0) + 1
        return counts

    def reject(self, mask: np.ndarray, reason: str) -> 'CorrespondenceSet':
        """Marks accepted pairs where mask (over the accepted pairs) is True as rejected."""
        accepted = [i for i, pair in enumerate(self.pairs) if pair.accepted]
        pairs = list(self.pairs)
        for flag, i in zip(mask, accepted):
            if flag:
                pairs[i] = replace(pairs[i], accepted=False, reject_reason=reason)
        return CorrespondenceSet(pairs, self.frame_dims)


def track_features(
        frame_a: np.ndarray,
        frame_b: np.ndarray,
        detector_hook: DetectorHook | None = None,
        window: int = config.LK_WINDOW,
        levels: int = config.LK_LEVELS,
        iterations: int = config.LK_ITERATIONS,
        ) -> CorrespondenceSet:
    """Detects keypoints in frame_a and tracks them forward to frame_b and back again.

    Every pair carries its descriptor distance, flow length and forward-backward residual.
    Tracks that fail in either direction are kept as rejected with reason 'lost'.
    """
    gray_a, gray_b = to_gray(frame_a), to_gray(frame_b)
    if gray_a.shape != gray_b.shape:
        raise ShapeError(f'frames differ in size: {gray_a.shape} vs {gray_b.shape}')
    detector = detector_hook or CornerDetector()
    keypoints = detector(gray_a)
    points = keypoints.points
    if len(keypoints) == 0:
        logger.warning('no keypoints detected, 0 matches (need %d)', config.MIN_MATCHES)
        return CorrespondenceSet([], gray_a.shape)

    forward_pts, forward_ok = lucas_kanade(gray_a, gray_b, points, window, levels, iterations)
    backward_pts, backward_ok = lucas_kanade(gray_b, gray_a, forward_pts, window, levels, iterations)
    ok = forward_ok & backward_ok
    descriptors_b = patch_descriptors(gray_b, forward_pts, keypoints.patch)
    descriptor_dist = np.linalg.norm(keypoints.descriptors - descriptors_b, axis=1)
    flow_len = np.linalg.norm(forward_pts - points, axis=1)
    symmetric = np.linalg.norm(backward_pts - points, axis=1)

    pairs = []
    for i in range(points.shape[0]):
        if ok[i]:
            pairs.append(Correspondence((float(points[i, 0]), float(points[i, 1])),
                                        (float(forward_pts[i, 0]), float(forward_pts[i, 1])),
                                        float(descriptor_dist[i]), float(flow_len[i]), float(symmetric[i])))
        else:
            pairs.append(Correspondence((float(points[i, 0]), float(points[i, 1])),
                                        (float(points[i, 0]), float(points[i, 1])),
                                        math.inf, math.inf, math.inf, math.inf, False, 'lost'))
    result = CorrespondenceSet(pairs, gray_a.shape)
    if result.insufficient:
        logger.warning('only %d tracked matches (need %d)', len(result.accepted()), config.MIN_MATCHES)
    logger.info('tracked %d of %d keypoints', int(ok.sum()), points.shape[0])
    return result


# ========== filtering ==========
@dataclass
class FilterThresholds:
    descriptor: float = config.MAX_DESCRIPTOR_DISTANCE
    flow: float = config.MAX_FLOW_PX
    symmetric: float = config.MAX_SYMMETRIC_PX
    smoothness: float = config.MAX_SMOOTHNESS_PX
    neighbors: int = config.SMOOTHNESS_NEIGHBORS

    def __post_init__(self) -> None:
        for name in ('descriptor', 'flow', 'symmetric', 'smoothness'):
            if not getattr(self, name) >= 0:
                raise ConfigError(f'threshold {name} must be nonnegative, got {getattr(self, name)}')
        if self.neighbors < 1:
            raise ConfigError('smoothness needs at least one neighbour')

    @classmethod
    def unlimited(cls) -> 'FilterThresholds':
        return cls(math.inf, math.inf, math.inf, math.inf)


def _smoothness(points: np.ndarray, flows: np.ndarray, neighbors: int) -> np.ndarray:
    """Distance of every flow vector from the median flow of its nearest neighbours."""
    n = points.shape[0]
    if n < 2:
        return np.zeros(n)
    k = min(neighbors, n - 1)
    _, idx = scipy.spatial.cKDTree(points).query(points, k=k + 1)
    median = np.median(flows[idx[:, 1:]], axis=1)
    return np.linalg.norm(flows - median, axis=1)


def filter_correspondences(cs: CorrespondenceSet, thresholds: FilterThresholds | None = None) -> CorrespondenceSet:
    """Re-applies the descriptor, flow-length, symmetric-flow and smoothness criteria.

    Lost tracks stay rejected; every other pair is judged afresh, and the first failing
    criterion names the reject reason. Smoothness neighbourhoods are taken over all tracked
    pairs, so tightening a threshold can only shrink the accepted set.
    """
    thresholds = thresholds or FilterThresholds()
    tracked = [i for i, pair in enumerate(cs.pairs) if pair.reject_reason != 'lost']
    points = np.array([cs.pairs[i].p for i in tracked], dtype=np.float64).reshape(-1, 2)
    flows = np.array([cs.pairs[i].flow for i in tracked], dtype=np.float64).reshape(-1, 2)
    smooth = dict(zip(tracked, _smoothness(points, flows, thresholds.neighbors)))

    pairs = []
    for i, pair in enumerate(cs.pairs):
        if pair.reject_reason == 'lost':
            pairs.append(pair)
            continue
        reason = None
        if not pair.descriptor_dist <= thresholds.descriptor:
            reason = 'descriptor'
        elif not pair.flow_len_px <= thresholds.flow:
            reason = 'flow'
        elif not pair.sym_residual_px <= thresholds.symmetric:
            reason = 'symmetric'
        elif not smooth[i] <= thresholds.smoothness:
            reason = 'smoothness'
        pairs.append(replace(pair, smoothness_px=float(smooth[i]), accepted=reason is None, reject_reason=reason))
    result = CorrespondenceSet(pairs, cs.frame_dims)
    logger.info('accepted %d of %d correspondences, rejected %s', len(result.accepted()), len(result), result.reasons())
    return result


# ========== correspondence files ==========
def load_correspondences(path: str | pathlib.Path) -> CorrespondenceSet:
    """Reads a CSV with columns uA,vA,uB,vB. Loaded pairs carry zero descriptor and symmetric residuals."""
    path = pathlib.Path(path)
    try:
        lines = path.read_text().strip().splitlines()
    except OSError as e:
        raise DataError(f'cannot read correspondence file {path}: {e}') from e
    if not lines or lines[0].replace(' ', '') != 'uA,vA,uB,vB':
        raise DataError(f'correspondence file {path} must start with the header uA,vA,uB,vB')
    if len(lines) == 1:
        return CorrespondenceSet([])
    try:
        table = np.loadtxt(lines[1:], delimiter=',', ndmin=2)
    except ValueError as e:
        raise DataError(f'malformed correspondence file {path}: {e}') from e
    if table.shape[1] != 4 or not np.all(np.isfinite(table)):
        raise DataError(f'correspondence file {path} needs 4 finite columns')
    return CorrespondenceSet.from_points(table[:, :2], table[:, 2:])


def save_correspondences(cs: CorrespondenceSet, path: str | pathlib.Path, accepted_only: bool = True) -> None:
    p, q = cs.arrays(accepted_only)
    np.savetxt(path, np.hstack([p, q]), delimiter=',', fmt='%.10f', header='uA,vA,uB,vB', comments='')
