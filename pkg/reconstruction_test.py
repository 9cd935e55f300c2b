"""Usage: python -m pytest"""

import math

import numpy as np
import pytest

from dataset import Spot, SpotSet
from detection import CorrespondenceSet
from errors import (ConfigError, DataError, DegenerateGeometry, InsufficientCorrespondences, RegistrationError,
                    ShapeError)
from reconstruction import (PinholeCamera, PointCloud, Pose, ProbeRig, RansacConfig, ReconstructionConfig, eight_point, estimate_essential,
                            estimate_essential_normalized, frame_pairs, pose_candidates, read_ply, reconstruct_surface,
                            reconstruct_sequence, recover_pose, recover_pose_normalized, refine_pose, refine_pose_normalized, register_scale,
                            rotation_about, sampson_distance, skew, sl_reference, triangulate_sl, triangulate_two_view, write_ply)


def plane_spots(depth: float, cam: PinholeCamera, rig: ProbeRig) -> SpotSet:
    """Spots where every probe ray meets the fronto-parallel plane z = depth."""
    spots = []
    for spot_id in sorted(rig.rays):
        d = rig.ray_in_camera(spot_id)
        hit = rig.origin + (depth - rig.origin[2]) / d[2] * d
        u, v = cam.project(hit)[0]
        spots.append(Spot(float(u), float(v), rig.wavelengths_nm[spot_id], spot_id))
    return SpotSet(spots, cam.width, cam.height)


def two_view_points(n: int = 60, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.column_stack([rng.uniform(-8, 8, n), rng.uniform(-6, 6, n), rng.uniform(25, 35, n)])


def true_motion() -> tuple[np.ndarray, np.ndarray]:
    R = rotation_about(np.array([0.0, 1.0, 0.0]), math.radians(5.0))
    t = np.array([-1.0, 0.1, 0.05])
    return R, t / np.linalg.norm(t)


def normalised_views(X: np.ndarray, R: np.ndarray, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    X2 = X @ R.T + t
    return X[:, :2] / X[:, 2:], X2[:, :2] / X2[:, 2:]


def pixel_correspondences(X: np.ndarray, R: np.ndarray, t: np.ndarray, cam: PinholeCamera) -> CorrespondenceSet:
    return CorrespondenceSet.from_points(cam.project(X), cam.project(X @ R.T + t), (cam.height, cam.width))


def same_up_to_sign(a: np.ndarray, b: np.ndarray) -> float:
    return min(np.linalg.norm(a - b), np.linalg.norm(a + b))


def planted_outliers(x1: np.ndarray, x2: np.ndarray, E: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """Replaces the last count points of x2 by uniform draws at least 10 px (f = 400) off their epipolar line."""
    x2 = x2.copy()
    for i in range(len(x2) - count, len(x2)):
        while True:
            x2[i] = rng.uniform(-0.35, 0.35, 2)
            if sampson_distance(E, x1[i:i + 1], x2[i:i + 1])[0] > 10.0 / 400.0:
                break
    return x2


# ========== PinholeCamera ==========
def test_pinhole_camera_1():
    """Test description: projection and back-projection agree"""
    cam = PinholeCamera.default()
    X = np.array([[1.0, -2.0, 30.0]])
    uv = cam.project(X)
    np.testing.assert_allclose(cam.rays(uv)[0], X[0] / np.linalg.norm(X[0]), atol=1e-12)
    homogeneous = cam.K @ X[0]
    np.testing.assert_allclose(homogeneous[:2] / homogeneous[2], uv[0], atol=1e-12)

def test_pinhole_camera_2():
    """Test description: principal point outside the image and non-positive focal length"""
    with pytest.raises(ConfigError):
        PinholeCamera(400, 400, 500, 100, 320, 240)
    with pytest.raises(ConfigError):
        PinholeCamera(0, 400, 100, 100, 320, 240)

def test_pinhole_camera_3(tmp_path):
    """Test description: camera files load back unchanged"""
    cam = PinholeCamera(410.0, 405.0, 150.0, 110.0, 320, 240)
    cam.save(tmp_path / 'camera.json')
    assert PinholeCamera.load(tmp_path / 'camera.json') == cam

# ========== ProbeRig ==========
def test_probe_rig_1(tmp_path):
    """Test description: rig calibration files keep rays and wavelengths"""
    rig = ProbeRig.default()
    rig.save(tmp_path / 'rig.json')
    loaded = ProbeRig.load(tmp_path / 'rig.json')
    assert loaded.baseline_mm == rig.baseline_mm and loaded.angle_deg == rig.angle_deg
    for spot_id, ray in rig.rays.items():
        np.testing.assert_allclose(loaded.rays[spot_id], ray)
    assert loaded.wavelengths_nm == rig.wavelengths_nm

def test_probe_rig_2():
    """Test description: unknown spot id and a zero ray"""
    with pytest.raises(DataError):
        ProbeRig.default().ray_in_camera(999)
    with pytest.raises(ConfigError):
        ProbeRig(5.0, 10.0, {0: np.zeros(3)})

# ========== triangulate_sl() ==========
def test_triangulate_sl_1():
    """Test description: spots on a plane 30 mm away triangulate back onto it"""
    cam, rig = PinholeCamera.default(), ProbeRig.default()
    cloud, dropped = triangulate_sl(plane_spots(30.0, cam, rig), cam, rig)
    assert dropped == {}
    assert len(cloud) == len(rig.rays)
    assert cloud.scale_status == 'metric'
    np.testing.assert_allclose(cloud.points[:, 2], 30.0, atol=1e-6)
    assert sorted(cloud.ids.tolist()) == sorted(rig.rays)

def test_triangulate_sl_2():
    """Test description: depth follows the plane across the working distance"""
    cam, rig = PinholeCamera.default(), ProbeRig.default()
    for depth in (18.0, 25.0, 38.0):
        cloud, _ = triangulate_sl(plane_spots(depth, cam, rig), cam, rig)
        np.testing.assert_allclose(cloud.points[:, 2], depth, atol=1e-6)

def test_triangulate_sl_3():
    """Test description: a displaced spot whose rays no longer meet is dropped as skew"""
    cam, rig = PinholeCamera.default(), ProbeRig.default()
    spots = plane_spots(30.0, cam, rig).spots
    spots[3] = Spot(spots[3].u, spots[3].v + 6.0, spots[3].wavelength_nm, spots[3].id)
    cloud, dropped = triangulate_sl(SpotSet(spots, cam.width, cam.height), cam, rig)
    assert dropped == {spots[3].id: 'skew'}
    assert spots[3].id not in cloud.ids.tolist()

def test_triangulate_sl_4():
    """Test description: a spot reached only behind the probe is dropped"""
    cam = PinholeCamera.default()
    rig = ProbeRig(5.0, 10.0, {0: np.array([0.0, 0.0, -1.0])})
    _, dropped = triangulate_sl(SpotSet([Spot(cam.cx, cam.cy, 500.0, 0)], cam.width, cam.height), cam, rig)
    assert dropped[0] in ('behind', 'parallel')

def test_triangulate_sl_5():
    """Test description: no spots, empty metric cloud"""
    cam = PinholeCamera.default()
    cloud, dropped = triangulate_sl(SpotSet([], cam.width, cam.height), cam, ProbeRig.default())
    assert len(cloud) == 0 and dropped == {} and cloud.scale_status == 'metric'

# ========== eight_point() / estimate_essential() ==========
def test_eight_point_1():
    """Test description: exact data satisfies the epipolar constraint and E has singular values (s, s, 0)"""
    R, t = true_motion()
    x1, x2 = normalised_views(two_view_points(), R, t)
    E = eight_point(x1, x2)
    s = np.linalg.svd(E, compute_uv=False)
    assert s[0] == pytest.approx(s[1]) and s[2] < 1e-12
    assert np.max(sampson_distance(E, x1, x2)) < 1e-9
    assert same_up_to_sign(E, skew(t) @ R / np.linalg.norm(skew(t) @ R)) < 1e-6

def test_eight_point_2():
    """Test description: fewer than eight pairs"""
    with pytest.raises(InsufficientCorrespondences):
        eight_point(np.zeros((7, 2)), np.zeros((7, 2)))

def test_estimate_essential_1():
    """Test description: pure translation along x gives E proportional to [t]x"""
    X = two_view_points()
    t = np.array([1.0, 0.0, 0.0])
    x1, x2 = normalised_views(X, np.eye(3), t)
    E, mask = estimate_essential_normalized(x1, x2)
    assert mask.all()
    assert same_up_to_sign(E, skew(t) / np.linalg.norm(skew(t))) < 1e-6

def test_estimate_essential_2():
    """Test description: 30% gross outliers are never accepted and at least 95% of the inliers are kept, over 20 seeds"""
    R, t = true_motion()
    E_true = skew(t) @ R
    for seed in range(20):
        x1, x2 = normalised_views(two_view_points(100, seed=seed), R, t)
        x2 = planted_outliers(x1, x2, E_true, 30, np.random.default_rng(100 + seed))
        E, mask = estimate_essential_normalized(x1, x2, RansacConfig(seed=seed))
        assert mask[70:].sum() == 0
        assert mask[:70].mean() >= 0.95
        assert same_up_to_sign(E, E_true / np.linalg.norm(E_true)) < 1e-6

def test_estimate_essential_3():
    """Test description: pixel correspondences go through the camera intrinsics"""
    cam = PinholeCamera.default()
    R, t = true_motion()
    E, mask = estimate_essential(pixel_correspondences(two_view_points(), R, t, cam), cam)
    assert mask.all()
    assert same_up_to_sign(E, skew(t) @ R / np.linalg.norm(skew(t) @ R)) < 1e-6

def test_estimate_essential_4():
    """Test description: too few pairs and an invalid RANSAC configuration"""
    with pytest.raises(InsufficientCorrespondences):
        estimate_essential_normalized(np.zeros((5, 2)), np.zeros((5, 2)))
    with pytest.raises(ConfigError):
        RansacConfig(sample_size=7)

def test_estimate_essential_5():
    """Test description: an inlier minimum the data cannot reach is a degenerate configuration, not an empty mask"""
    R, t = true_motion()
    x1, x2 = normalised_views(two_view_points(60, seed=5), R, t)
    x2 = planted_outliers(x1, x2, skew(t) @ R, 20, np.random.default_rng(6))
    with pytest.raises(DegenerateGeometry):
        estimate_essential_normalized(x1, x2, RansacConfig(min_inliers=50))
    E, mask = estimate_essential_normalized(x1, x2, RansacConfig(min_inliers=40))
    assert mask.sum() == 40

# ========== pose_candidates() / recover_pose() ==========
def test_pose_candidates_1():
    """Test description: four proper rotations with unit translations"""
    R, t = true_motion()
    candidates = pose_candidates(skew(t) @ R)
    assert len(candidates) == 4
    for Rc, tc in candidates:
        np.testing.assert_allclose(Rc @ Rc.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(Rc) == pytest.approx(1.0)
        assert np.linalg.norm(tc) == pytest.approx(1.0)

def test_recover_pose_1():
    """Test description: a 5 degree rotation about y is recovered with the translation direction"""
    R, t = true_motion()
    x1, x2 = normalised_views(two_view_points(), R, t)
    E, mask = estimate_essential_normalized(x1, x2)
    pose = recover_pose_normalized(E, x1[mask], x2[mask])
    np.testing.assert_allclose(pose.R, R, atol=1e-6)
    np.testing.assert_allclose(pose.t, t, atol=1e-6)
    assert pose.in_front == mask.sum()
    assert sorted(pose.candidate_counts)[-2] < pose.in_front

def test_recover_pose_2():
    """Test description: a vanishing essential matrix is degenerate"""
    x1, x2 = normalised_views(two_view_points(), *true_motion())
    with pytest.raises(DegenerateGeometry):
        recover_pose_normalized(np.zeros((3, 3)), x1, x2)

def test_recover_pose_3():
    """Test description: pixel-space pose recovery honours an inlier mask"""
    cam = PinholeCamera.default()
    R, t = true_motion()
    cs = pixel_correspondences(two_view_points(), R, t, cam)
    E, mask = estimate_essential(cs, cam)
    pose = recover_pose(E, cs, cam, mask)
    np.testing.assert_allclose(pose.R, R, atol=1e-6)

def test_refine_pose_1():
    """Test description: a perturbed pose is pulled back onto the true motion by the Sampson refinement"""
    R, t = true_motion()
    x1, x2 = normalised_views(two_view_points(80, seed=7), R, t)
    tilt = rotation_about(np.array([1.0, 0.3, 0.0]), math.radians(0.5))
    nudged = t + np.array([0.0, 0.02, -0.03])
    rough = Pose(tilt @ R, nudged / np.linalg.norm(nudged), 80, [80, 0, 0, 0])
    pose = refine_pose_normalized(rough, x1, x2)
    np.testing.assert_allclose(pose.R, R, atol=1e-6)
    np.testing.assert_allclose(pose.t, t, atol=1e-6)
    assert pose.in_front == 80

def test_refine_pose_2():
    """Test description: exact pixel data leaves the pose unchanged and too few pairs are refused"""
    cam = PinholeCamera.default()
    R, t = true_motion()
    cs = pixel_correspondences(two_view_points(), R, t, cam)
    pose = refine_pose(Pose(R, t, 60, [60, 0, 0, 0]), cs, cam)
    np.testing.assert_allclose(pose.R, R, atol=1e-9)
    np.testing.assert_allclose(pose.t, t, atol=1e-9)
    with pytest.raises(InsufficientCorrespondences):
        refine_pose_normalized(pose, np.zeros((4, 2)), np.zeros((4, 2)))

# ========== triangulate_two_view() ==========
def test_triangulate_two_view_1():
    """Test description: exact correspondences reproject with sub-nanopixel error and match the true points"""
    cam = PinholeCamera.default()
    R, t = true_motion()
    X = two_view_points()
    cloud = triangulate_two_view(R, t, pixel_correspondences(X, R, t, cam), cam)
    assert cloud.scale_status == 'up-to-scale'
    assert np.max(cloud.reprojection_error) < 1e-9
    np.testing.assert_allclose(cloud.points, X[cloud.ids], atol=1e-8)

def test_triangulate_two_view_2():
    """Test description: linear triangulation agrees with the midpoint method on exact data"""
    cam = PinholeCamera.default()
    R, t = true_motion()
    cs = pixel_correspondences(two_view_points(), R, t, cam)
    a = triangulate_two_view(R, t, cs, cam)
    b = triangulate_two_view(R, t, cs, cam, method='linear')
    np.testing.assert_allclose(a.points, b.points, atol=1e-7)

def test_triangulate_two_view_3():
    """Test description: ids index the full pair list when some pairs are rejected"""
    cam = PinholeCamera.default()
    R, t = true_motion()
    X = two_view_points()
    cs = pixel_correspondences(X, R, t, cam).reject(np.arange(len(X)) % 3 == 0, 'flow')
    cloud = triangulate_two_view(R, t, cs, cam)
    assert all(i % 3 != 0 for i in cloud.ids)
    np.testing.assert_allclose(cloud.points, X[cloud.ids], atol=1e-8)

def test_triangulate_two_view_4():
    """Test description: unknown method"""
    cam = PinholeCamera.default()
    R, t = true_motion()
    with pytest.raises(ConfigError):
        triangulate_two_view(R, t, pixel_correspondences(two_view_points(), R, t, cam), cam, method='dlt')

# ========== register_scale() ==========
def tilted_grid(step: float = 1.0) -> np.ndarray:
    g = np.arange(-5.0, 5.0 + 1e-9, step)
    x, y = np.meshgrid(g, g)
    return np.column_stack([x.ravel(), y.ravel(), 30.0 + 0.2 * x.ravel()])


def sl_pair_of(points: np.ndarray) -> tuple[PointCloud, PointCloud]:
    ids = np.arange(len(points))
    return PointCloud(points, 'metric', 'SL', ids=ids), PointCloud(points.copy(), 'metric', 'SL', ids=ids)


def sfm_on_plane(scale: float, seed: int = 0) -> PointCloud:
    rng = np.random.default_rng(seed)
    x, y = rng.uniform(-4, 4, 80), rng.uniform(-4, 4, 80)
    return PointCloud(np.column_stack([x, y, 30.0 + 0.2 * x]) / scale)


def test_register_scale_1():
    """Test description: a cloud shrunk by 2.5 is scaled back by 2.5 against the local SL planes"""
    cloud, s = register_scale(sfm_on_plane(2.5), sl_pair_of(tilted_grid()))
    assert s == pytest.approx(2.5, rel=1e-9)
    assert cloud.scale_status == 'metric'

def test_register_scale_2():
    """Test description: scaling the SfM cloud by k divides the recovered scale by k"""
    sl = sl_pair_of(tilted_grid())
    base = sfm_on_plane(1.0, seed=4)
    _, s1 = register_scale(base, sl)
    _, s4 = register_scale(base.scaled(4.0), sl)
    assert s4 == pytest.approx(s1 / 4.0, rel=1e-9)

def test_register_scale_3():
    """Test description: point-to-point residual on coincident samples is exact"""
    grid = tilted_grid()
    _, s = register_scale(PointCloud(grid / 2.5), sl_pair_of(grid), residual='point')
    assert s == pytest.approx(2.5, rel=1e-12)

def test_register_scale_4():
    """Test description: SL clouds sharing no spot ids cannot be registered against"""
    grid = tilted_grid()
    a = PointCloud(grid, 'metric', 'SL', ids=np.arange(len(grid)))
    b = PointCloud(grid, 'metric', 'SL', ids=np.arange(len(grid)) + 1000)
    with pytest.raises(RegistrationError):
        register_scale(sfm_on_plane(2.5), (a, b))

def test_register_scale_5():
    """Test description: nothing within the gating radius"""
    far = PointCloud(tilted_grid() + np.array([500.0, 0.0, 0.0]), 'metric', 'SL', ids=np.arange(121))
    near = PointCloud(tilted_grid(), 'metric', 'SL', ids=np.arange(121))
    with pytest.raises(RegistrationError):
        register_scale(sfm_on_plane(1.0), (far, far), residual='point', gating_radius_mm=0.5)
    with pytest.raises(ConfigError):
        register_scale(sfm_on_plane(1.0), (near, near), residual='ray')

def test_sl_reference_1():
    """Test description: the reference averages the two SL clouds over their common spot ids"""
    a = PointCloud(np.array([[0.0, 0.0, 30.0], [1.0, 0.0, 30.0]]), 'metric', 'SL', ids=np.array([1, 2]))
    b = PointCloud(np.array([[1.0, 0.0, 32.0], [0.0, 0.0, 32.0]]), 'metric', 'SL', ids=np.array([2, 3]))
    ref = sl_reference((a, b))
    assert ref.ids.tolist() == [2]
    np.testing.assert_allclose(ref.points, [[1.0, 0.0, 31.0]])

# ========== write_ply() / read_ply() ==========
def test_write_ply_1(tmp_path):
    """Test description: coordinates, values, colours and scale status survive a PLY file"""
    cloud = PointCloud(np.array([[0.1, 0.2, 30.0], [1.0 / 3.0, -2.0, 31.5]]), 'metric', 'SfM',
                       values=np.array([0.25, np.nan]), colors=np.array([[10, 20, 30], [128, 128, 128]], dtype=np.uint8))
    loaded = read_ply(write_ply(cloud, tmp_path / 'surface.ply'))
    assert loaded.scale_status == 'metric'
    np.testing.assert_array_equal(loaded.points, cloud.points)
    np.testing.assert_array_equal(loaded.values, cloud.values)
    np.testing.assert_array_equal(loaded.colors, cloud.colors)

def test_read_ply_1(tmp_path):
    """Test description: binary and headerless files are refused"""
    (tmp_path / 'a.ply').write_text('ply\nformat binary_little_endian 1.0\nelement vertex 0\nend_header\n')
    (tmp_path / 'b.ply').write_text('0 0 0\n')
    for name in ('a.ply', 'b.ply'):
        with pytest.raises(DataError):
            read_ply(tmp_path / name)

# ========== PointCloud ==========
def test_point_cloud_1():
    """Test description: per-point arrays must match the point count and coordinates must be finite"""
    with pytest.raises(ShapeError):
        PointCloud(np.zeros((3, 3)), ids=np.arange(2))
    with pytest.raises(DataError):
        PointCloud(np.array([[0.0, np.inf, 1.0]]))

# ========== reconstruct_surface() ==========
def test_reconstruct_surface_1():
    """Test description: fewer accepted correspondences than the minimum"""
    cam, rig = PinholeCamera.default(), ProbeRig.default()
    R, t = true_motion()
    cs = pixel_correspondences(two_view_points(5), R, t, cam)
    spots = plane_spots(30.0, cam, rig)
    with pytest.raises(InsufficientCorrespondences):
        reconstruct_surface(cam, rig, (spots, spots), correspondences=cs)

def test_reconstruct_surface_2():
    """Test description: neither frames nor correspondences"""
    cam, rig = PinholeCamera.default(), ProbeRig.default()
    spots = plane_spots(30.0, cam, rig)
    with pytest.raises(ConfigError):
        reconstruct_surface(cam, rig, (spots, spots))

# ========== frame_pairs() ==========
def test_frame_pairs_1():
    """Test description: pairs within the rigidity gap"""
    assert frame_pairs(4, 2) == [(0, 1), (0, 2), (1, 2), (1, 3), (2, 3)]
    assert frame_pairs(3) == [(0, 1), (1, 2)]
    with pytest.raises(ConfigError):
        frame_pairs(3, 0)

# ========== reconstruct_sequence() ==========
def test_reconstruct_sequence_1():
    """Test description: failing pairs come back as their exception, one entry per pair"""
    cam, rig = PinholeCamera.default(), ProbeRig.default()
    spots = plane_spots(30.0, cam, rig)
    frames = [np.full((cam.height, cam.width), 0.5) for _ in range(3)]
    results = reconstruct_sequence(cam, rig, frames, [(spots, spots)] * 3, ReconstructionConfig(max_frame_gap=2))
    assert len(results) == 3
    assert all(isinstance(r, InsufficientCorrespondences) for r in results)
    with pytest.raises(ShapeError):
        reconstruct_sequence(cam, rig, frames, [(spots, spots)] * 2)
