"""Usage: python -m pytest"""

import json
import pathlib

import numpy as np
import pytest

from dataset import SpectralStack, save_stack
from main import main
from reconstruction import PinholeCamera, PointCloud, read_ply, write_ply
import config

SMALL_DATASET = ['--set', 'gen.n_stacks=3', '--set', 'gen.height=4', '--set', 'gen.width=4']
QUICK_TRAINING = ['--set', 'train.max_epochs=1', '--set', 'model.hidden_features=4', '--set', 'model.merge_kernel=3']
UNLIMITED_FILTER = [arg for name in ('descriptor', 'flow', 'symmetric', 'smoothness')
                    for arg in ('--set', f'geometry.thresholds.{name}=Infinity')]


def files_of(directory: pathlib.Path) -> dict[str, bytes]:
    return {p.relative_to(directory).as_posix(): p.read_bytes() for p in sorted(directory.rglob('*')) if p.is_file()}


@pytest.fixture
def dataset(tmp_path) -> pathlib.Path:
    out = tmp_path / 'data'
    assert main(['gen', '--out', str(out), *SMALL_DATASET]) == config.EXIT_OK
    return out


@pytest.fixture
def model1(tmp_path, dataset) -> pathlib.Path:
    out = tmp_path / 'models' / 'model1.json'
    assert main(['train', '--dataset', str(dataset), '--out', str(out), *QUICK_TRAINING]) == config.EXIT_OK
    return out


# ========== gen ==========
def test_gen_1(tmp_path, dataset):
    """Test description: the same seed writes byte-identical datasets"""
    again = tmp_path / 'again'
    assert main(['gen', '--out', str(again), *SMALL_DATASET]) == config.EXIT_OK
    assert files_of(dataset) == files_of(again)
    assert (dataset / 'manifest.json').exists()

def test_gen_2(tmp_path, capsys):
    """Test description: an output path below a regular file is a data error with a logged message, not a traceback"""
    blocker = tmp_path / 'blocker'
    blocker.write_text('not a directory')
    assert main(['gen', '--out', str(blocker / 'data'), *SMALL_DATASET]) == config.EXIT_DATA
    assert 'ERROR' in capsys.readouterr().err

# ========== train ==========
def test_train_1(model1):
    """Test description: Model 1 training writes parameters and an epoch log"""
    assert model1.exists() and model1.with_suffix('.params').exists()
    assert (model1.parent / 'model1_log.csv').exists()
    assert json.loads(model1.read_text())['arch_id'] == 'model1'

def test_train_2(tmp_path, dataset):
    """Test description: Model 2 without trained Model 1 parameters is a configuration error"""
    out = tmp_path / 'model2.json'
    code = main(['train', '--dataset', str(dataset), '--out', str(out), '--set', 'model.model=model2', *QUICK_TRAINING])
    assert code == config.EXIT_CONFIG
    assert not out.exists()

def test_train_3(tmp_path, dataset, model1):
    """Test description: Model 2 starts from the given Model 1 parameters"""
    out = tmp_path / 'model2.json'
    code = main(['train', '--dataset', str(dataset), '--out', str(out), '--init-model1', str(model1),
                 '--set', 'model.model=model2', *QUICK_TRAINING])
    assert code == config.EXIT_OK
    assert json.loads(out.read_text())['arch_id'] == 'model2'

def test_train_4(tmp_path):
    """Test description: a missing dataset is a data error"""
    assert main(['train', '--dataset', str(tmp_path / 'nowhere'), '--out', str(tmp_path / 'm.json')]) == config.EXIT_DATA

# ========== eval ==========
def test_eval_1(tmp_path, dataset, model1):
    """Test description: single evaluation writes a report and the predicted stacks"""
    out, predictions = tmp_path / 'report', tmp_path / 'pred'
    code = main(['eval', '--params', str(model1), '--dataset', str(dataset), '--out', str(out),
                 '--predictions', str(predictions)])
    assert code == config.EXIT_OK
    report = json.loads((out / 'report.json').read_text())
    assert report['model'] == 'model1' and len(report['stack_ids']) == 3
    assert len(list(predictions.glob('*_pred.json'))) == 3

def test_eval_2(tmp_path, dataset):
    """Test description: cross-validation over two folds"""
    code = main(['eval', '--dataset', str(dataset), '--out', str(tmp_path / 'cv'), '--set', 'eval.mode=loocv',
                 '--set', 'eval.k=2', *QUICK_TRAINING])
    assert code == config.EXIT_OK
    assert (tmp_path / 'cv' / 'loocv.json').exists()

def test_eval_3(tmp_path, dataset):
    """Test description: single evaluation without parameters, unknown configuration keys"""
    assert main(['eval', '--dataset', str(dataset), '--out', str(tmp_path / 'r')]) == config.EXIT_CONFIG
    assert main(['eval', '--dataset', str(dataset), '--out', str(tmp_path / 'r'), '--set', 'eval.folds=2']) == config.EXIT_CONFIG

# ========== scene / reconstruct ==========
def test_reconstruct_1(tmp_path):
    """Test description: a synthetic bundle reconstructs to a metric surface within 1e-4 mm RMS"""
    scene, out = tmp_path / 'scene', tmp_path / 'surface'
    assert main(['scene', '--out', str(scene)]) == config.EXIT_OK
    assert main(['reconstruct', '--scene', str(scene), '--out', str(out), *UNLIMITED_FILTER]) == config.EXIT_OK
    metrics = json.loads((out / 'metrics.json').read_text())
    assert metrics['scale_status'] == 'metric' and metrics['mode'] == 'sl+sfm'
    assert metrics['rms_error_mm'] < 1e-4
    cloud = read_ply(out / 'surface.ply')
    assert len(cloud) == metrics['points'] and cloud.scale_status == 'metric'

def test_reconstruct_2(tmp_path):
    """Test description: a flat scene fails with a numerical exit code and a failure record"""
    scene, out = tmp_path / 'flat', tmp_path / 'surface'
    assert main(['scene', '--out', str(scene), '--set', 'scene.ridge_curvature=0', '--set', 'scene.grid_step_px=24']) == config.EXIT_OK
    assert main(['reconstruct', '--scene', str(scene), '--out', str(out), *UNLIMITED_FILTER]) == config.EXIT_NUMERICAL
    failure = json.loads((out / 'failure.json').read_text())
    assert failure['status'] == 'failed' and failure['error'] == 'DegenerateGeometry'
    assert failure['exit_code'] == config.EXIT_NUMERICAL
    assert not (out / 'metrics.json').exists()

def test_reconstruct_3(tmp_path):
    """Test description: without frames or correspondences only the structured-light shape is kept"""
    scene, out = tmp_path / 'scene', tmp_path / 'sl'
    assert main(['scene', '--out', str(scene), '--set', 'scene.grid_step_px=40']) == config.EXIT_OK
    code = main(['reconstruct', '--camera', str(scene / 'camera.json'), '--rig', str(scene / 'rig.json'),
                 '--sl', str(scene / 'sl_a.csv'), str(scene / 'sl_b.csv'), '--out', str(out)])
    assert code == config.EXIT_OK
    metrics = json.loads((out / 'metrics.json').read_text())
    assert metrics['mode'] == 'sl-only' and metrics['points'] == 24

def test_reconstruct_4(tmp_path):
    """Test description: no camera at all"""
    assert main(['reconstruct', '--out', str(tmp_path / 'x')]) == config.EXIT_CONFIG

# ========== overlay ==========
def small_inputs(tmp_path: pathlib.Path) -> dict[str, str]:
    cam = PinholeCamera(40.0, 40.0, 15.5, 11.5, 32, 24)
    cam.save(tmp_path / 'camera.json')
    write_ply(PointCloud(np.array([[0.0, 0.0, 30.0], [1.0, 1.0, 30.0], [500.0, 0.0, 30.0]]), 'metric'), tmp_path / 'cloud.ply')
    data = np.arange(24, dtype=np.float64)[:, None, None] * np.ones((24, 24, 32))
    save_stack(SpectralStack(data, config.WAVELENGTHS_NM), tmp_path / 'msi.json')
    return {'--camera': str(tmp_path / 'camera.json'), '--cloud': str(tmp_path / 'cloud.ply'), '--msi': str(tmp_path / 'msi.json')}

def test_overlay_1(tmp_path):
    """Test description: a narrow-band composite is written and draped onto the cloud"""
    inputs = [x for pair in small_inputs(tmp_path).items() for x in pair]
    code = main(['overlay', *inputs, '--png', str(tmp_path / 'nbi.png'), '--out', str(tmp_path / 'nbi.ply'),
                 '--set', 'overlay.kind=nbi'])
    assert code == config.EXIT_OK
    assert (tmp_path / 'nbi.png').exists()
    draped = read_ply(tmp_path / 'nbi.ply')
    assert draped.colors[0].tolist() == [8, 0, 0]
    assert draped.colors[2].tolist() == [128, 128, 128]

def test_overlay_2(tmp_path):
    """Test description: an SaO2 overlay needs an extinction table"""
    inputs = [x for pair in small_inputs(tmp_path).items() for x in pair]
    assert main(['overlay', *inputs, '--out', str(tmp_path / 'o.ply')]) == config.EXIT_CONFIG
