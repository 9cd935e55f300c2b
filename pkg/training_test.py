"""Usage: python -m pytest"""

import csv

import numpy as np
import pytest

from dataset import CameraResponse, Sample, SpectralStack, generate_synthetic_dataset, synthesize_rgb
from errors import ConfigError, DataError, TrainingDiverged
from prediction import ArchConfig, Predictor
from training import TrainConfig, Trainer, TrainingLog
import config


def scaled_spectrum_sample(height: int = 5, width: int = 10) -> Sample:
    """Pixels of one tissue spectrum under varying brightness."""
    grid = np.asarray(config.WAVELENGTHS_NM, dtype=np.float64)
    spectrum = 60.0 + 120.0 * np.exp(-0.5 * ((grid - 560.0) / 60.0) ** 2)
    brightness = np.linspace(0.5, 1.0, height * width).reshape(height, width)
    hsi = SpectralStack(spectrum[:, None, None] * brightness[None], config.WAVELENGTHS_NM)
    zeros = np.zeros((height, width), dtype=np.float32)
    return Sample(hsi, synthesize_rgb(hsi, CameraResponse.default()), zeros,
                  SpectralStack(np.zeros_like(hsi.data), config.WAVELENGTHS_NM), sample_id='scaled')


def tiny_arch() -> ArchConfig:
    return ArchConfig.default(hidden_features=4, merge_kernel=3)


# ========== TrainConfig ==========
def test_train_config_1():
    """Test description: invalid optimizer settings are configuration errors"""
    for kwargs in ({'lr': 0.0}, {'batch_size': 0}, {'beta1': 1.0}, {'lr_decay': 1.5}, {'psnr_mode': 'db'},
                   {'validation_fraction': 1.0}):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)

def test_train_config_2():
    """Test description: the 'paper' PSNR mode is stored under its canonical name"""
    assert TrainConfig(psnr_mode='paper').psnr_mode == 'amplitude'

# ========== train_model1() ==========
def test_train_model1_1():
    """Test description: 50 pixel spectra are fitted to a loss below 0.1 on the [0, 255] scale within 2000 epochs"""
    sample = scaled_spectrum_sample()
    cfg = TrainConfig(lr=3e-3, lr_decay=0.998, max_epochs=2000, plateau_patience=2000, seed=0)
    params = Predictor.build_model1(ArchConfig.default(hidden_features=16), seed=0)
    log = TrainingLog()
    trained = Trainer.train_model1([sample], cfg, params, log)
    assert min(log.losses('model1')) < 1e-1
    pred = Predictor.model1_predict(trained, sample.rgb)
    assert pred.data.shape == (24, 5, 10)
    assert float(np.mean(np.square(pred.data - sample.hsi.data))) < 1e-1

def test_train_model1_2():
    """Test description: the returned checkpoint is the best one seen, never worse than the start"""
    samples = generate_synthetic_dataset(2, (4, 4), seed=0)
    log = TrainingLog()
    Trainer.train_model1(samples, TrainConfig(max_epochs=5, seed=1), Predictor.build_model1(tiny_arch(), 1), log)
    losses = log.losses('model1')
    assert len(losses) == 6
    assert min(losses) <= losses[0]

def test_train_model1_3():
    """Test description: plateau stopping ends training before max_epochs"""
    samples = generate_synthetic_dataset(1, (3, 3), seed=0)
    log = TrainingLog()
    cfg = TrainConfig(lr=1e-30, max_epochs=100, plateau_patience=2, seed=0)
    Trainer.train_model1(samples, cfg, Predictor.build_model1(tiny_arch(), 0), log)
    assert len(log.losses('model1')) < 101

def test_train_model1_4():
    """Test description: validation rows are logged when a validation split is requested"""
    samples = generate_synthetic_dataset(4, (3, 3), seed=0)
    log = TrainingLog()
    Trainer.train_model1(samples, TrainConfig(max_epochs=2, validation_fraction=0.25), Predictor.build_model1(tiny_arch(), 0), log)
    assert len(log.losses('model1', 'validation')) == 3

def test_train_model1_5():
    """Test description: empty dataset and Model 2 starting parameters"""
    with pytest.raises(DataError):
        Trainer.train_model1([], TrainConfig())
    m2 = Predictor.build_model2(tiny_arch(), 0, init=Predictor.build_model1(tiny_arch(), 0))
    with pytest.raises(ConfigError):
        Trainer.train_model1(generate_synthetic_dataset(1, (2, 2), seed=0), TrainConfig(), m2)

def test_train_model1_6():
    """Test description: an absurd learning rate diverges with the last good checkpoint attached"""
    samples = generate_synthetic_dataset(1, (4, 4), seed=0)
    params = Predictor.build_model1(ArchConfig.default(), 0)
    with pytest.raises(TrainingDiverged) as info:
        Trainer.train_model1(samples, TrainConfig(lr=1e12, max_epochs=20, plateau_patience=20), params)
    assert info.value.checkpoint is not None
    assert info.value.checkpoint.arch_id == 'model1'
    assert info.value.epoch >= 1

# ========== train_model2() ==========
def test_train_model2_1():
    """Test description: stage B starts from the stage A checkpoint and never ends worse"""
    samples = generate_synthetic_dataset(2, (6, 6), seed=3)
    init = Predictor.build_model1(tiny_arch(), 0)
    log = TrainingLog()
    trained = Trainer.train_model2(samples, init, TrainConfig(max_epochs=3, seed=0), log)
    stage_a, stage_b = log.losses('model2-stageA'), log.losses('model2-stageB')
    assert stage_b[0] == pytest.approx(min(stage_a))
    assert min(stage_b) <= min(stage_a)
    assert trained.arch_id == 'model2'
    assert trained.frozen_names() == frozenset()

def test_train_model2_2():
    """Test description: with zero epochs the shared entries keep their Model 1 values"""
    samples = generate_synthetic_dataset(1, (6, 6), seed=4)
    init = Predictor.build_model1(tiny_arch(), 0)
    trained = Trainer.train_model2(samples, init, TrainConfig(max_epochs=0))
    for name, tensor in init.tensors().items():
        np.testing.assert_array_equal(trained.tensors()[name], tensor)

def test_train_model2_3():
    """Test description: Model 2 must start from Model 1"""
    samples = generate_synthetic_dataset(1, (3, 3), seed=0)
    m2 = Predictor.build_model2(tiny_arch(), 0, init=Predictor.build_model1(tiny_arch(), 0))
    with pytest.raises(ConfigError):
        Trainer.train_model2(samples, m2, TrainConfig(max_epochs=1))

def test_train_model2_4():
    """Test description: augmentation multiplies the training stacks without touching validation"""
    samples = generate_synthetic_dataset(2, (4, 4), seed=5)
    log = TrainingLog()
    Trainer.train_model2(samples, Predictor.build_model1(tiny_arch(), 0),
                         TrainConfig(max_epochs=1, augment=True, validation_fraction=0.5), log)
    assert len(log.losses('model2-stageA', 'validation')) == 2

# ========== TrainingLog ==========
def test_training_log_1(tmp_path):
    """Test description: the CSV log has one row per epoch and split"""
    samples = generate_synthetic_dataset(1, (3, 3), seed=0)
    log = TrainingLog()
    Trainer.train_model1(samples, TrainConfig(max_epochs=2), Predictor.build_model1(tiny_arch(), 0), log)
    log.write_csv(tmp_path / 'log.csv')
    with open(tmp_path / 'log.csv', newline='') as f:
        rows = list(csv.DictReader(f))
    assert [int(r['epoch']) for r in rows] == [0, 1, 2]
    assert {r['stage'] for r in rows} == {'model1'}
