"""Training loops: Model 1 on per-pixel spectral vectors, Model 2 on whole stacks with the
two-stage protocol (shared layers frozen first, then everything)."""

from dataclasses import dataclass, asdict, field
import csv
import logging
import pathlib
from typing import Callable

import numpy as np

from dataset import Sample, augment_sample
from errors import ConfigError, DataError, NumericalError, TrainingDiverged
from prediction import CORE_PREFIX, ArchConfig, NetworkParams, Predictor
from tensorcore import AdamState, adam_step, l2_loss, psnr_from_mse, resolve_psnr_mode
import config

logger = logging.getLogger(__name__)

SCALE2 = config.VALUE_MAX ** 2
LOSS_CHUNK = 16384


@dataclass
class TrainConfig:
    lr: float = config.LEARNING_RATE
    beta1: float = config.BETA1
    beta2: float = config.BETA2
    epsilon: float = config.ADAM_EPSILON
    batch_size: int = config.BATCH_SIZE
    max_epochs: int = config.MAX_EPOCHS
    plateau_patience: int = config.PLATEAU_PATIENCE
    seed: int = 0
    psnr_mode: str = 'amplitude'
    lr_decay: float = 1.0
    validation_fraction: float = 0.0
    stack_batch_size: int = config.STACK_BATCH_SIZE
    n_jobs: int = 1
    augment: bool = False
    crop_size: int | None = None

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise ConfigError(f'lr must be positive, got {self.lr}')
        if self.batch_size < 1 or self.stack_batch_size < 1:
            raise ConfigError('batch sizes must be at least 1')
        if self.max_epochs < 0 or self.plateau_patience < 1:
            raise ConfigError('max_epochs must be >= 0 and plateau_patience >= 1')
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0) or self.epsilon <= 0:
            raise ConfigError('Adam needs 0 <= beta < 1 and epsilon > 0')
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigError(f'lr_decay must lie in (0, 1], got {self.lr_decay}')
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigError(f'validation_fraction must lie in [0, 1), got {self.validation_fraction}')
        self.psnr_mode = resolve_psnr_mode(self.psnr_mode)

    def adam(self) -> dict:
        return {'lr': self.lr, 'beta1': self.beta1, 'beta2': self.beta2, 'epsilon': self.epsilon}


@dataclass
class LogRow:
    stage: str
    epoch: int
    split: str
    loss: float
    psnr: float


@dataclass
class TrainingLog:
    rows: list[LogRow] = field(default_factory=list)

    def losses(self, stage: str, split: str = 'train') -> list[float]:
        return [r.loss for r in self.rows if r.stage == stage and r.split == split]

    def write_csv(self, path: str | pathlib.Path) -> None:
        path = pathlib.Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', newline='') as f:
            writer = csv.DictWriter(f, fieldnames=['stage', 'epoch', 'split', 'loss', 'psnr'])
            writer.writeheader()
            for row in self.rows:
                writer.writerow(asdict(row))


def _validation_split(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Splits sample indices; at least one sample always stays in training."""
    n_val = min(int(round(fraction * n)), n - 1)
    order = np.random.default_rng([seed, 7]).permutation(n)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def _fill_frozen(grads: dict, tensors: dict) -> dict:
    return {name: grads[name] if name in grads else np.zeros_like(value) for name, value in tensors.items()}


class Trainer:
    @staticmethod
    def _fit(
            params: NetworkParams,
            batch_loss: Callable[[dict, np.ndarray], tuple[float, dict]],
            full_loss: Callable[[dict, np.ndarray], float],
            train_idx: np.ndarray,
            val_idx: np.ndarray,
            batch_size: int,
            cfg: TrainConfig,
            stage: str,
            log: TrainingLog,
            ) -> NetworkParams:
        """Adam over shuffled minibatches, keeping the best checkpoint by the monitored loss.

        Losses are mean squared errors on the [0, 255] scale. The monitored loss is the
        validation loss when a validation split exists, otherwise the training loss.
        """
        tensors = params.tensors()
        frozen = params.frozen_names()
        state = AdamState.create(tensors, **cfg.adam())
        rng = np.random.default_rng([cfg.seed, sum(map(ord, stage))])
        monitor_split = 'validation' if val_idx.size else 'train'

        def record(epoch: int, current: dict) -> float:
            monitored = None
            for split, idx in (('train', train_idx), ('validation', val_idx)):
                if idx.size == 0:
                    continue
                loss = full_loss(current, idx)
                if not np.isfinite(loss):
                    raise TrainingDiverged(f'{stage}: {split} loss became {loss} at epoch {epoch}',
                                           checkpoint=params.with_tensors(best), epoch=epoch)
                psnr = psnr_from_mse(loss, cfg.psnr_mode)
                log.rows.append(LogRow(stage, epoch, split, loss, psnr))
                logger.info('%s epoch %d %s loss %.6g psnr %.4g', stage, epoch, split, loss, psnr)
                if split == monitor_split:
                    monitored = loss
            return monitored

        best = tensors
        best_loss = record(0, tensors)
        stale = 0
        for epoch in range(1, cfg.max_epochs + 1):
            order = rng.permutation(train_idx)
            for start in range(0, order.size, batch_size):
                _, grads = batch_loss(tensors, order[start: start + batch_size])
                try:
                    tensors, state = adam_step(tensors, _fill_frozen(grads, tensors), state, frozen)
                except NumericalError as e:
                    raise TrainingDiverged(f'{stage}: {e}', checkpoint=params.with_tensors(best), epoch=epoch) from e
            state.lr *= cfg.lr_decay

            monitored = record(epoch, tensors)
            if monitored < best_loss:
                best, best_loss, stale = tensors, monitored, 0
            else:
                stale += 1
                if stale >= cfg.plateau_patience:
                    logger.info('%s: %s loss plateaued for %d epochs, stopping at epoch %d',
                                stage, monitor_split, stale, epoch)
                    break
        logger.info('%s: best %s loss %.6g', stage, monitor_split, best_loss)
        return params.with_tensors(best)

    # ========== model 1 ==========
    @staticmethod
    def _pixel_arrays(samples: list[Sample], spectral_in: int, spectral_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Normalised (pixels, 1, 3) inputs, (pixels, 1, C) targets and the sample index of every pixel."""
        rgb, hsi, owner = [], [], []
        for i, sample in enumerate(samples):
            if sample.rgb.channels != spectral_in or sample.hsi.channels != spectral_out:
                raise DataError(f'sample {sample.sample_id}: {sample.rgb.channels}/{sample.hsi.channels} channels, '
                                f'the model maps {spectral_in} to {spectral_out}')
            rgb.append(sample.rgb.pixels())
            hsi.append(sample.hsi.pixels())
            owner.append(np.full(sample.rgb.height * sample.rgb.width, i))
        scale = np.float32(config.VALUE_MAX)
        x = (np.concatenate(rgb) / scale).astype(np.float32)[:, None, :]
        y = (np.concatenate(hsi) / scale).astype(np.float32)[:, None, :]
        return x, y, np.concatenate(owner)

    @classmethod
    def train_model1(
            cls,
            dataset: list[Sample],
            cfg: TrainConfig,
            params: NetworkParams | None = None,
            log: TrainingLog | None = None,
            ) -> NetworkParams:
        """Trains Model 1 on the per-pixel (RGB, spectrum) pairs of every sample.

        Parameters
        ----------
        dataset: list[Sample]
            Training samples; must be nonempty.
        cfg: TrainConfig
            Optimizer and stopping settings.
        params: NetworkParams
            Starting point; a fresh default Model 1 seeded by cfg.seed when omitted.
        log: TrainingLog
            Receives one row per epoch and split.

        Returns
        -------
        params: NetworkParams
            The best checkpoint.
        """
        if not dataset:
            raise DataError('cannot train on an empty dataset')
        log = log if log is not None else TrainingLog()
        if params is None:
            params = Predictor.build_model1(ArchConfig.default(spectral_out=dataset[0].hsi.channels,
                                                               wavelengths_nm=dataset[0].hsi.wavelengths_nm), cfg.seed)
        if params.arch_id != 'model1':
            raise ConfigError(f'train_model1 needs Model 1 parameters, got {params.arch_id}')
        arch = params.arch
        x, y, owner = cls._pixel_arrays(dataset, arch.spectral_in, arch.spectral_out)
        train_stacks, val_stacks = _validation_split(len(dataset), cfg.validation_fraction, cfg.seed)
        train_idx = np.flatnonzero(np.isin(owner, train_stacks))
        val_idx = np.flatnonzero(np.isin(owner, val_stacks))
        logger.info('model1: %d training pixels, %d validation pixels, %d parameters',
                    train_idx.size, val_idx.size, params.parameter_count())

        def batch_loss(tensors: dict, idx: np.ndarray) -> tuple[float, dict]:
            out, tape = Predictor.core_forward(arch, tensors, x[idx])
            loss, g = l2_loss(out, y[idx])
            grads = {}
            Predictor.core_backward(g, tape, grads)
            return loss * SCALE2, grads

        def full_loss(tensors: dict, idx: np.ndarray) -> float:
            total = 0.0
            for start in range(0, idx.size, LOSS_CHUNK):
                chunk = idx[start: start + LOSS_CHUNK]
                out, _ = Predictor.core_forward(arch, tensors, x[chunk])
                total += float(np.sum(np.square(out - y[chunk], dtype=np.float64)))
            return total / (idx.size * arch.spectral_out) * SCALE2

        return cls._fit(params, batch_loss, full_loss, train_idx, val_idx, cfg.batch_size, cfg, 'model1', log)

    # ========== model 2 ==========
    @staticmethod
    def _stack_batches(samples: list[Sample]) -> list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]:
        """Normalised (rgb, density, sparse, hsi) arrays per sample, each with a leading batch axis of 1."""
        scale = np.float32(config.VALUE_MAX)
        return [((s.rgb.data / scale)[None], s.density[None].astype(np.float32),
                 (s.sparse.data / scale)[None], (s.hsi.data / scale)[None]) for s in samples]

    @classmethod
    def train_model2(
            cls,
            dataset: list[Sample],
            init: NetworkParams,
            cfg: TrainConfig,
            log: TrainingLog | None = None,
            ) -> NetworkParams:
        """Two-stage training of Model 2 from a trained Model 1.

        Stage A freezes every model1core/ entry and trains the merge stage. Stage B unfreezes
        everything and continues from the stage A checkpoint until the monitored loss plateaus.
        """
        if not dataset:
            raise DataError('cannot train on an empty dataset')
        if init.arch_id != 'model1':
            raise ConfigError(f'Model 2 must start from Model 1 parameters, got {init.arch_id}')
        log = log if log is not None else TrainingLog()
        params = Predictor.build_model2(init.arch, cfg.seed, init=init)
        arch = params.arch

        train_stacks, val_stacks = _validation_split(len(dataset), cfg.validation_fraction, cfg.seed)
        samples = [dataset[i] for i in train_stacks]
        if cfg.augment:
            samples = [a for i, s in enumerate(samples) for a in [s] + augment_sample(s, cfg.seed + i, cfg.crop_size)]
        samples += [dataset[i] for i in val_stacks]
        for s in samples:
            if s.rgb.channels != arch.spectral_in or s.hsi.channels != arch.spectral_out:
                raise DataError(f'sample {s.sample_id} does not fit the {arch.spectral_in}->{arch.spectral_out} model')
        arrays = cls._stack_batches(samples)
        train_idx = np.arange(len(samples) - val_stacks.size)
        val_idx = np.arange(len(samples) - val_stacks.size, len(samples))
        logger.info('model2: %d training stacks, %d validation stacks', train_idx.size, val_idx.size)

        def loss_over(tensors: dict, idx: np.ndarray, core_grads: bool | None) -> tuple[float, dict]:
            """Pixel-weighted loss over the stacks in idx; stacks of equal size share one forward pass."""
            groups = {}
            for i in idx:
                groups.setdefault(arrays[i][0].shape, []).append(i)
            total = sum(arrays[i][3].size for i in idx)
            loss_sum, grads = 0.0, {}
            for members in groups.values():
                rgb, density, sparse, hsi = (np.concatenate([arrays[i][j] for i in members]) for j in range(4))
                out, tape = Predictor.merge_forward(arch, tensors, rgb, density, sparse)
                loss, g = l2_loss(out, hsi)
                weight = hsi.size / total
                loss_sum += loss * weight
                if core_grads is not None:
                    for name, value in Predictor.merge_backward(arch, g * np.float32(weight), tape, core_grads).items():
                        grads[name] = grads[name] + value if name in grads else value
            return loss_sum * SCALE2, grads

        def full_loss(tensors: dict, idx: np.ndarray) -> float:
            weighted, count = 0.0, 0
            for start in range(0, idx.size, cfg.stack_batch_size):
                chunk = idx[start: start + cfg.stack_batch_size]
                size = sum(arrays[i][3].size for i in chunk)
                weighted += loss_over(tensors, chunk, None)[0] * size
                count += size
            return weighted / count

        frozen_core = Predictor.set_frozen(params, CORE_PREFIX, True)
        stage_a = cls._fit(frozen_core, lambda t, idx: loss_over(t, idx, False), full_loss,
                           train_idx, val_idx, cfg.stack_batch_size, cfg, 'model2-stageA', log)
        init_tensors = init.tensors()
        for entry in stage_a.entries:
            if entry.name.startswith(CORE_PREFIX) and not np.array_equal(entry.tensor, init_tensors[entry.name]):
                raise NumericalError(f'frozen entry {entry.name} changed during stage A')

        unfrozen = Predictor.set_frozen(stage_a, '', False)
        return cls._fit(unfrozen, lambda t, idx: loss_over(t, idx, True), full_loss,
                        train_idx, val_idx, cfg.stack_batch_size, cfg, 'model2-stageB', log)
