"""PSNR metrics and maps, the k-fold cross-validation driver and the transfer-learning matrix."""

from dataclasses import dataclass, field, replace
import json
import logging
import math
import pathlib

import joblib
import numpy as np

from dataset import Sample, SpectralStack, save_map, split_folds
from errors import ConfigError, DataError, NumericalError, ShapeError, SpectralError
from prediction import NetworkParams, Predictor
from tensorcore import psnr_from_mse, resolve_psnr_mode
from training import TrainConfig, Trainer
import config

logger = logging.getLogger(__name__)


def _check_shapes(pred: SpectralStack, gt: SpectralStack) -> None:
    if pred.data.shape != gt.data.shape:
        for axis, (a, b) in enumerate(zip(pred.data.shape, gt.data.shape)):
            if a != b:
                raise ShapeError(f'prediction and ground truth differ on axis {axis} ({a} vs {b})')


def psnr(pred: SpectralStack, gt: SpectralStack, mode: str = 'amplitude') -> float:
    """PSNR of a whole stack, MSE taken over every pixel and band.

    Parameters
    ----------
    pred: SpectralStack
        The estimate.
    gt: SpectralStack
        The ground truth, same shape as pred.
    mode: str
        'amplitude' for 20 lg(255/MSE), 'standard' for 10 lg(255^2/MSE).

    Returns
    -------
    psnr: float
        In dB; +inf when the stacks are identical.
    """
    _check_shapes(pred, gt)
    mse = float(np.mean(np.square(pred.data.astype(np.float64) - gt.data.astype(np.float64))))
    return psnr_from_mse(mse, mode)


@dataclass
class PsnrMap:
    values: np.ndarray
    saturated: np.ndarray
    min_psnr: float | None
    mean_psnr: float | None

    @property
    def saturation_mask_applied(self) -> bool:
        return bool(self.saturated.any())


def _psnr_values(mse: np.ndarray, mode: str) -> np.ndarray:
    peak = config.VALUE_MAX
    with np.errstate(divide='ignore'):
        if mode == 'amplitude':
            return 20.0 * np.log10(peak / mse)
        return 10.0 * np.log10(peak ** 2 / mse)


def psnr_map(
        pred: SpectralStack,
        gt: SpectralStack,
        mode: str = 'amplitude',
        saturation_threshold: float = config.SATURATION_THRESHOLD,
        ) -> PsnrMap:
    """Per-pixel PSNR over the bands. Pixels where any ground-truth band reaches the saturation
    threshold are flagged and left out of the min/mean summaries, which are None when nothing is left."""
    _check_shapes(pred, gt)
    mode = resolve_psnr_mode(mode)
    mse = np.mean(np.square(pred.data.astype(np.float64) - gt.data.astype(np.float64)), axis=0)
    values = _psnr_values(mse, mode)
    saturated = np.any(gt.data >= saturation_threshold, axis=0)
    kept = values[~saturated]
    if kept.size == 0:
        return PsnrMap(values, saturated, None, None)
    return PsnrMap(values, saturated, float(kept.min()), float(kept.mean()))


def band_psnr(preds: list[SpectralStack], gts: list[SpectralStack], mode: str = 'amplitude') -> list[float]:
    """PSNR per band with the squared errors of every pixel of every stack pooled."""
    sums, count = None, 0
    for pred, gt in zip(preds, gts):
        _check_shapes(pred, gt)
        sq = np.square(pred.data.astype(np.float64) - gt.data.astype(np.float64)).reshape(pred.channels, -1)
        sums = sq.sum(axis=1) if sums is None else sums + sq.sum(axis=1)
        count += sq.shape[1]
    if sums is None:
        raise DataError('no stacks to evaluate')
    return [psnr_from_mse(float(s / count), mode) for s in sums]


# ========== reports ==========
def _json_float(x: float | None):
    if x is None:
        return None
    if math.isinf(x):
        return 'inf' if x > 0 else '-inf'
    if math.isnan(x):
        return 'nan'
    return x


@dataclass
class EvalReport:
    model: str
    mode: str
    stack_ids: list[str]
    per_stack_psnr: list[float]
    per_stack_psnr_standard: list[float]
    per_band_psnr: list[float]
    per_band_psnr_standard: list[float]
    mean_psnr: float
    mean_psnr_standard: float
    psnr_maps: list[PsnrMap] = field(default_factory=list)
    saturation_mask_applied: bool = False

    def to_dict(self) -> dict:
        summaries = [{'id': sid, 'min_psnr': _json_float(m.min_psnr), 'mean_psnr': _json_float(m.mean_psnr),
                      'saturated_pixels': int(m.saturated.sum())}
                     for sid, m in zip(self.stack_ids, self.psnr_maps)]
        return {
            'model': self.model, 'mode': self.mode, 'stack_ids': self.stack_ids,
            'per_stack_psnr': [_json_float(x) for x in self.per_stack_psnr],
            'per_stack_psnr_standard': [_json_float(x) for x in self.per_stack_psnr_standard],
            'per_band_psnr': [_json_float(x) for x in self.per_band_psnr],
            'per_band_psnr_standard': [_json_float(x) for x in self.per_band_psnr_standard],
            'mean_psnr': _json_float(self.mean_psnr),
            'mean_psnr_standard': _json_float(self.mean_psnr_standard),
            'psnr_maps': summaries,
            'saturation_mask_applied': self.saturation_mask_applied,
        }

    def save(self, directory: str | pathlib.Path) -> pathlib.Path:
        """Writes report.json and one single-channel map file per stack."""
        directory = pathlib.Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for sid, m in zip(self.stack_ids, self.psnr_maps):
            finite = np.where(np.isfinite(m.values), m.values, np.finfo(np.float32).max)
            save_map(finite, directory / f'psnr_{sid.replace("/", "_")}.json')
        path = directory / 'report.json'
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding='utf-8')
        return path


def predict_sample(params: NetworkParams, sample: Sample) -> SpectralStack:
    if params.arch_id == 'model1':
        return Predictor.model1_predict(params, sample.rgb)
    return Predictor.model2_predict(params, sample.rgb, sample.density, sample.sparse)


def evaluate(
        params: NetworkParams,
        samples: list[Sample],
        mode: str = 'amplitude',
        saturation_threshold: float = config.SATURATION_THRESHOLD,
        ) -> EvalReport:
    """Predicts every sample with the model params describe and scores it against its ground truth."""
    if not samples:
        raise DataError('cannot evaluate on an empty sample list')
    mode = resolve_psnr_mode(mode)
    preds = [predict_sample(params, s) for s in samples]
    gts = [s.hsi for s in samples]
    per_stack = [psnr(p, g, mode) for p, g in zip(preds, gts)]
    per_stack_standard = [psnr(p, g, 'standard') for p, g in zip(preds, gts)]
    maps = [psnr_map(p, g, mode, saturation_threshold) for p, g in zip(preds, gts)]
    return EvalReport(
        model=params.arch_id,
        mode=mode,
        stack_ids=[s.sample_id for s in samples],
        per_stack_psnr=per_stack,
        per_stack_psnr_standard=per_stack_standard,
        per_band_psnr=band_psnr(preds, gts, mode),
        per_band_psnr_standard=band_psnr(preds, gts, 'standard'),
        mean_psnr=float(np.mean(per_stack)),
        mean_psnr_standard=float(np.mean(per_stack_standard)),
        psnr_maps=maps,
        saturation_mask_applied=any(m.saturation_mask_applied for m in maps),
    )


# ========== cross-validation ==========
def train_models(train: list[Sample], cfg: TrainConfig, model: str) -> dict[str, NetworkParams]:
    """Trains Model 1, and Model 2 on top of it when requested. Returns every trained model by id."""
    if model not in ('model1', 'model2'):
        raise ConfigError(f'unknown model {model!r}')
    trained = {'model1': Trainer.train_model1(train, cfg)}
    if model == 'model2':
        trained['model2'] = Trainer.train_model2(train, trained['model1'], cfg)
    return trained


@dataclass
class FoldResult:
    index: int
    train_ids: list[str]
    test_ids: list[str]
    reports: dict[str, EvalReport] = field(default_factory=dict)
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def _run_fold(index: int, train: list[Sample], test: list[Sample], cfg: TrainConfig, model: str) -> FoldResult:
    result = FoldResult(index, [s.sample_id for s in train], [s.sample_id for s in test])
    try:
        trained = train_models(train, cfg, model)
        result.reports = {name: evaluate(p, test, cfg.psnr_mode) for name, p in trained.items()}
    except SpectralError as e:
        result.error = f'{type(e).__name__}: {e}'
    return result


@dataclass
class LoocvResult:
    model: str
    k: int
    folds: list[FoldResult]

    def successful(self) -> list[FoldResult]:
        return [f for f in self.folds if f.ok]

    def mean_psnr(self, model: str | None = None) -> float:
        """Mean of the fold means over successful folds."""
        model = model or self.model
        return float(np.mean([f.reports[model].mean_psnr for f in self.successful()]))

    def band_psnr(self, model: str | None = None) -> list[float]:
        model = model or self.model
        return list(np.mean([f.reports[model].per_band_psnr for f in self.successful()], axis=0).astype(float))

    def to_dict(self) -> dict:
        models = sorted(self.successful()[0].reports) if self.successful() else []
        return {
            'model': self.model, 'k': self.k,
            'failed_folds': [f.index for f in self.folds if not f.ok],
            'aggregate': {m: {'mean_psnr': _json_float(self.mean_psnr(m)),
                              'per_band_psnr': [_json_float(x) for x in self.band_psnr(m)]} for m in models},
            'folds': [{'index': f.index, 'test_ids': f.test_ids, 'error': f.error,
                       'reports': {m: r.to_dict() for m, r in f.reports.items()}} for f in self.folds],
        }


def run_loocv(dataset: list[Sample], k: int, cfg: TrainConfig, model: str = 'model1') -> LoocvResult:
    """k-fold cross-validation: train on each complement, evaluate on each held-out fold.

    Folds run as independent joblib jobs. A failing fold is kept with its error and left out
    of the aggregate; the run fails only when every fold fails.
    """
    if k < 2:
        raise ConfigError(f'cross-validation needs k >= 2, got {k}')
    by_id = {s.sample_id: s for s in dataset}
    if len(by_id) != len(dataset):
        raise DataError('sample ids must be unique for cross-validation')
    folds = split_folds([s.sample_id for s in dataset], k, cfg.seed)
    fold_cfg = replace(cfg, n_jobs=1)
    results = joblib.Parallel(n_jobs=cfg.n_jobs)(
        joblib.delayed(_run_fold)(i, [by_id[t] for t in train], [by_id[t] for t in test], fold_cfg, model)
        for i, (train, test) in enumerate(folds)
    )
    outcome = LoocvResult(model, k, list(results))
    for f in outcome.folds:
        if not f.ok:
            logger.warning('fold %d failed: %s', f.index, f.error)
    if not outcome.successful():
        raise NumericalError(f'all {k} folds failed')
    logger.info('%d-fold %s: mean PSNR %.4g over %d folds', k, model, outcome.mean_psnr(), len(outcome.successful()))
    return outcome


# ========== transfer matrix ==========
@dataclass
class TransferMatrix:
    sources: list[str]
    targets: list[str]
    tables: dict[str, np.ndarray]
    skipped: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            'sources': self.sources, 'targets': self.targets, 'skipped_sources': self.skipped,
            'tables': {m: [[_json_float(float(x)) for x in row] for row in t] for m, t in self.tables.items()},
        }


def _source_row(
        name: str,
        samples: list[Sample],
        named_datasets: dict[str, list[Sample]],
        cfg: TrainConfig,
        k: int,
        model: str,
        ) -> dict[str, dict[str, float]]:
    """PSNR of every target for one source, keyed by model id then target name."""
    row = {}
    models = ('model1', 'model2') if model == 'model2' else ('model1',)
    if any(t != name and targets for t, targets in named_datasets.items()):
        trained = train_models(samples, cfg, model)
    for target, targets in named_datasets.items():
        if not targets:
            continue
        if target == name:
            folds = min(k, len(samples))
            if folds >= 2:
                loocv = run_loocv(samples, folds, cfg, model)
                scores = {m: loocv.mean_psnr(m) for m in models}
            else:
                logger.warning('%s has a single stack, diagonal cell evaluated on the training data', name)
                own = train_models(samples, cfg, model)
                scores = {m: evaluate(own[m], samples, cfg.psnr_mode).mean_psnr for m in models}
        else:
            scores = {m: evaluate(trained[m], targets, cfg.psnr_mode).mean_psnr for m in models}
        for m, score in scores.items():
            row.setdefault(m, {})[target] = score
    return row


def transfer_matrix(
        named_datasets: dict[str, list[Sample]],
        cfg: TrainConfig,
        k: int = config.FOLDS,
        model: str = 'model1',
        ) -> TransferMatrix:
    """PSNR table of train source x test target.

    Diagonal cells use k-fold cross-validation within the source; off-diagonal cells train on the
    whole source and test on the whole target. Training Model 2 also fills the Model 1 table from
    the same splits. Empty sources are skipped with a warning and their rows stay NaN.
    """
    if len(named_datasets) < 2:
        raise ConfigError(f'a transfer matrix needs at least two datasets, got {len(named_datasets)}')
    names = list(named_datasets)
    skipped = [n for n in names if not named_datasets[n]]
    for n in skipped:
        logger.warning('source %s is empty, skipping its row', n)
    active = [n for n in names if named_datasets[n]]
    row_cfg = replace(cfg, n_jobs=1)
    rows = joblib.Parallel(n_jobs=cfg.n_jobs)(
        joblib.delayed(_source_row)(n, named_datasets[n], named_datasets, row_cfg, k, model) for n in active
    )
    models = ('model1', 'model2') if model == 'model2' else ('model1',)
    tables = {m: np.full((len(names), len(names)), np.nan) for m in models}
    for n, row in zip(active, rows):
        for m in models:
            for target, score in row.get(m, {}).items():
                tables[m][names.index(n), names.index(target)] = score
    return TransferMatrix(names, names, tables, skipped)
