"""Command line front end.

Usage:
    python main.py gen --out data/species0
    python main.py train --dataset data/species0 --out models/model1.json
    python main.py train --dataset data/species0 --out models/model2.json --init-model1 models/model1.json --set model.model=model2
    python main.py eval --params models/model2.json --dataset data/species0 --out reports/model2
    python main.py scene --out scenes/tissue
    python main.py reconstruct --scene scenes/tissue --out surfaces/tissue
    python main.py overlay --cloud surfaces/tissue/surface.ply --msi pred.json --camera surfaces/tissue/camera.json --extinction hb.csv --out sao2.ply
"""

import argparse
import json
import logging
import pathlib
import sys

import numpy as np
import PIL.Image

from dataset import SpotSet, generate_synthetic_dataset, load_dataset, load_stack, save_dataset, save_map, save_stack
from detection import load_correspondences
from errors import ConfigError, SpectralError, TrainingDiverged
from evaluation import evaluate, predict_sample, run_loocv, transfer_matrix
from overlay import ExtinctionTable, drape_overlay, narrow_band, oxygen_saturation
from prediction import ArchConfig, Predictor
from reconstruction import (PinholeCamera, ProbeRig, reconstruct_surface, sl_reference,
                            triangulate_sl, write_ply, read_ply)
from runconfig import RunConfig, load_run_config
from scene import load_scene, make_scene, save_scene
from training import Trainer, TrainingLog
import config

logger = logging.getLogger(__name__)


def configure_logging(level: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter('%(asctime)s %(levelname)s %(name)s: %(message)s'))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level.upper())


def write_json(content: dict, path: pathlib.Path) -> pathlib.Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(content, indent=2, sort_keys=True), encoding='utf-8')
    return path


# ========== gen ==========
def cmd_gen(args: argparse.Namespace, run: RunConfig) -> int:
    g = run.gen
    samples = generate_synthetic_dataset(g.n_stacks, (g.height, g.width), g.seed, species=g.species,
                                         sigma_px=g.sigma_px, threshold=g.threshold, n_jobs=g.n_jobs)
    manifest = save_dataset(samples, args.out)
    logger.info('wrote %d samples, manifest %s', len(samples), manifest)
    return config.EXIT_OK


# ========== train ==========
def cmd_train(args: argparse.Namespace, run: RunConfig) -> int:
    samples = load_dataset(args.dataset)
    out = pathlib.Path(args.out)
    log = TrainingLog()
    try:
        if run.model.model == 'model2':
            if args.init_model1 is None:
                raise ConfigError('model2 training starts from trained Model 1 parameters: pass --init-model1')
            init = Predictor.load_params(args.init_model1)
            if init.arch_id != 'model1':
                raise ConfigError(f'--init-model1 holds {init.arch_id} parameters')
            params = Trainer.train_model2(samples, init, run.train, log)
        else:
            hsi = samples[0].hsi if samples else None
            arch = ArchConfig.default(
                spectral_out=hsi.channels if hsi else config.BAND_COUNT,
                hidden_features=run.model.hidden_features, merge_kernel=run.model.merge_kernel,
                merge_density=run.model.merge_density,
                wavelengths_nm=hsi.wavelengths_nm if hsi else None, sparse_threshold=run.gen.threshold)
            params = Trainer.train_model1(samples, run.train, Predictor.build_model1(arch, run.train.seed), log)
    except TrainingDiverged as e:
        if e.checkpoint is not None:
            saved = Predictor.save_params(e.checkpoint, out.with_name(f'{out.stem}_last_good.json'))
            logger.error('training diverged at epoch %d, last good parameters in %s', e.epoch, saved)
        raise
    finally:
        log.write_csv(out.with_name(f'{out.stem}_log.csv'))
    manifest = Predictor.save_params(params, out)
    logger.info('saved %s parameters (%d values) to %s', params.arch_id, params.parameter_count(), manifest)
    return config.EXIT_OK


# ========== eval ==========
def _named_datasets(specs: list[str]) -> dict[str, str]:
    named = {}
    for i, spec in enumerate(specs):
        name, sep, path = spec.partition('=')
        if not sep:
            name, path = pathlib.Path(spec).name or f'dataset{i}', spec
        if name in named:
            raise ConfigError(f'dataset name {name!r} given twice')
        named[name] = path
    return named


def cmd_eval(args: argparse.Namespace, run: RunConfig) -> int:
    out = pathlib.Path(args.out)
    specs = args.dataset or []
    mode = run.eval.mode
    if mode == 'transfer':
        named = {name: load_dataset(path) for name, path in _named_datasets(specs).items()}
        matrix = transfer_matrix(named, run.train, run.eval.k, run.model.model)
        write_json(matrix.to_dict(), out / 'transfer.json')
        return config.EXIT_OK
    if len(specs) != 1:
        raise ConfigError(f'eval mode {mode!r} takes exactly one --dataset, got {len(specs)}')
    samples = load_dataset(specs[0])
    if mode == 'loocv':
        result = run_loocv(samples, run.eval.k, run.train, run.model.model)
        write_json(result.to_dict(), out / 'loocv.json')
        return config.EXIT_OK
    if args.params is None:
        raise ConfigError('single evaluation needs --params')
    params = Predictor.load_params(args.params)
    report = evaluate(params, samples, run.train.psnr_mode, run.eval.saturation_threshold)
    path = report.save(out)
    if args.predictions:
        for sample in samples:
            save_stack(predict_sample(params, sample), pathlib.Path(args.predictions) / f'{sample.sample_id.replace("/", "_")}_pred.json')
    logger.info('%s: mean PSNR %s (%s), %s (standard); report %s', params.arch_id, report.mean_psnr,
                report.mode, report.mean_psnr_standard, path)
    return config.EXIT_OK


# ========== reconstruct ==========
def _load_frame(path: str) -> np.ndarray:
    return np.asarray(PIL.Image.open(path).convert('RGB'))


def _reconstruct(args: argparse.Namespace, run: RunConfig, out: pathlib.Path) -> dict:
    bundle = load_scene(args.scene) if args.scene else None
    cam = PinholeCamera.load(args.camera) if args.camera else (bundle.camera if bundle else None)
    rig = ProbeRig.load(args.rig) if args.rig else (bundle.rig if bundle else None)
    if cam is None or rig is None:
        raise ConfigError('reconstruct needs a camera and a rig (--camera/--rig or --scene)')
    if args.sl:
        sl_spots = tuple(SpotSet.load(p, cam.width, cam.height) for p in args.sl)
    elif bundle:
        sl_spots = bundle.sl_spots
    else:
        raise ConfigError('reconstruct needs two structured-light spot files (--sl A B or --scene)')
    frames = tuple(_load_frame(p) for p in args.frames) if args.frames else (bundle.frames if bundle else None)
    correspondences = None
    if args.correspondences:
        correspondences = load_correspondences(args.correspondences)
    elif bundle and not args.track:
        correspondences = bundle.correspondences
    cam.save(out / 'camera.json')

    if frames is None and correspondences is None:
        clouds = [triangulate_sl(s, cam, rig, run.geometry.sl_min_angle_deg, run.geometry.sl_skew_tolerance_mm) for s in sl_spots]
        cloud = sl_reference((clouds[0][0], clouds[1][0]))
        write_ply(cloud, out / 'surface.ply')
        dropped = {**clouds[0][1], **clouds[1][1]}
        return {'status': 'ok', 'mode': 'sl-only', 'points': len(cloud), 'scale_status': cloud.scale_status,
                'sl_dropped': {str(k): v for k, v in sorted(dropped.items())}}

    result = reconstruct_surface(cam, rig, sl_spots, frames, correspondences, run.geometry)
    write_ply(result.cloud, out / 'surface.ply')
    metrics = {'status': 'ok', 'mode': 'sl+sfm', 'scale_status': result.cloud.scale_status, **result.summary()}
    if bundle is not None and correspondences is bundle.correspondences and len(result.cloud):
        error = result.cloud.points - bundle.points_gt[result.cloud.ids]
        metrics['rms_error_mm'] = float(np.sqrt(np.mean(np.sum(error ** 2, axis=1))))
        metrics['true_translation_mm'] = float(np.linalg.norm(bundle.t))
    return metrics


def cmd_reconstruct(args: argparse.Namespace, run: RunConfig) -> int:
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        metrics = _reconstruct(args, run, out)
    except SpectralError as e:
        write_json({'status': 'failed', 'error': type(e).__name__, 'message': str(e), 'exit_code': e.exit_code},
                   out / 'failure.json')
        raise
    write_json(metrics, out / 'metrics.json')
    logger.info('reconstructed %d points (%s)', metrics['points'], metrics['scale_status'])
    return config.EXIT_OK


# ========== overlay ==========
def cmd_overlay(args: argparse.Namespace, run: RunConfig) -> int:
    o = run.overlay
    if o.kind == 'sao2' and args.extinction is None:
        raise ConfigError('an sao2 overlay needs --extinction')
    cloud = read_ply(args.cloud)
    msi = load_stack(args.msi)
    cam = PinholeCamera.load(args.camera)
    if o.kind == 'nbi':
        nbi = narrow_band(msi, o.wavelengths_nm)
        if args.png:
            nbi.save_png(args.png)
        draped = drape_overlay(cloud, nbi.image, cam)
    else:
        saturation = oxygen_saturation(msi, ExtinctionTable.load(args.extinction), flat_field=o.flat_field)
        if args.map:
            save_map(np.nan_to_num(saturation.sao2, nan=-1.0), args.map)
        logger.info('oxygen saturation: %s', json.dumps(saturation.summary(), sort_keys=True))
        draped = drape_overlay(cloud, saturation.sao2, cam, o.colormap, tuple(o.value_range))
    write_ply(draped, args.out)
    logger.info('wrote %s overlay on %d points to %s', o.kind, len(draped), args.out)
    return config.EXIT_OK


# ========== scene ==========
def cmd_scene(args: argparse.Namespace, run: RunConfig) -> int:
    bundle = make_scene(run.scene)
    manifest = save_scene(bundle, args.out)
    bundle.camera.save(pathlib.Path(args.out) / 'camera.json')
    logger.info('wrote scene bundle %s', manifest)
    return config.EXIT_OK


COMMANDS = {
    'gen': cmd_gen, 'train': cmd_train, 'eval': cmd_eval,
    'reconstruct': cmd_reconstruct, 'overlay': cmd_overlay, 'scene': cmd_scene,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='JSON run configuration')
    common.add_argument('--set', action='append', default=[], metavar='GROUP.KEY=VALUE',
                        help='override one configuration value (JSON-parsed when possible)')
    common.add_argument('--log-level', default='INFO', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])

    parser = argparse.ArgumentParser(description='Spectral super-resolution and metric surface reconstruction')
    sub = parser.add_subparsers(dest='command', required=True)

    gen = sub.add_parser('gen', parents=[common], help='generate a synthetic dataset')
    gen.add_argument('--out', required=True)

    train = sub.add_parser('train', parents=[common], help='train Model 1 or Model 2')
    train.add_argument('--dataset', required=True)
    train.add_argument('--out', required=True, help='parameter manifest path')
    train.add_argument('--init-model1', help='trained Model 1 parameters (required for model2)')

    ev = sub.add_parser('eval', parents=[common], help='evaluate, cross-validate or build a transfer matrix')
    ev.add_argument('--dataset', action='append', help='dataset directory; NAME=DIR in transfer mode')
    ev.add_argument('--params')
    ev.add_argument('--out', required=True)
    ev.add_argument('--predictions', help='directory for predicted stacks (single mode)')

    rec = sub.add_parser('reconstruct', parents=[common], help='reconstruct a metric surface')
    rec.add_argument('--scene', help='scene bundle directory')
    rec.add_argument('--camera')
    rec.add_argument('--rig')
    rec.add_argument('--sl', nargs=2, metavar=('SPOTS_A', 'SPOTS_B'))
    rec.add_argument('--frames', nargs=2, metavar=('FRAME_A', 'FRAME_B'))
    rec.add_argument('--correspondences')
    rec.add_argument('--track', action='store_true', help='track features in the frames instead of using stored correspondences')
    rec.add_argument('--out', required=True)

    ov = sub.add_parser('overlay', parents=[common], help='drape a narrow-band or SaO2 map onto a cloud')
    ov.add_argument('--cloud', required=True)
    ov.add_argument('--msi', required=True, help='predicted stack file')
    ov.add_argument('--camera', required=True)
    ov.add_argument('--extinction')
    ov.add_argument('--png', help='narrow-band image output')
    ov.add_argument('--map', help='SaO2 map output (undefined pixels stored as -1)')
    ov.add_argument('--out', required=True)

    sc = sub.add_parser('scene', parents=[common], help='write a synthetic reconstruction bundle')
    sc.add_argument('--out', required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        run = load_run_config(args.config, args.set)
        logger.info('resolved configuration: %s', json.dumps(run.to_dict(), sort_keys=True))
        return COMMANDS[args.command](args, run)
    except SpectralError as e:
        logger.error('%s: %s', type(e).__name__, e)
        return e.exit_code
    except OSError as e:
        logger.error('%s: %s', type(e).__name__, e)
        return config.EXIT_DATA


if __name__ == '__main__':
    sys.exit(main())
