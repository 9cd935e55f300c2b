"""Model 1 (RGB to multispectral upscaler with a residual high-frequency block) and Model 2
(Model 1 plus the sparse-spectrum merge stage): construction, prediction, freezing and files."""

from dataclasses import dataclass, field
import hashlib
import json
import logging
import math
import pathlib

import numpy as np

from dataset import DensityMap, SpectralStack
from errors import ConfigError, DataError, ShapeError
from tensorcore import LayerSpec, Tensor, backward, forward
import config

logger = logging.getLogger(__name__)

ARCH_IDS = ('model1', 'model2')
CORE_PREFIX = 'model1core/'
MERGE_PREFIX = 'merge/'
RELU = LayerSpec('relu')
ADD = LayerSpec('residual-add')
PREDICT_CHUNK = 65536


# ========== architecture ==========
@dataclass
class ArchConfig:
    spectral_in: int = config.RGB_CHANNELS
    spectral_out: int = config.BAND_COUNT
    hidden_features: int = config.HIDDEN_FEATURES
    upscale_layers: list[LayerSpec] = field(default_factory=list)
    hfe_layers: list[LayerSpec] = field(default_factory=list)
    merge_kernel: int = config.MERGE_KERNEL
    merge_density: str = 'hsi'
    merge_init: str = 'blend'
    wavelengths_nm: list[float] = field(default_factory=list)
    sparse_threshold: float = config.SPARSE_THRESHOLD

    @classmethod
    def default(
            cls,
            spectral_out: int = config.BAND_COUNT,
            spectral_in: int = config.RGB_CHANNELS,
            hidden_features: int = config.HIDDEN_FEATURES,
            merge_kernel: int = config.MERGE_KERNEL,
            merge_density: str = 'hsi',
            wavelengths_nm: list[float] | None = None,
            sparse_threshold: float = config.SPARSE_THRESHOLD,
            ) -> 'ArchConfig':
        """Four transposed convolutions: stride 2 (k=4, p=1) while doubling, then stride 1 (k=3, p=1)."""
        ratio = spectral_out / spectral_in
        doublings = round(math.log2(ratio)) if ratio >= 1 else -1
        if doublings < 0 or doublings > config.UPSCALE_LAYERS or spectral_in * 2 ** doublings != spectral_out:
            raise ConfigError(f'cannot map {spectral_in} to {spectral_out} bands with {config.UPSCALE_LAYERS} '
                              'transposed convolutions (ratio must be a power of two up to 16)')
        upscale = []
        for i in range(config.UPSCALE_LAYERS):
            c_in = 1 if i == 0 else hidden_features
            c_out = 1 if i == config.UPSCALE_LAYERS - 1 else hidden_features
            if i < doublings:
                upscale.append(LayerSpec('tconv1d', kernel_size=4, stride=2, in_channels=c_in, out_channels=c_out, padding=1))
            else:
                upscale.append(LayerSpec('tconv1d', kernel_size=3, stride=1, in_channels=c_in, out_channels=c_out, padding=1))
        hfe = [
            LayerSpec('conv1d', kernel_size=3, in_channels=1, out_channels=hidden_features, padding=1),
            LayerSpec('conv1d', kernel_size=3, in_channels=hidden_features, out_channels=1, padding=1),
        ]
        if wavelengths_nm is None:
            if spectral_out == config.BAND_COUNT:
                wavelengths_nm = list(config.WAVELENGTHS_NM)
            else:
                wavelengths_nm = list(np.linspace(config.WAVELENGTHS_NM[0], config.WAVELENGTHS_NM[-1], spectral_out))
        arch = cls(spectral_in, spectral_out, hidden_features, upscale, hfe, merge_kernel, merge_density,
                   'blend' if merge_density == 'hsi' else 'random', [float(w) for w in wavelengths_nm],
                   float(sparse_threshold))
        arch.validate()
        return arch

    def lengths(self) -> list[int]:
        """Spectral length after the input and after each upscale layer."""
        lengths = [self.spectral_in]
        for layer in self.upscale_layers:
            lengths.append(layer.output_length(lengths[-1]))
        return lengths

    def validate(self) -> None:
        tconvs = [layer for layer in self.upscale_layers if layer.kind == 'tconv1d']
        if len(tconvs) != config.UPSCALE_LAYERS or len(self.upscale_layers) != config.UPSCALE_LAYERS:
            raise ConfigError(f'upscale stage needs exactly {config.UPSCALE_LAYERS} tconv1d layers')
        lengths = self.lengths()
        if lengths[-1] != self.spectral_out:
            raise ConfigError(f'upscale lengths {lengths} do not end at {self.spectral_out}')
        channels = 1
        for layer in self.upscale_layers + self.hfe_layers:
            if layer.in_channels != channels:
                raise ConfigError(f'{layer.kind} expects {layer.in_channels} channels, receives {channels}')
            channels = layer.out_channels
            if channels != 1 and layer is self.upscale_layers[-1]:
                raise ConfigError('the last upscale layer must produce a single channel')
        if channels != 1:
            raise ConfigError('the HFE block must return a single channel')
        length = self.spectral_out
        for layer in self.hfe_layers:
            if layer.kind != 'conv1d' or layer.output_length(length) != length:
                raise ConfigError('HFE layers must be length-preserving conv1d layers')
        if self.merge_kernel < 1 or self.merge_kernel % 2 == 0:
            raise ConfigError(f'merge_kernel must be odd and positive, got {self.merge_kernel}')
        if self.merge_density not in ('hsi', 'rgb'):
            raise ConfigError(f'merge_density must be hsi or rgb, got {self.merge_density!r}')
        if self.merge_init not in ('blend', 'random'):
            raise ConfigError(f'merge_init must be blend or random, got {self.merge_init!r}')
        if self.merge_init == 'blend' and self.merge_density != 'hsi':
            raise ConfigError('blend initialisation of the merge stage requires merge_density="hsi"')
        if len(self.wavelengths_nm) != self.spectral_out:
            raise ConfigError(f'{len(self.wavelengths_nm)} wavelengths for {self.spectral_out} output bands')
        if not 0.0 <= self.sparse_threshold < 1.0:
            raise ConfigError(f'sparse_threshold must lie in [0, 1), got {self.sparse_threshold}')

    def merge_layers(self) -> dict[str, LayerSpec]:
        c = self.spectral_out
        return {
            'product': LayerSpec('elementwise-product', in_channels=c, out_channels=c),
            'concat': LayerSpec('concat', in_channels=c, out_channels=2 * c),
            'conv': LayerSpec('conv2d', kernel_size=self.merge_kernel, in_channels=2 * c, out_channels=c,
                              padding=self.merge_kernel // 2),
            'add': LayerSpec('residual-add', in_channels=c, out_channels=c),
        }

    def to_dict(self) -> dict:
        return {
            'spectral_in': self.spectral_in, 'spectral_out': self.spectral_out,
            'hidden_features': self.hidden_features,
            'upscale_layers': [layer.to_dict() for layer in self.upscale_layers],
            'hfe_layers': [layer.to_dict() for layer in self.hfe_layers],
            'merge_kernel': self.merge_kernel, 'merge_density': self.merge_density,
            'merge_init': self.merge_init, 'wavelengths_nm': self.wavelengths_nm,
            'sparse_threshold': self.sparse_threshold,
        }

    @classmethod
    def from_dict(cls, d: dict) -> 'ArchConfig':
        try:
            arch = cls(
                spectral_in=int(d['spectral_in']), spectral_out=int(d['spectral_out']),
                hidden_features=int(d['hidden_features']),
                upscale_layers=[LayerSpec(**layer) for layer in d['upscale_layers']],
                hfe_layers=[LayerSpec(**layer) for layer in d['hfe_layers']],
                merge_kernel=int(d['merge_kernel']), merge_density=d['merge_density'],
                merge_init=d['merge_init'], wavelengths_nm=[float(w) for w in d['wavelengths_nm']],
                sparse_threshold=float(d['sparse_threshold']),
            )
        except (KeyError, TypeError) as e:
            raise DataError(f'malformed architecture description: {e}') from e
        arch.validate()
        return arch

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode('utf-8')).hexdigest()


# ========== parameters ==========
@dataclass
class ParamEntry:
    name: str
    tensor: np.ndarray
    frozen: bool = False


@dataclass
class NetworkParams:
    entries: list[ParamEntry]
    arch_id: str
    arch: ArchConfig
    config_digest: str = ''

    def __post_init__(self) -> None:
        if self.arch_id not in ARCH_IDS:
            raise ConfigError(f'unknown architecture {self.arch_id!r}')
        names = self.names()
        if len(set(names)) != len(names):
            raise ConfigError('parameter names must be unique')
        if not self.config_digest:
            self.config_digest = self.arch.digest()

    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def tensors(self) -> dict[str, np.ndarray]:
        return {e.name: e.tensor for e in self.entries}

    def frozen_names(self) -> frozenset:
        return frozenset(e.name for e in self.entries if e.frozen)

    def with_tensors(self, tensors: dict[str, np.ndarray]) -> 'NetworkParams':
        """Returns a copy carrying the given tensors and the current frozen flags."""
        return NetworkParams([ParamEntry(e.name, tensors[e.name], e.frozen) for e in self.entries],
                             self.arch_id, self.arch, self.config_digest)

    def copy(self) -> 'NetworkParams':
        return self.with_tensors({e.name: e.tensor.copy() for e in self.entries})

    def parameter_count(self) -> int:
        return int(sum(e.tensor.size for e in self.entries))


def _layer_names(arch: ArchConfig) -> list[tuple[str, LayerSpec]]:
    named = [(f'{CORE_PREFIX}upscale{i}', layer) for i, layer in enumerate(arch.upscale_layers)]
    named += [(f'{CORE_PREFIX}hfe{i}', layer) for i, layer in enumerate(arch.hfe_layers)]
    return named


def _he_init(rng: np.random.Generator, layer: LayerSpec) -> tuple[np.ndarray, np.ndarray | None]:
    weight_shape, bias_shape = layer.param_shapes()
    fan_in = layer.in_channels * layer.kernel_size * (layer.kernel_size if layer.kind == 'conv2d' else 1)
    weight = (rng.standard_normal(weight_shape) * math.sqrt(2.0 / fan_in)).astype(np.float32)
    bias = np.zeros(bias_shape, dtype=np.float32) if bias_shape is not None else None
    return weight, bias


def _entries_for(prefix: str, weight: np.ndarray, bias: np.ndarray | None) -> list[ParamEntry]:
    entries = [ParamEntry(f'{prefix}/weight', weight)]
    if bias is not None:
        entries.append(ParamEntry(f'{prefix}/bias', bias))
    return entries


class Predictor:
    # ========== construction ==========
    @staticmethod
    def build_model1(cfg: ArchConfig, seed: int) -> NetworkParams:
        """Initialises Model 1 with He-scaled gaussian weights and zero biases.

        Parameters
        ----------
        cfg: ArchConfig
            Architecture; rejected if the upscale stage does not map spectral_in to spectral_out.
        seed: int
            Seed for the weight initialisation.

        Returns
        -------
        params: NetworkParams
        """
        cfg.validate()
        rng = np.random.default_rng(seed)
        entries = []
        for prefix, layer in _layer_names(cfg):
            entries += _entries_for(prefix, *_he_init(rng, layer))
        return NetworkParams(entries, 'model1', cfg)

    @staticmethod
    def build_model2(cfg: ArchConfig, seed: int, init: NetworkParams | None = None) -> NetworkParams:
        """Model 2: the Model 1 core (copied from init when given) plus a freshly initialised merge stage."""
        if init is not None:
            if init.arch_id != 'model1':
                raise ConfigError(f'Model 2 must be initialised from Model 1 parameters, got {init.arch_id}')
            if init.arch.digest() != cfg.digest():
                logger.info('adopting the architecture stored with the Model 1 parameters')
                cfg = init.arch
            core = [ParamEntry(e.name, e.tensor.copy(), False) for e in init.entries]
        else:
            core = Predictor.build_model1(cfg, seed).entries
        cfg.validate()
        conv = cfg.merge_layers()['conv']
        c, centre = cfg.spectral_out, cfg.merge_kernel // 2
        if cfg.merge_init == 'blend':
            # out = H_hat + H_s - D * H_hat at the kernel centre, i.e. the D_rgb / D_hsi blend
            weight = np.zeros(conv.param_shapes()[0], dtype=np.float32)
            bands = np.arange(c)
            weight[bands, bands, centre, centre] = 1.0
            weight[bands, c + bands, centre, centre] = -1.0
            bias = np.zeros(c, dtype=np.float32)
        else:
            weight, bias = _he_init(np.random.default_rng([seed, 2]), conv)
            weight *= np.float32(0.1)
        return NetworkParams(core + _entries_for('merge', weight, bias), 'model2', cfg)

    # ========== freezing ==========
    @staticmethod
    def prefixes(params: NetworkParams) -> list[str]:
        """Every group prefix a name can be frozen by."""
        found = set()
        for name in params.names():
            parts = name.split('/')
            for i in range(1, len(parts)):
                found.add('/'.join(parts[:i]) + '/')
        return sorted(found)

    @staticmethod
    def set_frozen(params: NetworkParams, name_prefix: str, frozen: bool) -> NetworkParams:
        """Returns a copy whose entries starting with name_prefix carry the frozen flag."""
        if not any(e.name.startswith(name_prefix) for e in params.entries):
            raise ConfigError(f'no parameter matches {name_prefix!r}; valid prefixes: {Predictor.prefixes(params)}')
        entries = [ParamEntry(e.name, e.tensor, frozen if e.name.startswith(name_prefix) else e.frozen)
                   for e in params.entries]
        return NetworkParams(entries, params.arch_id, params.arch, params.config_digest)

    # ========== forward / backward ==========
    @staticmethod
    def _run(sequence: list[tuple[LayerSpec, str | None]], x: Tensor, tensors: dict[str, Tensor]) -> tuple[Tensor, list]:
        tape = []
        for layer, prefix in sequence:
            params = None
            if prefix is not None:
                params = (tensors[f'{prefix}/weight'], tensors.get(f'{prefix}/bias'))
            x, cache = forward(layer, x, params)
            tape.append((layer, prefix, cache))
        return x, tape

    @staticmethod
    def _unrun(tape: list, g: Tensor, grads: dict[str, Tensor]) -> Tensor:
        for layer, prefix, cache in reversed(tape):
            g, grad_params = backward(layer, g, cache)
            if prefix is not None:
                grad_w, grad_b = grad_params
                grads[f'{prefix}/weight'] = grads.get(f'{prefix}/weight', 0) + grad_w
                if grad_b is not None:
                    grads[f'{prefix}/bias'] = grads.get(f'{prefix}/bias', 0) + grad_b
        return g

    @staticmethod
    def _sequences(arch: ArchConfig) -> tuple[list, list]:
        upscale = []
        for i, layer in enumerate(arch.upscale_layers):
            upscale.append((layer, f'{CORE_PREFIX}upscale{i}'))
            if i < len(arch.upscale_layers) - 1:
                upscale.append((RELU, None))
        hfe = []
        for i, layer in enumerate(arch.hfe_layers):
            hfe.append((layer, f'{CORE_PREFIX}hfe{i}'))
            if i < len(arch.hfe_layers) - 1:
                hfe.append((RELU, None))
        return upscale, hfe

    @classmethod
    def core_forward(cls, arch: ArchConfig, tensors: dict[str, Tensor], x: Tensor) -> tuple[Tensor, dict]:
        """Model 1 on normalised spectra of shape (pixels, 1, spectral_in). Returns (pixels, 1, spectral_out)."""
        upscale, hfe = cls._sequences(arch)
        u, upscale_tape = cls._run(upscale, x, tensors)
        f, hfe_tape = cls._run(hfe, u, tensors)
        out, add_cache = forward(ADD, (u, f))
        return out, {'upscale': upscale_tape, 'hfe': hfe_tape, 'add': add_cache}

    @classmethod
    def core_backward(cls, g: Tensor, tape: dict, grads: dict[str, Tensor]) -> Tensor:
        (g_shortcut, g_hfe), _ = backward(ADD, g, tape['add'])
        g_u = g_shortcut + cls._unrun(tape['hfe'], g_hfe, grads)
        return cls._unrun(tape['upscale'], g_u, grads)

    @classmethod
    def merge_forward(
            cls,
            arch: ArchConfig,
            tensors: dict[str, Tensor],
            rgb: Tensor,
            density: Tensor,
            sparse: Tensor,
            ) -> tuple[Tensor, dict]:
        """Model 2 on normalised batches: rgb (B, 3, H, W), density (B, H, W), sparse (B, C, H, W)."""
        batch, _, height, width = rgb.shape
        c = arch.spectral_out
        pixels = np.ascontiguousarray(rgb.transpose(0, 2, 3, 1)).reshape(-1, 1, arch.spectral_in)
        core, core_tape = cls.core_forward(arch, tensors, pixels)
        h_hat = np.ascontiguousarray(core.reshape(batch, height, width, c).transpose(0, 3, 1, 2))
        # same support as the sparse stack, so D * H_hat and H_s are compared on identical pixels
        support = np.where(density >= arch.sparse_threshold, density, 0.0)
        weight_map = support if arch.merge_density == 'hsi' else 1.0 - support
        weight_map = weight_map[:, None].astype(h_hat.dtype, copy=False)

        layers = arch.merge_layers()
        product, product_cache = forward(layers['product'], (h_hat, weight_map))
        stacked, concat_cache = forward(layers['concat'], (sparse.astype(h_hat.dtype, copy=False), product))
        correction, conv_cache = forward(layers['conv'], stacked, (tensors['merge/weight'], tensors.get('merge/bias')))
        out, add_cache = forward(layers['add'], (h_hat, correction))
        tape = {'core': core_tape, 'product': product_cache, 'concat': concat_cache, 'conv': conv_cache,
                'add': add_cache, 'shape': (batch, height, width, c)}
        return out, tape

    @classmethod
    def merge_backward(cls, arch: ArchConfig, g: Tensor, tape: dict, core_grads: bool = True) -> dict[str, Tensor]:
        layers = arch.merge_layers()
        grads = {}
        (g_h_hat, g_correction), _ = backward(layers['add'], g, tape['add'])
        g_stacked, (grad_w, grad_b) = backward(layers['conv'], g_correction, tape['conv'])
        grads['merge/weight'] = grad_w
        if grad_b is not None:
            grads['merge/bias'] = grad_b
        (_, g_product), _ = backward(layers['concat'], g_stacked, tape['concat'])
        (g_h_hat_product, _), _ = backward(layers['product'], g_product, tape['product'])
        if core_grads:
            batch, height, width, c = tape['shape']
            g_core = g_h_hat + g_h_hat_product
            g_core = np.ascontiguousarray(g_core.transpose(0, 2, 3, 1)).reshape(-1, 1, c)
            cls.core_backward(g_core, tape['core'], grads)
        return grads

    # ========== prediction ==========
    @classmethod
    def _core_predict(cls, params: NetworkParams, rgb: SpectralStack) -> np.ndarray:
        arch = params.arch
        if rgb.channels != arch.spectral_in:
            raise ShapeError(f'input has {rgb.channels} channels, the model expects {arch.spectral_in}')
        tensors = params.tensors()
        pixels = (rgb.pixels() / np.float32(config.VALUE_MAX)).astype(np.float32)[:, None, :]
        outputs = []
        for start in range(0, pixels.shape[0], PREDICT_CHUNK):
            out, _ = cls.core_forward(arch, tensors, pixels[start: start + PREDICT_CHUNK])
            outputs.append(out[:, 0, :])
        spectra = np.concatenate(outputs, axis=0) if outputs else np.zeros((0, arch.spectral_out), np.float32)
        return spectra.T.reshape(arch.spectral_out, rgb.height, rgb.width)

    @classmethod
    def model1_predict(cls, params: NetworkParams, rgb: SpectralStack) -> SpectralStack:
        """Maps an M x N x 3 stack to M x N x spectral_out, pixel by pixel."""
        if params.arch_id != 'model1':
            raise ConfigError(f'model1_predict needs Model 1 parameters, got {params.arch_id}')
        normalised = cls._core_predict(params, rgb)
        return SpectralStack(normalised * np.float32(config.VALUE_MAX), params.arch.wavelengths_nm)

    @classmethod
    def model2_predict(
            cls,
            params: NetworkParams,
            rgb: SpectralStack,
            d_hsi: DensityMap,
            sparse: SpectralStack,
            ) -> SpectralStack:
        """Refines the Model 1 estimate with sparse measured spectra.

        Parameters
        ----------
        params: NetworkParams
            Model 2 parameters.
        rgb: SpectralStack
            M x N x 3 input.
        d_hsi: np.ndarray
            M x N density map of the sampling locations.
        sparse: SpectralStack
            M x N x C sparse stack, zero away from the samples.

        Returns
        -------
        msi: SpectralStack
            The dense M x N x C estimate.
        """
        if params.arch_id != 'model2':
            raise ConfigError(f'model2_predict needs Model 2 parameters, got {params.arch_id}')
        arch = params.arch
        dims = (rgb.height, rgb.width)
        if d_hsi.shape != dims:
            raise ShapeError(f'density map {d_hsi.shape} does not match the RGB image {dims}')
        if (sparse.height, sparse.width) != dims:
            raise ShapeError(f'sparse stack {(sparse.height, sparse.width)} does not match the RGB image {dims}')
        if sparse.channels != arch.spectral_out:
            raise ShapeError(f'sparse stack has {sparse.channels} channels, the model produces {arch.spectral_out}')
        if rgb.channels != arch.spectral_in:
            raise ShapeError(f'input has {rgb.channels} channels, the model expects {arch.spectral_in}')
        scale = np.float32(config.VALUE_MAX)
        out, _ = cls.merge_forward(arch, params.tensors(), rgb.data[None] / scale,
                                   d_hsi[None].astype(np.float32), sparse.data[None] / scale)
        return SpectralStack(out[0] * scale, arch.wavelengths_nm)

    # ========== files ==========
    @staticmethod
    def save_params(params: NetworkParams, path: str | pathlib.Path) -> pathlib.Path:
        """Writes a JSON manifest and a sibling little-endian float32 payload in manifest order."""
        path = pathlib.Path(path)
        manifest_path = path if path.suffix == '.json' else path.with_suffix('.json')
        payload_path = manifest_path.with_suffix('.params')
        payload = b''.join(np.ascontiguousarray(e.tensor, dtype='<f4').tobytes() for e in params.entries)
        manifest = {
            'arch_id': params.arch_id,
            'arch': params.arch.to_dict(),
            'config_digest': params.config_digest,
            'entries': [{'name': e.name, 'shape': list(e.tensor.shape), 'frozen': e.frozen} for e in params.entries],
            'payload': payload_path.name,
            'payload_bytes': len(payload),
        }
        manifest_path.parent.mkdir(parents=True, exist_ok=True)
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding='utf-8')
        payload_path.write_bytes(payload)
        return manifest_path

    @staticmethod
    def load_params(
            path: str | pathlib.Path,
            arch_id: str | None = None,
            expected_arch: ArchConfig | None = None,
            seed: int = 0,
            ) -> NetworkParams:
        """Reads parameters written by save_params.

        Parameters
        ----------
        path: str | Path
            Manifest path.
        arch_id: str | None
            Requested architecture. Loading Model 1 parameters as 'model2' populates the shared
            entries and initialises the merge stage.
        expected_arch: ArchConfig | None
            When given, the stored digest must match it.
        seed: int
            Seed for any freshly initialised entries.
        """
        path = pathlib.Path(path)
        manifest_path = path if path.suffix == '.json' else path.with_suffix('.json')
        try:
            manifest = json.loads(manifest_path.read_text(encoding='utf-8'))
            payload = (manifest_path.parent / manifest['payload']).read_bytes()
            arch_fields, digest = manifest['arch'], str(manifest['config_digest'])
            declared_bytes, stored = int(manifest['payload_bytes']), manifest['arch_id']
            items = [(str(item['name']), tuple(int(n) for n in item['shape']), bool(item['frozen'])) for item in manifest['entries']]
        except (OSError, KeyError, TypeError, ValueError) as e:
            raise DataError(f'cannot read parameters {manifest_path}: {e}') from e
        arch = ArchConfig.from_dict(arch_fields)
        if arch.digest() != digest:
            raise DataError(f'{manifest_path}: architecture digest mismatch, refusing to load')
        if expected_arch is not None and expected_arch.digest() != digest:
            raise DataError(f'{manifest_path}: parameters were trained for a different architecture')
        if len(payload) != declared_bytes:
            raise DataError(f'{manifest_path}: payload has {len(payload)} bytes, manifest declares {declared_bytes}')

        entries, offset = [], 0
        for name, shape, frozen in items:
            count = int(np.prod(shape, dtype=np.int64))
            if offset + 4 * count > len(payload):
                raise DataError(f'{manifest_path}: payload truncated at {name}')
            tensor = np.frombuffer(payload, dtype='<f4', count=count, offset=offset).reshape(shape).astype(np.float32)
            entries.append(ParamEntry(name, tensor, frozen))
            offset += 4 * count
        if offset != len(payload):
            raise DataError(f'{manifest_path}: {len(payload) - offset} trailing payload bytes')

        params = NetworkParams(entries, stored, arch, digest)
        expected = Predictor.build_model1(arch, seed) if stored == 'model1' else Predictor.build_model2(arch, seed)
        for e, ref in zip(params.entries, expected.entries):
            if e.name != ref.name or e.tensor.shape != ref.tensor.shape:
                raise DataError(f'{manifest_path}: entry {e.name} {e.tensor.shape} does not fit the architecture')
        if len(params.entries) != len(expected.entries):
            raise DataError(f'{manifest_path}: expected {len(expected.entries)} entries, found {len(params.entries)}')

        if arch_id is None or arch_id == stored:
            return params
        if arch_id == 'model2' and stored == 'model1':
            return Predictor.build_model2(arch, seed, init=params)
        raise ConfigError(f'cannot load {stored} parameters as {arch_id}')
