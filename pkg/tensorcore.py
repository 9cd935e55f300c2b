"""Dense tensor kernels with analytic backward passes, plus the L2 loss and the Adam optimizer.

Tensors are plain numpy arrays. Spectral layers use the layout (batch, channels, length),
the spatial convolution uses (batch, channels, height, width). Kernels keep the dtype of
their inputs, so float32 data stays float32 and float64 data is computed in float64.
"""

from dataclasses import dataclass, field
import logging

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import ConfigError, NumericalError, ShapeError
import config

logger = logging.getLogger(__name__)

Tensor = np.ndarray
KINDS = ('conv1d', 'tconv1d', 'conv2d', 'relu', 'residual-add', 'concat', 'elementwise-product')
PARAMETRIC = ('conv1d', 'tconv1d', 'conv2d')


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel_size: int = 1
    stride: int = 1
    in_channels: int = 1
    out_channels: int = 1
    padding: int = 0
    has_bias: bool = True

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f'unknown layer kind {self.kind!r}, expected one of {KINDS}')
        if self.stride < 1:
            raise ConfigError(f'{self.kind}: stride must be >= 1, got {self.stride}')
        if self.kernel_size < 1:
            raise ConfigError(f'{self.kind}: kernel_size must be >= 1, got {self.kernel_size}')
        if self.padding < 0:
            raise ConfigError(f'{self.kind}: padding must be >= 0, got {self.padding}')
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError(f'{self.kind}: channel counts must be positive')

    def output_length(self, length: int) -> int:
        """Length of the output along a convolved axis for an input of the given length."""
        k, s, p = self.kernel_size, self.stride, self.padding
        if self.kind in ('conv1d', 'conv2d'):
            return (length + 2 * p - k) // s + 1
        if self.kind == 'tconv1d':
            return s * (length - 1) + k - 2 * p
        return length

    def param_shapes(self) -> tuple[tuple, tuple | None] | None:
        """Shapes of (weight, bias), or None for layers without parameters."""
        k, c_in, c_out = self.kernel_size, self.in_channels, self.out_channels
        bias = (c_out,) if self.has_bias else None
        if self.kind == 'conv1d':
            return (c_out, c_in, k), bias
        if self.kind == 'tconv1d':
            return (c_in, c_out, k), bias
        if self.kind == 'conv2d':
            return (c_out, c_in, k, k), bias
        return None

    def to_dict(self) -> dict:
        return {
            'kind': self.kind, 'kernel_size': self.kernel_size, 'stride': self.stride,
            'in_channels': self.in_channels, 'out_channels': self.out_channels,
            'padding': self.padding, 'has_bias': self.has_bias,
        }


# ========== shape checks ==========
def _check_rank(x: Tensor, rank: int, layer: LayerSpec) -> None:
    if x.ndim != rank:
        raise ShapeError(f'{layer.kind}: expected {rank} axes, got shape {x.shape}')


def _check_axis(x: Tensor, axis: int, expected: int, layer: LayerSpec, label: str) -> None:
    if x.shape[axis] != expected:
        raise ShapeError(f'{layer.kind}: axis {axis} ({label}) has extent {x.shape[axis]}, expected {expected}')


def _check_params(layer: LayerSpec, params) -> tuple[Tensor, Tensor | None]:
    expected = layer.param_shapes()
    if params is None:
        raise ShapeError(f'{layer.kind}: parameters required')
    weight, bias = params
    if weight.shape != expected[0]:
        raise ShapeError(f'{layer.kind}: weight shape {weight.shape}, expected {expected[0]}')
    if expected[1] is None and bias is not None:
        raise ShapeError(f'{layer.kind}: layer declares no bias but one was given')
    if expected[1] is not None and (bias is None or bias.shape != expected[1]):
        raise ShapeError(f'{layer.kind}: bias shape {None if bias is None else bias.shape}, expected {expected[1]}')
    return weight, bias


def _check_output_length(layer: LayerSpec, length: int, axis: int) -> int:
    out = layer.output_length(length)
    if out < 1:
        raise ShapeError(f'{layer.kind}: axis {axis} of length {length} yields empty output')
    return out


# ========== conv1d ==========
def _conv1d_forward(layer: LayerSpec, x: Tensor, params) -> tuple[Tensor, dict]:
    _check_rank(x, 3, layer)
    _check_axis(x, 1, layer.in_channels, layer, 'channels')
    weight, bias = _check_params(layer, params)
    k, s, p = layer.kernel_size, layer.stride, layer.padding
    l_out = _check_output_length(layer, x.shape[2], 2)

    padded = np.pad(x, ((0, 0), (0, 0), (p, p)))
    windows = sliding_window_view(padded, k, axis=2)[:, :, ::s][:, :, :l_out]
    y = np.einsum('bclk,ock->bol', windows, weight, optimize=True)
    if bias is not None:
        y = y + bias[None, :, None]
    return y, {'windows': windows, 'weight': weight, 'x_shape': x.shape, 'has_bias': bias is not None}


def _conv1d_backward(layer: LayerSpec, g: Tensor, cache: dict) -> tuple[Tensor, tuple]:
    k, s, p = layer.kernel_size, layer.stride, layer.padding
    weight = cache['weight']
    batch, channels, length = cache['x_shape']
    l_out = g.shape[2]

    grad_w = np.einsum('bclk,bol->ock', cache['windows'], g, optimize=True)
    grad_b = g.sum(axis=(0, 2)) if cache['has_bias'] else None
    grad_padded = np.zeros((batch, channels, length + 2 * p), dtype=g.dtype)
    for j in range(k):
        grad_padded[:, :, j: j + s * (l_out - 1) + 1: s] += np.einsum('bol,oc->bcl', g, weight[:, :, j], optimize=True)
    return grad_padded[:, :, p: p + length], (grad_w, grad_b)


# ========== tconv1d ==========
def _tconv1d_forward(layer: LayerSpec, x: Tensor, params) -> tuple[Tensor, dict]:
    _check_rank(x, 3, layer)
    _check_axis(x, 1, layer.in_channels, layer, 'channels')
    weight, bias = _check_params(layer, params)
    k, s, p = layer.kernel_size, layer.stride, layer.padding
    batch, _, length = x.shape
    l_out = _check_output_length(layer, length, 2)

    full = np.zeros((batch, layer.out_channels, s * (length - 1) + k), dtype=np.result_type(x, weight))
    for j in range(k):
        full[:, :, j: j + s * (length - 1) + 1: s] += np.einsum('bcl,co->bol', x, weight[:, :, j], optimize=True)
    y = full[:, :, p: p + l_out].copy()
    if bias is not None:
        y += bias[None, :, None]
    return y, {'x': x, 'weight': weight, 'has_bias': bias is not None}


def _tconv1d_backward(layer: LayerSpec, g: Tensor, cache: dict) -> tuple[Tensor, tuple]:
    k, s, p = layer.kernel_size, layer.stride, layer.padding
    x, weight = cache['x'], cache['weight']
    batch, _, length = x.shape

    g_full = np.zeros((batch, layer.out_channels, s * (length - 1) + k), dtype=g.dtype)
    g_full[:, :, p: p + g.shape[2]] = g
    grad_x = np.zeros(x.shape, dtype=np.result_type(g, weight))
    grad_w = np.zeros(weight.shape, dtype=np.result_type(g, x))
    for j in range(k):
        taps = g_full[:, :, j: j + s * (length - 1) + 1: s]
        grad_x += np.einsum('bol,co->bcl', taps, weight[:, :, j], optimize=True)
        grad_w[:, :, j] = np.einsum('bcl,bol->co', x, taps, optimize=True)
    grad_b = g.sum(axis=(0, 2)) if cache['has_bias'] else None
    return grad_x, (grad_w, grad_b)


# ========== conv2d ==========
def _conv2d_forward(layer: LayerSpec, x: Tensor, params) -> tuple[Tensor, dict]:
    _check_rank(x, 4, layer)
    _check_axis(x, 1, layer.in_channels, layer, 'channels')
    weight, bias = _check_params(layer, params)
    k, s, p = layer.kernel_size, layer.stride, layer.padding
    h_out = _check_output_length(layer, x.shape[2], 2)
    w_out = _check_output_length(layer, x.shape[3], 3)

    padded = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :h_out, :w_out]
    y = np.einsum('bchwij,ocij->bohw', windows, weight, optimize=True)
    if bias is not None:
        y = y + bias[None, :, None, None]
    return y, {'windows': windows, 'weight': weight, 'x_shape': x.shape, 'has_bias': bias is not None}


def _conv2d_backward(layer: LayerSpec, g: Tensor, cache: dict) -> tuple[Tensor, tuple]:
    k, s, p = layer.kernel_size, layer.stride, layer.padding
    weight = cache['weight']
    batch, channels, height, width = cache['x_shape']
    h_out, w_out = g.shape[2], g.shape[3]

    grad_w = np.einsum('bchwij,bohw->ocij', cache['windows'], g, optimize=True)
    grad_b = g.sum(axis=(0, 2, 3)) if cache['has_bias'] else None
    grad_padded = np.zeros((batch, channels, height + 2 * p, width + 2 * p), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            grad_padded[:, :, i: i + s * (h_out - 1) + 1: s, j: j + s * (w_out - 1) + 1: s] += \
                np.einsum('bohw,oc->bchw', g, weight[:, :, i, j], optimize=True)
    return grad_padded[:, :, p: p + height, p: p + width], (grad_w, grad_b)


# ========== parameter-free layers ==========
def _relu_forward(layer: LayerSpec, x: Tensor, params) -> tuple[Tensor, dict]:
    mask = x > 0
    return np.where(mask, x, np.zeros_like(x)), {'mask': mask}


def _relu_backward(layer: LayerSpec, g: Tensor, cache: dict) -> tuple[Tensor, None]:
    return np.where(cache['mask'], g, np.zeros_like(g)), None


def _pair(layer: LayerSpec, inputs) -> tuple[Tensor, Tensor]:
    if not isinstance(inputs, (tuple, list)) or len(inputs) != 2:
        raise ShapeError(f'{layer.kind}: expected a pair of tensors')
    return inputs[0], inputs[1]


def _add_forward(layer: LayerSpec, inputs, params) -> tuple[Tensor, dict]:
    a, b = _pair(layer, inputs)
    if a.shape != b.shape:
        for axis, (ea, eb) in enumerate(zip(a.shape, b.shape)):
            if ea != eb:
                raise ShapeError(f'residual-add: axis {axis} differs ({ea} vs {eb})')
        raise ShapeError(f'residual-add: rank differs ({a.ndim} vs {b.ndim})')
    return a + b, {}


def _add_backward(layer: LayerSpec, g: Tensor, cache: dict) -> tuple[tuple, None]:
    return (g, g.copy()), None


def _concat_forward(layer: LayerSpec, inputs, params) -> tuple[Tensor, dict]:
    if not isinstance(inputs, (tuple, list)) or len(inputs) < 2:
        raise ShapeError('concat: expected two or more tensors')
    first = inputs[0]
    for idx, x in enumerate(inputs[1:], start=1):
        if x.ndim != first.ndim:
            raise ShapeError(f'concat: input {idx} has {x.ndim} axes, expected {first.ndim}')
        for axis in range(x.ndim):
            if axis != 1 and x.shape[axis] != first.shape[axis]:
                raise ShapeError(f'concat: input {idx} axis {axis} has extent {x.shape[axis]}, expected {first.shape[axis]}')
    sizes = [x.shape[1] for x in inputs]
    if sum(sizes) != layer.out_channels:
        raise ShapeError(f'concat: channels sum to {sum(sizes)}, layer declares {layer.out_channels}')
    return np.concatenate(inputs, axis=1), {'sizes': sizes}


def _concat_backward(layer: LayerSpec, g: Tensor, cache: dict) -> tuple[tuple, None]:
    splits = np.cumsum(cache['sizes'])[:-1]
    return tuple(np.split(g, splits, axis=1)), None


def _unbroadcast(grad: Tensor, shape: tuple) -> Tensor:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _product_forward(layer: LayerSpec, inputs, params) -> tuple[Tensor, dict]:
    a, b = _pair(layer, inputs)
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f'elementwise-product: shapes {a.shape} and {b.shape} do not broadcast') from None
    if shape != a.shape:
        raise ShapeError(f'elementwise-product: second operand {b.shape} must broadcast onto {a.shape}')
    return a * b, {'a': a, 'b': b}


def _product_backward(layer: LayerSpec, g: Tensor, cache: dict) -> tuple[tuple, None]:
    a, b = cache['a'], cache['b']
    return (g * b, _unbroadcast(g * a, b.shape)), None


_FORWARD = {
    'conv1d': _conv1d_forward, 'tconv1d': _tconv1d_forward, 'conv2d': _conv2d_forward,
    'relu': _relu_forward, 'residual-add': _add_forward, 'concat': _concat_forward,
    'elementwise-product': _product_forward,
}
_BACKWARD = {
    'conv1d': _conv1d_backward, 'tconv1d': _tconv1d_backward, 'conv2d': _conv2d_backward,
    'relu': _relu_backward, 'residual-add': _add_backward, 'concat': _concat_backward,
    'elementwise-product': _product_backward,
}


def forward(layer: LayerSpec, inputs, params=None) -> tuple[Tensor, dict]:
    """Applies one layer.

    Parameters
    ----------
    layer: LayerSpec
        The layer to apply.
    inputs: Tensor | tuple[Tensor, ...]
        A single tensor, or a tuple for residual-add, concat and elementwise-product.
    params: tuple[Tensor, Tensor | None] | None
        (weight, bias) for convolutions.

    Returns
    -------
    output: Tensor
        The layer output.
    cache: dict
        Everything backward() needs for this call.
    """
    output, cache = _FORWARD[layer.kind](layer, inputs, params)
    cache['layer'] = layer
    cache['out_shape'] = output.shape
    return output, cache


def backward(layer: LayerSpec, grad_out: Tensor, cache: dict):
    """Returns (grad_in, grad_params) for the forward call that produced cache."""
    if cache.get('layer') != layer:
        raise ShapeError(f'{layer.kind}: cache was produced by a different layer ({cache.get("layer")})')
    if grad_out.shape != cache['out_shape']:
        raise ShapeError(f'{layer.kind}: grad_out shape {grad_out.shape} does not match output {cache["out_shape"]}')
    return _BACKWARD[layer.kind](layer, grad_out, cache)


# ========== loss ==========
def l2_loss(pred: Tensor, target: Tensor) -> tuple[float, Tensor]:
    """Mean squared error and its gradient with respect to pred."""
    if pred.shape != target.shape:
        raise ShapeError(f'l2_loss: prediction shape {pred.shape} differs from target {target.shape}')
    diff = pred - target
    loss = float(np.mean(np.square(diff, dtype=np.float64)))
    grad = (2.0 / diff.size) * diff
    return loss, grad.astype(pred.dtype, copy=False)


def resolve_psnr_mode(mode: str) -> str:
    """Canonical PSNR mode name; 'paper' is accepted as another name for 'amplitude'."""
    mode = config.PSNR_MODE_ALIASES.get(mode, mode)
    if mode not in config.PSNR_MODES:
        raise ConfigError(f'unknown PSNR mode {mode!r}, expected one of {config.PSNR_MODES + tuple(config.PSNR_MODE_ALIASES)}')
    return mode


def psnr_from_mse(mse: float, mode: str = 'amplitude', peak: float = config.VALUE_MAX) -> float:
    """PSNR for a mean squared error on the [0, peak] scale.

    mode='amplitude' evaluates 20 lg(peak / MSE), mode='standard' 10 lg(peak^2 / MSE).
    Both coincide at MSE = 1; MSE = 0 gives +inf.
    """
    mode = resolve_psnr_mode(mode)
    if mse < 0 or not np.isfinite(mse):
        raise NumericalError(f'invalid mean squared error {mse}')
    if mse == 0:
        return float('inf')
    if mode == 'amplitude':
        return float(20.0 * np.log10(peak / mse))
    return float(10.0 * np.log10(peak ** 2 / mse))


# ========== optimizer ==========
@dataclass
class AdamState:
    lr: float = config.LEARNING_RATE
    beta1: float = config.BETA1
    beta2: float = config.BETA2
    epsilon: float = config.ADAM_EPSILON
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def create(cls, params: dict[str, Tensor], **hyper) -> 'AdamState':
        state = cls(**hyper)
        state.m = {name: np.zeros_like(value) for name, value in params.items()}
        state.v = {name: np.zeros_like(value) for name, value in params.items()}
        return state


def adam_step(
        params: dict[str, Tensor],
        grads: dict[str, Tensor],
        state: AdamState,
        frozen: frozenset | set = frozenset(),
        ) -> tuple[dict[str, Tensor], AdamState]:
    """Performs one bias-corrected Adam update.

    Parameters
    ----------
    params: dict[str, Tensor]
        Named parameter tensors.
    grads: dict[str, Tensor]
        Gradients with the same names and shapes.
    state: AdamState
        Optimizer state; it is not modified.
    frozen: set[str]
        Names whose tensors and moments are left untouched.

    Returns
    -------
    params: dict[str, Tensor]
        Updated copies of the parameters.
    state: AdamState
        The new optimizer state, with step incremented by one.
    """
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ShapeError('adam_step: parameter, gradient and state names differ')
    for name, value in params.items():
        if grads[name].shape != value.shape or state.m[name].shape != value.shape:
            raise ShapeError(f'adam_step: {name} has shape {value.shape}, gradient {grads[name].shape}')
        if name not in frozen and not np.all(np.isfinite(grads[name])):
            raise NumericalError(f'adam_step: non-finite gradient for {name} at step {state.step + 1}')

    step = state.step + 1
    correction1 = 1.0 - state.beta1 ** step
    correction2 = 1.0 - state.beta2 ** step
    new_params, new_m, new_v = {}, {}, {}
    for name, value in params.items():
        if name in frozen:
            new_params[name], new_m[name], new_v[name] = value.copy(), state.m[name], state.v[name]
            continue
        g = grads[name].astype(value.dtype, copy=False)
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        update = state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)
        new_params[name] = (value - update).astype(value.dtype, copy=False)
        new_m[name], new_v[name] = m.astype(value.dtype, copy=False), v.astype(value.dtype, copy=False)

    new_state = AdamState(lr=state.lr, beta1=state.beta1, beta2=state.beta2, epsilon=state.epsilon,
                          step=step, m=new_m, v=new_v)
    return new_params, new_state
