"""
Núcleo mínimo de tensores y capas (forward + gradientes analíticos + Adam)
Suficiente para entrenar el autoencoder sin ningún framework de ML externo.

Convenciones:
- Tensores 4D en orden NCHW (np.ndarray)
- Convolución 3x3 "same" con padding de ceros, convención de correlación cruzada
- Los arrays conservan el dtype de la entrada: float32 para entrenar, float64 para gradcheck
"""
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import NonFiniteError, ParameterError, PreconditionError, ShapeError

DEFAULT_DTYPE = np.float32
GRADCHECK_DTYPE = np.float64

KERNEL_SIZE = 3

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8


@dataclass
class ConvParams:
    """Pesos (C_out, C_in, 3, 3) y bias (C_out,) de una convolución"""
    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weights.ndim != 4 or self.weights.shape[2:] != (KERNEL_SIZE, KERNEL_SIZE):
            raise ShapeError(f"Kernel debe ser (C_out, C_in, 3, 3), recibido {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(f"Bias {self.bias.shape} no coincide con C_out={self.weights.shape[0]}")

    @property
    def c_out(self) -> int:
        return self.weights.shape[0]

    @property
    def c_in(self) -> int:
        return self.weights.shape[1]

    def size(self) -> int:
        return self.weights.size + self.bias.size


@dataclass
class AdamState:
    """Momentos de Adam para un tensor de parámetros"""
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def init_adam_state(param: np.ndarray) -> AdamState:
    return AdamState(m=np.zeros_like(param), v=np.zeros_like(param), t=0)


def _check_4d(x: np.ndarray, name: str):
    if x.ndim != 4:
        raise ShapeError(f"{name} debe ser 4D (N, C, H, W), recibido {x.shape}")


# ==================== CONVOLUCIÓN ====================

def _im2col_same(x: np.ndarray) -> np.ndarray:
    """
    Extrae las ventanas 3x3 (padding de ceros) como matriz de columnas
    Devuelve (N*H*W, C*9) en orden batch -> fila -> columna
    """
    n, c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode='constant')
    windows = sliding_window_view(padded, (KERNEL_SIZE, KERNEL_SIZE), axis=(2, 3))  # (N, C, H, W, 3, 3)
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * KERNEL_SIZE * KERNEL_SIZE)


def _correlate_same(x: np.ndarray, weights: np.ndarray) -> np.ndarray:
    n, _, h, w = x.shape
    c_out = weights.shape[0]
    cols = _im2col_same(x)
    out = cols @ weights.reshape(c_out, -1).T  # (N*H*W, C_out)
    return np.ascontiguousarray(out.reshape(n, h, w, c_out).transpose(0, 3, 1, 2))


def conv2d_same(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Convolución 3x3 'same' (correlación cruzada) + bias"""
    _check_4d(x, "input")
    if x.shape[1] != params.c_in:
        raise ShapeError(
            f"Canales incompatibles: input {x.shape} vs pesos {params.weights.shape}"
        )
    out = _correlate_same(x, params.weights.astype(x.dtype, copy=False))
    out += params.bias.astype(x.dtype, copy=False).reshape(1, -1, 1, 1)
    return out


def conv2d_grad(x: np.ndarray, params: ConvParams, upstream: np.ndarray) -> Tuple[np.ndarray, ConvParams]:
    """
    Gradientes de sum(upstream * conv2d_same(x)) respecto a input, pesos y bias
    Devuelve (dInput, ConvParams con dW y db)
    """
    _check_4d(x, "input")
    _check_4d(upstream, "upstream")
    expected = (x.shape[0], params.c_out, x.shape[2], x.shape[3])
    if x.shape[1] != params.c_in or upstream.shape != expected:
        raise ShapeError(
            f"Forma de upstream {upstream.shape} no coincide con la salida esperada {expected} "
            f"(input {x.shape}, pesos {params.weights.shape})"
        )

    c_out = params.c_out
    up_cols = upstream.transpose(0, 2, 3, 1).reshape(-1, c_out)  # (N*H*W, C_out)
    cols = _im2col_same(x)

    d_weights = (up_cols.T @ cols).reshape(params.weights.shape)
    d_bias = upstream.sum(axis=(0, 2, 3))

    # dX es la correlación de upstream con el kernel rotado 180° y canales traspuestos
    flipped = params.weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).astype(x.dtype, copy=False)
    d_input = _correlate_same(upstream, flipped)

    return d_input, ConvParams(weights=d_weights.astype(x.dtype, copy=False),
                               bias=d_bias.astype(x.dtype, copy=False))


# ==================== ACTIVACIONES ====================

def relu(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """max(0, x); devuelve también la máscara que deja pasar el gradiente"""
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype, copy=False), mask


def relu_grad(upstream: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.where(mask, upstream, 0).astype(upstream.dtype, copy=False)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Sigmoide en forma numéricamente estable (sin overflow para |x| grande)"""
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype, copy=False)


def sigmoid_grad(upstream: np.ndarray, output: np.ndarray) -> np.ndarray:
    return upstream * output * (1 - output)


# ==================== POOLING / UPSAMPLING ====================

def maxpool2(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    MaxPooling 2x2 con stride 2
    argmax guarda el índice 0..3 dentro de cada bloque (orden fila-mayor);
    en empates gana el primero
    """
    _check_4d(x, "input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise PreconditionError(
            f"maxpool2 requiere H y W pares, recibido {h}x{w}; rellenar antes (ver denoise_image)"
        )
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    argmax = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, argmax[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), argmax


def maxpool2_grad(upstream: np.ndarray, argmax: np.ndarray) -> np.ndarray:
    """El gradiente va entero al ganador de cada bloque"""
    n, c, h2, w2 = upstream.shape
    if argmax.shape != upstream.shape:
        raise ShapeError(f"argmax {argmax.shape} no coincide con upstream {upstream.shape}")
    blocks = np.zeros((n, c, h2, w2, 4), dtype=upstream.dtype)
    np.put_along_axis(blocks, argmax[..., None], upstream[..., None], axis=-1)
    grad = blocks.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2 * 2, w2 * 2)
    return np.ascontiguousarray(grad)


def upsample2_nearest(x: np.ndarray) -> np.ndarray:
    """Cada píxel se replica en un bloque 2x2"""
    _check_4d(x, "input")
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample2_grad(upstream: np.ndarray) -> np.ndarray:
    n, c, h, w = upstream.shape
    return upstream.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


# ==================== PÉRDIDA ====================

def mse_loss(pred: np.ndarray, target: np.ndarray, reduction: str = "mean") -> Tuple[float, np.ndarray]:
    """
    MSE y su gradiente respecto a pred
    reduction="mean": media sobre TODOS los elementos (por defecto)
    reduction="batch": suma dividida solo por el tamaño de batch N
    """
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} y target {target.shape} deben coincidir")
    if reduction == "mean":
        denom = pred.size
    elif reduction == "batch":
        denom = pred.shape[0]
    else:
        raise ParameterError(f"reduction desconocida: {reduction}")

    diff = pred - target
    loss = float(np.sum(diff * diff, dtype=np.float64) / denom)
    grad = (2.0 / denom) * diff
    return loss, grad.astype(pred.dtype, copy=False)


# ==================== OPTIMIZADOR ====================

def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
              beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
              epsilon: float = ADAM_EPSILON, name: str = "param") -> Tuple[np.ndarray, AdamState]:
    """
    Un paso de Adam con corrección de sesgo
    No modifica los argumentos: devuelve (param nuevo, estado nuevo)
    """
    if not (param.shape == grad.shape == state.m.shape == state.v.shape):
        raise ShapeError(
            f"Adam '{name}': formas incompatibles param {param.shape}, grad {grad.shape}, "
            f"m {state.m.shape}, v {state.v.shape}"
        )
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError(f"Gradiente no finito en el tensor '{name}'")

    t = state.t + 1
    m = beta1 * state.m + (1 - beta1) * grad
    v = beta2 * state.v + (1 - beta2) * (grad * grad)

    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    m_hat = m / bc1
    v_hat = v / bc2

    new_param = param - lr * m_hat / (np.sqrt(v_hat) + epsilon)
    dtype = param.dtype
    return new_param.astype(dtype, copy=False), AdamState(m=m.astype(dtype, copy=False),
                                                          v=v.astype(dtype, copy=False), t=t)
