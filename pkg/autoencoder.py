"""
Autoencoder convolucional de una capa para eliminar la perturbación

Arquitectura:
    conv3x3(3->32) + ReLU -> maxpool 2x2 -> conv3x3(32->32) + ReLU -> upsample 2x2 -> conv3x3(32->3) + sigmoid
Entrenamiento (valores por defecto): entrada 400x400, lr 0.0004, batch 8, 100 épocas, Adam, MSE
"""
import csv
import math
import os
import struct
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import CheckpointError, ConfigError, NonFiniteError, PreconditionError, TrainingError
from log_utils import StageLogger
from tensor_nn import (DEFAULT_DTYPE, AdamState, ConvParams, adam_step, conv2d_grad, conv2d_same,
                       init_adam_state, maxpool2, maxpool2_grad, mse_loss, relu, relu_grad, sigmoid,
                       sigmoid_grad, upsample2_grad, upsample2_nearest)

logger = StageLogger('TRAIN')

LAYERS = ('enc_conv', 'dec_conv', 'out_conv')
LAYER_CHANNELS = {'enc_conv': (3, 32), 'dec_conv': (32, 32), 'out_conv': (32, 3)}

CHECKPOINT_MAGIC = b'ADNZ'
CHECKPOINT_VERSION = 1

TRAINING_MODES = ('clean', 'denoising')


@dataclass
class AutoencoderModel:
    enc_conv: ConvParams
    dec_conv: ConvParams
    out_conv: ConvParams
    adam: Dict[str, AdamState] = field(default_factory=dict)
    epoch: int = 0

    def layer(self, name: str) -> ConvParams:
        return getattr(self, name)

    def named_parameters(self) -> List[Tuple[str, np.ndarray]]:
        """('enc_conv.weight', array), ('enc_conv.bias', array), ..."""
        named = []
        for name in LAYERS:
            params = self.layer(name)
            named.append((f"{name}.weight", params.weights))
            named.append((f"{name}.bias", params.bias))
        return named

    def set_parameter(self, name: str, value: np.ndarray):
        layer_name, kind = name.split('.')
        params = self.layer(layer_name)
        if kind == 'weight':
            setattr(self, layer_name, ConvParams(weights=value, bias=params.bias))
        else:
            setattr(self, layer_name, ConvParams(weights=params.weights, bias=value))

    @property
    def dtype(self):
        return self.enc_conv.weights.dtype

    def astype(self, dtype) -> "AutoencoderModel":
        """Copia del modelo en otra precisión (float64 para gradcheck)"""
        def cast(params):
            return ConvParams(weights=params.weights.astype(dtype), bias=params.bias.astype(dtype))
        adam = {k: AdamState(m=s.m.astype(dtype), v=s.v.astype(dtype), t=s.t) for k, s in self.adam.items()}
        return AutoencoderModel(enc_conv=cast(self.enc_conv), dec_conv=cast(self.dec_conv),
                                out_conv=cast(self.out_conv), adam=adam, epoch=self.epoch)


@dataclass
class TrainConfig:
    input_size: Tuple[int, int] = (400, 400)
    learning_rate: float = 0.0004
    batch_size: int = 8
    epochs: int = 100
    seed: int = 0
    training_mode: str = 'clean'
    loss_reduction: str = 'mean'

    def validate(self) -> "TrainConfig":
        if len(self.input_size) != 2 or min(self.input_size) < 1:
            raise ConfigError(f"input_size inválido: {self.input_size}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate no puede ser negativo: {self.learning_rate}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError(f"batch_size/epochs inválidos: {self.batch_size}/{self.epochs}")
        if self.training_mode not in TRAINING_MODES:
            raise ConfigError(f"training_mode debe ser uno de {TRAINING_MODES}")
        if self.loss_reduction not in ('mean', 'batch'):
            raise ConfigError("loss_reduction debe ser 'mean' o 'batch'")
        return self


@dataclass
class TrainHistory:
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    seconds: List[float] = field(default_factory=list)
    epochs: List[int] = field(default_factory=list)

    def append(self, epoch: int, train_loss: float, val_loss: float, seconds: float):
        self.epochs.append(epoch)
        self.train_loss.append(train_loss)
        self.val_loss.append(val_loss)
        self.seconds.append(seconds)

    def rows(self):
        return list(zip(self.epochs, self.train_loss, self.val_loss, self.seconds))

    def write_csv(self, path: str):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f)
            writer.writerow(['epoch', 'train_loss', 'val_loss', 'seconds'])
            for epoch, train_loss, val_loss, seconds in self.rows():
                writer.writerow([epoch, repr(train_loss), '' if math.isnan(val_loss) else repr(val_loss),
                                 f"{seconds:.3f}"])

    @classmethod
    def read_csv(cls, path: str, up_to_epoch: Optional[int] = None) -> "TrainHistory":
        """Relee un train_log.csv; con up_to_epoch descarta las filas posteriores a esa época"""
        history = cls()
        try:
            with open(path, 'r', newline='', encoding='utf-8') as f:
                for row in csv.DictReader(f):
                    epoch = int(row['epoch'])
                    if up_to_epoch is not None and epoch > up_to_epoch:
                        continue
                    val_loss = float(row['val_loss']) if row['val_loss'] else float('nan')
                    history.append(epoch, float(row['train_loss']), val_loss, float(row['seconds']))
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"Log de entrenamiento ilegible {path}: {e}") from e
        return history

    def best_val_loss(self) -> float:
        finite = [v for v in self.val_loss if not math.isnan(v)]
        return min(finite) if finite else float('inf')


# ==================== CONSTRUCCIÓN ====================

def _glorot_uniform(rng, c_out, c_in, dtype):
    fan_in = c_in * 9
    fan_out = c_out * 9
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(c_out, c_in, 3, 3)).astype(dtype)


def build_model(seed: int = 0, dtype=DEFAULT_DTYPE) -> AutoencoderModel:
    """Pesos Glorot uniforme desde la semilla, bias a cero"""
    rng = np.random.default_rng(seed)
    layers = {}
    for name in LAYERS:
        c_in, c_out = LAYER_CHANNELS[name]
        layers[name] = ConvParams(weights=_glorot_uniform(rng, c_out, c_in, dtype),
                                  bias=np.zeros(c_out, dtype=dtype))
    model = AutoencoderModel(**layers)
    model.adam = {name: init_adam_state(value) for name, value in model.named_parameters()}
    return model


def parameter_count(model: AutoencoderModel) -> int:
    return sum(value.size for _, value in model.named_parameters())


# ==================== FORWARD / BACKWARD ====================

def _check_batch(batch: np.ndarray):
    if batch.ndim != 4 or batch.shape[1] != 3:
        raise PreconditionError(f"Se esperaba un batch (N, 3, H, W), recibido {batch.shape}")
    if batch.shape[2] % 2 or batch.shape[3] % 2:
        raise PreconditionError(
            f"forward requiere H y W pares, recibido {batch.shape[2]}x{batch.shape[3]}; "
            f"usar denoise_image, que rellena y recorta"
        )


def forward_with_cache(model: AutoencoderModel, batch: np.ndarray) -> Tuple[np.ndarray, dict]:
    """Forward que guarda las activaciones intermedias para el backward"""
    _check_batch(batch)
    x = batch.astype(model.dtype, copy=False)
    h1, mask1 = relu(conv2d_same(x, model.enc_conv))
    p1, argmax = maxpool2(h1)
    h2, mask2 = relu(conv2d_same(p1, model.dec_conv))
    u1 = upsample2_nearest(h2)
    out = sigmoid(conv2d_same(u1, model.out_conv))
    cache = {'x': x, 'mask1': mask1, 'p1': p1, 'argmax': argmax, 'mask2': mask2, 'u1': u1, 'out': out}
    return out, cache


def forward(model: AutoencoderModel, batch: np.ndarray) -> np.ndarray:
    """Reconstrucción del batch (N, 3, H, W) con H, W pares; salida en (0, 1)"""
    return forward_with_cache(model, batch)[0]


def loss_and_grads(model: AutoencoderModel, inputs: np.ndarray, targets: np.ndarray,
                   reduction: str = 'mean') -> Tuple[float, Dict[str, np.ndarray]]:
    """Pérdida MSE(forward(inputs), targets) y gradientes de todos los parámetros"""
    out, cache = forward_with_cache(model, inputs)
    loss, d_out = mse_loss(out, targets.astype(out.dtype, copy=False), reduction=reduction)

    d_z3 = sigmoid_grad(d_out, cache['out'])
    d_u1, g_out = conv2d_grad(cache['u1'], model.out_conv, d_z3)
    d_h2 = upsample2_grad(d_u1)
    d_z2 = relu_grad(d_h2, cache['mask2'])
    d_p1, g_dec = conv2d_grad(cache['p1'], model.dec_conv, d_z2)
    d_h1 = maxpool2_grad(d_p1, cache['argmax'])
    d_z1 = relu_grad(d_h1, cache['mask1'])
    _, g_enc = conv2d_grad(cache['x'], model.enc_conv, d_z1)

    grads = {}
    for name, g in (('enc_conv', g_enc), ('dec_conv', g_dec), ('out_conv', g_out)):
        grads[f"{name}.weight"] = g.weights
        grads[f"{name}.bias"] = g.bias
    return loss, grads


def apply_gradients(model: AutoencoderModel, grads: Dict[str, np.ndarray], lr: float):
    """Un paso de Adam sobre todos los tensores del modelo (modifica el modelo)"""
    for name, value in model.named_parameters():
        state = model.adam.get(name) or init_adam_state(value)
        new_value, new_state = adam_step(value, grads[name], state, lr, name=name)
        model.set_parameter(name, new_value)
        model.adam[name] = new_state


# ==================== ENTRENAMIENTO ====================

def images_to_batch(images: Sequence[np.ndarray], dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Lista de imágenes (H, W, 3) -> tensor (N, 3, H, W)"""
    return np.ascontiguousarray(np.stack([np.asarray(img) for img in images]).transpose(0, 3, 1, 2)).astype(dtype)


def _stack_checked(images: Sequence[np.ndarray], config: TrainConfig, what: str) -> np.ndarray:
    width, height = config.input_size
    for index, image in enumerate(images):
        if image.shape != (height, width, 3):
            raise ConfigError(
                f"{what}: la imagen #{index} mide {image.shape}, se esperaba ({height}, {width}, 3); "
                f"redimensionar a input_size antes de entrenar"
            )
    return images_to_batch(images)


def evaluate_loss(model: AutoencoderModel, inputs: np.ndarray, targets: np.ndarray,
                  batch_size: int = 8) -> float:
    """MSE medio por elemento de forward(inputs) frente a targets, por lotes"""
    if len(inputs) == 0:
        return float('nan')
    total = 0.0
    for start in range(0, len(inputs), batch_size):
        out = forward(model, inputs[start:start + batch_size])
        diff = out.astype(np.float64) - targets[start:start + batch_size].astype(np.float64)
        total += float(np.sum(diff * diff))
    return total / inputs.size


def train(model: AutoencoderModel, train_images: Sequence[np.ndarray],
          val_pairs: Sequence[Tuple[np.ndarray, np.ndarray]], config: TrainConfig,
          train_inputs: Optional[Sequence[np.ndarray]] = None,
          on_epoch_end: Optional[Callable[[int, AutoencoderModel, TrainHistory], None]] = None,
          history: Optional[TrainHistory] = None
          ) -> Tuple[AutoencoderModel, TrainHistory]:
    """
    Entrena desde model.epoch hasta config.epochs
    Modo 'clean': entrada = objetivo = imagen limpia. Modo 'denoising': entrada = `train_inputs`
    (atacadas), objetivo = limpia. La pérdida de validación es MSE(forward(adversaria), limpia).
    El barajado de cada época usa la semilla (seed, época), así que reanudar equivale a no parar.
    Con `history` las épocas nuevas se añaden al historial de la ejecución anterior.
    """
    config.validate()
    if len(train_images) == 0:
        raise ConfigError("El conjunto de entrenamiento está vacío")

    targets = _stack_checked(train_images, config, 'train')
    if config.training_mode == 'denoising':
        if train_inputs is None or len(train_inputs) != len(train_images):
            raise ConfigError("El modo 'denoising' necesita train_inputs alineadas con train_images")
        inputs = _stack_checked(train_inputs, config, 'train_inputs')
    else:
        inputs = targets

    if val_pairs:
        val_inputs = _stack_checked([adv for adv, _ in val_pairs], config, 'val (adversarial)')
        val_targets = _stack_checked([clean for _, clean in val_pairs], config, 'val (clean)')
    else:
        val_inputs = val_targets = np.zeros((0, 3) + tuple(config.input_size[::-1]), dtype=DEFAULT_DTYPE)

    history = history if history is not None else TrainHistory()
    n = len(targets)
    logger.info(f"Entrenando {n} imágenes, batch {config.batch_size}, lr {config.learning_rate}, "
                f"épocas {model.epoch + 1}..{config.epochs} (modo {config.training_mode})")

    while model.epoch < config.epochs:
        epoch_index = model.epoch
        started = time.perf_counter()
        order = np.random.default_rng([config.seed, epoch_index]).permutation(n)

        weighted_loss = 0.0
        for batch_index, start in enumerate(range(0, n, config.batch_size)):
            # El último lote parcial también se entrena
            idx = order[start:start + config.batch_size]
            loss, grads = loss_and_grads(model, inputs[idx], targets[idx], reduction=config.loss_reduction)
            if not math.isfinite(loss):
                raise TrainingError(f"Pérdida no finita en época {epoch_index + 1}, lote {batch_index + 1}",
                                    epoch=epoch_index + 1, batch=batch_index + 1)
            try:
                apply_gradients(model, grads, config.learning_rate)
            except NonFiniteError as e:
                raise TrainingError(f"{e} (época {epoch_index + 1}, lote {batch_index + 1})",
                                    epoch=epoch_index + 1, batch=batch_index + 1) from e
            weighted_loss += loss * len(idx)

        model.epoch = epoch_index + 1
        train_loss = weighted_loss / n
        val_loss = evaluate_loss(model, val_inputs, val_targets, config.batch_size)
        seconds = time.perf_counter() - started
        history.append(model.epoch, train_loss, val_loss, seconds)
        logger.info(f"Época {model.epoch}/{config.epochs}: train {train_loss:.6f}, val {val_loss:.6f} ({seconds:.1f}s)")

        if on_epoch_end is not None:
            on_epoch_end(model.epoch, model, history)

    logger.success(f"Entrenamiento terminado en la época {model.epoch}")
    return model, history


# ==================== INFERENCIA ====================

def denoise_image(model: AutoencoderModel, image: np.ndarray) -> np.ndarray:
    """
    Limpia una imagen (H, W, 3) de cualquier tamaño: rellena por replicación de borde
    hasta dimensiones pares, aplica la red a tamaño nativo y recorta
    """
    height, width = image.shape[:2]
    pad_h = height % 2
    pad_w = width % 2
    padded = np.pad(image, ((0, pad_h), (0, pad_w), (0, 0)), mode='edge') if (pad_h or pad_w) else image
    out = forward(model, images_to_batch([padded], dtype=model.dtype))
    result = out[0].transpose(1, 2, 0)[:height, :width]
    return np.clip(result.astype(np.float64), 0.0, 1.0)


# ==================== CHECKPOINTS ====================
# Formato: "ADNZ" | u16 versión | u32 época | u32 paso de Adam | u32 nº tensores |
#          por tensor: u16 len(nombre) | nombre utf-8 | u8 ndim | ndim × u32 | float32 LE
# Todos los tensores comparten el paso t de Adam

def _tensor_records(model: AutoencoderModel):
    for name, value in model.named_parameters():
        yield name, value
    for name, _ in model.named_parameters():
        state = model.adam.get(name)
        if state is None:
            continue
        yield f"adam.m.{name}", state.m
        yield f"adam.v.{name}", state.v


def _adam_step_count(model: AutoencoderModel) -> int:
    steps = {state.t for state in model.adam.values()}
    if len(steps) > 1:
        raise CheckpointError(f"Estados de Adam con pasos distintos: {sorted(steps)}")
    return steps.pop() if steps else 0


def save_checkpoint(model: AutoencoderModel, path: str):
    """Guarda parámetros, estado de Adam y contador de épocas"""
    records = list(_tensor_records(model))
    chunks = [CHECKPOINT_MAGIC,
              struct.pack('<HIII', CHECKPOINT_VERSION, model.epoch, _adam_step_count(model), len(records))]
    for name, value in records:
        encoded = name.encode('utf-8')
        chunks.append(struct.pack('<H', len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack('<B', value.ndim))
        chunks.append(struct.pack(f'<{value.ndim}I', *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype='<f4').tobytes())

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, 'wb') as f:
        f.write(b''.join(chunks))
    os.replace(tmp_path, path)


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise CheckpointError(f"Checkpoint truncado en el byte {self.offset}: {self.path}")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str) -> AutoencoderModel:
    """Carga un checkpoint; lanza CheckpointError si está corrupto o es de otra versión"""
    with open(path, 'rb') as f:
        reader = _Reader(f.read(), path)

    if reader.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"Magic inválido, no es un checkpoint ADNZ: {path}")
    (version,) = reader.unpack('<H')
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"Versión de checkpoint {version} no soportada (esperada {CHECKPOINT_VERSION})")
    epoch, adam_t, count = reader.unpack('<III')

    tensors = {}
    for _ in range(count):
        (name_len,) = reader.unpack('<H')
        try:
            name = reader.take(name_len).decode('utf-8')
        except UnicodeDecodeError as e:
            raise CheckpointError(f"Nombre de tensor corrupto en {path}") from e
        (ndim,) = reader.unpack('<B')
        shape = reader.unpack(f'<{ndim}I')
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(reader.take(size * 4), dtype='<f4').reshape(shape).astype(np.float32)
    if reader.offset != len(reader.data):
        raise CheckpointError(f"Bytes sobrantes al final del checkpoint: {path}")

    layers = {}
    for layer in LAYERS:
        c_in, c_out = LAYER_CHANNELS[layer]
        try:
            weights = tensors[f"{layer}.weight"]
            bias = tensors[f"{layer}.bias"]
        except KeyError as e:
            raise CheckpointError(f"Falta el tensor {e} en {path}") from e
        if weights.shape != (c_out, c_in, 3, 3) or bias.shape != (c_out,):
            raise CheckpointError(f"Forma inesperada para {layer}: {weights.shape} / {bias.shape}")
        layers[layer] = ConvParams(weights=weights, bias=bias)

    model = AutoencoderModel(**layers, epoch=int(epoch))
    for name, value in model.named_parameters():
        m_key, v_key = f"adam.m.{name}", f"adam.v.{name}"
        if m_key not in tensors and v_key not in tensors:
            model.adam[name] = init_adam_state(value)
            continue
        if m_key not in tensors or v_key not in tensors:
            missing = m_key if m_key not in tensors else v_key
            raise CheckpointError(f"Estado de Adam incompleto, falta {missing} en {path}")
        if tensors[m_key].shape != value.shape or tensors[v_key].shape != value.shape:
            raise CheckpointError(f"Forma inesperada del estado de Adam de {name} en {path}")
        model.adam[name] = AdamState(m=tensors[m_key], v=tensors[v_key], t=int(adam_t))
    return model
