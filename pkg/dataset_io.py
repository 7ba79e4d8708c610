"""
Entrada/salida del dataset: códecs PNG/PPM, formatos COCO de anotaciones y detecciones,
manifiestos, split determinista y redimensionado bilineal
"""
import json
import os
from dataclasses import dataclass, field
from typing import BinaryIO, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from detection_eval import DetectionBox, GroundTruthBox
from errors import ConfigError, DecodeError, ImageWriteError, ParameterError, ParseError
from log_utils import log_info, log_warning

SUPPORTED_FORMATS = {'PNG', 'PPM'}
IMAGE_EXTENSIONS = ('.png', '.ppm')
EXTENSION_TO_FORMAT = {'.png': 'PNG', '.ppm': 'PPM'}

# Supercategoría "vehicle" de COCO
VEHICLE_CATEGORIES = {
    2: 'bicycle',
    3: 'car',
    4: 'motorcycle',
    5: 'airplane',
    6: 'bus',
    7: 'train',
    8: 'truck',
    9: 'boat',
}


# ==================== IMÁGENES ====================

def load_image(source: Union[str, BinaryIO]) -> np.ndarray:
    """
    Decodifica PNG (8 bits, RGB/RGBA/gris) o PPM binario (P6) a (H, W, 3) float64 en [0, 1]
    El alfa se descarta y el gris se replica a 3 canales
    """
    label = source if isinstance(source, str) else getattr(source, 'filename', None) or '<stream>'
    try:
        with Image.open(source) as img:
            if img.format not in SUPPORTED_FORMATS:
                raise DecodeError(f"Formato no soportado: {img.format}", path=label)
            img.load()
            if img.mode in ('I', 'I;16', 'I;16B', 'F'):
                raise DecodeError(f"Solo se aceptan imágenes de 8 bits, modo {img.mode}", path=label)
            rgb = img.convert('RGB')
    except DecodeError:
        raise
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as e:
        raise DecodeError(f"No se pudo decodificar la imagen: {e}", path=label) from e
    return np.asarray(rgb, dtype=np.float64) / 255.0


def quantize(image: np.ndarray) -> np.ndarray:
    """round(v·255) con medio hacia arriba -> uint8"""
    return np.clip(np.floor(np.asarray(image, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def encode_image(image: np.ndarray) -> Image.Image:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ParameterError(f"Se esperaba una imagen (H, W, 3), recibido {image.shape}")
    return Image.fromarray(quantize(image))


def save_image(image: np.ndarray, path: str):
    """Guarda PNG o PPM según la extensión"""
    ext = os.path.splitext(path)[1].lower()
    fmt = EXTENSION_TO_FORMAT.get(ext)
    if fmt is None:
        raise ParameterError(f"Extensión no soportada '{ext}' (usar .png o .ppm)")
    pil_image = encode_image(image)
    try:
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)
        pil_image.save(path, format=fmt)
    except OSError as e:
        raise ImageWriteError(f"No se pudo escribir la imagen {path}: {e}") from e


def resize_bilinear(image: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Interpolación bilineal con centros de píxel en +0.5 (alineación half-pixel)"""
    if out_w < 1 or out_h < 1:
        raise ParameterError(f"Dimensiones de salida inválidas: {out_w}x{out_h}")
    in_h, in_w = image.shape[:2]
    if (in_w, in_h) == (out_w, out_h):
        return np.array(image, copy=True)

    def axis_weights(in_size, out_size):
        src = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
        src = np.clip(src, 0.0, in_size - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, in_size - 1)
        return lo, hi, src - lo

    y0, y1, wy = axis_weights(in_h, out_h)
    x0, x1, wx = axis_weights(in_w, out_w)
    data = np.asarray(image, dtype=np.float64)
    wx = wx[None, :, None]
    top = data[y0][:, x0] * (1 - wx) + data[y0][:, x1] * wx
    bottom = data[y1][:, x0] * (1 - wx) + data[y1][:, x1] * wx
    wy = wy[:, None, None]
    return top * (1 - wy) + bottom * wy


def list_images(root: str) -> List[str]:
    """Rutas relativas (ordenadas) de las imágenes PNG/PPM bajo `root`"""
    found = []
    for current, _, files in os.walk(root):
        for filename in files:
            if filename.lower().endswith(IMAGE_EXTENSIONS):
                found.append(os.path.relpath(os.path.join(current, filename), root))
    return sorted(found)


# ==================== MANIFIESTOS ====================

@dataclass(frozen=True)
class ManifestEntry:
    image_id: int
    path: str
    width: int
    height: int

    def to_dict(self) -> dict:
        return {'id': self.image_id, 'path': self.path, 'width': self.width, 'height': self.height}


@dataclass
class DatasetManifest:
    entries: List[ManifestEntry] = field(default_factory=list)
    split: str = 'all'

    def __post_init__(self):
        seen = set()
        for entry in self.entries:
            if entry.image_id in seen:
                raise ConfigError(f"image_id duplicado en el manifiesto: {entry.image_id}")
            seen.add(entry.image_id)

    def __len__(self):
        return len(self.entries)

    def ids(self) -> List[int]:
        return [e.image_id for e in self.entries]

    def check_files(self, base_dir: str = ''):
        missing = [e.path for e in self.entries if not os.path.exists(os.path.join(base_dir, e.path))]
        if missing:
            raise ConfigError(f"{len(missing)} ficheros del manifiesto no existen (ej. {missing[0]})")


def build_manifest(image_dir: str, split: str = 'all') -> DatasetManifest:
    """Manifiesto de todas las imágenes de un directorio (ids por orden de ruta)"""
    entries = []
    for image_id, relpath in enumerate(list_images(image_dir), start=1):
        with Image.open(os.path.join(image_dir, relpath)) as img:
            width, height = img.size
        entries.append(ManifestEntry(image_id=image_id, path=relpath, width=width, height=height))
    return DatasetManifest(entries=entries, split=split)


def save_manifest(manifest: DatasetManifest, path: str):
    """JSON lines {id, path, width, height}"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        for entry in manifest.entries:
            f.write(json.dumps(entry.to_dict(), ensure_ascii=False) + '\n')


def load_manifest(path: str, split: str = 'all', base_dir: Optional[str] = None) -> DatasetManifest:
    entries = []
    with open(path, 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"JSON inválido en la línea {line_no}: {e.msg}", index=line_no - 1) from e
            index = line_no - 1
            entries.append(ManifestEntry(image_id=_parse_int(record, 'id', index), path=_require(record, 'path', index),
                                         width=_parse_int(record, 'width', index),
                                         height=_parse_int(record, 'height', index)))
    manifest = DatasetManifest(entries=entries, split=split)
    if base_dir is not None:
        manifest.check_files(base_dir)
    return manifest


def split_dataset(manifest: DatasetManifest, fraction: float = 0.8,
                  seed: int = 0) -> Tuple[DatasetManifest, DatasetManifest]:
    """Barajado con semilla y corte por prefijo: |train| = round(fraction · total)"""
    if not 0 < fraction < 1:
        raise ConfigError(f"fraction debe estar en (0, 1), recibido {fraction}")
    if len(manifest) == 0:
        raise ConfigError("No se puede dividir un manifiesto vacío")
    order = np.random.default_rng(seed).permutation(len(manifest))
    n_train = int(np.floor(fraction * len(manifest) + 0.5))
    train = [manifest.entries[i] for i in order[:n_train]]
    val = [manifest.entries[i] for i in order[n_train:]]
    return DatasetManifest(entries=train, split='train'), DatasetManifest(entries=val, split='val')


# ==================== ANOTACIONES Y DETECCIONES ====================

@dataclass
class AnnotationSet:
    boxes_by_image: Dict[int, List[GroundTruthBox]] = field(default_factory=dict)
    categories: Dict[int, str] = field(default_factory=dict)
    images: Dict[int, dict] = field(default_factory=dict)
    skipped_crowd: int = 0

    def all_boxes(self) -> List[GroundTruthBox]:
        return [box for image_id in sorted(self.boxes_by_image) for box in self.boxes_by_image[image_id]]

    def file_name_to_id(self) -> Dict[str, int]:
        return {info['file_name']: image_id for image_id, info in self.images.items() if 'file_name' in info}


def _read_json(path: str):
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ParseError(f"JSON inválido en {path} (línea {e.lineno}, columna {e.colno}): {e.msg}") from e


def _require(record, key, index):
    if not isinstance(record, dict) or key not in record:
        raise ParseError("Falta un campo obligatorio", field=key, index=index)
    return record[key]


def _parse_int(record, key, index):
    value = _require(record, key, index)
    if isinstance(value, bool):
        raise ParseError("Se esperaba un entero", field=key, index=index)
    try:
        return int(value)
    except (TypeError, ValueError) as e:
        raise ParseError(f"Se esperaba un entero, llegó {value!r}", field=key, index=index) from e


def _parse_bbox(value, index):
    if not isinstance(value, (list, tuple)) or len(value) != 4:
        raise ParseError("bbox debe ser [x, y, w, h]", field='bbox', index=index)
    try:
        return tuple(float(v) for v in value)
    except (TypeError, ValueError) as e:
        raise ParseError("bbox con valores no numéricos", field='bbox', index=index) from e


def _clamp_bbox(bbox, width, height):
    x0 = min(max(bbox[0], 0.0), width)
    y0 = min(max(bbox[1], 0.0), height)
    x1 = min(max(bbox[0] + bbox[2], 0.0), width)
    y1 = min(max(bbox[1] + bbox[3], 0.0), height)
    return (x0, y0, x1 - x0, y1 - y0)


def parse_annotations(data: dict, source: str = '<memoria>') -> AnnotationSet:
    """Objeto COCO {images, annotations, categories}; los campos desconocidos se ignoran"""
    if not isinstance(data, dict):
        raise ParseError(f"Se esperaba un objeto COCO en {source}")
    result = AnnotationSet()

    for index, image in enumerate(_require(data, 'images', None)):
        image_id = _parse_int(image, 'id', index)
        result.images[image_id] = dict(image)
        result.boxes_by_image.setdefault(image_id, [])

    for index, category in enumerate(data.get('categories', [])):
        result.categories[_parse_int(category, 'id', index)] = str(category.get('name', ''))

    degenerate = 0
    for index, annotation in enumerate(_require(data, 'annotations', None)):
        image_id = _parse_int(annotation, 'image_id', index)
        category_id = _parse_int(annotation, 'category_id', index)
        bbox = _parse_bbox(_require(annotation, 'bbox', index), index)
        if image_id not in result.images:
            raise ParseError(f"image_id {image_id} no aparece en 'images'", field='image_id', index=index)
        if annotation.get('iscrowd', 0):
            result.skipped_crowd += 1
            continue
        info = result.images[image_id]
        if 'width' in info and 'height' in info:
            bbox = _clamp_bbox(bbox, float(info['width']), float(info['height']))
        if bbox[2] <= 0 or bbox[3] <= 0:
            degenerate += 1
            continue
        result.boxes_by_image[image_id].append(GroundTruthBox(image_id=image_id, category_id=category_id, bbox=bbox))

    if result.skipped_crowd:
        log_warning(f"{result.skipped_crowd} anotaciones iscrowd=1 ignoradas en {source}")
    if degenerate:
        log_warning(f"{degenerate} anotaciones con caja vacía tras recortar ignoradas en {source}")
    return result


def load_annotations(path: str) -> AnnotationSet:
    return parse_annotations(_read_json(path), source=path)


def parse_detections(data, source: str = '<memoria>') -> List[DetectionBox]:
    """Array de resultados COCO [{image_id, category_id, bbox, score}]"""
    if not isinstance(data, list):
        raise ParseError(f"Se esperaba un array de detecciones en {source}")
    detections = []
    for index, record in enumerate(data):
        image_id = _parse_int(record, 'image_id', index)
        category_id = _parse_int(record, 'category_id', index)
        bbox = _parse_bbox(_require(record, 'bbox', index), index)
        try:
            score = float(_require(record, 'score', index))
        except (TypeError, ValueError) as e:
            raise ParseError("score no numérico", field='score', index=index) from e
        if not 0.0 <= score <= 1.0:
            raise ParseError(f"score fuera de [0, 1]: {score}", field='score', index=index)
        if bbox[2] <= 0 or bbox[3] <= 0:
            raise ParseError(f"bbox con ancho/alto no positivo: {bbox}", field='bbox', index=index)
        detections.append(DetectionBox(image_id=image_id, category_id=category_id, bbox=bbox, score=score))
    return detections


def load_detections(path: str) -> List[DetectionBox]:
    return parse_detections(_read_json(path), source=path)


def annotations_to_coco(images: Iterable[dict], gts: Iterable[GroundTruthBox],
                        categories: Dict[int, str]) -> dict:
    annotations = []
    for ann_id, gt in enumerate(gts, start=1):
        annotations.append({
            'id': ann_id,
            'image_id': gt.image_id,
            'category_id': gt.category_id,
            'bbox': [float(v) for v in gt.bbox],
            'area': float(gt.bbox[2] * gt.bbox[3]),
            'iscrowd': 0,
        })
    return {
        'images': list(images),
        'annotations': annotations,
        'categories': [{'id': cid, 'name': name} for cid, name in sorted(categories.items())],
    }


def write_annotations(path: str, images: Iterable[dict], gts: Iterable[GroundTruthBox],
                      categories: Dict[int, str]):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(annotations_to_coco(images, gts, categories), f, indent=2, ensure_ascii=False)


def write_detections(path: str, detections: Sequence[DetectionBox]):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump([d.to_dict() for d in detections], f, indent=2)


def select_vehicle_images(annotations: AnnotationSet,
                          category_ids: Iterable[int] = tuple(VEHICLE_CATEGORIES)) -> List[int]:
    """Imágenes con al menos una anotación de categoría vehículo"""
    wanted = set(category_ids)
    selected = [image_id for image_id, boxes in sorted(annotations.boxes_by_image.items())
                if any(box.category_id in wanted for box in boxes)]
    log_info(f"Filtro de vehículos: {len(selected)}/{len(annotations.boxes_by_image)} imágenes")
    return selected
