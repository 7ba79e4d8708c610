"""
Escenas sintéticas + detector de manchas determinista (sin aprendizaje)

Sirve para reproducir a escala de escritorio el experimento de tres condiciones
(normal / adversaria / autoencoder) sin YOLOv5. El detector es un umbral de Otsu
sobre la luminancia a propósito: las bandas del ruido Perlin cruzan el umbral.
"""
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import cv2
import numpy as np

from detection_eval import DetectionBox, GroundTruthBox, iou
from errors import ParameterError, PlacementError

CATEGORIES = {1: 'box', 2: 'disk'}

# Apariencia de las escenas: fondo gris medio poco contrastado, objetos algo más claros
BACKGROUND_LEVEL = (0.36, 0.44)
BACKGROUND_TEXTURE = 0.03
OBJECT_CONTRAST = (0.20, 0.28)

MIN_SCENE_SIZE = 16
MAX_PLACEMENT_ATTEMPTS = 1000


@dataclass
class SyntheticScene:
    image: np.ndarray
    gts: List[GroundTruthBox] = field(default_factory=list)
    seed: int = 0
    image_id: int = 0


def _background(rng, width, height):
    level = rng.uniform(*BACKGROUND_LEVEL)
    noise = rng.standard_normal((height, width)).astype(np.float32)
    smooth = cv2.GaussianBlur(noise, (0, 0), sigmaX=2.0, borderType=cv2.BORDER_REFLECT)
    peak = float(np.max(np.abs(smooth)))
    if peak > 0:
        smooth = smooth / peak
    gray = level + BACKGROUND_TEXTURE * smooth.astype(np.float64)
    tint = rng.uniform(-0.01, 0.01, size=3)
    return np.clip(gray[..., None] + tint[None, None, :], 0.0, 1.0), level


def _shape_mask(category_id, x, y, w, h, width, height):
    mask = np.zeros((height, width), dtype=bool)
    if category_id == 1:
        mask[y:y + h, x:x + w] = True
        return mask
    yy, xx = np.mgrid[0:height, 0:width]
    cx = x + w / 2.0
    cy = y + h / 2.0
    inside = ((xx + 0.5 - cx) / (w / 2.0)) ** 2 + ((yy + 0.5 - cy) / (h / 2.0)) ** 2 <= 1.0
    return inside


def _mask_bbox(mask):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return (float(cols[0]), float(rows[0]), float(cols[-1] - cols[0] + 1), float(rows[-1] - rows[0] + 1))


def _gap_ok(candidate, placed, min_gap):
    x, y, w, h = candidate
    for px, py, pw, ph in placed:
        if (x < px + pw + min_gap and px < x + w + min_gap and
                y < py + ph + min_gap and py < y + h + min_gap):
            return False
    return True


def generate_scene(width: int, height: int, n_objects: int, seed: int, image_id: int = 0,
                   iou_cap: float = 0.1, min_gap: int = 2) -> SyntheticScene:
    """
    Fondo texturizado de bajo contraste + n_objects rectángulos (cat. 1) o elipses (cat. 2)
    El GT se registra exactamente (caja envolvente de los píxeles pintados)
    """
    if n_objects < 0:
        raise ParameterError(f"n_objects debe ser >= 0, recibido {n_objects}")
    if width < MIN_SCENE_SIZE or height < MIN_SCENE_SIZE:
        raise ParameterError(f"La escena debe medir al menos {MIN_SCENE_SIZE}x{MIN_SCENE_SIZE}")

    rng = np.random.default_rng(seed)
    image, level = _background(rng, width, height)
    min_side = 8
    max_side = max(min_side + 1, min(width, height) // 4)

    placed_boxes = []
    gts = []
    for index in range(n_objects):
        category_id = int(rng.integers(1, 3))
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            w = int(rng.integers(min_side, max_side + 1))
            h = int(rng.integers(min_side, max_side + 1))
            x = int(rng.integers(1, max(2, width - w)))
            y = int(rng.integers(1, max(2, height - h)))
            candidate = (x, y, w, h)
            if x + w > width - 1 or y + h > height - 1:
                continue
            if not _gap_ok(candidate, placed_boxes, min_gap):
                continue
            if any(iou(candidate, other) > iou_cap for other in placed_boxes):
                continue
            break
        else:
            raise PlacementError(
                f"No se pudo colocar el objeto {index + 1}/{n_objects} tras {MAX_PLACEMENT_ATTEMPTS} intentos"
            )

        mask = _shape_mask(category_id, x, y, w, h, width, height)
        color = level + rng.uniform(*OBJECT_CONTRAST) + rng.uniform(-0.02, 0.02, size=3)
        image[mask] = np.clip(color, 0.0, 1.0)
        placed_boxes.append(candidate)
        gts.append(GroundTruthBox(image_id=image_id, category_id=category_id, bbox=_mask_bbox(mask)))

    return SyntheticScene(image=image, gts=gts, seed=seed, image_id=image_id)


def generate_scenes(n: int, width: int = 64, height: int = 64, max_objects: int = 5,
                    seed: int = 0, first_id: int = 1) -> List[SyntheticScene]:
    """n escenas con 1..max_objects objetos; la escena i usa la semilla (seed, i)"""
    rng = np.random.default_rng(seed)
    counts = rng.integers(1, max_objects + 1, size=n) if max_objects >= 1 else np.zeros(n, dtype=int)
    scenes = []
    for index in range(n):
        scene_seed = int(np.random.SeedSequence([seed, index]).generate_state(1)[0])
        scenes.append(generate_scene(width, height, int(counts[index]), scene_seed, image_id=first_id + index))
    return scenes


def _luminance_u8(image: np.ndarray) -> np.ndarray:
    rgb = np.clip(np.floor(np.asarray(image, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)
    return cv2.cvtColor(rgb, cv2.COLOR_RGB2GRAY)


def detect_blobs(image: np.ndarray, image_id: int = 0, min_area: int = 12,
                 min_range: int = 2, max_area_fraction: float = 0.5) -> List[DetectionBox]:
    """
    Otsu sobre luminancia -> componentes 4-conexas -> cajas
    score = contraste medio del componente frente al fondo, recortado a [0, 1]
    categoría por relleno: >= 0.9 caja, si no disco
    """
    gray = _luminance_u8(image)
    if int(gray.max()) - int(gray.min()) < min_range:
        return []

    _, binary = cv2.threshold(gray, 0, 255, cv2.THRESH_BINARY + cv2.THRESH_OTSU)
    count, labels, stats, _ = cv2.connectedComponentsWithStats(binary, connectivity=4)

    lum = gray.astype(np.float64) / 255.0
    foreground = binary > 0
    background_mean = float(lum[~foreground].mean()) if (~foreground).any() else 0.0
    sums = np.bincount(labels.ravel(), weights=lum.ravel(), minlength=count)

    height, width = gray.shape
    detections = []
    for label in range(1, count):
        x, y, w, h, area = (int(v) for v in stats[label])
        if area < min_area or area > max_area_fraction * width * height:
            continue
        contrast = sums[label] / area - background_mean
        score = float(np.clip(contrast, 0.0, 1.0))
        fill = area / float(w * h)
        category_id = 1 if fill >= 0.9 else 2
        detections.append(DetectionBox(image_id=image_id, category_id=category_id,
                                       bbox=(float(x), float(y), float(w), float(h)), score=score))
    return detections


def detect_images(images: Sequence[np.ndarray], image_ids: Optional[Sequence[int]] = None) -> List[DetectionBox]:
    ids = list(image_ids) if image_ids is not None else list(range(1, len(images) + 1))
    detections = []
    for image_id, image in zip(ids, images):
        detections.extend(detect_blobs(image, image_id=image_id))
    return detections
