"""
Métricas de detección con el protocolo COCO (bbox)
IoU, matching voraz, AP interpolado en 101 puntos y mAP / mAP@50 / mAP@75
"""
import csv
import json
import os
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from errors import ParameterError
from log_utils import log_warning

COCO_IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_LEVELS = np.linspace(0.0, 1.0, 101)
MAX_DETECTIONS = 100

CONDITION_ORDER = ("Normal", "Adversarial", "Autoencoder")

BBox = Tuple[float, float, float, float]


@dataclass(frozen=True)
class GroundTruthBox:
    image_id: int
    category_id: int
    bbox: BBox

    def __post_init__(self):
        _check_bbox(self.bbox)


@dataclass(frozen=True)
class DetectionBox:
    image_id: int
    category_id: int
    bbox: BBox
    score: float

    def __post_init__(self):
        _check_bbox(self.bbox)
        if not 0.0 <= self.score <= 1.0:
            raise ParameterError(f"score debe estar en [0, 1], recibido {self.score}")

    def to_dict(self) -> dict:
        return {
            'image_id': self.image_id,
            'category_id': self.category_id,
            'bbox': [float(v) for v in self.bbox],
            'score': float(self.score),
        }


def _check_bbox(bbox):
    if len(bbox) != 4:
        raise ParameterError(f"bbox debe ser (x, y, w, h), recibido {bbox}")
    if not (bbox[2] > 0 and bbox[3] > 0):
        raise ParameterError(f"bbox con ancho/alto no positivo: {bbox}")


@dataclass
class EvalReport:
    """Resumen de una condición: columnas de la tabla de resultados"""
    map: float
    map50: float
    map75: float
    per_threshold_map: List[float] = field(default_factory=list)
    per_category_ap: Dict[int, List[Optional[float]]] = field(default_factory=dict)
    num_images: int = 0
    num_ground_truth: int = 0
    num_detections: int = 0

    def to_dict(self) -> dict:
        return {
            'map': self.map,
            'map50': self.map50,
            'map75': self.map75,
            'iou_thresholds': [round(float(t), 2) for t in COCO_IOU_THRESHOLDS],
            'per_threshold_map': list(self.per_threshold_map),
            'per_category_ap': {str(k): v for k, v in sorted(self.per_category_ap.items())},
            'counts': {
                'images': self.num_images,
                'ground_truth': self.num_ground_truth,
                'detections': self.num_detections,
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        counts = data.get('counts', {})
        return cls(
            map=float(data['map']),
            map50=float(data['map50']),
            map75=float(data['map75']),
            per_threshold_map=[float(v) for v in data.get('per_threshold_map', [])],
            per_category_ap={int(k): v for k, v in data.get('per_category_ap', {}).items()},
            num_images=int(counts.get('images', 0)),
            num_ground_truth=int(counts.get('ground_truth', 0)),
            num_detections=int(counts.get('detections', 0)),
        )

    def write_json(self, path: str):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, indent=2, ensure_ascii=False)


# ==================== PRIMITIVAS ====================

def iou(a: BBox, b: BBox) -> float:
    """Intersección sobre unión de dos cajas (x, y, w, h)"""
    _check_bbox(a)
    _check_bbox(b)
    ax2, ay2 = a[0] + a[2], a[1] + a[3]
    bx2, by2 = b[0] + b[2], b[1] + b[3]
    inter_w = min(ax2, bx2) - max(a[0], b[0])
    inter_h = min(ay2, by2) - max(a[1], b[1])
    if inter_w <= 0 or inter_h <= 0:
        return 0.0
    intersection = inter_w * inter_h
    union = a[2] * a[3] + b[2] * b[3] - intersection
    # El redondeo con cajas casi idénticas puede pasar de 1
    return float(min(1.0, intersection / union))


def sort_by_score(dets: Sequence[DetectionBox]) -> List[DetectionBox]:
    """Orden descendente por score; empates por orden de entrada (sort estable)"""
    return sorted(dets, key=lambda d: -d.score)


def match_detections(dets: Sequence[DetectionBox], gts: Sequence[GroundTruthBox],
                     iou_threshold: float) -> List[bool]:
    """
    Matching voraz COCO dentro de una (imagen, categoría)
    `dets` ya ordenadas por score descendente; devuelve TP/FP alineado con `dets`
    """
    used = [False] * len(gts)
    flags = []
    for det in dets:
        best_iou = iou_threshold
        best_index = -1
        for index, gt in enumerate(gts):
            if used[index] or gt.image_id != det.image_id or gt.category_id != det.category_id:
                continue
            overlap = iou(det.bbox, gt.bbox)
            if overlap >= best_iou and (best_index < 0 or overlap > best_iou):
                best_iou = overlap
                best_index = index
        if best_index >= 0:
            used[best_index] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def precision_recall_curve(flags: Sequence[bool], num_gt: int) -> Tuple[np.ndarray, np.ndarray]:
    """Puntos (recall, precision) tras cada detección"""
    flags = np.asarray(flags, dtype=bool)
    tp = np.cumsum(flags).astype(np.float64)
    fp = np.cumsum(~flags).astype(np.float64)
    recall = tp / num_gt if num_gt > 0 else np.zeros_like(tp)
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    return recall, precision


def average_precision(flags: Sequence[bool], num_gt: int) -> Optional[float]:
    """
    AP interpolado en 101 puntos de recall (0.00 .. 1.00)
    None si no hay GT ni detecciones (no entra en la media); 0.0 si no hay GT pero sí detecciones
    """
    if num_gt <= 0:
        return None if len(flags) == 0 else 0.0
    if len(flags) == 0:
        return 0.0

    recall, precision = precision_recall_curve(flags, num_gt)
    # Envolvente: máxima precisión a recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    indices = np.searchsorted(recall, RECALL_LEVELS, side='left')
    sampled = np.where(indices < len(envelope), envelope[np.minimum(indices, len(envelope) - 1)], 0.0)
    return float(np.mean(sampled))


# ==================== EVALUACIÓN COMPLETA ====================

def _group(items: Iterable, key) -> Dict:
    grouped = defaultdict(list)
    for item in items:
        grouped[key(item)].append(item)
    return grouped


def _pooled_flags(dets_by_pair, gts_by_pair, image_ids, category_id, iou_threshold, max_dets):
    """Junta las detecciones de todas las imágenes de una categoría, ordenadas por score"""
    scores, flags, num_gt = [], [], 0
    for image_id in image_ids:
        gts = gts_by_pair.get((image_id, category_id), [])
        dets = sort_by_score(dets_by_pair.get((image_id, category_id), []))[:max_dets]
        num_gt += len(gts)
        scores.extend(d.score for d in dets)
        flags.extend(match_detections(dets, gts, iou_threshold))
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind='mergesort')
    return [flags[i] for i in order], num_gt


def coco_map(dets: Sequence[DetectionBox], gts: Sequence[GroundTruthBox],
             iou_thresholds: Sequence[float] = COCO_IOU_THRESHOLDS,
             max_dets: int = MAX_DETECTIONS) -> EvalReport:
    """
    mAP COCO: por categoría y umbral IoU se agrupan todas las imágenes,
    se limita a `max_dets` detecciones por (imagen, categoría) y se calcula el AP.
    La media por umbral usa solo categorías con al menos un GT.
    """
    gt_categories = sorted({g.category_id for g in gts})
    gt_images = {g.image_id for g in gts}

    unknown_categories = sorted({d.category_id for d in dets} - set(gt_categories))
    if unknown_categories:
        log_warning(f"Categorías sin ground truth en las detecciones {unknown_categories}: "
                    f"cuentan como FP y no entran en la media")
    unknown_images = sorted({d.image_id for d in dets} - gt_images, key=str)
    if unknown_images:
        log_warning(f"{len(unknown_images)} imágenes de las detecciones no existen en el ground truth: "
                    f"sus detecciones cuentan como FP")

    image_ids = sorted(gt_images | {d.image_id for d in dets}, key=str)
    dets_by_pair = _group(dets, lambda d: (d.image_id, d.category_id))
    gts_by_pair = _group(gts, lambda g: (g.image_id, g.category_id))

    per_category_ap: Dict[int, List[Optional[float]]] = {}
    for category_id in gt_categories + unknown_categories:
        aps = []
        for threshold in iou_thresholds:
            flags, num_gt = _pooled_flags(dets_by_pair, gts_by_pair, image_ids, category_id,
                                          threshold, max_dets)
            aps.append(average_precision(flags, num_gt))
        per_category_ap[category_id] = aps

    per_threshold_map = []
    for t_index in range(len(iou_thresholds)):
        values = [per_category_ap[c][t_index] for c in gt_categories
                  if per_category_ap[c][t_index] is not None]
        per_threshold_map.append(float(np.mean(values)) if values else 0.0)

    if not gt_categories:
        log_warning("No hay ground truth: todas las métricas valen 0")

    def at(threshold):
        index = int(np.argmin(np.abs(np.asarray(iou_thresholds) - threshold)))
        return per_threshold_map[index] if per_threshold_map else 0.0

    return EvalReport(
        map=float(np.mean(per_threshold_map)) if per_threshold_map else 0.0,
        map50=at(0.5),
        map75=at(0.75),
        per_threshold_map=per_threshold_map,
        per_category_ap=per_category_ap,
        num_images=len(image_ids),
        num_ground_truth=len(gts),
        num_detections=len(dets),
    )


# ==================== SALIDAS ====================

def write_pr_curves_csv(dets: Sequence[DetectionBox], gts: Sequence[GroundTruthBox], path: str,
                        iou_threshold: float = 0.5, max_dets: int = MAX_DETECTIONS):
    """Volcado CSV de las curvas PR por categoría (category_id, rank, recall, precision)"""
    gt_categories = sorted({g.category_id for g in gts})
    image_ids = sorted({g.image_id for g in gts} | {d.image_id for d in dets}, key=str)
    dets_by_pair = _group(dets, lambda d: (d.image_id, d.category_id))
    gts_by_pair = _group(gts, lambda g: (g.image_id, g.category_id))

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(['category_id', 'rank', 'recall', 'precision'])
        for category_id in gt_categories:
            flags, num_gt = _pooled_flags(dets_by_pair, gts_by_pair, image_ids, category_id,
                                          iou_threshold, max_dets)
            recall, precision = precision_recall_curve(flags, num_gt)
            for rank, (r, p) in enumerate(zip(recall, precision), start=1):
                writer.writerow([category_id, rank, f"{r:.6f}", f"{p:.6f}"])


def format_report_table(reports: Mapping[str, EvalReport]) -> str:
    """Tabla alineada: filas por condición (Normal, Adversarial, Autoencoder primero)"""
    names = [n for n in CONDITION_ORDER if n in reports] + [n for n in reports if n not in CONDITION_ORDER]
    headers = ("Condition", "bbox mAP", "bbox mAP@50", "bbox mAP@75")
    width0 = max([len(headers[0])] + [len(n) for n in names])
    widths = [len(h) for h in headers[1:]]

    lines = [
        "  ".join([headers[0].ljust(width0)] + [h.rjust(w) for h, w in zip(headers[1:], widths)])
    ]
    lines.append("-" * len(lines[0]))
    for name in names:
        report = reports[name]
        cells = [f"{report.map:.4f}", f"{report.map50:.4f}", f"{report.map75:.4f}"]
        lines.append("  ".join([name.ljust(width0)] + [c.rjust(w) for c, w in zip(cells, widths)]))
    return "\n".join(lines)
