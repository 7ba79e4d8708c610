#!/usr/bin/env python3
"""
CLI del pipeline de defensa: ruido Perlin -> ataque -> autoencoder -> detección -> mAP

Subcomandos: synth, attack, train, denoise, detect-toy, eval, pipeline, report
Códigos de salida: 0 OK, 1 fallos por imagen o comprobación direccional fallida,
2 errores de configuración / parseo.
"""
import argparse
import concurrent.futures
import json
import os
import sys
from dataclasses import replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from attack import attack_batch, linf_distance, make_noise
from attack_presets import ATTACK_PRESETS
from autoencoder import (TrainHistory, build_model, denoise_image, load_checkpoint, parameter_count,
                         save_checkpoint, train)
from dataset_io import (build_manifest, list_images, load_annotations, load_detections, load_image,
                        resize_bilinear, save_image, save_manifest, split_dataset, write_annotations,
                        write_detections)
from detection_eval import CONDITION_ORDER, EvalReport, coco_map, format_report_table, write_pr_curves_csv
from errors import CheckpointError, ConfigError, DecodeError, ParseError, PerlinDefenseError
from log_utils import StageLogger, log_error, log_info, log_success, log_warning
from perlin_noise import save_noise_field
from pipeline_config import (PipelineConfig, apply_overrides, desk_scale_config, load_config, resolve,
                             write_resolved_config)
from run_manifest import RunManifest
from toy_detector import CATEGORIES, detect_blobs, generate_scenes

EXIT_OK = 0
EXIT_FAILURES = 1
EXIT_CONFIG = 2

# Comprobación direccional: el ataque degrada >= 20% y el autoencoder recupera >= 0.02 en mAP@50
DEGRADATION_RATIO = 0.8
RECOVERY_MARGIN = 0.02

CHECKPOINT_FINAL = 'checkpoint_final.adnz'
CHECKPOINT_BEST = 'checkpoint_best.adnz'
TRAIN_LOG = 'train_log.csv'
REPORT_JSON = 'report.json'
REPORT_TXT = 'report.txt'


# ==================== UTILIDADES ====================

def _load_tree(root: str, logger: StageLogger, manifest: RunManifest) -> List[Tuple[str, np.ndarray]]:
    """Lee todas las imágenes bajo root; las que no se decodifican quedan registradas como error"""
    items = []
    for relpath in list_images(root):
        try:
            items.append((relpath, load_image(os.path.join(root, relpath))))
        except DecodeError as e:
            logger.error(f"{os.path.join(root, relpath)}: {e}")
            manifest.add_error(relpath, str(e))
    return items


def _mean_mse(images: Sequence[np.ndarray], references: Sequence[np.ndarray]) -> float:
    values = [float(np.mean((np.asarray(a) - np.asarray(b)) ** 2)) for a, b in zip(images, references)]
    return float(np.mean(values)) if values else float('nan')


def directional_check(reports: Dict[str, EvalReport], mse_attacked: Optional[float] = None,
                      mse_denoised: Optional[float] = None) -> Tuple[bool, List[str]]:
    """
    normal > autoencoder > adversarial en mAP@50, y el autoencoder acerca las imágenes a las limpias
    Devuelve (ok, líneas explicativas)
    """
    missing = [name for name in CONDITION_ORDER if name not in reports]
    if missing:
        return False, [f"Faltan condiciones para la comprobación: {', '.join(missing)}"]

    clean = reports['Normal'].map50
    attacked = reports['Adversarial'].map50
    denoised = reports['Autoencoder'].map50
    checks = [
        (attacked <= DEGRADATION_RATIO * clean,
         f"degradación: mAP@50 adversarial {attacked:.4f} <= {DEGRADATION_RATIO} x normal {clean:.4f}"),
        (denoised >= attacked + RECOVERY_MARGIN,
         f"recuperación: mAP@50 autoencoder {denoised:.4f} >= adversarial {attacked:.4f} + {RECOVERY_MARGIN}"),
    ]
    if mse_attacked is not None and mse_denoised is not None:
        checks.append((mse_denoised < mse_attacked,
                       f"MSE frente a limpias: autoencoder {mse_denoised:.6f} < adversarial {mse_attacked:.6f}"))
    lines = [("✅ " if ok else "❌ ") + text for ok, text in checks]
    return all(ok for ok, _ in checks), lines


def _write_report(output_dir: str, reports: Dict[str, EvalReport], extra: Optional[dict] = None) -> str:
    """report.json (todas las condiciones) + report.txt (tabla alineada)"""
    os.makedirs(output_dir, exist_ok=True)
    data = {'conditions': {name: report.to_dict() for name, report in reports.items()}}
    if extra:
        data.update(extra)
    with open(os.path.join(output_dir, REPORT_JSON), 'w', encoding='utf-8') as f:
        json.dump(data, f, indent=2, ensure_ascii=False, sort_keys=True)
    table = format_report_table(reports)
    with open(os.path.join(output_dir, REPORT_TXT), 'w', encoding='utf-8') as f:
        f.write(table + "\n")
    return table


def _read_reports(paths: Sequence[str]) -> Tuple[Dict[str, EvalReport], dict]:
    """Acepta report.json combinados o EvalReport sueltos ('Etiqueta=ruta' o la ruta sola)"""
    reports: Dict[str, EvalReport] = {}
    extra = {}
    for spec in paths:
        label, path = _split_label(spec)
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except FileNotFoundError as e:
            raise ConfigError(f"No existe el informe: {path}") from e
        except json.JSONDecodeError as e:
            raise ParseError(f"JSON inválido en {path} (línea {e.lineno}): {e.msg}") from e
        try:
            if 'conditions' in data:
                for name, report in data['conditions'].items():
                    reports[name] = EvalReport.from_dict(report)
                extra.update({k: v for k, v in data.items() if k != 'conditions'})
            else:
                reports[label] = EvalReport.from_dict(data)
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(f"Informe mal formado en {path}: {e}") from e
    return reports, extra


def _split_label(spec: str) -> Tuple[str, str]:
    if '=' in spec and not os.path.exists(spec):
        label, path = spec.split('=', 1)
        return label, path
    return os.path.splitext(os.path.basename(spec))[0], spec


def _prepare(args, command: str) -> PipelineConfig:
    # Solo pipeline parte de la escala de escritorio; el resto usa los hiperparámetros de referencia
    base = desk_scale_config() if command == 'pipeline' else PipelineConfig()
    config = load_config(getattr(args, 'config', None), base=base)
    overrides = {
        'seed': getattr(args, 'seed', None),
        'threads': getattr(args, 'threads', None),
        'preset': getattr(args, 'preset', None),
        'checkpoint': getattr(args, 'checkpoint', None),
        'output_dir': getattr(args, 'output', None),
        'perlin.max_norm': getattr(args, 'max_norm', None),
        'perlin.period': getattr(args, 'period', None),
        'perlin.freq_sine': getattr(args, 'freq_sine', None),
        'perlin.octaves': getattr(args, 'octaves', None),
        'train.epochs': getattr(args, 'epochs', None),
        'train.learning_rate': getattr(args, 'lr', None),
        'train.batch_size': getattr(args, 'batch_size', None),
        'train.input_size': getattr(args, 'input_size', None),
        'train.training_mode': getattr(args, 'training_mode', None),
        'num_scenes': getattr(args, 'num_scenes', None),
        'scene_size': getattr(args, 'scene_size', None),
        'max_objects': getattr(args, 'max_objects', None),
    }
    if getattr(args, 'per_channel', False):
        overrides['per_channel'] = True
    if getattr(args, 'fixed_field', False):
        overrides['fixed_field'] = True
    config = resolve(apply_overrides(config, overrides))
    log_info(f"[{command}] semilla {config.seed}, hilos {config.threads}, ataque {config.perlin.label}")
    return config


# ==================== SUBCOMANDOS ====================

def cmd_synth(config: PipelineConfig) -> int:
    """Genera escenas sintéticas + annotations.json (COCO)"""
    logger = StageLogger('SYNTH')
    output_dir = config.output_dir
    write_resolved_config(config, output_dir)
    manifest = RunManifest(output_dir, 'synth', config.to_dict())

    scenes = generate_scenes(config.num_scenes, width=config.scene_size, height=config.scene_size,
                             max_objects=config.max_objects, seed=config.seed)
    images_info, gts = [], []
    for scene in scenes:
        file_name = f"scene_{scene.image_id:05d}.png"
        save_image(scene.image, os.path.join(output_dir, 'images', file_name))
        images_info.append({'id': scene.image_id, 'file_name': file_name,
                            'width': config.scene_size, 'height': config.scene_size})
        gts.extend(scene.gts)
        manifest.add_item(file_name, os.path.join('images', file_name), seed=scene.seed, objects=len(scene.gts))

    write_annotations(os.path.join(output_dir, 'annotations.json'), images_info, gts, CATEGORIES)
    summary = manifest.finish()
    logger.success(f"{summary['ok_items']} escenas y {len(gts)} objetos en {output_dir}")
    return EXIT_OK


def _verify_attack(input_dir: str, output_dir: str, relpaths: Sequence[str], max_norm: float,
                   logger: StageLogger) -> bool:
    """Relee ambos árboles: cada salida debe quedar a L∞ <= (max_norm + 1)/255 de su origen"""
    bound = (max_norm + 1.0) / 255.0 + 1e-9
    worst = 0.0
    ok = True
    for relpath in relpaths:
        distance = linf_distance(load_image(os.path.join(input_dir, relpath)),
                                 load_image(os.path.join(output_dir, relpath)))
        worst = max(worst, distance)
        if distance > bound:
            logger.error(f"{relpath}: L∞ {distance * 255:.2f}/255 supera la cota {max_norm + 1:.0f}/255")
            ok = False
    logger.info(f"Verificación: L∞ máxima {worst * 255:.2f}/255 en {len(relpaths)} imágenes")
    return ok


def cmd_attack(config: PipelineConfig, input_dir: str, verify: bool = False, save_noise: bool = False) -> int:
    """Ataca cada imagen de input_dir y replica el árbol en output_dir"""
    logger = StageLogger('ATTACK')
    output_dir = config.output_dir
    if not os.path.isdir(input_dir):
        raise ConfigError(f"No existe el directorio de entrada: {input_dir}")
    write_resolved_config(config, output_dir)
    manifest = RunManifest(output_dir, 'attack', config.to_dict())

    items = _load_tree(input_dir, logger, manifest)
    if not items and not manifest.data['errors']:
        logger.warning(f"No hay imágenes en {input_dir}")
        manifest.finish()
        return EXIT_OK

    result = attack_batch(items, config.perlin, global_seed=config.seed, fixed_field=config.fixed_field,
                          per_channel=config.per_channel, workers=config.threads)
    written = []
    for relpath, image in zip(result.image_ids, result.images):
        if image is None:
            continue
        target = os.path.join(output_dir, relpath)
        try:
            save_image(image, target)
        except PerlinDefenseError as e:
            logger.error(f"{target}: {e}")
            manifest.add_error(relpath, str(e))
            continue
        if save_noise:
            height, width = image.shape[:2]
            noise = make_noise(width, height, config.perlin, result.noise_seeds[relpath],
                               per_channel=config.per_channel)
            if isinstance(noise, list):
                noise = noise[0]
            save_noise_field(noise, os.path.join(output_dir, 'noise', os.path.splitext(relpath)[0] + '.png'))
        manifest.add_item(relpath, relpath, noise_seed=result.noise_seeds[relpath])
        written.append(relpath)
    for failure in result.failures:
        manifest.add_error(str(failure.image_id), failure.message)

    verified = _verify_attack(input_dir, output_dir, written, config.perlin.max_norm, logger) if verify else True
    summary = manifest.finish()
    logger.success(f"{len(written)} imágenes atacadas ({config.perlin.label}) en {output_dir}")
    return EXIT_OK if summary['failed_items'] == 0 and verified else EXIT_FAILURES


def _fit_to_input_size(images: Sequence[np.ndarray], config: PipelineConfig, logger: StageLogger):
    width, height = config.train.input_size
    resized = 0
    out = []
    for image in images:
        if image.shape[:2] != (height, width):
            image = resize_bilinear(image, width, height)
            resized += 1
        out.append(image)
    if resized:
        logger.info(f"{resized} imágenes redimensionadas a {width}x{height}")
    return out


def _attack_in_memory(ids, images, config: PipelineConfig) -> List[np.ndarray]:
    result = attack_batch(list(zip(ids, images)), config.perlin, global_seed=config.seed,
                          fixed_field=config.fixed_field, per_channel=config.per_channel,
                          workers=config.threads)
    if result.failures:
        raise ConfigError(f"No se pudieron atacar {len(result.failures)} imágenes de validación")
    return result.images


def run_training(config: PipelineConfig, train_images: Sequence[np.ndarray],
                 val_pairs: Sequence[Tuple[np.ndarray, np.ndarray]], output_dir: str,
                 resume: Optional[str] = None, save_every_epoch: bool = False,
                 train_inputs: Optional[Sequence[np.ndarray]] = None) -> TrainHistory:
    """Entrena y escribe checkpoint final, mejor checkpoint de validación y log CSV por época"""
    logger = StageLogger('TRAIN')
    if resume:
        model = load_checkpoint(resume)
        logger.info(f"Reanudando desde {resume} (época {model.epoch})")
    else:
        model = build_model(seed=config.seed)
        logger.info(f"Modelo nuevo con {parameter_count(model)} parámetros")

    log_path = os.path.join(output_dir, TRAIN_LOG)
    previous = None
    if resume and os.path.exists(log_path):
        # Al reanudar en el mismo directorio se conservan las épocas anteriores y su mejor validación
        previous = TrainHistory.read_csv(log_path, up_to_epoch=model.epoch)
        logger.info(f"Log previo con {len(previous.epochs)} épocas, mejor val {previous.best_val_loss():.6f}")
    best = {'val': previous.best_val_loss() if previous is not None else float('inf')}

    def on_epoch_end(epoch, current, history):
        history.write_csv(log_path)
        val_loss = history.val_loss[-1]
        if not np.isnan(val_loss) and val_loss < best['val']:
            best['val'] = val_loss
            save_checkpoint(current, os.path.join(output_dir, CHECKPOINT_BEST))
        if save_every_epoch:
            save_checkpoint(current, os.path.join(output_dir, f"checkpoint_epoch{epoch:04d}.adnz"))

    model, history = train(model, train_images, val_pairs, config.train, train_inputs=train_inputs,
                           on_epoch_end=on_epoch_end, history=previous)
    save_checkpoint(model, os.path.join(output_dir, CHECKPOINT_FINAL))
    if not os.path.exists(os.path.join(output_dir, CHECKPOINT_BEST)):
        save_checkpoint(model, os.path.join(output_dir, CHECKPOINT_BEST))
    history.write_csv(log_path)
    logger.success(f"Checkpoints en {output_dir}")
    return history


def cmd_train(config: PipelineConfig, train_dir: str, val_dir: Optional[str] = None,
              resume: Optional[str] = None, save_every_epoch: bool = False) -> int:
    """
    Entrena el autoencoder con las imágenes limpias de train_dir
    Sin val_dir se separa un 20% de train_dir; la validación se ataca en memoria
    """
    logger = StageLogger('TRAIN')
    output_dir = config.output_dir
    if not os.path.isdir(train_dir):
        raise ConfigError(f"No existe el directorio de entrenamiento: {train_dir}")
    if resume and not os.path.exists(resume):
        raise ConfigError(f"No existe el checkpoint a reanudar: {resume}")
    write_resolved_config(config, output_dir)
    manifest = RunManifest(output_dir, 'train', config.to_dict())

    dataset = build_manifest(train_dir)
    if val_dir:
        train_split = dataset
        val_root = val_dir
        val_split = build_manifest(val_dir, split='val')
    else:
        train_split, val_split = split_dataset(dataset, config.train_fraction, seed=config.seed)
        val_root = train_dir
    save_manifest(train_split, os.path.join(output_dir, 'train_manifest.jsonl'))
    save_manifest(val_split, os.path.join(output_dir, 'val_manifest.jsonl'))

    # Cualquier imagen ilegible aborta antes de la primera época
    train_images = _fit_to_input_size([load_image(os.path.join(train_dir, e.path)) for e in train_split.entries],
                                      config, logger)
    val_clean = _fit_to_input_size([load_image(os.path.join(val_root, e.path)) for e in val_split.entries],
                                   config, logger)
    val_adv = _attack_in_memory([e.path for e in val_split.entries], val_clean, config)
    train_inputs = None
    if config.train.training_mode == 'denoising':
        train_inputs = _attack_in_memory([e.path for e in train_split.entries], train_images, config)
    logger.info(f"Split: {len(train_images)} entrenamiento / {len(val_clean)} validación")

    history = run_training(config, train_images, list(zip(val_adv, val_clean)), output_dir,
                           resume=resume, save_every_epoch=save_every_epoch, train_inputs=train_inputs)
    manifest.update(epochs=history.epochs, train_size=len(train_images), val_size=len(val_clean))
    manifest.finish()
    return EXIT_OK


def _require_checkpoint(path: Optional[str]):
    if not path:
        raise ConfigError("Falta el checkpoint (--checkpoint o 'checkpoint' en la configuración)")
    if not os.path.exists(path):
        raise ConfigError(f"No existe el checkpoint: {path}")
    try:
        return load_checkpoint(path)
    except CheckpointError as e:
        raise ConfigError(f"Checkpoint inválido {path}: {e}") from e


def denoise_many(model, images: Sequence[np.ndarray], workers: int = 1) -> List[np.ndarray]:
    """denoise_image sobre una lista, resultados en el orden de entrada"""
    if workers <= 1:
        return [denoise_image(model, image) for image in images]
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(lambda image: denoise_image(model, image), images))


def cmd_denoise(config: PipelineConfig, input_dir: str) -> int:
    logger = StageLogger('DENOISE')
    output_dir = config.output_dir
    model = _require_checkpoint(config.checkpoint)
    if not os.path.isdir(input_dir):
        raise ConfigError(f"No existe el directorio de entrada: {input_dir}")
    write_resolved_config(config, output_dir)
    manifest = RunManifest(output_dir, 'denoise', config.to_dict())

    items = _load_tree(input_dir, logger, manifest)
    if not items and not manifest.data['errors']:
        logger.warning(f"No hay imágenes en {input_dir}")
    denoised = denoise_many(model, [image for _, image in items], workers=config.threads)
    for (relpath, _), image in zip(items, denoised):
        try:
            save_image(image, os.path.join(output_dir, relpath))
            manifest.add_item(relpath, relpath)
        except PerlinDefenseError as e:
            logger.error(f"{relpath}: {e}")
            manifest.add_error(relpath, str(e))
    summary = manifest.finish()
    logger.success(f"{summary['ok_items']} imágenes limpiadas en {output_dir}")
    return EXIT_OK if summary['failed_items'] == 0 else EXIT_FAILURES


def cmd_detect_toy(config: PipelineConfig, input_dir: str, annotations: Optional[str] = None,
                   output_path: Optional[str] = None) -> int:
    """Detector de manchas sobre un directorio; los ids salen de annotations.json si se da"""
    logger = StageLogger('DETECT')
    output_path = output_path or os.path.join(config.output_dir, 'detections.json')
    output_dir = os.path.dirname(os.path.abspath(output_path))
    write_resolved_config(config, output_dir)
    manifest = RunManifest(output_dir, 'detect-toy', config.to_dict())

    name_to_id = load_annotations(annotations).file_name_to_id() if annotations else {}
    if not annotations:
        logger.warning("Sin anotaciones: los ids de imagen se asignan por orden de ruta (1..n)")
    detections = []
    for index, (relpath, image) in enumerate(_load_tree(input_dir, logger, manifest), start=1):
        image_id = name_to_id.get(relpath.replace(os.sep, '/'), index if not annotations else None)
        if image_id is None:
            logger.warning(f"{relpath} no aparece en {annotations}, se omite")
            continue
        found = detect_blobs(image, image_id=image_id)
        detections.extend(found)
        manifest.add_item(relpath, None, image_id=image_id, detections=len(found))
    write_detections(output_path, detections)
    summary = manifest.finish()
    logger.success(f"{len(detections)} detecciones en {output_path}")
    return EXIT_OK if summary['failed_items'] == 0 else EXIT_FAILURES


def cmd_eval(config: PipelineConfig, gt_path: str, detection_specs: Sequence[str],
             pr_curves: bool = False) -> int:
    """
    Evalúa uno o varios ficheros de detecciones contra el mismo GT
    Con tres ficheros sin etiqueta las filas son Normal, Adversarial, Autoencoder
    """
    logger = StageLogger('EVAL')
    output_dir = config.output_dir
    gts = load_annotations(gt_path).all_boxes()

    labelled = [_split_label(spec) for spec in detection_specs]
    if len(detection_specs) == len(CONDITION_ORDER) and not any('=' in s and not os.path.exists(s)
                                                                for s in detection_specs):
        labelled = [(name, path) for name, (_, path) in zip(CONDITION_ORDER, labelled)]

    reports = {}
    for label, path in labelled:
        detections = load_detections(path)
        reports[label] = coco_map(detections, gts)
        logger.info(f"{label}: mAP {reports[label].map:.4f}, mAP@50 {reports[label].map50:.4f}")
        if pr_curves:
            write_pr_curves_csv(detections, gts, os.path.join(output_dir, f"pr_{label}.csv"))

    write_resolved_config(config, output_dir)
    table = _write_report(output_dir, reports)
    print(table)
    return EXIT_OK


def cmd_report(report_paths: Sequence[str]) -> int:
    """Imprime la tabla de informes guardados y la comprobación direccional"""
    reports, extra = _read_reports(report_paths)
    print(format_report_table(reports))
    mse = extra.get('mse', {})
    ok, lines = directional_check(reports, mse.get('attacked'), mse.get('denoised'))
    for line in lines:
        print(line)
    return EXIT_OK if ok else EXIT_FAILURES


def cmd_pipeline(config: PipelineConfig, skip_train: bool = False, save_every_epoch: bool = False) -> int:
    """
    Escenas -> split -> entrenamiento con limpias -> ataque del conjunto de prueba ->
    autoencoder -> detector x3 condiciones -> mAP -> informe
    Devuelve 0 solo si se cumple la comprobación direccional
    """
    config = replace(config, train=replace(config.train, input_size=(config.scene_size, config.scene_size)))
    output_dir = config.output_dir
    write_resolved_config(config, output_dir)
    manifest = RunManifest(output_dir, 'pipeline', config.to_dict())

    stage = 'synth'
    try:
        scenes = generate_scenes(config.num_scenes, width=config.scene_size, height=config.scene_size,
                                 max_objects=config.max_objects, seed=config.seed)
        order = np.random.default_rng(config.seed).permutation(len(scenes))
        n_train = int(np.floor(config.train_fraction * len(scenes) + 0.5))
        train_scenes = [scenes[i] for i in sorted(order[:n_train])]
        test_scenes = [scenes[i] for i in sorted(order[n_train:])]
        StageLogger('SYNTH').success(f"{len(scenes)} escenas: {len(train_scenes)} entrenamiento / "
                                     f"{len(test_scenes)} prueba")

        clean = [scene.image for scene in test_scenes]
        test_ids = [scene.image_id for scene in test_scenes]
        gts = [gt for scene in test_scenes for gt in scene.gts]
        images_info = [{'id': s.image_id, 'file_name': f"scene_{s.image_id:05d}.png",
                        'width': config.scene_size, 'height': config.scene_size} for s in test_scenes]
        write_annotations(os.path.join(output_dir, 'annotations.json'), images_info, gts, CATEGORIES)

        stage = 'attack'
        result = attack_batch(list(zip(test_ids, clean)), config.perlin, global_seed=config.seed,
                              fixed_field=config.fixed_field, per_channel=config.per_channel,
                              workers=config.threads)
        if result.failures:
            raise PerlinDefenseError(f"{len(result.failures)} escenas no se pudieron atacar")
        attacked = result.images

        stage = 'train'
        checkpoint = config.checkpoint or os.path.join(output_dir, CHECKPOINT_FINAL)
        if skip_train:
            model = _require_checkpoint(checkpoint)
            StageLogger('TRAIN').info(f"Entrenamiento omitido, usando {checkpoint}")
        else:
            train_inputs = None
            if config.train.training_mode == 'denoising':
                train_inputs = _attack_in_memory([s.image_id for s in train_scenes],
                                                 [s.image for s in train_scenes], config)
            run_training(config, [s.image for s in train_scenes], list(zip(attacked, clean)), output_dir,
                         save_every_epoch=save_every_epoch, train_inputs=train_inputs)
            model = load_checkpoint(os.path.join(output_dir, CHECKPOINT_FINAL))

        stage = 'denoise'
        denoised = denoise_many(model, attacked, workers=config.threads)

        stage = 'save'
        for name, images in (('clean', clean), ('attacked', attacked), ('denoised', denoised)):
            for info, image in zip(images_info, images):
                save_image(image, os.path.join(output_dir, name, info['file_name']))

        stage = 'detect'
        # Las condiciones se evalúan sobre las imágenes cuantizadas tal como quedan en disco
        conditions = {}
        for condition, name in zip(CONDITION_ORDER, ('clean', 'attacked', 'denoised')):
            images = [load_image(os.path.join(output_dir, name, info['file_name'])) for info in images_info]
            detections = [d for image_id, image in zip(test_ids, images)
                          for d in detect_blobs(image, image_id=image_id)]
            write_detections(os.path.join(output_dir, f"detections_{name}.json"), detections)
            conditions[condition] = (detections, images)
            manifest.add_item(name, f"detections_{name}.json", detections=len(detections))

        stage = 'eval'
        reports = {condition: coco_map(detections, gts) for condition, (detections, _) in conditions.items()}
        mse_attacked = _mean_mse(conditions['Adversarial'][1], conditions['Normal'][1])
        mse_denoised = _mean_mse(conditions['Autoencoder'][1], conditions['Normal'][1])
        mse = {'attacked': mse_attacked, 'denoised': mse_denoised}
        table = _write_report(output_dir, reports, extra={'attack': config.perlin.label, 'mse': mse})
    except PerlinDefenseError as e:
        log_error(f"Etapa '{stage}' fallida: {e}")
        manifest.add_error(stage, str(e))
        manifest.finish()
        raise

    print(table)
    ok, lines = directional_check(reports, mse_attacked, mse_denoised)
    for line in lines:
        print(line)
    manifest.update(directional_check=ok)
    manifest.finish()
    if ok:
        log_success("Comprobación direccional superada")
    else:
        log_warning("La comprobación direccional no se cumple")
    return EXIT_OK if ok else EXIT_FAILURES


# ==================== ARGPARSE ====================

def _add_common(parser, output_default=None):
    parser.add_argument('--config', help='Fichero JSON de configuración')
    parser.add_argument('--seed', type=int, help='Semilla global')
    parser.add_argument('--threads', type=int, help='Hilos de trabajo (1 = determinista)')
    parser.add_argument('-o', '--output', default=output_default, help='Directorio de salida')


def _add_attack_params(parser):
    parser.add_argument('--preset', choices=sorted(ATTACK_PRESETS), help='Preset de ataque')
    parser.add_argument('--max-norm', type=float)
    parser.add_argument('--period', type=float)
    parser.add_argument('--freq-sine', type=float)
    parser.add_argument('--octaves', type=int)
    parser.add_argument('--per-channel', action='store_true', help='Un campo de ruido por canal')
    parser.add_argument('--fixed-field', action='store_true', help='El mismo campo para todas las imágenes')


def _add_train_params(parser):
    parser.add_argument('--epochs', type=int)
    parser.add_argument('--lr', type=float)
    parser.add_argument('--batch-size', type=int)
    parser.add_argument('--input-size', type=int, nargs=2, metavar=('ANCHO', 'ALTO'),
                        help='Tamaño de entrenamiento (pipeline usa el de las escenas)')
    parser.add_argument('--training-mode', choices=['clean', 'denoising'])
    parser.add_argument('--save-every-epoch', action='store_true')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='perlin-defense', description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('synth', help='Genera escenas sintéticas con anotaciones')
    _add_common(p)
    p.add_argument('--num-scenes', type=int)
    p.add_argument('--scene-size', type=int)
    p.add_argument('--max-objects', type=int)

    p = sub.add_parser('attack', help='Aplica el ataque de ruido Perlin a un directorio')
    p.add_argument('input', help='Directorio de imágenes limpias')
    _add_common(p)
    _add_attack_params(p)
    p.add_argument('--verify', action='store_true', help='Relee ambos árboles y comprueba la cota L∞')
    p.add_argument('--save-noise', action='store_true', help='Guarda los campos de ruido en escala de grises')

    p = sub.add_parser('train', help='Entrena el autoencoder')
    p.add_argument('train_dir', help='Imágenes limpias de entrenamiento')
    p.add_argument('--val-dir', help='Imágenes limpias de validación (por defecto 20%% de train_dir)')
    p.add_argument('--resume', help='Checkpoint desde el que continuar')
    _add_common(p)
    _add_attack_params(p)
    _add_train_params(p)

    p = sub.add_parser('denoise', help='Limpia un directorio con un checkpoint')
    p.add_argument('input')
    p.add_argument('--checkpoint', help='Checkpoint del autoencoder')
    _add_common(p)

    p = sub.add_parser('detect-toy', help='Detector de manchas sobre un directorio')
    p.add_argument('input')
    p.add_argument('--annotations', help='annotations.json para mapear ficheros a ids')
    p.add_argument('--detections', help='Fichero de salida (por defecto <output>/detections.json)')
    _add_common(p)

    p = sub.add_parser('eval', help='mAP COCO de uno o varios ficheros de detecciones')
    p.add_argument('ground_truth', help='Anotaciones COCO')
    p.add_argument('detections', nargs='+', help="Ficheros de detecciones ('Etiqueta=ruta' opcional)")
    p.add_argument('--pr-curves', action='store_true', help='Vuelca curvas PR en CSV')
    _add_common(p)

    p = sub.add_parser('pipeline', help='Reproducción completa a escala de escritorio')
    _add_common(p)
    _add_attack_params(p)
    _add_train_params(p)
    p.add_argument('--num-scenes', type=int)
    p.add_argument('--scene-size', type=int)
    p.add_argument('--max-objects', type=int)
    p.add_argument('--checkpoint', help='Checkpoint a reutilizar con --skip-train')
    p.add_argument('--skip-train', action='store_true')

    p = sub.add_parser('report', help='Tabla y comprobación direccional de informes guardados')
    p.add_argument('reports', nargs='+', help="report.json o EvalReport sueltos ('Etiqueta=ruta')")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == 'report':
            return cmd_report(args.reports)

        config = _prepare(args, args.command)
        if args.command == 'synth':
            return cmd_synth(config)
        if args.command == 'attack':
            return cmd_attack(config, args.input, verify=args.verify, save_noise=args.save_noise)
        if args.command == 'train':
            return cmd_train(config, args.train_dir, val_dir=args.val_dir, resume=args.resume,
                             save_every_epoch=args.save_every_epoch)
        if args.command == 'denoise':
            return cmd_denoise(config, args.input)
        if args.command == 'detect-toy':
            return cmd_detect_toy(config, args.input, annotations=args.annotations, output_path=args.detections)
        if args.command == 'eval':
            return cmd_eval(config, args.ground_truth, args.detections, pr_curves=args.pr_curves)
        if args.command == 'pipeline':
            return cmd_pipeline(config, skip_train=args.skip_train, save_every_epoch=args.save_every_epoch)
    except (ConfigError, ParseError, CheckpointError) as e:
        log_error(str(e))
        return EXIT_CONFIG
    except PerlinDefenseError as e:
        log_error(str(e))
        return EXIT_FAILURES
    return EXIT_CONFIG


if __name__ == '__main__':
    sys.exit(main())
