#!/usr/bin/env python3
"""
API REST del ataque Perlin y la defensa con autoencoder
"""
import os
import threading
from datetime import datetime
from io import BytesIO

from flask import Flask, jsonify, request, send_file
from flask_cors import CORS
from werkzeug.utils import secure_filename

from attack import attack_image, make_noise
from attack_presets import DEFAULT_PRESET, get_available_presets, get_preset_config
from autoencoder import denoise_image, load_checkpoint
from dataset_io import encode_image, load_image, parse_annotations, parse_detections
from detection_eval import coco_map
from errors import CheckpointError, ConfigError, DecodeError, ParameterError, ParseError
from log_utils import log_error, log_info, log_success, log_warning
from perlin_noise import PerlinConfig, noise_field_to_image
from toy_detector import detect_blobs

app = Flask(__name__)
CORS(app)

API_VERSION = '1.0.0'
SERVER_HOST = os.getenv('PERLIN_DEFENSE_HOST', '0.0.0.0')
SERVER_PORT = int(os.getenv('PERLIN_DEFENSE_PORT', '5000'))
ALLOWED_EXTENSIONS = ['png', 'ppm']

# Modelo cargado una sola vez por ruta de checkpoint
MODEL_CACHE = {}
MODEL_LOCK = threading.Lock()


# ==================== FUNCIONES UTILITARIAS ====================

def error_response(message, status=400):
    return jsonify({'success': False, 'error': message}), status


def allowed_file(filename):
    """Verifica si el archivo tiene una extensión permitida"""
    if '.' not in filename:
        return False
    return filename.rsplit('.', 1)[1].lower() in ALLOWED_EXTENSIONS


def checkpoint_path():
    return os.getenv('PERLIN_DEFENSE_CHECKPOINT')


def get_model():
    """Autoencoder del checkpoint configurado en PERLIN_DEFENSE_CHECKPOINT"""
    path = checkpoint_path()
    if not path:
        raise ConfigError("PERLIN_DEFENSE_CHECKPOINT no está definido")
    if not os.path.exists(path):
        raise ConfigError(f"No existe el checkpoint: {path}")
    with MODEL_LOCK:
        if path not in MODEL_CACHE:
            MODEL_CACHE[path] = load_checkpoint(path)
            log_success(f"Checkpoint cargado: {path}")
        return MODEL_CACHE[path]


def read_uploaded_image():
    """Imagen del campo 'image' del formulario como (nombre, array HxWx3)"""
    if 'image' not in request.files:
        raise ParameterError("No se proporcionó imagen")
    file = request.files['image']
    if not file or file.filename == '':
        raise ParameterError("Archivo de imagen vacío")
    if not allowed_file(file.filename):
        raise ParameterError(f"Tipo de archivo no permitido (usar {', '.join(ALLOWED_EXTENSIONS)})")
    filename = secure_filename(file.filename)
    return filename, load_image(BytesIO(file.read()))


def attack_config_from_form():
    """PerlinConfig desde el formulario: preset + parámetros sueltos opcionales"""
    preset = request.form.get('preset', DEFAULT_PRESET)
    try:
        seed = int(request.form.get('seed', 0))
    except ValueError as e:
        raise ParameterError(f"Semilla inválida: {request.form['seed']}") from e
    config = get_preset_config(preset, seed=seed)
    values = config.to_dict()
    for key, cast in (('max_norm', float), ('period', float), ('freq_sine', float), ('octaves', int)):
        if key in request.form:
            try:
                values[key] = cast(request.form[key])
            except ValueError as e:
                raise ParameterError(f"Valor inválido para {key}: {request.form[key]}") from e
    return PerlinConfig(**values).validate()


def png_response(image, download_name):
    buffer = BytesIO()
    encode_image(image).save(buffer, format='PNG')
    buffer.seek(0)
    return send_file(buffer, mimetype='image/png', download_name=download_name)


# ==================== ENDPOINTS ====================

@app.route('/health', methods=['GET'])
def health_check():
    """Verificación de estado del servicio"""
    path = checkpoint_path()
    return jsonify({
        'status': 'ok',
        'checkpoint': path,
        'checkpoint_available': bool(path) and os.path.exists(path),
        'version': API_VERSION,
        'timestamp': datetime.now().isoformat(),
    })


@app.route('/presets', methods=['GET'])
def list_presets():
    """Lista los presets de ataque disponibles"""
    presets = get_available_presets()
    return jsonify({'presets': presets, 'total': len(presets), 'default': DEFAULT_PRESET})


@app.route('/attack', methods=['POST'])
def attack_endpoint():
    """Devuelve la imagen atacada en PNG"""
    try:
        filename, image = read_uploaded_image()
        config = attack_config_from_form()
        per_channel = request.form.get('per_channel', 'false').lower() == 'true'
        log_info(f"Atacando {filename} con {config.label} (semilla {config.seed})")
        if request.form.get('output', 'image') == 'noise':
            height, width = image.shape[:2]
            noise = make_noise(width, height, config, config.seed, per_channel=per_channel)
            if isinstance(noise, list):
                noise = noise[0]
            buffer = BytesIO()
            noise_field_to_image(noise).save(buffer, format='PNG')
            buffer.seek(0)
            return send_file(buffer, mimetype='image/png', download_name=f"noise_{filename.rsplit('.', 1)[0]}.png")
        adversarial = attack_image(image, config, config.seed, per_channel=per_channel)
        response = png_response(adversarial, f"adv_{filename.rsplit('.', 1)[0]}.png")
        response.headers['X-Attack-Label'] = config.label
        return response
    except (ParameterError, ConfigError, DecodeError) as e:
        log_warning(f"Petición de ataque rechazada: {e}")
        return error_response(str(e), 400)
    except Exception as e:
        log_error(f"Error en /attack: {e}")
        return error_response(str(e), 500)


@app.route('/denoise', methods=['POST'])
def denoise_endpoint():
    """Limpia la imagen subida con el autoencoder configurado"""
    try:
        filename, image = read_uploaded_image()
        try:
            model = get_model()
        except (ConfigError, CheckpointError) as e:
            log_error(str(e))
            return error_response(str(e), 503)
        denoised = denoise_image(model, image)
        return png_response(denoised, f"denoised_{filename.rsplit('.', 1)[0]}.png")
    except (ParameterError, DecodeError) as e:
        return error_response(str(e), 400)
    except Exception as e:
        log_error(f"Error en /denoise: {e}")
        return error_response(str(e), 500)


@app.route('/detect-toy', methods=['POST'])
def detect_toy_endpoint():
    """Detector de manchas sobre la imagen subida"""
    try:
        _, image = read_uploaded_image()
        image_id = int(request.form.get('image_id', 0))
        detections = detect_blobs(image, image_id=image_id)
        return jsonify({'success': True, 'detections': [d.to_dict() for d in detections],
                        'total': len(detections)})
    except (ParameterError, DecodeError, ValueError) as e:
        return error_response(str(e), 400)
    except Exception as e:
        log_error(f"Error en /detect-toy: {e}")
        return error_response(str(e), 500)


@app.route('/evaluate', methods=['POST'])
def evaluate_endpoint():
    """mAP COCO de {ground_truth: objeto COCO, detections: [...]}"""
    data = request.get_json(silent=True)
    if not isinstance(data, dict) or 'ground_truth' not in data or 'detections' not in data:
        return error_response("Se esperaba JSON con 'ground_truth' y 'detections'", 400)
    try:
        annotations = parse_annotations(data['ground_truth'], source='ground_truth')
        detections = parse_detections(data['detections'], source='detections')
        report = coco_map(detections, annotations.all_boxes())
        return jsonify({'success': True, 'report': report.to_dict()})
    except ParseError as e:
        return error_response(str(e), 400)
    except Exception as e:
        log_error(f"Error en /evaluate: {e}")
        return error_response(str(e), 500)


# ==================== INICIO DEL SERVIDOR ====================

if __name__ == '__main__':
    log_info(f"🚀 Iniciando API de defensa Perlin v{API_VERSION}...")
    if checkpoint_path():
        log_info(f"📁 Checkpoint: {checkpoint_path()}")
    else:
        log_warning("PERLIN_DEFENSE_CHECKPOINT no definido: /denoise no estará disponible")
    log_info(f"🌟 Servidor iniciado en http://{SERVER_HOST}:{SERVER_PORT}")
    app.run(host=SERVER_HOST, port=SERVER_PORT)
