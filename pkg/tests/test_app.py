from io import BytesIO

import numpy as np
import pytest
from PIL import Image

import app as api
from attack import attack_image
from autoencoder import build_model, save_checkpoint
from dataset_io import encode_image, load_image
from perlin_noise import PerlinConfig


@pytest.fixture
def client(monkeypatch):
    monkeypatch.delenv('PERLIN_DEFENSE_CHECKPOINT', raising=False)
    api.MODEL_CACHE.clear()
    api.app.config['TESTING'] = True
    with api.app.test_client() as client:
        yield client


def upload(image, filename='scene.png', **fields):
    buffer = BytesIO()
    encode_image(image).save(buffer, format='PNG')
    buffer.seek(0)
    data = {'image': (buffer, filename)}
    data.update({k: str(v) for k, v in fields.items()})
    return data


def test_health_without_checkpoint(client):
    data = client.get('/health').get_json()
    assert data['status'] == 'ok'
    assert data['checkpoint_available'] is False
    assert data['version'] == api.API_VERSION


def test_presets(client):
    data = client.get('/presets').get_json()
    assert data['default'] == 'referencia'
    assert data['total'] == len(data['presets'])
    assert data['presets'][0]['label'] == '30_30_30_2'


def test_attack_returns_same_image_as_library(client, quantized_image):
    response = client.post('/attack', data=upload(quantized_image, seed=7), content_type='multipart/form-data')
    assert response.status_code == 200
    assert response.mimetype == 'image/png'
    assert response.headers['X-Attack-Label'] == '30_30_30_2'
    returned = load_image(BytesIO(response.data))
    expected = attack_image(quantized_image, PerlinConfig(seed=7), 7)
    np.testing.assert_allclose(returned, expected, atol=0.5 / 255 + 1e-9)


def test_attack_overrides_and_noise_output(client, quantized_image):
    response = client.post('/attack', data=upload(quantized_image, preset='fuerte', octaves=1),
                           content_type='multipart/form-data')
    assert response.headers['X-Attack-Label'] == '60_30_30_1'

    response = client.post('/attack', data=upload(quantized_image, output='noise'),
                           content_type='multipart/form-data')
    assert response.status_code == 200
    with Image.open(BytesIO(response.data)) as noise:
        assert noise.mode == 'L'
        assert noise.size == (12, 10)


@pytest.mark.parametrize("fields,filename", [
    ({'max_norm': 400}, 'scene.png'),
    ({'preset': 'nope'}, 'scene.png'),
    ({'seed': 'abc'}, 'scene.png'),
    ({'octaves': 'x'}, 'scene.png'),
    ({}, 'scene.jpg'),
])
def test_attack_rejects_bad_requests(client, quantized_image, fields, filename):
    response = client.post('/attack', data=upload(quantized_image, filename=filename, **fields),
                           content_type='multipart/form-data')
    assert response.status_code == 400
    assert response.get_json()['success'] is False


def test_attack_without_image(client):
    response = client.post('/attack', data={}, content_type='multipart/form-data')
    assert response.status_code == 400


def test_attack_with_corrupt_png(client):
    data = {'image': (BytesIO(b'garbage'), 'scene.png')}
    response = client.post('/attack', data=data, content_type='multipart/form-data')
    assert response.status_code == 400


def test_denoise_requires_checkpoint(client, quantized_image):
    response = client.post('/denoise', data=upload(quantized_image), content_type='multipart/form-data')
    assert response.status_code == 503


def test_denoise_with_checkpoint(client, quantized_image, tmp_path, monkeypatch):
    path = tmp_path / 'model.adnz'
    save_checkpoint(build_model(), str(path))
    monkeypatch.setenv('PERLIN_DEFENSE_CHECKPOINT', str(path))
    assert client.get('/health').get_json()['checkpoint_available'] is True

    response = client.post('/denoise', data=upload(quantized_image), content_type='multipart/form-data')
    assert response.status_code == 200
    assert load_image(BytesIO(response.data)).shape == quantized_image.shape
    assert str(path) in api.MODEL_CACHE


def test_detect_toy(client):
    image = np.full((32, 32, 3), 0.3)
    image[10:15, 8:14] = 0.8
    response = client.post('/detect-toy', data=upload(image, image_id=5), content_type='multipart/form-data')
    data = response.get_json()
    assert data['success'] is True
    assert data['total'] == 1
    found = data['detections'][0]
    assert (found['image_id'], found['category_id'], found['bbox']) == (5, 1, [8.0, 10.0, 6.0, 5.0])
    assert found['score'] == pytest.approx(0.5, abs=0.01)


def test_evaluate(client):
    ground_truth = {
        'images': [{'id': 1, 'width': 32, 'height': 32}],
        'annotations': [{'id': 1, 'image_id': 1, 'category_id': 1, 'bbox': [2, 2, 10, 10]}],
        'categories': [{'id': 1, 'name': 'box'}],
    }
    detections = [{'image_id': 1, 'category_id': 1, 'bbox': [2, 2, 10, 10], 'score': 0.9}]
    data = client.post('/evaluate', json={'ground_truth': ground_truth, 'detections': detections}).get_json()
    assert data['success'] is True
    assert data['report']['map'] == 1.0

    response = client.post('/evaluate', json={'ground_truth': ground_truth})
    assert response.status_code == 400
    bad = [{'image_id': 1, 'category_id': 1, 'bbox': [2, 2, 10], 'score': 0.9}]
    response = client.post('/evaluate', json={'ground_truth': ground_truth, 'detections': bad})
    assert response.status_code == 400
    assert 'bbox' in response.get_json()['error']
    named = [{'image_id': 'img1', 'category_id': 1, 'bbox': [2, 2, 10, 10], 'score': 0.9}]
    response = client.post('/evaluate', json={'ground_truth': ground_truth, 'detections': named})
    assert response.status_code == 400
    assert 'image_id' in response.get_json()['error']
