import itertools

import numpy as np
import pytest

from attack import attack_batch
from detection_eval import coco_map, iou
from errors import ParameterError, PlacementError
from perlin_noise import PerlinConfig
from toy_detector import CATEGORIES, detect_blobs, detect_images, generate_scene, generate_scenes


def test_scenes_are_deterministic():
    first = generate_scenes(3, 32, 32, max_objects=3, seed=5)
    second = generate_scenes(3, 32, 32, max_objects=3, seed=5)
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a.image, b.image)
        assert a.gts == b.gts
    assert [s.image_id for s in first] == [1, 2, 3]
    other = generate_scenes(3, 32, 32, max_objects=3, seed=6)
    assert not np.array_equal(first[0].image, other[0].image)


def test_scene_contents():
    scene = generate_scene(64, 64, 4, seed=11, image_id=7)
    assert scene.image.shape == (64, 64, 3)
    assert scene.image.min() >= 0.0 and scene.image.max() <= 1.0
    assert len(scene.gts) == 4
    assert all(g.image_id == 7 and g.category_id in CATEGORIES for g in scene.gts)
    for a, b in itertools.combinations(scene.gts, 2):
        assert iou(a.bbox, b.bbox) <= 0.1


def test_zero_objects():
    assert generate_scene(32, 32, 0, seed=1).gts == []
    scenes = generate_scenes(2, 32, 32, max_objects=0)
    assert all(s.gts == [] for s in scenes)


def test_placement_failure_is_reported():
    with pytest.raises(PlacementError):
        generate_scene(16, 16, 2, seed=0)


@pytest.mark.parametrize("width,n_objects", [(10, 1), (32, -1)])
def test_invalid_scene_parameters(width, n_objects):
    with pytest.raises(ParameterError):
        generate_scene(width, 32, n_objects, seed=0)


def test_single_rectangle_is_detected_exactly():
    image = np.full((32, 32, 3), 0.3)
    image[10:15, 8:14] = 0.8
    detections = detect_blobs(image, image_id=3)
    assert len(detections) == 1
    found = detections[0]
    assert found.bbox == (8.0, 10.0, 6.0, 5.0)
    assert found.category_id == 1
    assert found.image_id == 3
    assert found.score == pytest.approx(0.5, abs=0.01)


def test_blank_image_has_no_detections():
    assert detect_blobs(np.full((16, 16, 3), 0.4)) == []


@pytest.mark.parametrize("seed", range(10))
def test_single_object_scene_is_found(seed):
    scene = generate_scene(64, 64, 1, seed=seed, image_id=1)
    detections = detect_blobs(scene.image, image_id=1)
    assert len(detections) == 1
    assert iou(detections[0].bbox, scene.gts[0].bbox) >= 0.9
    assert detections[0].category_id == scene.gts[0].category_id


@pytest.mark.parametrize("seed", range(10))
def test_two_object_scene_gives_two_detections(seed):
    scene = generate_scene(64, 64, 2, seed=seed)
    assert len(detect_blobs(scene.image)) == 2


def test_detect_images_assigns_ids():
    image = np.full((32, 32, 3), 0.3)
    image[4:12, 4:12] = 0.9
    detections = detect_images([image, image])
    assert [d.image_id for d in detections] == [1, 2]
    assert [d.image_id for d in detect_images([image], image_ids=[42])] == [42]


def test_clean_map50_on_many_scenes():
    scenes = generate_scenes(200, 64, 64, max_objects=5, seed=0)
    assert {len(s.gts) for s in scenes} == {1, 2, 3, 4, 5}
    gts = [g for s in scenes for g in s.gts]
    report = coco_map(detect_images([s.image for s in scenes], [s.image_id for s in scenes]), gts)
    assert report.map50 >= 0.9


def test_clean_scenes_are_easy_and_attack_hurts():
    scenes = generate_scenes(20, 64, 64, max_objects=4, seed=3)
    gts = [g for s in scenes for g in s.gts]
    clean = coco_map(detect_images([s.image for s in scenes], [s.image_id for s in scenes]), gts)
    assert clean.map50 >= 0.9

    config = PerlinConfig(max_norm=30, period=30, freq_sine=30, octaves=2)
    attacked = attack_batch([(s.image_id, s.image) for s in scenes], config, global_seed=3)
    adversarial = coco_map(detect_images(attacked.images, attacked.image_ids), gts)
    assert adversarial.map50 < clean.map50
