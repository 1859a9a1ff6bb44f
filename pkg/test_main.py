import time

import pytest
from fastapi.testclient import TestClient

from conftest import CATEGORIES, TINY, TINY_SUITE_CONF, random_image
from main import VERSION, app
from mini_vlm import build_model, save_model
from pnm import read_pgm, write_ppm

TINY_CONF = "window = 32\nstride = 16\n"


@pytest.fixture
def client():
    return TestClient(app)


@pytest.fixture
def files(tmp_path):
    (tmp_path / 'tiny.conf').write_text(TINY_CONF, encoding='utf-8')
    save_model(build_model(TINY), str(tmp_path / 'model.bin'))
    write_ppm(tmp_path / 'img.ppm', random_image(4, size=40))
    return tmp_path


def test_health(client):
    response = client.get('/health')
    assert response.status_code == 200
    body = response.json()
    assert body['status'] == 'healthy'
    assert body['version'] == VERSION


def test_static_segment(client, files):
    response = client.post('/segment', json={
        'image': str(files / 'img.ppm'),
        'categories': CATEGORIES,
        'out': str(files / 'pred.pgm'),
        'config': str(files / 'tiny.conf'),
        'model': str(files / 'model.bin'),
        'static': True,
    })
    assert response.status_code == 200
    body = response.json()
    assert body['mode'] == 'static' and body['windows'] == 4 and body['trainables'] == 0
    assert tuple(read_pgm(files / 'pred.pgm').shape) == (40, 40)


def test_segment_without_synonyms_is_rejected(client, files):
    response = client.post('/segment', json={
        'image': str(files / 'img.ppm'),
        'categories': CATEGORIES,
        'out': str(files / 'pred.pgm'),
    })
    assert response.status_code == 422


def test_segment_with_a_bad_image_is_rejected(client, files):
    (files / 'junk.ppm').write_bytes(b'junk')
    response = client.post('/segment', json={
        'image': str(files / 'junk.ppm'),
        'categories': CATEGORIES,
        'out': str(files / 'pred.pgm'),
        'config': str(files / 'tiny.conf'),
        'model': str(files / 'model.bin'),
        'static': True,
    })
    assert response.status_code == 422


def test_suite_runs_in_a_background_thread(client, tmp_path):
    config = tmp_path / 'suite.conf'
    config.write_text(TINY_SUITE_CONF, encoding='utf-8')
    out = tmp_path / 'out'
    response = client.post('/suite', json={'out': str(out), 'config': str(config)})
    assert response.status_code == 200
    body = response.json()
    assert body['success'] is True
    assert body['message'] == "Suite started directly"
    deadline = time.monotonic() + 60
    while not (out / 'summary.txt').exists() and time.monotonic() < deadline:
        time.sleep(0.2)
    assert (out / 'summary.txt').exists()
    assert (out / 'scenes.csv').exists()
