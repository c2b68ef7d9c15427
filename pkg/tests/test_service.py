import base64
import hashlib
import io
import json
from pathlib import Path

import numpy as np
import pytest
from fastapi.testclient import TestClient

from retinagen.service import ModelRegistry, create_app

from pipeline_fixture import SIZE, build_models

FIXTURE_DIR = Path(__file__).parent / "fixtures"


def _png_b64(arr):
    from PIL import Image

    buf = io.BytesIO()
    if arr.ndim == 2:
        Image.fromarray((arr * 255).astype(np.uint8), mode="L").save(buf, format="PNG")
    else:
        Image.fromarray((np.clip(arr, 0, 1) * 255).round().astype(np.uint8)).save(
            buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


@pytest.fixture(scope="module")
def client():
    det, gen = build_models()
    registry = ModelRegistry()
    registry.load("detector", det)
    registry.load("generator", gen)
    return TestClient(create_app(registry))


@pytest.fixture(scope="module")
def sample_payloads(rng_module=None):
    from retinagen.synthetic import synth_fundus, synth_vessel_mask

    image, _, _ = synth_fundus(SIZE, seed=4, n_lesions=3)
    vessels = synth_vessel_mask(SIZE, seed=4)
    return {"image_b64": _png_b64(image), "vessels_b64": _png_b64(vessels.astype(np.float32))}


def test_models_endpoint(client):
    body = client.get("/models").json()
    assert body["schema_version"] == 1
    names = {m["name"] for m in body["models"]}
    assert names == {"detector", "generator"}


def test_severity_endpoint(client, sample_payloads):
    resp = client.post("/severity", json={"image_png_b64": sample_payloads["image_b64"]})
    assert resp.status_code == 200
    assert isinstance(resp.json()["severity"], float)


def test_extract_then_generate_roundtrip(client, sample_payloads):
    ext = client.post("/extract", json={"image_png_b64": sample_payloads["image_b64"],
                                        "image_id": "sample"})
    assert ext.status_code == 200
    doc = ext.json()["descriptors"]
    assert doc["image_size"] == SIZE

    gen = client.post("/generate", json={
        "vessel_png_b64": sample_payloads["vessels_b64"],
        "descriptors": doc,
        "tensors_b64": ext.json()["tensors_b64"],
        "seed": 7})
    assert gen.status_code == 200
    from PIL import Image

    img = Image.open(io.BytesIO(base64.b64decode(gen.json()["image_png_b64"])))
    assert img.size == (SIZE, SIZE)


def test_generate_with_empty_descriptors(client, sample_payloads):
    resp = client.post("/generate", json={
        "vessel_png_b64": sample_payloads["vessels_b64"],
        "descriptors": {"schema_version": 1, "image_id": "", "image_size": SIZE,
                        "tensor_archive": None, "descriptors": []},
        "seed": 3})
    assert resp.status_code == 200
    assert resp.json()["seed"] == 3


def test_generate_is_deterministic_per_seed(client, sample_payloads):
    payload = {"vessel_png_b64": sample_payloads["vessels_b64"],
               "descriptors": {"schema_version": 1, "image_id": "", "image_size": SIZE,
                               "tensor_archive": None, "descriptors": []},
               "seed": 11}
    a = client.post("/generate", json=payload).json()["image_png_b64"]
    b = client.post("/generate", json=payload).json()["image_png_b64"]
    assert a == b


def test_model_not_loaded_is_409(sample_payloads):
    empty = TestClient(create_app(ModelRegistry()), raise_server_exceptions=False)
    resp = empty.post("/severity", json={"image_png_b64": sample_payloads["image_b64"]})
    assert resp.status_code == 409


def test_malformed_payload_is_400(client):
    resp = client.post("/severity", json={"wrong_field": "zzz"})
    assert resp.status_code == 400
    assert resp.json()["error"] == "malformed payload"


def test_invalid_image_bytes_is_400(client):
    resp = client.post("/severity", json={"image_png_b64": "bm90IGEgcG5n"})
    assert resp.status_code == 400


# -- recorded contract fixtures ------------------------------------------

def _fixture_cases():
    path = FIXTURE_DIR / "api_contract.json"
    if not path.exists():
        return []
    return json.loads(path.read_text())["cases"]


@pytest.mark.parametrize("case", _fixture_cases(),
                         ids=[c["name"] for c in _fixture_cases()])
def test_contract_replay(client, case):
    """Recorded request/response pairs replay bit-exactly for JSON bodies."""
    if case["method"] == "GET":
        resp = client.get(case["path"])
    else:
        resp = client.post(case["path"], json=case["request"])
    assert resp.status_code == case["status"]
    assert json.dumps(resp.json(), sort_keys=True) == \
        json.dumps(case["response"], sort_keys=True)


def test_contract_fixtures_exist():
    assert (FIXTURE_DIR / "api_contract.json").exists(), \
        "run tests/fixtures/make_fixtures.py to record the API contract"
