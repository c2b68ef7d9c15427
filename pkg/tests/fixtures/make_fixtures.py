"""Record the API contract and the editor-session fixtures.

Run from the repo root after model or format changes:

    python3 tests/fixtures/make_fixtures.py

Writes ``tests/fixtures/api_contract.json`` (request/response pairs the
contract suite replays bit-exactly) and ``frontend/tests/fixtures/``
(scripted editor session, expected manipulate result, seeded generation
response) consumed by the browser editor's tests.
"""

import base64
import hashlib
import io
import json
import sys
from pathlib import Path

import numpy as np

TESTS_DIR = Path(__file__).resolve().parents[1]
REPO_ROOT = TESTS_DIR.parent
sys.path.insert(0, str(TESTS_DIR))

from fastapi.testclient import TestClient
from PIL import Image

from retinagen import descriptors as dsc
from retinagen.service import ModelRegistry, create_app
from retinagen.synthetic import synth_descriptor_set, synth_fundus, synth_vessel_mask

from pipeline_fixture import SIZE, build_models


def png_b64(arr, mode=None):
    buf = io.BytesIO()
    if arr.ndim == 2:
        Image.fromarray((arr * 255).astype(np.uint8), mode="L").save(buf, format="PNG")
    else:
        Image.fromarray((np.clip(arr, 0, 1) * 255).round().astype(np.uint8)).save(
            buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def tensors_b64(tensors):
    from retinagen.archive import save_archive

    buf = io.BytesIO()
    save_archive(buf, tensors, meta={"format": "retinagen-descriptor-crops", "version": 1})
    return base64.b64encode(buf.getvalue()).decode("ascii")


def main():
    det, gen = build_models()
    registry = ModelRegistry()
    registry.load("detector", det)
    registry.load("generator", gen)
    client = TestClient(create_app(registry))

    image, _, _ = synth_fundus(SIZE, seed=4, n_lesions=3)
    vessels = synth_vessel_mask(SIZE, seed=4)
    image_b64 = png_b64(image)
    vessels_b64 = png_b64(vessels.astype(np.float32))

    # editor-session source: three small descriptors matching the generator's
    # descriptor channel widths
    dset = synth_descriptor_set(SIZE, [(14, 18), (30, 40), (48, 22)],
                                channels=(16, 32), box=8, seed=9,
                                image_id="editor-sample")
    doc, tensors = dsc.descriptor_set_to_json(dset)
    crops_b64 = tensors_b64(tensors)

    cases = []

    def record(name, method, path, request, resp):
        cases.append({"name": name, "method": method, "path": path,
                      "request": request, "status": resp.status_code,
                      "response": resp.json()})

    record("models", "GET", "/models", None, client.get("/models"))
    record("severity", "POST", "/severity", {"image_png_b64": image_b64},
           client.post("/severity", json={"image_png_b64": image_b64}))
    extract_req = {"image_png_b64": image_b64, "image_id": "sample"}
    record("extract", "POST", "/extract", extract_req,
           client.post("/extract", json=extract_req))
    gen_req = {"vessel_png_b64": vessels_b64, "descriptors": doc,
               "tensors_b64": crops_b64, "seed": 7}
    gen_resp = client.post("/generate", json=gen_req)
    record("generate", "POST", "/generate", gen_req, gen_resp)
    empty_req = {"vessel_png_b64": vessels_b64,
                 "descriptors": {"schema_version": 1, "image_id": "",
                                 "image_size": SIZE, "tensor_archive": None,
                                 "descriptors": []},
                 "tensors_b64": "", "seed": 3}
    record("generate_empty", "POST", "/generate", empty_req,
           client.post("/generate", json=empty_req))

    contract_path = TESTS_DIR / "fixtures" / "api_contract.json"
    contract_path.write_text(json.dumps({"schema_version": 1, "cases": cases},
                                        indent=2, sort_keys=True) + "\n")
    print(f"wrote {contract_path}")

    # scripted editor session: drag, duplicate, remove; the expected result is
    # the library-side manipulation of the same script
    script = [
        {"op": "drag", "id": 0, "dx": 4, "dy": -2},
        {"op": "duplicate", "id": 1, "left": 6, "top": 44},
        {"op": "remove", "id": 2},
    ]
    edited = dset
    for op in script:
        if op["op"] == "drag":
            d = edited.get(op["id"])
            edited = dsc.relocate(edited, op["id"], d.box.left + op["dx"],
                                  d.box.top + op["dy"])
        elif op["op"] == "duplicate":
            edited = dsc.clone_remove(edited, [("clone", op["id"], op["left"], op["top"])])
        else:
            edited = dsc.clone_remove(edited, [("remove", op["id"])])
    expected_doc, _ = dsc.descriptor_set_to_json(edited)

    ui_gen_req = {"vessel_png_b64": vessels_b64, "descriptors": expected_doc,
                  "tensors_b64": crops_b64, "seed": 7}
    ui_gen_resp = client.post("/generate", json=ui_gen_req)
    assert ui_gen_resp.status_code == 200, ui_gen_resp.text
    image_hash = hashlib.sha256(
        ui_gen_resp.json()["image_png_b64"].encode("ascii")).hexdigest()

    ui_dir = REPO_ROOT / "frontend" / "tests" / "fixtures"
    ui_dir.mkdir(parents=True, exist_ok=True)
    (ui_dir / "initial_descriptors.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n")
    (ui_dir / "session_script.json").write_text(
        json.dumps(script, indent=2) + "\n")
    (ui_dir / "expected_descriptors.json").write_text(
        json.dumps(expected_doc, indent=2, sort_keys=True) + "\n")
    (ui_dir / "generate_fixture.json").write_text(json.dumps({
        "request": ui_gen_req, "response": ui_gen_resp.json(),
        "response_image_sha256": image_hash}, indent=2, sort_keys=True) + "\n")
    print(f"wrote fixtures under {ui_dir}")


if __name__ == "__main__":
    main()
