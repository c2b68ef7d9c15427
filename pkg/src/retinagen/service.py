"""HTTP API over the extraction/generation/manipulation pipeline.

Single-model-in-memory design: one registry holds at most one model per
role and inference is serialized per model through a lock, so concurrent
clients queue instead of contending.  Images travel as base64 PNG inside
JSON; descriptor crops travel as a base64 named-tensor archive next to the
descriptor JSON document.
"""

from __future__ import annotations

import base64
import io
import threading
import uuid

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from . import activation, descriptors, detector, gan
from .archive import ModelCheckpoint, load_archive, save_archive
from .errors import NumericError

SCHEMA_VERSION = 1


class ModelNotLoaded(RuntimeError):
    pass


class ModelRegistry:
    """Loaded models keyed by role, each with its own inference lock."""

    _builders = {
        "detector": detector.detector_from_checkpoint,
        "generator": gan.generator_from_checkpoint,
        "discriminator": gan.discriminator_from_checkpoint,
    }

    def __init__(self):
        self._models = {}
        self._locks = {}

    def load(self, name, model):
        if isinstance(model, ModelCheckpoint):
            model = self._builders[name](model)
        self._models[name] = model
        self._locks[name] = threading.Lock()
        return model

    def get(self, name):
        if name not in self._models:
            raise ModelNotLoaded(f"model {name!r} is not loaded")
        return self._models[name]

    def lock(self, name):
        return self._locks[name]

    def info(self):
        out = []
        for name, model in self._models.items():
            out.append({"name": name, "kind": name,
                        "config": model.config.to_dict()})
        return out


def _decode_image(b64):
    from PIL import Image

    try:
        data = base64.b64decode(b64)
        with Image.open(io.BytesIO(data)) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except Exception as exc:
        raise ValueError(f"cannot decode PNG payload: {exc}") from exc


def _decode_mask(b64):
    from PIL import Image

    try:
        data = base64.b64decode(b64)
        with Image.open(io.BytesIO(data)) as im:
            arr = np.asarray(im.convert("L"))
    except Exception as exc:
        raise ValueError(f"cannot decode PNG payload: {exc}") from exc
    return (arr > 127).astype(np.float32) if arr.max() > 1 else arr.astype(np.float32)


def _encode_image(arr):
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray((np.clip(arr, 0.0, 1.0) * 255).round().astype(np.uint8)).save(
        buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _encode_tensors(tensors):
    buf = io.BytesIO()
    save_archive(buf, tensors, meta={"format": "retinagen-descriptor-crops",
                                     "version": SCHEMA_VERSION})
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _decode_tensors(b64):
    if not b64:
        return {}
    try:
        tensors, _ = load_archive(io.BytesIO(base64.b64decode(b64)))
    except Exception as exc:
        raise ValueError(f"cannot decode tensor archive: {exc}") from exc
    return tensors


class SeverityRequest(BaseModel):
    image_png_b64: str


class ExtractRequest(BaseModel):
    image_png_b64: str
    image_id: str = ""


class GenerateRequest(BaseModel):
    vessel_png_b64: str
    descriptors: dict
    tensors_b64: str = ""
    seed: int = 0


def create_app(registry: ModelRegistry) -> FastAPI:
    app = FastAPI(title="retinagen", version="0.1.0")

    @app.exception_handler(RequestValidationError)
    async def _bad_payload(request: Request, exc):
        return JSONResponse(status_code=400,
                            content={"error": "malformed payload", "detail": exc.errors()})

    @app.exception_handler(ModelNotLoaded)
    async def _not_loaded(request: Request, exc):
        return JSONResponse(status_code=409, content={"error": str(exc)})

    @app.exception_handler(NumericError)
    async def _numeric(request: Request, exc):
        trace_id = uuid.uuid4().hex
        return JSONResponse(status_code=500,
                            content={"error": str(exc), "trace_id": trace_id})

    @app.exception_handler(ValueError)
    async def _value_error(request: Request, exc):
        return JSONResponse(status_code=400, content={"error": str(exc)})

    @app.exception_handler(KeyError)
    async def _key_error(request: Request, exc):
        return JSONResponse(status_code=400,
                            content={"error": f"unknown reference {exc}"})

    @app.get("/models")
    def models():
        return {"schema_version": SCHEMA_VERSION, "models": registry.info()}

    @app.post("/severity")
    def severity(req: SeverityRequest):
        model = registry.get("detector")
        image = _decode_image(req.image_png_b64)
        with registry.lock("detector"):
            score = detector.predict_severity(image, model)
        return {"schema_version": SCHEMA_VERSION, "severity": score}

    @app.post("/extract")
    def extract(req: ExtractRequest):
        model = registry.get("detector")
        image = _decode_image(req.image_png_b64)
        with registry.lock("detector"):
            feats = detector.forward_features(image, model)
            net = activation.build_activation_net(model)
            stack = activation.project(feats, net, keep="taps")
        boxes = descriptors.locate_lesions(stack.scalar_map(0))
        dset = descriptors.extract_descriptors(stack, boxes, image_id=req.image_id)
        doc, tensors = descriptors.descriptor_set_to_json(dset)
        return {"schema_version": SCHEMA_VERSION, "descriptors": doc,
                "tensors_b64": _encode_tensors(tensors)}

    @app.post("/generate")
    def generate(req: GenerateRequest):
        model = registry.get("generator")
        vessels = _decode_mask(req.vessel_png_b64)
        dset = descriptors.descriptor_set_from_json(req.descriptors,
                                                    _decode_tensors(req.tensors_b64))
        z = gan.sample_noise(dim=model.config.noise_dim, seed=req.seed)
        with registry.lock("generator"):
            image = gan.generate(vessels, dset, z, model)
        return {"schema_version": SCHEMA_VERSION, "seed": req.seed,
                "image_png_b64": _encode_image(image)}

    return app
