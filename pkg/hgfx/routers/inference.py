import base64
import binascii

import numpy as np
from fastapi import APIRouter, HTTPException

from hgfx.models import GraphExport, ImageRequest, ModelInfoResponse, PredictResponse, ScanExport
from hgfx.registry import LoadedModel, get_model
from hgfx.services.datasets import conform_channels, decode_image
from hgfx.services.graph_reason import image_adjacency, image_scan_plan
from hgfx.services.patch_embed import ImageSample
from hgfx.services.trainer import predict_proba

router = APIRouter()


def _require_model() -> LoadedModel:
    loaded = get_model()
    if loaded is None:
        raise HTTPException(status_code=503, detail="No model loaded; set HGFX_CHECKPOINT")
    return loaded


def _decode_request(body: ImageRequest, loaded: LoadedModel) -> ImageSample:
    try:
        blob = base64.b64decode(body.image, validate=True)
    except (binascii.Error, ValueError):
        raise HTTPException(status_code=422, detail="image: not valid base64")
    pixels = conform_channels(decode_image(blob), loaded.run_config.model.channels)
    return ImageSample(pixels, name="request")


@router.get("/model")
def model_info() -> ModelInfoResponse:
    loaded = _require_model()
    cfg = loaded.run_config.model
    return ModelInfoResponse(
        ablation=cfg.ablation,
        hetero_graph=cfg.hetero_graph,
        adaptive_scan=cfg.adaptive_scan,
        hetero_learning=cfg.hetero_learning,
        blocks=cfg.blocks,
        n_nodes=cfg.n_nodes,
        parameters=loaded.model.parameter_count(),
        parameters_mb=loaded.model.parameter_megabytes(),
        class_names=loaded.class_names,
    )


@router.post("/inference/predict")
def predict(body: ImageRequest) -> PredictResponse:
    loaded = _require_model()
    img = _decode_request(body, loaded)
    probs = predict_proba(loaded.model, img.pixels[None])[0]
    label = int(np.argmax(probs))
    names = loaded.class_names
    return PredictResponse(
        label=label,
        class_name=names[label] if names and label < len(names) else None,
        probabilities=[float(p) for p in probs],
    )


@router.post("/inference/scan")
def scan(body: ImageRequest) -> ScanExport:
    loaded = _require_model()
    plan = image_scan_plan(_decode_request(body, loaded), loaded.model)
    return ScanExport(**plan.to_export())


@router.post("/inference/graph")
def graph(body: ImageRequest) -> GraphExport:
    loaded = _require_model()
    adj = image_adjacency(_decode_request(body, loaded), loaded.model)
    return GraphExport(**adj.to_export())
