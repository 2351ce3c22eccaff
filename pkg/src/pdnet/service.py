"""HTTP inference service: click-to-measure over a loaded checkpoint pair,
plus dataset browsing endpoints for the UI."""

from __future__ import annotations

import base64
import io
import uuid
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Query
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import Response
from pydantic import BaseModel
from PIL import Image

from . import data as data_mod
from . import geometry, pipeline
from .geometry import Point2D
from .model import load_checkpoint

MODEL_VERSION = "pdnet-0.1.0"


class MeasureRequest(BaseModel):
    image_id: str | None = None
    slice_b16: str | None = None  # base64 of 16-bit little-endian HU+32768
    width: int | None = None
    height: int | None = None
    spacing_mm: float | None = None
    click: tuple[float, float]


class MeasureResponse(BaseModel):
    mask_rle: list[int]
    width: int
    height: int
    recist: dict
    long_mm: float
    short_mm: float
    loi: dict
    stage1_mask_rle: list[int] | None = None
    model_version: str = MODEL_VERSION


def create_app(ckpt1: Path | str, ckpt2: Path | str,
               index_dir: Path | str | None = None,
               debug_stage1: bool = False) -> FastAPI:
    app = FastAPI(title="pdnet measure service")
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["*"], allow_headers=["*"])
    model1, _ = load_checkpoint(ckpt1)
    model2, _ = load_checkpoint(ckpt2)
    index = data_mod.DatasetIndex.load(Path(index_dir)) if index_dir else None

    def resolve_slice(req: MeasureRequest):
        if (req.image_id is None) == (req.slice_b16 is None):
            raise HTTPException(400, "provide exactly one of image_id / slice_b16")
        if req.image_id is not None:
            if index is None:
                raise HTTPException(404, "no dataset index configured")
            try:
                rec = index.by_id(req.image_id)
            except KeyError:
                raise HTTPException(404, f"unknown image_id {req.image_id}")
            sl = data_mod.load_slice(rec.image_path, rec.spacing_mm, rec.id)
            return data_mod.window_normalize(sl.pixels), rec.spacing_mm
        if not (req.width and req.height and req.spacing_mm):
            raise HTTPException(400, "inline payload requires width/height/spacing_mm")
        raw = np.frombuffer(base64.b64decode(req.slice_b16), dtype="<u2")
        if raw.size != req.width * req.height:
            raise HTTPException(400, "payload size mismatch")
        hu = raw.astype(np.int32).reshape(req.height, req.width) - data_mod.HU_OFFSET
        return data_mod.window_normalize(hu), req.spacing_mm

    @app.post("/api/measure", response_model=MeasureResponse)
    def measure(req: MeasureRequest):
        img, spacing = resolve_slice(req)
        h, w = img.shape
        x, y = req.click
        if not (0 <= x < w and 0 <= y < h):
            raise HTTPException(400, f"click ({x}, {y}) out of bounds")
        try:
            result = pipeline.infer_two_stage_loaded(
                img, Point2D(x, y), model1, model2, spacing)
        except pipeline.PipelineError as e:
            if "no lesion" in str(e):
                raise HTTPException(422, "no lesion at click")
            raise HTTPException(500, f"inference failed [{uuid.uuid4().hex[:8]}]")
        return MeasureResponse(
            mask_rle=geometry.encode_rle(result.mask),
            width=w, height=h,
            recist=result.recist.to_json(),
            long_mm=result.recist.long_mm,
            short_mm=result.recist.short_mm,
            loi=result.loi.to_json(),
            stage1_mask_rle=(geometry.encode_rle(result.stage1_mask)
                             if debug_stage1 else None))

    @app.get("/api/images")
    def list_images():
        if index is None:
            return []
        out = []
        for rec in index.records:
            with Image.open(rec.image_path) as im:
                w, h = im.size
            out.append({"id": rec.id, "width": w, "height": h,
                        "spacing_mm": rec.spacing_mm, "split": rec.split})
        return out

    @app.get("/api/images/{image_id}")
    def get_image(image_id: str,
                  lo: float = Query(data_mod.DEFAULT_WINDOW[0]),
                  hi: float = Query(data_mod.DEFAULT_WINDOW[1])):
        if index is None:
            raise HTTPException(404, "no dataset index configured")
        try:
            rec = index.by_id(image_id)
        except KeyError:
            raise HTTPException(404, f"unknown image_id {image_id}")
        if lo >= hi:
            raise HTTPException(400, "window lo must be below hi")
        sl = data_mod.load_slice(rec.image_path, rec.spacing_mm, rec.id)
        img8 = np.round(data_mod.window_normalize(sl.pixels, lo, hi) * 255)
        buf = io.BytesIO()
        Image.fromarray(img8.astype(np.uint8)).save(buf, format="PNG")
        return Response(buf.getvalue(), media_type="image/png")

    return app
