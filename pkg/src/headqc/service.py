"""HTTP interface for the inspection UI.

Serves persisted superimposition batches, composite series views, and the
annotation endpoint over a pipeline output directory. Slice payloads are
compact little-endian binary arrays with a JSON descriptor in the
X-Array-Meta response header (dims, dtype tag, value range); the UI applies
its own windowing and colormaps.
"""

from __future__ import annotations

import json
from functools import lru_cache
from pathlib import Path
import numpy as np
from fastapi import FastAPI, HTTPException, Response
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, Field

from .superimpose import AnnotationLog, load_batch, record_annotation
from .volume import apply_window, load_mask, load_volume

DEFAULT_WINDOW_CENTER = 40.0
DEFAULT_WINDOW_WIDTH = 80.0


class AnnotationBody(BaseModel):
    batch_id: str
    series_id: str
    voxel: tuple[int, int, int]
    verdict: str = Field(pattern="^(accept|reject)$")
    comment: str = ""
    inspector: str = "ui"


class DataStore:
    """Read access to a pipeline out-dir plus the single annotation writer."""

    def __init__(self, data_dir: str | Path):
        self.data_dir = Path(data_dir)
        self.log = AnnotationLog(self.data_dir / "annotations.jsonl")
        index_path = self.data_dir / "series_index.json"
        self.series_index: dict = (
            json.loads(index_path.read_text()) if index_path.exists() else {}
        )

    def batch_ids(self) -> list[str]:
        return sorted(
            p.name.removesuffix(".members.json")
            for p in (self.data_dir / "batches").glob("*.members.json")
        )

    @lru_cache(maxsize=16)
    def batch(self, batch_id: str):
        try:
            return load_batch(self.data_dir / "batches", batch_id)
        except FileNotFoundError:
            raise HTTPException(status_code=404, detail=f"unknown batch {batch_id!r}")

    @lru_cache(maxsize=256)
    def mask(self, series_id: str):
        entry = self.series_index.get(series_id)
        if entry is None:
            raise HTTPException(status_code=404, detail=f"unknown series {series_id!r}")
        return load_mask(self.data_dir / entry["mask"], source_series_id=series_id)

    @lru_cache(maxsize=64)
    def registered(self, series_id: str):
        entry = self.series_index.get(series_id)
        if entry is None:
            raise HTTPException(status_code=404, detail=f"unknown series {series_id!r}")
        return load_volume(self.data_dir / entry["registered"], series_id=series_id)

    @lru_cache(maxsize=4)
    def template(self, template_id: str):
        return load_volume(
            self.data_dir / "templates" / f"{template_id}.nii.gz", series_id=template_id
        )


def _array_response(payload: np.ndarray, meta: dict) -> Response:
    body = np.ascontiguousarray(payload).tobytes()
    return Response(
        content=body,
        media_type="application/octet-stream",
        headers={"X-Array-Meta": json.dumps(meta)},
    )


def create_app(data_dir: str | Path, read_only: bool = False) -> FastAPI:
    store = DataStore(data_dir)
    app = FastAPI(title="headqc inspection API")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
        expose_headers=["X-Array-Meta"],
    )
    app.state.store = store

    @app.get("/batches")
    def list_batches() -> list[dict]:
        out = []
        for batch_id in store.batch_ids():
            batch = store.batch(batch_id)
            out.append(
                {
                    "batch_id": batch_id,
                    "member_count": len(batch.members),
                    "z_extent": int(batch.dims[2]),
                }
            )
        return out

    @app.get("/batches/{batch_id}/slice/{z}")
    def batch_slice(batch_id: str, z: int) -> Response:
        batch = store.batch(batch_id)
        if not 0 <= z < batch.dims[2]:
            raise HTTPException(status_code=400, detail=f"z={z} outside [0, {batch.dims[2]})")
        plane = batch.count_volume[:, :, z].astype("<u2")
        meta = {
            "dims": [batch.dims[0], batch.dims[1]],
            "dtype": "uint16",
            "range": [int(plane.min()), int(plane.max())],
            "members": len(batch.members),
        }
        return _array_response(plane, meta)

    @app.get("/batches/{batch_id}/voxel/{x}/{y}/{z}")
    def batch_voxel(batch_id: str, x: int, y: int, z: int) -> dict:
        batch = store.batch(batch_id)
        try:
            batch._check_bounds((x, y, z))
        except IndexError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        # Attribution is reconstructed from the per-series masks on disk.
        series_ids = [
            sid for sid in batch.members if bool(store.mask(sid).data[x, y, z])
        ]
        return {"series_ids": series_ids}

    @app.get("/series/{series_id}/slice/{z}")
    def series_slice(
        series_id: str,
        z: int,
        view: str = "registered",
        wc: float = DEFAULT_WINDOW_CENTER,
        ww: float = DEFAULT_WINDOW_WIDTH,
    ) -> Response:
        if view not in ("registered", "mask_on_template"):
            raise HTTPException(status_code=400, detail=f"unknown view {view!r}")
        entry = store.series_index.get(series_id)
        if entry is None:
            raise HTTPException(status_code=404, detail=f"unknown series {series_id!r}")

        if view == "registered":
            volume = store.registered(series_id)
            if not 0 <= z < volume.dims[2]:
                raise HTTPException(
                    status_code=400, detail=f"z={z} outside [0, {volume.dims[2]})"
                )
            plane = apply_window(volume.data[:, :, z], wc, ww)
            meta = {
                "dims": [volume.dims[0], volume.dims[1]],
                "planes": ["registered"],
                "dtype": "uint8",
                "range": [0, 255],
                "window": [wc, ww],
            }
            return _array_response(plane, meta)

        template = store.template(entry["template_id"])
        mask = store.mask(series_id)
        if not 0 <= z < template.dims[2]:
            raise HTTPException(
                status_code=400, detail=f"z={z} outside [0, {template.dims[2]})"
            )
        t_plane = template.data[:, :, z]
        t_lo = float(np.min(template.data))
        t_hi = float(np.max(template.data))
        grayscale = apply_window(t_plane, (t_lo + t_hi) / 2.0, max(t_hi - t_lo, 1e-6))
        composite = np.stack([grayscale, mask.data[:, :, z].astype(np.uint8)])
        meta = {
            "dims": [template.dims[0], template.dims[1]],
            "planes": ["template", "mask"],
            "dtype": "uint8",
            "range": [0, 255],
        }
        return _array_response(composite, meta)

    @app.post("/annotations", status_code=201)
    def post_annotation(body: AnnotationBody) -> dict:
        if read_only:
            raise HTTPException(status_code=403, detail="service is in read-only mode")
        batch = store.batch(body.batch_id)
        if body.series_id not in batch.members:
            raise HTTPException(
                status_code=404,
                detail=f"series {body.series_id!r} is not a member of {body.batch_id!r}",
            )
        try:
            annotation = record_annotation(
                store.log,
                batch,
                body.series_id,
                body.voxel,
                body.verdict,
                comment=body.comment,
                inspector=body.inspector,
            )
        except IndexError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return json.loads(annotation.to_json())

    return app
