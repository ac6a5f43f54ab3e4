"""HTTP inference service with per-session interactive refinement state.

Sessions live in an in-memory store with TTL eviction. Exactly one request may
be in flight per session (409 on overlap); different sessions proceed in
parallel against the shared frozen model. Masks travel in two byte-exact
formats: row-major run-length encoding with alternating runs starting at value
0, and a base64 PNG.
"""

from __future__ import annotations

import base64
import io
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from PIL import Image
from pydantic import BaseModel

from .data import DatasetManifest, binarize, load_sample
from .errors import ContractError, InputError, UnknownClassError
from .interaction import dice, simulate_click
from .model import ModeRequest, SegModel, binarize_probability
from .prompts import Click, ClickSet

SCHEMA_VERSION = 1
MAX_IMAGE_BYTES = 8 * 1024 * 1024
MAX_IMAGE_PIXELS = 2048 * 2048
DEFAULT_TTL_SECONDS = 3600.0
API_MODES = ("semantic", "incontext", "interactive")


def rle_encode(mask: np.ndarray) -> dict:
    """Row-major RLE: alternating run lengths, first run counts zeros."""
    flat = np.asarray(mask, dtype=np.uint8).ravel()
    if flat.size == 0:
        return {"size": list(mask.shape), "counts": []}
    changes = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], changes, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat[0] == 1:  # first run must describe zeros
        counts = [0] + counts
    return {"size": [int(s) for s in mask.shape], "counts": [int(c) for c in counts]}


def rle_decode(payload: dict) -> np.ndarray:
    h, w = payload["size"]
    out = np.zeros(h * w, dtype=np.uint8)
    pos = 0
    value = 0
    for run in payload["counts"]:
        if value:
            out[pos : pos + run] = 1
        pos += run
        value ^= 1
    return out.reshape(h, w)


def mask_to_png_b64(mask: np.ndarray) -> str:
    img = Image.fromarray((np.asarray(mask, dtype=np.uint8) * 255), mode="L")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def png_b64_to_array(data: str, limit_bytes: int = MAX_IMAGE_BYTES) -> np.ndarray:
    try:
        raw = base64.b64decode(data, validate=True)
    except Exception as exc:
        raise HTTPException(status_code=422, detail=f"image is not valid base64: {exc}") from exc
    if len(raw) > limit_bytes:
        raise HTTPException(status_code=413, detail=f"image exceeds {limit_bytes} bytes")
    try:
        img = Image.open(io.BytesIO(raw))
        img.load()
    except Exception as exc:
        raise HTTPException(status_code=422, detail=f"cannot decode PNG: {exc}") from exc
    if img.width * img.height > MAX_IMAGE_PIXELS:
        raise HTTPException(status_code=413, detail="image has too many pixels")
    return np.asarray(img)


def _mask_payload(mask: np.ndarray) -> dict:
    return {"rle": rle_encode(mask), "png": mask_to_png_b64(mask)}


@dataclass
class Session:
    id: str
    image: np.ndarray  # (H, W, 3) float
    mode: str
    class_id: int | None = None
    support: list | None = None
    gt: np.ndarray | None = None
    clicks: ClickSet = field(default_factory=ClickSet)
    prev_mask: np.ndarray | None = None
    initial_mask: np.ndarray | None = None
    history: list = field(default_factory=list)
    created_at: float = field(default_factory=time.time)
    last_access: float = field(default_factory=time.time)

    @property
    def current_mask(self) -> np.ndarray:
        if self.prev_mask is not None:
            return self.prev_mask
        return self.initial_mask

    def state_doc(self) -> dict:
        mask = self.current_mask
        doc = {
            "schema_version": SCHEMA_VERSION,
            "session_id": self.id,
            "mode": self.mode,
            "class_id": self.class_id,
            "width": int(self.image.shape[1]),
            "height": int(self.image.shape[0]),
            "click_count": len(self.clicks),
            "clicks": [
                {"x": c.x, "y": c.y, "polarity": "positive" if c.polarity > 0 else "negative"}
                for c in self.clicks.clicks
            ],
            "mask": _mask_payload(mask),
            "history": self.history,
        }
        if self.gt is not None:
            doc["dice"] = dice(mask, self.gt)
        return doc


class SessionStore:
    def __init__(self, ttl: float = DEFAULT_TTL_SECONDS):
        self.ttl = ttl
        self._sessions: dict[str, Session] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    def create(self, session: Session) -> None:
        with self._guard:
            self._evict()
            self._sessions[session.id] = session
            self._locks[session.id] = threading.Lock()

    def get(self, session_id: str) -> Session:
        with self._guard:
            self._evict()
            session = self._sessions.get(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id}")
        session.last_access = time.time()
        return session

    def lock(self, session_id: str) -> threading.Lock:
        with self._guard:
            lock = self._locks.get(session_id)
        if lock is None:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id}")
        return lock

    def _evict(self) -> None:
        now = time.time()
        dead = [sid for sid, s in self._sessions.items() if now - s.last_access > self.ttl]
        for sid in dead:
            self._sessions.pop(sid, None)
            self._locks.pop(sid, None)


class CreateSessionBody(BaseModel):
    image: str  # base64 PNG
    mode: str
    class_id: int | None = None
    support_ids: list[int] | None = None
    gt: str | None = None  # base64 PNG binary mask


class ClickBody(BaseModel):
    x: int
    y: int
    polarity: str  # "positive" | "negative"


def create_app(
    model: SegModel,
    manifest: DatasetManifest | None = None,
    ttl: float = DEFAULT_TTL_SECONDS,
    ui_dir: str | Path | None = None,
) -> FastAPI:
    app = FastAPI(title="kprism inference service")
    store = SessionStore(ttl=ttl)
    app.state.store = store
    refs: list[dict] = []
    ref_samples: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    if manifest is not None:
        for i in manifest.indices("train"):
            sample = load_sample(manifest, i, input_size=model.cfg.input_size)
            ref_samples[i] = (sample.image, sample.mask)
            refs.append({"id": i, "classes": sorted(sample.class_ids), "split": "train"})

    def run_forward(session: Session) -> np.ndarray:
        if session.mode == "semantic":
            base_req = ModeRequest(mode="semantic", class_id=session.class_id)
            refine = "refine-semantic"
        elif session.mode == "incontext":
            base_req = ModeRequest(mode="incontext", support=session.support)
            refine = "refine-incontext"
        else:
            base_req = None
            refine = "interactive"
        if len(session.clicks) == 0:
            if base_req is None:
                return np.zeros(session.image.shape[:2], dtype=np.uint8)
            return binarize_probability(model.predict(base_req, session.image)["probability"])
        req = ModeRequest(
            mode=refine,
            class_id=session.class_id if refine == "refine-semantic" else None,
            support=session.support if refine == "refine-incontext" else None,
            clicks=session.clicks,
            prev_mask=session.prev_mask if session.prev_mask is not None else session.initial_mask,
        )
        return binarize_probability(model.predict(req, session.image)["probability"])

    def replay(session: Session) -> None:
        """Recompute the session mask from its click log, round by round."""
        all_clicks = list(session.clicks.clicks)
        session.clicks = ClickSet()
        session.prev_mask = None
        session.initial_mask = run_forward(session)
        for c in all_clicks:
            session.clicks.clicks.append(c)
            mask = run_forward(session)
            session.prev_mask = mask

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "schema_version": SCHEMA_VERSION}

    @app.get("/classes")
    def classes():
        return {
            "schema_version": SCHEMA_VERSION,
            "classes": [{"id": c, "name": n} for c, n in sorted(model.class_names.items())],
        }

    @app.get("/references")
    def references():
        return {"schema_version": SCHEMA_VERSION, "references": refs}

    @app.get("/references/{ref_id}")
    def reference_detail(ref_id: int):
        if ref_id not in ref_samples:
            raise HTTPException(status_code=404, detail=f"unknown reference {ref_id}")
        image, mask = ref_samples[ref_id]
        image8 = np.round(image * 255).astype(np.uint8)
        buf = io.BytesIO()
        Image.fromarray(image8, mode="RGB").save(buf, format="PNG")
        return {
            "schema_version": SCHEMA_VERSION,
            "id": ref_id,
            "classes": sorted({int(v) for v in np.unique(mask) if v > 0}),
            "image": base64.b64encode(buf.getvalue()).decode("ascii"),
        }

    @app.post("/sessions")
    def create_session(body: CreateSessionBody):
        if body.mode not in API_MODES:
            raise HTTPException(status_code=400, detail=f"mode must be one of {API_MODES}")
        arr = png_b64_to_array(body.image)
        if arr.ndim == 2:
            arr = np.stack([arr] * 3, axis=-1)
        image = arr[..., :3].astype(np.float32) / 255.0
        session = Session(id=uuid.uuid4().hex, image=image, mode=body.mode)
        if body.mode == "semantic":
            if body.class_id is None or body.class_id not in model.class_names:
                raise HTTPException(
                    status_code=400,
                    detail={
                        "error": "semantic mode requires a known class_id",
                        "classes": sorted(model.class_names),
                    },
                )
            session.class_id = body.class_id
        if body.mode == "incontext":
            if not body.support_ids or body.class_id is None:
                raise HTTPException(
                    status_code=400,
                    detail="incontext mode requires support_ids and a class_id to binarize",
                )
            support = []
            for sid in body.support_ids:
                if sid not in ref_samples:
                    raise HTTPException(status_code=400, detail=f"unknown support id {sid}")
                ref_img, ref_mask = ref_samples[sid]
                if body.class_id not in set(np.unique(ref_mask).tolist()):
                    raise HTTPException(
                        status_code=400, detail=f"reference {sid} lacks class {body.class_id}"
                    )
                support.append((ref_img, binarize(ref_mask, body.class_id).astype(np.float32)))
            session.support = support
            session.class_id = body.class_id
        if body.gt is not None:
            gt_arr = png_b64_to_array(body.gt)
            if gt_arr.ndim == 3:
                gt_arr = gt_arr[..., 0]
            if gt_arr.shape != image.shape[:2]:
                raise HTTPException(status_code=400, detail="gt mask size differs from image")
            session.gt = (gt_arr > 127).astype(np.uint8)
        try:
            session.initial_mask = run_forward(session)
        except (ContractError, UnknownClassError) as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        store.create(session)
        session.history.append({"clicks": 0, "dice": dice(session.initial_mask, session.gt) if session.gt is not None else None})
        return session.state_doc()

    @app.post("/sessions/{session_id}/clicks")
    def add_click(session_id: str, body: ClickBody):
        session = store.get(session_id)
        lock = store.lock(session_id)
        if not lock.acquire(blocking=False):
            raise HTTPException(status_code=409, detail="session busy")
        try:
            h, w = session.image.shape[:2]
            if body.polarity not in ("positive", "negative"):
                raise HTTPException(status_code=400, detail="polarity must be positive|negative")
            if not (0 <= body.x < w and 0 <= body.y < h):
                raise HTTPException(status_code=400, detail=f"click ({body.x},{body.y}) out of bounds")
            click = Click(
                x=body.x,
                y=body.y,
                polarity=1 if body.polarity == "positive" else -1,
                round=len(session.clicks) + 1,
            )
            session.clicks.clicks.append(click)
            try:
                mask = run_forward(session)
            except (ContractError, InputError) as exc:
                session.clicks.clicks.pop()
                raise HTTPException(status_code=400, detail=str(exc)) from exc
            session.prev_mask = mask
            session.history.append(
                {
                    "clicks": len(session.clicks),
                    "dice": dice(mask, session.gt) if session.gt is not None else None,
                }
            )
            return session.state_doc()
        finally:
            lock.release()

    @app.post("/sessions/{session_id}/undo")
    def undo(session_id: str):
        session = store.get(session_id)
        lock = store.lock(session_id)
        if not lock.acquire(blocking=False):
            raise HTTPException(status_code=409, detail="session busy")
        try:
            if len(session.clicks) == 0:
                raise HTTPException(status_code=409, detail="nothing to undo")
            session.clicks.clicks.pop()
            replay(session)
            session.history.append(
                {
                    "clicks": len(session.clicks),
                    "dice": dice(session.current_mask, session.gt) if session.gt is not None else None,
                }
            )
            return session.state_doc()
        finally:
            lock.release()

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str):
        return store.get(session_id).state_doc()

    @app.get("/sessions/{session_id}/suggest_click")
    def suggest_click(session_id: str):
        session = store.get(session_id)
        if session.gt is None:
            raise HTTPException(status_code=409, detail="session has no ground truth")
        click = simulate_click(session.current_mask, session.gt)
        if click is None:
            return {"schema_version": SCHEMA_VERSION, "done": True}
        return {
            "schema_version": SCHEMA_VERSION,
            "done": False,
            "x": click.x,
            "y": click.y,
            "polarity": "positive" if click.polarity > 0 else "negative",
        }

    @app.exception_handler(ContractError)
    def contract_error_handler(_, exc):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    if ui_dir is not None and Path(ui_dir).exists():
        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")
    return app
