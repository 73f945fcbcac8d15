"""HTTP service exposing the inpainting prior.

Endpoints speak the RFTN binary tensor protocol (see `wire`): request and
response bodies are concatenated tensors plus an optional JSON trailer.
Malformed tensors get a 400 describing the expected header; model errors
get a 500. Personalization jobs hold the single model lock, so /denoise
and /inpaint answer 503 while an adapter is training.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import threading
import time
import uuid
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch
from fastapi import FastAPI, File, Form, HTTPException, Request, UploadFile
from fastapi.responses import JSONResponse, Response
from PIL import Image

from .model import PROMPTS, InpaintPrior, ModelConfig
from .personalize import PersonalizeConfig, personalize
from .wire import WireFormatError, pack_body, unpack_body

log = logging.getLogger("prior_server")

HEADER_HELP = ('expected per-tensor header: magic "RFTN", u8 dtype (0 = '
               "float32), u8 rank (1..4), u16 reserved, four u32 dims, all "
               "little-endian, followed by float32 data")


class ServerState:
    def __init__(self, model: InpaintPrior, weights_dir: Path):
        self.model = model
        self.weights_dir = weights_dir
        self.lock = threading.Lock()   # exclusive model access during training
        self.jobs: dict[str, dict] = {}


def _parse_body(body: bytes, n_min: int, n_max: int, what: str):
    try:
        tensors, trailer = unpack_body(body)
    except WireFormatError as exc:
        raise HTTPException(400, f"{exc}; {HEADER_HELP}")
    if not n_min <= len(tensors) <= n_max:
        raise HTTPException(400, f"{what} expects {n_min}..{n_max} tensors, "
                                 f"got {len(tensors)}; {HEADER_HELP}")
    return tensors, trailer or {}


def _tensor_response(tensors) -> Response:
    return Response(pack_body(tensors), media_type="application/octet-stream")


def create_app(model: InpaintPrior | None = None,
               weights_dir: str | Path | None = None) -> FastAPI:
    model = model or InpaintPrior(ModelConfig())
    weights_dir = Path(weights_dir) if weights_dir else Path("adapters")
    weights_dir.mkdir(parents=True, exist_ok=True)
    state = ServerState(model, weights_dir)
    app = FastAPI(title="prior-server")
    app.state.server = state

    def _acquire_model():
        if not state.lock.acquire(blocking=False):
            raise HTTPException(503, "model busy: personalization in progress")
        return state.lock

    @app.post("/encode")
    async def encode(request: Request):
        tensors, _ = _parse_body(await request.body(), 1, 1, "/encode")
        (image,) = tensors
        if image.ndim != 3 or image.shape[2] != 3:
            raise HTTPException(400, f"/encode expects an (H, W, 3) image, got {image.shape}")
        try:
            z = model.encode_image(image)
        except ValueError as exc:
            raise HTTPException(400, str(exc))
        return _tensor_response([z])

    @app.post("/decode")
    async def decode(request: Request):
        tensors, _ = _parse_body(await request.body(), 1, 1, "/decode")
        (z,) = tensors
        c = model.cfg.latent_channels
        if z.ndim != 3 or z.shape[0] != c:
            raise HTTPException(400, f"/decode expects a ({c}, h, w) latent, got {z.shape}")
        return _tensor_response([model.decode_latent(z)])

    @app.post("/encode_vjp")
    async def encode_vjp(request: Request):
        # The codec is a permutation, so its adjoint is the decoder.
        tensors, _ = _parse_body(await request.body(), 1, 1, "/encode_vjp")
        (g,) = tensors
        c = model.cfg.latent_channels
        if g.ndim != 3 or g.shape[0] != c:
            raise HTTPException(400, f"/encode_vjp expects a ({c}, h, w) gradient, got {g.shape}")
        return _tensor_response([model.decode_latent(g)])

    def _latent_mask(mask: np.ndarray, h: int, w: int) -> np.ndarray:
        if mask.shape == (h, w):
            return mask
        if mask.shape[0] % h == 0 and mask.shape[0] // h == mask.shape[1] // w:
            k = mask.shape[0] // h
            t = torch.as_tensor(mask, dtype=torch.float32)
            return torch.nn.functional.max_pool2d(t.unsqueeze(0), k).squeeze(0).numpy()
        raise HTTPException(400, f"mask shape {mask.shape} incompatible with latent ({h}, {w})")

    @app.post("/denoise")
    async def denoise(request: Request):
        start = time.perf_counter()
        tensors, trailer = _parse_body(await request.body(), 1, 3, "/denoise")
        z_t = tensors[0]
        if z_t.ndim != 3:
            raise HTTPException(400, f"/denoise expects a rank-3 z_t, got rank {z_t.ndim}")
        t = float(trailer.get("t", 0.5))
        guidance = float(trailer.get("guidance", 0.0))
        tag = trailer.get("prompt_tag", "global")
        if tag not in PROMPTS:
            raise HTTPException(400, f"unknown prompt_tag {tag!r}; use one of {sorted(PROMPTS)}")
        mask = masked_latent = None
        if len(tensors) == 3:
            mask = _latent_mask(tensors[1], z_t.shape[1], z_t.shape[2])
            masked_latent = tensors[2]
            if masked_latent.shape != z_t.shape:
                raise HTTPException(400, f"masked latent shape {masked_latent.shape} "
                                         f"!= z_t shape {z_t.shape}")
        elif len(tensors) == 2:
            raise HTTPException(400, "/denoise takes z_t alone or z_t + mask + masked latent")
        lock = _acquire_model()
        try:
            eps = model.denoise(z_t, t, mask, masked_latent, tag, guidance)
        except Exception as exc:
            raise HTTPException(500, f"denoise failed: {exc}")
        finally:
            lock.release()
        log.info("/denoise z_t=%s t=%.4f guidance=%.3f tag=%s latency=%.1fms",
                 tuple(z_t.shape), t, guidance, tag,
                 1e3 * (time.perf_counter() - start))
        return _tensor_response([eps])

    @app.post("/inpaint")
    async def inpaint(request: Request):
        body = await request.body()
        tensors, trailer = _parse_body(body, 2, 2, "/inpaint")
        image, mask = tensors
        if image.ndim != 3 or image.shape[2] != 3:
            raise HTTPException(400, f"/inpaint expects an (H, W, 3) image, got {image.shape}")
        if mask.shape != image.shape[:2]:
            raise HTTPException(400, f"mask shape {mask.shape} != image {image.shape[:2]}")
        t_start = float(trailer.get("t_start", 0.6))
        steps = int(trailer.get("steps", 10))
        tag = trailer.get("prompt_tag", "global")
        guidance = float(trailer.get("guidance", 0.0))
        if tag not in PROMPTS:
            raise HTTPException(400, f"unknown prompt_tag {tag!r}")
        # Deterministic per request: the noise seed is derived from the bytes.
        seed = int.from_bytes(hashlib.sha256(body).digest()[:8], "little")
        lock = _acquire_model()
        try:
            out = model.inpaint(image, mask, t_start, steps, tag, guidance,
                                np.random.default_rng(seed))
        except ValueError as exc:
            raise HTTPException(400, str(exc))
        except Exception as exc:
            raise HTTPException(500, f"inpaint failed: {exc}")
        finally:
            lock.release()
        return _tensor_response([out])

    @app.post("/monodepth")
    async def monodepth_endpoint(request: Request):
        from . import model as model_mod
        tensors, _ = _parse_body(await request.body(), 1, 1, "/monodepth")
        (image,) = tensors
        if image.ndim != 3 or image.shape[2] != 3:
            raise HTTPException(400, f"/monodepth expects an (H, W, 3) image, got {image.shape}")
        return _tensor_response([model_mod.monodepth(image)])

    def _load_upload(upload: UploadFile) -> np.ndarray:
        img = Image.open(io.BytesIO(upload.file.read()))
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0

    @app.post("/personalize")
    async def personalize_endpoint(image: UploadFile = File(...),
                                   mask: UploadFile | None = File(None),
                                   config: str = Form("{}")):
        try:
            overrides = json.loads(config)
        except json.JSONDecodeError as exc:
            raise HTTPException(400, f"config is not valid JSON: {exc}")
        known = {f.name for f in fields(PersonalizeConfig)}
        unknown = set(overrides) - known
        if unknown:
            raise HTTPException(400, f"unknown config keys {sorted(unknown)}")
        cfg = PersonalizeConfig(**overrides)
        ref = _load_upload(image)
        if min(ref.shape[:2]) < cfg.min_reference_size:
            raise HTTPException(400, f"reference shortest side {min(ref.shape[:2])} "
                                     f"is below the required {cfg.min_reference_size}")
        roi = None
        if mask is not None:
            m = Image.open(io.BytesIO(mask.file.read())).convert("L")
            roi = np.asarray(m, dtype=np.uint8) >= 128
            if roi.shape != ref.shape[:2]:
                raise HTTPException(400, f"mask shape {roi.shape} != image {ref.shape[:2]}")
        job_id = uuid.uuid4().hex
        job = {"status": "queued", "step": 0, "steps": cfg.steps, "error": None}
        state.jobs[job_id] = job

        def run():
            with state.lock:
                job["status"] = "running"
                try:
                    def progress(step, total):
                        job["step"] = step
                    losses = personalize(model, ref, roi, cfg, progress=progress)
                    adapter = {k: v for k, v in model.state_dict().items()
                               if "lora_" in k}
                    torch.save(adapter, weights_dir / f"{job_id}.pt")
                    job["final_loss"] = losses[-1] if losses else None
                    job["status"] = "done"
                except Exception as exc:  # surfaced via /status
                    job["status"] = "failed"
                    job["error"] = str(exc)

        threading.Thread(target=run, daemon=True).start()
        return JSONResponse({"job_id": job_id})

    @app.get("/status/{job_id}")
    async def status(job_id: str):
        job = state.jobs.get(job_id)
        if job is None:
            raise HTTPException(404, f"unknown job {job_id}")
        return JSONResponse(job)

    return app


def main(argv=None) -> int:
    import argparse

    import uvicorn

    parser = argparse.ArgumentParser(prog="prior-server",
                                     description="Serve the inpainting prior over HTTP.")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8000)
    parser.add_argument("--resolution", type=int, default=64,
                        help="model operating resolution")
    parser.add_argument("--seed", type=int, default=0, help="model weight seed")
    parser.add_argument("--weights-dir", default="adapters",
                        help="directory for trained adapter checkpoints")
    parser.add_argument("--pretrain-steps", type=int, default=0,
                        help="generic base-model pretraining steps at startup")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO)
    cfg = ModelConfig(resolution=args.resolution, seed=args.seed)
    served = InpaintPrior(cfg)
    if args.pretrain_steps:
        from .personalize import pretrain_base
        log.info("pretraining base model for %d steps", args.pretrain_steps)
        pretrain_base(served, steps=args.pretrain_steps)
    app = create_app(served, args.weights_dir)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
