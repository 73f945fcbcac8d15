"""HTTP client for an external denoising-prior / depth service.

Tensor wire format ("RFTN"): each tensor is a binary blob starting with
the 4-byte magic ``RFTN``, a u8 dtype code (0 = float32), a u8 rank, a
u16 reserved field, and four little-endian u32 dims (unused trailing dims
zero), followed by the tensor's little-endian float32 data in row-major
order. Request bodies concatenate one or more tensors; an optional JSON
trailer (scalar parameters) follows the last tensor.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np
import requests

from .guidance import Condition, DenoisePrior, LatentImage, NoiseSchedule, PriorError
from .scene import InvalidInputError

MAGIC = b"RFTN"
DTYPE_FLOAT32 = 0
_HEADER = struct.Struct("<4sBBH4I")
MAX_RANK = 4
ENV_PRIOR_URL = "REFSPLAT_PRIOR_URL"


class WireFormatError(InvalidInputError):
    pass


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim == 0 or arr.ndim > MAX_RANK:
        raise WireFormatError(f"tensor rank {arr.ndim} outside 1..{MAX_RANK}")
    dims = list(arr.shape) + [0] * (MAX_RANK - arr.ndim)
    header = _HEADER.pack(MAGIC, DTYPE_FLOAT32, arr.ndim, 0, *dims)
    return header + arr.tobytes()


def decode_tensor(buf: bytes, offset: int = 0):
    """Decode one tensor starting at `offset`; returns (array, next_offset)."""
    if len(buf) - offset < _HEADER.size:
        raise WireFormatError("buffer too short for tensor header")
    magic, dtype, rank, _, d0, d1, d2, d3 = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise WireFormatError(f"bad magic {magic!r}")
    if dtype != DTYPE_FLOAT32:
        raise WireFormatError(f"unsupported dtype code {dtype}")
    if rank < 1 or rank > MAX_RANK:
        raise WireFormatError(f"unsupported rank {rank}")
    dims = (d0, d1, d2, d3)[:rank]
    if any(d == 0 for d in dims):
        raise WireFormatError(f"zero-sized dim in {dims}")
    count = int(np.prod(dims))
    start = offset + _HEADER.size
    end = start + 4 * count
    if len(buf) < end:
        raise WireFormatError("tensor body truncated")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=start)
    return arr.reshape(dims).astype(np.float64), end


def pack_body(tensors, trailer: dict | None = None) -> bytes:
    parts = [encode_tensor(t) for t in tensors]
    if trailer is not None:
        parts.append(json.dumps(trailer).encode("utf-8"))
    return b"".join(parts)


def unpack_body(buf: bytes):
    """Split a body into (tensors, trailer). The trailer is whatever
    trails the last well-formed tensor; tensors always start with the
    magic, JSON never does."""
    tensors = []
    offset = 0
    while len(buf) - offset >= _HEADER.size and buf[offset : offset + 4] == MAGIC:
        arr, offset = decode_tensor(buf, offset)
        tensors.append(arr)
    rest = buf[offset:]
    trailer = json.loads(rest.decode("utf-8")) if rest.strip() else None
    return tensors, trailer


def resolve_prior_url(url: str | None) -> str | None:
    return os.environ.get(ENV_PRIOR_URL) or url


class RemotePrior(DenoisePrior):
    """DenoisePrior backed by an HTTP service speaking the RFTN protocol."""

    def __init__(self, base_url: str, schedule: NoiseSchedule | None = None,
                 timeout: float = 120.0, session=None):
        self.base_url = base_url.rstrip("/")
        self.schedule = schedule or NoiseSchedule()
        self.timeout = timeout
        self.session = session or requests.Session()
        self.codec_id = f"remote:{self.base_url}"

    def _post(self, endpoint: str, tensors, trailer=None) -> list:
        url = f"{self.base_url}{endpoint}"
        try:
            resp = self.session.post(
                url,
                data=pack_body(tensors, trailer),
                headers={"Content-Type": "application/octet-stream"},
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise PriorError(f"request to {url} failed: {exc}") from exc
        if resp.status_code != 200:
            raise PriorError(f"{url} returned HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            out, _ = unpack_body(resp.content)
        except WireFormatError as exc:
            raise PriorError(f"{url} returned a malformed tensor body: {exc}") from exc
        if not out:
            raise PriorError(f"{url} returned no tensors")
        return out

    def encode(self, image: np.ndarray) -> LatentImage:
        (z,) = self._post("/encode", [image])
        return LatentImage(z, self.codec_id)

    def decode(self, latent: LatentImage) -> np.ndarray:
        (img,) = self._post("/decode", [latent.tensor])
        return img

    def encode_adjoint(self, latent_grad: np.ndarray, image_shape) -> np.ndarray:
        H, W = image_shape
        try:
            (g,) = self._post("/encode_vjp", [latent_grad], {"height": H, "width": W})
            return g
        except PriorError:
            # Fallback: treat the encoder as k x k average pooling.
            c, h, w = latent_grad.shape
            if H % h or W % w or H // h != W // w:
                raise
            k = H // h
            g = np.moveaxis(latent_grad, 0, -1)
            up = np.repeat(np.repeat(g, k, axis=0), k, axis=1)
            return up / (k * k)

    def denoise(self, z_t: np.ndarray, t: float, condition: Condition) -> np.ndarray:
        tensors = [z_t]
        trailer = {
            "t": float(t),
            "guidance": float(condition.guidance),
            "prompt_tag": condition.prompt_tag,
        }
        if condition.mask is not None and condition.masked_latent is not None:
            tensors.append(condition.mask)
            tensors.append(condition.masked_latent.tensor)
        (eps,) = self._post("/denoise", tensors, trailer)
        if eps.shape != z_t.shape:
            raise PriorError(f"denoise returned shape {eps.shape}, expected {z_t.shape}")
        return eps

    def inpaint(self, image: np.ndarray, mask: np.ndarray, prompt_tag: str = "global",
                guidance: float = 7.5) -> np.ndarray:
        (out,) = self._post(
            "/inpaint", [image, mask], {"prompt_tag": prompt_tag, "guidance": float(guidance)}
        )
        return out


class RemoteDepthOracle:
    """Monocular-depth oracle served over HTTP (/monodepth)."""

    def __init__(self, base_url: str, timeout: float = 120.0, session=None):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.session = session or requests.Session()

    def __call__(self, image: np.ndarray, camera) -> np.ndarray:
        url = f"{self.base_url}/monodepth"
        try:
            resp = self.session.post(
                url,
                data=pack_body([image]),
                headers={"Content-Type": "application/octet-stream"},
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise PriorError(f"request to {url} failed: {exc}") from exc
        if resp.status_code != 200:
            raise PriorError(f"{url} returned HTTP {resp.status_code}")
        tensors, _ = unpack_body(resp.content)
        if not tensors:
            raise PriorError(f"{url} returned no tensors")
        depth = tensors[0]
        if depth.shape != image.shape[:2]:
            raise PriorError(f"monodepth returned shape {depth.shape}")
        return depth
