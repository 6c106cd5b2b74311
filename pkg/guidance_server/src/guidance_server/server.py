"""predict_noise service.

Implements POST /v1/predict_noise per the shared schema fixture
(schema/predict_noise.schema.json at the repository root). Payload arrays
travel as base64 little-endian float32 with shape (height, width, 3).

Backends are pluggable behind a two-method interface. A real
DensePose-conditioned diffusion model would encode the image to latents,
run conditional/unconditional UNet passes at timestep round(t * 999) and
decode the epsilon predictions back to pixel space; that wiring needs a
multi-GB checkpoint and is intentionally not bundled. The service ships:

  * StubBackend: eps_cond = eps_uncond = 0, for client conformance tests.
  * GrayPullBackend: analytic epsilons that reconstruct a 0.5-gray image,
    deterministic given the request seed, for end-to-end plumbing checks.

The condition channels arrive as the protocol's IUV packing
(part / 24, u, v). A model trained on a different DensePose RGB encoding
must remap inside its backend; both bundled backends ignore the condition.

One request is in flight per model instance; concurrent requests queue on
an internal lock.
"""

from __future__ import annotations

import base64
import threading
from dataclasses import dataclass

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

PROTOCOL_VERSION = 1

# linear-beta diffusion schedule, matching the client side of the protocol
_BETAS = np.linspace(1e-4, 2e-2, 1000)
_ALPHA_BAR = np.cumprod(1.0 - _BETAS)


def alpha_bar_at(t: float) -> float:
    idx = int(round(t * 999))
    return float(_ALPHA_BAR[min(max(idx, 0), 999)])


@dataclass
class ServerConfig:
    model: str | None = None
    device: str = "cpu"
    max_side: int = 1024
    port: int = 8399
    stub: bool = False


class StubBackend:
    """Zero noise predictions; the SDS gradient reduces to -omega * eps."""

    name = "stub"

    def predict(self, image, condition, prompt, negative_prompt, t, seed):
        zero = np.zeros_like(image, dtype=np.float64)
        return zero, zero.copy()


class GrayPullBackend:
    """Analytic epsilons whose denoised x0 is a 0.5-gray image, so avatar
    optimization against this backend washes renders toward gray. Useful
    for exercising the full client/server loop without a diffusion model."""

    name = "gray-pull"

    def predict(self, image, condition, prompt, negative_prompt, t, seed):
        ab = alpha_bar_at(t)
        eps = np.random.default_rng(int(seed)).standard_normal(image.shape)
        noisy = np.sqrt(ab) * image + np.sqrt(1.0 - ab) * eps
        gray = np.full_like(image, 0.5)
        eps_hat = (noisy - np.sqrt(ab) * gray) / np.sqrt(1.0 - ab)
        return eps_hat, eps_hat.copy()


BACKENDS = {"stub": StubBackend, "gray-pull": GrayPullBackend}


def make_backend(config: ServerConfig):
    if config.stub:
        return StubBackend()
    if config.model is None:
        raise ValueError("a backend is required: pass --stub or --model")
    if config.model in BACKENDS:
        return BACKENDS[config.model]()
    raise ValueError(
        f"unknown model {config.model!r}; bundled backends: "
        f"{sorted(BACKENDS)} (real diffusion checkpoints are not shipped)")


class RequestError(ValueError):
    def __init__(self, status, message):
        super().__init__(message)
        self.status = status


def _decode_array(doc, key, shape):
    try:
        raw = base64.b64decode(doc[key])
    except Exception as e:
        raise RequestError(400, f"{key}: bad base64 ({e})") from None
    arr = np.frombuffer(raw, dtype="<f4")
    if arr.size != int(np.prod(shape)):
        raise RequestError(
            400, f"{key}: {arr.size} floats, expected shape {shape}")
    return arr.reshape(shape).astype(np.float64)


def _b64(arr):
    return base64.b64encode(
        np.ascontiguousarray(arr, dtype="<f4").tobytes()).decode()


def parse_request(doc, max_side):
    if not isinstance(doc, dict):
        raise RequestError(400, "request body must be a JSON object")
    for key in ("version", "width", "height", "image_b64", "condition_b64",
                "prompt", "negative_prompt", "t", "seed"):
        if key not in doc:
            raise RequestError(400, f"missing field {key!r}")
    if doc["version"] != PROTOCOL_VERSION:
        raise RequestError(400, f"unsupported version {doc['version']!r}")
    try:
        w = int(doc["width"])
        h = int(doc["height"])
        t = float(doc["t"])
        seed = int(doc["seed"])
    except (TypeError, ValueError):
        raise RequestError(400, "width/height/t/seed have wrong types") \
            from None
    if w < 1 or h < 1:
        raise RequestError(400, "width and height must be positive")
    if w > max_side or h > max_side:
        raise RequestError(
            413, f"image {w}x{h} exceeds the {max_side} side limit")
    if not 0.0 < t <= 1.0:
        raise RequestError(400, f"t must lie in (0, 1], got {t}")
    image = _decode_array(doc, "image_b64", (h, w, 3))
    condition = _decode_array(doc, "condition_b64", (h, w, 3))
    return {"image": image, "condition": condition,
            "prompt": str(doc["prompt"]),
            "negative_prompt": str(doc["negative_prompt"]),
            "t": t, "seed": seed}


def create_app(config: ServerConfig, backend=None) -> FastAPI:
    backend = backend or make_backend(config)
    app = FastAPI(title="guidance-server")
    lock = threading.Lock()
    app.state.backend = backend
    app.state.config = config

    @app.post("/v1/predict_noise")
    async def predict_noise(request: Request):
        try:
            doc = await request.json()
        except Exception:
            return JSONResponse({"error": "malformed JSON body"},
                                status_code=400)
        try:
            req = parse_request(doc, config.max_side)
        except RequestError as e:
            return JSONResponse({"error": str(e)}, status_code=e.status)
        try:
            with lock:  # one in-flight request per model instance
                eps_cond, eps_uncond = backend.predict(
                    req["image"], req["condition"], req["prompt"],
                    req["negative_prompt"], req["t"], req["seed"])
        except Exception as e:
            return JSONResponse({"error": f"model failure: {e}"},
                                status_code=500)
        return JSONResponse({"eps_cond_b64": _b64(eps_cond),
                             "eps_uncond_b64": _b64(eps_uncond)})

    @app.get("/healthz")
    async def healthz():
        return {"status": "ok", "backend": getattr(backend, "name",
                                                   type(backend).__name__)}

    return app
