"""Diffusion guidance: noise schedule, timestep annealing, classifier-free
guidance with the std-rescale trick, score-distillation pixel gradients.

Score models are pluggable: an analytic mock whose gradient is known in
closed form (the verification oracle) and an HTTP client speaking the
predict_noise wire protocol.
"""

from __future__ import annotations

import base64
import numpy as np
import requests

MAX_IMAGE_SIDE = 1024
DEFAULT_TIMEOUT = 120.0


class DiffusionSchedule:
    """Linear-beta schedule, T=1000."""

    def __init__(self, n_steps=1000, beta_start=1e-4, beta_end=2e-2):
        self.n_steps = n_steps
        self.betas = np.linspace(beta_start, beta_end, n_steps)
        self.alpha_bar = np.cumprod(1.0 - self.betas)

    def alpha_bar_at(self, t: float) -> float:
        """t in (0, 1] mapped to the discrete schedule by round(t * (T-1))."""
        idx = int(round(t * (self.n_steps - 1)))
        return float(self.alpha_bar[np.clip(idx, 0, self.n_steps - 1)])


SCHEDULE = DiffusionSchedule()


def noise_for_seed(shape, seed) -> np.ndarray:
    return np.random.default_rng(int(seed)).standard_normal(shape)


def noisy_image(image, t, seed):
    ab = SCHEDULE.alpha_bar_at(t)
    eps = noise_for_seed(np.shape(image), seed)
    return np.sqrt(ab) * np.asarray(image) + np.sqrt(1.0 - ab) * eps, eps


def sample_timestep(step, stage, rng, anneal_steps=8000):
    """Uniform draw in the stage's current [t_min, t_max] band; the coarse
    band's upper end anneals 0.98 -> 0.5 over the first `anneal_steps`."""
    t_min = 0.02
    if stage == "coarse":
        frac = min(max(step, 0) / anneal_steps, 1.0)
        t_max = 0.98 + frac * (0.5 - 0.98)
    elif stage == "fine":
        t_max = 0.5
    else:
        raise ValueError(f"unknown stage {stage!r}")
    return float(rng.uniform(t_min, t_max))


def cfg_rescale(eps_uncond, eps_cond, noisy, t, scale, factor):
    """Guidance combination eps_u + s (eps_c - eps_u), followed by per-channel
    std matching of the denoised x0 against the positive branch."""
    ab = SCHEDULE.alpha_bar_at(t)
    sq_ab = np.sqrt(ab)
    sq_1m = np.sqrt(1.0 - ab)

    eps_cfg = eps_uncond + scale * (eps_cond - eps_uncond)
    if factor == 0.0:
        return eps_cfg

    def x0_of(eps):
        return (noisy - sq_1m * eps) / sq_ab

    x0_cfg = x0_of(eps_cfg)
    x0_pos = x0_of(eps_cond)
    axes = tuple(range(x0_cfg.ndim - 1))  # per channel over pixels
    std_cfg = x0_cfg.std(axis=axes)
    std_pos = x0_pos.std(axis=axes)
    ratio = np.where(std_cfg > 0.0, std_pos / np.where(std_cfg > 0, std_cfg, 1.0), 1.0)
    x0_res = factor * x0_cfg * ratio + (1.0 - factor) * x0_cfg
    return (noisy - sq_ab * x0_res) / sq_1m


class MockTargetGuidance:
    """Analytic score model pulling renders toward a frozen reference image.

    eps_cond reconstructs the per-view target, eps_uncond a 0.5-gray image,
    so the resulting SDS gradient has a closed form the tests verify.
    """

    def __init__(self, target_renderer):
        """target_renderer: (pose, camera) -> (H, W, 3) float image."""
        self.target_renderer = target_renderer

    def predict(self, image, condition, prompt, t, seed, view=None):
        if view is None:
            raise ValueError("mock guidance needs the (pose, camera) view")
        target = np.asarray(self.target_renderer(*view))
        ab = SCHEDULE.alpha_bar_at(t)
        noisy, _ = noisy_image(image, t, seed)
        gray = np.full_like(target, 0.5)
        denom = np.sqrt(1.0 - ab)
        eps_cond = (noisy - np.sqrt(ab) * target) / denom
        eps_uncond = (noisy - np.sqrt(ab) * gray) / denom
        return eps_cond, eps_uncond


def sds_pixel_gradient(model, image, condition, prompt, step, stage,
                       cfg_scale=7.5, rescale=0.5, rng=None, seed=None,
                       t=None, view=None, negative_prompt=""):
    """omega(t) (eps_hat - eps) in pixel space; the caller backpropagates it
    through the renderer. omega(t) = 1 - alpha_bar(t)."""
    image = np.asarray(image, dtype=np.float64)
    if t is None:
        t = sample_timestep(step, stage, rng)
    if seed is None:
        seed = int(rng.integers(0, 2 ** 63 - 1))
    noisy, eps = noisy_image(image, t, seed)
    eps_cond, eps_uncond = model.predict(image, condition, prompt, t, seed,
                                         view=view)
    eps_hat = cfg_rescale(eps_uncond, eps_cond, noisy, t, cfg_scale, rescale)
    omega = 1.0 - SCHEDULE.alpha_bar_at(t)
    return omega * (eps_hat - eps), t


# ---------------------------------------------------------------------------
# wire protocol


class GuidanceError(RuntimeError):
    pass


class GuidanceTimeout(GuidanceError):
    pass


class GuidanceProtocolError(GuidanceError):
    pass


class GuidanceShapeError(GuidanceError):
    pass


def _b64(arr):
    return base64.b64encode(
        np.ascontiguousarray(arr, dtype="<f4").tobytes()).decode()


def _unb64(payload, shape):
    try:
        raw = base64.b64decode(payload)
    except Exception as e:
        raise GuidanceProtocolError(f"bad base64 payload: {e}") from None
    arr = np.frombuffer(raw, dtype="<f4")
    if arr.size != int(np.prod(shape)):
        raise GuidanceShapeError(
            f"payload has {arr.size} floats, expected shape {shape}")
    return arr.reshape(shape).astype(np.float64)


def build_request(image, condition, prompt, negative_prompt, t, seed):
    image = np.asarray(image)
    h, w = image.shape[:2]
    if h > MAX_IMAGE_SIDE or w > MAX_IMAGE_SIDE:
        raise GuidanceShapeError(
            f"image {w}x{h} exceeds the {MAX_IMAGE_SIDE} side limit")
    cond = condition.channels() if hasattr(condition, "channels") else np.asarray(condition)
    if cond.shape[:2] != (h, w):
        raise GuidanceShapeError("condition map does not match image size")
    return {
        "version": 1,
        "width": w,
        "height": h,
        "image_b64": _b64(image),
        "condition_b64": _b64(cond),
        "prompt": prompt,
        "negative_prompt": negative_prompt,
        "t": float(t),
        "seed": int(seed),
    }


def remote_predict(endpoint, request, timeout=DEFAULT_TIMEOUT):
    """POST the request; returns (eps_cond, eps_uncond) as float64 arrays."""
    url = endpoint.rstrip("/") + "/v1/predict_noise"
    try:
        resp = requests.post(url, json=request, timeout=timeout)
    except requests.Timeout as e:
        raise GuidanceTimeout(f"guidance endpoint timed out: {e}") from None
    except requests.RequestException as e:
        raise GuidanceError(f"guidance endpoint unreachable: {e}") from None
    try:
        doc = resp.json()
    except ValueError:
        raise GuidanceProtocolError(
            f"non-JSON response (status {resp.status_code})") from None
    if resp.status_code != 200:
        raise GuidanceProtocolError(
            f"status {resp.status_code}: {doc.get('error', 'unknown error')}")
    for key in ("eps_cond_b64", "eps_uncond_b64"):
        if key not in doc:
            raise GuidanceProtocolError(f"response missing field {key!r}")
    shape = (request["height"], request["width"], 3)
    return _unb64(doc["eps_cond_b64"], shape), _unb64(doc["eps_uncond_b64"], shape)


class RemoteScoreModel:
    """ScoreModel backed by a predict_noise service. One step is retried
    once on failure; the client must not be shared across concurrent steps."""

    def __init__(self, endpoint, timeout=DEFAULT_TIMEOUT, negative_prompt=""):
        self.endpoint = endpoint
        self.timeout = timeout
        self.negative_prompt = negative_prompt

    def predict(self, image, condition, prompt, t, seed, view=None):
        req = build_request(image, condition, prompt, self.negative_prompt,
                            t, seed)
        try:
            return remote_predict(self.endpoint, req, self.timeout)
        except GuidanceError:
            return remote_predict(self.endpoint, req, self.timeout)
